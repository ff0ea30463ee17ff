#pragma once

#include "dsspn/tensor.hpp"
#include "dsspn/kernels.hpp"
#include "dsspn/autodiff.hpp"
#include "dsspn/ops.hpp"
#include "dsspn/optim.hpp"
#include "dsspn/tensor_io.hpp"
#include "dsspn/hierarchy.hpp"
#include "dsspn/model.hpp"
#include "dsspn/workspace.hpp"
#include "dsspn/dynamic_exec.hpp"
#include "dsspn/autobatch.hpp"
#include "dsspn/inference.hpp"
#include "dsspn/metrics.hpp"
#include "dsspn/synth.hpp"
#include "dsspn/dataset.hpp"
#include "dsspn/checkpoint.hpp"
#include "dsspn/train.hpp"
#include "dsspn/gradcheck.hpp"

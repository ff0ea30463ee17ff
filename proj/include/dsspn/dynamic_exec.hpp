#pragma once

#include <algorithm>
#include <cstring>
#include <map>
#include <optional>
#include <vector>

#include "dsspn/hierarchy.hpp"
#include "dsspn/model.hpp"
#include "dsspn/ops.hpp"
#include "dsspn/workspace.hpp"

namespace dsspn {

// Neurons awakened for one sample, in depth-first preorder (parent before
// child, siblings by concept id), with each neuron's neuron-ancestor path.
struct ActivationPlan {
  std::size_t sample{0};
  std::vector<ConceptId> neurons;
  std::map<ConceptId, std::vector<ConceptId>> paths;

  bool contains(ConceptId c) const { return paths.count(c) > 0; }
  std::size_t size() const { return neurons.size(); }
};

namespace detail {

inline ActivationPlan order_plan(const ConceptHierarchy& h, const ConceptSet& activated, std::size_t sample) {
  std::map<ConceptId, std::vector<ConceptId>> kids;
  std::vector<ConceptId> tops;
  for (ConceptId n : activated) {
    auto p = h.parent_neuron(n);
    if (p && activated.count(*p)) {
      kids[*p].push_back(n);
    } else if (p) {
      throw ValidationError(str_cat("activation set is not ancestor-closed: '", h.name(n), "' lacks '", h.name(*p), "'"));
    } else {
      tops.push_back(n);
    }
  }
  ActivationPlan plan;
  plan.sample = sample;
  std::vector<ConceptId> stack(tops.rbegin(), tops.rend());
  while (!stack.empty()) {
    const ConceptId n = stack.back();
    stack.pop_back();
    plan.neurons.push_back(n);
    plan.paths.emplace(n, h.neuron_ancestors(n));
    auto it = kids.find(n);
    if (it != kids.end()) stack.insert(stack.end(), it->second.rbegin(), it->second.rend());
  }
  return plan;
}

}  // namespace detail

// Every neuron with at least one child the dataset can reach.
inline ActivationPlan fixed_plan(const ConceptHierarchy& h, const DatasetBinding& binding, std::size_t sample = 0) {
  ConceptSet activated;
  for (ConceptId n : h.neuron_concepts()) {
    if (binding.any_child(n)) activated.insert(n);
  }
  return detail::order_plan(h, activated, sample);
}

// Dynamic: neurons among the strict ancestors of the present concepts.
// Fixed: every neuron with at least one child the dataset can reach.
inline ActivationPlan plan_activation(const ConceptSet& present, const ConceptHierarchy& h, const DatasetBinding& binding,
                                      Structure mode = Structure::kDynamic, std::size_t sample = 0) {
  if (present.empty()) throw ValidationError("plan_activation: empty present-concept set");
  for (ConceptId c : present) {
    if (!binding.is_defined(c)) {
      throw BindingError(str_cat("plan_activation: concept '", h.name(c), "' is not defined by dataset '", binding.name(), "'"));
    }
  }
  if (mode == Structure::kFixed) return fixed_plan(h, binding, sample);
  ConceptSet activated;
  for (ConceptId c : h.ancestor_closure(present)) {
    if (h.is_neuron(c)) activated.insert(c);
  }
  return detail::order_plan(h, activated, sample);
}

// Concepts of the binding that occur at one or more non-ignored pixels.
inline ConceptSet present_concepts(const LabelMap& labels, const DatasetBinding& binding) {
  ConceptSet out;
  std::set<int> seen;
  for (int v : labels.values) {
    if (v == LabelMap::kIgnore || !seen.insert(v).second) continue;
    out.insert(binding.concept_of(v));
  }
  return out;
}

template <typename T>
struct NeuronTarget {
  Tensor<T> targets;           // (1, T_i, h, w) binary
  Tensor<T> valid;             // (1, 1, h, w) binary
  std::vector<bool> child_mask;
  Tensor<int> child_index;     // (1, 1, h, w) routed child or -1

  // Per-logit mask: pixel validity times the dataset child mask.
  Tensor<T> loss_mask() const {
    const Shape s = targets.shape();
    Tensor<T> m(s);
    for (std::size_t k = 0; k < s.c; ++k) {
      if (!child_mask[k]) continue;
      for (std::size_t p = 0; p < s.plane(); ++p) m[k * s.plane() + p] = valid[p];
    }
    return m;
  }
};

template <typename T>
using SupervisionTarget = std::map<ConceptId, NeuronTarget<T>>;

// Per-neuron binary targets. Labels are dataset label ids at feature
// resolution. A pixel is supervised at neuron n only when its concept lies
// strictly below n; the child on that route is the positive, the other
// unmasked children are negatives.
template <typename T>
SupervisionTarget<T> build_supervision(const LabelMap& labels, const ActivationPlan& plan, const ConceptHierarchy& h,
                                       const DatasetBinding& binding) {
  const Shape plane_shape{1, 1, labels.height, labels.width};
  SupervisionTarget<T> out;
  for (ConceptId n : plan.neurons) {
    NeuronTarget<T> t;
    t.targets = Tensor<T>(Shape{1, h.children(n).size(), labels.height, labels.width});
    t.valid = Tensor<T>(plane_shape);
    t.child_mask = binding.child_mask(n);
    t.child_index = Tensor<int>(plane_shape, -1);
    out.emplace(n, std::move(t));
  }
  std::map<ConceptId, std::vector<std::pair<ConceptId, std::size_t>>> routes;
  const std::size_t plane = labels.size();
  for (std::size_t p = 0; p < plane; ++p) {
    const int label = labels.values[p];
    if (label == LabelMap::kIgnore) continue;
    const ConceptId c = binding.concept_of(label);
    auto it = routes.find(c);
    if (it == routes.end()) {
      std::vector<std::pair<ConceptId, std::size_t>> r;
      for (ConceptId n : h.neuron_ancestors(c)) {
        if (!plan.contains(n)) {
          throw ValidationError(str_cat("build_supervision: concept '", h.name(c), "' needs neuron '", h.name(n),
                                        "' which the plan did not activate"));
        }
        r.emplace_back(n, *h.route_child(n, c));
      }
      it = routes.emplace(c, std::move(r)).first;
    }
    for (const auto& [n, k] : it->second) {
      NeuronTarget<T>& t = out.at(n);
      if (!t.child_mask[k]) continue;
      t.valid[p] = T{1};
      t.targets[k * plane + p] = T{1};
      t.child_index[p] = static_cast<int>(k);
    }
  }
  return out;
}

// Nearest-neighbour subsampling of a full-resolution label map by `stride`,
// taking the pixel nearest to each output cell's centre.
inline LabelMap subsample_labels(const LabelMap& labels, std::size_t stride) {
  if (labels.height % stride != 0 || labels.width % stride != 0) {
    throw ShapeError(str_cat("subsample_labels: ", labels.height, "x", labels.width, " not divisible by ", stride));
  }
  LabelMap out(labels.height / stride, labels.width / stride);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) out.at(y, x) = labels.at(y * stride + stride / 2, x * stride + stride / 2);
  }
  return out;
}

template <typename T>
using PlanOutputs = std::map<ConceptId, NeuronResult<T>>;

struct ForwardOptions {
  ConcatMode concat{ConcatMode::kFused};
};

struct MemoryStats {
  std::size_t peak_live_buffers{0};
  std::size_t neuron_executions{0};
};

template <typename T>
struct PlanForward {
  Var<T> h0;
  PlanOutputs<T> outputs;
  MemoryStats memory;
};

namespace detail {

template <typename T>
std::vector<Var<T>> neuron_inputs(const NeuronGraph<T>& g, const Var<T>& h0, const std::vector<ConceptId>& path,
                                  const std::map<ConceptId, Var<T>>& hidden) {
  if (g.config().propagation == Propagation::kParentOnly) {
    return {path.empty() ? h0 : hidden.at(path.back())};
  }
  std::vector<Var<T>> inputs{h0};
  for (ConceptId a : path) inputs.push_back(hidden.at(a));
  return inputs;
}

}  // namespace detail

// Runs stem, transition and every planned neuron for a single image.
//
// With a workspace and dense concatenation, slot d holds the depth-d
// neuron's concatenated input, built from slot d-1 plus the parent's h.
// Otherwise, in materialized mode, each neuron keeps its own concatenated
// copy of d feature maps, and peak_live_buffers counts those copies.
template <typename T>
PlanForward<T> forward_plan(Tape<T>& tape, const NeuronGraph<T>& g, const Var<T>& image, const ActivationPlan& plan,
                            ForwardOptions options = {}, PathWorkspace<T>* workspace = nullptr) {
  if (image.shape().n != 1) throw ShapeError("forward_plan expects a single image");
  PlanForward<T> r;
  r.h0 = transition_forward(tape, g, stem_forward(tape, g, image));
  const ModelConfig& cfg = g.config();
  const bool dense_concat = cfg.propagation == Propagation::kDense && cfg.aggregation == Aggregation::kConcat;
  const bool use_ws = workspace && dense_concat && options.concat == ConcatMode::kFused;
  std::map<ConceptId, Var<T>> hidden;
  std::vector<typename PathWorkspace<T>::Handle> live;
  const std::size_t plane = r.h0.shape().plane();
  if (use_ws) {
    live.push_back(workspace->acquire(0, r.h0.shape()));
    auto src = r.h0.value().data();
    std::copy(src.begin(), src.end(), workspace->buffer(live.back()).begin());
  }
  std::size_t materialized = 0;
  for (ConceptId n : plan.neurons) {
    const NeuronParams& np = g.neuron(n);
    const auto& path = plan.paths.at(n);
    auto inputs = detail::neuron_inputs(g, r.h0, path, hidden);
    NeuronResult<T> res;
    if (use_ws) {
      const std::size_t d = np.depth;
      while (live.size() > d) {
        workspace->release(live.back());
        live.pop_back();
      }
      if (live.size() != d) throw std::logic_error("forward_plan: plan is not in depth-first order");
      const Shape prev = workspace->shape(live.back());
      const Shape cur{1, np.in_channels, prev.h, prev.w};
      live.push_back(workspace->acquire(d, cur));
      auto dst = workspace->buffer(live.back());
      auto src = workspace->buffer(live[d - 1]);
      // Slot 1 repeats h0; deeper slots append the parent's hidden maps.
      const std::size_t prefix = d == 1 ? 0 : prev.c * plane;
      std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(prefix), dst.begin());
      auto tail = (d == 1 ? r.h0 : hidden.at(path.back())).value().data();
      std::copy(tail.begin(), tail.end(), dst.begin() + static_cast<std::ptrdiff_t>(prefix));
      res = neuron_forward(tape, g, n, inputs, ConcatMode::kFused, dst, true);
    } else {
      if (dense_concat && options.concat == ConcatMode::kMaterialized) materialized += inputs.size();
      res = neuron_forward(tape, g, n, inputs, options.concat);
    }
    hidden.emplace(n, res.hidden);
    r.outputs.emplace(n, res);
    ++r.memory.neuron_executions;
  }
  while (use_ws && !live.empty()) {
    workspace->release(live.back());
    live.pop_back();
  }
  r.memory.peak_live_buffers = use_ws ? workspace->high_water() : materialized;
  return r;
}

// Sum over supervised neurons of the per-neuron loss: masked binary
// cross-entropy per child, or (ablation) a softmax over unmasked children.
template <typename T>
Var<T> dsspn_loss(Tape<T>& tape, const PlanOutputs<T>& outputs, const SupervisionTarget<T>& targets, const ModelConfig& cfg) {
  std::vector<Var<T>> terms;
  for (const auto& [n, t] : targets) {
    auto it = outputs.find(n);
    if (it == outputs.end()) throw ValidationError(str_cat("dsspn_loss: no output for supervised neuron ", n));
    const Var<T>& logits = it->second.logits;
    if (cfg.head_loss == HeadLoss::kBce) {
      terms.push_back(bce_with_logits(logits, t.targets, t.loss_mask(), cfg.loss_reduction));
    } else {
      terms.push_back(softmax_ce(logits, t.child_index, t.child_mask, cfg.loss_reduction));
    }
  }
  if (terms.empty()) return tape.constant(Tensor<T>::scalar(T{0}));
  return terms.size() == 1 ? terms.front() : add(terms);
}

}  // namespace dsspn

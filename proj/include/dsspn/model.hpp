#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsspn/autodiff.hpp"
#include "dsspn/hierarchy.hpp"
#include "dsspn/ops.hpp"

namespace dsspn {

enum class Aggregation { kConcat, kSum };
enum class Propagation { kDense, kParentOnly };
enum class HeadLoss { kBce, kSoftmax };
enum class Structure { kDynamic, kFixed };

NLOHMANN_JSON_SERIALIZE_ENUM(Aggregation, {{Aggregation::kConcat, "concat"}, {Aggregation::kSum, "sum"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Propagation, {{Propagation::kDense, "dense"}, {Propagation::kParentOnly, "parent_only"}})
NLOHMANN_JSON_SERIALIZE_ENUM(HeadLoss, {{HeadLoss::kBce, "bce"}, {HeadLoss::kSoftmax, "softmax"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Structure, {{Structure::kDynamic, "dynamic"}, {Structure::kFixed, "fixed"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Reduction, {{Reduction::kMean, "mean"}, {Reduction::kSum, "sum"}})

struct ModelConfig {
  std::size_t m{48};                // hidden maps per neuron
  std::size_t m0{256};              // transition output width
  std::size_t bottleneck_mult{4};   // conv1 emits bottleneck_mult * m maps
  std::array<std::size_t, 3> aspp_rates{1, 2, 3};
  std::size_t in_channels{3};
  // Three stride-2 stages (output stride 8) followed by stride-1 stages.
  std::vector<std::size_t> stem_channels{32, 64, 64, 64, 64};
  std::size_t stem_kernel{3};       // kernel of the stride-2 stages
  Aggregation aggregation{Aggregation::kConcat};
  Propagation propagation{Propagation::kDense};
  HeadLoss head_loss{HeadLoss::kBce};
  Structure structure{Structure::kDynamic};
  Reduction loss_reduction{Reduction::kMean};

  static constexpr std::size_t kStrideStages = 3;
  static constexpr std::size_t kOutputStride = 8;

  void validate() const {
    if (m == 0 || m0 == 0 || bottleneck_mult == 0) throw ValidationError("model config: m, m0 and bottleneck_mult must be positive");
    for (auto r : aspp_rates) {
      if (r == 0) throw ValidationError("model config: ASPP rates must be positive");
    }
    if (in_channels == 0) throw ValidationError("model config: in_channels must be positive");
    if (stem_channels.size() < kStrideStages) throw ValidationError("model config: stem needs at least 3 stages");
    for (auto c : stem_channels) {
      if (c == 0) throw ValidationError("model config: stem widths must be positive");
    }
    if (stem_kernel < 2) throw ValidationError("model config: stem_kernel must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"m", c.m},
       {"m0", c.m0},
       {"bottleneck_mult", c.bottleneck_mult},
       {"aspp_rates", c.aspp_rates},
       {"in_channels", c.in_channels},
       {"stem_channels", c.stem_channels},
       {"stem_kernel", c.stem_kernel},
       {"aggregation", c.aggregation},
       {"propagation", c.propagation},
       {"head_loss", c.head_loss},
       {"structure", c.structure},
       {"loss_reduction", c.loss_reduction}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.m = j.value("m", d.m);
  c.m0 = j.value("m0", d.m0);
  c.bottleneck_mult = j.value("bottleneck_mult", d.bottleneck_mult);
  c.aspp_rates = j.value("aspp_rates", d.aspp_rates);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.stem_channels = j.value("stem_channels", d.stem_channels);
  c.stem_kernel = j.value("stem_kernel", d.stem_kernel);
  c.aggregation = j.value("aggregation", d.aggregation);
  c.propagation = j.value("propagation", d.propagation);
  c.head_loss = j.value("head_loss", d.head_loss);
  c.structure = j.value("structure", d.structure);
  c.loss_reduction = j.value("loss_reduction", d.loss_reduction);
  c.validate();
}

// Width of a neuron's conv1 input at neuron depth d (root neuron: d = 1).
inline std::size_t input_channels(std::size_t depth, const ModelConfig& cfg) {
  if (depth == 0) throw ValidationError("input_channels: depth must be >= 1");
  if (cfg.propagation == Propagation::kParentOnly) return depth == 1 ? cfg.m0 : cfg.m;
  if (cfg.aggregation == Aggregation::kSum) return cfg.m;
  return cfg.m0 + cfg.m * (depth - 1);
}

struct ConvParams {
  ParamId weight{0};
  ParamId bias{0};
  ConvGeometry geometry{};
};

struct NeuronParams {
  ConceptId concept_id{0};
  std::size_t depth{1};
  std::size_t in_channels{0};
  std::size_t num_children{0};
  ConvParams conv1;                  // 1x1, in -> bottleneck_mult * m
  ConvParams conv2;                  // 3x3, bottleneck_mult * m -> m
  ConvParams head;                   // 1x1, m -> num_children
  std::optional<ConvParams> proj;    // sum aggregation only: 1x1, m0 -> m
};

template <typename T>
class NeuronGraph {
 public:
  NeuronGraph(ConceptHierarchy hierarchy, ModelConfig config)
      : hierarchy_{std::move(hierarchy)}, config_{std::move(config)} {}

  const ConceptHierarchy& hierarchy() const { return hierarchy_; }
  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  const std::vector<ConvParams>& stem() const { return stem_; }
  const std::array<ConvParams, 3>& transition() const { return transition_; }
  const std::map<ConceptId, NeuronParams>& neurons() const { return neurons_; }
  std::size_t neuron_count() const { return neurons_.size(); }

  const NeuronParams& neuron(ConceptId c) const {
    auto it = neurons_.find(c);
    if (it == neurons_.end()) throw ValidationError(str_cat("concept ", c, " has no neuron"));
    return it->second;
  }

  std::size_t stem_out_channels() const { return config_.stem_channels.back(); }

  // Maximum concatenated width over all neurons.
  std::size_t max_input_channels() const {
    std::size_t w = 0;
    for (const auto& [c, n] : neurons_) w = std::max(w, n.in_channels);
    return w;
  }

  std::size_t max_neuron_depth() const {
    std::size_t d = 0;
    for (const auto& [c, n] : neurons_) d = std::max(d, n.depth);
    return d;
  }

  template <typename U>
  friend NeuronGraph<U> build_model(const ConceptHierarchy& h, const ModelConfig& cfg, std::uint64_t seed);

 private:
  ConceptHierarchy hierarchy_;
  ModelConfig config_;
  ParamStore<T> params_;
  std::vector<ConvParams> stem_;
  std::array<ConvParams, 3> transition_{};
  std::map<ConceptId, NeuronParams> neurons_;
};

namespace detail {

template <typename T>
ConvParams add_conv(ParamStore<T>& store, std::mt19937_64& rng, const std::string& name, std::size_t out_c, std::size_t in_c,
                    std::size_t k, ConvGeometry g, double gain) {
  const double fan_in = static_cast<double>(in_c * k * k);
  const double bound = std::sqrt(gain / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> w(Shape{out_c, in_c, k, k});
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  ConvParams p;
  p.weight = store.add(name + ".weight", std::move(w));
  p.bias = store.add(name + ".bias", Tensor<T>(Shape{out_c, 1, 1, 1}));
  p.geometry = g;
  return p;
}

}  // namespace detail

// Allocates and initializes every parameter. Hidden convolutions use
// U(-sqrt(6/fan_in), sqrt(6/fan_in)); prediction heads use sqrt(1/fan_in).
// Biases start at zero.
template <typename T>
NeuronGraph<T> build_model(const ConceptHierarchy& h, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (h.neuron_concepts().empty()) {
    throw ValidationError("degenerate hierarchy: no concept has two or more children, so there are no neurons");
  }
  NeuronGraph<T> g(h, cfg);
  std::mt19937_64 rng(seed);
  constexpr double kRelu = 6.0;
  constexpr double kHead = 1.0;
  std::size_t in_c = cfg.in_channels;
  for (std::size_t k = 0; k < cfg.stem_channels.size(); ++k) {
    const bool down = k < ModelConfig::kStrideStages;
    const std::size_t ks = down ? cfg.stem_kernel : 3;
    const ConvGeometry geom = down ? ConvGeometry{(ks - 1) / 2, 1, 2} : ConvGeometry::same(3);
    g.stem_.push_back(detail::add_conv(g.params_, rng, str_cat("stem.", k), cfg.stem_channels[k], in_c, ks, geom, kRelu));
    in_c = cfg.stem_channels[k];
  }
  for (std::size_t b = 0; b < 3; ++b) {
    g.transition_[b] = detail::add_conv(g.params_, rng, str_cat("q.branch", b), cfg.m0, in_c, 3,
                                        ConvGeometry::same(3, cfg.aspp_rates[b]), kRelu);
  }
  const std::size_t bottleneck = cfg.bottleneck_mult * cfg.m;
  for (ConceptId c : h.neuron_concepts()) {
    NeuronParams n;
    n.concept_id = c;
    n.depth = h.neuron_depth(c);
    n.in_channels = input_channels(n.depth, cfg);
    n.num_children = h.children(c).size();
    const std::string base = "neuron." + h.name(c);
    const bool sum_mode = cfg.propagation == Propagation::kDense && cfg.aggregation == Aggregation::kSum;
    if (sum_mode) n.proj = detail::add_conv(g.params_, rng, base + ".proj", cfg.m, cfg.m0, 1, ConvGeometry{}, kRelu);
    n.conv1 = detail::add_conv(g.params_, rng, base + ".conv1", bottleneck, n.in_channels, 1, ConvGeometry{}, kRelu);
    n.conv2 = detail::add_conv(g.params_, rng, base + ".conv2", cfg.m, bottleneck, 3, ConvGeometry::same(3), kRelu);
    n.head = detail::add_conv(g.params_, rng, base + ".head", n.num_children, cfg.m, 1, ConvGeometry{}, kHead);
    if (g.params_[n.conv1.weight].value.shape().c != input_channels(n.depth, cfg)) {
      throw ShapeError("neuron " + h.name(c) + ": conv1 width disagrees with input_channels");
    }
    g.neurons_.emplace(c, std::move(n));
  }
  return g;
}

template <typename T>
struct NeuronResult {
  Var<T> hidden;  // h_i, m maps after ReLU
  Var<T> logits;  // P_i, one raw map per child
};

template <typename T>
Var<T> apply_conv(Tape<T>& tape, const NeuronGraph<T>& g, const ConvParams& p, const Var<T>& x) {
  return conv2d(x, tape.parameter(g.params(), p.weight), tape.parameter(g.params(), p.bias), p.geometry);
}

// Backbone substitute: output stride 8 feature map.
template <typename T>
Var<T> stem_forward(Tape<T>& tape, const NeuronGraph<T>& g, const Var<T>& image) {
  const Shape s = image.shape();
  constexpr std::size_t os = ModelConfig::kOutputStride;
  if (s.h % os != 0 || s.w % os != 0) {
    throw ShapeError(str_cat("stem_forward: image extent ", s.h, "x", s.w, " is not divisible by ", os));
  }
  if (s.c != g.config().in_channels) {
    throw ShapeError(str_cat("stem_forward: image has ", s.c, " channels, model expects ", g.config().in_channels));
  }
  Var<T> x = image;
  for (const auto& stage : g.stem()) x = relu(apply_conv(tape, g, stage, x));
  return x;
}

// h0 = ReLU(sum of three dilated 3x3 branches).
template <typename T>
Var<T> transition_forward(Tape<T>& tape, const NeuronGraph<T>& g, const Var<T>& x) {
  if (x.shape().c != g.stem_out_channels()) {
    throw ShapeError(str_cat("transition_forward: input has ", x.shape().c, " channels, expected ", g.stem_out_channels()));
  }
  std::vector<Var<T>> branches;
  for (const auto& b : g.transition()) branches.push_back(apply_conv(tape, g, b, x));
  return relu(add(branches));
}

enum class ConcatMode {
  kFused,         // concat feeds conv1 directly and is not kept for backward
  kMaterialized,  // concat is a separate tape node (naive storage)
};

// inputs: [h0, h_a1, ..., h_a(d-1)] in root-to-parent order for dense
// propagation, or the single parent feature (h0 at the root) for parent_only.
// Inputs are ReLU outputs, so the leading ReLU of the bottleneck is the identity
// in concat mode and is not recorded.
template <typename T>
NeuronResult<T> neuron_forward(Tape<T>& tape, const NeuronGraph<T>& g, ConceptId concept_id, const std::vector<Var<T>>& inputs,
                               ConcatMode mode = ConcatMode::kFused, std::span<T> scratch = {},
                               bool scratch_ready = false) {
  const NeuronParams& n = g.neuron(concept_id);
  const ModelConfig& cfg = g.config();
  const bool parent_only = cfg.propagation == Propagation::kParentOnly;
  const std::size_t expected_inputs = parent_only ? 1 : n.depth;
  if (inputs.size() != expected_inputs) {
    throw ShapeError(str_cat("neuron '", g.hierarchy().name(concept_id), "' at depth ", n.depth, " expects ", expected_inputs,
                             " inputs, got ", inputs.size()));
  }
  std::size_t width = 0;
  for (const auto& v : inputs) width += v.shape().c;
  const bool sum_mode = !parent_only && cfg.aggregation == Aggregation::kSum;
  const std::size_t expected_width = sum_mode ? cfg.m0 + cfg.m * (n.depth - 1) : n.in_channels;
  if (width != expected_width) {
    throw ShapeError(str_cat("neuron '", g.hierarchy().name(concept_id), "': input channel sum ", width, " != ", expected_width));
  }
  Var<T> a;
  if (sum_mode) {
    std::vector<Var<T>> terms{apply_conv(tape, g, *n.proj, inputs[0])};
    for (std::size_t i = 1; i < inputs.size(); ++i) terms.push_back(inputs[i]);
    a = apply_conv(tape, g, n.conv1, relu(terms.size() == 1 ? terms[0] : add(terms)));
  } else if (inputs.size() == 1) {
    a = apply_conv(tape, g, n.conv1, inputs[0]);
  } else if (mode == ConcatMode::kFused) {
    a = concat_conv1x1(inputs, tape.parameter(g.params(), n.conv1.weight), tape.parameter(g.params(), n.conv1.bias), scratch,
                       scratch_ready);
  } else {
    a = apply_conv(tape, g, n.conv1, concat_channels(inputs));
  }
  Var<T> hidden = relu(apply_conv(tape, g, n.conv2, relu(a)));
  Var<T> logits = apply_conv(tape, g, n.head, hidden);
  return {hidden, logits};
}

}  // namespace dsspn

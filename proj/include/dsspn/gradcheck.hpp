#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dsspn/dynamic_exec.hpp"

namespace dsspn {

struct GradCheckResult {
  std::string name;
  double max_rel_error{0.0};
  double max_abs_error{0.0};
  std::size_t checked{0};
  std::size_t nonsmooth{0};  // probes straddling a ReLU kink
  bool passed{false};
};

struct GradCheckOptions {
  double eps{1e-5};
  double tolerance{1e-4};
  double floor{1e-4};               // denominator floor for near-zero gradients
  double kink_tolerance{1e-3};      // one-sided slopes further apart than this mark a kink
  std::size_t max_per_tensor{0};    // 0 = every element
  std::uint64_t seed{0};
};

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

inline std::vector<std::size_t> probe_indices(std::size_t size, std::size_t max_count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  if (max_count == 0 || max_count >= size) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Probes are compared with the central difference. A probe that fails that
// comparison and whose one-sided slopes disagree straddles a point where the
// loss is not differentiable (a ReLU input crossing zero); there the tape's
// gradient must equal one of the one-sided slopes instead.
inline void record_probe(GradCheckResult& r, double a, double up, double base, double down, const GradCheckOptions& opt) {
  ++r.checked;
  const double n = (up - down) / (2 * opt.eps);
  const double central = relative_error(a, n, opt.floor);
  const double fwd = (up - base) / opt.eps, bwd = (base - down) / opt.eps;
  if (central > opt.tolerance && relative_error(fwd, bwd, opt.floor) > opt.kink_tolerance) {
    ++r.nonsmooth;
    const double err = std::min(relative_error(a, fwd, opt.floor), relative_error(a, bwd, opt.floor));
    if (err > opt.kink_tolerance) r.max_rel_error = std::max(r.max_rel_error, err);
    return;
  }
  r.max_rel_error = std::max(r.max_rel_error, central);
  r.max_abs_error = std::max(r.max_abs_error, std::abs(a - n));
}

}  // namespace detail

using Vars = std::vector<Var<double>>;
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Central differences against the tape's gradient for every differentiable
// input of `fn`.
inline GradCheckResult check_gradient(const std::string& name, const ScalarFn& fn, std::vector<Tensor<double>> inputs,
                                      const GradCheckOptions& opt = {}) {
  GradCheckResult r{name};
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    Var<double> out = fn(tape, vars);
    tape.backward(out);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Tensor<double>* g = tape.grad(vars[i]);
      analytic.push_back(g ? *g : Tensor<double>(inputs[i].shape()));
    }
  }
  auto eval = [&fn, &inputs] {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return fn(tape, vars).value().item();
  };
  std::mt19937_64 rng(opt.seed);
  const double base = eval();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j : detail::probe_indices(inputs[i].size(), opt.max_per_tensor, rng)) {
      const double orig = inputs[i][j];
      inputs[i][j] = orig + opt.eps;
      const double up = eval();
      inputs[i][j] = orig - opt.eps;
      const double down = eval();
      inputs[i][j] = orig;
      detail::record_probe(r, analytic[i][j], up, base, down, opt);
    }
  }
  r.passed = r.max_rel_error < opt.tolerance;
  return r;
}

// Same check against model parameters; `loss` builds the scalar on a tape.
inline GradCheckResult check_model_gradient(const std::string& name, NeuronGraph<double>& g,
                                            const std::function<Var<double>(Tape<double>&)>& loss,
                                            const GradCheckOptions& opt = {}) {
  GradCheckResult r{name};
  std::map<ParamId, Tensor<double>> analytic;
  {
    Tape<double> tape;
    analytic = tape.backward(loss(tape));
  }
  auto eval = [&loss] {
    Tape<double> tape(false);
    return loss(tape).value().item();
  };
  std::mt19937_64 rng(opt.seed);
  const double base = eval();
  for (ParamId pid = 0; pid < g.params().size(); ++pid) {
    Tensor<double>& value = g.params()[pid].value;
    auto it = analytic.find(pid);
    for (std::size_t j : detail::probe_indices(value.size(), opt.max_per_tensor, rng)) {
      const double orig = value[j];
      value[j] = orig + opt.eps;
      const double up = eval();
      value[j] = orig - opt.eps;
      const double down = eval();
      value[j] = orig;
      const double a = it == analytic.end() ? 0.0 : it->second[j];
      detail::record_probe(r, a, up, base, down, opt);
    }
  }
  r.passed = r.max_rel_error < opt.tolerance;
  return r;
}

// Inputs are drawn away from zero so ReLU kinks stay further than eps from
// every probe.
inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, double gap = 0.05) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data()) {
    do {
      v = d(rng);
    } while (std::abs(v) < gap);
  }
  return t;
}

// Randomized checks over every differentiable op.
inline std::vector<GradCheckResult> op_gradient_suite(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> small(1, 3), spatial(3, 6);
  std::vector<GradCheckResult> out;
  const std::size_t n = small(rng), c = small(rng), h = spatial(rng), w = spatial(rng);
  const Shape xs{n, c, h, w};

  for (std::size_t k : {1, 3}) {
    for (auto [stride, dil] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 2}}) {
      const std::size_t oc = small(rng);
      const ConvGeometry geo{k == 1 ? 0 : dil, dil, stride};
      out.push_back(check_gradient(str_cat("conv2d k", k, " s", stride, " d", dil),
                                   [geo](Tape<double>&, const std::vector<Var<double>>& v) { return sum(sigmoid(conv2d(v[0], v[1], v[2], geo))); },
                                   {random_tensor(xs, rng), random_tensor(Shape{oc, c, k, k}, rng), random_tensor(Shape{oc, 1, 1, 1}, rng)},
                                   opt));
    }
  }
  const Shape xs2{n, small(rng), h, w};
  const std::size_t oc = small(rng);
  out.push_back(check_gradient(
      "concat_conv1x1",
      [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(sigmoid(concat_conv1x1({v[0], v[1]}, v[2], v[3]))); },
      {random_tensor(xs, rng), random_tensor(xs2, rng), random_tensor(Shape{oc, xs.c + xs2.c, 1, 1}, rng),
       random_tensor(Shape{oc, 1, 1, 1}, rng)},
      opt));
  out.push_back(check_gradient("relu", [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(scale(relu(v[0]), 1.5)); },
                               {random_tensor(xs, rng)}, opt));
  out.push_back(check_gradient("sigmoid", [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(sigmoid(v[0])); },
                               {random_tensor(xs, rng, -3, 3)}, opt));
  out.push_back(check_gradient("add", [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(sigmoid(add(Vars{v[0], v[1], v[0]}))); },
                               {random_tensor(xs, rng), random_tensor(xs, rng)}, opt));
  out.push_back(check_gradient(
      "concat_channels+slice_channels",
      [c](Tape<double>&, const std::vector<Var<double>>& v) {
        auto cat = concat_channels(Vars{v[0], v[1]});
        return sum(sigmoid(slice_channels(cat, c > 1 ? 1 : 0, 2)));
      },
      {random_tensor(xs, rng), random_tensor(Shape{n, 2, h, w}, rng)}, opt));
  out.push_back(check_gradient(
      "concat_batch+slice_batch",
      [](Tape<double>&, const std::vector<Var<double>>& v) {
        auto b = concat_batch(Vars{v[0], v[1]});
        return add(Vars{sum(sigmoid(slice_batch(b, 0))), sum(scale(sigmoid(slice_batch(b, b.shape().n - 1)), 2.0))});
      },
      {random_tensor(xs, rng), random_tensor(Shape{1, c, h, w}, rng)}, opt));

  Tensor<double> targets(Shape{n, c, h, w}), mask(Shape{n, c, h, w});
  std::bernoulli_distribution coin(0.5), keep(0.7);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    targets[i] = coin(rng) ? 1.0 : 0.0;
    mask[i] = keep(rng) ? 1.0 : 0.0;
  }
  for (Reduction red : {Reduction::kMean, Reduction::kSum}) {
    out.push_back(check_gradient(str_cat("bce_with_logits ", red == Reduction::kMean ? "mean" : "sum"),
                                 [targets, mask, red](Tape<double>&, const std::vector<Var<double>>& v) {
                                   return bce_with_logits(v[0], targets, mask, red);
                                 },
                                 {random_tensor(xs, rng, -4, 4)}, opt));
  }
  const std::size_t k = small(rng) + 2;
  Tensor<int> labels(Shape{n, 1, h, w});
  std::vector<bool> class_mask(k, true);
  class_mask[k - 1] = false;
  std::uniform_int_distribution<int> lab(-1, static_cast<int>(k) - 2);
  for (auto& v : labels.data()) v = lab(rng);
  for (Reduction red : {Reduction::kMean, Reduction::kSum}) {
    out.push_back(check_gradient(str_cat("softmax_ce ", red == Reduction::kMean ? "mean" : "sum"),
                                 [labels, class_mask, red](Tape<double>&, const std::vector<Var<double>>& v) {
                                   return softmax_ce(v[0], labels, class_mask, red);
                                 },
                                 {random_tensor(Shape{n, k, h, w}, rng, -3, 3)}, opt));
  }
  return out;
}

// End-to-end: loss of a small three-level model over a random image and
// label map, checked against every parameter tensor (sampled elements).
inline GradCheckResult model_gradient_check(std::uint64_t seed, ModelConfig cfg, const GradCheckOptions& opt = {}) {
  const nlohmann::json doc_json = {
      {"concepts",
       {{{"name", "root"}},
        {{"name", "a"}, {"parent", "root"}},
        {{"name", "b"}, {"parent", "root"}},
        {{"name", "c"}, {"parent", "root"}},
        {{"name", "a1"}, {"parent", "a"}},
        {{"name", "a2"}, {"parent", "a"}},
        {{"name", "x"}, {"parent", "a1"}},
        {{"name", "y"}, {"parent", "a1"}}}},
      {"datasets",
       {{{"name", "d"},
         {"labels",
          {{{"label_id", 0}, {"concept", "b"}},
           {{"label_id", 1}, {"concept", "c"}},
           {{"label_id", 2}, {"concept", "a2"}},
           {{"label_id", 3}, {"concept", "x"}},
           {{"label_id", 4}, {"concept", "y"}}}}}}}};
  const HierarchyDocument doc = parse_hierarchy(doc_json);
  const DatasetBinding binding = doc.bind("d");
  NeuronGraph<double> g = build_model<double>(doc.hierarchy, cfg, seed);
  std::mt19937_64 rng(seed + 1);
  // Zero-initialised biases would put whole feature maps exactly on ReLU kinks.
  for (ParamId pid = 0; pid < g.params().size(); ++pid) {
    auto& p = g.params()[pid];
    if (p.name.ends_with(".bias")) p.value = random_tensor(p.value.shape(), rng, -0.1, 0.1, 0.01);
  }
  const Tensor<double> image = random_tensor(Shape{1, cfg.in_channels, 16, 16}, rng);
  LabelMap labels(2, 2);
  labels.values = {0, 2, 3, 4};
  const ActivationPlan plan = plan_activation(present_concepts(labels, binding), doc.hierarchy, binding);
  const auto targets = build_supervision<double>(labels, plan, doc.hierarchy, binding);
  auto loss = [&](Tape<double>& tape) {
    auto fwd = forward_plan(tape, g, tape.constant(image), plan);
    return dsspn_loss(tape, fwd.outputs, targets, g.config());
  };
  return check_model_gradient("dsspn_loss end-to-end", g, loss, opt);
}

}  // namespace dsspn

#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsspn/autobatch.hpp"
#include "dsspn/dataset.hpp"
#include "dsspn/inference.hpp"
#include "dsspn/metrics.hpp"
#include "dsspn/optim.hpp"

namespace dsspn {

struct TrainConfig {
  ModelConfig model;
  double base_lr{0.003};
  double momentum{0.9};
  double weight_decay{0.0001};
  double power{0.9};
  double finetune_lr_factor{0.1};
  std::size_t steps{2000};          // joint phase (the only phase unless universal)
  std::size_t epochs{0};            // when > 0, replaces steps
  std::size_t finetune_steps{0};    // per dataset, universal mode
  std::size_t finetune_epochs{0};   // when > 0, replaces finetune_steps
  std::size_t batch_size{4};
  AugmentConfig augment;
  bool universal{false};
  std::uint64_t seed{0};

  void validate() const {
    model.validate();
    if (batch_size == 0) throw ValidationError("train config: batch_size must be >= 1");
    if (augment.crop && augment.crop_size % ModelConfig::kOutputStride != 0) {
      throw ValidationError(str_cat("train config: crop_size ", augment.crop_size, " must be divisible by ", ModelConfig::kOutputStride));
    }
    if (!(augment.scale_min > 0.0 && augment.scale_min <= augment.scale_max)) throw ValidationError("train config: bad resize range");
    if (!(base_lr > 0.0)) throw ValidationError("train config: base_lr must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},
       {"base_lr", c.base_lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"power", c.power},
       {"finetune_lr_factor", c.finetune_lr_factor},
       {"steps", c.steps},
       {"epochs", c.epochs},
       {"finetune_steps", c.finetune_steps},
       {"finetune_epochs", c.finetune_epochs},
       {"batch_size", c.batch_size},
       {"augment", c.augment},
       {"universal", c.universal},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  c.base_lr = j.value("base_lr", c.base_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.power = j.value("power", c.power);
  c.finetune_lr_factor = j.value("finetune_lr_factor", c.finetune_lr_factor);
  c.steps = j.value("steps", c.steps);
  c.epochs = j.value("epochs", c.epochs);
  c.finetune_steps = j.value("finetune_steps", c.finetune_steps);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
  c.universal = j.value("universal", c.universal);
  c.seed = j.value("seed", c.seed);
}

struct StepRecord {
  std::size_t step{0};
  std::string phase;
  std::string dataset;
  double loss{0.0};
  double lr{0.0};
  double activated_neurons_avg{0.0};
  std::size_t skipped{0};  // samples without any labelled pixel
};

inline void to_json(nlohmann::json& j, const StepRecord& r) {
  j = {{"step", r.step}, {"phase", r.phase}, {"dataset", r.dataset}, {"loss", r.loss},
       {"lr", r.lr},     {"activated_neurons_avg", r.activated_neurons_avg}, {"skipped", r.skipped}};
}

class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct StepContext {
  const StepRecord& record;
  const Dataset& dataset;
  const std::vector<ActivationPlan>& plans;
  const std::map<ParamId, Tensor<float>>& grads;
  const NeuronGraph<float>& model;
};

struct TrainHooks {
  std::ostream* log{nullptr};     // JSON lines
  std::ostream* warn{nullptr};    // human-readable warnings
  std::function<void(const StepContext&)> on_step;
  std::function<void(const std::string& phase, const NeuronGraph<float>&)> on_phase_end;
};

struct TrainResult {
  NeuronGraph<float> model;
  std::vector<StepRecord> log;
};

namespace detail {

// Cycles through a dataset in reshuffled epochs.
class EpochSampler {
 public:
  explicit EpochSampler(std::size_t n) : order_(n) { std::iota(order_.begin(), order_.end(), std::size_t{0}); }

  std::vector<std::size_t> next(std::size_t k, std::mt19937_64& rng) {
    std::vector<std::size_t> out;
    while (out.size() < k) {
      if (pos_ == 0) std::shuffle(order_.begin(), order_.end(), rng);
      out.push_back(order_[pos_]);
      pos_ = (pos_ + 1) % order_.size();
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_{0};
};

inline std::size_t steps_for(std::size_t steps, std::size_t epochs, std::size_t samples, std::size_t batch) {
  return epochs > 0 ? epochs * ((samples + batch - 1) / batch) : steps;
}

}  // namespace detail

// One optimizer step on a single-dataset batch: augment, plan, schedule,
// batched forward, mean per-sample loss, backward, SGD.
inline StepRecord train_step(NeuronGraph<float>& g, const Dataset& ds, const std::vector<std::size_t>& indices, const TrainConfig& cfg,
                             OptimState<float>& opt, std::size_t iter, std::mt19937_64& rng, const TrainHooks& hooks) {
  const ConceptHierarchy& h = g.hierarchy();
  std::vector<Example> batch;
  std::vector<LabelMap> coarse;
  std::vector<ActivationPlan> plans;
  StepRecord rec;
  rec.dataset = ds.name;
  for (std::size_t idx : indices) {
    Example e = augment(ds.images[idx], ds.labels[idx], cfg.augment, rng, ModelConfig::kOutputStride);
    LabelMap small = subsample_labels(e.labels, ModelConfig::kOutputStride);
    const ConceptSet present = present_concepts(small, ds.binding);
    if (present.empty()) {
      ++rec.skipped;
      if (hooks.warn) *hooks.warn << "warning: " << ds.name << " sample " << idx << " has no labelled pixel after augmentation; skipped\n";
      continue;
    }
    plans.push_back(plan_activation(present, h, ds.binding, g.config().structure, plans.size()));
    batch.push_back(std::move(e));
    coarse.push_back(std::move(small));
  }
  if (batch.empty()) {
    rec.lr = poly_lr(opt.config, iter);
    return rec;
  }
  const Shape s0 = batch.front().image.shape();
  Tensor<float> images(Shape{batch.size(), s0.c, s0.h, s0.w});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].image.shape() != s0) throw ValidationError("batch images differ in size; enable cropping");
    std::copy(batch[i].image.data().begin(), batch[i].image.data().end(), images.sample(i).begin());
  }
  Tape<float> tape;
  const BatchSchedule sched = schedule(plans, h);
  auto fwd = execute_batched(tape, g, tape.constant(std::move(images)), sched, plans);
  std::vector<Var<float>> losses;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto targets = build_supervision<float>(coarse[i], plans[i], h, ds.binding);
    losses.push_back(dsspn_loss(tape, fwd.outputs[i], targets, g.config()));
  }
  Var<float> loss = scale(losses.size() == 1 ? losses.front() : add(losses), 1.0f / static_cast<float>(losses.size()));
  rec.loss = loss.value().item();
  if (!std::isfinite(rec.loss)) {
    std::string ids;
    for (std::size_t idx : indices) ids += str_cat(ids.empty() ? "" : ",", idx);
    throw DivergenceError(str_cat("loss became ", rec.loss, " at step ", iter, " on dataset '", ds.name, "' (samples ", ids,
                                  "); lower base_lr or check the inputs"));
  }
  const auto grads = tape.backward(loss);
  rec.lr = sgd_step(g.params(), grads, opt, iter);
  rec.activated_neurons_avg = batch_stats(sched).avg_activated;
  if (hooks.on_step) hooks.on_step(StepContext{rec, ds, plans, grads, g});
  return rec;
}

// Joint phase over all datasets (each step draws one dataset with
// probability proportional to its size, then a batch from it alone). In
// universal mode, each dataset is then fine-tuned in turn with a fresh
// optimizer at base_lr * finetune_lr_factor.
inline TrainResult train(const TrainConfig& cfg, const HierarchyDocument& doc, const std::vector<Dataset>& datasets,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (datasets.empty()) throw ValidationError("train: no datasets");
  if (cfg.universal && datasets.size() < 2) throw ValidationError("train: universal mode needs at least two datasets");
  std::size_t total = 0;
  std::vector<double> weights;
  for (const auto& d : datasets) {
    if (d.size() == 0) throw ValidationError("train: dataset '" + d.name + "' is empty");
    total += d.size();
    weights.push_back(static_cast<double>(d.size()));
  }
  std::mt19937_64 rng(cfg.seed);
  TrainResult result{build_model<float>(doc.hierarchy, cfg.model, cfg.seed), {}};
  std::vector<detail::EpochSampler> samplers;
  for (const auto& d : datasets) samplers.emplace_back(d.size());

  auto run_phase = [&](const std::string& phase, std::size_t steps, double lr, const std::vector<std::size_t>& pool) {
    if (steps == 0) return;
    OptimState<float> opt{SgdConfig{lr, cfg.momentum, cfg.weight_decay, cfg.power, steps}, {}};
    std::vector<double> w;
    for (std::size_t k : pool) w.push_back(weights[k]);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    for (std::size_t it = 0; it < steps; ++it) {
      const std::size_t k = pool[pool.size() == 1 ? 0 : pick(rng)];
      const auto indices = samplers[k].next(cfg.batch_size, rng);
      StepRecord rec = train_step(result.model, datasets[k], indices, cfg, opt, it, rng, hooks);
      rec.step = result.log.size();
      rec.phase = phase;
      if (hooks.log) *hooks.log << nlohmann::json(rec).dump() << '\n';
      result.log.push_back(std::move(rec));
    }
    if (hooks.on_phase_end) hooks.on_phase_end(phase, result.model);
  };

  std::vector<std::size_t> all(datasets.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  run_phase("joint", detail::steps_for(cfg.steps, cfg.epochs, total, cfg.batch_size), cfg.base_lr, all);
  if (cfg.universal) {
    for (std::size_t k = 0; k < datasets.size(); ++k) {
      const std::size_t steps = detail::steps_for(cfg.finetune_steps, cfg.finetune_epochs, datasets[k].size(), cfg.batch_size);
      run_phase("finetune:" + datasets[k].name, steps, cfg.base_lr * cfg.finetune_lr_factor, {k});
    }
  }
  return result;
}

inline MetricAccumulator evaluate(const NeuronGraph<float>& g, const Dataset& ds) {
  MetricAccumulator acc(ds.binding);
  for (std::size_t i = 0; i < ds.size(); ++i) acc.accumulate(hierarchical_predict(g, ds.images[i], ds.binding), ds.labels[i]);
  return acc;
}

inline nlohmann::json to_json(const SegmentationMetrics& m) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [label, iou] : m.per_class_iou) per[std::to_string(label)] = iou;
  return {{"mean_iou", m.mean_iou}, {"pixel_acc", m.pixel_acc}, {"class_average_acc", m.class_average_acc}, {"per_class_iou", per}};
}

}  // namespace dsspn

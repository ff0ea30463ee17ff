#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "dsspn/dynamic_exec.hpp"

namespace dsspn {

struct BatchStep {
  ConceptId neuron{0};
  std::size_t depth{1};
  std::vector<std::size_t> samples;  // ascending
};

struct BatchSchedule {
  std::vector<BatchStep> steps;
  std::size_t num_samples{0};
};

// One step per distinct neuron, ordered by (neuron depth, concept id).
// Parents always precede children because depth strictly increases.
inline BatchSchedule schedule(const std::vector<ActivationPlan>& plans, const ConceptHierarchy& h) {
  if (plans.empty()) throw ValidationError("schedule: no activation plans");
  std::map<std::pair<std::size_t, ConceptId>, std::vector<std::size_t>> by_key;
  for (std::size_t s = 0; s < plans.size(); ++s) {
    for (ConceptId n : plans[s].neurons) by_key[{h.neuron_depth(n), n}].push_back(s);
  }
  BatchSchedule out;
  out.num_samples = plans.size();
  for (auto& [key, samples] : by_key) out.steps.push_back({key.second, key.first, std::move(samples)});
  return out;
}

struct BatchStats {
  std::size_t steps{0};
  std::size_t executions{0};  // sum of per-plan neuron counts
  std::size_t merged{0};
  double avg_activated{0.0};
};

inline BatchStats batch_stats(const BatchSchedule& s) {
  BatchStats r;
  r.steps = s.steps.size();
  for (const auto& st : s.steps) r.executions += st.samples.size();
  r.merged = r.executions - r.steps;
  r.avg_activated = s.num_samples ? static_cast<double>(r.executions) / static_cast<double>(s.num_samples) : 0.0;
  return r;
}

template <typename T>
struct BatchForward {
  Var<T> h0;                               // batched transition output
  std::vector<Var<T>> h0_per_sample;
  std::vector<PlanOutputs<T>> outputs;     // per sample
  std::size_t neuron_invocations{0};
};

namespace detail {

inline void check_schedule(const BatchSchedule& s, const std::vector<ActivationPlan>& plans) {
  if (s.num_samples != plans.size()) {
    throw ValidationError(str_cat("schedule covers ", s.num_samples, " samples but ", plans.size(), " plans were given"));
  }
  std::vector<std::set<ConceptId>> seen(plans.size());
  for (const auto& st : s.steps) {
    for (std::size_t i : st.samples) {
      if (i >= plans.size()) throw ValidationError(str_cat("schedule step refers to sample ", i, " out of range"));
      if (!plans[i].contains(st.neuron)) {
        throw ValidationError(str_cat("schedule runs neuron ", st.neuron, " for sample ", i, " which did not activate it"));
      }
      if (!seen[i].insert(st.neuron).second) {
        throw ValidationError(str_cat("schedule runs neuron ", st.neuron, " twice for sample ", i));
      }
    }
  }
  for (std::size_t i = 0; i < plans.size(); ++i) {
    if (seen[i].size() != plans[i].size()) throw ValidationError(str_cat("schedule misses neurons of sample ", i));
  }
}

}  // namespace detail

// Stem and transition run once over the whole batch. Each schedule step then
// gathers the participating samples' inputs along the batch axis, runs the
// neuron once and scatters hidden features and logits back per sample.
template <typename T>
BatchForward<T> execute_batched(Tape<T>& tape, const NeuronGraph<T>& g, const Var<T>& images, const BatchSchedule& s,
                                const std::vector<ActivationPlan>& plans) {
  if (images.shape().n != plans.size()) {
    throw ShapeError(str_cat("execute_batched: batch of ", images.shape().n, " images for ", plans.size(), " plans"));
  }
  detail::check_schedule(s, plans);
  BatchForward<T> r;
  r.h0 = transition_forward(tape, g, stem_forward(tape, g, images));
  const std::size_t batch = plans.size();
  for (std::size_t i = 0; i < batch; ++i) r.h0_per_sample.push_back(batch == 1 ? r.h0 : slice_batch(r.h0, i));
  r.outputs.resize(batch);
  std::vector<std::map<ConceptId, Var<T>>> hidden(batch);
  for (const auto& st : s.steps) {
    std::vector<std::vector<Var<T>>> per_sample;
    for (std::size_t i : st.samples) {
      per_sample.push_back(detail::neuron_inputs(g, r.h0_per_sample[i], plans[i].paths.at(st.neuron), hidden[i]));
    }
    std::vector<Var<T>> inputs;
    for (std::size_t k = 0; k < per_sample.front().size(); ++k) {
      std::vector<Var<T>> column;
      for (const auto& in : per_sample) column.push_back(in[k]);
      inputs.push_back(column.size() == 1 ? column.front() : concat_batch(column));
    }
    NeuronResult<T> res = neuron_forward(tape, g, st.neuron, inputs);
    ++r.neuron_invocations;
    for (std::size_t j = 0; j < st.samples.size(); ++j) {
      const std::size_t i = st.samples[j];
      NeuronResult<T> mine = st.samples.size() == 1 ? res : NeuronResult<T>{slice_batch(res.hidden, j), slice_batch(res.logits, j)};
      hidden[i].emplace(st.neuron, mine.hidden);
      r.outputs[i].emplace(st.neuron, mine);
    }
  }
  return r;
}

}  // namespace dsspn

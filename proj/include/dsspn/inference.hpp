#pragma once

#include <map>
#include <stdexcept>
#include <vector>

#include "dsspn/dynamic_exec.hpp"

namespace dsspn {

// Per-neuron child logits for one image, each of shape (1, T_i, h, w).
template <typename T>
using LogitMaps = std::map<ConceptId, Tensor<T>>;

struct DecodeTrace {
  int label{LabelMap::kIgnore};
  std::vector<ConceptId> path;  // concepts chosen below the root, in order
};

// Top-down walk for the pixel at flat index p. At each neuron the child
// with the largest sigmoid score among the dataset's unmasked children wins;
// ties go to the lower concept id. The walk stops at the first concept the
// dataset defines. Single-child links are followed without a decision.
template <typename T>
DecodeTrace decode_pixel(const ConceptHierarchy& h, const DatasetBinding& binding, const LogitMaps<T>& logits, std::size_t p) {
  DecodeTrace tr;
  ConceptId cur = h.root();
  while (!binding.is_defined(cur)) {
    const auto& kids = h.children(cur);
    if (kids.empty()) throw std::logic_error(str_cat("decode reached undefined leaf '", h.name(cur), "'"));
    if (kids.size() == 1) {
      cur = kids.front();
      tr.path.push_back(cur);
      continue;
    }
    auto it = logits.find(cur);
    if (it == logits.end()) throw std::logic_error(str_cat("decode: no logits for neuron '", h.name(cur), "'"));
    const Tensor<T>& z = it->second;
    const std::size_t plane = z.shape().plane();
    const auto& mask = binding.child_mask(cur);
    std::optional<std::size_t> best;
    T best_score{0};
    for (std::size_t k = 0; k < kids.size(); ++k) {
      if (!mask[k]) continue;
      const T score = sigmoid_scalar(z[k * plane + p]);
      if (!best || score > best_score) {
        best = k;
        best_score = score;
      }
    }
    if (!best) throw std::logic_error(str_cat("decode: neuron '", h.name(cur), "' has no child defined by the dataset"));
    cur = kids[*best];
    tr.path.push_back(cur);
  }
  tr.label = *binding.label_of(cur);
  return tr;
}

// Label map (dataset label ids) at the logits' resolution.
template <typename T>
LabelMap decode_hierarchical(const ConceptHierarchy& h, const DatasetBinding& binding, const LogitMaps<T>& logits) {
  if (binding.defined().empty()) throw ValidationError("decode: binding defines no labels");
  if (logits.empty()) throw ValidationError("decode: no logits");
  const Shape s = logits.begin()->second.shape();
  LabelMap out(s.h, s.w);
  for (std::size_t p = 0; p < out.size(); ++p) out.values[p] = decode_pixel(h, binding, logits, p).label;
  return out;
}

inline LabelMap upsample_nearest(const LabelMap& m, std::size_t factor) {
  LabelMap out(m.height * factor, m.width * factor);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) out.at(y, x) = m.at(y / factor, x / factor);
  }
  return out;
}

// Runs every neuron the dataset can reach, decodes top-down and upsamples
// the label map to the input resolution.
template <typename T>
LabelMap hierarchical_predict(const NeuronGraph<T>& g, const Tensor<T>& image, const DatasetBinding& binding) {
  if (image.shape().n != 1) throw ShapeError("hierarchical_predict expects a single image");
  const ConceptHierarchy& h = g.hierarchy();
  if (binding.defined().empty()) throw ValidationError("hierarchical_predict: binding defines no labels");
  Tape<T> tape(false);
  const ActivationPlan plan = fixed_plan(h, binding);
  auto fwd = forward_plan(tape, g, tape.constant(image), plan);
  LogitMaps<T> logits;
  for (const auto& [n, r] : fwd.outputs) logits.emplace(n, r.logits.value());
  return upsample_nearest(decode_hierarchical(h, binding, logits), ModelConfig::kOutputStride);
}

}  // namespace dsspn

#pragma once

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "dsspn/hierarchy.hpp"
#include "dsspn/tensor.hpp"

namespace dsspn {

// Desk-scale stand-in for real segmentation data: Voronoi regions over a
// grid of cells, each region painted with its concept's mean colour plus
// Gaussian noise. Concept means are inherited down the tree, so siblings
// share their parent's mean plus a distinct offset.
struct SynthSpec {
  std::size_t num_samples{64};
  std::size_t image_size{32};
  std::size_t cell{8};            // labels are constant on cell x cell blocks
  std::size_t channels{3};
  std::size_t min_regions{2};
  std::size_t max_regions{4};
  double offset_scale{1.0};       // norm of a depth-2 offset; halves per level
  double noise{0.1};
  std::uint64_t seed{0};             // region layout, labels and noise
  std::uint64_t appearance_seed{0};  // concept colours; shared by all splits
};

struct SynthSample {
  Tensor<float> image;  // (1, channels, size, size)
  LabelMap labels;      // dataset label ids, full resolution
  std::vector<ConceptId> region_concepts;
};

// Mean vector per concept. Every child's offset from its parent has norm
// offset_scale * 0.5^(depth-2) and siblings are at least that far apart, so
// adjacent levels stay separated by more than `noise` when offset_scale is.
inline std::vector<std::vector<double>> concept_means(const ConceptHierarchy& h, const SynthSpec& spec) {
  std::mt19937_64 rng(spec.appearance_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> means(h.size(), std::vector<double>(spec.channels, 0.0));
  std::vector<ConceptId> frontier{h.root()};
  while (!frontier.empty()) {
    const ConceptId p = frontier.back();
    frontier.pop_back();
    const auto& kids = h.children(p);
    const double radius = spec.offset_scale * std::pow(0.5, static_cast<double>(h.depth(p)) - 1.0);
    if (!kids.empty() && radius <= spec.noise) {
      throw ValidationError(str_cat("synthetic recipe: offset ", radius, " at depth ", h.depth(p) + 1, " is not above noise ",
                                    spec.noise, "; raise offset_scale or lower noise"));
    }
    std::vector<std::vector<double>> placed;
    for (ConceptId c : kids) {
      std::vector<double> off(spec.channels);
      for (int attempt = 0;; ++attempt) {
        double norm = 0.0;
        for (auto& v : off) {
          v = normal(rng);
          norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : off) v *= radius / norm;
        bool ok = true;
        for (const auto& q : placed) {
          double d = 0.0;
          for (std::size_t k = 0; k < off.size(); ++k) d += (off[k] - q[k]) * (off[k] - q[k]);
          ok = ok && std::sqrt(d) >= radius;
        }
        if (ok || attempt > 10000) break;
      }
      placed.push_back(off);
      for (std::size_t k = 0; k < spec.channels; ++k) {
        means[static_cast<std::size_t>(c)][k] = means[static_cast<std::size_t>(p)][k] + off[k];
      }
      frontier.push_back(c);
    }
  }
  return means;
}

// Paintable concepts: every concept the binding defines that has no defined
// strict descendant, i.e. the finest labels of the dataset.
inline std::vector<ConceptId> paintable_concepts(const ConceptHierarchy& h, const DatasetBinding& binding) {
  std::vector<ConceptId> out;
  for (ConceptId c : binding.defined()) {
    bool finest = true;
    for (ConceptId d : binding.defined()) finest = finest && !(d != c && h.is_descendant_or_self(d, c));
    if (finest) out.push_back(c);
  }
  if (out.empty()) throw ValidationError("synthetic data: binding '" + binding.name() + "' defines no concepts");
  return out;
}

inline std::vector<SynthSample> gen_synthetic(const ConceptHierarchy& h, const DatasetBinding& binding, const SynthSpec& spec) {
  if (spec.image_size == 0 || spec.cell == 0 || spec.image_size % spec.cell != 0) {
    throw ValidationError(str_cat("synthetic data: image size ", spec.image_size, " must be a positive multiple of cell ", spec.cell));
  }
  if (spec.min_regions == 0 || spec.max_regions < spec.min_regions) throw ValidationError("synthetic data: bad region range");
  const auto means = concept_means(h, spec);
  const auto leaves = paintable_concepts(h, binding);
  const std::size_t grid = spec.image_size / spec.cell;
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::size_t> region_count(spec.min_regions, spec.max_regions);
  std::uniform_int_distribution<std::size_t> pick_leaf(0, leaves.size() - 1);
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(grid));
  std::normal_distribution<double> noise(0.0, spec.noise);
  std::vector<SynthSample> out;
  for (std::size_t s = 0; s < spec.num_samples; ++s) {
    const std::size_t r = region_count(rng);
    std::vector<std::pair<double, double>> seeds(r);
    SynthSample sample;
    for (auto& [y, x] : seeds) {
      y = pos(rng);
      x = pos(rng);
      sample.region_concepts.push_back(leaves[pick_leaf(rng)]);
    }
    std::vector<ConceptId> cell_concept(grid * grid);
    for (std::size_t cy = 0; cy < grid; ++cy) {
      for (std::size_t cx = 0; cx < grid; ++cx) {
        const double y = static_cast<double>(cy) + 0.5, x = static_cast<double>(cx) + 0.5;
        std::size_t best = 0;
        double best_d = 0.0;
        for (std::size_t k = 0; k < r; ++k) {
          const double d = (seeds[k].first - y) * (seeds[k].first - y) + (seeds[k].second - x) * (seeds[k].second - x);
          if (k == 0 || d < best_d) {
            best = k;
            best_d = d;
          }
        }
        cell_concept[cy * grid + cx] = sample.region_concepts[best];
      }
    }
    sample.image = Tensor<float>(Shape{1, spec.channels, spec.image_size, spec.image_size});
    sample.labels = LabelMap(spec.image_size, spec.image_size);
    for (std::size_t y = 0; y < spec.image_size; ++y) {
      for (std::size_t x = 0; x < spec.image_size; ++x) {
        const ConceptId c = cell_concept[(y / spec.cell) * grid + x / spec.cell];
        sample.labels.at(y, x) = *binding.label_of(c);
        for (std::size_t k = 0; k < spec.channels; ++k) {
          sample.image.at(0, k, y, x) = static_cast<float>(means[static_cast<std::size_t>(c)][k] + noise(rng));
        }
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

// Relabels fine labels with their ancestor at `depth` (root = 1), or keep
// them when they are already that shallow. The coarse binding must define
// every concept that results.
inline LabelMap coarsen_labels(const LabelMap& fine, const ConceptHierarchy& h, const DatasetBinding& fine_binding,
                               const DatasetBinding& coarse_binding, std::size_t depth) {
  if (depth < 1 || depth >= h.height()) {
    throw ValidationError(str_cat("coarse depth ", depth, " needs a hierarchy deeper than ", depth, "; this one has depth ",
                                  h.height()));
  }
  std::map<int, int> relabel;
  LabelMap out(fine.height, fine.width);
  for (std::size_t p = 0; p < fine.size(); ++p) {
    const int v = fine.values[p];
    if (v == LabelMap::kIgnore) continue;
    auto it = relabel.find(v);
    if (it == relabel.end()) {
      ConceptId c = fine_binding.concept_of(v);
      while (h.depth(c) > depth) c = *h.parent(c);
      auto coarse = coarse_binding.label_of(c);
      if (!coarse) {
        throw BindingError(str_cat("coarse dataset '", coarse_binding.name(), "' does not define '", h.name(c), "'"));
      }
      it = relabel.emplace(v, *coarse).first;
    }
    out.values[p] = it->second;
  }
  return out;
}

// A "comb": every internal concept has `branching` children and the first
// one continues downward, giving one neuron per level down to neuron depth
// `neuron_depth`. The companion dataset binds every leaf.
inline HierarchyDocument comb_hierarchy(std::size_t neuron_depth, std::size_t branching = 2) {
  if (neuron_depth == 0 || branching < 2) throw ValidationError("comb hierarchy needs depth >= 1 and branching >= 2");
  std::vector<ConceptHierarchy::Entry> entries{{"n0", std::nullopt}};
  DatasetSpec spec{"all", {}};
  int label = 0;
  for (std::size_t d = 0; d < neuron_depth; ++d) {
    for (std::size_t b = 0; b < branching; ++b) {
      const std::string name = b == 0 && d + 1 < neuron_depth ? str_cat("n", d + 1) : str_cat("leaf", d + 1, "_", b);
      entries.push_back({name, str_cat("n", d)});
      if (name.starts_with("leaf")) spec.labels.push_back({label++, name});
    }
  }
  HierarchyDocument doc;
  doc.hierarchy = ConceptHierarchy::build(entries, neuron_depth + 1, &doc.chains);
  doc.datasets.push_back(std::move(spec));
  return doc;
}

}  // namespace dsspn

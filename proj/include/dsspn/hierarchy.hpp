#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsspn/tensor.hpp"

namespace dsspn {

using ConceptId = int;
using ConceptSet = std::set<ConceptId>;

class HierarchyError : public ValidationError {
 public:
  enum class Kind { kCycle, kDuplicateName, kMultipleRoots, kNoRoot, kDanglingParent, kUnknownConcept, kDepthExceeded, kSchema };

  HierarchyError(Kind kind, const std::string& what) : ValidationError(what), kind_{kind} {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class BindingError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline constexpr std::size_t kDefaultMaxDepth = 5;

// Parents with exactly one child. They stay in the taxonomy but cannot host a
// neuron, so prediction walks through them.
struct ChainReport {
  std::vector<ConceptId> single_child_parents;
  bool empty() const { return single_child_parents.empty(); }
};

// Rooted concept tree. Ids are dense and follow document order; the root has depth 1.
class ConceptHierarchy {
 public:
  struct Entry {
    std::string name;
    std::optional<std::string> parent;
  };

  ConceptHierarchy() = default;

  static ConceptHierarchy build(const std::vector<Entry>& entries, std::size_t max_depth = kDefaultMaxDepth,
                                ChainReport* report = nullptr) {
    using K = HierarchyError::Kind;
    ConceptHierarchy h;
    h.max_depth_ = max_depth;
    const auto n = static_cast<ConceptId>(entries.size());
    if (n == 0) throw HierarchyError(K::kNoRoot, "hierarchy has no concepts");
    for (ConceptId i = 0; i < n; ++i) {
      const auto& name = entries[static_cast<std::size_t>(i)].name;
      if (name.empty()) throw HierarchyError(K::kSchema, str_cat("concept ", i, " has an empty name"));
      if (!h.index_.emplace(name, i).second) throw HierarchyError(K::kDuplicateName, "duplicate concept name: " + name);
      h.names_.push_back(name);
    }
    h.parent_.assign(entries.size(), std::nullopt);
    for (ConceptId i = 0; i < n; ++i) {
      const auto& e = entries[static_cast<std::size_t>(i)];
      if (!e.parent) continue;
      auto it = h.index_.find(*e.parent);
      if (it == h.index_.end()) {
        throw HierarchyError(K::kDanglingParent, "concept '" + e.name + "' names unknown parent '" + *e.parent + "'");
      }
      h.parent_[static_cast<std::size_t>(i)] = it->second;
    }
    // A parent chain longer than the concept count must revisit a node.
    for (ConceptId i = 0; i < n; ++i) {
      ConceptId cur = i;
      for (ConceptId steps = 0; h.parent_[static_cast<std::size_t>(cur)]; ++steps) {
        if (steps > n) throw HierarchyError(K::kCycle, "parent links form a cycle through '" + h.names_[static_cast<std::size_t>(i)] + "'");
        cur = *h.parent_[static_cast<std::size_t>(cur)];
      }
    }
    std::vector<ConceptId> roots;
    for (ConceptId i = 0; i < n; ++i) {
      if (!h.parent_[static_cast<std::size_t>(i)]) roots.push_back(i);
    }
    if (roots.empty()) throw HierarchyError(K::kNoRoot, "hierarchy has no root");
    if (roots.size() > 1) {
      throw HierarchyError(K::kMultipleRoots, "hierarchy has multiple roots: '" + h.names_[static_cast<std::size_t>(roots[0])] +
                                                  "' and '" + h.names_[static_cast<std::size_t>(roots[1])] + "'");
    }
    h.root_ = roots.front();
    h.children_.assign(entries.size(), {});
    for (ConceptId i = 0; i < n; ++i) {
      if (auto p = h.parent_[static_cast<std::size_t>(i)]) h.children_[static_cast<std::size_t>(*p)].push_back(i);
    }
    h.depth_.assign(entries.size(), 0);
    h.depth_[static_cast<std::size_t>(h.root_)] = 1;
    std::vector<ConceptId> stack{h.root_};
    while (!stack.empty()) {
      const ConceptId c = stack.back();
      stack.pop_back();
      if (h.depth_[static_cast<std::size_t>(c)] > max_depth) {
        throw HierarchyError(K::kDepthExceeded, str_cat("concept '", h.names_[static_cast<std::size_t>(c)], "' has depth ",
                                                        h.depth_[static_cast<std::size_t>(c)], " > max depth ", max_depth));
      }
      for (ConceptId ch : h.children_[static_cast<std::size_t>(c)]) {
        h.depth_[static_cast<std::size_t>(ch)] = h.depth_[static_cast<std::size_t>(c)] + 1;
        stack.push_back(ch);
      }
    }
    for (ConceptId i = 0; i < n; ++i) {
      const auto& ch = h.children_[static_cast<std::size_t>(i)];
      if (ch.size() >= 2) h.neurons_.push_back(i);
      if (ch.size() == 1) h.chains_.single_child_parents.push_back(i);
    }
    if (report) *report = h.chains_;
    return h;
  }

  std::size_t size() const { return names_.size(); }
  ConceptId root() const { return root_; }
  std::size_t max_depth() const { return max_depth_; }
  const ChainReport& chains() const { return chains_; }

  bool contains(ConceptId c) const { return c >= 0 && static_cast<std::size_t>(c) < names_.size(); }

  const std::string& name(ConceptId c) const { return names_.at(checked(c)); }

  std::optional<ConceptId> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  ConceptId id_of(const std::string& name) const {
    if (auto id = find(name)) return *id;
    throw HierarchyError(HierarchyError::Kind::kUnknownConcept, "unknown concept: " + name);
  }

  std::optional<ConceptId> parent(ConceptId c) const { return parent_[checked(c)]; }
  const std::vector<ConceptId>& children(ConceptId c) const { return children_[checked(c)]; }
  std::size_t depth(ConceptId c) const { return depth_[checked(c)]; }
  bool is_leaf(ConceptId c) const { return children(c).empty(); }

  // Strict ancestors, root first, parent last.
  std::vector<ConceptId> ancestors(ConceptId c) const {
    std::vector<ConceptId> out;
    for (auto p = parent(c); p; p = parent_[static_cast<std::size_t>(*p)]) out.push_back(*p);
    std::reverse(out.begin(), out.end());
    return out;
  }

  // Union of strict ancestors of every target; targets themselves excluded
  // unless they are an ancestor of another target.
  ConceptSet ancestor_closure(const ConceptSet& targets) const {
    ConceptSet out;
    for (ConceptId t : targets) {
      for (auto p = parent(t); p; p = parent_[static_cast<std::size_t>(*p)]) {
        if (!out.insert(*p).second) break;
      }
    }
    return out;
  }

  bool is_descendant_or_self(ConceptId c, ConceptId ancestor) const {
    checked(ancestor);
    for (std::optional<ConceptId> cur = c; cur; cur = parent_[static_cast<std::size_t>(*cur)]) {
      if (*cur == ancestor) return true;
    }
    return false;
  }

  // Concepts with at least two children; one neuron each. Sorted by id.
  const std::vector<ConceptId>& neuron_concepts() const { return neurons_; }
  bool is_neuron(ConceptId c) const { return children(c).size() >= 2; }

  // Ancestors that host neurons, root first. Single-child links are skipped.
  std::vector<ConceptId> neuron_ancestors(ConceptId c) const {
    std::vector<ConceptId> out;
    for (ConceptId a : ancestors(c)) {
      if (is_neuron(a)) out.push_back(a);
    }
    return out;
  }

  // Depth in the neuron tree (single-child chains collapsed); root neuron = 1.
  std::size_t neuron_depth(ConceptId c) const { return neuron_ancestors(c).size() + 1; }

  std::optional<ConceptId> parent_neuron(ConceptId c) const {
    for (auto p = parent(c); p; p = parent_[static_cast<std::size_t>(*p)]) {
      if (is_neuron(*p)) return *p;
    }
    return std::nullopt;
  }

  // Index into children(neuron) of the child whose subtree holds `c`, if `c`
  // is a strict descendant of `neuron`.
  std::optional<std::size_t> route_child(ConceptId neuron, ConceptId c) const {
    checked(neuron);
    std::optional<ConceptId> cur = c;
    while (cur) {
      auto p = parent_[static_cast<std::size_t>(*cur)];
      if (p && *p == neuron) {
        const auto& ch = children_[static_cast<std::size_t>(neuron)];
        return static_cast<std::size_t>(std::find(ch.begin(), ch.end(), *cur) - ch.begin());
      }
      cur = p;
    }
    return std::nullopt;
  }

  std::vector<ConceptId> leaves() const {
    std::vector<ConceptId> out;
    for (ConceptId i = 0; i < static_cast<ConceptId>(size()); ++i) {
      if (is_leaf(i)) out.push_back(i);
    }
    return out;
  }

  std::size_t height() const { return *std::max_element(depth_.begin(), depth_.end()); }

  friend bool operator==(const ConceptHierarchy& a, const ConceptHierarchy& b) {
    return a.names_ == b.names_ && a.parent_ == b.parent_ && a.root_ == b.root_;
  }

 private:
  std::size_t checked(ConceptId c) const {
    if (!contains(c)) throw HierarchyError(HierarchyError::Kind::kUnknownConcept, str_cat("unknown concept id ", c));
    return static_cast<std::size_t>(c);
  }

  std::vector<std::string> names_;
  std::unordered_map<std::string, ConceptId> index_;
  std::vector<std::optional<ConceptId>> parent_;
  std::vector<std::vector<ConceptId>> children_;
  std::vector<std::size_t> depth_;
  std::vector<ConceptId> neurons_;
  ChainReport chains_;
  ConceptId root_{0};
  std::size_t max_depth_{kDefaultMaxDepth};
};

struct DatasetSpec {
  struct Label {
    int label_id;
    std::string concept_name;
  };
  std::string name;
  std::vector<Label> labels;
};

// Per-dataset label table plus, for every neuron, which children lead to a
// concept the dataset defines.
class DatasetBinding {
 public:
  const std::string& name() const { return name_; }

  ConceptId concept_of(int label_id) const {
    auto it = label_to_concept_.find(label_id);
    if (it == label_to_concept_.end()) throw BindingError(str_cat("label id ", label_id, " is not bound in dataset '", name_, "'"));
    return it->second;
  }

  bool has_label(int label_id) const { return label_to_concept_.count(label_id) > 0; }

  std::optional<int> label_of(ConceptId c) const {
    auto it = concept_to_label_.find(c);
    if (it == concept_to_label_.end()) return std::nullopt;
    return it->second;
  }

  bool is_defined(ConceptId c) const { return defined_.count(c) > 0; }
  const ConceptSet& defined() const { return defined_; }

  // Sorted label ids; their position is the class index used by metrics.
  const std::vector<int>& label_ids() const { return label_ids_; }

  std::optional<std::size_t> class_index(int label_id) const {
    auto it = std::lower_bound(label_ids_.begin(), label_ids_.end(), label_id);
    if (it == label_ids_.end() || *it != label_id) return std::nullopt;
    return static_cast<std::size_t>(it - label_ids_.begin());
  }

  const std::vector<bool>& child_mask(ConceptId neuron) const {
    auto it = child_mask_.find(neuron);
    if (it == child_mask_.end()) throw BindingError(str_cat("concept ", neuron, " is not a neuron"));
    return it->second;
  }

  bool any_child(ConceptId neuron) const {
    const auto& m = child_mask(neuron);
    return std::find(m.begin(), m.end(), true) != m.end();
  }

  friend DatasetBinding bind_dataset(const ConceptHierarchy& h, const DatasetSpec& spec);

 private:
  std::string name_;
  std::map<int, ConceptId> label_to_concept_;
  std::map<ConceptId, int> concept_to_label_;
  ConceptSet defined_;
  std::vector<int> label_ids_;
  std::map<ConceptId, std::vector<bool>> child_mask_;
};

inline DatasetBinding bind_dataset(const ConceptHierarchy& h, const DatasetSpec& spec) {
  DatasetBinding b;
  b.name_ = spec.name;
  for (const auto& l : spec.labels) {
    auto c = h.find(l.concept_name);
    if (!c) throw BindingError("dataset '" + spec.name + "' binds unknown concept '" + l.concept_name + "'");
    if (!b.label_to_concept_.emplace(l.label_id, *c).second) {
      throw BindingError(str_cat("dataset '", spec.name, "' has duplicate label id ", l.label_id));
    }
    if (!b.concept_to_label_.emplace(*c, l.label_id).second) {
      throw BindingError("dataset '" + spec.name + "' binds concept '" + l.concept_name + "' twice");
    }
    b.defined_.insert(*c);
    b.label_ids_.push_back(l.label_id);
  }
  std::sort(b.label_ids_.begin(), b.label_ids_.end());
  // reaches[c]: c or some descendant of c is defined. Children have larger
  // depth, so processing by decreasing depth visits them first.
  std::vector<ConceptId> order(h.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<ConceptId>(i);
  std::stable_sort(order.begin(), order.end(), [&h](ConceptId a, ConceptId c) { return h.depth(a) > h.depth(c); });
  std::vector<bool> reaches(h.size(), false);
  for (ConceptId c : order) {
    bool r = b.defined_.count(c) > 0;
    for (ConceptId ch : h.children(c)) r = r || reaches[static_cast<std::size_t>(ch)];
    reaches[static_cast<std::size_t>(c)] = r;
  }
  for (ConceptId n : h.neuron_concepts()) {
    std::vector<bool> mask;
    for (ConceptId ch : h.children(n)) mask.push_back(reaches[static_cast<std::size_t>(ch)]);
    b.child_mask_.emplace(n, std::move(mask));
  }
  return b;
}

// A parsed hierarchy JSON document:
// {"concepts": [{"name", "parent"}], "datasets": [{"name", "labels": [{"label_id", "concept"}]}]}
struct HierarchyDocument {
  ConceptHierarchy hierarchy;
  std::vector<DatasetSpec> datasets;
  ChainReport chains;

  const DatasetSpec& dataset(const std::string& name) const {
    for (const auto& d : datasets) {
      if (d.name == name) return d;
    }
    throw BindingError("hierarchy document has no dataset named '" + name + "'");
  }

  DatasetBinding bind(const std::string& name) const { return bind_dataset(hierarchy, dataset(name)); }
};

inline HierarchyDocument parse_hierarchy(const nlohmann::json& doc, std::size_t max_depth = kDefaultMaxDepth) {
  using K = HierarchyError::Kind;
  if (!doc.is_object() || !doc.contains("concepts") || !doc["concepts"].is_array()) {
    throw HierarchyError(K::kSchema, "hierarchy document needs a 'concepts' array");
  }
  std::vector<ConceptHierarchy::Entry> entries;
  for (const auto& c : doc["concepts"]) {
    if (!c.is_object() || !c.contains("name") || !c["name"].is_string()) {
      throw HierarchyError(K::kSchema, "every concept needs a string 'name'");
    }
    ConceptHierarchy::Entry e{c["name"].get<std::string>(), std::nullopt};
    if (c.contains("parent") && !c["parent"].is_null()) {
      if (!c["parent"].is_string()) throw HierarchyError(K::kSchema, "concept '" + e.name + "': parent must be a string or null");
      e.parent = c["parent"].get<std::string>();
    }
    entries.push_back(std::move(e));
  }
  HierarchyDocument out;
  out.hierarchy = ConceptHierarchy::build(entries, max_depth, &out.chains);
  if (doc.contains("datasets")) {
    if (!doc["datasets"].is_array()) throw HierarchyError(K::kSchema, "'datasets' must be an array");
    for (const auto& d : doc["datasets"]) {
      DatasetSpec spec;
      try {
        spec.name = d.at("name").get<std::string>();
        for (const auto& l : d.at("labels")) spec.labels.push_back({l.at("label_id").get<int>(), l.at("concept").get<std::string>()});
      } catch (const nlohmann::json::exception& e) {
        throw HierarchyError(K::kSchema, std::string("malformed dataset entry: ") + e.what());
      }
      out.datasets.push_back(std::move(spec));
    }
  }
  return out;
}

inline nlohmann::json to_json(const ConceptHierarchy& h, const std::vector<DatasetSpec>& datasets = {}) {
  nlohmann::json concepts = nlohmann::json::array();
  for (ConceptId i = 0; i < static_cast<ConceptId>(h.size()); ++i) {
    nlohmann::json c{{"name", h.name(i)}};
    if (auto p = h.parent(i)) {
      c["parent"] = h.name(*p);
    } else {
      c["parent"] = nullptr;
    }
    concepts.push_back(std::move(c));
  }
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& d : datasets) {
    nlohmann::json labels = nlohmann::json::array();
    for (const auto& l : d.labels) labels.push_back({{"label_id", l.label_id}, {"concept", l.concept_name}});
    ds.push_back({{"name", d.name}, {"labels", std::move(labels)}});
  }
  return {{"concepts", std::move(concepts)}, {"datasets", std::move(ds)}};
}

inline HierarchyDocument load_hierarchy_file(const std::filesystem::path& path, std::size_t max_depth = kDefaultMaxDepth) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open hierarchy file: " + path.string());
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw HierarchyError(HierarchyError::Kind::kSchema, path.string() + ": " + e.what());
  }
  return parse_hierarchy(doc, max_depth);
}

}  // namespace dsspn

#include <random>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dsspn;
using namespace dsspn::testing;

namespace {

ConceptSet ids(const ConceptHierarchy& h, std::initializer_list<const char*> names) {
  ConceptSet s;
  for (const char* n : names) s.insert(h.id_of(n));
  return s;
}

nlohmann::json doc_of(std::initializer_list<std::pair<const char*, const char*>> concepts) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, parent] : concepts) arr.push_back({{"name", name}, {"parent", parent ? nlohmann::json(parent) : nlohmann::json()}});
  return {{"concepts", arr}};
}

HierarchyError::Kind error_kind(const nlohmann::json& j) {
  try {
    parse_hierarchy(j);
  } catch (const HierarchyError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "document was accepted";
  return HierarchyError::Kind::kSchema;
}

}  // namespace

TEST(Hierarchy, SceneTreeDepthsAndAncestors) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  EXPECT_EQ(h.depth(h.root()), 1u);
  EXPECT_EQ(h.name(h.root()), "entity");
  EXPECT_EQ(h.depth(h.id_of("desk")), 4u);
  EXPECT_EQ(h.ancestors(h.id_of("desk")), (std::vector<ConceptId>{h.id_of("entity"), h.id_of("furniture-things"), h.id_of("table")}));
  EXPECT_TRUE(h.ancestors(h.root()).empty());
}

TEST(Hierarchy, LoadErrors) {
  EXPECT_EQ(error_kind(doc_of({{"r", nullptr}, {"a", "b"}, {"b", "a"}})), HierarchyError::Kind::kCycle);
  EXPECT_EQ(error_kind(doc_of({{"r", nullptr}, {"r", "r"}})), HierarchyError::Kind::kDuplicateName);
  EXPECT_EQ(error_kind(doc_of({{"r", nullptr}, {"s", nullptr}})), HierarchyError::Kind::kMultipleRoots);
  EXPECT_EQ(error_kind(doc_of({{"r", nullptr}, {"a", "ghost"}})), HierarchyError::Kind::kDanglingParent);
  EXPECT_EQ(error_kind(doc_of({{"a", "b"}, {"b", "a"}})), HierarchyError::Kind::kCycle);
  EXPECT_EQ(error_kind(nlohmann::json{{"nodes", 1}}), HierarchyError::Kind::kSchema);
  EXPECT_EQ(error_kind(doc_of({{"r", nullptr}, {"a", "r"}, {"b", "a"}, {"c", "b"}, {"d", "c"}, {"e", "d"}})),
            HierarchyError::Kind::kDepthExceeded);
}

TEST(Hierarchy, SingleChildChainIsReported) {
  const auto doc = parse_hierarchy(doc_of({{"root", nullptr}, {"only", "root"}}));
  EXPECT_EQ(doc.chains.single_child_parents, std::vector<ConceptId>{doc.hierarchy.id_of("root")});
  EXPECT_TRUE(doc.hierarchy.neuron_concepts().empty());
  EXPECT_THROW(build_model<float>(doc.hierarchy, tiny_config(), 0), ValidationError);
}

TEST(Hierarchy, AncestorsMatchParentWalkOnRandomTrees) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto entries = random_tree_entries(30, 5, rng);
    const auto h = ConceptHierarchy::build(entries, 5);
    for (ConceptId c = 0; c < static_cast<ConceptId>(h.size()); ++c) {
      const auto a = h.ancestors(c);
      EXPECT_EQ(a, parent_chain(entries, c));
      EXPECT_EQ(a.size(), h.depth(c) - 1);
      if (auto p = h.parent(c)) {
        auto shorter = a;
        shorter.pop_back();
        EXPECT_EQ(h.ancestors(*p), shorter);
      }
    }
  }
}

TEST(Hierarchy, AncestorClosureSceneExample) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  EXPECT_EQ(h.ancestor_closure(ids(h, {"tree", "grass", "plant-other", "fence", "animal-things"})),
            ids(h, {"entity", "structure-stuff", "plant-stuff"}));
  EXPECT_EQ(h.ancestor_closure(ids(h, {"way"})), ids(h, {"entity"}));
}

TEST(Hierarchy, AncestorClosureOfAllLeavesIsAllInternalNodes) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const auto entries = random_tree_entries(30, 5, rng);
    const auto h = ConceptHierarchy::build(entries, 5);
    ConceptSet leaves, internal;
    for (ConceptId c = 0; c < 30; ++c) (h.children(c).empty() ? leaves : internal).insert(c);
    EXPECT_EQ(h.ancestor_closure(leaves), internal);
    // Random subsets: closure is the union of independent parent walks.
    ConceptSet subset, want;
    std::bernoulli_distribution take(0.3);
    for (ConceptId c = 0; c < 30; ++c) {
      if (!take(rng)) continue;
      subset.insert(c);
      for (ConceptId a : parent_chain(entries, c)) want.insert(a);
    }
    const auto got = h.ancestor_closure(subset);
    EXPECT_EQ(got, want);
    for (ConceptId c : got) EXPECT_FALSE(h.children(c).empty());
  }
}

TEST(Hierarchy, NeuronConceptsAreNodesWithTwoOrMoreChildren) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  const auto& n = h.neuron_concepts();
  for (const char* name : {"entity", "plant-stuff", "structure-stuff"}) {
    EXPECT_TRUE(std::count(n.begin(), n.end(), h.id_of(name))) << name;
  }
  for (ConceptId leaf : h.leaves()) EXPECT_FALSE(std::count(n.begin(), n.end(), leaf));

  const auto chain = parse_hierarchy(doc_of({{"r", nullptr}, {"a", "r"}, {"b", "a"}}));
  EXPECT_TRUE(chain.hierarchy.neuron_concepts().empty());

  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    const auto entries = random_tree_entries(25, 5, rng);
    const auto t = ConceptHierarchy::build(entries, 5);
    std::map<std::string, int> out_degree;
    for (const auto& e : entries) {
      if (e.parent) ++out_degree[*e.parent];
    }
    std::size_t count = 0;
    for (const auto& [name, d] : out_degree) count += d >= 2;
    EXPECT_EQ(t.neuron_concepts().size(), count);
  }
}

TEST(Hierarchy, NeuronDepthSkipsSingleChildLinks) {
  const auto doc = parse_hierarchy(doc_of({{"r", nullptr}, {"x", "r"}, {"y", "r"}, {"solo", "x"}, {"p", "solo"}, {"q", "solo"}}));
  const auto& h = doc.hierarchy;
  EXPECT_EQ(h.neuron_depth(h.id_of("r")), 1u);
  EXPECT_EQ(h.neuron_depth(h.id_of("solo")), 2u);
  EXPECT_EQ(h.parent_neuron(h.id_of("solo")), h.id_of("r"));
  EXPECT_EQ(h.route_child(h.id_of("r"), h.id_of("p")), std::optional<std::size_t>(0));
  EXPECT_EQ(h.route_child(h.id_of("r"), h.id_of("y")), std::optional<std::size_t>(1));
  EXPECT_EQ(h.route_child(h.id_of("solo"), h.id_of("y")), std::nullopt);
}

TEST(Binding, CityscapeMasksLane) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("cityscape");
  const auto& kids = h.children(h.id_of("way"));
  const auto& mask = b.child_mask(h.id_of("way"));
  for (std::size_t k = 0; k < kids.size(); ++k) EXPECT_EQ(mask[k], h.name(kids[k]) != "lane") << h.name(kids[k]);
  EXPECT_FALSE(b.any_child(h.id_of("animal-things")));
}

TEST(Binding, AllLeavesEnableEveryChild) {
  std::mt19937_64 rng(31);
  const auto h = random_tree(30, 5, rng);
  const auto b = bind_dataset(h, leaf_spec(h));
  for (ConceptId n : h.neuron_concepts()) {
    for (bool m : b.child_mask(n)) EXPECT_TRUE(m);
  }
}

TEST(Binding, SingleConceptEnablesOnlyItsPath) {
  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 10; ++trial) {
    const auto entries = random_tree_entries(30, 5, rng);
    const auto h = ConceptHierarchy::build(entries, 5);
    for (ConceptId c = 0; c < 30; ++c) {
      const auto b = bind_dataset(h, DatasetSpec{"one", {{0, h.name(c)}}});
      const auto chain = parent_chain(entries, c);
      for (ConceptId n : h.neuron_concepts()) {
        const auto& kids = h.children(n);
        for (std::size_t k = 0; k < kids.size(); ++k) {
          // Reachability oracle: the child is c or an ancestor of c.
          const bool on_path = kids[k] == c || std::count(chain.begin(), chain.end(), kids[k]);
          EXPECT_EQ(b.child_mask(n)[k], on_path);
        }
      }
    }
  }
}

TEST(Binding, MasksAreMonotoneInTheLabelSet) {
  std::mt19937_64 rng(41);
  const auto h = random_tree(30, 5, rng);
  DatasetSpec grow{"g", {}};
  auto prev = bind_dataset(h, grow);
  for (ConceptId c = 0; c < 30; ++c) {
    grow.labels.push_back({c, h.name(c)});
    const auto next = bind_dataset(h, grow);
    for (ConceptId n : h.neuron_concepts()) {
      for (std::size_t k = 0; k < h.children(n).size(); ++k) {
        if (prev.child_mask(n)[k]) { EXPECT_TRUE(next.child_mask(n)[k]); }
      }
    }
    prev = next;
  }
}

TEST(Binding, Errors) {
  const auto doc = scene_doc();
  EXPECT_THROW(bind_dataset(doc.hierarchy, DatasetSpec{"x", {{0, "unicorn"}}}), BindingError);
  EXPECT_THROW(bind_dataset(doc.hierarchy, DatasetSpec{"x", {{0, "cat"}, {0, "dog"}}}), BindingError);
  EXPECT_THROW(bind_dataset(doc.hierarchy, DatasetSpec{"x", {{0, "cat"}, {1, "cat"}}}), BindingError);
  const auto b = doc.bind("ade20k");
  EXPECT_THROW(b.concept_of(9999), BindingError);
  EXPECT_THROW(doc.bind("no-such-dataset"), BindingError);
}

TEST(Hierarchy, SaveReloadRoundTrip) {
  std::mt19937_64 rng(43);
  const auto h = random_tree(30, 5, rng);
  const std::vector<DatasetSpec> ds{leaf_spec(h)};
  const auto back = parse_hierarchy(to_json(h, ds));
  EXPECT_TRUE(back.hierarchy == h);
  for (ConceptId c = 0; c < 30; ++c) EXPECT_EQ(back.hierarchy.name(c), h.name(c));
  ASSERT_EQ(back.datasets.size(), 1u);
  EXPECT_EQ(back.datasets[0].labels.size(), ds[0].labels.size());

  const auto scene = scene_doc();
  const auto again = parse_hierarchy(to_json(scene.hierarchy, scene.datasets));
  EXPECT_TRUE(again.hierarchy == scene.hierarchy);
  EXPECT_EQ(again.datasets.size(), scene.datasets.size());
}

#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dsspn;
using namespace dsspn::testing;

namespace {

ConceptSet named(const ConceptHierarchy& h, std::initializer_list<const char*> names) {
  ConceptSet s;
  for (const char* n : names) s.insert(h.id_of(n));
  return s;
}

LabelMap labels_of(const DatasetBinding& b, const ConceptHierarchy& h, std::size_t height, std::size_t width,
                   const std::vector<const char*>& concepts) {
  LabelMap m(height, width);
  for (std::size_t p = 0; p < m.size(); ++p) m.values[p] = *b.label_of(h.id_of(concepts[p % concepts.size()]));
  return m;
}

}  // namespace

TEST(Plan, SceneExampleActivatesStrictAncestors) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("ade20k");
  const auto plan = plan_activation(named(h, {"tree", "grass", "plant-other", "fence", "animal-things"}), h, b);
  EXPECT_EQ(ConceptSet(plan.neurons.begin(), plan.neurons.end()), named(h, {"entity", "structure-stuff", "plant-stuff"}));
  EXPECT_EQ(plan.neurons.front(), h.id_of("entity"));
  EXPECT_FALSE(plan.contains(h.id_of("animal-things")));
}

TEST(Plan, DirectChildOfRootActivatesOnlyRoot) {
  const auto doc = scene_doc();
  const auto b = doc.bind("ade20k");
  const auto plan = plan_activation(named(doc.hierarchy, {"animal-things"}), doc.hierarchy, b);
  EXPECT_EQ(plan.neurons, std::vector<ConceptId>{doc.hierarchy.root()});
}

TEST(Plan, Errors) {
  const auto doc = scene_doc();
  const auto b = doc.bind("cityscape");
  EXPECT_THROW(plan_activation({}, doc.hierarchy, b), ValidationError);
  EXPECT_THROW(plan_activation(named(doc.hierarchy, {"cat"}), doc.hierarchy, b), BindingError);
}

TEST(Plan, DynamicIsClosedOrderedAndWithinFixed) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 30; ++trial) {
    const auto h = random_tree(30, 5, rng);
    if (h.neuron_concepts().empty()) continue;
    const auto b = bind_dataset(h, leaf_spec(h));
    const auto fixed = fixed_plan(h, b);
    const ConceptSet fixed_set(fixed.neurons.begin(), fixed.neurons.end());
    for (int draw = 0; draw < 20; ++draw) {
      const auto lab = random_labels(4, 4, b.label_ids(), rng, 0.2);
      const auto present = present_concepts(lab, b);
      if (present.empty()) continue;
      const auto plan = plan_activation(present, h, b);
      std::vector<ConceptId> seen;
      for (ConceptId n : plan.neurons) {
        EXPECT_TRUE(fixed_set.count(n));
        // Parent neuron precedes the child.
        if (auto p = h.parent_neuron(n)) { EXPECT_TRUE(std::count(seen.begin(), seen.end(), *p)); }
        EXPECT_EQ(plan.paths.at(n), h.neuron_ancestors(n));
        seen.push_back(n);
      }
      // Independent oracle: neuron ancestors of the present concepts.
      ConceptSet want;
      for (ConceptId c : present) {
        for (ConceptId a : h.neuron_ancestors(c)) want.insert(a);
      }
      EXPECT_EQ(ConceptSet(plan.neurons.begin(), plan.neurons.end()), want);
    }
  }
}

TEST(Present, Basics) {
  const auto doc = toy_doc();
  const auto b = doc.bind("toy-fine");
  EXPECT_TRUE(present_concepts(LabelMap(3, 3), b).empty());
  LabelMap two(2, 2);
  two.values = {0, 7, -1, 0};
  EXPECT_EQ(present_concepts(two, b), named(doc.hierarchy, {"cat", "grass"}));
  two.values[2] = 42;
  EXPECT_THROW(present_concepts(two, b), BindingError);
}

TEST(Present, InvariantUnderPixelPermutation) {
  const auto doc = toy_doc();
  const auto b = doc.bind("toy-fine");
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 50; ++trial) {
    auto lab = random_labels(5, 7, {0, 2, 5}, rng, 0.3);
    const auto before = present_concepts(lab, b);
    std::shuffle(lab.values.begin(), lab.values.end(), rng);
    EXPECT_EQ(present_concepts(lab, b), before);
  }
}

TEST(Supervision, CityscapeLaneChannelIsMasked) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("cityscape");
  const auto lab = labels_of(b, h, 2, 3, {"road", "sidewalk", "tree"});
  const auto plan = plan_activation(present_concepts(lab, b), h, b);
  const auto sup = build_supervision<double>(lab, plan, h, b);
  const ConceptId way = h.id_of("way");
  const auto& t = sup.at(way);
  const auto& kids = h.children(way);
  const std::size_t lane = static_cast<std::size_t>(std::find(kids.begin(), kids.end(), h.id_of("lane")) - kids.begin());
  const auto mask = t.loss_mask();
  for (std::size_t p = 0; p < 6; ++p) {
    EXPECT_EQ(mask[lane * 6 + p], 0.0);
    EXPECT_EQ(t.targets[lane * 6 + p], 0.0);
  }
  // Road and sidewalk pixels supervise way; tree pixels do not.
  EXPECT_EQ(t.valid[0], 1.0);
  EXPECT_EQ(t.valid[1], 1.0);
  EXPECT_EQ(t.valid[2], 0.0);
}

TEST(Supervision, CoarseAnimalLabelGivesNoSupervisionBelowIt) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("ade20k");
  const auto lab = labels_of(b, h, 2, 2, {"animal-things", "tree"});
  const auto plan = plan_activation(present_concepts(lab, b), h, b);
  const auto sup = build_supervision<double>(lab, plan, h, b);
  EXPECT_EQ(sup.count(h.id_of("animal-things")), 0u);
  // The root still learns that these pixels are animal-things.
  const auto& root = sup.at(h.root());
  const auto k = *h.route_child(h.root(), h.id_of("animal-things"));
  EXPECT_EQ(root.targets[k * 4 + 0], 1.0);
  EXPECT_EQ(root.child_index[0], static_cast<int>(k));
}

TEST(Supervision, SingleLabelAtRootIsAllOnes) {
  const auto doc = toy_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("toy-coarse");
  LabelMap lab(3, 3, 1);  // vehicle
  lab.at(1, 1) = LabelMap::kIgnore;
  const auto plan = plan_activation(present_concepts(lab, b), h, b);
  ASSERT_EQ(plan.neurons, std::vector<ConceptId>{h.root()});
  const auto sup = build_supervision<float>(lab, plan, h, b);
  const auto k = *h.route_child(h.root(), h.id_of("vehicle"));
  const auto& t = sup.at(h.root());
  for (std::size_t p = 0; p < 9; ++p) {
    EXPECT_EQ(t.targets[k * 9 + p], p == 4 ? 0.0f : 1.0f);
    EXPECT_EQ(t.valid[p], p == 4 ? 0.0f : 1.0f);
  }
}

TEST(Supervision, ChildTargetsPartitionValidPixels) {
  std::mt19937_64 rng(57);
  for (int trial = 0; trial < 20; ++trial) {
    const auto h = random_tree(25, 5, rng);
    if (h.neuron_concepts().empty()) continue;
    // Bind a random subset of concepts, leaves included.
    DatasetSpec spec{"rand", {}};
    std::bernoulli_distribution take(0.5);
    for (ConceptId c = 0; c < 25; ++c) {
      if (h.is_leaf(c) || take(rng)) spec.labels.push_back({c, h.name(c)});
    }
    const auto b = bind_dataset(h, spec);
    const auto lab = random_labels(4, 4, b.label_ids(), rng, 0.2);
    const auto present = present_concepts(lab, b);
    if (present.empty()) continue;
    const auto plan = plan_activation(present, h, b);
    const auto sup = build_supervision<double>(lab, plan, h, b);
    for (const auto& [n, t] : sup) {
      const std::size_t kids = h.children(n).size();
      for (std::size_t p = 0; p < 16; ++p) {
        double total = 0;
        for (std::size_t k = 0; k < kids; ++k) total += t.targets[k * 16 + p];
        EXPECT_EQ(total, t.valid[p]);
        // Oracle: valid iff the pixel's concept lies strictly below n.
        const int v = lab.values[p];
        const bool below = v != LabelMap::kIgnore && b.concept_of(v) != n && h.is_descendant_or_self(b.concept_of(v), n);
        EXPECT_EQ(t.valid[p] == 1.0, below);
      }
    }
  }
}

TEST(Supervision, CoarseningNeverAddsDeeperSupervision) {
  const auto doc = toy_doc();
  const auto& h = doc.hierarchy;
  const auto fine = doc.bind("toy-fine"), coarse = doc.bind("toy-coarse");
  std::mt19937_64 rng(59);
  for (int trial = 0; trial < 50; ++trial) {
    const auto lab = random_labels(3, 3, fine.label_ids(), rng, 0.2);
    const auto present = present_concepts(lab, fine);
    if (present.empty()) continue;
    const auto cl = coarsen_labels(lab, h, fine, coarse, 2);
    const auto fs = build_supervision<double>(lab, plan_activation(present, h, fine), h, fine);
    const auto cs = build_supervision<double>(cl, plan_activation(present_concepts(cl, coarse), h, coarse), h, coarse);
    for (const auto& [n, t] : cs) {
      ASSERT_TRUE(fs.count(n));
      for (std::size_t p = 0; p < 9; ++p) {
        if (t.valid[p] == 1.0) { EXPECT_EQ(fs.at(n).valid[p], 1.0); }
      }
    }
    EXPECT_EQ(cs.size(), 1u);  // only the root
  }
}

TEST(Subsample, PicksCellCentres) {
  LabelMap full(16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) full.at(y, x) = static_cast<int>(y * 16 + x);
  const auto s = subsample_labels(full, 8);
  EXPECT_EQ(s.values, (std::vector<int>{4 * 16 + 4, 4 * 16 + 12, 12 * 16 + 4, 12 * 16 + 12}));
  EXPECT_THROW(subsample_labels(LabelMap(12, 16), 8), ShapeError);
}

TEST(Forward, RootOnlyPlanRunsOneNeuron) {
  const auto doc = scene_doc();
  const auto b = doc.bind("ade20k");
  const auto g = build_model<float>(doc.hierarchy, tiny_config(), 0);
  const auto plan = plan_activation(named(doc.hierarchy, {"animal-things"}), doc.hierarchy, b);
  Tape<float> t(false);
  const auto fwd = forward_plan(t, g, t.constant(Tensor<float>(Shape{1, 3, 16, 16}, 0.2f)), plan);
  EXPECT_EQ(fwd.memory.neuron_executions, 1u);
  EXPECT_EQ(fwd.outputs.size(), 1u);
}

TEST(Forward, DeepPathRunsEveryNeuronOnIt) {
  const auto doc = comb_hierarchy(3);
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("all");
  const auto g = build_model<float>(h, tiny_config(), 0);
  const auto plan = plan_activation(named(h, {"leaf3_1"}), h, b);
  EXPECT_EQ(plan.neurons, (std::vector<ConceptId>{h.id_of("n0"), h.id_of("n1"), h.id_of("n2")}));
  Tape<float> t(false);
  EXPECT_EQ(forward_plan(t, g, t.constant(Tensor<float>(Shape{1, 3, 8, 8}, 0.2f)), plan).memory.neuron_executions, 3u);
}

TEST(Forward, InactiveNeuronsHaveNoGradientAndZeroSensitivity) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("cocostuff");
  auto g = build_model<double>(h, tiny_config(3, 4), 2);
  std::mt19937_64 rng(61);
  const auto image = random_image<double>(Shape{1, 3, 16, 16}, rng);
  const auto lab = labels_of(b, h, 2, 2, {"cat", "dog", "tree", "fence"});
  const auto plan = plan_activation(present_concepts(lab, b), h, b);
  ASSERT_FALSE(plan.contains(h.id_of("way")));
  auto loss_of = [&](NeuronGraph<double>& model) {
    Tape<double> t;
    auto fwd = forward_plan(t, model, t.constant(image), plan);
    auto loss = dsspn_loss(t, fwd.outputs, build_supervision<double>(lab, plan, h, b), model.config());
    const double v = loss.value().item();
    return std::make_pair(v, t.backward(loss));
  };
  const auto [base, grads] = loss_of(g);
  const ParamId way_w = *g.params().find("neuron.way.conv1.weight");
  EXPECT_EQ(grads.count(way_w), 0u);
  g.params()[way_w].value[0] += 0.5;
  EXPECT_EQ(loss_of(g).first, base);
}

TEST(Loss, AllMaskedAndPerfectLogits) {
  const auto doc = toy_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("toy-fine");
  Tape<double> t;
  ModelConfig cfg;
  EXPECT_EQ(dsspn_loss(t, PlanOutputs<double>{}, SupervisionTarget<double>{}, cfg).value().item(), 0.0);

  LabelMap lab(2, 2);
  lab.values = {0, 3, 6, 1};
  const auto plan = plan_activation(present_concepts(lab, b), h, b);
  const auto sup = build_supervision<double>(lab, plan, h, b);
  PlanOutputs<double> outs;
  for (const auto& [n, tg] : sup) {
    Tensor<double> z(tg.targets.shape());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = tg.targets[i] == 1.0 ? 50.0 : -50.0;
    outs.emplace(n, NeuronResult<double>{Var<double>(), t.leaf(z)});
  }
  EXPECT_LT(dsspn_loss(t, outs, sup, cfg).value().item(), 1e-6);
  cfg.head_loss = HeadLoss::kSoftmax;
  EXPECT_LT(dsspn_loss(t, outs, sup, cfg).value().item(), 1e-6);

  LabelMap none(2, 2);
  for (const auto& [n, tg] : build_supervision<double>(none, plan, h, b)) {
    for (double v : tg.valid.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Loss, MaskedChildLogitHasExactlyZeroGradient) {
  const auto doc = scene_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("cityscape");
  const auto lab = labels_of(b, h, 2, 2, {"road", "sidewalk", "wall", "road"});
  const auto plan = plan_activation(present_concepts(lab, b), h, b);
  const auto sup = build_supervision<double>(lab, plan, h, b);
  const ConceptId way = h.id_of("way");
  const auto& kids = h.children(way);
  const std::size_t lane = static_cast<std::size_t>(std::find(kids.begin(), kids.end(), h.id_of("lane")) - kids.begin());
  std::mt19937_64 rng(67);
  for (HeadLoss mode : {HeadLoss::kBce, HeadLoss::kSoftmax}) {
    ModelConfig cfg;
    cfg.head_loss = mode;
    std::map<ConceptId, Tensor<double>> base;
    for (const auto& [n, tg] : sup) base.emplace(n, random_image<double>(tg.targets.shape(), rng));
    auto eval = [&](const std::map<ConceptId, Tensor<double>>& z, std::map<ConceptId, Tensor<double>>* grads) {
      Tape<double> t;
      PlanOutputs<double> outs;
      std::map<ConceptId, Var<double>> leaves;
      for (const auto& [n, v] : z) {
        leaves.emplace(n, t.leaf(v));
        outs.emplace(n, NeuronResult<double>{Var<double>(), leaves.at(n)});
      }
      auto loss = dsspn_loss(t, outs, sup, cfg);
      const double value = loss.value().item();
      if (grads) {
        t.backward(loss);
        for (const auto& [n, v] : leaves) grads->emplace(n, *t.grad(v));
      }
      return value;
    };
    std::map<ConceptId, Tensor<double>> grads;
    const double f0 = eval(base, &grads);
    for (std::size_t p = 0; p < 4; ++p) {
      EXPECT_EQ(grads.at(way)[lane * 4 + p], 0.0);
      // Numerically: moving the lane logit does not move the loss at all.
      auto moved = base;
      moved.at(way)[lane * 4 + p] += 1e-3;
      EXPECT_EQ(eval(moved, nullptr), f0);
    }
  }
}

TEST(Loss, FixedAndDynamicAgreeOnFullLabelSamples) {
  const auto doc = toy_doc();
  const auto& h = doc.hierarchy;
  const auto b = doc.bind("toy-fine");
  const auto g = build_model<float>(h, tiny_config(), 4);
  std::mt19937_64 rng(71);
  const auto image = random_image<float>(Shape{1, 3, 16, 16}, rng);
  LabelMap lab(2, 2);
  lab.values = {0, 3, 6, 7};  // reaches every neuron
  auto loss_for = [&](Structure mode) {
    const auto plan = plan_activation(present_concepts(lab, b), h, b, mode);
    Tape<float> t(false);
    auto fwd = forward_plan(t, g, t.constant(image), plan);
    return dsspn_loss(t, fwd.outputs, build_supervision<float>(lab, plan, h, b), g.config()).value().item();
  };
  EXPECT_EQ(loss_for(Structure::kDynamic), loss_for(Structure::kFixed));
}

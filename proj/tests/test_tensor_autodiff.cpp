#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dsspn;
using dsspn::testing::random_image;

namespace {

// Direct nested-loop convolution, written independently of the kernels.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, std::size_t pad,
                          std::size_t dil, std::size_t stride) {
  const Shape xs = x.shape(), ws = w.shape();
  const long span = static_cast<long>(dil * (ws.h - 1) + 1);
  const std::size_t oh = static_cast<std::size_t>((static_cast<long>(xs.h + 2 * pad) - span) / static_cast<long>(stride) + 1);
  const std::size_t ow = static_cast<std::size_t>((static_cast<long>(xs.w + 2 * pad) - span) / static_cast<long>(stride) + 1);
  Tensor<double> out(Shape{xs.n, ws.n, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = b[o];
          for (std::size_t i = 0; i < ws.c; ++i)
            for (std::size_t ky = 0; ky < ws.h; ++ky)
              for (std::size_t kx = 0; kx < ws.w; ++kx) {
                const long iy = static_cast<long>(y * stride + ky * dil) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + kx * dil) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
                acc += w.at(o, i, ky, kx) * x.at(n, i, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
          out.at(n, o, y, xx) = acc;
        }
  return out;
}

Tensor<double> conv_value(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, ConvGeometry g) {
  Tape<double> t(false);
  return conv2d(t.constant(x), t.constant(w), t.constant(b), g).value();
}

}  // namespace

TEST(Conv2d, IdentityPointwiseReturnsInput) {
  std::mt19937_64 rng(1);
  auto x = random_image<double>(Shape{2, 3, 4, 5}, rng);
  Tensor<double> w(Shape{3, 3, 1, 1});
  for (std::size_t i = 0; i < 3; ++i) w.at(i, i, 0, 0) = 1.0;
  EXPECT_EQ(conv_value(x, w, Tensor<double>(Shape{3, 1, 1, 1}), {}), x);
}

TEST(Conv2d, OnesKernelCountsWindowCoverage) {
  Tensor<double> x(Shape{1, 1, 3, 3}, 1.0), w(Shape{1, 1, 3, 3}, 1.0), b(Shape{1, 1, 1, 1});
  const auto out = conv_value(x, w, b, ConvGeometry{1, 1, 1});
  const std::vector<double> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), expect);
  EXPECT_EQ(naive_conv(x, w, b, 1, 1, 1), out);
}

TEST(Conv2d, DilatedKernelCentreSeesNineTaps) {
  Tensor<double> x(Shape{1, 1, 5, 5}, 1.0), w(Shape{1, 1, 3, 3}, 1.0), b(Shape{1, 1, 1, 1});
  const auto out = conv_value(x, w, b, ConvGeometry{2, 2, 1});
  EXPECT_EQ(out.shape(), (Shape{1, 1, 5, 5}));
  EXPECT_EQ(out.at(0, 0, 2, 2), 9.0);
  EXPECT_EQ(out.at(0, 0, 0, 0), 4.0);
}

TEST(Conv2d, MatchesNestedLoopOracleOnRandomGeometries) {
  std::mt19937_64 rng(7);
  for (std::size_t k : {1, 2, 3}) {
    for (std::size_t dil : {1, 2, 3}) {
      for (std::size_t stride : {1, 2}) {
        for (std::size_t pad : {0, 1, 3}) {
          auto x = random_image<double>(Shape{2, 3, 9, 7}, rng);
          auto w = random_image<double>(Shape{4, 3, k, k}, rng);
          auto b = random_image<double>(Shape{4, 1, 1, 1}, rng);
          const auto got = conv_value(x, w, b, ConvGeometry{pad, dil, stride});
          const auto want = naive_conv(x, w, b, pad, dil, stride);
          ASSERT_EQ(got.shape(), want.shape()) << "k=" << k << " dil=" << dil << " stride=" << stride << " pad=" << pad;
          for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
        }
      }
    }
  }
}

TEST(Conv2d, SamePaddingPreservesExtent) {
  for (std::size_t k : {1, 3, 5}) {
    for (std::size_t d : {1, 2, 3, 6}) {
      const ConvGeometry g = ConvGeometry::same(k, d);
      EXPECT_EQ(kernels::conv_out_extent(17, k, g), 17u);
      EXPECT_EQ(kernels::conv_out_extent(4, k, g), 4u);
    }
  }
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Tape<double> t;
  auto x = t.constant(Tensor<double>(Shape{1, 2, 4, 4}));
  auto w = t.constant(Tensor<double>(Shape{1, 3, 1, 1}));
  auto b = t.constant(Tensor<double>(Shape{1, 1, 1, 1}));
  EXPECT_THROW(conv2d(x, w, b), ShapeError);
}

TEST(Pointwise, ReluSigmoidConcat) {
  Tape<double> t;
  auto r = relu(t.constant(Tensor<double>(Shape{1, 3, 1, 1}, std::vector<double>{-1, 0, 2})));
  EXPECT_EQ(std::vector<double>(r.value().data().begin(), r.value().data().end()), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(sigmoid(t.constant(Tensor<double>::scalar(0.0))).value().item(), 0.5);
  auto c = concat_channels<double>({t.constant(Tensor<double>(Shape{1, 256, 2, 3})), t.constant(Tensor<double>(Shape{1, 48, 2, 3}))});
  EXPECT_EQ(c.shape(), (Shape{1, 304, 2, 3}));
}

TEST(Pointwise, ConcatThenSliceRoundTrips) {
  std::mt19937_64 rng(3);
  Tape<float> t;
  auto a = random_image<float>(Shape{2, 3, 4, 4}, rng), b = random_image<float>(Shape{2, 5, 4, 4}, rng);
  auto c = concat_channels<float>({t.constant(a), t.constant(b)});
  EXPECT_EQ(slice_channels(c, 0, 3).value(), a);
  EXPECT_EQ(slice_channels(c, 3, 5).value(), b);
  auto cb = concat_batch<float>({t.constant(a), t.constant(a)});
  EXPECT_EQ(cb.shape().n, 4u);
  EXPECT_EQ(slice_batch(cb, 3).value(), slice_batch(t.constant(a), 1).value());
}

TEST(Losses, BceExamples) {
  Tape<double> t;
  const Tensor<double> one = Tensor<double>::scalar(1.0);
  EXPECT_NEAR(bce_with_logits(t.constant(Tensor<double>::scalar(0.0)), one, one).value().item(), std::log(2.0), 1e-12);
  const double sat = bce_with_logits(t.constant(Tensor<double>::scalar(50.0)), one, one).value().item();
  EXPECT_LT(sat, 1e-9);
  EXPECT_TRUE(std::isfinite(sat));
  const double neg = bce_with_logits(t.constant(Tensor<double>::scalar(-800.0)), one, one).value().item();
  EXPECT_NEAR(neg, 800.0, 1e-9);
}

TEST(Losses, BceAllMaskedGivesZeroLossAndGradient) {
  std::mt19937_64 rng(5);
  Tape<double> t;
  auto z = t.leaf(random_image<double>(Shape{1, 2, 3, 3}, rng));
  Tensor<double> targets(Shape{1, 2, 3, 3}, 1.0), mask(Shape{1, 2, 3, 3}, 0.0);
  auto loss = bce_with_logits(z, targets, mask);
  EXPECT_EQ(loss.value().item(), 0.0);
  t.backward(loss);
  const Tensor<double>* g = t.grad(z);
  ASSERT_NE(g, nullptr);
  for (double v : g->data()) EXPECT_EQ(v, 0.0);
}

TEST(Losses, SoftmaxExamples) {
  Tape<double> t;
  Tensor<int> labels(Shape{1, 1, 2, 2}, std::vector<int>{0, 1, 2, 3});
  const double uniform = softmax_ce(t.constant(Tensor<double>(Shape{1, 4, 2, 2}, 0.3)), labels).value().item();
  EXPECT_NEAR(uniform, std::log(4.0), 1e-12);
  Tensor<double> peaked(Shape{1, 4, 2, 2});
  for (std::size_t p = 0; p < 4; ++p) peaked.at(0, p, p / 2, p % 2) = 50.0;
  EXPECT_LT(softmax_ce(t.constant(peaked), labels).value().item(), 1e-9);
  Tensor<int> ignored(Shape{1, 1, 2, 2}, -1);
  EXPECT_EQ(softmax_ce(t.constant(peaked), ignored).value().item(), 0.0);
}

TEST(Losses, SoftmaxMaskedClassLeavesNormalizer) {
  Tape<double> t;
  Tensor<double> z(Shape{1, 3, 1, 1}, std::vector<double>{0.0, 0.0, 100.0});
  Tensor<int> lab(Shape{1, 1, 1, 1}, std::vector<int>{0});
  EXPECT_NEAR(softmax_ce(t.constant(z), lab, {true, true, false}).value().item(), std::log(2.0), 1e-12);
  Tensor<int> bad(Shape{1, 1, 1, 1}, std::vector<int>{2});
  EXPECT_THROW(softmax_ce(t.constant(z), bad, {true, true, false}), ValidationError);
}

TEST(Backward, SumOfPositiveReluIsOnes) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(Shape{1, 2, 3, 3}, 0.7));
  t.backward(sum(relu(x)));
  for (double v : t.grad(x)->data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, UnusedParameterHasNoGradient) {
  ParamStore<double> ps;
  const ParamId used = ps.add("used", Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  const ParamId unused = ps.add("unused", Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  Tape<double> t;
  auto g = t.backward(sum(t.parameter(ps, used)));
  EXPECT_EQ(g.count(used), 1u);
  EXPECT_EQ(g.count(unused), 0u);
}

TEST(Backward, TapeIsSingleUseAndNeedsScalar) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  EXPECT_THROW(t.backward(x), ShapeError);
  auto s = sum(x);
  t.backward(s);
  EXPECT_THROW(t.backward(s), Error);
  EXPECT_THROW(t.constant(Tensor<double>::scalar(1.0)), Error);
}

TEST(Backward, SharedInputAccumulates) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(Shape{1, 1, 1, 3}, 2.0));
  t.backward(sum(add<double>({x, x, scale(x, 3.0)})));
  for (double v : t.grad(x)->data()) EXPECT_EQ(v, 5.0);
}

// Every op against central differences in double precision.
TEST(GradCheck, EveryOpMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& r : op_gradient_suite(seed)) {
      EXPECT_TRUE(r.passed) << r.name << " seed " << seed << " max rel err " << r.max_rel_error;
      EXPECT_GT(r.checked, 0u) << r.name;
    }
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A deliberately broken op: forward doubles, backward claims identity.
  ScalarFn broken = [](Tape<double>& t, const Vars& v) {
    Tensor<double> out = v[0].value();
    for (auto& x : out.data()) x *= 2.0;
    const auto id = v[0].id();
    return sum(t.record(std::move(out), {v[0]}, [id](Tape<double>& tp, const Tensor<double>& go) {
      Tensor<double>& g = tp.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    }));
  };
  std::mt19937_64 rng(1);
  const auto r = check_gradient("broken", broken, {random_tensor(Shape{1, 1, 2, 2}, rng)});
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-6);
}

TEST(GradCheck, RelativeErrorUsesFloor) {
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-4), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-8, 1e-4), 1e-4);
}

TEST(Determinism, SeededForwardBackwardIsBitIdentical) {
  auto run = [] {
    const auto doc = dsspn::testing::toy_doc();
    auto g = build_model<float>(doc.hierarchy, dsspn::testing::tiny_config(), 11);
    std::mt19937_64 rng(4);
    const auto image = random_image<float>(Shape{1, 3, 16, 16}, rng);
    const auto b = doc.bind("toy-fine");
    LabelMap lab(2, 2);
    lab.values = {0, 3, 6, 7};
    const auto plan = plan_activation(present_concepts(lab, b), doc.hierarchy, b);
    Tape<float> t;
    auto fwd = forward_plan(t, g, t.constant(image), plan);
    auto loss = dsspn_loss(t, fwd.outputs, build_supervision<float>(lab, plan, doc.hierarchy, b), g.config());
    return std::make_pair(loss.value().item(), t.backward(loss));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  ASSERT_EQ(a.second.size(), b.second.size());
  for (const auto& [pid, g] : a.second) EXPECT_EQ(g, b.second.at(pid));
}

TEST(Optimizer, PolySchedule) {
  SgdConfig c{0.003, 0.9, 1e-4, 0.9, 100};
  EXPECT_DOUBLE_EQ(poly_lr(c, 0), 0.003);
  EXPECT_DOUBLE_EQ(poly_lr(c, 99), 0.003 * std::pow(1.0 / 100.0, 0.9));
  EXPECT_THROW(poly_lr(c, 100), ValidationError);
}

TEST(Optimizer, PlainStepAndMomentum) {
  ParamStore<double> ps;
  const ParamId p = ps.add("p", Tensor<double>(Shape{1, 1, 1, 2}, std::vector<double>{1.0, -1.0}));
  OptimState<double> st{SgdConfig{0.1, 0.0, 0.0, 0.9, 10}, {}};
  std::map<ParamId, Tensor<double>> g{{p, Tensor<double>(Shape{1, 1, 1, 2}, std::vector<double>{0.5, 2.0})}};
  sgd_step(ps, g, st, 0);
  EXPECT_DOUBLE_EQ(ps[p].value[0], 1.0 - 0.1 * 0.5);
  EXPECT_DOUBLE_EQ(ps[p].value[1], -1.0 - 0.1 * 2.0);

  // Momentum with coupled decay: v = mu v + g + wd p.
  ParamStore<double> q;
  const ParamId id = q.add("q", Tensor<double>::scalar(1.0));
  OptimState<double> s2{SgdConfig{1.0, 0.5, 0.1, 0.0, 10}, {}};
  std::map<ParamId, Tensor<double>> g1{{id, Tensor<double>::scalar(1.0)}};
  sgd_step(q, g1, s2, 0);  // v = 1 + 0.1 = 1.1, p = -0.1
  EXPECT_NEAR(q[id].value[0], -0.1, 1e-15);
  sgd_step(q, g1, s2, 1);  // v = 0.55 + 1 - 0.01 = 1.54, p = -1.64
  EXPECT_NEAR(q[id].value[0], -1.64, 1e-15);
}

TEST(TensorFile, RoundTripAndHeader) {
  std::mt19937_64 rng(2);
  const auto t = random_image<float>(Shape{1, 3, 4, 5}, rng);
  std::stringstream ss;
  io::write_dspn(ss, io::to_file(t, {3, 4, 5}));
  const std::string bytes = ss.str();
  ASSERT_GE(bytes.size(), 7u + 12u);
  EXPECT_EQ(bytes.substr(0, 4), "DSPN");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 3u);  // little-endian extent 3
  EXPECT_EQ(bytes.size(), 7u + 12u + 4u * 60u);
  const auto back = io::from_file<float>(io::read_dspn(ss), t.shape());
  EXPECT_EQ(back, t);
}

TEST(TensorFile, RejectsCorruptInput) {
  std::stringstream bad("XSPN\x01\x00\x01");
  EXPECT_THROW(io::read_dspn(bad), IoError);
  std::stringstream truncated(std::string("DSPN\x01\x00\x01\x05\x00\x00\x00", 11));
  EXPECT_THROW(io::read_dspn(truncated), IoError);
}

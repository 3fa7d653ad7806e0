#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fuseloc/checkpoint.hpp"
#include "fuseloc/gradcheck.hpp"
#include "fuseloc/ops.hpp"
#include "fuseloc/optim.hpp"
#include "test_util.hpp"

using namespace fuseloc;
using fuseloc::testing::away_from_zero;
using fuseloc::testing::uniform;
using fuseloc::testing::weighted_sum;

namespace {

// Direct six-loop cross-correlation, independent of the library kernel.
std::vector<double> naive_conv2d(const std::vector<double>& x, std::size_t C, std::size_t H, std::size_t W,
                                 const std::vector<double>& k, std::size_t O, std::size_t KH, std::size_t KW,
                                 int stride, int pad, std::size_t& OH, std::size_t& OW) {
  OH = (H + 2 * pad - KH) / stride + 1;
  OW = (W + 2 * pad - KW) / stride + 1;
  std::vector<double> y(O * OH * OW, 0.0);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - pad;
              const long ix = static_cast<long>(ox * stride + kx) - pad;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              y[(o * OH + oy) * OW + ox] +=
                  x[(c * H + iy) * W + ix] * k[((o * C + c) * KH + ky) * KW + kx];
            }
  return y;
}

struct BnState {
  ParameterStore store;
  Parameter* gamma;
  Parameter* beta;
  Parameter* mean;
  Parameter* var;
  explicit BnState(std::size_t C, std::mt19937_64& rng) {
    gamma = &store.add("gamma", {C});
    beta = &store.add("beta", {C});
    mean = &store.add("mean", {C}, ParamGroup::main, false);
    var = &store.add("var", {C}, ParamGroup::main, false);
    gamma->value = uniform(rng, C, 0.5, 1.5);
    beta->value = uniform(rng, C);
    mean->value = uniform(rng, C, -0.2, 0.2);
    var->value = uniform(rng, C, 0.5, 2.0);
  }
};

}  // namespace

TEST(Conv2d, IdentityCase) {
  Tape t;
  Var x = t.constant({1, 1, 1}, {2.5});
  Var k = t.constant({1, 1, 1, 1}, {-3.0});
  EXPECT_DOUBLE_EQ(conv2d(x, k, Var{}, 1, 0).item(), -7.5);
}

TEST(Conv2d, SummationCase) {
  Tape t;
  Var x = t.constant({1, 3, 3}, std::vector<double>(9, 1.0));
  Var k = t.constant({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  Var y = conv2d(x, k, Var{}, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, MatchesNaiveOracleOnRandomShapes) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 8), ch(1, 3), ks(1, 3), st(1, 2), pd(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = ch(rng), O = ch(rng), H = dim(rng), W = dim(rng), KH = ks(rng), KW = ks(rng);
    const int stride = static_cast<int>(st(rng)), pad = static_cast<int>(pd(rng));
    if (H + 2 * pad < KH || W + 2 * pad < KW) continue;
    auto x = uniform(rng, C * H * W);
    auto k = uniform(rng, O * C * KH * KW);
    std::size_t OH, OW;
    auto expected = naive_conv2d(x, C, H, W, k, O, KH, KW, stride, pad, OH, OW);
    Tape t;
    Var y = conv2d(t.constant({C, H, W}, x), t.constant({O, C, KH, KW}, k), Var{}, stride, pad);
    ASSERT_EQ(y.shape(), (Shape{O, OH, OW}));
    for (std::size_t i = 0; i < expected.size(); ++i) ASSERT_NEAR(y.value()[i], expected[i], 1e-12);
  }
}

TEST(Conv2d, SpecExampleTwoByFiveByFive) {
  std::mt19937_64 rng(5);
  auto x = uniform(rng, 2 * 5 * 5);
  auto k = uniform(rng, 3 * 2 * 3 * 3);
  std::size_t OH, OW;
  auto expected = naive_conv2d(x, 2, 5, 5, k, 3, 3, 3, 1, 0, OH, OW);
  Tape t;
  Var y = conv2d(t.constant({2, 5, 5}, x), t.constant({3, 2, 3, 3}, k), Var{}, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{3, 3, 3}));
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y.value()[i], expected[i], 1e-12);
}

TEST(Conv2d, ShapeMismatchNamesAxis) {
  Tape t;
  Var x = t.constant({2, 4, 4}, std::vector<double>(32, 1.0));
  Var k = t.constant({1, 3, 3, 3}, std::vector<double>(27, 1.0));
  try {
    conv2d(x, k, Var{}, 1, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), "in_channels");
  }
  Var small = t.constant({3, 2, 2}, std::vector<double>(12, 1.0));
  try {
    conv2d(small, k, Var{}, 1, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), "height");
  }
}

TEST(Elementwise, ReluAndNormalize) {
  Tape t;
  Var r = relu(t.constant({2}, {-2.0, 3.0}));
  EXPECT_EQ(r.value()[0], 0.0);
  EXPECT_EQ(r.value()[1], 3.0);
  Var n = l2_normalize(t.constant({2}, {3.0, 4.0}));
  EXPECT_NEAR(n.value()[0], 0.6, 1e-15);
  EXPECT_NEAR(n.value()[1], 0.8, 1e-15);
}

TEST(Elementwise, PowRejectsNegativeBaseWithFractionalExponent) {
  Tape t;
  EXPECT_THROW(pow(t.constant({2}, {-1.0, 2.0}), 2.5), NumericError);
  EXPECT_NO_THROW(pow(t.constant({2}, {-1.0, 2.0}), 2.0));
}

TEST(Elementwise, ConcatChannels) {
  Tape t;
  Var c = concat_channels(t.constant({2}, {1, 2}), t.constant({2}, {3, 4}));
  EXPECT_EQ(std::vector<double>(c.value().begin(), c.value().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(BatchNorm, TrainModeTwoValues) {
  ParameterStore store;
  auto& g = store.add("g", {1});
  auto& b = store.add("b", {1});
  auto& m = store.add("m", {1}, ParamGroup::main, false);
  auto& v = store.add("v", {1}, ParamGroup::main, false);
  g.value = {1.0};
  v.value = {1.0};
  Tape t;
  Var y = batch_norm(t.constant({2, 1}, {1.0, 3.0}), t.parameter(g), t.parameter(b), m, v, true);
  // (x - 2) / sqrt(1 + 1e-5)
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y.value()[0], -expect, 1e-12);
  EXPECT_NEAR(y.value()[1], expect, 1e-12);
  // Running stats move toward batch mean 2 and unbiased variance 2.
  EXPECT_NEAR(m.value[0], 0.2, 1e-12);
  EXPECT_NEAR(v.value[0], 0.9 + 0.1 * 2.0, 1e-12);
}

TEST(BatchNorm, TrainModeNeedsMoreThanOneValue) {
  ParameterStore store;
  auto& g = store.add("g", {1});
  auto& b = store.add("b", {1});
  auto& m = store.add("m", {1}, ParamGroup::main, false);
  auto& v = store.add("v", {1}, ParamGroup::main, false);
  Tape t;
  EXPECT_THROW(batch_norm(t.constant({1, 1}, {1.0}), t.parameter(g), t.parameter(b), m, v, true), ShapeError);
  EXPECT_NO_THROW(batch_norm(t.constant({1, 1}, {1.0}), t.parameter(g), t.parameter(b), m, v, false));
}

TEST(Backward, SquareAndRelu) {
  {
    Tape t;
    Var x = t.variable({1}, {3.0});
    Var y = mul(x, x);
    t.backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
    EXPECT_DOUBLE_EQ(y.grad()[0], 1.0);
  }
  {
    Tape t;
    Var x = t.variable({2}, {-1.0, 2.0});
    t.backward(sum(relu(x)));
    EXPECT_EQ(x.grad()[0], 0.0);
    EXPECT_EQ(x.grad()[1], 1.0);
  }
}

TEST(Backward, NonScalarLossIsAnError) {
  Tape t;
  Var x = t.variable({2}, {1.0, 2.0});
  EXPECT_THROW(t.backward(relu(x)), ShapeError);
}

TEST(Backward, UnreachableParametersKeepZeroGrad) {
  ParameterStore store;
  auto& a = store.add("a", {2});
  auto& b = store.add("b", {2});
  a.value = {1.0, 2.0};
  b.value = {3.0, 4.0};
  Tape t;
  Var va = t.parameter(a);
  t.parameter(b);
  t.backward(sum(mul(va, va)));
  EXPECT_EQ(a.grad, (std::vector<double>{2.0, 4.0}));
  EXPECT_EQ(b.grad, (std::vector<double>{0.0, 0.0}));
}

TEST(Backward, DeterministicAcrossIdenticalTapes) {
  std::mt19937_64 rng(3);
  auto x = uniform(rng, 2 * 3 * 6 * 6);
  auto k = uniform(rng, 4 * 3 * 3 * 3);
  auto run = [&] {
    Tape t;
    Var xv = t.variable({2, 3, 6, 6}, x);
    Var kv = t.variable({4, 3, 3, 3}, k);
    Var y = conv2d(xv, kv, Var{}, 2, 1);
    t.backward(weighted_sum(sigmoid(y)));
    auto g = kv.grad();
    auto gx = xv.grad();
    std::vector<double> out(g.begin(), g.end());
    out.insert(out.end(), gx.begin(), gx.end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, SquareAtTwo) {
  auto r = finite_difference_check([](Tape&, Var x) { return mul(x, x); }, {1}, std::vector<double>{2.0}, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-8);
}

TEST(GradCheck, NaNPropagatesAsError) {
  EXPECT_THROW(finite_difference_check([](Tape&, Var x) { return sum(pow(x, 0.5)); }, {1},
                                       std::vector<double>{-0.0 - 1e-12}, 1e-6),
               NumericError);
}

// Every differentiable dense op, 10 seeds each, < 1e-5 in 64-bit.
class DenseOpGradients : public ::testing::TestWithParam<int> {};

TEST_P(DenseOpGradients, MatchFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  std::mt19937_64 rng(seed);
  const double tol = 1e-5;
  auto check = [&](const char* name, const TapeFunction& f, const Shape& s, const std::vector<double>& x) {
    auto r = finite_difference_check(f, s, x, 1e-6);
    EXPECT_LT(r.max_relative_error, tol) << name << " seed " << seed << " at " << r.worst_index << " analytic "
                                         << r.analytic << " numeric " << r.numeric;
  };

  const auto other = uniform(rng, 12);
  check("add", [&](Tape& t, Var x) { return weighted_sum(add(x, t.constant({3, 4}, other))); }, {3, 4}, uniform(rng, 12));
  check("sub", [&](Tape& t, Var x) { return weighted_sum(sub(t.constant({3, 4}, other), x)); }, {3, 4}, uniform(rng, 12));
  check("mul", [&](Tape&, Var x) { return weighted_sum(mul(x, x)); }, {3, 4}, uniform(rng, 12));
  check("scale", [&](Tape&, Var x) { return weighted_sum(scale(x, -1.7)); }, {5}, uniform(rng, 5));
  check("mean", [&](Tape&, Var x) { return mean(mul(x, x)); }, {7}, uniform(rng, 7));
  check("relu", [&](Tape&, Var x) { return weighted_sum(relu(x)); }, {9}, away_from_zero(rng, 9));
  check("sigmoid", [&](Tape&, Var x) { return weighted_sum(sigmoid(x)); }, {9}, uniform(rng, 9, -3, 3));
  check("pow", [&](Tape&, Var x) { return weighted_sum(pow(x, 2.7)); }, {6}, uniform(rng, 6, 0.2, 2.0));
  check("l2_normalize", [&](Tape&, Var x) { return weighted_sum(l2_normalize(x)); }, {3, 5}, uniform(rng, 15));
  check("concat",
        [&](Tape& t, Var x) {
          const Var parts[] = {x, t.constant({2, 2}, {1, 2, 3, 4}), x};
          return weighted_sum(sigmoid(concat(parts, 1)));
        },
        {2, 3}, uniform(rng, 6));
  check("reshape", [&](Tape&, Var x) { return weighted_sum(sigmoid(reshape(x, {3, 2}))); }, {6}, uniform(rng, 6));

  const auto kernel = uniform(rng, 3 * 2 * 3 * 3);
  check("conv2d/input",
        [&](Tape& t, Var x) { return weighted_sum(conv2d(x, t.constant({3, 2, 3, 3}, kernel), Var{}, 2, 1)); },
        {2, 2, 5, 5}, uniform(rng, 100));
  const auto image = uniform(rng, 2 * 2 * 5 * 5);
  check("conv2d/kernel",
        [&](Tape& t, Var k) {
          return weighted_sum(sigmoid(conv2d(t.constant({2, 2, 5, 5}, image), k, t.constant({3}, {0.1, -0.2, 0.3}), 1, 1)));
        },
        {3, 2, 3, 3}, kernel);
  check("conv2d/bias",
        [&](Tape& t, Var b) { return weighted_sum(sigmoid(conv2d(t.constant({2, 2, 5, 5}, image), t.constant({3, 2, 3, 3}, kernel), b, 2, 0))); },
        {3}, uniform(rng, 3));

  const auto w = uniform(rng, 4 * 3);
  check("linear/input", [&](Tape& t, Var x) { return weighted_sum(sigmoid(linear(x, t.constant({4, 3}, w), Var{}))); },
        {2, 4}, uniform(rng, 8));
  const auto lin_x = uniform(rng, 8);
  check("linear/weight",
        [&](Tape& t, Var wv) { return weighted_sum(sigmoid(linear(t.constant({2, 4}, lin_x), wv, t.constant({3}, {1, 2, 3})))); },
        {4, 3}, w);

  BnState bn(3, rng);
  for (bool training : {true, false}) {
    const std::string tag = training ? "batch_norm/train" : "batch_norm/eval";
    check((tag + "/input").c_str(),
          [&](Tape& t, Var x) {
            return weighted_sum(sigmoid(batch_norm(x, t.parameter(*bn.gamma), t.parameter(*bn.beta), *bn.mean, *bn.var, training)));
          },
          {4, 3, 2, 2}, uniform(rng, 48));
    const auto bx = uniform(rng, 5 * 3);
    check((tag + "/gamma").c_str(),
          [&](Tape& t, Var g) {
            return weighted_sum(sigmoid(batch_norm(t.constant({5, 3}, bx), g, t.parameter(*bn.beta), *bn.mean, *bn.var, training)));
          },
          {3}, bn.gamma->value);
    check((tag + "/beta").c_str(),
          [&](Tape& t, Var b) {
            return weighted_sum(sigmoid(batch_norm(t.constant({5, 3}, bx), t.parameter(*bn.gamma), b, *bn.mean, *bn.var, training)));
          },
          {3}, bn.beta->value);
  }

  check("nchw_to_rows", [&](Tape&, Var x) { return weighted_sum(sigmoid(nchw_to_rows(x))); }, {2, 3, 2, 2}, uniform(rng, 24));

  auto seg = std::make_shared<Segments>();
  seg->ids = {0, 1, 0, 2, 1, 2, 2};
  seg->count = 3;
  SegmentsPtr segs = seg;
  check("segment_mean", [&](Tape&, Var x) { return weighted_sum(sigmoid(segment_mean(x, segs))); }, {7, 4}, uniform(rng, 28));
  const auto gem_x = uniform(rng, 28, 0.1, 2.0);
  check("segment_gem/input",
        [&](Tape& t, Var x) { return weighted_sum(segment_gem(x, segs, t.scalar(3.0), 1e-6)); }, {7, 4}, gem_x);
  check("segment_gem/p", [&](Tape& t, Var p) { return weighted_sum(segment_gem(t.constant({7, 4}, gem_x), segs, p, 1e-6)); },
        {1}, {2.3});
  const auto scale_x = uniform(rng, 28);
  const auto scale_s = uniform(rng, 12);
  check("segment_scale/x", [&](Tape& t, Var x) { return weighted_sum(segment_scale(x, segs, t.constant({3, 4}, scale_s))); },
        {7, 4}, scale_x);
  check("segment_scale/s", [&](Tape& t, Var s) { return weighted_sum(segment_scale(t.constant({7, 4}, scale_x), segs, s)); },
        {3, 4}, uniform(rng, 12));
  const auto conv_w = uniform(rng, 3);
  check("channel_conv1d/input", [&](Tape& t, Var g) { return weighted_sum(sigmoid(channel_conv1d(g, t.constant({3}, conv_w)))); },
        {2, 6}, uniform(rng, 12));
  const auto conv_g = uniform(rng, 12);
  check("channel_conv1d/kernel",
        [&](Tape& t, Var w) { return weighted_sum(sigmoid(channel_conv1d(t.constant({2, 6}, conv_g), w))); }, {3}, conv_w);
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, DenseOpGradients, ::testing::Range(1, 11));

TEST(Adam, ZeroGradientWithoutDecayIsFixedPoint) {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  Adam adam(cfg);
  ParameterStore store;
  auto& p = store.add("w", {3});
  p.value = {0.5, -1.0, 2.0};
  const auto before = p.value;
  for (int i = 0; i < 5; ++i) adam.step(store, i);
  EXPECT_EQ(p.value, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  Adam adam(cfg);
  ParameterStore store;
  auto& p = store.add("w", {1});
  p.value = {1.0};
  p.grad = {1.0};
  adam.step(store, 0);
  // m_hat = 1, v_hat = 1 -> step = lr / (1 + 1e-8)
  EXPECT_NEAR(1.0 - p.value[0], 1e-3, 1e-10);
}

TEST(Adam, LearningRateScheduleAndGroups) {
  Adam adam(OptimizerConfig{});
  EXPECT_DOUBLE_EQ(adam.learning_rate(ParamGroup::main, 0), 1e-3);
  EXPECT_DOUBLE_EQ(adam.learning_rate(ParamGroup::main, 29), 1e-3);
  EXPECT_DOUBLE_EQ(adam.learning_rate(ParamGroup::main, 30), 1e-4);
  EXPECT_DOUBLE_EQ(adam.learning_rate(ParamGroup::image, 0), 1e-4);
  EXPECT_DOUBLE_EQ(adam.learning_rate(ParamGroup::image, 30), 1e-5);
}

TEST(Adam, NaNGradientNamesParameter) {
  Adam adam(OptimizerConfig{});
  ParameterStore store;
  store.add("ok", {1});
  auto& bad = store.add("pc.conv0.weight", {2});
  bad.grad = {0.0, std::nan("")};
  try {
    adam.step(store, 0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("pc.conv0.weight"), std::string::npos);
  }
}

TEST(Adam, ConfigValidation) {
  OptimizerConfig cfg;
  cfg.lr_drop_epoch = 60;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.lr_main = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Adam, MinValueClamp) {
  OptimizerConfig cfg;
  cfg.lr_main = 10.0;
  Adam adam(cfg);
  ParameterStore store;
  auto& p = store.add("gem.p", {1});
  p.value = {1.001};
  p.min_value = 1.0;
  p.grad = {5.0};
  adam.step(store, 0);
  EXPECT_EQ(p.value[0], 1.0);
}

TEST(Checkpoint, RoundTripAndLayout) {
  ParameterStore store;
  auto& a = store.add("a.weight", {2, 3});
  auto& b = store.add("b.bias", {1});
  a.value = {1, 2, 3, 4, 5, 6};
  b.value = {0.25};
  auto ckpt = make_checkpoint(store, {{"k", "128"}, {"fusion_mode", "concat"}});
  const std::string bytes = serialize_checkpoint(ckpt);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(0, 4), "FLC1");
  auto back = parse_checkpoint(bytes);
  EXPECT_EQ(back.header.at("k"), "128");
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_EQ(back.records[0].name, "a.weight");
  EXPECT_EQ(back.records[0].shape, (Shape{2, 3}));
  EXPECT_EQ(back.records[1].values[0], 0.25f);

  ParameterStore other;
  other.add("a.weight", {2, 3});
  other.add("b.bias", {1});
  apply_checkpoint(back, other);
  EXPECT_EQ(parameter_hash(other), parameter_hash(store));

  EXPECT_THROW(parse_checkpoint("XXXX" + bytes.substr(4)), std::runtime_error);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 2)), std::runtime_error);
}

TEST(Checkpoint, ShapeMismatchRejected) {
  ParameterStore store;
  store.add("w", {2});
  auto ckpt = make_checkpoint(store, {});
  ParameterStore other;
  other.add("w", {3});
  EXPECT_THROW(apply_checkpoint(ckpt, other), ShapeError);
}

TEST(Checkpoint, FileRoundTrip) {
  ParameterStore store;
  store.add("w", {4}).value = {1, -2, 3.5, 1e-3};
  const auto path = (std::filesystem::temp_directory_path() / "fuseloc_ckpt_test.flc").string();
  save_checkpoint(path, make_checkpoint(store, {{"a", "b"}}));
  auto back = load_checkpoint(path);
  EXPECT_EQ(back.records[0].values, (std::vector<float>{1, -2, 3.5f, 1e-3f}));
  std::filesystem::remove(path);
}

TEST(Precision, F32TapeRoundsValues) {
  Tape t(Precision::f32);
  Var x = t.constant({1}, {0.1});
  EXPECT_EQ(x.item(), static_cast<double>(0.1f));
  EXPECT_EQ(parse_precision("f64"), Precision::f64);
  EXPECT_THROW(parse_precision("f16"), std::invalid_argument);
}

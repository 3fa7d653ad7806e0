#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <filesystem>
#include <sstream>

#include "fuseloc/gradcheck.hpp"
#include "fuseloc/train.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fuseloc;
using fuseloc::testing::uniform;

namespace {

PairMasks masks_for(const std::vector<Position>& p) { return similarity_masks(p); }

using fuseloc::oracle::mine_oracle;

// Places on a 100 m grid; members jittered within 4 m, so same-place pairs
// are positives and cross-place pairs negatives. Some draws land 20-40 m
// off to exercise the "neither" band.
std::vector<Position> random_positions(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> place(0, 4);
  std::uniform_real_distribution<double> j(-2.0, 2.0), mid(20.0, 40.0);
  std::bernoulli_distribution odd(0.15);
  std::vector<Position> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int p = place(rng);
    Position q{100.0 * p + j(rng), j(rng)};
    if (odd(rng)) q.northing += mid(rng);
    out.push_back(q);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Similarity

TEST(Similarity, PaperDistances) {
  auto m = masks_for({{0, 0}, {5, 0}, {30, 0}, {60, 0}});
  EXPECT_TRUE(m.is_positive(0, 1));
  EXPECT_FALSE(m.is_negative(0, 1));
  EXPECT_FALSE(m.is_positive(0, 2));
  EXPECT_FALSE(m.is_negative(0, 2));
  EXPECT_TRUE(m.is_negative(0, 3));
  EXPECT_FALSE(m.is_positive(0, 0));
  EXPECT_FALSE(m.is_negative(0, 0));
}

TEST(Similarity, BoundariesAreInclusive) {
  auto m = masks_for({{0, 0}, {10, 0}, {0, 50}, {3, 4}});
  EXPECT_TRUE(m.is_positive(0, 1));
  EXPECT_TRUE(m.is_negative(0, 2));
  EXPECT_EQ(planar_distance({0, 0}, {3, 4}), 5.0);
}

TEST(Similarity, MasksAreSymmetric) {
  std::mt19937_64 rng(1);
  const auto p = random_positions(rng, 16);
  const auto m = masks_for(p);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_EQ(m.is_positive(i, j), m.is_positive(j, i));
      EXPECT_EQ(m.is_negative(i, j), m.is_negative(j, i));
      EXPECT_FALSE(m.is_positive(i, j) && m.is_negative(i, j));
    }
}

// ---------------------------------------------------------------------------
// Mining

TEST(Mining, ThreeElements) {
  auto m = masks_for({{0, 0}, {1, 0}, {200, 0}});
  const std::vector<double> d{0, 1, 5, 1, 0, 4, 5, 4, 0};
  auto t = batch_hard_mine(d, m);
  ASSERT_GE(t.size(), 1u);
  EXPECT_EQ(t[0], (Triplet{0, 1, 2}));
}

TEST(Mining, HardestPositiveIsFarthest) {
  auto m = masks_for({{0, 0}, {1, 0}, {2, 0}, {200, 0}});
  const std::vector<double> d{0, 1, 2, 9, 1, 0, 1, 9, 2, 1, 0, 9, 9, 9, 9, 0};
  auto t = batch_hard_mine(d, m);
  ASSERT_FALSE(t.empty());
  EXPECT_EQ(t[0], (Triplet{0, 2, 3}));
}

TEST(Mining, AnchorsWithoutPositiveOrNegativeAreSkipped) {
  // 0 and 1 are a pair; 2 sits in the neither band of both; no one has a negative.
  auto m = masks_for({{0, 0}, {1, 0}, {30, 0}});
  EXPECT_TRUE(batch_hard_mine(std::vector<double>(9, 1.0), m).empty());
}

// Exact equality against brute force on 100 batches of up to 16 elements.
// Half the batches use distances on a coarse grid so ties are common.
TEST(Mining, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> nd(2, 16);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = nd(rng);
    const auto pos = random_positions(rng, n);
    std::vector<double> desc = uniform(rng, n * 3);
    if (trial % 2 == 0)
      for (auto& v : desc) v = std::round(v * 2.0) / 2.0;
    const auto d = descriptor_distances(desc, n, 3);
    const auto m = masks_for(pos);
    EXPECT_EQ(batch_hard_mine(d, m), mine_oracle(d, m)) << "trial " << trial;
  }
}

TEST(Mining, DescriptorDistances) {
  const std::vector<double> desc{0, 0, 3, 4, 6, 8};
  auto d = descriptor_distances(desc, 3, 2);
  EXPECT_EQ(d[1], 5.0);
  EXPECT_EQ(d[2], 10.0);
  EXPECT_EQ(d[5], 5.0);
  EXPECT_EQ(d[4], 0.0);
}

// ---------------------------------------------------------------------------
// Triplet loss

namespace {

// Rows on a line, so pairwise distances are exact differences.
TripletLoss line_loss(Tape& t, const std::vector<double>& x, std::vector<Triplet> trip, double m) {
  return triplet_margin_loss(t.constant({x.size(), 1}, x), trip, m);
}

}  // namespace

TEST(TripletLoss, HingeBoundaryIsInactive) {
  Tape t;
  auto r = line_loss(t, {0.0, 0.0, 0.2}, {{0, 1, 2}}, 0.2);
  EXPECT_EQ(r.loss.item(), 0.0);
  EXPECT_EQ(r.active, 0);
  EXPECT_EQ(r.triplets, 1);
}

TEST(TripletLoss, ActiveExample) {
  Tape t;
  auto r = line_loss(t, {0.0, 1.0, -0.5}, {{0, 1, 2}}, 0.2);
  EXPECT_DOUBLE_EQ(r.loss.item(), 0.7);
  EXPECT_EQ(r.active, 1);
}

TEST(TripletLoss, CollapseGivesMargin) {
  Tape t;
  std::vector<Triplet> trip{{0, 1, 2}, {1, 0, 3}, {2, 3, 0}};
  auto r = triplet_margin_loss(t.constant({4, 3}, std::vector<double>(12, 0.25)), trip, 0.2);
  EXPECT_EQ(r.loss.item(), 0.2);
  EXPECT_EQ(r.active, 3);
}

TEST(TripletLoss, EmptyListIsZero) {
  Tape t;
  auto r = triplet_margin_loss(t.constant({2, 2}, {1, 2, 3, 4}), {}, 0.2);
  EXPECT_EQ(r.loss.item(), 0.0);
  EXPECT_EQ(r.active, 0);
  EXPECT_EQ(r.triplets, 0);
}

// Zero exactly when every triplet clears the margin, on random batches.
TEST(TripletLoss, ZeroIffEveryTripletClearsMargin) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 8;
    const auto pos = random_positions(rng, n);
    auto desc = uniform(rng, n * 2, -1, 1);
    const auto dist = descriptor_distances(desc, n, 2);
    const auto trip = batch_hard_mine(dist, masks_for(pos));
    const double m = 0.2;
    Tape t;
    auto r = triplet_margin_loss(t.constant({n, 2}, desc), trip, m);
    bool all_clear = true;
    int active = 0;
    for (const auto& tr : trip) {
      const double dap = dist[tr.anchor * n + tr.positive], dan = dist[tr.anchor * n + tr.negative];
      if (dan < dap + m) {
        all_clear = false;
        ++active;
      }
    }
    EXPECT_EQ(r.loss.item() == 0.0, all_clear) << "trial " << trial;
    EXPECT_EQ(r.active, active);
    EXPECT_LE(r.active, r.triplets);
  }
}

TEST(TripletLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  std::vector<Triplet> trip{{0, 1, 2}, {1, 0, 3}, {2, 3, 1}, {3, 2, 0}};
  for (int s = 0; s < 10; ++s) {
    const auto x = uniform(rng, 4 * 3);
    auto r = finite_difference_check([&](Tape&, Var d) { return triplet_margin_loss(d, trip, 4.0).loss; }, {4, 3}, x,
                                     1e-6);
    EXPECT_LT(r.max_relative_error, 1e-5);
  }
}

// ---------------------------------------------------------------------------
// Multi-head objective

TEST(MultiHead, Examples) {
  LossConfig c;
  c.alpha = 0;
  c.beta = 0;
  EXPECT_EQ(multi_head_loss({0.37, 1, 2}, {5, 2, 2}, {7, 2, 2}, c).total, 0.37);
  c.alpha = 0.5;
  // 0.4 and 0.2 are not dyadic; the halved sum is a rounding tie that lands
  // one ulp above the double nearest 0.3.
  EXPECT_DOUBLE_EQ(multi_head_loss({0.4, 1, 2}, {0.2, 1, 2}, {9, 2, 2}, c).total, 0.3);
  EXPECT_EQ(multi_head_loss({0.375, 1, 2}, {0.25, 1, 2}, {9, 2, 2}, c).total, 0.3125);
  c.alpha = 0.2;
  c.beta = 0.2;
  EXPECT_EQ(multi_head_loss({1, 1, 1}, {1, 1, 1}, {1, 1, 1}, c).total, 1.0);
}

TEST(MultiHead, CarriesCounts) {
  auto b = multi_head_loss({0.1, 3, 8}, {0.2, 4, 7}, {0.3, 5, 6}, LossConfig{});
  EXPECT_EQ(b.active_F, 3);
  EXPECT_EQ(b.active_PC, 4);
  EXPECT_EQ(b.active_RGB, 5);
  EXPECT_EQ(b.triplets_F, 8);
  EXPECT_EQ(b.L_RGB, 0.3);
}

// Linear in each head loss with the fixed coefficients. Coefficients and
// losses are drawn on a dyadic grid so the arithmetic is exact in 64-bit.
TEST(MultiHead, LinearInEachHead) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> q(0, 64);
  for (int trial = 0; trial < 1000; ++trial) {
    LossConfig c;
    c.alpha = q(rng) / 128.0;
    c.beta = q(rng) / 128.0;
    const double f = q(rng) / 16.0, p = q(rng) / 16.0, r = q(rng) / 16.0;
    const double total = multi_head_loss({f, 0, 0}, {p, 0, 0}, {r, 0, 0}, c).total;
    EXPECT_EQ(total, (1 - c.alpha - c.beta) * f + c.alpha * p + c.beta * r);
    const double df = q(rng) / 16.0;
    EXPECT_EQ(multi_head_loss({f + df, 0, 0}, {p, 0, 0}, {r, 0, 0}, c).total - total, (1 - c.alpha - c.beta) * df);
    EXPECT_EQ(multi_head_loss({f, 0, 0}, {p + df, 0, 0}, {r, 0, 0}, c).total - total, c.alpha * df);
    EXPECT_EQ(multi_head_loss({f, 0, 0}, {p, 0, 0}, {r + df, 0, 0}, c).total - total, c.beta * df);
  }
}

// Random real coefficients: the total is the once-rounded weighted sum, so it
// sits within one ulp of the plain double expression.
TEST(MultiHead, ClosedFormOnRandomInputs) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 0.5), l(0.0, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    LossConfig c;
    c.alpha = u(rng);
    c.beta = u(rng);
    const double f = l(rng), p = l(rng), r = l(rng);
    const double naive = c.fused_weight() * f + c.alpha * p + c.beta * r;
    const double got = multi_head_loss({f, 0, 0}, {p, 0, 0}, {r, 0, 0}, c).total;
    EXPECT_LE(std::fabs(got - naive), 2 * std::numeric_limits<double>::epsilon() * std::fabs(naive));
  }
}

TEST(MultiHead, ConfigValidation) {
  LossConfig c;
  c.margin = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.alpha = 0.7;
  c.beta = 0.4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.beta = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Batch controller

TEST(BatchControl, Examples) {
  BatchController c;
  c.update(5);
  EXPECT_EQ(c.current_size, 11u);
  BatchController d;
  d.update(6);
  EXPECT_EQ(d.current_size, 8u);
  BatchController e;
  e.current_size = 158;
  e.update(0);
  EXPECT_EQ(e.current_size, 160u);
}

TEST(BatchControl, AlwaysTriggeredTrajectory) {
  BatchController c;
  std::vector<std::size_t> got{c.current_size};
  for (int i = 0; i < 12; ++i) {
    c.update(0);
    got.push_back(c.current_size);
  }
  EXPECT_EQ(got, (std::vector<std::size_t>{8, 11, 15, 21, 29, 41, 57, 80, 112, 157, 160, 160, 160}));
}

TEST(BatchControl, NeverShrinksAndStaysInRange) {
  std::mt19937_64 rng(10);
  BatchController c;
  for (int i = 0; i < 500; ++i) {
    const std::size_t before = c.current_size;
    c.update(std::uniform_int_distribution<std::size_t>(0, before)(rng));
    EXPECT_GE(c.current_size, before);
    EXPECT_GE(c.current_size, 8u);
    EXPECT_LE(c.current_size, 160u);
  }
}

// ---------------------------------------------------------------------------
// Training

namespace {

NetworkConfig tiny_network() {
  NetworkConfig c;
  c.k = 8;
  c.pc_channels = {4, 4, 8, 8};
  c.image_channels = {4, 8, 8, 8};
  c.quantization.step = 0.1;
  return c;
}

const Dataset& small_data() {
  static const Dataset d = [] {
    const auto dir = std::filesystem::temp_directory_path() / "fuseloc_test_metric_data";
    std::filesystem::remove_all(dir);
    SyntheticConfig s;
    s.seed = 3;
    s.places = 6;
    s.traversals = 3;
    s.points = 256;
    s.image_width = 32;
    s.image_height = 32;
    s.image_variants = 0;
    generate_synthetic(s, dir.string());
    return load_dataset(dir.string());
  }();
  return d;
}

}  // namespace

TEST(Training, PointCloudHeadOnlyLeavesImageGradientsZero) {
  Model m(tiny_network(), 1);
  TrainConfig cfg;
  cfg.loss.alpha = 1.0;
  cfg.loss.beta = 0.0;
  cfg.precision = Precision::f64;
  cfg.optim.weight_decay = 0.0;
  cfg.epochs = 1;
  cfg.optim.epochs = 1;
  cfg.optim.lr_drop_epoch = 1;
  Trainer tr(m, small_data(), cfg);
  std::vector<std::vector<double>> before;
  for (const auto& p : m.params())
    if (p.group == ParamGroup::image && p.trainable) before.push_back(p.value);
  auto r = tr.train_batch({0, 1, 2, 3, 4, 5, 6, 7}, 0, 0);
  ASSERT_TRUE(r.stepped);
  std::size_t k = 0, pc_nonzero = 0;
  for (const auto& p : m.params()) {
    if (!p.trainable) continue;
    const bool nz = std::any_of(p.grad.begin(), p.grad.end(), [](double g) { return g != 0.0; });
    if (p.group == ParamGroup::image) {
      EXPECT_FALSE(nz) << p.name;
      EXPECT_EQ(p.value, before[k++]) << p.name;
    } else if (nz) {
      ++pc_nonzero;
    }
  }
  EXPECT_GT(pc_nonzero, 0u);
}

TEST(Training, SinglePlaceHasNoTripletsAndNoUpdate) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < small_data().size(); ++i)
    if (small_data().elements[i].id.starts_with("p000_")) idx.push_back(i);
  ASSERT_EQ(idx.size(), 3u);
  Dataset one = small_data().subset(idx);
  ASSERT_TRUE(similarity_masks(one.positions()).any_positive());
  Model m(tiny_network(), 2);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.optim.epochs = 1;
  cfg.optim.lr_drop_epoch = 1;
  Trainer tr(m, one, cfg);
  const auto h = parameter_hash(m.params());
  auto s = tr.run_epoch(0);
  EXPECT_EQ(s.mean.triplets_F, 0);
  EXPECT_EQ(parameter_hash(m.params()), h);
}

TEST(Training, LearningRateGroups) {
  OptimizerConfig o;
  EXPECT_EQ(o.lr_main, 1e-3);
  EXPECT_EQ(o.lr_image_branch, 1e-4);
}

TEST(Training, SamplerBatchesContainPositivePairs) {
  BatchSampler s(small_data(), SimilarityConfig{});
  std::mt19937_64 rng(1);
  for (std::size_t b : {2u, 3u, 8u, 11u, 18u, 40u}) {
    auto idx = s.next(b, rng);
    EXPECT_EQ(idx.size(), std::min<std::size_t>(b, small_data().size()));
    std::vector<Position> pos;
    for (auto i : idx) pos.push_back(small_data().elements[i].position);
    EXPECT_TRUE(similarity_masks(pos).any_positive());
  }
}

TEST(Training, LogLineHasElevenTabSeparatedColumns) {
  BatchRecord r;
  r.epoch = 2;
  r.size = 8;
  r.lr = 1e-3;
  std::ostringstream os;
  write_log_line(os, r);
  const auto line = os.str();
  EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 10);
  EXPECT_EQ(line.substr(0, 4), "2\t0\t");
}

// Empirical smoke: fused loss falls between the first and tenth epoch.
TEST(Training, FusedLossFallsOverTenEpochs) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Model m(tiny_network(), seed);
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.epochs = 10;
    cfg.optim.epochs = 10;
    cfg.optim.lr_drop_epoch = 10;
    cfg.optim.lr_main = 1e-2;
    cfg.optim.lr_image_branch = 1e-2;
    cfg.loss.margin = 0.4;
    Trainer tr(m, small_data(), cfg);
    double first = 0, last = 0;
    for (int e = 0; e < 10; ++e) {
      const auto s = tr.run_epoch(e);
      if (e == 0) first = s.mean.L_F;
      if (e == 9) last = s.mean.L_F;
    }
    EXPECT_LT(last, first) << "seed " << seed;
  }
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "fuseloc/checkpoint.hpp"
#include "fuseloc/evaluation.hpp"

using namespace fuseloc;

namespace {

DescriptorDatabase random_db(std::mt19937_64& rng, std::size_t n, std::size_t width, const std::string& prefix) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 500.0);
  DescriptorDatabase db(width);
  for (std::size_t i = 0; i < n; ++i) {
    DbEntry e;
    e.id = prefix + std::to_string(1000 + i);
    e.position = {u(rng), u(rng)};
    e.descriptor.resize(width);
    for (auto& x : e.descriptor) x = g(rng);
    db.add(std::move(e));
  }
  return db;
}

DbEntry entry(const std::string& id, Position p, std::vector<double> d) { return {id, p, std::move(d)}; }

// Brute-force ranking: sort everything by (distance, id).
std::vector<std::string> oracle_ranking(const DescriptorDatabase& db, const std::vector<double>& q) {
  std::vector<std::pair<double, std::string>> all;
  for (const auto& e : db.entries()) {
    double s = 0;
    for (std::size_t k = 0; k < q.size(); ++k) s += (e.descriptor[k] - q[k]) * (e.descriptor[k] - q[k]);
    all.emplace_back(std::sqrt(s), e.id);
  }
  std::sort(all.begin(), all.end());
  std::vector<std::string> ids;
  for (auto& [_, id] : all) ids.push_back(id);
  return ids;
}

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
    const auto dir = std::filesystem::temp_directory_path() / "fuseloc_test_evaluation_data";
    std::filesystem::remove_all(dir);
    SyntheticConfig s;
    s.seed = 9;
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

// ---------------------------------------------------------------------------
// Retrieval

TEST(Retrieval, TopNMatchesSortOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 5 + rng() % 60, width = 1 + rng() % 9;
    auto db = random_db(rng, n, width, "d");
    auto q = random_db(rng, 1, width, "q").entries()[0].descriptor;
    const auto want = oracle_ranking(db, q);
    for (std::size_t top : {std::size_t{1}, std::size_t{3}, n, n + 7}) {
      const auto got = query_top_n(db, q, top);
      ASSERT_EQ(got.size(), std::min(top, n));
      for (std::size_t k = 0; k < got.size(); ++k) EXPECT_EQ(got[k].id, want[k]);
    }
  }
}

TEST(Retrieval, TiesBrokenById) {
  DescriptorDatabase db(2);
  db.add(entry("c", {0, 0}, {1, 0}));
  db.add(entry("a", {0, 0}, {0, 1}));
  db.add(entry("b", {0, 0}, {-1, 0}));
  const std::vector<double> q{0, 0};
  const auto got = query_top_n(db, q, 3);
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[0].id, "a");
  EXPECT_EQ(got[1].id, "b");
  EXPECT_EQ(got[2].id, "c");
  EXPECT_DOUBLE_EQ(got[0].distance, 1.0);
}

TEST(Retrieval, WidthMismatchAndDuplicateIdsRejected) {
  DescriptorDatabase db(2);
  db.add(entry("a", {0, 0}, {1, 0}));
  EXPECT_ANY_THROW(db.add(entry("b", {0, 0}, {1, 0, 0})));
  EXPECT_ANY_THROW(db.add(entry("a", {0, 0}, {0, 1})));
  const std::vector<double> q{1, 2, 3};
  EXPECT_ANY_THROW(query_top_n(db, q, 1));
  EXPECT_NE(db.find("a"), nullptr);
  EXPECT_EQ(db.find("zz"), nullptr);
}

// ---------------------------------------------------------------------------
// Recall

TEST(Recall, HandComputedExample) {
  // Queries at the origin. q1's nearest descriptor is 20 m away (hit at
  // n = 1); q2's nearest is 30 m away and its second 25 m away (miss at
  // n = 1, hit at n = 2, since the 25 m radius is inclusive).
  DescriptorDatabase db(1);
  db.add(entry("a", {20, 0}, {0.0}));
  db.add(entry("b", {30, 0}, {5.0}));
  db.add(entry("c", {0, 25}, {5.5}));
  db.add(entry("d", {900, 900}, {10.0}));
  DescriptorDatabase q(1);
  q.add(entry("q1", {0, 0}, {0.1}));
  q.add(entry("q2", {0, 0}, {4.9}));
  EXPECT_DOUBLE_EQ(recall_at_n(db, q, 1), 0.5);
  EXPECT_DOUBLE_EQ(recall_at_n(db, q, 2), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_n(db, q, 1, 30.0), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_n(db, q, 1, 19.99), 0.0);
}

TEST(Recall, OnePercentRule) {
  EXPECT_EQ(one_percent_n(1), 1u);
  EXPECT_EQ(one_percent_n(99), 1u);
  EXPECT_EQ(one_percent_n(199), 1u);
  EXPECT_EQ(one_percent_n(200), 2u);
  EXPECT_EQ(one_percent_n(1234), 12u);
}

TEST(Recall, MonotoneInNAndBoundedByOne) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto db = random_db(rng, 80, 4, "d");
    auto q = random_db(rng, 30, 4, "q");
    double prev = 0;
    for (std::size_t n = 1; n <= 80; ++n) {
      const double r = recall_at_n(db, q, n, 60.0);
      EXPECT_GE(r, prev);
      EXPECT_LE(r, 1.0);
      prev = r;
    }
    // With the whole database ranked, recall is the fraction of queries
    // with any database entry within the radius.
    std::size_t reachable = 0;
    for (const auto& qe : q.entries())
      reachable += std::any_of(db.entries().begin(), db.entries().end(),
                               [&](const DbEntry& e) { return planar_distance(e.position, qe.position) <= 60.0; });
    EXPECT_DOUBLE_EQ(prev, static_cast<double>(reachable) / 30.0);
  }
}

TEST(Recall, InvariantToDatabaseOrder) {
  std::mt19937_64 rng(3);
  auto db = random_db(rng, 150, 3, "d");
  auto q = random_db(rng, 40, 3, "q");
  auto entries = db.entries();
  std::shuffle(entries.begin(), entries.end(), rng);
  DescriptorDatabase shuffled(3);
  for (auto& e : entries) shuffled.add(e);
  for (std::size_t n : {1, 2, 5, 25}) EXPECT_EQ(recall_at_n(db, q, n, 80.0), recall_at_n(shuffled, q, n, 80.0));
  EXPECT_EQ(ar_at_1pct(db, q, 80.0), recall_at_n(db, q, 1, 80.0));
}

TEST(Recall, EmptyInputsRejected) {
  DescriptorDatabase db(1), q(1);
  EXPECT_ANY_THROW(ar_at_1pct(db, q));
  db.add(entry("a", {0, 0}, {0.0}));
  EXPECT_ANY_THROW(recall_at_n(db, q, 1));
}

// ---------------------------------------------------------------------------
// Artifacts

TEST(Ranking, RoundTripAndIndependentRecompute) {
  std::mt19937_64 rng(4);
  auto db = random_db(rng, 40, 5, "d");
  auto q = random_db(rng, 12, 5, "q");
  const auto rows = rank_queries(db, q, 25);
  std::stringstream ss;
  write_ranking(ss, rows);
  const auto back = read_ranking(ss);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].query_id, rows[i].query_id);
    ASSERT_EQ(back[i].top.size(), 25u);
    // The stored order equals a from-scratch ranking, and stored distances
    // agree to the printed precision.
    const auto want = oracle_ranking(db, q.entries()[i].descriptor);
    for (std::size_t k = 0; k < 25; ++k) {
      EXPECT_EQ(back[i].top[k].id, want[k]);
      EXPECT_NEAR(back[i].top[k].distance, rows[i].top[k].distance, 1e-8 * (1 + rows[i].top[k].distance));
      EXPECT_NEAR(back[i].top[k].position.easting, db.find(want[k])->position.easting, 5e-4);
    }
  }
  std::stringstream bad("header\nq1\t0\t0\t1\tid\n");
  EXPECT_ANY_THROW(read_ranking(bad));
}

TEST(Report, RoundTrip) {
  EvalReport r;
  r.metrics = {{"recall_fused", 1, 0.875}, {"recall_fused", 25, 1.0}, {"ar1pct_pc", 1, 0.5}};
  ActiveTripletReport a;
  a.pc_train = 3.5;
  a.rgb_train = 1.25;
  a.pc_val = 2.0;
  a.rgb_val = 4.75;
  a.train_batches = 10;
  a.val_batches = 7;
  r.active = a;
  std::stringstream ss;
  write_report(ss, r);
  const auto back = parse_report(ss);
  ASSERT_EQ(back.metrics.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.metrics[i].metric, r.metrics[i].metric);
    EXPECT_EQ(back.metrics[i].n, r.metrics[i].n);
    EXPECT_DOUBLE_EQ(back.metrics[i].value, r.metrics[i].value);
  }
  ASSERT_TRUE(back.active.has_value());
  EXPECT_DOUBLE_EQ(back.active->pc_train, 3.5);
  EXPECT_DOUBLE_EQ(back.active->rgb_val, 4.75);
  EXPECT_DOUBLE_EQ(back.active->delta_val(), 2.75);
  EXPECT_EQ(back.active->val_batches, 7u);

  std::stringstream no_header("recall\t1\t0.5\n");
  EXPECT_ANY_THROW(parse_report(no_header));
}

// ---------------------------------------------------------------------------
// Model-backed

TEST(Database, WidthAndDeterminism) {
  Model m(tiny_network(), 5);
  const auto a = build_database(m, small_data(), Modality::fused);
  const auto b = build_database(m, small_data(), Modality::fused, Precision::f64, 5);
  const auto pc = build_database(m, small_data(), Modality::pc);
  ASSERT_EQ(a.size(), small_data().size());
  EXPECT_EQ(a.width(), 16u);
  EXPECT_EQ(pc.width(), 8u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.entries()[i].id, small_data().elements[i].id);
    ASSERT_EQ(a.entries()[i].descriptor.size(), 16u);
    // Eval-mode batch norm: descriptors do not depend on batch composition.
    for (std::size_t k = 0; k < 16; ++k)
      EXPECT_NEAR(a.entries()[i].descriptor[k], b.entries()[i].descriptor[k], 1e-12);
  }
}

TEST(Diagnostic, LeavesModelUntouchedAndIsConsistent) {
  Model m(tiny_network(), 6);
  const auto h = parameter_hash(m.params());
  DiagnosticConfig cfg;
  cfg.batch_size = 8;
  cfg.batches = 4;
  cfg.seed = 11;
  const Dataset train = small_data().traversals({0, 1}), val = small_data().traversals({1, 2});
  const auto r1 = modality_diagnostic(m, train, val, LossConfig{}, cfg);
  EXPECT_EQ(parameter_hash(m.params()), h);
  EXPECT_EQ(r1.train_batches, 4u);
  EXPECT_EQ(r1.val_batches, 4u);
  for (double v : {r1.pc_train, r1.rgb_train, r1.pc_val, r1.rgb_val}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 8.0);
  }
  EXPECT_DOUBLE_EQ(r1.delta_train(), r1.rgb_train - r1.pc_train);
  EXPECT_DOUBLE_EQ(r1.delta_val(), r1.rgb_val - r1.pc_val);
  const auto r2 = modality_diagnostic(m, train, val, LossConfig{}, cfg);
  EXPECT_EQ(r1.pc_train, r2.pc_train);
  EXPECT_EQ(r1.rgb_val, r2.rgb_val);
  EXPECT_ANY_THROW(modality_diagnostic(m, train, small_data().subset({}), LossConfig{}, cfg));
}

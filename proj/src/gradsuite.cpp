#include "fuseloc/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>

#include "fuseloc/metric.hpp"
#include "fuseloc/model.hpp"
#include "fuseloc/ops.hpp"
#include "fuseloc/sparse.hpp"

namespace fuseloc {

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Random fixed weights turn any output into a scalar with a dense gradient.
Var weighted_sum(Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.tape().constant(y.shape(), uniform(rng, y.size(), 0.5, 1.5))));
}

std::vector<Voxel> random_voxels(std::mt19937_64& rng, int batches, int n) {
  std::bernoulli_distribution occ(0.35);
  std::vector<Voxel> out;
  for (int b = 0; b < batches; ++b) {
    bool any = false;
    for (int x = 0; x < n; ++x)
      for (int y = 0; y < n; ++y)
        for (int z = 0; z < n; ++z)
          if (occ(rng) || (!any && x == n - 1 && y == n - 1 && z == n - 1)) {
            out.push_back({b, x - 2, y - 2, z - 2});
            any = true;
          }
  }
  return out;
}

struct Check {
  std::string op, name;
  std::function<GradCheckResult(double eps)> run;
};

std::vector<Check> build_checks(std::uint64_t seed) {
  std::vector<Check> c;
  auto rng = std::make_shared<std::mt19937_64>(seed);
  auto push = [&](std::string op, std::string name, TapeFunction f, Shape s, std::vector<double> x) {
    c.push_back({op, name, [f = std::move(f), s = std::move(s), x = std::move(x)](double eps) {
                   return finite_difference_check(f, s, x, eps);
                 }});
  };
  const std::uint64_t ws = seed + 99;

  // Dense 2D convolution
  {
    auto kernel = uniform(*rng, 3 * 2 * 3 * 3);
    auto image = uniform(*rng, 2 * 2 * 5 * 5);
    auto bias = uniform(*rng, 3);
    push("conv2d", "conv2d/input",
        [=](Tape& t, Var x) { return weighted_sum(conv2d(x, t.constant({3, 2, 3, 3}, kernel), Var{}, 2, 1), ws); },
        {2, 2, 5, 5}, image);
    push("conv2d", "conv2d/kernel",
        [=](Tape& t, Var k) {
          return weighted_sum(sigmoid(conv2d(t.constant({2, 2, 5, 5}, image), k, t.constant({3}, bias), 1, 1)), ws);
        },
        {3, 2, 3, 3}, kernel);
    push("conv2d", "conv2d/bias",
        [=](Tape& t, Var b) {
          return weighted_sum(sigmoid(conv2d(t.constant({2, 2, 5, 5}, image), t.constant({3, 2, 3, 3}, kernel), b, 2, 0)), ws);
        },
        {3}, bias);
  }

  // Sparse convolutions on a two-entry batch
  {
    auto coords = random_voxels(*rng, 2, 4);
    const std::size_t n = coords.size();
    auto feats = uniform(*rng, n * 2);
    auto W3 = uniform(*rng, 27 * 2 * 3);
    auto W2 = uniform(*rng, 8 * 2 * 3);
    auto Wup = uniform(*rng, 8 * 3 * 2);
    push("sparse_conv", "sparse_conv/features",
        [=](Tape& t, Var f) { return weighted_sum(sparse_conv(make_sparse(coords, f), t.constant({27, 2, 3}, W3), 3, 1).features(), ws); },
        {n, 2}, feats);
    push("sparse_conv", "sparse_conv/kernel",
        [=](Tape& t, Var w) {
          return weighted_sum(sparse_conv(make_sparse(coords, t.constant({n, 2}, feats)), w, 2, 2).features(), ws);
        },
        {8, 2, 3}, W2);
    push("sparse_transposed_conv", "sparse_transposed_conv/features",
        [=](Tape& t, Var f) {
          auto fine = make_sparse(coords, f);
          auto coarse = sparse_conv(fine, t.constant({8, 2, 3}, W2), 2, 2);
          return weighted_sum(sparse_transposed_conv(coarse, t.constant({8, 3, 2}, Wup), 2, 2, fine.coords_ptr()).features(), ws);
        },
        {n, 2}, feats);
    push("sparse_transposed_conv", "sparse_transposed_conv/kernel",
        [=](Tape& t, Var w) {
          auto fine = make_sparse(coords, t.constant({n, 2}, feats));
          auto coarse = sparse_conv(fine, t.constant({8, 2, 3}, W2), 2, 2);
          return weighted_sum(sparse_transposed_conv(coarse, w, 2, 2, fine.coords_ptr()).features(), ws);
        },
        {8, 3, 2}, Wup);
  }

  // Channel attention on rows grouped into three segments
  {
    auto seg = std::make_shared<Segments>();
    seg->ids = {0, 1, 0, 2, 1, 2, 2, 0};
    seg->count = 3;
    SegmentsPtr segs = seg;
    auto rows = uniform(*rng, 8 * 6);
    auto w = uniform(*rng, 3);
    push("eca", "eca/input", [=](Tape& t, Var x) { return weighted_sum(eca_rows(x, segs, t.constant({3}, w)), ws); }, {8, 6}, rows);
    push("eca", "eca/weight", [=](Tape& t, Var k) { return weighted_sum(eca_rows(t.constant({8, 6}, rows), segs, k), ws); }, {3}, w);

    auto pos = uniform(*rng, 8 * 6, 0.1, 2.0);
    push("gem", "gem/input", [=](Tape& t, Var x) { return weighted_sum(segment_gem(x, segs, t.scalar(3.0), 1e-6), ws); }, {8, 6}, pos);
    push("gem", "gem/p", [=](Tape& t, Var p) { return weighted_sum(segment_gem(t.constant({8, 6}, pos), segs, p, 1e-6), ws); }, {1},
        {2.6});
  }

  // Batch norm in both modes; running statistics are fixed buffers.
  {
    auto store = std::make_shared<ParameterStore>();
    Parameter& gamma = store->add("gamma", {3});
    Parameter& beta = store->add("beta", {3});
    Parameter& rm = store->add("running_mean", {3}, ParamGroup::main, false);
    Parameter& rv = store->add("running_var", {3}, ParamGroup::main, false);
    gamma.value = uniform(*rng, 3, 0.5, 1.5);
    beta.value = uniform(*rng, 3);
    rm.value = uniform(*rng, 3, -0.2, 0.2);
    rv.value = uniform(*rng, 3, 0.5, 1.5);
    auto x = uniform(*rng, 4 * 3 * 2 * 2);
    Parameter *gp = &gamma, *bp = &beta;
    for (bool training : {true, false}) {
      const std::string tag = std::string("batchnorm/") + (training ? "train" : "eval");
      // Train mode also updates the running buffers; snapshot and restore so
      // every evaluation in eval mode sees the same statistics.
      Parameter *rmp = &rm, *rvp = &rv;
      auto bn = [store, rmp, rvp, training](Var in, Var g, Var b) {
        const auto m = rmp->value, v = rvp->value;
        Var y = batch_norm(in, g, b, *rmp, *rvp, training);
        rmp->value = m;
        rvp->value = v;
        return y;
      };
      push("batchnorm", tag + "/input",
          [=](Tape& t, Var in) { return weighted_sum(sigmoid(bn(in, t.parameter(*gp), t.parameter(*bp))), ws); },
          {4, 3, 2, 2}, x);
      push("batchnorm", tag + "/gamma",
          [=](Tape& t, Var g) { return weighted_sum(sigmoid(bn(t.constant({4, 3, 2, 2}, x), g, t.parameter(*bp))), ws); },
          {3}, gamma.value);
      push("batchnorm", tag + "/beta",
          [=](Tape& t, Var b) { return weighted_sum(sigmoid(bn(t.constant({4, 3, 2, 2}, x), t.parameter(*gp), b)), ws); },
          {3}, beta.value);
    }
  }

  // Losses. Triplets are mined once at the starting point; a wide margin keeps
  // every hinge active so the function is smooth around it.
  {
    const std::size_t B = 8, k = 5;
    std::vector<Position> pos;
    for (std::size_t i = 0; i < B; ++i) pos.push_back({100.0 * static_cast<double>(i / 2), static_cast<double>(i % 2)});
    const PairMasks masks = similarity_masks(pos, SimilarityConfig{});
    auto desc = uniform(*rng, B * k);
    const auto triplets = batch_hard_mine(descriptor_distances(desc, B, k), masks);
    push("triplet", "triplet/descriptors",
        [=](Tape&, Var d) { return triplet_margin_loss(d, triplets, 4.0).loss; }, {B, k}, desc);

    push("triplet", "multi_head/descriptors",
        [=](Tape&, Var d) {
          Var dpc = d, drgb = l2_normalize(scale(d, -0.5));
          const Var parts[] = {dpc, drgb};
          Var df = concat(parts, 1);
          auto head = [&](Var v) { return triplet_margin_loss(v, triplets, 4.0).loss; };
          return add(add(head(df), scale(head(dpc), 0.5)), scale(head(drgb), 0.25));
        },
        {B, k}, desc);
  }
  return c;
}

}  // namespace

std::vector<std::string> gradient_suite_ops() {
  return {"conv2d", "sparse_conv", "sparse_transposed_conv", "eca", "gem", "batchnorm", "triplet"};
}

std::vector<GradSuiteEntry> run_gradient_suite(const std::string& op, double eps, double tolerance, std::uint64_t seed) {
  const auto ops = gradient_suite_ops();
  if (!op.empty() && std::find(ops.begin(), ops.end(), op) == ops.end())
    throw std::invalid_argument("unknown op '" + op + "'");
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
  if (!(tolerance > 0.0)) throw std::invalid_argument("tolerance must be positive");
  std::vector<GradSuiteEntry> out;
  for (const auto& c : build_checks(seed)) {
    if (!op.empty() && c.op != op) continue;
    GradSuiteEntry e{c.op, c.name, c.run(eps), false};
    e.passed = e.result.max_relative_error < tolerance;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace fuseloc

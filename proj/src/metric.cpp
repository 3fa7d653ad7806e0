#include "fuseloc/metric.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fuseloc/parallel.hpp"

namespace fuseloc {

double planar_distance(const Position& a, const Position& b) {
  return std::hypot(a.easting - b.easting, a.northing - b.northing);
}

void SimilarityConfig::validate() const {
  if (!(positive_radius > 0.0) || !(negative_radius > positive_radius))
    throw std::invalid_argument("similarity radii must satisfy 0 < positive < negative");
}

bool PairMasks::any_positive() const {
  return std::any_of(positive.begin(), positive.end(), [](std::uint8_t v) { return v != 0; });
}

PairMasks similarity_masks(std::span<const Position> positions, const SimilarityConfig& cfg) {
  cfg.validate();
  PairMasks m;
  m.n = positions.size();
  m.positive.assign(m.n * m.n, 0);
  m.negative.assign(m.n * m.n, 0);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j) {
      if (i == j) continue;
      const double d = planar_distance(positions[i], positions[j]);
      m.positive[i * m.n + j] = d <= cfg.positive_radius;
      m.negative[i * m.n + j] = d >= cfg.negative_radius;
    }
  return m;
}

std::vector<double> descriptor_distances(std::span<const double> desc, std::size_t rows, std::size_t width) {
  if (desc.size() != rows * width) throw ShapeError("descriptor_distances", "rows", "descriptor buffer size mismatch");
  std::vector<double> d(rows * rows, 0.0);
  parallel_for(
      rows,
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
          for (std::size_t j = 0; j < rows; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < width; ++c) {
              const double t = desc[i * width + c] - desc[j * width + c];
              s += t * t;
            }
            d[i * rows + j] = std::sqrt(s);
          }
      },
      16);
  return d;
}

std::vector<Triplet> batch_hard_mine(std::span<const double> dist, const PairMasks& masks) {
  const std::size_t n = masks.n;
  if (dist.size() != n * n) throw ShapeError("batch_hard_mine", "rows", "distance matrix and masks disagree in size");
  std::vector<Triplet> out;
  for (std::size_t a = 0; a < n; ++a) {
    std::int32_t p = -1, q = -1;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dist[a * n + j];
      if (masks.is_positive(a, j) && (p < 0 || d > dist[a * n + static_cast<std::size_t>(p)])) p = static_cast<std::int32_t>(j);
      if (masks.is_negative(a, j) && (q < 0 || d < dist[a * n + static_cast<std::size_t>(q)])) q = static_cast<std::int32_t>(j);
    }
    if (p >= 0 && q >= 0) out.push_back({static_cast<std::int32_t>(a), p, q});
  }
  return out;
}

void LossConfig::validate() const {
  if (!(margin > 0.0)) throw std::invalid_argument("margin must be positive");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw std::invalid_argument("loss weights alpha and beta must be nonnegative");
  if (alpha + beta > 1.0) throw std::invalid_argument("alpha + beta must not exceed 1");
}

TripletLoss triplet_margin_loss(Var desc, std::span<const Triplet> triplets, double margin) {
  Tape& tape = desc.tape();
  TripletLoss r;
  r.triplets = static_cast<int>(triplets.size());
  if (triplets.empty()) {
    r.loss = tape.scalar(0.0);
    return r;
  }
  if (desc.shape().size() != 2) throw ShapeError("triplet_margin_loss", "rank", "descriptors must be [B, D]");
  const std::size_t B = desc.shape()[0], D = desc.shape()[1];
  auto x = desc.value();
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < D; ++c) {
      const double t = x[i * D + c] - x[j * D + c];
      s += t * t;
    }
    return std::sqrt(s);
  };
  struct Term {
    Triplet t;
    double dap, dan;
  };
  std::vector<Term> active;
  // Extended accumulation, rounded once, so equal hinge values average back
  // to themselves exactly.
  long double total = 0.0L;
  for (const Triplet& t : triplets) {
    for (auto i : {t.anchor, t.positive, t.negative})
      if (i < 0 || static_cast<std::size_t>(i) >= B) throw std::out_of_range("triplet index outside the batch");
    const double dap = dist(static_cast<std::size_t>(t.anchor), static_cast<std::size_t>(t.positive));
    const double dan = dist(static_cast<std::size_t>(t.anchor), static_cast<std::size_t>(t.negative));
    const double lhs = dap + margin;
    if (dan < lhs) {
      total += static_cast<long double>(lhs - dan);
      active.push_back({t, dap, dan});
    }
  }
  r.active = static_cast<int>(active.size());
  const double count = static_cast<double>(triplets.size());
  r.loss = tape.record({1}, {static_cast<double>(total / static_cast<long double>(count))}, {desc}, [desc, D, count, active = std::move(active)](Tape& t, Var, std::span<const double> g) {
    auto gx = t.grad_sink(desc);
    auto xv = t.value(desc);
    const double s = g[0] / count;
    // d||u - v|| / du = (u - v) / ||u - v||, zero subgradient at coincidence.
    auto push = [&](std::int32_t u, std::int32_t v, double d, double sign) {
      if (d == 0.0) return;
      const auto ui = static_cast<std::size_t>(u) * D, vi = static_cast<std::size_t>(v) * D;
      for (std::size_t c = 0; c < D; ++c) {
        const double k = sign * s * (xv[ui + c] - xv[vi + c]) / d;
        gx[ui + c] += k;
        gx[vi + c] -= k;
      }
    };
    for (const Term& term : active) {
      push(term.t.anchor, term.t.positive, term.dap, 1.0);
      push(term.t.anchor, term.t.negative, term.dan, -1.0);
    }
  });
  return r;
}

LossBreakdown multi_head_loss(const HeadLoss& fused, const HeadLoss& pc, const HeadLoss& rgb, const LossConfig& cfg) {
  cfg.validate();
  LossBreakdown b;
  b.L_F = fused.loss;
  b.L_PC = pc.loss;
  b.L_RGB = rgb.loss;
  b.active_F = fused.active;
  b.active_PC = pc.active;
  b.active_RGB = rgb.active;
  b.triplets_F = fused.triplets;
  b.triplets_PC = pc.triplets;
  b.triplets_RGB = rgb.triplets;
  // Evaluated in extended precision and rounded once.
  const long double a = cfg.alpha, be = cfg.beta;
  b.total = static_cast<double>((1.0L - a - be) * b.L_F + a * b.L_PC + be * b.L_RGB);
  return b;
}

void BatchController::validate() const {
  if (current_size < 2) throw std::invalid_argument("batch size must be at least 2");
  if (max_size < current_size) throw std::invalid_argument("batch size cap is below the initial size");
  if (!(growth >= 1.0)) throw std::invalid_argument("batch growth must be >= 1");
  if (!(active_threshold >= 0.0 && active_threshold <= 1.0)) throw std::invalid_argument("active threshold must be in [0,1]");
}

void BatchController::update(std::size_t active_count) {
  if (static_cast<double>(active_count) < active_threshold * static_cast<double>(current_size)) {
    const auto grown = static_cast<std::size_t>(std::llround(static_cast<double>(current_size) * growth));
    current_size = std::min(std::max(grown, current_size), max_size);
  }
}

}  // namespace fuseloc

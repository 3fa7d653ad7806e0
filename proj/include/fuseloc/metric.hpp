#pragma once

// Triplet mining and losses over descriptor batches.

#include <cstdint>
#include <span>
#include <vector>

#include "fuseloc/tensor.hpp"

namespace fuseloc {

struct Position {
  double easting = 0.0;
  double northing = 0.0;
};

double planar_distance(const Position& a, const Position& b);

struct SimilarityConfig {
  double positive_radius = 10.0;  // at most this far apart: same place
  double negative_radius = 50.0;  // at least this far apart: different place

  void validate() const;
};

struct PairMasks {
  std::size_t n = 0;
  std::vector<std::uint8_t> positive;  // n*n, diagonal false
  std::vector<std::uint8_t> negative;

  bool is_positive(std::size_t i, std::size_t j) const { return positive[i * n + j] != 0; }
  bool is_negative(std::size_t i, std::size_t j) const { return negative[i * n + j] != 0; }
  bool any_positive() const;
};

PairMasks similarity_masks(std::span<const Position> positions, const SimilarityConfig& cfg = {});

struct Triplet {
  std::int32_t anchor;
  std::int32_t positive;
  std::int32_t negative;

  bool operator==(const Triplet&) const = default;
};

/// Row-major [B, B] Euclidean distances between descriptor rows of [B, D].
std::vector<double> descriptor_distances(std::span<const double> desc, std::size_t rows, std::size_t width);

/// One triplet per anchor with at least one positive and one negative:
/// farthest positive, nearest negative, lowest index on ties.
std::vector<Triplet> batch_hard_mine(std::span<const double> dist, const PairMasks& masks);

struct LossConfig {
  double margin = 0.2;
  double alpha = 0.5;  // weight of the point-cloud head
  double beta = 0.0;   // weight of the image head

  double fused_weight() const { return 1.0 - alpha - beta; }
  void validate() const;
};

struct TripletLoss {
  Var loss;  // scalar mean hinge, 0 for no triplets
  int active = 0;
  int triplets = 0;
};

/// mean over triplets of max(d(a,p) + m - d(a,n), 0) on the rows of desc [B, D].
TripletLoss triplet_margin_loss(Var desc, std::span<const Triplet> triplets, double margin);

struct HeadLoss {
  double loss = 0.0;
  int active = 0;
  int triplets = 0;
};

struct LossBreakdown {
  double L_F = 0.0, L_PC = 0.0, L_RGB = 0.0;
  int active_F = 0, active_PC = 0, active_RGB = 0;
  int triplets_F = 0, triplets_PC = 0, triplets_RGB = 0;
  double total = 0.0;
};

LossBreakdown multi_head_loss(const HeadLoss& fused, const HeadLoss& pc, const HeadLoss& rgb, const LossConfig& cfg);

struct BatchController {
  std::size_t current_size = 8;
  double growth = 1.4;
  double active_threshold = 0.7;
  std::size_t max_size = 160;

  void validate() const;
  /// Grows by round(size * growth), capped, when active < threshold * size.
  void update(std::size_t active_count);
};

}  // namespace fuseloc

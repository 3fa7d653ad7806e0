#pragma once

// Sparse voxel tensors and the 3D convolutions over them.
//
// A tensor is an immutable, lexicographically sorted set of occupied lattice
// coordinates (shared between tensors that live on the same lattice) plus a
// feature row per coordinate recorded on a Tape. Every coordinate carries a
// batch index so a mini-batch of clouds is one tensor; kernels never connect
// voxels of different batch entries.

#include <array>
#include <compare>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "fuseloc/ops.hpp"
#include "fuseloc/tensor.hpp"

namespace fuseloc {

struct Voxel {
  std::int32_t batch = 0;
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  auto operator<=>(const Voxel&) const = default;
};

class UnsupportedStrideError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Open-addressing hash from voxel to row index.
class CoordinateMap {
 public:
  CoordinateMap() = default;
  explicit CoordinateMap(std::span<const Voxel> coords);

  /// Row of `v`, or -1 when unoccupied.
  std::int32_t find(const Voxel& v) const;

  static bool representable(const Voxel& v);

 private:
  static std::uint64_t pack(const Voxel& v);

  std::vector<std::uint64_t> keys_;
  std::vector<std::int32_t> rows_;
  std::uint64_t mask_ = 0;
};

class CoordinateSet {
 public:
  /// Validates uniqueness and the lattice; coords must already be sorted.
  CoordinateSet(std::vector<Voxel> coords, int stride, std::int32_t batch_count);

  const std::vector<Voxel>& coords() const { return coords_; }
  std::size_t size() const { return coords_.size(); }
  int stride() const { return stride_; }
  std::int32_t batch_count() const { return batch_count_; }
  std::int32_t find(const Voxel& v) const { return index_.find(v); }
  const SegmentsPtr& segments() const { return segments_; }

 private:
  std::vector<Voxel> coords_;
  int stride_;
  std::int32_t batch_count_;
  CoordinateMap index_;
  SegmentsPtr segments_;
};

using CoordsPtr = std::shared_ptr<const CoordinateSet>;

class SparseVoxelTensor {
 public:
  SparseVoxelTensor(CoordsPtr coords, Var features);

  const CoordinateSet& coords() const { return *coords_; }
  const CoordsPtr& coords_ptr() const { return coords_; }
  Var features() const { return features_; }
  int stride() const { return coords_->stride(); }
  std::size_t size() const { return coords_->size(); }
  std::size_t channels() const { return features_.shape()[1]; }
  std::int32_t batch_count() const { return coords_->batch_count(); }
  const SegmentsPtr& segments() const { return coords_->segments(); }

  /// Same coordinates, new features (e.g. after an elementwise op).
  SparseVoxelTensor with_features(Var features) const { return {coords_, features}; }

 private:
  CoordsPtr coords_;
  Var features_;
};

/// Builds a tensor from coordinates in any order; rows are sorted and the
/// features permuted to match. batch_count 0 means max batch index + 1.
SparseVoxelTensor make_sparse(std::vector<Voxel> coords, Var features, int stride = 1, std::int32_t batch_count = 0);
SparseVoxelTensor make_sparse(Tape& tape, std::vector<Voxel> coords, std::vector<double> features,
                              std::size_t channels, int stride = 1, std::int32_t batch_count = 0);

// ---------------------------------------------------------------------------
// Quantization

using Point3 = std::array<float, 3>;
using PointCloud = std::vector<Point3>;

struct QuantizationConfig {
  double step = 0.01;  // meters per voxel

  void validate() const;
};

/// floor(point / step) per axis; duplicates collapse into one voxel with
/// feature 1.0. Throws "empty point cloud" for empty input.
SparseVoxelTensor quantize(Tape& tape, const PointCloud& points, const QuantizationConfig& cfg);
/// One batch entry per cloud.
SparseVoxelTensor quantize_batch(Tape& tape, std::span<const PointCloud* const> clouds, const QuantizationConfig& cfg);

// ---------------------------------------------------------------------------
// Convolutions. Kernels are [K^3, C_in, C_out]; offsets enumerate
// {-(K-1)/2..(K-1)/2}^3 for odd K and {-(K/2-1)..K/2}^3 for even K, x slowest.

std::vector<std::array<int, 3>> kernel_offsets(int kernel_size);

/// Output coordinates for a strided conv: (S*s) * floor(c / (S*s)), deduplicated.
CoordsPtr strided_coords(const CoordinateSet& in, int stride);

SparseVoxelTensor sparse_conv(const SparseVoxelTensor& x, Var kernel, int kernel_size, int stride);

/// Upsamples onto `targets`, which must lie on the lattice x.stride / s.
SparseVoxelTensor sparse_transposed_conv(const SparseVoxelTensor& x, Var kernel, int kernel_size, int stride,
                                         const CoordsPtr& targets);

/// Union of coordinates; features summed where both are present.
SparseVoxelTensor coordinate_aligned_add(const SparseVoxelTensor& a, const SparseVoxelTensor& b);

/// Per-row bias add, [C] broadcast over rows.
SparseVoxelTensor add_bias(const SparseVoxelTensor& x, Var bias);

// ---------------------------------------------------------------------------
// Dense bridge used by oracles and tests.

struct Extent {
  std::array<int, 3> lo{};
  std::array<int, 3> hi{};  // inclusive

  std::array<std::size_t, 3> dims() const;
};

struct DenseGrid {
  Shape shape;  // [C, X, Y, Z]
  std::vector<double> values;

  double& at(std::size_t c, std::size_t x, std::size_t y, std::size_t z) {
    return values[((c * shape[1] + x) * shape[2] + y) * shape[3] + z];
  }
  double at(std::size_t c, std::size_t x, std::size_t y, std::size_t z) const {
    return values[((c * shape[1] + x) * shape[2] + y) * shape[3] + z];
  }
};

/// Writes the rows of batch entry `batch` into a zero grid covering `extent`.
DenseGrid densify(const SparseVoxelTensor& x, const Extent& extent, std::int32_t batch = 0);

/// Cells of `grid` with any nonzero channel become voxels at extent.lo + index.
SparseVoxelTensor sparsify(Tape& tape, const DenseGrid& grid, const Extent& extent, int stride = 1);

}  // namespace fuseloc

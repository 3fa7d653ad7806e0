#pragma once

// Global pooling of a feature map into one descriptor row per batch entry.

#include <string>

#include "fuseloc/ops.hpp"
#include "fuseloc/sparse.hpp"

namespace fuseloc {

enum class PoolMethod { gem, mac, spoc };

PoolMethod parse_pool_method(const std::string& text);
std::string to_string(PoolMethod m);

struct PoolingConfig {
  PoolMethod method = PoolMethod::gem;
  double p_init = 3.0;  // initial GeM exponent; trained, clamped at 1
  double eps = 1e-6;    // inputs are clamped to at least eps before pow

  void validate() const;
};

/// Pools rows [N, C] grouped by `seg` into [segments, C]. `p` is only read
/// for gem and may be invalid otherwise.
Var pool_rows(Var rows, const SegmentsPtr& seg, const PoolingConfig& cfg, Var p);

/// Over occupied voxels only; one row per batch entry.
Var pool(const SparseVoxelTensor& x, const PoolingConfig& cfg, Var p);

/// Over pixels of a [N, C, H, W] or [C, H, W] map.
Var pool_dense(Var x, const PoolingConfig& cfg, Var p);

}  // namespace fuseloc

#include "fuseloc/pooling.hpp"

#include <cmath>
#include <stdexcept>

namespace fuseloc {

PoolMethod parse_pool_method(const std::string& text) {
  if (text == "gem") return PoolMethod::gem;
  if (text == "mac") return PoolMethod::mac;
  if (text == "spoc") return PoolMethod::spoc;
  throw std::invalid_argument("unknown pooling method '" + text + "' (expected gem, mac or spoc)");
}

std::string to_string(PoolMethod m) {
  switch (m) {
    case PoolMethod::gem: return "gem";
    case PoolMethod::mac: return "mac";
    case PoolMethod::spoc: return "spoc";
  }
  return "?";
}

void PoolingConfig::validate() const {
  if (!(eps > 0.0)) throw std::invalid_argument("pooling eps must be positive");
  if (!(p_init >= 1.0) || !std::isfinite(p_init)) throw std::invalid_argument("GeM exponent must be >= 1");
}

Var pool_rows(Var rows, const SegmentsPtr& seg, const PoolingConfig& cfg, Var p) {
  switch (cfg.method) {
    case PoolMethod::gem:
      if (!p.valid()) throw std::invalid_argument("gem pooling needs an exponent");
      return segment_gem(rows, seg, p, cfg.eps);
    case PoolMethod::mac: return segment_max(rows, seg);
    case PoolMethod::spoc: return segment_mean(rows, seg);
  }
  throw std::logic_error("unreachable");
}

Var pool(const SparseVoxelTensor& x, const PoolingConfig& cfg, Var p) {
  return pool_rows(x.features(), x.segments(), cfg, p);
}

Var pool_dense(Var x, const PoolingConfig& cfg, Var p) {
  Var nchw = x.shape().size() == 3 ? reshape(x, {1, x.shape()[0], x.shape()[1], x.shape()[2]}) : x;
  if (nchw.shape().size() != 4) throw ShapeError("pool_dense", "rank", "expected [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
  if (nchw.shape()[2] * nchw.shape()[3] == 0) throw std::invalid_argument("cannot pool empty map");
  return pool_rows(nchw_to_rows(nchw), nchw_segments(nchw.shape()), cfg, p);
}

}  // namespace fuseloc

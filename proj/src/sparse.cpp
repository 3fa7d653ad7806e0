#include "fuseloc/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <string>

#include "fuseloc/parallel.hpp"

namespace fuseloc {

namespace {

constexpr std::uint64_t kEmpty = ~0ULL;

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::string describe(const Voxel& v) {
  return "(" + std::to_string(v.batch) + ": " + std::to_string(v.x) + "," + std::to_string(v.y) + "," +
         std::to_string(v.z) + ")";
}

// Table of input rows feeding each output row, plus its transpose for the
// input-gradient pass.
struct KernelMap {
  std::size_t out_rows = 0;
  std::size_t in_rows = 0;
  std::size_t volume = 0;
  std::vector<std::int32_t> table;  // out_rows x volume, -1 = absent
  std::vector<std::int32_t> in_ptr;
  std::vector<std::int32_t> in_out;
  std::vector<std::int32_t> in_k;

  void build_transpose() {
    in_ptr.assign(in_rows + 1, 0);
    for (auto i : table)
      if (i >= 0) ++in_ptr[static_cast<std::size_t>(i) + 1];
    for (std::size_t i = 0; i < in_rows; ++i) in_ptr[i + 1] += in_ptr[i];
    in_out.resize(static_cast<std::size_t>(in_ptr[in_rows]));
    in_k.resize(in_out.size());
    std::vector<std::int32_t> fill(in_ptr.begin(), in_ptr.end() - 1);
    for (std::size_t o = 0; o < out_rows; ++o)
      for (std::size_t k = 0; k < volume; ++k) {
        const auto i = table[o * volume + k];
        if (i < 0) continue;
        const auto slot = static_cast<std::size_t>(fill[static_cast<std::size_t>(i)]++);
        in_out[slot] = static_cast<std::int32_t>(o);
        in_k[slot] = static_cast<std::int32_t>(k);
      }
  }
};

using KernelMapPtr = std::shared_ptr<const KernelMap>;

enum class MapKind { forward, transposed };

struct CacheEntry {
  std::weak_ptr<const CoordinateSet> in;
  std::weak_ptr<const CoordinateSet> out;
  const CoordinateSet* in_raw;
  const CoordinateSet* out_raw;
  int kernel_size;
  MapKind kind;
  KernelMapPtr map;
};

std::mutex g_cache_mutex;
std::vector<CacheEntry> g_cache;

KernelMapPtr build_map(const CoordsPtr& in, const CoordsPtr& out, int kernel_size, MapKind kind) {
  {
    std::lock_guard lock(g_cache_mutex);
    for (const auto& e : g_cache) {
      if (e.in_raw != in.get() || e.out_raw != out.get() || e.kernel_size != kernel_size || e.kind != kind) continue;
      auto a = e.in.lock();
      auto b = e.out.lock();
      if (a == in && b == out) return e.map;
    }
  }
  const auto offsets = kernel_offsets(kernel_size);
  auto map = std::make_shared<KernelMap>();
  map->out_rows = out->size();
  map->in_rows = in->size();
  map->volume = offsets.size();
  map->table.assign(map->out_rows * map->volume, -1);
  // Forward: o + off * S_in. Transposed: t - off * S_out.
  const int step = kind == MapKind::forward ? in->stride() : -out->stride();
  const auto& oc = out->coords();
  parallel_for(
      oc.size(),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t o = lo; o < hi; ++o)
          for (std::size_t k = 0; k < offsets.size(); ++k) {
            const Voxel v{oc[o].batch, oc[o].x + offsets[k][0] * step, oc[o].y + offsets[k][1] * step,
                          oc[o].z + offsets[k][2] * step};
            map->table[o * map->volume + k] = in->find(v);
          }
      },
      256);
  map->build_transpose();

  std::lock_guard lock(g_cache_mutex);
  std::erase_if(g_cache, [](const CacheEntry& e) { return e.in.expired() || e.out.expired(); });
  if (g_cache.size() > 64) g_cache.erase(g_cache.begin());
  g_cache.push_back({in, out, in.get(), out.get(), kernel_size, kind, map});
  return map;
}

void check_kernel(const char* op, Var kernel, std::size_t volume, std::size_t in_channels) {
  const Shape& ks = kernel.shape();
  if (ks.size() != 3) throw ShapeError(op, "rank", "kernel must be [K^3, C_in, C_out], got " + to_string(ks));
  if (ks[0] != volume)
    throw ShapeError(op, "kernel_volume", "expected " + std::to_string(volume) + " taps, got " + std::to_string(ks[0]));
  if (ks[1] != in_channels)
    throw ShapeError(op, "in_channels",
                     "kernel expects " + std::to_string(ks[1]) + " channels, input has " + std::to_string(in_channels));
}

// out[o] = sum_k x[table[o,k]] * W[k]
Var apply_kernel_map(Var features, Var kernel, const KernelMapPtr& map) {
  const std::size_t Ci = kernel.shape()[1];
  const std::size_t Co = kernel.shape()[2];
  const std::size_t V = map->volume;
  auto xv = features.value();
  auto wv = kernel.value();
  std::vector<double> out(map->out_rows * Co, 0.0);
  parallel_for(
      map->out_rows,
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t o = lo; o < hi; ++o) {
          double* y = &out[o * Co];
          for (std::size_t k = 0; k < V; ++k) {
            const auto i = map->table[o * V + k];
            if (i < 0) continue;
            const double* x = &xv[static_cast<std::size_t>(i) * Ci];
            const double* w = &wv[k * Ci * Co];
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double a = x[ci];
              if (a == 0.0) continue;
              const double* wr = w + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) y[co] += a * wr[co];
            }
          }
        }
      },
      64);
  return features.tape().record(
      {map->out_rows, Co}, std::move(out), {features, kernel},
      [features, kernel, map, Ci, Co, V](Tape& t, Var, std::span<const double> g) {
        auto xv = t.value(features);
        auto wv = t.value(kernel);
        if (auto gx = t.grad_sink(features); !gx.empty()) {
          parallel_for(
              map->in_rows,
              [&](std::size_t lo, std::size_t hi) {
                for (std::size_t i = lo; i < hi; ++i) {
                  double* gi = &gx[i * Ci];
                  for (auto e = map->in_ptr[i]; e < map->in_ptr[i + 1]; ++e) {
                    const auto o = static_cast<std::size_t>(map->in_out[static_cast<std::size_t>(e)]);
                    const auto k = static_cast<std::size_t>(map->in_k[static_cast<std::size_t>(e)]);
                    const double* go = &g[o * Co];
                    const double* w = &wv[k * Ci * Co];
                    for (std::size_t ci = 0; ci < Ci; ++ci) {
                      double acc = 0.0;
                      const double* wr = w + ci * Co;
                      for (std::size_t co = 0; co < Co; ++co) acc += wr[co] * go[co];
                      gi[ci] += acc;
                    }
                  }
                }
              },
              64);
        }
        if (auto gw = t.grad_sink(kernel); !gw.empty()) {
          parallel_for(V, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t k = lo; k < hi; ++k) {
              double* gk = &gw[k * Ci * Co];
              for (std::size_t o = 0; o < map->out_rows; ++o) {
                const auto i = map->table[o * V + k];
                if (i < 0) continue;
                const double* x = &xv[static_cast<std::size_t>(i) * Ci];
                const double* go = &g[o * Co];
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                  const double a = x[ci];
                  if (a == 0.0) continue;
                  double* gr = gk + ci * Co;
                  for (std::size_t co = 0; co < Co; ++co) gr[co] += a * go[co];
                }
              }
            }
          });
        }
      });
}

}  // namespace

// ---------------------------------------------------------------------------

std::uint64_t CoordinateMap::pack(const Voxel& v) {
  return (static_cast<std::uint64_t>(static_cast<std::uint16_t>(v.batch)) << 48) |
         (static_cast<std::uint64_t>(static_cast<std::uint16_t>(v.x + 32768)) << 32) |
         (static_cast<std::uint64_t>(static_cast<std::uint16_t>(v.y + 32768)) << 16) |
         static_cast<std::uint64_t>(static_cast<std::uint16_t>(v.z + 32768));
}

bool CoordinateMap::representable(const Voxel& v) {
  auto in16 = [](std::int32_t c) { return c >= -32768 && c <= 32766; };
  return v.batch >= 0 && v.batch < 65535 && in16(v.x) && in16(v.y) && in16(v.z);
}

CoordinateMap::CoordinateMap(std::span<const Voxel> coords) {
  std::size_t cap = 16;
  while (cap < 2 * coords.size()) cap <<= 1;
  keys_.assign(cap, kEmpty);
  rows_.assign(cap, -1);
  mask_ = cap - 1;
  for (std::size_t r = 0; r < coords.size(); ++r) {
    if (!representable(coords[r])) throw std::out_of_range("voxel coordinate out of range: " + describe(coords[r]));
    const auto key = pack(coords[r]);
    auto slot = mix64(key) & mask_;
    while (keys_[slot] != kEmpty) {
      if (keys_[slot] == key) throw std::invalid_argument("duplicate voxel coordinate " + describe(coords[r]));
      slot = (slot + 1) & mask_;
    }
    keys_[slot] = key;
    rows_[slot] = static_cast<std::int32_t>(r);
  }
}

std::int32_t CoordinateMap::find(const Voxel& v) const {
  if (keys_.empty() || !representable(v)) return -1;
  const auto key = pack(v);
  auto slot = mix64(key) & mask_;
  while (true) {
    const auto k = keys_[slot];
    if (k == key) return rows_[slot];
    if (k == kEmpty) return -1;
    slot = (slot + 1) & mask_;
  }
}

CoordinateSet::CoordinateSet(std::vector<Voxel> coords, int stride, std::int32_t batch_count)
    : coords_(std::move(coords)), stride_(stride), batch_count_(batch_count) {
  if (stride_ < 1) throw std::invalid_argument("tensor stride must be positive");
  if (!std::is_sorted(coords_.begin(), coords_.end()))
    throw std::invalid_argument("CoordinateSet requires sorted coordinates");
  auto seg = std::make_shared<Segments>();
  seg->count = batch_count_;
  seg->ids.reserve(coords_.size());
  for (const Voxel& v : coords_) {
    if (v.x % stride_ != 0 || v.y % stride_ != 0 || v.z % stride_ != 0)
      throw std::invalid_argument("coordinate " + describe(v) + " is not a multiple of tensor stride " +
                                  std::to_string(stride_));
    if (v.batch < 0 || v.batch >= batch_count_)
      throw std::out_of_range("batch index of " + describe(v) + " outside [0, " + std::to_string(batch_count_) + ")");
    seg->ids.push_back(v.batch);
  }
  segments_ = std::move(seg);
  index_ = CoordinateMap(coords_);
}

SparseVoxelTensor::SparseVoxelTensor(CoordsPtr coords, Var features) : coords_(std::move(coords)), features_(features) {
  if (!coords_) throw std::invalid_argument("SparseVoxelTensor: null coordinates");
  const Shape& s = features_.shape();
  if (s.size() != 2) throw ShapeError("SparseVoxelTensor", "rank", "features must be [N, C], got " + to_string(s));
  if (s[0] != coords_->size())
    throw ShapeError("SparseVoxelTensor", "rows",
                     std::to_string(s[0]) + " feature rows for " + std::to_string(coords_->size()) + " coordinates");
}

SparseVoxelTensor make_sparse(std::vector<Voxel> coords, Var features, int stride, std::int32_t batch_count) {
  if (features.shape().size() != 2 || features.shape()[0] != coords.size())
    throw ShapeError("make_sparse", "rows", "features " + to_string(features.shape()) + " for " +
                                                 std::to_string(coords.size()) + " coordinates");
  if (batch_count == 0)
    for (const Voxel& v : coords) batch_count = std::max(batch_count, v.batch + 1);
  std::vector<std::int32_t> order(coords.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    return coords[static_cast<std::size_t>(a)] < coords[static_cast<std::size_t>(b)];
  });
  const bool identity = std::is_sorted(coords.begin(), coords.end());
  std::vector<Voxel> sorted(coords.size());
  for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = coords[static_cast<std::size_t>(order[i])];
  auto set = std::make_shared<const CoordinateSet>(std::move(sorted), stride, std::max(batch_count, 1));
  if (identity) return {set, features};
  return {set, gather_rows(features, std::make_shared<const std::vector<std::int32_t>>(std::move(order)))};
}

SparseVoxelTensor make_sparse(Tape& tape, std::vector<Voxel> coords, std::vector<double> features,
                              std::size_t channels, int stride, std::int32_t batch_count) {
  Var f = tape.constant({coords.size(), channels}, std::move(features));
  return make_sparse(std::move(coords), f, stride, batch_count);
}

// ---------------------------------------------------------------------------

void QuantizationConfig::validate() const {
  if (!(step > 0.0) || !std::isfinite(step)) throw std::invalid_argument("quantization step must be positive");
}

SparseVoxelTensor quantize_batch(Tape& tape, std::span<const PointCloud* const> clouds, const QuantizationConfig& cfg) {
  cfg.validate();
  if (clouds.empty()) throw std::invalid_argument("empty point cloud");
  std::vector<Voxel> coords;
  for (std::size_t b = 0; b < clouds.size(); ++b) {
    const PointCloud& pc = *clouds[b];
    if (pc.empty()) throw std::invalid_argument("empty point cloud");
    const std::size_t first = coords.size();
    for (const Point3& p : pc) {
      Voxel v{static_cast<std::int32_t>(b), 0, 0, 0};
      std::int32_t* c[3] = {&v.x, &v.y, &v.z};
      for (int a = 0; a < 3; ++a) {
        const double q = std::floor(static_cast<double>(p[static_cast<std::size_t>(a)]) / cfg.step);
        if (!std::isfinite(q) || q < -32768.0 || q > 32766.0)
          throw std::out_of_range("point outside the representable voxel range for step " + std::to_string(cfg.step));
        *c[a] = static_cast<std::int32_t>(q);
      }
      coords.push_back(v);
    }
    std::sort(coords.begin() + static_cast<std::ptrdiff_t>(first), coords.end());
    coords.erase(std::unique(coords.begin() + static_cast<std::ptrdiff_t>(first), coords.end()), coords.end());
  }
  const std::size_t n = coords.size();
  auto set = std::make_shared<const CoordinateSet>(std::move(coords), 1, static_cast<std::int32_t>(clouds.size()));
  return {set, tape.constant({n, 1}, std::vector<double>(n, 1.0))};
}

SparseVoxelTensor quantize(Tape& tape, const PointCloud& points, const QuantizationConfig& cfg) {
  const PointCloud* one[] = {&points};
  return quantize_batch(tape, one, cfg);
}

// ---------------------------------------------------------------------------

std::vector<std::array<int, 3>> kernel_offsets(int kernel_size) {
  if (kernel_size < 1 || kernel_size > 5)
    throw std::invalid_argument("kernel size must be in [1, 5], got " + std::to_string(kernel_size));
  const int lo = kernel_size % 2 == 1 ? -(kernel_size - 1) / 2 : -(kernel_size / 2 - 1);
  std::vector<std::array<int, 3>> out;
  for (int dx = lo; dx < lo + kernel_size; ++dx)
    for (int dy = lo; dy < lo + kernel_size; ++dy)
      for (int dz = lo; dz < lo + kernel_size; ++dz) out.push_back({dx, dy, dz});
  return out;
}

CoordsPtr strided_coords(const CoordinateSet& in, int stride) {
  const std::int32_t S = in.stride() * stride;
  std::vector<Voxel> out;
  out.reserve(in.size());
  for (const Voxel& c : in.coords())
    out.push_back({c.batch, S * floor_div(c.x, S), S * floor_div(c.y, S), S * floor_div(c.z, S)});
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return std::make_shared<const CoordinateSet>(std::move(out), S, in.batch_count());
}

SparseVoxelTensor sparse_conv(const SparseVoxelTensor& x, Var kernel, int kernel_size, int stride) {
  if (stride != 1 && stride != 2)
    throw UnsupportedStrideError("sparse_conv: unsupported stride " + std::to_string(stride) + " (expected 1 or 2)");
  if (x.size() == 0) throw std::invalid_argument("sparse_conv: empty input");
  const auto offsets = kernel_offsets(kernel_size);
  check_kernel("sparse_conv", kernel, offsets.size(), x.channels());
  CoordsPtr out = stride == 1 ? x.coords_ptr() : strided_coords(x.coords(), stride);
  auto map = build_map(x.coords_ptr(), out, kernel_size, MapKind::forward);
  return {out, apply_kernel_map(x.features(), kernel, map)};
}

SparseVoxelTensor sparse_transposed_conv(const SparseVoxelTensor& x, Var kernel, int kernel_size, int stride,
                                         const CoordsPtr& targets) {
  if (stride != 1 && stride != 2)
    throw UnsupportedStrideError("sparse_transposed_conv: unsupported stride " + std::to_string(stride));
  if (!targets) throw std::invalid_argument("sparse_transposed_conv: null target coordinates");
  if (x.stride() % stride != 0)
    throw std::invalid_argument("sparse_transposed_conv: input stride " + std::to_string(x.stride()) +
                                " is not divisible by " + std::to_string(stride));
  const int out_stride = x.stride() / stride;
  for (const Voxel& t : targets->coords())
    if (t.x % out_stride != 0 || t.y % out_stride != 0 || t.z % out_stride != 0)
      throw std::invalid_argument("sparse_transposed_conv: target " + describe(t) + " is off the stride-" +
                                  std::to_string(out_stride) + " lattice");
  if (targets->stride() != out_stride)
    throw std::invalid_argument("sparse_transposed_conv: target set has stride " + std::to_string(targets->stride()) +
                                ", expected " + std::to_string(out_stride));
  if (targets->batch_count() != x.batch_count())
    throw std::invalid_argument("sparse_transposed_conv: batch count mismatch");
  const auto offsets = kernel_offsets(kernel_size);
  check_kernel("sparse_transposed_conv", kernel, offsets.size(), x.channels());
  auto map = build_map(x.coords_ptr(), targets, kernel_size, MapKind::transposed);
  return {targets, apply_kernel_map(x.features(), kernel, map)};
}

SparseVoxelTensor coordinate_aligned_add(const SparseVoxelTensor& a, const SparseVoxelTensor& b) {
  if (a.stride() != b.stride())
    throw std::invalid_argument("coordinate_aligned_add: tensor stride mismatch (" + std::to_string(a.stride()) +
                                " vs " + std::to_string(b.stride()) + ")");
  if (a.channels() != b.channels())
    throw ShapeError("coordinate_aligned_add", "channels",
                     std::to_string(a.channels()) + " vs " + std::to_string(b.channels()));
  if (a.batch_count() != b.batch_count()) throw std::invalid_argument("coordinate_aligned_add: batch count mismatch");
  if (a.coords_ptr() == b.coords_ptr()) return a.with_features(add(a.features(), b.features()));

  // Merge two sorted coordinate lists.
  const auto& ca = a.coords().coords();
  const auto& cb = b.coords().coords();
  std::vector<Voxel> merged;
  std::vector<std::int32_t> from_a, from_b;
  std::size_t i = 0, j = 0;
  while (i < ca.size() || j < cb.size()) {
    if (j == cb.size() || (i < ca.size() && ca[i] < cb[j])) {
      merged.push_back(ca[i]);
      from_a.push_back(static_cast<std::int32_t>(i++));
      from_b.push_back(-1);
    } else if (i == ca.size() || cb[j] < ca[i]) {
      merged.push_back(cb[j]);
      from_a.push_back(-1);
      from_b.push_back(static_cast<std::int32_t>(j++));
    } else {
      merged.push_back(ca[i]);
      from_a.push_back(static_cast<std::int32_t>(i++));
      from_b.push_back(static_cast<std::int32_t>(j++));
    }
  }
  const std::size_t C = a.channels();
  const std::size_t n = merged.size();
  auto av = a.features().value();
  auto bv = b.features().value();
  std::vector<double> out(n * C, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    if (from_a[r] >= 0)
      for (std::size_t c = 0; c < C; ++c) out[r * C + c] += av[static_cast<std::size_t>(from_a[r]) * C + c];
    if (from_b[r] >= 0)
      for (std::size_t c = 0; c < C; ++c) out[r * C + c] += bv[static_cast<std::size_t>(from_b[r]) * C + c];
  }
  auto set = std::make_shared<const CoordinateSet>(std::move(merged), a.stride(), a.batch_count());
  Var fa = a.features(), fb = b.features();
  Var f = a.features().tape().record(
      {n, C}, std::move(out), {fa, fb},
      [fa, fb, C, from_a = std::move(from_a), from_b = std::move(from_b)](Tape& t, Var, std::span<const double> g) {
        auto ga = t.grad_sink(fa);
        auto gb = t.grad_sink(fb);
        for (std::size_t r = 0; r < from_a.size(); ++r) {
          if (!ga.empty() && from_a[r] >= 0)
            for (std::size_t c = 0; c < C; ++c) ga[static_cast<std::size_t>(from_a[r]) * C + c] += g[r * C + c];
          if (!gb.empty() && from_b[r] >= 0)
            for (std::size_t c = 0; c < C; ++c) gb[static_cast<std::size_t>(from_b[r]) * C + c] += g[r * C + c];
        }
      });
  return {set, f};
}

SparseVoxelTensor add_bias(const SparseVoxelTensor& x, Var bias) {
  const std::size_t C = x.channels();
  if (bias.shape().size() != 1 || bias.shape()[0] != C)
    throw ShapeError("add_bias", "channels", "bias " + to_string(bias.shape()) + " for " + std::to_string(C) + " channels");
  Var f = x.features();
  auto fv = f.value();
  auto bv = bias.value();
  std::vector<double> out(fv.size());
  for (std::size_t i = 0; i < fv.size(); ++i) out[i] = fv[i] + bv[i % C];
  Var y = f.tape().record(f.shape(), std::move(out), {f, bias}, [f, bias, C](Tape& t, Var, std::span<const double> g) {
    if (auto gf = t.grad_sink(f); !gf.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gf[i] += g[i];
    if (auto gb = t.grad_sink(bias); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % C] += g[i];
  });
  return x.with_features(y);
}

// ---------------------------------------------------------------------------

std::array<std::size_t, 3> Extent::dims() const {
  std::array<std::size_t, 3> d{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (hi[a] < lo[a]) throw std::invalid_argument("extent is empty on axis " + std::to_string(a));
    d[a] = static_cast<std::size_t>(hi[a] - lo[a] + 1);
  }
  return d;
}

DenseGrid densify(const SparseVoxelTensor& x, const Extent& extent, std::int32_t batch) {
  const auto d = extent.dims();
  const std::size_t C = x.channels();
  DenseGrid grid{{C, d[0], d[1], d[2]}, std::vector<double>(C * d[0] * d[1] * d[2], 0.0)};
  auto fv = x.features().value();
  const auto& coords = x.coords().coords();
  for (std::size_t r = 0; r < coords.size(); ++r) {
    const Voxel& v = coords[r];
    if (v.batch != batch) continue;
    const std::array<int, 3> p{v.x, v.y, v.z};
    for (std::size_t a = 0; a < 3; ++a)
      if (p[a] < extent.lo[a] || p[a] > extent.hi[a])
        throw std::out_of_range("densify: coordinate " + describe(v) + " outside extent");
    for (std::size_t c = 0; c < C; ++c)
      grid.at(c, static_cast<std::size_t>(v.x - extent.lo[0]), static_cast<std::size_t>(v.y - extent.lo[1]),
              static_cast<std::size_t>(v.z - extent.lo[2])) = fv[r * C + c];
  }
  return grid;
}

SparseVoxelTensor sparsify(Tape& tape, const DenseGrid& grid, const Extent& extent, int stride) {
  if (grid.shape.size() != 4) throw ShapeError("sparsify", "rank", "grid must be [C,X,Y,Z]");
  const std::size_t C = grid.shape[0];
  std::vector<Voxel> coords;
  std::vector<double> feats;
  for (std::size_t x = 0; x < grid.shape[1]; ++x)
    for (std::size_t y = 0; y < grid.shape[2]; ++y)
      for (std::size_t z = 0; z < grid.shape[3]; ++z) {
        bool any = false;
        for (std::size_t c = 0; c < C; ++c) any = any || grid.at(c, x, y, z) != 0.0;
        if (!any) continue;
        coords.push_back({0, extent.lo[0] + static_cast<int>(x), extent.lo[1] + static_cast<int>(y),
                          extent.lo[2] + static_cast<int>(z)});
        for (std::size_t c = 0; c < C; ++c) feats.push_back(grid.at(c, x, y, z));
      }
  return make_sparse(tape, std::move(coords), std::move(feats), C, stride, 1);
}

}  // namespace fuseloc

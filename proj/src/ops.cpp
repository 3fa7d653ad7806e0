#include "fuseloc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fuseloc/parallel.hpp"

namespace fuseloc {

namespace {

void require_same_shape(const char* op, Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) throw ShapeError(op, "rank", to_string(sa) + " vs " + to_string(sb));
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (sa[i] != sb[i]) throw ShapeError(op, "axis " + std::to_string(i), to_string(sa) + " vs " + to_string(sb));
}

void require_rank(const char* op, Var x, std::size_t rank, const char* what) {
  if (x.shape().size() != rank)
    throw ShapeError(op, "rank",
                     std::string(what) + " must have rank " + std::to_string(rank) + ", got " + to_string(x.shape()));
}

void check_segments(const char* op, Var x, const SegmentsPtr& seg) {
  require_rank(op, x, 2, "input");
  if (!seg || seg->ids.size() != x.shape()[0])
    throw ShapeError(op, "rows", "segment map size does not match " + to_string(x.shape()));
  for (auto id : seg->ids)
    if (id < 0 || id >= seg->count) throw std::out_of_range(std::string(op) + ": segment id out of range");
}

std::vector<double> segment_sizes(const Segments& seg) {
  std::vector<double> n(static_cast<std::size_t>(seg.count), 0.0);
  for (auto id : seg.ids) n[static_cast<std::size_t>(id)] += 1.0;
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise and reductions

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape().record(a.shape(), std::move(out), {a, b}, [a, b](Tape& t, Var, std::span<const double> g) {
    if (auto ga = t.grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = t.grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape().record(a.shape(), std::move(out), {a, b}, [a, b](Tape& t, Var, std::span<const double> g) {
    if (auto ga = t.grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = t.grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape().record(a.shape(), std::move(out), {a, b}, [a, b](Tape& t, Var, std::span<const double> g) {
    auto av = t.value(a);
    auto bv = t.value(b);
    if (auto ga = t.grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (auto gb = t.grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

Var scale(Var a, double s) {
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.tape().record(a.shape(), std::move(out), {a}, [a, s](Tape& t, Var, std::span<const double> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  return a.tape().record({1}, {acc}, {a}, [a](Tape& t, Var, std::span<const double> g) {
    for (auto& x : t.grad_sink(a)) x += g[0];
  });
}

Var mean(Var a) {
  if (a.size() == 0) throw ShapeError("mean", "all", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var relu(Var x) {
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return x.tape().record(x.shape(), std::move(out), {x}, [x](Tape& t, Var, std::span<const double> g) {
    auto xv = t.value(x);
    auto gx = t.grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

Var sigmoid(Var x) {
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return x.tape().record(x.shape(), std::move(out), {x}, [x](Tape& t, Var self, std::span<const double> g) {
    auto y = t.value(self);
    auto gx = t.grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var pow(Var x, double p) {
  auto xv = x.value();
  const bool integral = std::floor(p) == p;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (xv[i] < 0.0 && !integral)
      throw NumericError("pow: negative base " + std::to_string(xv[i]) + " with non-integer exponent " +
                         std::to_string(p) + "; clamp the input first");
    out[i] = std::pow(xv[i], p);
  }
  return x.tape().record(x.shape(), std::move(out), {x}, [x, p](Tape& t, Var, std::span<const double> g) {
    auto xv = t.value(x);
    auto gx = t.grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * p * std::pow(xv[i], p - 1.0);
  });
}

Var l2_normalize(Var x, double eps) {
  const Shape& s = x.shape();
  if (s.size() != 1 && s.size() != 2) throw ShapeError("l2_normalize", "rank", "expected rank 1 or 2, got " + to_string(s));
  const std::size_t rows = s.size() == 1 ? 1 : s[0];
  const std::size_t cols = s.back();
  auto xv = x.value();
  std::vector<double> out(xv.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += xv[r * cols + c] * xv[r * cols + c];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] / norms[r];
  }
  return x.tape().record(s, std::move(out), {x},
                         [x, rows, cols, eps, norms = std::move(norms)](Tape& t, Var self, std::span<const double> g) {
                           auto y = t.value(self);
                           auto gx = t.grad_sink(x);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* yr = &y[r * cols];
                             const double* gr = &g[r * cols];
                             if (norms[r] <= eps) {
                               for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gr[c] / norms[r];
                               continue;
                             }
                             double dot = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
                             for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += (gr[c] - yr[c] * dot) / norms[r];
                           }
                         });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat", "axis", "axis out of range for " + to_string(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat", "rank", to_string(s) + " vs " + to_string(s0));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d])
        throw ShapeError("concat", "axis " + std::to_string(d), to_string(s) + " vs " + to_string(s0));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  const std::size_t out_row = out_shape[axis] * inner;

  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.shape()[axis] * inner;
    auto pv = p.value();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(&pv[o * row], row, &out[o * out_row + off]);
    off += row;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(
      out_shape, std::move(out), inputs,
      [inputs, offsets, outer, inner, out_row, axis](Tape& t, Var, std::span<const double> g) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          auto gp = t.grad_sink(inputs[k]);
          if (gp.empty()) continue;
          const std::size_t row = t.shape(inputs[k])[axis] * inner;
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < row; ++j) gp[o * row + j] += g[o * out_row + offsets[k] + j];
        }
      });
}

Var concat_channels(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat(parts, a.shape().size() == 1 ? 0 : 1);
}

Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape", "all", to_string(x.shape()) + " cannot become " + to_string(shape));
  std::vector<double> out(x.value().begin(), x.value().end());
  return x.tape().record(std::move(shape), std::move(out), {x}, [x](Tape& t, Var, std::span<const double> g) {
    auto gx = t.grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution and linear layers

Var conv2d(Var input, Var kernel, Var bias, int stride, int padding) {
  const bool batched = input.shape().size() == 4;
  if (!batched && input.shape().size() != 3)
    throw ShapeError("conv2d", "rank", "input must be [C,H,W] or [N,C,H,W], got " + to_string(input.shape()));
  require_rank("conv2d", kernel, 4, "kernel");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  const std::size_t N = batched ? is[0] : 1;
  const std::size_t C = is[batched ? 1 : 0];
  const long H = static_cast<long>(is[batched ? 2 : 1]);
  const long W = static_cast<long>(is[batched ? 3 : 2]);
  const std::size_t O = ks[0];
  if (ks[1] != C)
    throw ShapeError("conv2d", "in_channels",
                     "kernel expects " + std::to_string(ks[1]) + " channels, input has " + std::to_string(C));
  const long KH = static_cast<long>(ks[2]);
  const long KW = static_cast<long>(ks[3]);
  if (H + 2 * padding < KH) throw ShapeError("conv2d", "height", "padded input smaller than kernel");
  if (W + 2 * padding < KW) throw ShapeError("conv2d", "width", "padded input smaller than kernel");
  if (bias.valid() && (bias.shape().size() != 1 || bias.shape()[0] != O))
    throw ShapeError("conv2d", "out_channels", "bias shape " + to_string(bias.shape()));
  const long OH = (H + 2 * padding - KH) / stride + 1;
  const long OW = (W + 2 * padding - KW) / stride + 1;

  auto xv = input.value();
  auto kv = kernel.value();
  std::vector<double> out(N * O * static_cast<std::size_t>(OH * OW), 0.0);
  std::span<const double> bv;
  if (bias.valid()) bv = bias.value();

  parallel_for(N * O, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t no = lo; no < hi; ++no) {
      const std::size_t n = no / O, o = no % O;
      double* y = &out[no * static_cast<std::size_t>(OH * OW)];
      if (!bv.empty()) std::fill(y, y + OH * OW, bv[o]);
      for (std::size_t c = 0; c < C; ++c) {
        const double* xc = &xv[(n * C + c) * static_cast<std::size_t>(H * W)];
        for (long ky = 0; ky < KH; ++ky)
          for (long kx = 0; kx < KW; ++kx) {
            const double w = kv[((o * C + c) * KH + ky) * KW + kx];
            for (long oy = 0; oy < OH; ++oy) {
              const long iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= H) continue;
              const double* xr = xc + iy * W;
              double* yr = y + oy * OW;
              for (long ox = 0; ox < OW; ++ox) {
                const long ix = ox * stride - padding + kx;
                if (ix < 0 || ix >= W) continue;
                yr[ox] += w * xr[ix];
              }
            }
          }
      }
    }
  });

  Shape out_shape = batched ? Shape{N, O, static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)}
                            : Shape{O, static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)};
  return input.tape().record(
      std::move(out_shape), std::move(out), {input, kernel, bias},
      [=](Tape& t, Var, std::span<const double> g) {
        auto xv = t.value(input);
        auto kv = t.value(kernel);
        const std::size_t plane = static_cast<std::size_t>(OH * OW);
        if (auto gx = t.grad_sink(input); !gx.empty()) {
          parallel_for(N * C, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t nc = lo; nc < hi; ++nc) {
              const std::size_t n = nc / C, c = nc % C;
              double* gxc = &gx[nc * static_cast<std::size_t>(H * W)];
              for (std::size_t o = 0; o < O; ++o) {
                const double* gy = &g[(n * O + o) * plane];
                for (long ky = 0; ky < KH; ++ky)
                  for (long kx = 0; kx < KW; ++kx) {
                    const double w = kv[((o * C + c) * KH + ky) * KW + kx];
                    for (long oy = 0; oy < OH; ++oy) {
                      const long iy = oy * stride - padding + ky;
                      if (iy < 0 || iy >= H) continue;
                      for (long ox = 0; ox < OW; ++ox) {
                        const long ix = ox * stride - padding + kx;
                        if (ix < 0 || ix >= W) continue;
                        gxc[iy * W + ix] += w * gy[oy * OW + ox];
                      }
                    }
                  }
              }
            }
          });
        }
        if (auto gk = t.grad_sink(kernel); !gk.empty()) {
          parallel_for(O, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t o = lo; o < hi; ++o)
              for (std::size_t c = 0; c < C; ++c)
                for (long ky = 0; ky < KH; ++ky)
                  for (long kx = 0; kx < KW; ++kx) {
                    double acc = 0.0;
                    for (std::size_t n = 0; n < N; ++n) {
                      const double* xc = &xv[(n * C + c) * static_cast<std::size_t>(H * W)];
                      const double* gy = &g[(n * O + o) * plane];
                      for (long oy = 0; oy < OH; ++oy) {
                        const long iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (long ox = 0; ox < OW; ++ox) {
                          const long ix = ox * stride - padding + kx;
                          if (ix < 0 || ix >= W) continue;
                          acc += gy[oy * OW + ox] * xc[iy * W + ix];
                        }
                      }
                    }
                    gk[((o * C + c) * KH + ky) * KW + kx] += acc;
                  }
          });
        }
        if (bias.valid()) {
          if (auto gb = t.grad_sink(bias); !gb.empty())
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t o = 0; o < O; ++o) {
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) acc += g[(n * O + o) * plane + i];
                gb[o] += acc;
              }
        }
      });
}

Var linear(Var x, Var w, Var b) {
  require_rank("linear", x, 2, "input");
  require_rank("linear", w, 2, "weight");
  const std::size_t B = x.shape()[0], I = x.shape()[1], O = w.shape()[1];
  if (w.shape()[0] != I)
    throw ShapeError("linear", "in_features", "weight " + to_string(w.shape()) + " vs input " + to_string(x.shape()));
  if (b.valid() && (b.shape().size() != 1 || b.shape()[0] != O))
    throw ShapeError("linear", "out_features", "bias " + to_string(b.shape()));
  auto xv = x.value();
  auto wv = w.value();
  std::vector<double> out(B * O, 0.0);
  for (std::size_t r = 0; r < B; ++r) {
    double* y = &out[r * O];
    if (b.valid()) std::copy_n(b.value().begin(), O, y);
    for (std::size_t i = 0; i < I; ++i) {
      const double xi = xv[r * I + i];
      for (std::size_t o = 0; o < O; ++o) y[o] += xi * wv[i * O + o];
    }
  }
  return x.tape().record({B, O}, std::move(out), {x, w, b}, [=](Tape& t, Var, std::span<const double> g) {
    auto xv = t.value(x);
    auto wv = t.value(w);
    if (auto gx = t.grad_sink(x); !gx.empty())
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < I; ++i) {
          double acc = 0.0;
          for (std::size_t o = 0; o < O; ++o) acc += g[r * O + o] * wv[i * O + o];
          gx[r * I + i] += acc;
        }
    if (auto gw = t.grad_sink(w); !gw.empty())
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < I; ++i)
          for (std::size_t o = 0; o < O; ++o) gw[i * O + o] += xv[r * I + i] * g[r * O + o];
    if (b.valid())
      if (auto gb = t.grad_sink(b); !gb.empty())
        for (std::size_t r = 0; r < B; ++r)
          for (std::size_t o = 0; o < O; ++o) gb[o] += g[r * O + o];
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

Var batch_norm(Var x, Var gamma, Var beta, Parameter& running_mean, Parameter& running_var, bool training,
               double momentum, double eps) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("batch_norm", "rank", "expected [N,C,...], got " + to_string(s));
  const std::size_t N = s[0], C = s[1];
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
  const std::size_t M = N * inner;
  if (gamma.size() != C || beta.size() != C)
    throw ShapeError("batch_norm", "channels", "affine parameters do not match " + std::to_string(C) + " channels");
  if (running_mean.size() != C || running_var.size() != C)
    throw ShapeError("batch_norm", "channels", "running statistics do not match " + std::to_string(C) + " channels");
  if (training && M < 2)
    throw ShapeError("batch_norm", "batch", "training mode needs more than one value per channel, got " + to_string(s));

  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  std::vector<double> mu(C), invstd(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) acc += xv[(n * C + c) * inner + i];
      mu[c] = acc / static_cast<double>(M);
      double var = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = xv[(n * C + c) * inner + i] - mu[c];
          var += d * d;
        }
      var /= static_cast<double>(M);
      invstd[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = var * static_cast<double>(M) / static_cast<double>(M - 1);
      Tape& t = x.tape();
      running_mean.value[c] = t.round((1.0 - momentum) * running_mean.value[c] + momentum * mu[c]);
      running_var.value[c] = t.round((1.0 - momentum) * running_var.value[c] + momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean.value[c];
      invstd[c] = 1.0 / std::sqrt(running_var.value[c] + eps);
    }
  }
  std::vector<double> out(xv.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = (n * C + c) * inner + i;
        out[k] = gv[c] * (xv[k] - mu[c]) * invstd[c] + bv[c];
      }
  return x.tape().record(s, std::move(out), {x, gamma, beta}, [=](Tape& t, Var, std::span<const double> g) {
    auto xv = t.value(x);
    auto gv = t.value(gamma);
    std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t k = (n * C + c) * inner + i;
          const double xhat = (xv[k] - mu[c]) * invstd[c];
          sum_g[c] += g[k];
          sum_gx[c] += g[k] * xhat;
        }
    if (auto gg = t.grad_sink(gamma); !gg.empty())
      for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
    if (auto gb = t.grad_sink(beta); !gb.empty())
      for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
    if (auto gx = t.grad_sink(x); !gx.empty()) {
      const double m = static_cast<double>(M);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t k = (n * C + c) * inner + i;
            if (training) {
              const double xhat = (xv[k] - mu[c]) * invstd[c];
              gx[k] += gv[c] * invstd[c] * (g[k] - sum_g[c] / m - xhat * sum_gx[c] / m);
            } else {
              gx[k] += gv[c] * invstd[c] * g[k];
            }
          }
    }
  });
}

// ---------------------------------------------------------------------------
// Segmented row ops

std::shared_ptr<const Segments> Segments::single(std::size_t rows) {
  auto s = std::make_shared<Segments>();
  s->ids.assign(rows, 0);
  s->count = 1;
  return s;
}

SegmentsPtr nchw_segments(const Shape& s) {
  if (s.size() != 4) throw ShapeError("nchw_segments", "rank", "expected [N,C,H,W], got " + to_string(s));
  auto seg = std::make_shared<Segments>();
  seg->count = static_cast<std::int32_t>(s[0]);
  seg->ids.reserve(s[0] * s[2] * s[3]);
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t i = 0; i < s[2] * s[3]; ++i) seg->ids.push_back(static_cast<std::int32_t>(n));
  return seg;
}

Var nchw_to_rows(Var x) {
  require_rank("nchw_to_rows", x, 4, "input");
  const Shape& s = x.shape();
  const std::size_t N = s[0], C = s[1], P = s[2] * s[3];
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) out[(n * P + p) * C + c] = xv[(n * C + c) * P + p];
  return x.tape().record({N * P, C}, std::move(out), {x}, [x, N, C, P](Tape& t, Var, std::span<const double> g) {
    auto gx = t.grad_sink(x);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) gx[(n * C + c) * P + p] += g[(n * P + p) * C + c];
  });
}

Var gather_rows(Var x, std::shared_ptr<const std::vector<std::int32_t>> rows) {
  require_rank("gather_rows", x, 2, "input");
  const std::size_t R = x.shape()[0], C = x.shape()[1];
  auto xv = x.value();
  std::vector<double> out(rows->size() * C);
  for (std::size_t i = 0; i < rows->size(); ++i) {
    const auto r = static_cast<std::size_t>((*rows)[i]);
    if (r >= R) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(&xv[r * C], C, &out[i * C]);
  }
  return x.tape().record({rows->size(), C}, std::move(out), {x}, [x, rows, C](Tape& t, Var, std::span<const double> g) {
    auto gx = t.grad_sink(x);
    for (std::size_t i = 0; i < rows->size(); ++i) {
      const auto r = static_cast<std::size_t>((*rows)[i]);
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g[i * C + c];
    }
  });
}

Var segment_mean(Var x, const SegmentsPtr& seg) {
  check_segments("segment_mean", x, seg);
  const std::size_t C = x.shape()[1], S = static_cast<std::size_t>(seg->count);
  const auto counts = segment_sizes(*seg);
  for (double n : counts)
    if (n == 0.0) throw std::invalid_argument("cannot pool empty map");
  auto xv = x.value();
  std::vector<double> out(S * C, 0.0);
  for (std::size_t i = 0; i < seg->ids.size(); ++i) {
    const auto s = static_cast<std::size_t>(seg->ids[i]);
    for (std::size_t c = 0; c < C; ++c) out[s * C + c] += xv[i * C + c];
  }
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t c = 0; c < C; ++c) out[s * C + c] /= counts[s];
  return x.tape().record({S, C}, std::move(out), {x}, [x, seg, C, counts](Tape& t, Var, std::span<const double> g) {
    auto gx = t.grad_sink(x);
    for (std::size_t i = 0; i < seg->ids.size(); ++i) {
      const auto s = static_cast<std::size_t>(seg->ids[i]);
      for (std::size_t c = 0; c < C; ++c) gx[i * C + c] += g[s * C + c] / counts[s];
    }
  });
}

Var segment_max(Var x, const SegmentsPtr& seg) {
  check_segments("segment_max", x, seg);
  const std::size_t C = x.shape()[1], S = static_cast<std::size_t>(seg->count);
  auto xv = x.value();
  std::vector<double> out(S * C, -std::numeric_limits<double>::infinity());
  std::vector<std::int64_t> arg(S * C, -1);
  for (std::size_t i = 0; i < seg->ids.size(); ++i) {
    const auto s = static_cast<std::size_t>(seg->ids[i]);
    for (std::size_t c = 0; c < C; ++c)
      if (arg[s * C + c] < 0 || xv[i * C + c] > out[s * C + c]) {
        out[s * C + c] = xv[i * C + c];
        arg[s * C + c] = static_cast<std::int64_t>(i);
      }
  }
  for (auto a : arg)
    if (a < 0) throw std::invalid_argument("cannot pool empty map");
  return x.tape().record({S, C}, std::move(out), {x}, [x, C, arg = std::move(arg)](Tape& t, Var, std::span<const double> g) {
    auto gx = t.grad_sink(x);
    for (std::size_t k = 0; k < arg.size(); ++k) gx[static_cast<std::size_t>(arg[k]) * C + k % C] += g[k];
  });
}

Var segment_gem(Var x, const SegmentsPtr& seg, Var p, double eps) {
  check_segments("segment_gem", x, seg);
  if (p.size() != 1) throw ShapeError("segment_gem", "p", "exponent must be a single value");
  if (!(eps > 0.0)) throw std::invalid_argument("segment_gem: eps must be positive");
  const std::size_t C = x.shape()[1], S = static_cast<std::size_t>(seg->count);
  const auto counts = segment_sizes(*seg);
  for (double n : counts)
    if (n == 0.0) throw std::invalid_argument("cannot pool empty map");
  const double pe = p.item();
  if (!(pe > 0.0) || !std::isfinite(pe)) throw NumericError("segment_gem: exponent must be positive and finite");
  auto xv = x.value();
  // m[s,c] = mean of clamp(x)^p. The root is kept inside the power-mean
  // bounds (mean for p >= 1, else min, up to max) so rounding never puts it
  // outside them; the bounds are exact, so this only moves the last ulp.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> m(S * C, 0.0), out(S * C), lin(S * C, 0.0), lo(S * C, inf), hi(S * C, -inf);
  for (std::size_t i = 0; i < seg->ids.size(); ++i) {
    const auto s = static_cast<std::size_t>(seg->ids[i]);
    for (std::size_t c = 0; c < C; ++c) {
      const double z = std::max(xv[i * C + c], eps);
      const std::size_t k = s * C + c;
      m[k] += std::pow(z, pe);
      lin[k] += z;
      lo[k] = std::min(lo[k], z);
      hi[k] = std::max(hi[k], z);
    }
  }
  for (std::size_t k = 0; k < m.size(); ++k) {
    m[k] /= counts[k / C];
    const double floor = pe >= 1.0 ? lin[k] / counts[k / C] : lo[k];
    out[k] = std::clamp(std::pow(m[k], 1.0 / pe), floor, hi[k]);
  }
  return x.tape().record(
      {S, C}, std::move(out), {x, p},
      [x, p, seg, C, S, eps, pe, counts, m = std::move(m)](Tape& t, Var self, std::span<const double> g) {
        auto xv = t.value(x);
        auto y = t.value(self);
        if (auto gx = t.grad_sink(x); !gx.empty()) {
          for (std::size_t i = 0; i < seg->ids.size(); ++i) {
            const auto s = static_cast<std::size_t>(seg->ids[i]);
            for (std::size_t c = 0; c < C; ++c) {
              const double v = xv[i * C + c];
              if (v <= eps) continue;
              const std::size_t k = s * C + c;
              gx[i * C + c] += g[k] * (y[k] / m[k]) * std::pow(v, pe - 1.0) / counts[s];
            }
          }
        }
        if (auto gp = t.grad_sink(p); !gp.empty()) {
          // dm/dp accumulated per output cell.
          std::vector<double> dm(S * C, 0.0);
          for (std::size_t i = 0; i < seg->ids.size(); ++i) {
            const auto s = static_cast<std::size_t>(seg->ids[i]);
            for (std::size_t c = 0; c < C; ++c) {
              const double z = std::max(xv[i * C + c], eps);
              dm[s * C + c] += std::pow(z, pe) * std::log(z);
            }
          }
          double acc = 0.0;
          for (std::size_t k = 0; k < dm.size(); ++k) {
            const double dmk = dm[k] / counts[k / C];
            const double dy = y[k] * (-std::log(m[k]) / (pe * pe) + dmk / (pe * m[k]));
            acc += g[k] * dy;
          }
          gp[0] += acc;
        }
      });
}

Var segment_scale(Var x, const SegmentsPtr& seg, Var s) {
  check_segments("segment_scale", x, seg);
  const std::size_t C = x.shape()[1];
  const Shape& ss = s.shape();
  if (ss.size() != 2 || ss[0] != static_cast<std::size_t>(seg->count) || ss[1] != C)
    throw ShapeError("segment_scale", "scale", "expected [" + std::to_string(seg->count) + "," + std::to_string(C) +
                                                    "], got " + to_string(ss));
  auto xv = x.value();
  auto sv = s.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < seg->ids.size(); ++i) {
    const auto sg = static_cast<std::size_t>(seg->ids[i]);
    for (std::size_t c = 0; c < C; ++c) out[i * C + c] = xv[i * C + c] * sv[sg * C + c];
  }
  return x.tape().record(x.shape(), std::move(out), {x, s}, [x, s, seg, C](Tape& t, Var, std::span<const double> g) {
    auto xv = t.value(x);
    auto sv = t.value(s);
    auto gx = t.grad_sink(x);
    auto gs = t.grad_sink(s);
    for (std::size_t i = 0; i < seg->ids.size(); ++i) {
      const auto sg = static_cast<std::size_t>(seg->ids[i]);
      for (std::size_t c = 0; c < C; ++c) {
        if (!gx.empty()) gx[i * C + c] += g[i * C + c] * sv[sg * C + c];
        if (!gs.empty()) gs[sg * C + c] += g[i * C + c] * xv[i * C + c];
      }
    }
  });
}

Var channel_conv1d(Var gvar, Var w) {
  require_rank("channel_conv1d", gvar, 2, "input");
  require_rank("channel_conv1d", w, 1, "kernel");
  const std::size_t B = gvar.shape()[0], C = gvar.shape()[1], K = w.shape()[0];
  if (K % 2 == 0) throw ShapeError("channel_conv1d", "kernel", "kernel size must be odd, got " + std::to_string(K));
  const long r = static_cast<long>(K / 2);
  auto gv = gvar.value();
  auto wv = w.value();
  std::vector<double> out(B * C, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (long c = 0; c < static_cast<long>(C); ++c)
      for (long j = 0; j < static_cast<long>(K); ++j) {
        const long src = c + j - r;
        if (src < 0 || src >= static_cast<long>(C)) continue;
        out[b * C + static_cast<std::size_t>(c)] += wv[static_cast<std::size_t>(j)] * gv[b * C + static_cast<std::size_t>(src)];
      }
  return gvar.tape().record({B, C}, std::move(out), {gvar, w}, [gvar, w, B, C, K, r](Tape& t, Var, std::span<const double> g) {
    auto gv = t.value(gvar);
    auto wv = t.value(w);
    auto gin = t.grad_sink(gvar);
    auto gw = t.grad_sink(w);
    for (std::size_t b = 0; b < B; ++b)
      for (long c = 0; c < static_cast<long>(C); ++c)
        for (long j = 0; j < static_cast<long>(K); ++j) {
          const long src = c + j - r;
          if (src < 0 || src >= static_cast<long>(C)) continue;
          const double go = g[b * C + static_cast<std::size_t>(c)];
          if (!gin.empty()) gin[b * C + static_cast<std::size_t>(src)] += wv[static_cast<std::size_t>(j)] * go;
          if (!gw.empty()) gw[static_cast<std::size_t>(j)] += gv[b * C + static_cast<std::size_t>(src)] * go;
        }
  });
}

}  // namespace fuseloc

#pragma once

// Differentiable dense operators recorded on a Tape.

#include <cstdint>
#include <memory>
#include <vector>

#include "fuseloc/tensor.hpp"

namespace fuseloc {

// Elementwise, same-shape operands.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);

Var sum(Var a);
Var mean(Var a);

Var relu(Var x);
Var sigmoid(Var x);
/// x^p elementwise. Throws NumericError for a negative base with non-integer p.
Var pow(Var x, double p);

/// Unit-length rows: rank 1 normalizes the vector, rank 2 each row.
Var l2_normalize(Var x, double eps = 1e-12);

/// Concatenates along `axis`; all other axes must agree.
Var concat(std::span<const Var> parts, std::size_t axis);
Var concat_channels(Var a, Var b);

Var reshape(Var x, Shape shape);

/// 2D cross-correlation. input [C,H,W] or [N,C,H,W]; kernel [O,C,kh,kw];
/// bias [O] or an unbound Var.
Var conv2d(Var input, Var kernel, Var bias, int stride, int padding);

/// x [B,in] times w [in,out] plus optional b [out].
Var linear(Var x, Var w, Var b);

/// Per-channel normalization. x is [N,C] or [N,C,H,W]; statistics are taken
/// over every axis except the channel axis. In training mode the running
/// buffers are updated with `momentum`; in eval mode they are used instead of
/// the batch statistics.
Var batch_norm(Var x, Var gamma, Var beta, Parameter& running_mean, Parameter& running_var,
               bool training, double momentum = 0.1, double eps = 1e-5);

/// Row grouping used by the pooling and attention ops: row i belongs to
/// segment ids[i] in [0, count).
struct Segments {
  std::vector<std::int32_t> ids;
  std::int32_t count = 0;

  static std::shared_ptr<const Segments> single(std::size_t rows);
};
using SegmentsPtr = std::shared_ptr<const Segments>;

/// [N,C,H,W] -> [N*H*W, C] (rows ordered n, h, w) plus its segment map.
Var nchw_to_rows(Var x);
SegmentsPtr nchw_segments(const Shape& nchw);

Var gather_rows(Var x, std::shared_ptr<const std::vector<std::int32_t>> rows);

Var segment_mean(Var x, const SegmentsPtr& seg);
Var segment_max(Var x, const SegmentsPtr& seg);
/// out[s,c] = (mean_{i in s} max(x[i,c], eps)^p)^(1/p); p is a one-element Var.
Var segment_gem(Var x, const SegmentsPtr& seg, Var p, double eps);
/// out[i,c] = x[i,c] * s[seg(i), c]
Var segment_scale(Var x, const SegmentsPtr& seg, Var s);

/// 1D convolution across the channel axis of g [B,C] with an odd-length
/// kernel w [k], zero padded, no bias.
Var channel_conv1d(Var g, Var w);

}  // namespace fuseloc

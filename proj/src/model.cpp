#include "fuseloc/model.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fuseloc {

FusionMode parse_fusion_mode(const std::string& text) {
  if (text == "concat") return FusionMode::concat;
  if (text == "add") return FusionMode::add;
  throw std::invalid_argument("unknown fusion mode '" + text + "' (expected concat or add)");
}

FusionHead parse_fusion_head(const std::string& text) {
  if (text == "none") return FusionHead::none;
  if (text == "fc") return FusionHead::fc;
  if (text == "mlp") return FusionHead::mlp;
  throw std::invalid_argument("unknown fusion head '" + text + "' (expected none, fc or mlp)");
}

std::string to_string(FusionMode m) { return m == FusionMode::concat ? "concat" : "add"; }

std::string to_string(FusionHead h) {
  switch (h) {
    case FusionHead::none: return "none";
    case FusionHead::fc: return "fc";
    case FusionHead::mlp: return "mlp";
  }
  return "?";
}

Modality parse_modality(const std::string& text) {
  if (text == "fused") return Modality::fused;
  if (text == "pc") return Modality::pc;
  if (text == "rgb") return Modality::rgb;
  throw std::invalid_argument("unknown modality '" + text + "' (expected fused, pc or rgb)");
}

std::string to_string(Modality m) {
  switch (m) {
    case Modality::fused: return "fused";
    case Modality::pc: return "pc";
    case Modality::rgb: return "rgb";
  }
  return "?";
}

Var select(const Descriptors& d, Modality m) {
  switch (m) {
    case Modality::fused: return d.fused;
    case Modality::pc: return d.pc;
    case Modality::rgb: return d.rgb;
  }
  return d.fused;
}

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> split_sizes(const std::string& s, const char* key) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    long long v = -1;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
    }
    if (v <= 0 || used != item.size())
      throw std::invalid_argument(std::string(key) + ": expected comma-separated positive integers, got '" + s + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

const std::string& require(const std::map<std::string, std::string>& h, const std::string& key) {
  auto it = h.find(key);
  if (it == h.end()) throw std::runtime_error("checkpoint header is missing '" + key + "'");
  return it->second;
}

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

void NetworkConfig::validate() const {
  if (k == 0) throw std::invalid_argument("descriptor width k must be positive");
  if (pc_channels.size() != 4) throw std::invalid_argument("pc_channels needs 4 widths (Conv0..Conv3)");
  if (image_channels.size() != 4) throw std::invalid_argument("image_channels needs 4 widths");
  for (auto c : pc_channels)
    if (c == 0) throw std::invalid_argument("pc_channels must be positive");
  for (auto c : image_channels)
    if (c == 0) throw std::invalid_argument("image_channels must be positive");
  pooling.validate();
  quantization.validate();
}

std::map<std::string, std::string> NetworkConfig::to_header() const {
  return {{"k", std::to_string(k)},
          {"pc_channels", join(pc_channels)},
          {"image_channels", join(image_channels)},
          {"fusion_mode", to_string(fusion_mode)},
          {"fusion_head", to_string(fusion_head)},
          {"pooling", to_string(pooling.method)},
          {"gem_p_init", format_double(pooling.p_init)},
          {"gem_eps", format_double(pooling.eps)},
          {"quant_step", format_double(quantization.step)},
          {"normalize", normalize ? "1" : "0"}};
}

NetworkConfig NetworkConfig::from_header(const std::map<std::string, std::string>& h) {
  NetworkConfig c;
  c.k = split_sizes(require(h, "k"), "k").at(0);
  c.pc_channels = split_sizes(require(h, "pc_channels"), "pc_channels");
  c.image_channels = split_sizes(require(h, "image_channels"), "image_channels");
  c.fusion_mode = parse_fusion_mode(require(h, "fusion_mode"));
  c.fusion_head = parse_fusion_head(require(h, "fusion_head"));
  c.pooling.method = parse_pool_method(require(h, "pooling"));
  c.pooling.p_init = std::stod(require(h, "gem_p_init"));
  c.pooling.eps = std::stod(require(h, "gem_eps"));
  c.quantization.step = std::stod(require(h, "quant_step"));
  c.normalize = require(h, "normalize") == "1";
  c.validate();
  return c;
}

int eca_kernel_size(std::size_t channels) {
  const int t = static_cast<int>(std::fabs(std::log2(static_cast<double>(channels)) / 2.0 + 0.5));
  return t % 2 == 1 ? t : t + 1;
}

Var eca_rows(Var rows, const SegmentsPtr& seg, Var w) {
  Var a = sigmoid(channel_conv1d(segment_mean(rows, seg), w));
  return segment_scale(rows, seg, a);
}

SparseVoxelTensor eca(const SparseVoxelTensor& x, Var w) {
  return x.with_features(eca_rows(x.features(), x.segments(), w));
}

Var fuse(Var d_pc, Var d_rgb, FusionMode mode) {
  if (d_pc.shape() != d_rgb.shape())
    throw ShapeError("fuse", "width", "descriptor shapes differ: " + to_string(d_pc.shape()) + " vs " + to_string(d_rgb.shape()));
  if (mode == FusionMode::add) return add(d_pc, d_rgb);
  const Var parts[] = {d_pc, d_rgb};
  return concat(parts, d_pc.shape().size() - 1);
}

// ---------------------------------------------------------------------------

Model::Model(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  auto uniform_init = [&](Parameter& p, double bound) {
    std::uniform_real_distribution<double> d(-bound, bound);
    for (auto& v : p.value) v = d(rng);
  };
  auto he = [&](Parameter& p, std::size_t fan_in) { uniform_init(p, std::sqrt(6.0 / static_cast<double>(fan_in))); };
  auto add_bn = [&](const std::string& name, std::size_t C, ParamGroup g) {
    std::fill_n(params_.add(name + ".bn.gamma", {C}, g).value.begin(), C, 1.0);
    params_.add(name + ".bn.beta", {C}, g);
    params_.add(name + ".bn.running_mean", {C}, g, false);
    std::fill_n(params_.add(name + ".bn.running_var", {C}, g, false).value.begin(), C, 1.0);
  };
  auto add_sparse_conv = [&](const std::string& name, int K, std::size_t ci, std::size_t co, bool with_bn) {
    const auto vol = static_cast<std::size_t>(K * K * K);
    he(params_.add(name + ".weight", {vol, ci, co}), vol * ci);
    if (with_bn) add_bn(name, co, ParamGroup::main);
  };
  auto add_eca = [&](const std::string& name, std::size_t C) {
    const auto ks = static_cast<std::size_t>(eca_kernel_size(C));
    uniform_init(params_.add(name + ".eca.weight", {ks}), 1.0 / std::sqrt(static_cast<double>(ks)));
  };

  const auto& pc = cfg_.pc_channels;
  add_sparse_conv("pc.conv0", 5, 1, pc[0], true);
  for (std::size_t i = 1; i < 4; ++i) {
    const std::string b = "pc.conv" + std::to_string(i);
    add_sparse_conv(b + ".down", 2, pc[i - 1], pc[i], true);
    add_sparse_conv(b + ".res1", 3, pc[i], pc[i], true);
    add_sparse_conv(b + ".res2", 3, pc[i], pc[i], true);
    add_eca(b, pc[i]);
  }
  add_sparse_conv("pc.lateral2", 1, pc[2], cfg_.k, false);
  add_sparse_conv("pc.lateral3", 1, pc[3], cfg_.k, false);
  add_sparse_conv("pc.tconv3", 2, cfg_.k, cfg_.k, false);
  auto& pp = params_.add("pc.pool.p", {1});
  pp.value[0] = cfg_.pooling.p_init;
  pp.min_value = 1.0;

  std::size_t prev = 3;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string b = "img.block" + std::to_string(i);
    const std::size_t co = cfg_.image_channels[i];
    he(params_.add(b + ".weight", {co, prev, 3, 3}, ParamGroup::image), prev * 9);
    add_bn(b, co, ParamGroup::image);
    prev = co;
  }
  he(params_.add("img.reduce.weight", {cfg_.k, prev, 1, 1}, ParamGroup::image), prev);
  params_.add("img.reduce.bias", {cfg_.k}, ParamGroup::image);
  auto& ip = params_.add("img.pool.p", {1}, ParamGroup::image);
  ip.value[0] = cfg_.pooling.p_init;
  ip.min_value = 1.0;

  const std::size_t W = cfg_.fused_width();
  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    uniform_init(params_.add(name + ".weight", {in, out}), std::sqrt(6.0 / static_cast<double>(in + out)));
    params_.add(name + ".bias", {out});
  };
  if (cfg_.fusion_head == FusionHead::fc) add_linear("fuse.fc", W, W);
  if (cfg_.fusion_head == FusionHead::mlp) {
    add_linear("fuse.mlp1", W, W);
    add_linear("fuse.mlp2", W, W);
  }
}

Parameter& Model::param(const std::string& name) {
  Parameter* p = params_.find(name);
  if (!p) throw std::logic_error("model has no parameter '" + name + "'");
  return *p;
}

Var Model::bn(Tape& t, Var x, const std::string& name) {
  return batch_norm(x, t.parameter(param(name + ".bn.gamma")), t.parameter(param(name + ".bn.beta")),
                    param(name + ".bn.running_mean"), param(name + ".bn.running_var"), t.training());
}

SparseVoxelTensor Model::conv_bn(Tape& t, const SparseVoxelTensor& x, const std::string& name, int K, int stride,
                                 bool act) {
  auto y = sparse_conv(x, t.parameter(param(name + ".weight")), K, stride);
  Var f = bn(t, y.features(), name);
  return y.with_features(act ? relu(f) : f);
}

// conv-bn-relu, conv-bn, channel attention, then the skip sum and relu.
SparseVoxelTensor Model::residual(Tape& t, const SparseVoxelTensor& x, const std::string& name) {
  auto y = conv_bn(t, x, name + ".res1", 3, 1, true);
  y = conv_bn(t, y, name + ".res2", 3, 1, false);
  y = eca(y, t.parameter(param(name + ".eca.weight")));
  return x.with_features(relu(add(y.features(), x.features())));
}

SparseVoxelTensor Model::pc_feature_map(Tape& t, const SparseVoxelTensor& input) {
  auto x = conv_bn(t, input, "pc.conv0", 5, 1, true);
  SparseVoxelTensor c2 = x;
  for (int i = 1; i < 4; ++i) {
    const std::string b = "pc.conv" + std::to_string(i);
    x = conv_bn(t, x, b + ".down", 2, 2, true);
    x = residual(t, x, b);
    if (i == 2) c2 = x;
  }
  auto lat3 = sparse_conv(x, t.parameter(param("pc.lateral3.weight")), 1, 1);
  auto up = sparse_transposed_conv(lat3, t.parameter(param("pc.tconv3.weight")), 2, 2, c2.coords_ptr());
  auto lat2 = sparse_conv(c2, t.parameter(param("pc.lateral2.weight")), 1, 1);
  return coordinate_aligned_add(lat2, up);
}

Var Model::image_feature_map(Tape& t, Var images) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 3) throw ShapeError("image_branch", "channels", "expected [N,3,H,W], got " + to_string(s));
  if (s[2] < 32 || s[3] < 32)
    throw ShapeError("image_branch", s[2] < 32 ? "height" : "width",
                     "image must be at least 32x32, got " + std::to_string(s[2]) + "x" + std::to_string(s[3]));
  Var x = images;
  for (int i = 0; i < 4; ++i) {
    const std::string b = "img.block" + std::to_string(i);
    x = relu(bn(t, conv2d(x, t.parameter(param(b + ".weight")), Var{}, 2, 1), b));
  }
  return conv2d(x, t.parameter(param("img.reduce.weight")), t.parameter(param("img.reduce.bias")), 1, 0);
}

Descriptors Model::forward(Tape& t, const SparseVoxelTensor& voxels, Var images) {
  if (static_cast<std::size_t>(voxels.batch_count()) != images.shape().at(0))
    throw ShapeError("forward", "batch", "cloud and image batch sizes differ");
  Descriptors d;
  d.pc = pool(pc_feature_map(t, voxels), cfg_.pooling, t.parameter(param("pc.pool.p")));
  d.rgb = pool_dense(image_feature_map(t, images), cfg_.pooling, t.parameter(param("img.pool.p")));
  if (cfg_.normalize) {
    d.pc = l2_normalize(d.pc);
    d.rgb = l2_normalize(d.rgb);
  }
  Var f = fuse(d.pc, d.rgb, cfg_.fusion_mode);
  switch (cfg_.fusion_head) {
    case FusionHead::none: break;
    case FusionHead::fc:
      f = linear(f, t.parameter(param("fuse.fc.weight")), t.parameter(param("fuse.fc.bias")));
      break;
    case FusionHead::mlp:
      f = relu(linear(f, t.parameter(param("fuse.mlp1.weight")), t.parameter(param("fuse.mlp1.bias"))));
      f = linear(f, t.parameter(param("fuse.mlp2.weight")), t.parameter(param("fuse.mlp2.bias")));
      break;
  }
  d.fused = f;
  return d;
}

Descriptors Model::forward(Tape& t, std::span<const PointCloud* const> clouds, std::span<const Image* const> images) {
  if (clouds.size() != images.size()) throw ShapeError("forward", "batch", "cloud and image counts differ");
  return forward(t, quantize_batch(t, clouds, cfg_.quantization), images_to_tensor(t, images));
}

Checkpoint Model::to_checkpoint(std::map<std::string, std::string> extra) const {
  auto header = cfg_.to_header();
  header["format"] = "fuseloc-model-1";
  for (auto& [k, v] : extra) header[k] = v;
  return make_checkpoint(params_, std::move(header));
}

Model Model::from_checkpoint(const Checkpoint& ckpt) {
  Model m(NetworkConfig::from_header(ckpt.header), 0);
  apply_checkpoint(ckpt, m.params_);
  return m;
}

}  // namespace fuseloc

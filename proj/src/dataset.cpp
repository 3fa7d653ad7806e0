#include "fuseloc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "binary_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace fuseloc {

// ---------------------------------------------------------------------------
// Dataset container

std::vector<Position> Dataset::positions() const {
  std::vector<Position> out;
  out.reserve(elements.size());
  for (const auto& e : elements) out.push_back(e.position);
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset d;
  d.root = root;
  for (auto i : indices) {
    d.elements.push_back(elements.at(i));
    if (i < clouds.size()) d.clouds.push_back(clouds[i]);
    if (i < images.size()) d.images.push_back(images[i]);
  }
  return d;
}

Dataset Dataset::traversals(const std::vector<int>& which) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < elements.size(); ++i)
    if (std::find(which.begin(), which.end(), elements[i].traversal) != which.end()) idx.push_back(i);
  return subset(idx);
}

int Dataset::max_traversal() const {
  int m = -1;
  for (const auto& e : elements) m = std::max(m, e.traversal);
  return m;
}

// ---------------------------------------------------------------------------
// PCB1

namespace {
constexpr char kPcbMagic[4] = {'P', 'C', 'B', '1'};
}

std::string encode_pcb1(const PointCloud& cloud) {
  std::string out(kPcbMagic, 4);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cloud.size()));
  for (const auto& p : cloud)
    for (float v : p) detail::put_le<float>(out, v);
  return out;
}

PointCloud decode_pcb1(const std::string& bytes) {
  detail::Reader in(bytes, "point cloud");
  if (in.bytes(4) != std::string_view(kPcbMagic, 4)) throw std::runtime_error("point cloud: bad magic (expected PCB1)");
  const auto n = in.get_le<std::uint32_t>();
  if (static_cast<std::size_t>(n) * 12 != in.remaining()) throw std::runtime_error("point cloud: size mismatch");
  PointCloud pc(n);
  for (auto& p : pc)
    for (auto& v : p) v = in.get_le<float>();
  return pc;
}

void write_pcb1(const std::string& path, const PointCloud& cloud) { detail::write_file_atomic(path, encode_pcb1(cloud)); }

PointCloud read_pcb1(const std::string& path) {
  try {
    return decode_pcb1(detail::read_file(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// index.json

std::vector<Element> read_index(const std::string& root) {
  const auto path = (fs::path(root) / "index.json").string();
  json doc;
  try {
    doc = json::parse(detail::read_file(path));
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (!doc.is_array()) throw std::runtime_error(path + ": expected a JSON array");
  std::vector<Element> out;
  std::set<std::string> ids;
  for (const auto& j : doc) {
    try {
      Element e;
      e.id = j.at("id").get<std::string>();
      e.position = {j.at("easting").get<double>(), j.at("northing").get<double>()};
      e.cloud = j.at("cloud").get<std::string>();
      e.image = j.at("image").get<std::string>();
      if (j.contains("image_variants")) e.image_variants = j.at("image_variants").get<std::vector<std::string>>();
      if (j.contains("traversal")) e.traversal = j.at("traversal").get<int>();
      if (!std::isfinite(e.position.easting) || !std::isfinite(e.position.northing))
        throw std::runtime_error("non-finite position");
      if (!ids.insert(e.id).second) throw std::runtime_error("duplicate id");
      out.push_back(std::move(e));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ": bad element " + j.dump() + ": " + e.what());
    }
  }
  return out;
}

void write_index(const std::string& root, const std::vector<Element>& elements) {
  json doc = json::array();
  for (const auto& e : elements) {
    json j = {{"id", e.id}, {"easting", e.position.easting}, {"northing", e.position.northing},
              {"cloud", e.cloud}, {"image", e.image}};
    if (!e.image_variants.empty()) j["image_variants"] = e.image_variants;
    if (e.traversal >= 0) j["traversal"] = e.traversal;
    doc.push_back(std::move(j));
  }
  detail::write_file_atomic((fs::path(root) / "index.json").string(), doc.dump(1) + "\n");
}

Dataset load_dataset(const std::string& root) {
  if (!fs::is_directory(root)) throw std::invalid_argument("dataset directory '" + root + "' does not exist");
  Dataset d;
  d.root = root;
  d.elements = read_index(root);
  for (const auto& e : d.elements) {
    PointCloud pc = read_pcb1((fs::path(root) / e.cloud).string());
    if (pc.empty()) throw std::runtime_error(e.id + ": empty point cloud");
    if (pc.size() > 4096) throw std::runtime_error(e.id + ": more than 4096 points");
    for (const auto& p : pc)
      for (float v : p)
        if (!(v >= -1.0f && v <= 1.0f)) throw std::runtime_error(e.id + ": point outside [-1,1]^3");
    std::vector<Image> imgs;
    imgs.push_back(read_ppm((fs::path(root) / e.image).string()));
    for (const auto& v : e.image_variants) imgs.push_back(read_ppm((fs::path(root) / v).string()));
    for (const auto& img : imgs)
      if (img.width < 32 || img.height < 32) throw std::runtime_error(e.id + ": image smaller than 32x32");
    d.clouds.push_back(std::move(pc));
    d.images.push_back(std::move(imgs));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

using Rng = std::mt19937_64;

Rng make_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
  return Rng(seq);
}

double unif(Rng& r, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(r); }

struct Box {
  double cx, cy, hx, hy, top;
};

constexpr double kGround = -0.9;

struct Scene {
  std::vector<Box> boxes;
};

Scene make_scene(Rng& r) {
  Scene s;
  const int n = std::uniform_int_distribution<int>(3, 6)(r);
  for (int i = 0; i < n; ++i)
    s.boxes.push_back({unif(r, -0.75, 0.75), unif(r, -0.75, 0.75), unif(r, 0.05, 0.25), unif(r, 0.05, 0.25),
                       unif(r, -0.6, 0.8)});
  return s;
}

Point3 sample_surface(const Scene& s, Rng& r) {
  if (unif(r, 0, 1) < 0.25) return {static_cast<float>(unif(r, -1, 1)), static_cast<float>(unif(r, -1, 1)), static_cast<float>(kGround)};
  // Box faces weighted by area: four sides and the top.
  std::vector<double> w;
  for (const auto& b : s.boxes) {
    const double h = b.top - kGround;
    w.push_back(2 * (2 * b.hy * h) + 2 * (2 * b.hx * h) + 4 * b.hx * b.hy);
  }
  const auto& b = s.boxes[std::discrete_distribution<std::size_t>(w.begin(), w.end())(r)];
  const double h = b.top - kGround;
  const double side_x = 2 * b.hy * h, side_y = 2 * b.hx * h, top = 4 * b.hx * b.hy;
  const double pick = unif(r, 0, 2 * side_x + 2 * side_y + top);
  double x, y, z = unif(r, kGround, b.top);
  if (pick < 2 * side_x) {
    x = b.cx + (pick < side_x ? -b.hx : b.hx);
    y = unif(r, b.cy - b.hy, b.cy + b.hy);
  } else if (pick < 2 * side_x + 2 * side_y) {
    y = b.cy + (pick < 2 * side_x + side_y ? -b.hy : b.hy);
    x = unif(r, b.cx - b.hx, b.cx + b.hx);
  } else {
    x = unif(r, b.cx - b.hx, b.cx + b.hx);
    y = unif(r, b.cy - b.hy, b.cy + b.hy);
    z = b.top;
  }
  return {static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)};
}

PointCloud render_cloud(const Scene& s, std::size_t n, Rng& r) {
  const double theta = unif(r, -0.08, 0.08), tx = unif(r, -0.04, 0.04), ty = unif(r, -0.04, 0.04);
  const double c = std::cos(theta), sn = std::sin(theta);
  std::normal_distribution<double> noise(0.0, 0.004);
  PointCloud pc(n);
  for (auto& p : pc) {
    const Point3 q = sample_surface(s, r);
    const double x = c * q[0] - sn * q[1] + tx + noise(r);
    const double y = sn * q[0] + c * q[1] + ty + noise(r);
    const double z = q[2] + noise(r);
    p = {static_cast<float>(std::clamp(x, -1.0, 1.0)), static_cast<float>(std::clamp(y, -1.0, 1.0)),
         static_cast<float>(std::clamp(z, -1.0, 1.0))};
  }
  return pc;
}

struct Blob {
  double cx, cy, radius;
  std::array<double, 3> color;
};

struct Pattern {
  std::array<double, 3> c1, c2;
  double angle, freq, phase;
  std::vector<Blob> blobs;
};

std::array<double, 3> random_color(Rng& r) { return {unif(r, 0, 255), unif(r, 0, 255), unif(r, 0, 255)}; }

Pattern make_pattern(Rng& r) {
  Pattern p{random_color(r), random_color(r), unif(r, 0, std::numbers::pi), unif(r, 1.5, 6.0), unif(r, 0, 6.28), {}};
  const int n = std::uniform_int_distribution<int>(2, 4)(r);
  for (int i = 0; i < n; ++i) p.blobs.push_back({unif(r, 0.1, 0.9), unif(r, 0.2, 0.9), unif(r, 0.08, 0.2), random_color(r)});
  return p;
}

// weak_place/weak_alpha: a faint place-specific blob blended over a shared template.
Image render_image(const Pattern& pat, const Pattern* weak, double weak_alpha, std::size_t W, std::size_t H, Rng& r,
                   double noise_sigma) {
  const double dx = unif(r, -3, 3), dy = unif(r, -3, 3);
  const double bright = unif(r, -20, 20), contrast = unif(r, 0.85, 1.15);
  std::normal_distribution<double> noise(0.0, noise_sigma);
  Image img(W, H);
  const double ca = std::cos(pat.angle), sa = std::sin(pat.angle);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (static_cast<double>(x) + dx) / static_cast<double>(W);
      const double v = (static_cast<double>(y) + dy) / static_cast<double>(H);
      const double s = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * pat.freq * (u * ca + v * sa) + pat.phase);
      std::array<double, 3> col;
      for (int c = 0; c < 3; ++c) col[c] = pat.c1[c] * (1 - s) + pat.c2[c] * s;
      for (const auto& b : pat.blobs)
        if (std::hypot(u - b.cx, v - b.cy) < b.radius) col = b.color;
      if (weak)
        for (const auto& b : weak->blobs)
          if (std::hypot(u - b.cx, v - b.cy) < b.radius)
            for (int c = 0; c < 3; ++c) col[c] = (1 - weak_alpha) * col[c] + weak_alpha * b.color[c];
      for (int c = 0; c < 3; ++c) {
        const double val = (col[c] - 128.0) * contrast + 128.0 + bright + noise(r);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(val), 0L, 255L));
      }
    }
  return img;
}

// Half the height, so the cue survives the default crop and erase.
std::size_t band_height(std::size_t H) { return std::max<std::size_t>(16, H / 2); }

// Top band filled with a fully saturated place hue, evenly spaced over the
// places. Pooled channel responses see colour directly, and brightness,
// contrast and saturation jitter leave hue nearly unchanged, so this shortcut
// is learned far faster than scene geometry.
void watermark(Image& img, int place, int places) {
  const double h = 6.0 * static_cast<double>(place) / static_cast<double>(places);
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double up = 255.0 * f, down = 255.0 * (1.0 - f);
  const double table[6][3] = {{255, up, 0}, {down, 255, 0}, {0, 255, up}, {0, down, 255}, {up, 0, 255}, {255, 0, down}};
  for (std::size_t y = 0; y < band_height(img.height); ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(table[sector][c]));
}

double band_diff(const Image& a, const Image& b) {
  const std::size_t band = band_height(a.height);
  double s = 0;
  for (std::size_t y = 0; y < band; ++y)
    for (std::size_t x = 0; x < a.width; ++x)
      for (int c = 0; c < 3; ++c) s += std::abs(static_cast<int>(a.at(x, y, c)) - static_cast<int>(b.at(x, y, c)));
  return s / static_cast<double>(band * a.width * 3);
}

std::string pad(int v, int width) {
  std::string s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

void SyntheticConfig::validate() const {
  if (places < 2) throw std::invalid_argument("need at least 2 places");
  if (traversals < 2) throw std::invalid_argument("need at least 2 traversals");
  if (!(spacing_m > 50.0))
    throw std::invalid_argument("place spacing must exceed the 50 m negative threshold, got " + std::to_string(spacing_m));
  if (points == 0 || points > 4096) throw std::invalid_argument("points per cloud must be in [1, 4096]");
  if (image_width < 32 || image_height < 32) throw std::invalid_argument("images must be at least 32x32");
  if (image_variants < 0) throw std::invalid_argument("image_variants must be >= 0");
  if (spurious_traversals > traversals) throw std::invalid_argument("more watermarked traversals than traversals");
}

int SyntheticConfig::watermarked_traversals() const {
  if (!spurious_rgb) return 0;
  return spurious_traversals >= 0 ? spurious_traversals : std::max(1, traversals - 2);
}

std::string SyntheticReport::summary() const {
  std::ostringstream s;
  s << "generated " << elements << " elements";
  if (spurious) {
    s << "; spurious-rgb self-check " << (self_check_passed ? "PASS" : "FAIL") << ": watermarked traversals 0.."
      << watermarked_traversals - 1 << " band diff " << train_watermark_diff << ", clean traversals band diff "
      << val_watermark_diff;
  }
  return s.str();
}

SyntheticReport generate_synthetic(const SyntheticConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(fs::path(out_dir) / "clouds");
  fs::create_directories(fs::path(out_dir) / "images");
  const int wm = cfg.watermarked_traversals();
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.places))));
  // Jitter stays within 4 m, so the grid pitch keeps different places at least spacing apart.
  const double pitch = cfg.spacing_m + 10.0;
  const double origin_e = 620000.0, origin_n = 5735000.0;

  std::vector<Pattern> templates;
  if (cfg.spurious_rgb) {
    Rng tr = make_rng(cfg.seed, 0x7e3u);
    for (int i = 0; i < 4; ++i) templates.push_back(make_pattern(tr));
  }

  SyntheticReport rep;
  rep.spurious = cfg.spurious_rgb;
  rep.watermarked_traversals = wm;
  std::size_t wm_count = 0, clean_count = 0;
  std::vector<Element> elements;
  for (int p = 0; p < cfg.places; ++p) {
    Rng pr = make_rng(cfg.seed, 1, static_cast<std::uint64_t>(p));
    const Scene scene = make_scene(pr);
    const Pattern pattern = make_pattern(pr);
    const double ce = origin_e + (p % cols) * pitch, cn = origin_n + (p / cols) * pitch;
    for (int t = 0; t < cfg.traversals; ++t) {
      Rng r = make_rng(cfg.seed, 2, static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(t));
      const double rad = 4.0 * std::sqrt(unif(r, 0, 1)), ang = unif(r, 0, 2 * std::numbers::pi);
      Element e;
      e.id = "p" + pad(p, 3) + "_t" + pad(t, 2);
      e.position = {std::round((ce + rad * std::cos(ang)) * 100.0) / 100.0,
                    std::round((cn + rad * std::sin(ang)) * 100.0) / 100.0};
      e.traversal = t;
      e.cloud = "clouds/" + e.id + ".pcb";
      write_pcb1((fs::path(out_dir) / e.cloud).string(), render_cloud(scene, cfg.points, r));
      for (int v = 0; v <= cfg.image_variants; ++v) {
        Image img = cfg.spurious_rgb
                        ? render_image(templates[static_cast<std::size_t>(p % 4)], &pattern, 0.25, cfg.image_width, cfg.image_height, r, 12.0)
                        : render_image(pattern, nullptr, 0.0, cfg.image_width, cfg.image_height, r, 6.0);
        const Image clean = img;
        if (t < wm) {
          watermark(img, p, cfg.places);
          rep.train_watermark_diff += band_diff(img, clean);
          ++wm_count;
        } else if (cfg.spurious_rgb) {
          rep.val_watermark_diff += band_diff(img, clean);
          ++clean_count;
        }
        const std::string name = v == 0 ? "images/" + e.id + ".ppm" : "images/" + e.id + "_v" + std::to_string(v) + ".ppm";
        write_ppm((fs::path(out_dir) / name).string(), img);
        if (v == 0)
          e.image = name;
        else
          e.image_variants.push_back(name);
      }
      elements.push_back(std::move(e));
    }
  }
  write_index(out_dir, elements);
  rep.elements = elements.size();
  if (wm_count) rep.train_watermark_diff /= static_cast<double>(wm_count);
  if (clean_count) rep.val_watermark_diff /= static_cast<double>(clean_count);
  if (cfg.spurious_rgb) rep.self_check_passed = rep.train_watermark_diff > 10.0 && rep.val_watermark_diff == 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {
void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must be in [0,1]");
}
}  // namespace

void AugmentationConfig::validate() const {
  if (!(jitter_sigma >= 0.0)) throw std::invalid_argument("jitter_sigma must be >= 0");
  check_prob(point_drop_prob, "point_drop_prob");
  check_prob(cuboid_erase_prob, "cuboid_erase_prob");
  check_prob(image_erase_prob, "image_erase_prob");
  if (!(cuboid_min_size > 0.0 && cuboid_min_size <= cuboid_max_size)) throw std::invalid_argument("bad cuboid size range");
  if (!(erase_min_area > 0.0 && erase_min_area <= erase_max_area && erase_max_area <= 1.0))
    throw std::invalid_argument("bad erase area range");
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) throw std::invalid_argument("crop_fraction must be in (0,1]");
  for (double b : {brightness, contrast, saturation})
    if (!(b >= 0.0 && b < 1.0)) throw std::invalid_argument("photometric jitter bounds must be in [0,1)");
}

AugmentationConfig AugmentationConfig::none() {
  AugmentationConfig c;
  c.jitter_sigma = 0.0;
  c.point_drop_prob = 0.0;
  c.cuboid_erase_prob = 0.0;
  c.image_erase_prob = 0.0;
  c.crop_fraction = 1.0;
  c.brightness = c.contrast = c.saturation = 0.0;
  return c;
}

PointCloud augment_cloud(const PointCloud& cloud, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (cloud.empty()) throw std::invalid_argument("empty point cloud");
  PointCloud out = cloud;
  if (cfg.jitter_sigma > 0.0) {
    std::normal_distribution<double> n(0.0, cfg.jitter_sigma);
    for (auto& p : out)
      for (auto& v : p) v = static_cast<float>(std::clamp(static_cast<double>(v) + n(rng), -1.0, 1.0));
  }
  if (cfg.point_drop_prob > 0.0) {
    std::bernoulli_distribution drop(cfg.point_drop_prob);
    for (int attempt = 0; attempt < 10; ++attempt) {
      PointCloud kept;
      for (const auto& p : out)
        if (!drop(rng)) kept.push_back(p);
      if (!kept.empty()) {
        out = std::move(kept);
        break;
      }
    }
  }
  if (cfg.cuboid_erase_prob > 0.0 && std::bernoulli_distribution(cfg.cuboid_erase_prob)(rng)) {
    for (int attempt = 0; attempt < 10; ++attempt) {
      std::array<double, 3> lo, hi;
      for (int a = 0; a < 3; ++a) {
        const double size = unif(rng, cfg.cuboid_min_size, cfg.cuboid_max_size);
        const double c = unif(rng, -1.0, 1.0);
        lo[a] = c - size / 2;
        hi[a] = c + size / 2;
      }
      PointCloud kept;
      for (const auto& p : out) {
        bool inside = true;
        for (int a = 0; a < 3; ++a) inside = inside && p[a] >= lo[a] && p[a] <= hi[a];
        if (!inside) kept.push_back(p);
      }
      if (!kept.empty()) {
        out = std::move(kept);
        break;
      }
    }
  }
  return out;
}

Image augment_image(const Image& image, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t W = image.width, H = image.height;
  std::vector<double> px(image.data.begin(), image.data.end());
  if (cfg.brightness > 0.0) {
    const double b = unif(rng, -cfg.brightness, cfg.brightness) * 255.0;
    for (auto& v : px) v += b;
  }
  if (cfg.contrast > 0.0) {
    const double c = unif(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
    const double mean = std::accumulate(px.begin(), px.end(), 0.0) / static_cast<double>(px.size());
    for (auto& v : px) v = (v - mean) * c + mean;
  }
  if (cfg.saturation > 0.0) {
    const double s = unif(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
    for (std::size_t i = 0; i < W * H; ++i) {
      const double gray = 0.299 * px[i * 3] + 0.587 * px[i * 3 + 1] + 0.114 * px[i * 3 + 2];
      for (int c = 0; c < 3; ++c) px[i * 3 + c] = gray + (px[i * 3 + c] - gray) * s;
    }
  }
  Image out(W, H);
  for (std::size_t i = 0; i < px.size(); ++i) out.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(px[i]), 0L, 255L));

  if (cfg.crop_fraction < 1.0) {
    const auto cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.crop_fraction * static_cast<double>(W))));
    const auto ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.crop_fraction * static_cast<double>(H))));
    const auto x0 = std::uniform_int_distribution<std::size_t>(0, W - cw)(rng);
    const auto y0 = std::uniform_int_distribution<std::size_t>(0, H - ch)(rng);
    Image src = out;
    // Bilinear resize of the crop back to W x H.
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(cw) / static_cast<double>(W) - 0.5;
        const double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(ch) / static_cast<double>(H) - 0.5;
        const double fx = std::clamp(sx, 0.0, static_cast<double>(cw - 1)), fy = std::clamp(sy, 0.0, static_cast<double>(ch - 1));
        const auto ix = static_cast<std::size_t>(fx), iy = static_cast<std::size_t>(fy);
        const std::size_t jx = std::min(ix + 1, cw - 1), jy = std::min(iy + 1, ch - 1);
        const double ax = fx - static_cast<double>(ix), ay = fy - static_cast<double>(iy);
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = (1 - ay) * ((1 - ax) * src.at(x0 + ix, y0 + iy, c) + ax * src.at(x0 + jx, y0 + iy, c)) +
                           ay * ((1 - ax) * src.at(x0 + ix, y0 + jy, c) + ax * src.at(x0 + jx, y0 + jy, c));
          out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
  }

  if (cfg.image_erase_prob > 0.0 && std::bernoulli_distribution(cfg.image_erase_prob)(rng)) {
    const double area = unif(rng, cfg.erase_min_area, cfg.erase_max_area);
    std::size_t ew = W, eh = H;
    if (area < 1.0) {
      const double aspect = std::exp(unif(rng, std::log(0.5), std::log(2.0)));
      ew = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area * aspect) * static_cast<double>(W))), 1, W);
      eh = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area / aspect) * static_cast<double>(H))), 1, H);
    }
    const auto x0 = std::uniform_int_distribution<std::size_t>(0, W - ew)(rng);
    const auto y0 = std::uniform_int_distribution<std::size_t>(0, H - eh)(rng);
    std::uniform_int_distribution<int> noise(0, 255);
    for (std::size_t y = y0; y < y0 + eh; ++y)
      for (std::size_t x = x0; x < x0 + ew; ++x)
        for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = static_cast<std::uint8_t>(noise(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Split and clustering

bool Rect::contains(const Position& p) const {
  return p.easting >= min_easting && p.easting <= max_easting && p.northing >= min_northing && p.northing <= max_northing;
}

void Rect::validate() const {
  if (!(max_easting > min_easting) || !(max_northing > min_northing))
    throw std::invalid_argument("test region must have positive width and height");
}

Split utm_split(const std::vector<Element>& elements, const Rect& region, bool require_both) {
  region.validate();
  Split s;
  for (std::size_t i = 0; i < elements.size(); ++i) (region.contains(elements[i].position) ? s.test : s.train).push_back(i);
  if (require_both && (s.train.empty() || s.test.empty()))
    throw std::invalid_argument(std::string("geographic split leaves the ") + (s.train.empty() ? "training" : "test") +
                                " side empty");
  return s;
}

std::vector<std::vector<std::size_t>> cluster_places(const std::vector<Position>& positions, double radius) {
  const std::size_t n = positions.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (planar_distance(positions[i], positions[j]) <= radius) {
        const auto a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::int64_t> slot(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = find(i);
    if (slot[r] < 0) {
      slot[r] = static_cast<std::int64_t>(groups.size());
      groups.emplace_back();
    }
    groups[static_cast<std::size_t>(slot[r])].push_back(i);
  }
  return groups;
}

}  // namespace fuseloc

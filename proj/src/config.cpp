#include "fuseloc/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fuseloc {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(12);
  ss << v;
  return ss.str();
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  return d;
}

long long to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long d = 0;
  try {
    d = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  return d;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument(key + ": expected a boolean, got '" + v + "'");
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto n = to_int(key, trim(item));
    if (n <= 0) throw std::invalid_argument(key + ": widths must be positive");
    out.push_back(static_cast<std::size_t>(n));
  }
  return out;
}

}  // namespace

RunConfig::RunConfig() { train.precision = Precision::f32; }

std::vector<RunConfig::Field> RunConfig::fields() {
  std::vector<Field> f;
  auto dbl = [&](const char* key, const char* help, double& ref) {
    f.push_back({key, help, [&ref] { return fmt(ref); }, [&ref, key](const std::string& v) { ref = to_double(key, v); }});
  };
  auto integer = [&](const char* key, const char* help, auto& ref) {
    f.push_back({key, help, [&ref] { return std::to_string(ref); }, [&ref, key](const std::string& v) {
                   const auto n = to_int(key, v);
                   using T = std::remove_reference_t<decltype(ref)>;
                   if (std::is_unsigned_v<T> && n < 0) throw std::invalid_argument(std::string(key) + ": must be >= 0");
                   ref = static_cast<T>(n);
                 }});
  };
  auto boolean = [&](const char* key, const char* help, bool& ref) {
    f.push_back({key, help, [&ref] { return std::string(ref ? "true" : "false"); },
                 [&ref, key](const std::string& v) { ref = to_bool(key, v); }});
  };
  auto str = [&](const char* key, const char* help, std::string& ref) {
    f.push_back({key, help, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }});
  };

  // Network
  integer("k", "descriptor width per modality", network.k);
  f.push_back({"pc_channels", "point-cloud widths Conv0..Conv3", [this] { return join(network.pc_channels); },
               [this](const std::string& v) { network.pc_channels = to_sizes("pc_channels", v); }});
  f.push_back({"image_channels", "image block widths", [this] { return join(network.image_channels); },
               [this](const std::string& v) { network.image_channels = to_sizes("image_channels", v); }});
  f.push_back({"fusion_mode", "concat or add", [this] { return to_string(network.fusion_mode); },
               [this](const std::string& v) { network.fusion_mode = parse_fusion_mode(v); }});
  f.push_back({"fusion_head", "none, fc or mlp", [this] { return to_string(network.fusion_head); },
               [this](const std::string& v) { network.fusion_head = parse_fusion_head(v); }});
  f.push_back({"pooling", "gem, mac or spoc", [this] { return to_string(network.pooling.method); },
               [this](const std::string& v) { network.pooling.method = parse_pool_method(v); }});
  dbl("gem_p_init", "initial GeM exponent", network.pooling.p_init);
  dbl("gem_eps", "GeM input clamp", network.pooling.eps);
  dbl("quant_step", "voxel size in cloud units", network.quantization.step);
  boolean("normalize", "L2-normalize unimodal descriptors", network.normalize);

  // Loss and optimizer
  dbl("margin", "triplet margin", train.loss.margin);
  dbl("alpha", "point-cloud head weight", train.loss.alpha);
  dbl("beta", "image head weight", train.loss.beta);
  dbl("lr_main", "learning rate", train.optim.lr_main);
  dbl("lr_image_branch", "image branch learning rate", train.optim.lr_image_branch);
  dbl("weight_decay", "L2 regularization", train.optim.weight_decay);
  f.push_back({"epochs", "training epochs", [this] { return std::to_string(train.epochs); },
               [this](const std::string& v) { train.epochs = train.optim.epochs = static_cast<int>(to_int("epochs", v)); }});
  integer("lr_drop_epoch", "epoch at which the learning rate drops", train.optim.lr_drop_epoch);
  dbl("lr_drop_factor", "learning rate divisor", train.optim.lr_drop_factor);

  // Batches
  integer("batch_start", "initial batch size", train.batch.current_size);
  integer("batch_max", "batch size cap", train.batch.max_size);
  dbl("batch_growth", "batch growth factor", train.batch.growth);
  dbl("batch_active_threshold", "grow when active triplets fall below this fraction", train.batch.active_threshold);
  dbl("positive_radius", "same-place radius, meters", train.similarity.positive_radius);
  dbl("negative_radius", "different-place radius, meters", train.similarity.negative_radius);

  // Augmentation
  boolean("augment", "augment training data", train.augment);
  dbl("jitter_sigma", "point jitter", train.augmentation.jitter_sigma);
  dbl("point_drop_prob", "point drop probability", train.augmentation.point_drop_prob);
  dbl("cuboid_erase_prob", "cuboid erase probability", train.augmentation.cuboid_erase_prob);
  dbl("image_erase_prob", "image erase probability", train.augmentation.image_erase_prob);
  dbl("crop_fraction", "image crop fraction", train.augmentation.crop_fraction);
  dbl("brightness", "brightness jitter bound", train.augmentation.brightness);
  dbl("contrast", "contrast jitter bound", train.augmentation.contrast);
  dbl("saturation", "saturation jitter bound", train.augmentation.saturation);

  // General
  integer("seed", "random seed", train.seed);
  f.push_back({"precision", "f32 or f64", [this] { return to_string(train.precision); },
               [this](const std::string& v) { train.precision = parse_precision(v); }});
  integer("threads", "worker threads, 0 for all cores", threads);

  // Synthetic data
  integer("places", "number of places", synthetic.places);
  integer("traversals", "traversals per place", synthetic.traversals);
  dbl("spacing", "place spacing, meters", synthetic.spacing_m);
  integer("points", "points per cloud", synthetic.points);
  integer("image_width", "image width", synthetic.image_width);
  integer("image_height", "image height", synthetic.image_height);
  integer("image_variants", "extra image renders per element", synthetic.image_variants);
  boolean("spurious_rgb", "watermark leading traversals with a place code", synthetic.spurious_rgb);
  integer("spurious_traversals", "watermarked traversals, -1 for traversals-2", synthetic.spurious_traversals);

  // Evaluation and diagnostics
  dbl("recall_radius", "true-match radius, meters", recall_radius);
  integer("diag_batch_size", "diagnostic batch size", diagnostic.batch_size);
  integer("diag_batches", "diagnostic batches per split", diagnostic.batches);
  str("modality", "fused, pc or rgb", modality);

  // Paths and selections
  str("data", "dataset directory", data);
  str("val_data", "validation dataset directory", val_data);
  str("out", "output path", out);
  str("checkpoint", "model checkpoint", checkpoint);
  str("ranking", "ranking dump path", ranking);
  str("train_traversals", "training traversals", train_traversals);
  str("val_traversals", "validation traversals", val_traversals);
  str("db_traversals", "database traversals", db_traversals);
  str("query_traversals", "query traversals", query_traversals);
  str("test_region", "held-out rectangle min_e,min_n,max_e,max_n", test_region);
  integer("save_every", "checkpoint every N epochs, 0 for final only", save_every);
  integer("places_limit", "train on the first N places only", places_limit);
  return f;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (auto& f : fields())
    if (f.key == key) {
      f.set(value);
      explicit_keys.insert(key);
      return;
    }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

std::string RunConfig::get(const std::string& key) {
  for (auto& f : fields())
    if (f.key == key) return f.get();
  throw std::invalid_argument("unknown config key '" + key + "'");
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file '" + path + "'");
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::finalize() {
  if (!explicit_keys.count("lr_drop_epoch") && train.optim.lr_drop_epoch > train.epochs)
    train.optim.lr_drop_epoch = train.epochs;
}

void RunConfig::validate() const {
  network.validate();
  train.validate();
  if (threads < 0) throw std::invalid_argument("threads must be >= 0");
  if (!(recall_radius > 0.0)) throw std::invalid_argument("recall_radius must be positive");
  parse_modality(modality);
  if (diagnostic.batch_size < 2 || diagnostic.batches < 1) throw std::invalid_argument("diagnostic needs batch size >= 2 and >= 1 batch");
}

std::vector<int> parse_traversals(const std::string& text, int max_traversal, const std::vector<int>& fallback) {
  if (text == "auto") return fallback;
  std::vector<int> out;
  if (text == "all") {
    for (int t = 0; t <= max_traversal; ++t) out.push_back(t);
    return out;
  }
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(static_cast<int>(to_int("traversals", trim(item))));
  if (out.empty()) throw std::invalid_argument("empty traversal list");
  return out;
}

Rect parse_rect(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) v.push_back(to_double("test_region", trim(item)));
  if (v.size() != 4) throw std::invalid_argument("test_region needs min_e,min_n,max_e,max_n");
  Rect r{v[0], v[1], v[2], v[3]};
  r.validate();
  return r;
}

}  // namespace fuseloc

#include "fuseloc/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "fuseloc/checkpoint.hpp"
#include "fuseloc/config.hpp"
#include "fuseloc/gradsuite.hpp"
#include "fuseloc/parallel.hpp"

namespace fuseloc {

namespace fs = std::filesystem;

namespace {

class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kNetworkKeys = {"k",          "pc_channels", "image_channels", "fusion_mode", "fusion_head",
                                               "pooling",    "gem_p_init",  "gem_eps",        "quant_step",  "normalize"};
const std::vector<std::string> kTrainKeys = {
    "margin",         "alpha",          "beta",          "lr_main",         "lr_image_branch",
    "weight_decay",   "epochs",         "lr_drop_epoch", "lr_drop_factor",  "batch_start",
    "batch_max",      "batch_growth",   "batch_active_threshold",           "positive_radius",
    "negative_radius", "augment",       "jitter_sigma",  "point_drop_prob", "cuboid_erase_prob",
    "image_erase_prob", "crop_fraction", "brightness",   "contrast",        "saturation"};

std::string flag_name(const std::string& key) {
  std::string s = key;
  std::replace(s.begin(), s.end(), '_', '-');
  return "--" + s;
}

bool is_bool_key(const std::string& key) { return key == "augment" || key == "normalize" || key == "spurious_rgb"; }

// Command-line options bound to config keys. Values are applied over the
// config file after parsing, so flags take precedence over the file.
class Bindings {
 public:
  explicit Bindings(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "key = value config file; flags override its entries");
  }

  void add(const std::string& key, const std::string& flag = "") {
    const std::string name = flag.empty() ? flag_name(key) : flag;
    auto& f = field(key);
    Entry& e = entries_[key];
    e.key = key;
    if (is_bool_key(key)) {
      e.flag = true;
      e.opt = app_->add_flag(name + ",!--no-" + name.substr(2), e.bool_value, f.help + " [" + f.get() + "]");
    } else {
      e.opt = app_->add_option(name, e.value, f.help)->default_str(f.get())->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }
  void add(const std::vector<std::string>& keys) {
    for (const auto& k : keys) add(k);
  }

  /// Defaults, then the config file, then explicit flags.
  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path_.empty()) cfg.load_file(config_path_);
    for (const auto& [key, e] : entries_) {
      if (e.opt->count() == 0) continue;
      cfg.set(key, e.flag ? (e.bool_value ? "true" : "false") : e.value);
    }
    cfg.finalize();
    cfg.validate();
    return cfg;
  }

 private:
  struct Entry {
    std::string key;
    std::string value;
    bool bool_value = false;
    bool flag = false;
    CLI::Option* opt = nullptr;
  };

  RunConfig::Field& field(const std::string& key) {
    for (auto& f : fields_)
      if (f.key == key) return f;
    throw std::logic_error("no config key " + key);
  }

  CLI::App* app_;
  std::string config_path_;
  RunConfig defaults_;
  std::vector<RunConfig::Field> fields_ = defaults_.fields();
  std::map<std::string, Entry> entries_;
};

void apply_threads(const RunConfig& cfg) {
  const int n = cfg.threads > 0 ? cfg.threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  set_num_threads(n);
}

Dataset load_data(const std::string& path, const char* what) {
  if (path.empty()) throw std::invalid_argument(std::string("missing ") + what + " dataset path");
  if (!fs::exists(fs::path(path) / "index.json"))
    throw std::invalid_argument(std::string(what) + " dataset '" + path + "' has no index.json");
  return load_dataset(path);
}

std::vector<int> range(int lo, int hi) {
  std::vector<int> v;
  for (int t = lo; t <= hi; ++t) v.push_back(t);
  return v;
}

Dataset select_traversals(const Dataset& d, const std::string& spec, const std::vector<int>& fallback, const char* what) {
  if (spec == "auto" && d.max_traversal() < 0) return d;
  if (d.max_traversal() < 0) throw std::invalid_argument("dataset has no traversal labels; cannot select " + std::string(what));
  const auto which = parse_traversals(spec, d.max_traversal(), fallback);
  Dataset out = d.traversals(which);
  if (out.size() == 0) throw std::invalid_argument(std::string(what) + " selection is empty");
  return out;
}

Dataset first_places(const Dataset& d, int limit, double radius) {
  if (limit <= 0) return d;
  auto places = cluster_places(d.positions(), radius);
  std::vector<std::size_t> idx;
  for (std::size_t p = 0; p < places.size() && p < static_cast<std::size_t>(limit); ++p)
    idx.insert(idx.end(), places[p].begin(), places[p].end());
  std::sort(idx.begin(), idx.end());
  return d.subset(idx);
}

Model load_model(const std::string& path) {
  if (path.empty()) throw std::invalid_argument("missing --checkpoint");
  if (!fs::exists(path)) throw std::invalid_argument("checkpoint '" + path + "' does not exist");
  try {
    return Model::from_checkpoint(load_checkpoint(path));
  } catch (const std::exception& e) {
    throw ArtifactError("checkpoint '" + path + "': " + e.what());
  }
}

// Network keys requested on the command line or in the config file must match
// the checkpoint.
void check_network(const Model& model, const RunConfig& cfg) {
  const auto have = model.config().to_header();
  const auto want = cfg.network.to_header();
  for (const auto& [key, value] : want) {
    if (cfg.explicit_keys.count(key) && have.count(key) && have.at(key) != value)
      throw ArtifactError("checkpoint has " + key + "=" + have.at(key) + " but " + value + " was requested");
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void emit(std::ostream& out, const std::string& path, const std::string& text) {
  out << text;
  if (!path.empty()) {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    f << text;
  }
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  if (cfg.out.empty()) throw std::invalid_argument("gen-data needs --out");
  SyntheticConfig sc = cfg.synthetic;
  sc.seed = cfg.train.seed;
  const SyntheticReport r = generate_synthetic(sc, cfg.out);
  out << r.summary() << "\n";
  if (r.spurious && !r.self_check_passed) return kExitNumeric;
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.out.empty()) throw std::invalid_argument("train needs --out (output directory)");
  const Dataset all = load_data(cfg.data, "training");
  const int mt = all.max_traversal();
  Dataset train = select_traversals(all, cfg.train_traversals, range(0, std::max(0, mt - 1)), "training traversals");
  if (!cfg.test_region.empty()) {
    const Split s = utm_split(train.elements, parse_rect(cfg.test_region), true);
    train = train.subset(s.train);
  }
  train = first_places(train, cfg.places_limit, cfg.train.similarity.positive_radius);

  Model model = cfg.checkpoint.empty() ? Model(cfg.network, cfg.train.seed) : load_model(cfg.checkpoint);
  Trainer trainer(model, train, cfg.train);

  fs::create_directories(cfg.out);
  const fs::path dir(cfg.out);
  std::ofstream log(dir / "train.log", std::ios::binary);
  if (!log) throw std::runtime_error("cannot write " + (dir / "train.log").string());
  trainer.write_log_header(log);
  out << "training on " << train.size() << " elements\n";

  auto extras = [&](int epoch) {
    return std::map<std::string, std::string>{{"epoch", std::to_string(epoch)},
                                              {"seed", std::to_string(cfg.train.seed)},
                                              {"precision", to_string(cfg.train.precision)}};
  };
  std::string last_good = cfg.checkpoint;
  for (int e = 0; e < cfg.train.epochs; ++e) {
    EpochSummary s;
    try {
      s = trainer.run_epoch(e, &log);
    } catch (const NumericError& ex) {
      log.flush();
      err << "error: " << ex.what() << "\n";
      err << (last_good.empty() ? std::string("no checkpoint was written") : "last good checkpoint: " + last_good) << "\n";
      return kExitNumeric;
    }
    out << "epoch " << e + 1 << "/" << cfg.train.epochs << " batches " << s.batches << " loss " << fmt("%.6f", s.mean.total)
        << " active_F " << s.mean.active_F << " batch_size " << s.final_batch_size << "\n";
    if (cfg.save_every > 0 && (e + 1) % cfg.save_every == 0 && e + 1 < cfg.train.epochs) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d.ckpt", e + 1);
      save_checkpoint((dir / name).string(), model.to_checkpoint(extras(e + 1)));
      last_good = (dir / name).string();
    }
  }
  save_checkpoint((dir / "model.ckpt").string(), model.to_checkpoint(extras(cfg.train.epochs)));
  log.flush();
  out << "wrote " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  Model model = load_model(cfg.checkpoint);
  check_network(model, cfg);
  Dataset all = load_data(cfg.data, "evaluation");
  if (!cfg.test_region.empty()) all = all.subset(utm_split(all.elements, parse_rect(cfg.test_region), true).test);
  const int mt = all.max_traversal();
  if (mt < 1) throw std::invalid_argument("evaluation needs at least two traversals (database and queries)");
  const Dataset db_set = select_traversals(all, cfg.db_traversals, range(0, mt - 1), "database traversals");
  const Dataset q_set = select_traversals(all, cfg.query_traversals, {mt}, "query traversals");
  const Modality m = parse_modality(cfg.modality);

  const DescriptorDatabase db = build_database(model, db_set, m, cfg.train.precision);
  const DescriptorDatabase queries = build_database(model, q_set, m, cfg.train.precision);
  EvalReport rep;
  for (std::size_t n : {1, 5, 10})
    rep.metrics.push_back({"recall@" + std::to_string(n), n, recall_at_n(db, queries, n, cfg.recall_radius)});
  rep.metrics.push_back({"ar@1%", one_percent_n(db.size()), ar_at_1pct(db, queries, cfg.recall_radius)});
  std::ostringstream text;
  write_report(text, rep);
  emit(out, cfg.out, text.str());
  if (!cfg.ranking.empty()) {
    std::ostringstream r;
    write_ranking(r, rank_queries(db, queries, std::max<std::size_t>(25, one_percent_n(db.size()))));
    std::ofstream f(cfg.ranking, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + cfg.ranking + "'");
    f << r.str();
  }
  return kExitOk;
}

int cmd_diagnose(const RunConfig& cfg, std::ostream& out) {
  Model model = load_model(cfg.checkpoint);
  const Dataset all = load_data(cfg.data, "training");
  Dataset train, val;
  if (!cfg.val_data.empty()) {
    const Dataset v = load_data(cfg.val_data, "validation");
    val = select_traversals(v, cfg.val_traversals, range(0, std::max(0, v.max_traversal())), "validation traversals");
    train = select_traversals(all, cfg.train_traversals, range(0, std::max(0, all.max_traversal())), "training traversals");
  } else {
    if (cfg.val_traversals == "auto")
      throw std::invalid_argument("no validation set: pass --val-data or --val-traversals");
    val = select_traversals(all, cfg.val_traversals, {}, "validation traversals");
    const auto vt = parse_traversals(cfg.val_traversals, all.max_traversal(), {});
    std::vector<int> rest;
    for (int t = 0; t <= all.max_traversal(); ++t)
      if (std::find(vt.begin(), vt.end(), t) == vt.end()) rest.push_back(t);
    train = select_traversals(all, cfg.train_traversals, rest, "training traversals");
  }
  DiagnosticConfig dc = cfg.diagnostic;
  dc.seed = cfg.train.seed;
  dc.precision = cfg.train.precision;
  dc.similarity = cfg.train.similarity;
  EvalReport rep;
  rep.active = modality_diagnostic(model, train, val, cfg.train.loss, dc);
  std::ostringstream text;
  write_report(text, rep);
  emit(out, cfg.out, text.str());
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, const std::string& op, double eps, double tolerance, std::ostream& out) {
  if (cfg.train.precision != Precision::f64) throw std::invalid_argument("gradcheck runs in 64-bit; use --precision f64");
  const auto results = run_gradient_suite(op, eps, tolerance, cfg.train.seed);
  std::ostringstream text;
  text << "check\tmax_rel_error\tresult\n";
  std::size_t passed = 0;
  for (const auto& r : results) {
    text << r.check << '\t' << fmt("%.3e", r.result.max_relative_error) << '\t' << (r.passed ? "PASS" : "FAIL") << '\n';
    passed += r.passed;
  }
  text << passed << "/" << results.size() << " checks passed (eps " << fmt("%g", eps) << ", tolerance " << fmt("%g", tolerance)
       << ")\n";
  emit(out, cfg.out, text.str());
  return passed == results.size() ? kExitOk : kExitNumeric;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal point-cloud and image place recognition", "fuseloc"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(40);

  const std::vector<std::string> common = {"seed", "threads", "precision", "out"};

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-traversal dataset");
  Bindings gen_b(gen);
  gen_b.add(common);
  gen_b.add({"places", "traversals", "spacing", "points", "image_width", "image_height", "image_variants", "spurious_rgb",
             "spurious_traversals"});

  auto* train = app.add_subcommand("train", "Train a model and write checkpoints plus a batch log");
  Bindings train_b(train);
  train_b.add(common);
  train_b.add({"data", "checkpoint", "save_every", "train_traversals", "test_region"});
  train_b.add("places_limit", "--places");
  train_b.add(kNetworkKeys);
  train_b.add(kTrainKeys);

  auto* eval = app.add_subcommand("eval", "Evaluate retrieval recall of a checkpoint");
  Bindings eval_b(eval);
  eval_b.add(common);
  eval_b.add({"data", "checkpoint", "modality", "ranking", "db_traversals", "query_traversals", "test_region", "recall_radius"});
  eval_b.add(kNetworkKeys);

  auto* diag = app.add_subcommand("diagnose", "Count active triplets per modality on train and validation data");
  Bindings diag_b(diag);
  diag_b.add(common);
  diag_b.add({"data", "val_data", "checkpoint", "train_traversals", "val_traversals", "diag_batch_size", "diag_batches", "margin",
              "positive_radius", "negative_radius"});

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  Bindings grad_b(grad);
  grad_b.add({"seed", "threads", "out"});
  std::string grad_precision = "f64";
  grad->add_option("--precision", grad_precision, "gradient checks always run in f64")->capture_default_str();
  std::string op;
  double eps = 1e-5, tolerance = 1e-5;
  std::string ops_help = "single op family:";
  for (const auto& o : gradient_suite_ops()) ops_help += " " + o;
  grad->add_option("--op", op, ops_help);
  grad->add_option("--eps", eps, "central-difference step")->capture_default_str();
  grad->add_option("--tolerance", tolerance, "maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (gen->parsed()) {
      const RunConfig cfg = gen_b.resolve();
      apply_threads(cfg);
      return cmd_gen_data(cfg, out);
    }
    if (train->parsed()) {
      const RunConfig cfg = train_b.resolve();
      apply_threads(cfg);
      return cmd_train(cfg, out, err);
    }
    if (eval->parsed()) {
      const RunConfig cfg = eval_b.resolve();
      apply_threads(cfg);
      return cmd_eval(cfg, out);
    }
    if (diag->parsed()) {
      const RunConfig cfg = diag_b.resolve();
      apply_threads(cfg);
      return cmd_diagnose(cfg, out);
    }
    RunConfig cfg = grad_b.resolve();
    cfg.set("precision", grad_precision);
    apply_threads(cfg);
    return cmd_gradcheck(cfg, op, eps, tolerance, out);
  } catch (const ArtifactError& e) {
    err << "error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace fuseloc

#pragma once

// Flat key = value run configuration shared by the command-line tools.

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "fuseloc/dataset.hpp"
#include "fuseloc/evaluation.hpp"
#include "fuseloc/model.hpp"
#include "fuseloc/train.hpp"

namespace fuseloc {

struct RunConfig {
  NetworkConfig network;
  TrainConfig train;  // loss, optimizer, augmentation, batch sizing, similarity, seed, precision
  SyntheticConfig synthetic;
  DiagnosticConfig diagnostic;

  int threads = 0;  // 0: hardware concurrency
  double recall_radius = 25.0;
  int save_every = 0;
  int places_limit = 0;  // train on the first N places only; 0 = all
  std::string modality = "fused";
  std::string data, val_data, out, checkpoint, ranking;
  // Traversal selections: "auto", "all" or a comma list like "0,1".
  std::string train_traversals = "auto", val_traversals = "auto";
  std::string db_traversals = "auto", query_traversals = "auto";
  std::string test_region;  // "min_e,min_n,max_e,max_n"; empty for none

  // Keys assigned through set(), from a config file or a flag.
  std::set<std::string> explicit_keys;

  RunConfig();

  struct Field {
    std::string key;
    std::string help;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };
  /// Every configurable key, bound to this object.
  std::vector<Field> fields();

  /// Throws std::invalid_argument for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key);
  void load_file(const std::string& path);
  /// Fills in dependent defaults: an unset lr_drop_epoch beyond the run
  /// length is clamped to `epochs`, which disables the drop.
  void finalize();
  void validate() const;
};

/// Parses "all", "auto" or a comma list; "auto" resolves to `fallback`.
std::vector<int> parse_traversals(const std::string& text, int max_traversal, const std::vector<int>& fallback);
Rect parse_rect(const std::string& text);

}  // namespace fuseloc

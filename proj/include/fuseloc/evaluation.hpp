#pragma once

// Descriptor databases, exhaustive retrieval, recall metrics and the
// per-modality active-triplet diagnostic.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fuseloc/dataset.hpp"
#include "fuseloc/metric.hpp"
#include "fuseloc/model.hpp"

namespace fuseloc {

struct DbEntry {
  std::string id;
  Position position;
  std::vector<double> descriptor;
};

class DescriptorDatabase {
 public:
  explicit DescriptorDatabase(std::size_t width = 0) : width_(width) {}

  void add(DbEntry e);
  std::size_t size() const { return entries_.size(); }
  std::size_t width() const { return width_; }
  const std::vector<DbEntry>& entries() const { return entries_; }
  const DbEntry* find(const std::string& id) const;

 private:
  std::size_t width_;
  std::vector<DbEntry> entries_;
};

/// Eval-mode forward of every element with its primary image, no
/// augmentation. Throws naming the element on a non-finite descriptor.
DescriptorDatabase build_database(Model& model, const Dataset& data, Modality modality,
                                  Precision precision = Precision::f64, std::size_t batch_size = 16);

struct Neighbor {
  std::string id;
  double distance = 0.0;
  Position position;
};

/// The n nearest entries by Euclidean distance, ties by id; the full ranking
/// when n exceeds the database size.
std::vector<Neighbor> query_top_n(const DescriptorDatabase& db, std::span<const double> descriptor, std::size_t n);

/// Fraction of queries with any of their top n within radius_m.
double recall_at_n(const DescriptorDatabase& db, const DescriptorDatabase& queries, std::size_t n, double radius_m = 25.0);

std::size_t one_percent_n(std::size_t db_size);
double ar_at_1pct(const DescriptorDatabase& db, const DescriptorDatabase& queries, double radius_m = 25.0);

struct RankingRow {
  std::string query_id;
  Position position;
  std::vector<Neighbor> top;
};

std::vector<RankingRow> rank_queries(const DescriptorDatabase& db, const DescriptorDatabase& queries, std::size_t n = 25);
void write_ranking(std::ostream& out, const std::vector<RankingRow>& rows);
std::vector<RankingRow> read_ranking(std::istream& in);

struct ActiveTripletReport {
  double pc_train = 0.0, rgb_train = 0.0;
  double pc_val = 0.0, rgb_val = 0.0;
  std::size_t train_batches = 0, val_batches = 0;

  double delta_train() const { return rgb_train - pc_train; }
  double delta_val() const { return rgb_val - pc_val; }
};

struct DiagnosticConfig {
  std::size_t batch_size = 16;
  std::size_t batches = 10;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  SimilarityConfig similarity;
};

/// Mean active-triplet counts on the point-cloud and image descriptor spaces,
/// mined separately, over sampled train and val batches. Eval mode; leaves
/// the model untouched.
ActiveTripletReport modality_diagnostic(Model& model, const Dataset& train, const Dataset& val, const LossConfig& loss,
                                        const DiagnosticConfig& cfg);

struct MetricRow {
  std::string metric;
  std::size_t n = 0;
  double value = 0.0;
};

struct EvalReport {
  std::vector<MetricRow> metrics;
  std::optional<ActiveTripletReport> active;
};

void write_report(std::ostream& out, const EvalReport& report);
EvalReport parse_report(std::istream& in);

}  // namespace fuseloc

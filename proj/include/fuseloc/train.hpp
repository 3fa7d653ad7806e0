#pragma once

// The training loop: place-group batches, per-head batch-hard mining, the
// weighted multi-head objective and dynamic batch sizing.

#include <iosfwd>
#include <random>
#include <vector>

#include "fuseloc/dataset.hpp"
#include "fuseloc/metric.hpp"
#include "fuseloc/model.hpp"
#include "fuseloc/optim.hpp"

namespace fuseloc {

struct TrainConfig {
  int epochs = 50;
  LossConfig loss;
  OptimizerConfig optim;
  AugmentationConfig augmentation;
  bool augment = true;
  BatchController batch;
  SimilarityConfig similarity;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  int max_resample = 10;

  void validate() const;
};

/// Draws batches of ceil(B/2) places with two elements each (more per place
/// when the dataset has too few places), walking a shuffled place order.
class BatchSampler {
 public:
  BatchSampler(const Dataset& data, const SimilarityConfig& similarity);

  std::size_t place_count() const { return places_.size(); }
  std::vector<std::size_t> next(std::size_t batch_size, std::mt19937_64& rng);

 private:
  std::vector<std::vector<std::size_t>> places_;  // only places with >= 2 elements
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct BatchRecord {
  int epoch = 0;
  int batch = 0;
  std::size_t size = 0;
  LossBreakdown loss;
  double lr = 0.0;
  bool stepped = false;
};

struct EpochSummary {
  int epoch = 0;
  std::size_t batches = 0;
  LossBreakdown mean;  // per-batch means of losses and active counts
  std::size_t final_batch_size = 0;
};

class Trainer {
 public:
  Trainer(Model& model, const Dataset& train, TrainConfig cfg);

  const TrainConfig& config() const { return cfg_; }
  const BatchController& controller() const { return ctrl_; }

  /// Header line plus a comment echoing the key hyperparameters.
  void write_log_header(std::ostream& log) const;

  /// One pass over roughly the dataset size in elements; 0-based epoch.
  EpochSummary run_epoch(int epoch, std::ostream* log = nullptr);

  BatchRecord train_batch(const std::vector<std::size_t>& indices, int epoch, int batch_no);

 private:
  Model& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  Adam adam_;
  BatchController ctrl_;
  BatchSampler sampler_;
  std::mt19937_64 rng_;
};

void write_log_line(std::ostream& log, const BatchRecord& r);

}  // namespace fuseloc

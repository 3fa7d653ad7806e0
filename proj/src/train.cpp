#include "fuseloc/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace fuseloc {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  loss.validate();
  optim.validate();
  augmentation.validate();
  batch.validate();
  similarity.validate();
  if (max_resample < 1) throw std::invalid_argument("max_resample must be >= 1");
}

BatchSampler::BatchSampler(const Dataset& data, const SimilarityConfig& similarity) {
  for (auto& g : cluster_places(data.positions(), similarity.positive_radius))
    if (g.size() >= 2) places_.push_back(std::move(g));
  if (places_.empty()) throw std::invalid_argument("training data has no place with two or more elements");
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size, std::mt19937_64& rng) {
  std::size_t available = 0;
  for (const auto& p : places_) available += p.size();
  batch_size = std::min(batch_size, available);
  const std::size_t n_places = std::min((batch_size + 1) / 2, places_.size());
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < n_places; ++i) {
    if (cursor_ >= order_.size()) {
      order_.resize(places_.size());
      for (std::size_t k = 0; k < order_.size(); ++k) order_[k] = k;
      std::shuffle(order_.begin(), order_.end(), rng);
      cursor_ = 0;
    }
    const std::size_t p = order_[cursor_++];
    if (std::find(chosen.begin(), chosen.end(), p) != chosen.end()) {
      --i;  // place repeated across a reshuffle boundary
      if (chosen.size() == places_.size()) break;
      continue;
    }
    chosen.push_back(p);
  }
  // Shuffled members per chosen place; take two from each, then top up
  // round-robin when the batch is larger than 2 * places.
  std::vector<std::vector<std::size_t>> members;
  for (auto p : chosen) {
    auto m = places_[p];
    std::shuffle(m.begin(), m.end(), rng);
    members.push_back(std::move(m));
  }
  std::vector<std::size_t> out;
  for (std::size_t round = 0; out.size() < batch_size; ++round) {
    bool any = false;
    for (const auto& m : members) {
      const std::size_t take = round == 0 ? 2 : 1;
      const std::size_t start = round == 0 ? 0 : round + 1;
      for (std::size_t k = start; k < start + take && k < m.size() && out.size() < batch_size; ++k) {
        out.push_back(m[k]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

Trainer::Trainer(Model& model, const Dataset& train, TrainConfig cfg)
    : model_(model),
      data_(train),
      cfg_(std::move(cfg)),
      adam_(cfg_.optim),
      ctrl_(cfg_.batch),
      sampler_(train, cfg_.similarity),
      rng_(cfg_.seed) {
  cfg_.validate();
  if (train.clouds.size() != train.size() || train.images.size() != train.size())
    throw std::invalid_argument("training dataset is not loaded");
  model_.params().round_to(cfg_.precision);
}

void Trainer::write_log_header(std::ostream& log) const {
  log << "# alpha=" << cfg_.loss.alpha << " beta=" << cfg_.loss.beta << " margin=" << cfg_.loss.margin
      << " batch_start=" << cfg_.batch.current_size << " batch_max=" << cfg_.batch.max_size
      << " lr_main=" << cfg_.optim.lr_main << " lr_image=" << cfg_.optim.lr_image_branch
      << " weight_decay=" << cfg_.optim.weight_decay << " epochs=" << cfg_.epochs << " seed=" << cfg_.seed
      << " precision=" << to_string(cfg_.precision) << "\n";
  log << "epoch\tbatch\tbatch_size\tL_F\tL_PC\tL_RGB\tactive_F\tactive_PC\tactive_RGB\tlr\ttotal\n";
}

void write_log_line(std::ostream& log, const BatchRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d\t%d\t%zu\t%.9f\t%.9f\t%.9f\t%d\t%d\t%d\t%.3e\t%.9f\n", r.epoch, r.batch, r.size,
                r.loss.L_F, r.loss.L_PC, r.loss.L_RGB, r.loss.active_F, r.loss.active_PC, r.loss.active_RGB, r.lr,
                r.loss.total);
  log << buf;
}

BatchRecord Trainer::train_batch(const std::vector<std::size_t>& indices, int epoch, int batch_no) {
  std::vector<PointCloud> clouds;
  std::vector<Image> images;
  std::vector<Position> positions;
  for (auto i : indices) {
    const auto& variants = data_.images[i];
    const auto v = std::uniform_int_distribution<std::size_t>(0, variants.size() - 1)(rng_);
    if (cfg_.augment) {
      clouds.push_back(augment_cloud(data_.clouds[i], cfg_.augmentation, rng_));
      images.push_back(augment_image(variants[v], cfg_.augmentation, rng_));
    } else {
      clouds.push_back(data_.clouds[i]);
      images.push_back(variants[v]);
    }
    positions.push_back(data_.elements[i].position);
  }
  std::vector<const PointCloud*> cp;
  std::vector<const Image*> ip;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    cp.push_back(&clouds[k]);
    ip.push_back(&images[k]);
  }

  // Batch-norm buffers are restored if the batch ends up not stepping.
  std::vector<std::vector<double>> buffers;
  for (const Parameter& p : model_.params())
    if (!p.trainable) buffers.push_back(p.value);

  Tape tape(cfg_.precision, true);
  const Descriptors d = model_.forward(tape, cp, ip);
  const PairMasks masks = similarity_masks(positions, cfg_.similarity);
  const std::size_t B = indices.size();

  auto head = [&](Var desc) {
    const auto dist = descriptor_distances(desc.value(), B, desc.shape()[1]);
    const auto triplets = batch_hard_mine(dist, masks);
    return triplet_margin_loss(desc, triplets, cfg_.loss.margin);
  };
  const TripletLoss lf = head(d.fused), lpc = head(d.pc), lrgb = head(d.rgb);
  auto summary = [](const TripletLoss& t) { return HeadLoss{t.loss.item(), t.active, t.triplets}; };

  BatchRecord rec;
  rec.epoch = epoch;
  rec.batch = batch_no;
  rec.size = B;
  rec.loss = multi_head_loss(summary(lf), summary(lpc), summary(lrgb), cfg_.loss);
  rec.lr = adam_.learning_rate(ParamGroup::main, epoch);
  if (!std::isfinite(rec.loss.total)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));

  Var total;
  auto accumulate = [&](double w, const TripletLoss& t) {
    if (w == 0.0 || t.triplets == 0) return;
    Var term = scale(t.loss, w);
    total = total.valid() ? add(total, term) : term;
  };
  accumulate(cfg_.loss.fused_weight(), lf);
  accumulate(cfg_.loss.alpha, lpc);
  accumulate(cfg_.loss.beta, lrgb);

  if (total.valid() && total.requires_grad()) {
    model_.params().zero_grad();
    tape.backward(total);
    adam_.step(model_.params(), epoch, cfg_.precision);
    rec.stepped = true;
  } else {
    std::size_t k = 0;
    for (Parameter& p : model_.params())
      if (!p.trainable) p.value = buffers[k++];
  }
  ctrl_.update(static_cast<std::size_t>(rec.loss.active_F));
  return rec;
}

EpochSummary Trainer::run_epoch(int epoch, std::ostream* log) {
  EpochSummary s;
  s.epoch = epoch;
  std::size_t seen = 0;
  int batch_no = 0;
  double lf = 0, lpc = 0, lrgb = 0, af = 0, apc = 0, argb = 0, total = 0;
  while (seen < data_.size()) {
    std::vector<std::size_t> batch;
    for (int attempt = 0;; ++attempt) {
      batch = sampler_.next(ctrl_.current_size, rng_);
      std::vector<Position> pos;
      for (auto i : batch) pos.push_back(data_.elements[i].position);
      if (batch.size() >= 2 && similarity_masks(pos, cfg_.similarity).any_positive()) break;
      if (attempt + 1 >= cfg_.max_resample) throw std::runtime_error("could not sample a batch containing a positive pair");
    }
    const BatchRecord r = train_batch(batch, epoch, batch_no++);
    if (log) write_log_line(*log, r);
    seen += r.size;
    lf += r.loss.L_F;
    lpc += r.loss.L_PC;
    lrgb += r.loss.L_RGB;
    af += r.loss.active_F;
    apc += r.loss.active_PC;
    argb += r.loss.active_RGB;
    total += r.loss.total;
  }
  s.batches = static_cast<std::size_t>(batch_no);
  const double n = static_cast<double>(s.batches);
  s.mean.L_F = lf / n;
  s.mean.L_PC = lpc / n;
  s.mean.L_RGB = lrgb / n;
  s.mean.active_F = static_cast<int>(std::lround(af / n));
  s.mean.active_PC = static_cast<int>(std::lround(apc / n));
  s.mean.active_RGB = static_cast<int>(std::lround(argb / n));
  s.mean.total = total / n;
  s.final_batch_size = ctrl_.current_size;
  return s;
}

}  // namespace fuseloc

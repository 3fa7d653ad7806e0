#include "fuseloc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "fuseloc/train.hpp"

namespace fuseloc {

void DescriptorDatabase::add(DbEntry e) {
  if (entries_.empty() && width_ == 0) width_ = e.descriptor.size();
  if (e.descriptor.size() != width_)
    throw ShapeError("DescriptorDatabase::add", "width",
                     "descriptor width " + std::to_string(e.descriptor.size()) + " vs database " + std::to_string(width_));
  if (find(e.id)) throw std::invalid_argument("duplicate database id '" + e.id + "'");
  entries_.push_back(std::move(e));
}

const DbEntry* DescriptorDatabase::find(const std::string& id) const {
  for (const auto& e : entries_)
    if (e.id == id) return &e;
  return nullptr;
}

DescriptorDatabase build_database(Model& model, const Dataset& data, Modality modality, Precision precision,
                                  std::size_t batch_size) {
  if (data.size() == 0) throw std::invalid_argument("cannot build a database from no elements");
  if (data.clouds.size() != data.size()) throw std::invalid_argument("dataset is not loaded");
  DescriptorDatabase db;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(data.size(), lo + batch_size);
    std::vector<const PointCloud*> cp;
    std::vector<const Image*> ip;
    for (std::size_t i = lo; i < hi; ++i) {
      cp.push_back(&data.clouds[i]);
      ip.push_back(&data.images[i][0]);
    }
    Tape tape(precision, false);
    const Var d = select(model.forward(tape, cp, ip), modality);
    const std::size_t W = d.shape()[1];
    auto v = d.value();
    for (std::size_t i = lo; i < hi; ++i) {
      std::vector<double> row(v.begin() + static_cast<std::ptrdiff_t>((i - lo) * W),
                              v.begin() + static_cast<std::ptrdiff_t>((i - lo + 1) * W));
      for (double x : row)
        if (!std::isfinite(x)) throw NumericError("non-finite descriptor for element '" + data.elements[i].id + "'");
      db.add({data.elements[i].id, data.elements[i].position, std::move(row)});
    }
  }
  return db;
}

std::vector<Neighbor> query_top_n(const DescriptorDatabase& db, std::span<const double> q, std::size_t n) {
  if (n == 0) throw std::invalid_argument("n must be >= 1");
  if (q.size() != db.width())
    throw ShapeError("query_top_n", "width", "query width " + std::to_string(q.size()) + " vs database " + std::to_string(db.width()));
  std::vector<Neighbor> all;
  all.reserve(db.size());
  for (const auto& e : db.entries()) {
    double s = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) {
      const double t = q[c] - e.descriptor[c];
      s += t * t;
    }
    all.push_back({e.id, std::sqrt(s), e.position});
  }
  auto less = [](const Neighbor& a, const Neighbor& b) { return a.distance != b.distance ? a.distance < b.distance : a.id < b.id; };
  n = std::min(n, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), less);
  all.resize(n);
  return all;
}

double recall_at_n(const DescriptorDatabase& db, const DescriptorDatabase& queries, std::size_t n, double radius_m) {
  if (queries.size() == 0) throw std::invalid_argument("empty query set");
  std::size_t hits = 0;
  for (const auto& q : queries.entries()) {
    for (const auto& nb : query_top_n(db, q.descriptor, n))
      if (planar_distance(nb.position, q.position) <= radius_m) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

std::size_t one_percent_n(std::size_t db_size) { return std::max<std::size_t>(1, db_size / 100); }

double ar_at_1pct(const DescriptorDatabase& db, const DescriptorDatabase& queries, double radius_m) {
  if (db.size() == 0) throw std::invalid_argument("empty database");
  return recall_at_n(db, queries, one_percent_n(db.size()), radius_m);
}

std::vector<RankingRow> rank_queries(const DescriptorDatabase& db, const DescriptorDatabase& queries, std::size_t n) {
  std::vector<RankingRow> rows;
  for (const auto& q : queries.entries()) rows.push_back({q.id, q.position, query_top_n(db, q.descriptor, n)});
  return rows;
}

namespace {
std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}
}  // namespace

// One line per (query, rank): query id, its position, rank, entry id, distance, entry position.
void write_ranking(std::ostream& out, const std::vector<RankingRow>& rows) {
  out << "query\tquery_easting\tquery_northing\trank\tid\tdistance\teasting\tnorthing\n";
  for (const auto& r : rows)
    for (std::size_t k = 0; k < r.top.size(); ++k) {
      const auto& nb = r.top[k];
      out << r.query_id << '\t' << fmt("%.3f", r.position.easting) << '\t' << fmt("%.3f", r.position.northing) << '\t'
          << k + 1 << '\t' << nb.id << '\t' << fmt("%.9e", nb.distance) << '\t' << fmt("%.3f", nb.position.easting)
          << '\t' << fmt("%.3f", nb.position.northing) << '\n';
    }
}

std::vector<RankingRow> read_ranking(std::istream& in) {
  std::vector<RankingRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string qid;
    Position qp;
    std::size_t rank;
    Neighbor nb;
    if (!(ss >> qid >> qp.easting >> qp.northing >> rank >> nb.id >> nb.distance >> nb.position.easting >> nb.position.northing))
      throw std::runtime_error("malformed ranking line: " + line);
    if (rows.empty() || rows.back().query_id != qid) rows.push_back({qid, qp, {}});
    rows.back().top.push_back(nb);
  }
  return rows;
}

ActiveTripletReport modality_diagnostic(Model& model, const Dataset& train, const Dataset& val, const LossConfig& loss,
                                        const DiagnosticConfig& cfg) {
  loss.validate();
  if (val.size() == 0) throw std::invalid_argument("validation set is empty");
  if (train.size() == 0) throw std::invalid_argument("training set is empty");
  ActiveTripletReport rep;
  auto run = [&](const Dataset& data, double& pc, double& rgb, std::size_t& count) {
    BatchSampler sampler(data, cfg.similarity);
    std::mt19937_64 rng(cfg.seed);
    for (std::size_t b = 0; b < cfg.batches; ++b) {
      const auto idx = sampler.next(cfg.batch_size, rng);
      std::vector<const PointCloud*> cp;
      std::vector<const Image*> ip;
      std::vector<Position> pos;
      for (auto i : idx) {
        cp.push_back(&data.clouds[i]);
        ip.push_back(&data.images[i][0]);
        pos.push_back(data.elements[i].position);
      }
      Tape tape(cfg.precision, false);
      const Descriptors d = model.forward(tape, cp, ip);
      const PairMasks masks = similarity_masks(pos, cfg.similarity);
      auto active = [&](Var desc) {
        const auto dist = descriptor_distances(desc.value(), idx.size(), desc.shape()[1]);
        const auto triplets = batch_hard_mine(dist, masks);
        return triplet_margin_loss(desc, triplets, loss.margin).active;
      };
      pc += active(d.pc);
      rgb += active(d.rgb);
      ++count;
    }
    pc /= static_cast<double>(count);
    rgb /= static_cast<double>(count);
  };
  run(train, rep.pc_train, rep.rgb_train, rep.train_batches);
  run(val, rep.pc_val, rep.rgb_val, rep.val_batches);
  return rep;
}

void write_report(std::ostream& out, const EvalReport& report) {
  out << "metric\tn\tvalue\n";
  for (const auto& m : report.metrics) out << m.metric << '\t' << m.n << '\t' << fmt("%.6f", m.value) << '\n';
  if (report.active) {
    const auto& a = *report.active;
    out << "\n[active_triplets]\n";
    out << "split\tpc\trgb\tdelta\tbatches\n";
    out << "train\t" << fmt("%.3f", a.pc_train) << '\t' << fmt("%.3f", a.rgb_train) << '\t' << fmt("%.3f", a.delta_train())
        << '\t' << a.train_batches << '\n';
    out << "val\t" << fmt("%.3f", a.pc_val) << '\t' << fmt("%.3f", a.rgb_val) << '\t' << fmt("%.3f", a.delta_val()) << '\t'
        << a.val_batches << '\n';
  }
}

EvalReport parse_report(std::istream& in) {
  EvalReport r;
  std::string line;
  if (!std::getline(in, line) || line != "metric\tn\tvalue") throw std::runtime_error("report: missing metric header");
  bool in_block = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line == "[active_triplets]") {
      in_block = true;
      r.active.emplace();
      if (!std::getline(in, line) || line != "split\tpc\trgb\tdelta\tbatches")
        throw std::runtime_error("report: missing active-triplet header");
      continue;
    }
    std::istringstream ss(line);
    if (!in_block) {
      MetricRow m;
      if (!(ss >> m.metric >> m.n >> m.value)) throw std::runtime_error("report: malformed metric line: " + line);
      r.metrics.push_back(m);
      continue;
    }
    std::string split;
    double pc, rgb, delta;
    std::size_t batches;
    if (!(ss >> split >> pc >> rgb >> delta >> batches)) throw std::runtime_error("report: malformed active line: " + line);
    if (split == "train") {
      r.active->pc_train = pc;
      r.active->rgb_train = rgb;
      r.active->train_batches = batches;
    } else if (split == "val") {
      r.active->pc_val = pc;
      r.active->rgb_val = rgb;
      r.active->val_batches = batches;
    } else {
      throw std::runtime_error("report: unknown split '" + split + "'");
    }
  }
  return r;
}

}  // namespace fuseloc

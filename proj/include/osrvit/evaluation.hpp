#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "osrvit/checkpoint.hpp"
#include "osrvit/data.hpp"
#include "osrvit/osr.hpp"
#include "osrvit/training.hpp"

namespace osrvit {

struct ScoredExample {
  double score = 0.0;
  Openness tag = Openness::known;
  int predicted = 0;
  int true_label = 0;  // original label in the source dataset
};

/// Fraction of positions where prediction and truth agree.
inline double top1_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("top1_accuracy: prediction/label counts differ");
  if (predicted.empty()) throw ProtocolError("top1_accuracy: no known-class examples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

/// Twice the Mann–Whitney count: 2 per (known, unknown) pair with
/// s_known < s_unknown, 1 per tied pair. Sort-based, O(n log n).
inline std::uint64_t auroc_half_count(std::span<const double> known, std::span<const double> unknown) {
  std::vector<double> k(known.begin(), known.end()), u(unknown.begin(), unknown.end());
  std::sort(k.begin(), k.end());
  std::sort(u.begin(), u.end());
  std::uint64_t total = 0;
  std::size_t below = 0;  // knowns strictly less than the current unknown score
  for (std::size_t j = 0; j < u.size();) {
    const double s = u[j];
    std::size_t j_end = j;
    while (j_end < u.size() && u[j_end] == s) ++j_end;
    while (below < k.size() && k[below] < s) ++below;
    std::size_t equal_end = below;
    while (equal_end < k.size() && k[equal_end] == s) ++equal_end;
    const std::uint64_t group = j_end - j;
    total += group * (2 * static_cast<std::uint64_t>(below) + (equal_end - below));
    j = j_end;
  }
  return total;
}

/// P(s_known < s_unknown) with ties counted 1/2.
inline double auroc(std::span<const double> known, std::span<const double> unknown) {
  if (known.empty() || unknown.empty()) {
    throw ProtocolError("auroc needs at least one known and one unknown example");
  }
  for (double s : known)
    if (!std::isfinite(s)) throw ContractError("auroc: non-finite known score");
  for (double s : unknown)
    if (!std::isfinite(s)) throw ContractError("auroc: non-finite unknown score");
  const double pairs = 2.0 * static_cast<double>(known.size()) * static_cast<double>(unknown.size());
  return static_cast<double>(auroc_half_count(known, unknown)) / pairs;
}

inline double auroc(std::span<const ScoredExample> scored) {
  std::vector<double> known, unknown;
  for (const auto& s : scored) (s.tag == Openness::known ? known : unknown).push_back(s.score);
  return auroc(known, unknown);
}

// ---------------------------------------------------------------------------
// Scoring spaces
// ---------------------------------------------------------------------------

enum class ScoringSpace {
  detection,  // trained detection head, distance to the predicted class's center
  feature,    // stage-1 features, distance to the predicted class's feature-space center
  untrained,  // freshly initialized model, distance to the nearest feature-space center
};

inline std::string to_string(ScoringSpace s) {
  switch (s) {
    case ScoringSpace::detection: return "detection";
    case ScoringSpace::feature: return "feature";
    case ScoringSpace::untrained: return "untrained";
  }
  return "?";
}

inline ScoringSpace parse_scoring_space(const std::string& s) {
  if (s == "detection") return ScoringSpace::detection;
  if (s == "feature") return ScoringSpace::feature;
  if (s == "untrained") return ScoringSpace::untrained;
  throw ConfigError("unknown scoring space '" + s + "' (expected detection, feature or untrained)");
}

template <class T>
struct ScoredBatch {
  std::vector<int> predicted;
  std::vector<double> scores;
  std::vector<T> embeddings;  // B×D
};

/// Everything needed to score images in one space: a model, a linear map into
/// the scoring space and the class centers there.
template <class T>
class Scorer {
 public:
  Scorer(VitModel<T> model, DetectionHead<T> head, ClassCenters<T> centers, ScoringSpace space)
      : model_(std::move(model)), head_(std::move(head)), centers_(std::move(centers)), space_(space) {}

  /// Detection space needs a stage-2 checkpoint. The other spaces anchor
  /// centers as class means of the features of `train` (no augmentation).
  static Scorer build(const Checkpoint<T>& ck, ScoringSpace space, const Stream& train) {
    const ModelConfig& c = ck.config();
    if (space == ScoringSpace::detection) {
      if (ck.meta.stage != 2 || !ck.head) throw ProtocolError("detection-space scoring needs a stage-2 checkpoint");
      return Scorer(ck.model, *ck.head, ck.centers, space);
    }
    VitModel<T> model = space == ScoringSpace::feature ? ck.model : VitModel<T>::init(c, ck.meta.seed);
    DetectionHead<T> identity = DetectionHead<T>::init(c.dim, DetectionInit::identity, 0);
    const std::vector<T> feats = compute_features(model, train);
    ClassCenters<T> centers = class_means<T>(feats, train.labels(), c.num_classes);
    return Scorer(std::move(model), std::move(identity), std::move(centers), space);
  }

  ScoringSpace space() const { return space_; }
  const VitModel<T>& model() const { return model_; }
  const ClassCenters<T>& centers() const { return centers_; }
  std::size_t dim() const { return head_.dim(); }

  ScoredBatch<T> score(std::span<const float> images, std::size_t batch) const {
    Tensor<T> f = model_.features(images, batch);
    Tensor<T> e = detect_embed(f, head_);
    ScoredBatch<T> out;
    const std::size_t d = dim();
    out.embeddings.assign(e.values().begin(), e.values().end());
    std::vector<int> labels;
    if (space_ != ScoringSpace::untrained) labels = model_.classify_features(f).labels;
    for (std::size_t i = 0; i < batch; ++i) {
      std::span<const T> row(out.embeddings.data() + i * d, d);
      if (space_ == ScoringSpace::untrained) {
        const NearestCenter<T> nc = nearest_center(row, centers_);
        out.predicted.push_back(nc.label);
        out.scores.push_back(static_cast<double>(nc.score));
      } else {
        out.predicted.push_back(labels[i]);
        out.scores.push_back(static_cast<double>(anomaly_score<T>(row, labels[i], centers_)));
      }
    }
    return out;
  }

  /// Scores every example of `stream` in its test-order.
  std::vector<ScoredExample> score_stream(const Stream& stream, std::size_t batch_size = 256) const {
    std::vector<ScoredExample> out;
    out.reserve(stream.size());
    const std::size_t img = stream.image_size();
    for (std::size_t start = 0; start < stream.size(); start += batch_size) {
      const std::size_t b = std::min(batch_size, stream.size() - start);
      const ScoredBatch<T> sb = score(stream.pixels().subspan(start * img, b * img), b);
      for (std::size_t i = 0; i < b; ++i) {
        out.push_back({sb.scores[i], stream.tag(start + i), sb.predicted[i], stream.original_label(start + i)});
      }
    }
    return out;
  }

 private:
  VitModel<T> model_;
  DetectionHead<T> head_;
  ClassCenters<T> centers_;
  ScoringSpace space_;
};

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

struct TrialReport {
  std::string dataset;
  std::string protocol;
  std::uint64_t seed = 0;
  ScoringSpace space = ScoringSpace::detection;
  double accuracy = 0.0;
  double auroc = 0.0;
  std::size_t known_count = 0;
  std::size_t unknown_count = 0;
  double quantile = 0.95;
  double threshold = 0.0;
  std::size_t known_rejected = 0;
  std::size_t unknown_rejected = 0;

  bool operator==(const TrialReport&) const = default;
};

template <class T>
void check_consistent(const Checkpoint<T>& ck, const SplitSpec& split) {
  if (ck.config().num_classes != split.num_known()) {
    throw ProtocolError("checkpoint has K = " + std::to_string(ck.config().num_classes) + " but the split has " +
                        std::to_string(split.num_known()) + " known classes");
  }
  if (ck.meta.dataset != split.dataset || ck.meta.known != split.known) {
    throw ProtocolError("checkpoint was trained on a different split (" + ck.meta.dataset + ", seed " +
                        std::to_string(ck.meta.split_seed) + ")");
  }
}

/// Calibrates τ on the known training scores at `quantile`, then scores the
/// test stream: accuracy over its known part, AUROC over all of it.
template <class T>
TrialReport run_trial(const SplitSpec& split, const Scorer<T>& scorer, const Stream& train, const Stream& test,
                      double quantile = 0.95) {
  if (test.phase() != Phase::test) throw ProtocolError("run_trial: expects the test stream");
  std::vector<double> calibration;
  for (const auto& s : scorer.score_stream(train)) calibration.push_back(s.score);
  TrialReport r;
  r.dataset = split.dataset;
  r.protocol = split.protocol;
  r.seed = split.seed;
  r.space = scorer.space();
  r.quantile = quantile;
  r.threshold = calibrate_threshold(calibration, quantile);

  const std::vector<ScoredExample> scored = scorer.score_stream(test);
  std::vector<int> predicted, truth;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    const bool rejected = decide_from_score(scored[i].predicted, scored[i].score, r.threshold).verdict == Verdict::unknown;
    if (scored[i].tag == Openness::known) {
      ++r.known_count;
      r.known_rejected += rejected;
      predicted.push_back(scored[i].predicted);
      truth.push_back(test.label(i));
    } else {
      ++r.unknown_count;
      r.unknown_rejected += rejected;
    }
  }
  r.accuracy = top1_accuracy(predicted, truth);
  r.auroc = auroc(scored);
  return r;
}

template <class T>
TrialReport run_trial(const SplitSpec& split, const Checkpoint<T>& ck, const Stream& train, const Stream& test,
                      ScoringSpace space, double quantile = 0.95) {
  check_consistent(ck, split);
  const Scorer<T> scorer = Scorer<T>::build(ck, space, train);
  return run_trial(split, scorer, train, test, quantile);
}

struct AggregateReport {
  std::string dataset;
  std::string protocol;
  ScoringSpace space = ScoringSpace::detection;
  std::vector<TrialReport> trials;
  double mean_accuracy = 0.0;
  double mean_auroc = 0.0;
  double std_accuracy = 0.0;  // sample standard deviation, 0 for a single trial
  double std_auroc = 0.0;
};

inline AggregateReport aggregate(std::span<const TrialReport> trials) {
  if (trials.empty()) throw ProtocolError("aggregate: no trials");
  AggregateReport a;
  a.dataset = trials[0].dataset;
  a.protocol = trials[0].protocol;
  a.space = trials[0].space;
  for (const auto& t : trials) {
    if (t.dataset != a.dataset || t.protocol != a.protocol) {
      throw ProtocolError("aggregate: trials mix " + a.dataset + "/" + a.protocol + " with " + t.dataset + "/" +
                          t.protocol);
    }
    if (t.space != a.space) throw ProtocolError("aggregate: trials mix scoring spaces");
  }
  a.trials.assign(trials.begin(), trials.end());
  const double n = static_cast<double>(trials.size());
  for (const auto& t : trials) {
    a.mean_accuracy += t.accuracy;
    a.mean_auroc += t.auroc;
  }
  a.mean_accuracy /= n;
  a.mean_auroc /= n;
  if (trials.size() > 1) {
    double va = 0.0, vu = 0.0;
    for (const auto& t : trials) {
      va += (t.accuracy - a.mean_accuracy) * (t.accuracy - a.mean_accuracy);
      vu += (t.auroc - a.mean_auroc) * (t.auroc - a.mean_auroc);
    }
    a.std_accuracy = std::sqrt(va / (n - 1.0));
    a.std_auroc = std::sqrt(vu / (n - 1.0));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

inline constexpr const char* kTrialCsvHeader =
    "dataset,protocol,seed,space,accuracy,auroc,known,unknown,quantile,threshold,known_rejected,unknown_rejected";

namespace detail {

inline std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline void write_trial_row(std::ostream& out, const TrialReport& t) {
  out << t.dataset << ',' << t.protocol << ',' << t.seed << ',' << to_string(t.space) << ','
      << detail::exact(t.accuracy) << ',' << detail::exact(t.auroc) << ',' << t.known_count << ','
      << t.unknown_count << ',' << detail::exact(t.quantile) << ',' << detail::exact(t.threshold) << ','
      << t.known_rejected << ',' << t.unknown_rejected << '\n';
}

/// One row per trial, then "mean" and "std" rows (accuracy and AUROC only).
inline void write_report_csv(std::ostream& out, const AggregateReport& a) {
  out << kTrialCsvHeader << '\n';
  for (const auto& t : a.trials) write_trial_row(out, t);
  const std::string prefix = a.dataset + ',' + a.protocol + ',';
  out << prefix << "mean," << to_string(a.space) << ',' << detail::exact(a.mean_accuracy) << ','
      << detail::exact(a.mean_auroc) << ",,,,,,\n";
  out << prefix << "std," << to_string(a.space) << ',' << detail::exact(a.std_accuracy) << ','
      << detail::exact(a.std_auroc) << ",,,,,,\n";
}

/// Reads the per-trial rows of a report CSV, skipping summary rows.
inline std::vector<TrialReport> read_report_csv(std::istream& in, const std::string& source = "report") {
  std::string line;
  if (!std::getline(in, line) || line != kTrialCsvHeader) {
    throw ConfigError(source + ": missing or unexpected report header");
  }
  std::vector<TrialReport> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 12) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 12 columns");
    if (cells[2] == "mean" || cells[2] == "std") continue;
    try {
      TrialReport t;
      t.dataset = cells[0];
      t.protocol = cells[1];
      t.seed = std::stoull(cells[2]);
      t.space = parse_scoring_space(cells[3]);
      t.accuracy = std::stod(cells[4]);
      t.auroc = std::stod(cells[5]);
      t.known_count = std::stoull(cells[6]);
      t.unknown_count = std::stoull(cells[7]);
      t.quantile = std::stod(cells[8]);
      t.threshold = std::stod(cells[9]);
      t.known_rejected = std::stoull(cells[10]);
      t.unknown_rejected = std::stoull(cells[11]);
      out.push_back(t);
    } catch (const std::logic_error&) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": malformed report row");
    }
  }
  return out;
}

/// Human-readable table; accuracy and AUROC as percentages to one decimal.
inline void write_report_table(std::ostream& out, const AggregateReport& a) {
  auto pct = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << 100.0 * v;
    return s.str();
  };
  out << a.dataset << " / " << a.protocol << " / " << to_string(a.space) << " space\n";
  out << std::left << std::setw(8) << "seed" << std::right << std::setw(10) << "accuracy" << std::setw(9) << "AUROC"
      << std::setw(8) << "known" << std::setw(9) << "unknown" << std::setw(12) << "threshold" << '\n';
  for (const auto& t : a.trials) {
    std::ostringstream thr;
    thr << std::setprecision(4) << t.threshold;
    out << std::left << std::setw(8) << t.seed << std::right << std::setw(10) << pct(t.accuracy) << std::setw(9)
        << pct(t.auroc) << std::setw(8) << t.known_count << std::setw(9) << t.unknown_count << std::setw(12)
        << thr.str() << '\n';
  }
  out << std::left << std::setw(8) << "mean" << std::right << std::setw(10) << pct(a.mean_accuracy) << std::setw(9)
      << pct(a.mean_auroc) << '\n';
  out << std::left << std::setw(8) << "std" << std::right << std::setw(10) << pct(a.std_accuracy) << std::setw(9)
      << pct(a.std_auroc) << '\n';
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// Writes `num_known` known and `num_unknown` unknown test examples, sampled
/// without replacement by a seeded shuffle and listed in stream order. Columns:
/// tag, true_label, predicted, score, e0..e{D-1}.
template <class T>
void export_embeddings(const Scorer<T>& scorer, const Stream& test, std::size_t num_known, std::size_t num_unknown,
                       std::uint64_t seed, std::ostream& out) {
  std::vector<std::size_t> known, unknown;
  for (std::size_t i = 0; i < test.size(); ++i) (test.tag(i) == Openness::known ? known : unknown).push_back(i);
  if (num_known > known.size() || num_unknown > unknown.size()) {
    throw ConfigError("export_embeddings: asked for " + std::to_string(num_known) + " known / " +
                      std::to_string(num_unknown) + " unknown examples, the test set has " +
                      std::to_string(known.size()) + " / " + std::to_string(unknown.size()));
  }
  Rng rng = make_rng(seed, 0xe4b0'0001);
  seeded_shuffle(known, rng);
  seeded_shuffle(unknown, rng);
  std::vector<std::size_t> picked(known.begin(), known.begin() + static_cast<std::ptrdiff_t>(num_known));
  picked.insert(picked.end(), unknown.begin(), unknown.begin() + static_cast<std::ptrdiff_t>(num_unknown));
  std::sort(picked.begin(), picked.end());

  const std::size_t d = scorer.dim();
  out << "tag,true_label,predicted,score";
  for (std::size_t j = 0; j < d; ++j) out << ",e" << j;
  out << '\n';
  for (const std::size_t i : picked) {
    const ScoredBatch<T> sb = scorer.score(test.image(i), 1);
    out << (test.tag(i) == Openness::known ? "known" : "unknown") << ',' << test.original_label(i) << ','
        << sb.predicted[0] << ',' << detail::exact(sb.scores[0]);
    for (std::size_t j = 0; j < d; ++j) out << ',' << detail::exact(static_cast<double>(sb.embeddings[j]));
    out << '\n';
  }
}

template <class T>
void export_embeddings(const Scorer<T>& scorer, const Stream& test, std::size_t num_known, std::size_t num_unknown,
                       std::uint64_t seed, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write embeddings to " + path.string());
  export_embeddings(scorer, test, num_known, num_unknown, seed, out);
  if (!out) throw std::runtime_error("error while writing embeddings to " + path.string());
}

}  // namespace osrvit

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "osrvit/ops.hpp"
#include "osrvit/random.hpp"
#include "osrvit/vit.hpp"

namespace osrvit {

enum class DetectionInit {
  identity,          // W_d = I, b = 0: the detection space starts as a copy of the feature space
  truncated_normal,  // W_d ~ TN(0, 0.02²), b = 0
};

/// φ_d: a single linear layer from the feature space into a detection space
/// of the same width.
template <class T>
struct DetectionHead {
  Tensor<T> weight;  // D×D
  Tensor<T> bias;    // D

  static DetectionHead init(std::size_t dim, DetectionInit mode, std::uint64_t seed) {
    DetectionHead h{Tensor<T>({dim, dim}), Tensor<T>({dim})};
    if (mode == DetectionInit::identity) {
      for (std::size_t i = 0; i < dim; ++i) h.weight[i * dim + i] = T{1};
    } else {
      Rng rng = make_rng(seed, 0x5eed'0002);
      fill_truncated_normal(h.weight, 0.02, rng);
    }
    h.weight.set_requires_grad();
    h.bias.set_requires_grad();
    return h;
  }

  std::size_t dim() const { return bias.numel(); }

  std::vector<NamedTensor<T>> parameters() const { return {{"detect.weight", weight}, {"detect.bias", bias}}; }
};

/// e = f·W_d + b for f of shape [B, D].
template <class T>
Tensor<T> detect_embed(const Tensor<T>& features, const DetectionHead<T>& head) {
  return add_bias(matmul(features, head.weight), head.bias);
}

/// One fixed center per known class, K×D. Instances can only be built whole;
/// there is no mutating accessor.
template <class T>
class ClassCenters {
 public:
  ClassCenters() = default;

  ClassCenters(std::size_t num_classes, std::size_t dim, std::vector<T> values, bool frozen)
      : num_classes_(num_classes), dim_(dim), values_(std::move(values)), frozen_(frozen) {
    if (values_.size() != num_classes_ * dim_) {
      throw DimensionError("class centers: expected " + std::to_string(num_classes_ * dim_) + " values, got " +
                           std::to_string(values_.size()));
    }
  }

  std::size_t num_classes() const { return num_classes_; }
  std::size_t dim() const { return dim_; }
  bool frozen() const { return frozen_; }
  bool empty() const { return values_.empty(); }
  std::span<const T> values() const { return values_; }
  std::span<const T> center(std::size_t k) const {
    if (k >= num_classes_) throw ContractError("class center index " + std::to_string(k) + " out of range");
    return std::span<const T>(values_).subspan(k * dim_, dim_);
  }

  bool operator==(const ClassCenters&) const = default;

 private:
  std::size_t num_classes_ = 0;
  std::size_t dim_ = 0;
  std::vector<T> values_;
  bool frozen_ = false;
};

/// Per-class means of `representations` ([n×D], row-major). Every class in
/// 0..K−1 needs at least one row. The result is frozen.
template <class T>
ClassCenters<T> class_means(std::span<const T> representations, std::span<const int> labels, std::size_t num_classes) {
  if (labels.empty()) throw ProtocolError("cannot anchor centers: no training examples");
  if (representations.size() % labels.size() != 0) {
    throw DimensionError("class_means: representation count does not match label count");
  }
  const std::size_t d = representations.size() / labels.size();
  std::vector<double> acc(num_classes * d, 0.0);
  std::vector<std::size_t> count(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ContractError("label " + std::to_string(y) + " outside 0.." + std::to_string(num_classes - 1));
    }
    ++count[y];
    for (std::size_t j = 0; j < d; ++j) acc[y * d + j] += static_cast<double>(representations[i * d + j]);
  }
  std::vector<T> values(num_classes * d);
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (count[k] == 0) throw ProtocolError("cannot anchor center: class " + std::to_string(k) + " has no examples");
    for (std::size_t j = 0; j < d; ++j) values[k * d + j] = static_cast<T>(acc[k * d + j] / count[k]);
  }
  return ClassCenters<T>(num_classes, d, std::move(values), /*frozen=*/true);
}

/// c_k = mean of φ_d(φ_f(x)) over the class-k training images, computed
/// with the detection head at its current (initial) state.
template <class T>
ClassCenters<T> anchor_centers(const VitModel<T>& model, const DetectionHead<T>& head, std::span<const float> images,
                               std::span<const int> labels, std::size_t batch_size = 256) {
  const std::size_t n = labels.size();
  const std::size_t d = head.dim();
  const std::size_t img = model.config().image_size();
  std::vector<T> reps(n * d);
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t b = std::min(batch_size, n - start);
    Tensor<T> e = detect_embed(model.features(images.subspan(start * img, b * img), b), head);
    std::copy(e.values().begin(), e.values().end(), reps.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return class_means<T>(reps, labels, model.config().num_classes);
}

template <class T>
T squared_distance(std::span<const T> a, std::span<const T> b) {
  T s{0};
  for (std::size_t j = 0; j < a.size(); ++j) {
    const T diff = a[j] - b[j];
    s += diff * diff;
  }
  return s;
}

/// (1/n)·Σ‖e_i − c_{y_i}‖². Gradient reaches e only.
template <class T>
Tensor<T> center_loss(const Tensor<T>& e, std::span<const int> labels, const ClassCenters<T>& centers) {
  if (e.rank() != 2 || e.dim(0) != labels.size() || e.dim(1) != centers.dim()) {
    throw DimensionError("center_loss: representations " + shape_str(e.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels / center width " + std::to_string(centers.dim()));
  }
  const std::size_t n = labels.size(), d = centers.dim();
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= centers.num_classes()) {
      throw ContractError("center_loss: label " + std::to_string(y) + " outside 0.." +
                          std::to_string(centers.num_classes() - 1));
    }
  }
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    total += squared_distance<T>(e.values().subspan(i * d, d), centers.center(labels[i]));
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  std::vector<int> ys(labels.begin(), labels.end());
  auto *en = e.node(), *on = out.node();
  std::vector<T> c(centers.values().begin(), centers.values().end());
  attach(out, {e}, [=, ys = std::move(ys), c = std::move(c)] {
    const T g = on->grad[0] * T{2} / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        en->grad[i * d + j] += g * (en->value[i * d + j] - c[static_cast<std::size_t>(ys[i]) * d + j]);
  });
  return out;
}

/// s = ‖e − c_ŷ‖².
template <class T>
T anomaly_score(std::span<const T> e, int predicted, const ClassCenters<T>& centers) {
  if (predicted < 0 || static_cast<std::size_t>(predicted) >= centers.num_classes()) {
    throw ContractError("anomaly_score: predicted label " + std::to_string(predicted) + " out of range");
  }
  return squared_distance<T>(e, centers.center(static_cast<std::size_t>(predicted)));
}

template <class T>
struct NearestCenter {
  int label = 0;
  T score{};
};

/// min_k ‖e − c_k‖², ties resolved to the lowest class index.
template <class T>
NearestCenter<T> nearest_center(std::span<const T> e, const ClassCenters<T>& centers) {
  if (centers.num_classes() == 0) throw ContractError("nearest_center: no centers");
  NearestCenter<T> best{0, squared_distance<T>(e, centers.center(0))};
  for (std::size_t k = 1; k < centers.num_classes(); ++k) {
    const T s = squared_distance<T>(e, centers.center(k));
    if (s < best.score) best = {static_cast<int>(k), s};
  }
  return best;
}

template <class T>
T nearest_center_score(std::span<const T> e, const ClassCenters<T>& centers) {
  return nearest_center(e, centers).score;
}

enum class Verdict { known, unknown };

struct OsrDecision {
  Verdict verdict = Verdict::known;
  std::optional<int> label;  // present iff known
  double score = 0.0;
  double threshold = 0.0;
};

/// Unknown iff score > threshold; a score equal to the threshold is accepted.
inline OsrDecision decide_from_score(int predicted, double score, double threshold) {
  if (!std::isfinite(threshold)) throw ContractError("decide: threshold must be finite");
  OsrDecision d;
  d.score = score;
  d.threshold = threshold;
  if (score > threshold) {
    d.verdict = Verdict::unknown;
  } else {
    d.verdict = Verdict::known;
    d.label = predicted;
  }
  return d;
}

/// f = φ_f(x); ŷ = argmax φ_c(f); e = φ_d(f); s = ‖e − c_ŷ‖²; threshold test.
/// `image` is one normalized H×W×C image.
template <class T>
OsrDecision decide(std::span<const float> image, const VitModel<T>& model, const DetectionHead<T>& head,
                   const ClassCenters<T>& centers, double threshold) {
  Tensor<T> f = model.features(image, 1);
  const int predicted = model.classify_features(f).labels[0];
  Tensor<T> e = detect_embed(f, head);
  const T s = anomaly_score<T>(e.values(), predicted, centers);
  return decide_from_score(predicted, static_cast<double>(s), threshold);
}

/// q-th empirical quantile of known-data scores with linear interpolation
/// between order statistics (position q·(n−1)).
inline double calibrate_threshold(std::span<const double> scores, double quantile = 0.95) {
  if (scores.empty()) throw ProtocolError("calibrate_threshold: no validation scores");
  if (!(quantile > 0.0 && quantile <= 1.0)) {
    throw ConfigError("calibrate_threshold: quantile must lie in (0, 1], got " + std::to_string(quantile));
  }
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = quantile * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace osrvit

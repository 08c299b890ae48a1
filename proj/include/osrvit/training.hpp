#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osrvit/data.hpp"
#include "osrvit/osr.hpp"
#include "osrvit/prefetch.hpp"
#include "osrvit/vit.hpp"

namespace osrvit {

enum class Precision { f32, f64 };

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 256;
  std::size_t max_steps = 4590;      // hard cap per stage
  std::size_t max_epochs = 0;        // 0 = bounded by max_steps only
  std::size_t plateau_patience = 0;  // epochs without improvement before stopping; 0 = off
  double plateau_min_delta = 1e-4;   // relative improvement of the epoch-mean loss that counts
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  bool deterministic = false;
  Augmentation augmentation{};
  std::size_t prefetch_depth = 2;
  DetectionInit detection_init = DetectionInit::identity;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (max_steps < 1) throw ConfigError("steps per stage must be at least 1");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  }
};

/// Velocity buffers mirroring the optimized parameters, zero-initialized.
template <class T>
struct OptimizerState {
  std::vector<std::vector<T>> velocity;

  static OptimizerState for_parameters(std::span<const NamedTensor<T>> params) {
    OptimizerState s;
    for (const auto& p : params) s.velocity.emplace_back(p.tensor.numel(), T{0});
    return s;
  }
};

/// Classic momentum: v ← μ·v + g; θ ← θ − η·v.
template <class T>
void sgd_momentum_step(std::span<NamedTensor<T>> params, OptimizerState<T>& state, double learning_rate,
                       double momentum) {
  if (state.velocity.size() != params.size()) throw DimensionError("optimizer state does not match parameter list");
  const T lr = static_cast<T>(learning_rate);
  const T mu = static_cast<T>(momentum);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params[p].tensor;
    auto& v = state.velocity[p];
    if (v.size() != t.numel() || !t.has_grad()) {
      throw DimensionError("optimizer: parameter " + params[p].name + " has no matching gradient/velocity");
    }
    auto val = t.values();
    auto g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      val[i] -= lr * v[i];
    }
  }
}

/// Mean over the batch of −log softmax(logits)[y], via log-sum-exp.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  auto probs = std::make_shared<std::vector<T>>(n * k);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside 0.." + std::to_string(k - 1));
    }
    const T* row = logits.values().data() + i * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T z{0};
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[i * k + j] = std::exp(row[j] - mx);
      z += (*probs)[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] /= z;
    total += mx + std::log(z) - row[y];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  std::vector<int> ys(labels.begin(), labels.end());
  auto *ln = logits.node(), *on = out.node();
  attach(out, {logits}, [=, ys = std::move(ys)] {
    const T g = on->grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j)
        ln->grad[i * k + j] += g * ((*probs)[i * k + j] - (static_cast<int>(j) == ys[i] ? T{1} : T{0}));
  });
  return out;
}

/// Line-delimited JSON training log: one record per optimizer step.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream* out = nullptr) : out_(out), start_(std::chrono::steady_clock::now()) {}

  void record(int stage, std::size_t step, double loss) {
    if (out_ == nullptr) return;
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    nlohmann::ordered_json j;
    j["stage"] = stage;
    j["step"] = step;
    j["loss"] = loss;
    j["wall_time"] = wall;
    *out_ << j.dump() << '\n';
  }

 private:
  std::ostream* out_;
  std::chrono::steady_clock::time_point start_;
};

struct StageResult {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::size_t steps = 0;
  std::size_t epochs = 0;
};

namespace detail {

/// Epoch loop with step cap, epoch cap and plateau stop shared by both
/// stages. `run_epoch` performs one epoch, returns its mean loss, and stops
/// early when the step budget runs out.
inline void run_epochs(const TrainConfig& cfg, StageResult& result, const std::function<double(std::size_t)>& run_epoch) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; result.steps < cfg.max_steps; ++epoch) {
    if (cfg.max_epochs != 0 && epoch >= cfg.max_epochs) break;
    const double mean_loss = run_epoch(epoch);
    result.epoch_losses.push_back(mean_loss);
    ++result.epochs;
    if (cfg.plateau_patience == 0) continue;
    if (mean_loss < best * (1.0 - cfg.plateau_min_delta)) {
      best = mean_loss;
      stale = 0;
    } else if (++stale >= cfg.plateau_patience) {
      break;
    }
  }
}

template <class T>
void check_stream_matches(const Stream& stream, const ModelConfig& cfg, const char* stage) {
  if (stream.phase() != Phase::train) throw ProtocolError(std::string(stage) + ": expects the training stream");
  if (stream.size() == 0) throw ProtocolError(std::string(stage) + ": training stream is empty");
  if (stream.height() != cfg.height || stream.width() != cfg.width || stream.channels() != cfg.channels) {
    throw ProtocolError(std::string(stage) + ": images are " + std::to_string(stream.height()) + "x" +
                        std::to_string(stream.width()) + "x" + std::to_string(stream.channels()) +
                        " but the model expects " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                        "x" + std::to_string(cfg.channels));
  }
  if (stream.num_classes() != cfg.num_classes) {
    throw ProtocolError(std::string(stage) + ": the split has " + std::to_string(stream.num_classes()) +
                        " known classes but the model has K = " + std::to_string(cfg.num_classes));
  }
  for (int y : stream.labels()) {
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.num_classes) {
      throw ProtocolError(std::string(stage) + ": label " + std::to_string(y) + " does not fit K = " +
                          std::to_string(cfg.num_classes));
    }
  }
}

}  // namespace detail

/// Stage 1: minimize cross-entropy over all feature-extractor and classifier
/// parameters.
template <class T>
StageResult train_stage1(VitModel<T>& model, const Stream& stream, const TrainConfig& cfg, MetricsLog* log = nullptr) {
  cfg.validate();
  detail::check_stream_matches<T>(stream, model.config(), "stage 1");
  auto params = model.parameters();
  auto state = OptimizerState<T>::for_parameters(params);
  StageResult result;
  detail::run_epochs(cfg, result, [&](std::size_t epoch) {
    PrefetchingCursor cursor(stream, epoch, cfg.prefetch_depth);
    double sum = 0.0;
    std::size_t count = 0;
    while (result.steps < cfg.max_steps) {
      auto batch = cursor.next();
      if (!batch) break;
      for (auto& p : params) p.tensor.zero_grad();
      ComputationRecord<T> record;
      {
        auto scope = record.activate();
        Tensor<T> f = model.features(std::span<const float>(batch->images), batch->size());
        Tensor<T> logits = add_bias(matmul(f, model.head().weight), model.head().bias);
        Tensor<T> loss = cross_entropy(logits, std::span<const int>(batch->labels));
        record.backward(loss);
        const double l = static_cast<double>(loss.item());
        result.step_losses.push_back(l);
        sum += l;
        ++count;
      }
      sgd_momentum_step<T>(params, state, cfg.learning_rate, cfg.momentum);
      ++result.steps;
      if (log) log->record(1, result.steps, result.step_losses.back());
    }
    return count ? sum / static_cast<double>(count) : 0.0;
  });
  return result;
}

/// φ_f(x) for every example of a stream, in stream order, [n×D] row-major.
template <class T>
std::vector<T> compute_features(const VitModel<T>& model, const Stream& stream, std::size_t batch_size = 256) {
  const std::size_t d = model.config().dim;
  const std::size_t img = stream.image_size();
  std::vector<T> out(stream.size() * d);
  for (std::size_t start = 0; start < stream.size(); start += batch_size) {
    const std::size_t b = std::min(batch_size, stream.size() - start);
    Tensor<T> f = model.features(stream.pixels().subspan(start * img, b * img), b);
    std::copy(f.values().begin(), f.values().end(), out.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

/// Stage 2: with φ_f and φ_c fixed, minimize the center loss over φ_d only.
/// Centers must already be anchored from the initial head.
template <class T>
StageResult train_stage2(const VitModel<T>& model, DetectionHead<T>& head, const ClassCenters<T>& centers,
                         const Stream& stream, const TrainConfig& cfg, MetricsLog* log = nullptr) {
  cfg.validate();
  if (centers.empty() || !centers.frozen()) throw ProtocolError("stage 2 requires anchored (frozen) class centers");
  detail::check_stream_matches<T>(stream, model.config(), "stage 2");
  if (centers.num_classes() != model.config().num_classes || centers.dim() != head.dim()) {
    throw ProtocolError("stage 2: centers do not match the model's K or detection width");
  }
  const std::size_t d = model.config().dim;
  // Without augmentation the frozen extractor maps each example to a fixed
  // feature, so one pass suffices.
  std::vector<T> cached;
  if (!cfg.augmentation.enabled()) cached = compute_features(model, stream);

  auto params = head.parameters();
  auto state = OptimizerState<T>::for_parameters(params);
  StageResult result;
  detail::run_epochs(cfg, result, [&](std::size_t epoch) {
    const auto order = stream.epoch_order(epoch);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t bi = 0; bi < stream.batches_per_epoch() && result.steps < cfg.max_steps; ++bi) {
      Tensor<T> f;
      std::vector<int> labels;
      if (cached.empty()) {
        Batch batch = stream.batch(epoch, bi, order);
        f = model.features(std::span<const float>(batch.images), batch.size());
        labels = batch.labels;
      } else {
        const std::size_t begin = bi * stream.batch_size();
        const std::size_t end = std::min(order.size(), begin + stream.batch_size());
        std::vector<T> rows;
        rows.reserve((end - begin) * d);
        for (std::size_t k = begin; k < end; ++k) {
          const std::size_t i = order[k];
          rows.insert(rows.end(), cached.begin() + static_cast<std::ptrdiff_t>(i * d),
                      cached.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
          labels.push_back(stream.label(i));
        }
        f = Tensor<T>({end - begin, d}, std::move(rows));
      }
      for (auto& p : params) p.tensor.zero_grad();
      ComputationRecord<T> record;
      {
        auto scope = record.activate();
        Tensor<T> loss = center_loss(detect_embed(f, head), std::span<const int>(labels), centers);
        record.backward(loss);
        result.step_losses.push_back(static_cast<double>(loss.item()));
        sum += result.step_losses.back();
        ++count;
      }
      sgd_momentum_step<T>(params, state, cfg.learning_rate, cfg.momentum);
      ++result.steps;
      if (log) log->record(2, result.steps, result.step_losses.back());
    }
    return count ? sum / static_cast<double>(count) : 0.0;
  });
  return result;
}

/// Mean center loss of all examples of a stream under the current head.
template <class T>
double mean_center_distance(const VitModel<T>& model, const DetectionHead<T>& head, const ClassCenters<T>& centers,
                            const Stream& stream) {
  const std::size_t d = model.config().dim;
  const std::vector<T> feats = compute_features(model, stream);
  Tensor<T> f({stream.size(), d}, std::vector<T>(feats));
  return static_cast<double>(center_loss(detect_embed(f, head), stream.labels(), centers).item());
}

/// FNV-1a over the raw bytes of every tensor, in order.
template <class T>
std::uint64_t parameter_hash(std::span<const NamedTensor<T>> params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.tensor.values().data(), p.tensor.numel() * sizeof(T));
  }
  return h;
}

template <class T>
std::uint64_t parameter_hash(const std::vector<NamedTensor<T>>& params) {
  return parameter_hash<T>(std::span<const NamedTensor<T>>(params));
}

}  // namespace osrvit

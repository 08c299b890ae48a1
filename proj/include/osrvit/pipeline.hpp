#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osrvit/checkpoint.hpp"
#include "osrvit/data.hpp"
#include "osrvit/evaluation.hpp"
#include "osrvit/training.hpp"

namespace osrvit {

/// Where one dataset lives. Formats:
///   idx      train = [images, labels], test = [images, labels]
///   cifar10  train/test = lists of batch files (1 label byte per record)
///   cifar100 as cifar10 with 2 label bytes; the fine label is used
///   svhn     train/test = lists of files in the CIFAR-10 record layout
///   folder   train/test = one directory of per-class image folders each
struct DataSource {
  std::string format = "idx";
  std::vector<std::filesystem::path> train;
  std::vector<std::filesystem::path> test;
};

struct RunConfig {
  std::string dataset = "mnist";
  DataSource data;
  std::optional<DataSource> unknown_data;  // CIFAR+N: the CIFAR-100 files
  std::string protocol = "six-four";
  std::vector<std::uint64_t> seeds{0};
  ModelConfig model;
  TrainConfig stage1;
  TrainConfig stage2;
  double quantile = 0.95;
  ScoringSpace space = ScoringSpace::detection;
  std::filesystem::path out = "runs";
  std::size_t threads = 0;  // 0 = hardware concurrency
  bool deterministic = false;
  std::size_t export_known = 4000;
  std::size_t export_unknown = 800;

  Precision precision() const { return stage1.precision; }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

inline std::vector<std::filesystem::path> path_list(const nlohmann::json& j, const std::filesystem::path& base) {
  std::vector<std::filesystem::path> out;
  auto add = [&](const std::string& s) {
    std::filesystem::path p(s);
    out.push_back(p.is_absolute() ? p : base / p);
  };
  if (j.is_string()) {
    add(j.get<std::string>());
  } else {
    for (const auto& e : j) add(e.get<std::string>());
  }
  return out;
}

inline DataSource data_source_from_json(const nlohmann::json& j, const std::filesystem::path& base,
                                        const std::string& where) {
  reject_unknown_keys(j, {"format", "train", "test"}, where);
  DataSource d;
  d.format = j.value("format", d.format);
  if (d.format != "idx" && d.format != "cifar10" && d.format != "cifar100" && d.format != "svhn" && d.format != "folder") {
    throw ConfigError(where + ": unknown format '" + d.format + "' (expected idx, cifar10, cifar100, svhn or folder)");
  }
  if (j.contains("train")) d.train = path_list(j.at("train"), base);
  if (j.contains("test")) d.test = path_list(j.at("test"), base);
  return d;
}

inline void model_from_json(const nlohmann::json& j, ModelConfig& m) {
  reject_unknown_keys(j, {"height", "width", "channels", "patch", "dim", "depth", "heads", "mlp_ratio"}, "model");
  m.height = j.value("height", m.height);
  m.width = j.value("width", m.width);
  m.channels = j.value("channels", m.channels);
  m.patch = j.value("patch", m.patch);
  m.dim = j.value("dim", m.dim);
  m.depth = j.value("depth", m.depth);
  m.heads = j.value("heads", m.heads);
  m.mlp_ratio = j.value("mlp_ratio", m.mlp_ratio);
}

inline void train_from_json(const nlohmann::json& j, TrainConfig& t, const std::string& where) {
  reject_unknown_keys(j,
                      {"learning_rate", "momentum", "batch_size", "max_steps", "max_epochs", "plateau_patience",
                       "plateau_min_delta", "precision", "prefetch_depth", "augmentation", "detection_init"},
                      where);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.momentum = j.value("momentum", t.momentum);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.max_steps = j.value("max_steps", t.max_steps);
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.plateau_patience = j.value("plateau_patience", t.plateau_patience);
  t.plateau_min_delta = j.value("plateau_min_delta", t.plateau_min_delta);
  t.prefetch_depth = j.value("prefetch_depth", t.prefetch_depth);
  if (j.contains("precision")) {
    const auto p = j.at("precision").get<std::string>();
    if (p == "f32") {
      t.precision = Precision::f32;
    } else if (p == "f64") {
      t.precision = Precision::f64;
    } else {
      throw ConfigError("precision must be f32 or f64, got '" + p + "'");
    }
  }
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    reject_unknown_keys(a, {"horizontal_flip", "crop_padding"}, where + ".augmentation");
    t.augmentation.horizontal_flip = a.value("horizontal_flip", false);
    t.augmentation.crop_padding = a.value("crop_padding", std::size_t{0});
  }
  if (j.contains("detection_init")) {
    const auto d = j.at("detection_init").get<std::string>();
    if (d == "identity") {
      t.detection_init = DetectionInit::identity;
    } else if (d == "truncated_normal") {
      t.detection_init = DetectionInit::truncated_normal;
    } else {
      throw ConfigError("detection_init must be identity or truncated_normal, got '" + d + "'");
    }
  }
}

}  // namespace detail

/// Relative data paths resolve against `base` (the config file's directory).
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = ".") {
  try {
    detail::reject_unknown_keys(j,
                                {"dataset", "data", "unknown_data", "protocol", "seeds", "model", "stage1", "stage2",
                                 "quantile", "space", "out", "threads", "deterministic", "export"},
                                "run config");
    RunConfig c;
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("data")) c.data = detail::data_source_from_json(j.at("data"), base, "data");
    if (j.contains("unknown_data")) c.unknown_data = detail::data_source_from_json(j.at("unknown_data"), base, "unknown_data");
    c.protocol = j.value("protocol", c.protocol);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("model")) detail::model_from_json(j.at("model"), c.model);
    if (j.contains("stage1")) detail::train_from_json(j.at("stage1"), c.stage1, "stage1");
    if (j.contains("stage2")) detail::train_from_json(j.at("stage2"), c.stage2, "stage2");
    c.quantile = j.value("quantile", c.quantile);
    if (j.contains("space")) c.space = parse_scoring_space(j.at("space").get<std::string>());
    if (j.contains("out")) {
      std::filesystem::path o(j.at("out").get<std::string>());
      c.out = o.is_absolute() ? o : base / o;
    }
    c.threads = j.value("threads", c.threads);
    c.deterministic = j.value("deterministic", c.deterministic);
    if (j.contains("export")) {
      const auto& e = j.at("export");
      detail::reject_unknown_keys(e, {"known", "unknown"}, "export");
      c.export_known = e.value("known", c.export_known);
      c.export_unknown = e.value("unknown", c.export_unknown);
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

inline RunConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return run_config_from_json(nlohmann::json::parse(in), path.parent_path().empty() ? "." : path.parent_path());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

/// Checks everything that can be checked without loading data: protocol,
/// seeds, numeric ranges and the existence of every referenced path.
inline void validate(const RunConfig& c) {
  const ProtocolInfo info = protocol_info(c.protocol);
  if (c.seeds.empty()) throw ConfigError("seed list is empty");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    throw ConfigError("seed list contains duplicates");
  }
  if (!(c.quantile > 0.0 && c.quantile <= 1.0)) throw ConfigError("quantile must lie in (0, 1]");
  c.stage1.validate();
  c.stage2.validate();
  ModelConfig m = c.model;
  m.num_classes = info.known;
  (void)m.validated();
  auto check = [](const DataSource& d, const std::string& what) {
    if (d.train.empty() && d.test.empty()) throw ConfigError(what + ": no paths configured");
    for (const auto* list : {&d.train, &d.test})
      for (const auto& p : *list)
        if (!std::filesystem::exists(p)) throw ConfigError(what + ": path does not exist: " + p.string());
  };
  check(c.data, "data");
  if (!info.unknown_source.empty()) {
    if (!c.unknown_data) throw ConfigError("protocol " + c.protocol + " needs unknown_data (" + info.unknown_source + ")");
    check(*c.unknown_data, "unknown_data");
  }
}

/// The model configuration for a run: K comes from the protocol.
inline ModelConfig model_config(const RunConfig& c) {
  ModelConfig m = c.model;
  m.num_classes = protocol_info(c.protocol).known;
  return m.validated();
}

inline std::filesystem::path run_dir(const RunConfig& c, std::uint64_t seed) {
  return c.out / (c.protocol + "-seed" + std::to_string(seed));
}

namespace detail {

inline LabeledImageSet load_part(const DataSource& d, const std::vector<std::filesystem::path>& files,
                                 const char* part) {
  if (files.empty()) throw ConfigError(std::string("no ") + part + " files configured for format " + d.format);
  if (d.format == "idx") {
    if (files.size() != 2) throw ConfigError(std::string("idx ") + part + " needs [images, labels]");
    return load_idx(files[0], files[1]);
  }
  if (d.format == "folder") {
    if (files.size() != 1) throw ConfigError(std::string("folder ") + part + " needs one directory");
    return load_image_folder(files[0]);
  }
  std::vector<LabeledImageSet> sets;
  for (const auto& f : files) {
    if (d.format == "cifar10") {
      sets.push_back(load_cifar_binary(f));
    } else if (d.format == "cifar100") {
      sets.push_back(load_cifar100_binary(f));
    } else if (d.format == "svhn") {
      sets.push_back(load_svhn_binary(f));
    } else {
      throw ConfigError("unknown data format '" + d.format + "'");
    }
  }
  return concat(sets);
}

}  // namespace detail

inline DatasetBundle load_datasets(const RunConfig& c) {
  DatasetBundle b;
  b.train = detail::load_part(c.data, c.data.train, "train");
  b.test = detail::load_part(c.data, c.data.test, "test");
  if (c.unknown_data) b.unknown_test = detail::load_part(*c.unknown_data, c.unknown_data->test, "test");
  const ModelConfig m = model_config(c);
  if (b.train.height != m.height || b.train.width != m.width || b.train.channels != m.channels) {
    throw ConfigError("images are " + std::to_string(b.train.height) + "x" + std::to_string(b.train.width) + "x" +
                      std::to_string(b.train.channels) + " but the model expects " + std::to_string(m.height) + "x" +
                      std::to_string(m.width) + "x" + std::to_string(m.channels));
  }
  return b;
}

inline void apply_execution_settings(const RunConfig& c) {
  set_deterministic(c.deterministic);
  if (c.threads > 0) set_num_threads(c.threads);
}

/// Train and test streams of one trial, normalized with statistics of the
/// known-class training images. The evaluation copy of the training stream
/// is never augmented.
struct TrialStreams {
  Normalizer normalizer;
  Stream train;
  Stream train_eval;
  Stream test;
};

inline TrialStreams make_streams(const SplitSpec& split, const DatasetBundle& data, const TrainConfig& cfg,
                                 std::uint64_t seed, std::optional<Normalizer> normalizer = std::nullopt) {
  Normalizer norm = normalizer ? *normalizer : Normalizer::fit(known_training_images(split, data.train));
  return TrialStreams{norm, Stream(split, data, Phase::train, cfg.batch_size, seed, norm, cfg.augmentation),
                      Stream(split, data, Phase::train, 256, seed, norm), Stream(split, data, Phase::test, 256, seed, norm)};
}

template <class T>
struct TrainingOutcome {
  Checkpoint<T> checkpoint;
  StageResult stage1;
  StageResult stage2;
  double distance_at_anchor = 0.0;
  double distance_after = 0.0;
};

/// Stage 1 (unless `resume` holds a stage-1 checkpoint), center anchoring,
/// then stage 2. `on_stage1` sees the stage-1 checkpoint before stage 2 runs.
template <class T>
TrainingOutcome<T> train_pipeline(const RunConfig& c, const SplitSpec& split, const DatasetBundle& data,
                                  std::ostream* metrics = nullptr, const Checkpoint<T>* resume = nullptr,
                                  const std::function<void(const Checkpoint<T>&)>& on_stage1 = {}) {
  const ModelConfig mc = model_config(c);
  TrainConfig s1 = c.stage1, s2 = c.stage2;
  s1.seed = s2.seed = split.seed;
  MetricsLog log(metrics);
  TrainingOutcome<T> out;
  Checkpoint<T>& ck = out.checkpoint;
  ck.meta.seed = split.seed;
  ck.meta.dataset = split.dataset;
  ck.meta.protocol = split.protocol;
  ck.meta.split_seed = split.seed;
  ck.meta.known = split.known;

  if (resume) {
    if (resume->config() != mc) throw ProtocolError("stage-1 checkpoint model config differs from the run config");
    check_consistent(*resume, split);
    ck.model = resume->model;
    ck.normalizer = resume->normalizer;
    ck.meta.seed = resume->meta.seed;
  } else {
    ck.model = VitModel<T>::init(mc, split.seed);
  }
  TrialStreams st = make_streams(split, data, s1, split.seed, resume ? std::optional(ck.normalizer) : std::nullopt);
  ck.normalizer = st.normalizer;
  if (!resume) {
    try {
      out.stage1 = train_stage1(ck.model, st.train, s1, &log);
    } catch (const std::exception& e) {
      throw StageError(std::string("stage 1 failed: ") + e.what());
    }
    ck.meta.stage = 1;
    if (on_stage1) on_stage1(ck);
  }

  try {
    DetectionHead<T> head = DetectionHead<T>::init(mc.dim, s2.detection_init, split.seed);
    const ClassCenters<T> centers = anchor_centers(ck.model, head, st.train_eval.pixels(), st.train_eval.labels());
    out.distance_at_anchor = mean_center_distance(ck.model, head, centers, st.train_eval);
    Stream stage2_stream(split, data, Phase::train, s2.batch_size, split.seed, ck.normalizer, s2.augmentation);
    out.stage2 = train_stage2(ck.model, head, centers, stage2_stream, s2, &log);
    out.distance_after = mean_center_distance(ck.model, head, centers, st.train_eval);
    ck.head = std::move(head);
    ck.centers = centers;
    ck.meta.stage = 2;
  } catch (const std::exception& e) {
    throw StageError(std::string("stage 2 failed: ") + e.what());
  }
  return out;
}

template <class T>
TrialReport evaluate(const RunConfig& c, const SplitSpec& split, const Checkpoint<T>& ck, const DatasetBundle& data,
                     ScoringSpace space) {
  check_consistent(ck, split);
  TrialStreams st = make_streams(split, data, c.stage1, split.seed, ck.normalizer);
  return run_trial(split, ck, st.train_eval, st.test, space, c.quantile);
}

}  // namespace osrvit

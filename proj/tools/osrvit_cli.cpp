#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "osrvit/osrvit.hpp"

namespace fs = std::filesystem;
using namespace osrvit;

namespace {

constexpr int kExitUnknown = 10;
constexpr int kExitUsage = 2;
constexpr int kExitInternal = 1;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string protocol;
  std::string out;
  bool deterministic = false;
};

struct EvalOptions {
  std::string checkpoint;
  std::string split;
  std::string space;
  std::optional<double> quantile;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "run configuration (JSON)");
  cmd->add_option("--seed", o.seed, "restrict the run to one split seed");
  cmd->add_option("--protocol", o.protocol, "split protocol (six-four, cifar-plus-10, cifar-plus-50, tiny-imagenet-20)");
  cmd->add_option("--out", o.out, "output directory holding the per-seed run directories");
  cmd->add_flag("--deterministic", o.deterministic, "serial kernels for bit-reproducible runs");
}

RunConfig load_config(const CommonOptions& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : read_run_config(o.config);
  if (!o.protocol.empty()) c.protocol = o.protocol;
  if (o.seed) c.seeds = {*o.seed};
  if (!o.out.empty()) c.out = o.out;
  if (o.deterministic) c.deterministic = true;
  apply_execution_settings(c);
  return c;
}

void apply_eval_overrides(RunConfig& c, const EvalOptions& e) {
  if (!e.space.empty()) c.space = parse_scoring_space(e.space);
  if (e.quantile) c.quantile = *e.quantile;
}

/// Runs `fn.template operator()<T>()` with T chosen by the configured precision.
template <class Fn>
auto with_precision(Precision p, Fn&& fn) {
  if (p == Precision::f64) return fn.template operator()<double>();
  return fn.template operator()<float>();
}

SplitSpec split_for(const RunConfig& c, std::uint64_t seed, const std::string& explicit_path) {
  if (!explicit_path.empty()) return read_split(explicit_path);
  const fs::path p = run_dir(c, seed) / "split.json";
  if (fs::exists(p)) return read_split(p);
  return make_split(c.dataset, c.protocol, seed);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw std::runtime_error("cannot write " + path.string());
}

int cmd_make_splits(const CommonOptions& o) {
  const RunConfig c = load_config(o);
  validate(c);
  for (std::uint64_t seed : c.seeds) {
    const fs::path dir = run_dir(c, seed);
    fs::create_directories(dir);
    write_split(make_split(c.dataset, c.protocol, seed), dir / "split.json");
    std::cout << (dir / "split.json").string() << '\n';
  }
  return 0;
}

int cmd_train(const CommonOptions& o, const std::string& split_path, const std::string& stage1_path) {
  const RunConfig c = load_config(o);
  validate(c);
  const DatasetBundle data = load_datasets(c);
  for (std::uint64_t seed : c.seeds) {
    const SplitSpec split = split_for(c, seed, split_path);
    const fs::path dir = run_dir(c, split.seed);
    fs::create_directories(dir);
    if (!fs::exists(dir / "split.json")) write_split(split, dir / "split.json");
    with_precision(c.precision(), [&]<class T>() {
      std::optional<Checkpoint<T>> resume;
      if (!stage1_path.empty()) resume = load_checkpoint<T>(stage1_path);
      std::ofstream metrics(dir / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
      std::cerr << "[" << dir.filename().string() << "] training" << (resume ? " (stage 2 only)" : "") << '\n';
      auto outcome = train_pipeline<T>(c, split, data, &metrics, resume ? &*resume : nullptr,
                                       [&](const Checkpoint<T>& ck) { save_checkpoint(ck, dir / "stage1.ckpt"); });
      save_checkpoint(outcome.checkpoint, dir / "model.ckpt");
      nlohmann::ordered_json summary;
      auto stage = [](const StageResult& r) {
        nlohmann::ordered_json j;
        j["steps"] = r.steps;
        j["epochs"] = r.epochs;
        j["final_loss"] = r.step_losses.empty() ? 0.0 : r.step_losses.back();
        j["final_epoch_loss"] = r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back();
        return j;
      };
      if (!resume) summary["stage1"] = stage(outcome.stage1);
      summary["stage2"] = stage(outcome.stage2);
      summary["center_distance_at_anchor"] = outcome.distance_at_anchor;
      summary["center_distance_after"] = outcome.distance_after;
      write_text(dir / "train.json", summary.dump(2) + "\n");
      std::cerr << "[" << dir.filename().string() << "] wrote " << (dir / "model.ckpt").string() << '\n';
    });
  }
  return 0;
}

int cmd_eval(const CommonOptions& o, EvalOptions e) {
  RunConfig c = load_config(o);
  apply_eval_overrides(c, e);
  validate(c);
  const DatasetBundle data = load_datasets(c);
  for (std::uint64_t seed : c.seeds) {
    const SplitSpec split = split_for(c, seed, e.split);
    const fs::path dir = run_dir(c, split.seed);
    const fs::path ckpt = e.checkpoint.empty() ? dir / "model.ckpt" : fs::path(e.checkpoint);
    const TrialReport r = with_precision(c.precision(), [&]<class T>() {
      return evaluate(c, split, load_checkpoint<T>(ckpt), data, c.space);
    });
    fs::create_directories(dir);
    const AggregateReport single = aggregate(std::span<const TrialReport>(&r, 1));
    std::ostringstream csv, table;
    write_report_csv(csv, single);
    write_report_table(table, single);
    const std::string stem = "report-" + to_string(c.space);
    write_text(dir / (stem + ".csv"), csv.str());
    write_text(dir / (stem + ".txt"), table.str());
    std::cout << table.str();
  }
  return 0;
}

int cmd_aggregate(const CommonOptions& o, const EvalOptions& e, const std::vector<std::string>& reports) {
  RunConfig c = load_config(o);
  apply_eval_overrides(c, e);
  std::vector<fs::path> files(reports.begin(), reports.end());
  if (files.empty()) {
    for (std::uint64_t seed : c.seeds) files.push_back(run_dir(c, seed) / ("report-" + to_string(c.space) + ".csv"));
  }
  std::vector<TrialReport> trials;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw ConfigError("cannot open report " + f.string());
    for (auto& t : read_report_csv(in, f.string())) trials.push_back(t);
  }
  const AggregateReport a = aggregate(trials);
  std::ostringstream csv, table;
  write_report_csv(csv, a);
  write_report_table(table, a);
  fs::create_directories(c.out);
  const std::string stem = a.protocol + "-" + to_string(a.space) + "-summary";
  write_text(c.out / (stem + ".csv"), csv.str());
  write_text(c.out / (stem + ".txt"), table.str());
  std::cout << table.str();
  return 0;
}

int cmd_score(const std::string& checkpoint, const std::string& image_path, double tau, bool f64) {
  return with_precision(f64 ? Precision::f64 : Precision::f32, [&]<class T>() {
    const Checkpoint<T> ck = load_checkpoint<T>(checkpoint);
    if (ck.meta.stage != 2) throw ProtocolError("score needs a stage-2 checkpoint");
    Image img = read_netpbm(image_path);
    const ModelConfig& mc = ck.config();
    if (img.height != mc.height || img.width != mc.width || img.channels != mc.channels) {
      throw DimensionError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                           std::to_string(img.channels) + ", the model expects " + std::to_string(mc.height) + "x" +
                           std::to_string(mc.width) + "x" + std::to_string(mc.channels));
    }
    ck.normalizer.apply(img.pixels);
    const OsrDecision d = decide(std::span<const float>(img.pixels), ck.model, *ck.head, ck.centers, tau);
    std::ostringstream line;
    line << "verdict=" << (d.verdict == Verdict::known ? "known" : "unknown");
    if (d.label) {
      line << " label=" << ck.meta.known[static_cast<std::size_t>(*d.label)] << " class_index=" << *d.label;
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, " score=%.9g tau=%.9g", d.score, d.threshold);
    std::cout << line.str() << buf << '\n';
    return d.verdict == Verdict::known ? 0 : kExitUnknown;
  });
}

int cmd_export(const CommonOptions& o, EvalOptions e, std::optional<std::size_t> known,
               std::optional<std::size_t> unknown, const std::string& file) {
  RunConfig c = load_config(o);
  apply_eval_overrides(c, e);
  if (known) c.export_known = *known;
  if (unknown) c.export_unknown = *unknown;
  validate(c);
  const DatasetBundle data = load_datasets(c);
  for (std::uint64_t seed : c.seeds) {
    const SplitSpec split = split_for(c, seed, e.split);
    const fs::path dir = run_dir(c, split.seed);
    const fs::path ckpt = e.checkpoint.empty() ? dir / "model.ckpt" : fs::path(e.checkpoint);
    const fs::path target = file.empty() ? dir / ("embeddings-" + to_string(c.space) + ".csv") : fs::path(file);
    with_precision(c.precision(), [&]<class T>() {
      const Checkpoint<T> ck = load_checkpoint<T>(ckpt);
      check_consistent(ck, split);
      TrialStreams st = make_streams(split, data, c.stage1, split.seed, ck.normalizer);
      const Scorer<T> scorer = Scorer<T>::build(ck, c.space, st.train_eval);
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      export_embeddings(scorer, st.test, c.export_known, c.export_unknown, split.seed, target);
    });
    std::cout << target.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set recognition with a compact vision transformer"};
  app.require_subcommand(1);

  CommonOptions common;
  EvalOptions eval;
  std::string split_path, stage1_path, image_path, file;
  std::vector<std::string> reports;
  double tau = 0.0;
  bool score_f64 = false;
  std::optional<std::size_t> export_known, export_unknown;

  auto* make_splits = app.add_subcommand("make-splits", "write one split file per seed");
  add_common(make_splits, common);

  auto* train = app.add_subcommand("train", "two-stage training, one checkpoint per seed");
  add_common(train, common);
  train->add_option("--split", split_path, "split file (default: <run dir>/split.json)");
  train->add_option("--from-stage1", stage1_path, "skip stage 1 and resume from this stage-1 checkpoint")
      ->check(CLI::ExistingFile);

  auto add_eval = [&](CLI::App* cmd) {
    add_common(cmd, common);
    cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint (default: <run dir>/model.ckpt)");
    cmd->add_option("--split", eval.split, "split file (default: <run dir>/split.json)");
    cmd->add_option("--space", eval.space, "scoring space")->check(CLI::IsMember({"detection", "feature", "untrained"}));
    cmd->add_option("--quantile", eval.quantile, "known-score quantile used as the threshold");
  };
  auto* evaluate_cmd = app.add_subcommand("eval", "accuracy and AUROC of a trained checkpoint");
  add_eval(evaluate_cmd);

  auto* aggregate_cmd = app.add_subcommand("aggregate", "mean and spread over per-seed reports");
  add_common(aggregate_cmd, common);
  aggregate_cmd->add_option("--space", eval.space, "scoring space")
      ->check(CLI::IsMember({"detection", "feature", "untrained"}));
  aggregate_cmd->add_option("reports", reports, "report CSV files (default: the configured seeds' reports)");

  auto* score = app.add_subcommand("score", "decide known/unknown for one image (exit 0 known, 10 unknown)");
  score->add_option("--checkpoint", eval.checkpoint, "stage-2 checkpoint")->required()->check(CLI::ExistingFile);
  score->add_option("--image", image_path, "PGM/PPM image")->required()->check(CLI::ExistingFile);
  score->add_option("--tau", tau, "rejection threshold")->required();
  score->add_flag("--f64", score_f64, "score in double precision");

  auto* export_cmd = app.add_subcommand("export-embeddings", "write sampled test embeddings as CSV");
  add_eval(export_cmd);
  export_cmd->add_option("--known", export_known, "number of known test examples");
  export_cmd->add_option("--unknown", export_unknown, "number of unknown test examples");
  export_cmd->add_option("--file", file, "output file (default: <run dir>/embeddings-<space>.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*make_splits) return cmd_make_splits(common);
    if (*train) return cmd_train(common, split_path, stage1_path);
    if (*evaluate_cmd) return cmd_eval(common, eval);
    if (*aggregate_cmd) return cmd_aggregate(common, eval, reports);
    if (*score) return cmd_score(eval.checkpoint, image_path, tau, score_f64);
    if (*export_cmd) return cmd_export(common, eval, export_known, export_unknown, file);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInternal;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ProtocolError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>
#include <tuple>

#include "gradient_suite.hpp"
#include "test_support.hpp"

using namespace osrvit;
using namespace osrvit::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
  bool expected_failure = false;
};

std::vector<Verdict> verdicts;

void report(int id, const std::string& name, bool pass, const std::string& detail, bool expected_failure = false) {
  verdicts.push_back({id, name, pass, detail, expected_failure});
  std::printf("%s %d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

/// Closed-set predictions of `model` on the known test examples.
template <class T>
std::vector<int> known_predictions(const VitModel<T>& model, const Stream& test) {
  std::vector<int> out;
  const std::size_t img = test.image_size();
  for (std::size_t start = 0; start < test.size(); start += 256) {
    const std::size_t b = std::min<std::size_t>(256, test.size() - start);
    const auto labels = model.classify_features(model.features(test.pixels().subspan(start * img, b * img), b)).labels;
    for (std::size_t i = 0; i < b; ++i)
      if (test.tag(start + i) == Openness::known) out.push_back(labels[i]);
  }
  return out;
}

std::vector<int> known_truth(const Stream& test) {
  std::vector<int> out;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.tag(i) == Openness::known) out.push_back(test.label(i));
  return out;
}

// ---------------------------------------------------------------------------

void criterion_1() {
  report(1, "paper-scale results", false,
         "not reproducible here: the reported benchmark numbers need a ViT-B/16 pre-trained on ImageNet-21K; "
         "criteria 2-9 are the desk-scale substitutes",
         true);
}

void criterion_2() {
  const auto t0 = Clock::now();
  const auto ops = run_gradient_suite(50, 20240611);
  double worst = 0.0;
  std::string worst_op;
  std::size_t entries = 0;
  bool ok = true;
  for (const auto& r : ops) {
    entries += r.entries;
    ok = ok && r.cases >= 50 && r.max_rel_error <= 1e-3;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
  }
  ModelConfig c;
  c.height = c.width = 28;
  c.channels = 1;
  c.patch = 14;
  c.dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.num_classes = 3;
  auto model = VitModel<D>::init(c, 7);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<D> u(-0.5, 0.5);
  for (auto& p : model.parameters())
    for (auto& v : p.tensor.values()) v += u(rng);
  std::vector<float> images(2 * 28 * 28);
  for (auto& v : images) v = static_cast<float>(u(rng));
  const std::vector<int> labels{0, 2};
  std::vector<Tensor<D>> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  const auto full = grad_check(
      [&] {
        Tensor<D> logits = model.classify_features(model.features(std::span<const float>(images), 2)).logits;
        return cross_entropy(logits, std::span<const int>(labels));
      },
      params);
  const double secs = seconds_since(t0);
  ok = ok && full.max_rel_error <= 1e-3 && secs < 300.0;
  report(2, "gradient correctness", ok,
         fmt("%zu ops x 50 cases, %zu entries, worst op %s rel err %.2e; full tiny-ViT loss (D=8 L=2 A=2 P=14) "
             "%zu parameters rel err %.2e; %.1f s (limit 300 s, tol 1e-3)",
             ops.size(), entries, worst_op.c_str(), worst, full.checked, full.max_rel_error, secs));
}

void criterion_3() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(33);
  bool ok = true;
  std::size_t tied_sets = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 250, m = 1 + rng() % 250;
    const int levels = 1 + static_cast<int>(rng() % 40);
    std::vector<double> k(n), un(m);
    for (auto& x : k) x = static_cast<double>(rng() % static_cast<std::uint64_t>(levels)) / 7.0;
    for (auto& x : un) x = static_cast<double>(rng() % static_cast<std::uint64_t>(levels)) / 7.0;
    un[0] = k[0];  // force at least one cross tie
    ++tied_sets;
    std::uint64_t half = 0;
    for (double a : k)
      for (double b : un) half += a < b ? 2 : (a == b ? 1 : 0);
    const double oracle = static_cast<double>(half) / (2.0 * static_cast<double>(n) * static_cast<double>(m));
    ok = ok && auroc_half_count(k, un) == half && auroc(k, un) == oracle;
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 60.0;
  report(3, "AUROC oracle equivalence", ok,
         fmt("200 score sets of size <= 500 (%zu with forced ties), exact equality with pairwise counting; %.2f s",
             tied_sets, secs));
}

// ---------------------------------------------------------------------------
// Criteria 4-7 share the five-seed MNIST run.
// ---------------------------------------------------------------------------

struct SeedZeroEvidence {
  std::uint64_t feature_hash_before = 0, feature_hash_after = 0;
  std::uint64_t classifier_hash_before = 0, classifier_hash_after = 0;
  bool centers_identical = false;
  std::vector<int> predictions_before, predictions_after;
  double accuracy_before = 0.0, accuracy_after = 0.0;
  double distance_at_anchor = 0.0, distance_after = 0.0;
  std::optional<Checkpoint<float>> checkpoint;
};

void mnist_criteria(const RunConfig& base, const DatasetBundle& data) {
  RunConfig c = base;
  const auto t0 = Clock::now();
  std::vector<TrialReport> trials;
  SeedZeroEvidence z;
  for (std::uint64_t seed : c.seeds) {
    const auto ts = Clock::now();
    const SplitSpec split = make_split(c.dataset, c.protocol, seed);
    const bool first = trials.empty();
    std::optional<ClassCenters<float>> anchored_before;
    auto outcome = train_pipeline<float>(c, split, data, nullptr, nullptr, [&](const Checkpoint<float>& ck) {
      if (!first) return;
      z.feature_hash_before = parameter_hash(ck.model.feature_parameters());
      z.classifier_hash_before = parameter_hash(ck.model.classifier_parameters());
      TrialStreams st = make_streams(split, data, c.stage1, split.seed, ck.normalizer);
      z.predictions_before = known_predictions(ck.model, st.test);
      z.accuracy_before = top1_accuracy(z.predictions_before, known_truth(st.test));
      const auto head = DetectionHead<float>::init(ck.config().dim, c.stage2.detection_init, split.seed);
      anchored_before = anchor_centers(ck.model, head, st.train_eval.pixels(), st.train_eval.labels());
    });
    const TrialReport r = evaluate<float>(c, split, outcome.checkpoint, data, ScoringSpace::detection);
    trials.push_back(r);
    std::printf("  seed %llu: accuracy %.4f AUROC %.4f (stage 1 %zu steps, stage 2 %zu steps, %.0f s)\n",
                static_cast<unsigned long long>(seed), r.accuracy, r.auroc, outcome.stage1.steps, outcome.stage2.steps,
                seconds_since(ts));
    std::fflush(stdout);
    if (first) {
      const auto& ck = outcome.checkpoint;
      z.feature_hash_after = parameter_hash(ck.model.feature_parameters());
      z.classifier_hash_after = parameter_hash(ck.model.classifier_parameters());
      z.centers_identical = anchored_before && *anchored_before == ck.centers;
      TrialStreams st = make_streams(split, data, c.stage1, split.seed, ck.normalizer);
      z.predictions_after = known_predictions(ck.model, st.test);
      z.accuracy_after = top1_accuracy(z.predictions_after, known_truth(st.test));
      z.distance_at_anchor = outcome.distance_at_anchor;
      z.distance_after = outcome.distance_after;
      z.checkpoint = outcome.checkpoint;
    }
  }
  const double total = seconds_since(t0);
  const AggregateReport agg = aggregate(trials);

  // 4: center-loss mechanics on the first seed.
  const bool c4 = z.centers_identical && z.feature_hash_before == z.feature_hash_after &&
                  z.classifier_hash_before == z.classifier_hash_after && z.predictions_before == z.predictions_after &&
                  z.accuracy_before == z.accuracy_after && z.distance_after < z.distance_at_anchor;
  report(4, "center-loss mechanics", c4,
         fmt("seed %llu: centers bit-identical %s; feature hash %016llx -> %016llx; classifier hash %016llx -> "
             "%016llx; accuracy %.4f -> %.4f; mean intra-class distance %.6g -> %.6g",
             static_cast<unsigned long long>(c.seeds.front()), z.centers_identical ? "yes" : "no",
             static_cast<unsigned long long>(z.feature_hash_before), static_cast<unsigned long long>(z.feature_hash_after),
             static_cast<unsigned long long>(z.classifier_hash_before),
             static_cast<unsigned long long>(z.classifier_hash_after), z.accuracy_before, z.accuracy_after,
             z.distance_at_anchor, z.distance_after));

  // 5: desk-scale end-to-end.
  const bool c5 = trials.size() == 5 && agg.mean_accuracy >= 0.95 && agg.mean_auroc >= 0.90 && total <= 3600.0;
  report(5, "desk-scale MNIST six-four", c5,
         fmt("%zu seeds: mean accuracy %.4f (>= 0.95, std %.4f), mean AUROC %.4f (>= 0.90, std %.4f); %.0f s on %u "
             "hardware thread(s) (limit 3600 s)",
             trials.size(), agg.mean_accuracy, agg.std_accuracy, agg.mean_auroc, agg.std_auroc, total,
             std::max(1u, std::thread::hardware_concurrency())));

  // 6: ablation ordering from the first seed's checkpoint lineage.
  const SplitSpec split0 = make_split(c.dataset, c.protocol, c.seeds.front());
  double a[3];
  const ScoringSpace spaces[3] = {ScoringSpace::untrained, ScoringSpace::feature, ScoringSpace::detection};
  for (int i = 0; i < 3; ++i) a[i] = evaluate<float>(c, split0, *z.checkpoint, data, spaces[i]).auroc;
  report(6, "ablation ordering", a[0] <= a[1] && a[1] <= a[2],
         fmt("seed %llu AUROC: untrained nearest-center %.4f <= stage-1 feature %.4f <= stage-2 detection %.4f",
             static_cast<unsigned long long>(c.seeds.front()), a[0], a[1], a[2]));

  // 7: decision-rule properties on the first seed's detection-space scores.
  TrialStreams st = make_streams(split0, data, c.stage1, split0.seed, z.checkpoint->normalizer);
  const Scorer<float> scorer = Scorer<float>::build(*z.checkpoint, ScoringSpace::detection, st.train_eval);
  const auto test_scores = scorer.score_stream(st.test);
  double lo = test_scores.front().score, hi = lo;
  for (const auto& s : test_scores) {
    lo = std::min(lo, s.score);
    hi = std::max(hi, s.score);
  }
  bool monotone = true;
  std::size_t previous = test_scores.size() + 1, first_count = 0, last_count = 0;
  for (int i = 0; i < 100; ++i) {
    const double tau = lo + (hi - lo) * i / 99.0;
    std::size_t rejected = 0;
    for (const auto& s : test_scores) rejected += decide_from_score(s.predicted, s.score, tau).verdict == osrvit::Verdict::unknown;
    monotone = monotone && rejected <= previous;
    if (i == 0) first_count = rejected;
    last_count = rejected;
    previous = rejected;
  }
  const auto& probe = test_scores[test_scores.size() / 2];
  const bool boundary = decide_from_score(probe.predicted, probe.score, probe.score).verdict == osrvit::Verdict::known;
  std::vector<double> calibration;
  for (const auto& s : scorer.score_stream(st.train_eval)) calibration.push_back(s.score);
  const double tau_full = calibrate_threshold(calibration, 1.0);
  std::size_t calibration_rejections = 0;
  for (double s : calibration) calibration_rejections += s > tau_full;
  report(7, "decision-rule properties", monotone && boundary && calibration_rejections == 0,
         fmt("100-threshold sweep monotone %s (%zu -> %zu rejections); s = tau accepted %s; q = 1.0 rejects %zu of "
             "%zu calibration scores",
             monotone ? "yes" : "no", first_count, last_count, boundary ? "yes" : "no", calibration_rejections,
             calibration.size()));
}

// ---------------------------------------------------------------------------

void criterion_8(const RunConfig& base, const DatasetBundle& data) {
  RunConfig c = base;
  c.model.dim = 16;
  c.model.depth = 1;
  c.model.heads = 2;
  c.stage1.max_steps = 120;
  c.stage2.max_steps = 60;
  c.deterministic = true;
  apply_execution_settings(c);
  const SplitSpec split = make_split(c.dataset, c.protocol, 3);
  auto once = [&] {
    std::ostringstream metrics, csv;
    std::vector<std::uint8_t> stage1;
    auto outcome = train_pipeline<float>(c, split, data, &metrics, nullptr,
                                         [&](const Checkpoint<float>& ck) { stage1 = encode_checkpoint(ck); });
    std::vector<TrialReport> reports;
    for (auto space : {ScoringSpace::detection, ScoringSpace::feature, ScoringSpace::untrained})
      reports.push_back(evaluate<float>(c, split, outcome.checkpoint, data, space));
    for (const auto& r : reports) write_trial_row(csv, r);
    std::istringstream lines(metrics.str());
    std::string line, losses;
    while (std::getline(lines, line)) {
      auto j = nlohmann::json::parse(line);
      j.erase("wall_time");
      losses += j.dump() + "\n";
    }
    return std::make_tuple(stage1, encode_checkpoint(outcome.checkpoint), csv.str(), losses);
  };
  const auto a = once(), b = once();
  set_deterministic(false);
  const bool ok = std::get<0>(a) == std::get<0>(b) && std::get<1>(a) == std::get<1>(b) &&
                  std::get<2>(a) == std::get<2>(b) && std::get<3>(a) == std::get<3>(b);
  report(8, "determinism", ok,
         fmt("two deterministic runs (seed 3, D=16 L=1): stage-1 checkpoint %s, final checkpoint %s (%zu bytes), "
             "reports %s, loss log %s (wall-clock field excluded)",
             std::get<0>(a) == std::get<0>(b) ? "identical" : "DIFFER",
             std::get<1>(a) == std::get<1>(b) ? "identical" : "DIFFER", std::get<1>(a).size(),
             std::get<2>(a) == std::get<2>(b) ? "identical" : "DIFFER",
             std::get<3>(a) == std::get<3>(b) ? "identical" : "DIFFER"));
}

void criterion_9(const RunConfig& c) {
  bool ok = true;
  std::vector<std::string> notes;

  // Checkpoint round trip, in memory and through a file.
  const SplitSpec split = make_split("mnist", "six-four", 0);
  Checkpoint<float> ck{CheckpointMeta{2, 5, split.dataset, split.protocol, split.seed, split.known},
                       VitModel<float>::init(model_config(c), 5), std::nullopt, {}, Normalizer{{0.13f}, {0.31f}}};
  ck.head = DetectionHead<float>::init(ck.config().dim, DetectionInit::truncated_normal, 5);
  std::vector<float> centers(ck.config().num_classes * ck.config().dim);
  for (std::size_t i = 0; i < centers.size(); ++i) centers[i] = 0.001f * static_cast<float>(i);
  ck.centers = ClassCenters<float>(ck.config().num_classes, ck.config().dim, centers, true);
  const auto bytes = encode_checkpoint(ck);
  const auto dir = scratch_dir("acceptance-format");
  save_checkpoint(ck, dir / "model.ckpt");
  const auto back = load_checkpoint<float>(dir / "model.ckpt");
  const bool round_trip = encode_checkpoint(back) == bytes && read_file_bytes(dir / "model.ckpt") == bytes &&
                          parameter_hash(back.model.parameters()) == parameter_hash(ck.model.parameters()) &&
                          back.centers == ck.centers && back.meta == ck.meta;
  ok = ok && round_trip;
  notes.push_back(fmt("checkpoint round trip %s (%zu bytes)", round_trip ? "bit-exact" : "MISMATCH", bytes.size()));

  auto rejects = [](auto&& fn) {
    try {
      fn();
    } catch (const FormatError&) {
      return true;
    } catch (...) {
      return false;
    }
    return false;
  };

  // IDX: canonical files accepted, ten corrupted variants rejected.
  std::vector<std::uint8_t> img, lab;
  if (have_mnist()) {
    img = read_file_bytes(data_dir() / "mnist" / "t10k-images-idx3-ubyte");
    lab = read_file_bytes(data_dir() / "mnist" / "t10k-labels-idx1-ubyte");
  } else {
    const auto set = synthetic_images(10, 3, 28, 28, 1, 9);
    write_idx(set, dir / "i", dir / "l");
    img = read_file_bytes(dir / "i");
    lab = read_file_bytes(dir / "l");
  }
  const bool idx_ok = !rejects([&] { (void)parse_idx(img, lab); });
  auto mutate = [](std::vector<std::uint8_t> b, std::size_t at, std::uint8_t v) {
    b[at] = v;
    return b;
  };
  auto cut = [](const std::vector<std::uint8_t>& b, std::size_t n) {
    return std::vector<std::uint8_t>(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(n));
  };
  auto grow = [](std::vector<std::uint8_t> b) {
    b.push_back(0);
    return b;
  };
  const std::vector<std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>>> idx_bad{
      {mutate(img, 0, 1), lab},         {mutate(img, 2, 0x0d), lab},     {mutate(img, 3, 2), lab},
      {cut(img, 3), lab},               {cut(img, 10), lab},             {cut(img, img.size() - 1), lab},
      {grow(img), lab},                 {img, mutate(lab, 1, 8)},        {img, cut(lab, lab.size() - 5)},
      {mutate(img, 7, static_cast<std::uint8_t>(img[7] ^ 1)), lab},
  };
  std::size_t idx_rejected = 0;
  for (const auto& [i, l] : idx_bad) idx_rejected += rejects([&] { (void)parse_idx(i, l); });
  ok = ok && idx_ok && idx_rejected == idx_bad.size();
  notes.push_back(fmt("IDX canonical %s, %zu/%zu corrupted rejected", idx_ok ? "accepted" : "REJECTED", idx_rejected,
                      idx_bad.size()));

  // CIFAR binary: canonical batch accepted, ten corrupted variants rejected.
  LabeledImageSet cifar;
  cifar.height = cifar.width = 32;
  cifar.channels = 3;
  std::mt19937_64 rng(10);
  for (int i = 0; i < 20; ++i) {
    for (int p = 0; p < 32 * 32 * 3; ++p) cifar.pixels.push_back(static_cast<float>(rng() % 256) / 255.0f);
    cifar.labels.push_back(i % 10);
  }
  const auto cb = encode_cifar_binary(cifar);
  const bool cifar_ok = !rejects([&] { (void)parse_cifar_binary(cb); }) && parse_cifar_binary(cb).pixels == cifar.pixels;
  const std::vector<std::vector<std::uint8_t>> cifar_bad{
      cut(cb, 0),           cut(cb, 1),           cut(cb, 3072),        cut(cb, 3074),     cut(cb, cb.size() - 1),
      grow(cb),             mutate(cb, 0, 10),    mutate(cb, 3073, 200), mutate(cb, 3073 * 19, 255),
      mutate(cb, 3073 * 7, 11),
  };
  std::size_t cifar_rejected = 0;
  for (const auto& b : cifar_bad) cifar_rejected += rejects([&] { (void)parse_cifar_binary(b); });
  ok = ok && cifar_ok && cifar_rejected == cifar_bad.size();
  notes.push_back(fmt("CIFAR canonical %s, %zu/%zu corrupted rejected", cifar_ok ? "accepted" : "REJECTED",
                      cifar_rejected, cifar_bad.size()));

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  report(9, "format fidelity", ok, detail);
}

RunConfig acceptance_config() {
  RunConfig c = read_run_config(std::filesystem::path(OSRVIT_CONFIG_DIR) / "mnist-six-four.json");
  c.data.format = "idx";
  const auto d = data_dir() / "mnist";
  c.data.train = {d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte"};
  c.data.test = {d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte"};
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  bool quick = false;
  for (int i = 1; i < argc; ++i) quick = quick || std::string(argv[i]) == "--quick";
  const auto t0 = Clock::now();
  try {
    criterion_1();
    criterion_2();
    criterion_3();
    const RunConfig c = acceptance_config();
    if (!have_mnist()) {
      for (int id : {4, 5, 6, 7, 8}) report(id, "MNIST run", false, "MNIST files not found under " + data_dir().string());
    } else {
      validate(c);
      apply_execution_settings(c);
      const DatasetBundle data = load_datasets(c);
      if (quick) {
        for (int id : {4, 5, 6, 7}) report(id, "MNIST run", false, "skipped (--quick)");
      } else {
        mnist_criteria(c, data);
      }
      criterion_8(c, data);
    }
    criterion_9(c);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::size_t failed = 0, expected = 0;
  for (const auto& v : verdicts) {
    if (v.pass) continue;
    (v.expected_failure ? expected : failed) += 1;
  }
  std::printf("summary: %zu criteria, %zu passed, %zu failed (%zu known-unattainable); %.0f s\n", verdicts.size(),
              verdicts.size() - failed - expected, failed + expected, expected, seconds_since(t0));
  return failed == 0 ? 0 : 1;
}

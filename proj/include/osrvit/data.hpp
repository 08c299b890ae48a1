#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osrvit/errors.hpp"
#include "osrvit/random.hpp"

namespace osrvit {

// ---------------------------------------------------------------------------
// Labeled image sets and file formats
// ---------------------------------------------------------------------------

/// Images stored H×W×C (channel fastest), values in [0,1] after loading.
struct LabeledImageSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width * channels; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }
  std::span<float> image(std::size_t i) { return std::span<float>(pixels).subspan(i * image_size(), image_size()); }
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::span<const std::uint8_t> payload;
};

// IDX: two zero bytes, type code 0x08 (unsigned byte), dimension count, then
// one big-endian u32 per dimension and the payload.
inline IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::size_t expected_rank, const std::string& what) {
  if (bytes.size() < 4) throw FormatError(what + ": truncated IDX magic", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError(what + ": bad IDX magic", 0);
  if (bytes[2] != 0x08) throw FormatError(what + ": unsupported IDX element type", 2);
  if (bytes[3] != expected_rank) {
    throw FormatError(what + ": expected " + std::to_string(expected_rank) + " dimensions, header says " +
                          std::to_string(bytes[3]),
                      3);
  }
  const std::size_t header = 4 + 4 * expected_rank;
  if (bytes.size() < header) throw FormatError(what + ": truncated IDX header", bytes.size());
  IdxArray arr;
  std::size_t count = 1;
  for (std::size_t i = 0; i < expected_rank; ++i) {
    const std::uint32_t d = read_be32(bytes, 4 + 4 * i);
    if (d == 0) throw FormatError(what + ": zero-sized dimension", 4 + 4 * i);
    arr.dims.push_back(d);
    count *= d;
  }
  if (bytes.size() < header + count) throw FormatError(what + ": truncated IDX payload", bytes.size());
  if (bytes.size() > header + count) throw FormatError(what + ": trailing bytes after IDX payload", header + count);
  arr.payload = bytes.subspan(header, count);
  return arr;
}

}  // namespace detail

/// Decodes an IDX image file (rank 3: N×H×W) and label file (rank 1: N).
inline LabeledImageSet parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  const auto images = detail::parse_idx(image_bytes, 3, "IDX images");
  const auto labels = detail::parse_idx(label_bytes, 1, "IDX labels");
  if (images.dims[0] != labels.dims[0]) {
    throw FormatError("IDX label count " + std::to_string(labels.dims[0]) + " does not match image count " +
                          std::to_string(images.dims[0]),
                      4);
  }
  LabeledImageSet set;
  set.height = images.dims[1];
  set.width = images.dims[2];
  set.channels = 1;
  set.pixels.resize(images.payload.size());
  for (std::size_t i = 0; i < images.payload.size(); ++i) set.pixels[i] = images.payload[i] / 255.0f;
  set.labels.assign(labels.payload.begin(), labels.payload.end());
  return set;
}

inline LabeledImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_idx(read_file_bytes(images), read_file_bytes(labels));
}

/// Writes a single-channel set as an IDX image file and label file; pixels are
/// quantized with round(v·255).
inline void write_idx(const LabeledImageSet& set, const std::filesystem::path& images,
                      const std::filesystem::path& labels) {
  if (set.channels != 1) throw ConfigError("write_idx: IDX images must have one channel");
  std::vector<std::uint8_t> img{0, 0, 0x08, 3};
  detail::put_be32(img, static_cast<std::uint32_t>(set.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(set.height));
  detail::put_be32(img, static_cast<std::uint32_t>(set.width));
  for (float v : set.pixels) img.push_back(to_byte(v));
  std::vector<std::uint8_t> lab{0, 0, 0x08, 1};
  detail::put_be32(lab, static_cast<std::uint32_t>(set.size()));
  for (int y : set.labels) lab.push_back(static_cast<std::uint8_t>(y));
  write_file_bytes(images, img);
  write_file_bytes(labels, lab);
}

/// CIFAR binary layout: per record `label_bytes` label bytes (the last one is
/// used) followed by 1024 R, 1024 G, 1024 B bytes of a 32×32 image.
inline LabeledImageSet parse_cifar_binary(std::span<const std::uint8_t> bytes, std::size_t label_bytes = 1,
                                          int num_classes = 10) {
  constexpr std::size_t plane = 32 * 32;
  const std::size_t record = label_bytes + 3 * plane;
  if (bytes.empty()) throw FormatError("CIFAR binary: empty file", 0);
  if (bytes.size() % record != 0) {
    throw FormatError("CIFAR binary: size " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(record),
                      bytes.size() - bytes.size() % record);
  }
  const std::size_t n = bytes.size() / record;
  LabeledImageSet set;
  set.height = 32;
  set.width = 32;
  set.channels = 3;
  set.pixels.resize(n * 3 * plane);
  set.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = i * record;
    const int label = bytes[base + label_bytes - 1];
    if (label >= num_classes) {
      throw FormatError("CIFAR binary: label " + std::to_string(label) + " out of range", base + label_bytes - 1);
    }
    set.labels[i] = label;
    const std::uint8_t* px = bytes.data() + base + label_bytes;
    float* dst = set.pixels.data() + i * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) dst[p * 3 + c] = px[c * plane + p] / 255.0f;
  }
  return set;
}

inline LabeledImageSet load_cifar_binary(const std::filesystem::path& path) {
  return parse_cifar_binary(read_file_bytes(path));
}

/// CIFAR-100 records carry a coarse and a fine label byte; the fine label is kept.
inline LabeledImageSet load_cifar100_binary(const std::filesystem::path& path) {
  return parse_cifar_binary(read_file_bytes(path), 2, 100);
}

/// SVHN cropped digits, pre-converted to the CIFAR-10 record layout.
inline LabeledImageSet load_svhn_binary(const std::filesystem::path& path) { return load_cifar_binary(path); }

inline std::vector<std::uint8_t> encode_cifar_binary(const LabeledImageSet& set) {
  if (set.height != 32 || set.width != 32 || set.channels != 3) {
    throw ConfigError("encode_cifar_binary: images must be 32x32x3");
  }
  constexpr std::size_t plane = 32 * 32;
  std::vector<std::uint8_t> out;
  out.reserve(set.size() * (1 + 3 * plane));
  for (std::size_t i = 0; i < set.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(set.labels[i]));
    const auto img = set.image(i);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) out.push_back(to_byte(img[p * 3 + c]));
  }
  return out;
}

inline void write_cifar_binary(const LabeledImageSet& set, const std::filesystem::path& path) {
  write_file_bytes(path, encode_cifar_binary(set));
}

/// Concatenates sets of identical image geometry (e.g. the five CIFAR batches).
inline LabeledImageSet concat(std::vector<LabeledImageSet> parts) {
  if (parts.empty()) throw ConfigError("concat: no parts");
  LabeledImageSet out = std::move(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto& p = parts[i];
    if (p.height != out.height || p.width != out.width || p.channels != out.channels) {
      throw ConfigError("concat: image geometry differs between parts");
    }
    out.pixels.insert(out.pixels.end(), p.pixels.begin(), p.pixels.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm (binary PGM/PPM) single images, used by the folder loader and score.
// ---------------------------------------------------------------------------

struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> pixels;  // H×W×C in [0,1]
};

inline Image parse_netpbm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* field) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError(std::string("netpbm: missing ") + field, start);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("netpbm: expected binary PGM (P5) or PPM (P6) magic", 0);
  }
  Image img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  img.width = read_uint("width");
  img.height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (maxval == 0 || maxval > 255) throw FormatError("netpbm: only 8-bit images are supported", pos);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("netpbm: malformed header", pos);
  ++pos;
  const std::size_t count = img.width * img.height * img.channels;
  if (img.width == 0 || img.height == 0) throw FormatError("netpbm: zero-sized image", pos);
  if (bytes.size() - pos < count) throw FormatError("netpbm: truncated pixel data", bytes.size());
  img.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) img.pixels[i] = bytes[pos + i] / static_cast<float>(maxval);
  return img;
}

inline Image read_netpbm(const std::filesystem::path& path) { return parse_netpbm(read_file_bytes(path)); }

inline void write_netpbm(const std::filesystem::path& path, std::span<const float> pixels, std::size_t height,
                         std::size_t width, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ConfigError("write_netpbm: channels must be 1 or 3");
  const std::string header = std::string(channels == 1 ? "P5" : "P6") + "\n" + std::to_string(width) + " " +
                             std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : pixels) out.push_back(to_byte(v));
  write_file_bytes(path, out);
}

/// One sub-directory per class (sorted by name → label 0, 1, ...), each
/// holding binary PGM/PPM images of a common size.
inline LabeledImageSet load_image_folder(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("image folder not found: " + root.string());
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  LabeledImageSet set;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[k]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Image img = read_netpbm(f);
      if (set.labels.empty()) {
        set.height = img.height;
        set.width = img.width;
        set.channels = img.channels;
      } else if (img.height != set.height || img.width != set.width || img.channels != set.channels) {
        throw FormatError("image folder: " + f.string() + " differs in size from earlier images", 0);
      }
      set.pixels.insert(set.pixels.end(), img.pixels.begin(), img.pixels.end());
      set.labels.push_back(static_cast<int>(k));
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel standardization with statistics from the training split.
struct Normalizer {
  std::vector<float> mean;
  std::vector<float> stddev;

  static Normalizer fit(const LabeledImageSet& set) {
    const std::size_t c = set.channels;
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    for (std::size_t i = 0; i < set.pixels.size(); ++i) {
      sum[i % c] += set.pixels[i];
      sq[i % c] += static_cast<double>(set.pixels[i]) * set.pixels[i];
    }
    const double n = static_cast<double>(set.pixels.size() / c);
    Normalizer norm;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double m = sum[ch] / n;
      const double var = std::max(sq[ch] / n - m * m, 0.0);
      norm.mean.push_back(static_cast<float>(m));
      norm.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-6)));
    }
    return norm;
  }

  void apply(std::span<float> pixels) const {
    const std::size_t c = mean.size();
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = (pixels[i] - mean[i % c]) / stddev[i % c];
  }

  bool operator==(const Normalizer&) const = default;
};

// ---------------------------------------------------------------------------
// Split protocols
// ---------------------------------------------------------------------------

enum class Openness { known, unknown };

/// Known/unknown partition of one trial. `unknown_source` names the label
/// universe the unknown classes come from ("" = same dataset).
struct SplitSpec {
  std::string dataset;
  std::string protocol;
  std::uint64_t seed = 0;
  std::vector<int> known;
  std::vector<int> unknown;
  std::string unknown_source;

  std::size_t num_known() const { return known.size(); }

  /// Original label → 0..K−1 in ascending original-label order.
  std::optional<int> remap(int original) const {
    auto it = std::lower_bound(known.begin(), known.end(), original);
    if (it == known.end() || *it != original) return std::nullopt;
    return static_cast<int>(it - known.begin());
  }

  bool is_unknown(int original) const { return std::binary_search(unknown.begin(), unknown.end(), original); }

  std::map<int, int> remap_table() const {
    std::map<int, int> t;
    for (std::size_t i = 0; i < known.size(); ++i) t[known[i]] = static_cast<int>(i);
    return t;
  }

  bool operator==(const SplitSpec&) const = default;
};

struct ProtocolInfo {
  std::size_t universe;        // classes in the dataset providing knowns
  std::size_t known;           // K
  std::size_t unknown;         // U
  std::size_t unknown_universe;  // 0 = unknowns come from the remaining classes
  std::string unknown_source;
  std::vector<std::string> datasets;
};

inline ProtocolInfo protocol_info(const std::string& protocol) {
  if (protocol == "six-four") return {10, 6, 4, 0, "", {"mnist", "svhn", "cifar10"}};
  if (protocol == "cifar-plus-10") return {10, 4, 10, 100, "cifar100", {"cifar10"}};
  if (protocol == "cifar-plus-50") return {10, 4, 50, 100, "cifar100", {"cifar10"}};
  if (protocol == "tiny-imagenet-20") return {200, 20, 180, 0, "", {"tiny-imagenet"}};
  throw ConfigError("unknown split protocol '" + protocol +
                    "' (expected six-four, cifar-plus-10, cifar-plus-50 or tiny-imagenet-20)");
}

/// Seeded shuffle of the class list; the first K become known. For CIFAR+N the
/// N unknown classes are drawn from CIFAR-100 by a second seeded shuffle.
inline SplitSpec make_split(const std::string& dataset, const std::string& protocol, std::uint64_t seed) {
  const ProtocolInfo info = protocol_info(protocol);
  if (std::find(info.datasets.begin(), info.datasets.end(), dataset) == info.datasets.end()) {
    throw ConfigError("protocol " + protocol + " does not apply to dataset '" + dataset + "'");
  }
  SplitSpec s;
  s.dataset = dataset;
  s.protocol = protocol;
  s.seed = seed;
  s.unknown_source = info.unknown_source;
  std::vector<int> classes(info.universe);
  for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = static_cast<int>(i);
  Rng rng = make_rng(seed, 0x5b1175);
  seeded_shuffle(classes, rng);
  s.known.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(info.known));
  if (info.unknown_universe == 0) {
    s.unknown.assign(classes.begin() + static_cast<std::ptrdiff_t>(info.known), classes.end());
  } else {
    std::vector<int> other(info.unknown_universe);
    for (std::size_t i = 0; i < other.size(); ++i) other[i] = static_cast<int>(i);
    Rng rng2 = make_rng(seed, 0x5b1176);
    seeded_shuffle(other, rng2);
    s.unknown.assign(other.begin(), other.begin() + static_cast<std::ptrdiff_t>(info.unknown));
  }
  std::sort(s.known.begin(), s.known.end());
  std::sort(s.unknown.begin(), s.unknown.end());
  return s;
}

inline nlohmann::ordered_json split_to_json(const SplitSpec& s) {
  nlohmann::ordered_json j;
  j["dataset"] = s.dataset;
  j["protocol"] = s.protocol;
  j["seed"] = s.seed;
  j["known_classes"] = s.known;
  j["unknown_classes"] = s.unknown;
  j["unknown_source"] = s.unknown_source.empty() ? s.dataset : s.unknown_source;
  nlohmann::ordered_json remap = nlohmann::ordered_json::object();
  for (const auto& [orig, idx] : s.remap_table()) remap[std::to_string(orig)] = idx;
  j["remap"] = remap;
  return j;
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
  try {
    SplitSpec s;
    s.dataset = j.at("dataset").get<std::string>();
    s.protocol = j.at("protocol").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.known = j.at("known_classes").get<std::vector<int>>();
    s.unknown = j.at("unknown_classes").get<std::vector<int>>();
    const auto src = j.value("unknown_source", s.dataset);
    s.unknown_source = src == s.dataset ? "" : src;
    std::sort(s.known.begin(), s.known.end());
    std::sort(s.unknown.begin(), s.unknown.end());
    if (s.known.empty()) throw ConfigError("split has no known classes");
    if (std::adjacent_find(s.known.begin(), s.known.end()) != s.known.end()) {
      throw ConfigError("split lists a known class twice");
    }
    if (s.unknown_source.empty()) {
      for (int u : s.unknown)
        if (std::binary_search(s.known.begin(), s.known.end(), u)) {
          throw ConfigError("class " + std::to_string(u) + " is both known and unknown");
        }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed split document: ") + e.what());
  }
}

inline void write_split(const SplitSpec& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write split file " + path.string());
  out << split_to_json(s).dump(2) << '\n';
}

inline SplitSpec read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open split file " + path.string());
  try {
    return split_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("split file " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

/// Train/test images for one dataset. `unknown_test` holds the test images of
/// a separate unknown-class universe (CIFAR-100 for CIFAR+N).
struct DatasetBundle {
  LabeledImageSet train;
  LabeledImageSet test;
  std::optional<LabeledImageSet> unknown_test;
};

enum class Phase { train, test };

struct Batch {
  std::vector<float> images;          // B×H×W×C, normalized
  std::vector<int> labels;            // remapped 0..K−1 for known examples, −1 for unknown
  std::vector<int> original_labels;   // label in the source dataset
  std::vector<Openness> tags;
  std::vector<std::size_t> indices;   // position within the stream's example list

  std::size_t size() const { return labels.size(); }
};

struct Augmentation {
  bool horizontal_flip = false;
  std::size_t crop_padding = 0;  // random crop after zero padding by this many pixels

  bool enabled() const { return horizontal_flip || crop_padding > 0; }
};

/// Batches over one phase of a split. The train phase holds only known-class
/// training images (remapped labels, reshuffled per epoch from the seed); the
/// test phase holds known and unknown test images in a fixed order.
class Stream {
 public:
  Stream(const SplitSpec& split, const DatasetBundle& data, Phase phase, std::size_t batch_size, std::uint64_t seed,
         std::optional<Normalizer> normalizer = std::nullopt, Augmentation augmentation = {})
      : split_(split),
        phase_(phase),
        batch_size_(batch_size),
        seed_(seed),
        normalizer_(std::move(normalizer)),
        augmentation_(augmentation) {
    if (batch_size == 0) throw ConfigError("stream: batch size must be positive");
    const LabeledImageSet& primary = phase == Phase::train ? data.train : data.test;
    height_ = primary.height;
    width_ = primary.width;
    channels_ = primary.channels;
    for (std::size_t i = 0; i < primary.size(); ++i) {
      const int y = primary.labels[i];
      if (split.remap(y)) {
        add(primary, i, Openness::known);
      } else if (phase == Phase::test && split.unknown_source.empty() && split.is_unknown(y)) {
        add(primary, i, Openness::unknown);
      }
    }
    if (phase == Phase::test && !split.unknown_source.empty()) {
      if (!data.unknown_test) {
        throw ProtocolError("split draws unknown classes from " + split.unknown_source + " but no such test set was loaded");
      }
      const auto& other = *data.unknown_test;
      if (other.height != height_ || other.width != width_ || other.channels != channels_) {
        throw ProtocolError("unknown-class test images differ in size from the known-class images");
      }
      for (std::size_t i = 0; i < other.size(); ++i)
        if (split.is_unknown(other.labels[i])) add(other, i, Openness::unknown);
    }
    if (normalizer_) normalizer_->apply(pixels_);
  }

  Phase phase() const { return phase_; }
  const SplitSpec& split() const { return split_; }
  std::size_t num_classes() const { return split_.num_known(); }
  std::size_t size() const { return labels_.size(); }
  std::size_t batch_size() const { return batch_size_; }
  std::size_t batches_per_epoch() const { return (size() + batch_size_ - 1) / batch_size_; }
  std::size_t image_size() const { return height_ * width_ * channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t count(Openness tag) const { return static_cast<std::size_t>(std::count(tags_.begin(), tags_.end(), tag)); }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels_).subspan(i * image_size(), image_size());
  }
  int label(std::size_t i) const { return labels_[i]; }
  int original_label(std::size_t i) const { return original_[i]; }
  Openness tag(std::size_t i) const { return tags_[i]; }
  std::span<const int> labels() const { return labels_; }
  std::span<const float> pixels() const { return pixels_; }

  /// Example order for one epoch: a seeded permutation in the train phase,
  /// identity in the test phase.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (phase_ == Phase::train) {
      Rng rng = make_rng(seed_, 0xe90c'0000 + epoch);
      seeded_shuffle(order, rng);
    }
    return order;
  }

  /// The `index`-th batch of `epoch`.
  Batch batch(std::size_t epoch, std::size_t index, const std::vector<std::size_t>& order) const {
    const std::size_t begin = index * batch_size_;
    const std::size_t end = std::min(order.size(), begin + batch_size_);
    Batch b;
    b.images.reserve((end - begin) * image_size());
    for (std::size_t k = begin; k < end; ++k) {
      const std::size_t i = order[k];
      if (phase_ == Phase::train && tags_[i] != Openness::known) {
        throw ProtocolError("unknown-class example reached the training stream");
      }
      const auto img = image(i);
      b.images.insert(b.images.end(), img.begin(), img.end());
      b.labels.push_back(labels_[i]);
      b.original_labels.push_back(original_[i]);
      b.tags.push_back(tags_[i]);
      b.indices.push_back(i);
    }
    if (phase_ == Phase::train && augmentation_.enabled()) {
      Rng rng = make_rng(seed_ ^ 0xa09'0000'0000ULL, epoch * 1'000'003ULL + index);
      for (std::size_t k = 0; k < b.size(); ++k) augment(std::span<float>(b.images).subspan(k * image_size(), image_size()), rng);
    }
    return b;
  }

  /// Sequential iteration over one epoch.
  class EpochCursor {
   public:
    EpochCursor(const Stream& s, std::size_t epoch) : stream_(&s), epoch_(epoch), order_(s.epoch_order(epoch)) {}
    std::optional<Batch> next() {
      if (index_ >= stream_->batches_per_epoch()) return std::nullopt;
      return stream_->batch(epoch_, index_++, order_);
    }

   private:
    const Stream* stream_;
    std::size_t epoch_;
    std::vector<std::size_t> order_;
    std::size_t index_ = 0;
  };

  EpochCursor epoch(std::size_t e) const { return EpochCursor(*this, e); }

 private:
  void add(const LabeledImageSet& set, std::size_t i, Openness tag) {
    const auto img = set.image(i);
    pixels_.insert(pixels_.end(), img.begin(), img.end());
    original_.push_back(set.labels[i]);
    labels_.push_back(tag == Openness::known ? *split_.remap(set.labels[i]) : -1);
    tags_.push_back(tag);
  }

  void augment(std::span<float> img, Rng& rng) const {
    const std::size_t h = height_, w = width_, c = channels_;
    std::vector<float> src(img.begin(), img.end());
    const bool flip = augmentation_.horizontal_flip && (rng() & 1u);
    const long pad = static_cast<long>(augmentation_.crop_padding);
    long dy = 0, dx = 0;
    if (pad > 0) {
      dy = static_cast<long>(rng() % (2 * pad + 1)) - pad;
      dx = static_cast<long>(rng() % (2 * pad + 1)) - pad;
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const long sy = static_cast<long>(y) + dy;
        long sx = static_cast<long>(x) + dx;
        if (flip) sx = static_cast<long>(w) - 1 - sx;
        for (std::size_t ch = 0; ch < c; ++ch) {
          float v = 0.0f;  // padding value: the normalized mean
          if (sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w)) {
            v = src[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c + ch];
          }
          img[(y * w + x) * c + ch] = v;
        }
      }
    }
  }

  SplitSpec split_;
  Phase phase_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::optional<Normalizer> normalizer_;
  Augmentation augmentation_;
  std::size_t height_ = 0, width_ = 0, channels_ = 0;
  std::vector<float> pixels_;
  std::vector<int> labels_;
  std::vector<int> original_;
  std::vector<Openness> tags_;
};

/// Known-class training images of a split, unnormalized; the input for fitting
/// a Normalizer.
inline LabeledImageSet known_training_images(const SplitSpec& split, const LabeledImageSet& train) {
  LabeledImageSet out;
  out.height = train.height;
  out.width = train.width;
  out.channels = train.channels;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (auto y = split.remap(train.labels[i])) {
      const auto img = train.image(i);
      out.pixels.insert(out.pixels.end(), img.begin(), img.end());
      out.labels.push_back(*y);
    }
  }
  return out;
}

}  // namespace osrvit

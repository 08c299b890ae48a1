#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "osrvit/data.hpp"
#include "osrvit/osr.hpp"
#include "osrvit/vit.hpp"

namespace osrvit {

// Checkpoint container, version 1. All integers and floats little-endian.
//
//   magic     8 bytes  "OSRVITCK"
//   version   u32
//   stage     u32      1 = stage-1 only, 2 = both stages
//   seed      u64      model/training seed
//   config    9 × u32  H W C P D L A K mlp_ratio
//   dataset   str      (u32 length + bytes)
//   protocol  str
//   split     u64 split seed, u32 count, count × i32 known classes
//   blobs     u32 count, then per blob:
//               str name, u32 rank, rank × u32 dims, numel × f32 values
//
// Blob order: feature parameters (see VitModel::feature_parameters), head.weight,
// head.bias, then for stage 2 detect.weight, detect.bias, centers (K×D), and
// finally norm.mean, norm.std (C each). Patches are flattened (row, col,
// channel), so embed.proj rows follow that order.

inline constexpr std::array<char, 8> kCheckpointMagic{'O', 'S', 'R', 'V', 'I', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint32_t stage = 1;
  std::uint64_t seed = 0;
  std::string dataset;
  std::string protocol;
  std::uint64_t split_seed = 0;
  std::vector<int> known;

  bool operator==(const CheckpointMeta&) const = default;
};

template <class T>
struct Checkpoint {
  CheckpointMeta meta;
  VitModel<T> model;
  std::optional<DetectionHead<T>> head;  // present iff stage 2
  ClassCenters<T> centers;               // empty unless stage 2
  Normalizer normalizer;

  const ModelConfig& config() const { return model.config(); }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  void skip(std::size_t n) {
    need(n, "header");
    pos_ += n;
  }

  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

/// Number of ViT parameter values implied by a validated config, computed in
/// double so a corrupted header cannot overflow.
inline double parameter_count(const ModelConfig& c) {
  const double d = static_cast<double>(c.dim), hidden = d * static_cast<double>(c.mlp_ratio);
  const double per_layer = 4 * d + 4 * d * d + 2 * d * hidden + hidden + d;
  return static_cast<double>(c.patch * c.patch * c.channels) * d + d + static_cast<double>(c.num_patches + 1) * d +
         static_cast<double>(c.depth) * per_layer + 2 * d + d * static_cast<double>(c.num_classes) +
         static_cast<double>(c.num_classes);
}

template <class T>
void write_blob(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const T> values) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (T v : values) w.f32(static_cast<float>(v));
}

/// Reads the next blob, which must be called `name` with exactly `shape`.
inline std::vector<float> read_blob(ByteReader& r, const std::string& name, const Shape& shape) {
  const std::size_t at = r.offset();
  const std::string got = r.str("blob name");
  if (got != name) throw FormatError("checkpoint: expected blob '" + name + "', found '" + got + "'", at);
  const std::size_t shape_at = r.offset();
  const std::uint32_t rank = r.u32("blob rank");
  r.need(static_cast<std::size_t>(rank) * 4, "blob dims");
  Shape s(rank);
  for (auto& d : s) d = r.u32("blob dims");
  if (s != shape) {
    throw FormatError("checkpoint: blob '" + name + "' has shape " + shape_str(s) + ", expected " + shape_str(shape),
                      shape_at);
  }
  std::vector<float> out(shape_numel(shape));
  r.need(out.size() * 4, "blob values");
  for (auto& v : out) v = r.f32("blob values");
  return out;
}

template <class T>
void load_into(ByteReader& r, const NamedTensor<T>& p) {
  const std::vector<float> v = read_blob(r, p.name, p.tensor.shape());
  std::span<T> dst = const_cast<Tensor<T>&>(p.tensor).values();
  for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& ck) {
  const ModelConfig& c = ck.config();
  const bool stage2 = ck.meta.stage == 2;
  if (ck.meta.stage != 1 && !stage2) throw ContractError("checkpoint stage must be 1 or 2");
  if (stage2 && (!ck.head || ck.centers.empty())) throw ContractError("stage-2 checkpoint needs a detection head and centers");
  if (ck.normalizer.mean.size() != c.channels || ck.normalizer.stddev.size() != c.channels) {
    throw ContractError("checkpoint normalizer does not match the channel count");
  }
  detail::ByteWriter w;
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  w.u32(ck.meta.stage);
  w.u64(ck.meta.seed);
  for (std::size_t v : {c.height, c.width, c.channels, c.patch, c.dim, c.depth, c.heads, c.num_classes, c.mlp_ratio}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.str(ck.meta.dataset);
  w.str(ck.meta.protocol);
  w.u64(ck.meta.split_seed);
  w.u32(static_cast<std::uint32_t>(ck.meta.known.size()));
  for (int k : ck.meta.known) w.u32(static_cast<std::uint32_t>(k));

  std::vector<NamedTensor<T>> params = ck.model.parameters();
  if (stage2) {
    for (auto& p : ck.head->parameters()) params.push_back(p);
  }
  w.u32(static_cast<std::uint32_t>(params.size() + (stage2 ? 1 : 0) + 2));
  for (const auto& p : params) detail::write_blob<T>(w, p.name, p.tensor.shape(), p.tensor.values());
  if (stage2) detail::write_blob<T>(w, "centers", {ck.centers.num_classes(), ck.centers.dim()}, ck.centers.values());
  const std::size_t ch = c.channels;
  detail::write_blob<float>(w, "norm.mean", {ch}, ck.normalizer.mean);
  detail::write_blob<float>(w, "norm.std", {ch}, ck.normalizer.stddev);
  return w.take();
}

template <class T>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader rr(bytes);
  rr.need(8, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0) throw FormatError("not a checkpoint: bad magic", 0);
  rr.skip(8);
  const std::size_t version_at = rr.offset();
  const std::uint32_t version = rr.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  Checkpoint<T> ck;
  const std::size_t stage_at = rr.offset();
  ck.meta.stage = rr.u32("stage");
  if (ck.meta.stage != 1 && ck.meta.stage != 2) {
    throw FormatError("invalid checkpoint stage " + std::to_string(ck.meta.stage), stage_at);
  }
  ck.meta.seed = rr.u64("seed");
  const std::size_t config_at = rr.offset();
  ModelConfig c;
  c.height = rr.u32("config");
  c.width = rr.u32("config");
  c.channels = rr.u32("config");
  c.patch = rr.u32("config");
  c.dim = rr.u32("config");
  c.depth = rr.u32("config");
  c.heads = rr.u32("config");
  c.num_classes = rr.u32("config");
  c.mlp_ratio = rr.u32("config");
  try {
    c = c.validated();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint holds an invalid model config: ") + e.what(), config_at);
  }
  if (4.0 * detail::parameter_count(c) > static_cast<double>(bytes.size())) {
    throw FormatError("checkpoint model config needs more parameters than the file holds", config_at);
  }
  ck.meta.dataset = rr.str("dataset");
  ck.meta.protocol = rr.str("protocol");
  ck.meta.split_seed = rr.u64("split seed");
  const std::size_t known_at = rr.offset();
  const std::uint32_t nk = rr.u32("known class count");
  if (nk != c.num_classes) {
    throw FormatError("checkpoint lists " + std::to_string(nk) + " known classes but K = " + std::to_string(c.num_classes),
                      known_at);
  }
  rr.need(static_cast<std::size_t>(nk) * 4, "known classes");
  for (std::uint32_t i = 0; i < nk; ++i) ck.meta.known.push_back(static_cast<int>(rr.u32("known classes")));

  ck.model = VitModel<T>::init(c, 0);
  std::vector<NamedTensor<T>> params = ck.model.parameters();
  const bool stage2 = ck.meta.stage == 2;
  if (stage2) {
    ck.head = DetectionHead<T>::init(c.dim, DetectionInit::identity, 0);
    for (auto& p : ck.head->parameters()) params.push_back(p);
  }
  const std::size_t count_at = rr.offset();
  const std::uint32_t blobs = rr.u32("blob count");
  const std::size_t expected = params.size() + (stage2 ? 1 : 0) + 2;
  if (blobs != expected) {
    throw FormatError("checkpoint has " + std::to_string(blobs) + " blobs, expected " + std::to_string(expected), count_at);
  }
  {
    for (const auto& p : params) detail::load_into(rr, p);
    if (stage2) {
      const std::vector<float> v = detail::read_blob(rr, "centers", {c.num_classes, c.dim});
      ck.centers = ClassCenters<T>(c.num_classes, c.dim, std::vector<T>(v.begin(), v.end()), /*frozen=*/true);
    }
    ck.normalizer.mean = detail::read_blob(rr, "norm.mean", {c.channels});
    ck.normalizer.stddev = detail::read_blob(rr, "norm.std", {c.channels});
  }
  if (!rr.done()) throw FormatError("trailing bytes after checkpoint payload", rr.offset());
  return ck;
}

template <class T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ck));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  try {
    return decode_checkpoint<T>(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.message(), e.offset());
  }
}

}  // namespace osrvit

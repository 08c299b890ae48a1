#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "osrvit/ops.hpp"
#include "osrvit/random.hpp"
#include "osrvit/tensor.hpp"

namespace osrvit {

/// Architectural scalars of the toy vision transformer. Call validated()
/// before use; it checks divisibility and fills the derived patch count.
struct ModelConfig {
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t channels = 1;
  std::size_t patch = 7;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t num_classes = 6;
  std::size_t mlp_ratio = 4;
  std::size_t num_patches = 0;  // derived: H·W/P²

  ModelConfig validated() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (height == 0 || width == 0 || channels == 0 || patch == 0 || dim == 0 || heads == 0 ||
        num_classes == 0 || mlp_ratio == 0) {
      fail("all sizes except depth must be positive");
    }
    if (height % patch != 0 || width % patch != 0) {
      fail("patch size " + std::to_string(patch) + " must divide image size " + std::to_string(height) + "x" +
           std::to_string(width));
    }
    if (dim % heads != 0) {
      fail("embedding width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
    }
    ModelConfig c = *this;
    c.num_patches = (height / patch) * (width / patch);
    return c;
  }

  std::size_t seq_len() const { return num_patches + 1; }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t mlp_dim() const { return mlp_ratio * dim; }
  std::size_t image_size() const { return height * width * channels; }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
struct PatchEmbeddingParams {
  Tensor<T> proj;       // E: (P²·C)×D
  Tensor<T> pos;        // E_pos: (N+1)×D
  Tensor<T> cls_token;  // x_cls: D
};

template <class T>
struct EncoderLayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, wk, wv, wo;  // D×D
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> mlp_w1, mlp_b1;  // D×(r·D), r·D
  Tensor<T> mlp_w2, mlp_b2;  // (r·D)×D, D
};

template <class T>
struct ClassifierHeadParams {
  Tensor<T> weight;  // D×K
  Tensor<T> bias;    // K
};

template <class T>
struct Classification {
  Tensor<T> logits;  // B×K
  Tensor<T> probs;   // B×K
  std::vector<int> labels;
};

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Splits `batch` images (each H×W×C, row-major, channel fastest) into patch
/// rows. Patches are ordered row-major over the patch grid and each patch is
/// flattened in (row, col, channel) order. Result: [B, N, P²·C].
template <class T, class Pixel>
Tensor<T> patchify(std::span<const Pixel> images, std::size_t batch, const ModelConfig& config) {
  const std::size_t h = config.height, w = config.width, c = config.channels, p = config.patch;
  if (batch == 0 || images.size() != batch * h * w * c) {
    throw ConfigError("patchify: got " + std::to_string(images.size()) + " values for " + std::to_string(batch) +
                      " images of " + std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
  }
  if (config.num_patches == 0) throw ConfigError("patchify: model config not validated");
  const std::size_t gw = w / p;
  const std::size_t n = config.num_patches;
  const std::size_t pd = config.patch_dim();
  Tensor<T> out({batch, n, pd});
  auto dst = out.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const Pixel* img = images.data() + b * h * w * c;
    for (std::size_t patch_idx = 0; patch_idx < n; ++patch_idx) {
      const std::size_t pr = patch_idx / gw, pc = patch_idx % gw;
      T* row = dst.data() + (b * n + patch_idx) * pd;
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            row[k++] = static_cast<T>(img[((pr * p + y) * w + (pc * p + x)) * c + ch]);
    }
  }
  return out;
}

/// z_0 = [x_cls; x_p¹E; …; x_pᴺE] + E_pos, batched: [B, N, P²C] → [B, N+1, D].
template <class T>
Tensor<T> embed(const Tensor<T>& patches, const PatchEmbeddingParams<T>& params) {
  if (patches.rank() != 3) throw DimensionError("embed: patches must be [B, N, P²C], got " + shape_str(patches.shape()));
  const std::size_t b = patches.dim(0), n = patches.dim(1), pd = patches.dim(2);
  const std::size_t d = params.proj.dim(1);
  if (params.proj.dim(0) != pd || params.pos.dim(0) != n + 1 || params.pos.dim(1) != d ||
      params.cls_token.numel() != d) {
    throw DimensionError("embed: parameters do not match patch shape " + shape_str(patches.shape()));
  }
  Tensor<T> projected = matmul(reshape(patches, {b * n, pd}), params.proj);  // [B·N, D]
  const std::size_t s = n + 1;
  Tensor<T> out({b, s, d});
  const auto& pos = params.pos;
  const auto& cls = params.cls_token;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[(i * s) * d + j] = cls[j] + pos[j];
    for (std::size_t t = 1; t < s; ++t)
      for (std::size_t j = 0; j < d; ++j)
        out[(i * s + t) * d + j] = projected[(i * n + t - 1) * d + j] + pos[t * d + j];
  }
  auto *prn = projected.node(), *posn = pos.node(), *clsn = cls.node(), *on = out.node();
  attach(out, {projected, pos, cls}, [=] {
    const T* g = on->grad.data();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t t = 0; t < s; ++t) {
        const T* gr = g + (i * s + t) * d;
        if (!posn->grad.empty())
          for (std::size_t j = 0; j < d; ++j) posn->grad[t * d + j] += gr[j];
        if (t == 0) {
          if (!clsn->grad.empty())
            for (std::size_t j = 0; j < d; ++j) clsn->grad[j] += gr[j];
        } else if (!prn->grad.empty()) {
          for (std::size_t j = 0; j < d; ++j) prn->grad[(i * n + t - 1) * d + j] += gr[j];
        }
      }
    }
  });
  return out;
}

/// Multi-head scaled dot-product self-attention over z [B, S, D]. When
/// `weights` is non-null it receives the attention matrices, [B·A, S, S].
template <class T>
Tensor<T> msa(const Tensor<T>& z, const EncoderLayerParams<T>& layer, std::size_t heads,
              Tensor<T>* weights = nullptr) {
  if (z.rank() != 3) throw DimensionError("msa: input must be [B, S, D], got " + shape_str(z.shape()));
  const std::size_t b = z.dim(0), s = z.dim(1), d = z.dim(2);
  if (heads == 0 || d % heads != 0) throw DimensionError("msa: width not divisible by head count");
  const std::size_t dh = d / heads;
  const Tensor<T> flat = reshape(z, {b * s, d});
  auto split_heads = [&](const Tensor<T>& x) {
    return reshape(permute(reshape(x, {b, s, heads, dh}), {0, 2, 1, 3}), {b * heads, s, dh});
  };
  Tensor<T> q = split_heads(matmul(flat, layer.wq));
  Tensor<T> k = split_heads(matmul(flat, layer.wk));
  Tensor<T> v = split_heads(matmul(flat, layer.wv));
  Tensor<T> scores = scale(bmm(q, k, /*transpose_b=*/true), T{1} / std::sqrt(static_cast<T>(dh)));
  Tensor<T> attn = softmax(scores, -1);
  if (weights != nullptr) *weights = attn;
  Tensor<T> ctx = bmm(attn, v);  // [B·A, S, dh]
  Tensor<T> merged = reshape(permute(reshape(ctx, {b, heads, s, dh}), {0, 2, 1, 3}), {b * s, d});
  return reshape(matmul(merged, layer.wo), {b, s, d});
}

template <class T>
Tensor<T> mlp(const Tensor<T>& z, const EncoderLayerParams<T>& layer) {
  const std::size_t b = z.dim(0), s = z.dim(1), d = z.dim(2);
  Tensor<T> hidden = gelu(add_bias(matmul(reshape(z, {b * s, d}), layer.mlp_w1), layer.mlp_b1));
  return reshape(add_bias(matmul(hidden, layer.mlp_w2), layer.mlp_b2), {b, s, d});
}

/// Pre-norm residual block: z + MSA(LN(z)), then + MLP(LN(z)).
template <class T>
Tensor<T> encoder_layer(const Tensor<T>& z, const EncoderLayerParams<T>& layer, std::size_t heads,
                        Tensor<T>* weights = nullptr) {
  Tensor<T> x = add(z, msa(layer_norm(z, layer.ln1_gain, layer.ln1_bias), layer, heads, weights));
  return add(x, mlp(layer_norm(x, layer.ln2_gain, layer.ln2_bias), layer));
}

/// Runs every layer then the final layer norm. Sequence length is unchanged.
template <class T>
Tensor<T> encode(const Tensor<T>& z0, const std::vector<EncoderLayerParams<T>>& layers, std::size_t heads,
                 const Tensor<T>& final_gain, const Tensor<T>& final_bias,
                 std::vector<Tensor<T>>* attention = nullptr) {
  Tensor<T> z = z0;
  for (const auto& layer : layers) {
    Tensor<T> w;
    z = encoder_layer(z, layer, heads, attention != nullptr ? &w : nullptr);
    if (attention != nullptr) attention->push_back(w);
  }
  return layer_norm(z, final_gain, final_bias);
}

/// Class-token state of the last layer: row 0 of each sequence, [B, D].
template <class T>
Tensor<T> extract_feature(const Tensor<T>& z_last) {
  if (z_last.rank() == 2) return select(z_last, 0, 0);  // single sequence [S, D] → [D]
  return select(z_last, 1, 0);
}

/// Index of the largest entry; ties go to the lowest index.
template <class T>
int argmax(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return static_cast<int>(best);
}

template <class T>
Classification<T> classify(const Tensor<T>& features, const ClassifierHeadParams<T>& head) {
  Classification<T> out;
  out.logits = add_bias(matmul(features, head.weight), head.bias);
  out.probs = softmax(out.logits, -1);
  const std::size_t k = head.bias.numel();
  const std::size_t b = features.dim(0);
  out.labels.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    out.labels[i] = argmax(std::span<const T>(out.logits.values().data() + i * k, k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Feature extractor (patch embedding, encoder, final norm) plus the linear
/// classification head.
template <class T>
class VitModel {
 public:
  VitModel() = default;

  /// Truncated-normal (std 0.02) projections and embeddings; zero biases and
  /// class token; unit layer-norm gains.
  static VitModel init(const ModelConfig& cfg, std::uint64_t seed) {
    VitModel m;
    m.config_ = cfg.validated();
    const auto& c = m.config_;
    Rng rng = make_rng(seed, 0x5eed'0001);
    auto normal = [&](Shape shape) {
      Tensor<T> t(std::move(shape));
      fill_truncated_normal(t, 0.02, rng);
      return t;
    };
    auto zeros = [](Shape shape) { return Tensor<T>(std::move(shape)); };
    auto ones = [](Shape shape) { return Tensor<T>(std::move(shape), T{1}); };
    const std::size_t d = c.dim;
    m.embedding_.proj = normal({c.patch_dim(), d});
    m.embedding_.pos = normal({c.seq_len(), d});
    m.embedding_.cls_token = zeros({d});
    for (std::size_t l = 0; l < c.depth; ++l) {
      EncoderLayerParams<T> layer;
      layer.ln1_gain = ones({d});
      layer.ln1_bias = zeros({d});
      layer.wq = normal({d, d});
      layer.wk = normal({d, d});
      layer.wv = normal({d, d});
      layer.wo = normal({d, d});
      layer.ln2_gain = ones({d});
      layer.ln2_bias = zeros({d});
      layer.mlp_w1 = normal({d, c.mlp_dim()});
      layer.mlp_b1 = zeros({c.mlp_dim()});
      layer.mlp_w2 = normal({c.mlp_dim(), d});
      layer.mlp_b2 = zeros({d});
      m.layers_.push_back(std::move(layer));
    }
    m.final_gain_ = ones({d});
    m.final_bias_ = zeros({d});
    m.head_.weight = normal({d, c.num_classes});
    m.head_.bias = zeros({c.num_classes});
    for (auto& p : m.parameters()) p.tensor.set_requires_grad();
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const PatchEmbeddingParams<T>& embedding() const { return embedding_; }
  const std::vector<EncoderLayerParams<T>>& layers() const { return layers_; }
  const ClassifierHeadParams<T>& head() const { return head_; }
  PatchEmbeddingParams<T>& embedding() { return embedding_; }
  std::vector<EncoderLayerParams<T>>& layers() { return layers_; }
  ClassifierHeadParams<T>& head() { return head_; }
  const Tensor<T>& final_gain() const { return final_gain_; }
  const Tensor<T>& final_bias() const { return final_bias_; }

  /// Feature-extractor parameters in checkpoint order.
  std::vector<NamedTensor<T>> feature_parameters() const {
    std::vector<NamedTensor<T>> out{{"embed.proj", embedding_.proj},
                                    {"embed.pos", embedding_.pos},
                                    {"embed.cls", embedding_.cls_token}};
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.push_back({p + "ln1.gain", L.ln1_gain});
      out.push_back({p + "ln1.bias", L.ln1_bias});
      out.push_back({p + "attn.wq", L.wq});
      out.push_back({p + "attn.wk", L.wk});
      out.push_back({p + "attn.wv", L.wv});
      out.push_back({p + "attn.wo", L.wo});
      out.push_back({p + "ln2.gain", L.ln2_gain});
      out.push_back({p + "ln2.bias", L.ln2_bias});
      out.push_back({p + "mlp.w1", L.mlp_w1});
      out.push_back({p + "mlp.b1", L.mlp_b1});
      out.push_back({p + "mlp.w2", L.mlp_w2});
      out.push_back({p + "mlp.b2", L.mlp_b2});
    }
    out.push_back({"final_ln.gain", final_gain_});
    out.push_back({"final_ln.bias", final_bias_});
    return out;
  }

  std::vector<NamedTensor<T>> classifier_parameters() const {
    return {{"head.weight", head_.weight}, {"head.bias", head_.bias}};
  }

  std::vector<NamedTensor<T>> parameters() const {
    auto out = feature_parameters();
    for (auto& p : classifier_parameters()) out.push_back(p);
    return out;
  }

  /// f = φ_f(x) for a batch of normalized images, [B, D].
  template <class Pixel>
  Tensor<T> features(std::span<const Pixel> images, std::size_t batch,
                     std::vector<Tensor<T>>* attention = nullptr) const {
    Tensor<T> z0 = embed(patchify<T>(images, batch, config_), embedding_);
    return extract_feature(encode(z0, layers_, config_.heads, final_gain_, final_bias_, attention));
  }

  Classification<T> classify_features(const Tensor<T>& f) const { return classify(f, head_); }

 private:
  ModelConfig config_;
  PatchEmbeddingParams<T> embedding_;
  std::vector<EncoderLayerParams<T>> layers_;
  Tensor<T> final_gain_, final_bias_;
  ClassifierHeadParams<T> head_;
};

}  // namespace osrvit

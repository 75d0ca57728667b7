#pragma once

// Dual transformer encoders. The vision side turns an image (pixel grid or
// precomputed feature vector) into a token sequence led by a learnable CLS
// token; the text side embeds an SOS ... EOS token sequence. Both run the same
// post-norm block, LayerNorm(E + MSA(E)), and return an L2-normalized vector
// (CLS activation for images, EOS activation for text).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossret/autodiff.hpp"
#include "crossret/data_corpus.hpp"
#include "crossret/errors.hpp"
#include "crossret/rng.hpp"

namespace crossret {

enum class ImageInputMode { kFeatures, kPixels };

struct EncoderConfig {
  ImageInputMode input_mode = ImageInputMode::kFeatures;
  std::size_t feature_dim = 32;  ///< input vector size in feature mode
  std::size_t image_height = 8;  ///< pixel mode only
  std::size_t image_width = 8;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t n_heads = 2;
  std::size_t n_layers = 1;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 16;
  bool mlp = false;
  bool layer_norm_affine = true;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("encoder.") + name, "must be positive");
    };
    positive(embed_dim, "embed_dim");
    positive(n_heads, "n_heads");
    positive(n_layers, "n_layers");
    positive(vocab_size, "vocab_size");
    positive(patch_size, "patch_size");
    if (max_seq_len < 2) throw ConfigError("encoder.max_seq_len", "must hold at least SOS and EOS");
    if (embed_dim % n_heads != 0) throw ConfigError("encoder.n_heads", "must divide embed_dim");
    if (input_mode == ImageInputMode::kFeatures) {
      positive(feature_dim, "feature_dim");
    } else {
      positive(image_height, "image_height");
      positive(image_width, "image_width");
      if (image_height % patch_size != 0 || image_width % patch_size != 0)
        throw ConfigError("encoder.patch_size", "must divide the image size");
    }
  }

  std::size_t patch_count() const {
    return input_mode == ImageInputMode::kFeatures ? 1 : (image_height / patch_size) * (image_width / patch_size);
  }
  std::size_t patch_pixels() const { return patch_size * patch_size * 3; }
  std::size_t head_dim() const { return embed_dim / n_heads; }

  bool operator==(const EncoderConfig&) const = default;
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"input_mode", c.input_mode == ImageInputMode::kFeatures ? "features" : "pixels"},
          {"feature_dim", c.feature_dim},
          {"image_height", c.image_height},
          {"image_width", c.image_width},
          {"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},
          {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},
          {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len},
          {"mlp", c.mlp},
          {"layer_norm_affine", c.layer_norm_affine},
          {"seed", c.seed}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "input_mode") {
        const auto s = v.get<std::string>();
        if (s == "features") c.input_mode = ImageInputMode::kFeatures;
        else if (s == "pixels") c.input_mode = ImageInputMode::kPixels;
        else throw ConfigError("encoder.input_mode", "expected 'features' or 'pixels'");
      } else if (key == "feature_dim") c.feature_dim = v.get<std::size_t>();
      else if (key == "image_height") c.image_height = v.get<std::size_t>();
      else if (key == "image_width") c.image_width = v.get<std::size_t>();
      else if (key == "patch_size") c.patch_size = v.get<std::size_t>();
      else if (key == "embed_dim") c.embed_dim = v.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = v.get<std::size_t>();
      else if (key == "n_layers") c.n_layers = v.get<std::size_t>();
      else if (key == "vocab_size") c.vocab_size = v.get<std::size_t>();
      else if (key == "max_seq_len") c.max_seq_len = v.get<std::size_t>();
      else if (key == "mlp") c.mlp = v.get<bool>();
      else if (key == "layer_norm_affine") c.layer_norm_affine = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("encoder." + key, "unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("encoder." + key, e.what());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Token sequences

/// SOS, content tokens, EOS. EOS is always the final token.
class TokenSequence {
 public:
  /// Wraps caption content tokens, truncating content so the result fits max_len.
  static TokenSequence wrap(const std::vector<int>& content, std::size_t max_len) {
    std::vector<int> ids;
    ids.push_back(kSosToken);
    const std::size_t room = max_len >= 2 ? max_len - 2 : 0;
    for (std::size_t i = 0; i < content.size() && i < room; ++i) ids.push_back(content[i]);
    ids.push_back(kEosToken);
    return TokenSequence(std::move(ids));
  }

  /// Validates an already-bracketed sequence.
  explicit TokenSequence(std::vector<int> ids) : ids_(std::move(ids)) {
    if (ids_.empty() || ids_.back() != kEosToken) throw MissingEOS();
    if (ids_.front() != kSosToken) throw Error("token sequence must start with SOS");
    for (std::size_t i = 0; i + 1 < ids_.size(); ++i) {
      if (ids_[i] == kEosToken) throw Error("EOS must appear exactly once, at the end");
    }
  }

  const std::vector<int>& ids() const noexcept { return ids_; }
  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t eos_position() const noexcept { return ids_.size() - 1; }

 private:
  std::vector<int> ids_;
};

// ---------------------------------------------------------------------------
// Parameters

namespace params {

inline std::string block_prefix(const std::string& tower, std::size_t layer) {
  return tower + ".block" + std::to_string(layer) + ".";
}

}  // namespace params

/// Uniform(-1/sqrt(d), 1/sqrt(d)) for every weight matrix and embedding table;
/// LayerNorm gains start at 1 and offsets at 0.
inline ParamStore init_params(const EncoderConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  Rng rng = make_rng(cfg.seed, "init");
  std::uniform_real_distribution<double> u(-bound, bound);
  ParamStore p;
  // Insertion order fixes the RNG draw order; std::map then sorts names.
  auto uniform = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index k = 0; k < c; ++k) m(i, k) = u(rng);
    p.emplace(name, std::move(m));
  };
  auto blocks = [&](const std::string& tower) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string b = params::block_prefix(tower, l);
      uniform(b + "wq", d, d);
      uniform(b + "wk", d, d);
      uniform(b + "wv", d, d);
      uniform(b + "wo", d, d);
      if (cfg.layer_norm_affine) {
        p.emplace(b + "ln1.gamma", Matrix::Ones(1, d));
        p.emplace(b + "ln1.beta", Matrix::Zero(1, d));
      }
      if (cfg.mlp) {
        uniform(b + "mlp.w1", d, 2 * d);
        p.emplace(b + "mlp.b1", Matrix::Zero(1, 2 * d));
        uniform(b + "mlp.w2", 2 * d, d);
        p.emplace(b + "mlp.b2", Matrix::Zero(1, d));
        if (cfg.layer_norm_affine) {
          p.emplace(b + "ln2.gamma", Matrix::Ones(1, d));
          p.emplace(b + "ln2.beta", Matrix::Zero(1, d));
        }
      }
    }
  };

  const auto in_dim = static_cast<Eigen::Index>(cfg.input_mode == ImageInputMode::kFeatures ? cfg.feature_dim
                                                                                            : cfg.patch_pixels());
  uniform("vision.patch.w", in_dim, d);
  p.emplace("vision.patch.b", Matrix::Zero(1, d));
  uniform("vision.cls", 1, d);
  uniform("vision.pos", static_cast<Eigen::Index>(cfg.patch_count() + 1), d);
  blocks("vision");
  uniform("text.tok", static_cast<Eigen::Index>(cfg.vocab_size), d);
  uniform("text.pos", static_cast<Eigen::Index>(cfg.max_seq_len), d);
  blocks("text");
  return p;
}

/// Binds every parameter with the given prefix onto a tape.
class Bound {
 public:
  Bound(ad::Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  ad::Var operator()(const std::string& name) const {
    auto it = store_.find(name);
    if (it == store_.end()) throw IncompatibleCheckpoint("missing parameter '" + name + "'");
    return tape_.bind(name, it->second);
  }
  bool contains(const std::string& name) const { return store_.contains(name); }
  ad::Tape& tape() const { return tape_; }

 private:
  ad::Tape& tape_;
  const ParamStore& store_;
};

// ---------------------------------------------------------------------------
// Building blocks

/// (H/p)(W/p) x (p*p*3) matrix, patches in raster order, pixels within a patch
/// raster order with channel fastest.
inline Matrix patchify(const PixelGrid& image, std::size_t patch) {
  if (patch == 0 || image.height % patch != 0 || image.width % patch != 0)
    throw NonDivisibleImage(image.height, image.width, patch);
  const std::size_t gh = image.height / patch, gw = image.width / patch;
  Matrix out(static_cast<Eigen::Index>(gh * gw), static_cast<Eigen::Index>(patch * patch * 3));
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      const auto r = static_cast<Eigen::Index>(py * gw + px);
      Eigen::Index c = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch) out(r, c++) = image.at(py * patch + y, px * patch + x, ch);
    }
  }
  return out;
}

/// CLS row followed by projected patches (or the single projected feature
/// vector), plus positional embeddings.
inline ad::Var patchify_and_embed(const Bound& p, const EncoderConfig& cfg, const ImageData& image) {
  ad::Tape& t = p.tape();
  Matrix tokens;
  if (const auto* f = std::get_if<Vector>(&image)) {
    if (cfg.input_mode != ImageInputMode::kFeatures) throw IncompatibleCheckpoint("model expects pixel images");
    if (static_cast<std::size_t>(f->size()) != cfg.feature_dim)
      throw DimensionMismatch(cfg.feature_dim, static_cast<std::size_t>(f->size()));
    tokens = f->transpose();
  } else {
    if (cfg.input_mode != ImageInputMode::kPixels) throw IncompatibleCheckpoint("model expects feature vectors");
    const auto& g = std::get<PixelGrid>(image);
    if (g.height != cfg.image_height || g.width != cfg.image_width)
      throw DimensionMismatch(cfg.image_height * cfg.image_width, g.height * g.width);
    tokens = patchify(g, cfg.patch_size);
  }
  ad::Var projected = ad::add_row(ad::matmul(t.constant(std::move(tokens)), p("vision.patch.w")), p("vision.patch.b"));
  const ad::Var parts[] = {p("vision.cls"), projected};
  ad::Var seq = ad::concat_rows(parts);
  return ad::add(seq, ad::slice_rows(p("vision.pos"), 0, seq.rows()));
}

/// Heads take contiguous column slices of the d x d projections; scores are
/// scaled by 1/sqrt(d / n_heads).
inline ad::Var multi_head_self_attention(ad::Var e, ad::Var wq, ad::Var wk, ad::Var wv, ad::Var wo, std::size_t n_heads) {
  const Eigen::Index d = e.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(n_heads);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  ad::Var q = ad::matmul(e, wq);
  ad::Var k = ad::matmul(e, wk);
  ad::Var v = ad::matmul(e, wv);
  std::vector<ad::Var> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
    ad::Var qh = ad::slice_cols(q, c0, dh);
    ad::Var kh = ad::slice_cols(k, c0, dh);
    ad::Var vh = ad::slice_cols(v, c0, dh);
    ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul_transposed(qh, kh), inv_scale));
    heads.push_back(ad::matmul(attn, vh));
  }
  ad::Var concat = n_heads == 1 ? heads.front() : ad::concat_cols(heads);
  return ad::matmul(concat, wo);
}

inline ad::Var layer_norm(const Bound& p, ad::Var x, const std::string& prefix, bool affine) {
  ad::Var y = ad::layer_norm_rows(x, 1e-5);
  if (!affine) return y;
  return ad::add_row(ad::mul_row(y, p(prefix + ".gamma")), p(prefix + ".beta"));
}

inline ad::Var encoder_block(const Bound& p, const EncoderConfig& cfg, ad::Var e, const std::string& prefix) {
  ad::Var msa = multi_head_self_attention(e, p(prefix + "wq"), p(prefix + "wk"), p(prefix + "wv"), p(prefix + "wo"),
                                          cfg.n_heads);
  ad::Var out = layer_norm(p, ad::add(e, msa), prefix + "ln1", cfg.layer_norm_affine);
  if (cfg.mlp) {
    ad::Var hidden = ad::relu(ad::add_row(ad::matmul(out, p(prefix + "mlp.w1")), p(prefix + "mlp.b1")));
    ad::Var ff = ad::add_row(ad::matmul(hidden, p(prefix + "mlp.w2")), p(prefix + "mlp.b2"));
    out = layer_norm(p, ad::add(out, ff), prefix + "ln2", cfg.layer_norm_affine);
  }
  return out;
}

/// 1 x d unit row.
inline ad::Var encode_image(const Bound& p, const EncoderConfig& cfg, const ImageData& image) {
  ad::Var x = patchify_and_embed(p, cfg, image);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) x = encoder_block(p, cfg, x, params::block_prefix("vision", l));
  return ad::l2_normalize_rows(ad::row(x, 0));
}

/// 1 x d unit row taken at the EOS position.
inline ad::Var encode_text(const Bound& p, const EncoderConfig& cfg, const TokenSequence& tokens) {
  if (tokens.size() > cfg.max_seq_len) throw Error("token sequence longer than max_seq_len");
  std::vector<Eigen::Index> ids;
  ids.reserve(tokens.size());
  for (int id : tokens.ids()) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) throw Error("token id " + std::to_string(id) + " outside vocabulary");
    ids.push_back(id);
  }
  const auto len = static_cast<Eigen::Index>(ids.size());
  ad::Var x = ad::add(ad::gather_rows(p("text.tok"), std::move(ids)), ad::slice_rows(p("text.pos"), 0, len));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) x = encoder_block(p, cfg, x, params::block_prefix("text", l));
  return ad::l2_normalize_rows(ad::row(x, static_cast<Eigen::Index>(tokens.eos_position())));
}

/// Segment inputs run through the image encoder: feature vectors directly, or in
/// pixel mode a flattened crop already resized to the image grid.
inline ImageData segment_as_image(const SegmentInput& seg, const EncoderConfig& cfg) {
  if (cfg.input_mode == ImageInputMode::kFeatures) return seg.feature;
  const std::size_t n = cfg.image_height * cfg.image_width * 3;
  if (static_cast<std::size_t>(seg.feature.size()) != n) throw DimensionMismatch(n, static_cast<std::size_t>(seg.feature.size()));
  PixelGrid g{cfg.image_height, cfg.image_width, std::vector<double>(seg.feature.data(), seg.feature.data() + n)};
  return g;
}

// ---------------------------------------------------------------------------
// Model

struct Model {
  EncoderConfig config;
  ParamStore params;

  static Model initialize(const EncoderConfig& cfg) { return Model{cfg, init_params(cfg)}; }

  Vector image_embedding(const ImageData& image) const {
    ad::Tape t(false);
    return encode_image(Bound(t, params), config, image).value().row(0).transpose();
  }

  Vector text_embedding(const std::vector<int>& caption) const {
    ad::Tape t(false);
    return encode_text(Bound(t, params), config, TokenSequence::wrap(caption, config.max_seq_len)).value().row(0).transpose();
  }

  TokenSequence tokens(const std::vector<int>& caption) const { return TokenSequence::wrap(caption, config.max_seq_len); }
};

}  // namespace crossret

#pragma once

// Feature enhancement: frame/caption co-attention followed by one temporal
// encoder layer per modality. All blocks use a pre-normalization layout and
// keep an outer residual, so zeroing the attention and feed-forward output
// projections turns every block into the identity.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "narvid/dataio.hpp"
#include "narvid/error.hpp"
#include "narvid/rng.hpp"
#include "narvid/tensor.hpp"

namespace narvid {

struct ModelConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t max_frames = 12;
  std::size_t ff_mult = 2;  // hidden width of feed-forward sublayers = ff_mult * dim

  void validate() const {
    if (dim < 2) throw ConfigError("model dim must be at least 2");
    if (heads == 0 || dim % heads != 0)
      throw ConfigError("head count " + std::to_string(heads) + " does not divide dim " +
                        std::to_string(dim));
    if (max_frames == 0) throw ConfigError("max_frames must be positive");
    if (ff_mult == 0) throw ConfigError("ff_mult must be positive");
  }
  std::size_t head_dim() const { return dim / heads; }
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // D x D each, no biases
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;  // D x F, 1 x F, F x D, 1 x D
};

struct LayerNormParams {
  Tensor gain, bias;  // 1 x D
};

// attention sublayer + feed-forward sublayer, each behind its own layer norm.
struct BlockParams {
  LayerNormParams ln_attn;
  AttentionParams attn;
  LayerNormParams ln_ff;
  FeedForwardParams ff;
};

// Learnable weights. Tensors are shared handles: copying a ModelParams aliases
// the same storage, use clone() for an independent copy.
struct ModelParams {
  ModelConfig config;
  BlockParams co_video;       // video stream: queries from frames, keys/values from captions
  BlockParams co_narration;   // narration stream: the mirror image
  BlockParams temporal_video;
  BlockParams temporal_narration;
  Tensor positional;   // max_frames x D
  Tensor word_weight;  // D x 1, scores each query word for word-to-frame aggregation
  Tensor word_bias;    // 1 x 1

  // Stable, ordered name -> tensor listing (checkpoint order, optimizer order).
  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    const auto block = [&out](const std::string& prefix, const BlockParams& b) {
      out.emplace_back(prefix + ".ln_attn.gain", b.ln_attn.gain);
      out.emplace_back(prefix + ".ln_attn.bias", b.ln_attn.bias);
      out.emplace_back(prefix + ".attn.wq", b.attn.wq);
      out.emplace_back(prefix + ".attn.wk", b.attn.wk);
      out.emplace_back(prefix + ".attn.wv", b.attn.wv);
      out.emplace_back(prefix + ".attn.wo", b.attn.wo);
      out.emplace_back(prefix + ".ln_ff.gain", b.ln_ff.gain);
      out.emplace_back(prefix + ".ln_ff.bias", b.ln_ff.bias);
      out.emplace_back(prefix + ".ff.w1", b.ff.w1);
      out.emplace_back(prefix + ".ff.b1", b.ff.b1);
      out.emplace_back(prefix + ".ff.w2", b.ff.w2);
      out.emplace_back(prefix + ".ff.b2", b.ff.b2);
    };
    block("co_video", co_video);
    block("co_narration", co_narration);
    block("temporal_video", temporal_video);
    block("temporal_narration", temporal_narration);
    out.emplace_back("positional", positional);
    out.emplace_back("word_weight", word_weight);
    out.emplace_back("word_bias", word_bias);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  ModelParams clone() const;
  void zero_grad() const {
    for (auto t : tensors()) t.zero_grad();
  }
};

namespace model_detail {

inline Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::make_leaf(fan_in, fan_out, std::move(v), true);
}

inline LayerNormParams layer_norm(std::size_t d) {
  return {Tensor::full(1, d, 1.0, true), Tensor::zeros(1, d, true)};
}

inline BlockParams block(Rng& rng, const ModelConfig& c) {
  const std::size_t d = c.dim, f = c.ff_mult * c.dim;
  BlockParams b;
  b.ln_attn = layer_norm(d);
  b.attn.wq = xavier(rng, d, d);
  b.attn.wk = xavier(rng, d, d);
  b.attn.wv = xavier(rng, d, d);
  b.attn.wo = xavier(rng, d, d);
  b.ln_ff = layer_norm(d);
  b.ff.w1 = xavier(rng, d, f);
  b.ff.b1 = Tensor::zeros(1, f, true);
  b.ff.w2 = xavier(rng, f, d);
  b.ff.b2 = Tensor::zeros(1, d, true);
  return b;
}

inline Tensor copy_leaf(const Tensor& t) {
  return Tensor::make_leaf(t.rows(), t.cols(), t.data(), t.requires_grad());
}

inline BlockParams copy_block(const BlockParams& b) {
  return {{copy_leaf(b.ln_attn.gain), copy_leaf(b.ln_attn.bias)},
          {copy_leaf(b.attn.wq), copy_leaf(b.attn.wk), copy_leaf(b.attn.wv), copy_leaf(b.attn.wo)},
          {copy_leaf(b.ln_ff.gain), copy_leaf(b.ln_ff.bias)},
          {copy_leaf(b.ff.w1), copy_leaf(b.ff.b1), copy_leaf(b.ff.w2), copy_leaf(b.ff.b2)}};
}

}  // namespace model_detail

inline ModelParams ModelParams::clone() const {
  ModelParams p;
  p.config = config;
  p.co_video = model_detail::copy_block(co_video);
  p.co_narration = model_detail::copy_block(co_narration);
  p.temporal_video = model_detail::copy_block(temporal_video);
  p.temporal_narration = model_detail::copy_block(temporal_narration);
  p.positional = model_detail::copy_leaf(positional);
  p.word_weight = model_detail::copy_leaf(word_weight);
  p.word_bias = model_detail::copy_leaf(word_bias);
  return p;
}

// Seeded init: projections Xavier-uniform, norms (1, 0), biases and the
// positional table zero.
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParams p;
  p.config = config;
  p.co_video = model_detail::block(rng, config);
  p.co_narration = model_detail::block(rng, config);
  p.temporal_video = model_detail::block(rng, config);
  p.temporal_narration = model_detail::block(rng, config);
  p.positional = Tensor::zeros(config.max_frames, config.dim, true);
  p.word_weight = model_detail::xavier(rng, config.dim, 1);
  p.word_bias = Tensor::zeros(1, 1, true);
  return p;
}

// Scaled dot-product attention with `heads` heads over D-wide inputs:
// per head softmax(Q_h K_h^T / sqrt(D/h)) V_h, heads concatenated, then Wo.
inline Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                   const AttentionParams& p, std::size_t heads) {
  const std::size_t d = queries.cols();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("head count " + std::to_string(heads) + " does not divide dim " + std::to_string(d));
  if (keys.rows() != values.rows()) throw ShapeError("attention: keys and values differ in length");
  const std::size_t hd = d / heads;
  const Tensor q = matmul(queries, p.wq);
  const Tensor k = matmul(keys, p.wk);
  const Tensor v = matmul(values, p.wv);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    const Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    const Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    const Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(hd)));
    outs.push_back(matmul(softmax_rows(scores, 1.0), vh));
  }
  return matmul(heads == 1 ? outs.front() : concat_cols(outs), p.wo);
}

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return add_row_bias(matmul(gelu(add_row_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  return layer_norm_rows(x, p.gain, p.bias);
}

struct CoAttentionOutput {
  Tensor video;      // v_hat
  Tensor narration;  // n_hat
};

// Each stream attends to the other: h = x + MHA(LN(x), LN'(y)); out = h + FF(LN(h)).
inline CoAttentionOutput co_attention(const Tensor& frames, const Tensor& captions, const ModelParams& p) {
  if (frames.rows() != captions.rows())
    throw ShapeError("co_attention: " + std::to_string(frames.rows()) + " frames vs " +
                     std::to_string(captions.rows()) + " captions");
  const std::size_t heads = p.config.heads;
  const Tensor xv = layer_norm(frames, p.co_video.ln_attn);
  const Tensor xn = layer_norm(captions, p.co_narration.ln_attn);
  const Tensor hv = frames + multi_head_attention(xv, xn, xn, p.co_video.attn, heads);
  const Tensor hn = captions + multi_head_attention(xn, xv, xv, p.co_narration.attn, heads);
  return {hv + feed_forward(layer_norm(hv, p.co_video.ln_ff), p.co_video.ff),
          hn + feed_forward(layer_norm(hn, p.co_narration.ln_ff), p.co_narration.ff)};
}

enum class Modality { video, narration };

// seq_check = seq_hat + T(seq_hat + P[:K]) where T is the residual branch sum
// (self-attention, then feed-forward) of one encoder layer.
inline Tensor temporal(const Tensor& seq, const ModelParams& p, Modality modality) {
  const std::size_t k = seq.rows();
  if (k > p.config.max_frames)
    throw ConfigError("sequence of " + std::to_string(k) + " rows exceeds max_frames " +
                      std::to_string(p.config.max_frames));
  const BlockParams& b = modality == Modality::video ? p.temporal_video : p.temporal_narration;
  const Tensor x = seq + slice_rows(p.positional, 0, k);
  const Tensor xa = layer_norm(x, b.ln_attn);
  const Tensor attn = multi_head_attention(xa, xa, xa, b.attn, p.config.heads);
  const Tensor ff = feed_forward(layer_norm(x + attn, b.ln_ff), b.ff);
  return seq + attn + ff;
}

struct EnhancedFeatures {
  Tensor v_hat, n_hat;      // after co-attention
  Tensor v_check, n_check;  // after temporal blocks
};

// Query-independent, so callers compute it once per episode per batch.
inline EnhancedFeatures enhance(const Episode& e, const ModelParams& p) {
  const auto co = co_attention(Tensor::from_matrix(e.frames), Tensor::from_matrix(e.captions), p);
  return {co.video, co.narration, temporal(co.video, p, Modality::video),
          temporal(co.narration, p, Modality::narration)};
}

// ------------------------------------------------------------------ checkpoint
//
// "NRVC" | u32 version=1 | u32 entry count
// per entry: u16 name length | name | u32 ndim | u32 extents[ndim] | f64 payload
// Architecture and run settings travel as 1x1 "meta.*" entries.

struct Checkpoint {
  ModelParams params;
  std::map<std::string, double> meta;  // without the "meta." prefix
};

inline std::string encode_checkpoint(const ModelParams& p, const std::map<std::string, double>& meta = {}) {
  std::vector<std::pair<std::string, Matrix>> entries;
  entries.emplace_back("meta.dim", Matrix(1, 1, static_cast<double>(p.config.dim)));
  entries.emplace_back("meta.heads", Matrix(1, 1, static_cast<double>(p.config.heads)));
  entries.emplace_back("meta.max_frames", Matrix(1, 1, static_cast<double>(p.config.max_frames)));
  entries.emplace_back("meta.ff_mult", Matrix(1, 1, static_cast<double>(p.config.ff_mult)));
  for (const auto& [k, v] : meta) entries.emplace_back("meta." + k, Matrix(1, 1, v));
  for (const auto& [name, t] : p.named()) entries.emplace_back(name, t.matrix());

  std::string out = "NRVC";
  io::put_u32(out, 1);
  io::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, m] : entries) {
    io::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    io::put_u32(out, 2);
    io::put_u32(out, static_cast<std::uint32_t>(m.rows));
    io::put_u32(out, static_cast<std::uint32_t>(m.cols));
    io::put_matrix(out, m);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  io::Reader r(bytes);
  if (!r.has(4) || bytes.substr(0, 4) != "NRVC") throw FormatError("bad checkpoint magic (expected NRVC)");
  r.str(4, "magic");
  if (const auto v = r.u32("version"); v != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  const auto count = r.u32("entry count");
  std::map<std::string, Matrix> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u16("entry name length");
    std::string name = r.str(len, "entry name");
    const auto ndim = r.u32("ndim");
    if (ndim != 2) throw FormatError("checkpoint entry '" + name + "' has ndim " + std::to_string(ndim));
    const std::size_t rows = r.u32("rows");
    const std::size_t cols = r.u32("cols");
    if (r.remaining() / 8 < rows * cols) throw CorruptionError("checkpoint entry '" + name + "' truncated");
    entries[name] = r.matrix(rows, cols);
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes in checkpoint");

  const auto scalar = [&](const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end() || it->second.data.size() != 1)
      throw ValidationError("checkpoint missing '" + name + "'");
    return it->second.data[0];
  };
  ModelConfig config;
  config.dim = static_cast<std::size_t>(scalar("meta.dim"));
  config.heads = static_cast<std::size_t>(scalar("meta.heads"));
  config.max_frames = static_cast<std::size_t>(scalar("meta.max_frames"));
  config.ff_mult = static_cast<std::size_t>(scalar("meta.ff_mult"));

  Checkpoint ck;
  ck.params = init_params(config, 0);
  for (auto& [name, t] : ck.params.named()) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ValidationError("checkpoint missing tensor '" + name + "'");
    if (it->second.rows != t.rows() || it->second.cols != t.cols())
      throw ValidationError("checkpoint tensor '" + name + "' has wrong shape");
    if (!it->second.all_finite()) throw ValidationError("checkpoint tensor '" + name + "' is not finite");
    t.mutable_data() = it->second.data;
  }
  for (const auto& [name, m] : entries)
    if (name.starts_with("meta.") && m.data.size() == 1) ck.meta[name.substr(5)] = m.data[0];
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& p,
                            const std::map<std::string, double>& meta = {}) {
  io::write_file(path, encode_checkpoint(p, meta));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace narvid

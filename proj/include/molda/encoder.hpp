// SPDX-License-Identifier: Apache-2.0
#pragma once

// BERT-style transformer encoder with hand-written reverse mode, Adam and a
// linear warmup/decay learning-rate schedule.
//
// Layer (pre-LN, the default):
//   x = x + Dropout(Attention(LN1(x)))
//   x = x + Dropout(W2 GELU(W1 LN2(x)))
// followed by a final LayerNorm. The post-LN variant of the original BERT
// (x = LN1(x + Attention(x)), ...) is available through `ln_placement`; in
// that mode the "ln_final" parameters normalize the embeddings instead.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "molda/error.hpp"
#include "molda/rng.hpp"
#include "molda/tensor.hpp"
#include "molda/tokenizer.hpp"

namespace molda {

enum class LnPlacement { Pre, Post };
enum class Mode { Train, Eval };
enum class Pooling { Cls, Mean };

inline std::string to_string(Pooling p) { return p == Pooling::Cls ? "cls" : "mean"; }
inline Pooling pooling_from(const std::string& s) {
  if (s == "cls") return Pooling::Cls;
  if (s == "mean") return Pooling::Mean;
  fail(ErrorCode::Config, "unknown pooling '" + s + "'");
}

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden = 128;
  std::size_t ff = 256;
  std::size_t max_len = 128;
  std::size_t vocab_size = 512;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  LnPlacement ln_placement = LnPlacement::Pre;

  static EncoderConfig desk() { return {}; }
  static EncoderConfig full() { return {12, 12, 768, 3072, 128, 4096, 0.1, 0, LnPlacement::Pre}; }

  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (layers == 0 || heads == 0 || hidden == 0 || ff == 0 || max_len < 2 || vocab_size <= kSpecialCount)
      fail(ErrorCode::Config, "encoder dimensions must be positive");
    if (hidden % heads != 0) fail(ErrorCode::Config, "hidden size must be divisible by the head count");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorCode::Config, "dropout must lie in [0, 1)");
  }

  bool operator==(const EncoderConfig&) const = default;
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"layers", c.layers},   {"heads", c.heads},         {"hidden", c.hidden},
          {"ff", c.ff},           {"max_len", c.max_len},     {"vocab_size", c.vocab_size},
          {"dropout", c.dropout}, {"seed", c.seed},
          {"ln_placement", c.ln_placement == LnPlacement::Pre ? "pre" : "post"}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.ff = j.at("ff").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto ln = j.value("ln_placement", std::string("pre"));
    if (ln != "pre" && ln != "post") fail(ErrorCode::Config, "ln_placement must be pre or post");
    c.ln_placement = ln == "pre" ? LnPlacement::Pre : LnPlacement::Post;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {

inline std::string layer_name(std::size_t l, const char* leaf) { return "layer" + std::to_string(l) + "." + leaf; }

template <class T>
void layer_norm_forward(const Tensor<T>& in, const Tensor<T>& gain, const Tensor<T>& bias, Tensor<T>& out,
                        Tensor<T>& xhat, std::vector<T>& rstd) {
  const std::size_t n = in.rows(), d = in.cols();
  out = Tensor<T>(in.shape);
  xhat = Tensor<T>(in.shape);
  rstd.assign(n, T(0));
  constexpr T eps = T(1e-12);
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = &in.data[r * d];
    T mean = 0;
    for (std::size_t k = 0; k < d; ++k) mean += x[k];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t k = 0; k < d; ++k) var += (x[k] - mean) * (x[k] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t k = 0; k < d; ++k) {
      const T h = (x[k] - mean) * rs;
      xhat.data[r * d + k] = h;
      out.data[r * d + k] = h * gain.data[k] + bias.data[k];
    }
  }
}

/// Adds the input gradient into `dx`.
template <class T>
void layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& xhat, const std::vector<T>& rstd, const Tensor<T>& gain,
                         Tensor<T>& dgain, Tensor<T>& dbias, Tensor<T>& dx) {
  const std::size_t n = dy.rows(), d = dy.cols();
  std::vector<T> g(d);
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = &dy.data[r * d];
    const T* h = &xhat.data[r * d];
    T mean_g = 0, mean_gh = 0;
    for (std::size_t k = 0; k < d; ++k) {
      dgain.data[k] += dyr[k] * h[k];
      dbias.data[k] += dyr[k];
      g[k] = dyr[k] * gain.data[k];
      mean_g += g[k];
      mean_gh += g[k] * h[k];
    }
    mean_g /= static_cast<T>(d);
    mean_gh /= static_cast<T>(d);
    for (std::size_t k = 0; k < d; ++k) dx.data[r * d + k] += rstd[r] * (g[k] - mean_g - h[k] * mean_gh);
  }
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

/// Scaled keep-mask (0 or 1/(1-p)); empty when dropout is inactive.
template <class T>
Tensor<T> dropout_mask(std::vector<std::size_t> shape, double p, Mode mode, std::uint64_t seed) {
  if (mode == Mode::Eval || p <= 0.0) return {};
  Tensor<T> m(std::move(shape));
  Rng rng(seed);
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& v : m.data) v = rng.uniform() < p ? T(0) : scale;
  return m;
}

template <class T>
void apply_mask(Tensor<T>& x, const Tensor<T>& mask) {
  if (mask.data.empty()) return;
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] *= mask.data[i];
}

/// out = in W + b
template <class T>
void linear(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& out) {
  out = Tensor<T>({in.rows(), w.cols()});
  out.matrix().noalias() = in.matrix() * w.matrix();
  out.matrix().rowwise() += b.vector();
}

/// dW += in^T dout, db += colsum(dout), din (+)= dout W^T
template <class T>
void linear_backward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& dout, Tensor<T>& dw, Tensor<T>& db,
                     Tensor<T>* din, bool accumulate) {
  dw.matrix().noalias() += in.matrix().transpose() * dout.matrix();
  db.vector() += dout.matrix().colwise().sum();
  if (din) {
    if (!accumulate) *din = Tensor<T>({dout.rows(), w.rows()});
    din->matrix().noalias() += dout.matrix() * w.matrix().transpose();
  }
}

}  // namespace detail

template <class T>
struct LayerCache {
  Tensor<T> input;
  Tensor<T> qkv_in;  // LN1(x) for pre-LN, x for post-LN
  Tensor<T> ln1_xhat;
  std::vector<T> ln1_rstd;
  Tensor<T> qkv;
  Tensor<T> probs;       // batch x heads x width x width
  Tensor<T> probs_mask;  // dropout on attention probabilities
  Tensor<T> ctx;
  Tensor<T> attn_mask;
  Tensor<T> ffn_in;  // LN2(x) for pre-LN, LN1 output for post-LN
  Tensor<T> ln2_xhat;
  std::vector<T> ln2_rstd;
  Tensor<T> f1;
  Tensor<T> g;
  Tensor<T> ffn_mask;
};

template <class T>
struct ForwardCache {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<int> ids;
  std::vector<int> attention_mask;
  Tensor<T> emb_mask;
  Tensor<T> final_xhat;  // final LN (pre) or embedding LN (post)
  std::vector<T> final_rstd;
  std::vector<LayerCache<T>> layers;
};

template <class T>
class Encoder {
 public:
  explicit Encoder(EncoderConfig config) : config_(config) { config_.validate(); }

  const EncoderConfig& config() const { return config_; }

  /// Adds the encoder parameters to `params`, initialized with truncated
  /// normal(0.02) weights, zero biases and unit LayerNorm gains.
  void init_parameters(ParamSet<T>& params) const {
    const std::size_t d = config_.hidden, f = config_.ff;
    params.add("emb.token", {config_.vocab_size, d});
    params.add("emb.position", {config_.max_len, d});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      params.add(detail::layer_name(l, "ln1.g"), {d}, T(1));
      params.add(detail::layer_name(l, "ln1.b"), {d});
      params.add(detail::layer_name(l, "attn.qkv.w"), {d, 3 * d});
      params.add(detail::layer_name(l, "attn.qkv.b"), {3 * d});
      params.add(detail::layer_name(l, "attn.out.w"), {d, d});
      params.add(detail::layer_name(l, "attn.out.b"), {d});
      params.add(detail::layer_name(l, "ln2.g"), {d}, T(1));
      params.add(detail::layer_name(l, "ln2.b"), {d});
      params.add(detail::layer_name(l, "ffn.in.w"), {d, f});
      params.add(detail::layer_name(l, "ffn.in.b"), {f});
      params.add(detail::layer_name(l, "ffn.out.w"), {f, d});
      params.add(detail::layer_name(l, "ffn.out.b"), {d});
    }
    params.add("ln_final.g", {d}, T(1));
    params.add("ln_final.b", {d});
    Rng rng(derive_seed(config_.seed, {0x656e63}));
    for (std::size_t i = 0; i < params.count(); ++i) {
      const std::string& name = params.name(i);
      const bool weight = name.starts_with("emb.") || name.ends_with(".w");
      if (!weight) continue;
      for (auto& v : params.at(i).data) v = static_cast<T>(rng.truncated_normal(0.02));
    }
  }

  ParamSet<T> init_parameters() const {
    ParamSet<T> p;
    init_parameters(p);
    return p;
  }

  /// Hidden states, shape (batch, width, hidden).
  Tensor<T> forward(const TokenizedBatch& batch, const ParamSet<T>& params, Mode mode, std::uint64_t dropout_seed,
                    ForwardCache<T>* cache = nullptr) const {
    using namespace detail;
    const std::size_t B = batch.rows, S = batch.width, d = config_.hidden;
    if (S > config_.max_len) fail(ErrorCode::ShapeMismatch, "batch width exceeds max_len");
    if (batch.ids.size() != B * S || batch.attention_mask.size() != B * S)
      fail(ErrorCode::ShapeMismatch, "batch arrays do not match rows x width");
    const std::size_t N = B * S;
    const double p = config_.dropout;
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    c = ForwardCache<T>{};
    c.batch = B;
    c.width = S;
    c.ids = batch.ids;
    c.attention_mask = batch.attention_mask;

    const auto& tok = params["emb.token"];
    const auto& pos = params["emb.position"];
    Tensor<T> x({N, d});
    for (std::size_t r = 0; r < N; ++r) {
      const int id = batch.ids[r];
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
        fail(ErrorCode::ShapeMismatch, "token id " + std::to_string(id) + " outside vocabulary");
      const T* te = &tok.data[static_cast<std::size_t>(id) * d];
      const T* pe = &pos.data[(r % S) * d];
      for (std::size_t k = 0; k < d; ++k) x.data[r * d + k] = te[k] + pe[k];
    }
    const bool pre = config_.ln_placement == LnPlacement::Pre;
    if (!pre) {
      Tensor<T> normed;
      layer_norm_forward(x, params["ln_final.g"], params["ln_final.b"], normed, c.final_xhat, c.final_rstd);
      x = std::move(normed);
    }
    c.emb_mask = dropout_mask<T>({N, d}, p, mode, derive_seed(dropout_seed, {1000}));
    apply_mask(x, c.emb_mask);

    c.layers.resize(config_.layers);
    for (std::size_t l = 0; l < config_.layers; ++l) x = layer_forward(l, x, batch, params, mode, dropout_seed, c.layers[l]);

    if (pre) {
      Tensor<T> out;
      layer_norm_forward(x, params["ln_final.g"], params["ln_final.b"], out, c.final_xhat, c.final_rstd);
      x = std::move(out);
    }
    x.shape = {B, S, d};
    return x;
  }

  /// Accumulates parameter gradients for upstream gradient `d_hidden`
  /// (batch, width, hidden).
  void backward(const ForwardCache<T>& c, const Tensor<T>& d_hidden, const ParamSet<T>& params,
                ParamSet<T>& grads) const {
    using namespace detail;
    const std::size_t N = c.batch * c.width, d = config_.hidden;
    if (d_hidden.size() != N * d) fail(ErrorCode::ShapeMismatch, "upstream gradient shape");
    Tensor<T> dx({N, d});
    const bool pre = config_.ln_placement == LnPlacement::Pre;
    if (pre) {
      Tensor<T> dy = d_hidden;
      dy.shape = {N, d};
      layer_norm_backward(dy, c.final_xhat, c.final_rstd, params["ln_final.g"], grads["ln_final.g"],
                          grads["ln_final.b"], dx);
    } else {
      dx.data = d_hidden.data;
    }
    for (std::size_t l = config_.layers; l-- > 0;) dx = layer_backward(l, dx, c, params, grads);

    apply_mask(dx, c.emb_mask);
    if (!pre) {
      Tensor<T> de({N, d});
      layer_norm_backward(dx, c.final_xhat, c.final_rstd, params["ln_final.g"], grads["ln_final.g"],
                          grads["ln_final.b"], de);
      dx = std::move(de);
    }
    auto& dtok = grads["emb.token"];
    auto& dpos = grads["emb.position"];
    for (std::size_t r = 0; r < N; ++r) {
      T* dt = &dtok.data[static_cast<std::size_t>(c.ids[r]) * d];
      T* dp = &dpos.data[(r % c.width) * d];
      for (std::size_t k = 0; k < d; ++k) {
        dt[k] += dx.data[r * d + k];
        dp[k] += dx.data[r * d + k];
      }
    }
  }

 private:
  Tensor<T> layer_forward(std::size_t l, const Tensor<T>& x, const TokenizedBatch& batch, const ParamSet<T>& params,
                          Mode mode, std::uint64_t seed, LayerCache<T>& lc) const {
    using namespace detail;
    const bool pre = config_.ln_placement == LnPlacement::Pre;
    const std::size_t N = x.rows(), d = config_.hidden;
    const double p = config_.dropout;
    lc.input = x;
    if (pre) {
      layer_norm_forward(x, params[layer_name(l, "ln1.g")], params[layer_name(l, "ln1.b")], lc.qkv_in, lc.ln1_xhat,
                         lc.ln1_rstd);
    } else {
      lc.qkv_in = x;
    }
    linear(lc.qkv_in, params[layer_name(l, "attn.qkv.w")], params[layer_name(l, "attn.qkv.b")], lc.qkv);
    attention_forward(lc, batch, mode, derive_seed(seed, {l, 1}));
    Tensor<T> a;
    linear(lc.ctx, params[layer_name(l, "attn.out.w")], params[layer_name(l, "attn.out.b")], a);
    lc.attn_mask = dropout_mask<T>({N, d}, p, mode, derive_seed(seed, {l, 2}));
    apply_mask(a, lc.attn_mask);
    Tensor<T> x2 = x;
    x2.vector() += a.vector();
    if (pre) {
      layer_norm_forward(x2, params[layer_name(l, "ln2.g")], params[layer_name(l, "ln2.b")], lc.ffn_in, lc.ln2_xhat,
                         lc.ln2_rstd);
    } else {
      layer_norm_forward(x2, params[layer_name(l, "ln1.g")], params[layer_name(l, "ln1.b")], lc.ffn_in, lc.ln1_xhat,
                         lc.ln1_rstd);
      x2 = lc.ffn_in;
    }
    linear(lc.ffn_in, params[layer_name(l, "ffn.in.w")], params[layer_name(l, "ffn.in.b")], lc.f1);
    lc.g = lc.f1;
    for (auto& v : lc.g.data) v = gelu(v);
    Tensor<T> f2;
    linear(lc.g, params[layer_name(l, "ffn.out.w")], params[layer_name(l, "ffn.out.b")], f2);
    lc.ffn_mask = dropout_mask<T>({N, d}, p, mode, derive_seed(seed, {l, 3}));
    apply_mask(f2, lc.ffn_mask);
    x2.vector() += f2.vector();
    if (pre) return x2;
    Tensor<T> out;
    layer_norm_forward(x2, params[layer_name(l, "ln2.g")], params[layer_name(l, "ln2.b")], out, lc.ln2_xhat,
                       lc.ln2_rstd);
    return out;
  }

  Tensor<T> layer_backward(std::size_t l, const Tensor<T>& dout, const ForwardCache<T>& c, const ParamSet<T>& params,
                           ParamSet<T>& grads) const {
    using namespace detail;
    const LayerCache<T>& lc = c.layers[l];
    const bool pre = config_.ln_placement == LnPlacement::Pre;
    const std::size_t N = dout.rows(), d = config_.hidden;
    Tensor<T> dx2({N, d});
    if (pre) {
      dx2 = dout;
    } else {
      layer_norm_backward(dout, lc.ln2_xhat, lc.ln2_rstd, params[layer_name(l, "ln2.g")], grads[layer_name(l, "ln2.g")],
                          grads[layer_name(l, "ln2.b")], dx2);
    }
    // FFN
    Tensor<T> df2 = dx2;
    apply_mask(df2, lc.ffn_mask);
    Tensor<T> dg;
    linear_backward(lc.g, params[layer_name(l, "ffn.out.w")], df2, grads[layer_name(l, "ffn.out.w")],
                    grads[layer_name(l, "ffn.out.b")], &dg, false);
    for (std::size_t i = 0; i < dg.data.size(); ++i) dg.data[i] *= gelu_grad(lc.f1.data[i]);
    Tensor<T> dffn_in;
    linear_backward(lc.ffn_in, params[layer_name(l, "ffn.in.w")], dg, grads[layer_name(l, "ffn.in.w")],
                    grads[layer_name(l, "ffn.in.b")], &dffn_in, false);
    Tensor<T> dres1({N, d});  // gradient w.r.t. x + attention output
    if (pre) {
      dres1 = dx2;
      layer_norm_backward(dffn_in, lc.ln2_xhat, lc.ln2_rstd, params[layer_name(l, "ln2.g")],
                          grads[layer_name(l, "ln2.g")], grads[layer_name(l, "ln2.b")], dres1);
    } else {
      dffn_in.vector() += dx2.vector();
      layer_norm_backward(dffn_in, lc.ln1_xhat, lc.ln1_rstd, params[layer_name(l, "ln1.g")],
                          grads[layer_name(l, "ln1.g")], grads[layer_name(l, "ln1.b")], dres1);
    }
    // Attention
    Tensor<T> da = dres1;
    apply_mask(da, lc.attn_mask);
    Tensor<T> dctx;
    linear_backward(lc.ctx, params[layer_name(l, "attn.out.w")], da, grads[layer_name(l, "attn.out.w")],
                    grads[layer_name(l, "attn.out.b")], &dctx, false);
    Tensor<T> dqkv = attention_backward(lc, dctx, c);
    Tensor<T> dqkv_in;
    linear_backward(lc.qkv_in, params[layer_name(l, "attn.qkv.w")], dqkv, grads[layer_name(l, "attn.qkv.w")],
                    grads[layer_name(l, "attn.qkv.b")], &dqkv_in, false);
    Tensor<T> dx = dres1;
    if (pre) {
      layer_norm_backward(dqkv_in, lc.ln1_xhat, lc.ln1_rstd, params[layer_name(l, "ln1.g")],
                          grads[layer_name(l, "ln1.g")], grads[layer_name(l, "ln1.b")], dx);
    } else {
      dx.vector() += dqkv_in.vector();
    }
    return dx;
  }

  void attention_forward(LayerCache<T>& lc, const TokenizedBatch& batch, Mode mode, std::uint64_t seed) const {
    const std::size_t B = batch.rows, S = batch.width, H = config_.heads, d = config_.hidden, dh = config_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    lc.probs = Tensor<T>({B, H, S, S});
    lc.probs_mask = detail::dropout_mask<T>({B, H, S, S}, config_.dropout, mode, seed);
    lc.ctx = Tensor<T>({B * S, d});
    const auto qkv = lc.qkv.matrix();
    auto ctx = lc.ctx.matrix();
    const auto Si = static_cast<Eigen::Index>(S), dhi = static_cast<Eigen::Index>(dh);
    RowMatrix<T> scores(Si, Si);
    for (std::size_t b = 0; b < B; ++b) {
      const auto row0 = static_cast<Eigen::Index>(b * S);
      for (std::size_t h = 0; h < H; ++h) {
        const auto q = qkv.block(row0, static_cast<Eigen::Index>(h * dh), Si, dhi);
        const auto k = qkv.block(row0, static_cast<Eigen::Index>(d + h * dh), Si, dhi);
        const auto v = qkv.block(row0, static_cast<Eigen::Index>(2 * d + h * dh), Si, dhi);
        scores.noalias() = (q * k.transpose()) * scale;
        T* P = &lc.probs.data[(b * H + h) * S * S];
        for (std::size_t i = 0; i < S; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < S; ++j)
            if (batch.attends(b, j)) mx = std::max(mx, scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
          T sum = 0;
          for (std::size_t j = 0; j < S; ++j) {
            T e = 0;
            if (batch.attends(b, j)) e = std::exp(scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - mx);
            P[i * S + j] = e;
            sum += e;
          }
          for (std::size_t j = 0; j < S; ++j) P[i * S + j] /= sum;
        }
        Eigen::Map<const RowMatrix<T>> probs(P, Si, Si);
        if (lc.probs_mask.data.empty()) {
          ctx.block(row0, static_cast<Eigen::Index>(h * dh), Si, dhi).noalias() = probs * v;
        } else {
          Eigen::Map<const RowMatrix<T>> m(&lc.probs_mask.data[(b * H + h) * S * S], Si, Si);
          ctx.block(row0, static_cast<Eigen::Index>(h * dh), Si, dhi).noalias() = probs.cwiseProduct(m) * v;
        }
      }
    }
  }

  Tensor<T> attention_backward(const LayerCache<T>& lc, const Tensor<T>& dctx_t, const ForwardCache<T>& c) const {
    const std::size_t B = c.batch, S = c.width, H = config_.heads, d = config_.hidden, dh = config_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> dqkv_t({B * S, 3 * d});
    auto dqkv = dqkv_t.matrix();
    const auto qkv = lc.qkv.matrix();
    const auto dctx = dctx_t.matrix();
    const auto Si = static_cast<Eigen::Index>(S), dhi = static_cast<Eigen::Index>(dh);
    RowMatrix<T> dp(Si, Si), pd(Si, Si);
    for (std::size_t b = 0; b < B; ++b) {
      const auto row0 = static_cast<Eigen::Index>(b * S);
      for (std::size_t h = 0; h < H; ++h) {
        const auto q = qkv.block(row0, static_cast<Eigen::Index>(h * dh), Si, dhi);
        const auto k = qkv.block(row0, static_cast<Eigen::Index>(d + h * dh), Si, dhi);
        const auto v = qkv.block(row0, static_cast<Eigen::Index>(2 * d + h * dh), Si, dhi);
        const auto dc = dctx.block(row0, static_cast<Eigen::Index>(h * dh), Si, dhi);
        Eigen::Map<const RowMatrix<T>> probs(&lc.probs.data[(b * H + h) * S * S], Si, Si);
        if (lc.probs_mask.data.empty()) {
          pd = probs;
        } else {
          Eigen::Map<const RowMatrix<T>> m(&lc.probs_mask.data[(b * H + h) * S * S], Si, Si);
          pd = probs.cwiseProduct(m);
        }
        dqkv.block(row0, static_cast<Eigen::Index>(2 * d + h * dh), Si, dhi).noalias() = pd.transpose() * dc;
        dp.noalias() = dc * v.transpose();
        if (!lc.probs_mask.data.empty()) {
          Eigen::Map<const RowMatrix<T>> m(&lc.probs_mask.data[(b * H + h) * S * S], Si, Si);
          dp = dp.cwiseProduct(m);
        }
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        for (Eigen::Index i = 0; i < Si; ++i) {
          T dot = 0;
          for (Eigen::Index j = 0; j < Si; ++j) dot += dp(i, j) * probs(i, j);
          for (Eigen::Index j = 0; j < Si; ++j) dp(i, j) = probs(i, j) * (dp(i, j) - dot) * scale;
        }
        dqkv.block(row0, static_cast<Eigen::Index>(h * dh), Si, dhi).noalias() = dp * k;
        dqkv.block(row0, static_cast<Eigen::Index>(d + h * dh), Si, dhi).noalias() = dp.transpose() * q;
      }
    }
    return dqkv_t;
  }

  EncoderConfig config_;
};

// ---------------------------------------------------------------------------
// Pooling

/// (batch, width, hidden) -> (batch, hidden). Mean pooling averages the
/// attended positions (CLS and SEP included).
template <class T>
Tensor<T> pool(const Tensor<T>& hidden, const TokenizedBatch& batch, Pooling how) {
  const std::size_t B = batch.rows, S = batch.width, d = hidden.size() / std::max<std::size_t>(1, B * S);
  Tensor<T> out({B, d});
  for (std::size_t b = 0; b < B; ++b) {
    T* o = &out.data[b * d];
    if (how == Pooling::Cls) {
      std::copy_n(&hidden.data[b * S * d], d, o);
      continue;
    }
    T count = 0;
    for (std::size_t s = 0; s < S; ++s) {
      if (!batch.attends(b, s)) continue;
      count += 1;
      const T* h = &hidden.data[(b * S + s) * d];
      for (std::size_t k = 0; k < d; ++k) o[k] += h[k];
    }
    if (count > 0)
      for (std::size_t k = 0; k < d; ++k) o[k] /= count;
  }
  return out;
}

template <class T>
Tensor<T> pool_backward(const Tensor<T>& d_pooled, const TokenizedBatch& batch, Pooling how, std::size_t hidden) {
  const std::size_t B = batch.rows, S = batch.width, d = hidden;
  Tensor<T> out({B, S, d});
  for (std::size_t b = 0; b < B; ++b) {
    const T* g = &d_pooled.data[b * d];
    if (how == Pooling::Cls) {
      std::copy_n(g, d, &out.data[b * S * d]);
      continue;
    }
    T count = 0;
    for (std::size_t s = 0; s < S; ++s) count += batch.attends(b, s) ? 1 : 0;
    for (std::size_t s = 0; s < S; ++s) {
      if (!batch.attends(b, s)) continue;
      T* o = &out.data[(b * S + s) * d];
      for (std::size_t k = 0; k < d; ++k) o[k] = g[k] / count;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::uint64_t step = 0;
  ParamSet<T> m;
  ParamSet<T> v;
  AdamHyper hyper;

  static AdamState for_params(const ParamSet<T>& params, AdamHyper h = {}) {
    return {0, params.zeros_like(), params.zeros_like(), h};
  }
};

/// Linear warmup over the first `warmup_fraction` of `total_steps` up to
/// `peak`, then linear decay to zero at `total_steps`.
inline double lr_at(double step, double total_steps, double peak, double warmup_fraction = 0.1) {
  if (total_steps <= 0) return 0.0;
  const double warm = warmup_fraction * total_steps;
  if (step < warm) return peak * step / warm;
  if (step >= total_steps) return 0.0;
  if (total_steps - warm <= 0) return peak;
  return peak * (total_steps - step) / (total_steps - warm);
}

/// Bias-corrected Adam update.
template <class T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state, double lr) {
  state.step += 1;
  const double b1 = state.hyper.beta1, b2 = state.hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& p = params.at(i).data;
    const auto& g = grads[params.name(i)].data;
    auto& m = state.m[params.name(i)].data;
    auto& v = state.v[params.name(i)].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk;
      const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + state.hyper.eps);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - update);
    }
  }
}

}  // namespace molda

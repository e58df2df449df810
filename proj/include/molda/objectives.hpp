// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-supervised losses with analytic gradients: masked language modelling
// (MLM), multi-task descriptor regression (MTR) and contrastive learning on
// (canonical, enumerated, negative) SMILES triples (CL).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "molda/encoder.hpp"
#include "molda/error.hpp"
#include "molda/molgraph.hpp"
#include "molda/rng.hpp"
#include "molda/tensor.hpp"
#include "molda/tokenizer.hpp"

namespace molda {

enum class Objective { Mlm, Mtr, Cl };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::Mlm: return "mlm";
    case Objective::Mtr: return "mtr";
    case Objective::Cl: return "cl";
  }
  return "?";
}

inline Objective objective_from(const std::string& s) {
  if (s == "mlm") return Objective::Mlm;
  if (s == "mtr") return Objective::Mtr;
  if (s == "cl") return Objective::Cl;
  fail(ErrorCode::Config, "unknown objective '" + s + "'");
}

struct LossOutput {
  double loss = 0.0;
  /// Masked-token accuracy (MLM) or pairwise ranking accuracy (CL).
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
};

// ---------------------------------------------------------------------------
// Masking

struct MaskingConfig {
  double fraction = 0.15;
  double mask_prob = 0.8;    // selected -> [MASK]
  double random_prob = 0.1;  // selected -> random non-special token; rest unchanged
};

struct MaskedBatch {
  TokenizedBatch batch;       // ids after corruption
  std::vector<int> original;  // rows x width, ids before corruption
  std::vector<std::size_t> positions;  // flat indices of selected positions, ascending
};

/// Per row selects round(fraction x n) of the n non-special tokens (at least
/// one when n > 0) and corrupts them by the 80/10/10 rule.
inline MaskedBatch apply_masking(const TokenizedBatch& batch, std::size_t vocab_size, std::uint64_t seed,
                                 const MaskingConfig& cfg = {}) {
  MaskedBatch out;
  out.batch = batch;
  out.original = batch.ids;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    std::vector<std::size_t> eligible;
    for (std::size_t c = 0; c < batch.width; ++c)
      if (batch.attends(r, c) && batch.id(r, c) >= kSpecialCount) eligible.push_back(r * batch.width + c);
    if (eligible.empty()) continue;
    const auto n = eligible.size();
    auto k = static_cast<std::size_t>(std::floor(cfg.fraction * static_cast<double>(n) + 0.5));
    k = std::clamp<std::size_t>(k, 1, n);
    Rng rng(derive_seed(seed, {r}));
    for (std::size_t i = 0; i < k; ++i) std::swap(eligible[i], eligible[i + rng.below(n - i)]);
    eligible.resize(k);
    std::sort(eligible.begin(), eligible.end());
    for (std::size_t pos : eligible) {
      const double u = rng.uniform();
      if (u < cfg.mask_prob) {
        out.batch.ids[pos] = kMaskId;
      } else if (u < cfg.mask_prob + cfg.random_prob && vocab_size > kSpecialCount) {
        out.batch.ids[pos] = kSpecialCount + static_cast<int>(rng.below(vocab_size - kSpecialCount));
      }
      out.positions.push_back(pos);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Heads

template <class T>
void init_mlm_head(ParamSet<T>& params, std::size_t hidden, std::size_t vocab, std::uint64_t seed) {
  auto& w = params.add("mlm.w", {hidden, vocab});
  params.add("mlm.b", {vocab});
  Rng rng(derive_seed(seed, {0x6d6c6d}));
  for (auto& v : w.data) v = static_cast<T>(rng.truncated_normal(0.02));
}

template <class T>
void init_mtr_head(ParamSet<T>& params, std::size_t hidden, std::size_t outputs, std::uint64_t seed) {
  auto& w1 = params.add("mtr.w1", {hidden, hidden});
  params.add("mtr.b1", {hidden});
  auto& w2 = params.add("mtr.w2", {hidden, outputs});
  params.add("mtr.b2", {outputs});
  Rng rng(derive_seed(seed, {0x6d7472}));
  for (auto& v : w1.data) v = static_cast<T>(rng.truncated_normal(0.02));
  for (auto& v : w2.data) v = static_cast<T>(rng.truncated_normal(0.02));
}

/// Mean cross-entropy of a linear vocabulary head over the masked positions.
template <class T>
LossOutput mlm_loss(const Encoder<T>& enc, const ParamSet<T>& params, const MaskedBatch& mb, Mode mode,
                    std::uint64_t seed, std::type_identity_t<ParamSet<T>>* grads = nullptr) {
  if (mb.positions.empty()) fail(ErrorCode::NoMaskedTokens, "batch has no masked positions");
  ForwardCache<T> cache;
  const auto h = enc.forward(mb.batch, params, mode, seed, grads ? &cache : nullptr);
  const std::size_t d = enc.config().hidden;
  const auto M = static_cast<Eigen::Index>(mb.positions.size());
  const auto& W = params["mlm.w"];
  const auto& b = params["mlm.b"];
  const auto V = static_cast<Eigen::Index>(W.cols());
  RowMatrix<T> hm(M, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < M; ++i)
    for (std::size_t k = 0; k < d; ++k) hm(i, static_cast<Eigen::Index>(k)) = h.data[mb.positions[i] * d + k];
  RowMatrix<T> logits = hm * W.matrix();
  logits.rowwise() += b.vector();

  LossOutput out;
  out.count = mb.positions.size();
  double total = 0.0;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < M; ++i) {
    const int target = mb.original[mb.positions[i]];
    Eigen::Index arg = 0;
    const T mx = logits.row(i).maxCoeff(&arg);
    if (arg == target) ++correct;
    double sum = 0.0;
    for (Eigen::Index v = 0; v < V; ++v) sum += std::exp(static_cast<double>(logits(i, v) - mx));
    total += std::log(sum) + static_cast<double>(mx) - static_cast<double>(logits(i, target));
    if (grads) {
      for (Eigen::Index v = 0; v < V; ++v)
        logits(i, v) = static_cast<T>(std::exp(static_cast<double>(logits(i, v) - mx)) / sum);
      logits(i, target) -= T(1);
    }
  }
  out.loss = total / static_cast<double>(M);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(M);
  if (!grads) return out;

  auto& dlogits = logits;
  dlogits /= static_cast<T>(M);
  (*grads)["mlm.w"].matrix().noalias() += hm.transpose() * dlogits;
  (*grads)["mlm.b"].vector() += dlogits.colwise().sum();
  const RowMatrix<T> dhm = dlogits * W.matrix().transpose();
  Tensor<T> dh(h.shape);
  for (Eigen::Index i = 0; i < M; ++i)
    for (std::size_t k = 0; k < d; ++k) dh.data[mb.positions[i] * d + k] += dhm(i, static_cast<Eigen::Index>(k));
  enc.backward(cache, dh, params, *grads);
  return out;
}

struct MtrBatch {
  TokenizedBatch batch;
  Tensor<double> targets;  // rows x D, standardized
};

/// Mean squared error over all N x D entries of a two-layer ReLU head on the
/// pooled (first-token by default) hidden state.
template <class T>
LossOutput mtr_loss(const Encoder<T>& enc, const ParamSet<T>& params, const MtrBatch& mb, Mode mode,
                    std::uint64_t seed, std::type_identity_t<ParamSet<T>>* grads = nullptr, double head_dropout = 0.1,
                    Pooling pooling = Pooling::Cls) {
  const auto& W1 = params["mtr.w1"];
  const auto& b1 = params["mtr.b1"];
  const auto& W2 = params["mtr.w2"];
  const auto& b2 = params["mtr.b2"];
  const std::size_t N = mb.batch.rows, D = W2.cols();
  if (mb.targets.rows() != N || mb.targets.cols() != D)
    fail(ErrorCode::ShapeMismatch, "target width " + std::to_string(mb.targets.cols()) + " differs from head width " +
                                       std::to_string(D));
  ForwardCache<T> cache;
  const auto h = enc.forward(mb.batch, params, mode, seed, grads ? &cache : nullptr);
  const std::size_t d = enc.config().hidden;
  const Tensor<T> pooled = pool(h, mb.batch, pooling);
  RowMatrix<T> z1 = pooled.matrix() * W1.matrix();
  z1.rowwise() += b1.vector();
  RowMatrix<T> a = z1.cwiseMax(T(0));
  const auto mask = detail::dropout_mask<T>({N, d}, head_dropout, mode, derive_seed(seed, {0x68656164}));
  if (!mask.data.empty()) a = a.cwiseProduct(mask.matrix());
  RowMatrix<T> y = a * W2.matrix();
  y.rowwise() += b2.vector();

  LossOutput out;
  out.count = N * D;
  double total = 0.0;
  RowMatrix<T> dy(y.rows(), y.cols());
  const double scale = 2.0 / static_cast<double>(N * D);
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      const double e = static_cast<double>(y(i, j)) - mb.targets.data[static_cast<std::size_t>(i) * D + static_cast<std::size_t>(j)];
      total += e * e;
      dy(i, j) = static_cast<T>(scale * e);
    }
  out.loss = total / static_cast<double>(N * D);
  if (!grads) return out;

  (*grads)["mtr.w2"].matrix().noalias() += a.transpose() * dy;
  (*grads)["mtr.b2"].vector() += dy.colwise().sum();
  RowMatrix<T> dz = dy * W2.matrix().transpose();
  if (!mask.data.empty()) dz = dz.cwiseProduct(mask.matrix());
  for (Eigen::Index i = 0; i < dz.rows(); ++i)
    for (Eigen::Index j = 0; j < dz.cols(); ++j)
      if (!(z1(i, j) > T(0))) dz(i, j) = T(0);
  (*grads)["mtr.w1"].matrix().noalias() += pooled.matrix().transpose() * dz;
  (*grads)["mtr.b1"].vector() += dz.colwise().sum();
  Tensor<T> dpooled({N, d});
  dpooled.matrix().noalias() = dz * W1.matrix().transpose();
  enc.backward(cache, pool_backward(dpooled, mb.batch, pooling, d), params, *grads);
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive loss

struct TripleBatch {
  TokenizedBatch canonical;
  TokenizedBatch enumerated;
  TokenizedBatch negative;
};

enum class ClForm {
  /// Multiple-negatives ranking loss: mean over i of
  /// log(exp(s(c_i, e_i)) + sum_j exp(s(c_i, n_j))) - s(c_i, e_i).
  Standard,
  /// mean over i of s(c_i, e_i) - log(sum_j exp(s(c_i, n_j))), evaluation only.
  Literal,
};

struct ClGradients {
  RowMatrix<double> dc, de, dn;
};

inline double cosine(const RowMatrix<double>& a, Eigen::Index i, const RowMatrix<double>& b, Eigen::Index j) {
  return a.row(i).dot(b.row(j)) / (a.row(i).norm() * b.row(j).norm());
}

/// Loss on pooled embeddings (K x d each). `scale` multiplies cosine
/// similarities before the softmax. Fills `g` for the standard form.
inline LossOutput cl_loss_from_embeddings(const RowMatrix<double>& c, const RowMatrix<double>& e,
                                          const RowMatrix<double>& n, ClForm form = ClForm::Standard,
                                          double scale = 1.0, ClGradients* g = nullptr) {
  const Eigen::Index K = c.rows();
  if (K == 0 || e.rows() != K || n.rows() != K) fail(ErrorCode::ShapeMismatch, "triple batch sizes differ");
  for (const auto* m : {&c, &e, &n})
    for (Eigen::Index i = 0; i < K; ++i)
      if (!(m->row(i).norm() > 0.0)) fail(ErrorCode::ZeroVector, "zero-norm embedding");

  LossOutput out;
  out.count = static_cast<std::size_t>(K);
  if (g) {
    g->dc = RowMatrix<double>::Zero(K, c.cols());
    g->de = RowMatrix<double>::Zero(K, c.cols());
    g->dn = RowMatrix<double>::Zero(K, c.cols());
  }
  // d cos(a, b) / da = b / (|a||b|) - cos * a / |a|^2
  auto add_cos_grad = [](const RowMatrix<double>& a, Eigen::Index i, const RowMatrix<double>& b, Eigen::Index j,
                         double coef, RowMatrix<double>& da, RowMatrix<double>& db) {
    const double na = a.row(i).norm(), nb = b.row(j).norm();
    const double cs = a.row(i).dot(b.row(j)) / (na * nb);
    da.row(i) += coef * (b.row(j) / (na * nb) - cs * a.row(i) / (na * na));
    db.row(j) += coef * (a.row(i) / (na * nb) - cs * b.row(j) / (nb * nb));
  };

  double total = 0.0;
  std::size_t ranked = 0;
  std::vector<double> s(static_cast<std::size_t>(K) + 1);
  for (Eigen::Index i = 0; i < K; ++i) {
    s[0] = scale * cosine(c, i, e, i);
    for (Eigen::Index j = 0; j < K; ++j) s[static_cast<std::size_t>(j) + 1] = scale * cosine(c, i, n, j);
    if (s[0] > s[static_cast<std::size_t>(i) + 1]) ++ranked;
    if (form == ClForm::Literal) {
      const double mx = *std::max_element(s.begin() + 1, s.end());
      double sum = 0.0;
      for (std::size_t j = 1; j < s.size(); ++j) sum += std::exp(s[j] - mx);
      total += s[0] - (mx + std::log(sum));
      continue;
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double sum = 0.0;
    for (double v : s) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    total += lse - s[0];
    if (!g) continue;
    const double w = scale / static_cast<double>(K);
    add_cos_grad(c, i, e, i, w * (std::exp(s[0] - lse) - 1.0), g->dc, g->de);
    for (Eigen::Index j = 0; j < K; ++j)
      add_cos_grad(c, i, n, j, w * std::exp(s[static_cast<std::size_t>(j) + 1] - lse), g->dc, g->dn);
  }
  out.loss = total / static_cast<double>(K);
  out.accuracy = static_cast<double>(ranked) / static_cast<double>(K);
  return out;
}

template <class T>
LossOutput cl_loss(const Encoder<T>& enc, const ParamSet<T>& params, const TripleBatch& tb, Mode mode,
                   std::uint64_t seed, std::type_identity_t<ParamSet<T>>* grads = nullptr, Pooling pooling = Pooling::Mean,
                   double scale = 1.0, ClForm form = ClForm::Standard) {
  if (form != ClForm::Standard && grads) fail(ErrorCode::Config, "the literal contrastive form is evaluation only");
  const TokenizedBatch* parts[3] = {&tb.canonical, &tb.enumerated, &tb.negative};
  ForwardCache<T> caches[3];
  RowMatrix<double> emb[3];
  for (int p = 0; p < 3; ++p) {
    const auto h = enc.forward(*parts[p], params, mode, derive_seed(seed, {static_cast<std::uint64_t>(p)}),
                               grads ? &caches[p] : nullptr);
    emb[p] = pool(h, *parts[p], pooling).matrix().template cast<double>();
  }
  ClGradients g;
  const auto out = cl_loss_from_embeddings(emb[0], emb[1], emb[2], form, scale, grads ? &g : nullptr);
  if (!grads) return out;
  const RowMatrix<double>* dem[3] = {&g.dc, &g.de, &g.dn};
  const std::size_t d = enc.config().hidden;
  for (int p = 0; p < 3; ++p) {
    Tensor<T> dp({parts[p]->rows, d});
    dp.matrix() = dem[p]->template cast<T>();
    enc.backward(caches[p], pool_backward(dp, *parts[p], pooling, d), params, *grads);
  }
  return out;
}

/// Canonical form, a seeded enumeration and a random other molecule for each
/// anchor. Negatives are drawn uniformly from `canonical` excluding entries
/// equal to the anchor's canonical SMILES.
inline TripleBatch make_triple_batch(const std::vector<Molecule>& mols, const std::vector<std::string>& canonical,
                                     const std::vector<std::size_t>& anchors, const Vocabulary& vocab,
                                     std::size_t max_len, std::uint64_t seed) {
  std::vector<std::string> c, e, n;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const std::size_t i = anchors[k];
    c.push_back(canonical[i]);
    e.push_back(enumerate_smiles(mols[i], derive_seed(seed, {k, 1})));
    Rng rng(derive_seed(seed, {k, 2}));
    std::size_t j = i;
    for (int tries = 0; tries < 1000 && canonical[j] == canonical[i]; ++tries) j = rng.below(canonical.size());
    if (canonical[j] == canonical[i]) fail(ErrorCode::DegenerateData, "no distinct molecule to use as a negative");
    n.push_back(canonical[j]);
  }
  return {encode_batch(c, vocab, max_len), encode_batch(e, vocab, max_len), encode_batch(n, vocab, max_len)};
}

}  // namespace molda

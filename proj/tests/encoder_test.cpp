// SPDX-License-Identifier: Apache-2.0
#include "molda/encoder.hpp"

#include <gtest/gtest.h>

#include "molda/gradcheck.hpp"

namespace molda {
namespace {

EncoderConfig tiny(LnPlacement ln = LnPlacement::Pre, double dropout = 0.0) {
  EncoderConfig c;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 16;
  c.ff = 32;
  c.max_len = 12;
  c.vocab_size = 20;
  c.dropout = dropout;
  c.seed = 7;
  c.ln_placement = ln;
  return c;
}

TokenizedBatch tiny_batch() {
  return make_batch({{2, 5, 6, 7, 8, 3}, {2, 9, 10, 3}, {2, 11, 12, 13, 3}});
}

// L = c * (sum(R * H) + 0.5 * sum(H^2)) over non-pad rows. The small c keeps
// round-off in the central difference well below the comparison floor.
constexpr double kScale = 1e-2;

struct ProbeLoss {
  const Encoder<double>& enc;
  const TokenizedBatch& batch;
  Tensor<double> r;
  Mode mode;
  std::uint64_t seed;

  Tensor<double> upstream(const Tensor<double>& h) const {
    Tensor<double> d(h.shape);
    const std::size_t dim = enc.config().hidden;
    for (std::size_t row = 0; row < batch.rows * batch.width; ++row) {
      if (!batch.attention_mask[row]) continue;
      for (std::size_t k = 0; k < dim; ++k) d.data[row * dim + k] = kScale * (r.data[row * dim + k] + h.data[row * dim + k]);
    }
    return d;
  }

  double operator()(const ParamSet<double>& p) const {
    const auto h = enc.forward(batch, p, mode, seed);
    double l = 0.0;
    const std::size_t dim = enc.config().hidden;
    for (std::size_t row = 0; row < batch.rows * batch.width; ++row) {
      if (!batch.attention_mask[row]) continue;
      for (std::size_t k = 0; k < dim; ++k) {
        const double v = h.data[row * dim + k];
        l += r.data[row * dim + k] * v + 0.5 * v * v;
      }
    }
    return kScale * l;
  }
};

ParamSet<double> analytic_grads(const ProbeLoss& loss, const ParamSet<double>& p) {
  ForwardCache<double> cache;
  const auto h = loss.enc.forward(loss.batch, p, loss.mode, loss.seed, &cache);
  auto g = p.zeros_like();
  loss.enc.backward(cache, loss.upstream(h), p, g);
  return g;
}

Tensor<double> random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Tensor<double> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data) v = rng.normal();
  return t;
}

void expect_gradients_match(LnPlacement ln, Mode mode, double dropout) {
  const Encoder<double> enc(tiny(ln, dropout));
  auto params = enc.init_parameters();
  // Larger weights than the 0.02 init so every path carries signal.
  Rng rng(3);
  for (std::size_t i = 0; i < params.count(); ++i)
    for (auto& v : params.at(i).data) v += 0.3 * rng.normal();
  const auto batch = tiny_batch();
  const ProbeLoss loss{enc, batch, random_tensor({batch.rows, batch.width, 16}, 11), mode, 99};
  const auto grads = analytic_grads(loss, params);
  const auto report = check_gradients(loss, params, grads, {});
  for (const auto& t : report.tensors)
    EXPECT_LE(t.max_rel_error, 1e-4) << t.name << " analytic " << t.analytic << " numeric " << t.numeric;
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.max_rel_error, 1e-4);
}

}  // namespace

TEST(Encoder, PresetsAndValidation) {
  const auto d = EncoderConfig::desk();
  EXPECT_EQ(std::vector<std::size_t>({d.layers, d.heads, d.hidden, d.ff, d.max_len, d.vocab_size}),
            std::vector<std::size_t>({2, 4, 128, 256, 128, 512}));
  const auto p = EncoderConfig::full();
  EXPECT_EQ(std::vector<std::size_t>({p.layers, p.heads, p.hidden, p.ff, p.max_len, p.vocab_size}),
            std::vector<std::size_t>({12, 12, 768, 3072, 128, 4096}));
  auto bad = d;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_EQ(encoder_config_from_json(to_json(d)), d);
}

TEST(Encoder, OutputShape) {
  const Encoder<float> enc(EncoderConfig::desk());
  const auto params = enc.init_parameters();
  std::vector<std::vector<int>> rows(3, std::vector<int>{2, 10, 11, 3});
  const auto batch = make_batch(rows, 128);
  const auto h = enc.forward(batch, params, Mode::Eval, 0);
  EXPECT_EQ(h.shape, (std::vector<std::size_t>{3, 128, 128}));
}

TEST(Encoder, RejectsBadInput) {
  const Encoder<double> enc(tiny());
  const auto params = enc.init_parameters();
  EXPECT_THROW(enc.forward(make_batch({{2, 25, 3}}), params, Mode::Eval, 0), Error);
  EXPECT_THROW(enc.forward(make_batch({{2, 5, 3}}, 13), params, Mode::Eval, 0), Error);
}

TEST(Encoder, PaddingDoesNotLeak) {
  for (auto ln : {LnPlacement::Pre, LnPlacement::Post}) {
    const Encoder<double> enc(tiny(ln));
    const auto params = enc.init_parameters();
    auto a = make_batch({{2, 5, 6, 3}, {2, 7, 3}}, 8);
    auto b = a;
    b.id(1, 5) = 14;
    b.id(0, 7) = 9;
    const auto ha = enc.forward(a, params, Mode::Eval, 0);
    const auto hb = enc.forward(b, params, Mode::Eval, 0);
    for (std::size_t row = 0; row < a.rows * a.width; ++row) {
      if (!a.attention_mask[row]) continue;
      for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(ha.data[row * 16 + k], hb.data[row * 16 + k]);
    }
  }
}

TEST(Encoder, EvalIsDeterministic) {
  const Encoder<float> enc(tiny(LnPlacement::Pre, 0.1));
  const auto params = enc.init_parameters();
  const auto batch = tiny_batch();
  EXPECT_EQ(enc.forward(batch, params, Mode::Eval, 1), enc.forward(batch, params, Mode::Eval, 2));
  EXPECT_EQ(enc.forward(batch, params, Mode::Train, 5), enc.forward(batch, params, Mode::Train, 5));
  EXPECT_NE(enc.forward(batch, params, Mode::Train, 5), enc.forward(batch, params, Mode::Eval, 5));
}

TEST(Encoder, RowPermutationPermutesOutputs) {
  const Encoder<double> enc(tiny());
  const auto params = enc.init_parameters();
  const std::vector<std::vector<int>> rows{{2, 5, 6, 7, 3}, {2, 9, 3}, {2, 11, 12, 3}};
  const auto h = enc.forward(make_batch(rows, 6), params, Mode::Eval, 0);
  const auto hp = enc.forward(make_batch({rows[2], rows[0], rows[1]}, 6), params, Mode::Eval, 0);
  const std::size_t stride = 6 * 16;
  const std::size_t from[] = {2, 0, 1};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < stride; ++k) EXPECT_EQ(hp.data[r * stride + k], h.data[from[r] * stride + k]);
}

TEST(EncoderGradient, PreLnEval) { expect_gradients_match(LnPlacement::Pre, Mode::Eval, 0.0); }
TEST(EncoderGradient, PostLnEval) { expect_gradients_match(LnPlacement::Post, Mode::Eval, 0.0); }
TEST(EncoderGradient, PreLnTrainWithDropout) { expect_gradients_match(LnPlacement::Pre, Mode::Train, 0.2); }
TEST(EncoderGradient, PostLnTrainWithDropout) { expect_gradients_match(LnPlacement::Post, Mode::Train, 0.2); }

TEST(EncoderGradient, UnusedEmbeddingsGetZeroGradient) {
  const Encoder<double> enc(tiny());
  const auto params = enc.init_parameters();
  const auto batch = make_batch({{2, 5, 6, 3}, {2, 7, 3}}, 10);
  const ProbeLoss loss{enc, batch, random_tensor({2, 10, 16}, 5), Mode::Eval, 0};
  const auto g = analytic_grads(loss, params);
  for (std::size_t k = 0; k < 16; ++k) {
    EXPECT_EQ(g["emb.token"].data[kPadId * 16 + k], 0.0);
    EXPECT_EQ(g["emb.token"].data[19 * 16 + k], 0.0);
    for (std::size_t pos = 4; pos < 12; ++pos) EXPECT_EQ(g["emb.position"].data[pos * 16 + k], 0.0);
  }
  EXPECT_NE(g["emb.token"].data[5 * 16], 0.0);
}

TEST(EncoderGradient, FiniteAfterRandomSteps) {
  const Encoder<float> enc(tiny(LnPlacement::Pre, 0.1));
  auto params = enc.init_parameters();
  auto state = AdamState<float>::for_params(params);
  const auto batch = tiny_batch();
  Rng rng(1);
  for (int step = 0; step < 100; ++step) {
    ForwardCache<float> cache;
    const auto h = enc.forward(batch, params, Mode::Train, static_cast<std::uint64_t>(step), &cache);
    Tensor<float> d(h.shape);
    for (auto& v : d.data) v = static_cast<float>(rng.normal());
    auto g = params.zeros_like();
    enc.backward(cache, d, params, g);
    ASSERT_TRUE(g.all_finite());
    adam_step(params, g, state, 1e-3);
    ASSERT_TRUE(params.all_finite());
  }
  EXPECT_EQ(state.step, 100u);
}

TEST(Pooling, MeanAndCls) {
  const auto batch = make_batch({{2, 7, 3}, {2, 5, 6, 7, 3}});
  Tensor<double> h({2, 5, 2});
  for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] = static_cast<double>(i);
  const auto mean = pool(h, batch, Pooling::Mean);
  EXPECT_EQ(mean.shape, (std::vector<std::size_t>{2, 2}));
  EXPECT_DOUBLE_EQ(mean.data[0], (0.0 + 2.0 + 4.0) / 3.0);
  EXPECT_DOUBLE_EQ(mean.data[1], (1.0 + 3.0 + 5.0) / 3.0);
  EXPECT_DOUBLE_EQ(mean.data[2], (10.0 + 12 + 14 + 16 + 18) / 5.0);

  auto perturbed = h;
  perturbed.data[(1 * 5 + 4) * 2] += 100.0;
  const auto cls = pool(h, batch, Pooling::Cls);
  EXPECT_EQ(cls, pool(perturbed, batch, Pooling::Cls));
  EXPECT_DOUBLE_EQ(cls.data[2], 10.0);
}

TEST(Pooling, BackwardIsAdjoint) {
  const auto batch = make_batch({{2, 7, 3}, {2, 5, 6, 7, 3}});
  const auto h = random_tensor({2, 5, 3}, 1);
  const auto g = random_tensor({2, 3}, 2);
  for (auto how : {Pooling::Cls, Pooling::Mean}) {
    const auto p = pool(h, batch, how);
    const auto back = pool_backward(g, batch, how, 3);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) lhs += p.data[i] * g.data[i];
    for (std::size_t i = 0; i < h.size(); ++i) rhs += h.data[i] * back.data[i];
    EXPECT_NEAR(lhs, rhs, 1e-12);
  }
}

TEST(Schedule, WarmupAndDecay) {
  const double T = 1000, peak = 3e-5;
  EXPECT_EQ(lr_at(0, T, peak), 0.0);
  EXPECT_NEAR(lr_at(0.1 * T, T, peak), 3e-5, 1e-18);
  EXPECT_EQ(lr_at(T, T, peak), 0.0);
  EXPECT_NEAR(lr_at(50, T, peak), 1.5e-5, 1e-18);
  EXPECT_NEAR(lr_at(550, T, peak), 1.5e-5, 1e-18);
  for (double s = 1; s < T; s += 1) EXPECT_LE(lr_at(s, T, peak), peak);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet<double> p;
  p.add("w", {3}, 0.5);
  auto g = p.zeros_like();
  g["w"].data = {1.0, -2.0, 0.0};
  auto state = AdamState<double>::for_params(p);
  adam_step(p, g, state, 0.01);
  EXPECT_NEAR(p["w"].data[0], 0.49, 1e-9);
  EXPECT_NEAR(p["w"].data[1], 0.51, 1e-9);
  EXPECT_EQ(p["w"].data[2], 0.5);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  const Encoder<float> enc(tiny());
  auto params = enc.init_parameters();
  const auto before = params;
  auto state = AdamState<float>::for_params(params);
  adam_step(params, params.zeros_like(), state, 1e-3);
  EXPECT_EQ(params, before);
}

}  // namespace molda

// SPDX-License-Identifier: Apache-2.0
#include "molda/objectives.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "molda/checkpoint.hpp"
#include "molda/gradcheck.hpp"
#include "molda/training.hpp"

namespace molda {
namespace {

const std::vector<std::string> kSmiles = {
    "CC(=O)Oc1ccccc1C(=O)O", "CN1C=NC2=C1C(=O)N(C(=O)N2C)C", "O=C(O)c1ccc(Cl)cc1Br", "c1ccc2ccccc2c1",
    "CC(C)(C)c1ccc(O)cc1",   "C1CC2CCC1CC2",                 "NC(Cc1c[nH]c2ccccc12)C(=O)O",
    "CCOC(=O)c1ccccc1",      "CCN(CC)CCO",                   "OC(=O)CCC(=O)O",
    "CCCCCCCC(=O)O",         "c1ccncc1CCN",                  "COc1ccc(CC(N)=O)cc1"};

EncoderConfig tiny(double dropout = 0.0) {
  EncoderConfig c;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 16;
  c.ff = 32;
  c.max_len = 40;
  c.vocab_size = 30;
  c.dropout = dropout;
  c.seed = 3;
  return c;
}

TrainConfig quick(Objective o) {
  TrainConfig t;
  t.objective = o;
  t.epochs = 2;
  t.batch_size = 4;
  t.peak_lr = 1e-3;
  t.seed = 17;
  return t;
}

ParamSet<double> jitter(ParamSet<double> p, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < p.count(); ++i)
    for (auto& v : p.at(i).data) v += 0.2 * rng.normal();
  return p;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("molda_obj_" + name);
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(Masking, FractionOverManySequences) {
  Rng rng(5);
  std::vector<std::vector<int>> rows;
  for (int i = 0; i < 10000; ++i) {
    std::vector<int> r{kClsId};
    const int len = 5 + static_cast<int>(rng.below(40));
    for (int k = 0; k < len; ++k) r.push_back(kSpecialCount + static_cast<int>(rng.below(50)));
    r.push_back(kSepId);
    rows.push_back(r);
  }
  const auto batch = make_batch(rows);
  const auto mb = apply_masking(batch, 55, 42);
  std::size_t content = 0, masked = 0, replaced_mask = 0, unchanged = 0;
  for (std::size_t i = 0; i < batch.ids.size(); ++i)
    if (batch.attention_mask[i] && batch.ids[i] >= kSpecialCount) ++content;
  for (auto pos : mb.positions) {
    ++masked;
    EXPECT_GE(batch.ids[pos], kSpecialCount);
    if (mb.batch.ids[pos] == kMaskId) ++replaced_mask;
    if (mb.batch.ids[pos] == batch.ids[pos]) ++unchanged;
  }
  const double frac = static_cast<double>(masked) / static_cast<double>(content);
  EXPECT_NEAR(frac, 0.15, 0.01);
  EXPECT_NEAR(static_cast<double>(replaced_mask) / static_cast<double>(masked), 0.8, 0.02);
  EXPECT_GT(static_cast<double>(unchanged) / static_cast<double>(masked), 0.08);
  for (std::size_t i = 0; i < batch.ids.size(); ++i)
    if (batch.ids[i] < kSpecialCount) {
      EXPECT_EQ(mb.batch.ids[i], batch.ids[i]);
    }
}

TEST(Masking, ExactCountPerRowAndReproducible) {
  const auto batch = make_batch({{2, 5, 6, 7, 3}, {2, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 3}, {2, 3}});
  const auto a = apply_masking(batch, 20, 9);
  const auto b = apply_masking(batch, 20, 9);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_EQ(a.batch.ids, b.batch.ids);
  std::size_t row0 = 0, row1 = 0, row2 = 0;
  for (auto p : a.positions) (p < 12 ? row0 : p < 24 ? row1 : row2)++;
  EXPECT_EQ(row0, 1u);  // round(0.45) = 0 -> minimum 1
  EXPECT_EQ(row1, 2u);  // round(1.5) = 2
  EXPECT_EQ(row2, 0u);
}

TEST(MlmLoss, UniformLogitsGiveLogVocab) {
  const Encoder<double> enc(tiny());
  auto p = enc.init_parameters();
  init_mlm_head(p, 16, 30, 1);
  p["mlm.w"].zero();
  const auto mb = apply_masking(make_batch({{2, 5, 6, 7, 8, 3}, {2, 9, 10, 11, 3}}), 30, 1);
  EXPECT_NEAR(mlm_loss(enc, p, mb, Mode::Eval, 0).loss, std::log(30.0), 1e-12);
}

TEST(MlmLoss, ConfidentCorrectPredictionApproachesZero) {
  const Encoder<double> enc(tiny());
  auto p = enc.init_parameters();
  init_mlm_head(p, 16, 30, 1);
  p["mlm.w"].zero();
  MaskedBatch mb;
  mb.batch = make_batch({{2, 7, 3}});
  mb.original = mb.batch.ids;
  mb.batch.ids[1] = kMaskId;
  mb.positions = {1};
  p["mlm.b"].data[7] = 40.0;
  const auto out = mlm_loss(enc, p, mb, Mode::Eval, 0);
  EXPECT_LT(out.loss, 1e-15);
  EXPECT_EQ(out.accuracy, 1.0);
}

TEST(MlmLoss, NoMaskedTokens) {
  const Encoder<double> enc(tiny());
  auto p = enc.init_parameters();
  init_mlm_head(p, 16, 30, 1);
  MaskedBatch mb;
  mb.batch = make_batch({{2, 3}});
  mb.original = mb.batch.ids;
  try {
    mlm_loss(enc, p, mb, Mode::Eval, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoMaskedTokens);
  }
}

TEST(MtrLoss, UnitCases) {
  const Encoder<double> enc(tiny());
  auto p = enc.init_parameters();
  init_mtr_head(p, 16, 1, 1);
  p["mtr.w2"].zero();
  p["mtr.b2"].data = {1.0};
  MtrBatch mb{make_batch({{2, 5, 3}}), Tensor<double>({1, 1}, 0.0)};
  EXPECT_DOUBLE_EQ(mtr_loss(enc, p, mb, Mode::Eval, 0).loss, 1.0);
  mb.targets.data = {1.0};
  EXPECT_DOUBLE_EQ(mtr_loss(enc, p, mb, Mode::Eval, 0).loss, 0.0);
  MtrBatch wide{make_batch({{2, 5, 3}}), Tensor<double>({1, 2}, 0.0)};
  EXPECT_THROW(mtr_loss(enc, p, wide, Mode::Eval, 0), Error);
}

TEST(MtrLoss, ZeroPredictionOnStandardizedTargetsIsOne) {
  const auto rows = descriptor_rows(kSmiles, {});
  const auto scaler = fit_scaler(rows);
  const auto targets = standardized_targets(rows, scaler);
  const Vocabulary vocab = train_wordpiece(kSmiles, 40, 2);
  auto config = tiny();
  config.vocab_size = vocab.size();
  const Encoder<double> enc(config);
  auto p = enc.init_parameters();
  init_mtr_head(p, 16, scaler.kept.size(), 1);
  p["mtr.w2"].zero();
  MtrBatch mb{encode_batch(kSmiles, vocab, 40), targets};
  EXPECT_NEAR(mtr_loss(enc, p, mb, Mode::Eval, 0).loss, 1.0, 1e-12);
}

TEST(ClLoss, ClosedForms) {
  RowMatrix<double> c(1, 2), e(1, 2), n(1, 2);
  c << 1, 0;
  e << 2, 0;
  n << 0, 3;
  auto out = cl_loss_from_embeddings(c, e, n);
  EXPECT_NEAR(out.loss, std::log(std::exp(1.0) + 1.0) - 1.0, 1e-12);
  EXPECT_NEAR(out.loss, 0.31326, 5e-6);
  EXPECT_GT(out.loss, 0.0);
  EXPECT_EQ(out.accuracy, 1.0);

  n << 5, 0;
  EXPECT_NEAR(cl_loss_from_embeddings(c, e, n).loss, std::log(2.0), 1e-12);

  n << 0, 3;
  // sim(c,e) - log(exp(sim(c,n))) = 1 - 0
  EXPECT_NEAR(cl_loss_from_embeddings(c, e, n, ClForm::Literal).loss, 1.0, 1e-12);
}

TEST(ClLoss, ZeroVector) {
  RowMatrix<double> c(1, 2), e(1, 2), n(1, 2);
  c << 1, 0;
  e << 0, 0;
  n << 0, 1;
  try {
    cl_loss_from_embeddings(c, e, n);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::ZeroVector);
  }
}

TEST(ClLoss, PositiveForRandomEmbeddings) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    RowMatrix<double> c(4, 3), e(4, 3), n(4, 3);
    for (auto* m : {&c, &e, &n})
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = rng.normal();
    EXPECT_GT(cl_loss_from_embeddings(c, e, n, ClForm::Standard, 1.0).loss, 0.0);
  }
}

TEST(ObjectiveGradient, Mlm) {
  const Encoder<double> enc(tiny(0.1));
  auto p = enc.init_parameters();
  init_mlm_head(p, 16, 30, 1);
  p = jitter(p, 4);
  const auto mb = apply_masking(make_batch({{2, 5, 6, 7, 8, 9, 3}, {2, 10, 11, 12, 3}}), 30, 3);
  auto g = p.zeros_like();
  mlm_loss(enc, p, mb, Mode::Train, 8, &g);
  const auto report = check_gradients([&](const ParamSet<double>& q) { return mlm_loss(enc, q, mb, Mode::Train, 8).loss; },
                                      p, g);
  for (const auto& t : report.tensors) EXPECT_LE(t.max_rel_error, 1e-4) << t.name;
}

TEST(ObjectiveGradient, Mtr) {
  const Encoder<double> enc(tiny(0.1));
  auto p = enc.init_parameters();
  init_mtr_head(p, 16, 3, 1);
  p = jitter(p, 5);
  MtrBatch mb{make_batch({{2, 5, 6, 7, 3}, {2, 10, 11, 3}, {2, 12, 3}}), Tensor<double>({3, 3})};
  Rng rng(1);
  for (auto& v : mb.targets.data) v = rng.normal();
  auto g = p.zeros_like();
  mtr_loss(enc, p, mb, Mode::Train, 8, &g, 0.1);
  const auto report = check_gradients(
      [&](const ParamSet<double>& q) { return mtr_loss(enc, q, mb, Mode::Train, 8, nullptr, 0.1).loss; }, p, g);
  for (const auto& t : report.tensors) EXPECT_LE(t.max_rel_error, 1e-4) << t.name;
}

TEST(ObjectiveGradient, Cl) {
  const Encoder<double> enc(tiny(0.1));
  const auto p0 = jitter(enc.init_parameters(), 6);
  auto p = p0;
  TripleBatch tb{make_batch({{2, 5, 6, 7, 3}, {2, 10, 11, 3}}), make_batch({{2, 7, 6, 5, 3}, {2, 11, 10, 3}}),
                 make_batch({{2, 12, 13, 3}, {2, 14, 15, 16, 3}})};
  auto g = p.zeros_like();
  cl_loss(enc, p, tb, Mode::Train, 8, &g, Pooling::Mean, 1.0);
  const auto report = check_gradients(
      [&](const ParamSet<double>& q) { return cl_loss(enc, q, tb, Mode::Train, 8, nullptr, Pooling::Mean, 1.0).loss; },
      p, g);
  for (const auto& t : report.tensors) EXPECT_LE(t.max_rel_error, 1e-4) << t.name;
}

TEST(Triples, CanonicalEnumeratedAndNegative) {
  std::vector<Molecule> mols;
  std::vector<std::string> canon;
  for (const auto& s : kSmiles) {
    mols.push_back(parse_smiles(s));
    canon.push_back(canonical_smiles(mols.back()));
  }
  const Vocabulary vocab = train_wordpiece(kSmiles, 60, 2);
  const auto tb = make_triple_batch(mols, canon, {0, 3, 5}, vocab, 128, 7);
  EXPECT_EQ(tb.canonical.rows, 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<int> e(tb.enumerated.ids.begin() + static_cast<std::ptrdiff_t>(k * tb.enumerated.width),
                       tb.enumerated.ids.begin() + static_cast<std::ptrdiff_t>((k + 1) * tb.enumerated.width));
    std::vector<int> n(tb.negative.ids.begin() + static_cast<std::ptrdiff_t>(k * tb.negative.width),
                       tb.negative.ids.begin() + static_cast<std::ptrdiff_t>((k + 1) * tb.negative.width));
    const std::size_t anchor = std::vector<std::size_t>{0, 3, 5}[k];
    EXPECT_TRUE(is_isomorphic(parse_smiles(decode(e, vocab)), mols[anchor]));
    EXPECT_NE(canonical_smiles(parse_smiles(decode(n, vocab))), canon[anchor]);
  }
}

TEST(Checkpoint, RoundTrip) {
  const Vocabulary vocab = train_wordpiece(kSmiles, 40, 2);
  auto ck = start_pretraining(kSmiles, vocab, tiny(), quick(Objective::Mtr));
  auto res = run_training(ck, kSmiles, nullptr, 3);
  const auto dir = temp_dir("roundtrip");
  save_checkpoint(res.checkpoint, dir);
  const auto back = load_checkpoint(dir);
  EXPECT_EQ(back.params, res.checkpoint.params);
  EXPECT_EQ(back.adam->m, res.checkpoint.adam->m);
  EXPECT_EQ(back.adam->v, res.checkpoint.adam->v);
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.config, res.checkpoint.config);
  EXPECT_EQ(back.vocab, vocab);
  EXPECT_EQ(back.scaler->mean, res.checkpoint.scaler->mean);
  EXPECT_EQ(to_json(*back.train), to_json(*res.checkpoint.train));
}

TEST(Training, ZeroEpochsKeepsInitialization) {
  const Vocabulary vocab = train_wordpiece(kSmiles, 40, 2);
  auto cfg = quick(Objective::Mlm);
  cfg.epochs = 0;
  const auto res = pretrain(kSmiles, vocab, tiny(), cfg);
  auto config = tiny();
  config.vocab_size = vocab.size();
  EXPECT_EQ(res.checkpoint.encoder_params(), Encoder<float>(config).init_parameters());
  EXPECT_TRUE(res.step_loss.empty());
}

TEST(Training, ResumeIsBitwise) {
  const Vocabulary vocab = train_wordpiece(kSmiles, 40, 2);
  for (auto obj : {Objective::Mlm, Objective::Mtr, Objective::Cl}) {
    auto cfg = quick(obj);
    const auto start = start_pretraining(kSmiles, vocab, tiny(0.1), cfg);
    const auto full = run_training(start, kSmiles);
    const auto part = run_training(start, kSmiles, nullptr, 3);
    const auto dir = temp_dir("resume");
    save_checkpoint(part.checkpoint, dir);
    const auto resumed = run_training(load_checkpoint(dir), kSmiles);
    EXPECT_EQ(resumed.checkpoint.params, full.checkpoint.params) << to_string(obj);
    EXPECT_EQ(resumed.checkpoint.adam->m, full.checkpoint.adam->m);
    std::vector<double> joined = part.step_loss;
    joined.insert(joined.end(), resumed.step_loss.begin(), resumed.step_loss.end());
    EXPECT_EQ(joined, full.step_loss);
  }
}

TEST(Training, LogHasOneLinePerStep) {
  const Vocabulary vocab = train_wordpiece(kSmiles, 40, 2);
  std::ostringstream log;
  const auto res = pretrain(kSmiles, vocab, tiny(), quick(Objective::Mlm), &log);
  std::istringstream in(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"].get<std::size_t>(), ++n);
    EXPECT_TRUE(j.contains("lr") && j.contains("loss") && j.contains("epoch"));
  }
  EXPECT_EQ(n, 2u * 4u);  // 13 rows, batch 4 -> 4 steps per epoch
  EXPECT_EQ(res.checkpoint.step, 8u);
}

TEST(DomainAdaptation, ZeroEpochsLeavesEncoder) {
  const Vocabulary vocab = train_wordpiece(kSmiles, 40, 2);
  const auto pre = pretrain(kSmiles, vocab, tiny(), quick(Objective::Mlm));
  const std::vector<std::string> domain(kSmiles.begin(), kSmiles.begin() + 6);
  for (auto obj : {Objective::Mlm, Objective::Mtr, Objective::Cl}) {
    auto cfg = quick(obj);
    cfg.epochs = 0;
    const auto da = domain_adapt(pre.checkpoint, domain, cfg);
    EXPECT_EQ(da.checkpoint.encoder_params(), pre.checkpoint.encoder_params());
    cfg.epochs = 1;
    const auto moved = domain_adapt(pre.checkpoint, domain, cfg);
    EXPECT_GT(l2_distance(moved.checkpoint.encoder_params(), pre.checkpoint.encoder_params()), 0.0);
    EXPECT_EQ(moved.checkpoint.lineage.size(), 1u);
    EXPECT_EQ(moved.checkpoint.phase, "adapt");
  }
}

TEST(DomainAdaptation, MtrRefitsScalerAndHead) {
  const Vocabulary vocab = train_wordpiece(kSmiles, 40, 2);
  const auto pre = pretrain(kSmiles, vocab, tiny(), quick(Objective::Mtr));
  const std::vector<std::string> domain(kSmiles.begin() + 4, kSmiles.end());
  const auto ck = start_domain_adaptation(pre.checkpoint, domain, quick(Objective::Mtr));
  EXPECT_EQ(ck.scaler->mean, fit_scaler(descriptor_rows(domain, {})).mean);
  EXPECT_NE(ck.params["mtr.w1"], pre.checkpoint.params["mtr.w1"]);
  EXPECT_EQ(ck.step, 0u);
}

TEST(DomainAdaptation, EmptyCorpus) {
  const Vocabulary vocab = train_wordpiece(kSmiles, 40, 2);
  const auto pre = pretrain(kSmiles, vocab, tiny(), quick(Objective::Mlm));
  try {
    domain_adapt(pre.checkpoint, {}, quick(Objective::Mlm));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyDomainCorpus);
  }
}

}  // namespace molda

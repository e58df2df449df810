// SPDX-License-Identifier: Apache-2.0
#include "molda/downstream.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "molda/training.hpp"

namespace molda {
namespace {

const std::vector<std::string> kSmiles = {
    "CC(=O)Oc1ccccc1C(=O)O", "CN1C=NC2=C1C(=O)N(C(=O)N2C)C", "O=C(O)c1ccc(Cl)cc1Br", "c1ccc2ccccc2c1",
    "CC(C)(C)c1ccc(O)cc1",   "C1CC2CCC1CC2",                 "CCOC(=O)c1ccccc1",      "CCN(CC)CCO",
    "OC(=O)CCC(=O)O",        "CCCCCCCC(=O)O",                "c1ccncc1CCN",           "COc1ccc(CC(N)=O)cc1"};

Checkpoint tiny_checkpoint() {
  EncoderConfig c;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 8;
  c.ff = 16;
  c.max_len = 40;
  c.seed = 5;
  TrainConfig t;
  t.objective = Objective::Mlm;
  t.epochs = 0;
  return start_pretraining(kSmiles, train_wordpiece(kSmiles, 40, 2), c, t);
}

LabeledDataset dataset_from(const std::vector<double>& y) {
  LabeledDataset ds;
  ds.name = "synthetic";
  for (std::size_t i = 0; i < y.size(); ++i) {
    ds.ids.push_back(std::to_string(i));
    ds.smiles.push_back("C");
    ds.raw.push_back(y[i]);
    ds.target.push_back(y[i]);
    ds.censored.push_back(false);
  }
  return ds;
}

/// y = 1.5 x0 - 2 x5 + x11 + noise over 16 uniform columns.
std::pair<Tensor<double>, std::vector<double>> linear_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x({n, 16});
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < 16; ++f) x.data[i * 16 + f] = rng.uniform();
    const double* r = &x.data[i * 16];
    y[i] = 1.5 * r[0] - 2.0 * r[5] + r[11] + 0.1 * rng.normal();
  }
  return {x, y};
}

}  // namespace

TEST(LabeledCsv, TransformAndCensor) {
  std::istringstream in("id,smiles,target\nA,CCO,100\nB,c1ccccc1,10\n\"C,1\",CCN,0.5\n");
  DatasetConfig cfg;
  cfg.name = "sol";
  cfg.transform = Transform::Log10;
  cfg.censor = CensorRule{100.0, CensorDirection::Above};
  const auto ds = parse_labeled_csv(in, cfg);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.name, "sol");
  EXPECT_EQ(ds.ids[2], "C,1");
  EXPECT_DOUBLE_EQ(ds.target[0], 2.0);
  EXPECT_DOUBLE_EQ(ds.target[1], 1.0);
  EXPECT_TRUE(ds.censored[0]);
  EXPECT_FALSE(ds.censored[1]);
  EXPECT_EQ(ds.evaluation_rows(), (std::vector<std::size_t>{1, 2}));
}

TEST(LabeledCsv, BelowCensorAndDefaultIds) {
  std::istringstream in("smiles,target\nCCO,1\nCCN,5\n");
  DatasetConfig cfg;
  cfg.censor = CensorRule{1.0, CensorDirection::Below};
  const auto ds = parse_labeled_csv(in, cfg);
  EXPECT_EQ(ds.ids, (std::vector<std::string>{"0", "1"}));
  EXPECT_TRUE(ds.censored[0]);
  EXPECT_FALSE(ds.censored[1]);
}

TEST(LabeledCsv, Errors) {
  auto code = [](const std::string& text, Transform t = Transform::None) {
    std::istringstream in(text);
    DatasetConfig cfg;
    cfg.transform = t;
    try {
      parse_labeled_csv(in, cfg);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Config;
  };
  EXPECT_EQ(code("smiles,value\nCCO,1\n"), ErrorCode::Format);
  EXPECT_EQ(code("smiles,target\nCCO,abc\n"), ErrorCode::Format);
  EXPECT_EQ(code("smiles,target\nCCO,1.5x\n"), ErrorCode::Format);
  EXPECT_EQ(code("smiles,target\nCCO,0\n", Transform::Log10), ErrorCode::Format);
  EXPECT_EQ(code("smiles,target\n"), ErrorCode::InsufficientData);
}

TEST(DatasetConfigJson, RoundTrip) {
  DatasetConfig c;
  c.name = "toy";
  c.transform = Transform::Log10;
  c.censor = CensorRule{123.456, CensorDirection::Above};
  const auto back = dataset_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(back.name, "toy");
  EXPECT_EQ(back.transform, Transform::Log10);
  ASSERT_TRUE(back.censor);
  EXPECT_EQ(back.censor->value, 123.456);
  EXPECT_THROW(dataset_config_from_json({{"transform", "sqrt"}}), Error);
}

TEST(Metrics, Identity) {
  const std::vector<double> y{1, 2, 3, 5};
  const auto m = compute_metrics(y, y);
  EXPECT_EQ(m.mae, 0.0);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_DOUBLE_EQ(*m.r2, 1.0);
  EXPECT_DOUBLE_EQ(*m.pearson, 1.0);
  EXPECT_DOUBLE_EQ(*m.spearman, 1.0);
}

TEST(Metrics, MeanPredictionHasZeroR2) {
  const std::vector<double> y{1, 2, 3, 6};
  const auto m = compute_metrics(y, std::vector<double>(4, 3.0));
  EXPECT_NEAR(*m.r2, 0.0, 1e-15);
  EXPECT_FALSE(m.pearson);  // constant prediction
}

TEST(Metrics, SwappedPairGivesMinusThree) {
  const auto m = compute_metrics({0, 1}, {1, 0});
  EXPECT_DOUBLE_EQ(*m.r2, -3.0);
  EXPECT_DOUBLE_EQ(m.mae, 1.0);
  EXPECT_DOUBLE_EQ(*m.pearson, -1.0);
}

TEST(Metrics, ConstantTargetIsMissingNotZero) {
  const auto m = compute_metrics({2, 2, 2}, {1, 2, 3});
  EXPECT_FALSE(m.r2);
  EXPECT_FALSE(m.pearson);
  EXPECT_FALSE(m.spearman);
  EXPECT_NEAR(m.mae, 2.0 / 3.0, 1e-15);
}

TEST(Metrics, SpearmanUsesAverageRanks) {
  EXPECT_EQ(average_ranks({10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
  const auto m = compute_metrics({1, 2, 3, 4}, {1, 4, 9, 100});
  EXPECT_DOUBLE_EQ(*m.spearman, 1.0);
  EXPECT_LT(*m.pearson, 1.0);
}

TEST(Metrics, Bounds) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> y(20), p(20);
    for (std::size_t i = 0; i < 20; ++i) {
      y[i] = rng.normal();
      p[i] = rng.normal();
    }
    const auto m = compute_metrics(y, p);
    EXPECT_GE(m.rmse, m.mae);
    EXPECT_LE(*m.r2, 1.0);
    EXPECT_LE(std::abs(*m.pearson), 1.0);
    EXPECT_LE(std::abs(*m.spearman), 1.0);
  }
  EXPECT_THROW(compute_metrics({1}, {1}), Error);
  EXPECT_THROW(compute_metrics({1, 2}, {1}), Error);
}

TEST(Forest, SingleTreeMemorizes) {
  const auto [x, y] = linear_data(60, 1);
  ForestParams hp;
  hp.n_trees = 1;
  hp.bootstrap = false;
  const auto model = fit_forest(x, y, hp, 9);
  EXPECT_EQ(predict(model, x), y);
}

TEST(Forest, ConstantTarget) {
  const auto [x, y] = linear_data(40, 2);
  ForestParams hp;
  hp.n_trees = 10;
  const auto model = fit_forest(x, std::vector<double>(40, 1.25), hp, 1);
  for (double p : predict(model, x)) EXPECT_EQ(p, 1.25);
}

TEST(Forest, IdenticalInputsGiveMean) {
  Tensor<double> x({4, 2}, 1.0);
  ForestParams hp;
  hp.n_trees = 1;
  hp.bootstrap = false;
  const auto model = fit_forest(x, {1, 2, 3, 6}, hp, 1);
  EXPECT_EQ(model.trees[0].nodes.size(), 1u);
  EXPECT_DOUBLE_EQ(predict(model, x)[0], 3.0);
}

TEST(Forest, TieBreakPrefersLowestFeature) {
  // Both columns separate the targets equally well.
  Tensor<double> x({4, 2});
  x.data = {0, 0, 0, 0, 1, 1, 1, 1};
  ForestParams hp;
  hp.n_trees = 1;
  hp.bootstrap = false;
  const auto model = fit_forest(x, {0, 0, 1, 1}, hp, 1);
  EXPECT_EQ(model.trees[0].nodes[0].feature, 0);
  EXPECT_DOUBLE_EQ(model.trees[0].nodes[0].threshold, 0.5);
}

TEST(Forest, LinearSignalGeneralizes) {
  const auto [x, y] = linear_data(500, 4);
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < 500; ++i) (i % 5 == 0 ? test : train).push_back(i);
  std::vector<double> ytr, yte;
  for (auto i : train) ytr.push_back(y[i]);
  for (auto i : test) yte.push_back(y[i]);
  const auto model = fit_forest(select_rows(x, train), ytr, ForestParams{}, 11);
  const auto m = compute_metrics(yte, predict(model, select_rows(x, test)));
  EXPECT_GE(*m.r2, 0.8);
}

TEST(Forest, RowOrderAndThreadsDoNotMatter) {
  const auto [x, y] = linear_data(80, 5);
  ForestParams hp;
  hp.n_trees = 12;
  const auto a = fit_forest(x, y, hp, 21);
  std::vector<std::size_t> perm(80);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(8);
  rng.shuffle(perm);
  std::vector<double> yp;
  for (auto i : perm) yp.push_back(y[i]);
  const auto b = fit_forest(select_rows(x, perm), yp, hp, 21, 3);
  EXPECT_EQ(predict(a, x), predict(b, x));
}

TEST(Forest, RejectsBadInput) {
  Tensor<double> x({1, 2});
  EXPECT_THROW(fit_forest(x, {1.0}, ForestParams{}, 1), Error);
  Tensor<double> x2({2, 1});
  x2.data[0] = std::nan("");
  EXPECT_THROW(fit_forest(x2, {1.0, 2.0}, ForestParams{}, 1), Error);
}

TEST(RepeatedCv, RecordTableShapeAndDeterminism) {
  const auto [x, y] = linear_data(60, 6);
  const auto ds = dataset_from(y);
  const auto plan = random_split_plan(ds.evaluation_rows(), 5, 5, 3);
  ForestParams hp;
  hp.n_trees = 5;
  const auto a = run_repeated_cv(x, ds, plan, "m", hp, 42);
  EXPECT_EQ(a.size(), 125u);
  for (std::size_t i = 0; i < a.size(); i += 5) {
    EXPECT_EQ(a[i].metric, "MAE");
    EXPECT_GE(*a[i + 1].value, *a[i].value);
  }
  EXPECT_EQ(a, run_repeated_cv(x, ds, plan, "m", hp, 42, 2));
  EXPECT_NE(a, run_repeated_cv(x, ds, plan, "m", hp, 43));
}

TEST(RepeatedCv, CensoredRowsStayOut) {
  const auto [x, y] = linear_data(30, 7);
  auto ds = dataset_from(y);
  ds.censored[4] = ds.censored[17] = true;
  const auto rows = ds.evaluation_rows();
  EXPECT_EQ(rows.size(), 28u);
  const auto plan = random_split_plan(rows, 5, 2, 1);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t f = 0; f < 5; ++f) {
      for (auto i : plan.test(r, f)) EXPECT_FALSE(ds.censored[i]);
      for (auto i : plan.train(r, f)) EXPECT_FALSE(ds.censored[i]);
    }
  ForestParams hp;
  hp.n_trees = 2;
  EXPECT_NO_THROW(run_repeated_cv(x, ds, plan, "m", hp, 1));
  std::vector<std::size_t> all(30);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_THROW(run_repeated_cv(x, ds, random_split_plan(all, 5, 1, 1), "m", hp, 1), Error);
}

TEST(RepeatedCv, ExportRoundTrip) {
  std::vector<MetricRecord> recs{{"m,1", "d", "random", 0, 1, "R2", std::nullopt}, {"m", "d", "butina", 2, 3, "MAE", 0.125}};
  EXPECT_EQ(records_from_json(records_to_json(recs)), recs);
  std::istringstream in(records_to_csv(recs));
  EXPECT_EQ(records_from_csv(in), recs);
}

TEST(Embedding, ShapeAndDuplicates) {
  const auto ck = tiny_checkpoint();
  const std::vector<std::string> rows{"CCO", "c1ccccc1", "CCO"};
  const auto e = embed_dataset(ck, rows);
  EXPECT_EQ(e.shape, (std::vector<std::size_t>{3, 8}));
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(e.data[k], e.data[16 + k]);
  EXPECT_EQ(e.data, embed_dataset(ck, rows, Pooling::Cls, 2).data);
  EXPECT_NE(e.data, embed_dataset(ck, rows, Pooling::Mean).data);
}

TEST(Embedding, SerializedCheckpointIsBitwiseEqual) {
  const auto ck = tiny_checkpoint();
  const auto dir = std::filesystem::temp_directory_path() / "molda_down_ck";
  std::filesystem::remove_all(dir);
  save_checkpoint(ck, dir);
  const auto back = load_checkpoint(dir);
  EXPECT_EQ(embed_dataset(ck, kSmiles).data, embed_dataset(back, kSmiles).data);
}

TEST(Embedding, TokenizationFailureNamesRow) {
  const auto ck = tiny_checkpoint();
  try {
    embed_dataset(ck, {"CCO", "%%%"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TokenizationFailure);
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(Representations, DescriptorAndFingerprintShapes) {
  EXPECT_EQ(descriptor_matrix(kSmiles).shape, (std::vector<std::size_t>{kSmiles.size(), descriptor_names().size()}));
  const auto fp = fingerprint_matrix({"CCO"}, 2, 256);
  EXPECT_EQ(fp.shape, (std::vector<std::size_t>{1, 256}));
  EXPECT_GT(std::accumulate(fp.data.begin(), fp.data.end(), 0.0), 0.0);
}

}  // namespace molda

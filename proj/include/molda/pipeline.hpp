// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pipeline stages behind the command line. Each stage takes one JSON config,
// writes its artifacts into config["out"] and a manifest.json recording the
// completed config, input hashes and output hashes, so the stage can be
// replayed from the manifest alone.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "molda/checkpoint.hpp"
#include "molda/chemspace.hpp"
#include "molda/downstream.hpp"
#include "molda/features.hpp"
#include "molda/hash.hpp"
#include "molda/molgraph.hpp"
#include "molda/stats.hpp"
#include "molda/tokenizer.hpp"
#include "molda/toydata.hpp"
#include "molda/training.hpp"

namespace molda {

using Json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kRunManifestFormat = "molda-run-1";

namespace detail {

/// Hash of a file, or of every file under a directory (sorted relative
/// paths and contents).
inline std::string hash_path(const fs::path& p) {
  if (!fs::exists(p)) fail(ErrorCode::Io, "missing " + p.string());
  if (!fs::is_directory(p)) return hash_file(p.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), p));
  std::sort(files.begin(), files.end());
  Fnv1a h;
  for (const auto& f : files) {
    h.update(f.generic_string());
    h.update("\n");
    h.update(hash_file((p / f).string()));
  }
  return hex64(h.digest());
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + p.string());
  out << text;
}

inline std::string join_lines(const std::vector<std::string>& lines) {
  std::string s;
  for (const auto& l : lines) s += l + "\n";
  return s;
}

/// Reads cfg[key], storing `def` first when absent, so the manifest holds
/// the completed configuration.
template <class T>
T setting(Json& cfg, const std::string& key, T def) {
  if (!cfg.contains(key) || cfg[key].is_null()) cfg[key] = def;
  try {
    return cfg[key].get<T>();
  } catch (const Json::exception& e) {
    fail(ErrorCode::Config, "config key '" + key + "': " + e.what());
  }
}

inline std::string required_path(Json& cfg, const std::string& key) {
  if (!cfg.contains(key) || !cfg[key].is_string() || cfg[key].get<std::string>().empty())
    fail(ErrorCode::Config, "config needs '" + key + "'");
  const std::string p = cfg[key].get<std::string>();
  if (!fs::exists(p)) fail(ErrorCode::Config, "'" + key + "' path does not exist: " + p);
  return p;
}

struct StageContext {
  Json config;
  fs::path out;
  std::size_t threads = 1;
  Json inputs = Json::object();
  Json notes = Json::object();

  std::string input(const std::string& key) {
    const std::string p = required_path(config, key);
    inputs[key] = {{"path", p}, {"hash", hash_path(p)}};
    return p;
  }
};

/// Corpus lines that parse and fall inside the size window.
inline std::vector<std::string> load_corpus(StageContext& ctx, const std::string& key) {
  const auto lines = read_smiles_lines(ctx.input(key));
  const auto report = validate_corpus(lines);
  ctx.notes[key + "_accepted"] = report.accepted.size();
  ctx.notes[key + "_rejected"] = report.rejected.size();
  if (report.accepted.empty()) fail(ErrorCode::EmptyCorpus, "no valid molecules in " + ctx.config[key].get<std::string>());
  return report.accepted;
}

inline LabeledDataset load_dataset(StageContext& ctx) {
  const std::string csv = ctx.input("dataset");
  const std::string cfg = ctx.input("dataset_config");
  return load_labeled_dataset(csv, load_dataset_config(cfg));
}

inline EncoderConfig encoder_from(Json& cfg) {
  const std::string preset = setting<std::string>(cfg, "preset", "desk");
  EncoderConfig base;
  if (preset == "desk") base = EncoderConfig::desk();
  else if (preset == "full") base = EncoderConfig::full();
  else fail(ErrorCode::Config, "unknown preset '" + preset + "'");
  Json merged = to_json(base);
  if (cfg.contains("encoder")) {
    if (!cfg["encoder"].is_object()) fail(ErrorCode::Config, "'encoder' must be an object");
    merged.merge_patch(cfg["encoder"]);
  }
  cfg["encoder"] = merged;
  try {
    return encoder_config_from_json(merged);
  } catch (const Error& e) {
    fail(ErrorCode::Config, e.what());
  }
}

inline TrainConfig train_from(Json& cfg, Objective default_objective) {
  TrainConfig defaults;
  defaults.objective = default_objective;
  Json merged = to_json(defaults);
  if (cfg.contains("train")) {
    if (!cfg["train"].is_object()) fail(ErrorCode::Config, "'train' must be an object");
    merged.merge_patch(cfg["train"]);
  }
  cfg["train"] = merged;
  return train_config_from_json(merged, defaults);
}

inline std::string embedding_csv(const LabeledDataset& ds, const Tensor<double>& x) {
  std::ostringstream os;
  os << "id";
  for (std::size_t k = 0; k < x.cols(); ++k) os << ",e" << k;
  os << "\n";
  char buf[40];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << csv_escape(ds.ids[i]);
    for (std::size_t k = 0; k < x.cols(); ++k) {
      std::snprintf(buf, sizeof(buf), ",%.9g", x.data[i * x.cols() + k]);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

inline std::vector<MetricRecord> load_records(const std::string& path) {
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json")
    return records_from_json(Json::parse(read_file(path)));
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  return records_from_csv(in);
}

inline std::vector<std::string> record_models(const std::vector<MetricRecord>& recs) {
  std::vector<std::string> out;
  for (const auto& r : recs)
    if (std::find(out.begin(), out.end(), r.model) == out.end()) out.push_back(r.model);
  return out;
}

// ---------------------------------------------------------------------------
// Stages

inline void stage_toy(StageContext& ctx) {
  const auto n_corpus = setting<std::size_t>(ctx.config, "corpus_size", 1000);
  const auto n_rows = setting<std::size_t>(ctx.config, "dataset_size", 500);
  const auto seed = setting<std::uint64_t>(ctx.config, "seed", 1);
  const auto noise = setting<double>(ctx.config, "noise", 0.15);
  write_text(ctx.out / "corpus.smi", join_lines(generate_toy_corpus(n_corpus, seed)));
  const auto ds = generate_toy_dataset(n_rows, derive_seed(seed, {0x6473}), noise);
  std::ostringstream csv;
  csv << "id,smiles,target\n";
  char buf[40];
  for (const auto& r : ds.rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.target);
    csv << r.id << ',' << r.smiles << ',' << buf << "\n";
  }
  write_text(ctx.out / "dataset.csv", csv.str());
  DatasetConfig dc;
  dc.name = "toy_solubility";
  dc.transform = Transform::Log10;
  dc.censor = CensorRule{std::pow(10.0, ds.censor_log10), CensorDirection::Above};
  write_text(ctx.out / "dataset.json", to_json(dc).dump(2) + "\n");
}

inline void stage_tokenizer(StageContext& ctx) {
  const auto corpus = load_corpus(ctx, "corpus");
  const auto size = setting<std::size_t>(ctx.config, "vocab_size", 512);
  const auto min_freq = setting<std::uint64_t>(ctx.config, "min_frequency", 2);
  const auto vocab = train_wordpiece(corpus, size, min_freq);
  vocab.save((ctx.out / "vocab.txt").string());
  ctx.notes["vocab_size"] = vocab.size();
}

inline void stage_subset(StageContext& ctx) {
  const auto corpus = load_corpus(ctx, "corpus");
  const auto fraction = setting<double>(ctx.config, "fraction", 0.3);
  const auto method = setting<std::string>(ctx.config, "method", "bitbirch_like");
  const auto threshold = setting<double>(ctx.config, "threshold", 0.6);
  const auto radius = setting<int>(ctx.config, "radius", 2);
  const auto nbits = setting<std::size_t>(ctx.config, "nbits", 2048);
  const auto seed = setting<std::uint64_t>(ctx.config, "seed", 0);
  if (!(fraction >= 0.0 && fraction <= 1.0)) fail(ErrorCode::Config, "fraction must lie in [0, 1]");
  std::vector<Fingerprint> fps;
  for (const auto& s : corpus) fps.push_back(morgan_fingerprint(parse_smiles(s), radius, nbits));
  Clustering c;
  if (method == "butina") c = butina_cluster(fps, threshold);
  else if (method == "bitbirch_like") c = leader_cluster(fps, threshold);
  else fail(ErrorCode::Config, "unknown clustering method '" + method + "'");
  const auto sel = proportional_subset(c, fraction, seed);
  std::vector<std::string> picked;
  for (auto i : sel.indices) picked.push_back(corpus[i]);
  write_text(ctx.out / "subset.smi", join_lines(picked));
  Json j = to_json(sel);
  j["clusters"] = c.clusters.size();
  j["cluster_sizes"] = Json::array();
  for (const auto& cl : c.clusters) j["cluster_sizes"].push_back(cl.size());
  j["method"] = method;
  write_text(ctx.out / "selection.json", j.dump(2) + "\n");
  ctx.notes["selected"] = picked.size();
  ctx.notes["clusters"] = c.clusters.size();
}

inline void stage_pretrain(StageContext& ctx) {
  const auto corpus = load_corpus(ctx, "corpus");
  const auto vocab = Vocabulary::load(ctx.input("vocab"));
  const auto enc = encoder_from(ctx.config);
  const auto tc = train_from(ctx.config, Objective::Mlm);
  if (tc.objective == Objective::Cl && corpus.size() < 2) fail(ErrorCode::DegenerateData, "CL needs two molecules");
  fs::create_directories(ctx.out);
  std::ofstream log(ctx.out / "train_log.jsonl", std::ios::binary);
  const auto res = pretrain(corpus, vocab, enc, tc, &log);
  save_checkpoint(res.checkpoint, ctx.out / "checkpoint");
  ctx.notes["steps"] = res.checkpoint.step;
  if (!res.epoch_loss.empty()) ctx.notes["final_epoch_loss"] = res.epoch_loss.back();
}

inline void stage_adapt(StageContext& ctx) {
  const auto base = load_checkpoint(ctx.input("checkpoint"));
  std::vector<std::string> corpus;
  if (ctx.config.contains("dataset") && !ctx.config["dataset"].is_null()) {
    // The domain corpus is every dataset molecule, censored rows included.
    corpus = load_dataset(ctx).smiles;
  } else {
    corpus = load_corpus(ctx, "corpus");
  }
  const auto tc = train_from(ctx.config, Objective::Mtr);
  fs::create_directories(ctx.out);
  write_text(ctx.out / "domain_corpus.smi", join_lines(corpus));
  std::ofstream log(ctx.out / "train_log.jsonl", std::ios::binary);
  const auto res = domain_adapt(base, corpus, tc, &log);
  save_checkpoint(res.checkpoint, ctx.out / "checkpoint");
  ctx.notes["steps"] = res.checkpoint.step;
  ctx.notes["domain_molecules"] = corpus.size();
}

inline Tensor<double> representation(StageContext& ctx, const LabeledDataset& ds) {
  const auto kind = setting<std::string>(ctx.config, "representation", "checkpoint");
  if (kind == "checkpoint") {
    const auto pooling = pooling_from(setting<std::string>(ctx.config, "pooling", "cls"));
    return embed_dataset(load_checkpoint(ctx.input("checkpoint")), ds.smiles, pooling, ctx.threads);
  }
  if (kind == "descriptors") return descriptor_matrix(ds.smiles);
  if (kind == "fingerprint") {
    const auto radius = setting<int>(ctx.config, "radius", 2);
    const auto nbits = setting<std::size_t>(ctx.config, "nbits", 2048);
    return fingerprint_matrix(ds.smiles, radius, nbits);
  }
  fail(ErrorCode::Config, "unknown representation '" + kind + "'");
}

inline void stage_embed(StageContext& ctx) {
  const auto ds = load_dataset(ctx);
  ctx.config["representation"] = "checkpoint";
  const auto x = representation(ctx, ds);
  write_text(ctx.out / "embeddings.csv", embedding_csv(ds, x));
}

inline void stage_evaluate(StageContext& ctx) {
  const auto ds = load_dataset(ctx);
  const auto model = setting<std::string>(ctx.config, "model", "model");
  const auto policy = split_policy_from(setting<std::string>(ctx.config, "split", "random"));
  const auto folds = setting<std::size_t>(ctx.config, "folds", 5);
  const auto repeats = setting<std::size_t>(ctx.config, "repeats", 5);
  const auto seed = setting<std::uint64_t>(ctx.config, "seed", 0);
  const auto threshold = setting<double>(ctx.config, "butina_threshold", 0.6);
  ForestParams hp;
  hp.n_trees = setting<std::size_t>(ctx.config, "n_trees", 100);
  const auto x = representation(ctx, ds);

  const auto rows = ds.evaluation_rows();
  SplitPlan plan;
  if (policy == SplitPolicy::Random) {
    plan = random_split_plan(rows, folds, repeats, seed);
  } else {
    std::vector<Fingerprint> fps;
    for (auto r : rows) fps.push_back(morgan_fingerprint(parse_smiles(ds.smiles[r])));
    plan = butina_split_plan(butina_cluster(fps, threshold), rows, folds, repeats, seed);
  }
  plan.dataset_hash = ds.hash();
  const auto records = run_repeated_cv(x, ds, plan, model, hp, derive_seed(seed, {0x6366}), ctx.threads);
  write_text(ctx.out / "split_plan.json", to_json(plan).dump() + "\n");
  write_text(ctx.out / "records.csv", records_to_csv(records));
  write_text(ctx.out / "records.json", records_to_json(records).dump(2) + "\n");
  ctx.notes["censored_excluded"] = ds.censored_count();
  ctx.notes["cells"] = folds * repeats;
}

inline std::vector<MetricRecord> gather_records(StageContext& ctx) {
  if (!ctx.config.contains("records") || !ctx.config["records"].is_array() || ctx.config["records"].empty())
    fail(ErrorCode::Config, "config needs a non-empty 'records' list");
  std::vector<MetricRecord> all;
  Json hashes = Json::array();
  for (const auto& p : ctx.config["records"]) {
    const std::string path = p.get<std::string>();
    if (!fs::exists(path)) fail(ErrorCode::Config, "records file does not exist: " + path);
    hashes.push_back({{"path", path}, {"hash", hash_path(path)}});
    const auto recs = load_records(path);
    all.insert(all.end(), recs.begin(), recs.end());
  }
  ctx.inputs["records"] = hashes;
  return all;
}

inline std::vector<std::string> chosen_models(StageContext& ctx, const std::vector<MetricRecord>& all) {
  if (!ctx.config.contains("models") || ctx.config["models"].empty()) ctx.config["models"] = record_models(all);
  return ctx.config["models"].get<std::vector<std::string>>();
}

inline void stage_compare(StageContext& ctx) {
  const auto all = gather_records(ctx);
  const auto models = chosen_models(ctx, all);
  const auto metric = setting<std::string>(ctx.config, "metric", "MAE");
  const auto rep = significance_report(all, models, metric);
  Json j = to_json(rep);
  // Paired t-tests alongside Tukey; the one-tailed p asks whether a beats b.
  const auto table = metric_table(all, models, metric);
  const Tail a_better = lower_is_better(metric) ? Tail::Less : Tail::Greater;
  j["paired_t"] = Json::array();
  for (std::size_t a = 0; a < models.size(); ++a)
    for (std::size_t b = a + 1; b < models.size(); ++b) {
      Json e{{"a", models[a]}, {"b", models[b]}, {"t", nullptr}, {"p_two_tailed", nullptr}, {"p_a_better", nullptr}};
      try {
        const auto two = paired_t(table[a], table[b], Tail::Two);
        e["t"] = two.t;
        e["df"] = two.df;
        e["p_two_tailed"] = two.p;
        e["p_a_better"] = paired_t(table[a], table[b], a_better).p;
      } catch (const Error& err) {
        if (err.code() != ErrorCode::ZeroVarianceDifferences) throw;
      }
      j["paired_t"].push_back(e);
    }
  write_text(ctx.out / "report.json", j.dump(2) + "\n");
  write_text(ctx.out / "report.csv", to_csv(rep));
}

inline void stage_report(StageContext& ctx) {
  const auto all = gather_records(ctx);
  const auto models = chosen_models(ctx, all);
  Json reports = Json::array();
  std::ostringstream md;
  md << "| model |";
  for (const auto& m : metric_names()) md << ' ' << m << " |";
  md << "\n|---|";
  for (std::size_t k = 0; k < metric_names().size(); ++k) md << "---|";
  md << "\n";
  std::map<std::string, std::map<std::string, std::string>> cells;
  char buf[64];
  for (const auto& metric : metric_names()) {
    SignificanceReport rep;
    try {
      rep = significance_report(all, models, metric);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::IncompleteTable) throw;
      reports.push_back({{"metric", metric}, {"error", e.what()}});
      continue;
    }
    reports.push_back(to_json(rep));
    for (const auto& s : rep.models) {
      std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", s.mean, s.ci_high - s.mean);
      cells[s.model][metric] = buf;
    }
  }
  for (const auto& m : models) {
    md << "| " << m << " |";
    for (const auto& metric : metric_names()) {
      auto it = cells[m].find(metric);
      md << ' ' << (it == cells[m].end() ? std::string("n/a") : it->second) << " |";
    }
    md << "\n";
  }
  write_text(ctx.out / "report.json", reports.dump(2) + "\n");
  write_text(ctx.out / "summary.md", md.str());
}

inline const std::map<std::string, std::function<void(StageContext&)>>& stages() {
  static const std::map<std::string, std::function<void(StageContext&)>> table{
      {"toy", stage_toy},         {"tokenizer-train", stage_tokenizer}, {"subset", stage_subset},
      {"pretrain", stage_pretrain}, {"adapt", stage_adapt},             {"embed", stage_embed},
      {"evaluate", stage_evaluate}, {"compare", stage_compare},         {"report", stage_report}};
  return table;
}

/// Relative path -> hash for every file the stage produced.
inline Json output_hashes(const fs::path& out) {
  Json j = Json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(fs::relative(e.path(), out));
  std::sort(files.begin(), files.end());
  for (const auto& f : files) j[f.generic_string()] = hash_file((out / f).string());
  return j;
}

}  // namespace detail

/// Runs `stage` with `config` (which must name "out") and writes
/// out/manifest.json. Returns the manifest.
inline Json run_stage(const std::string& stage, Json config, std::size_t threads = 1) {
  const auto& table = detail::stages();
  const auto it = table.find(stage);
  if (it == table.end()) fail(ErrorCode::Config, "unknown stage '" + stage + "'");
  if (!config.is_object()) fail(ErrorCode::Config, "stage config must be a JSON object");
  if (!config.contains("out") || !config["out"].is_string() || config["out"].get<std::string>().empty())
    fail(ErrorCode::Config, "config needs 'out'");
  detail::StageContext ctx;
  ctx.config = std::move(config);
  ctx.out = ctx.config["out"].get<std::string>();
  ctx.threads = std::max<std::size_t>(1, threads);
  fs::create_directories(ctx.out);
  it->second(ctx);

  Json m;
  m["format"] = kRunManifestFormat;
  m["stage"] = stage;
  m["config"] = ctx.config;
  m["inputs"] = ctx.inputs;
  m["outputs"] = detail::output_hashes(ctx.out);
  m["notes"] = ctx.notes;
  detail::write_text(ctx.out / "manifest.json", m.dump(2) + "\n");
  return m;
}

inline Json load_run_manifest(const fs::path& dir) {
  const fs::path p = fs::is_directory(dir) ? dir / "manifest.json" : dir;
  Json m;
  try {
    m = Json::parse(read_file(p.string()));
  } catch (const Json::parse_error& e) {
    fail(ErrorCode::Format, p.string() + ": " + e.what());
  }
  if (m.value("format", "") != kRunManifestFormat) fail(ErrorCode::Format, p.string() + " is not a run manifest");
  return m;
}

struct ReplayResult {
  Json manifest;
  std::vector<std::string> mismatched;  // outputs whose hash differs or that are missing/extra
  bool identical() const { return mismatched.empty(); }
};

/// Reruns the stage recorded in `manifest_dir` into `out` after checking the
/// inputs still hash the same, then compares every output hash.
inline ReplayResult replay_stage(const fs::path& manifest_dir, const fs::path& out, std::size_t threads = 1) {
  const Json m = load_run_manifest(manifest_dir);
  for (const auto& [key, value] : m["inputs"].items()) {
    const auto entries = value.is_array() ? value : Json::array({value});
    for (const auto& e : entries) {
      const std::string path = e["path"].get<std::string>();
      if (!fs::exists(path)) fail(ErrorCode::Config, "replay input missing: " + path);
      if (detail::hash_path(path) != e["hash"].get<std::string>())
        fail(ErrorCode::DegenerateData, "replay input changed since the run: " + path);
    }
  }
  if (fs::weakly_canonical(out) == fs::weakly_canonical(manifest_dir))
    fail(ErrorCode::Config, "replay output must differ from the recorded run directory");
  Json cfg = m["config"];
  cfg["out"] = out.string();
  ReplayResult r;
  r.manifest = run_stage(m["stage"].get<std::string>(), cfg, threads);
  const Json& before = m["outputs"];
  const Json& after = r.manifest["outputs"];
  std::set<std::string> keys;
  for (const auto& [k, v] : before.items()) keys.insert(k);
  for (const auto& [k, v] : after.items()) keys.insert(k);
  for (const auto& k : keys)
    if (!before.contains(k) || !after.contains(k) || before[k] != after[k]) r.mismatched.push_back(k);
  return r;
}

}  // namespace molda

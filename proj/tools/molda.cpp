// SPDX-License-Identifier: Apache-2.0
// Command-line front end: one subcommand per pipeline stage plus replay.

#include <CLI11.hpp>

#include <iostream>
#include <list>
#include <map>
#include <string>

#include "molda/pipeline.hpp"

namespace {

using molda::Json;

enum class Kind { Text, Integer, Number, List };

struct Flag {
  std::string pointer;  // JSON pointer into the stage config
  Kind kind;
  std::string value;
  CLI::Option* option = nullptr;
};

struct Stage {
  std::string name;
  CLI::App* app = nullptr;
  std::string config_path;
  std::list<Flag> flags;

  void flag(const std::string& name, const std::string& pointer, Kind kind, const std::string& help) {
    flags.push_back({pointer, kind, {}, nullptr});
    flags.back().option = app->add_option(name, flags.back().value, help);
  }
};

Json typed(const Flag& f) {
  try {
    switch (f.kind) {
      case Kind::Text: return f.value;
      case Kind::Integer: return std::stoull(f.value);
      case Kind::Number: return std::stod(f.value);
      case Kind::List: {
        Json arr = Json::array();
        std::string item;
        for (char c : f.value + ",") {
          if (c == ',') {
            if (!item.empty()) arr.push_back(item);
            item.clear();
          } else {
            item += c;
          }
        }
        return arr;
      }
    }
  } catch (const std::exception&) {
    molda::fail(molda::ErrorCode::Config, "bad value '" + f.value + "' for " + f.pointer);
  }
  return nullptr;
}

/// Config file first, then every flag given on the command line.
Json stage_config(const Stage& s) {
  Json cfg = Json::object();
  if (!s.config_path.empty()) {
    try {
      cfg = Json::parse(molda::read_file(s.config_path));
    } catch (const Json::parse_error& e) {
      molda::fail(molda::ErrorCode::Config, s.config_path + ": " + e.what());
    } catch (const molda::Error& e) {
      molda::fail(molda::ErrorCode::Config, e.what());
    }
    if (!cfg.is_object()) molda::fail(molda::ErrorCode::Config, s.config_path + " must hold a JSON object");
  }
  for (const auto& f : s.flags)
    if (f.option->count() > 0) cfg[Json::json_pointer(f.pointer)] = typed(f);
  return cfg;
}

int exit_code(const molda::Error& e) {
  switch (e.category()) {
    case molda::ErrorCategory::Config: return 2;
    case molda::ErrorCategory::Numeric: return 4;
    case molda::ErrorCategory::Data: return 3;
  }
  return 3;
}

void train_flags(Stage& s) {
  s.flag("--objective", "/train/objective", Kind::Text, "mlm, mtr or cl");
  s.flag("--epochs", "/train/epochs", Kind::Integer, "training epochs");
  s.flag("--batch-size", "/train/batch_size", Kind::Integer, "sequences per step");
  s.flag("--lr", "/train/peak_lr", Kind::Number, "peak learning rate");
  s.flag("--train-seed", "/train/seed", Kind::Integer, "training seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"molda: molecular encoder pre-training, domain adaptation and evaluation"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads for embedding and forest fitting")->check(CLI::PositiveNumber);

  std::list<Stage> stages;
  auto add = [&](const std::string& name, const std::string& help) -> Stage& {
    stages.push_back({name, app.add_subcommand(name, help), {}, {}});
    Stage& s = stages.back();
    s.app->add_option("-c,--config", s.config_path, "JSON config; flags override its values");
    s.flag("-o,--out", "/out", Kind::Text, "output directory");
    return s;
  };

  auto& toy = add("toy", "generate the bundled toy corpus and labeled dataset");
  toy.flag("--corpus-size", "/corpus_size", Kind::Integer, "molecules in the corpus");
  toy.flag("--dataset-size", "/dataset_size", Kind::Integer, "rows in the labeled dataset");
  toy.flag("--seed", "/seed", Kind::Integer, "generator seed");

  auto& tok = add("tokenizer-train", "train a WordPiece vocabulary");
  tok.flag("--corpus", "/corpus", Kind::Text, "SMILES file, one per line");
  tok.flag("--vocab-size", "/vocab_size", Kind::Integer, "maximum vocabulary size");
  tok.flag("--min-frequency", "/min_frequency", Kind::Integer, "minimum pair frequency for a merge");

  auto& sub = add("subset", "cluster-proportional corpus subset");
  sub.flag("--corpus", "/corpus", Kind::Text, "SMILES file");
  sub.flag("--fraction", "/fraction", Kind::Number, "fraction to keep from every cluster");
  sub.flag("--method", "/method", Kind::Text, "bitbirch_like or butina");
  sub.flag("--threshold", "/threshold", Kind::Number, "Tanimoto similarity threshold");
  sub.flag("--seed", "/seed", Kind::Integer, "sampling seed");

  auto& pre = add("pretrain", "pre-train an encoder");
  pre.flag("--corpus", "/corpus", Kind::Text, "SMILES file");
  pre.flag("--vocab", "/vocab", Kind::Text, "vocab.txt");
  pre.flag("--preset", "/preset", Kind::Text, "desk or full");
  pre.flag("--encoder-seed", "/encoder/seed", Kind::Integer, "initialization seed");
  pre.flag("--dropout", "/encoder/dropout", Kind::Number, "encoder dropout");
  train_flags(pre);

  auto& ada = add("adapt", "domain-adapt a checkpoint on unlabeled domain molecules");
  ada.flag("--checkpoint", "/checkpoint", Kind::Text, "checkpoint directory");
  ada.flag("--corpus", "/corpus", Kind::Text, "domain SMILES file");
  ada.flag("--dataset", "/dataset", Kind::Text, "labeled CSV whose molecules form the domain corpus");
  ada.flag("--dataset-config", "/dataset_config", Kind::Text, "dataset JSON");
  train_flags(ada);

  auto& emb = add("embed", "embed a labeled dataset with a frozen checkpoint");
  emb.flag("--checkpoint", "/checkpoint", Kind::Text, "checkpoint directory");
  emb.flag("--dataset", "/dataset", Kind::Text, "labeled CSV");
  emb.flag("--dataset-config", "/dataset_config", Kind::Text, "dataset JSON");
  emb.flag("--pooling", "/pooling", Kind::Text, "cls or mean");

  auto& ev = add("evaluate", "repeated cross-validation of a random forest on one representation");
  ev.flag("--dataset", "/dataset", Kind::Text, "labeled CSV");
  ev.flag("--dataset-config", "/dataset_config", Kind::Text, "dataset JSON");
  ev.flag("--representation", "/representation", Kind::Text, "checkpoint, descriptors or fingerprint");
  ev.flag("--checkpoint", "/checkpoint", Kind::Text, "checkpoint directory");
  ev.flag("--pooling", "/pooling", Kind::Text, "cls or mean");
  ev.flag("--model", "/model", Kind::Text, "model id written to the records");
  ev.flag("--splits", "/split", Kind::Text, "random or butina");
  ev.flag("--folds", "/folds", Kind::Integer, "folds per repeat");
  ev.flag("--repeats", "/repeats", Kind::Integer, "repeats");
  ev.flag("--seed", "/seed", Kind::Integer, "split and forest seed");
  ev.flag("--trees", "/n_trees", Kind::Integer, "trees per forest");

  auto& cmp = add("compare", "ANOVA-RM, Tukey HSD and paired t-tests for one metric");
  cmp.flag("--records", "/records", Kind::List, "comma-separated record files (CSV or JSON)");
  cmp.flag("--models", "/models", Kind::List, "comma-separated model ids");
  cmp.flag("--metric", "/metric", Kind::Text, "MAE, RMSE, R2, Pearson or Spearman");

  auto& rep = add("report", "summary table and significance reports for every metric");
  rep.flag("--records", "/records", Kind::List, "comma-separated record files");
  rep.flag("--models", "/models", Kind::List, "comma-separated model ids");

  std::string replay_dir, replay_out;
  auto* replay = app.add_subcommand("replay", "rerun a stage from its manifest and compare outputs");
  replay->add_option("run", replay_dir, "directory holding manifest.json")->required();
  replay->add_option("-o,--out", replay_out, "fresh output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (replay->parsed()) {
      const auto r = molda::replay_stage(replay_dir, replay_out, threads);
      if (r.identical()) {
        std::cout << "replay of " << r.manifest["stage"].get<std::string>() << " matches: "
                  << r.manifest["outputs"].size() << " outputs identical\n";
        return 0;
      }
      std::cerr << "replay differs in:";
      for (const auto& f : r.mismatched) std::cerr << ' ' << f;
      std::cerr << "\n";
      return 3;
    }
    for (const auto& s : stages) {
      if (!s.app->parsed()) continue;
      const Json m = molda::run_stage(s.name, stage_config(s), threads);
      std::cout << s.name << ": wrote " << m["outputs"].size() << " files to " << m["config"]["out"].get<std::string>()
                << "\n";
      if (!m["notes"].empty()) std::cout << m["notes"].dump() << "\n";
    }
  } catch (const molda::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Encoder checkpoints on disk:
//
//   <dir>/manifest.json       config, vocabulary hash, scaler, training state,
//                             tensor index
//   <dir>/vocab.txt
//   <dir>/params/<name>.f32   raw little-endian float32, row-major
//   <dir>/adam/{m,v}/<name>.f32
//
// The Adam moments are stored so an interrupted run resumes bit for bit.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "molda/encoder.hpp"
#include "molda/error.hpp"
#include "molda/features.hpp"
#include "molda/hash.hpp"
#include "molda/objectives.hpp"
#include "molda/tensor.hpp"
#include "molda/tokenizer.hpp"

namespace molda {

struct TrainConfig {
  Objective objective = Objective::Mlm;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double peak_lr = 3e-5;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;
  MaskingConfig masking;
  double head_dropout = 0.1;
  Pooling mtr_pooling = Pooling::Cls;
  Pooling cl_pooling = Pooling::Mean;
  double cl_scale = 1.0;
  /// Global gradient-norm clip; 0 disables.
  double max_grad_norm = 1.0;
  /// Descriptors used as MTR targets; empty means all.
  std::vector<std::string> descriptors;

  void validate() const {
    if (batch_size == 0) fail(ErrorCode::Config, "batch_size must be positive");
    if (!(peak_lr >= 0.0) || !(warmup_fraction >= 0.0 && warmup_fraction <= 1.0))
      fail(ErrorCode::Config, "invalid learning-rate schedule");
    if (!(masking.fraction > 0.0 && masking.fraction <= 1.0) || masking.mask_prob < 0 || masking.random_prob < 0 ||
        masking.mask_prob + masking.random_prob > 1.0)
      fail(ErrorCode::Config, "invalid masking probabilities");
    if (!(head_dropout >= 0.0 && head_dropout < 1.0)) fail(ErrorCode::Config, "head_dropout must lie in [0, 1)");
    if (!(cl_scale > 0.0)) fail(ErrorCode::Config, "cl_scale must be positive");
    if (!(max_grad_norm >= 0.0)) fail(ErrorCode::Config, "max_grad_norm must be non-negative");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"objective", to_string(c.objective)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"peak_lr", c.peak_lr},
          {"warmup_fraction", c.warmup_fraction},
          {"seed", c.seed},
          {"mask_fraction", c.masking.fraction},
          {"mask_prob", c.masking.mask_prob},
          {"random_prob", c.masking.random_prob},
          {"head_dropout", c.head_dropout},
          {"mtr_pooling", to_string(c.mtr_pooling)},
          {"cl_pooling", to_string(c.cl_pooling)},
          {"cl_scale", c.cl_scale},
          {"max_grad_norm", c.max_grad_norm},
          {"descriptors", c.descriptors}};
}

/// Missing keys keep their defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    if (j.contains("objective")) c.objective = objective_from(j["objective"].get<std::string>());
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.seed = j.value("seed", c.seed);
    c.masking.fraction = j.value("mask_fraction", c.masking.fraction);
    c.masking.mask_prob = j.value("mask_prob", c.masking.mask_prob);
    c.masking.random_prob = j.value("random_prob", c.masking.random_prob);
    c.head_dropout = j.value("head_dropout", c.head_dropout);
    if (j.contains("mtr_pooling")) c.mtr_pooling = pooling_from(j["mtr_pooling"].get<std::string>());
    if (j.contains("cl_pooling")) c.cl_pooling = pooling_from(j["cl_pooling"].get<std::string>());
    c.cl_scale = j.value("cl_scale", c.cl_scale);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.descriptors = j.value("descriptors", c.descriptors);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ScalerStats& s) {
  return {{"input_names", s.input_names}, {"kept", s.kept}, {"dropped", s.dropped}, {"mean", s.mean}, {"std", s.std}};
}

inline ScalerStats scaler_from_json(const nlohmann::json& j) {
  try {
    ScalerStats s;
    s.input_names = j.at("input_names").get<std::vector<std::string>>();
    s.kept = j.at("kept").get<std::vector<std::size_t>>();
    s.dropped = j.at("dropped").get<std::vector<std::size_t>>();
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("scaler: ") + e.what());
  }
}

struct Checkpoint {
  EncoderConfig config;
  Vocabulary vocab;
  ParamSet<float> params;
  std::optional<ScalerStats> scaler;
  std::optional<AdamState<float>> adam;
  std::optional<TrainConfig> train;
  std::string phase = "init";  // init | pretrain | adapt
  std::uint64_t step = 0;
  std::uint64_t total_steps = 0;
  std::string corpus_hash;
  /// Earlier phases, oldest first (phase, objective, steps, corpus hash).
  nlohmann::json lineage = nlohmann::json::array();

  bool complete() const { return step >= total_steps; }

  /// Encoder tensors only (heads excluded).
  ParamSet<float> encoder_params() const {
    auto p = params;
    p.erase_prefix("mlm.");
    p.erase_prefix("mtr.");
    return p;
  }
};

namespace detail {

inline void write_f32(const std::filesystem::path& path, const std::vector<float>& data) {
  std::string bytes(data.size() * 4, '\0');
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(data[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((u >> (8 * b)) & 0xffU);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "short write to " + path.string());
}

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected) {
  const std::string bytes = read_file(path.string());
  if (bytes.size() != expected * 4) fail(ErrorCode::Format, path.string() + " has the wrong size");
  std::vector<float> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b)
      u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + static_cast<std::size_t>(b)])) << (8 * b);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

inline std::string tensor_hash(const std::vector<float>& data) {
  Fnv1a h;
  h.update(data.data(), data.size() * sizeof(float));
  return hex64(h.digest());
}

inline nlohmann::json write_tensors(const ParamSet<float>& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < p.count(); ++i) {
    write_f32(dir / (p.name(i) + ".f32"), p.at(i).data);
    index.push_back({{"name", p.name(i)}, {"shape", p.at(i).shape}, {"hash", tensor_hash(p.at(i).data)}});
  }
  return index;
}

inline ParamSet<float> read_tensors(const nlohmann::json& index, const std::filesystem::path& dir) {
  ParamSet<float> p;
  for (const auto& t : index) {
    const auto name = t.at("name").get<std::string>();
    auto& tensor = p.add(name, t.at("shape").get<std::vector<std::size_t>>());
    tensor.data = read_f32(dir / (name + ".f32"), tensor.size());
    if (tensor_hash(tensor.data) != t.at("hash").get<std::string>())
      fail(ErrorCode::Format, "hash mismatch for tensor " + name);
  }
  return p;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = "molda-checkpoint-1";
  m["config"] = to_json(ck.config);
  m["vocab_hash"] = ck.vocab.hash();
  m["phase"] = ck.phase;
  m["step"] = ck.step;
  m["total_steps"] = ck.total_steps;
  m["corpus_hash"] = ck.corpus_hash;
  m["lineage"] = ck.lineage;
  m["parameter_count"] = ck.encoder_params().scalar_count();
  if (ck.scaler) m["scaler"] = to_json(*ck.scaler);
  if (ck.train) m["train"] = to_json(*ck.train);
  ck.vocab.save((dir / "vocab.txt").string());
  m["params"] = detail::write_tensors(ck.params, dir / "params");
  if (ck.adam) {
    m["adam"] = {{"step", ck.adam->step},
                 {"beta1", ck.adam->hyper.beta1},
                 {"beta2", ck.adam->hyper.beta2},
                 {"eps", ck.adam->hyper.eps},
                 {"m", detail::write_tensors(ck.adam->m, dir / "adam" / "m")},
                 {"v", detail::write_tensors(ck.adam->v, dir / "adam" / "v")}};
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) fail(ErrorCode::Io, "cannot write manifest in " + dir.string());
  out << m.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) fail(ErrorCode::Io, "no checkpoint manifest in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(manifest_path.string()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("checkpoint manifest: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = encoder_config_from_json(m.at("config"));
    ck.vocab = Vocabulary::load((dir / "vocab.txt").string());
    if (ck.vocab.hash() != m.at("vocab_hash").get<std::string>()) fail(ErrorCode::Format, "vocabulary hash mismatch");
    ck.phase = m.at("phase").get<std::string>();
    ck.step = m.at("step").get<std::uint64_t>();
    ck.total_steps = m.at("total_steps").get<std::uint64_t>();
    ck.corpus_hash = m.value("corpus_hash", "");
    ck.lineage = m.value("lineage", nlohmann::json::array());
    if (m.contains("scaler")) ck.scaler = scaler_from_json(m["scaler"]);
    if (m.contains("train")) ck.train = train_config_from_json(m["train"]);
    ck.params = detail::read_tensors(m.at("params"), dir / "params");
    if (m.contains("adam")) {
      const auto& a = m["adam"];
      AdamState<float> st;
      st.step = a.at("step").get<std::uint64_t>();
      st.hyper = {a.at("beta1").get<double>(), a.at("beta2").get<double>(), a.at("eps").get<double>()};
      st.m = detail::read_tensors(a.at("m"), dir / "adam" / "m");
      st.v = detail::read_tensors(a.at("v"), dir / "adam" / "v");
      ck.adam = std::move(st);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("checkpoint manifest: ") + e.what());
  }
  return ck;
}

}  // namespace molda

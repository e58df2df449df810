// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pre-training and domain-adaptation loops. Every random draw in a step
// (row order, masking, dropout, enumeration, negatives) comes from a stream
// derived from (seed, epoch, batch), so a run stopped at any step and resumed
// from its checkpoint is bitwise identical to an unbroken run.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "molda/checkpoint.hpp"
#include "molda/encoder.hpp"
#include "molda/features.hpp"
#include "molda/hash.hpp"
#include "molda/molgraph.hpp"
#include "molda/objectives.hpp"

namespace molda {

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> step_loss;   // steps run in this call
  std::vector<double> epoch_loss;  // mean step loss per completed epoch in this call
};

inline std::string corpus_hash(const std::vector<std::string>& smiles) {
  Fnv1a h;
  for (const auto& s : smiles) {
    h.update(s);
    h.update("\n");
  }
  return hex64(h.digest());
}

/// Descriptor rows for MTR targets, restricted to `names` (all when empty).
inline std::vector<DescriptorVector> descriptor_rows(const std::vector<std::string>& smiles,
                                                     const std::vector<std::string>& names) {
  std::vector<DescriptorVector> rows;
  rows.reserve(smiles.size());
  for (const auto& s : smiles) {
    auto d = compute_descriptors(parse_smiles(s));
    rows.push_back(names.empty() ? std::move(d) : select_descriptors(d, names));
  }
  return rows;
}

inline Tensor<double> standardized_targets(const std::vector<DescriptorVector>& rows, const ScalerStats& scaler) {
  Tensor<double> t({rows.size(), scaler.kept.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto v = apply_scaler(rows[i], scaler);
    std::copy(v.values.begin(), v.values.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * scaler.kept.size()));
  }
  return t;
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
template <class T>
double clip_grad_norm(ParamSet<T>& grads, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.count(); ++i)
    for (T v : grads.at(i).data) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  const double coef = max_norm / (norm + 1e-6);
  if (coef < 1.0)
    for (std::size_t i = 0; i < grads.count(); ++i)
      for (T& v : grads.at(i).data) v = static_cast<T>(static_cast<double>(v) * coef);
  return norm;
}

namespace detail {

struct PreparedCorpus {
  std::vector<std::vector<int>> encoded;
  std::vector<Molecule> mols;
  std::vector<std::string> canonical;
  Tensor<double> targets;
};

inline PreparedCorpus prepare_corpus(const Checkpoint& ck, const std::vector<std::string>& smiles) {
  const TrainConfig& cfg = *ck.train;
  PreparedCorpus p;
  if (cfg.objective == Objective::Cl) {
    for (const auto& s : smiles) {
      p.mols.push_back(parse_smiles(s));
      p.canonical.push_back(canonical_smiles(p.mols.back()));
    }
    return p;
  }
  for (const auto& s : smiles) p.encoded.push_back(encode(s, ck.vocab, ck.config.max_len));
  if (cfg.objective == Objective::Mtr) {
    if (!ck.scaler) fail(ErrorCode::Config, "MTR training needs scaler statistics");
    p.targets = standardized_targets(descriptor_rows(smiles, cfg.descriptors), *ck.scaler);
  }
  return p;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {0x65706f6368, epoch}));
  rng.shuffle(order);
  return order;
}

inline void add_head(Checkpoint& ck, std::size_t outputs) {
  const auto& cfg = *ck.train;
  if (cfg.objective == Objective::Mlm && !ck.params.contains("mlm.w"))
    init_mlm_head(ck.params, ck.config.hidden, ck.config.vocab_size, cfg.seed);
  if (cfg.objective == Objective::Mtr) init_mtr_head(ck.params, ck.config.hidden, outputs, cfg.seed);
}

inline ScalerStats fit_corpus_scaler(const std::vector<std::string>& smiles, const TrainConfig& cfg) {
  const auto rows = descriptor_rows(smiles, cfg.descriptors);
  auto s = fit_scaler(rows);
  if (s.kept.empty()) fail(ErrorCode::ZeroVariance, "every descriptor is constant on the corpus");
  return s;
}

}  // namespace detail

/// One loss evaluation with gradients on a batch of corpus rows.
inline LossOutput training_step_loss(const Checkpoint& ck, const Encoder<float>& enc,
                                     const detail::PreparedCorpus& data, const std::vector<std::size_t>& rows,
                                     std::uint64_t step_seed, Mode mode, ParamSet<float>* grads) {
  const TrainConfig& cfg = *ck.train;
  switch (cfg.objective) {
    case Objective::Mlm: {
      std::vector<std::vector<int>> enc_rows;
      for (auto r : rows) enc_rows.push_back(data.encoded[r]);
      const auto mb = apply_masking(make_batch(enc_rows), ck.config.vocab_size, derive_seed(step_seed, {1}), cfg.masking);
      return mlm_loss(enc, ck.params, mb, mode, derive_seed(step_seed, {2}), grads);
    }
    case Objective::Mtr: {
      std::vector<std::vector<int>> enc_rows;
      MtrBatch mb;
      const std::size_t D = data.targets.cols();
      mb.targets = Tensor<double>({rows.size(), D});
      for (std::size_t k = 0; k < rows.size(); ++k) {
        enc_rows.push_back(data.encoded[rows[k]]);
        std::copy_n(&data.targets.data[rows[k] * D], D, &mb.targets.data[k * D]);
      }
      mb.batch = make_batch(enc_rows);
      return mtr_loss(enc, ck.params, mb, mode, derive_seed(step_seed, {2}), grads, cfg.head_dropout, cfg.mtr_pooling);
    }
    case Objective::Cl: {
      const auto tb = make_triple_batch(data.mols, data.canonical, rows, ck.vocab, ck.config.max_len,
                                        derive_seed(step_seed, {3}));
      return cl_loss(enc, ck.params, tb, mode, derive_seed(step_seed, {2}), grads, cfg.cl_pooling, cfg.cl_scale);
    }
  }
  return {};
}

/// Runs (or continues) the phase recorded in `ck`. `stop_after` > 0 halts
/// once that many steps of the phase have been taken.
inline TrainResult run_training(Checkpoint ck, const std::vector<std::string>& corpus, std::ostream* log = nullptr,
                                std::uint64_t stop_after = 0) {
  if (!ck.train) fail(ErrorCode::Config, "checkpoint has no training configuration");
  const TrainConfig cfg = *ck.train;
  if (ck.corpus_hash != corpus_hash(corpus)) fail(ErrorCode::Config, "corpus differs from the one the run started on");
  const Encoder<float> enc(ck.config);
  const auto data = detail::prepare_corpus(ck, corpus);
  const std::size_t n = corpus.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  ck.total_steps = cfg.epochs * per_epoch;
  if (!ck.adam) ck.adam = AdamState<float>::for_params(ck.params);
  auto grads = ck.params.zeros_like();

  TrainResult result;
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  double epoch_sum = 0.0;
  std::size_t epoch_steps = 0;
  while (ck.step < ck.total_steps && (stop_after == 0 || ck.step < stop_after)) {
    const std::size_t epoch = ck.step / per_epoch, b = ck.step % per_epoch;
    if (epoch != order_epoch) {
      order = detail::epoch_order(n, cfg.seed, epoch);
      order_epoch = epoch;
    }
    const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(b * cfg.batch_size),
                                        order.begin() + static_cast<std::ptrdiff_t>(std::min(n, (b + 1) * cfg.batch_size)));
    grads.zero();
    const auto out = training_step_loss(ck, enc, data, rows, derive_seed(cfg.seed, {epoch, b}), Mode::Train, &grads);
    if (!std::isfinite(out.loss) || !grads.all_finite())
      fail(ErrorCode::NonFinite, "non-finite loss or gradient at step " + std::to_string(ck.step));
    if (cfg.max_grad_norm > 0.0) clip_grad_norm(grads, cfg.max_grad_norm);
    const double lr = lr_at(static_cast<double>(ck.step), static_cast<double>(ck.total_steps), cfg.peak_lr,
                            cfg.warmup_fraction);
    adam_step(ck.params, grads, *ck.adam, lr);
    if (!ck.params.all_finite()) fail(ErrorCode::NonFinite, "non-finite parameters at step " + std::to_string(ck.step));
    ck.step += 1;
    result.step_loss.push_back(out.loss);
    epoch_sum += out.loss;
    ++epoch_steps;
    if (b + 1 == per_epoch) {
      result.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));
      epoch_sum = 0.0;
      epoch_steps = 0;
    }
    if (log) {
      nlohmann::json line{{"step", ck.step}, {"epoch", epoch}, {"lr", lr}, {"loss", out.loss}};
      if (!std::isnan(out.accuracy)) line["accuracy"] = out.accuracy;
      *log << line.dump() << "\n";
    }
  }
  result.checkpoint = std::move(ck);
  return result;
}

inline void record_phase(Checkpoint& ck) {
  if (ck.phase == "init" || !ck.train) return;
  ck.lineage.push_back({{"phase", ck.phase},
                        {"objective", to_string(ck.train->objective)},
                        {"steps", ck.step},
                        {"corpus_hash", ck.corpus_hash}});
}

/// Fresh encoder (plus head) ready for `run_training`. The encoder's
/// vocabulary size is taken from `vocab`.
inline Checkpoint start_pretraining(const std::vector<std::string>& corpus, const Vocabulary& vocab,
                                    EncoderConfig config, const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) fail(ErrorCode::EmptyCorpus, "pre-training corpus is empty");
  config.vocab_size = vocab.size();
  Checkpoint ck;
  ck.config = config;
  ck.vocab = vocab;
  ck.params = Encoder<float>(config).init_parameters();
  ck.train = cfg;
  ck.phase = "pretrain";
  ck.corpus_hash = corpus_hash(corpus);
  std::size_t outputs = 0;
  if (cfg.objective == Objective::Mtr) {
    ck.scaler = detail::fit_corpus_scaler(corpus, cfg);
    outputs = ck.scaler->kept.size();
  }
  detail::add_head(ck, outputs);
  const std::size_t per_epoch = (corpus.size() + cfg.batch_size - 1) / cfg.batch_size;
  ck.total_steps = cfg.epochs * per_epoch;
  return ck;
}

inline TrainResult pretrain(const std::vector<std::string>& corpus, const Vocabulary& vocab,
                            const EncoderConfig& config, const TrainConfig& cfg, std::ostream* log = nullptr) {
  return run_training(start_pretraining(corpus, vocab, config, cfg), corpus, log);
}

/// Continues training an existing encoder on a domain corpus with a new
/// schedule over the domain steps. MTR re-fits the scaler on the domain
/// corpus and starts a fresh head; MLM keeps an existing vocabulary head.
inline Checkpoint start_domain_adaptation(Checkpoint ck, const std::vector<std::string>& corpus,
                                          const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) fail(ErrorCode::EmptyDomainCorpus, "domain corpus is empty");
  record_phase(ck);
  if (cfg.objective != Objective::Mlm) ck.params.erase_prefix("mlm.");
  ck.params.erase_prefix("mtr.");
  ck.train = cfg;
  ck.phase = "adapt";
  ck.step = 0;
  ck.adam.reset();
  ck.corpus_hash = corpus_hash(corpus);
  std::size_t outputs = 0;
  if (cfg.objective == Objective::Mtr) {
    ck.scaler = detail::fit_corpus_scaler(corpus, cfg);
    outputs = ck.scaler->kept.size();
  }
  detail::add_head(ck, outputs);
  const std::size_t per_epoch = (corpus.size() + cfg.batch_size - 1) / cfg.batch_size;
  ck.total_steps = cfg.epochs * per_epoch;
  return ck;
}

inline TrainResult domain_adapt(const Checkpoint& ck, const std::vector<std::string>& corpus, const TrainConfig& cfg,
                                std::ostream* log = nullptr) {
  return run_training(start_domain_adaptation(ck, corpus, cfg), corpus, log);
}

/// Loss of the checkpoint's objective over a corpus in eval mode, in batches
/// of the configured size with the given seed for masking and triples.
inline LossOutput evaluate_objective(const Checkpoint& ck, const std::vector<std::string>& corpus, std::uint64_t seed) {
  if (!ck.train) fail(ErrorCode::Config, "checkpoint has no training configuration");
  const Encoder<float> enc(ck.config);
  const auto data = detail::prepare_corpus(ck, corpus);
  const std::size_t bs = ck.train->batch_size;
  LossOutput total;
  double loss_sum = 0.0, acc_sum = 0.0;
  std::size_t batches = 0, acc_weight = 0;
  for (std::size_t start = 0; start < corpus.size(); start += bs) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(corpus.size(), start + bs); ++i) rows.push_back(i);
    const auto out = training_step_loss(ck, enc, data, rows, derive_seed(seed, {start}), Mode::Eval, nullptr);
    loss_sum += out.loss;
    ++batches;
    if (!std::isnan(out.accuracy)) {
      acc_sum += out.accuracy * static_cast<double>(out.count);
      acc_weight += out.count;
    }
    total.count += out.count;
  }
  total.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
  if (acc_weight) total.accuracy = acc_sum / static_cast<double>(acc_weight);
  return total;
}

}  // namespace molda

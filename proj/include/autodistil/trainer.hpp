#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autodistil/data.hpp"
#include "autodistil/distill.hpp"
#include "autodistil/error.hpp"
#include "autodistil/optim.hpp"
#include "autodistil/random.hpp"
#include "autodistil/searchspace.hpp"
#include "autodistil/supernet.hpp"

namespace autodistil {

enum class Objective { RelationKD, MLM };

inline Objective parse_objective(std::string_view s) {
  if (s == "relation_kd") return Objective::RelationKD;
  if (s == "mlm") return Objective::MLM;
  throw ValidationError("unknown objective '" + std::string(s) + "' (expected relation_kd|mlm)");
}

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t samples_per_step = 1;  // M sub-networks per optimizer update
  std::size_t batch_size = 128;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  Objective objective = Objective::RelationKD;
  LossWeights betas;
  LayerStrategy strategy = LayerStrategy::Alternate;
  double mlm_rate = 0.15;
  bool heldout_each_epoch = true;

  void check(std::int64_t max_pos) const {
    if (epochs < 1) throw ValidationError("train config: 'epochs' must be >= 1");
    if (samples_per_step < 1) throw ValidationError("train config: 'samples_per_step' must be >= 1");
    if (batch_size < 1) throw ValidationError("train config: 'batch_size' must be >= 1");
    if (seq_len < 1 || static_cast<std::int64_t>(seq_len) > max_pos)
      throw ValidationError("train config: 'seq_len' " + std::to_string(seq_len) + " must lie in [1, " +
                            std::to_string(max_pos) + "]");
    betas.check();
  }
};

struct StepRecord {
  std::size_t step = 0;
  std::vector<std::string> archs;
  double loss = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double heldout_loss = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;

  /// One JSON object per line: step records, then epoch records.
  std::string to_jsonl() const {
    std::string out;
    for (const auto& s : steps)
      out += nlohmann::json{{"step", s.step}, {"archs", s.archs}, {"loss", s.loss}}.dump() + "\n";
    for (const auto& e : epochs) out += nlohmann::json{{"epoch", e.epoch}, {"heldout_loss", e.heldout_loss}}.dump() + "\n";
    return out;
  }
};

/// Uniform draw over enumerate(space), decoded from a single index.
inline ArchConfig sample_arch(Rng& rng, const SubspaceSpec& space) {
  std::uint64_t idx = rng.below(space.size());
  const auto pick = [&idx](const FactorRange& r) {
    const std::uint64_t n = r.count();
    const auto i = static_cast<std::int64_t>(idx % n);
    idx /= n;
    return r.lo + r.step * Rational(i);
  };
  const Rational h = pick(space.heads);
  const Rational r = pick(space.ratio);
  const Rational d = pick(space.hidden);
  const Rational l = pick(space.layers);
  return {l.num(), d.num(), r, h.num()};
}

/// Every student's attention width and the teacher's must split evenly into
/// the teacher's relation heads.
template <std::floating_point T>
void check_relation_heads(const SubspaceSpec& space, const TeacherModel<T>& teacher) {
  const auto ar = teacher.relation_heads;
  if (ar < 1) throw ValidationError("relation_heads must be >= 1");
  if (teacher.dims().attn_width() % ar != 0)
    throw ValidationError("relation_heads " + std::to_string(ar) + " does not divide teacher attention width " +
                          std::to_string(teacher.dims().attn_width()));
  for (const auto& h : space.heads.values())
    if ((h.num() * space.head_dim) % ar != 0)
      throw ValidationError("relation_heads " + std::to_string(ar) + " does not divide student attention width " +
                            std::to_string(h.num() * space.head_dim) + " of sub-space '" + space.name + "'");
}

template <std::floating_point T>
StudentView<T> teacher_view(const TeacherModel<T>& teacher) {
  // Views are read-only unless a forward pass asks for gradients.
  return full_view(const_cast<TransformerParams<T>&>(teacher.params));
}

template <std::floating_point T>
QkvTensors<T> teacher_qkv(const TeacherModel<T>& teacher, const TokenBatch& batch) {
  ForwardOptions opt;
  opt.qkv_only = true;
  auto out = run(teacher_view(teacher), batch, opt);
  return {std::move(out.q), std::move(out.k), std::move(out.v)};
}

/// Fixed heldout batches from the validation split (epoch-0 order).
inline std::vector<TokenBatch> heldout_batches(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed) {
  if (corpus.validation.size() < corpus.seq_len) throw InputError("validation split is empty");
  const std::size_t chunks = corpus.validation.size() / corpus.seq_len;
  BatchIterator it(corpus.validation, std::min(batch_size, chunks), corpus.seq_len, mix_seed(seed, 0xE7A1));
  return it.epoch(0);
}

/// Mean relation-distillation loss of each architecture over `val`. Pure:
/// reads the supernet and teacher, writes nothing.
template <std::floating_point T>
std::vector<double> evaluate_heldout(Supernet<T>& net, const TeacherModel<T>& teacher,
                                     const std::vector<TokenBatch>& val, const std::vector<ArchConfig>& archs,
                                     const LossWeights& betas = {}, LayerStrategy strategy = LayerStrategy::Alternate) {
  if (val.empty()) throw InputError("evaluate_heldout: empty validation set");
  const auto ar = static_cast<std::size_t>(teacher.relation_heads);
  std::vector<double> sums(archs.size(), 0.0);
  std::vector<StudentView<T>> views;
  views.reserve(archs.size());
  for (const auto& a : archs) views.push_back(extract(net, a, strategy, Phase::Extraction));
  ForwardOptions opt;
  opt.qkv_only = true;
  for (const auto& batch : val) {
    const auto rel = teacher_relations(teacher_qkv(teacher, batch), batch.batch, batch.seq, ar);
    for (std::size_t i = 0; i < views.size(); ++i) {
      nn::Tape<T> tape;
      auto f = forward(tape, views[i], batch, opt);
      auto loss = relation_kd_loss(tape, rel, {f.q, f.k, f.v}, batch.batch, batch.seq, ar, betas);
      sums[i] += static_cast<double>(tape.scalar(loss));
    }
  }
  for (auto& s : sums) s /= static_cast<double>(val.size());
  return sums;
}

/// Sub-network training: for every batch, clear gradients, accumulate the
/// loss gradients of M uniformly sampled sub-networks (each scaled by 1/M),
/// then apply one optimizer update to the shared store. The teacher is read
/// only.
template <std::floating_point T>
TrainLog train_supernet(Supernet<T>& net, const TeacherModel<T>& teacher, const Corpus& corpus,
                        const TrainConfig& cfg) {
  cfg.check(net.params.dims().max_pos);
  if (corpus.train.empty()) throw TrainingError("train_supernet: training split is empty");
  if (corpus.seq_len != cfg.seq_len)
    throw ValidationError("train config: 'seq_len' " + std::to_string(cfg.seq_len) + " differs from corpus chunking " +
                          std::to_string(corpus.seq_len));
  if (cfg.objective == Objective::RelationKD) check_relation_heads(net.spec, teacher);
  const auto ar = static_cast<std::size_t>(teacher.relation_heads);

  BatchIterator batches(corpus.train, cfg.batch_size, cfg.seq_len, mix_seed(cfg.seed, 1));
  Rng arch_rng(mix_seed(cfg.seed, 2));
  Optimizer<T> opt(cfg.optimizer, Optimizer<T>::all(net.params));
  std::vector<TokenBatch> val;
  std::vector<ArchConfig> all_archs;
  if (cfg.heldout_each_epoch && !corpus.validation.empty()) {
    val = heldout_batches(corpus, cfg.batch_size, cfg.seed);
    all_archs = enumerate(net.spec);
  }

  TrainLog log;
  const T inv_m = T{1} / static_cast<T>(cfg.samples_per_step);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : batches.epoch(epoch)) {
      net.params.zero_grad();
      std::optional<std::array<nn::Tensor<T>, 3>> rel;
      if (cfg.objective == Objective::RelationKD)
        rel = teacher_relations(teacher_qkv(teacher, batch), batch.batch, batch.seq, ar);
      StepRecord rec{step, {}, 0.0};
      for (std::size_t m = 0; m < cfg.samples_per_step; ++m) {
        const ArchConfig arch = sample_arch(arch_rng, net.spec);
        rec.archs.push_back(arch_id(arch));
        const auto view = extract(net, arch, cfg.strategy, Phase::Training);
        nn::Tape<T> tape;
        ForwardOptions fo;
        fo.requires_grad = true;
        typename nn::Tape<T>::Var loss;
        if (cfg.objective == Objective::RelationKD) {
          fo.qkv_only = true;
          auto f = forward(tape, view, batch, fo);
          loss = relation_kd_loss(tape, *rel, {f.q, f.k, f.v}, batch.batch, batch.seq, ar, cfg.betas);
        } else {
          const auto masked = mlm_mask(batch, cfg.mlm_rate, mix_seed(cfg.seed, 1000 + step * cfg.samples_per_step + m));
          fo.logits = true;
          auto f = forward(tape, view, masked.batch, fo);
          loss = mlm_loss(tape, *f.logits, masked.rows, masked.labels);
        }
        const double value = static_cast<double>(tape.scalar(loss));
        if (!std::isfinite(value))
          throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                              ", arch " + rec.archs.back() + ")");
        rec.loss += value / static_cast<double>(cfg.samples_per_step);
        tape.backward(loss, inv_m);
      }
      opt.step();
      log.steps.push_back(std::move(rec));
      ++step;
    }
    if (!val.empty()) {
      const auto losses = evaluate_heldout(net, teacher, val, all_archs, cfg.betas, resolve(cfg.strategy, Phase::Training));
      double mean = 0.0;
      for (double l : losses) mean += l;
      log.epochs.push_back({epoch, mean / static_cast<double>(losses.size())});
    }
  }
  return log;
}

struct TeacherPretrainConfig {
  std::size_t steps = 0;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double mask_rate = 0.15;
  std::uint64_t seed = 0;
};

/// Brief masked-language-model training of a full teacher. Returns the loss
/// of every step.
template <std::floating_point T>
std::vector<double> pretrain_teacher_mlm(TeacherModel<T>& teacher, const Corpus& corpus,
                                         const TeacherPretrainConfig& cfg) {
  std::vector<double> losses;
  if (cfg.steps == 0) return losses;
  const std::size_t chunks = corpus.train.size() / corpus.seq_len;
  BatchIterator it(corpus.train, std::min(cfg.batch_size, chunks), corpus.seq_len, mix_seed(cfg.seed, 3));
  OptimizerConfig oc;
  oc.learning_rate = cfg.learning_rate;
  Optimizer<T> opt(oc, Optimizer<T>::all(teacher.params));
  auto view = full_view(teacher.params);
  std::size_t epoch = 0;
  while (losses.size() < cfg.steps) {
    for (const auto& batch : it.epoch(epoch++)) {
      if (losses.size() == cfg.steps) break;
      teacher.params.zero_grad();
      const auto masked = mlm_mask(batch, cfg.mask_rate, mix_seed(cfg.seed, 5000 + losses.size()));
      nn::Tape<T> tape;
      ForwardOptions fo;
      fo.requires_grad = true;
      fo.logits = true;
      auto f = forward(tape, view, masked.batch, fo);
      auto loss = mlm_loss(tape, *f.logits, masked.rows, masked.labels);
      const double value = static_cast<double>(tape.scalar(loss));
      if (!std::isfinite(value)) throw TrainingError("teacher pretraining diverged at step " + std::to_string(losses.size()));
      tape.backward(loss);
      opt.step();
      losses.push_back(value);
    }
  }
  return losses;
}

}  // namespace autodistil

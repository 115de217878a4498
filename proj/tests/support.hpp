#pragma once

// Shared test helpers: seeded generators for property tests, a central
// finite-difference checker and small fixtures.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "autodistil/autodistil.hpp"

namespace testing_support {

using namespace autodistil;

/// Seeded generator; independent of the library's Rng so oracles do not
/// share code with the system under test.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}
  std::int64_t integer(std::int64_t lo, std::int64_t hi) { return std::uniform_int_distribution<std::int64_t>(lo, hi)(eng_); }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  bool coin() { return integer(0, 1) == 1; }

  template <class T>
  nn::Tensor<T> tensor(std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
    nn::Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(real(lo, hi));
    return t;
  }

  FactorRange range(std::int64_t max_lo, std::int64_t max_steps, std::int64_t max_step) {
    const Rational lo(integer(1, max_lo));
    const Rational step(integer(1, max_step));
    const Rational hi = lo + step * Rational(integer(0, max_steps));
    return {lo, hi, step};
  }

  /// Random well-formed sub-space with small integer grids.
  SubspaceSpec subspace() {
    SubspaceSpec s;
    s.name = "gen";
    s.layers = range(3, 3, 2);
    const std::int64_t hstep = 4 * integer(1, 2);
    s.hidden = {Rational(hstep * integer(1, 2)), Rational(0), Rational(hstep)};
    s.hidden.hi = s.hidden.lo + Rational(hstep * integer(0, 2));
    s.ratio = coin() ? FactorRange{Rational(1), Rational(integer(1, 3)), Rational(1)}
                     : FactorRange{Rational(1), Rational(2), Rational(1, 2)};
    s.heads = range(2, 2, 1);
    s.head_dim = 2 * integer(1, 2);
    return s;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

/// Norm-wise relative error between analytic and numeric gradients:
/// max|a - n| / max(max|a|, max|n|, 1e-12).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, scale = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - n[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(n[i])});
  }
  return diff / scale;
}

inline constexpr double kGradTolerance = 1e-4;

/// Builds a scalar loss from leaf tensors; `leaves` are fresh tape leaves in
/// the order of the inputs.
using LossFn = std::function<nn::Tape<double>::Var(nn::Tape<double>&, const std::vector<nn::Tape<double>::Var>&)>;

/// Worst relative error over all inputs of the analytic gradient against
/// central differences with step h.
inline double gradient_check(const std::vector<nn::Tensor<double>>& inputs, const LossFn& loss_fn, double h = 1e-6) {
  nn::Tape<double> tape;
  std::vector<nn::Tape<double>::Var> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  auto loss = loss_fn(tape, leaves);
  tape.backward(loss);

  auto eval = [&](const std::vector<nn::Tensor<double>>& xs) {
    nn::Tape<double> t;
    std::vector<nn::Tape<double>::Var> ls;
    for (const auto& x : xs) ls.push_back(t.constant(x));
    return t.scalar(loss_fn(t, ls));
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto g = tape.grad(leaves[i]);
    std::vector<double> analytic(inputs[i].size(), 0.0), numeric(inputs[i].size(), 0.0);
    if (g.data)
      for (std::size_t k = 0; k < inputs[i].size(); ++k) analytic[k] = g(k / g.cols, k % g.cols);
    auto xs = inputs;
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = xs[i][k];
      xs[i][k] = orig + h;
      const double up = eval(xs);
      xs[i][k] = orig - h;
      const double down = eval(xs);
      xs[i][k] = orig;
      numeric[k] = (up - down) / (2 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("autodistil_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Random token batch over [0, vocab).
inline TokenBatch random_batch(Gen& g, std::size_t batch, std::size_t seq, std::int64_t vocab) {
  TokenBatch b{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(static_cast<TokenId>(g.integer(0, vocab - 1)));
  return b;
}

/// Bit pattern view of a float store, for exact comparisons and hashing.
template <std::floating_point T>
std::vector<std::vector<T>> snapshot(const TransformerParams<T>& p) {
  std::vector<std::vector<T>> out;
  for (const auto& t : p.tensors()) out.emplace_back(t.value.data().begin(), t.value.data().end());
  return out;
}

/// The toy desk-scale setting shared by the trainer, search and acceptance
/// tests: a synthetic bigram corpus and a briefly pretrained teacher at the
/// max corner of the toy sub-space.
template <std::floating_point T>
struct ToySetting {
  SubspaceSpec spec = presets::toy();
  Corpus corpus;
  TeacherModel<T> teacher;

  static ToySetting make(std::uint64_t seed, std::size_t pretrain_steps = 200) {
    ToySetting s;
    const auto text = synthetic_text(20000, 40, mix_seed(seed, 0xC0));
    auto vocab = build_vocab(text, 1000);
    auto ids = tokenize(text, vocab);
    s.corpus = make_corpus(std::move(vocab), std::move(ids), 16, 0.1, seed);
    const auto& sp = s.spec;
    const ModelDims dims{static_cast<std::int64_t>(s.corpus.vocab.size()), 64, 2, sp.layers.hi.num(),
                         sp.hidden.hi.num(), sp.max_ffn(), sp.heads.hi.num(), sp.head_dim};
    s.teacher = {TransformerParams<T>::randomized(dims, mix_seed(seed, 0x7EA)), dims.heads};
    TeacherPretrainConfig pc;
    pc.steps = pretrain_steps;
    pc.batch_size = 8;
    pc.learning_rate = 1e-3;
    pc.seed = mix_seed(seed, 0x7EB);
    pretrain_teacher_mlm(s.teacher, s.corpus, pc);
    return s;
  }

  TrainConfig train_config(std::uint64_t seed, std::size_t epochs = 3) const {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg.seq_len = 16;
    cfg.seed = seed;
    cfg.optimizer.learning_rate = 1e-3;
    return cfg;
  }
};

/// (tensor, flat index) entries the relation loss can reach for `arch`:
/// all embeddings, every kept layer but the last in full, and the last
/// layer's Q/K/V weights and biases.
template <std::floating_point T>
std::set<std::pair<std::size_t, std::size_t>> loss_reachable(const Supernet<T>& net, const ArchConfig& arch) {
  const auto& dims = net.params.dims();
  const std::size_t d = static_cast<std::size_t>(arch.d_hid), f = static_cast<std::size_t>(arch.d_f()),
                    a = static_cast<std::size_t>(arch.h * net.spec.head_dim);
  std::set<std::pair<std::size_t, std::size_t>> out;
  auto rect = [&](std::size_t tensor, std::size_t rows, std::size_t cols) {
    const std::size_t stride = net.params.tensors()[tensor].value.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out.insert({tensor, r * stride + c});
  };
  rect(0, static_cast<std::size_t>(dims.vocab), d);
  rect(1, static_cast<std::size_t>(dims.max_pos), d);
  rect(2, static_cast<std::size_t>(dims.type_vocab), d);
  rect(3, 1, d);
  rect(4, 1, d);
  const auto layers = select_layers(static_cast<std::size_t>(dims.layers), static_cast<std::size_t>(arch.l),
                                    LayerStrategy::Alternate, Phase::Training);
  for (std::size_t pos = 0; pos < layers.size(); ++pos) {
    const std::size_t base = 5 + (layers[pos] - 1) * 16;
    const bool last = pos + 1 == layers.size();
    // q, k, v weight/bias pairs
    for (std::size_t s = 0; s < 6; s += 2) {
      rect(base + s, d, a);
      rect(base + s + 1, 1, a);
    }
    if (last) continue;
    rect(base + 6, a, d);
    rect(base + 7, 1, d);
    rect(base + 8, d, f);
    rect(base + 9, 1, f);
    rect(base + 10, f, d);
    for (std::size_t s = 11; s < 16; ++s) rect(base + s, 1, d);
  }
  return out;
}


}  // namespace testing_support

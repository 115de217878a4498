#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "autodistil/error.hpp"
#include "autodistil/supernet.hpp"

namespace autodistil {

struct OptimizerConfig {
  enum class Kind { Sgd, Adam };
  Kind kind = Kind::Adam;
  double learning_rate = 4e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// SGD or Adam over a fixed list of parameter tensors. Only entries flagged
/// in `touched` by the last backward pass are updated, and Adam moments
/// outside that set are left as they are. Constant learning rate.
template <std::floating_point T>
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<ParamTensor<T>*> params) : cfg_(cfg), params_(std::move(params)) {
    if (!(cfg.learning_rate > 0.0)) throw ValidationError("optimizer: learning_rate must be positive");
    if (cfg_.kind == OptimizerConfig::Kind::Adam) {
      for (auto* p : params_) {
        m_.emplace_back(p->value.size(), T{0});
        v_.emplace_back(p->value.size(), T{0});
      }
    }
  }

  static std::vector<ParamTensor<T>*> all(TransformerParams<T>& store) {
    std::vector<ParamTensor<T>*> out;
    for (auto& t : store.tensors()) out.push_back(&t);
    return out;
  }

  void step() {
    ++t_;
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2), eps = static_cast<T>(cfg_.eps);
    const T c1 = T{1} - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = T{1} - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (p.grad.size() != p.value.size() || p.touched.size() != p.value.size())
        throw Error("optimizer: parameter '" + p.name + "' has no gradient buffer");
      auto w = p.value.data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        if (!p.touched[k]) continue;
        const T g = p.grad[k];
        if (cfg_.kind == OptimizerConfig::Kind::Sgd) {
          w[k] -= lr * g;
          continue;
        }
        T& m = m_[i][k];
        T& v = v_[i][k];
        m = b1 * m + (T{1} - b1) * g;
        v = b2 * v + (T{1} - b2) * g * g;
        w[k] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }
  const std::vector<std::vector<T>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<T>>& second_moments() const noexcept { return v_; }

 private:
  OptimizerConfig cfg_;
  std::vector<ParamTensor<T>*> params_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace autodistil

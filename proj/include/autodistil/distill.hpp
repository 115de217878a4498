#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "autodistil/error.hpp"
#include "autodistil/nn/tape.hpp"
#include "autodistil/nn/tensor.hpp"

namespace autodistil {

/// Weights of the query, key and value relation terms.
struct LossWeights {
  double q = 1.0;
  double k = 1.0;
  double v = 1.0;

  void check() const {
    if (q < 0 || k < 0 || v < 0) throw ValidationError("loss weights must be nonnegative");
    if (q == 0 && k == 0 && v == 0) throw ValidationError("at least one loss weight must be positive");
  }
};

/// Last-layer queries, keys and values of one model, each (batch*seq) x width.
template <std::floating_point T>
struct QkvTensors {
  nn::Tensor<T> q, k, v;
  const nn::Tensor<T>& operator[](std::size_t i) const { return i == 0 ? q : i == 1 ? k : v; }
};

namespace detail {

inline void check_relation_split(std::size_t width, std::size_t relation_heads) {
  if (relation_heads == 0 || width % relation_heads != 0)
    throw DimensionError("width " + std::to_string(width) + " is not divisible by " + std::to_string(relation_heads) +
                         " relation heads");
}

}  // namespace detail

/// (batch*seq) x width -> batch x A_r x seq x (width/A_r), cutting each
/// position's vector into A_r contiguous chunks.
template <std::floating_point T>
nn::Tensor<T> resplit_heads(const nn::Tensor<T>& x, std::size_t batch, std::size_t seq, std::size_t relation_heads) {
  const std::size_t width = x.cols();
  detail::check_relation_split(width, relation_heads);
  if (x.rows() != batch * seq)
    throw DimensionError("resplit_heads: " + std::to_string(x.rows()) + " rows for batch " + std::to_string(batch) +
                         " x seq " + std::to_string(seq));
  const std::size_t dk = width / relation_heads;
  nn::Tensor<T> out({batch, relation_heads, seq, dk});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < relation_heads; ++h)
      for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t c = 0; c < dk; ++c)
          out[((b * relation_heads + h) * seq + s) * dk + c] = x(b * seq + s, h * dk + c);
  return out;
}

/// Inverse of resplit_heads.
template <std::floating_point T>
nn::Tensor<T> merge_heads(const nn::Tensor<T>& chunks) {
  if (chunks.rank() != 4) throw DimensionError("merge_heads: expected rank-4 input");
  const auto& s = chunks.shape();
  const std::size_t batch = s[0], heads = s[1], seq = s[2], dk = s[3];
  nn::Tensor<T> out({batch * seq, heads * dk});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t c = 0; c < dk; ++c) out(b * seq + t, h * dk + c) = chunks[((b * heads + h) * seq + t) * dk + c];
  return out;
}

/// Per relation head k: softmax(X_k X_k^T / sqrt(d_k)), d_k = width / A_r.
/// Result is (batch*A_r*seq) x seq, shaped batch x A_r x seq x seq.
template <std::floating_point T>
typename nn::Tape<T>::Var relation_matrices(nn::Tape<T>& tape, typename nn::Tape<T>::Var x, std::size_t batch,
                                            std::size_t seq, std::size_t relation_heads) {
  const std::size_t width = tape.value(x).cols;
  detail::check_relation_split(width, relation_heads);
  const T scale = T{1} / std::sqrt(static_cast<T>(width / relation_heads));
  return tape.softmax_rows(tape.block_qkt(x, x, batch, seq, relation_heads, scale));
}

template <std::floating_point T>
nn::Tensor<T> relation_matrices(const nn::Tensor<T>& x, std::size_t batch, std::size_t seq,
                                std::size_t relation_heads) {
  nn::Tape<T> tape;
  return tape.tensor(relation_matrices(tape, tape.constant(x), batch, seq, relation_heads));
}

/// Teacher relation matrices for Q, K, V, computed once and reused as constants.
template <std::floating_point T>
std::array<nn::Tensor<T>, 3> teacher_relations(const QkvTensors<T>& teacher, std::size_t batch, std::size_t seq,
                                               std::size_t relation_heads) {
  return {relation_matrices(teacher.q, batch, seq, relation_heads),
          relation_matrices(teacher.k, batch, seq, relation_heads),
          relation_matrices(teacher.v, batch, seq, relation_heads)};
}

/// sum_i beta_i * (1/A_r) sum_k MSE(R^T_ik, R^S_ik) over i in {Q, K, V}.
/// The teacher side enters as constants, so gradients reach the student only.
template <std::floating_point T>
typename nn::Tape<T>::Var relation_kd_loss(nn::Tape<T>& tape, const std::array<nn::Tensor<T>, 3>& teacher_rel,
                                           std::array<typename nn::Tape<T>::Var, 3> student_qkv, std::size_t batch,
                                           std::size_t seq, std::size_t relation_heads, const LossWeights& betas) {
  betas.check();
  using Var = typename nn::Tape<T>::Var;
  std::array<Var, 3> terms;
  for (std::size_t i = 0; i < 3; ++i) {
    if (tape.value(student_qkv[i]).rows != batch * seq)
      throw DimensionError("relation_kd_loss: student rows do not match batch x seq");
    Var rs = relation_matrices(tape, student_qkv[i], batch, seq, relation_heads);
    if (teacher_rel[i].rows() != tape.value(rs).rows || teacher_rel[i].cols() != tape.value(rs).cols)
      throw DimensionError("relation_kd_loss: teacher relations " + nn::shape_string(teacher_rel[i].shape()) +
                           " do not match student " + nn::shape_string(tape.shape(rs)));
    terms[i] = tape.mse(tape.constant(teacher_rel[i]), rs);
  }
  const std::array<T, 3> w{static_cast<T>(betas.q), static_cast<T>(betas.k), static_cast<T>(betas.v)};
  return tape.weighted_sum(std::span<const Var>(terms), std::span<const T>(w));
}

/// Value-only loss between two sets of Q/K/V tensors.
template <std::floating_point T>
T relation_kd_loss(const QkvTensors<T>& teacher, const QkvTensors<T>& student, std::size_t batch, std::size_t seq,
                   std::size_t relation_heads, const LossWeights& betas) {
  for (std::size_t i = 0; i < 3; ++i)
    if (teacher[i].rows() != batch * seq || student[i].rows() != batch * seq)
      throw DimensionError("relation_kd_loss: teacher and student must share batch " + std::to_string(batch) +
                           " and seq " + std::to_string(seq));
  nn::Tape<T> tape;
  auto rel = teacher_relations(teacher, batch, seq, relation_heads);
  auto loss = relation_kd_loss(tape, rel, {tape.constant(student.q), tape.constant(student.k), tape.constant(student.v)},
                               batch, seq, relation_heads, betas);
  return tape.scalar(loss);
}

/// Mean cross-entropy over the masked rows of (batch*seq) x vocab logits.
template <std::floating_point T>
typename nn::Tape<T>::Var mlm_loss(nn::Tape<T>& tape, typename nn::Tape<T>::Var logits,
                                   std::span<const std::size_t> masked_rows, std::span<const std::int32_t> labels) {
  if (masked_rows.empty()) throw InputError("mlm_loss: no masked positions");
  if (masked_rows.size() != labels.size())
    throw InputError("mlm_loss: " + std::to_string(masked_rows.size()) + " positions but " +
                     std::to_string(labels.size()) + " labels");
  return tape.cross_entropy(tape.select_rows(logits, masked_rows), labels);
}

}  // namespace autodistil

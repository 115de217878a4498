#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "autodistil/error.hpp"
#include "autodistil/nn/tensor.hpp"

namespace autodistil::nn {

/// A prefix window into an externally owned parameter tensor. Gradients of a
/// tape node built from it are accumulated straight into `grad`, and the
/// window is flagged in `touched` once any gradient reaches it.
template <std::floating_point T>
struct ParamSlice {
  T* value = nullptr;
  T* grad = nullptr;
  std::uint8_t* touched = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t ld = 0;
};

namespace kernel {

// C += A * B
template <class T>
void gemm_nn(MatRef<T> c, MatRef<const T> a, MatRef<const T> b) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    T* ci = c.row(i);
    const T* ai = a.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const T aik = ai[k];
      const T* bk = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C += A * B^T
template <class T>
void gemm_nt(MatRef<T> c, MatRef<const T> a, MatRef<const T> b) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* ai = a.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const T* bj = b.row(j);
      T acc{0};
      for (std::size_t k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
      c(i, j) += acc;
    }
  }
}

// C += A^T * B
template <class T>
void gemm_tn(MatRef<T> c, MatRef<const T> a, MatRef<const T> b) {
  for (std::size_t k = 0; k < a.rows; ++k) {
    const T* ak = a.row(k);
    const T* bk = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const T aki = ak[i];
      T* ci = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
    }
  }
}

template <class T>
void softmax_row(const T* x, T* y, std::size_t n) {
  T mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T sum{0};
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
}

}  // namespace kernel

/// Reverse-mode tape. Nodes are appended in evaluation order and `backward`
/// walks them in reverse, so the accumulation order is fixed for a given
/// sequence of calls.
template <std::floating_point T>
class Tape {
 public:
  struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
  };

  Var constant(Tensor<T> value) { return push(std::move(value), false); }

  /// Tape-owned value that receives a gradient.
  Var leaf(Tensor<T> value) { return push(std::move(value), true); }

  Var param(const ParamSlice<T>& slice, bool requires_grad) {
    if (requires_grad && slice.grad == nullptr) throw Error("parameter slice has no gradient buffer");
    Node n;
    n.shape = {slice.rows, slice.cols};
    n.param = slice;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::size_t>& shape(Var v) const { return nodes_.at(v.id).shape; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  MatRef<const T> value(Var v) const { return const_cast<Tape*>(this)->vref(v.id); }

  Tensor<T> tensor(Var v) const { return Tensor<T>::from(value(v)).reshaped(shape(v)); }

  T scalar(Var v) const {
    auto m = value(v);
    if (m.size() != 1) throw DimensionError("scalar() on tensor of shape " + shape_string(shape(v)));
    return m(0, 0);
  }

  /// Gradient accumulated into a tape-owned node (empty view when none).
  MatRef<const T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.param) return {n.param->grad, n.param->rows, n.param->cols, n.param->ld};
    if (n.grad.empty()) return {nullptr, 0, 0, 0};
    return {n.grad.data(), n.value.rows(), n.value.cols(), n.value.cols()};
  }

  /// Seeds d(loss) = `seed` and propagates to every reachable input.
  void backward(Var loss, T seed = T{1}) {
    Node& l = nodes_.at(loss.id);
    if (l.value.size() != 1 && !l.param) throw DimensionError("backward() requires a scalar loss");
    if (!l.requires_grad) return;
    grad_acc(loss.id)(0, 0) += seed;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this);
      if (n.param && n.param->touched)
        for (std::size_t r = 0; r < n.param->rows; ++r)
          for (std::size_t c = 0; c < n.param->cols; ++c) n.param->touched[r * n.param->ld + c] = 1;
    }
  }

  // ---- operations --------------------------------------------------------

  Var matmul(Var a, Var b) {
    auto A = value(a), B = value(b);
    if (A.cols != B.rows)
      throw DimensionError("matmul: shapes " + shape_string(shape(a)) + " and " + shape_string(shape(b)) +
                           " do not agree");
    Tensor<T> out({A.rows, B.cols});
    kernel::gemm_nn<T>(out.mat(), A, B);
    return push_op(std::move(out), {a, b}, [a, b, out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      if (t.nodes_[a.id].requires_grad) kernel::gemm_nt<T>(t.grad_acc(a.id), g, t.value(b));
      if (t.nodes_[b.id].requires_grad) kernel::gemm_tn<T>(t.grad_acc(b.id), t.value(a), g);
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    auto A = value(a), B = value(b);
    if (A.cols != B.cols)
      throw DimensionError("matmul_nt: shapes " + shape_string(shape(a)) + " and " + shape_string(shape(b)) +
                           " do not agree");
    Tensor<T> out({A.rows, B.rows});
    kernel::gemm_nt<T>(out.mat(), A, B);
    return push_op(std::move(out), {a, b}, [a, b, out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      if (t.nodes_[a.id].requires_grad) kernel::gemm_nn<T>(t.grad_acc(a.id), g, t.value(b));
      if (t.nodes_[b.id].requires_grad) kernel::gemm_tn<T>(t.grad_acc(b.id), g, t.value(a));
    });
  }

  Var add(Var a, Var b) {
    auto A = value(a), B = value(b);
    if (A.rows != B.rows || A.cols != B.cols)
      throw DimensionError("add: shapes " + shape_string(shape(a)) + " and " + shape_string(shape(b)) + " differ");
    Tensor<T> out(shape(a));
    for (std::size_t r = 0; r < A.rows; ++r)
      for (std::size_t c = 0; c < A.cols; ++c) out(r, c) = A(r, c) + B(r, c);
    return push_op(std::move(out), {a, b}, [a, b, out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      for (Var v : {a, b}) {
        if (!t.nodes_[v.id].requires_grad) continue;
        auto d = t.grad_acc(v.id);
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t c = 0; c < g.cols; ++c) d(r, c) += g(r, c);
      }
    });
  }

  /// x + broadcast row vector b (1 x cols).
  Var add_bias(Var x, Var b) {
    auto X = value(x), B = value(b);
    if (B.rows != 1 || B.cols != X.cols)
      throw DimensionError("add_bias: bias " + shape_string(shape(b)) + " does not match rows of " +
                           shape_string(shape(x)));
    Tensor<T> out(shape(x));
    for (std::size_t r = 0; r < X.rows; ++r)
      for (std::size_t c = 0; c < X.cols; ++c) out(r, c) = X(r, c) + B(0, c);
    return push_op(std::move(out), {x, b}, [x, b, out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      if (t.nodes_[x.id].requires_grad) {
        auto d = t.grad_acc(x.id);
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t c = 0; c < g.cols; ++c) d(r, c) += g(r, c);
      }
      if (t.nodes_[b.id].requires_grad) {
        auto d = t.grad_acc(b.id);
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t c = 0; c < g.cols; ++c) d(0, c) += g(r, c);
      }
    });
  }

  Var scale(Var x, T s) {
    auto X = value(x);
    Tensor<T> out(shape(x));
    for (std::size_t r = 0; r < X.rows; ++r)
      for (std::size_t c = 0; c < X.cols; ++c) out(r, c) = X(r, c) * s;
    return push_op(std::move(out), {x}, [x, s, out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      auto d = t.grad_acc(x.id);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) d(r, c) += g(r, c) * s;
    });
  }

  Var relu(Var x) {
    auto X = value(x);
    Tensor<T> out(shape(x));
    for (std::size_t r = 0; r < X.rows; ++r)
      for (std::size_t c = 0; c < X.cols; ++c) out(r, c) = X(r, c) > T{0} ? X(r, c) : T{0};
    return push_op(std::move(out), {x}, [x, out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      auto X = t.value(x);
      auto d = t.grad_acc(x.id);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c)
          if (X(r, c) > T{0}) d(r, c) += g(r, c);
    });
  }

  /// Row-wise normalization over the last dimension, then gain/bias (1 x cols).
  Var layer_norm(Var x, Var gain, Var bias, T eps) {
    auto X = value(x), G = value(gain), B = value(bias);
    const std::size_t n = X.cols;
    if (n == 0) throw DimensionError("layer_norm: normalized dimension is empty");
    if (G.rows != 1 || G.cols != n || B.rows != 1 || B.cols != n)
      throw DimensionError("layer_norm: gain " + shape_string(shape(gain)) + " / bias " +
                           shape_string(shape(bias)) + " do not match " + shape_string(shape(x)));
    Tensor<T> out(shape(x));
    std::vector<T> xhat(X.rows * n), rstd(X.rows);
    for (std::size_t r = 0; r < X.rows; ++r) {
      T mean{0};
      for (std::size_t c = 0; c < n; ++c) mean += X(r, c);
      mean /= static_cast<T>(n);
      T var{0};
      for (std::size_t c = 0; c < n; ++c) var += (X(r, c) - mean) * (X(r, c) - mean);
      var /= static_cast<T>(n);
      rstd[r] = T{1} / std::sqrt(var + eps);
      for (std::size_t c = 0; c < n; ++c) {
        xhat[r * n + c] = (X(r, c) - mean) * rstd[r];
        out(r, c) = G(0, c) * xhat[r * n + c] + B(0, c);
      }
    }
    return push_op(std::move(out), {x, gain, bias},
                   [x, gain, bias, n, xhat = std::move(xhat), rstd = std::move(rstd), out_id = nodes_.size()](Tape& t) {
                     auto g = t.grad_view(out_id);
                     auto G = t.value(gain);
                     if (t.nodes_[gain.id].requires_grad) {
                       auto d = t.grad_acc(gain.id);
                       for (std::size_t r = 0; r < g.rows; ++r)
                         for (std::size_t c = 0; c < n; ++c) d(0, c) += g(r, c) * xhat[r * n + c];
                     }
                     if (t.nodes_[bias.id].requires_grad) {
                       auto d = t.grad_acc(bias.id);
                       for (std::size_t r = 0; r < g.rows; ++r)
                         for (std::size_t c = 0; c < n; ++c) d(0, c) += g(r, c);
                     }
                     if (t.nodes_[x.id].requires_grad) {
                       auto d = t.grad_acc(x.id);
                       std::vector<T> dxhat(n);
                       for (std::size_t r = 0; r < g.rows; ++r) {
                         T m1{0}, m2{0};
                         for (std::size_t c = 0; c < n; ++c) {
                           dxhat[c] = g(r, c) * G(0, c);
                           m1 += dxhat[c];
                           m2 += dxhat[c] * xhat[r * n + c];
                         }
                         m1 /= static_cast<T>(n);
                         m2 /= static_cast<T>(n);
                         for (std::size_t c = 0; c < n; ++c)
                           d(r, c) += rstd[r] * (dxhat[c] - m1 - xhat[r * n + c] * m2);
                       }
                     }
                   });
  }

  Var softmax_rows(Var x) {
    auto X = value(x);
    Tensor<T> out(shape(x));
    if (X.cols == 0) throw DimensionError("softmax_rows: empty rows");
    for (std::size_t r = 0; r < X.rows; ++r) kernel::softmax_row(X.row(r), &out(r, 0), X.cols);
    return push_op(std::move(out), {x}, [x, out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      auto y = t.value(Var{out_id});
      auto d = t.grad_acc(x.id);
      for (std::size_t r = 0; r < g.rows; ++r) {
        T dot{0};
        for (std::size_t c = 0; c < g.cols; ++c) dot += g(r, c) * y(r, c);
        for (std::size_t c = 0; c < g.cols; ++c) d(r, c) += y(r, c) * (g(r, c) - dot);
      }
    });
  }

  /// Rows of `table` selected by `ids`.
  Var embedding(Var table, std::span<const std::int32_t> ids) {
    auto E = value(table);
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    for (auto id : idv)
      if (id < 0 || static_cast<std::size_t>(id) >= E.rows)
        throw InputError("embedding: id " + std::to_string(id) + " out of range [0, " + std::to_string(E.rows) + ")");
    Tensor<T> out({idv.size(), E.cols});
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t c = 0; c < E.cols; ++c) out(r, c) = E(static_cast<std::size_t>(idv[r]), c);
    return push_op(std::move(out), {table}, [table, idv = std::move(idv), out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      auto d = t.grad_acc(table.id);
      for (std::size_t r = 0; r < idv.size(); ++r)
        for (std::size_t c = 0; c < g.cols; ++c) d(static_cast<std::size_t>(idv[r]), c) += g(r, c);
    });
  }

  Var select_rows(Var x, std::span<const std::size_t> rows) {
    auto X = value(x);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    for (auto r : idx)
      if (r >= X.rows) throw InputError("select_rows: row " + std::to_string(r) + " out of range");
    Tensor<T> out({idx.size(), X.cols});
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < X.cols; ++c) out(i, c) = X(idx[i], c);
    return push_op(std::move(out), {x}, [x, idx = std::move(idx), out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      auto d = t.grad_acc(x.id);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < g.cols; ++c) d(idx[i], c) += g(i, c);
    });
  }

  /// Grouped scaled dot products. `a`, `b` are (batch*seq) x W with W split
  /// into `groups` contiguous chunks of W/groups. Output row (bi, g, i) of the
  /// (batch*groups*seq) x seq result holds  s * <a[bi,i,chunk g], b[bi,j,chunk g]>.
  Var block_qkt(Var a, Var b, std::size_t batch, std::size_t seq, std::size_t groups, T s) {
    auto A = value(a), B = value(b);
    check_grouped("block_qkt", a, batch, seq, groups);
    check_grouped("block_qkt", b, batch, seq, groups);
    if (A.cols != B.cols) throw DimensionError("block_qkt: widths " + std::to_string(A.cols) + " and " +
                                               std::to_string(B.cols) + " differ");
    const std::size_t dk = A.cols / groups;
    Tensor<T> out({batch, groups, seq, seq});
    auto O = out.mat();
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < seq; ++i)
          for (std::size_t j = 0; j < seq; ++j) {
            const T* ai = A.row(bi * seq + i) + g * dk;
            const T* bj = B.row(bi * seq + j) + g * dk;
            T acc{0};
            for (std::size_t c = 0; c < dk; ++c) acc += ai[c] * bj[c];
            O((bi * groups + g) * seq + i, j) = acc * s;
          }
    return push_op(std::move(out), {a, b}, [=, out_id = nodes_.size()](Tape& t) {
      auto G = t.grad_view(out_id);
      auto A = t.value(a), B = t.value(b);
      const bool ga = t.nodes_[a.id].requires_grad, gb = t.nodes_[b.id].requires_grad;
      MatRef<T> dA = ga ? t.grad_acc(a.id) : MatRef<T>{};
      MatRef<T> dB = gb ? t.grad_acc(b.id) : MatRef<T>{};
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t i = 0; i < seq; ++i)
            for (std::size_t j = 0; j < seq; ++j) {
              const T gij = G((bi * groups + g) * seq + i, j) * s;
              const std::size_t ri = bi * seq + i, rj = bi * seq + j;
              for (std::size_t c = 0; c < dk; ++c) {
                if (ga) dA(ri, g * dk + c) += gij * B(rj, g * dk + c);
                if (gb) dB(rj, g * dk + c) += gij * A(ri, g * dk + c);
              }
            }
    });
  }

  /// Grouped mixing: for each batch item and chunk g, P_g (seq x seq) times
  /// the chunk g columns of v. Output has v's shape.
  Var block_mix(Var p, Var v, std::size_t batch, std::size_t seq, std::size_t groups) {
    auto P = value(p), V = value(v);
    check_grouped("block_mix", v, batch, seq, groups);
    if (P.rows != batch * groups * seq || P.cols != seq)
      throw DimensionError("block_mix: weights " + shape_string(shape(p)) + " do not match batch/groups/seq");
    const std::size_t dk = V.cols / groups;
    Tensor<T> out({batch * seq, V.cols});
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < seq; ++i) {
          T* oi = &out(bi * seq + i, g * dk);
          const T* pi = P.row((bi * groups + g) * seq + i);
          for (std::size_t j = 0; j < seq; ++j) {
            const T* vj = V.row(bi * seq + j) + g * dk;
            for (std::size_t c = 0; c < dk; ++c) oi[c] += pi[j] * vj[c];
          }
        }
    return push_op(std::move(out), {p, v}, [=, out_id = nodes_.size()](Tape& t) {
      auto G = t.grad_view(out_id);
      auto P = t.value(p), V = t.value(v);
      const bool gp = t.nodes_[p.id].requires_grad, gv = t.nodes_[v.id].requires_grad;
      MatRef<T> dP = gp ? t.grad_acc(p.id) : MatRef<T>{};
      MatRef<T> dV = gv ? t.grad_acc(v.id) : MatRef<T>{};
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t i = 0; i < seq; ++i)
            for (std::size_t j = 0; j < seq; ++j) {
              const std::size_t pr = (bi * groups + g) * seq + i;
              const T* gi = G.row(bi * seq + i) + g * dk;
              const T* vj = V.row(bi * seq + j) + g * dk;
              if (gp) {
                T acc{0};
                for (std::size_t c = 0; c < dk; ++c) acc += gi[c] * vj[c];
                dP(pr, j) += acc;
              }
              if (gv) {
                T* dvj = dV.row(bi * seq + j) + g * dk;
                for (std::size_t c = 0; c < dk; ++c) dvj[c] += P(pr, j) * gi[c];
              }
            }
    });
  }

  /// Mean of squared element differences (1 x 1).
  Var mse(Var a, Var b) {
    auto A = value(a), B = value(b);
    if (A.rows != B.rows || A.cols != B.cols)
      throw DimensionError("mse: shapes " + shape_string(shape(a)) + " and " + shape_string(shape(b)) + " differ");
    const T n = static_cast<T>(A.size());
    T acc{0};
    for (std::size_t r = 0; r < A.rows; ++r)
      for (std::size_t c = 0; c < A.cols; ++c) acc += (A(r, c) - B(r, c)) * (A(r, c) - B(r, c));
    Tensor<T> out({1, 1}, acc / n);
    return push_op(std::move(out), {a, b}, [a, b, n, out_id = nodes_.size()](Tape& t) {
      const T g = t.grad_view(out_id)(0, 0) * T{2} / n;
      auto A = t.value(a), B = t.value(b);
      if (t.nodes_[a.id].requires_grad) {
        auto d = t.grad_acc(a.id);
        for (std::size_t r = 0; r < A.rows; ++r)
          for (std::size_t c = 0; c < A.cols; ++c) d(r, c) += g * (A(r, c) - B(r, c));
      }
      if (t.nodes_[b.id].requires_grad) {
        auto d = t.grad_acc(b.id);
        for (std::size_t r = 0; r < A.rows; ++r)
          for (std::size_t c = 0; c < A.cols; ++c) d(r, c) -= g * (A(r, c) - B(r, c));
      }
    });
  }

  /// Mean over rows of -log softmax(logits)[label].
  Var cross_entropy(Var logits, std::span<const std::int32_t> labels) {
    auto X = value(logits);
    if (labels.size() != X.rows)
      throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                           std::to_string(X.rows) + " rows");
    if (X.rows == 0) throw InputError("cross_entropy: no rows");
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    for (auto l : lab)
      if (l < 0 || static_cast<std::size_t>(l) >= X.cols)
        throw InputError("cross_entropy: label " + std::to_string(l) + " out of range [0, " + std::to_string(X.cols) +
                         ")");
    std::vector<T> probs(X.rows * X.cols);
    T acc{0};
    for (std::size_t r = 0; r < X.rows; ++r) {
      kernel::softmax_row(X.row(r), &probs[r * X.cols], X.cols);
      T mx = X(r, 0);
      for (std::size_t c = 1; c < X.cols; ++c) mx = std::max(mx, X(r, c));
      T sum{0};
      for (std::size_t c = 0; c < X.cols; ++c) sum += std::exp(X(r, c) - mx);
      acc += std::log(sum) + mx - X(r, static_cast<std::size_t>(lab[r]));
    }
    const T rows = static_cast<T>(X.rows);
    Tensor<T> out({1, 1}, acc / rows);
    return push_op(std::move(out), {logits},
                   [logits, lab = std::move(lab), probs = std::move(probs), rows, out_id = nodes_.size()](Tape& t) {
                     const T g = t.grad_view(out_id)(0, 0) / rows;
                     auto d = t.grad_acc(logits.id);
                     for (std::size_t r = 0; r < d.rows; ++r)
                       for (std::size_t c = 0; c < d.cols; ++c)
                         d(r, c) += g * (probs[r * d.cols + c] - (static_cast<std::int32_t>(c) == lab[r] ? T{1} : T{0}));
                   });
  }

  /// sum_i w_i * s_i over 1x1 nodes.
  Var weighted_sum(std::span<const Var> scalars, std::span<const T> weights) {
    if (scalars.size() != weights.size() || scalars.empty())
      throw DimensionError("weighted_sum: need matching non-empty scalar and weight lists");
    T acc{0};
    std::vector<Var> in(scalars.begin(), scalars.end());
    std::vector<T> w(weights.begin(), weights.end());
    for (std::size_t i = 0; i < in.size(); ++i) acc += w[i] * scalar(in[i]);
    Tensor<T> out({1, 1}, acc);
    return push_op(std::move(out), in, [in, w, out_id = nodes_.size()](Tape& t) {
      const T g = t.grad_view(out_id)(0, 0);
      for (std::size_t i = 0; i < in.size(); ++i)
        if (t.nodes_[in[i].id].requires_grad) t.grad_acc(in[i].id)(0, 0) += g * w[i];
    });
  }

  /// Metadata-only reshape (copies values; gradient passes straight through).
  Var reshape(Var x, std::vector<std::size_t> new_shape) {
    Tensor<T> out = tensor(x).reshaped(std::move(new_shape));
    return push_op(std::move(out), {x}, [x, out_id = nodes_.size()](Tape& t) {
      auto g = t.grad_view(out_id);
      auto d = t.grad_acc(x.id);
      const std::size_t n = g.size();
      for (std::size_t i = 0; i < n; ++i) d(i / d.cols, i % d.cols) += g(i / g.cols, i % g.cols);
    });
  }

 private:
  struct Node {
    std::vector<std::size_t> shape;
    Tensor<T> value;
    std::vector<T> grad;
    std::optional<ParamSlice<T>> param;
    std::function<void(Tape&)> backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var push(Tensor<T> value, bool requires_grad) {
    Node n;
    n.shape = value.shape();
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  template <class Fn>
  Var push_op(Tensor<T> value, std::initializer_list<Var> inputs, Fn&& fn) {
    return push_op(std::move(value), std::vector<Var>(inputs), std::forward<Fn>(fn));
  }

  template <class Fn>
  Var push_op(Tensor<T> value, const std::vector<Var>& inputs, Fn&& fn) {
    bool rg = false;
    for (Var v : inputs) rg = rg || nodes_[v.id].requires_grad;
    Var out = push(std::move(value), rg);
    if (rg) nodes_.back().backward = std::forward<Fn>(fn);
    return out;
  }

  void check_grouped(const char* op, Var x, std::size_t batch, std::size_t seq, std::size_t groups) const {
    auto X = value(x);
    if (groups == 0 || X.cols % groups != 0)
      throw DimensionError(std::string(op) + ": width " + std::to_string(X.cols) + " not divisible by " +
                           std::to_string(groups) + " groups");
    if (X.rows != batch * seq)
      throw DimensionError(std::string(op) + ": " + std::to_string(X.rows) + " rows for batch " +
                           std::to_string(batch) + " x seq " + std::to_string(seq));
  }

  MatRef<T> vref(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.param) return {n.param->value, n.param->rows, n.param->cols, n.param->ld};
    return n.value.mat();
  }

  MatRef<const T> grad_view(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.param) return {n.param->grad, n.param->rows, n.param->cols, n.param->ld};
    return {n.grad.data(), n.value.rows(), n.value.cols(), n.value.cols()};
  }

  MatRef<T> grad_acc(std::size_t id) {
    Node& n = nodes_[id];
    n.has_grad = true;
    if (n.param) return {n.param->grad, n.param->rows, n.param->cols, n.param->ld};
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return {n.grad.data(), n.value.rows(), n.value.cols(), n.value.cols()};
  }

  std::vector<Node> nodes_;
};

}  // namespace autodistil::nn

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "propetl/graph.hpp"
#include "propetl/tensor.hpp"

namespace propetl {

namespace detail {

template <typename T>
BasicGraph<T>& graph_of(std::string_view op, std::initializer_list<BasicVar<T>> vars) {
  BasicGraph<T>* g = nullptr;
  for (const auto& v : vars) {
    if (v.graph == nullptr) throw Error(std::string(op) + ": unbound variable");
    if (g != nullptr && g != v.graph) throw Error(std::string(op) + ": operands from different graphs");
    g = v.graph;
  }
  return *g;
}

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Linear algebra
// ----------------------------------------------------------------------------

/// a (..., K) times b (K, N) -> (..., N).
template <typename T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  auto& g = detail::graph_of("matmul", {a, b});
  const auto& A = a.value();
  const auto& B = b.value();
  if (B.rank() != 2 || A.rank() < 2 || A.cols() != B.dim(0)) detail::shape_mismatch("matmul", A.shape(), B.shape());
  require_finite("matmul", A);
  require_finite("matmul", B);
  const std::size_t M = A.rows(), K = A.cols(), N = B.dim(1);
  Shape out_shape = A.shape();
  out_shape.back() = N;
  BasicTensor<T> C(out_shape);
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C.data() + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T aik = A[i * K + k];
      const T* brow = B.data() + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aik * brow[j];
    }
  }
  return g.push("matmul", std::move(C), {a.id, b.id}, [M, K, N](const BackwardContext<T>& ctx) {
    const auto& A = *ctx.in[0];
    const auto& B = *ctx.in[1];
    const auto& dC = ctx.out_grad;
    if (ctx.in_grad[0] != nullptr) {
      // dA = dC B^T, via a transposed copy so the inner loop is an axpy.
      std::vector<T> Bt(N * K);
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < N; ++j) Bt[j * K + k] = B[k * N + j];
      auto& dA = *ctx.in_grad[0];
      for (std::size_t i = 0; i < M; ++i) {
        T* da = dA.data() + i * K;
        for (std::size_t j = 0; j < N; ++j) {
          const T g = dC[i * N + j];
          const T* bt = Bt.data() + j * K;
          for (std::size_t k = 0; k < K; ++k) da[k] += g * bt[k];
        }
      }
    }
    if (ctx.in_grad[1] != nullptr) {
      auto& dB = *ctx.in_grad[1];
      for (std::size_t i = 0; i < M; ++i) {
        const T* dc = dC.data() + i * N;
        for (std::size_t k = 0; k < K; ++k) {
          const T aik = A[i * K + k];
          T* db = dB.data() + k * N;
          for (std::size_t j = 0; j < N; ++j) db[j] += aik * dc[j];
        }
      }
    }
  });
}

/// Elementwise sum of equal shapes, or a row-broadcast bias when b is a
/// vector whose length equals a's last dimension.
template <typename T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  auto& g = detail::graph_of("add", {a, b});
  const auto& A = a.value();
  const auto& B = b.value();
  require_finite("add", A);
  require_finite("add", B);
  const bool same = A.shape() == B.shape();
  const bool bias = !same && B.rank() == 1 && A.rank() >= 1 && B.dim(0) == A.cols();
  if (!same && !bias) detail::shape_mismatch("add", A.shape(), B.shape());
  BasicTensor<T> C = A;
  const std::size_t n = C.numel(), cols = A.cols();
  if (same) {
    for (std::size_t i = 0; i < n; ++i) C[i] += B[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) C[i] += B[i % cols];
  }
  return g.push("add", std::move(C), {a.id, b.id}, [same, n, cols](const BackwardContext<T>& ctx) {
    const auto& dC = ctx.out_grad;
    if (auto* dA = ctx.in_grad[0]) {
      for (std::size_t i = 0; i < n; ++i) (*dA)[i] += dC[i];
    }
    if (auto* dB = ctx.in_grad[1]) {
      if (same) {
        for (std::size_t i = 0; i < n; ++i) (*dB)[i] += dC[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) (*dB)[i % cols] += dC[i];
      }
    }
  });
}

template <typename T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  auto& g = detail::graph_of("elementwise_mul", {a, b});
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) detail::shape_mismatch("elementwise_mul", A.shape(), B.shape());
  require_finite("elementwise_mul", A);
  require_finite("elementwise_mul", B);
  BasicTensor<T> C = A;
  const std::size_t n = C.numel();
  for (std::size_t i = 0; i < n; ++i) C[i] *= B[i];
  return g.push("elementwise_mul", std::move(C), {a.id, b.id}, [n](const BackwardContext<T>& ctx) {
    const auto& dC = ctx.out_grad;
    const auto& A = *ctx.in[0];
    const auto& B = *ctx.in[1];
    if (auto* dA = ctx.in_grad[0]) {
      for (std::size_t i = 0; i < n; ++i) (*dA)[i] += dC[i] * B[i];
    }
    if (auto* dB = ctx.in_grad[1]) {
      for (std::size_t i = 0; i < n; ++i) (*dB)[i] += dC[i] * A[i];
    }
  });
}

template <typename T>
BasicVar<T> scale(BasicVar<T> a, T factor) {
  auto& g = detail::graph_of("scale", {a});
  require_finite("scale", a.value());
  BasicTensor<T> C = a.value();
  for (auto& v : C.values()) v *= factor;
  return g.push("scale", std::move(C), {a.id}, [factor](const BackwardContext<T>& ctx) {
    auto& dA = *ctx.in_grad[0];
    for (std::size_t i = 0; i < dA.numel(); ++i) dA[i] += factor * ctx.out_grad[i];
  });
}

/// Sum of all elements -> scalar.
template <typename T>
BasicVar<T> sum(BasicVar<T> a) {
  auto& g = detail::graph_of("sum", {a});
  require_finite("sum", a.value());
  double acc = 0.0;
  for (const T v : a.value().values()) acc += v;
  return g.push("sum", BasicTensor<T>(Shape{}, static_cast<T>(acc)), {a.id}, [](const BackwardContext<T>& ctx) {
    auto& dA = *ctx.in_grad[0];
    const T g = ctx.out_grad[0];
    for (std::size_t i = 0; i < dA.numel(); ++i) dA[i] += g;
  });
}

// ----------------------------------------------------------------------------
// Nonlinearities
// ----------------------------------------------------------------------------

/// max(x, 0); the derivative at exactly 0 is taken as 0.
template <typename T>
BasicVar<T> relu(BasicVar<T> a) {
  auto& g = detail::graph_of("relu", {a});
  require_finite("relu", a.value());
  BasicTensor<T> C = a.value();
  for (auto& v : C.values()) v = v > T(0) ? v : T(0);
  return g.push("relu", std::move(C), {a.id}, [](const BackwardContext<T>& ctx) {
    auto& dA = *ctx.in_grad[0];
    const auto& X = *ctx.in[0];
    for (std::size_t i = 0; i < dA.numel(); ++i) {
      if (X[i] > T(0)) dA[i] += ctx.out_grad[i];
    }
  });
}

/// Exact (erf) GELU.
template <typename T>
BasicVar<T> gelu(BasicVar<T> a) {
  auto& g = detail::graph_of("gelu", {a});
  require_finite("gelu", a.value());
  BasicTensor<T> C = a.value();
  for (auto& v : C.values()) v = T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
  return g.push("gelu", std::move(C), {a.id}, [](const BackwardContext<T>& ctx) {
    auto& dA = *ctx.in_grad[0];
    const auto& X = *ctx.in[0];
    const T inv_sqrt2pi = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (std::size_t i = 0; i < dA.numel(); ++i) {
      const T x = X[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      dA[i] += ctx.out_grad[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
BasicVar<T> softmax_lastdim(BasicVar<T> a) {
  auto& g = detail::graph_of("softmax_lastdim", {a});
  const auto& X = a.value();
  require_finite("softmax_lastdim", X);
  BasicTensor<T> Y(X.shape());
  const std::size_t R = X.rows(), C = X.cols();
  for (std::size_t r = 0; r < R; ++r) {
    const T* x = X.data() + r * C;
    T* y = Y.data() + r * C;
    const T mx = *std::max_element(x, x + C);
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      y[c] = std::exp(x[c] - mx);
      total += y[c];
    }
    for (std::size_t c = 0; c < C; ++c) y[c] = static_cast<T>(y[c] / total);
  }
  return g.push("softmax_lastdim", std::move(Y), {a.id}, [R, C](const BackwardContext<T>& ctx) {
    auto& dX = *ctx.in_grad[0];
    const auto& Y = ctx.out;
    const auto& dY = ctx.out_grad;
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += double(dY[r * C + c]) * Y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) {
        dX[r * C + c] += Y[r * C + c] * static_cast<T>(dY[r * C + c] - dot);
      }
    }
  });
}

/// Normalizes each row over the last dimension, then applies gamma/beta.
/// A constant row normalizes to zero (variance 0 is regularized by eps).
template <typename T>
BasicVar<T> layer_norm(BasicVar<T> x, BasicVar<T> gamma, BasicVar<T> beta, double eps = 1e-5) {
  auto& g = detail::graph_of("layer_norm", {x, gamma, beta});
  const auto& X = x.value();
  require_finite("layer_norm", X);
  const std::size_t R = X.rows(), C = X.cols();
  const Shape vec{C};
  if (gamma.shape() != vec) detail::shape_mismatch("layer_norm", X.shape(), gamma.shape());
  if (beta.shape() != vec) detail::shape_mismatch("layer_norm", X.shape(), beta.shape());
  const auto& G = gamma.value();
  const auto& Bt = beta.value();
  BasicTensor<T> Y(X.shape());
  std::vector<T> xhat(X.numel());
  std::vector<T> rstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* xr = X.data() + r * C;
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= double(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= double(C);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<T>(rs);
    for (std::size_t c = 0; c < C; ++c) {
      const T h = static_cast<T>((xr[c] - mean) * rs);
      xhat[r * C + c] = h;
      Y[r * C + c] = h * G[c] + Bt[c];
    }
  }
  return g.push("layer_norm", std::move(Y), {x.id, gamma.id, beta.id},
                [R, C, xhat = std::move(xhat), rstd = std::move(rstd)](const BackwardContext<T>& ctx) {
                  const auto& G = *ctx.in[1];
                  const auto& dY = ctx.out_grad;
                  if (auto* dX = ctx.in_grad[0]) {
                    std::vector<T> dxh(C);
                    for (std::size_t r = 0; r < R; ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t c = 0; c < C; ++c) {
                        dxh[c] = dY[r * C + c] * G[c];
                        m1 += dxh[c];
                        m2 += double(dxh[c]) * xhat[r * C + c];
                      }
                      m1 /= double(C);
                      m2 /= double(C);
                      for (std::size_t c = 0; c < C; ++c) {
                        (*dX)[r * C + c] += rstd[r] * static_cast<T>(dxh[c] - m1 - xhat[r * C + c] * m2);
                      }
                    }
                  }
                  if (auto* dG = ctx.in_grad[1]) {
                    for (std::size_t i = 0; i < R * C; ++i) (*dG)[i % C] += dY[i] * xhat[i];
                  }
                  if (auto* dB = ctx.in_grad[2]) {
                    for (std::size_t i = 0; i < R * C; ++i) (*dB)[i % C] += dY[i];
                  }
                });
}

// ----------------------------------------------------------------------------
// Structural ops
// ----------------------------------------------------------------------------

/// Rows of table (V, d) gathered by ids; output shape is index_shape + (d).
template <typename T>
BasicVar<T> embedding_lookup(BasicVar<T> table, std::span<const std::int32_t> ids, Shape index_shape) {
  auto& g = detail::graph_of("embedding_lookup", {table});
  const auto& W = table.value();
  if (W.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(W.shape()));
  if (shape_numel(index_shape) != ids.size()) {
    throw ShapeError("embedding_lookup: " + std::to_string(ids.size()) + " ids for index shape " +
                     shape_str(index_shape));
  }
  const std::size_t V = W.dim(0), d = W.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  for (const auto id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw ValueError("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
    }
  }
  Shape out_shape = std::move(index_shape);
  out_shape.push_back(d);
  BasicTensor<T> Y(out_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(W.data() + std::size_t(idx[i]) * d, d, Y.data() + i * d);
  }
  return g.push("embedding_lookup", std::move(Y), {table.id}, [d, idx = std::move(idx)](const BackwardContext<T>& ctx) {
    auto& dW = *ctx.in_grad[0];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* row = dW.data() + std::size_t(idx[i]) * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += ctx.out_grad[i * d + c];
    }
  });
}

/// Stacks a (ra, c) on top of b (rb, c) -> (ra + rb, c).
template <typename T>
BasicVar<T> concat_rows(BasicVar<T> a, BasicVar<T> b) {
  auto& g = detail::graph_of("concat_rows", {a, b});
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols()) detail::shape_mismatch("concat_rows", A.shape(), B.shape());
  const std::size_t na = A.numel();
  std::vector<T> data(A.values());
  data.insert(data.end(), B.values().begin(), B.values().end());
  BasicTensor<T> Y(Shape{A.rows() + B.rows(), A.cols()}, std::move(data));
  return g.push("concat_rows", std::move(Y), {a.id, b.id}, [na](const BackwardContext<T>& ctx) {
    const auto& dY = ctx.out_grad;
    if (auto* dA = ctx.in_grad[0]) {
      for (std::size_t i = 0; i < na; ++i) (*dA)[i] += dY[i];
    }
    if (auto* dB = ctx.in_grad[1]) {
      for (std::size_t i = 0; i < dB->numel(); ++i) (*dB)[i] += dY[na + i];
    }
  });
}

/// Columns [begin, end) of every row; leading dimensions are kept.
template <typename T>
BasicVar<T> slice_cols(BasicVar<T> a, std::size_t begin, std::size_t end) {
  auto& g = detail::graph_of("slice_cols", {a});
  const auto& A = a.value();
  if (begin >= end || end > A.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for shape " + shape_str(A.shape()));
  }
  const std::size_t R = A.rows(), C = A.cols(), W = end - begin;
  Shape out_shape = A.shape();
  out_shape.back() = W;
  BasicTensor<T> Y(out_shape);
  for (std::size_t r = 0; r < R; ++r) std::copy_n(A.data() + r * C + begin, W, Y.data() + r * W);
  return g.push("slice_cols", std::move(Y), {a.id}, [R, C, W, begin](const BackwardContext<T>& ctx) {
    auto& dA = *ctx.in_grad[0];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < W; ++c) dA[r * C + begin + c] += ctx.out_grad[r * W + c];
  });
}

/// (B, S, d) -> (B, d), averaging over the sequence axis.
template <typename T>
BasicVar<T> mean_pool(BasicVar<T> a) {
  auto& g = detail::graph_of("mean_pool", {a});
  const auto& A = a.value();
  if (A.rank() != 3) throw ShapeError("mean_pool: expected (B, S, d), got " + shape_str(A.shape()));
  require_finite("mean_pool", A);
  const std::size_t B = A.dim(0), S = A.dim(1), d = A.dim(2);
  BasicTensor<T> Y(Shape{B, d});
  const T inv = T(1) / T(S);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t c = 0; c < d; ++c) Y[b * d + c] += A[(b * S + s) * d + c] * inv;
  return g.push("mean_pool", std::move(Y), {a.id}, [B, S, d, inv](const BackwardContext<T>& ctx) {
    auto& dA = *ctx.in_grad[0];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t c = 0; c < d; ++c) dA[(b * S + s) * d + c] += ctx.out_grad[b * d + c] * inv;
  });
}

/// Mean negative log-likelihood of labels under softmax(logits); logits (B, C).
template <typename T>
BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const std::int32_t> labels) {
  auto& g = detail::graph_of("cross_entropy", {logits});
  const auto& X = logits.value();
  if (X.rank() != 2) throw ShapeError("cross_entropy: logits must be (B, C), got " + shape_str(X.shape()));
  require_finite("cross_entropy", X);
  const std::size_t B = X.dim(0), C = X.dim(1);
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + shape_str(X.shape()));
  }
  std::vector<std::int32_t> y(labels.begin(), labels.end());
  std::vector<double> probs(B * C);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (y[b] < 0 || static_cast<std::size_t>(y[b]) >= C) {
      throw ValueError("cross_entropy: label " + std::to_string(y[b]) + " outside " + std::to_string(C) + " classes");
    }
    const T* x = X.data() + b * C;
    const double mx = *std::max_element(x, x + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(double(x[c]) - mx);
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(double(x[c]) - mx) / z;
    total += (mx + std::log(z)) - double(x[y[b]]);
  }
  BasicTensor<T> loss(Shape{}, static_cast<T>(total / double(B)));
  return g.push("cross_entropy", std::move(loss), {logits.id},
                [B, C, y = std::move(y), probs = std::move(probs)](const BackwardContext<T>& ctx) {
                  auto& dX = *ctx.in_grad[0];
                  const double g = double(ctx.out_grad[0]) / double(B);
                  for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t c = 0; c < C; ++c) {
                      const double onehot = (static_cast<std::int32_t>(c) == y[b]) ? 1.0 : 0.0;
                      dX[b * C + c] += static_cast<T>(g * (probs[b * C + c] - onehot));
                    }
                  }
                });
}

// ----------------------------------------------------------------------------
// Attention
// ----------------------------------------------------------------------------

/// Multi-head scaled dot-product attention over (B, S, d) inputs.
///
/// When prefixes are given, each sequence attends over [prefix_k; K] and
/// [prefix_v; V], with the (l, d) prefixes shared across the batch. Scores
/// are scaled by 1/sqrt(d / heads).
template <typename T>
BasicVar<T> attention(BasicVar<T> q, BasicVar<T> k, BasicVar<T> v, std::optional<BasicVar<T>> prefix_k,
                      std::optional<BasicVar<T>> prefix_v, std::size_t heads) {
  auto& g = detail::graph_of("attention", {q, k, v});
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  if (Q.rank() != 3 || K.shape() != Q.shape()) detail::shape_mismatch("attention", Q.shape(), K.shape());
  if (V.shape() != Q.shape()) detail::shape_mismatch("attention", Q.shape(), V.shape());
  if (prefix_k.has_value() != prefix_v.has_value()) throw Error("attention: prefix_k and prefix_v must be given together");
  const std::size_t B = Q.dim(0), S = Q.dim(1), d = Q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: hidden size " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  std::size_t l = 0;
  std::vector<std::size_t> inputs{q.id, k.id, v.id};
  if (prefix_k) {
    if (prefix_k->graph != &g || prefix_v->graph != &g) throw Error("attention: operands from different graphs");
    const auto& Pk = prefix_k->value();
    const auto& Pv = prefix_v->value();
    if (Pk.rank() != 2 || Pk.cols() != d) detail::shape_mismatch("attention", Q.shape(), Pk.shape());
    if (Pv.shape() != Pk.shape()) detail::shape_mismatch("attention", Pk.shape(), Pv.shape());
    require_finite("attention", Pk);
    require_finite("attention", Pv);
    l = Pk.dim(0);
    inputs.push_back(prefix_k->id);
    inputs.push_back(prefix_v->id);
  }
  require_finite("attention", Q);
  require_finite("attention", K);
  require_finite("attention", V);
  const std::size_t H = heads, dh = d / heads, N = l + S;
  const T scl = T(1.0 / std::sqrt(double(dh)));
  const T* Pk = l ? prefix_k->value().data() : nullptr;
  const T* Pv = l ? prefix_v->value().data() : nullptr;

  // Row j of the concatenated keys/values for batch b, head h.
  auto key_row = [&](const T* pk, const T* kk, std::size_t b, std::size_t h, std::size_t j) {
    return j < l ? pk + j * d + h * dh : kk + (b * S + (j - l)) * d + h * dh;
  };

  BasicTensor<T> Y(Q.shape());
  std::vector<T> probs(B * H * S * N);
  std::vector<double> row(N);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < S; ++i) {
        const T* qi = Q.data() + (b * S + i) * d + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < N; ++j) {
          const T* kj = key_row(Pk, K.data(), b, h, j);
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          row[j] = double(dot * scl);
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        T* p = probs.data() + ((b * H + h) * S + i) * N;
        T* yi = Y.data() + (b * S + i) * d + h * dh;
        for (std::size_t j = 0; j < N; ++j) {
          p[j] = static_cast<T>(row[j] / z);
          const T* vj = key_row(Pv, V.data(), b, h, j);
          for (std::size_t c = 0; c < dh; ++c) yi[c] += p[j] * vj[c];
        }
      }
    }
  }

  return g.push(
      "attention", std::move(Y), std::move(inputs),
      [B, S, d, H, dh, l, N, scl, probs = std::move(probs)](const BackwardContext<T>& ctx) {
        const T* Qd = ctx.in[0]->data();
        const T* Kd = ctx.in[1]->data();
        const T* Vd = ctx.in[2]->data();
        const T* Pk = l ? ctx.in[3]->data() : nullptr;
        const T* Pv = l ? ctx.in[4]->data() : nullptr;
        T* dQ = ctx.in_grad[0] ? ctx.in_grad[0]->data() : nullptr;
        T* dK = ctx.in_grad[1] ? ctx.in_grad[1]->data() : nullptr;
        T* dV = ctx.in_grad[2] ? ctx.in_grad[2]->data() : nullptr;
        T* dPk = (l && ctx.in_grad[3]) ? ctx.in_grad[3]->data() : nullptr;
        T* dPv = (l && ctx.in_grad[4]) ? ctx.in_grad[4]->data() : nullptr;
        const T* dY = ctx.out_grad.data();

        auto row_of = [&](const T* p, const T* x, std::size_t b, std::size_t h, std::size_t j) -> const T* {
          return j < l ? p + j * d + h * dh : x + (b * S + (j - l)) * d + h * dh;
        };
        auto grad_row = [&](T* p, T* x, std::size_t b, std::size_t h, std::size_t j) -> T* {
          T* base = j < l ? p : x;
          if (base == nullptr) return nullptr;
          return j < l ? p + j * d + h * dh : x + (b * S + (j - l)) * d + h * dh;
        };

        std::vector<T> dP(N), dS(N);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < S; ++i) {
              const T* p = probs.data() + ((b * H + h) * S + i) * N;
              const T* dyi = dY + (b * S + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < N; ++j) {
                const T* vj = row_of(Pv, Vd, b, h, j);
                T acc = 0;
                for (std::size_t c = 0; c < dh; ++c) acc += dyi[c] * vj[c];
                dP[j] = acc;
                dot += double(acc) * p[j];
                if (T* dvj = grad_row(dPv, dV, b, h, j)) {
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * dyi[c];
                }
              }
              for (std::size_t j = 0; j < N; ++j) dS[j] = p[j] * static_cast<T>(dP[j] - dot) * scl;
              const T* qi = Qd + (b * S + i) * d + h * dh;
              T* dqi = dQ ? dQ + (b * S + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < N; ++j) {
                const T* kj = row_of(Pk, Kd, b, h, j);
                if (dqi) {
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += dS[j] * kj[c];
                }
                if (T* dkj = grad_row(dPk, dK, b, h, j)) {
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += dS[j] * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace propetl

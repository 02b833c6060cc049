#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "propetl/random.hpp"
#include "propetl/tensor.hpp"

namespace propetl::testing {

template <typename T = float>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
double max_rel_diff(const BasicTensor<T>& a, const BasicTensor<T>& b, double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(double(a[i]) - double(b[i])) / std::max(std::abs(double(b[i])), floor));
  }
  return m;
}

// Scalar-loop references, all in double.

inline std::vector<double> ref_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t M,
                                      std::size_t K, std::size_t N) {
  std::vector<double> c(M * N, 0.0);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < K; ++k) c[i * N + j] += a[i * K + k] * b[k * N + j];
  return c;
}

inline std::vector<double> ref_softmax_row(const std::vector<double>& x) {
  double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> y(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (y[i] = std::exp(x[i] - mx));
  for (auto& v : y) v /= z;
  return y;
}

/// Single-head-per-slice attention over one sequence with optional prefixes:
/// q, k, v are (S, d); pk, pv are (l, d).
inline std::vector<double> ref_attention(const std::vector<double>& q, const std::vector<double>& k,
                                         const std::vector<double>& v, const std::vector<double>& pk,
                                         const std::vector<double>& pv, std::size_t S, std::size_t d, std::size_t l,
                                         std::size_t heads) {
  const std::size_t dh = d / heads;
  std::vector<double> out(S * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < S; ++i) {
      std::vector<double> logits;
      for (std::size_t j = 0; j < l + S; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          const double kv = j < l ? pk[j * d + h * dh + c] : k[(j - l) * d + h * dh + c];
          dot += q[i * d + h * dh + c] * kv;
        }
        logits.push_back(dot / std::sqrt(double(dh)));
      }
      auto p = ref_softmax_row(logits);
      for (std::size_t j = 0; j < l + S; ++j)
        for (std::size_t c = 0; c < dh; ++c) {
          const double vv = j < l ? pv[j * d + h * dh + c] : v[(j - l) * d + h * dh + c];
          out[i * d + h * dh + c] += p[j] * vv;
        }
    }
  }
  return out;
}

template <typename T>
std::vector<double> as_double(const BasicTensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

}  // namespace propetl::testing

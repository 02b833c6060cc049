#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "propetl/graph.hpp"
#include "propetl/random.hpp"
#include "propetl/tensor.hpp"

namespace propetl {

// ----------------------------------------------------------------------------
// Sparsity
// ----------------------------------------------------------------------------

/// Fraction of mask entries kept, held as an exact rational in (0, 1] so the
/// ones-count of a mask is integer arithmetic.
class Sparsity {
 public:
  static constexpr std::uint32_t kMaxDenominator = 1'000'000;

  Sparsity() = default;

  Sparsity(std::uint32_t numerator, std::uint32_t denominator) : num_(numerator), den_(denominator) {
    if (den_ == 0 || num_ == 0 || num_ > den_) {
      throw ValueError("sparsity: " + std::to_string(num_) + "/" + std::to_string(den_) + " outside (0, 1]");
    }
    const std::uint32_t g = std::gcd(num_, den_);
    num_ /= g;
    den_ /= g;
  }

  /// Closest rational with denominator <= kMaxDenominator (continued fractions).
  static Sparsity from_double(double k) {
    if (!(k > 0.0) || k > 1.0) throw ValueError("sparsity: k = " + std::to_string(k) + " outside (0, 1]");
    std::uint64_t p0 = 0, q0 = 1, p1 = 1, q1 = 0;
    double x = k;
    for (int iter = 0; iter < 64; ++iter) {
      const double a = std::floor(x);
      const auto ai = static_cast<std::uint64_t>(a);
      const std::uint64_t p2 = ai * p1 + p0, q2 = ai * q1 + q0;
      if (q2 > kMaxDenominator) break;
      p0 = p1;
      q0 = q1;
      p1 = p2;
      q1 = q2;
      const double frac = x - a;
      if (frac < 1e-12 || std::abs(double(p1) / double(q1) - k) < 1e-15) break;
      x = 1.0 / frac;
    }
    if (p1 == 0) p1 = 1, q1 = kMaxDenominator;
    return Sparsity(static_cast<std::uint32_t>(p1), static_cast<std::uint32_t>(q1));
  }

  std::uint32_t numerator() const { return num_; }
  std::uint32_t denominator() const { return den_; }
  double value() const { return double(num_) / double(den_); }
  bool is_dense() const { return num_ == den_; }

  /// round(k * n), half rounded up.
  std::uint64_t ones(std::uint64_t n) const {
    const unsigned __int128 twice = static_cast<unsigned __int128>(2) * num_ * n + den_;
    return static_cast<std::uint64_t>(twice / (static_cast<unsigned __int128>(2) * den_));
  }

  friend bool operator==(const Sparsity&, const Sparsity&) = default;

 private:
  std::uint32_t num_ = 1;
  std::uint32_t den_ = 1;
};

// ----------------------------------------------------------------------------
// Mask types
// ----------------------------------------------------------------------------

enum class CombineMode : std::uint8_t { Or = 0, And = 1, Add = 2 };

inline std::string_view to_string(CombineMode m) {
  switch (m) {
    case CombineMode::Or: return "or";
    case CombineMode::And: return "and";
    case CombineMode::Add: return "add";
  }
  return "?";
}

inline CombineMode parse_combine_mode(std::string_view s) {
  if (s == "or" || s == "OR") return CombineMode::Or;
  if (s == "and" || s == "AND") return CombineMode::And;
  if (s == "add" || s == "ADD") return CombineMode::Add;
  throw ValueError("unknown combine mode '" + std::string(s) + "'");
}

/// Real-valued scores behind one binary mask. Scores are a graph leaf so the
/// straight-through gradient reaches them.
template <typename T>
struct BasicMaskScores {
  BasicParameter<T> scores;
  Sparsity k;

  const std::string& name() const { return scores.name; }
  const Shape& shape() const { return scores.value.shape(); }

  template <typename U>
  BasicMaskScores<U> cast() const {
    return BasicMaskScores<U>{scores.template cast<U>(), k};
  }
};

using MaskScores = BasicMaskScores<float>;

/// One 0/1 entry per element, row-major.
struct BinaryMask {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::string n, Shape s, std::vector<std::uint8_t> b)
      : name(std::move(n)), shape(std::move(s)), bits(std::move(b)) {
    if (shape_numel(shape) != bits.size()) {
      throw ShapeError("mask '" + name + "': shape " + shape_str(shape) + " does not hold " +
                       std::to_string(bits.size()) + " bits");
    }
    for (auto& v : bits) {
      if (v > 1) throw ValueError("mask '" + name + "': entries must be 0 or 1");
    }
  }

  static BinaryMask filled(std::string n, Shape s, bool on) {
    const std::size_t count = shape_numel(s);
    return BinaryMask(std::move(n), std::move(s), std::vector<std::uint8_t>(count, on ? 1 : 0));
  }

  std::size_t numel() const { return bits.size(); }
  std::size_t popcount() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

  template <typename T = float>
  BasicTensor<T> to_tensor() const {
    return BasicTensor<T>(shape, std::vector<T>(bits.begin(), bits.end()));
  }

  friend bool operator==(const BinaryMask& a, const BinaryMask& b) {
    return a.shape == b.shape && a.bits == b.bits;
  }
};

// ----------------------------------------------------------------------------
// Operations
// ----------------------------------------------------------------------------

/// Indicator of the round(k*n) entries with the largest |value|. Ties go to
/// the lowest flat index.
template <typename T>
std::vector<std::uint8_t> topk_indicator(std::span<const T> values, Sparsity k) {
  const std::size_t n = values.size();
  if (n == 0) throw ValueError("threshold_topk: empty scores");
  for (const T v : values) {
    if (!std::isfinite(v)) throw ValueError("threshold_topk: non-finite score");
  }
  const std::size_t keep = k.ones(n);
  std::vector<std::uint8_t> out(n, 0);
  if (keep == n) {
    std::fill(out.begin(), out.end(), 1);
    return out;
  }
  if (keep == 0) return out;
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  auto before = [&](std::uint32_t a, std::uint32_t b) {
    const T fa = std::abs(values[a]), fb = std::abs(values[b]);
    return fa > fb || (fa == fb && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1), order.end(), before);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = 1;
  return out;
}

template <typename T>
BinaryMask threshold_topk(const BasicMaskScores<T>& s) {
  const auto& v = s.scores.value;
  return BinaryMask(s.name(), v.shape(), topk_indicator<T>(v.values(), s.k));
}

inline std::uint8_t combine_bits(std::uint8_t a, std::uint8_t b, CombineMode mode) {
  switch (mode) {
    case CombineMode::Or: return a | b;
    case CombineMode::And: return a & b;
    case CombineMode::Add: return static_cast<std::uint8_t>(std::min(a + b, 1));
  }
  return 0;
}

inline BinaryMask combine(const BinaryMask& a, const BinaryMask& b, CombineMode mode) {
  if (a.shape != b.shape) {
    throw ShapeError("combine: mask shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) + " differ");
  }
  std::vector<std::uint8_t> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = combine_bits(a.bits[i], b.bits[i], mode);
  return BinaryMask(a.name, a.shape, std::move(out));
}

inline double density(const BinaryMask& m) {
  if (m.numel() == 0) throw ValueError("density: empty mask");
  return double(m.popcount()) / double(m.numel());
}

/// LSB-first within each byte, row-major, final byte zero-padded.
inline std::vector<std::uint8_t> pack(const BinaryMask& m) {
  std::vector<std::uint8_t> out((m.numel() + 7) / 8, 0);
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m.bits[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return out;
}

inline BinaryMask unpack(std::span<const std::uint8_t> bytes, Shape shape, std::string name = {}) {
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != (n + 7) / 8) {
    throw FormatError("unpack: mask '" + name + "' of " + std::to_string(n) + " bits needs " +
                      std::to_string((n + 7) / 8) + " bytes, got " + std::to_string(bytes.size()));
  }
  if (n % 8 != 0 && (bytes.back() >> (n % 8)) != 0) {
    throw FormatError("unpack: mask '" + name + "' has non-zero pad bits");
  }
  std::vector<std::uint8_t> bits(n);
  for (std::size_t i = 0; i < n; ++i) bits[i] = (bytes[i / 8] >> (i % 8)) & 1u;
  return BinaryMask(std::move(name), std::move(shape), std::move(bits));
}

/// Scores i.i.d. uniform in [-0.1, 0.1].
template <typename T>
BasicMaskScores<T> init_scores(std::string name, Shape shape, Sparsity k, Rng& rng) {
  BasicTensor<T> v(std::move(shape));
  for (auto& x : v.values()) x = static_cast<T>(rng.uniform(-0.1, 0.1));
  return BasicMaskScores<T>{BasicParameter<T>(std::move(name), std::move(v)), k};
}

/// Uniformly random mask with exactly round(k*n) ones.
inline BinaryMask random_mask(std::string name, Shape shape, Sparsity k, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  const std::size_t keep = k.ones(n);
  for (std::size_t i = 0; i < keep; ++i) {  // partial Fisher-Yates
    const std::size_t j = i + rng.below(n - i);
    std::swap(order[i], order[j]);
  }
  std::vector<std::uint8_t> bits(n, 0);
  for (std::size_t i = 0; i < keep; ++i) bits[order[i]] = 1;
  return BinaryMask(std::move(name), std::move(shape), std::move(bits));
}

// ----------------------------------------------------------------------------
// Straight-through graph ops
// ----------------------------------------------------------------------------

/// Forward: threshold_topk of the scores as a 0/1 tensor. Backward: the
/// upstream gradient is passed to the scores unchanged.
template <typename T>
BasicVar<T> binarize_topk_ste(BasicVar<T> scores, Sparsity k) {
  if (scores.graph == nullptr) throw Error("binarize_topk_ste: unbound variable");
  const auto& s = scores.value();
  auto bits = topk_indicator<T>(s.values(), k);
  BasicTensor<T> m(s.shape(), std::vector<T>(bits.begin(), bits.end()));
  return scores.graph->push("binarize_topk_ste", std::move(m), {scores.id}, [](const BackwardContext<T>& ctx) {
    auto& ds = *ctx.in_grad[0];
    for (std::size_t i = 0; i < ds.numel(); ++i) ds[i] += ctx.out_grad[i];
  });
}

/// combine() on 0/1 tensors; the upstream gradient reaches both operands
/// unchanged for every mode.
template <typename T>
BasicVar<T> combine_ste(BasicVar<T> a, BasicVar<T> b, CombineMode mode) {
  if (a.graph == nullptr || a.graph != b.graph) throw Error("combine_ste: operands from different graphs");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) {
    throw ShapeError("combine: mask shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()) + " differ");
  }
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = combine_bits(A[i] != T(0), B[i] != T(0), mode);
  }
  return a.graph->push("combine_ste", std::move(out), {a.id, b.id}, [](const BackwardContext<T>& ctx) {
    for (auto* slot : ctx.in_grad) {
      if (slot == nullptr) continue;
      for (std::size_t i = 0; i < slot->numel(); ++i) (*slot)[i] += ctx.out_grad[i];
    }
  });
}

}  // namespace propetl

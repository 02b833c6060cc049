#pragma once

#include <cstdint>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "propetl/masking.hpp"
#include "propetl/petl.hpp"

namespace propetl {

/// rho parameters stored at b bits each.
struct BitGroup {
  std::string name;
  std::uint64_t count = 0;
  std::uint32_t bits = 32;
};

namespace detail {

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r = 0;
  if (__builtin_mul_overflow(a, b, &r)) throw ValueError("bls: bit count overflows 64 bits");
  return r;
}

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r = 0;
  if (__builtin_add_overflow(a, b, &r)) throw ValueError("bls: bit count overflows 64 bits");
  return r;
}

inline void require_dims(std::uint64_t d, std::uint64_t size, std::uint64_t layers) {
  if (d == 0 || size == 0 || layers == 0) throw ValueError("bls: d, size and L must be positive");
}

}  // namespace detail

/// Sum of count * bits over the groups.
inline std::uint64_t bls(std::span<const BitGroup> groups) {
  std::uint64_t total = 0;
  for (const auto& g : groups) {
    if (g.bits == 0) throw ValueError("bls: group '" + g.name + "' has zero bit width");
    total = detail::checked_add(total, detail::checked_mul(g.count, g.bits));
  }
  return total;
}

inline std::uint64_t bls(std::initializer_list<BitGroup> groups) {
  return bls(std::span<const BitGroup>(groups.begin(), groups.size()));
}

/// Elements of one prototype that receive a mask: the weight matrices of
/// adapter / LoRA (never biases), the (l, 2d) activations of prefix.
inline std::uint64_t masked_elements(Variant v, std::uint64_t d, std::uint64_t size) {
  switch (v) {
    case Variant::Adapter: return 2 * size * d;
    case Variant::Lora: return 4 * size * d;
    case Variant::Prefix: return 2 * size * d;
  }
  throw ValueError("bls: unknown variant");
}

/// 32-bit parameters of one module as stored: adapter 2 bn d + bn + d,
/// LoRA 4 bn d, prefix the materialized 2 l d.
inline std::uint64_t module_params(Variant v, std::uint64_t d, std::uint64_t size) {
  switch (v) {
    case Variant::Adapter: return 2 * size * d + size + d;
    case Variant::Lora: return 4 * size * d;
    case Variant::Prefix: return 2 * size * d;
  }
  throw ValueError("bls: unknown variant");
}

struct BlsReport {
  std::vector<BitGroup> groups;
  std::optional<std::uint64_t> baseline_bits;
  std::string baseline_name = "vanilla";
  std::optional<std::uint64_t> full_model_bits;

  std::uint64_t total_bits() const { return bls(groups); }
  std::optional<double> ratio() const {
    if (!baseline_bits || *baseline_bits == 0) return std::nullopt;
    return double(total_bits()) / double(*baseline_bits);
  }

  /// One line per group (name, rho, b, bits), then the total and ratios.
  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(24) << "group" << std::right << std::setw(14) << "rho" << std::setw(6) << "b"
       << std::setw(16) << "bits" << '\n';
    for (const auto& g : groups) {
      os << std::left << std::setw(24) << g.name << std::right << std::setw(14) << g.count << std::setw(6) << g.bits
         << std::setw(16) << detail::checked_mul(g.count, g.bits) << '\n';
    }
    os << std::left << std::setw(44) << "total" << std::right << std::setw(16) << total_bits() << '\n';
    if (auto r = ratio()) {
      os << "ratio vs " << baseline_name << " (" << *baseline_bits << " bits): " << std::setprecision(6) << *r << '\n';
    }
    if (full_model_bits) {
      os << "fraction of full model (" << *full_model_bits << " bits): " << std::setprecision(6)
         << 100.0 * double(total_bits()) / double(*full_model_bits) << "%\n";
    }
    return os.str();
  }
};

/// Shared 32-bit prototype plus 1-bit masks for L layers and T tasks.
inline BlsReport bls_report_propetl(Variant v, std::uint64_t d, std::uint64_t size, std::uint64_t layers,
                                    std::uint64_t tasks = 0) {
  detail::require_dims(d, size, layers);
  BlsReport r;
  const std::uint64_t m = masked_elements(v, d, size);
  r.groups.push_back({"prototype", module_params(v, d, size), 32});
  r.groups.push_back({"layer masks", detail::checked_mul(m, layers), 1});
  if (tasks > 0) r.groups.push_back({"task masks", detail::checked_mul(m, tasks), 1});
  return r;
}

/// adapter 32(2 bn d + bn + d) + 2 bn d L; LoRA 32*4 bn d + 4 bn d L;
/// prefix 32*2 l d + 2 l d L.
inline std::uint64_t bls_propetl(Variant v, std::uint64_t d, std::uint64_t size, std::uint64_t layers) {
  return bls_report_propetl(v, d, size, layers).total_bits();
}

/// One independent 32-bit module per layer.
inline std::uint64_t bls_vanilla(Variant v, std::uint64_t d, std::uint64_t size, std::uint64_t layers) {
  detail::require_dims(d, size, layers);
  return bls({{"modules", detail::checked_mul(module_params(v, d, size), layers), 32}});
}

/// An independent module per layer with pruned entries not counted. Each
/// masked tensor keeps round(k n) entries:
///   adapter 32 (2 k bn d + bn + d) L, LoRA 32 * 4 k bn d L, prefix 32 * 2 k l d L.
/// `literal_prefix` selects the prefix expression 2 k l d L without the
/// factor 32.
inline std::uint64_t bls_only_mask(Variant v, std::uint64_t d, std::uint64_t size, std::uint64_t layers, Sparsity k,
                                   bool literal_prefix = false) {
  detail::require_dims(d, size, layers);
  const std::uint64_t kept = k.ones(size * d);
  switch (v) {
    case Variant::Adapter: return bls({{"kept", detail::checked_mul(2 * kept + size + d, layers), 32}});
    case Variant::Lora: return bls({{"kept", detail::checked_mul(4 * kept, layers), 32}});
    case Variant::Prefix:
      return bls({{"kept", detail::checked_mul(2 * kept, layers), literal_prefix ? 1u : 32u}});
  }
  throw ValueError("bls: unknown variant");
}

/// p + (p / 32)(L + T) for a single-module bit count p.
inline std::uint64_t bls_multitask(std::uint64_t p, std::uint64_t layers, std::uint64_t tasks) {
  if (p % 32 != 0) throw ValueError("bls_multitask: p = " + std::to_string(p) + " is not a multiple of 32");
  return detail::checked_add(p, detail::checked_mul(p / 32, detail::checked_add(layers, tasks)));
}

/// Stored bits of an attachment configuration, per mode:
///   propetl     shared prototype + layer (and task) masks
///   only_share  shared prototype
///   random_mask shared prototype + one seeded mask draw per layer
///   only_mask   per-layer pruned modules
inline std::uint64_t bls_for(const AttachmentConfig& c, bool literal_prefix = false) {
  switch (c.mode) {
    case Mode::Propetl: return bls_report_propetl(c.variant, c.d, c.size, c.num_layers, c.num_tasks).total_bits();
    case Mode::RandomMask: return bls_report_propetl(c.variant, c.d, c.size, c.num_layers).total_bits();
    case Mode::OnlyShare: return bls_vanilla(c.variant, c.d, c.size, 1);
    case Mode::OnlyMask: return bls_only_mask(c.variant, c.d, c.size, c.num_layers, c.k, literal_prefix);
  }
  throw ValueError("bls: unknown mode");
}

}  // namespace propetl

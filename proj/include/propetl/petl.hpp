#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "propetl/graph.hpp"
#include "propetl/masking.hpp"
#include "propetl/ops.hpp"
#include "propetl/random.hpp"
#include "propetl/tensor.hpp"

namespace propetl {

enum class Variant : std::uint8_t { Adapter = 0, Lora = 1, Prefix = 2 };

/// How the prototype is used across layers.
///   Propetl    - one shared prototype, learned per-layer (and per-task) masks
///   OnlyShare  - one shared prototype, no masks
///   OnlyMask   - an independent prototype per layer, each with learned masks
///   RandomMask - one shared prototype, a fresh random mask on every forward
enum class Mode : std::uint8_t { Propetl = 0, OnlyShare = 1, OnlyMask = 2, RandomMask = 3 };

enum class Activation : std::uint8_t { Relu = 0, Gelu = 1 };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Adapter: return "adapter";
    case Variant::Lora: return "lora";
    case Variant::Prefix: return "prefix";
  }
  return "?";
}

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::Propetl: return "propetl";
    case Mode::OnlyShare: return "only_share";
    case Mode::OnlyMask: return "only_mask";
    case Mode::RandomMask: return "random_mask";
  }
  return "?";
}

inline std::string_view to_string(Activation a) { return a == Activation::Relu ? "relu" : "gelu"; }

inline Variant parse_variant(std::string_view s) {
  if (s == "adapter") return Variant::Adapter;
  if (s == "lora") return Variant::Lora;
  if (s == "prefix") return Variant::Prefix;
  throw ValueError("unknown variant '" + std::string(s) + "'");
}

inline Mode parse_mode(std::string_view s) {
  if (s == "propetl") return Mode::Propetl;
  if (s == "only_share" || s == "only-share") return Mode::OnlyShare;
  if (s == "only_mask" || s == "only-mask") return Mode::OnlyMask;
  if (s == "random_mask" || s == "random-mask") return Mode::RandomMask;
  throw ValueError("unknown mode '" + std::string(s) + "'");
}

inline Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::Relu;
  if (s == "gelu") return Activation::Gelu;
  throw ValueError("unknown activation '" + std::string(s) + "'");
}

template <typename T>
BasicVar<T> activate(BasicVar<T> x, Activation a) {
  return a == Activation::Relu ? relu(x) : gelu(x);
}

/// A tensor that receives a mask: its name and shape.
struct MaskTarget {
  std::string name;
  Shape shape;
};

// ----------------------------------------------------------------------------
// Prototypes
// ----------------------------------------------------------------------------

namespace detail {

template <typename T>
BasicTensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace detail

/// Bottleneck adapter: h + f(h W_down + b_down) W_up + b_up.
template <typename T>
struct AdapterPrototype {
  std::size_t d = 0;
  std::size_t bn = 0;
  Activation act = Activation::Relu;
  BasicParameter<T> w_down, b_down, w_up, b_up;

  static AdapterPrototype init(std::size_t d, std::size_t bn, Activation act, Rng& rng, std::string_view prefix = "") {
    const std::string p(prefix);
    AdapterPrototype a;
    a.d = d;
    a.bn = bn;
    a.act = act;
    a.w_down = {p + "w_down", detail::normal_tensor<T>({d, bn}, 0.02, rng)};
    a.b_down = {p + "b_down", BasicTensor<T>({bn})};
    a.w_up = {p + "w_up", detail::normal_tensor<T>({bn, d}, 0.02, rng)};
    a.b_up = {p + "b_up", BasicTensor<T>({d})};
    return a;
  }

  std::size_t param_count() const { return 2 * bn * d + bn + d; }
  std::vector<MaskTarget> mask_targets() const { return {{"w_down", {d, bn}}, {"w_up", {bn, d}}}; }
  std::vector<BasicParameter<T>*> parameters() { return {&w_down, &b_down, &w_up, &b_up}; }
  std::vector<const BasicParameter<T>*> parameters() const { return {&w_down, &b_down, &w_up, &b_up}; }
};

/// Low-rank residual at the query and value projections:
/// h + alpha * x W_down W_up, one down/up pair per site.
template <typename T>
struct LoraPrototype {
  std::size_t d = 0;
  std::size_t bn = 0;
  double alpha = 32.0;
  BasicParameter<T> q_down, q_up, v_down, v_up;

  static LoraPrototype init(std::size_t d, std::size_t bn, double alpha, Rng& rng, std::string_view prefix = "") {
    const std::string p(prefix);
    LoraPrototype a;
    a.d = d;
    a.bn = bn;
    a.alpha = alpha;
    a.q_down = {p + "q_down", detail::normal_tensor<T>({d, bn}, 0.02, rng)};
    a.q_up = {p + "q_up", BasicTensor<T>({bn, d})};
    a.v_down = {p + "v_down", detail::normal_tensor<T>({d, bn}, 0.02, rng)};
    a.v_up = {p + "v_up", BasicTensor<T>({bn, d})};
    return a;
  }

  std::size_t param_count() const { return 4 * bn * d; }
  std::vector<MaskTarget> mask_targets() const {
    return {{"q_down", {d, bn}}, {"q_up", {bn, d}}, {"v_down", {d, bn}}, {"v_up", {bn, d}}};
  }
  std::vector<BasicParameter<T>*> parameters() { return {&q_down, &q_up, &v_down, &v_up}; }
  std::vector<const BasicParameter<T>*> parameters() const { return {&q_down, &q_up, &v_down, &v_up}; }
};

/// Reparameterized prefixes: P = P' W with P (l, 2d) split into P_k and P_v.
///
/// A prototype restored from a checkpoint carries the materialized P instead
/// of P' and W.
template <typename T>
struct PrefixPrototype {
  std::size_t d = 0;
  std::size_t l = 0;
  std::size_t r = 0;
  BasicParameter<T> p_prime, w_reparam;
  std::optional<BasicParameter<T>> baked;

  static PrefixPrototype init(std::size_t d, std::size_t l, std::size_t r, Rng& rng, std::string_view prefix = "") {
    if (l == 0 || r == 0) throw ValueError("prefix: length and reparameterization width must be positive");
    const std::string p(prefix);
    PrefixPrototype a;
    a.d = d;
    a.l = l;
    a.r = r;
    a.p_prime = {p + "p_prime", detail::normal_tensor<T>({l, r}, 0.02, rng)};
    a.w_reparam = {p + "w_reparam", detail::normal_tensor<T>({r, 2 * d}, 0.02, rng)};
    return a;
  }

  /// Inference-only prototype around a stored P of shape (l, 2d).
  static PrefixPrototype from_materialized(BasicTensor<T> p, std::string_view prefix = "") {
    if (p.rank() != 2 || p.cols() % 2 != 0) throw ShapeError("prefix: stored P must be (l, 2d), got " + shape_str(p.shape()));
    PrefixPrototype a;
    a.l = p.dim(0);
    a.d = p.cols() / 2;
    a.baked = BasicParameter<T>(std::string(prefix) + "p", std::move(p), false);
    return a;
  }

  std::size_t param_count() const { return baked ? 2 * l * d : l * r + r * 2 * d; }
  std::vector<MaskTarget> mask_targets() const { return {{"p_k", {l, d}}, {"p_v", {l, d}}}; }
  std::vector<BasicParameter<T>*> parameters() {
    if (baked) return {&*baked};
    return {&p_prime, &w_reparam};
  }
  std::vector<const BasicParameter<T>*> parameters() const {
    if (baked) return {&*baked};
    return {&p_prime, &w_reparam};
  }

  /// P = P' W evaluated outside a graph.
  BasicTensor<T> materialize() const {
    if (baked) return baked->value;
    BasicGraph<T> g;
    BasicParameter<T> a("p_prime", p_prime.value, false), b("w", w_reparam.value, false);
    return matmul(g.param(a), g.param(b)).value();
  }
};

template <typename T>
using Prototype = std::variant<AdapterPrototype<T>, LoraPrototype<T>, PrefixPrototype<T>>;

template <typename T>
Variant variant_of(const Prototype<T>& p) {
  return static_cast<Variant>(p.index());
}

template <typename T>
std::vector<MaskTarget> mask_targets(const Prototype<T>& p) {
  return std::visit([](const auto& x) { return x.mask_targets(); }, p);
}

template <typename T>
std::vector<BasicParameter<T>*> parameters(Prototype<T>& p) {
  return std::visit([](auto& x) { return x.parameters(); }, p);
}

template <typename T>
std::vector<const BasicParameter<T>*> parameters(const Prototype<T>& p) {
  return std::visit([](const auto& x) { return x.parameters(); }, p);
}

template <typename T>
std::size_t param_count(const Prototype<T>& p) {
  return std::visit([](const auto& x) { return x.param_count(); }, p);
}

template <typename T>
std::size_t hidden_dim(const Prototype<T>& p) {
  return std::visit([](const auto& x) { return x.d; }, p);
}

// ----------------------------------------------------------------------------
// Module forwards
// ----------------------------------------------------------------------------

/// theta (.) mask, with a shape check naming both operands.
template <typename T>
BasicVar<T> materialize_subnetwork(BasicVar<T> theta, BasicVar<T> mask) {
  if (theta.shape() != mask.shape()) {
    throw ShapeError("materialize_subnetwork: prototype " + shape_str(theta.shape()) + " vs mask " +
                     shape_str(mask.shape()));
  }
  return mul(theta, mask);
}

template <typename T>
BasicTensor<T> materialize_subnetwork(const BasicTensor<T>& theta, const BinaryMask& mask) {
  if (theta.shape() != mask.shape) {
    throw ShapeError("materialize_subnetwork: prototype " + shape_str(theta.shape()) + " vs mask " + shape_str(mask.shape));
  }
  BasicTensor<T> out = theta;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mask.bits[i] ? out[i] : T(0);
  return out;
}

template <typename T>
struct MaskPair {
  BasicVar<T> first;
  BasicVar<T> second;
};

template <typename T>
struct AdapterWeights {
  BasicVar<T> w_down, b_down, w_up, b_up;
};

/// h (..., d) -> h + f(h W~_down + b_down) W~_up + b_up. Biases are never masked.
template <typename T>
BasicVar<T> adapter_forward(BasicVar<T> h, const std::type_identity_t<AdapterWeights<T>>& w, Activation act,
                            const std::type_identity_t<std::optional<MaskPair<T>>>& masks = std::nullopt) {
  if (h.value().cols() != w.w_down.shape().at(0)) {
    throw ShapeError("adapter_forward: hidden size " + std::to_string(h.value().cols()) + " vs W_down " +
                     shape_str(w.w_down.shape()));
  }
  BasicVar<T> wd = masks ? materialize_subnetwork(w.w_down, masks->first) : w.w_down;
  BasicVar<T> wu = masks ? materialize_subnetwork(w.w_up, masks->second) : w.w_up;
  auto z = activate(add(matmul(h, wd), w.b_down), act);
  return add(h, add(matmul(z, wu), w.b_up));
}

template <typename T>
struct LoraPair {
  BasicVar<T> down, up;
};

/// h + alpha * x W~_down W~_up.
template <typename T>
BasicVar<T> lora_forward(BasicVar<T> h, BasicVar<T> x, const std::type_identity_t<LoraPair<T>>& w, double alpha,
                         const std::type_identity_t<std::optional<MaskPair<T>>>& masks = std::nullopt) {
  if (h.shape() != x.shape()) throw ShapeError("lora_forward: h " + shape_str(h.shape()) + " vs x " + shape_str(x.shape()));
  if (x.value().cols() != w.down.shape().at(0)) {
    throw ShapeError("lora_forward: input size " + std::to_string(x.value().cols()) + " vs W_down " + shape_str(w.down.shape()));
  }
  BasicVar<T> wd = masks ? materialize_subnetwork(w.down, masks->first) : w.down;
  BasicVar<T> wu = masks ? materialize_subnetwork(w.up, masks->second) : w.up;
  return add(h, scale(matmul(matmul(x, wd), wu), static_cast<T>(alpha)));
}

template <typename T>
struct PrefixKV {
  BasicVar<T> p_k, p_v;
};

/// P_k, P_v from the prototype, recomputed from P' W on every call.
template <typename T>
PrefixKV<T> prefix_keys_values(BasicGraph<T>& g, PrefixPrototype<T>& proto) {
  BasicVar<T> p = proto.baked ? g.param(*proto.baked) : matmul(g.param(proto.p_prime), g.param(proto.w_reparam));
  return {slice_cols(p, 0, proto.d), slice_cols(p, proto.d, 2 * proto.d)};
}

/// attention(Q, [P_k (.) m_k; K], [P_v (.) m_v; V]).
template <typename T>
BasicVar<T> prefix_forward(BasicVar<T> q, BasicVar<T> k, BasicVar<T> v, const std::optional<PrefixKV<T>>& prefix,
                           const std::optional<MaskPair<T>>& masks, std::size_t heads) {
  if (!prefix) {
    if (masks) throw ValueError("prefix_forward: masks given without prefixes (l = 0)");
    return attention<T>(q, k, v, std::nullopt, std::nullopt, heads);
  }
  BasicVar<T> pk = masks ? materialize_subnetwork(prefix->p_k, masks->first) : prefix->p_k;
  BasicVar<T> pv = masks ? materialize_subnetwork(prefix->p_v, masks->second) : prefix->p_v;
  return attention<T>(q, k, v, pk, pv, heads);
}

// ----------------------------------------------------------------------------
// Attachment
// ----------------------------------------------------------------------------

struct AttachmentConfig {
  Variant variant = Variant::Adapter;
  Mode mode = Mode::Propetl;
  Sparsity k = Sparsity(1, 2);
  Sparsity task_k = Sparsity(3, 10);
  CombineMode combine = CombineMode::Or;
  std::size_t d = 0;
  std::size_t size = 0;           // bn for adapter / LoRA, l for prefix
  std::size_t prefix_width = 0;   // r; 0 selects 2 * l
  Activation activation = Activation::Relu;
  double lora_alpha = 48.0;
  std::size_t num_layers = 0;
  std::size_t num_tasks = 0;      // task masks are created when > 0 (propetl / only_mask)

  bool has_masks() const { return mode == Mode::Propetl || mode == Mode::OnlyMask; }
  /// Modes whose final model carries layer masks (random_mask keeps one seeded draw).
  bool stores_masks() const { return mode != Mode::OnlyShare; }
};

/// Prototype(s), mask scores and, once frozen, the binary masks that replace
/// the scores.
template <typename T>
struct Attachment {
  AttachmentConfig config;
  std::vector<Prototype<T>> prototypes;                         // 1 shared, or one per layer (OnlyMask)
  std::vector<std::vector<BasicMaskScores<T>>> layer_scores;    // [layer][target]
  std::vector<std::vector<BasicMaskScores<T>>> task_scores;     // [task][target]
  std::vector<std::vector<BinaryMask>> layer_masks;             // [layer][target], set when frozen
  std::vector<std::vector<BinaryMask>> task_masks;              // [task][target]
  std::uint64_t seed = 0;

  bool frozen() const { return !layer_masks.empty(); }

  Prototype<T>& prototype_for_layer(std::size_t layer) {
    return prototypes.size() == 1 ? prototypes.front() : prototypes.at(layer);
  }
  const Prototype<T>& prototype_for_layer(std::size_t layer) const {
    return prototypes.size() == 1 ? prototypes.front() : prototypes.at(layer);
  }

  std::vector<MaskTarget> targets() const { return mask_targets(prototypes.front()); }

  std::vector<BasicParameter<T>*> prototype_parameters() {
    std::vector<BasicParameter<T>*> out;
    for (auto& p : prototypes)
      for (auto* q : parameters(p)) out.push_back(q);
    return out;
  }

  std::vector<BasicParameter<T>*> score_parameters() {
    std::vector<BasicParameter<T>*> out;
    for (auto& layer : layer_scores)
      for (auto& s : layer) out.push_back(&s.scores);
    for (auto& task : task_scores)
      for (auto& s : task) out.push_back(&s.scores);
    return out;
  }

  /// Hard masks for a layer, from frozen masks or thresholded scores.
  std::vector<BinaryMask> current_layer_masks(std::size_t layer) const {
    if (!layer_masks.empty()) return layer_masks.at(layer);
    std::vector<BinaryMask> out;
    for (const auto& s : layer_scores.at(layer)) out.push_back(threshold_topk(s));
    return out;
  }

  std::vector<BinaryMask> current_task_masks(std::size_t task) const {
    if (!task_masks.empty()) return task_masks.at(task);
    std::vector<BinaryMask> out;
    for (const auto& s : task_scores.at(task)) out.push_back(threshold_topk(s));
    return out;
  }

  /// Computes the final masks once and discards the scores.
  void freeze() {
    if (!layer_masks.empty()) return;
    if (config.mode == Mode::RandomMask) {
      Rng rng = Rng::derive(seed, "final-random-masks");
      const auto ts = targets();
      for (std::size_t l = 0; l < config.num_layers; ++l) {
        auto& layer = layer_masks.emplace_back();
        for (const auto& t : ts) layer.push_back(random_mask(t.name, t.shape, config.k, rng));
      }
      return;
    }
    if (!config.has_masks()) return;
    std::vector<std::vector<BinaryMask>> layers, tasks;
    for (std::size_t l = 0; l < layer_scores.size(); ++l) layers.push_back(current_layer_masks(l));
    for (std::size_t t = 0; t < task_scores.size(); ++t) tasks.push_back(current_task_masks(t));
    layer_masks = std::move(layers);
    task_masks = std::move(tasks);
    layer_scores.clear();
    task_scores.clear();
  }

  template <typename U>
  Attachment<U> cast() const;
};

namespace detail {

template <typename U, typename T>
Prototype<U> cast_prototype(const Prototype<T>& p) {
  return std::visit(
      [](const auto& x) -> Prototype<U> {
        using X = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<X, AdapterPrototype<T>>) {
          return AdapterPrototype<U>{x.d, x.bn, x.act, x.w_down.template cast<U>(), x.b_down.template cast<U>(),
                                     x.w_up.template cast<U>(), x.b_up.template cast<U>()};
        } else if constexpr (std::is_same_v<X, LoraPrototype<T>>) {
          return LoraPrototype<U>{x.d, x.bn, x.alpha, x.q_down.template cast<U>(), x.q_up.template cast<U>(),
                                  x.v_down.template cast<U>(), x.v_up.template cast<U>()};
        } else {
          PrefixPrototype<U> out{x.d, x.l, x.r, x.p_prime.template cast<U>(), x.w_reparam.template cast<U>(), std::nullopt};
          if (x.baked) out.baked = x.baked->template cast<U>();
          return out;
        }
      },
      p);
}

}  // namespace detail

template <typename T>
template <typename U>
Attachment<U> Attachment<T>::cast() const {
  Attachment<U> out;
  out.config = config;
  for (const auto& p : prototypes) out.prototypes.push_back(detail::cast_prototype<U, T>(p));
  for (const auto& layer : layer_scores) {
    out.layer_scores.emplace_back();
    for (const auto& s : layer) out.layer_scores.back().push_back(s.template cast<U>());
  }
  for (const auto& task : task_scores) {
    out.task_scores.emplace_back();
    for (const auto& s : task) out.task_scores.back().push_back(s.template cast<U>());
  }
  out.layer_masks = layer_masks;
  out.task_masks = task_masks;
  out.seed = seed;
  return out;
}

template <typename T>
Prototype<T> make_prototype(const AttachmentConfig& c, Rng& rng, std::string_view prefix = "") {
  switch (c.variant) {
    case Variant::Adapter: return AdapterPrototype<T>::init(c.d, c.size, c.activation, rng, prefix);
    case Variant::Lora: return LoraPrototype<T>::init(c.d, c.size, c.lora_alpha, rng, prefix);
    case Variant::Prefix:
      return PrefixPrototype<T>::init(c.d, c.size, c.prefix_width ? c.prefix_width : 2 * c.size, rng, prefix);
  }
  throw ValueError("make_prototype: unknown variant");
}

inline void validate(const AttachmentConfig& c) {
  if (c.d == 0 || c.size == 0 || c.num_layers == 0) {
    throw ValueError("attachment: d, size and num_layers must be positive");
  }
  if (c.variant == Variant::Lora && !(c.lora_alpha > 0.0)) throw ValueError("attachment: LoRA alpha must be positive");
  if (c.num_tasks > 0 && c.mode == Mode::OnlyMask) {
    throw ValueError("attachment: task masks require a shared prototype (mode propetl)");
  }
}

/// Fresh attachment. Prototype values come from the "prototype" stream of the
/// seed and scores from the "scores" stream, so modes sharing a seed share
/// prototype initialization.
template <typename T>
Attachment<T> make_attachment(const AttachmentConfig& c, std::uint64_t seed) {
  validate(c);
  Attachment<T> a;
  a.config = c;
  a.seed = seed;
  Rng proto_rng = Rng::derive(seed, "prototype");
  if (c.mode == Mode::OnlyMask) {
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      a.prototypes.push_back(make_prototype<T>(c, proto_rng, "layer" + std::to_string(l) + "."));
    }
  } else {
    a.prototypes.push_back(make_prototype<T>(c, proto_rng));
  }
  if (c.has_masks()) {
    Rng score_rng = Rng::derive(seed, "scores");
    const auto targets = a.targets();
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      auto& layer = a.layer_scores.emplace_back();
      for (const auto& t : targets) {
        layer.push_back(init_scores<T>("layer" + std::to_string(l) + "." + t.name, t.shape, c.k, score_rng));
      }
    }
    Rng task_rng = Rng::derive(seed, "task-scores");
    for (std::size_t t = 0; t < c.num_tasks; ++t) {
      auto& task = a.task_scores.emplace_back();
      for (const auto& tg : targets) {
        task.push_back(init_scores<T>("task" + std::to_string(t) + "." + tg.name, tg.shape, c.task_k, task_rng));
      }
    }
  }
  return a;
}

// ----------------------------------------------------------------------------
// Per-forward binding
// ----------------------------------------------------------------------------

/// Masks resolved for one (layer, task) during a forward pass.
template <typename T>
struct ResolvedMasks {
  std::vector<BasicVar<T>> masks;          // one per target; empty when unmasked
  std::vector<BasicVar<T>> layer_masks;    // pre-combination (training only)
  std::vector<BasicVar<T>> task_masks;
};

/// Per-layer record of the materialized sub-network, for inspection.
template <typename T>
struct LayerTrace {
  std::vector<BasicVar<T>> theta;   // prototype targets as bound
  std::vector<BasicVar<T>> masks;
  std::vector<BasicVar<T>> theta_sub;
};

template <typename T>
struct ForwardOptions {
  bool training = false;
  std::optional<std::size_t> task;
  Rng* random_mask_rng = nullptr;    // RandomMask mode
  /// Replaces the mask of (layer, target) with an arbitrary tensor.
  std::function<std::optional<BasicVar<T>>(std::size_t layer, std::size_t target)> mask_hook;
  std::vector<LayerTrace<T>>* trace = nullptr;
};

/// The attachment bound into one graph: each prototype's parameters become
/// leaves exactly once, so shared use across layers accumulates gradients.
template <typename T>
class BoundAttachment {
 public:
  BoundAttachment(BasicGraph<T>& g, Attachment<T>& a, const ForwardOptions<T>& opt) : g_(g), a_(a), opt_(opt) {
    if (opt.task && a.config.has_masks() && a.config.num_tasks > 0 && *opt.task >= a.config.num_tasks) {
      throw ValueError("attachment: unknown task id " + std::to_string(*opt.task));
    }
    if (a.config.mode == Mode::RandomMask && !a.frozen() && opt.random_mask_rng == nullptr) {
      throw ValueError("attachment: random_mask mode needs a mask generator");
    }
    for (auto& p : a.prototypes) bound_.push_back(bind(p));
    if (opt.task && a.config.num_tasks > 0 && a.config.has_masks()) task_masks_ = resolve_task(*opt.task);
  }

  /// Sub-network weights for a layer: the prototype targets times the
  /// layer's (or hybrid) mask.
  std::vector<BasicVar<T>> layer_weights(std::size_t layer) {
    const auto& b = bound_.size() == 1 ? bound_.front() : bound_.at(layer);
    auto masks = resolve_layer(layer);
    std::vector<BasicVar<T>> out;
    LayerTrace<T> tr;
    for (std::size_t i = 0; i < b.targets.size(); ++i) {
      if (masks.empty()) {
        out.push_back(b.targets[i]);
      } else {
        out.push_back(materialize_subnetwork(b.targets[i], masks[i]));
      }
      tr.theta.push_back(b.targets[i]);
    }
    if (opt_.trace) {
      tr.masks = masks;
      tr.theta_sub = out;
      opt_.trace->push_back(std::move(tr));
    }
    return out;
  }

  /// Adapter biases (never masked).
  std::pair<BasicVar<T>, BasicVar<T>> adapter_biases(std::size_t layer) const {
    const auto& b = bound_.size() == 1 ? bound_.front() : bound_.at(layer);
    return {*b.b_down, *b.b_up};
  }

  const AttachmentConfig& config() const { return a_.config; }
  const Prototype<T>& prototype(std::size_t layer) const { return a_.prototype_for_layer(layer); }

 private:
  struct Bound {
    std::vector<BasicVar<T>> targets;
    std::optional<BasicVar<T>> b_down, b_up;
  };

  Bound bind(Prototype<T>& p) {
    Bound b;
    std::visit(
        [&](auto& x) {
          using X = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<X, AdapterPrototype<T>>) {
            b.targets = {g_.param(x.w_down), g_.param(x.w_up)};
            b.b_down = g_.param(x.b_down);
            b.b_up = g_.param(x.b_up);
          } else if constexpr (std::is_same_v<X, LoraPrototype<T>>) {
            b.targets = {g_.param(x.q_down), g_.param(x.q_up), g_.param(x.v_down), g_.param(x.v_up)};
          } else {
            auto kv = prefix_keys_values(g_, x);
            b.targets = {kv.p_k, kv.p_v};
          }
        },
        p);
    return b;
  }

  BasicVar<T> mask_var(BasicMaskScores<T>* scores, const BinaryMask* fixed) {
    if (fixed) return g_.constant(fixed->template to_tensor<T>());
    if (opt_.training) return binarize_topk_ste(g_.param(scores->scores), scores->k);
    return g_.constant(threshold_topk(*scores).template to_tensor<T>());
  }

  std::vector<BasicVar<T>> resolve_task(std::size_t task) {
    std::vector<BasicVar<T>> out;
    const auto targets = a_.targets();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (!a_.task_masks.empty()) {
        out.push_back(mask_var(nullptr, &a_.task_masks.at(task)[i]));
      } else {
        out.push_back(mask_var(&a_.task_scores.at(task)[i], nullptr));
      }
    }
    return out;
  }

  std::vector<BasicVar<T>> resolve_layer(std::size_t layer) {
    const auto& c = a_.config;
    const auto targets = a_.targets();
    std::vector<BasicVar<T>> out;
    if (c.mode == Mode::OnlyShare) {
      if (!opt_.mask_hook) return out;
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (opt_.mask_hook) {
        if (auto m = opt_.mask_hook(layer, i)) {
          out.push_back(*m);
          continue;
        }
      }
      if (c.mode == Mode::OnlyShare) {
        out.push_back(g_.constant(BasicTensor<T>(targets[i].shape, T(1))));
        continue;
      }
      if (c.mode == Mode::RandomMask && a_.layer_masks.empty()) {
        out.push_back(g_.constant(random_mask(targets[i].name, targets[i].shape, c.k, *opt_.random_mask_rng).template to_tensor<T>()));
        continue;
      }
      BasicVar<T> m = !a_.layer_masks.empty() ? mask_var(nullptr, &a_.layer_masks.at(layer)[i])
                                              : mask_var(&a_.layer_scores.at(layer)[i], nullptr);
      if (!task_masks_.empty()) m = combine_ste(m, task_masks_[i], c.combine);
      out.push_back(m);
    }
    return out;
  }

  BasicGraph<T>& g_;
  Attachment<T>& a_;
  const ForwardOptions<T>& opt_;
  std::vector<Bound> bound_;
  std::vector<BasicVar<T>> task_masks_;
};

// ----------------------------------------------------------------------------
// Accounting
// ----------------------------------------------------------------------------

/// Trainable parameter count during training, using the nL + n accounting
/// (one score per prototype parameter per layer and per task).
///   propetl:     n * (L + T) + n
///   only_share:  n
///   random_mask: n
///   only_mask:   round(k n) * L retained prototype values + n * L scores
inline std::uint64_t count_trainable(Mode mode, std::uint64_t n, std::uint64_t layers, std::uint64_t tasks = 0,
                                     Sparsity k = Sparsity(1, 2)) {
  switch (mode) {
    case Mode::Propetl: return n * (layers + tasks) + n;
    case Mode::OnlyShare:
    case Mode::RandomMask: return n;
    case Mode::OnlyMask: return k.ones(n) * layers + n * layers;
  }
  return 0;
}

template <typename T>
std::uint64_t count_trainable(const Attachment<T>& a) {
  const auto& c = a.config;
  const std::uint64_t n = param_count(a.prototypes.front());
  if (c.variant == Variant::Prefix) {
    // Prefix scores cover the (l, 2d) activations, not the P'/W parameters.
    const std::uint64_t masked = 2 * c.size * c.d;
    switch (c.mode) {
      case Mode::Propetl: return n + masked * (c.num_layers + c.num_tasks);
      case Mode::OnlyMask: return (n + masked) * c.num_layers;
      default: return n;
    }
  }
  return count_trainable(c.mode, n, c.num_layers, c.num_tasks, c.k);
}

/// Elements actually held in trainable tensors (biases carry no scores).
template <typename T>
std::uint64_t count_materialized_trainable(const Attachment<T>& a) {
  std::uint64_t total = 0;
  for (const auto& p : a.prototypes) total += param_count(p);
  for (const auto& layer : a.layer_scores)
    for (const auto& s : layer) total += s.scores.numel();
  for (const auto& task : a.task_scores)
    for (const auto& s : task) total += s.scores.numel();
  return total;
}

}  // namespace propetl

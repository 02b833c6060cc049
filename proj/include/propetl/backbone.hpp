#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "propetl/graph.hpp"
#include "propetl/ops.hpp"
#include "propetl/petl.hpp"
#include "propetl/random.hpp"

namespace propetl {

struct TransformerConfig {
  std::size_t num_layers = 2;
  std::size_t d = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 16;
  std::size_t max_seq_len = 16;
  std::vector<std::size_t> num_classes{2};  // one classifier head per task
};

inline void validate(const TransformerConfig& c) {
  if (c.num_layers == 0 || c.d == 0 || c.num_heads == 0 || c.ffn_dim == 0 || c.vocab_size == 0 ||
      c.max_seq_len == 0 || c.num_classes.empty()) {
    throw ValueError("transformer config: all dimensions must be >= 1");
  }
  if (c.d % c.num_heads != 0) {
    throw ValueError("transformer config: d = " + std::to_string(c.d) + " not divisible by " +
                     std::to_string(c.num_heads) + " heads");
  }
  for (const auto n : c.num_classes) {
    if (n < 2) throw ValueError("transformer config: a task needs at least 2 classes");
  }
}

template <typename T>
struct EncoderLayer {
  BasicParameter<T> ln1_g, ln1_b;
  BasicParameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
  BasicParameter<T> ln2_g, ln2_b;
  BasicParameter<T> w1, b1, w2, b2;

  std::vector<BasicParameter<T>*> parameters() {
    return {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_g, &ln2_b, &w1, &b1, &w2, &b2};
  }
};

template <typename T>
struct ClassifierHead {
  BasicParameter<T> w, b;
  std::size_t num_classes() const { return b.numel(); }
};

/// Pre-norm transformer encoder with mean pooling and per-task heads.
template <typename T>
struct BackboneWeights {
  TransformerConfig config;
  BasicParameter<T> tok_emb, pos_emb;
  std::vector<EncoderLayer<T>> layers;
  BasicParameter<T> lnf_g, lnf_b;
  std::vector<ClassifierHead<T>> heads;

  /// Everything except the classifier heads.
  std::vector<BasicParameter<T>*> body_parameters() {
    std::vector<BasicParameter<T>*> out{&tok_emb, &pos_emb};
    for (auto& layer : layers)
      for (auto* p : layer.parameters()) out.push_back(p);
    out.push_back(&lnf_g);
    out.push_back(&lnf_b);
    return out;
  }

  std::vector<BasicParameter<T>*> head_parameters() {
    std::vector<BasicParameter<T>*> out;
    for (auto& h : heads) {
      out.push_back(&h.w);
      out.push_back(&h.b);
    }
    return out;
  }

  bool frozen() const { return !tok_emb.requires_grad; }

  /// Body parameters stop receiving gradients; heads stay trainable.
  void freeze() { set_body_trainable(false); }
  void unfreeze() { set_body_trainable(true); }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : body_parameters()) n += p->numel();
    for (auto* p : head_parameters()) n += p->numel();
    return n;
  }

  /// Fresh heads (used when re-targeting a warmed-up body to new tasks).
  void reset_heads(const std::vector<std::size_t>& num_classes, std::uint64_t seed) {
    config.num_classes = num_classes;
    heads.clear();
    Rng rng = Rng::derive(seed, "head");
    for (std::size_t t = 0; t < num_classes.size(); ++t) {
      ClassifierHead<T> h;
      BasicTensor<T> w({config.d, num_classes[t]});
      for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, 0.02));
      h.w = {"head" + std::to_string(t) + ".w", std::move(w)};
      h.b = {"head" + std::to_string(t) + ".b", BasicTensor<T>({num_classes[t]})};
      heads.push_back(std::move(h));
    }
  }

  template <typename U>
  BackboneWeights<U> cast() const {
    BackboneWeights<U> out;
    out.config = config;
    out.tok_emb = tok_emb.template cast<U>();
    out.pos_emb = pos_emb.template cast<U>();
    for (const auto& l : layers) {
      EncoderLayer<U> c;
      auto src = const_cast<EncoderLayer<T>&>(l).parameters();
      auto dst = c.parameters();
      for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
      out.layers.push_back(std::move(c));
    }
    out.lnf_g = lnf_g.template cast<U>();
    out.lnf_b = lnf_b.template cast<U>();
    for (const auto& h : heads) out.heads.push_back({h.w.template cast<U>(), h.b.template cast<U>()});
    return out;
  }

 private:
  void set_body_trainable(bool on) {
    for (auto* p : body_parameters()) {
      p->requires_grad = on;
      if (!on) p->zero_grad();
    }
  }
};

/// Closed-form parameter count of a config.
inline std::size_t backbone_param_count(const TransformerConfig& c) {
  const std::size_t d = c.d, f = c.ffn_dim;
  const std::size_t per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  std::size_t n = c.vocab_size * d + c.max_seq_len * d + c.num_layers * per_layer + 2 * d;
  for (const auto k : c.num_classes) n += d * k + k;
  return n;
}

/// Deterministic seeded initialization, frozen by default. Projections are
/// N(0, 1/fan_in), residual outputs additionally scaled by 1/sqrt(2L).
template <typename T>
BackboneWeights<T> init_backbone(const TransformerConfig& config, std::uint64_t seed) {
  validate(config);
  Rng rng = Rng::derive(seed, "backbone");
  const std::size_t d = config.d, f = config.ffn_dim;
  auto normal = [&](std::string name, Shape s, double sd) {
    BasicTensor<T> t(std::move(s));
    for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, sd));
    return BasicParameter<T>(std::move(name), std::move(t));
  };
  auto filled = [](std::string name, Shape s, T v) { return BasicParameter<T>(std::move(name), BasicTensor<T>(std::move(s), v)); };
  const double out_scale = 1.0 / std::sqrt(2.0 * double(config.num_layers));

  BackboneWeights<T> w;
  w.config = config;
  w.tok_emb = normal("tok_emb", {config.vocab_size, d}, 1.0);
  w.pos_emb = normal("pos_emb", {config.max_seq_len, d}, 0.5);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    EncoderLayer<T> L;
    L.ln1_g = filled(p + "ln1_g", {d}, T(1));
    L.ln1_b = filled(p + "ln1_b", {d}, T(0));
    L.wq = normal(p + "wq", {d, d}, 1.0 / std::sqrt(double(d)));
    L.bq = filled(p + "bq", {d}, T(0));
    L.wk = normal(p + "wk", {d, d}, 1.0 / std::sqrt(double(d)));
    L.bk = filled(p + "bk", {d}, T(0));
    L.wv = normal(p + "wv", {d, d}, 1.0 / std::sqrt(double(d)));
    L.bv = filled(p + "bv", {d}, T(0));
    L.wo = normal(p + "wo", {d, d}, out_scale / std::sqrt(double(d)));
    L.bo = filled(p + "bo", {d}, T(0));
    L.ln2_g = filled(p + "ln2_g", {d}, T(1));
    L.ln2_b = filled(p + "ln2_b", {d}, T(0));
    L.w1 = normal(p + "w1", {d, f}, 1.0 / std::sqrt(double(d)));
    L.b1 = filled(p + "b1", {f}, T(0));
    L.w2 = normal(p + "w2", {f, d}, out_scale / std::sqrt(double(f)));
    L.b2 = filled(p + "b2", {d}, T(0));
    w.layers.push_back(std::move(L));
  }
  w.lnf_g = filled("lnf_g", {d}, T(1));
  w.lnf_b = filled("lnf_b", {d}, T(0));
  w.reset_heads(config.num_classes, seed);
  w.freeze();
  return w;
}

/// Token ids of a (B, S) batch, row-major.
struct TokenBatch {
  std::vector<std::int32_t> ids;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

/// Logits (B, num_classes[task]) for a token batch, with the attachment's
/// variant injected at its placement sites:
///   adapter - on the feed-forward sublayer output
///   LoRA    - at the query and value projections
///   prefix  - prefixes prepended to every layer's keys and values
template <typename T>
BasicVar<T> encode(BasicGraph<T>& g, BackboneWeights<T>& w, Attachment<T>* attachment, const TokenBatch& tokens,
                   const ForwardOptions<T>& opt = {}) {
  const auto& c = w.config;
  const std::size_t B = tokens.batch, S = tokens.seq, d = c.d;
  if (B * S != tokens.ids.size() || B == 0 || S == 0) throw ShapeError("encode: token batch shape mismatch");
  if (S > c.max_seq_len) {
    throw ValueError("encode: sequence length " + std::to_string(S) + " exceeds " + std::to_string(c.max_seq_len));
  }
  const std::size_t task = opt.task.value_or(0);
  if (task >= w.heads.size()) throw ValueError("encode: unknown task id " + std::to_string(task));
  if (attachment) {
    if (attachment->config.d != d) {
      throw ShapeError("encode: attachment hidden size " + std::to_string(attachment->config.d) + " vs backbone " +
                       std::to_string(d));
    }
    if (attachment->config.num_layers != c.num_layers) {
      throw ShapeError("encode: attachment built for " + std::to_string(attachment->config.num_layers) +
                       " layers, backbone has " + std::to_string(c.num_layers));
    }
  }

  std::optional<BoundAttachment<T>> bound;
  if (attachment) bound.emplace(g, *attachment, opt);
  const Variant variant = attachment ? attachment->config.variant : Variant::Adapter;

  std::vector<std::int32_t> positions(B * S);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % S);

  BasicVar<T> x = add(embedding_lookup(g.param(w.tok_emb), std::span<const std::int32_t>(tokens.ids), Shape{B, S}),
                      embedding_lookup(g.param(w.pos_emb), std::span<const std::int32_t>(positions), Shape{B, S}));

  for (std::size_t l = 0; l < c.num_layers; ++l) {
    auto& L = w.layers[l];
    std::vector<BasicVar<T>> sub;
    if (bound) sub = bound->layer_weights(l);

    BasicVar<T> a = layer_norm(x, g.param(L.ln1_g), g.param(L.ln1_b));
    BasicVar<T> q = add(matmul(a, g.param(L.wq)), g.param(L.bq));
    BasicVar<T> k = add(matmul(a, g.param(L.wk)), g.param(L.bk));
    BasicVar<T> v = add(matmul(a, g.param(L.wv)), g.param(L.bv));
    if (bound && variant == Variant::Lora) {
      const double alpha = std::get<LoraPrototype<T>>(bound->prototype(l)).alpha;
      q = lora_forward(q, a, LoraPair<T>{sub[0], sub[1]}, alpha);
      v = lora_forward(v, a, LoraPair<T>{sub[2], sub[3]}, alpha);
    }
    BasicVar<T> attn = (bound && variant == Variant::Prefix)
                           ? prefix_forward<T>(q, k, v, PrefixKV<T>{sub[0], sub[1]}, std::nullopt, c.num_heads)
                           : attention<T>(q, k, v, std::nullopt, std::nullopt, c.num_heads);
    x = add(x, add(matmul(attn, g.param(L.wo)), g.param(L.bo)));

    BasicVar<T> f = layer_norm(x, g.param(L.ln2_g), g.param(L.ln2_b));
    BasicVar<T> h = add(matmul(gelu(add(matmul(f, g.param(L.w1)), g.param(L.b1))), g.param(L.w2)), g.param(L.b2));
    if (bound && variant == Variant::Adapter) {
      auto [bd, bu] = bound->adapter_biases(l);
      const Activation act = std::get<AdapterPrototype<T>>(bound->prototype(l)).act;
      h = adapter_forward(h, AdapterWeights<T>{sub[0], bd, sub[1], bu}, act);
    }
    x = add(x, h);
  }

  BasicVar<T> pooled = mean_pool(layer_norm(x, g.param(w.lnf_g), g.param(w.lnf_b)));
  auto& head = w.heads[task];
  return add(matmul(pooled, g.param(head.w)), g.param(head.b));
}

/// Inference-mode logits as a plain tensor.
template <typename T>
BasicTensor<T> infer_logits(BackboneWeights<T>& w, Attachment<T>* attachment, const TokenBatch& tokens,
                            std::optional<std::size_t> task = std::nullopt, Rng* random_mask_rng = nullptr) {
  BasicGraph<T> g;
  ForwardOptions<T> opt;
  opt.task = task;
  opt.random_mask_rng = random_mask_rng;
  return encode(g, w, attachment, tokens, opt).value();
}

}  // namespace propetl

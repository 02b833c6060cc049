#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "propetl/backbone.hpp"
#include "propetl/bls.hpp"
#include "propetl/masking.hpp"
#include "propetl/petl.hpp"

namespace propetl {

// File layout, all integers little-endian:
//
//   "PPTL" | u16 version | u8 variant | dims: u32 d, size, L, T, k_num, k_den
//   | u32 header crc | u32 section count | sections...
//
// section: u16 name length | name | u8 kind | u8 rank | u32 dims[rank]
//          | u64 payload bytes | payload | u32 crc over everything before it
//
// kinds: 0 f32 tensor, 1 packed mask, 2 metadata bytes. Sections named
// "aux/..." (classifier heads) are outside the module payload.

inline constexpr char kCheckpointMagic[4] = {'P', 'P', 'T', 'L'};
inline constexpr char kBackboneMagic[4] = {'P', 'P', 'B', 'B'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class SectionKind : std::uint8_t { Tensor = 0, Mask = 1, Meta = 2 };

inline std::string_view to_string(SectionKind k) {
  switch (k) {
    case SectionKind::Tensor: return "f32";
    case SectionKind::Mask: return "mask";
    case SectionKind::Meta: return "meta";
  }
  return "?";
}

struct Section {
  std::string name;
  SectionKind kind = SectionKind::Tensor;
  Shape shape;
  std::vector<std::uint8_t> payload;
  std::uint32_t crc = 0;
  std::uint64_t offset = 0;  // file offset of the record, for diagnostics
};

struct CheckpointHeader {
  std::uint16_t version = kCheckpointVersion;
  Variant variant = Variant::Adapter;
  std::uint32_t d = 0, size = 0, layers = 0, tasks = 0;
  Sparsity k;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(std::string_view s) {
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string where) : data_(data), where_(std::move(where)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str() {
    const auto n = u16();
    auto b = bytes(n);
    return std::string(b.begin(), b.end());
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }
  void set_where(std::string w) { where_ = std::move(w); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated in " + where_ + " at byte " + std::to_string(pos_) + " (needs " +
                        std::to_string(n) + " more, " + std::to_string(data_.size() - pos_) + " left)");
    }
  }
  std::uint64_t le(int n) {
    need(std::size_t(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += std::size_t(n);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string where_;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    c = crc32(c, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::vector<std::uint8_t> tensor_bytes(const Tensor& t) {
  ByteWriter w;
  for (const float v : t.values()) w.f32(v);
  return std::move(w.buffer());
}

inline Tensor tensor_from(const Section& s) {
  const std::size_t n = shape_numel(s.shape);
  if (s.kind != SectionKind::Tensor || s.payload.size() != 4 * n) {
    throw FormatError("checkpoint section '" + s.name + "': expected " + std::to_string(4 * n) + " tensor bytes, got " +
                      std::to_string(s.payload.size()));
  }
  ByteReader r(s.payload, s.name);
  std::vector<float> v(n);
  for (auto& x : v) x = r.f32();
  Tensor t(s.shape, std::move(v));
  if (!t.all_finite()) throw FormatError("checkpoint section '" + s.name + "': non-finite value");
  return t;
}

inline void write_header(ByteWriter& w, const char (&magic)[4], const CheckpointHeader& h) {
  const std::size_t start = w.size();
  w.bytes(magic, 4);
  w.u16(h.version);
  w.u8(static_cast<std::uint8_t>(h.variant));
  w.u32(h.d);
  w.u32(h.size);
  w.u32(h.layers);
  w.u32(h.tasks);
  w.u32(h.k.numerator());
  w.u32(h.k.denominator());
  w.u32(crc32_of(std::span(w.buffer()).subspan(start)));
}

inline void write_section(ByteWriter& w, const Section& s) {
  const std::size_t start = w.size();
  w.str(s.name);
  w.u8(static_cast<std::uint8_t>(s.kind));
  w.u8(static_cast<std::uint8_t>(s.shape.size()));
  for (const auto d : s.shape) w.u32(static_cast<std::uint32_t>(d));
  w.u64(s.payload.size());
  w.bytes(s.payload.data(), s.payload.size());
  w.u32(crc32_of(std::span(w.buffer()).subspan(start)));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace detail

/// Parsed container: header plus sections in file order, every CRC checked.
struct Container {
  CheckpointHeader header;
  std::vector<Section> sections;

  const Section* find(std::string_view name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }
  const Section& get(std::string_view name) const {
    if (const auto* s = find(name)) return *s;
    throw FormatError("checkpoint: missing section '" + std::string(name) + "'");
  }
};

inline Container parse_container(std::span<const std::uint8_t> bytes, const char (&magic)[4]) {
  detail::ByteReader r(bytes, "header");
  Container c;
  auto m = r.bytes(4);
  if (std::memcmp(m.data(), magic, 4) != 0) {
    throw FormatError("checkpoint: bad magic (expected '" + std::string(magic, 4) + "')");
  }
  c.header.version = r.u16();
  if (c.header.version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(c.header.version));
  }
  const auto variant = r.u8();
  if (variant > 2) throw FormatError("checkpoint: unknown variant code " + std::to_string(variant));
  c.header.variant = static_cast<Variant>(variant);
  c.header.d = r.u32();
  c.header.size = r.u32();
  c.header.layers = r.u32();
  c.header.tasks = r.u32();
  const auto kn = r.u32(), kd = r.u32();
  const std::size_t header_end = r.pos();
  if (r.u32() != detail::crc32_of(bytes.subspan(0, header_end))) throw FormatError("checkpoint: header CRC mismatch");
  try {
    c.header.k = Sparsity(kn, kd);
  } catch (const ValueError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Section s;
    s.offset = r.pos();
    r.set_where("section #" + std::to_string(i));
    s.name = r.str();
    r.set_where("section '" + s.name + "'");
    const auto kind = r.u8();
    if (kind > 2) throw FormatError("checkpoint section '" + s.name + "': unknown kind " + std::to_string(kind));
    s.kind = static_cast<SectionKind>(kind);
    const auto rank = r.u8();
    for (int j = 0; j < rank; ++j) {
      const auto d = r.u32();
      if (d == 0) throw FormatError("checkpoint section '" + s.name + "': zero dimension");
      s.shape.push_back(d);
    }
    const auto len = r.u64();
    auto payload = r.bytes(static_cast<std::size_t>(len));
    s.payload.assign(payload.begin(), payload.end());
    const std::size_t end = r.pos();
    s.crc = r.u32();
    if (s.crc != detail::crc32_of(bytes.subspan(s.offset, end - s.offset))) {
      throw FormatError("checkpoint section '" + s.name + "' at byte " + std::to_string(s.offset) + ": CRC mismatch");
    }
    c.sections.push_back(std::move(s));
  }
  if (!r.done()) throw FormatError("checkpoint: " + std::to_string(bytes.size() - r.pos()) + " trailing bytes");
  return c;
}

// ----------------------------------------------------------------------------
// Attachment checkpoints
// ----------------------------------------------------------------------------

namespace detail {

struct MetaFields {
  Mode mode = Mode::Propetl;
  CombineMode combine = CombineMode::Or;
  Activation activation = Activation::Relu;
  Sparsity task_k = Sparsity(3, 10);
  double lora_alpha = 48.0;
  std::uint32_t heads = 0;
};

inline std::vector<std::uint8_t> encode_meta(const MetaFields& m) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(m.mode));
  w.u8(static_cast<std::uint8_t>(m.combine));
  w.u8(static_cast<std::uint8_t>(m.activation));
  w.u32(m.task_k.numerator());
  w.u32(m.task_k.denominator());
  w.f64(m.lora_alpha);
  w.u32(m.heads);
  return std::move(w.buffer());
}

inline MetaFields decode_meta(const Section& s) {
  ByteReader r(s.payload, "section 'meta'");
  MetaFields m;
  const auto mode = r.u8(), combine = r.u8(), act = r.u8();
  if (mode > 3 || combine > 2 || act > 1) throw FormatError("checkpoint section 'meta': bad enum value");
  m.mode = static_cast<Mode>(mode);
  m.combine = static_cast<CombineMode>(combine);
  m.activation = static_cast<Activation>(act);
  const auto tn = r.u32(), td = r.u32();
  try {
    m.task_k = Sparsity(tn, td);
  } catch (const ValueError& e) {
    throw FormatError(std::string("checkpoint section 'meta': ") + e.what());
  }
  m.lora_alpha = r.f64();
  m.heads = r.u32();
  if (!r.done()) throw FormatError("checkpoint section 'meta': trailing bytes");
  return m;
}

inline Section tensor_section(std::string name, const Tensor& t) {
  return Section{std::move(name), SectionKind::Tensor, t.shape(), tensor_bytes(t)};
}

inline Section mask_section(std::string name, const BinaryMask& m) {
  return Section{std::move(name), SectionKind::Mask, m.shape, pack(m)};
}

/// Stored tensors of a prototype, in target order for the masked ones.
inline std::vector<std::pair<std::string, Tensor>> stored_tensors(const Prototype<float>& p) {
  return std::visit(
      [](const auto& x) -> std::vector<std::pair<std::string, Tensor>> {
        using X = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<X, AdapterPrototype<float>>) {
          return {{"w_down", x.w_down.value}, {"b_down", x.b_down.value}, {"w_up", x.w_up.value}, {"b_up", x.b_up.value}};
        } else if constexpr (std::is_same_v<X, LoraPrototype<float>>) {
          return {{"q_down", x.q_down.value}, {"q_up", x.q_up.value}, {"v_down", x.v_down.value}, {"v_up", x.v_up.value}};
        } else {
          return {{"p", x.materialize()}};
        }
      },
      p);
}

inline std::string proto_prefix(const AttachmentConfig& c, std::size_t i) {
  return c.mode == Mode::OnlyMask ? "proto" + std::to_string(i) + "/" : std::string("proto/");
}

}  // namespace detail

/// Writes the 32-bit prototype(s), the packed final masks and metadata.
/// Scores are never written; an unfrozen attachment contributes the masks
/// its current scores threshold to.
inline std::vector<std::uint8_t> serialize_checkpoint(const Attachment<float>& a,
                                                      const std::vector<ClassifierHead<float>>& heads = {}) {
  const auto& c = a.config;
  CheckpointHeader h;
  h.variant = c.variant;
  h.d = static_cast<std::uint32_t>(c.d);
  h.size = static_cast<std::uint32_t>(c.size);
  h.layers = static_cast<std::uint32_t>(c.num_layers);
  h.tasks = static_cast<std::uint32_t>(c.num_tasks);
  h.k = c.k;

  std::vector<Section> sections;
  detail::MetaFields meta{c.mode, c.combine, c.activation, c.task_k, c.lora_alpha, static_cast<std::uint32_t>(heads.size())};
  sections.push_back({"meta", SectionKind::Meta, {}, detail::encode_meta(meta)});
  for (std::size_t i = 0; i < a.prototypes.size(); ++i) {
    for (auto& [name, t] : detail::stored_tensors(a.prototypes[i])) {
      sections.push_back(detail::tensor_section(detail::proto_prefix(c, i) + name, t));
    }
  }
  if (c.stores_masks()) {
    // random_mask keeps its seeded final draw.
    std::optional<Attachment<float>> drawn;
    if (c.mode == Mode::RandomMask && !a.frozen()) {
      drawn = a;
      drawn->freeze();
    }
    const Attachment<float>& src = drawn ? *drawn : a;
    const auto targets = a.targets();
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      const auto masks = src.current_layer_masks(l);
      for (std::size_t i = 0; i < targets.size(); ++i) {
        sections.push_back(detail::mask_section("mask/layer" + std::to_string(l) + "/" + targets[i].name, masks[i]));
      }
    }
    for (std::size_t t = 0; t < c.num_tasks && c.has_masks(); ++t) {
      const auto masks = a.current_task_masks(t);
      for (std::size_t i = 0; i < targets.size(); ++i) {
        sections.push_back(detail::mask_section("mask/task" + std::to_string(t) + "/" + targets[i].name, masks[i]));
      }
    }
  }
  for (std::size_t t = 0; t < heads.size(); ++t) {
    sections.push_back(detail::tensor_section("aux/head" + std::to_string(t) + "/w", heads[t].w.value));
    sections.push_back(detail::tensor_section("aux/head" + std::to_string(t) + "/b", heads[t].b.value));
  }

  detail::ByteWriter w;
  detail::write_header(w, kCheckpointMagic, h);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) detail::write_section(w, s);
  return std::move(w.buffer());
}

inline void save_checkpoint(const Attachment<float>& a, const std::filesystem::path& path,
                            const std::vector<ClassifierHead<float>>& heads = {}) {
  detail::write_file(path, serialize_checkpoint(a, heads));
}

/// Module payload in bits: 32 per stored prototype value plus one per mask
/// element. Headers, names, CRCs, pad bits and aux sections are excluded.
inline std::uint64_t payload_bits(const Container& c) {
  std::uint64_t bits = 0;
  for (const auto& s : c.sections) {
    if (s.name.starts_with("aux/")) continue;
    if (s.kind == SectionKind::Tensor) bits += 32 * shape_numel(s.shape);
    if (s.kind == SectionKind::Mask) bits += shape_numel(s.shape);
  }
  return bits;
}

struct LoadedCheckpoint {
  CheckpointHeader header;
  Attachment<float> attachment;          // frozen: masks only, no scores
  std::vector<ClassifierHead<float>> heads;
  std::uint64_t payload_bits = 0;
};

inline LoadedCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const Container box = parse_container(bytes, kCheckpointMagic);
  const auto& h = box.header;
  const auto meta = detail::decode_meta(box.get("meta"));

  AttachmentConfig c;
  c.variant = h.variant;
  c.mode = meta.mode;
  c.k = h.k;
  c.task_k = meta.task_k;
  c.combine = meta.combine;
  c.d = h.d;
  c.size = h.size;
  c.activation = meta.activation;
  c.lora_alpha = meta.lora_alpha;
  c.num_layers = h.layers;
  c.num_tasks = h.tasks;
  try {
    validate(c);
  } catch (const ValueError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  auto expect_shape = [](const Section& s, const Shape& want) {
    if (s.shape != want) {
      throw FormatError("checkpoint section '" + s.name + "': shape " + shape_str(s.shape) + ", expected " + shape_str(want));
    }
  };

  LoadedCheckpoint out;
  out.header = h;
  Attachment<float>& a = out.attachment;
  a.config = c;
  const std::size_t d = c.d, n = c.size;
  const std::size_t protos = c.mode == Mode::OnlyMask ? c.num_layers : 1;
  for (std::size_t i = 0; i < protos; ++i) {
    const std::string p = detail::proto_prefix(c, i);
    auto load = [&](const std::string& name, const Shape& shape) {
      const auto& s = box.get(p + name);
      expect_shape(s, shape);
      return detail::tensor_from(s);
    };
    switch (c.variant) {
      case Variant::Adapter: {
        AdapterPrototype<float> x;
        x.d = d;
        x.bn = n;
        x.act = c.activation;
        x.w_down = {p + "w_down", load("w_down", {d, n})};
        x.b_down = {p + "b_down", load("b_down", {n})};
        x.w_up = {p + "w_up", load("w_up", {n, d})};
        x.b_up = {p + "b_up", load("b_up", {d})};
        a.prototypes.push_back(std::move(x));
        break;
      }
      case Variant::Lora: {
        LoraPrototype<float> x;
        x.d = d;
        x.bn = n;
        x.alpha = c.lora_alpha;
        x.q_down = {p + "q_down", load("q_down", {d, n})};
        x.q_up = {p + "q_up", load("q_up", {n, d})};
        x.v_down = {p + "v_down", load("v_down", {d, n})};
        x.v_up = {p + "v_up", load("v_up", {n, d})};
        a.prototypes.push_back(std::move(x));
        break;
      }
      case Variant::Prefix:
        a.prototypes.push_back(PrefixPrototype<float>::from_materialized(load("p", {n, 2 * d}), p));
        break;
    }
  }

  if (c.stores_masks()) {
    const auto targets = a.targets();
    auto load_masks = [&](const std::string& group, Sparsity k) {
      std::vector<BinaryMask> out;
      for (const auto& t : targets) {
        const auto& s = box.get("mask/" + group + "/" + t.name);
        expect_shape(s, t.shape);
        BinaryMask m = unpack(s.payload, s.shape, s.name);
        if (m.popcount() != k.ones(m.numel())) {
          throw FormatError("checkpoint section '" + s.name + "': " + std::to_string(m.popcount()) + " ones, expected " +
                            std::to_string(k.ones(m.numel())));
        }
        out.push_back(std::move(m));
      }
      return out;
    };
    for (std::size_t l = 0; l < c.num_layers; ++l) a.layer_masks.push_back(load_masks("layer" + std::to_string(l), c.k));
    for (std::size_t t = 0; t < c.num_tasks && c.has_masks(); ++t) a.task_masks.push_back(load_masks("task" + std::to_string(t), c.task_k));
  }

  for (std::uint32_t t = 0; t < meta.heads; ++t) {
    const std::string p = "aux/head" + std::to_string(t) + "/";
    ClassifierHead<float> head;
    head.w = {"head" + std::to_string(t) + ".w", detail::tensor_from(box.get(p + "w"))};
    head.b = {"head" + std::to_string(t) + ".b", detail::tensor_from(box.get(p + "b"))};
    if (head.w.value.rank() != 2 || head.w.value.dim(0) != d || head.b.value.shape() != Shape{head.w.value.dim(1)}) {
      throw FormatError("checkpoint section '" + p + "w': head shape does not match d = " + std::to_string(d));
    }
    out.heads.push_back(std::move(head));
  }
  out.payload_bits = payload_bits(box);
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

// ----------------------------------------------------------------------------
// Backbone weight files
// ----------------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_backbone(BackboneWeights<float>& w) {
  const auto& c = w.config;
  CheckpointHeader h;
  h.d = static_cast<std::uint32_t>(c.d);
  h.layers = static_cast<std::uint32_t>(c.num_layers);
  h.tasks = static_cast<std::uint32_t>(c.num_classes.size());
  detail::ByteWriter meta;
  meta.u32(static_cast<std::uint32_t>(c.num_heads));
  meta.u32(static_cast<std::uint32_t>(c.ffn_dim));
  meta.u32(static_cast<std::uint32_t>(c.vocab_size));
  meta.u32(static_cast<std::uint32_t>(c.max_seq_len));
  for (const auto k : c.num_classes) meta.u32(static_cast<std::uint32_t>(k));

  std::vector<Section> sections;
  sections.push_back({"meta", SectionKind::Meta, {}, std::move(meta.buffer())});
  for (auto* p : w.body_parameters()) sections.push_back(detail::tensor_section(p->name, p->value));
  for (auto* p : w.head_parameters()) sections.push_back(detail::tensor_section(p->name, p->value));
  detail::ByteWriter out;
  detail::write_header(out, kBackboneMagic, h);
  out.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) detail::write_section(out, s);
  return std::move(out.buffer());
}

inline void save_backbone(BackboneWeights<float>& w, const std::filesystem::path& path) {
  detail::write_file(path, serialize_backbone(w));
}

/// Frozen backbone restored from a weight file.
inline BackboneWeights<float> decode_backbone(std::span<const std::uint8_t> bytes) {
  const Container box = parse_container(bytes, kBackboneMagic);
  TransformerConfig c;
  c.d = box.header.d;
  c.num_layers = box.header.layers;
  detail::ByteReader r(box.get("meta").payload, "section 'meta'");
  c.num_heads = r.u32();
  c.ffn_dim = r.u32();
  c.vocab_size = r.u32();
  c.max_seq_len = r.u32();
  c.num_classes.clear();
  for (std::uint32_t t = 0; t < box.header.tasks; ++t) c.num_classes.push_back(r.u32());
  try {
    validate(c);
  } catch (const ValueError& e) {
    throw FormatError(std::string("backbone file: ") + e.what());
  }
  // Shapes come from a fresh init of the same config; values from the file.
  BackboneWeights<float> w = init_backbone<float>(c, 0);
  auto assign = [&](BasicParameter<float>* p) {
    const auto& s = box.get(p->name);
    if (s.shape != p->value.shape()) {
      throw FormatError("backbone section '" + s.name + "': shape " + shape_str(s.shape) + ", expected " +
                        shape_str(p->value.shape()));
    }
    p->value = detail::tensor_from(s);
  };
  for (auto* p : w.body_parameters()) assign(p);
  for (auto* p : w.head_parameters()) assign(p);
  return w;
}

inline BackboneWeights<float> load_backbone(const std::filesystem::path& path) {
  return decode_backbone(detail::read_file(path));
}

}  // namespace propetl

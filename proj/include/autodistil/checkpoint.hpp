#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autodistil/error.hpp"
#include "autodistil/searchspace.hpp"
#include "autodistil/supernet.hpp"

namespace autodistil {

// On-disk layout (all integers little-endian):
//
//   "ADSL"                      magic
//   u32                         format version
//   u64 + bytes                 UTF-8 JSON metadata
//   u64                         tensor count
//   per tensor:
//     u32 + bytes               name
//     u32                       rank
//     u64 * rank                dims
//     f32 * prod(dims)          row-major data

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'A', 'D', 'S', 'L'};

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  friend bool operator==(const NamedTensor& a, const NamedTensor& b) {
    if (a.name != b.name || a.dims != b.dims || a.data.size() != b.data.size()) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
  }
};

struct CheckpointData {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void bytes(std::string_view s) { out_.append(s); }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> in) : in_(in) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }
  float f32() { return std::bit_cast<float>(u32("tensor data")); }
  std::uint64_t remaining() const { return in_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (n > remaining())
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            std::string("checkpoint truncated while reading ") + what);
  }

 private:
  std::span<const unsigned char> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointData& ck) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  const std::string meta = ck.meta.dump();
  w.u64(meta.size());
  w.bytes(meta);
  w.u64(ck.tensors.size());
  for (const auto& t : ck.tensors) {
    std::uint64_t n = 1;
    for (auto d : t.dims) n *= d;
    if (n != t.data.size())
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                            "tensor '" + t.name + "' holds " + std::to_string(t.data.size()) +
                                " values for its dims");
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name);
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u64(d);
    for (float f : t.data) w.f32(f);
  }
  return w.take();
}

/// Parses a checkpoint image. Every malformed input maps to a CheckpointError.
inline CheckpointData decode_checkpoint(std::span<const unsigned char> bytes) {
  using Kind = CheckpointError::Kind;
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError(Kind::BadMagic, "not a checkpoint: bad magic bytes");
  r.bytes(4, "magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(Kind::UnsupportedVersion, "unsupported checkpoint version " + std::to_string(version));

  CheckpointData ck;
  const auto meta_len = r.u64("metadata length");
  const auto meta = r.bytes(meta_len, "metadata");
  ck.meta = nlohmann::json::parse(meta, nullptr, false);
  if (ck.meta.is_discarded() || !ck.meta.is_object())
    throw CheckpointError(Kind::BadMetadata, "checkpoint metadata is not a JSON object");

  const auto count = r.u64("tensor count");
  // Each tensor needs at least 8 header bytes.
  if (count > r.remaining() / 8) throw CheckpointError(Kind::Truncated, "checkpoint truncated: tensor count too large");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u32("tensor name length"), "tensor name");
    const auto rank = r.u32("tensor rank");
    if (rank > 8) throw CheckpointError(Kind::ShapeMismatch, "tensor '" + t.name + "' has rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.dims.push_back(r.u64("tensor dims"));
      if (t.dims.back() != 0 && n > UINT64_MAX / t.dims.back())
        throw CheckpointError(Kind::ShapeMismatch, "tensor '" + t.name + "' dims overflow");
      n *= t.dims.back();
    }
    if (n > r.remaining() / 4) throw CheckpointError(Kind::Truncated, "checkpoint truncated in tensor '" + t.name + "'");
    t.data.resize(static_cast<std::size_t>(n));
    for (auto& f : t.data) f = r.f32();
    ck.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0)
    throw CheckpointError(Kind::TrailingBytes, std::to_string(r.remaining()) + " unexpected bytes after last tensor");
  return ck;
}

/// Writes to a sibling temp file, then renames over `path`.
inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& ck) {
  const std::string bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::Io, "cannot rename onto '" + path.string() + "': " + ec.message());
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// ---- model <-> checkpoint ----------------------------------------------------

inline nlohmann::json to_json(const ModelDims& d) {
  return {{"vocab", d.vocab},   {"max_pos", d.max_pos}, {"type_vocab", d.type_vocab}, {"layers", d.layers},
          {"hidden", d.hidden}, {"ffn", d.ffn},         {"heads", d.heads},           {"head_dim", d.head_dim}};
}

inline nlohmann::json to_json(const SubspaceSpec& s) {
  auto tri = [](const FactorRange& r) {
    return nlohmann::json::array({r.lo.to_string(), r.hi.to_string(), r.step.to_string()});
  };
  return {{"name", s.name},         {"layers", tri(s.layers)}, {"hidden", tri(s.hidden)},
          {"ratio", tri(s.ratio)}, {"heads", tri(s.heads)},   {"head_dim", s.head_dim}};
}

namespace detail {

inline CheckpointError bad_meta(const std::string& what) {
  return CheckpointError(CheckpointError::Kind::BadMetadata, "checkpoint metadata: " + what);
}

inline std::int64_t meta_int(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_integer()) throw bad_meta(std::string("missing integer '") + key + "'");
  return j[key].get<std::int64_t>();
}

}  // namespace detail

inline ModelDims dims_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw detail::bad_meta("'dims' is not an object");
  return {detail::meta_int(j, "vocab"),  detail::meta_int(j, "max_pos"), detail::meta_int(j, "type_vocab"),
          detail::meta_int(j, "layers"), detail::meta_int(j, "hidden"),  detail::meta_int(j, "ffn"),
          detail::meta_int(j, "heads"),  detail::meta_int(j, "head_dim")};
}

inline SubspaceSpec subspace_from_json(const nlohmann::json& j) {
  try {
    auto tri = [&](const char* key) {
      const auto& a = j.at(key);
      if (!a.is_array() || a.size() != 3) throw detail::bad_meta(std::string("range '") + key + "' malformed");
      Rational v[3];
      for (int i = 0; i < 3; ++i) {
        auto r = Rational::parse(a[static_cast<std::size_t>(i)].get<std::string>());
        if (!r) throw detail::bad_meta(std::string("range '") + key + "' malformed");
        v[i] = *r;
      }
      return FactorRange{v[0], v[1], v[2]};
    };
    SubspaceSpec s{j.at("name").get<std::string>(), tri("layers"), tri("hidden"), tri("ratio"), tri("heads"),
                   j.at("head_dim").get<std::int64_t>()};
    s.check();
    return s;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw detail::bad_meta(std::string("sub-space: ") + e.what());
  }
}

/// Tensors in canonical order, downcast to 32-bit. `meta` gains "dims" and "precision".
template <std::floating_point T>
CheckpointData to_checkpoint(const TransformerParams<T>& params, nlohmann::json meta) {
  CheckpointData ck;
  meta["dims"] = to_json(params.dims());
  meta["precision"] = sizeof(T) == 4 ? "f32" : "f64";
  ck.meta = std::move(meta);
  for (const auto& t : params.tensors()) {
    NamedTensor nt{t.name, {}, {}};
    for (auto d : t.value.shape()) nt.dims.push_back(d);
    nt.data.reserve(t.value.size());
    for (T v : t.value.data()) nt.data.push_back(static_cast<float>(v));
    ck.tensors.push_back(std::move(nt));
  }
  return ck;
}

/// Rebuilds a weight store; names, order and shapes must match the layout
/// implied by the "dims" metadata.
template <std::floating_point T>
TransformerParams<T> params_from_checkpoint(const CheckpointData& ck) {
  if (!ck.meta.contains("dims")) throw detail::bad_meta("missing 'dims'");
  const ModelDims dims = dims_from_json(ck.meta["dims"]);
  constexpr std::int64_t kLimit = std::int64_t{1} << 24;
  for (auto v : {dims.vocab, dims.max_pos, dims.type_vocab, dims.layers, dims.hidden, dims.ffn, dims.heads, dims.head_dim})
    if (v < 1 || v > kLimit) throw detail::bad_meta("dimension out of range");
  std::uint64_t expected = static_cast<std::uint64_t>(kEmbedSlots) +
                           static_cast<std::uint64_t>(dims.layers) * static_cast<std::uint64_t>(kLayerSlots);
  if (ck.tensors.size() != expected)
    throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                          "checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, expected " +
                              std::to_string(expected));
  // Shapes are checked against the data already read before the store is
  // allocated, so a forged header cannot trigger a huge allocation.
  const auto specs = TransformerParams<T>::layout(dims);
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    const auto& src = ck.tensors[i];
    const auto& want = specs[i];
    if (src.name != want.name || src.dims.size() != 2 || src.dims[0] != want.shape[0] || src.dims[1] != want.shape[1])
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                            "tensor " + std::to_string(i) + " '" + src.name + "' does not match expected '" +
                                want.name + "' " + nn::shape_string(want.shape));
  }
  TransformerParams<T> params(dims);
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    const auto& src = ck.tensors[i];
    auto& dst = params.tensors()[i];
    for (std::size_t k = 0; k < src.data.size(); ++k) dst.value[k] = static_cast<T>(src.data[k]);
  }
  return params;
}

}  // namespace autodistil

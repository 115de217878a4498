#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>

#include "autodistil/error.hpp"
#include "autodistil/searchspace.hpp"

namespace autodistil {

/// Attention projection width used when counting.
///   table    - width = d_hid (the accounting behind published BERT-family tables)
///   supernet - width = h * head_dim (what an extracted student actually stores)
enum class CostConvention { Table, Supernet };

inline const char* to_string(CostConvention c) { return c == CostConvention::Table ? "table" : "supernet"; }

inline CostConvention parse_convention(std::string_view s) {
  if (s == "table") return CostConvention::Table;
  if (s == "supernet") return CostConvention::Supernet;
  throw ValidationError("unknown cost convention '" + std::string(s) + "' (expected table|supernet)");
}

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;  // multiply-accumulates for one sequence
  std::uint64_t seq_len = 0;
  std::uint64_t vocab = 0;
  CostConvention convention = CostConvention::Table;
};

/// Embedding-side constants the counts depend on.
struct CostContext {
  std::uint64_t vocab = 30522;
  std::uint64_t max_pos = 512;
  std::uint64_t type_vocab = 2;
  std::int64_t head_dim = 64;  // only read under the supernet convention
};

namespace detail {

struct Checked {
  std::uint64_t v;
  friend Checked operator+(Checked a, Checked b) {
    std::uint64_t r;
    if (__builtin_add_overflow(a.v, b.v, &r)) throw OverflowError("cost count overflows 64 bits");
    return {r};
  }
  friend Checked operator*(Checked a, Checked b) {
    std::uint64_t r;
    if (__builtin_mul_overflow(a.v, b.v, &r)) throw OverflowError("cost count overflows 64 bits");
    return {r};
  }
};

inline Checked positive(std::int64_t v, const char* what) {
  if (v <= 0) throw ValidationError(std::string("cost model: ") + what + " must be positive");
  return {static_cast<std::uint64_t>(v)};
}

inline Checked attention_width(const ArchConfig& a, CostConvention c, std::int64_t head_dim) {
  if (c == CostConvention::Table) return positive(a.d_hid, "hidden");
  return positive(a.h, "heads") * positive(head_dim, "head_dim");
}

}  // namespace detail

/// Embeddings (token, position, segment, layer norm) plus per layer Q/K/V/O
/// with biases, FFN with biases and two layer norms. No pooler.
inline std::uint64_t count_params(const ArchConfig& arch, const CostContext& ctx, CostConvention conv) {
  using detail::Checked;
  if (ctx.vocab < 1) throw ValidationError("cost model: vocab must be >= 1");
  const Checked d = detail::positive(arch.d_hid, "hidden");
  const Checked df = detail::positive(arch.d_f(), "ffn width");
  const Checked l = detail::positive(arch.l, "layers");
  const Checked w = detail::attention_width(arch, conv, ctx.head_dim);
  const Checked two{2}, three{3};

  const Checked embed = Checked{ctx.vocab} * d + Checked{ctx.max_pos} * d + Checked{ctx.type_vocab} * d + two * d;
  const Checked attn = three * (d * w + w) + (w * d + d) + two * d;
  const Checked ffn = (d * df + df) + (df * d + d) + two * d;
  return (embed + l * (attn + ffn)).v;
}

/// Per token per layer: 3*d*W + W*d + 2*seq*W + 2*d*d_f MACs, times seq * l.
inline std::uint64_t count_flops(const ArchConfig& arch, std::uint64_t seq_len, CostConvention conv,
                                 std::int64_t head_dim = 64) {
  using detail::Checked;
  if (seq_len < 1) throw ValidationError("cost model: seq_len must be >= 1");
  const Checked d = detail::positive(arch.d_hid, "hidden");
  const Checked df = detail::positive(arch.d_f(), "ffn width");
  const Checked l = detail::positive(arch.l, "layers");
  const Checked w = detail::attention_width(arch, conv, head_dim);
  const Checked s{seq_len}, two{2}, three{3};

  const Checked per_token = three * d * w + w * d + two * s * w + two * d * df;
  return (per_token * s * l).v;
}

inline CostReport cost_report(const ArchConfig& arch, std::uint64_t seq_len, const CostContext& ctx,
                              CostConvention conv) {
  return {count_params(arch, ctx, conv), count_flops(arch, seq_len, conv, ctx.head_dim), seq_len, ctx.vocab, conv};
}

/// Exhaustive min/max over a sub-space. The extremes must sit at the lo and
/// hi corners; a violation means the counts lost monotonicity.
inline std::pair<CostReport, CostReport> cost_range(const SubspaceSpec& space, std::uint64_t seq_len, CostContext ctx,
                                                    CostConvention conv) {
  ctx.head_dim = space.head_dim;
  const auto archs = enumerate(space);
  CostReport lo = cost_report(archs.front(), seq_len, ctx, conv);
  CostReport hi = lo;
  for (const auto& a : archs) {
    const auto r = cost_report(a, seq_len, ctx, conv);
    if (r.params < lo.params) lo.params = r.params;
    if (r.flops < lo.flops) lo.flops = r.flops;
    if (r.params > hi.params) hi.params = r.params;
    if (r.flops > hi.flops) hi.flops = r.flops;
  }
  const auto lo_corner = cost_report(space.min_corner(), seq_len, ctx, conv);
  const auto hi_corner = cost_report(space.max_corner(), seq_len, ctx, conv);
  if (lo_corner.params != lo.params || lo_corner.flops != lo.flops || hi_corner.params != hi.params ||
      hi_corner.flops != hi.flops)
    throw Error("cost_range: extremes of sub-space '" + space.name + "' are not at its corners");
  return {lo, hi};
}

}  // namespace autodistil

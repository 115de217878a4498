#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "autodistil/config.hpp"
#include "autodistil/error.hpp"
#include "autodistil/rational.hpp"

namespace autodistil {

/// Inclusive grid `lo, lo+step, ..., hi`.
struct FactorRange {
  Rational lo;
  Rational hi;
  Rational step{1};

  /// Throws ValidationError naming `factor` when the range is malformed.
  void check(std::string_view factor) const {
    const std::string f(factor);
    if (step <= Rational(0)) throw ValidationError("factor '" + f + "': step must be positive");
    if (hi < lo) throw ValidationError("factor '" + f + "': lo " + lo.to_string() + " exceeds hi " + hi.to_string());
    if (!((hi - lo) / step).is_integer())
      throw ValidationError("factor '" + f + "': (hi - lo) is not a multiple of step " + step.to_string());
  }

  std::size_t count() const { return static_cast<std::size_t>(((hi - lo) / step).num()) + 1; }

  std::vector<Rational> values() const {
    std::vector<Rational> out;
    out.reserve(count());
    for (std::size_t i = 0; i < count(); ++i) out.push_back(lo + step * Rational(static_cast<std::int64_t>(i)));
    return out;
  }

  bool contains(Rational v) const {
    if (v < lo || v > hi) return false;
    return ((v - lo) / step).is_integer();
  }

  friend bool operator==(const FactorRange&, const FactorRange&) = default;
};

/// One student architecture. All layers share this shape.
struct ArchConfig {
  std::int64_t l = 0;      // layers
  std::int64_t d_hid = 0;  // hidden width
  Rational r{0};           // MLP ratio d_f / d_hid
  std::int64_t h = 0;      // attention heads

  std::int64_t d_f() const {
    const Rational f = r * Rational(d_hid);
    if (!f.is_integer()) throw ValidationError("MLP ratio " + r.to_string() + " x hidden " + std::to_string(d_hid) +
                                               " is not an integer FFN width");
    return f.num();
  }
  std::int64_t attn_width(std::int64_t head_dim) const { return h * head_dim; }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// "L{l}-H{d_hid}-R{r}-A{h}".
inline std::string arch_id(const ArchConfig& a) {
  return "L" + std::to_string(a.l) + "-H" + std::to_string(a.d_hid) + "-R" + a.r.to_string() + "-A" +
         std::to_string(a.h);
}

inline ArchConfig parse_arch_id(std::string_view id) {
  auto fail = [&] { return ValidationError("malformed architecture id '" + std::string(id) + "'"); };
  const auto parts = detail::split(id, '-');
  if (parts.size() != 4) throw fail();
  const char tags[4] = {'L', 'H', 'R', 'A'};
  Rational vals[4];
  for (int i = 0; i < 4; ++i) {
    if (parts[i].size() < 2 || parts[i][0] != tags[i]) throw fail();
    auto v = Rational::parse(parts[i].substr(1));
    if (!v || *v <= Rational(0)) throw fail();
    if (i != 2 && !v->is_integer()) throw fail();
    vals[i] = *v;
  }
  return ArchConfig{vals[0].num(), vals[1].num(), vals[2], vals[3].num()};
}

/// One sub-space of the partitioned search space.
struct SubspaceSpec {
  std::string name;
  FactorRange layers;
  FactorRange hidden;
  FactorRange ratio;
  FactorRange heads;
  std::int64_t head_dim = 64;

  /// Checks range well-formedness and integrality of every grid point.
  void check() const {
    if (name.empty()) throw ValidationError("sub-space has an empty name");
    layers.check("layers");
    hidden.check("hidden");
    ratio.check("ratio");
    heads.check("heads");
    for (auto [range, factor] : {std::pair{&layers, "layers"}, {&hidden, "hidden"}, {&heads, "heads"}}) {
      if (range->lo <= Rational(0)) throw ValidationError("factor '" + std::string(factor) + "': values must be positive");
      if (!range->lo.is_integer() || !range->step.is_integer())
        throw ValidationError("factor '" + std::string(factor) + "': values must be integers");
    }
    if (ratio.lo <= Rational(0)) throw ValidationError("factor 'ratio': values must be positive");
    if (head_dim <= 0) throw ValidationError("factor 'head_dim': must be a positive integer");
    for (const auto& d : hidden.values())
      for (const auto& r : ratio.values())
        if (!(r * d).is_integer())
          throw ValidationError("factor 'ratio': " + r.to_string() + " x hidden " + d.to_string() +
                                " is not an integer FFN width");
  }

  std::size_t size() const { return layers.count() * hidden.count() * ratio.count() * heads.count(); }

  ArchConfig min_corner() const { return {layers.lo.num(), hidden.lo.num(), ratio.lo, heads.lo.num()}; }
  ArchConfig max_corner() const { return {layers.hi.num(), hidden.hi.num(), ratio.hi, heads.hi.num()}; }

  std::int64_t max_ffn() const { return max_corner().d_f(); }
  std::int64_t max_attn_width() const { return heads.hi.num() * head_dim; }

  friend bool operator==(const SubspaceSpec&, const SubspaceSpec&) = default;
};

/// Full grid in lexicographic (layers, hidden, ratio, heads) order.
inline std::vector<ArchConfig> enumerate(const SubspaceSpec& space) {
  space.check();
  std::vector<ArchConfig> out;
  out.reserve(space.size());
  for (const auto& l : space.layers.values())
    for (const auto& d : space.hidden.values())
      for (const auto& r : space.ratio.values())
        for (const auto& h : space.heads.values()) out.push_back({l.num(), d.num(), r, h.num()});
  return out;
}

/// True iff every field of `arch` lies on the grid of `space`. Reasons for a
/// rejection are appended to `reasons` when given.
inline bool validate(const ArchConfig& arch, const SubspaceSpec& space, std::vector<std::string>* reasons = nullptr) {
  bool ok = true;
  auto reject = [&](const char* factor, const Rational& v, const FactorRange& range) {
    ok = false;
    if (reasons)
      reasons->push_back(std::string(factor) + " " + v.to_string() + " not in (" + range.lo.to_string() + ", " +
                         range.hi.to_string() + ", " + range.step.to_string() + ")");
  };
  if (!space.layers.contains(arch.l)) reject("layers", arch.l, space.layers);
  if (!space.hidden.contains(arch.d_hid)) reject("hidden", arch.d_hid, space.hidden);
  if (!space.ratio.contains(arch.r)) reject("ratio", arch.r, space.ratio);
  if (!space.heads.contains(arch.h)) reject("heads", arch.h, space.heads);
  return ok;
}

namespace presets {

inline FactorRange range(Rational lo, Rational hi, Rational step) { return {lo, hi, step}; }

/// Tiny sub-space of the standard three-way partition.
inline SubspaceSpec tiny() {
  return {"tiny", range(4, 7, 1), range(128, 224, 32), range({2, 1}, {7, 2}, {1, 2}), range(7, 10, 1), 16};
}
inline SubspaceSpec small() {
  return {"small", range(9, 12, 1), range(256, 352, 32), range({5, 2}, 4, {1, 2}), range(7, 10, 1), 32};
}
inline SubspaceSpec base() {
  return {"base", range(9, 12, 1), range(544, 640, 32), range({5, 2}, 4, {1, 2}), range(9, 12, 1), 64};
}
/// Desk-scale sub-space used by the end-to-end pipeline tests.
inline SubspaceSpec toy() { return {"toy", range(2, 3, 1), range(8, 16, 8), range(2, 3, 1), range(1, 2, 1), 8}; }

inline std::vector<SubspaceSpec> standard() { return {tiny(), small(), base()}; }

inline std::map<std::string, SubspaceSpec> all() {
  std::map<std::string, SubspaceSpec> out;
  for (auto s : {tiny(), small(), base(), toy()}) out.emplace(s.name, s);
  return out;
}

}  // namespace presets

/// Reads every `[subspace.<name>]` section of `cfg`. Each needs all four
/// ranges plus `head_dim`.
inline std::map<std::string, SubspaceSpec> subspaces_from_config(const KeyValueConfig& cfg) {
  std::map<std::string, SubspaceSpec> out;
  for (const auto& name : cfg.section_names("subspace")) {
    const std::string p = "subspace." + name + ".";
    SubspaceSpec spec;
    spec.name = name;
    auto need = [&](const char* key) {
      auto t = cfg.get_triple(p + key);
      if (!t) throw ValidationError(cfg.source() + ": missing key '" + p + key + "'");
      return FactorRange{(*t)[0], (*t)[1], (*t)[2]};
    };
    spec.layers = need("layers");
    spec.hidden = need("hidden");
    spec.ratio = need("ratio");
    spec.heads = need("heads");
    if (!cfg.contains(p + "head_dim")) throw ValidationError(cfg.source() + ": missing key '" + p + "head_dim'");
    spec.head_dim = cfg.get_int(p + "head_dim", 0);
    spec.check();
    out.emplace(name, spec);
  }
  return out;
}

/// Renders a sub-space as a preset-file section.
inline std::string to_config_text(const SubspaceSpec& s) {
  auto tri = [](const FactorRange& r) {
    return "[" + r.lo.to_string() + ", " + r.hi.to_string() + ", " + r.step.to_string() + "]";
  };
  return "[subspace." + s.name + "]\nlayers = " + tri(s.layers) + "\nhidden = " + tri(s.hidden) +
         "\nratio = " + tri(s.ratio) + "\nheads = " + tri(s.heads) + "\nhead_dim = " + std::to_string(s.head_dim) +
         "\n";
}

}  // namespace autodistil

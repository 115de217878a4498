#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "autodistil/batch.hpp"
#include "autodistil/error.hpp"
#include "autodistil/nn/tape.hpp"
#include "autodistil/nn/tensor.hpp"
#include "autodistil/random.hpp"
#include "autodistil/searchspace.hpp"

namespace autodistil {

/// Shape of a stored transformer.
struct ModelDims {
  std::int64_t vocab = 0;
  std::int64_t max_pos = 0;
  std::int64_t type_vocab = 2;
  std::int64_t layers = 0;
  std::int64_t hidden = 0;
  std::int64_t ffn = 0;
  std::int64_t heads = 0;
  std::int64_t head_dim = 0;

  std::int64_t attn_width() const { return heads * head_dim; }

  /// Architecture covering the whole model.
  ArchConfig arch() const { return {layers, hidden, Rational(ffn, hidden), heads}; }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

inline ModelDims dims_for(const ArchConfig& a, std::int64_t head_dim, std::int64_t vocab, std::int64_t max_pos) {
  return {vocab, max_pos, 2, a.l, a.d_hid, a.d_f(), a.h, head_dim};
}

template <std::floating_point T>
struct ParamTensor {
  std::string name;
  nn::Tensor<T> value;
  std::vector<T> grad;
  std::vector<std::uint8_t> touched;
};

/// Per-layer tensor slots, in canonical storage order.
enum LayerSlot : std::size_t { kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo, kW1, kB1, kW2, kB2, kLn1G, kLn1B, kLn2G, kLn2B, kLayerSlots };

/// Embedding-level tensors come first.
enum EmbedSlot : std::size_t { kTokEmb, kPosEmb, kSegEmb, kEmbLnG, kEmbLnB, kEmbedSlots };

/// Weight store of one transformer: embeddings, then per layer Q, K, V, O,
/// FFN1, FFN2 (weights with biases) and the two layer-norm pairs.
template <std::floating_point T>
class TransformerParams {
 public:
  TransformerParams() = default;

  /// Name, shape and initial fill of every tensor, in storage order.
  struct TensorSpec {
    std::string name;
    std::vector<std::size_t> shape;
    T fill;
  };

  static std::vector<TensorSpec> layout(const ModelDims& dims) {
    if (dims.vocab < 1 || dims.max_pos < 1 || dims.layers < 1 || dims.hidden < 1 || dims.ffn < 1 || dims.heads < 1 ||
        dims.head_dim < 1 || dims.type_vocab < 1)
      throw ValidationError("model dimensions must all be positive");
    const auto d = static_cast<std::size_t>(dims.hidden), f = static_cast<std::size_t>(dims.ffn),
               a = static_cast<std::size_t>(dims.attn_width());
    std::vector<TensorSpec> out;
    auto add = [&](std::string name, std::vector<std::size_t> shape, T fill = T{0}) {
      out.push_back({std::move(name), std::move(shape), fill});
    };
    add("embeddings.token", {static_cast<std::size_t>(dims.vocab), d});
    add("embeddings.position", {static_cast<std::size_t>(dims.max_pos), d});
    add("embeddings.segment", {static_cast<std::size_t>(dims.type_vocab), d});
    add("embeddings.norm.gain", {1, d}, T{1});
    add("embeddings.norm.bias", {1, d});
    for (std::int64_t l = 0; l < dims.layers; ++l) {
      const std::string p = "layer." + std::to_string(l) + ".";
      add(p + "attn.query.weight", {d, a});
      add(p + "attn.query.bias", {1, a});
      add(p + "attn.key.weight", {d, a});
      add(p + "attn.key.bias", {1, a});
      add(p + "attn.value.weight", {d, a});
      add(p + "attn.value.bias", {1, a});
      add(p + "attn.output.weight", {a, d});
      add(p + "attn.output.bias", {1, d});
      add(p + "ffn.in.weight", {d, f});
      add(p + "ffn.in.bias", {1, f});
      add(p + "ffn.out.weight", {f, d});
      add(p + "ffn.out.bias", {1, d});
      add(p + "attn.norm.gain", {1, d}, T{1});
      add(p + "attn.norm.bias", {1, d});
      add(p + "ffn.norm.gain", {1, d}, T{1});
      add(p + "ffn.norm.bias", {1, d});
    }
    return out;
  }

  /// Zero weights, unit layer-norm gains.
  explicit TransformerParams(const ModelDims& dims) : dims_(dims) {
    for (auto& spec : layout(dims))
      tensors_.push_back({std::move(spec.name), nn::Tensor<T>(std::move(spec.shape), spec.fill), {}, {}});
  }

  /// Gaussian weights scaled by 1/sqrt(fan_in), unit-variance embeddings,
  /// zero biases, unit layer-norm gains.
  static TransformerParams randomized(const ModelDims& dims, std::uint64_t seed) {
    TransformerParams p(dims);
    Rng rng(seed);
    for (std::size_t i = 0; i < p.tensors_.size(); ++i) {
      auto& t = p.tensors_[i];
      const bool is_matrix = t.value.rows() > 1;
      if (!is_matrix) continue;
      const T stdev = i < kEmbedSlots ? T{1} : T{1} / std::sqrt(static_cast<T>(t.value.rows()));
      for (auto& x : t.value.data()) x = static_cast<T>(rng.normal()) * stdev;
    }
    return p;
  }

  const ModelDims& dims() const noexcept { return dims_; }
  std::vector<ParamTensor<T>>& tensors() noexcept { return tensors_; }
  const std::vector<ParamTensor<T>>& tensors() const noexcept { return tensors_; }

  static std::size_t index(std::size_t layer, LayerSlot slot) { return kEmbedSlots + layer * kLayerSlots + slot; }
  ParamTensor<T>& embed(EmbedSlot s) { return tensors_[s]; }
  const ParamTensor<T>& embed(EmbedSlot s) const { return tensors_[s]; }
  ParamTensor<T>& at(std::size_t layer, LayerSlot s) { return tensors_[index(layer, s)]; }
  const ParamTensor<T>& at(std::size_t layer, LayerSlot s) const { return tensors_[index(layer, s)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.value.size();
    return n;
  }

  /// Allocates (first call) and clears gradient and touched buffers.
  void zero_grad() {
    for (auto& t : tensors_) {
      t.grad.assign(t.value.size(), T{0});
      t.touched.assign(t.value.size(), 0);
    }
  }
  bool has_grad() const { return !tensors_.empty() && tensors_.front().grad.size() == tensors_.front().value.size(); }

  /// FNV-1a over the raw bytes of every value.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tensors_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.value.data().data());
      for (std::size_t i = 0; i < t.value.size() * sizeof(T); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
    }
    return h;
  }

  friend bool operator==(const TransformerParams& a, const TransformerParams& b) {
    if (!(a.dims_ == b.dims_) || a.tensors_.size() != b.tensors_.size()) return false;
    for (std::size_t i = 0; i < a.tensors_.size(); ++i)
      if (!(a.tensors_[i].value == b.tensors_[i].value)) return false;
    return true;
  }

 private:
  ModelDims dims_;
  std::vector<ParamTensor<T>> tensors_;
};

/// The distillation teacher: a full transformer plus its relation-head count.
template <std::floating_point T>
struct TeacherModel {
  TransformerParams<T> params;
  std::int64_t relation_heads = 1;

  const ModelDims& dims() const { return params.dims(); }
};

/// One SuperLM: a weight store at the max corner of its sub-space.
template <std::floating_point T>
struct Supernet {
  SubspaceSpec spec;
  TransformerParams<T> params;
};

/// How sub-network layers are picked from the supernet stack.
///   Alternate    - drop odd layers (1-indexed, ascending) until l remain
///   Top          - keep the bottom l layers (drop the top ones)
///   AlternateTop - Alternate while training the supernet, Top at extraction
enum class LayerStrategy { Alternate, Top, AlternateTop };

enum class Phase { Training, Extraction };

inline const char* to_string(LayerStrategy s) {
  switch (s) {
    case LayerStrategy::Alternate: return "alternate";
    case LayerStrategy::Top: return "top";
    case LayerStrategy::AlternateTop: return "alternate_top";
  }
  return "?";
}

inline LayerStrategy parse_layer_strategy(std::string_view s) {
  if (s == "alternate") return LayerStrategy::Alternate;
  if (s == "top") return LayerStrategy::Top;
  if (s == "alternate_top") return LayerStrategy::AlternateTop;
  throw ValidationError("unknown layer strategy '" + std::string(s) + "' (expected alternate|top|alternate_top)");
}

/// The single-rule strategy actually applied in `phase`.
inline LayerStrategy resolve(LayerStrategy s, Phase phase) {
  if (s != LayerStrategy::AlternateTop) return s;
  return phase == Phase::Training ? LayerStrategy::Alternate : LayerStrategy::Top;
}

/// 1-based indices of the kept layers, strictly increasing. For Alternate,
/// odd positions are dropped in ascending order; if a full pass is not
/// enough, the pass repeats over the survivors.
inline std::vector<std::size_t> select_layers(std::size_t total, std::size_t keep, LayerStrategy strategy,
                                              Phase phase = Phase::Extraction) {
  if (keep < 1 || keep > total)
    throw ValidationError("select_layers: cannot keep " + std::to_string(keep) + " of " + std::to_string(total) +
                          " layers");
  std::vector<std::size_t> layers(total);
  for (std::size_t i = 0; i < total; ++i) layers[i] = i + 1;
  if (resolve(strategy, phase) == LayerStrategy::Top) {
    layers.resize(keep);
    return layers;
  }
  std::size_t to_drop = total - keep;
  while (to_drop > 0) {
    std::vector<std::size_t> next;
    for (std::size_t pos = 0; pos < layers.size(); ++pos) {
      if (pos % 2 == 0 && to_drop > 0) {
        --to_drop;
        continue;
      }
      next.push_back(layers[pos]);
    }
    layers = std::move(next);
  }
  return layers;
}

/// Rows x cols prefix of one stored tensor.
struct SliceDesc {
  std::size_t tensor = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// A student architecture realised as prefix slices of a weight store. The
/// view does not own or copy weights.
template <std::floating_point T>
struct StudentView {
  ArchConfig arch;
  std::int64_t head_dim = 0;
  std::vector<std::size_t> layer_indices;  // 1-based store layers
  std::vector<SliceDesc> slices;           // embeddings, then kLayerSlots per selected layer
  TransformerParams<T>* store = nullptr;

  const SliceDesc& slice(EmbedSlot s) const { return slices[s]; }
  const SliceDesc& slice(std::size_t layer_pos, LayerSlot s) const {
    return slices[kEmbedSlots + layer_pos * kLayerSlots + s];
  }
};

namespace detail {

template <std::floating_point T>
StudentView<T> make_view(TransformerParams<T>& store, const ArchConfig& arch, std::int64_t head_dim,
                         std::vector<std::size_t> layers) {
  const auto& dims = store.dims();
  const auto d = static_cast<std::size_t>(arch.d_hid), f = static_cast<std::size_t>(arch.d_f()),
             a = static_cast<std::size_t>(arch.attn_width(head_dim));
  if (arch.d_hid > dims.hidden || arch.d_f() > dims.ffn || arch.attn_width(head_dim) > dims.attn_width() ||
      static_cast<std::int64_t>(layers.size()) > dims.layers)
    throw ValidationError("architecture " + arch_id(arch) + " exceeds the weight store");
  StudentView<T> v{arch, head_dim, std::move(layers), {}, &store};
  v.slices.push_back({kTokEmb, static_cast<std::size_t>(dims.vocab), d});
  v.slices.push_back({kPosEmb, static_cast<std::size_t>(dims.max_pos), d});
  v.slices.push_back({kSegEmb, static_cast<std::size_t>(dims.type_vocab), d});
  v.slices.push_back({kEmbLnG, 1, d});
  v.slices.push_back({kEmbLnB, 1, d});
  for (std::size_t li : v.layer_indices) {
    const std::size_t l = li - 1;
    auto idx = [&](LayerSlot s) { return TransformerParams<T>::index(l, s); };
    const SliceDesc per_layer[kLayerSlots] = {
        {idx(kWq), d, a}, {idx(kBq), 1, a}, {idx(kWk), d, a}, {idx(kBk), 1, a},   {idx(kWv), d, a},
        {idx(kBv), 1, a}, {idx(kWo), a, d}, {idx(kBo), 1, d}, {idx(kW1), d, f},   {idx(kB1), 1, f},
        {idx(kW2), f, d}, {idx(kB2), 1, d}, {idx(kLn1G), 1, d}, {idx(kLn1B), 1, d}, {idx(kLn2G), 1, d},
        {idx(kLn2B), 1, d}};
    v.slices.insert(v.slices.end(), std::begin(per_layer), std::end(per_layer));
  }
  return v;
}

}  // namespace detail

/// Bottom-left extraction: layers via `strategy`, leading d_hid rows/cols,
/// leading d_f FFN columns, leftmost h heads at the supernet head size.
template <std::floating_point T>
StudentView<T> extract(Supernet<T>& supernet, const ArchConfig& arch, LayerStrategy strategy = LayerStrategy::Alternate,
                       Phase phase = Phase::Extraction) {
  std::vector<std::string> reasons;
  if (!validate(arch, supernet.spec, &reasons)) {
    std::string msg = "architecture " + arch_id(arch) + " is not in sub-space '" + supernet.spec.name + "':";
    for (const auto& r : reasons) msg += " " + r + ";";
    throw ValidationError(msg);
  }
  auto layers = select_layers(static_cast<std::size_t>(supernet.params.dims().layers), static_cast<std::size_t>(arch.l),
                              strategy, phase);
  return detail::make_view(supernet.params, arch, supernet.spec.head_dim, std::move(layers));
}

/// View over every scalar of a standalone model (teacher or materialized student).
template <std::floating_point T>
StudentView<T> full_view(TransformerParams<T>& params) {
  const auto& d = params.dims();
  std::vector<std::size_t> layers(static_cast<std::size_t>(d.layers));
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i] = i + 1;
  return detail::make_view(params, d.arch(), d.head_dim, std::move(layers));
}

/// Deep copy of the viewed slices into a self-contained model.
template <std::floating_point T>
TransformerParams<T> materialize(const StudentView<T>& view) {
  const auto& src = *view.store;
  TransformerParams<T> out(dims_for(view.arch, view.head_dim, src.dims().vocab, src.dims().max_pos));
  auto copy = [&](const SliceDesc& s, ParamTensor<T>& dst) {
    const auto& from = src.tensors()[s.tensor].value;
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t c = 0; c < s.cols; ++c) dst.value(r, c) = from(r, c);
  };
  for (std::size_t e = 0; e < kEmbedSlots; ++e) copy(view.slices[e], out.tensors()[e]);
  for (std::size_t pos = 0; pos < view.layer_indices.size(); ++pos)
    for (std::size_t s = 0; s < kLayerSlots; ++s)
      copy(view.slice(pos, static_cast<LayerSlot>(s)), out.at(pos, static_cast<LayerSlot>(s)));
  return out;
}

/// Seeds a supernet with prefix slices of the teacher; supernet layer i takes
/// the i-th teacher layer kept by Alternate selection.
template <std::floating_point T>
Supernet<T> init_from_teacher(const SubspaceSpec& spec, const TeacherModel<T>& teacher) {
  spec.check();
  const auto& td = teacher.dims();
  const ModelDims sd{td.vocab, td.max_pos, td.type_vocab, spec.layers.hi.num(), spec.hidden.hi.num(),
                     spec.max_ffn(), spec.heads.hi.num(), spec.head_dim};
  auto axis = [&](const char* name, std::int64_t teacher_v, std::int64_t super_v) {
    if (teacher_v < super_v)
      throw InitError("teacher " + std::string(name) + " " + std::to_string(teacher_v) + " is smaller than supernet " +
                      name + " " + std::to_string(super_v));
  };
  axis("layers", td.layers, sd.layers);
  axis("hidden", td.hidden, sd.hidden);
  axis("ffn", td.ffn, sd.ffn);
  axis("attention width", td.attn_width(), sd.attn_width());

  Supernet<T> net{spec, TransformerParams<T>(sd)};
  const auto layers = select_layers(static_cast<std::size_t>(td.layers), static_cast<std::size_t>(sd.layers),
                                    LayerStrategy::Alternate);
  auto copy = [](const ParamTensor<T>& from, ParamTensor<T>& to) {
    for (std::size_t r = 0; r < to.value.rows(); ++r)
      for (std::size_t c = 0; c < to.value.cols(); ++c) to.value(r, c) = from.value(r, c);
  };
  for (std::size_t e = 0; e < kEmbedSlots; ++e) copy(teacher.params.tensors()[e], net.params.tensors()[e]);
  for (std::size_t i = 0; i < layers.size(); ++i)
    for (std::size_t s = 0; s < kLayerSlots; ++s)
      copy(teacher.params.at(layers[i] - 1, static_cast<LayerSlot>(s)), net.params.at(i, static_cast<LayerSlot>(s)));
  return net;
}

struct ForwardOptions {
  bool logits = false;         // tied output projection onto the token embeddings
  bool requires_grad = false;  // route gradients into the store
  bool qkv_only = false;       // stop once the last layer's Q/K/V exist
  std::optional<std::int64_t> head_count;  // attention split override
  double ln_eps = 1e-12;
};

template <std::floating_point T>
struct ForwardVars {
  typename nn::Tape<T>::Var q, k, v;  // last selected layer, (batch*seq) x attn_width
  std::optional<typename nn::Tape<T>::Var> hidden;
  std::optional<typename nn::Tape<T>::Var> logits;
};

/// Post-norm transformer encoder (MHA -> add&norm -> FFN -> add&norm) over
/// the view, recorded on `tape`.
template <std::floating_point T>
ForwardVars<T> forward(nn::Tape<T>& tape, const StudentView<T>& view, const TokenBatch& batch,
                       const ForwardOptions& opt = {}) {
  using Var = typename nn::Tape<T>::Var;
  auto& store = *view.store;
  const auto& dims = store.dims();
  if (batch.ids.size() != batch.batch * batch.seq || batch.batch == 0 || batch.seq == 0)
    throw InputError("forward: batch holds " + std::to_string(batch.ids.size()) + " ids for " +
                     std::to_string(batch.batch) + " x " + std::to_string(batch.seq));
  if (static_cast<std::int64_t>(batch.seq) > dims.max_pos)
    throw InputError("forward: sequence length " + std::to_string(batch.seq) + " exceeds max positions " +
                     std::to_string(dims.max_pos));
  for (TokenId id : batch.ids)
    if (id < 0 || id >= dims.vocab)
      throw InputError("forward: token id " + std::to_string(id) + " outside vocab of " + std::to_string(dims.vocab));
  if (opt.requires_grad && !store.has_grad()) throw Error("forward: gradient buffers not allocated (call zero_grad)");

  auto p = [&](const SliceDesc& s) {
    auto& t = store.tensors()[s.tensor];
    nn::ParamSlice<T> ps{t.value.data().data(), nullptr, nullptr, s.rows, s.cols, t.value.cols()};
    if (opt.requires_grad) ps.grad = t.grad.data(), ps.touched = t.touched.data();
    return tape.param(ps, opt.requires_grad);
  };

  const std::size_t B = batch.batch, S = batch.seq;
  std::vector<TokenId> positions(B * S), segments(B * S, 0);
  for (std::size_t i = 0; i < B * S; ++i) positions[i] = static_cast<TokenId>(i % S);

  Var x = tape.embedding(p(view.slice(kTokEmb)), batch.ids);
  x = tape.add(x, tape.embedding(p(view.slice(kPosEmb)), positions));
  x = tape.add(x, tape.embedding(p(view.slice(kSegEmb)), segments));
  x = tape.layer_norm(x, p(view.slice(kEmbLnG)), p(view.slice(kEmbLnB)), static_cast<T>(opt.ln_eps));

  const std::int64_t width = view.arch.attn_width(view.head_dim);
  const std::int64_t heads = opt.head_count.value_or(view.arch.h);
  if (heads < 1 || width % heads != 0)
    throw DimensionError("forward: attention width " + std::to_string(width) + " not divisible into " +
                         std::to_string(heads) + " heads");
  const T scale = T{1} / std::sqrt(static_cast<T>(width / heads));

  ForwardVars<T> out;
  const std::size_t n_layers = view.layer_indices.size();
  for (std::size_t pos = 0; pos < n_layers; ++pos) {
    auto w = [&](LayerSlot s) { return p(view.slice(pos, s)); };
    Var q = tape.add_bias(tape.matmul(x, w(kWq)), w(kBq));
    Var k = tape.add_bias(tape.matmul(x, w(kWk)), w(kBk));
    Var v = tape.add_bias(tape.matmul(x, w(kWv)), w(kBv));
    if (pos + 1 == n_layers) {
      out.q = q, out.k = k, out.v = v;
      if (opt.qkv_only) return out;
    }
    const auto G = static_cast<std::size_t>(heads);
    Var probs = tape.softmax_rows(tape.block_qkt(q, k, B, S, G, scale));
    Var ctx = tape.block_mix(probs, v, B, S, G);
    Var attn = tape.add_bias(tape.matmul(ctx, w(kWo)), w(kBo));
    x = tape.layer_norm(tape.add(x, attn), w(kLn1G), w(kLn1B), static_cast<T>(opt.ln_eps));
    Var h = tape.relu(tape.add_bias(tape.matmul(x, w(kW1)), w(kB1)));
    h = tape.add_bias(tape.matmul(h, w(kW2)), w(kB2));
    x = tape.layer_norm(tape.add(x, h), w(kLn2G), w(kLn2B), static_cast<T>(opt.ln_eps));
  }
  out.hidden = x;
  if (opt.logits) out.logits = tape.matmul_nt(x, p(view.slice(kTokEmb)));
  return out;
}

/// Plain-tensor result of an inference-only forward pass.
template <std::floating_point T>
struct ModelOutputs {
  nn::Tensor<T> q, k, v;
  nn::Tensor<T> hidden;
  std::optional<nn::Tensor<T>> logits;
};

template <std::floating_point T>
ModelOutputs<T> run(const StudentView<T>& view, const TokenBatch& batch, ForwardOptions opt = {}) {
  opt.requires_grad = false;
  nn::Tape<T> tape;
  auto f = forward(tape, view, batch, opt);
  ModelOutputs<T> out{tape.tensor(f.q), tape.tensor(f.k), tape.tensor(f.v), {}, {}};
  if (f.hidden) out.hidden = tape.tensor(*f.hidden);
  if (f.logits) out.logits = tape.tensor(*f.logits);
  return out;
}

}  // namespace autodistil

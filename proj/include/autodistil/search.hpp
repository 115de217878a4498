#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "autodistil/costmodel.hpp"
#include "autodistil/data.hpp"
#include "autodistil/distill.hpp"
#include "autodistil/error.hpp"
#include "autodistil/optim.hpp"
#include "autodistil/searchspace.hpp"
#include "autodistil/supernet.hpp"
#include "autodistil/trainer.hpp"

namespace autodistil {

enum class Metric { ValidationKDLoss, ProxyAccuracy };
enum class CostKind { Flops, Params };

inline const char* to_string(CostKind k) { return k == CostKind::Flops ? "flops" : "params"; }

struct SearchQuery {
  Metric metric = Metric::ValidationKDLoss;
  CostKind cost = CostKind::Flops;
  CostConvention convention = CostConvention::Supernet;
  std::uint64_t seq_len = 128;
  double constraint = std::numeric_limits<double>::infinity();  // c
  bool inclusive = false;                                       // g <= c instead of g < c
  std::vector<std::string> scope;                               // sub-space names

  void check() const {
    if (!(constraint > 0.0)) throw ValidationError("search: constraint must be positive");
    if (scope.empty()) throw ValidationError("search: scope names no sub-space");
  }
  bool admits(double cost_value) const { return inclusive ? cost_value <= constraint : cost_value < constraint; }
};

struct CandidateRecord {
  std::string arch_id;
  std::string subspace;
  ArchConfig arch;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  double metric = 0.0;
  bool feasible = false;

  double cost(CostKind k) const { return static_cast<double>(k == CostKind::Flops ? flops : params); }
};

struct SearchResult {
  ArchConfig best;
  std::string subspace;
  std::vector<CandidateRecord> records;
};

/// Parses "flops<=5.6G", "params<30M", "flops<50%" (percent of `reference`).
inline SearchQuery parse_constraint(std::string_view text, SearchQuery base, double reference = 0.0) {
  auto fail = [&] {
    return ValidationError("constraint '" + std::string(text) + "' must look like '<flops|params><[=]value>'");
  };
  std::string_view rest;
  if (text.rfind("flops", 0) == 0)
    base.cost = CostKind::Flops, rest = text.substr(5);
  else if (text.rfind("params", 0) == 0)
    base.cost = CostKind::Params, rest = text.substr(6);
  else
    throw fail();
  if (rest.rfind("<=", 0) == 0)
    base.inclusive = true, rest = rest.substr(2);
  else if (rest.rfind("<", 0) == 0)
    base.inclusive = false, rest = rest.substr(1);
  else
    throw fail();
  if (rest.empty()) throw fail();
  double scale = 1.0;
  switch (rest.back()) {
    case 'K': scale = 1e3; break;
    case 'M': scale = 1e6; break;
    case 'G': scale = 1e9; break;
    case '%':
      if (!(reference > 0.0)) throw ValidationError("constraint '" + std::string(text) + "' needs a reference cost");
      scale = reference / 100.0;
      break;
    default: break;
  }
  if (scale != 1.0 || rest.back() == '%') rest.remove_suffix(1);
  try {
    std::size_t used = 0;
    const std::string num(rest);
    const double v = std::stod(num, &used);
    if (used != num.size()) throw fail();
    base.constraint = v * scale;
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception&) {
    throw fail();
  }
  return base;
}

namespace detail {

template <std::floating_point T>
std::vector<Supernet<T>*> in_scope(const std::vector<Supernet<T>*>& supernets, const SearchQuery& q) {
  std::vector<Supernet<T>*> out;
  for (const auto& name : q.scope) {
    auto it = std::find_if(supernets.begin(), supernets.end(), [&](auto* s) { return s->spec.name == name; });
    if (it == supernets.end()) throw ValidationError("search: no supernet for sub-space '" + name + "'");
    out.push_back(*it);
  }
  return out;
}

template <std::floating_point T>
CandidateRecord base_record(const Supernet<T>& net, const ArchConfig& a, const SearchQuery& q) {
  CostContext ctx{static_cast<std::uint64_t>(net.params.dims().vocab), static_cast<std::uint64_t>(net.params.dims().max_pos),
                  static_cast<std::uint64_t>(net.params.dims().type_vocab), net.spec.head_dim};
  CandidateRecord r{arch_id(a), net.spec.name, a, count_flops(a, q.seq_len, q.convention, net.spec.head_dim),
                    count_params(a, ctx, q.convention), 0.0, false};
  r.feasible = q.admits(r.cost(q.cost));
  return r;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results land in
/// caller-owned slots, so the outcome does not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void sort_records(std::vector<CandidateRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.subspace, a.arch_id) < std::tie(b.subspace, b.arch_id);
  });
}

/// Index of the best feasible record; `better(a, b)` orders metrics. Ties go
/// to fewer flops, then the smaller arch id.
template <class Better>
std::optional<std::size_t> pick_best(const std::vector<CandidateRecord>& records, Better better) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.feasible) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = records[*best];
    if (better(r.metric, b.metric) ||
        (r.metric == b.metric && (r.flops < b.flops || (r.flops == b.flops && r.arch_id < b.arch_id))))
      best = i;
  }
  return best;
}

inline InfeasibleError infeasible(const std::vector<CandidateRecord>& records, const SearchQuery& q,
                                  const std::string& where) {
  double min_cost = std::numeric_limits<double>::infinity();
  for (const auto& r : records) min_cost = std::min(min_cost, r.cost(q.cost));
  std::ostringstream os;
  os << "no architecture" << where << " satisfies " << to_string(q.cost) << (q.inclusive ? " <= " : " < ")
     << q.constraint << "; minimum achievable " << to_string(q.cost) << " is " << min_cost;
  return InfeasibleError(os.str(), min_cost);
}

}  // namespace detail

/// Exhaustive constrained search: every architecture of every in-scope
/// sub-space is extracted (no retraining) and scored by heldout relation
/// loss; the feasible minimum wins.
template <std::floating_point T>
SearchResult task_agnostic_search(const std::vector<Supernet<T>*>& supernets, const TeacherModel<T>& teacher,
                                  const std::vector<TokenBatch>& val, const SearchQuery& query,
                                  const LossWeights& betas = {}, LayerStrategy strategy = LayerStrategy::Alternate,
                                  std::size_t threads = 1) {
  query.check();
  if (query.metric != Metric::ValidationKDLoss) throw ValidationError("task_agnostic_search needs the validation-loss metric");
  if (val.empty()) throw InputError("task_agnostic_search: empty validation set");
  SearchResult result;
  for (auto* net : detail::in_scope(supernets, query)) {
    const auto archs = enumerate(net->spec);
    std::vector<CandidateRecord> recs(archs.size());
    detail::parallel_for(archs.size(), threads, [&](std::size_t i) {
      recs[i] = detail::base_record(*net, archs[i], query);
      recs[i].metric = evaluate_heldout(*net, teacher, val, {archs[i]}, betas, strategy).front();
    });
    result.records.insert(result.records.end(), recs.begin(), recs.end());
  }
  detail::sort_records(result.records);
  const auto best = detail::pick_best(result.records, [](double a, double b) { return a < b; });
  if (!best) throw detail::infeasible(result.records, query, "");
  result.best = result.records[*best].arch;
  result.subspace = result.records[*best].subspace;
  return result;
}

struct FinetuneConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  LayerStrategy strategy = LayerStrategy::Alternate;
};

/// Fine-tunes a materialized copy of `arch` with a linear classifier on the
/// first-token hidden state, then reports eval accuracy. The supernet is
/// only read.
template <std::floating_point T>
double proxy_finetune_eval(Supernet<T>& net, const ArchConfig& arch, const ProxyTask& task, const FinetuneConfig& ft) {
  if (task.num_classes < 2) throw ValidationError("proxy task needs at least 2 classes");
  for (const auto* set : {&task.train, &task.eval}) {
    if (set->y.size() != set->x.batch) throw InputError("proxy task: label count does not match sequences");
    for (auto y : set->y)
      if (y < 0 || static_cast<std::size_t>(y) >= task.num_classes) throw InputError("proxy task: label out of range");
  }
  if (task.eval.x.batch == 0) throw InputError("proxy task: empty eval split");

  TransformerParams<T> student = materialize(extract(net, arch, ft.strategy, Phase::Extraction));
  const auto d = static_cast<std::size_t>(arch.d_hid), classes = task.num_classes;
  ParamTensor<T> head_w{"head.weight", nn::Tensor<T>({d, classes}), {}, {}};
  ParamTensor<T> head_b{"head.bias", nn::Tensor<T>({1, classes}), {}, {}};
  Rng rng(mix_seed(ft.seed, 0xC1A55));
  for (auto& w : head_w.value.data()) w = static_cast<T>(rng.normal() / std::sqrt(static_cast<double>(d)));

  auto view = full_view(student);
  const std::size_t seq = task.train.x.seq;
  auto logits_of = [&](nn::Tape<T>& tape, const TokenBatch& x, bool grad) {
    ForwardOptions fo;
    fo.requires_grad = grad;
    auto f = forward(tape, view, x, fo);
    std::vector<std::size_t> cls_rows(x.batch);
    for (std::size_t b = 0; b < x.batch; ++b) cls_rows[b] = b * x.seq;
    auto slice = [&](ParamTensor<T>& p) {
      nn::ParamSlice<T> s{p.value.data().data(), grad ? p.grad.data() : nullptr, grad ? p.touched.data() : nullptr,
                          p.value.rows(), p.value.cols(), p.value.cols()};
      return tape.param(s, grad);
    };
    auto pooled = tape.select_rows(*f.hidden, cls_rows);
    return tape.add_bias(tape.matmul(pooled, slice(head_w)), slice(head_b));
  };

  if (ft.epochs > 0) {
    auto params = Optimizer<T>::all(student);
    params.push_back(&head_w);
    params.push_back(&head_b);
    OptimizerConfig oc;
    oc.learning_rate = ft.learning_rate;
    Optimizer<T> opt(oc, params);
    const std::size_t n = task.train.x.batch;
    std::vector<std::size_t> order(n);
    for (std::size_t epoch = 0; epoch < ft.epochs; ++epoch) {
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      Rng shuffle(mix_seed(ft.seed, epoch));
      shuffle.shuffle(order.begin(), order.end());
      for (std::size_t start = 0; start < n; start += ft.batch_size) {
        const std::size_t len = std::min(ft.batch_size, n - start);
        TokenBatch x{len, seq, {}};
        std::vector<std::int32_t> y;
        for (std::size_t i = start; i < start + len; ++i) {
          auto row = task.train.x.row(order[i]);
          x.ids.insert(x.ids.end(), row.begin(), row.end());
          y.push_back(task.train.y[order[i]]);
        }
        student.zero_grad();
        for (auto* p : {&head_w, &head_b}) {
          p->grad.assign(p->value.size(), T{0});
          p->touched.assign(p->value.size(), 0);
        }
        nn::Tape<T> tape;
        auto loss = tape.cross_entropy(logits_of(tape, x, true), y);
        if (!std::isfinite(static_cast<double>(tape.scalar(loss)))) throw TrainingError("proxy fine-tuning diverged");
        tape.backward(loss);
        opt.step();
      }
    }
  }

  nn::Tape<T> tape;
  auto logits = tape.value(logits_of(tape, task.eval.x, false));
  std::size_t correct = 0;
  for (std::size_t b = 0; b < logits.rows; ++b) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < logits.cols; ++c)
      if (logits(b, c) > logits(b, arg)) arg = c;
    if (static_cast<std::int32_t>(arg) == task.eval.y[b]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows);
}

struct ProxySearchResult {
  std::vector<std::pair<std::string, ArchConfig>> selections;  // one per sub-space, scope order
  std::vector<CandidateRecord> records;
};

/// Per sub-space: fine-tune-evaluate every candidate and keep the most
/// accurate one that meets the constraint.
template <std::floating_point T>
ProxySearchResult task_proxy_search(const std::vector<Supernet<T>*>& supernets, const ProxyTask& task,
                                    const FinetuneConfig& ft, const SearchQuery& query, std::size_t threads = 1) {
  query.check();
  if (query.metric != Metric::ProxyAccuracy) throw ValidationError("task_proxy_search needs the proxy-accuracy metric");
  ProxySearchResult result;
  for (auto* net : detail::in_scope(supernets, query)) {
    const auto archs = enumerate(net->spec);
    std::vector<CandidateRecord> recs(archs.size());
    detail::parallel_for(archs.size(), threads, [&](std::size_t i) {
      recs[i] = detail::base_record(*net, archs[i], query);
      recs[i].metric = proxy_finetune_eval(*net, archs[i], task, ft);
    });
    detail::sort_records(recs);
    const auto best = detail::pick_best(recs, [](double a, double b) { return a > b; });
    if (!best) throw detail::infeasible(recs, query, " in sub-space '" + net->spec.name + "'");
    result.selections.emplace_back(net->spec.name, recs[*best].arch);
    result.records.insert(result.records.end(), recs.begin(), recs.end());
  }
  detail::sort_records(result.records);
  return result;
}

/// Records not dominated by any other (no cheaper-or-equal record with a
/// strictly better metric, and no strictly cheaper record with an equal or
/// better metric), sorted by cost then arch id.
inline std::vector<CandidateRecord> pareto_frontier(const std::vector<CandidateRecord>& records, CostKind cost,
                                                    bool minimize_metric) {
  std::vector<CandidateRecord> sorted = records;
  std::stable_sort(sorted.begin(), sorted.end(), [&](const auto& a, const auto& b) {
    if (a.cost(cost) != b.cost(cost)) return a.cost(cost) < b.cost(cost);
    const double ma = minimize_metric ? a.metric : -a.metric, mb = minimize_metric ? b.metric : -b.metric;
    if (ma != mb) return ma < mb;
    return std::tie(a.subspace, a.arch_id) < std::tie(b.subspace, b.arch_id);
  });
  // Sweep groups of equal cost in ascending order, tracking the best metric
  // seen at strictly lower cost.
  std::vector<CandidateRecord> out;
  double best_lower = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    const double c = sorted[i].cost(cost);
    while (j < sorted.size() && sorted[j].cost(cost) == c) ++j;
    const double group_best = minimize_metric ? sorted[i].metric : -sorted[i].metric;
    for (std::size_t k = i; k < j; ++k) {
      const double m = minimize_metric ? sorted[k].metric : -sorted[k].metric;
      if (m == group_best && m < best_lower) out.push_back(sorted[k]);
    }
    best_lower = std::min(best_lower, group_best);
    i = j;
  }
  return out;
}

// ---- CSV export ---------------------------------------------------------------

inline constexpr const char* kRecordsHeader = "arch_id,subspace,layers,hid,ratio,heads,flops,params,metric,feasible";

inline std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string records_to_csv(const std::vector<CandidateRecord>& records) {
  std::string out = std::string(kRecordsHeader) + "\n";
  for (const auto& r : records)
    out += r.arch_id + "," + r.subspace + "," + std::to_string(r.arch.l) + "," + std::to_string(r.arch.d_hid) + "," +
           r.arch.r.to_string() + "," + std::to_string(r.arch.h) + "," + std::to_string(r.flops) + "," +
           std::to_string(r.params) + "," + format_metric(r.metric) + "," + (r.feasible ? "true" : "false") + "\n";
  return out;
}

inline std::vector<CandidateRecord> records_from_csv(std::string_view text) {
  std::vector<CandidateRecord> out;
  auto lines = detail::split(text, '\n');
  if (lines.empty() || detail::trim(lines[0]) != kRecordsHeader)
    throw ValidationError("records file: expected header '" + std::string(kRecordsHeader) + "'");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = detail::trim(lines[i]);
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    auto bad = [&] { return ValidationError("records file: malformed line " + std::to_string(i + 1)); };
    if (f.size() != 10) throw bad();
    CandidateRecord r;
    r.arch_id = std::string(f[0]);
    r.subspace = std::string(f[1]);
    try {
      r.arch = parse_arch_id(r.arch_id);
      r.flops = std::stoull(std::string(f[6]));
      r.params = std::stoull(std::string(f[7]));
      r.metric = std::stod(std::string(f[8]));
    } catch (const std::exception&) {
      throw bad();
    }
    if (f[9] != "true" && f[9] != "false") throw bad();
    r.feasible = f[9] == "true";
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace autodistil

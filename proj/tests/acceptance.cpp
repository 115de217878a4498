// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

#include "support.hpp"

using namespace autodistil;
using testing_support::Gen;
using testing_support::gradient_check;
using testing_support::ToySetting;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances.
constexpr double kBertParamsTol = 0.03, kBertFlopsTol = 0.02;
constexpr double kRowParamsTol = 0.06, kRowFlopsTol = 0.12;
constexpr double kRangeTol = 0.15;
constexpr double kZeroLoss = 1e-12;
constexpr double kGradTol = 1e-4, kGradSeconds = 60;
constexpr double kHeldoutRatio = 0.70, kEndToEndSeconds = 600;
constexpr std::size_t kFuzzMutations = 1000;
constexpr std::uint64_t kSeed = 42;

const CostContext kBert{30522, 512, 2, 64};

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

double rel(double got, double want) { return std::abs(got - want) / want; }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void c1(Outcome& o) {
  const ArchConfig bert{12, 768, Rational(4), 12};
  const auto p = static_cast<double>(count_params(bert, kBert, CostConvention::Table));
  const auto f = static_cast<double>(count_flops(bert, 128, CostConvention::Table));
  o.detail << "params " << p << " (err " << rel(p, 109e6) << "), flops " << f << " (err " << rel(f, 11.2e9) << ") ";
  o.require(rel(p, 109e6) < kBertParamsTol, "params");
  o.require(rel(f, 11.2e9) < kBertFlopsTol, "flops");
}

void c2(Outcome& o) {
  struct Row {
    ArchConfig arch;
    double flops, params;
  } rows[] = {{{11, 352, Rational(4), 10}, 2.13e9, 26.8e6},
              {{12, 544, Rational(3), 9}, 4.40e9, 50.1e6},
              {{11, 352, Rational(4), 8}, 2.02e9, 26.1e6},
              {{7, 160, Rational(7, 2), 10}, 0.27e9, 6.88e6}};
  double worst_p = 0, worst_f = 0;
  for (const auto& r : rows) {
    worst_p = std::max(worst_p, rel(static_cast<double>(count_params(r.arch, kBert, CostConvention::Table)), r.params));
    worst_f = std::max(worst_f, rel(static_cast<double>(count_flops(r.arch, 128, CostConvention::Table)), r.flops));
  }
  o.detail << "worst params err " << worst_p << ", worst flops err " << worst_f << " ";
  o.require(worst_p < kRowParamsTol, "params");
  o.require(worst_f < kRowFlopsTol, "flops");
}

void c3(Outcome& o) {
  const std::pair<double, double> want[] = {{4e6, 10e6}, {12e6, 28e6}, {39e6, 79e6}};
  const auto spaces = presets::standard();
  for (std::size_t i = 0; i < spaces.size(); ++i) {
    const auto n = enumerate(spaces[i]).size();
    const auto [lo, hi] = cost_range(spaces[i], 128, kBert, CostConvention::Table);
    const double e_lo = rel(static_cast<double>(lo.params), want[i].first),
                 e_hi = rel(static_cast<double>(hi.params), want[i].second);
    o.detail << spaces[i].name << ": " << n << " configs, params " << lo.params << "-" << hi.params << " (err " << e_lo
             << "/" << e_hi << "); ";
    o.require(n == 256, spaces[i].name + " count");
    o.require(e_lo < kRangeTol && e_hi < kRangeTol, spaces[i].name + " params range");
  }
}

void c4(Outcome& o) {
  const auto toy = ToySetting<double>::make(kSeed, 50);
  auto net = init_from_teacher(toy.spec, toy.teacher);
  const auto max_arch = net.params.dims().arch();
  const auto val = heldout_batches(toy.corpus, 8, kSeed);
  const double loss = evaluate_heldout(net, toy.teacher, val, {max_arch}).front();
  o.detail << arch_id(max_arch) << " loss " << loss << " ";
  o.require(net.params.dims() == toy.teacher.dims(), "dims");
  o.require(loss < kZeroLoss, "loss");
}

void c5(Outcome& o) {
  using Tape = nn::Tape<double>;
  using Var = Tape::Var;
  const auto t0 = Clock::now();
  Gen g(5);
  auto probe = [](Tape& t, Var x) {
    Gen pg(99);
    return t.mse(x, t.constant(pg.tensor<double>(t.shape(x))));
  };
  auto x = g.tensor<double>({4, 6});
  for (auto& e : x.data()) e += e >= 0 ? 0.1 : -0.1;
  const std::vector<TokenId> ids{0, 3, 3, 1};
  const std::vector<std::size_t> rows{2, 0, 2};
  const std::vector<std::int32_t> labels{1, 0, 3};
  std::vector<std::pair<std::string, double>> errs;
  auto check = [&](std::string name, std::vector<nn::Tensor<double>> in, testing_support::LossFn fn) {
    errs.emplace_back(std::move(name), gradient_check(in, fn));
  };
  check("matmul", {g.tensor<double>({3, 4}), g.tensor<double>({4, 5})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.matmul(v[0], v[1])); });
  check("matmul_nt", {g.tensor<double>({3, 4}), g.tensor<double>({5, 4})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.matmul_nt(v[0], v[1])); });
  check("add", {g.tensor<double>({3, 4}), g.tensor<double>({3, 4})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.add(v[0], v[1])); });
  check("add_bias", {g.tensor<double>({3, 4}), g.tensor<double>({1, 4})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.add_bias(v[0], v[1])); });
  check("scale", {g.tensor<double>({3, 4})}, [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.scale(v[0], 0.3)); });
  check("relu", {x}, [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.relu(v[0])); });
  check("layer_norm", {g.tensor<double>({3, 6}), g.tensor<double>({1, 6}), g.tensor<double>({1, 6})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.layer_norm(v[0], v[1], v[2], 1e-5)); });
  check("softmax_rows", {g.tensor<double>({3, 4}, -3, 3)},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.softmax_rows(v[0])); });
  check("embedding", {g.tensor<double>({5, 3})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.embedding(v[0], ids)); });
  check("select_rows", {g.tensor<double>({3, 4})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.select_rows(v[0], rows)); });
  check("block_qkt", {g.tensor<double>({2 * 3, 2 * 2}), g.tensor<double>({2 * 3, 2 * 2})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.block_qkt(v[0], v[1], 2, 3, 2, 0.7)); });
  check("block_mix", {g.tensor<double>({2 * 2 * 3, 3}), g.tensor<double>({2 * 3, 2 * 2})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.block_mix(v[0], v[1], 2, 3, 2)); });
  check("mse", {g.tensor<double>({3, 4}), g.tensor<double>({3, 4})},
        [](Tape& t, const std::vector<Var>& v) { return t.mse(v[0], v[1]); });
  check("cross_entropy", {g.tensor<double>({3, 5}, -2, 2)},
        [&](Tape& t, const std::vector<Var>& v) { return t.cross_entropy(v[0], labels); });
  check("weighted_sum", {g.tensor<double>({2, 2}), g.tensor<double>({2, 2})}, [&](Tape& t, const std::vector<Var>& v) {
    const std::vector<Var> parts{probe(t, v[0]), probe(t, v[1])};
    return t.weighted_sum(parts, std::vector<double>{0.3, 2.0});
  });
  check("reshape", {g.tensor<double>({2, 6})},
        [&](Tape& t, const std::vector<Var>& v) { return probe(t, t.reshape(v[0], {3, 4})); });

  // End-to-end relation distillation through a toy student: every stored
  // scalar against central differences.
  {
    const ModelDims d{6, 4, 2, 2, 4, 8, 2, 2};
    auto store = TransformerParams<double>::randomized(d, 10);
    for (auto& t : store.tensors())
      if (t.value.rows() == 1)
        for (auto& v : t.value.data()) v += g.real(-0.3, 0.3);
    const TeacherModel<double> teacher{TransformerParams<double>::randomized(d, 11), 2};
    const auto batch = testing_support::random_batch(g, 2, 4, 6);
    const auto rel_t = teacher_relations(teacher_qkv(teacher, batch), 2, 4, 2);
    auto loss_on = [&](nn::Tape<double>& t, bool grad) {
      ForwardOptions fo;
      fo.qkv_only = true;
      fo.requires_grad = grad;
      auto f = forward(t, full_view(store), batch, fo);
      return relation_kd_loss(t, rel_t, {f.q, f.k, f.v}, 2, 4, 2, LossWeights{});
    };
    store.zero_grad();
    {
      nn::Tape<double> t;
      t.backward(loss_on(t, true));
    }
    std::vector<double> analytic, numeric;
    for (auto& t : store.tensors())
      for (std::size_t k = 0; k < t.value.size(); ++k) {
        analytic.push_back(t.grad[k]);
        const double orig = t.value[k];
        double side[2];
        for (int s = 0; s < 2; ++s) {
          t.value[k] = orig + (s == 0 ? 1e-6 : -1e-6);
          nn::Tape<double> tape;
          side[s] = tape.scalar(loss_on(tape, false));
        }
        t.value[k] = orig;
        numeric.push_back((side[0] - side[1]) / 2e-6);
      }
    errs.emplace_back("relation_kd_end_to_end", testing_support::relative_error(analytic, numeric));
  }

  double worst = 0;
  std::string worst_name;
  for (const auto& [name, e] : errs) {
    o.require(e < kGradTol, name);
    if (e >= worst) worst = e, worst_name = name;
  }
  const double secs = seconds_since(t0);
  o.detail << errs.size() << " checks, worst " << worst << " (" << worst_name << "), " << secs << " s ";
  o.require(secs < kGradSeconds, "runtime");
}

void c6(Outcome& o) {
  auto toy = ToySetting<double>::make(kSeed, 20);
  toy.corpus.train.resize(8 * toy.corpus.seq_len);  // exactly one batch
  auto cfg = toy.train_config(kSeed, 1);
  cfg.samples_per_step = 2;
  cfg.heldout_each_epoch = false;
  auto net = init_from_teacher(toy.spec, toy.teacher);
  const auto before = testing_support::snapshot(net.params);
  const auto log = train_supernet(net, toy.teacher, toy.corpus, cfg);
  const auto after = testing_support::snapshot(net.params);
  std::set<std::pair<std::size_t, std::size_t>> expected;
  for (const auto& id : log.steps.at(0).archs) expected.merge(testing_support::loss_reachable(net, parse_arch_id(id)));
  std::size_t changed = 0, outside = 0, touched_mismatch = 0, missed = 0;
  for (std::size_t ti = 0; ti < after.size(); ++ti) {
    const auto& pt = net.params.tensors()[ti];
    for (std::size_t k = 0; k < after[ti].size(); ++k) {
      const bool in = expected.count({ti, k}) > 0, diff = after[ti][k] != before[ti][k];
      changed += diff;
      outside += diff && !in;
      touched_mismatch += (pt.touched[k] != 0) != in;
      missed += in && pt.grad[k] != 0.0 && !diff;
    }
  }
  o.detail << "archs " << log.steps[0].archs[0] << " + " << log.steps[0].archs[1] << ", union " << expected.size()
           << " entries, changed " << changed << ", outside union " << outside << ", updated-set mismatch "
           << touched_mismatch << ", unchanged with gradient " << missed << " ";
  o.require(outside == 0, "change outside union");
  o.require(touched_mismatch == 0, "updated set differs from union");
  o.require(missed == 0, "entry with gradient left unchanged");
}

/// Criterion 7's run, returned for the determinism check.
struct EndToEnd {
  std::string checkpoint, csv;
  double initial = 0, final = 0;
  std::string best;
  bool brute_force_match = false, feasible = false;
};

EndToEnd end_to_end(std::uint64_t seed) {
  auto toy = ToySetting<float>::make(seed, 200);
  const auto cfg = toy.train_config(seed, 3);
  auto net = init_from_teacher(toy.spec, toy.teacher);
  const auto val = heldout_batches(toy.corpus, cfg.batch_size, seed);
  const auto archs = enumerate(toy.spec);
  EndToEnd r;
  for (double l : evaluate_heldout(net, toy.teacher, val, archs)) r.initial += l / static_cast<double>(archs.size());
  const auto log = train_supernet(net, toy.teacher, toy.corpus, cfg);
  r.final = log.epochs.back().heldout_loss;

  const double c = 0.5 * static_cast<double>(count_flops(toy.teacher.dims().arch(), cfg.seq_len,
                                                         CostConvention::Supernet, toy.spec.head_dim));
  SearchQuery q;
  q.seq_len = cfg.seq_len;
  q.constraint = c;
  q.scope = {toy.spec.name};
  const auto res = task_agnostic_search<float>({&net}, toy.teacher, val, q, {}, LayerStrategy::Alternate, 4);
  r.best = arch_id(res.best);
  r.feasible = static_cast<double>(count_flops(res.best, cfg.seq_len, CostConvention::Supernet, toy.spec.head_dim)) < c;

  // Brute force: recompute every candidate's cost and loss independently.
  ForwardOptions fo;
  fo.qkv_only = true;
  std::optional<std::pair<double, std::string>> best;
  bool metrics_match = true;
  for (const auto& a : archs) {
    const auto flops = count_flops(a, cfg.seq_len, CostConvention::Supernet, toy.spec.head_dim);
    double loss = 0;
    for (const auto& b : val) {
      const auto s = run(extract(net, a), b, fo);
      loss += static_cast<double>(relation_kd_loss(teacher_qkv(toy.teacher, b), QkvTensors<float>{s.q, s.k, s.v},
                                                   b.batch, b.seq, 2, LossWeights{}));
    }
    loss /= static_cast<double>(val.size());
    const auto it = std::find_if(res.records.begin(), res.records.end(), [&](const auto& x) { return x.arch_id == arch_id(a); });
    metrics_match &= it != res.records.end() && it->metric == loss && it->flops == flops &&
                     it->feasible == (static_cast<double>(flops) < c);
    if (static_cast<double>(flops) < c && (!best || loss < best->first)) best = {loss, arch_id(a)};
  }
  r.brute_force_match = metrics_match && best && best->second == r.best;
  r.checkpoint = encode_checkpoint(to_checkpoint(net.params, {{"seed", seed}, {"subspace", to_json(toy.spec)}}));
  r.csv = records_to_csv(res.records);
  return r;
}

std::optional<EndToEnd> first_run;

void c7(Outcome& o) {
  const auto t0 = Clock::now();
  first_run = end_to_end(kSeed);
  const auto& r = *first_run;
  const double secs = seconds_since(t0);
  o.detail << "heldout " << r.initial << " -> " << r.final << " (ratio " << r.final / r.initial << "), best " << r.best
           << ", " << secs << " s ";
  o.require(r.final < kHeldoutRatio * r.initial, "heldout ratio");
  o.require(r.feasible, "feasible");
  o.require(r.brute_force_match, "brute-force match");
  o.require(secs < kEndToEndSeconds, "runtime");
}

void c8(Outcome& o) {
  if (!first_run) first_run = end_to_end(kSeed);
  const auto again = end_to_end(kSeed);
  o.detail << "checkpoint " << first_run->checkpoint.size() << " bytes, csv " << first_run->csv.size() << " bytes ";
  o.require(again.checkpoint == first_run->checkpoint, "checkpoint bytes");
  o.require(again.csv == first_run->csv, "csv bytes");
}

void c9(Outcome& o) {
  testing_support::TempDir dir;
  const ModelDims d{40, 16, 2, 3, 16, 48, 2, 8};
  const auto p = TransformerParams<float>::randomized(d, kSeed);
  const auto path = dir / "store.ckpt";
  save_checkpoint(path, to_checkpoint(p, {{"seed", kSeed}}));
  const auto loaded = load_checkpoint(path);
  const auto q = params_from_checkpoint<float>(loaded);
  bool exact = true;
  for (std::size_t i = 0; i < p.tensors().size(); ++i)
    exact &= std::memcmp(p.tensors()[i].value.data().data(), q.tensors()[i].value.data().data(),
                         p.tensors()[i].value.size() * sizeof(float)) == 0;
  const std::string bytes = encode_checkpoint(loaded);
  o.require(exact, "values");
  o.require(bytes == encode_checkpoint(to_checkpoint(q, {{"seed", kSeed}})), "re-encode");

  Gen g(kSeed);
  std::size_t typed = 0, accepted = 0, untyped = 0;
  for (std::size_t i = 0; i < kFuzzMutations; ++i) {
    std::string s = bytes;
    switch (i % 3) {
      case 0:
        for (std::int64_t e = g.integer(1, 4); e > 0; --e)
          s[static_cast<std::size_t>(g.integer(0, static_cast<std::int64_t>(s.size()) - 1))] ^=
              static_cast<char>(g.integer(1, 255));
        break;
      case 1:
        s.resize(static_cast<std::size_t>(g.integer(0, static_cast<std::int64_t>(s.size()) - 1)));
        break;
      default:
        s[static_cast<std::size_t>(g.integer(0, 40))] = static_cast<char>(g.integer(0, 255));
        s.insert(static_cast<std::size_t>(g.integer(0, static_cast<std::int64_t>(s.size()))), 1, 'x');
    }
    try {
      params_from_checkpoint<float>(decode_checkpoint(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size())));
      ++accepted;
    } catch (const CheckpointError&) {
      ++typed;
    } catch (...) {
      ++untyped;
    }
  }
  o.detail << "round trip exact, " << kFuzzMutations << " mutations: " << typed << " typed rejections, " << accepted
           << " accepted, " << untyped << " untyped ";
  o.require(untyped == 0, "untyped error");
}

void c10(Outcome& o) {
  using V = std::vector<std::size_t>;
  o.require(select_layers(12, 6, LayerStrategy::Alternate) == V{2, 4, 6, 8, 10, 12}, "(12,6,Alternate)");
  o.require(select_layers(12, 9, LayerStrategy::Alternate) == V{2, 4, 6, 7, 8, 9, 10, 11, 12}, "(12,9,Alternate)");
  o.require(select_layers(12, 6, LayerStrategy::Top) == V{1, 2, 3, 4, 5, 6}, "(12,6,Top)");
  SubspaceSpec spec{"deep", {6, 12, 6}, {8, 8, 8}, {2, 2, 1}, {1, 1, 1}, 8};
  const ModelDims dims{10, 4, 2, 12, 8, 16, 1, 8};
  Supernet<float> net{spec, TransformerParams<float>(dims)};
  const ArchConfig six{6, 8, Rational(2), 1};
  const std::pair<LayerStrategy, V> expect[] = {{LayerStrategy::Alternate, {2, 4, 6, 8, 10, 12}},
                                                {LayerStrategy::Top, {1, 2, 3, 4, 5, 6}},
                                                {LayerStrategy::AlternateTop, {1, 2, 3, 4, 5, 6}}};
  for (const auto& [s, layers] : expect) {
    const bool ok = extract(net, six, s, Phase::Extraction).layer_indices == layers;
    o.require(ok, std::string("extract ") + to_string(s));
    o.detail << to_string(s) << " ok; ";
  }
  o.require(extract(net, six, LayerStrategy::AlternateTop, Phase::Training).layer_indices == V{2, 4, 6, 8, 10, 12},
            "alternate_top while training");
}

}  // namespace

int main() {
  const std::pair<int, std::function<void(Outcome&)>> criteria[] = {{1, c1}, {2, c2}, {3, c3}, {4, c4},  {5, c5},
                                                                    {6, c6}, {7, c7}, {8, c8}, {9, c9}, {10, c10}};
  int failures = 0;
  for (const auto& [n, fn] : criteria) {
    Outcome o;
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    failures += !o.pass;
    std::printf("criterion %d: %s - %s\n", n, o.pass ? "PASS" : "FAIL", o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

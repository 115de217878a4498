#pragma once

// Command-line front end; run_cli() is callable in-process.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "autodistil/checkpoint.hpp"
#include "autodistil/config.hpp"
#include "autodistil/costmodel.hpp"
#include "autodistil/data.hpp"
#include "autodistil/search.hpp"
#include "autodistil/searchspace.hpp"
#include "autodistil/trainer.hpp"

namespace autodistil::cli {

/// Bad flag value or config key; exit code 1.
struct UsageError : Error {
  using Error::Error;
};

/// Everything a run needs besides the sub-space, read from the flat config.
struct RunConfig {
  std::map<std::string, SubspaceSpec> subspaces = presets::all();
  TrainConfig train;
  std::string precision = "f32";
  std::size_t threads = 1;

  // corpus
  std::string corpus_file;
  std::size_t corpus_tokens = 20000;
  std::size_t corpus_words = 40;
  double val_fraction = 0.1;
  std::size_t vocab_max = 1000;
  std::int64_t max_positions = 64;

  // teacher; zero means "max corner of the trained sub-space"
  std::int64_t teacher_layers = 0, teacher_hidden = 0, teacher_heads = 0, teacher_head_dim = 0;
  Rational teacher_ratio{0};
  std::int64_t relation_heads = 0;  // zero: the teacher's head count
  std::size_t teacher_pretrain_steps = 0;
  double teacher_lr = 1e-3;

  // search
  CostConvention convention = CostConvention::Supernet;
  FinetuneConfig finetune;
  std::size_t proxy_train = 256, proxy_eval = 128;
  double proxy_majority = 0.8;
};

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const auto cfg = KeyValueConfig::load(path);
  RunConfig rc;
  auto& t = rc.train;
  t.seed = cfg.get_uint("seed", 0);
  t.epochs = cfg.get_uint("epochs", t.epochs);
  t.samples_per_step = cfg.get_uint("samples_per_step", t.samples_per_step);
  t.batch_size = cfg.get_uint("batch_size", 8);
  t.seq_len = cfg.get_uint("seq_len", 16);
  t.optimizer.learning_rate = cfg.get_real("learning_rate", t.optimizer.learning_rate);
  const auto opt = cfg.get_string("optimizer", "adam");
  if (opt == "sgd")
    t.optimizer.kind = OptimizerConfig::Kind::Sgd;
  else if (opt != "adam")
    throw UsageError(cfg.source() + ": key 'optimizer' must be adam|sgd, got '" + opt + "'");
  t.optimizer.beta1 = cfg.get_real("beta1", t.optimizer.beta1);
  t.optimizer.beta2 = cfg.get_real("beta2", t.optimizer.beta2);
  t.optimizer.eps = cfg.get_real("eps", t.optimizer.eps);
  t.objective = parse_objective(cfg.get_string("objective", "relation_kd"));
  t.betas = {cfg.get_real("beta_q", 1.0), cfg.get_real("beta_k", 1.0), cfg.get_real("beta_v", 1.0)};
  t.strategy = parse_layer_strategy(cfg.get_string("layer_strategy", "alternate"));
  t.mlm_rate = cfg.get_real("mlm_rate", t.mlm_rate);

  rc.precision = cfg.get_string("precision", rc.precision);
  if (rc.precision != "f32" && rc.precision != "f64")
    throw UsageError(cfg.source() + ": key 'precision' must be f32|f64, got '" + rc.precision + "'");
  rc.threads = cfg.get_uint("threads", rc.threads);

  rc.corpus_file = cfg.get_string("corpus_file", "");
  rc.corpus_tokens = cfg.get_uint("corpus_tokens", rc.corpus_tokens);
  rc.corpus_words = cfg.get_uint("corpus_words", rc.corpus_words);
  rc.val_fraction = cfg.get_real("val_fraction", rc.val_fraction);
  rc.vocab_max = cfg.get_uint("vocab_max", rc.vocab_max);
  rc.max_positions = cfg.get_int("max_positions", rc.max_positions);

  rc.teacher_layers = cfg.get_int("teacher_layers", 0);
  rc.teacher_hidden = cfg.get_int("teacher_hidden", 0);
  rc.teacher_heads = cfg.get_int("teacher_heads", 0);
  rc.teacher_head_dim = cfg.get_int("teacher_head_dim", 0);
  if (auto r = cfg.take("teacher_ratio")) {
    auto parsed = Rational::parse(*r);
    if (!parsed || !(*parsed > Rational(0)))
      throw UsageError(cfg.source() + ": key 'teacher_ratio' is not a positive number: '" + *r + "'");
    rc.teacher_ratio = *parsed;
  }
  rc.relation_heads = cfg.get_int("relation_heads", rc.relation_heads);
  rc.teacher_pretrain_steps = cfg.get_uint("teacher_pretrain_steps", 0);
  rc.teacher_lr = cfg.get_real("teacher_lr", rc.teacher_lr);

  rc.convention = parse_convention(cfg.get_string("cost_convention", "supernet"));
  rc.finetune.epochs = cfg.get_uint("ft_epochs", rc.finetune.epochs);
  rc.finetune.batch_size = cfg.get_uint("ft_batch_size", rc.finetune.batch_size);
  rc.finetune.learning_rate = cfg.get_real("ft_learning_rate", rc.finetune.learning_rate);
  rc.finetune.strategy = t.strategy;
  rc.proxy_train = cfg.get_uint("proxy_train", rc.proxy_train);
  rc.proxy_eval = cfg.get_uint("proxy_eval", rc.proxy_eval);
  rc.proxy_majority = cfg.get_real("proxy_majority", rc.proxy_majority);

  for (auto& [name, spec] : subspaces_from_config(cfg)) rc.subspaces.insert_or_assign(name, spec);
  cfg.reject_unknown();

  if (const char* env = std::getenv("ADSL_SEED")) {
    try {
      std::size_t used = 0;
      t.seed = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw UsageError(std::string("environment variable ADSL_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  rc.finetune.seed = mix_seed(t.seed, 0xF1);
  if (rc.threads < 1) throw UsageError(cfg.source() + ": key 'threads' must be >= 1");
  return rc;
}

inline const SubspaceSpec& find_subspace(const RunConfig& rc, const std::string& name) {
  auto it = rc.subspaces.find(name);
  if (it == rc.subspaces.end()) {
    std::string known;
    for (const auto& [n, _] : rc.subspaces) known += (known.empty() ? "" : ", ") + n;
    throw UsageError("--subspace: unknown sub-space '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

inline Corpus build_corpus(const RunConfig& rc) {
  std::string text;
  if (!rc.corpus_file.empty()) {
    std::ifstream in(rc.corpus_file);
    if (!in) throw InputError("config key 'corpus_file': cannot read '" + rc.corpus_file + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  } else {
    text = synthetic_text(rc.corpus_tokens, rc.corpus_words, mix_seed(rc.train.seed, 0xC0));
  }
  auto vocab = build_vocab(text, rc.vocab_max);
  auto ids = tokenize(text, vocab);
  return make_corpus(std::move(vocab), std::move(ids), rc.train.seq_len, rc.val_fraction, rc.train.seed);
}

inline ModelDims teacher_dims(const RunConfig& rc, const SubspaceSpec& spec, std::int64_t vocab) {
  const Rational ratio = rc.teacher_ratio.num() != 0 ? rc.teacher_ratio : spec.ratio.hi;
  const std::int64_t hidden = rc.teacher_hidden ? rc.teacher_hidden : spec.hidden.hi.num();
  const Rational ffn = ratio * Rational(hidden);
  if (!ffn.is_integer()) throw UsageError("config: teacher_ratio * teacher_hidden is not an integer");
  return {vocab,
          rc.max_positions,
          2,
          rc.teacher_layers ? rc.teacher_layers : spec.layers.hi.num(),
          hidden,
          ffn.num(),
          rc.teacher_heads ? rc.teacher_heads : spec.heads.hi.num(),
          rc.teacher_head_dim ? rc.teacher_head_dim : spec.head_dim};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw InputError("short write to '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path, const char* flag) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(std::string(flag) + ": cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ArchConfig arch_flag(const std::string& text) {
  try {
    return parse_arch_id(text);
  } catch (const Error& e) {
    throw UsageError(std::string("--arch: ") + e.what());
  }
}

// ---- subcommands -------------------------------------------------------------

inline void cmd_enumerate(const std::string& subspace, const std::string& config, const std::string& out_path,
                          std::ostream& out) {
  RunConfig rc = config.empty() ? RunConfig{} : load_run_config(config);
  const auto& spec = find_subspace(rc, subspace);
  std::string text;
  for (const auto& a : enumerate(spec)) {
    nlohmann::ordered_json j;
    j["id"] = arch_id(a);
    j["l"] = a.l;
    j["d_hid"] = a.d_hid;
    j["r"] = a.r.to_double();
    j["h"] = a.h;
    j["d_f"] = a.d_f();
    text += j.dump() + "\n";
  }
  if (out_path.empty())
    out << text;
  else
    write_text(out_path, text);
}

inline void cmd_cost(const std::string& arch_text, std::uint64_t seq, std::uint64_t vocab, const std::string& conv,
                     std::uint64_t head_dim, std::uint64_t max_pos, std::ostream& out) {
  const ArchConfig arch = arch_flag(arch_text);
  CostConvention c;
  try {
    c = parse_convention(conv);
  } catch (const Error& e) {
    throw UsageError(std::string("--convention: ") + e.what());
  }
  CostContext ctx;
  ctx.vocab = vocab;
  ctx.max_pos = max_pos;
  ctx.head_dim = head_dim;
  const auto r = cost_report(arch, seq, ctx, c);
  nlohmann::ordered_json j;
  j["arch"] = arch_id(arch);
  j["seq"] = seq;
  j["vocab"] = vocab;
  j["convention"] = to_string(c);
  j["params"] = r.params;
  j["flops"] = r.flops;
  out << j.dump() << "\n";
}

inline nlohmann::json base_meta(const RunConfig& rc, const SubspaceSpec* spec) {
  nlohmann::json m;
  m["seed"] = rc.train.seed;
  if (spec) m["subspace"] = to_json(*spec);
  return m;
}

template <std::floating_point T>
void run_train(const RunConfig& rc, const SubspaceSpec& spec, const std::filesystem::path& out_path,
               const std::filesystem::path& teacher_path, const std::string& log_path, std::ostream& out) {
  const Corpus corpus = build_corpus(rc);
  TeacherModel<T> teacher{
      TransformerParams<T>::randomized(teacher_dims(rc, spec, static_cast<std::int64_t>(corpus.vocab.size())),
                                       mix_seed(rc.train.seed, 0x7EA)),
      0};
  teacher.relation_heads = rc.relation_heads ? rc.relation_heads : teacher.dims().heads;
  if (rc.teacher_pretrain_steps > 0) {
    TeacherPretrainConfig pc;
    pc.steps = rc.teacher_pretrain_steps;
    pc.batch_size = rc.train.batch_size;
    pc.learning_rate = rc.teacher_lr;
    pc.mask_rate = rc.train.mlm_rate;
    pc.seed = mix_seed(rc.train.seed, 0x7EB);
    const auto losses = pretrain_teacher_mlm(teacher, corpus, pc);
    out << "teacher mlm loss " << losses.front() << " -> " << losses.back() << "\n";
  }
  auto net = init_from_teacher(spec, teacher);
  const auto log = train_supernet(net, teacher, corpus, rc.train);

  auto meta = base_meta(rc, &spec);
  meta["arch"] = "supernet";
  meta["step"] = log.steps.size();
  save_checkpoint(out_path, to_checkpoint(net.params, meta));
  auto tmeta = base_meta(rc, nullptr);
  tmeta["arch"] = "teacher";
  tmeta["relation_heads"] = teacher.relation_heads;
  save_checkpoint(teacher_path, to_checkpoint(teacher.params, tmeta));
  if (!log_path.empty()) write_text(log_path, log.to_jsonl());
  for (const auto& e : log.epochs) out << "epoch " << e.epoch << " heldout " << e.heldout_loss << "\n";
  out << "wrote " << out_path.string() << " and " << teacher_path.string() << "\n";
}

template <std::floating_point T>
Supernet<T> load_supernet(const std::filesystem::path& path) {
  const auto ck = load_checkpoint(path);
  if (!ck.meta.contains("subspace") || ck.meta.value("arch", "") != "supernet")
    throw CheckpointError(CheckpointError::Kind::BadMetadata, "'" + path.string() + "' is not a supernet checkpoint");
  Supernet<T> net{subspace_from_json(ck.meta["subspace"]), params_from_checkpoint<T>(ck)};
  const auto& d = net.params.dims();
  const auto& s = net.spec;
  if (d.layers != s.layers.hi.num() || d.hidden != s.hidden.hi.num() || d.ffn != s.max_ffn() ||
      d.heads != s.heads.hi.num() || d.head_dim != s.head_dim)
    throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                          "'" + path.string() + "': store dims do not match the max corner of its sub-space");
  return net;
}

template <std::floating_point T>
TeacherModel<T> load_teacher(const std::filesystem::path& path) {
  const auto ck = load_checkpoint(path);
  if (!ck.meta.contains("relation_heads") || !ck.meta["relation_heads"].is_number_integer())
    throw CheckpointError(CheckpointError::Kind::BadMetadata, "'" + path.string() + "' is not a teacher checkpoint");
  return {params_from_checkpoint<T>(ck), ck.meta["relation_heads"].get<std::int64_t>()};
}

struct SearchArgs {
  std::string mode;
  std::string constraint;
  std::vector<std::string> ckpts;
  std::string teacher;
  std::string config;
  std::string records_out;
};

template <std::floating_point T>
void run_search(const RunConfig& rc, const SearchArgs& args, std::ostream& out) {
  std::vector<Supernet<T>> nets;
  nets.reserve(args.ckpts.size());
  for (const auto& p : args.ckpts) nets.push_back(load_supernet<T>(p));
  std::vector<Supernet<T>*> ptrs;
  SearchQuery q;
  q.convention = rc.convention;
  q.seq_len = rc.train.seq_len;
  for (auto& n : nets) {
    if (std::find(q.scope.begin(), q.scope.end(), n.spec.name) != q.scope.end())
      throw UsageError("--ckpt: two checkpoints for sub-space '" + n.spec.name + "'");
    ptrs.push_back(&n);
    q.scope.push_back(n.spec.name);
  }

  std::optional<TeacherModel<T>> teacher;
  if (!args.teacher.empty()) teacher = load_teacher<T>(args.teacher);
  double reference = 0.0;
  if (teacher) {
    const auto& td = teacher->dims();
    reference = static_cast<double>(args.constraint.rfind("params", 0) == 0
                                        ? count_params(td.arch(),
                                                       {static_cast<std::uint64_t>(td.vocab),
                                                        static_cast<std::uint64_t>(td.max_pos),
                                                        static_cast<std::uint64_t>(td.type_vocab),
                                                        td.head_dim},
                                                       q.convention)
                                        : count_flops(td.arch(), q.seq_len, q.convention,
                                                      td.head_dim));
  }
  try {
    q = parse_constraint(args.constraint, q, reference);
  } catch (const Error& e) {
    throw UsageError(std::string("--constraint: ") + e.what());
  }

  std::vector<CandidateRecord> records;
  nlohmann::ordered_json result;
  if (args.mode == "agnostic") {
    if (!teacher) throw UsageError("--teacher is required for --mode agnostic");
    q.metric = Metric::ValidationKDLoss;
    const Corpus corpus = build_corpus(rc);
    const auto val = heldout_batches(corpus, rc.train.batch_size, rc.train.seed);
    auto res = task_agnostic_search(ptrs, *teacher, val, q, rc.train.betas,
                                    resolve(rc.train.strategy, Phase::Extraction), rc.threads);
    result["best"] = arch_id(res.best);
    result["subspace"] = res.subspace;
    records = std::move(res.records);
  } else {
    q.metric = Metric::ProxyAccuracy;
    std::int64_t vocab = nets.front().params.dims().vocab;
    const auto task = majority_task(static_cast<std::size_t>(vocab), rc.train.seq_len, rc.proxy_train, rc.proxy_eval,
                                    mix_seed(rc.train.seed, 0x9A), rc.proxy_majority);
    auto ft = rc.finetune;
    ft.strategy = resolve(ft.strategy, Phase::Extraction);
    auto res = task_proxy_search(ptrs, task, ft, q, rc.threads);
    for (const auto& [name, arch] : res.selections) result["selections"][name] = arch_id(arch);
    records = std::move(res.records);
  }
  if (!args.records_out.empty()) write_text(args.records_out, records_to_csv(records));
  out << result.dump() << "\n";
}

template <std::floating_point T>
void run_extract(const std::string& arch_text, const std::filesystem::path& ckpt, const std::filesystem::path& out_path,
                 LayerStrategy strategy, std::ostream& out) {
  const ArchConfig arch = arch_flag(arch_text);
  auto net = load_supernet<T>(ckpt);
  const auto student = materialize(extract(net, arch, strategy, Phase::Extraction));
  nlohmann::json meta;
  meta["arch"] = arch_id(arch);
  meta["subspace"] = to_json(net.spec);
  meta["layer_strategy"] = to_string(strategy);
  save_checkpoint(out_path, to_checkpoint(student, meta));
  out << "wrote " << out_path.string() << " (" << student.scalar_count() << " parameters)\n";
}

inline void cmd_export_frontier(const std::string& records, const std::string& out_path, const std::string& metric,
                                const std::string& cost) {
  if (metric != "loss" && metric != "accuracy") throw UsageError("--metric must be loss|accuracy, got '" + metric + "'");
  if (cost != "flops" && cost != "params") throw UsageError("--cost must be flops|params, got '" + cost + "'");
  const auto recs = records_from_csv(read_text(records, "--records"));
  const auto front = pareto_frontier(recs, cost == "flops" ? CostKind::Flops : CostKind::Params, metric == "loss");
  write_text(out_path, records_to_csv(front));
}

/// Entry point; returns the process exit code.
inline int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Automatic distillation of transformer students from weight-sharing supernets", "autodistil"};
  app.require_subcommand(1);

  auto* space = app.add_subcommand("space", "search-space utilities");
  space->require_subcommand(1);
  auto* en = space->add_subcommand("enumerate", "list every architecture of a sub-space as JSON lines");
  std::string sub_name, en_out, en_config;
  en->add_option("--subspace", sub_name, "sub-space name")->required();
  en->add_option("--out", en_out, "output file (default: stdout)");
  en->add_option("--config", en_config, "config file with extra [subspace.*] sections");

  auto* cost = app.add_subcommand("cost", "analytic parameter and FLOP count");
  std::string cost_arch, cost_conv = "table";
  std::uint64_t cost_seq = 128, cost_vocab = 30522, cost_hd = 64, cost_maxpos = 512;
  cost->add_option("--arch", cost_arch, "architecture id, e.g. L12-H768-R4-A12")->required();
  cost->add_option("--seq", cost_seq, "sequence length")->check(CLI::PositiveNumber);
  cost->add_option("--vocab", cost_vocab, "vocabulary size")->check(CLI::PositiveNumber);
  cost->add_option("--convention", cost_conv, "table|supernet");
  cost->add_option("--head-dim", cost_hd, "per-head size (supernet convention)")->check(CLI::PositiveNumber);
  cost->add_option("--max-pos", cost_maxpos, "position table size")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "train one supernet by sampled sub-network distillation");
  std::string tr_config, tr_sub, tr_out, tr_teacher, tr_log;
  train->add_option("--config", tr_config, "config file")->required();
  train->add_option("--subspace", tr_sub, "sub-space name")->required();
  train->add_option("--out", tr_out, "supernet checkpoint path")->required();
  train->add_option("--teacher-out", tr_teacher, "teacher checkpoint path (default: <out>.teacher)");
  train->add_option("--log", tr_log, "training log (JSON lines)");

  auto* search = app.add_subcommand("search", "pick a student under a cost constraint");
  SearchArgs sa;
  search->add_option("--mode", sa.mode, "agnostic|proxy")->required()->check(CLI::IsMember({"agnostic", "proxy"}));
  search->add_option("--constraint", sa.constraint, "e.g. flops<=1.5M, params<20000, flops<50%")->required();
  search->add_option("--ckpt", sa.ckpts, "supernet checkpoint (repeat per sub-space)")->required();
  search->add_option("--teacher", sa.teacher, "teacher checkpoint");
  search->add_option("--config", sa.config, "config file")->required();
  search->add_option("--records-out", sa.records_out, "CSV of every evaluated candidate");

  auto* ext = app.add_subcommand("extract", "materialize one student from a supernet checkpoint");
  std::string ex_arch, ex_ckpt, ex_out, ex_strategy = "alternate", ex_precision = "f32";
  ext->add_option("--arch", ex_arch, "architecture id")->required();
  ext->add_option("--ckpt", ex_ckpt, "supernet checkpoint")->required();
  ext->add_option("--out", ex_out, "student checkpoint path")->required();
  ext->add_option("--layer-strategy", ex_strategy, "alternate|top|alternate_top");

  auto* fr = app.add_subcommand("export-frontier", "Pareto frontier of a records CSV");
  std::string fr_records, fr_out, fr_metric = "loss", fr_cost = "flops";
  fr->add_option("--records", fr_records, "records CSV")->required();
  fr->add_option("--out", fr_out, "frontier CSV")->required();
  fr->add_option("--metric", fr_metric, "loss (lower is better) or accuracy");
  fr->add_option("--cost", fr_cost, "flops|params");

  std::vector<std::string> args(argv.rbegin(), argv.rend());
  if (!args.empty()) args.pop_back();  // program name
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (*en) {
      cmd_enumerate(sub_name, en_config, en_out, out);
    } else if (*cost) {
      cmd_cost(cost_arch, cost_seq, cost_vocab, cost_conv, cost_hd, cost_maxpos, out);
    } else if (*train) {
      const auto rc = load_run_config(tr_config);
      const auto& spec = find_subspace(rc, tr_sub);
      const std::string teacher_path = tr_teacher.empty() ? tr_out + ".teacher" : tr_teacher;
      if (rc.precision == "f64")
        run_train<double>(rc, spec, tr_out, teacher_path, tr_log, out);
      else
        run_train<float>(rc, spec, tr_out, teacher_path, tr_log, out);
    } else if (*search) {
      const auto rc = load_run_config(sa.config);
      if (rc.precision == "f64")
        run_search<double>(rc, sa, out);
      else
        run_search<float>(rc, sa, out);
    } else if (*ext) {
      LayerStrategy s;
      try {
        s = parse_layer_strategy(ex_strategy);
      } catch (const Error& e) {
        throw UsageError(std::string("--layer-strategy: ") + e.what());
      }
      run_extract<float>(ex_arch, ex_ckpt, ex_out, s, out);
    } else if (*fr) {
      cmd_export_frontier(fr_records, fr_out, fr_metric, fr_cost);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace autodistil::cli

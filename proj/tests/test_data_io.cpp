#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "autodistil/cli.hpp"
#include "support.hpp"

using namespace autodistil;
using testing_support::Gen;
using testing_support::TempDir;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "autodistil");
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write(const std::filesystem::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

/// Small, fast run configuration over the toy sub-space.
std::string small_config(const std::string& extra = "") {
  return "seed = 3\nprecision = f32\nthreads = 2\ncorpus_tokens = 4000\ncorpus_words = 20\nval_fraction = 0.1\n"
         "vocab_max = 100\nmax_positions = 16\nteacher_pretrain_steps = 5\nepochs = 1\nbatch_size = 4\nseq_len = 8\n"
         "learning_rate = 1e-3\nft_epochs = 1\nproxy_train = 32\nproxy_eval = 16\n" +
         extra;
}

class EnvGuard {
 public:
  EnvGuard(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~EnvGuard() { ::unsetenv(name_); }
  EnvGuard(const EnvGuard&) = delete;
  EnvGuard& operator=(const EnvGuard&) = delete;

 private:
  const char* name_;
};

}  // namespace

TEST(Vocab, ReservedIdsFrequencyOrderAndOov) {
  const auto v = build_vocab("b a b c b a", 2);
  ASSERT_EQ(v.size(), 5u);
  EXPECT_EQ(v.tokens[0], "[PAD]");
  EXPECT_EQ(v.tokens[1], "[MASK]");
  EXPECT_EQ(v.tokens[2], "[CLS]");
  EXPECT_EQ(v.tokens[3], "b");
  EXPECT_EQ(v.tokens[4], "a");
  EXPECT_EQ(tokenize("a b c  zzz", v), (std::vector<TokenId>{4, 3, kPadId, kPadId}));
  EXPECT_THROW(build_vocab("   \n", 10), InputError);
  // equal counts fall back to lexicographic order
  const auto tie = build_vocab("y x z", 10);
  EXPECT_EQ(tie.tokens[3], "x");
  EXPECT_EQ(tie.tokens[5], "z");
}

TEST(Batches, DropsPartialAndShufflesDeterministically) {
  std::vector<TokenId> stream(100);
  for (std::size_t i = 0; i < stream.size(); ++i) stream[i] = static_cast<TokenId>(i);
  BatchIterator it(stream, 2, 32, 5);
  EXPECT_EQ(it.chunks(), 3u);
  ASSERT_EQ(it.epoch(0).size(), 1u);
  EXPECT_EQ(it.epoch(0).front().ids.size(), 64u);

  std::vector<TokenId> big(64 * 10);
  for (std::size_t i = 0; i < big.size(); ++i) big[i] = static_cast<TokenId>(i);
  BatchIterator b(big, 3, 10, 9), same(big, 3, 10, 9);
  for (std::size_t e = 0; e < 3; ++e) {
    std::set<TokenId> firsts;
    for (const auto& batch : b.epoch(e)) {
      for (std::size_t r = 0; r < batch.batch; ++r) {
        // every row is a contiguous aligned chunk
        EXPECT_EQ(batch.row(r)[0] % 10, 0);
        for (std::size_t t = 1; t < 10; ++t) EXPECT_EQ(batch.row(r)[t], batch.row(r)[0] + static_cast<TokenId>(t));
        EXPECT_TRUE(firsts.insert(batch.row(r)[0]).second);
      }
    }
    EXPECT_EQ(firsts.size(), 63u);
    EXPECT_EQ(b.layout(e), same.layout(e));
  }
  EXPECT_NE(b.layout(0), b.layout(1));
  EXPECT_THROW(BatchIterator(stream, 4, 32, 1), InputError);
  EXPECT_THROW(BatchIterator(stream, 0, 32, 1), InputError);
}

TEST(MlmMask, CountsAndInverse) {
  Gen g(3);
  const auto batch = testing_support::random_batch(g, 4, 20, 50);
  const auto m = mlm_mask(batch, 0.15, 7);
  EXPECT_EQ(m.rows.size(), 4u * 3u);
  auto restored = m.batch.ids;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    EXPECT_EQ(m.batch.ids[m.rows[i]], kMaskId);
    restored[m.rows[i]] = m.labels[i];
    if (i) EXPECT_LT(m.rows[i - 1], m.rows[i]);
  }
  EXPECT_EQ(restored, batch.ids);
  EXPECT_EQ(mlm_mask(batch, 0.15, 7).rows, m.rows);
  EXPECT_THROW(mlm_mask(batch, 0.0, 1), InputError);
  EXPECT_THROW(mlm_mask(batch, 1.0, 1), InputError);
}

TEST(MlmMask, PositionsRoughlyUniform) {
  const TokenBatch batch{1, 10, std::vector<TokenId>(10, 5)};
  std::vector<std::size_t> hits(10, 0);
  const std::size_t trials = 20000;
  for (std::size_t s = 0; s < trials; ++s)
    for (auto r : mlm_mask(batch, 0.2, s).rows) ++hits[r];
  // each position is masked with probability 0.2
  const double mean = 0.2 * trials, sigma = std::sqrt(trials * 0.2 * 0.8);
  for (auto h : hits) EXPECT_LT(std::abs(static_cast<double>(h) - mean), 5 * sigma);
}

TEST(Corpus, SplitIsDisjointAndExhaustive) {
  const auto text = synthetic_text(1003, 12, 4);
  auto vocab = build_vocab(text, 100);
  auto ids = tokenize(text, vocab);
  const auto c = make_corpus(vocab, ids, 10, 0.2, 8);
  std::set<std::size_t> all(c.train_chunks.begin(), c.train_chunks.end());
  for (auto ch : c.validation_chunks) EXPECT_TRUE(all.insert(ch).second);
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(c.validation_chunks.size(), 20u);
  EXPECT_EQ(c.train.size(), 800u);
  for (std::size_t i = 0; i < c.train_chunks.size(); ++i)
    for (std::size_t t = 0; t < 10; ++t) EXPECT_EQ(c.train[i * 10 + t], ids[c.train_chunks[i] * 10 + t]);
  EXPECT_EQ(make_corpus(vocab, ids, 10, 0.2, 8).validation_chunks, c.validation_chunks);
  EXPECT_THROW(make_corpus(vocab, ids, 10, 1.0, 8), InputError);
  EXPECT_THROW(make_corpus(vocab, {1, 2}, 10, 0.1, 8), InputError);
  EXPECT_THROW(make_corpus(vocab, {static_cast<TokenId>(vocab.size())}, 1, 0.0, 8), InputError);
}

TEST(Checkpoint, HandAssembledBytes) {
  CheckpointData ck{nlohmann::json::object(), {{"w", {1, 2}, {1.0f, -2.0f}}}};
  const std::string bytes = encode_checkpoint(ck);
  std::string want = "ADSL";
  auto le = [&](std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) want.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  le(1, 4);
  le(2, 8);
  want += "{}";
  le(1, 8);
  le(1, 4);
  want += "w";
  le(2, 4);
  le(1, 8);
  le(2, 8);
  le(0x3F800000u, 4);
  le(0xC0000000u, 4);
  EXPECT_EQ(bytes, want);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir;
  const ModelDims d{20, 8, 2, 2, 8, 16, 2, 4};
  const auto p = TransformerParams<float>::randomized(d, 5);
  save_checkpoint(dir / "a.ckpt", to_checkpoint(p, {{"seed", 5}, {"subspace", to_json(presets::toy())}}));
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  const auto q = params_from_checkpoint<float>(loaded);
  EXPECT_EQ(testing_support::snapshot(q), testing_support::snapshot(p));
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  const auto spec = subspace_from_json(loaded.meta["subspace"]);
  EXPECT_EQ(spec.hidden, presets::toy().hidden);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
  try {
    load_checkpoint(dir / "missing.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Io);
  }
}

TEST(Checkpoint, TypedHeaderErrors) {
  const ModelDims d{6, 4, 2, 1, 4, 8, 1, 4};
  const std::string good = encode_checkpoint(to_checkpoint(TransformerParams<float>::randomized(d, 1), {}));
  auto kind_of = [](std::string bytes) {
    try {
      const auto ck = decode_checkpoint(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
      params_from_checkpoint<float>(ck);
    } catch (const CheckpointError& e) {
      return std::optional(e.kind());
    }
    return std::optional<CheckpointError::Kind>();
  };
  using K = CheckpointError::Kind;
  auto s = good;
  s[0] = 'X';
  EXPECT_EQ(kind_of(s), K::BadMagic);
  s = good;
  s[4] = 9;
  EXPECT_EQ(kind_of(s), K::UnsupportedVersion);
  EXPECT_EQ(kind_of(good.substr(0, good.size() - 3)), K::Truncated);
  EXPECT_EQ(kind_of(good + "x"), K::TrailingBytes);
  s = good;
  s[16] = '[';
  EXPECT_EQ(kind_of(s), K::BadMetadata);
  EXPECT_EQ(kind_of(good), std::nullopt);
  EXPECT_EQ(kind_of(encode_checkpoint({nlohmann::json::object(), {}})), K::BadMetadata);
}

TEST(Checkpoint, FuzzedInputsFailWithTypedErrors) {
  const ModelDims d{6, 4, 2, 1, 4, 8, 1, 4};
  const std::string good = encode_checkpoint(to_checkpoint(TransformerParams<float>::randomized(d, 2), {{"k", 1}}));
  Gen g(77);
  std::size_t rejected = 0;
  const std::size_t kMutations = 2000;
  for (std::size_t i = 0; i < kMutations; ++i) {
    std::string s = good;
    const auto n_edits = g.integer(1, 4);
    for (std::int64_t e = 0; e < n_edits; ++e) {
      switch (g.integer(0, 3)) {
        case 0:  // flip a byte, biased towards the header
          s[static_cast<std::size_t>(g.integer(0, g.coin() ? 64 : static_cast<std::int64_t>(s.size()) - 1))] ^=
              static_cast<char>(g.integer(1, 255));
          break;
        case 1:
          s.resize(static_cast<std::size_t>(g.integer(0, static_cast<std::int64_t>(s.size()))));
          break;
        case 2:
          s.insert(static_cast<std::size_t>(g.integer(0, static_cast<std::int64_t>(s.size()))), 1,
                   static_cast<char>(g.integer(0, 255)));
          break;
        default:
          if (s.size() > 24) s[static_cast<std::size_t>(g.integer(5, 23))] = static_cast<char>(0xFF);
      }
      if (s.empty()) break;
    }
    try {
      const auto ck = decode_checkpoint(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
      params_from_checkpoint<float>(ck);
    } catch (const CheckpointError&) {
      ++rejected;
    } catch (const std::exception& e) {
      ADD_FAILURE() << "mutation " << i << " raised an untyped error: " << e.what();
    }
  }
  EXPECT_GT(rejected, kMutations / 2);
}

TEST(Cli, EnumerateAndCost) {
  auto r = invoke({"space", "enumerate", "--subspace", "tiny"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["id"], arch_id(enumerate(presets::tiny())[n]));
    ++n;
  }
  EXPECT_EQ(n, 256u);

  r = invoke({"cost", "--arch", "L12-H768-R4-A12"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const CostContext bert{30522, 512, 2, 64};
  EXPECT_EQ(j["params"].get<std::uint64_t>(), count_params({12, 768, Rational(4), 12}, bert, CostConvention::Table));
  EXPECT_EQ(j["flops"].get<std::uint64_t>(), count_flops({12, 768, Rational(4), 12}, 128, CostConvention::Table));
}

TEST(Cli, UsageErrorsExitOne) {
  auto r = invoke({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  r = invoke({"cost"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--arch"), std::string::npos);
  r = invoke({"cost", "--arch", "L2-H8"});
  EXPECT_EQ(r.code, 1);
  r = invoke({"space", "enumerate", "--subspace", "nope"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nope"), std::string::npos);

  TempDir dir;
  write(dir / "bad.cfg", small_config("mystery_knob = 4\n"));
  r = invoke({"train", "--config", (dir / "bad.cfg").string(), "--subspace", "toy", "--out", (dir / "x").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("mystery_knob"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "x"));
}

TEST(Cli, RuntimeErrorsExitTwo) {
  TempDir dir;
  write(dir / "run.cfg", small_config());
  const auto r = invoke({"extract", "--arch", "L2-H8-R2-A1", "--ckpt", (dir / "none.ckpt").string(), "--out",
                      (dir / "s.ckpt").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, SeedEnvironmentOverride) {
  TempDir dir;
  write(dir / "run.cfg", small_config());
  EXPECT_EQ(cli::load_run_config(dir / "run.cfg").train.seed, 3u);
  {
    EnvGuard env("ADSL_SEED", "1234");
    EXPECT_EQ(cli::load_run_config(dir / "run.cfg").train.seed, 1234u);
  }
  EnvGuard bad("ADSL_SEED", "12x");
  EXPECT_THROW(cli::load_run_config(dir / "run.cfg"), cli::UsageError);
}

TEST(Cli, TrainSearchExtractFrontierPipeline) {
  TempDir dir;
  write(dir / "run.cfg", small_config());
  const auto cfg = (dir / "run.cfg").string(), net = (dir / "net.ckpt").string();
  auto r = invoke({"train", "--config", cfg, "--subspace", "toy", "--out", net, "--log", (dir / "log.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(std::filesystem::exists(net + ".teacher"));
  EXPECT_FALSE(slurp(dir / "log.jsonl").empty());

  // same seed, same bytes
  const auto net2 = (dir / "net2.ckpt").string();
  ASSERT_EQ(invoke({"train", "--config", cfg, "--subspace", "toy", "--out", net2}).code, 0);
  EXPECT_EQ(slurp(net), slurp(net2));

  r = invoke({"search", "--mode", "agnostic", "--constraint", "flops<50%", "--ckpt", net, "--teacher", net + ".teacher",
           "--config", cfg, "--records-out", (dir / "rec.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto best = nlohmann::json::parse(r.out);
  EXPECT_EQ(best["subspace"], "toy");
  const auto records = records_from_csv(slurp(dir / "rec.csv"));
  EXPECT_EQ(records.size(), 16u);

  r = invoke({"search", "--mode", "agnostic", "--constraint", "flops<1", "--ckpt", net, "--teacher", net + ".teacher",
           "--config", cfg});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("minimum"), std::string::npos);
  r = invoke({"search", "--mode", "agnostic", "--constraint", "flops<50%", "--ckpt", net, "--config", cfg});
  EXPECT_EQ(r.code, 1);

  r = invoke({"extract", "--arch", best["best"].get<std::string>(), "--ckpt", net, "--out", (dir / "s.ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto student = params_from_checkpoint<float>(load_checkpoint(dir / "s.ckpt"));
  EXPECT_EQ(student.dims().arch().l, parse_arch_id(best["best"].get<std::string>()).l);
  r = invoke({"extract", "--arch", "L2-H8-R2-A1", "--ckpt", net, "--out", (dir / "t.ckpt").string(), "--layer-strategy",
           "sideways"});
  EXPECT_EQ(r.code, 1);

  r = invoke({"export-frontier", "--records", (dir / "rec.csv").string(), "--out", (dir / "front.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto front = records_from_csv(slurp(dir / "front.csv"));
  EXPECT_EQ(front.size(), pareto_frontier(records, CostKind::Flops, true).size());
  EXPECT_FALSE(front.empty());
}

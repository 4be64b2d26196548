#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "vocadt/evalmetrics.hpp"

using namespace vocadt;
using namespace vocadt::evalmetrics;
using tokenizer::TokenizerModel;
using tokenizer::Vocabulary;

namespace {

TokenizerModel byte_tokenizer() { return TokenizerModel(Vocabulary::byte_level(), {}); }

TokenizerModel aa_tokenizer() {
  auto v = Vocabulary::byte_level();
  const TokenId a = v.byte_token('a');
  v.add("aa");
  return TokenizerModel(v, {{a, a}});
}

std::size_t predicted_positions(const tinylm::TokenBatch& windows) {
  std::size_t n = 0;
  for (const auto& w : windows) n += w.size() - 1;
  return n;
}

tinylm::ModelCheckpoint byte_model(std::uint64_t seed) {
  const auto c = testing::micro_config(tokenizer::kMinVocabSize);
  return {c, testing::randomized_parameters(c, seed, 0.2f), "", {}};
}

}  // namespace

TEST_SUITE("evalmetrics") {

TEST_CASE("token counts and reduction rate") {
  const EvalSet eval{{"x", {"aaaa"}}};
  CHECK(count_tokens(byte_tokenizer(), eval).at("x") == 4);
  CHECK(count_tokens(aa_tokenizer(), eval).at("x") == 2);
  CHECK(count_bytes(eval).at("x") == 4);
  CHECK(reduction_rate(2, 4) == -0.5);
  CHECK(reduction_rate(4, 4) == 0.0);
  CHECK_THROWS_AS(reduction_rate(1, 0), ValidationError);
  CHECK_THROWS_AS(count_tokens(byte_tokenizer(), {}), ValidationError);
  CHECK(count_tokens(byte_tokenizer(), {{"x", {}}}).at("x") == 0);

  const auto base = byte_tokenizer(), fast = aa_tokenizer();
  const auto report = fragmentation({{"old", &base}, {"new", &fast}, {"same", &base}}, "old",
                                    {{"x", {"aaaa", "aa b"}}, {"y", {"zz"}}});
  CHECK(report.languages.at("x").reduction_rate.at("new") == doctest::Approx(-3.0 / 8.0));
  CHECK(report.languages.at("x").reduction_rate.at("same") == 0.0);
  CHECK(report.languages.at("y").reduction_rate.at("new") == 0.0);
  CHECK(report.languages.at("x").bytes == 8);
  CHECK(report.languages.at("x").tokens_per_byte.at("new") == doctest::Approx(5.0 / 8.0));
  CHECK(!report.languages.at("x").reduction_rate.contains("old"));
  CHECK(to_json(report)["baseline"] == "old");
}

TEST_CASE("reduction rate over random counts is bounded below by -1") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t base = 1 + rng() % 1000, next = rng() % 2000;
    const double r = reduction_rate(next, base);
    CHECK(r >= -1.0);
    CHECK((r < 0) == (next < base));
  }
}

TEST_CASE("increase rate") {
  CHECK(increase_rate(0.7, 0.7) == 0.0);
  CHECK(increase_rate(1.5, 1.0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(increase_rate(1.0, 0.0), ValidationError);
}

TEST_CASE("uniform byte scorer gives eight bits per byte") {
  const WindowScorer uniform = [](const tinylm::TokenBatch& w) {
    return static_cast<double>(predicted_positions(w)) * std::log(256.0);
  };
  const auto stats = score_documents(uniform, byte_tokenizer(), {"hello world", std::string(300, 'q'), ""}, 16);
  CHECK(stats.bytes == 311);
  CHECK(stats.predicted == 311);
  CHECK(std::abs(stats.bits_per_byte() - 8.0) < 1e-12);
  CHECK(stats.token_perplexity() == doctest::Approx(256.0));
  CHECK_THROWS_AS(score_documents(uniform, byte_tokenizer(), {"", ""}, 16), ValidationError);
}

TEST_CASE("zero head scores log2 of the vocabulary per token") {
  auto ck = byte_model(1);
  ck.params.embed_out.setZero();
  const auto tok = aa_tokenizer();
  ck.config.vocab_size = tok.vocabulary().size();
  ck.params.embed_in.conservativeResize(260, Eigen::NoChange);
  ck.params.embed_out = MatrixF::Zero(260, ck.config.h);
  const std::vector<std::string> docs{"aaaa bbb", "a"};
  const double bpb = bits_per_byte(ck, tok, docs);
  const double tokens = 2 + 4 + 1;
  CHECK(std::abs(bpb - std::log2(260.0) * tokens / 9.0) < 1e-5);
  CHECK_THROWS_AS(bits_per_byte(byte_model(1), tok, docs), ValidationError);
}

TEST_CASE("model scores match the loop-based reference") {
  const auto ck = byte_model(7);
  const auto tok = byte_tokenizer();
  const std::vector<std::string> docs{"short", "a longer document that needs more than one window", "x"};
  double ref = 0;
  std::size_t bytes = 0;
  for (const auto& d : docs) {
    std::vector<TokenId> seq{tok.vocabulary().specials().bos};
    for (auto id : tok.encode(d)) seq.push_back(id);
    for (std::size_t start = 0; start + 1 < seq.size(); start += ck.config.context_len - 1) {
      const std::size_t end = std::min(seq.size(), start + ck.config.context_len);
      ref += testing::reference_nll(ck.config, ck.params, std::vector<TokenId>(seq.begin() + start, seq.begin() + end));
    }
    bytes += d.size();
  }
  const double expected = ref / std::log(2.0) / static_cast<double>(bytes);
  const double got = bits_per_byte(ck, tok, docs);
  CHECK(std::abs(got - expected) < 1e-6);
  CHECK(bits_per_byte(ck, tok, docs) == got);
}

TEST_CASE("scores are invariant to document order and sharding") {
  const auto ck = byte_model(9);
  const auto tok = byte_tokenizer();
  const auto scorer = checkpoint_scorer(ck);
  const std::vector<std::string> docs{"one document", "another one here", "third", "γειά"};
  const auto all = score_documents(scorer, tok, docs, ck.config.context_len);
  const auto reversed = score_documents(scorer, tok, {docs.rbegin(), docs.rend()}, ck.config.context_len);
  const auto a = score_documents(scorer, tok, {docs[0], docs[1]}, ck.config.context_len);
  const auto b = score_documents(scorer, tok, {docs[2], docs[3]}, ck.config.context_len);
  CHECK(std::abs(all.nll_nats - reversed.nll_nats) < 1e-9);
  CHECK(std::abs(all.nll_nats - (a.nll_nats + b.nll_nats)) < 1e-9);
  CHECK(all.bytes == a.bytes + b.bytes);
}

TEST_CASE("flops estimate") {
  tinylm::ModelConfig c;
  c.vocab_size = 3000;
  c.h = 64;
  c.n_layers = 2;
  c.context_len = 128;
  CHECK(estimate_flops_per_token(c) == 646144.0);
  auto bigger = c;
  bigger.vocab_size = 21000;
  CHECK(estimate_flops_per_token(bigger) - estimate_flops_per_token(c) == 2.0 * 64 * 18000);
  auto deeper = c;
  deeper.n_layers = 4;
  const double body = estimate_flops_per_token(c) - 2.0 * 64 * 3000;
  CHECK(estimate_flops_per_token(deeper) - 2.0 * 64 * 3000 == 2 * body);
  CHECK(!flops_formula().empty());
}

TEST_CASE("reports round trip and render") {
  Report r;
  r.config_hash = "abc";
  r.seeds = {{"pretrain", 1}, {"adapter", 2}};
  r.build_id = "test";
  r.columns = {"zeta", "alpha", "mid"};
  r.rows["xl1"] = {{"zeta", 1.5}, {"alpha", -0.25}};
  r.rows["en"] = {{"mid", 3.0}};
  r.extra["note"] = "n";
  const auto j = to_json(r);
  CHECK(j.at("report_version") == kReportVersion);
  REQUIRE(j.at("rows").size() == 2);
  CHECK(j.at("rows")[1].at("language") == "xl1");
  REQUIRE(j.at("rows")[1].contains("mid"));
  CHECK(j.at("rows")[1].at("mid").is_null());
  CHECK(report_from_json(j) == r);

  CHECK(to_csv(r) == "language,zeta,alpha,mid\nen,,,3\nxl1,1.5,-0.25,\n");

  testing::TempDir dir;
  emit_report(r, dir / "r.json", ReportFormat::kJson);
  CHECK(load_report(dir / "r.json") == r);
  emit_report(r, dir / "r.csv", ReportFormat::kCsv);
  CHECK(read_file(dir / "r.csv") == to_csv(r));
  CHECK_THROWS_AS(emit_report(r, "/proc/vocadt/none/r.json", ReportFormat::kJson), ValidationError);
}

}

#include <doctest.h>

#include <map>
#include <random>

#include "test_support.hpp"
#include "vocadt/common.hpp"
#include "vocadt/textcorpus.hpp"

using namespace vocadt;
using namespace vocadt::textcorpus;
using vocadt::testing::TempDir;

namespace {

CorpusSpec spec(const std::string& lang, std::uint64_t bytes) { return {lang, {}, bytes}; }

double total(const MixtureWeights& w) {
  double t = 0;
  for (const auto& [_, p] : w.weights) t += p;
  return t;
}

std::vector<CorpusSpec> write_corpus(const TempDir& dir, const std::map<std::string, std::vector<std::string>>& docs) {
  std::vector<CorpusSpec> specs;
  for (const auto& [lang, lines] : docs) {
    std::string body;
    for (const auto& l : lines) body += l + "\n";
    const auto path = dir / (lang + ".txt");
    write_file_atomic(path, body);
    specs.push_back({lang, {path}, body.size()});
  }
  return specs;
}

}  // namespace

TEST_SUITE("textcorpus") {

TEST_CASE("equal byte counts at temperature 1 give a uniform mixture") {
  std::vector<CorpusSpec> specs{spec("en", 50), spec("a", 10), spec("b", 10), spec("c", 10), spec("d", 10)};
  const auto w = compute_mixture(specs, 1.0);
  for (const auto& s : specs) CHECK(w.at(s.language_id) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("three-language mixture matches hand arithmetic") {
  std::vector<CorpusSpec> specs{spec("en", 1000), spec("a", 100), spec("b", 300)};
  const auto w = compute_mixture(specs, 1.0);
  CHECK(w.at("en") == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(w.at("a") == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  CHECK(w.at("b") == doctest::Approx(1.0 / 2.0).epsilon(1e-12));

  const auto flat = compute_mixture(specs, 1e9);
  CHECK(std::abs(flat.at("en") - 1.0 / 3.0) < 1e-6);
  CHECK(std::abs(flat.at("a") - 1.0 / 3.0) < 1e-6);
  CHECK(std::abs(flat.at("b") - 1.0 / 3.0) < 1e-6);
}

TEST_CASE("english alone takes all the mass") {
  const auto w = compute_mixture({spec("en", 10)}, 2.0);
  CHECK(w.at("en") == 1.0);
}

TEST_CASE("mixture errors") {
  CHECK_THROWS_AS(compute_mixture({}, 1.0), ValidationError);
  CHECK_THROWS_AS(compute_mixture({spec("en", 1), spec("a", 1)}, 0.0), ValidationError);
  CHECK_THROWS_AS(compute_mixture({spec("en", 1), spec("a", 1)}, -2.0), ValidationError);
  CHECK_THROWS_AS(compute_mixture({spec("en", 1), spec("a", 0), spec("b", 0)}, 1.0), ValidationError);
  CHECK_THROWS_AS(compute_mixture({spec("a", 1), spec("b", 1)}, 1.0), ValidationError);
}

TEST_CASE("mixture sums to one and ignores byte scale over random manifests") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 8;
    std::vector<CorpusSpec> specs{spec("en", 1 + rng() % 1000)};
    for (std::size_t i = 1; i < n; ++i) specs.push_back(spec("l" + std::to_string(i), 1 + rng() % 100000));
    const double t = 0.25 + static_cast<double>(rng() % 1000) / 100.0;
    const auto w = compute_mixture(specs, t);
    CHECK(std::abs(total(w) - 1.0) < 1e-9);
    CHECK_NOTHROW(w.validate(specs));

    auto scaled = specs;
    for (std::size_t i = 1; i < n; ++i) scaled[i].byte_count *= 7;
    const auto w2 = compute_mixture(scaled, t);
    for (const auto& [lang, p] : w.weights) CHECK(std::abs(w2.at(lang) - p) < 1e-12);
  }
}

TEST_CASE("weights validation rejects a mismatched language set") {
  MixtureWeights w{{{"en", 0.5}, {"a", 0.5}}};
  CHECK_THROWS_AS(w.validate({spec("en", 1), spec("b", 1)}), ValidationError);
  MixtureWeights bad{{{"en", 0.7}, {"a", 0.7}}};
  CHECK_THROWS_AS(bad.validate({spec("en", 1), spec("a", 1)}), ValidationError);
}

TEST_CASE("normalize_text applies exactly the stated rules") {
  CHECK(normalize_text("a\r\nb ") == "a\nb");
  CHECK(normalize_text("line one\t \nline two") == "line one\nline two");
  CHECK(normalize_text(" \n\t\n") == "");
  CHECK(normalize_text("  leading kept") == "  leading kept");

  const std::string composed = "caf\xC3\xA9";
  const std::string decomposed = "cafe\xCC\x81";
  CHECK(normalize_text(composed) == normalize_text(decomposed));
  CHECK(normalize_text(decomposed) == composed);

  for (const std::string s : {"a\r\nb ", "x　\n  y  ", "γειά σου\r\n", "plain"}) {
    const auto once = normalize_text(s);
    CHECK(normalize_text(once) == once);
  }
}

TEST_CASE("word counting uses unicode whitespace") {
  CHECK(count_words("") == 0);
  CHECK(count_words("one two  three") == 3);
  CHECK(count_words("a　b c") == 3);
}

TEST_CASE("document splitting by line and by paragraph") {
  const std::string body = "first line\nsecond line\n\nthird\n  \nfourth\n";
  CHECK(split_documents(body, DocUnit::kLine) ==
        std::vector<std::string>{"first line", "second line", "", "third", "  ", "fourth"});
  CHECK(split_documents(body, DocUnit::kPara) ==
        std::vector<std::string>{"first line\nsecond line", "third", "fourth"});
  CHECK(parse_doc_unit("para") == DocUnit::kPara);
  CHECK_THROWS_AS(parse_doc_unit("page"), ConfigError);
}

TEST_CASE("manifest loading resolves paths and computes byte counts") {
  TempDir dir;
  write_file_atomic(dir / "data/en.txt", "hello world\nsecond\n");
  write_file_atomic(dir / "manifest.json", R"([{"lang": "en", "paths": ["data/en.txt"]}, {"lang": "a", "paths": ["data/en.txt"], "bytes": 5}])");
  const auto specs = load_manifest(dir / "manifest.json", DocUnit::kLine);
  REQUIRE(specs.size() == 2);
  CHECK(specs[0].sources[0] == dir / "data/en.txt");
  CHECK(specs[0].byte_count == std::string("hello world").size() + std::string("second").size());
  CHECK(specs[1].byte_count == 5);

  write_file_atomic(dir / "dup.json", R"([{"lang": "en", "paths": ["data/en.txt"]}, {"lang": "en", "paths": ["data/en.txt"]}])");
  CHECK_THROWS_AS(load_manifest(dir / "dup.json", DocUnit::kLine), ValidationError);
  write_file_atomic(dir / "bad.json", R"({"lang": "en"})");
  CHECK_THROWS_AS(load_manifest(dir / "bad.json", DocUnit::kLine), ValidationError);
  CHECK_THROWS_AS(load_manifest(dir / "missing.json", DocUnit::kLine), ValidationError);
}

TEST_CASE("invalid utf-8 documents are skipped and counted") {
  TempDir dir;
  write_file_atomic(dir / "x.txt", std::string("good one\nbad \xFF\xFE byte\ngood two\n"));
  std::size_t skipped = 0;
  const auto docs = read_documents({dir / "x.txt"}, DocUnit::kLine, &skipped);
  CHECK(docs == std::vector<std::string>{"good one", "good two"});
  CHECK(skipped == 1);
}

TEST_CASE("sampling is deterministic under a fixed seed") {
  TempDir dir;
  std::vector<std::string> en, a;
  for (int i = 0; i < 50; ++i) {
    en.push_back("english document number " + std::to_string(i));
    a.push_back("other language text " + std::to_string(i));
  }
  const auto specs = write_corpus(dir, {{"en", en}, {"a", a}});
  const auto weights = compute_mixture(specs, 2.0);
  auto s1 = sample_documents(specs, weights, 7, 500);
  auto s2 = sample_documents(specs, weights, 7, 500);
  const auto d1 = drain(s1);
  CHECK(d1 == drain(s2));
  CHECK(s1.tokens_emitted() >= 500);
  auto s3 = sample_documents(specs, weights, 8, 500);
  CHECK(d1 != drain(s3));
}

TEST_CASE("degenerate weights emit only that language") {
  TempDir dir;
  const auto specs = write_corpus(dir, {{"en", {"one two", "three four"}}, {"a", {"x y", "z w"}}});
  MixtureWeights w{{{"en", 1.0}, {"a", 0.0}}};
  auto stream = sample_documents(specs, w, 3, 100);
  const auto docs = drain(stream);
  CHECK(!docs.empty());
  for (const auto& d : docs) CHECK(d.lang == "en");
}

TEST_CASE("realized token shares converge to the weights") {
  TempDir dir;
  std::vector<std::string> en, a;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 400; ++i) {
    std::string e, x;
    const int n = 3 + static_cast<int>(rng() % 10);
    for (int k = 0; k < n; ++k) e += "w" + std::to_string(rng() % 50) + " ";
    for (int k = 0; k < n; ++k) x += "v" + std::to_string(rng() % 50) + " ";
    en.push_back(e);
    a.push_back(x);
  }
  const auto specs = write_corpus(dir, {{"en", en}, {"a", a}});
  MixtureWeights w{{{"en", 0.5}, {"a", 0.5}}};
  auto stream = sample_documents(specs, w, 19, 100000);
  std::map<std::string, std::size_t> tokens;
  std::size_t all = 0;
  for (const auto& d : drain(stream)) {
    tokens[d.lang] += count_words(d.text);
    all += count_words(d.text);
  }
  CHECK(all >= 100000);
  CHECK(std::abs(static_cast<double>(tokens["en"]) / static_cast<double>(all) - 0.5) < 0.03);
}

TEST_CASE("paragraph streams keep blocks within one file") {
  TempDir dir;
  write_file_atomic(dir / "p1.txt", "alpha\nbeta\n\ngamma\n");
  write_file_atomic(dir / "p2.txt", "delta\n\nepsilon\nzeta\n");
  std::vector<CorpusSpec> specs{{"en", {dir / "p1.txt", dir / "p2.txt"}, 100}};
  SamplingOptions opts;
  opts.seed = 1;
  opts.token_budget = 40;
  opts.doc_unit = DocUnit::kPara;
  opts.keep_probability = 1.0;
  DocumentStream stream(specs, compute_mixture(specs, 1.0), opts);
  const auto docs = drain(stream);
  REQUIRE(docs.size() >= 4);
  CHECK(docs[0].text == "alpha\nbeta");
  CHECK(docs[1].text == "gamma");
  CHECK(docs[2].text == "delta");
  CHECK(docs[3].text == "epsilon\nzeta");
}

TEST_CASE("a corpus with no usable document is an error") {
  TempDir dir;
  write_file_atomic(dir / "empty.txt", "  \n\n");
  std::vector<CorpusSpec> specs{{"en", {dir / "empty.txt"}, 1}};
  auto stream = sample_documents(specs, compute_mixture(specs, 1.0), 1, 10);
  CHECK_THROWS_AS(stream.next(), ValidationError);
  CHECK_THROWS_AS(sample_documents(specs, compute_mixture(specs, 1.0), 1, 0), ValidationError);
}

}

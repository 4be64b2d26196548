#include <doctest.h>

#include "test_support.hpp"
#include "vocadt/common.hpp"
#include "vocadt/synthetic.hpp"

using namespace vocadt::textcorpus;
using namespace vocadt::textcorpus::synthetic;

TEST_SUITE("synthetic") {

TEST_CASE("same seed gives parallel documents across languages") {
  Generator gen(GrammarSpec{});
  const auto en = gen.documents("en", 20, 5);
  const auto xc = gen.documents("xc1", 20, 5);
  REQUIRE(en.size() == 20);
  REQUIRE(xc.size() == 20);
  for (std::size_t i = 0; i < en.size(); ++i) CHECK(count_words(en[i]) == count_words(xc[i]));
  CHECK(gen.documents("en", 20, 5) == en);
  CHECK(gen.documents("en", 20, 6) != en);
}

TEST_CASE("lexicons are deterministic and script-specific") {
  Generator a(GrammarSpec{}), b(GrammarSpec{});
  for (std::size_t c = 0; c < 50; ++c) CHECK(a.word("xg", c) == b.word("xg", c));
  CHECK(vocadt::is_valid_utf8(a.word("xk", 3)));
  CHECK(static_cast<unsigned char>(a.word("xc1", 7)[0]) >= 0xC0);
  CHECK(static_cast<unsigned char>(a.word("en", 7)[0]) < 0x80);
  CHECK_THROWS_AS(a.word("zz", 0), vocadt::ConfigError);
}

TEST_CASE("related languages share surface forms with the source") {
  Generator gen(GrammarSpec{});
  std::size_t shared = 0, unrelated_shared = 0;
  for (std::size_t c = 0; c < 1000; ++c) {
    shared += gen.word("xl1", c) == gen.word("en", c);
    unrelated_shared += gen.word("xk", c) == gen.word("en", c);
  }
  CHECK(shared > 100);
  CHECK(unrelated_shared < shared);
}

TEST_CASE("toy corpus files and manifests are written") {
  vocadt::testing::TempDir dir;
  ToyCorpusOptions opts;
  opts.languages = {"en", "xl1"};
  opts.train_docs = 30;
  opts.eval_docs = 5;
  write_toy_corpus(dir.path(), opts);
  const auto specs = load_manifest(dir / "manifest.json", DocUnit::kLine);
  REQUIRE(specs.size() == 2);
  CHECK(read_documents(specs[0].sources, DocUnit::kLine).size() == 30);
  const auto eval = load_manifest(dir / "eval_manifest.json", DocUnit::kLine);
  CHECK(read_documents(eval[1].sources, DocUnit::kLine).size() == 5);
}

}

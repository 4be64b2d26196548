#include <doctest.h>

#include "test_support.hpp"
#include "vocadt/vocabmap.hpp"

using namespace vocadt;
using namespace vocadt::vocabmap;
using tokenizer::TokenizerModel;
using tokenizer::Vocabulary;

namespace {

// Original vocabulary: bytes plus "th", "the", "un".
TokenizerModel old_model() {
  auto v = Vocabulary::byte_level();
  const TokenId t = v.byte_token('t'), h = v.byte_token('h'), e = v.byte_token('e');
  const TokenId u = v.byte_token('u'), n = v.byte_token('n');
  const TokenId th = v.add("th");
  v.add("the");
  v.add("un");
  return TokenizerModel(v, {{t, h}, {th, e}, {u, n}});
}

Vocabulary new_vocab() {
  auto v = Vocabulary::byte_level();
  v.add("the");
  v.add("unhap");
  v.add("unun");
  v.add("\xCE\xB3");
  return v;
}

}  // namespace

TEST_SUITE("vocabmap") {

TEST_CASE("tokens are classified by membership then decomposition") {
  const auto old = old_model();
  const auto& vo = old.vocabulary();
  const auto vn = new_vocab();
  const auto plan = classify_tokens(vn, vo, old);
  REQUIRE(plan.new_vocab_size() == vn.size());

  const auto& the = std::get<Overlap>(plan.classes[259]);
  CHECK(the.orig_id == *vo.find("the"));

  const auto& unhap = std::get<Partition>(plan.classes[260]);
  CHECK(unhap.orig_ids == std::vector<TokenId>{*vo.find("un"), vo.byte_token('h'), vo.byte_token('a'), vo.byte_token('p')});
  CHECK(unhap.uses_byte_fallback);

  const auto& unun = std::get<Partition>(plan.classes[261]);
  CHECK(unun.orig_ids == std::vector<TokenId>{*vo.find("un"), *vo.find("un")});
  CHECK(!unun.uses_byte_fallback);

  CHECK(std::get<Partition>(plan.classes[262]).orig_ids.size() == 2);

  for (TokenId b = 3; b < 259; ++b) CHECK(std::get<Overlap>(plan.classes[static_cast<std::size_t>(b)]).orig_id == b);
  for (TokenId s = 0; s < 3; ++s) CHECK(std::get<Overlap>(plan.classes[static_cast<std::size_t>(s)]).orig_id == s);
  CHECK(std::is_sorted(plan.overlap_ids.begin(), plan.overlap_ids.end()));
  CHECK(plan.overlap_ids.size() == 260);
  CHECK_NOTHROW(plan.validate());
}

TEST_CASE("tokens in both vocabularies are overlap even when decomposable") {
  const auto old = old_model();
  auto vn = Vocabulary::byte_level();
  vn.add("th");
  const auto plan = classify_tokens(vn, old.vocabulary(), old);
  CHECK(std::holds_alternative<Overlap>(plan.classes[259]));
}

TEST_CASE("classification stats") {
  const auto old = old_model();
  const auto plan = classify_tokens(new_vocab(), old.vocabulary(), old);
  const auto s = overlap_stats(plan);
  CHECK(s.overlap == 260);
  CHECK(s.partition == 3);
  CHECK(s.random == 0);
  CHECK(s.byte_fallback_partitions == 2);
  CHECK(s.total() == new_vocab().size());
  const auto report = init_report(plan, new_vocab(), old.vocabulary());
  CHECK(report["counts"]["partition"] == 3);
  CHECK(report["examples"]["overlap"][0] == "the");
}

TEST_CASE("initial rows follow the class rules") {
  const auto old = old_model();
  const auto& vo = old.vocabulary();
  const auto plan = classify_tokens(new_vocab(), vo, old);
  const auto a = init_adapter(plan, vo.size(), 5);
  REQUIRE(a.rows() == static_cast<Eigen::Index>(new_vocab().size()));
  REQUIRE(a.cols() == static_cast<Eigen::Index>(vo.size()));

  CHECK(a.values.row(259).sum() == 1.0f);
  CHECK(a.values(259, *vo.find("the")) == 1.0f);
  CHECK(a.values(260, *vo.find("un")) == 0.25f);
  CHECK(a.values(260, vo.byte_token('p')) == 0.25f);
  CHECK(a.values(261, *vo.find("un")) == 1.0f);
  for (Eigen::Index i = 0; i < a.rows(); ++i) CHECK(std::abs(a.values.row(i).sum() - 1.0f) < 1e-6f);

  REQUIRE(a.overlap_ids == plan.overlap_ids);
  for (std::size_t k = 0; k < a.overlap_ids.size(); ++k)
    CHECK(a.init_overlap_rows.row(static_cast<Eigen::Index>(k)) == a.values.row(a.overlap_ids[k]));
  CHECK_THROWS_AS(init_adapter(plan, vo.size() + 1, 5), ValidationError);
}

TEST_CASE("hand-built plan with partition and random rows") {
  InitPlan plan;
  plan.old_vocab_size = 12;
  plan.classes = {Overlap{3}, Partition{{4, 9}, false}, Random{}, Random{}};
  plan.overlap_ids = {0};
  const auto a = init_adapter(plan, 12, 1);
  CHECK(a.values(1, 4) == 0.5f);
  CHECK(a.values(1, 9) == 0.5f);
  CHECK(a.values.row(1).sum() == 1.0f);
  for (Eigen::Index r : {2, 3}) {
    CHECK(std::abs(a.values.row(r).sum() - 1.0f) < 1e-6f);
    CHECK(a.values.row(r).minCoeff() > 0.0f);
  }
  CHECK(a.values.row(2) != a.values.row(3));

  CHECK(init_adapter(plan, 12, 1) == a);
  CHECK(init_adapter(plan, 12, 2).values.row(2) != a.values.row(2));
  CHECK(init_adapter(plan, 12, 2).values.row(1) == a.values.row(1));

  plan.classes[1] = Partition{{4}, false};
  CHECK_THROWS_AS(plan.validate(), ValidationError);
  plan.classes[1] = Overlap{13};
  CHECK_THROWS_AS(plan.validate(), ValidationError);
}

TEST_CASE("identical vocabularies give the identity adapter") {
  const auto old = old_model();
  const auto plan = classify_tokens(old.vocabulary(), old.vocabulary(), old);
  const auto a = init_adapter(plan, old.vocabulary().size(), 0);
  CHECK(a.values == MatrixF::Identity(a.rows(), a.cols()));
}

TEST_CASE("all-random baseline") {
  const auto plan = InitPlan::all_random(20, 10);
  CHECK(overlap_stats(plan).random == 20);
  const auto a = init_adapter(plan, 10, 3);
  CHECK(a.overlap_ids.empty());
  CHECK(a.init_overlap_rows.rows() == 0);
  for (Eigen::Index i = 0; i < a.rows(); ++i) CHECK(std::abs(a.values.row(i).sum() - 1.0f) < 1e-6f);
}

TEST_CASE("mismatched original tokenizer is rejected") {
  const auto old = old_model();
  CHECK_THROWS_AS(classify_tokens(new_vocab(), Vocabulary::byte_level(), old), ValidationError);
}

}

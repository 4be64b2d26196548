#include "vocadt/vocabmap.hpp"

#include <algorithm>
#include <map>
#include <random>

namespace vocadt::vocabmap {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Printable rendering of a token for reports.
std::string display(const std::string& bytes) {
  if (!bytes.empty() && bytes[0] == '\xFF') return bytes.substr(1);
  if (is_valid_utf8(bytes)) return bytes;
  return "b64:" + base64_encode(bytes);
}

}  // namespace

void InitPlan::validate() const {
  std::vector<TokenId> expected;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto& cls = classes[i];
    if (const auto* o = std::get_if<Overlap>(&cls)) {
      if (o->orig_id < 0 || static_cast<std::size_t>(o->orig_id) >= old_vocab_size) {
        throw ValidationError("overlap row " + std::to_string(i) + " refers outside the original vocabulary");
      }
      expected.push_back(static_cast<TokenId>(i));
    } else if (const auto* p = std::get_if<Partition>(&cls)) {
      if (p->orig_ids.size() < 2) throw ValidationError("partition row " + std::to_string(i) + " has m < 2");
      for (TokenId id : p->orig_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= old_vocab_size) {
          throw ValidationError("partition row " + std::to_string(i) + " refers outside the original vocabulary");
        }
      }
    }
  }
  if (expected != overlap_ids) throw ValidationError("overlap id set does not match the classes");
}

InitPlan InitPlan::all_random(std::size_t new_vocab_size, std::size_t old_vocab_size) {
  InitPlan plan;
  plan.classes.assign(new_vocab_size, Random{});
  plan.old_vocab_size = old_vocab_size;
  return plan;
}

InitPlan classify_tokens(const tokenizer::Vocabulary& v_new, const tokenizer::Vocabulary& v_old,
                         const tokenizer::TokenizerModel& old_tokenizer) {
  if (!(old_tokenizer.vocabulary() == v_old)) {
    throw ValidationError("classify_tokens: the original tokenizer does not belong to the original vocabulary");
  }
  InitPlan plan;
  plan.old_vocab_size = v_old.size();
  plan.classes.reserve(v_new.size());
  for (std::size_t i = 0; i < v_new.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    if (auto role = v_new.special_role(id)) {
      plan.classes.emplace_back(Overlap{v_old.special(*role)});
      plan.overlap_ids.push_back(id);
      continue;
    }
    const auto& bytes = v_new.token(id);
    if (auto orig = v_old.find(bytes); orig && !v_old.is_special(*orig)) {
      plan.classes.emplace_back(Overlap{*orig});
      plan.overlap_ids.push_back(id);
      continue;
    }
    auto pieces = old_tokenizer.encode(bytes);
    if (pieces.size() > 1) {
      Partition part;
      part.uses_byte_fallback =
          std::any_of(pieces.begin(), pieces.end(), [&](TokenId t) { return v_old.is_byte_token(t); });
      part.orig_ids = std::move(pieces);
      plan.classes.emplace_back(std::move(part));
      continue;
    }
    // m <= 1 without membership: neither of the structured cases applies.
    plan.classes.emplace_back(Random{});
  }
  return plan;
}

AdapterMatrix<float> init_adapter(const InitPlan& plan, std::size_t v_old_size, std::uint64_t seed) {
  if (plan.old_vocab_size != v_old_size) {
    throw ValidationError("init_adapter: plan was built for a different original vocabulary size");
  }
  plan.validate();
  const auto rows = static_cast<Eigen::Index>(plan.new_vocab_size());
  const auto cols = static_cast<Eigen::Index>(v_old_size);
  AdapterMatrix<float> a;
  a.values = MatrixF::Zero(rows, cols);
  std::vector<double> u(v_old_size);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& cls = plan.classes[static_cast<std::size_t>(i)];
    if (const auto* o = std::get_if<Overlap>(&cls)) {
      a.values(i, o->orig_id) = 1.0f;
    } else if (const auto* p = std::get_if<Partition>(&cls)) {
      const auto m = static_cast<float>(p->orig_ids.size());
      std::map<TokenId, int> multiplicity;
      for (TokenId j : p->orig_ids) ++multiplicity[j];
      for (const auto& [j, count] : multiplicity) a.values(i, j) = static_cast<float>(count) / m;
    } else {
      std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(i))));
      double total = 0.0;
      for (auto& x : u) {
        // Open interval (0, 1).
        x = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
        total += x;
      }
      for (Eigen::Index j = 0; j < cols; ++j) a.values(i, j) = static_cast<float>(u[static_cast<std::size_t>(j)] / total);
    }
  }
  a.overlap_ids = plan.overlap_ids;
  a.init_overlap_rows.resize(static_cast<Eigen::Index>(a.overlap_ids.size()), cols);
  for (std::size_t k = 0; k < a.overlap_ids.size(); ++k) {
    a.init_overlap_rows.row(static_cast<Eigen::Index>(k)) = a.values.row(a.overlap_ids[k]);
  }
  return a;
}

OverlapStats overlap_stats(const InitPlan& plan) {
  OverlapStats s;
  for (const auto& cls : plan.classes) {
    if (std::holds_alternative<Overlap>(cls)) {
      ++s.overlap;
    } else if (const auto* p = std::get_if<Partition>(&cls)) {
      ++s.partition;
      if (p->uses_byte_fallback) ++s.byte_fallback_partitions;
    } else {
      ++s.random;
    }
  }
  return s;
}

nlohmann::json init_report(const InitPlan& plan, const tokenizer::Vocabulary& v_new,
                           const tokenizer::Vocabulary& v_old, std::size_t examples_per_class) {
  const auto s = overlap_stats(plan);
  nlohmann::json overlap_ex = nlohmann::json::array();
  nlohmann::json partition_ex = nlohmann::json::array();
  nlohmann::json random_ex = nlohmann::json::array();
  for (std::size_t i = 0; i < plan.classes.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    if (v_new.is_special(id) || v_new.is_byte_token(id)) continue;
    const auto& cls = plan.classes[i];
    const auto token = display(v_new.token(id));
    if (std::holds_alternative<Overlap>(cls)) {
      if (overlap_ex.size() < examples_per_class) overlap_ex.push_back(token);
    } else if (const auto* p = std::get_if<Partition>(&cls)) {
      if (partition_ex.size() < examples_per_class) {
        nlohmann::json pieces = nlohmann::json::array();
        for (TokenId t : p->orig_ids) pieces.push_back(display(v_old.token(t)));
        partition_ex.push_back({{"token", token}, {"pieces", pieces}});
      }
    } else if (random_ex.size() < examples_per_class) {
      random_ex.push_back(token);
    }
  }
  return {{"new_vocab_size", plan.new_vocab_size()},
          {"old_vocab_size", plan.old_vocab_size},
          {"counts", {{"overlap", s.overlap}, {"partition", s.partition}, {"random", s.random}}},
          {"fractions",
           {{"overlap", s.fraction(s.overlap)}, {"partition", s.fraction(s.partition)}, {"random", s.fraction(s.random)}}},
          {"byte_fallback_partitions", s.byte_fallback_partitions},
          {"byte_fallback_partition_fraction",
           s.partition == 0 ? 0.0 : static_cast<double>(s.byte_fallback_partitions) / static_cast<double>(s.partition)},
          {"examples", {{"overlap", overlap_ex}, {"partition", partition_ex}, {"random", random_ex}}}};
}

}  // namespace vocadt::vocabmap

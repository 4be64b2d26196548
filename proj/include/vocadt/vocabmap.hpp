#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "vocadt/common.hpp"
#include "vocadt/tokenizer.hpp"

namespace vocadt::vocabmap {

// New token present verbatim in the original vocabulary.
struct Overlap {
  TokenId orig_id = 0;
  bool operator==(const Overlap&) const = default;
};

// New token absent from the original vocabulary whose original-tokenizer
// decomposition has m > 1 pieces. Pieces keep their multiplicity.
struct Partition {
  std::vector<TokenId> orig_ids;
  bool uses_byte_fallback = false;
  bool operator==(const Partition&) const = default;
};

struct Random {
  bool operator==(const Random&) const = default;
};

using TokenClass = std::variant<Overlap, Partition, Random>;

struct InitPlan {
  std::vector<TokenClass> classes;  // indexed by new-token id
  std::vector<TokenId> overlap_ids;  // sorted
  std::size_t old_vocab_size = 0;

  std::size_t new_vocab_size() const { return classes.size(); }
  void validate() const;

  /// Every row drawn as a random convex combination (baseline).
  static InitPlan all_random(std::size_t new_vocab_size, std::size_t old_vocab_size);
};

/// Overlap takes precedence over Partition, Partition over Random. Specials
/// of the new vocabulary map onto the original specials by role.
InitPlan classify_tokens(const tokenizer::Vocabulary& v_new, const tokenizer::Vocabulary& v_old,
                         const tokenizer::TokenizerModel& old_tokenizer);

/// Dense |Vn| x |Vo| adapter with the snapshot of its initial overlap rows.
template <typename T>
struct AdapterMatrix {
  Matrix<T> values;
  Matrix<T> init_overlap_rows;  // one row per overlap id, same order
  std::vector<TokenId> overlap_ids;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }

  template <typename U>
  AdapterMatrix<U> cast() const {
    return {values.template cast<U>(), init_overlap_rows.template cast<U>(), overlap_ids};
  }

  bool operator==(const AdapterMatrix& other) const {
    return values == other.values && init_overlap_rows == other.init_overlap_rows &&
           overlap_ids == other.overlap_ids;
  }
};

/// Overlap rows one-hot, partition rows multiplicity/m, random rows
/// i.i.d. Uniform(0,1) normalized to sum to one (seeded per row).
AdapterMatrix<float> init_adapter(const InitPlan& plan, std::size_t v_old_size, std::uint64_t seed);

struct OverlapStats {
  std::size_t overlap = 0;
  std::size_t partition = 0;
  std::size_t random = 0;
  std::size_t byte_fallback_partitions = 0;

  std::size_t total() const { return overlap + partition + random; }
  double fraction(std::size_t count) const {
    return total() == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(total());
  }
};

OverlapStats overlap_stats(const InitPlan& plan);

/// Class counts, byte-fallback partition fraction, and example tokens.
nlohmann::json init_report(const InitPlan& plan, const tokenizer::Vocabulary& v_new,
                           const tokenizer::Vocabulary& v_old, std::size_t examples_per_class = 8);

}  // namespace vocadt::vocabmap

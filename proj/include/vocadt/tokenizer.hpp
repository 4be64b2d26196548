#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vocadt/common.hpp"
#include "vocadt/textcorpus.hpp"

namespace vocadt::tokenizer {

struct Specials {
  TokenId unk = 0;
  TokenId bos = 1;
  TokenId eos = 2;

  bool operator==(const Specials&) const = default;
};

enum class SpecialRole { kUnk, kBos, kEos };

// Minimum vocabulary: three specials plus the 256 byte tokens.
inline constexpr std::size_t kMinVocabSize = 259;

/// Ordered token set with dense ids. Special tokens are stored under byte
/// strings starting with 0xFF, which never occurs in UTF-8 text, so they
/// cannot collide with learned tokens.
class Vocabulary {
 public:
  /// Specials at ids 0..2, then the 256 single-byte tokens.
  static Vocabulary byte_level();

  /// Validates the invariants (dense ids, no duplicates, all bytes present).
  Vocabulary(std::vector<std::string> tokens, Specials specials);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<TokenId> find(std::string_view bytes) const;
  bool contains(std::string_view bytes) const { return find(bytes).has_value(); }
  TokenId byte_token(std::uint8_t byte) const { return byte_ids_[byte]; }
  bool is_byte_token(TokenId id) const;
  const Specials& specials() const { return specials_; }
  bool is_special(TokenId id) const;
  std::optional<SpecialRole> special_role(TokenId id) const;
  TokenId special(SpecialRole role) const;

  TokenId add(std::string bytes);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && specials_ == other.specials_;
  }

 private:
  Vocabulary() = default;
  void index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::array<TokenId, 256> byte_ids_{};
  Specials specials_;
};

std::string special_token_bytes(SpecialRole role);

struct MergeRule {
  TokenId left = 0;
  TokenId right = 0;
  TokenId result = 0;

  bool operator==(const MergeRule&) const = default;
};

/// Byte-level BPE with byte fallback. Immutable after construction;
/// encode/decode are safe to call concurrently.
class TokenizerModel {
 public:
  /// Checks that the merges, applied in order from the byte tokens, produce
  /// exactly the vocabulary's non-byte non-special tokens.
  TokenizerModel(Vocabulary vocabulary, std::vector<std::pair<TokenId, TokenId>> merges);

  const Vocabulary& vocabulary() const { return vocab_; }
  const std::vector<MergeRule>& merges() const { return merges_; }

  /// Total over arbitrary bytes; never emits the unk token.
  std::vector<TokenId> encode(std::string_view text) const;
  /// Throws ValidationError on out-of-range ids. Special tokens decode to
  /// nothing.
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t count_tokens(std::string_view text) const { return encode(text).size(); }

  bool operator==(const TokenizerModel& other) const {
    return vocab_ == other.vocab_ && merges_ == other.merges_;
  }

 private:
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  Vocabulary vocab_;
  std::vector<MergeRule> merges_;
  // (left << 32 | right) -> merge rank
  std::unordered_map<std::uint64_t, std::uint32_t> ranks_;
};

/// Splits text on Unicode whitespace. A single space directly preceding a
/// word is attached to that word, marking it word-initial; other whitespace
/// runs stay separate chunks. Concatenating the chunks gives back the text.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Trains BPE merges until the vocabulary reaches `target_size` or no pair
/// remains. Consumes at most `per_language_token_cap` whitespace-delimited
/// words per language (0 = unlimited). Pair-frequency ties break toward
/// the lexicographically smallest (left bytes, right bytes).
TokenizerModel train_vocab(textcorpus::DocumentSource& corpus, std::size_t target_size,
                           std::size_t per_language_token_cap);

nlohmann::json to_json(const TokenizerModel& model);
TokenizerModel from_json(const nlohmann::json& j);

/// `provenance` is stored under an optional "provenance" key.
void save_vocab(const TokenizerModel& model, const std::filesystem::path& path,
                const nlohmann::json& provenance = nullptr);
TokenizerModel load_vocab(const std::filesystem::path& path);

}  // namespace vocadt::tokenizer

#include "vocadt/tokenizer.hpp"

#include <algorithm>
#include <map>
#include <queue>
#include <set>

#include <spdlog/spdlog.h>
#include <unicode/uchar.h>
#include <unicode/utf8.h>

namespace vocadt::tokenizer {

namespace {

constexpr int kFormatVersion = 1;

std::uint64_t pair_key(TokenId left, TokenId right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) |
         static_cast<std::uint32_t>(right);
}

}  // namespace

std::string special_token_bytes(SpecialRole role) {
  switch (role) {
    case SpecialRole::kUnk: return "\xFF<unk>";
    case SpecialRole::kBos: return "\xFF<s>";
    case SpecialRole::kEos: return "\xFF</s>";
  }
  return {};
}

Vocabulary Vocabulary::byte_level() {
  Vocabulary v;
  v.tokens_.push_back(special_token_bytes(SpecialRole::kUnk));
  v.tokens_.push_back(special_token_bytes(SpecialRole::kBos));
  v.tokens_.push_back(special_token_bytes(SpecialRole::kEos));
  for (int b = 0; b < 256; ++b) v.tokens_.emplace_back(1, static_cast<char>(b));
  v.specials_ = Specials{0, 1, 2};
  v.index();
  return v;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, Specials specials)
    : tokens_(std::move(tokens)), specials_(specials) {
  index();
}

void Vocabulary::index() {
  index_.clear();
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw ValidationError("vocabulary contains an empty token at id " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw ValidationError("vocabulary contains duplicate token at id " + std::to_string(i));
    }
  }
  for (int b = 0; b < 256; ++b) {
    auto it = index_.find(std::string(1, static_cast<char>(b)));
    if (it == index_.end()) throw ValidationError("vocabulary is missing byte token " + std::to_string(b));
    byte_ids_[static_cast<std::size_t>(b)] = it->second;
  }
  const TokenId n = static_cast<TokenId>(tokens_.size());
  const std::array<TokenId, 3> ids{specials_.unk, specials_.bos, specials_.eos};
  for (TokenId id : ids) {
    if (id < 0 || id >= n) throw ValidationError("special token id out of range");
    if (tokens_[static_cast<std::size_t>(id)].size() < 2 || tokens_[static_cast<std::size_t>(id)][0] != '\xFF') {
      throw ValidationError("special token ids must refer to special tokens");
    }
  }
  if (specials_.unk == specials_.bos || specials_.unk == specials_.eos || specials_.bos == specials_.eos) {
    throw ValidationError("special token ids must be distinct");
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view bytes) const {
  auto it = index_.find(std::string(bytes));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool Vocabulary::is_byte_token(TokenId id) const { return token(id).size() == 1; }

bool Vocabulary::is_special(TokenId id) const {
  return id == specials_.unk || id == specials_.bos || id == specials_.eos;
}

std::optional<SpecialRole> Vocabulary::special_role(TokenId id) const {
  if (id == specials_.unk) return SpecialRole::kUnk;
  if (id == specials_.bos) return SpecialRole::kBos;
  if (id == specials_.eos) return SpecialRole::kEos;
  return std::nullopt;
}

TokenId Vocabulary::special(SpecialRole role) const {
  switch (role) {
    case SpecialRole::kUnk: return specials_.unk;
    case SpecialRole::kBos: return specials_.bos;
    case SpecialRole::kEos: return specials_.eos;
  }
  return specials_.unk;
}

TokenId Vocabulary::add(std::string bytes) {
  if (bytes.empty()) throw ValidationError("cannot add an empty token");
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!index_.emplace(bytes, id).second) throw ValidationError("duplicate token");
  tokens_.push_back(std::move(bytes));
  return id;
}

TokenizerModel::TokenizerModel(Vocabulary vocabulary, std::vector<std::pair<TokenId, TokenId>> merges)
    : vocab_(std::move(vocabulary)) {
  const std::size_t n = vocab_.size();
  std::vector<bool> available(n, false);
  for (int b = 0; b < 256; ++b) available[static_cast<std::size_t>(vocab_.byte_token(static_cast<std::uint8_t>(b)))] = true;
  merges_.reserve(merges.size());
  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    const auto [left, right] = merges[rank];
    if (left < 0 || right < 0 || static_cast<std::size_t>(left) >= n || static_cast<std::size_t>(right) >= n) {
      throw ValidationError("merge " + std::to_string(rank) + " refers to an unknown token");
    }
    if (!available[static_cast<std::size_t>(left)] || !available[static_cast<std::size_t>(right)]) {
      throw ValidationError("merge " + std::to_string(rank) + " uses a token not yet produced");
    }
    const auto result = vocab_.find(vocab_.token(left) + vocab_.token(right));
    if (!result) throw ValidationError("merge " + std::to_string(rank) + " produces a token missing from the vocabulary");
    if (available[static_cast<std::size_t>(*result)]) {
      throw ValidationError("merge " + std::to_string(rank) + " produces an existing token");
    }
    available[static_cast<std::size_t>(*result)] = true;
    if (!ranks_.emplace(pair_key(left, right), static_cast<std::uint32_t>(rank)).second) {
      throw ValidationError("duplicate merge rule at rank " + std::to_string(rank));
    }
    merges_.push_back({left, right, *result});
  }
  for (std::size_t id = 0; id < n; ++id) {
    if (!available[id] && !vocab_.is_special(static_cast<TokenId>(id))) {
      throw ValidationError("token " + std::to_string(id) + " is not produced by any merge");
    }
  }
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  struct Segment {
    std::size_t begin;
    std::size_t end;
    bool space;
    std::size_t last_cp_begin;  // start of the run's last code point
  };
  std::vector<Segment> runs;
  const auto* s = reinterpret_cast<const std::uint8_t*>(text.data());
  const auto length = static_cast<std::int32_t>(text.size());
  std::int32_t i = 0;
  while (i < length) {
    const std::int32_t start = i;
    UChar32 c;
    U8_NEXT(s, i, length, c);
    const bool space = c >= 0 && u_isUWhiteSpace(c);
    if (!runs.empty() && runs.back().space == space) {
      runs.back().end = static_cast<std::size_t>(i);
      runs.back().last_cp_begin = static_cast<std::size_t>(start);
    } else {
      runs.push_back({static_cast<std::size_t>(start), static_cast<std::size_t>(i), space,
                      static_cast<std::size_t>(start)});
    }
  }
  std::vector<std::string_view> chunks;
  std::size_t carry_begin = std::string_view::npos;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto& run = runs[r];
    if (run.space) {
      const bool before_word = r + 1 < runs.size();
      if (before_word && text[run.last_cp_begin] == ' ' && run.end - run.last_cp_begin == 1) {
        if (run.last_cp_begin > run.begin) chunks.push_back(text.substr(run.begin, run.last_cp_begin - run.begin));
        carry_begin = run.last_cp_begin;
      } else {
        chunks.push_back(text.substr(run.begin, run.end - run.begin));
      }
    } else {
      const std::size_t begin = carry_begin == std::string_view::npos ? run.begin : carry_begin;
      chunks.push_back(text.substr(begin, run.end - begin));
      carry_begin = std::string_view::npos;
    }
  }
  return chunks;
}

void TokenizerModel::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> symbols;
  symbols.reserve(chunk.size());
  for (unsigned char b : chunk) symbols.push_back(vocab_.byte_token(b));
  while (symbols.size() > 1) {
    std::uint32_t best_rank = UINT32_MAX;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = ranks_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it != ranks_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == UINT32_MAX) break;
    const MergeRule& rule = merges_[best_rank];
    std::size_t w = 0;
    for (std::size_t r = 0; r < symbols.size(); ++r) {
      if (r + 1 < symbols.size() && symbols[r] == rule.left && symbols[r + 1] == rule.right) {
        symbols[w++] = rule.result;
        ++r;
      } else {
        symbols[w++] = symbols[r];
      }
    }
    symbols.resize(w);
  }
  out.insert(out.end(), symbols.begin(), symbols.end());
}

std::vector<TokenId> TokenizerModel::encode(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size() / 2 + 1);
  for (auto chunk : pretokenize(text)) encode_chunk(chunk, out);
  return out;
}

std::string TokenizerModel::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    const auto& bytes = vocab_.token(id);
    if (!vocab_.is_special(id)) out += bytes;
  }
  return out;
}

namespace {

// Incremental BPE trainer over word types.
class BpeTrainer {
 public:
  BpeTrainer(const std::map<std::string, std::uint64_t>& word_freq, Vocabulary& vocab) : vocab_(vocab) {
    for (const auto& [word, freq] : word_freq) {
      std::vector<TokenId> symbols;
      for (unsigned char b : word) symbols.push_back(vocab_.byte_token(b));
      words_.push_back(std::move(symbols));
      freqs_.push_back(static_cast<std::int64_t>(freq));
    }
    for (std::size_t w = 0; w < words_.size(); ++w) add_word(w, true);
    for (const auto& [key, count] : counts_) push(key, count);
  }

  // Returns the next merge, or nullopt once no mergeable pair remains.
  std::optional<std::pair<TokenId, TokenId>> step() {
    while (!heap_.empty()) {
      const Entry top = heap_.top();
      heap_.pop();
      auto it = counts_.find(top.key);
      if (it == counts_.end() || it->second != top.count || top.count <= 0) continue;
      const TokenId left = static_cast<TokenId>(top.key >> 32);
      const TokenId right = static_cast<TokenId>(top.key & 0xFFFFFFFFu);
      std::string merged = vocab_.token(left) + vocab_.token(right);
      if (vocab_.contains(merged)) continue;
      const TokenId result = vocab_.add(std::move(merged));
      apply(top.key, left, right, result);
      return std::make_pair(left, right);
    }
    return std::nullopt;
  }

 private:
  struct Entry {
    std::int64_t count;
    std::uint64_t key;
  };

  struct Compare {
    const Vocabulary* vocab;
    // std::priority_queue pops the "largest": highest count, then the
    // lexicographically smallest (left, right) byte pair.
    bool operator()(const Entry& a, const Entry& b) const {
      if (a.count != b.count) return a.count < b.count;
      const auto& al = vocab->token(static_cast<TokenId>(a.key >> 32));
      const auto& bl = vocab->token(static_cast<TokenId>(b.key >> 32));
      if (al != bl) return al > bl;
      return vocab->token(static_cast<TokenId>(a.key & 0xFFFFFFFFu)) >
             vocab->token(static_cast<TokenId>(b.key & 0xFFFFFFFFu));
    }
  };

  void push(std::uint64_t key, std::int64_t count) {
    if (count > 0) heap_.push({count, key});
  }

  void add_word(std::size_t w, bool initial) {
    const auto& sym = words_[w];
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      const auto key = pair_key(sym[i], sym[i + 1]);
      counts_[key] += freqs_[w];
      where_[key].push_back(w);
      if (!initial) touched_.insert(key);
    }
  }

  void remove_word(std::size_t w) {
    const auto& sym = words_[w];
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      const auto key = pair_key(sym[i], sym[i + 1]);
      counts_[key] -= freqs_[w];
      touched_.insert(key);
    }
  }

  void apply(std::uint64_t key, TokenId left, TokenId right, TokenId result) {
    auto candidates = std::move(where_[key]);
    where_.erase(key);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    touched_.clear();
    for (std::size_t w : candidates) {
      auto& sym = words_[w];
      bool hit = false;
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        if (sym[i] == left && sym[i + 1] == right) {
          hit = true;
          break;
        }
      }
      if (!hit) continue;
      remove_word(w);
      std::size_t out = 0;
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == left && sym[i + 1] == right) {
          sym[out++] = result;
          ++i;
        } else {
          sym[out++] = sym[i];
        }
      }
      sym.resize(out);
      add_word(w, false);
    }
    for (auto k : touched_) {
      auto it = counts_.find(k);
      if (it == counts_.end()) continue;
      if (it->second <= 0) {
        counts_.erase(it);
      } else {
        push(k, it->second);
      }
    }
  }

  Vocabulary& vocab_;
  std::vector<std::vector<TokenId>> words_;
  std::vector<std::int64_t> freqs_;
  std::unordered_map<std::uint64_t, std::int64_t> counts_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> where_;
  std::set<std::uint64_t> touched_;
  std::priority_queue<Entry, std::vector<Entry>, Compare> heap_{Compare{&vocab_}};
};

}  // namespace

TokenizerModel train_vocab(textcorpus::DocumentSource& corpus, std::size_t target_size,
                           std::size_t per_language_token_cap) {
  if (target_size < kMinVocabSize) {
    throw ValidationError("target vocabulary size " + std::to_string(target_size) + " is below the minimum " +
                          std::to_string(kMinVocabSize));
  }
  std::map<std::string, std::uint64_t> word_freq;
  std::map<std::string, std::size_t> consumed;
  std::size_t documents = 0;
  while (auto doc = corpus.next()) {
    ++documents;
    auto& used = consumed[doc->lang];
    for (auto chunk : pretokenize(doc->text)) {
      const bool is_space = textcorpus::count_words(chunk) == 0;
      if (!is_space) {
        if (per_language_token_cap != 0 && used >= per_language_token_cap) break;
        ++used;
      }
      ++word_freq[std::string(chunk)];
    }
  }
  if (documents == 0) throw ValidationError("train_vocab: empty corpus stream");
  for (const auto& [lang, n] : consumed) spdlog::debug("train_vocab: {} words from '{}'", n, lang);

  Vocabulary vocab = Vocabulary::byte_level();
  std::vector<std::pair<TokenId, TokenId>> merges;
  BpeTrainer trainer(word_freq, vocab);
  while (vocab.size() < target_size) {
    auto merge = trainer.step();
    if (!merge) break;
    merges.push_back(*merge);
  }
  return TokenizerModel(std::move(vocab), std::move(merges));
}

nlohmann::json to_json(const TokenizerModel& model) {
  const auto& vocab = model.vocabulary();
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& t : vocab.tokens()) tokens.push_back(base64_encode(t));
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& m : model.merges()) {
    merges.push_back({base64_encode(vocab.token(m.left)), base64_encode(vocab.token(m.right))});
  }
  const auto& sp = vocab.specials();
  return {{"version", kFormatVersion},
          {"merges", std::move(merges)},
          {"tokens", std::move(tokens)},
          {"specials", {{"unk", sp.unk}, {"bos", sp.bos}, {"eos", sp.eos}}}};
}

TokenizerModel from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw FormatError("vocabulary file must be a JSON object");
    const int version = j.at("version").get<int>();
    if (version != kFormatVersion) {
      throw FormatError("unsupported vocabulary version " + std::to_string(version));
    }
    std::vector<std::string> tokens;
    for (const auto& t : j.at("tokens")) tokens.push_back(base64_decode(t.get<std::string>()));
    const auto& sp = j.at("specials");
    Vocabulary vocab(std::move(tokens),
                     Specials{sp.at("unk").get<TokenId>(), sp.at("bos").get<TokenId>(), sp.at("eos").get<TokenId>()});
    std::vector<std::pair<TokenId, TokenId>> merges;
    for (const auto& m : j.at("merges")) {
      if (!m.is_array() || m.size() != 2) throw FormatError("merge entries must be [left, right] pairs");
      const auto left = vocab.find(base64_decode(m[0].get<std::string>()));
      const auto right = vocab.find(base64_decode(m[1].get<std::string>()));
      if (!left || !right) throw ValidationError("merge refers to a token missing from the vocabulary");
      merges.emplace_back(*left, *right);
    }
    return TokenizerModel(std::move(vocab), std::move(merges));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed vocabulary file: ") + e.what());
  }
}

void save_vocab(const TokenizerModel& model, const std::filesystem::path& path, const nlohmann::json& provenance) {
  auto j = to_json(model);
  if (!provenance.is_null()) j["provenance"] = provenance;
  write_file_atomic(path, j.dump() + "\n");
}

TokenizerModel load_vocab(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed vocabulary file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace vocadt::tokenizer

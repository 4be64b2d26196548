#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vocadt/textcorpus.hpp"

// Synthetic parallel languages for desk-scale experiments. Every language
// renders the same latent concept chain through its own lexicon, so texts
// in different languages carry the same content with different surface
// forms and scripts.
namespace vocadt::textcorpus::synthetic {

enum class Script { kLatin, kLatinAccented, kCyrillic, kGreek, kHangul };

// How cognates are derived from source-language graphemes.
enum class Rewrite { kNone, kLatinShift, kLatinAccent, kCyrillic, kGreek };

struct LanguageSpec {
  std::string id;
  Script script = Script::kLatin;
  std::uint64_t lexicon_seed = 0;
  // Fraction of concepts whose word is borrowed verbatim from the source language.
  double loan_fraction = 0.0;
  Rewrite rewrite = Rewrite::kNone;
  // Fraction of concepts whose word is derived from the source word by
  // rewriting its graphemes.
  double cognate_fraction = 0.0;
  // Per-grapheme rewrite probability for cognates.
  double rewrite_probability = 1.0;
};

struct GrammarSpec {
  std::size_t concepts = 1200;
  std::size_t successors = 10;
  std::size_t min_sentence = 5;
  std::size_t max_sentence = 14;
  std::size_t max_sentences_per_doc = 3;
  double follow_probability = 0.85;
  std::uint64_t seed = 17;
};

/// The source language ("en") plus stand-ins for Latin-script, Cyrillic,
/// Greek and Hangul targets.
std::vector<LanguageSpec> default_languages();
const LanguageSpec& find_language(const std::vector<LanguageSpec>& languages, const std::string& id);

class Generator {
 public:
  explicit Generator(GrammarSpec grammar, std::vector<LanguageSpec> languages = default_languages());

  const std::vector<LanguageSpec>& languages() const { return languages_; }

  /// Word of `concept_id` in language `lang`.
  const std::string& word(const std::string& lang, std::size_t concept_id) const;

  /// `count` documents; the latent content depends only on `seed`, so the
  /// same seed yields parallel documents across languages.
  std::vector<std::string> documents(const std::string& lang, std::size_t count, std::uint64_t seed) const;
  std::vector<Document> tagged_documents(const std::string& lang, std::size_t count, std::uint64_t seed) const;

 private:
  std::vector<std::size_t> latent_document(std::mt19937_64& rng, std::vector<std::size_t>& sentence_ends) const;
  std::size_t language_index(const std::string& lang) const;

  GrammarSpec grammar_;
  std::vector<LanguageSpec> languages_;
  std::vector<std::vector<std::string>> lexicons_;
  std::vector<double> unigram_cdf_;
  std::vector<std::vector<std::size_t>> successors_;
  std::vector<double> successor_cdf_;
};

struct ToyCorpusOptions {
  std::vector<std::string> languages;  // empty: all default languages
  std::size_t train_docs = 20000;
  std::size_t eval_docs = 300;
  std::uint64_t seed = 2024;
  GrammarSpec grammar;
};

/// Writes <dir>/<lang>.train.txt and <lang>.eval.txt (one document per
/// line) plus manifest.json and eval_manifest.json.
void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpusOptions& options);

}  // namespace vocadt::textcorpus::synthetic

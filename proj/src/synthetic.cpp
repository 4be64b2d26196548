#include "vocadt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "vocadt/common.hpp"

namespace vocadt::textcorpus::synthetic {

namespace {

struct Inventory {
  std::vector<std::string> onsets;
  std::vector<std::string> vowels;
  std::vector<std::string> codas;
};

const Inventory& inventory(Script script) {
  static const Inventory latin{
      {"b", "k", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "ch"},
      {"a", "e", "i", "o", "u", "ai", "ou"},
      {"", "", "", "n", "r", "s", "t"}};
  static const Inventory accented{
      {"b", "k", "d", "g", "h", "j", "l", "m", "n", "p", "r", "s", "t", "v", "z"},
      {"a", "e", "i", "o", "u", "á", "é", "ö", "ü"},
      {"", "", "n", "k", "m"}};
  static const Inventory cyrillic{
      {"б", "в", "г", "д", "ж", "з", "к", "л", "м", "н", "п", "р", "с", "т", "х", "ч", "ш"},
      {"а", "е", "и", "о", "у", "ы", "я", "ю"},
      {"", "", "", "й", "н", "р"}};
  static const Inventory greek{
      {"β", "γ", "δ", "ζ", "θ", "κ", "λ", "μ", "ν", "ξ", "π", "ρ", "σ", "τ", "φ", "χ"},
      {"α", "ε", "η", "ι", "ο", "υ", "ω"},
      {"", "", "", "ν", "ρ"}};
  switch (script) {
    case Script::kLatin: return latin;
    case Script::kLatinAccented: return accented;
    case Script::kCyrillic: return cyrillic;
    case Script::kGreek: return greek;
    case Script::kHangul: break;
  }
  static const Inventory empty;
  return empty;
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

std::size_t sample_cdf(const std::vector<double>& cdf, std::mt19937_64& rng) {
  const double u = uniform01(rng) * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

std::vector<double> zipf_cdf(std::size_t n, double exponent) {
  std::vector<double> cdf(n);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += 1.0 / std::pow(static_cast<double>(i + 1), exponent);
    cdf[i] = acc;
  }
  return cdf;
}

void append_utf8(std::string& out, char32_t c) {
  if (c < 0x80) {
    out += static_cast<char>(c);
  } else if (c < 0x800) {
    out += static_cast<char>(0xC0 | (c >> 6));
    out += static_cast<char>(0x80 | (c & 0x3F));
  } else {
    out += static_cast<char>(0xE0 | (c >> 12));
    out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (c & 0x3F));
  }
}

// A word as its grapheme sequence (onset, vowel, coda per syllable).
std::vector<std::string> make_graphemes(Script script, std::size_t syllables, std::mt19937_64& rng) {
  std::vector<std::string> g;
  for (std::size_t s = 0; s < syllables; ++s) {
    if (script == Script::kHangul) {
      static constexpr std::size_t kFinals[] = {0, 0, 0, 4, 8, 16, 21};
      const std::size_t lead = pick(rng, 19);
      const std::size_t vowel = pick(rng, 21);
      const std::size_t tail = kFinals[pick(rng, std::size(kFinals))];
      std::string block;
      append_utf8(block, static_cast<char32_t>(0xAC00 + (lead * 21 + vowel) * 28 + tail));
      g.push_back(std::move(block));
      continue;
    }
    const auto& inv = inventory(script);
    g.push_back(inv.onsets[pick(rng, inv.onsets.size())]);
    g.push_back(inv.vowels[pick(rng, inv.vowels.size())]);
    const auto& coda = inv.codas[pick(rng, inv.codas.size())];
    if (!coda.empty()) g.push_back(coda);
  }
  return g;
}

std::string join(const std::vector<std::string>& graphemes) {
  std::string w;
  for (const auto& g : graphemes) w += g;
  return w;
}

// Source-grapheme rewrites used to derive cognates.
const std::map<std::string, std::string>& rewrites(Rewrite rule) {
  static const std::map<std::string, std::string> shift{
      {"ch", "k"}, {"w", "v"}, {"ou", "u"}, {"ai", "e"}, {"st", "s"}, {"tr", "dr"},
      {"f", "p"},  {"o", "u"}, {"r", "l"},  {"t", "d"},  {"k", "g"}, {"s", "z"}};
  static const std::map<std::string, std::string> accented{
      {"a", "á"}, {"e", "é"}, {"o", "ö"}, {"u", "ü"}, {"ai", "é"}, {"ou", "ó"},
      {"w", "v"}, {"ch", "cs"}, {"st", "szt"}, {"f", "p"}, {"r", "rr"}, {"s", "z"}};
  static const std::map<std::string, std::string> cyrillic{
      {"b", "б"}, {"k", "к"}, {"d", "д"},  {"f", "ф"},  {"g", "г"},  {"h", "х"},  {"l", "л"},
      {"m", "м"}, {"n", "н"}, {"p", "п"},  {"r", "р"},  {"s", "с"},  {"t", "т"},  {"v", "в"},
      {"w", "в"}, {"st", "ст"}, {"tr", "тр"}, {"ch", "ч"}, {"a", "а"}, {"e", "е"}, {"i", "и"},
      {"o", "о"}, {"u", "у"}, {"ai", "ай"}, {"ou", "у"}};
  static const std::map<std::string, std::string> greek{
      {"b", "β"}, {"k", "κ"}, {"d", "δ"},  {"f", "φ"},  {"g", "γ"},  {"h", "χ"},  {"l", "λ"},
      {"m", "μ"}, {"n", "ν"}, {"p", "π"},  {"r", "ρ"},  {"s", "σ"},  {"t", "τ"},  {"v", "β"},
      {"w", "ου"}, {"st", "στ"}, {"tr", "τρ"}, {"ch", "χ"}, {"a", "α"}, {"e", "ε"}, {"i", "ι"},
      {"o", "ο"}, {"u", "υ"}, {"ai", "αι"}, {"ou", "ου"}};
  static const std::map<std::string, std::string> none;
  switch (rule) {
    case Rewrite::kLatinShift: return shift;
    case Rewrite::kLatinAccent: return accented;
    case Rewrite::kCyrillic: return cyrillic;
    case Rewrite::kGreek: return greek;
    case Rewrite::kNone: break;
  }
  return none;
}

}  // namespace

std::vector<LanguageSpec> default_languages() {
  return {
      {"en", Script::kLatin, 1, 0.0, Rewrite::kNone, 0.0, 0.0},
      {"xl1", Script::kLatin, 11, 0.20, Rewrite::kLatinShift, 0.70, 0.20},
      {"xl2", Script::kLatinAccented, 12, 0.05, Rewrite::kLatinAccent, 0.45, 0.50},
      {"xc1", Script::kCyrillic, 21, 0.05, Rewrite::kCyrillic, 0.60, 1.0},
      {"xc2", Script::kCyrillic, 22, 0.05, Rewrite::kCyrillic, 0.45, 1.0},
      {"xg", Script::kGreek, 31, 0.05, Rewrite::kGreek, 0.50, 1.0},
      {"xk", Script::kHangul, 41, 0.05, Rewrite::kNone, 0.0, 0.0},
  };
}

const LanguageSpec& find_language(const std::vector<LanguageSpec>& languages, const std::string& id) {
  for (const auto& l : languages) {
    if (l.id == id) return l;
  }
  throw ConfigError("unknown synthetic language: " + id);
}

Generator::Generator(GrammarSpec grammar, std::vector<LanguageSpec> languages)
    : grammar_(grammar), languages_(std::move(languages)) {
  if (languages_.empty() || languages_.front().id != "en") {
    throw ConfigError("synthetic generator: the first language must be the source 'en'");
  }
  if (grammar_.concepts == 0 || grammar_.successors == 0 || grammar_.min_sentence == 0 ||
      grammar_.max_sentence < grammar_.min_sentence || grammar_.max_sentences_per_doc == 0) {
    throw ConfigError("synthetic generator: invalid grammar");
  }
  const std::size_t n = grammar_.concepts;
  std::vector<std::vector<std::string>> source_graphemes(n);
  for (const auto& lang : languages_) {
    const bool is_source = lexicons_.empty();
    const auto& table = rewrites(lang.rewrite);
    std::vector<std::string> lexicon(n);
    std::set<std::string> used;
    std::mt19937_64 class_rng(lang.lexicon_seed * 7919 + 3);
    // 0 fresh, 1 loan, 2 cognate
    std::vector<int> kind(n, 0);
    for (std::size_t c = 0; c < n; ++c) {
      if (is_source) break;
      const double u = uniform01(class_rng);
      if (u < lang.loan_fraction) {
        kind[c] = 1;
      } else if (u < lang.loan_fraction + lang.cognate_fraction && !table.empty()) {
        kind[c] = 2;
      }
    }
    for (std::size_t c = 0; c < n; ++c) {
      if (kind[c] == 1) {
        lexicon[c] = lexicons_.front()[c];
        used.insert(lexicon[c]);
      }
    }
    for (std::size_t c = 0; c < n; ++c) {
      if (kind[c] != 2) continue;
      std::mt19937_64 rng(lang.lexicon_seed * 2000003ULL + c);
      std::string w;
      for (const auto& g : source_graphemes[c]) {
        auto it = table.find(g);
        w += it != table.end() && uniform01(rng) < lang.rewrite_probability ? it->second : g;
      }
      if (used.insert(w).second) {
        lexicon[c] = std::move(w);
      } else {
        kind[c] = 0;
      }
    }
    for (std::size_t c = 0; c < n; ++c) {
      if (kind[c] != 0) continue;
      std::mt19937_64 rng(lang.lexicon_seed * 1000003ULL + c);
      // Frequent concepts get shorter words.
      const std::size_t base = 1 + (3 * c) / n;
      std::vector<std::string> graphemes;
      do {
        graphemes = make_graphemes(lang.script, base + pick(rng, 2), rng);
      } while (!used.insert(join(graphemes)).second);
      lexicon[c] = join(graphemes);
      if (is_source) source_graphemes[c] = std::move(graphemes);
    }
    lexicons_.push_back(std::move(lexicon));
  }

  unigram_cdf_ = zipf_cdf(n, 1.0);
  successor_cdf_ = zipf_cdf(grammar_.successors, 1.0);
  std::mt19937_64 rng(grammar_.seed);
  successors_.resize(n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t k = 0; k < grammar_.successors; ++k) successors_[c].push_back(sample_cdf(unigram_cdf_, rng));
  }
}

std::size_t Generator::language_index(const std::string& lang) const {
  for (std::size_t i = 0; i < languages_.size(); ++i) {
    if (languages_[i].id == lang) return i;
  }
  throw ConfigError("unknown synthetic language: " + lang);
}

const std::string& Generator::word(const std::string& lang, std::size_t concept_id) const {
  return lexicons_.at(language_index(lang)).at(concept_id);
}

std::vector<std::size_t> Generator::latent_document(std::mt19937_64& rng,
                                                    std::vector<std::size_t>& sentence_ends) const {
  std::vector<std::size_t> concepts;
  sentence_ends.clear();
  const std::size_t sentences = 1 + pick(rng, grammar_.max_sentences_per_doc);
  for (std::size_t s = 0; s < sentences; ++s) {
    const std::size_t len =
        grammar_.min_sentence + pick(rng, grammar_.max_sentence - grammar_.min_sentence + 1);
    std::size_t current = sample_cdf(unigram_cdf_, rng);
    concepts.push_back(current);
    for (std::size_t i = 1; i < len; ++i) {
      if (uniform01(rng) < grammar_.follow_probability) {
        current = successors_[current][sample_cdf(successor_cdf_, rng)];
      } else {
        current = sample_cdf(unigram_cdf_, rng);
      }
      concepts.push_back(current);
    }
    sentence_ends.push_back(concepts.size());
  }
  return concepts;
}

std::vector<std::string> Generator::documents(const std::string& lang, std::size_t count, std::uint64_t seed) const {
  const auto& lexicon = lexicons_.at(language_index(lang));
  std::mt19937_64 rng(seed);
  std::vector<std::string> docs;
  docs.reserve(count);
  std::vector<std::size_t> ends;
  for (std::size_t d = 0; d < count; ++d) {
    const auto concepts = latent_document(rng, ends);
    std::string text;
    std::size_t next_end = 0;
    for (std::size_t i = 0; i < concepts.size(); ++i) {
      if (i > 0) text += ' ';
      text += lexicon[concepts[i]];
      if (i + 1 == ends[next_end]) {
        text += '.';
        ++next_end;
      }
    }
    docs.push_back(std::move(text));
  }
  return docs;
}

std::vector<Document> Generator::tagged_documents(const std::string& lang, std::size_t count,
                                                  std::uint64_t seed) const {
  std::vector<Document> out;
  for (auto& text : documents(lang, count, seed)) out.push_back({lang, std::move(text)});
  return out;
}

void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpusOptions& options) {
  Generator gen(options.grammar);
  std::vector<std::string> langs = options.languages;
  if (langs.empty()) {
    for (const auto& l : gen.languages()) langs.push_back(l.id);
  }
  std::filesystem::create_directories(dir);
  nlohmann::json train = nlohmann::json::array();
  nlohmann::json eval = nlohmann::json::array();
  const std::uint64_t eval_seed = options.seed * 31 + 7;
  for (std::size_t i = 0; i < langs.size(); ++i) {
    const auto& lang = langs[i];
    std::string body;
    for (const auto& doc : gen.documents(lang, options.train_docs, options.seed + 101 * (i + 1))) {
      body += doc;
      body += '\n';
    }
    write_file_atomic(dir / (lang + ".train.txt"), body);
    body.clear();
    // Same seed for every language: the eval sets are parallel.
    for (const auto& doc : gen.documents(lang, options.eval_docs, eval_seed)) {
      body += doc;
      body += '\n';
    }
    write_file_atomic(dir / (lang + ".eval.txt"), body);
    train.push_back({{"lang", lang}, {"paths", {lang + ".train.txt"}}});
    eval.push_back({{"lang", lang}, {"paths", {lang + ".eval.txt"}}});
  }
  write_file_atomic(dir / "manifest.json", train.dump(2) + "\n");
  write_file_atomic(dir / "eval_manifest.json", eval.dump(2) + "\n");
}

}  // namespace vocadt::textcorpus::synthetic

#include "vocadt/textcorpus.hpp"

#include <cmath>
#include <set>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include "vocadt/common.hpp"

namespace vocadt::textcorpus {

namespace {

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

bool is_blank(std::string_view line) {
  const auto* s = reinterpret_cast<const std::uint8_t*>(line.data());
  const auto length = static_cast<std::int32_t>(line.size());
  std::int32_t i = 0;
  while (i < length) {
    UChar32 c;
    U8_NEXT(s, i, length, c);
    if (c < 0 || !u_isUWhiteSpace(c)) return false;
  }
  return true;
}

// Unicode White_Space, decoded leniently: invalid bytes are not space.
bool strip_trailing_space(std::string& line) {
  auto* s = reinterpret_cast<const std::uint8_t*>(line.data());
  auto end = static_cast<std::int32_t>(line.size());
  bool changed = false;
  while (end > 0) {
    std::int32_t i = end;
    UChar32 c;
    U8_PREV(s, 0, i, c);
    if (c < 0 || !u_isUWhiteSpace(c)) break;
    end = i;
    changed = true;
  }
  line.resize(static_cast<std::size_t>(end));
  return changed;
}

}  // namespace

DocUnit parse_doc_unit(std::string_view name) {
  if (name == "line") return DocUnit::kLine;
  if (name == "para") return DocUnit::kPara;
  throw ConfigError("unknown doc unit '" + std::string(name) + "' (expected line or para)");
}

std::string_view to_string(DocUnit unit) { return unit == DocUnit::kLine ? "line" : "para"; }

double MixtureWeights::at(const std::string& lang) const {
  auto it = weights.find(lang);
  if (it == weights.end()) {
    throw ValidationError("mixture has no weight for language '" + lang + "'");
  }
  return it->second;
}

void MixtureWeights::validate(const std::vector<CorpusSpec>& specs) const {
  if (weights.size() != specs.size()) {
    throw ValidationError("mixture covers " + std::to_string(weights.size()) + " languages, manifest has " +
                          std::to_string(specs.size()));
  }
  double total = 0.0;
  for (const auto& spec : specs) {
    const double p = at(spec.language_id);
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ValidationError("mixture weight out of [0,1] for '" + spec.language_id + "'");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ValidationError("mixture weights sum to " + std::to_string(total));
  }
}

std::optional<Document> VectorSource::next() {
  if (pos_ >= docs_.size()) return std::nullopt;
  return docs_[pos_++];
}

std::vector<Document> drain(DocumentSource& source) {
  std::vector<Document> out;
  while (auto doc = source.next()) out.push_back(std::move(*doc));
  return out;
}

std::size_t count_words(std::string_view text) {
  const auto* s = reinterpret_cast<const std::uint8_t*>(text.data());
  const auto length = static_cast<std::int32_t>(text.size());
  std::size_t words = 0;
  bool in_word = false;
  std::int32_t i = 0;
  while (i < length) {
    UChar32 c;
    U8_NEXT(s, i, length, c);
    const bool space = c >= 0 && u_isUWhiteSpace(c);
    if (!space && !in_word) ++words;
    in_word = !space;
  }
  return words;
}

std::string normalize_text(std::string_view raw) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) {
    throw Error(std::string("ICU NFC unavailable: ") + u_errorName(status));
  }
  const auto source = icu::UnicodeString::fromUTF8(icu::StringPiece(raw.data(), static_cast<std::int32_t>(raw.size())));
  icu::UnicodeString composed = nfc->normalize(source, status);
  if (U_FAILURE(status)) {
    throw Error(std::string("NFC normalization failed: ") + u_errorName(status));
  }
  std::string text;
  composed.toUTF8String(text);

  std::string out;
  out.reserve(text.size());
  bool has_content = false;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    const bool last = nl == std::string::npos;
    std::string line = text.substr(start, last ? std::string::npos : nl - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    strip_trailing_space(line);
    if (!line.empty()) has_content = true;
    out += line;
    if (last) break;
    out += '\n';
    start = nl + 1;
  }
  if (!has_content) return {};
  return out;
}

std::vector<std::string> split_documents(std::string_view body, DocUnit unit) {
  std::vector<std::string> docs;
  std::string block;
  std::size_t start = 0;
  while (start < body.size()) {
    std::size_t nl = body.find('\n', start);
    if (nl == std::string_view::npos) nl = body.size();
    std::string_view line = body.substr(start, nl - start);
    start = nl + 1;
    if (unit == DocUnit::kLine) {
      docs.emplace_back(line);
      continue;
    }
    if (is_blank(line)) {
      if (!block.empty()) docs.push_back(std::move(block));
      block.clear();
    } else {
      if (!block.empty()) block += '\n';
      block += line;
    }
  }
  if (!block.empty()) docs.push_back(std::move(block));
  return docs;
}

std::vector<std::string> read_documents(const std::vector<std::filesystem::path>& paths, DocUnit unit,
                                        std::size_t* skipped_invalid) {
  std::vector<std::string> out;
  std::size_t skipped = 0;
  for (const auto& path : paths) {
    for (auto& raw : split_documents(read_file(path), unit)) {
      if (!is_valid_utf8(raw)) {
        ++skipped;
        continue;
      }
      auto doc = normalize_text(raw);
      if (!doc.empty()) out.push_back(std::move(doc));
    }
  }
  if (skipped > 0) spdlog::warn("skipped {} invalid UTF-8 documents", skipped);
  if (skipped_invalid) *skipped_invalid = skipped;
  return out;
}

void validate_specs(const std::vector<CorpusSpec>& specs) {
  std::set<std::string> seen;
  for (const auto& spec : specs) {
    if (spec.language_id.empty()) throw ValidationError("manifest entry with empty language id");
    if (!seen.insert(spec.language_id).second) {
      throw ValidationError("duplicate language id in manifest: " + spec.language_id);
    }
  }
}

std::vector<CorpusSpec> load_manifest(const std::filesystem::path& path, DocUnit unit) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corpus manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw FormatError("corpus manifest must be a JSON list: " + path.string());
  const auto base = path.parent_path();
  std::vector<CorpusSpec> specs;
  for (const auto& entry : j) {
    CorpusSpec spec;
    try {
      spec.language_id = entry.at("lang").get<std::string>();
      for (const auto& p : entry.at("paths")) {
        std::filesystem::path source = p.get<std::string>();
        if (source.is_relative()) source = base / source;
        if (!std::filesystem::exists(source)) {
          throw ValidationError("corpus source does not exist: " + source.string());
        }
        spec.sources.push_back(source);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("corpus manifest " + path.string() + ": " + e.what());
    }
    if (entry.contains("bytes")) {
      spec.byte_count = entry["bytes"].get<std::uint64_t>();
    } else {
      for (const auto& doc : read_documents(spec.sources, unit)) spec.byte_count += doc.size();
    }
    specs.push_back(std::move(spec));
  }
  validate_specs(specs);
  return specs;
}

MixtureWeights compute_mixture(const std::vector<CorpusSpec>& specs, double temperature) {
  if (specs.empty()) throw ValidationError("compute_mixture: no languages");
  if (!(temperature > 0.0)) throw ValidationError("compute_mixture: temperature must be positive");
  validate_specs(specs);

  MixtureWeights out;
  const std::size_t n = specs.size();
  if (n == 1) {
    out.weights[specs.front().language_id] = 1.0;
    return out;
  }
  std::size_t english = 0;
  double other_bytes = 0.0;
  for (const auto& spec : specs) {
    if (spec.language_id == "en") {
      ++english;
    } else {
      other_bytes += static_cast<double>(spec.byte_count);
    }
  }
  if (english != 1) throw ValidationError("compute_mixture: exactly one 'en' corpus is required");
  if (other_bytes <= 0.0) throw ValidationError("compute_mixture: non-English corpora are empty");

  const double exponent = 1.0 / temperature;
  std::vector<double> scaled;
  double scaled_total = 0.0;
  for (const auto& spec : specs) {
    if (spec.language_id == "en") continue;
    const double q = static_cast<double>(spec.byte_count) / other_bytes;
    scaled.push_back(std::pow(q, exponent));
    scaled_total += scaled.back();
  }
  const double rest = static_cast<double>(n - 1) / static_cast<double>(n);
  std::size_t k = 0;
  for (const auto& spec : specs) {
    if (spec.language_id == "en") {
      out.weights["en"] = 1.0 / static_cast<double>(n);
    } else {
      out.weights[spec.language_id] = rest * scaled[k++] / scaled_total;
    }
  }
  return out;
}

// Sequential reader over one language's files, re-looping at end of input.
class DocumentStream::LanguageReader {
 public:
  LanguageReader(const CorpusSpec& spec, DocUnit unit) : spec_(spec), unit_(unit) {}

  std::string next_valid() {
    for (;;) {
      auto raw = next_raw();
      if (!raw) {
        if (!produced_in_pass_) {
          throw ValidationError("no usable documents for language '" + spec_.language_id + "'");
        }
        produced_in_pass_ = false;
        file_index_ = 0;
        in_.close();
        in_.clear();
        continue;
      }
      if (!is_valid_utf8(*raw)) {
        ++skipped_invalid_;
        continue;
      }
      auto doc = normalize_text(*raw);
      if (doc.empty()) continue;
      produced_in_pass_ = true;
      return doc;
    }
  }

  std::size_t skipped_invalid() const { return skipped_invalid_; }

 private:
  void open_current() {
    in_.close();
    in_.clear();
    if (file_index_ < spec_.sources.size()) {
      in_.open(spec_.sources[file_index_], std::ios::binary);
      if (!in_) throw ValidationError("cannot open corpus source: " + spec_.sources[file_index_].string());
    }
  }

  // Reads the next line across files; `new_file` reports a file boundary.
  bool read_line(std::string& line, bool& new_file) {
    new_file = false;
    for (;;) {
      if (!in_.is_open()) {
        if (file_index_ >= spec_.sources.size()) return false;
        open_current();
        new_file = true;
      }
      if (std::getline(in_, line)) return true;
      in_.close();
      in_.clear();
      ++file_index_;
    }
  }

  std::optional<std::string> next_raw() {
    std::string line;
    bool new_file = false;
    if (unit_ == DocUnit::kLine) {
      if (!read_line(line, new_file)) return std::nullopt;
      return line;
    }
    std::string block;
    for (;;) {
      if (pending_) {
        line = std::move(*pending_);
        pending_.reset();
        new_file = false;
      } else if (!read_line(line, new_file)) {
        break;
      }
      // Blocks never span files.
      if (new_file && !block.empty()) {
        pending_ = std::move(line);
        return block;
      }
      if (is_blank(line)) {
        if (!block.empty()) return block;
        continue;
      }
      if (!block.empty()) block += '\n';
      block += line;
    }
    if (!block.empty()) return block;
    return std::nullopt;
  }

  const CorpusSpec& spec_;
  DocUnit unit_;
  std::ifstream in_;
  std::size_t file_index_ = 0;
  bool produced_in_pass_ = false;
  std::size_t skipped_invalid_ = 0;
  std::optional<std::string> pending_;
};

DocumentStream::DocumentStream(std::vector<CorpusSpec> specs, MixtureWeights weights, SamplingOptions options)
    : specs_(std::move(specs)), options_(std::move(options)), rng_(options_.seed) {
  validate_specs(specs_);
  weights.validate(specs_);
  if (options_.token_budget == 0) throw ValidationError("sample_documents: token budget must be positive");
  if (!(options_.keep_probability > 0.0 && options_.keep_probability <= 1.0)) {
    throw ValidationError("sample_documents: keep probability must be in (0,1]");
  }
  if (!options_.counter) options_.counter = count_words;
  double acc = 0.0;
  for (const auto& spec : specs_) {
    acc += weights.at(spec.language_id);
    cumulative_.push_back(acc);
    readers_.push_back(std::make_unique<LanguageReader>(spec, options_.doc_unit));
  }
}

DocumentStream::~DocumentStream() = default;
DocumentStream::DocumentStream(DocumentStream&&) noexcept = default;
DocumentStream& DocumentStream::operator=(DocumentStream&&) noexcept = default;

std::optional<Document> DocumentStream::next() {
  if (tokens_emitted_ >= options_.token_budget) return std::nullopt;
  const double u = uniform01(rng_) * cumulative_.back();
  std::size_t lang = 0;
  while (lang + 1 < cumulative_.size() && u >= cumulative_[lang]) ++lang;
  // Skip languages with zero mass that the floating-point walk could land on.
  while (lang > 0 && cumulative_[lang] == cumulative_[lang - 1]) --lang;

  auto& reader = *readers_[lang];
  std::string text;
  do {
    text = reader.next_valid();
  } while (uniform01(rng_) >= options_.keep_probability);

  tokens_emitted_ += options_.counter(text);
  return Document{specs_[lang].language_id, std::move(text)};
}

std::size_t DocumentStream::skipped_invalid() const {
  std::size_t total = 0;
  for (const auto& r : readers_) total += r->skipped_invalid();
  return total;
}

DocumentStream sample_documents(const std::vector<CorpusSpec>& specs, const MixtureWeights& weights,
                                std::uint64_t seed, std::uint64_t token_budget, TokenCounter counter,
                                DocUnit unit) {
  SamplingOptions options;
  options.seed = seed;
  options.token_budget = token_budget;
  options.counter = std::move(counter);
  options.doc_unit = unit;
  return DocumentStream(specs, weights, std::move(options));
}

}  // namespace vocadt::textcorpus

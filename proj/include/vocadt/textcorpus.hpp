#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace vocadt::textcorpus {

enum class DocUnit { kLine, kPara };

DocUnit parse_doc_unit(std::string_view name);
std::string_view to_string(DocUnit unit);

struct CorpusSpec {
  std::string language_id;
  std::vector<std::filesystem::path> sources;
  std::uint64_t byte_count = 0;
};

// Language id -> sampling probability.
struct MixtureWeights {
  std::map<std::string, double> weights;

  double at(const std::string& lang) const;
  // Throws ValidationError unless the weights are a distribution over
  // exactly the languages of `specs`.
  void validate(const std::vector<CorpusSpec>& specs) const;
};

struct Document {
  std::string lang;
  std::string text;

  bool operator==(const Document&) const = default;
};

/// Pull-based document source. Consumed from one thread at a time.
class DocumentSource {
 public:
  virtual ~DocumentSource() = default;
  virtual std::optional<Document> next() = 0;
};

class VectorSource final : public DocumentSource {
 public:
  explicit VectorSource(std::vector<Document> docs) : docs_(std::move(docs)) {}
  std::optional<Document> next() override;

 private:
  std::vector<Document> docs_;
  std::size_t pos_ = 0;
};

std::vector<Document> drain(DocumentSource& source);

// Token counter used to enforce the sampling budget. The default counts
// whitespace-delimited words.
using TokenCounter = std::function<std::size_t(std::string_view)>;
std::size_t count_words(std::string_view text);

/// NFC normalization, CRLF -> LF, trailing whitespace stripped per line.
/// Returns an empty string for documents that should be dropped.
std::string normalize_text(std::string_view raw);

/// Splits a file body into documents: one per line, or one per
/// blank-line-separated block.
std::vector<std::string> split_documents(std::string_view body, DocUnit unit);

/// Reads every valid, non-empty, normalized document of the given files.
/// Invalid UTF-8 documents are skipped and counted in `skipped_invalid`.
std::vector<std::string> read_documents(const std::vector<std::filesystem::path>& paths,
                                        DocUnit unit, std::size_t* skipped_invalid = nullptr);

/// Loads a corpus manifest: [{"lang": .., "paths": [..], "bytes": ..}, ..].
/// Relative paths resolve against the manifest's directory. Missing byte
/// counts are computed from the usable (normalized, valid) text.
std::vector<CorpusSpec> load_manifest(const std::filesystem::path& path, DocUnit unit);
void validate_specs(const std::vector<CorpusSpec>& specs);

/// English anchored at 1/n, remaining mass split by temperature-scaled
/// byte shares.
MixtureWeights compute_mixture(const std::vector<CorpusSpec>& specs, double temperature);

struct SamplingOptions {
  std::uint64_t seed = 0;
  std::uint64_t token_budget = 0;
  DocUnit doc_unit = DocUnit::kLine;
  // Per-document Bernoulli acceptance while walking a source file.
  double keep_probability = 0.5;
  TokenCounter counter;  // defaults to count_words
};

/// Mixed document stream. Each draw picks a language from the mixture,
/// then advances that language's sequential reader, accepting each
/// document with probability keep_probability and re-looping the files at
/// end of input. Stops once the cumulative token count reaches the budget.
class DocumentStream final : public DocumentSource {
 public:
  DocumentStream(std::vector<CorpusSpec> specs, MixtureWeights weights, SamplingOptions options);
  ~DocumentStream() override;
  DocumentStream(DocumentStream&&) noexcept;
  DocumentStream& operator=(DocumentStream&&) noexcept;

  std::optional<Document> next() override;

  std::uint64_t tokens_emitted() const { return tokens_emitted_; }
  std::size_t skipped_invalid() const;

 private:
  class LanguageReader;

  std::vector<CorpusSpec> specs_;
  std::vector<double> cumulative_;
  std::vector<std::unique_ptr<LanguageReader>> readers_;
  SamplingOptions options_;
  std::mt19937_64 rng_;
  std::uint64_t tokens_emitted_ = 0;
};

DocumentStream sample_documents(const std::vector<CorpusSpec>& specs, const MixtureWeights& weights,
                                std::uint64_t seed, std::uint64_t token_budget,
                                TokenCounter counter = {}, DocUnit unit = DocUnit::kLine);

}  // namespace vocadt::textcorpus

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vocadt/tinylm.hpp"
#include "vocadt/tokenizer.hpp"

namespace vocadt::evalmetrics {

/// Language -> documents. Every tokenizer under comparison sees the same text.
using EvalSet = std::map<std::string, std::vector<std::string>>;

/// Exact token counts per language.
std::map<std::string, std::size_t> count_tokens(const tokenizer::TokenizerModel& tok, const EvalSet& eval);

/// UTF-8 bytes per language.
std::map<std::string, std::size_t> count_bytes(const EvalSet& eval);

/// (count_new - count_base) / count_base.
double reduction_rate(std::size_t count_new, std::size_t count_base);

struct LanguageFragmentation {
  std::size_t bytes = 0;
  std::map<std::string, std::size_t> token_count;     // by tokenizer name
  std::map<std::string, double> tokens_per_byte;      // by tokenizer name
  std::map<std::string, double> reduction_rate;       // non-baseline tokenizers
};

struct FragmentationReport {
  std::string baseline;
  std::map<std::string, LanguageFragmentation> languages;
};

FragmentationReport fragmentation(const std::map<std::string, const tokenizer::TokenizerModel*>& tokenizers,
                                  const std::string& baseline, const EvalSet& eval);

nlohmann::json to_json(const FragmentationReport& r);

/// (score_new - score_base) / score_base. Throws ValidationError on a zero baseline.
double increase_rate(double score_new, double score_base);

/// Total next-token NLL in nats over every predicted position of the windows.
using WindowScorer = std::function<double(const tinylm::TokenBatch& windows)>;

struct QualityStats {
  double nll_nats = 0;
  std::size_t predicted = 0;
  std::size_t bytes = 0;

  double bits_per_byte() const;
  double token_perplexity() const;
};

/// Each document is encoded on its own, prefixed with BOS and cut into
/// evaluation windows; NLL is accumulated over all of them.
QualityStats score_documents(const WindowScorer& scorer, const tokenizer::TokenizerModel& tok,
                             const std::vector<std::string>& documents, std::size_t context_len);

/// Scorer backed by a checkpoint; the vocabulary size must match the tokenizer.
WindowScorer checkpoint_scorer(const tinylm::ModelCheckpoint& ckpt);

double bits_per_byte(const tinylm::ModelCheckpoint& ckpt, const tokenizer::TokenizerModel& tok,
                     const std::vector<std::string>& documents);

/// Forward FLOPs per token:
///   2 * (n_layers * (4 h^2 + 2 h ff) + h * vocab) + 4 * n_layers * context_len * h
double estimate_flops_per_token(const tinylm::ModelConfig& config);
std::string flops_formula();

enum class ReportFormat { kJson, kCsv };

struct Report {
  std::string config_hash;
  std::map<std::string, std::uint64_t> seeds;
  std::string build_id;
  std::vector<std::string> columns;  // stable order
  // language -> column -> value; absent cells stay absent
  std::map<std::string, std::map<std::string, double>> rows;
  nlohmann::json extra = nlohmann::json::object();

  bool operator==(const Report&) const = default;
};

inline constexpr int kReportVersion = 1;

nlohmann::json to_json(const Report& r);
Report report_from_json(const nlohmann::json& j);
std::string to_csv(const Report& r);

/// Writes the report; throws ValidationError when the path is not writable.
void emit_report(const Report& r, const std::filesystem::path& path, ReportFormat format);
Report load_report(const std::filesystem::path& path);

}  // namespace vocadt::evalmetrics

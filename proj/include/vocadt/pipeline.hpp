#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vocadt/adapter.hpp"
#include "vocadt/synthetic.hpp"
#include "vocadt/textcorpus.hpp"
#include "vocadt/tinylm.hpp"
#include "vocadt/tokenizer.hpp"

// Stage orchestration: every stage reads artifacts from the output
// directory, writes its own, and records a run manifest with input hashes
// so an unchanged stage is skipped on rerun.
namespace vocadt::pipeline {

struct StageTraining {
  std::size_t steps = 0;
  std::size_t batch_size = 8;
  std::size_t seq_len = 128;
  tinylm::OptimizerConfig optimizer;
};

struct PipelineConfig {
  std::filesystem::path config_path;
  std::string name;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  textcorpus::DocUnit doc_unit = textcorpus::DocUnit::kLine;

  std::string source_language = "en";
  std::string group_name;
  std::string group_mode = "mono";  // mono: one target language; multi: several
  std::vector<std::string> target_languages;

  // Either a bundled synthetic corpus written by synth-corpus, or manifests.
  std::optional<textcorpus::synthetic::ToyCorpusOptions> synthetic;
  std::filesystem::path manifest;
  std::filesystem::path eval_manifest;

  double temperature = 2.0;
  double keep_probability = 0.5;
  std::uint64_t source_words = 400000;
  std::uint64_t mixture_words = 400000;

  std::size_t old_vocab_size = 2000;
  std::size_t new_vocab_size = 3000;
  std::size_t per_language_token_cap = 0;

  tinylm::ModelConfig model;
  StageTraining pretrain;
  adapter::TrainConfig adapter;
  StageTraining finetune;
  std::size_t eval_max_docs = 200;

  /// Source followed by the target languages.
  std::vector<std::string> languages() const;
  void validate() const;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  std::optional<textcorpus::DocUnit> doc_unit;
};

/// Throws ConfigError on malformed or inconsistent configs.
PipelineConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {});
nlohmann::json to_json(const PipelineConfig& c);
std::string config_hash(const PipelineConfig& c);

/// Stage names in execution order.
const std::vector<std::string>& stage_names();

/// Deterministic per-purpose seed derived from the global seed.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view label);

/// Ids of all documents, each followed by EOS.
std::vector<TokenId> encode_documents(const tokenizer::TokenizerModel& tok, const std::vector<std::string>& docs);

void write_jsonl(const std::filesystem::path& path, const std::vector<textcorpus::Document>& docs);
std::vector<textcorpus::Document> read_jsonl(const std::filesystem::path& path);

enum class StageStatus { kRan, kSkipped };

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config);

  const PipelineConfig& config() const { return config_; }
  std::filesystem::path artifact(std::string_view relative) const;

  /// Throws ValidationError naming the first missing input artifact.
  StageStatus run_stage(const std::string& name, bool force = false);

  /// Runs stages in order, stopping after `stop_after` when non-empty.
  void run(const std::string& stop_after = {}, bool force = false);

 private:
  PipelineConfig config_;
};

}  // namespace vocadt::pipeline

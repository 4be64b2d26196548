#include "vocadt/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <spdlog/spdlog.h>

#include "vocadt/evalmetrics.hpp"
#include "vocadt/vocabmap.hpp"

namespace vocadt::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) && !j.at(key).is_null() ? j.at(key).get<T>() : fallback;
}

StageTraining training_from_json(const json& j, StageTraining d) {
  d.steps = get_or(j, "steps", d.steps);
  d.batch_size = get_or(j, "batch_size", d.batch_size);
  d.seq_len = get_or(j, "seq_len", d.seq_len);
  if (j.contains("optimizer")) {
    json merged = tinylm::to_json(d.optimizer);
    merged.update(j.at("optimizer"));
    d.optimizer = tinylm::optimizer_from_json(merged);
  }
  return d;
}

json to_json(const StageTraining& t) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"seq_len", t.seq_len},
          {"optimizer", tinylm::to_json(t.optimizer)}};
}

json synthetic_json(const textcorpus::synthetic::ToyCorpusOptions& o) {
  return {{"languages", o.languages},
          {"train_docs", o.train_docs},
          {"eval_docs", o.eval_docs},
          {"seed", o.seed}};
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::string rel(const PipelineConfig& c, const fs::path& p) {
  std::error_code ec;
  auto r = fs::relative(p, c.out_dir, ec);
  if (ec || r.empty() || r.native().starts_with("..")) return p.string();
  return r.string();
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string to_json_line(const tinylm::StepLog& s) {
  return json{{"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"grad_norm", s.grad_norm}}.dump();
}

std::string to_json_line(const adapter::TrainStepReport& r) { return adapter::to_json(r).dump(); }

template <typename Log>
void write_log(const fs::path& path, const std::vector<Log>& logs) {
  std::string body;
  for (const auto& l : logs) body += to_json_line(l) + "\n";
  write_file_atomic(path, body);
}

std::vector<std::string> texts(const std::vector<textcorpus::Document>& docs) {
  std::vector<std::string> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(d.text);
  return out;
}

std::vector<textcorpus::CorpusSpec> select_specs(const std::vector<textcorpus::CorpusSpec>& all,
                                                 const std::vector<std::string>& langs, const fs::path& manifest) {
  std::vector<textcorpus::CorpusSpec> out;
  for (const auto& lang : langs) {
    auto it = std::find_if(all.begin(), all.end(), [&](const auto& s) { return s.language_id == lang; });
    if (it == all.end()) throw ValidationError(manifest.string() + ": no corpus for language '" + lang + "'");
    out.push_back(*it);
  }
  return out;
}

evalmetrics::EvalSet load_eval_set(const PipelineConfig& c) {
  const auto specs = select_specs(textcorpus::load_manifest(c.eval_manifest, c.doc_unit), c.languages(), c.eval_manifest);
  evalmetrics::EvalSet eval;
  for (const auto& s : specs) {
    auto docs = textcorpus::read_documents(s.sources, c.doc_unit);
    if (docs.size() > c.eval_max_docs) docs.resize(c.eval_max_docs);
    if (docs.empty()) throw ValidationError("no evaluation documents for language '" + s.language_id + "'");
    eval[s.language_id] = std::move(docs);
  }
  return eval;
}

std::vector<fs::path> manifest_sources(const fs::path& manifest, textcorpus::DocUnit unit) {
  std::vector<fs::path> out{manifest};
  if (!fs::exists(manifest)) return out;
  for (const auto& spec : textcorpus::load_manifest(manifest, unit)) {
    out.insert(out.end(), spec.sources.begin(), spec.sources.end());
  }
  return out;
}

adapter::AdaptedModel<float> adapted(const tinylm::ModelCheckpoint& base, const adapter::AdapterCheckpoint& a,
                                     const std::string& vocab_hash) {
  return {base.config, base.params, a.a_in, a.a_out, vocab_hash};
}

}  // namespace

std::vector<std::string> PipelineConfig::languages() const {
  std::vector<std::string> out{source_language};
  out.insert(out.end(), target_languages.begin(), target_languages.end());
  return out;
}

void PipelineConfig::validate() const {
  if (target_languages.empty()) throw ConfigError("config: group needs at least one target language");
  if (group_mode != "mono" && group_mode != "multi") throw ConfigError("config: group mode must be 'mono' or 'multi'");
  if (group_mode == "mono" && target_languages.size() != 1) {
    throw ConfigError("config: a mono group has exactly one target language");
  }
  for (const auto& l : target_languages) {
    if (l == source_language) throw ConfigError("config: target languages must differ from the source");
  }
  if (old_vocab_size < tokenizer::kMinVocabSize || new_vocab_size < tokenizer::kMinVocabSize) {
    throw ConfigError("config: vocabulary sizes must be at least " + std::to_string(tokenizer::kMinVocabSize));
  }
  if (!(temperature > 0.0)) throw ConfigError("config: temperature must be positive");
  if (!(keep_probability > 0.0 && keep_probability <= 1.0)) throw ConfigError("config: keep_probability in (0, 1]");
  auto model_check = model;
  model_check.vocab_size = old_vocab_size;
  try {
    model_check.validate();
    adapter.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto* t : {&pretrain, &finetune}) {
    if (t->batch_size == 0 || t->seq_len < 2 || t->seq_len > model.context_len) {
      throw ConfigError("config: training seq_len must be in [2, context_len] and batch_size positive");
    }
  }
  if (adapter.seq_len > model.context_len) throw ConfigError("config: adapter seq_len exceeds context_len");
  if (!synthetic) {
    for (const auto& p : {manifest, eval_manifest}) {
      if (!fs::exists(p)) throw ConfigError("config: corpus manifest not found: " + p.string());
    }
  }
}

PipelineConfig load_config(const fs::path& path, const Overrides& overrides) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  PipelineConfig c;
  c.config_path = path;
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  try {
    c.name = get_or<std::string>(j, "name", path.stem().string());
    c.seed = get_or<std::uint64_t>(j, "seed", 0);
    c.out_dir = resolve(base, get_or<std::string>(j, "out_dir", "runs/" + c.name));
    c.doc_unit = textcorpus::parse_doc_unit(get_or<std::string>(j, "doc_unit", "line"));
    c.source_language = get_or<std::string>(j, "source_language", "en");

    const json group = j.value("group", json::object());
    c.group_name = get_or<std::string>(group, "name", c.name);
    c.group_mode = get_or<std::string>(group, "mode", "mono");
    c.target_languages = get_or<std::vector<std::string>>(group, "languages", {});

    const json corpus = j.value("corpus", json::object());
    if (corpus.contains("synthetic")) {
      const json& s = corpus.at("synthetic");
      textcorpus::synthetic::ToyCorpusOptions o;
      o.languages = c.languages();
      o.train_docs = get_or(s, "train_docs", o.train_docs);
      o.eval_docs = get_or(s, "eval_docs", o.eval_docs);
      o.seed = get_or(s, "seed", o.seed);
      c.synthetic = o;
    } else {
      c.manifest = resolve(base, corpus.at("manifest").get<std::string>());
      c.eval_manifest = resolve(base, corpus.at("eval_manifest").get<std::string>());
    }

    const json mixture = j.value("mixture", json::object());
    c.temperature = get_or(mixture, "temperature", c.temperature);
    c.keep_probability = get_or(mixture, "keep_probability", c.keep_probability);
    c.source_words = get_or(mixture, "source_words", c.source_words);
    c.mixture_words = get_or(mixture, "mixture_words", c.mixture_words);

    const json vocab = j.value("vocab", json::object());
    c.old_vocab_size = get_or(vocab, "old_size", c.old_vocab_size);
    c.new_vocab_size = get_or(vocab, "new_size", c.new_vocab_size);
    c.per_language_token_cap = get_or(vocab, "per_language_token_cap", c.per_language_token_cap);

    c.model = tinylm::config_from_json(j.value("model", json::object()));
    c.pretrain = training_from_json(j.value("pretrain", json::object()),
                                    StageTraining{.steps = 1000, .batch_size = 16, .seq_len = 128, .optimizer = {.lr = 3e-3}});
    c.adapter = adapter::train_config_from_json(j.value("adapter", json::object()));
    c.finetune = training_from_json(j.value("finetune", json::object()), StageTraining{.steps = 0, .batch_size = 8, .seq_len = 128, .optimizer = {}});
    c.eval_max_docs = get_or(j.value("eval", json::object()), "max_docs_per_language", c.eval_max_docs);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.out_dir) c.out_dir = *overrides.out_dir;
  if (overrides.doc_unit) c.doc_unit = *overrides.doc_unit;
  if (c.synthetic) {
    c.manifest = c.out_dir / "corpus" / "manifest.json";
    c.eval_manifest = c.out_dir / "corpus" / "eval_manifest.json";
  }
  c.validate();
  return c;
}

json to_json(const PipelineConfig& c) {
  json corpus = c.synthetic ? json{{"synthetic", synthetic_json(*c.synthetic)}}
                            : json{{"manifest", c.manifest.string()}, {"eval_manifest", c.eval_manifest.string()}};
  json model = tinylm::to_json(c.model);
  model.erase("vocab_size");
  return {{"name", c.name},
          {"seed", c.seed},
          {"doc_unit", std::string(textcorpus::to_string(c.doc_unit))},
          {"source_language", c.source_language},
          {"group", {{"name", c.group_name}, {"mode", c.group_mode}, {"languages", c.target_languages}}},
          {"corpus", corpus},
          {"mixture",
           {{"temperature", c.temperature},
            {"keep_probability", c.keep_probability},
            {"source_words", c.source_words},
            {"mixture_words", c.mixture_words}}},
          {"vocab",
           {{"old_size", c.old_vocab_size},
            {"new_size", c.new_vocab_size},
            {"per_language_token_cap", c.per_language_token_cap}}},
          {"model", model},
          {"pretrain", to_json(c.pretrain)},
          {"adapter", adapter::to_json(c.adapter)},
          {"finetune", to_json(c.finetune)},
          {"eval", {{"max_docs_per_language", c.eval_max_docs}}}};
}

std::string config_hash(const PipelineConfig& c) { return sha256_hex(to_json(c).dump()); }

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"synth-corpus", "mix-corpus", "train-vocab", "pretrain",
                                              "init-adapter", "train-adapter", "merge",     "finetune",
                                              "eval-frag",    "eval-bpb",      "report"};
  return names;
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view label) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : label) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return splitmix64(global_seed ^ splitmix64(h));
}

std::vector<TokenId> encode_documents(const tokenizer::TokenizerModel& tok, const std::vector<std::string>& docs) {
  std::vector<TokenId> ids;
  const TokenId eos = tok.vocabulary().specials().eos;
  for (const auto& d : docs) {
    const auto piece = tok.encode(d);
    ids.insert(ids.end(), piece.begin(), piece.end());
    ids.push_back(eos);
  }
  return ids;
}

void write_jsonl(const fs::path& path, const std::vector<textcorpus::Document>& docs) {
  std::string body;
  for (const auto& d : docs) body += json{{"lang", d.lang}, {"text", d.text}}.dump() + "\n";
  write_file_atomic(path, body);
}

std::vector<textcorpus::Document> read_jsonl(const fs::path& path) {
  std::vector<textcorpus::Document> docs;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      docs.push_back({j.at("lang").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return docs;
}

struct Stage {
  std::string name;
  std::function<std::vector<fs::path>(const PipelineConfig&)> inputs;
  std::function<std::vector<fs::path>(const PipelineConfig&)> outputs;
  std::function<json(const PipelineConfig&)> settings;
  std::function<void(const PipelineConfig&, const std::map<std::string, std::string>&)> run;
};

namespace {

using Hashes = std::map<std::string, std::string>;

fs::path out(const PipelineConfig& c, std::string_view p) { return c.out_dir / fs::path(p); }

json inputs_json(const Hashes& h) { return json(h); }

void run_synth(const PipelineConfig& c, const Hashes&) {
  if (!c.synthetic) return;
  textcorpus::synthetic::write_toy_corpus(c.manifest.parent_path(), *c.synthetic);
}

void run_mix(const PipelineConfig& c, const Hashes&) {
  const auto all = textcorpus::load_manifest(c.manifest, c.doc_unit);
  const auto source_specs = select_specs(all, {c.source_language}, c.manifest);
  const auto mixture_specs = select_specs(all, c.languages(), c.manifest);

  textcorpus::SamplingOptions opts;
  opts.doc_unit = c.doc_unit;
  opts.keep_probability = c.keep_probability;

  opts.seed = derive_seed(c.seed, "mix.source");
  opts.token_budget = c.source_words;
  textcorpus::DocumentStream source(source_specs, textcorpus::compute_mixture(source_specs, c.temperature), opts);
  const auto source_docs = textcorpus::drain(source);

  const auto weights = textcorpus::compute_mixture(mixture_specs, c.temperature);
  opts.seed = derive_seed(c.seed, "mix.mixture");
  opts.token_budget = c.mixture_words;
  textcorpus::DocumentStream mixture(mixture_specs, weights, opts);
  const auto mixture_docs = textcorpus::drain(mixture);

  write_jsonl(out(c, "mix/source.jsonl"), source_docs);
  write_jsonl(out(c, "mix/mixture.jsonl"), mixture_docs);
  json counts = json::object();
  for (const auto& d : mixture_docs) counts[d.lang] = counts.value(d.lang, 0) + 1;
  write_json(out(c, "mix/weights.json"), {{"temperature", c.temperature}, {"weights", weights.weights},
                                          {"mixture_documents", counts},
                                          {"source_documents", source_docs.size()},
                                          {"skipped_invalid", source.skipped_invalid() + mixture.skipped_invalid()}});
  spdlog::info("mix-corpus: {} source documents, {} mixture documents", source_docs.size(), mixture_docs.size());
}

void run_vocab(const PipelineConfig& c, const Hashes& inputs) {
  {
    textcorpus::VectorSource src(read_jsonl(out(c, "mix/source.jsonl")));
    const auto old_tok = tokenizer::train_vocab(src, c.old_vocab_size, c.per_language_token_cap);
    tokenizer::save_vocab(old_tok, out(c, "vocab/old.json"), {{"inputs", inputs}, {"role", "old"}});
    spdlog::info("train-vocab: old vocabulary {} tokens", old_tok.vocabulary().size());
  }
  textcorpus::VectorSource src(read_jsonl(out(c, "mix/mixture.jsonl")));
  const auto new_tok = tokenizer::train_vocab(src, c.new_vocab_size, c.per_language_token_cap);
  tokenizer::save_vocab(new_tok, out(c, "vocab/new.json"), {{"inputs", inputs}, {"role", "new"}});
  spdlog::info("train-vocab: new vocabulary {} tokens", new_tok.vocabulary().size());
}

void run_pretrain(const PipelineConfig& c, const Hashes& inputs) {
  const auto tok = tokenizer::load_vocab(out(c, "vocab/old.json"));
  auto tokens = std::make_shared<std::vector<TokenId>>(
      encode_documents(tok, texts(read_jsonl(out(c, "mix/source.jsonl")))));
  auto cfg = c.model;
  cfg.vocab_size = tok.vocabulary().size();
  tinylm::BatchSampler sampler(tokens, c.pretrain.seq_len, c.pretrain.batch_size, derive_seed(c.seed, "pretrain.batches"));
  std::vector<tinylm::StepLog> logs;
  auto ckpt = tinylm::pretrain(cfg, sampler, c.pretrain.steps, derive_seed(c.seed, "pretrain.init"), c.pretrain.optimizer,
                               &logs);
  ckpt.vocab_hash = inputs.at(rel(c, out(c, "vocab/old.json")));
  ckpt.meta["inputs"] = inputs;
  tinylm::save_checkpoint(ckpt, out(c, "model/base.vadt"));
  write_log(out(c, "logs/pretrain.jsonl"), logs);
}

void run_init(const PipelineConfig& c, const Hashes& inputs) {
  const auto old_tok = tokenizer::load_vocab(out(c, "vocab/old.json"));
  const auto new_tok = tokenizer::load_vocab(out(c, "vocab/new.json"));
  const auto plan = vocabmap::classify_tokens(new_tok.vocabulary(), old_tok.vocabulary(), old_tok);
  const std::size_t v_old = old_tok.vocabulary().size();
  adapter::AdapterCheckpoint init{vocabmap::init_adapter(plan, v_old, derive_seed(c.seed, "adapter.init.in")),
                                  vocabmap::init_adapter(plan, v_old, derive_seed(c.seed, "adapter.init.out")),
                                  {{"inputs", inputs}, {"kind", "init"}}};
  adapter::save_adapters(init, out(c, "adapter/init.vadt"));
  const auto random_plan = vocabmap::InitPlan::all_random(plan.new_vocab_size(), v_old);
  adapter::AdapterCheckpoint random{
      vocabmap::init_adapter(random_plan, v_old, derive_seed(c.seed, "adapter.random.in")),
      vocabmap::init_adapter(random_plan, v_old, derive_seed(c.seed, "adapter.random.out")),
      {{"inputs", inputs}, {"kind", "random"}}};
  adapter::save_adapters(random, out(c, "adapter/random.vadt"));
  write_json(out(c, "reports/init_report.json"), vocabmap::init_report(plan, new_tok.vocabulary(), old_tok.vocabulary()));
  const auto stats = vocabmap::overlap_stats(plan);
  spdlog::info("init-adapter: overlap {} partition {} random {}", stats.overlap, stats.partition, stats.random);
}

void run_train_adapter(const PipelineConfig& c, const Hashes& inputs) {
  const auto base = tinylm::load_checkpoint(out(c, "model/base.vadt"));
  const auto init = adapter::load_adapters(out(c, "adapter/init.vadt"));
  const auto new_tok = tokenizer::load_vocab(out(c, "vocab/new.json"));
  auto model = adapted(base, init, inputs.at(rel(c, out(c, "vocab/new.json"))));
  auto tokens = std::make_shared<std::vector<TokenId>>(
      encode_documents(new_tok, texts(read_jsonl(out(c, "mix/mixture.jsonl")))));
  auto cfg = c.adapter;
  cfg.seed = derive_seed(c.seed, "adapter.train");
  const auto reports = adapter::train_adapter(model, tokens, cfg, [&](const adapter::TrainStepReport& r) {
    if (r.step % 100 == 0 || r.step + 1 == cfg.steps) {
      spdlog::info("train-adapter step {} lm {:.4f} aux_in {:.4f} aux_out {:.4f} total {:.4f}", r.step, r.lm, r.aux_in,
                   r.aux_out, r.total);
    }
  });
  write_log(out(c, "logs/train_adapter.jsonl"), reports);
  adapter::AdapterCheckpoint trained{model.a_in, model.a_out, {{"inputs", inputs}, {"kind", "trained"},
                                                               {"alpha", cfg.alpha}, {"steps", cfg.steps}}};
  adapter::save_adapters(trained, out(c, "adapter/trained.vadt"));
}

void run_merge(const PipelineConfig& c, const Hashes& inputs) {
  const auto base = tinylm::load_checkpoint(out(c, "model/base.vadt"));
  const auto vocab_hash = inputs.at(rel(c, out(c, "vocab/new.json")));
  const std::pair<const char*, const char*> jobs[] = {
      {"adapter/trained.vadt", "model/merged.vadt"},
      {"adapter/init.vadt", "model/fvt.vadt"},
      {"adapter/random.vadt", "model/random.vadt"},
  };
  for (const auto& [src, dst] : jobs) {
    auto ckpt = adapter::merge(adapted(base, adapter::load_adapters(out(c, src)), vocab_hash));
    ckpt.meta["inputs"] = inputs;
    ckpt.meta["adapter"] = src;
    tinylm::save_checkpoint(ckpt, out(c, dst));
  }
}

void run_finetune(const PipelineConfig& c, const Hashes& inputs) {
  const auto merged = tinylm::load_checkpoint(out(c, "model/merged.vadt"));
  const auto new_tok = tokenizer::load_vocab(out(c, "vocab/new.json"));
  auto tokens = std::make_shared<std::vector<TokenId>>(
      encode_documents(new_tok, texts(read_jsonl(out(c, "mix/mixture.jsonl")))));
  tinylm::BatchSampler sampler(tokens, c.finetune.seq_len, c.finetune.batch_size, derive_seed(c.seed, "finetune.batches"));
  std::vector<tinylm::StepLog> logs;
  auto tuned = adapter::finetune_full(merged, sampler, c.finetune.steps, c.finetune.optimizer, &logs);
  tuned.meta["inputs"] = inputs;
  tuned.meta["finetune_steps"] = c.finetune.steps;
  tinylm::save_checkpoint(tuned, out(c, "model/finetuned.vadt"));
  write_log(out(c, "logs/finetune.jsonl"), logs);
}

void run_eval_frag(const PipelineConfig& c, const Hashes& inputs) {
  const auto old_tok = tokenizer::load_vocab(out(c, "vocab/old.json"));
  const auto new_tok = tokenizer::load_vocab(out(c, "vocab/new.json"));
  const auto eval = load_eval_set(c);
  const auto report = evalmetrics::fragmentation({{"old", &old_tok}, {"new", &new_tok}}, "old", eval);
  auto j = evalmetrics::to_json(report);
  j["inputs"] = inputs;
  write_json(out(c, "reports/fragmentation.json"), j);
}

const std::vector<std::pair<std::string, std::string>>& evaluated_models() {
  static const std::vector<std::pair<std::string, std::string>> models{
      {"base", "model/base.vadt"},       {"random", "model/random.vadt"},       {"fvt", "model/fvt.vadt"},
      {"vocadt", "model/merged.vadt"},   {"finetuned", "model/finetuned.vadt"}};
  return models;
}

void run_eval_bpb(const PipelineConfig& c, const Hashes& inputs) {
  const auto old_tok = tokenizer::load_vocab(out(c, "vocab/old.json"));
  const auto new_tok = tokenizer::load_vocab(out(c, "vocab/new.json"));
  const auto eval = load_eval_set(c);
  json results = json::object();
  for (const auto& [name, path] : evaluated_models()) {
    const auto ckpt = tinylm::load_checkpoint(out(c, path));
    const auto& tok = name == "base" ? old_tok : new_tok;
    const auto scorer = evalmetrics::checkpoint_scorer(ckpt);
    for (const auto& [lang, docs] : eval) {
      const auto stats = evalmetrics::score_documents(scorer, tok, docs, ckpt.config.context_len);
      results[lang][name] = {{"bits_per_byte", stats.bits_per_byte()},
                             {"token_perplexity", stats.token_perplexity()},
                             {"tokens", stats.predicted},
                             {"bytes", stats.bytes}};
    }
    spdlog::info("eval-bpb: scored {}", name);
  }
  write_json(out(c, "reports/quality.json"), {{"languages", results},
                                              {"note", "token_perplexity is not comparable across tokenizers"},
                                              {"inputs", inputs}});
}

void run_report(const PipelineConfig& c, const Hashes&) {
  const auto frag = read_json(out(c, "reports/fragmentation.json"));
  const auto quality = read_json(out(c, "reports/quality.json"));
  const auto base = tinylm::load_checkpoint(out(c, "model/base.vadt"));
  const auto merged = tinylm::load_checkpoint(out(c, "model/merged.vadt"));
  const auto init = read_json(out(c, "reports/init_report.json"));

  evalmetrics::Report r;
  r.config_hash = config_hash(c);
  r.build_id = build_id();
  r.seeds["global"] = c.seed;
  for (const char* label : {"mix.source", "mix.mixture", "pretrain.init", "pretrain.batches", "adapter.init.in",
                            "adapter.init.out", "adapter.train", "finetune.batches"}) {
    r.seeds[label] = derive_seed(c.seed, label);
  }
  r.columns = {"bytes",   "tokens_old", "tokens_new",       "reduction_rate", "bpb_base",
               "bpb_random", "bpb_fvt", "bpb_vocadt", "bpb_finetuned", "vocadt_vs_fvt"};
  for (const auto& [lang, entry] : frag.at("languages").items()) {
    auto& row = r.rows[lang];
    row["bytes"] = entry.at("bytes").get<double>();
    row["tokens_old"] = entry.at("token_count").at("old").get<double>();
    row["tokens_new"] = entry.at("token_count").at("new").get<double>();
    row["reduction_rate"] = entry.at("reduction_rate").at("new").get<double>();
  }
  for (const auto& [lang, models] : quality.at("languages").items()) {
    auto& row = r.rows[lang];
    for (const auto& [name, stats] : models.items()) row["bpb_" + name] = stats.at("bits_per_byte").get<double>();
    if (row.contains("bpb_vocadt") && row.contains("bpb_fvt")) {
      row["vocadt_vs_fvt"] = evalmetrics::increase_rate(row.at("bpb_vocadt"), row.at("bpb_fvt"));
    }
  }
  r.extra = {{"group", {{"name", c.group_name}, {"mode", c.group_mode}, {"languages", c.target_languages}}},
             {"alpha", c.adapter.alpha},
             {"flops_formula", evalmetrics::flops_formula()},
             {"flops_per_token_old", evalmetrics::estimate_flops_per_token(base.config)},
             {"flops_per_token_new", evalmetrics::estimate_flops_per_token(merged.config)},
             {"init_counts", init.at("counts")}};
  evalmetrics::emit_report(r, out(c, "reports/report.json"), evalmetrics::ReportFormat::kJson);
  evalmetrics::emit_report(r, out(c, "reports/report.csv"), evalmetrics::ReportFormat::kCsv);
}

std::vector<fs::path> paths(const PipelineConfig& c, std::initializer_list<const char*> rels) {
  std::vector<fs::path> out_paths;
  for (const char* p : rels) out_paths.push_back(out(c, p));
  return out_paths;
}

const std::vector<Stage>& stages();

}  // namespace

namespace {

std::vector<Stage> build_stages() {
  using S = Stage;
  using C = const PipelineConfig&;
  std::vector<S> s;
  s.push_back(S{"synth-corpus", [](C) { return std::vector<fs::path>{}; },
                [](C c) {
                  std::vector<fs::path> o;
                  if (!c.synthetic) return o;
                  o = {c.manifest, c.eval_manifest};
                  for (const auto& l : c.synthetic->languages) {
                    o.push_back(c.manifest.parent_path() / (l + ".train.txt"));
                    o.push_back(c.manifest.parent_path() / (l + ".eval.txt"));
                  }
                  return o;
                },
                [](C c) { return c.synthetic ? synthetic_json(*c.synthetic) : json(nullptr); }, run_synth});
  s.push_back(S{"mix-corpus", [](C c) { return manifest_sources(c.manifest, c.doc_unit); },
                [](C c) { return paths(c, {"mix/source.jsonl", "mix/mixture.jsonl", "mix/weights.json"}); },
                [](C c) {
                  return json{{"languages", c.languages()}, {"doc_unit", textcorpus::to_string(c.doc_unit)},
                              {"temperature", c.temperature}, {"keep_probability", c.keep_probability},
                              {"source_words", c.source_words}, {"mixture_words", c.mixture_words},
                              {"seed", c.seed}};
                },
                run_mix});
  s.push_back(S{"train-vocab", [](C c) { return paths(c, {"mix/source.jsonl", "mix/mixture.jsonl"}); },
                [](C c) { return paths(c, {"vocab/old.json", "vocab/new.json"}); },
                [](C c) {
                  return json{{"old_size", c.old_vocab_size}, {"new_size", c.new_vocab_size},
                              {"cap", c.per_language_token_cap}};
                },
                run_vocab});
  s.push_back(S{"pretrain", [](C c) { return paths(c, {"vocab/old.json", "mix/source.jsonl"}); },
                [](C c) { return paths(c, {"model/base.vadt", "logs/pretrain.jsonl"}); },
                [](C c) { return json{{"model", tinylm::to_json(c.model)}, {"train", to_json(c.pretrain)}, {"seed", c.seed}}; },
                run_pretrain});
  s.push_back(S{"init-adapter", [](C c) { return paths(c, {"vocab/old.json", "vocab/new.json"}); },
                [](C c) { return paths(c, {"adapter/init.vadt", "adapter/random.vadt", "reports/init_report.json"}); },
                [](C c) { return json{{"seed", c.seed}}; }, run_init});
  s.push_back(S{"train-adapter",
                [](C c) { return paths(c, {"model/base.vadt", "adapter/init.vadt", "vocab/new.json", "mix/mixture.jsonl"}); },
                [](C c) { return paths(c, {"adapter/trained.vadt", "logs/train_adapter.jsonl"}); },
                [](C c) { return json{{"adapter", adapter::to_json(c.adapter)}, {"seed", c.seed}}; },
                run_train_adapter});
  s.push_back(S{"merge",
                [](C c) {
                  return paths(c, {"model/base.vadt", "adapter/trained.vadt", "adapter/init.vadt",
                                   "adapter/random.vadt", "vocab/new.json"});
                },
                [](C c) { return paths(c, {"model/merged.vadt", "model/fvt.vadt", "model/random.vadt"}); },
                [](C) { return json(nullptr); }, run_merge});
  s.push_back(S{"finetune", [](C c) { return paths(c, {"model/merged.vadt", "vocab/new.json", "mix/mixture.jsonl"}); },
                [](C c) { return paths(c, {"model/finetuned.vadt", "logs/finetune.jsonl"}); },
                [](C c) { return json{{"train", to_json(c.finetune)}, {"seed", c.seed}}; }, run_finetune});
  s.push_back(S{"eval-frag",
                [](C c) {
                  auto in = paths(c, {"vocab/old.json", "vocab/new.json"});
                  for (auto& p : manifest_sources(c.eval_manifest, c.doc_unit)) in.push_back(p);
                  return in;
                },
                [](C c) { return paths(c, {"reports/fragmentation.json"}); },
                [](C c) { return json{{"languages", c.languages()}, {"max_docs", c.eval_max_docs}}; }, run_eval_frag});
  s.push_back(S{"eval-bpb",
                [](C c) {
                  auto in = paths(c, {"vocab/old.json", "vocab/new.json"});
                  for (const auto& [name, p] : evaluated_models()) in.push_back(out(c, p));
                  for (auto& p : manifest_sources(c.eval_manifest, c.doc_unit)) in.push_back(p);
                  return in;
                },
                [](C c) { return paths(c, {"reports/quality.json"}); },
                [](C c) { return json{{"languages", c.languages()}, {"max_docs", c.eval_max_docs}}; }, run_eval_bpb});
  s.push_back(S{"report",
                [](C c) {
                  return paths(c, {"reports/fragmentation.json", "reports/quality.json", "reports/init_report.json",
                                   "model/base.vadt", "model/merged.vadt"});
                },
                [](C c) { return paths(c, {"reports/report.json", "reports/report.csv"}); },
                [](C c) { return to_json(c); }, run_report});
  return s;
}

const std::vector<Stage>& stages() {
  static const std::vector<Stage> all = build_stages();
  return all;
}

const Stage& find_stage(const std::string& name) {
  for (const auto& s : stages()) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown stage '" + name + "'");
}

std::string producer_of(const PipelineConfig& c, const fs::path& artifact) {
  for (const auto& s : stages()) {
    for (const auto& o : s.outputs(c)) {
      if (o == artifact) return s.name;
    }
  }
  return {};
}

}  // namespace

Pipeline::Pipeline(PipelineConfig config) : config_(std::move(config)) { config_.validate(); }

fs::path Pipeline::artifact(std::string_view relative) const { return out(config_, relative); }

StageStatus Pipeline::run_stage(const std::string& name, bool force) {
  const Stage& st = find_stage(name);
  const auto& c = config_;
  Hashes inputs;
  std::string missing;
  for (const auto& p : st.inputs(c)) {
    if (!fs::exists(p)) {
      const auto producer = producer_of(c, p);
      missing += (missing.empty() ? "" : "; ") + p.string() +
                 (producer.empty() ? std::string() : " (run '" + producer + "' first)");
      continue;
    }
    inputs[rel(c, p)] = sha256_file(p);
  }
  if (!missing.empty()) throw ValidationError(name + ": missing artifact " + missing);
  const json settings = st.settings(c);
  const std::string settings_hash = sha256_hex(settings.dump());
  const fs::path manifest_path = out(c, "manifests/" + name + ".json");

  if (!force && fs::exists(manifest_path)) {
    const auto previous = read_json(manifest_path);
    bool fresh = previous.value("settings_hash", std::string()) == settings_hash &&
                 previous.value("inputs", json::object()) == inputs_json(inputs);
    if (fresh) {
      for (const auto& p : st.outputs(c)) {
        const auto recorded = previous.value("outputs", json::object()).value(rel(c, p), std::string());
        if (!fs::exists(p) || recorded != sha256_file(p)) {
          fresh = false;
          break;
        }
      }
    }
    if (fresh) {
      spdlog::info("{}: up to date, skipping", name);
      return StageStatus::kSkipped;
    }
  }

  spdlog::info("{}: running", name);
  const auto start = std::chrono::steady_clock::now();
  st.run(c, inputs);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  Hashes outputs;
  for (const auto& p : st.outputs(c)) {
    if (!fs::exists(p)) throw ValidationError(name + ": stage did not produce " + p.string());
    outputs[rel(c, p)] = sha256_file(p);
  }
  write_json(manifest_path, {{"stage", name},
                             {"seed", c.seed},
                             {"config", c.config_path.string()},
                             {"settings", settings},
                             {"settings_hash", settings_hash},
                             {"inputs", inputs_json(inputs)},
                             {"outputs", outputs},
                             {"duration_seconds", seconds},
                             {"build_id", build_id()}});
  spdlog::info("{}: done in {:.1f}s", name, seconds);
  return StageStatus::kRan;
}

void Pipeline::run(const std::string& stop_after, bool force) {
  if (!stop_after.empty()) find_stage(stop_after);
  for (const auto& name : stage_names()) {
    run_stage(name, force);
    if (name == stop_after) break;
  }
}

}  // namespace vocadt::pipeline

#include "vocadt/evalmetrics.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace vocadt::evalmetrics {

namespace {

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::map<std::string, std::size_t> count_tokens(const tokenizer::TokenizerModel& tok, const EvalSet& eval) {
  if (eval.empty()) throw ValidationError("evaluation set is empty");
  std::map<std::string, std::size_t> counts;
  for (const auto& [lang, docs] : eval) {
    std::size_t n = 0;
    for (const auto& d : docs) n += tok.count_tokens(d);
    counts[lang] = n;
  }
  return counts;
}

std::map<std::string, std::size_t> count_bytes(const EvalSet& eval) {
  std::map<std::string, std::size_t> bytes;
  for (const auto& [lang, docs] : eval) {
    std::size_t n = 0;
    for (const auto& d : docs) n += d.size();
    bytes[lang] = n;
  }
  return bytes;
}

double reduction_rate(std::size_t count_new, std::size_t count_base) {
  if (count_base == 0) throw ValidationError("reduction rate needs a non-zero baseline count");
  return (static_cast<double>(count_new) - static_cast<double>(count_base)) / static_cast<double>(count_base);
}

FragmentationReport fragmentation(const std::map<std::string, const tokenizer::TokenizerModel*>& tokenizers,
                                  const std::string& baseline, const EvalSet& eval) {
  if (!tokenizers.contains(baseline)) throw ValidationError("baseline tokenizer '" + baseline + "' not provided");
  FragmentationReport report;
  report.baseline = baseline;
  const auto bytes = count_bytes(eval);
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const auto& [name, tok] : tokenizers) counts[name] = count_tokens(*tok, eval);
  for (const auto& [lang, n_bytes] : bytes) {
    auto& entry = report.languages[lang];
    entry.bytes = n_bytes;
    const std::size_t base = counts.at(baseline).at(lang);
    for (const auto& [name, per_lang] : counts) {
      const std::size_t n = per_lang.at(lang);
      entry.token_count[name] = n;
      entry.tokens_per_byte[name] = n_bytes == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(n_bytes);
      if (name != baseline && base > 0) entry.reduction_rate[name] = reduction_rate(n, base);
    }
  }
  return report;
}

nlohmann::json to_json(const FragmentationReport& r) {
  nlohmann::json langs = nlohmann::json::object();
  for (const auto& [lang, e] : r.languages) {
    langs[lang] = {{"bytes", e.bytes},
                   {"token_count", e.token_count},
                   {"tokens_per_byte", e.tokens_per_byte},
                   {"reduction_rate", e.reduction_rate}};
  }
  return {{"baseline", r.baseline}, {"languages", langs}};
}

double increase_rate(double score_new, double score_base) {
  if (score_base == 0.0) throw ValidationError("increase rate needs a non-zero baseline score");
  return (score_new - score_base) / score_base;
}

double QualityStats::bits_per_byte() const {
  if (bytes == 0) throw ValidationError("bits per byte over zero bytes");
  return nll_nats / std::log(2.0) / static_cast<double>(bytes);
}

double QualityStats::token_perplexity() const {
  if (predicted == 0) throw ValidationError("perplexity over zero predicted tokens");
  return std::exp(nll_nats / static_cast<double>(predicted));
}

QualityStats score_documents(const WindowScorer& scorer, const tokenizer::TokenizerModel& tok,
                             const std::vector<std::string>& documents, std::size_t context_len) {
  QualityStats stats;
  const TokenId bos = tok.vocabulary().specials().bos;
  for (const auto& doc : documents) {
    if (doc.empty()) continue;
    if (!is_valid_utf8(doc)) throw ValidationError("evaluation document is not valid UTF-8");
    const auto ids = tok.encode(doc);
    const auto windows = tinylm::evaluation_windows(ids, bos, context_len);
    stats.nll_nats += scorer(windows);
    stats.predicted += ids.size();
    stats.bytes += doc.size();
  }
  if (stats.bytes == 0) throw ValidationError("no non-empty documents to score");
  return stats;
}

WindowScorer checkpoint_scorer(const tinylm::ModelCheckpoint& ckpt) {
  return [&ckpt](const tinylm::TokenBatch& windows) {
    const auto source = tinylm::plain_embeddings(ckpt.params);
    double total = 0.0;
    for (const auto& w : windows) {
      const auto pass = tinylm::run_pass(ckpt.config, ckpt.params, source, tinylm::TokenBatch{w}, {});
      total += pass.nll_sum;
    }
    return total;
  };
}

double bits_per_byte(const tinylm::ModelCheckpoint& ckpt, const tokenizer::TokenizerModel& tok,
                     const std::vector<std::string>& documents) {
  if (ckpt.config.vocab_size != tok.vocabulary().size()) {
    throw ValidationError("checkpoint vocabulary size " + std::to_string(ckpt.config.vocab_size) +
                          " does not match tokenizer size " + std::to_string(tok.vocabulary().size()));
  }
  return score_documents(checkpoint_scorer(ckpt), tok, documents, ckpt.config.context_len).bits_per_byte();
}

double estimate_flops_per_token(const tinylm::ModelConfig& c) {
  const double h = static_cast<double>(c.h);
  const double layers = static_cast<double>(c.n_layers);
  const double body = layers * (4.0 * h * h + 2.0 * h * static_cast<double>(c.ff_dim()));
  const double head = h * static_cast<double>(c.vocab_size);
  return 2.0 * (body + head) + 4.0 * layers * static_cast<double>(c.context_len) * h;
}

std::string flops_formula() {
  return "2*(n_layers*(4*h^2 + 2*h*ff_dim) + h*vocab_size) + 4*n_layers*context_len*h";
}

nlohmann::json to_json(const Report& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [lang, cells] : r.rows) {
    nlohmann::json row = {{"language", lang}};
    for (const auto& col : r.columns) {
      auto it = cells.find(col);
      row[col] = it == cells.end() ? nlohmann::json(nullptr) : nlohmann::json(it->second);
    }
    rows.push_back(row);
  }
  return {{"report_version", kReportVersion}, {"config_hash", r.config_hash}, {"seeds", r.seeds},
          {"build_id", r.build_id},           {"columns", r.columns},         {"rows", rows},
          {"extra", r.extra}};
}

Report report_from_json(const nlohmann::json& j) {
  Report r;
  try {
    if (j.at("report_version").get<int>() != kReportVersion) {
      throw FormatError("unsupported report_version " + j.at("report_version").dump());
    }
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    r.build_id = j.at("build_id").get<std::string>();
    r.columns = j.at("columns").get<std::vector<std::string>>();
    r.extra = j.value("extra", nlohmann::json::object());
    for (const auto& row : j.at("rows")) {
      auto& cells = r.rows[row.at("language").get<std::string>()];
      for (const auto& col : r.columns) {
        if (row.contains(col) && !row.at(col).is_null()) cells[col] = row.at(col).get<double>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

std::string to_csv(const Report& r) {
  std::ostringstream out;
  out << "language";
  for (const auto& col : r.columns) out << ',' << csv_field(col);
  out << '\n';
  for (const auto& [lang, cells] : r.rows) {
    out << csv_field(lang);
    for (const auto& col : r.columns) {
      out << ',';
      auto it = cells.find(col);
      if (it != cells.end()) out << format_number(it->second);
    }
    out << '\n';
  }
  return out.str();
}

void emit_report(const Report& r, const std::filesystem::path& path, ReportFormat format) {
  const std::string body = format == ReportFormat::kJson ? to_json(r).dump(2) + "\n" : to_csv(r);
  try {
    write_file_atomic(path, body);
  } catch (const std::filesystem::filesystem_error& e) {
    throw ValidationError("cannot write report " + path.string() + ": " + e.what());
  }
}

Report load_report(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    return report_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace vocadt::evalmetrics

#include "vocadt/adapter.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

namespace vocadt::adapter {

namespace {

template <typename T>
void check_adapter(const AdapterMatrix<T>& a, std::size_t v_old, const char* which) {
  if (static_cast<std::size_t>(a.cols()) != v_old) {
    throw ValidationError(std::string(which) + " has " + std::to_string(a.cols()) + " columns, base vocabulary has " +
                          std::to_string(v_old));
  }
  if (a.init_overlap_rows.rows() != static_cast<Eigen::Index>(a.overlap_ids.size()) ||
      (a.init_overlap_rows.rows() > 0 && a.init_overlap_rows.cols() != a.cols())) {
    throw ValidationError(std::string(which) + ": overlap snapshot does not match overlap ids");
  }
  for (TokenId id : a.overlap_ids) {
    if (id < 0 || id >= a.rows()) throw ValidationError(std::string(which) + ": overlap id out of range");
  }
}

template <typename T>
struct AdapterPassState {
  tinylm::EmbeddingSource<T> source;
  Matrix<T> head;
};

template <typename T>
void gather_adapted(const AdaptedModel<T>& model, std::span<const TokenId> ids, Matrix<T>& out) {
  Matrix<T> rows(static_cast<Eigen::Index>(ids.size()), model.a_in.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = model.a_in.values.row(ids[i]);
  out.noalias() = rows * model.base.embed_in;
}

template <typename T>
LossTerms<T> compose(double lm, const AdaptedModel<T>& model, T alpha) {
  LossTerms<T> terms;
  terms.lm = lm;
  terms.aux_in = static_cast<double>(aux_loss(model.a_in));
  terms.aux_out = static_cast<double>(aux_loss(model.a_out));
  terms.aux = 0.5 * (terms.aux_in + terms.aux_out);
  terms.total = terms.lm + static_cast<double>(alpha) * terms.aux;
  return terms;
}

tensor_io::Tensor matrix_tensor(const std::string& name, const MatrixF& m) {
  tensor_io::Tensor t;
  t.name = name;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.f32.assign(m.data(), m.data() + m.size());
  return t;
}

MatrixF tensor_matrix(const tensor_io::Tensor& t) {
  if (t.dtype != tensor_io::DType::kF32 || t.dims.size() != 2) {
    throw FormatError("tensor '" + t.name + "' is not a rank-2 f32 tensor");
  }
  MatrixF m(static_cast<Eigen::Index>(t.dims[0]), static_cast<Eigen::Index>(t.dims[1]));
  std::copy(t.f32.begin(), t.f32.end(), m.data());
  return m;
}

}  // namespace

template <typename T>
void AdaptedModel<T>::validate() const {
  base_config.validate();
  const auto v_old = static_cast<std::size_t>(base.embed_in.rows());
  if (v_old != base_config.vocab_size || static_cast<std::size_t>(base.embed_out.rows()) != v_old) {
    throw ValidationError("base embeddings do not match the base config");
  }
  check_adapter(a_in, v_old, "input adapter");
  check_adapter(a_out, v_old, "output adapter");
  if (a_in.rows() != a_out.rows()) throw ValidationError("input and output adapters disagree on the new vocabulary size");
}

template <typename T>
Matrix<T> effective_embeddings(const Matrix<T>& a, const Matrix<T>& e_old) {
  if (a.cols() != e_old.rows()) {
    throw ValidationError("adapter has " + std::to_string(a.cols()) + " columns but embeddings have " +
                          std::to_string(e_old.rows()) + " rows");
  }
  Matrix<T> out;
  out.noalias() = a * e_old;
  return out;
}

template <typename T>
AdaptedForward<T> adapted_forward_loss(const AdaptedModel<T>& model, const tinylm::TokenBatch& batch) {
  model.validate();
  const Matrix<T> head = effective_embeddings(model.a_out.values, model.base.embed_out);
  tinylm::EmbeddingSource<T> source;
  source.gather = [&model](std::span<const TokenId> ids, Matrix<T>& out) { gather_adapted(model, ids, out); };
  source.head = &head;
  source.vocab_size = model.new_vocab_size();
  tinylm::PassOptions<T> options;
  options.keep_logits = true;
  auto pass = tinylm::run_pass(model.base_config, model.base, source, batch, options);
  return {std::move(pass.logits), pass.loss};
}

template <typename T>
T aux_loss(const AdapterMatrix<T>& a) {
  if (a.overlap_ids.empty()) {
    spdlog::warn("aux loss requested with an empty overlap set; returning 0");
    return 0;
  }
  double total = 0.0;
  for (std::size_t k = 0; k < a.overlap_ids.size(); ++k) {
    const auto diff = (a.values.row(a.overlap_ids[k]) - a.init_overlap_rows.row(static_cast<Eigen::Index>(k))).eval();
    total += std::sqrt(static_cast<double>(diff.squaredNorm()));
  }
  return static_cast<T>(total / static_cast<double>(a.overlap_ids.size()));
}

template <typename T>
void add_aux_gradient(const AdapterMatrix<T>& a, T scale, Matrix<T>& grad) {
  if (a.overlap_ids.empty() || scale == 0) return;
  const T per_row = scale / static_cast<T>(a.overlap_ids.size());
  for (std::size_t k = 0; k < a.overlap_ids.size(); ++k) {
    const auto diff = (a.values.row(a.overlap_ids[k]) - a.init_overlap_rows.row(static_cast<Eigen::Index>(k))).eval();
    const T norm = diff.norm();
    if (norm > 0) grad.row(a.overlap_ids[k]) += (per_row / norm) * diff;
  }
}

template <typename T>
AdapterGradients<T> adapter_loss_and_grad(const AdaptedModel<T>& model, const tinylm::TokenBatch& batch, T alpha) {
  model.validate();
  const Matrix<T> head = effective_embeddings(model.a_out.values, model.base.embed_out);
  AdapterGradients<T> out;
  out.d_in = Matrix<T>::Zero(model.a_in.rows(), model.a_in.cols());
  Matrix<T> d_head = Matrix<T>::Zero(head.rows(), head.cols());

  tinylm::EmbeddingSource<T> source;
  source.gather = [&model](std::span<const TokenId> ids, Matrix<T>& x) { gather_adapted(model, ids, x); };
  source.head = &head;
  source.vocab_size = model.new_vocab_size();

  tinylm::EmbeddingGradSink<T> sink;
  sink.head = &d_head;
  sink.scatter = [&](std::span<const TokenId> ids, const Matrix<T>& dx) {
    const Matrix<T> d_rows = dx * model.base.embed_in.transpose();
    for (std::size_t i = 0; i < ids.size(); ++i) out.d_in.row(ids[i]) += d_rows.row(static_cast<Eigen::Index>(i));
  };

  tinylm::PassOptions<T> options;
  options.embedding_grads = &sink;
  const auto pass = tinylm::run_pass(model.base_config, model.base, source, batch, options);
  out.d_out.noalias() = d_head * model.base.embed_out.transpose();

  out.loss = compose(static_cast<double>(pass.loss), model, alpha);
  const T aux_scale = static_cast<T>(0.5) * alpha;
  add_aux_gradient(model.a_in, aux_scale, out.d_in);
  add_aux_gradient(model.a_out, aux_scale, out.d_out);
  return out;
}

template <typename T>
LossTerms<T> adapter_loss(const AdaptedModel<T>& model, const tinylm::TokenBatch& batch, T alpha) {
  const auto forward = adapted_forward_loss(model, batch);
  return compose(static_cast<double>(forward.loss), model, alpha);
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("adapter alpha must be a non-negative number");
  if (batch_size == 0 || seq_len < 2) throw ConfigError("adapter training needs batch_size >= 1 and seq_len >= 2");
  if (!(optimizer.lr > 0.0)) throw ConfigError("adapter learning rate must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},           {"steps", c.steps}, {"batch_size", c.batch_size},
          {"seq_len", c.seq_len},       {"seed", c.seed},   {"optimizer", tinylm::to_json(c.optimizer)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults) {
  TrainConfig c = defaults;
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.seed = j.value("seed", c.seed);
    if (j.contains("optimizer")) {
      nlohmann::json merged = tinylm::to_json(c.optimizer);
      merged.update(j.at("optimizer"));
      c.optimizer = tinylm::optimizer_from_json(merged);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainStepReport& r) {
  return {{"step", r.step},
          {"lm", r.lm},
          {"aux_in", r.aux_in},
          {"aux_out", r.aux_out},
          {"aux", r.aux},
          {"total", r.total},
          {"grad_norm_in", r.grad_norm_in},
          {"grad_norm_out", r.grad_norm_out},
          {"lr", r.lr}};
}

std::vector<TrainStepReport> train_adapter(AdaptedModel<float>& model,
                                           std::shared_ptr<const std::vector<TokenId>> tokens,
                                           const TrainConfig& config,
                                           const std::function<void(const TrainStepReport&)>& on_step) {
  config.validate();
  model.validate();
  for (TokenId id : *tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= model.new_vocab_size()) {
      throw ValidationError("training corpus contains id " + std::to_string(id) + " outside the new vocabulary");
    }
  }
  tinylm::BatchSampler sampler(std::move(tokens), config.seq_len, config.batch_size, config.seed);
  tinylm::OptimizerConfig opt_cfg = config.optimizer;
  opt_cfg.weight_decay = 0.0;
  tinylm::AdamW opt(opt_cfg);
  opt.add(&model.a_in.values, false);
  opt.add(&model.a_out.values, false);

  std::vector<TrainStepReport> reports;
  reports.reserve(config.steps);
  const auto alpha = static_cast<float>(config.alpha);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto batch = sampler.next();
    auto g = adapter_loss_and_grad(model, batch, alpha);
    if (!std::isfinite(g.loss.total)) {
      throw NumericalError("non-finite adapter loss at step " + std::to_string(step));
    }
    TrainStepReport r;
    r.step = step;
    r.lm = g.loss.lm;
    r.aux_in = g.loss.aux_in;
    r.aux_out = g.loss.aux_out;
    r.aux = g.loss.aux;
    r.total = g.loss.total;
    r.grad_norm_in = static_cast<double>(g.d_in.norm());
    r.grad_norm_out = static_cast<double>(g.d_out.norm());
    r.lr = tinylm::cosine_lr(step, config.steps, opt_cfg.warmup_ratio, opt_cfg.lr);
    const MatrixF* grads[] = {&g.d_in, &g.d_out};
    opt.step(grads, r.lr);
    if (on_step) on_step(r);
    reports.push_back(r);
  }
  return reports;
}

tinylm::ModelCheckpoint merge(const AdaptedModel<float>& model) {
  model.validate();
  tinylm::ModelCheckpoint ckpt;
  ckpt.config = model.base_config;
  ckpt.config.vocab_size = model.new_vocab_size();
  ckpt.params = model.base;
  ckpt.params.embed_in = effective_embeddings(model.a_in.values, model.base.embed_in);
  ckpt.params.embed_out = effective_embeddings(model.a_out.values, model.base.embed_out);
  ckpt.vocab_hash = model.new_vocab_hash;
  return ckpt;
}

tinylm::ModelCheckpoint finetune_full(const tinylm::ModelCheckpoint& merged, tinylm::BatchSampler& sampler,
                                      std::size_t steps, const tinylm::OptimizerConfig& optimizer,
                                      std::vector<tinylm::StepLog>* logs) {
  tinylm::ModelCheckpoint out = merged;
  auto history = tinylm::train_steps(out.config, out.params, sampler, optimizer, steps, tinylm::trainable_all(),
                                     [&](const tinylm::StepLog& s) {
                                       if (s.step % 100 == 0 || s.step + 1 == steps) {
                                         spdlog::info("finetune step {} loss {:.4f}", s.step, s.loss);
                                       }
                                     });
  if (logs) *logs = std::move(history);
  return out;
}

void save_adapters(const AdapterCheckpoint& ckpt, const std::filesystem::path& path) {
  if (ckpt.a_in.overlap_ids != ckpt.a_out.overlap_ids) {
    throw ValidationError("input and output adapters must share overlap ids");
  }
  tensor_io::TensorFile file;
  file.add(matrix_tensor("adapter.in", ckpt.a_in.values));
  file.add(matrix_tensor("adapter.out", ckpt.a_out.values));
  auto snapshot = [&](const MatrixF& m) {
    return m.rows() == 0 ? MatrixF(0, ckpt.a_in.cols()) : m;
  };
  file.add(matrix_tensor("adapter.in.init_overlap", snapshot(ckpt.a_in.init_overlap_rows)));
  file.add(matrix_tensor("adapter.out.init_overlap", snapshot(ckpt.a_out.init_overlap_rows)));
  tensor_io::Tensor ids;
  ids.name = "adapter.overlap_ids";
  ids.dtype = tensor_io::DType::kU32;
  ids.dims = {ckpt.a_in.overlap_ids.size()};
  for (TokenId id : ckpt.a_in.overlap_ids) ids.u32.push_back(static_cast<std::uint32_t>(id));
  file.add(std::move(ids));
  file.trailer = {{"kind", "adapter"}, {"meta", ckpt.meta}};
  tensor_io::save(path, file);
}

AdapterCheckpoint load_adapters(const std::filesystem::path& path) {
  const auto file = tensor_io::load(path);
  if (file.trailer.value("kind", std::string()) != "adapter") {
    throw FormatError(path.string() + ": not an adapter checkpoint");
  }
  AdapterCheckpoint ckpt;
  ckpt.meta = file.trailer.value("meta", nlohmann::json::object());
  const auto& ids = file.get("adapter.overlap_ids");
  if (ids.dtype != tensor_io::DType::kU32) throw FormatError("adapter.overlap_ids must be u32");
  std::vector<TokenId> overlap(ids.u32.begin(), ids.u32.end());
  ckpt.a_in = {tensor_matrix(file.get("adapter.in")), tensor_matrix(file.get("adapter.in.init_overlap")), overlap};
  ckpt.a_out = {tensor_matrix(file.get("adapter.out")), tensor_matrix(file.get("adapter.out.init_overlap")), overlap};
  for (const auto* a : {&ckpt.a_in, &ckpt.a_out}) {
    if (a->init_overlap_rows.rows() != static_cast<Eigen::Index>(overlap.size())) {
      throw FormatError("adapter snapshot rows do not match overlap ids");
    }
  }
  return ckpt;
}

#define VOCADT_INSTANTIATE(T)                                                                                  \
  template struct AdaptedModel<T>;                                                                             \
  template Matrix<T> effective_embeddings(const Matrix<T>&, const Matrix<T>&);                                 \
  template AdaptedForward<T> adapted_forward_loss(const AdaptedModel<T>&, const tinylm::TokenBatch&);          \
  template T aux_loss(const AdapterMatrix<T>&);                                                                \
  template void add_aux_gradient(const AdapterMatrix<T>&, T, Matrix<T>&);                                      \
  template AdapterGradients<T> adapter_loss_and_grad(const AdaptedModel<T>&, const tinylm::TokenBatch&, T);    \
  template LossTerms<T> adapter_loss(const AdaptedModel<T>&, const tinylm::TokenBatch&, T);

VOCADT_INSTANTIATE(float)
VOCADT_INSTANTIATE(double)
#undef VOCADT_INSTANTIATE

}  // namespace vocadt::adapter

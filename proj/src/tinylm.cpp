#include "vocadt/tinylm.hpp"

#include <cmath>
#include <limits>

#include <spdlog/spdlog.h>

namespace vocadt::tinylm {

namespace {

constexpr double kNormEps = 1e-5;

template <typename T>
struct LayerCache {
  Matrix<T> x_in, n1, q, k, v, concat, x_mid, n2, u, a;
  std::vector<T> r1, r2;
  std::vector<Matrix<T>> probs;  // per head
};

template <typename T>
struct SequenceCache {
  std::vector<LayerCache<T>> layers;
  Matrix<T> x_final, normed;
  std::vector<T> r_final;
};

template <typename T>
void rmsnorm_forward(const Matrix<T>& x, const Matrix<T>& gain, Matrix<T>& y, std::vector<T>& r) {
  const auto rows = x.rows();
  const T width = static_cast<T>(x.cols());
  y.resize(rows, x.cols());
  r.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < rows; ++i) {
    const T rms = std::sqrt(x.row(i).squaredNorm() / width + static_cast<T>(kNormEps));
    r[static_cast<std::size_t>(i)] = rms;
    y.row(i) = (x.row(i) / rms).cwiseProduct(gain);
  }
}

// dx = d(normalized)/dx applied to dy; gain gradient accumulated when non-null.
template <typename T>
Matrix<T> rmsnorm_backward(const Matrix<T>& x, const Matrix<T>& gain, const std::vector<T>& r, const Matrix<T>& dy,
                           Matrix<T>* dgain) {
  const auto rows = x.rows();
  const T width = static_cast<T>(x.cols());
  Matrix<T> dx(rows, x.cols());
  for (Eigen::Index i = 0; i < rows; ++i) {
    const T rms = r[static_cast<std::size_t>(i)];
    const auto xhat = (x.row(i) / rms).eval();
    if (dgain) *dgain += xhat.cwiseProduct(dy.row(i));
    const auto dxhat = dy.row(i).cwiseProduct(gain).eval();
    const T proj = dxhat.dot(xhat) / width;
    dx.row(i) = (dxhat - proj * xhat) / rms;
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::erf(x / std::sqrt(static_cast<T>(2))));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(x / std::sqrt(static_cast<T>(2))));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) / std::sqrt(static_cast<T>(2 * M_PI));
  return cdf + x * pdf;
}

template <typename T>
Matrix<T> forward_sequence(const ModelConfig& cfg, const Parameters<T>& p, const EmbeddingSource<T>& emb,
                           std::span<const TokenId> ids, SequenceCache<T>& cache) {
  const auto len = static_cast<Eigen::Index>(ids.size());
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
  const T scale = static_cast<T>(1) / std::sqrt(static_cast<T>(hd));
  Matrix<T> x(len, static_cast<Eigen::Index>(cfg.h));
  emb.gather(ids, x);
  x += p.pos.topRows(len);
  cache.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lp = p.layers[l];
    auto& c = cache.layers[l];
    c.x_in = x;
    rmsnorm_forward(c.x_in, lp.attn_norm, c.n1, c.r1);
    c.q.noalias() = c.n1 * lp.wq;
    c.k.noalias() = c.n1 * lp.wk;
    c.v.noalias() = c.n1 * lp.wv;
    c.concat.resize(len, x.cols());
    c.probs.resize(cfg.n_heads);
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      const auto off = static_cast<Eigen::Index>(head) * hd;
      Matrix<T> s = (c.q.middleCols(off, hd) * c.k.middleCols(off, hd).transpose()) * scale;
      for (Eigen::Index i = 0; i < len; ++i) {
        const T mx = s.row(i).head(i + 1).maxCoeff();
        T total = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          total += s(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= total;
        for (Eigen::Index j = i + 1; j < len; ++j) s(i, j) = 0;
      }
      c.concat.middleCols(off, hd).noalias() = s * c.v.middleCols(off, hd);
      c.probs[head] = std::move(s);
    }
    c.x_mid = c.x_in;
    c.x_mid.noalias() += c.concat * lp.wo;
    rmsnorm_forward(c.x_mid, lp.ffn_norm, c.n2, c.r2);
    c.u.noalias() = c.n2 * lp.w1;
    c.u.rowwise() += lp.b1.row(0);
    c.a = c.u.unaryExpr([](T v) { return gelu(v); });
    x = c.x_mid;
    x.noalias() += c.a * lp.w2;
    x.rowwise() += lp.b2.row(0);
  }
  cache.x_final = std::move(x);
  rmsnorm_forward(cache.x_final, p.final_norm, cache.normed, cache.r_final);
  Matrix<T> logits;
  logits.noalias() = cache.normed * emb.head->transpose();
  return logits;
}

template <typename T>
void backward_sequence(const ModelConfig& cfg, const Parameters<T>& p, const EmbeddingSource<T>& emb,
                       std::span<const TokenId> ids, const SequenceCache<T>& cache, const Matrix<T>& dlogits,
                       Parameters<T>* g, const EmbeddingGradSink<T>* sink) {
  const auto len = static_cast<Eigen::Index>(ids.size());
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
  const T scale = static_cast<T>(1) / std::sqrt(static_cast<T>(hd));

  if (sink && sink->head) sink->head->noalias() += dlogits.transpose() * cache.normed;
  Matrix<T> dnormed = dlogits * (*emb.head);
  Matrix<T> dx = rmsnorm_backward(cache.x_final, p.final_norm, cache.r_final, dnormed, g ? &g->final_norm : nullptr);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lp = p.layers[li];
    const auto& c = cache.layers[li];
    LayerParameters<T>* lg = g ? &g->layers[li] : nullptr;

    // x_out = x_mid + gelu(n2 w1 + b1) w2 + b2
    Matrix<T> da = dx * lp.w2.transpose();
    if (lg) {
      lg->w2.noalias() += c.a.transpose() * dx;
      lg->b2 += dx.colwise().sum();
    }
    Matrix<T> du = da.cwiseProduct(c.u.unaryExpr([](T v) { return gelu_grad(v); }));
    if (lg) {
      lg->w1.noalias() += c.n2.transpose() * du;
      lg->b1 += du.colwise().sum();
    }
    Matrix<T> dn2 = du * lp.w1.transpose();
    Matrix<T> dmid = dx + rmsnorm_backward(c.x_mid, lp.ffn_norm, c.r2, dn2, lg ? &lg->ffn_norm : nullptr);

    // x_mid = x_in + concat wo
    Matrix<T> dconcat = dmid * lp.wo.transpose();
    if (lg) lg->wo.noalias() += c.concat.transpose() * dmid;
    Matrix<T> dq(len, dx.cols()), dk(len, dx.cols()), dv(len, dx.cols());
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      const auto off = static_cast<Eigen::Index>(head) * hd;
      const Matrix<T>& prob = c.probs[head];
      const auto dout = dconcat.middleCols(off, hd);
      Matrix<T> dprob = dout * c.v.middleCols(off, hd).transpose();
      dv.middleCols(off, hd).noalias() = prob.transpose() * dout;
      Matrix<T> ds = prob.cwiseProduct(dprob);
      const auto row_dot = ds.rowwise().sum().eval();
      ds -= prob.cwiseProduct(row_dot.replicate(1, len));
      ds *= scale;
      dq.middleCols(off, hd).noalias() = ds * c.k.middleCols(off, hd);
      dk.middleCols(off, hd).noalias() = ds.transpose() * c.q.middleCols(off, hd);
    }
    if (lg) {
      lg->wq.noalias() += c.n1.transpose() * dq;
      lg->wk.noalias() += c.n1.transpose() * dk;
      lg->wv.noalias() += c.n1.transpose() * dv;
    }
    Matrix<T> dn1 = dq * lp.wq.transpose();
    dn1.noalias() += dk * lp.wk.transpose();
    dn1.noalias() += dv * lp.wv.transpose();
    dx = dmid + rmsnorm_backward(c.x_in, lp.attn_norm, c.r1, dn1, lg ? &lg->attn_norm : nullptr);
  }
  if (g) g->pos.topRows(len) += dx;
  if (sink && sink->scatter) sink->scatter(ids, dx);
}

template <typename T>
Matrix<T> init_like(Eigen::Index rows, Eigen::Index cols) {
  return Matrix<T>::Zero(rows, cols);
}

// Box-Muller on the raw 64-bit stream, stable across standard libraries.
double standard_normal(std::mt19937_64& rng) {
  const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0 || h == 0 || n_layers == 0 || n_heads == 0 || context_len == 0 || ff_mult == 0) {
    throw ValidationError("model config: all sizes must be positive");
  }
  if (h % n_heads != 0) throw ValidationError("model config: h must be divisible by n_heads");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"h", c.h},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"context_len", c.context_len}, {"ff_mult", c.ff_mult}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.h = j.value("h", c.h);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.context_len = j.value("context_len", c.context_len);
    c.ff_mult = j.value("ff_mult", c.ff_mult);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

template <typename T>
Parameters<T> Parameters<T>::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const auto v = static_cast<Eigen::Index>(cfg.vocab_size);
  const auto h = static_cast<Eigen::Index>(cfg.h);
  const auto f = static_cast<Eigen::Index>(cfg.ff_dim());
  Parameters<T> p;
  p.embed_in = init_like<T>(v, h);
  p.embed_out = init_like<T>(v, h);
  p.pos = init_like<T>(static_cast<Eigen::Index>(cfg.context_len), h);
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    l.attn_norm = init_like<T>(1, h);
    l.wq = init_like<T>(h, h);
    l.wk = init_like<T>(h, h);
    l.wv = init_like<T>(h, h);
    l.wo = init_like<T>(h, h);
    l.ffn_norm = init_like<T>(1, h);
    l.w1 = init_like<T>(h, f);
    l.b1 = init_like<T>(1, f);
    l.w2 = init_like<T>(f, h);
    l.b2 = init_like<T>(1, h);
  }
  p.final_norm = init_like<T>(1, h);
  return p;
}

template <typename T>
template <typename U>
Parameters<U> Parameters<T>::cast() const {
  Parameters<U> out;
  out.embed_in = embed_in.template cast<U>();
  out.embed_out = embed_out.template cast<U>();
  out.pos = pos.template cast<U>();
  out.final_norm = final_norm.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    auto& b = out.layers[i];
    b.attn_norm = a.attn_norm.template cast<U>();
    b.wq = a.wq.template cast<U>();
    b.wk = a.wk.template cast<U>();
    b.wv = a.wv.template cast<U>();
    b.wo = a.wo.template cast<U>();
    b.ffn_norm = a.ffn_norm.template cast<U>();
    b.w1 = a.w1.template cast<U>();
    b.b1 = a.b1.template cast<U>();
    b.w2 = a.w2.template cast<U>();
    b.b2 = a.b2.template cast<U>();
  }
  return out;
}

template <typename T>
bool Parameters<T>::operator==(const Parameters& other) const {
  std::vector<const Matrix<T>*> mine;
  std::vector<const Matrix<T>*> theirs;
  for_each([&](const std::string&, const Matrix<T>& m) { mine.push_back(&m); });
  other.for_each([&](const std::string&, const Matrix<T>& m) { theirs.push_back(&m); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i]->rows() != theirs[i]->rows() || mine[i]->cols() != theirs[i]->cols() || *mine[i] != *theirs[i]) {
      return false;
    }
  }
  return true;
}

void validate_batch(const ModelConfig& config, const TokenBatch& batch) {
  std::size_t predicted = 0;
  for (const auto& seq : batch) {
    if (seq.size() > config.context_len) {
      throw ValidationError("sequence of length " + std::to_string(seq.size()) + " exceeds the context length " +
                            std::to_string(config.context_len));
    }
    for (TokenId id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
        throw ValidationError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                              std::to_string(config.vocab_size));
      }
    }
    if (!seq.empty()) predicted += seq.size() - 1;
  }
  if (predicted == 0) throw ValidationError("batch has no predicted positions (all sequences shorter than 2 tokens)");
}

template <typename T>
PassResult<T> run_pass(const ModelConfig& config, const Parameters<T>& params, const EmbeddingSource<T>& embeddings,
                       const TokenBatch& batch, const PassOptions<T>& options) {
  ModelConfig effective = config;
  effective.vocab_size = embeddings.vocab_size;
  validate_batch(effective, batch);
  if (!embeddings.head || static_cast<std::size_t>(embeddings.head->rows()) != embeddings.vocab_size ||
      static_cast<std::size_t>(embeddings.head->cols()) != config.h) {
    throw ValidationError("output head shape does not match the vocabulary");
  }
  std::size_t predicted = 0;
  for (const auto& seq : batch) {
    if (!seq.empty()) predicted += seq.size() - 1;
  }
  const bool backward = options.body_grads != nullptr || options.embedding_grads != nullptr;
  const T grad_scale = options.loss_scale / static_cast<T>(predicted);

  PassResult<T> result;
  result.predicted = predicted;
  double loss_sum = 0.0;
  SequenceCache<T> cache;
  for (const auto& seq : batch) {
    if (seq.size() < 2) continue;
    std::span<const TokenId> ids(seq);
    Matrix<T> logits = forward_sequence(config, params, embeddings, ids, cache);
    Matrix<T> dlogits;
    if (backward) dlogits = Matrix<T>::Zero(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i + 1 < logits.rows(); ++i) {
      const TokenId target = seq[static_cast<std::size_t>(i) + 1];
      const T mx = logits.row(i).maxCoeff();
      const auto shifted = (logits.row(i).array() - mx).exp().eval();
      const T total = shifted.sum();
      loss_sum += static_cast<double>(std::log(total) + mx - logits(i, target));
      if (backward) {
        dlogits.row(i) = (shifted / total * grad_scale).matrix();
        dlogits(i, target) -= grad_scale;
      }
    }
    if (backward) {
      backward_sequence(config, params, embeddings, ids, cache, dlogits, options.body_grads,
                        options.embedding_grads);
    }
    if (options.keep_logits) result.logits.push_back(std::move(logits));
  }
  result.nll_sum = loss_sum;
  result.loss = static_cast<T>(loss_sum / static_cast<double>(predicted));
  return result;
}

template <typename T>
EmbeddingSource<T> plain_embeddings(const Parameters<T>& params) {
  EmbeddingSource<T> src;
  src.gather = [&params](std::span<const TokenId> ids, Matrix<T>& out) {
    for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = params.embed_in.row(ids[i]);
  };
  src.head = &params.embed_out;
  src.vocab_size = static_cast<std::size_t>(params.embed_out.rows());
  return src;
}

template <typename T>
ForwardResult<T> forward_loss(const ModelConfig& config, const Parameters<T>& params, const TokenBatch& batch) {
  PassOptions<T> options;
  options.keep_logits = true;
  auto pass = run_pass(config, params, plain_embeddings(params), batch, options);
  return {std::move(pass.logits), pass.loss};
}

template <typename T>
BackwardResult<T> backward(const ModelConfig& config, const Parameters<T>& params, const TokenBatch& batch,
                           T loss_scale) {
  BackwardResult<T> out;
  out.grads = Parameters<T>::zeros(config);
  EmbeddingGradSink<T> sink;
  sink.head = &out.grads.embed_out;
  sink.scatter = [&out](std::span<const TokenId> ids, const Matrix<T>& d) {
    for (std::size_t i = 0; i < ids.size(); ++i) out.grads.embed_in.row(ids[i]) += d.row(static_cast<Eigen::Index>(i));
  };
  PassOptions<T> options;
  options.body_grads = &out.grads;
  options.embedding_grads = &sink;
  options.loss_scale = loss_scale;
  out.loss = run_pass(config, params, plain_embeddings(params), batch, options).loss;
  return out;
}

template <typename T>
std::vector<std::vector<Matrix<T>>> attention_probabilities(const ModelConfig& config, const Parameters<T>& params,
                                                            std::span<const TokenId> ids) {
  validate_batch(config, TokenBatch{std::vector<TokenId>(ids.begin(), ids.end()), {0, 0}});
  SequenceCache<T> cache;
  forward_sequence(config, params, plain_embeddings(params), ids, cache);
  std::vector<std::vector<Matrix<T>>> out;
  for (auto& layer : cache.layers) out.push_back(std::move(layer.probs));
  return out;
}

Parameters<float> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  auto p = Parameters<float>::zeros(config);
  std::mt19937_64 rng(seed);
  p.for_each([&](const std::string& name, MatrixF& m) {
    const bool gain = name.find("norm") != std::string::npos;
    const bool bias = name.ends_with(".b1") || name.ends_with(".b2");
    if (gain) {
      m.setOnes();
    } else if (!bias) {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        double z;
        do {
          z = standard_normal(rng);
        } while (std::abs(z) > 2.0);
        m.data()[i] = static_cast<float>(0.02 * z);
      }
    }
  });
  return p;
}

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"lr", c.lr},   {"beta1", c.beta1},
          {"beta2", c.beta2}, {"eps", c.eps},
          {"weight_decay", c.weight_decay}, {"warmup_ratio", c.warmup_ratio}};
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("optimizer config: ") + e.what());
  }
  return c;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double warmup_ratio, double peak) {
  if (total_steps == 0) return peak;
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void AdamW::add(MatrixF* param, bool apply_decay) {
  slots_.push_back({param, MatrixF::Zero(param->rows(), param->cols()), MatrixF::Zero(param->rows(), param->cols()),
                    apply_decay});
}

void AdamW::step(std::span<const MatrixF* const> grads, double lr) {
  if (grads.size() != slots_.size()) throw ValidationError("AdamW: gradient count does not match parameters");
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(config_.eps);
  for (std::size_t k = 0; k < slots_.size(); ++k) {
    auto& s = slots_[k];
    const MatrixF& g = *grads[k];
    if (g.rows() != s.param->rows() || g.cols() != s.param->cols()) {
      throw ValidationError("AdamW: gradient shape mismatch");
    }
    if (s.decay && config_.weight_decay != 0.0) *s.param *= static_cast<float>(1.0 - lr * config_.weight_decay);
    s.m = b1 * s.m + (1.0f - b1) * g;
    s.v = b2 * s.v + (1.0f - b2) * g.cwiseProduct(g);
    s.param->array() -= step_size * s.m.array() / ((s.v.array() * inv_bc2).sqrt() + eps);
  }
}

BatchSampler::BatchSampler(std::shared_ptr<const std::vector<TokenId>> tokens, std::size_t seq_len,
                           std::size_t batch_size, std::uint64_t seed)
    : tokens_(std::move(tokens)), seq_len_(seq_len), batch_size_(batch_size), rng_(seed) {
  if (!tokens_ || seq_len_ < 2 || batch_size_ == 0) throw ValidationError("batch sampler: invalid arguments");
  if (tokens_->size() < seq_len_) {
    throw ValidationError("batch sampler: corpus has " + std::to_string(tokens_->size()) +
                          " tokens, fewer than one window of " + std::to_string(seq_len_));
  }
}

TokenBatch BatchSampler::next() {
  TokenBatch batch;
  const std::uint64_t starts = tokens_->size() - seq_len_ + 1;
  for (std::size_t b = 0; b < batch_size_; ++b) {
    const auto start = static_cast<std::size_t>(rng_() % starts);
    batch.emplace_back(tokens_->begin() + static_cast<std::ptrdiff_t>(start),
                       tokens_->begin() + static_cast<std::ptrdiff_t>(start + seq_len_));
  }
  return batch;
}

TrainableFilter trainable_all() {
  return [](const std::string&) { return true; };
}

TrainableFilter trainable_none() {
  return [](const std::string&) { return false; };
}

std::vector<StepLog> train_steps(const ModelConfig& config, Parameters<float>& params, BatchSampler& sampler,
                                 const OptimizerConfig& optimizer, std::size_t n_steps,
                                 const TrainableFilter& trainable, const std::function<void(const StepLog&)>& on_step) {
  AdamW opt(optimizer);
  std::vector<std::string> selected;
  params.for_each([&](const std::string& name, MatrixF& m) {
    if (trainable(name)) {
      opt.add(&m, m.rows() > 1);
      selected.push_back(name);
    }
  });
  std::vector<StepLog> logs;
  for (std::size_t step = 0; step < n_steps; ++step) {
    const auto batch = sampler.next();
    auto result = backward(config, params, batch);
    if (!std::isfinite(result.loss)) {
      throw NumericalError("non-finite training loss at step " + std::to_string(step));
    }
    std::vector<const MatrixF*> grads;
    double norm2 = 0.0;
    std::size_t k = 0;
    result.grads.for_each([&](const std::string& name, const MatrixF& g) {
      if (k < selected.size() && selected[k] == name) {
        grads.push_back(&g);
        norm2 += static_cast<double>(g.squaredNorm());
        ++k;
      }
    });
    const double lr = cosine_lr(step, n_steps, optimizer.warmup_ratio, optimizer.lr);
    if (!grads.empty()) opt.step(grads, lr);
    StepLog log{step, static_cast<double>(result.loss), lr, std::sqrt(norm2)};
    if (on_step) on_step(log);
    logs.push_back(log);
  }
  return logs;
}

ModelCheckpoint pretrain(const ModelConfig& config, BatchSampler& sampler, std::size_t steps, std::uint64_t seed,
                         const OptimizerConfig& optimizer, std::vector<StepLog>* logs) {
  ModelCheckpoint ckpt;
  ckpt.config = config;
  ckpt.params = init_parameters(config, seed);
  auto history = train_steps(config, ckpt.params, sampler, optimizer, steps, trainable_all(), [&](const StepLog& s) {
    if (s.step % 100 == 0 || s.step + 1 == steps) spdlog::info("pretrain step {} loss {:.4f} lr {:.2e}", s.step, s.loss, s.lr);
  });
  if (logs) *logs = std::move(history);
  ckpt.meta["seed"] = seed;
  ckpt.meta["steps"] = steps;
  return ckpt;
}

tensor_io::TensorFile to_tensor_file(const ModelCheckpoint& ckpt) {
  tensor_io::TensorFile file;
  ckpt.params.for_each([&](const std::string& name, const MatrixF& m) {
    tensor_io::Tensor t;
    t.name = name;
    if (m.rows() == 1 && (name.find("norm") != std::string::npos || name.ends_with(".b1") || name.ends_with(".b2"))) {
      t.dims = {static_cast<std::uint64_t>(m.cols())};
    } else {
      t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    }
    t.f32.assign(m.data(), m.data() + m.size());
    file.add(std::move(t));
  });
  file.trailer = {{"kind", "model"}, {"config", to_json(ckpt.config)}, {"vocab_hash", ckpt.vocab_hash},
                  {"meta", ckpt.meta}};
  return file;
}

ModelCheckpoint from_tensor_file(const tensor_io::TensorFile& file) {
  ModelCheckpoint ckpt;
  try {
    ckpt.config = config_from_json(file.trailer.at("config"));
    ckpt.vocab_hash = file.trailer.value("vocab_hash", std::string());
    ckpt.meta = file.trailer.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint trailer: ") + e.what());
  }
  ckpt.params = Parameters<float>::zeros(ckpt.config);
  std::size_t expected = 0;
  ckpt.params.for_each([&](const std::string& name, MatrixF& m) {
    ++expected;
    const auto& t = file.get(name);
    if (t.dtype != tensor_io::DType::kF32 || t.numel() != static_cast<std::uint64_t>(m.size()) ||
        (t.dims.size() == 2 && (t.dims[0] != static_cast<std::uint64_t>(m.rows()) ||
                                t.dims[1] != static_cast<std::uint64_t>(m.cols())))) {
      throw FormatError("tensor '" + name + "' shape does not match the recorded config");
    }
    std::copy(t.f32.begin(), t.f32.end(), m.data());
  });
  return ckpt;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  tensor_io::save(path, to_tensor_file(ckpt));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto file = tensor_io::load(path);
  if (file.trailer.value("kind", std::string()) != "model") {
    throw FormatError(path.string() + ": not a model checkpoint");
  }
  return from_tensor_file(file);
}

TokenBatch evaluation_windows(std::span<const TokenId> ids, TokenId bos, std::size_t context_len) {
  if (context_len < 2) throw ValidationError("evaluation windows need a context of at least 2");
  std::vector<TokenId> seq;
  seq.reserve(ids.size() + 1);
  seq.push_back(bos);
  seq.insert(seq.end(), ids.begin(), ids.end());
  TokenBatch windows;
  // Consecutive windows share one token so every id is predicted once.
  for (std::size_t start = 0; start + 1 < seq.size(); start += context_len - 1) {
    const std::size_t end = std::min(seq.size(), start + context_len);
    windows.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return windows;
}

#define VOCADT_INSTANTIATE(T)                                                                                    \
  template struct Parameters<T>;                                                                                 \
  template PassResult<T> run_pass(const ModelConfig&, const Parameters<T>&, const EmbeddingSource<T>&,          \
                                  const TokenBatch&, const PassOptions<T>&);                                    \
  template EmbeddingSource<T> plain_embeddings(const Parameters<T>&);                                            \
  template ForwardResult<T> forward_loss(const ModelConfig&, const Parameters<T>&, const TokenBatch&);          \
  template BackwardResult<T> backward(const ModelConfig&, const Parameters<T>&, const TokenBatch&, T);          \
  template std::vector<std::vector<Matrix<T>>> attention_probabilities(const ModelConfig&, const Parameters<T>&, \
                                                                       std::span<const TokenId>);

VOCADT_INSTANTIATE(float)
VOCADT_INSTANTIATE(double)
#undef VOCADT_INSTANTIATE

template Parameters<double> Parameters<float>::cast<double>() const;
template Parameters<float> Parameters<double>::cast<float>() const;
template Parameters<float> Parameters<float>::cast<float>() const;

}  // namespace vocadt::tinylm

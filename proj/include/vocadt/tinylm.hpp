#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vocadt/common.hpp"
#include "vocadt/tensor_io.hpp"

// Small pre-norm decoder-only transformer: learned positions, RMS
// normalization, causal multi-head attention, GELU feed-forward, untied
// input embedding and output head. Forward and backward passes are written
// out by hand and instantiated for float and double.
namespace vocadt::tinylm {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t h = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t context_len = 128;
  std::size_t ff_mult = 4;

  std::size_t head_dim() const { return h / n_heads; }
  std::size_t ff_dim() const { return ff_mult * h; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

template <typename T>
struct LayerParameters {
  Matrix<T> attn_norm;  // 1 x h
  Matrix<T> wq, wk, wv, wo;  // h x h
  Matrix<T> ffn_norm;  // 1 x h
  Matrix<T> w1;  // h x ff
  Matrix<T> b1;  // 1 x ff
  Matrix<T> w2;  // ff x h
  Matrix<T> b2;  // 1 x h
};

template <typename T>
struct Parameters {
  Matrix<T> embed_in;   // vocab x h
  Matrix<T> embed_out;  // vocab x h
  Matrix<T> pos;        // context x h
  std::vector<LayerParameters<T>> layers;
  Matrix<T> final_norm;  // 1 x h

  static Parameters zeros(const ModelConfig& config);

  /// Visits every tensor as (name, matrix) in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  template <typename U>
  Parameters<U> cast() const;

  bool operator==(const Parameters& other) const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("embed.in"), self.embed_in);
    f(std::string("embed.out"), self.embed_out);
    f(std::string("pos"), self.pos);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      auto& l = self.layers[i];
      f(p + "attn_norm", l.attn_norm);
      f(p + "attn.wq", l.wq);
      f(p + "attn.wk", l.wk);
      f(p + "attn.wv", l.wv);
      f(p + "attn.wo", l.wo);
      f(p + "ffn_norm", l.ffn_norm);
      f(p + "ffn.w1", l.w1);
      f(p + "ffn.b1", l.b1);
      f(p + "ffn.w2", l.w2);
      f(p + "ffn.b2", l.b2);
    }
    f(std::string("final_norm"), self.final_norm);
  }
};

using GradientSet = Parameters<float>;
using TokenBatch = std::vector<std::vector<TokenId>>;

/// Checks ids against `vocab_size` and lengths against the context, and
/// that at least one position is predicted.
void validate_batch(const ModelConfig& config, const TokenBatch& batch);

// Source of effective embeddings for one pass. The plain model gathers rows
// of embed_in and uses embed_out as head; the adapter path supplies A*E.
template <typename T>
struct EmbeddingSource {
  std::function<void(std::span<const TokenId>, Matrix<T>&)> gather;  // ids -> len x h
  const Matrix<T>* head = nullptr;                                   // vocab x h
  std::size_t vocab_size = 0;
};

template <typename T>
struct EmbeddingGradSink {
  std::function<void(std::span<const TokenId>, const Matrix<T>&)> scatter;  // d(len x h) per sequence
  Matrix<T>* head = nullptr;  // accumulates d head (vocab x h)
};

template <typename T>
struct PassResult {
  T loss = 0;  // mean cross-entropy over predicted positions
  double nll_sum = 0;  // summed in double, nats
  std::size_t predicted = 0;
  std::vector<Matrix<T>> logits;  // per sequence, len x vocab, when requested
};

template <typename T>
struct PassOptions {
  bool keep_logits = false;
  // Non-null: accumulate body gradients (pos, layers, final_norm).
  Parameters<T>* body_grads = nullptr;
  // Non-null: backpropagate into the effective embeddings.
  const EmbeddingGradSink<T>* embedding_grads = nullptr;
  T loss_scale = 1;
};

/// Core pass shared by the plain and adapted models.
template <typename T>
PassResult<T> run_pass(const ModelConfig& config, const Parameters<T>& params, const EmbeddingSource<T>& embeddings,
                       const TokenBatch& batch, const PassOptions<T>& options);

template <typename T>
EmbeddingSource<T> plain_embeddings(const Parameters<T>& params);

template <typename T>
struct ForwardResult {
  std::vector<Matrix<T>> logits;
  T loss = 0;
};

template <typename T>
ForwardResult<T> forward_loss(const ModelConfig& config, const Parameters<T>& params, const TokenBatch& batch);

template <typename T>
struct BackwardResult {
  T loss = 0;
  Parameters<T> grads;
};

/// Gradients of the mean next-token loss, scaled by `loss_scale`.
template <typename T>
BackwardResult<T> backward(const ModelConfig& config, const Parameters<T>& params, const TokenBatch& batch,
                           T loss_scale = 1);

/// Attention probabilities of one sequence, [layer][head] -> len x len.
template <typename T>
std::vector<std::vector<Matrix<T>>> attention_probabilities(const ModelConfig& config, const Parameters<T>& params,
                                                            std::span<const TokenId> ids);

Parameters<float> init_parameters(const ModelConfig& config, std::uint64_t seed);

// ---- optimization ----

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_ratio = 0.01;
};

nlohmann::json to_json(const OptimizerConfig& c);
OptimizerConfig optimizer_from_json(const nlohmann::json& j);

/// Linear warmup to `peak` over ceil(warmup_ratio * total) steps, then
/// cosine decay to zero.
double cosine_lr(std::size_t step, std::size_t total_steps, double warmup_ratio, double peak);

/// AdamW with decoupled weight decay. Tensors are registered once;
/// `step` must receive gradients in registration order.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig config) : config_(config) {}

  void add(MatrixF* param, bool apply_decay);
  std::size_t size() const { return slots_.size(); }
  void step(std::span<const MatrixF* const> grads, double lr);

 private:
  struct Slot {
    MatrixF* param;
    MatrixF m;
    MatrixF v;
    bool decay;
  };

  OptimizerConfig config_;
  std::vector<Slot> slots_;
  std::uint64_t t_ = 0;
};

/// Random fixed-length windows over a token array.
class BatchSampler {
 public:
  BatchSampler(std::shared_ptr<const std::vector<TokenId>> tokens, std::size_t seq_len, std::size_t batch_size,
               std::uint64_t seed);

  TokenBatch next();
  std::size_t seq_len() const { return seq_len_; }
  std::size_t batch_size() const { return batch_size_; }

 private:
  std::shared_ptr<const std::vector<TokenId>> tokens_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
};

struct StepLog {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
};

using TrainableFilter = std::function<bool(const std::string& tensor_name)>;
TrainableFilter trainable_all();
TrainableFilter trainable_none();

/// AdamW on the selected tensors only; other tensors are left untouched.
/// Weight decay applies to matrices, not to gains or biases. Throws
/// NumericalError on a non-finite loss.
std::vector<StepLog> train_steps(const ModelConfig& config, Parameters<float>& params, BatchSampler& sampler,
                                 const OptimizerConfig& optimizer, std::size_t n_steps,
                                 const TrainableFilter& trainable,
                                 const std::function<void(const StepLog&)>& on_step = {});

// ---- checkpoints ----

struct ModelCheckpoint {
  ModelConfig config;
  Parameters<float> params;
  std::string vocab_hash;  // sha256 of the attached vocabulary file
  nlohmann::json meta = nlohmann::json::object();
};

ModelCheckpoint pretrain(const ModelConfig& config, BatchSampler& sampler, std::size_t steps, std::uint64_t seed,
                         const OptimizerConfig& optimizer, std::vector<StepLog>* logs = nullptr);

tensor_io::TensorFile to_tensor_file(const ModelCheckpoint& ckpt);
ModelCheckpoint from_tensor_file(const tensor_io::TensorFile& file);
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Token windows for teacher-forced evaluation over [bos, ids...]. Each
/// window holds at most context_len tokens and starts on the last token of
/// the previous one, so every id is predicted exactly once.
TokenBatch evaluation_windows(std::span<const TokenId> ids, TokenId bos, std::size_t context_len);

}  // namespace vocadt::tinylm

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vocadt/common.hpp"
#include "vocadt/tinylm.hpp"
#include "vocadt/vocabmap.hpp"

// Vocabulary adapters over a frozen base model. New-vocabulary embeddings
// are A_in * E_in and A_out * E_out; only the two adapters are trained.
namespace vocadt::adapter {

using vocabmap::AdapterMatrix;

template <typename T>
struct AdaptedModel {
  tinylm::ModelConfig base_config;
  tinylm::Parameters<T> base;
  AdapterMatrix<T> a_in;
  AdapterMatrix<T> a_out;
  std::string new_vocab_hash;

  std::size_t new_vocab_size() const { return static_cast<std::size_t>(a_in.rows()); }
  void validate() const;

  template <typename U>
  AdaptedModel<U> cast() const {
    return {base_config, base.template cast<U>(), a_in.template cast<U>(), a_out.template cast<U>(), new_vocab_hash};
  }
};

/// Plain product a * e_old.
template <typename T>
Matrix<T> effective_embeddings(const Matrix<T>& a, const Matrix<T>& e_old);

template <typename T>
struct AdaptedForward {
  std::vector<Matrix<T>> logits;
  T loss = 0;
};

/// Input rows are gathered from A_in and multiplied by E_in per sequence;
/// the head is A_out * E_out.
template <typename T>
AdaptedForward<T> adapted_forward_loss(const AdaptedModel<T>& model, const tinylm::TokenBatch& batch);

/// Mean Euclidean distance of the current overlap rows from their initial
/// values; 0 for an empty overlap set.
template <typename T>
T aux_loss(const AdapterMatrix<T>& a);

/// Adds scale * d(aux_loss)/dA into grad. The subgradient at zero distance is 0.
template <typename T>
void add_aux_gradient(const AdapterMatrix<T>& a, T scale, Matrix<T>& grad);

template <typename T>
struct LossTerms {
  double lm = 0;
  double aux_in = 0;
  double aux_out = 0;
  double aux = 0;  // mean of aux_in and aux_out
  double total = 0;  // lm + alpha * aux
};

template <typename T>
struct AdapterGradients {
  LossTerms<T> loss;
  Matrix<T> d_in;
  Matrix<T> d_out;
};

/// Loss terms and gradients of lm + alpha * aux with respect to both adapters.
template <typename T>
AdapterGradients<T> adapter_loss_and_grad(const AdaptedModel<T>& model, const tinylm::TokenBatch& batch, T alpha);

/// Loss terms only.
template <typename T>
LossTerms<T> adapter_loss(const AdaptedModel<T>& model, const tinylm::TokenBatch& batch, T alpha);

struct TrainConfig {
  double alpha = 0.0;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
  tinylm::OptimizerConfig optimizer{.lr = 1e-3, .weight_decay = 0.0};

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

struct TrainStepReport {
  std::size_t step = 0;
  double lm = 0;
  double aux_in = 0;
  double aux_out = 0;
  double aux = 0;
  double total = 0;
  double grad_norm_in = 0;
  double grad_norm_out = 0;
  double lr = 0;
};

nlohmann::json to_json(const TrainStepReport& r);

/// Adam without weight decay on a_in and a_out; the base is never written.
/// Throws NumericalError on a non-finite loss.
std::vector<TrainStepReport> train_adapter(AdaptedModel<float>& model,
                                           std::shared_ptr<const std::vector<TokenId>> tokens,
                                           const TrainConfig& config,
                                           const std::function<void(const TrainStepReport&)>& on_step = {});

/// Standalone checkpoint with embed_in = A_in E_in and embed_out = A_out E_out.
tinylm::ModelCheckpoint merge(const AdaptedModel<float>& model);

/// Continued training of every tensor of a merged checkpoint.
tinylm::ModelCheckpoint finetune_full(const tinylm::ModelCheckpoint& merged, tinylm::BatchSampler& sampler,
                                      std::size_t steps, const tinylm::OptimizerConfig& optimizer,
                                      std::vector<tinylm::StepLog>* logs = nullptr);

struct AdapterCheckpoint {
  AdapterMatrix<float> a_in;
  AdapterMatrix<float> a_out;
  nlohmann::json meta = nlohmann::json::object();
};

void save_adapters(const AdapterCheckpoint& ckpt, const std::filesystem::path& path);
AdapterCheckpoint load_adapters(const std::filesystem::path& path);

}  // namespace vocadt::adapter

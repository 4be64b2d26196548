#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vocadt/adapter.hpp"
#include "vocadt/tinylm.hpp"

namespace vocadt::testing {

class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("vocadt-test-" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline tinylm::ModelConfig micro_config(std::size_t vocab = 300) {
  tinylm::ModelConfig c;
  c.vocab_size = vocab;
  c.h = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.context_len = 16;
  c.ff_mult = 4;
  return c;
}

// Parameters with non-trivial gains and biases so every tensor matters.
inline tinylm::Parameters<float> randomized_parameters(const tinylm::ModelConfig& c, std::uint64_t seed,
                                                       float scale = 0.3f) {
  auto p = tinylm::init_parameters(c, seed);
  std::mt19937_64 rng(seed * 77 + 1);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  p.for_each([&](const std::string& name, MatrixF& m) {
    const bool gain = name.find("norm") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gain ? 1.0f + 0.2f * u(rng) : scale * u(rng);
  });
  return p;
}

// Adapted model over randomized base parameters. Rows below `n_overlap` are
// one-hot overlap rows (perturbed by `drift`), the rest random convex rows.
inline adapter::AdaptedModel<float> random_adapted_model(const tinylm::ModelConfig& base, std::size_t v_new,
                                                         std::size_t n_overlap, std::uint64_t seed,
                                                         float drift = 0.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  vocabmap::InitPlan plan = vocabmap::InitPlan::all_random(v_new, base.vocab_size);
  for (std::size_t i = 0; i < n_overlap; ++i) {
    plan.classes[i] = vocabmap::Overlap{static_cast<TokenId>(rng() % base.vocab_size)};
    plan.overlap_ids.push_back(static_cast<TokenId>(i));
  }
  auto a_in = vocabmap::init_adapter(plan, base.vocab_size, seed + 1);
  auto a_out = vocabmap::init_adapter(plan, base.vocab_size, seed + 2);
  for (auto* a : {&a_in, &a_out})
    for (Eigen::Index i = 0; i < a->values.size(); ++i) a->values.data()[i] += drift * (u(rng) - 0.5f);
  return {base, randomized_parameters(base, seed + 3), a_in, a_out, ""};
}

inline std::vector<TokenId> random_ids(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(rng() % vocab);
  return ids;
}

// Straight-line forward pass written with plain loops in double precision.
// Returns per-position logits [t][v].
inline std::vector<std::vector<double>> reference_logits(const tinylm::ModelConfig& c,
                                                         const tinylm::Parameters<float>& p,
                                                         const std::vector<TokenId>& ids) {
  const std::size_t n = ids.size(), h = c.h, hd = c.head_dim(), ff = c.ff_dim();
  using Rows = std::vector<std::vector<double>>;
  auto at = [](const MatrixF& m, std::size_t i, std::size_t j) { return static_cast<double>(m(i, j)); };
  auto norm = [&](const Rows& x, const MatrixF& g) {
    Rows y(n, std::vector<double>(h));
    for (std::size_t t = 0; t < n; ++t) {
      double ms = 0;
      for (std::size_t k = 0; k < h; ++k) ms += x[t][k] * x[t][k];
      const double r = std::sqrt(ms / static_cast<double>(h) + 1e-5);
      for (std::size_t k = 0; k < h; ++k) y[t][k] = x[t][k] / r * at(g, 0, k);
    }
    return y;
  };
  auto matmul = [&](const Rows& x, const MatrixF& w) {
    Rows y(x.size(), std::vector<double>(static_cast<std::size_t>(w.cols()), 0.0));
    for (std::size_t t = 0; t < x.size(); ++t)
      for (std::size_t j = 0; j < static_cast<std::size_t>(w.cols()); ++j)
        for (std::size_t k = 0; k < static_cast<std::size_t>(w.rows()); ++k) y[t][j] += x[t][k] * at(w, k, j);
    return y;
  };
  Rows x(n, std::vector<double>(h));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t k = 0; k < h; ++k) x[t][k] = at(p.embed_in, ids[t], k) + at(p.pos, t, k);
  for (const auto& L : p.layers) {
    const Rows a = norm(x, L.attn_norm);
    const Rows q = matmul(a, L.wq), kk = matmul(a, L.wk), v = matmul(a, L.wv);
    Rows heads(n, std::vector<double>(h, 0.0));
    for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
      for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> s(t + 1);
        double mx = -1e300;
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0;
          for (std::size_t d = 0; d < hd; ++d) dot += q[t][hh * hd + d] * kk[u][hh * hd + d];
          s[u] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[u]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t u = 0; u <= t; ++u)
          for (std::size_t d = 0; d < hd; ++d) heads[t][hh * hd + d] += s[u] / z * v[u][hh * hd + d];
      }
    }
    const Rows o = matmul(heads, L.wo);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t k = 0; k < h; ++k) x[t][k] += o[t][k];
    const Rows b = norm(x, L.ffn_norm);
    Rows u = matmul(b, L.w1);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < ff; ++j) {
        const double pre = u[t][j] + at(L.b1, 0, j);
        u[t][j] = 0.5 * pre * (1.0 + std::erf(pre / std::sqrt(2.0)));
      }
    const Rows f = matmul(u, L.w2);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t k = 0; k < h; ++k) x[t][k] += f[t][k] + at(L.b2, 0, k);
  }
  const Rows fin = norm(x, p.final_norm);
  Rows logits(n, std::vector<double>(static_cast<std::size_t>(p.embed_out.rows()), 0.0));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t w = 0; w < logits[t].size(); ++w)
      for (std::size_t k = 0; k < h; ++k) logits[t][w] += fin[t][k] * at(p.embed_out, w, k);
  return logits;
}

// Summed next-token NLL (nats) of one sequence under the reference pass.
inline double reference_nll(const tinylm::ModelConfig& c, const tinylm::Parameters<float>& p,
                            const std::vector<TokenId>& ids) {
  const auto logits = reference_logits(c, p, ids);
  double total = 0;
  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    double mx = -1e300;
    for (double l : logits[t]) mx = std::max(mx, l);
    double z = 0;
    for (double l : logits[t]) z += std::exp(l - mx);
    total += std::log(z) + mx - logits[t][static_cast<std::size_t>(ids[t + 1])];
  }
  return total;
}

inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale < 1e-12 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace vocadt::testing

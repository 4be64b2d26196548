#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "vocadt/adapter.hpp"

using namespace vocadt;
using namespace vocadt::adapter;
using testing::micro_config;
using testing::random_adapted_model;

namespace {

tinylm::TokenBatch random_batch(std::size_t vocab, std::uint64_t seed, std::size_t n = 3, std::size_t len = 10) {
  std::mt19937_64 rng(seed);
  tinylm::TokenBatch batch;
  for (std::size_t i = 0; i < n; ++i) batch.push_back(testing::random_ids(len, vocab, rng));
  return batch;
}

double max_abs(const MatrixD& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

std::shared_ptr<const std::vector<TokenId>> periodic(std::size_t n, std::size_t vocab) {
  auto out = std::make_shared<std::vector<TokenId>>(n);
  for (std::size_t i = 0; i < n; ++i) (*out)[i] = static_cast<TokenId>((i * 5 + i / 13) % vocab);
  return out;
}

}  // namespace

TEST_SUITE("adapter") {

TEST_CASE("effective embeddings") {
  MatrixD a(5, 4), e(4, 3);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = 0.1 * static_cast<double>(i) - 0.7;
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = std::sin(static_cast<double>(i));
  const auto out = effective_embeddings(a, e);
  for (Eigen::Index r = 0; r < 5; ++r)
    for (Eigen::Index c = 0; c < 3; ++c) {
      double ref = 0;
      for (Eigen::Index k = 0; k < 4; ++k) ref += a(r, k) * e(k, c);
      CHECK(std::abs(out(r, c) - ref) < 1e-6);
    }
  CHECK(effective_embeddings(MatrixD(MatrixD::Identity(4, 4)), e) == e);
  MatrixD pick = MatrixD::Zero(2, 4);
  pick(0, 2) = 1;
  pick(1, 0) = 1;
  const auto picked = effective_embeddings(pick, e);
  CHECK(picked.row(0) == e.row(2));
  CHECK(picked.row(1) == e.row(0));
  CHECK_THROWS_AS(effective_embeddings(MatrixD(5, 3), e), ValidationError);
}

TEST_CASE("adapted forward equals running the merged model") {
  const auto base = micro_config(30);
  const auto m = random_adapted_model(base, 45, 10, 4);
  const auto batch = random_batch(45, 1);
  const auto adapted = adapted_forward_loss(m, batch);
  const auto merged = merge(m);
  CHECK(merged.config.vocab_size == 45);
  const auto plain = tinylm::forward_loss(merged.config, merged.params, batch);
  CHECK(std::abs(adapted.loss - plain.loss) < 1e-5f);
  for (std::size_t s = 0; s < batch.size(); ++s) CHECK((adapted.logits[s] - plain.logits[s]).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("identity adapters reproduce the base model bit for bit") {
  const auto base = micro_config(30);
  auto m = random_adapted_model(base, 30, 0, 5);
  m.a_in.values = MatrixF::Identity(30, 30);
  m.a_out.values = MatrixF::Identity(30, 30);
  const auto batch = random_batch(30, 2);
  const auto adapted = adapted_forward_loss(m, batch);
  const auto plain = tinylm::forward_loss(base, m.base, batch);
  CHECK(adapted.loss == plain.loss);
  for (std::size_t s = 0; s < batch.size(); ++s) CHECK(adapted.logits[s] == plain.logits[s]);
}

TEST_CASE("input rows are gathered in sequence order") {
  const auto base = micro_config(20);
  const auto m = random_adapted_model(base, 25, 5, 6).cast<double>();
  const std::vector<TokenId> ids{24, 3, 3, 17, 0};
  const auto merged_in = effective_embeddings(m.a_in.values, m.base.embed_in);
  const auto adapted = adapted_forward_loss(m, {ids});
  auto plain = m.base;
  plain.embed_in = merged_in;
  plain.embed_out = effective_embeddings(m.a_out.values, m.base.embed_out);
  auto cfg = base;
  cfg.vocab_size = 25;
  const auto ref = tinylm::forward_loss(cfg, plain, {ids});
  CHECK(max_abs(adapted.logits[0] - ref.logits[0]) < 1e-6);
}

TEST_CASE("auxiliary loss values") {
  AdapterMatrix<double> a;
  a.values = MatrixD::Zero(3, 4);
  a.values(0, 0) = 1;
  a.values(2, 1) = 1;
  a.overlap_ids = {0, 2};
  a.init_overlap_rows = MatrixD::Zero(2, 4);
  a.init_overlap_rows(0, 0) = 1;
  a.init_overlap_rows(1, 1) = 1;
  CHECK(aux_loss(a) == 0.0);

  a.values(0, 3) = 0.3;
  a.values(2, 1) = 1;
  CHECK(std::abs(aux_loss(a) - 0.15) < 1e-7);

  a.values(0, 3) = 0.1;
  a.values(2, 1) = 1.5;
  CHECK(std::abs(aux_loss(a) - 0.3) < 1e-7);

  a.values(1, 2) = 100;
  CHECK(std::abs(aux_loss(a) - 0.3) < 1e-7);

  AdapterMatrix<double> none{MatrixD::Ones(2, 2), MatrixD(0, 2), {}};
  CHECK(aux_loss(none) == 0.0);
  MatrixD g = MatrixD::Zero(2, 2);
  add_aux_gradient(none, 1.0, g);
  CHECK(g.isZero(0));
}

TEST_CASE("auxiliary gradient matches finite differences and is zero at rest") {
  auto base = micro_config(12);
  auto m = random_adapted_model(base, 15, 6, 9, 0.2f).cast<double>();
  MatrixD g = MatrixD::Zero(15, 12);
  add_aux_gradient(m.a_in, 1.0, g);
  for (Eigen::Index i = 0; i < 15; ++i)
    for (Eigen::Index j = 0; j < 12; j += 3) {
      auto q = m.a_in;
      const double eps = 1e-6;
      q.values(i, j) += eps;
      const double up = aux_loss(q);
      q.values(i, j) -= 2 * eps;
      const double down = aux_loss(q);
      CHECK(std::abs((up - down) / (2 * eps) - g(i, j)) < 1e-6);
    }
  auto rest = random_adapted_model(base, 15, 6, 9).cast<double>();
  MatrixD g0 = MatrixD::Zero(15, 12);
  add_aux_gradient(rest.a_in, 1.0, g0);
  CHECK(g0.isZero(0));
}

TEST_CASE("adapter gradients match central differences") {
  const auto base = micro_config(14);
  const auto m = random_adapted_model(base, 18, 5, 10, 0.1f).cast<double>();
  const auto batch = random_batch(18, 3, 2, 8);
  const double alpha = 0.7;
  const auto g = adapter_loss_and_grad(m, batch, alpha);
  double worst = 0;
  for (int which = 0; which < 2; ++which) {
    const MatrixD& grad = which == 0 ? g.d_in : g.d_out;
    for (Eigen::Index i = 0; i < grad.size(); i += 5) {
      auto q = m;
      auto& v = which == 0 ? q.a_in.values : q.a_out.values;
      const double keep = v.data()[i], eps = 1e-5;
      v.data()[i] = keep + eps;
      const double up = adapter_loss(q, batch, alpha).total;
      v.data()[i] = keep - eps;
      const double down = adapter_loss(q, batch, alpha).total;
      worst = std::max(worst, std::abs((up - down) / (2 * eps) - grad.data()[i]));
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("loss terms compose") {
  const auto base = micro_config(14);
  const auto m = random_adapted_model(base, 18, 5, 11, 0.1f);
  const auto batch = random_batch(18, 4);
  const auto t = adapter_loss(m, batch, 2.0f);
  CHECK(t.aux_in > 0);
  CHECK(t.aux == doctest::Approx(0.5 * (t.aux_in + t.aux_out)));
  CHECK(t.total == doctest::Approx(t.lm + 2.0 * t.aux));
  const auto zero = adapter_loss_and_grad(m, batch, 0.0f);
  CHECK(zero.loss.total == zero.loss.lm);
  CHECK(std::abs(zero.loss.lm - static_cast<double>(adapted_forward_loss(m, batch).loss)) < 1e-6);
}

TEST_CASE("training moves only the adapters and is deterministic") {
  const auto base = micro_config(20);
  const auto start = random_adapted_model(base, 26, 8, 12);
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.batch_size = 2;
  cfg.seq_len = 12;
  cfg.seed = 4;
  cfg.optimizer.weight_decay = 0.3;
  auto a = start, b = start;
  const auto tokens = periodic(500, 26);
  const auto logs = train_adapter(a, tokens, cfg);
  train_adapter(b, tokens, cfg);
  REQUIRE(logs.size() == 30);
  CHECK(a.base == start.base);
  CHECK(a.a_in.values != start.a_in.values);
  CHECK(a.a_out.values != start.a_out.values);
  CHECK(a.a_in == b.a_in);
  CHECK(a.a_out == b.a_out);
  CHECK(a.a_in.init_overlap_rows == start.a_in.init_overlap_rows);

  auto bad = std::make_shared<std::vector<TokenId>>(100, 26);
  CHECK_THROWS_AS(train_adapter(a, bad, cfg), ValidationError);
  cfg.alpha = -1;
  CHECK_THROWS_AS(train_adapter(a, tokens, cfg), ConfigError);
}

TEST_CASE("a large alpha keeps overlap rows near their start") {
  const auto base = micro_config(20);
  const auto start = random_adapted_model(base, 26, 8, 13);
  TrainConfig cfg;
  cfg.steps = 40;
  cfg.batch_size = 2;
  cfg.seq_len = 12;
  cfg.optimizer.lr = 1e-2;
  auto free = start, tied = start;
  const auto tokens = periodic(500, 26);
  train_adapter(free, tokens, cfg);
  cfg.alpha = 1e6;
  train_adapter(tied, tokens, cfg);
  CHECK(aux_loss(tied.a_in) < aux_loss(free.a_in));
  CHECK(aux_loss(tied.a_out) < aux_loss(free.a_out));
}

TEST_CASE("merge is deterministic and keeps the body") {
  const auto m = random_adapted_model(micro_config(20), 26, 8, 14);
  const auto x = merge(m), y = merge(m);
  CHECK(x.params == y.params);
  CHECK(x.params.pos == m.base.pos);
  CHECK(x.params.layers[1].w2 == m.base.layers[1].w2);
  CHECK(x.params.embed_in == effective_embeddings(m.a_in.values, m.base.embed_in));
}

TEST_CASE("full fine-tuning updates every tensor") {
  const auto m = random_adapted_model(micro_config(20), 26, 8, 15);
  const auto merged = merge(m);
  tinylm::BatchSampler sampler(periodic(600, 26), 12, 2, 1);
  tinylm::OptimizerConfig oc;
  oc.lr = 1e-3;
  const auto same = finetune_full(merged, sampler, 0, oc);
  CHECK(same.params == merged.params);
  const auto tuned = finetune_full(merged, sampler, 20, oc);
  std::vector<MatrixF> before;
  merged.params.for_each([&](const std::string&, const MatrixF& t) { before.push_back(t); });
  std::size_t k = 0;
  tuned.params.for_each([&](const std::string& name, const MatrixF& t) {
    INFO(name);
    CHECK(t != before[k++]);
  });
  const auto stream = periodic(600, 26);
  const tinylm::TokenBatch held{std::vector<TokenId>(stream->begin(), stream->begin() + 12)};
  CHECK(tinylm::forward_loss(tuned.config, tuned.params, held).loss <=
        tinylm::forward_loss(merged.config, merged.params, held).loss);
}

TEST_CASE("adapter checkpoints round trip") {
  testing::TempDir dir;
  const auto m = random_adapted_model(micro_config(20), 26, 8, 16, 0.05f);
  AdapterCheckpoint ck{m.a_in, m.a_out, {{"seed", 3}}};
  save_adapters(ck, dir / "a.vadt");
  const auto back = load_adapters(dir / "a.vadt");
  CHECK(back.a_in == ck.a_in);
  CHECK(back.a_out == ck.a_out);
  CHECK(back.meta["seed"] == 3);
  CHECK(aux_loss(back.a_in) == aux_loss(ck.a_in));

  tinylm::save_checkpoint({micro_config(20), m.base, "", {}}, dir / "m.vadt");
  CHECK_THROWS_AS(load_adapters(dir / "m.vadt"), FormatError);
}

TEST_CASE("adapter shape validation") {
  auto m = random_adapted_model(micro_config(20), 26, 8, 17);
  m.a_out.values = MatrixF::Zero(25, 20);
  CHECK_THROWS_AS(m.validate(), ValidationError);
  auto n = random_adapted_model(micro_config(20), 26, 8, 17);
  n.a_in.values = MatrixF::Zero(26, 21);
  CHECK_THROWS_AS(adapted_forward_loss(n, random_batch(26, 1)), ValidationError);
}

}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "core/autodiff.hpp"
#include "core/model.hpp"
#include "core/rng.hpp"

using namespace shlab;

namespace {

ModelConfig desk_config() { return ModelConfig{}; }

TokenBatch batch_of(int vocab, Eigen::Index rows, Eigen::Index cols,
                    uint64_t seed) {
  Rng rng(seed);
  TokenBatch tb;
  tb.seq.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      tb.seq(i, j) = static_cast<int32_t>(rng.below(vocab));
    }
  }
  return tb;
}

}  // namespace

TEST_CASE("config validation enforces the divisibility rule") {
  ModelConfig ok = desk_config();
  ok.hidden_dim = 64;
  ok.heads = 4;
  CHECK_NOTHROW(ok.validate());
  ModelConfig bad = ok;
  bad.heads = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  ModelConfig v = ok;
  v.vocab_size = 1;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  ModelConfig c = ok;
  c.context_len = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ModelConfig l = ok;
  l.layers = 0;
  CHECK_THROWS_AS(l.validate(), ConfigError);
}

TEST_CASE("init is deterministic and finite") {
  ModelState a = init_transformer(desk_config());
  ModelState b = init_transformer(desk_config());
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    CHECK(a.tensors[i].first == b.tensors[i].first);
    CHECK(a.tensors[i].second == b.tensors[i].second);  // bit-identical
    CHECK(a.tensors[i].second.allFinite());
  }
  ModelConfig other = desk_config();
  other.seed = 2;
  ModelState c = init_transformer(other);
  CHECK(a.tensors[1].second != c.tensors[1].second);
}

TEST_CASE("parameter count matches the closed form from the architecture") {
  // Enumerated tensor sizes must sum to the closed-form count:
  //   V*d + C*d + d                       (embeddings, final gain)
  // + L * (2d + 4 d^2 + 2 * 4 d^2)        (per-layer gains, attention, MLP)
  // + d*V                                 (unembedding)
  for (auto [L, H, d, V, C] :
       {std::tuple{2, 4, 64, 64, 64}, std::tuple{1, 2, 8, 11, 6},
        std::tuple{3, 1, 12, 5, 9}}) {
    ModelConfig cfg;
    cfg.layers = L;
    cfg.heads = H;
    cfg.hidden_dim = d;
    cfg.vocab_size = V;
    cfg.context_len = C;
    const long closed = static_cast<long>(V) * d + static_cast<long>(C) * d +
                        d +
                        static_cast<long>(L) *
                            (2L * d + 4L * d * d + 8L * d * d) +
                        static_cast<long>(d) * V;
    ModelState st = init_transformer(cfg);
    CHECK(st.param_count() == closed);
    CHECK(TransformerLoss(cfg).param_count() == closed);
  }
  // Desk default: 110912 parameters.
  CHECK(init_transformer(desk_config()).param_count() == 110912);
}

TEST_CASE("tensor names are a pure function of config and sorted") {
  ModelState st = init_transformer(desk_config());
  std::vector<std::string> names;
  for (const auto& [n, m] : st.tensors) names.push_back(n);
  CHECK(std::is_sorted(names.begin(), names.end()));
  CHECK(std::set<std::string>(names.begin(), names.end()).size() ==
        names.size());
  ModelConfig again = desk_config();
  again.seed = 999;  // seed must not affect the name set
  ModelState st2 = init_transformer(again);
  for (size_t i = 0; i < names.size(); ++i) {
    CHECK(st2.tensors[i].first == names[i]);
  }
}

TEST_CASE("flatten and unflatten are mutually inverse") {
  ModelState st = init_transformer(desk_config());
  ParamVector v = st.flatten();
  ModelState rt = unflatten(st.config, v);
  REQUIRE(rt.tensors.size() == st.tensors.size());
  for (size_t i = 0; i < st.tensors.size(); ++i) {
    CHECK(rt.tensors[i].first == st.tensors[i].first);
    CHECK(rt.tensors[i].second == st.tensors[i].second);
  }
  ParamVector v2 = rt.flatten();
  CHECK(v.vec() == v2.vec());
}

TEST_CASE("flat norm decomposes over per-tensor norms") {
  ModelState st = init_transformer(desk_config());
  const double whole = st.flatten().vec().squaredNorm();
  double parts = 0.0;
  for (const auto& [n, m] : st.tensors) parts += m.squaredNorm();
  CHECK(whole == doctest::Approx(parts).epsilon(1e-12));
}

TEST_CASE("unflatten rejects wrong lengths") {
  ModelState st = init_transformer(desk_config());
  CHECK_THROWS_AS(unflatten(st.config, ParamVector::zeros(st.param_count() - 1)),
                  StructureError);
  CHECK_THROWS_AS(unflatten(st.config, ParamVector::zeros(1)), StructureError);
}

TEST_CASE("uniform logits give loss ln vocab_size") {
  // Zero unembedding forces identical logits regardless of the stream.
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden_dim = 16;
  cfg.vocab_size = 64;
  cfg.context_len = 8;
  ModelState st = init_transformer(cfg);
  for (auto& [name, m] : st.tensors) {
    if (name == "unembed.w") m.setZero();
  }
  const double loss = lm_loss(st, batch_of(cfg.vocab_size, 4, 8, 3));
  CHECK(loss == doctest::Approx(std::log(64.0)).epsilon(1e-12));
}

TEST_CASE("loss is permutation-invariant to batch order") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden_dim = 16;
  cfg.vocab_size = 11;
  cfg.context_len = 8;
  ModelState st = init_transformer(cfg);
  TokenBatch tb = batch_of(cfg.vocab_size, 5, 8, 17);
  TokenBatch flipped;
  flipped.seq = tb.seq.colwise().reverse().eval();  // reverse row order
  const double a = lm_loss(st, tb);
  const double b = lm_loss(st, flipped);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("out-of-range token ids are rejected with their position") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden_dim = 16;
  cfg.vocab_size = 11;
  cfg.context_len = 8;
  ModelState st = init_transformer(cfg);
  TokenBatch tb = batch_of(cfg.vocab_size, 2, 6, 5);
  tb.seq(1, 3) = 11;  // == vocab_size, first invalid id
  try {
    lm_loss(st, tb);
    FAIL("expected rejection");
  } catch (const DomainError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("11") != std::string::npos);
    CHECK(msg.find("sequence 1") != std::string::npos);
    CHECK(msg.find("position 3") != std::string::npos);
  }
}

TEST_CASE("sequences longer than the context are rejected") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden_dim = 16;
  cfg.vocab_size = 11;
  cfg.context_len = 4;
  ModelState st = init_transformer(cfg);
  CHECK_NOTHROW(lm_loss(st, batch_of(cfg.vocab_size, 2, 5, 5)));
  CHECK_THROWS_AS(lm_loss(st, batch_of(cfg.vocab_size, 2, 6, 5)),
                  StructureError);
}

TEST_CASE("mlp regression loss gradient matches finite differences") {
  MlpConfig cfg;
  cfg.in_dim = 3;
  cfg.hidden_dim = 5;
  cfg.out_dim = 2;
  cfg.seed = 4;
  MlpRegressionLoss f(cfg);
  ModelState st = init_mlp(cfg);
  CHECK(st.param_count() == 5 + 2 + 3 * 5 + 5 * 2);

  Rng rng(9);
  VecBatch vb;
  vb.x.resize(7, 3);
  vb.y.resize(7, 2);
  for (Eigen::Index i = 0; i < vb.x.size(); ++i) vb.x(i / 3, i % 3) = rng.normal();
  for (Eigen::Index i = 0; i < vb.y.size(); ++i) vb.y(i / 2, i % 2) = rng.normal();
  Batch batch(vb);

  const Eigen::VectorXd theta = st.flatten().vec();
  auto vg = value_and_grad(f, ParamVector(theta), batch);
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Eigen::VectorXd up = theta, dn = theta;
    up[i] += 1e-6;
    dn[i] -= 1e-6;
    const double fd =
        (loss_value_t<double>(f, up, batch) - loss_value_t<double>(f, dn, batch)) /
        2e-6;
    CHECK(std::abs(vg.grad[i] - fd) < 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("model state kind routing") {
  CHECK_THROWS_AS(make_loss(json{{"kind", "bogus"}}), ConfigError);
  CHECK_THROWS_AS(make_loss(json::object()), ConfigError);
  auto t = make_loss(desk_config().to_json());
  CHECK(t->param_count() == 110912);
}

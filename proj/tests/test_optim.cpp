#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "core/data.hpp"
#include "core/model.hpp"
#include "core/optim.hpp"
#include "core/rng.hpp"
#include "oracles.hpp"

using namespace shlab;

namespace {

Batch dummy_batch() { return VecBatch{}; }

template <typename T>
bool same_bits(const VecX<T>& a, const VecX<T>& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (!(a[i] == b[i])) return false;
  }
  return true;
}

// Scalar re-implementation of the update rule, no Eigen, used as the
// reference for the fuzz comparison below.
void reference_adamw(std::vector<double>& theta, const std::vector<double>& g,
                     std::vector<double>& m, std::vector<double>& v,
                     int64_t& t, double lr, const OptimConfig& c) {
  t += 1;
  const double bc1 = 1.0 / (1.0 - std::pow(c.beta1, double(t)));
  const double bc2 = 1.0 / (1.0 - std::pow(c.beta2, double(t)));
  for (size_t i = 0; i < theta.size(); ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double mhat = m[i] * bc1;
    const double vhat = v[i] * bc2;
    theta[i] = theta[i] - lr * mhat / (std::sqrt(vhat) + c.adam_epsilon) -
               lr * c.weight_decay * theta[i];
  }
}

}  // namespace

TEST_CASE("config validation") {
  OptimConfig c;
  c.beta1 = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = OptimConfig{};
  c.weight_decay = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = OptimConfig{};
  c.adam_epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  SAMConfig s;
  s.rho = -0.01;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.rho = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(s.validate(), ConfigError);

  CHECK_THROWS_AS(AdamWState<double>::zeros(0), StructureError);
}

TEST_CASE("first step with unit gradient moves by lr / (1 + eps)") {
  VecX<double> theta(1);
  theta << 1.0;
  VecX<double> g(1);
  g << 1.0;
  auto st = AdamWState<double>::zeros(1);
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(theta, g, st, 0.1, cfg);
  CHECK(st.t == 1);
  CHECK(std::abs(theta[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15);
}

TEST_CASE("zero gradient leaves fresh parameters untouched") {
  VecX<double> theta(3);
  theta << 0.3, -1.2, 7.0;
  const VecX<double> before = theta;
  auto st = AdamWState<double>::zeros(3);
  OptimConfig cfg;
  adamw_step(theta, VecX<double>(VecX<double>::Zero(3)), st, 0.5, cfg);
  CHECK(same_bits(theta, before));
  CHECK(st.t == 1);
}

TEST_CASE("zero gradient with decay shrinks by exactly lr * wd") {
  VecX<double> theta(2);
  theta << 2.0, -4.0;
  auto st = AdamWState<double>::zeros(2);
  OptimConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(theta, VecX<double>(VecX<double>::Zero(2)), st, 0.1, cfg);
  CHECK(std::abs(theta[0] - 2.0 * (1.0 - 0.1 * 0.1)) < 1e-15);
  CHECK(std::abs(theta[1] - (-4.0) * (1.0 - 0.1 * 0.1)) < 1e-15);
}

TEST_CASE("lr zero freezes parameters but still advances the step count") {
  VecX<double> theta(2);
  theta << 1.0, 2.0;
  const VecX<double> before = theta;
  VecX<double> g(2);
  g << 0.5, -0.25;
  auto st = AdamWState<double>::zeros(2);
  OptimConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(theta, g, st, 0.0, cfg);
  CHECK(same_bits(theta, before));
  CHECK(st.t == 1);
  CHECK(st.m[0] != 0.0);
  CHECK(st.v[1] != 0.0);
}

TEST_CASE("update direction ignores positive gradient rescaling") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    VecX<double> theta(6), g(6);
    for (int i = 0; i < 6; ++i) {
      theta[i] = rng.normal();
      g[i] = rng.normal() + (rng.normal() > 0 ? 1.5 : -1.5);  // keep away from 0
    }
    OptimConfig cfg;
    cfg.weight_decay = 0.0;
    VecX<double> a = theta, b = theta;
    auto sa = AdamWState<double>::zeros(6);
    auto sb = AdamWState<double>::zeros(6);
    adamw_step(a, g, sa, 0.01, cfg);
    adamw_step(b, VecX<double>(3.7 * g), sb, 0.01, cfg);
    for (int i = 0; i < 6; ++i) {
      CHECK(std::signbit(a[i] - theta[i]) == std::signbit(b[i] - theta[i]));
    }
  }
}

TEST_CASE("fuzz against a scalar reference over several steps") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + int(rng.below(8));
    OptimConfig cfg;
    cfg.weight_decay = rng.uniform() < 0.5 ? 0.0 : 0.1 * rng.uniform();
    const double lr = std::pow(10.0, -1.0 - 2.0 * rng.uniform());
    VecX<double> theta(n);
    std::vector<double> rtheta(n);
    for (int i = 0; i < n; ++i) rtheta[i] = theta[i] = rng.normal();
    auto st = AdamWState<double>::zeros(n);
    std::vector<double> rm(n, 0.0), rv(n, 0.0);
    int64_t rt = 0;
    for (int step = 0; step < 5; ++step) {
      VecX<double> g(n);
      std::vector<double> rg(n);
      for (int i = 0; i < n; ++i) rg[i] = g[i] = rng.normal();
      adamw_step(theta, g, st, lr, cfg);
      reference_adamw(rtheta, rg, rm, rv, rt, lr, cfg);
    }
    CHECK(rt == st.t);
    for (int i = 0; i < n; ++i) {
      CHECK(theta[i] == doctest::Approx(rtheta[i]).epsilon(1e-14));
      CHECK(st.m[i] == doctest::Approx(rm[i]).epsilon(1e-14));
      CHECK(st.v[i] == doctest::Approx(rv[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("non-finite update names the first offending index") {
  VecX<double> theta(4);
  theta << 1.0, 1.0, 1.0, 1.0;
  VecX<double> g = VecX<double>::Zero(4);
  g[2] = std::numeric_limits<double>::quiet_NaN();
  auto st = AdamWState<double>::zeros(4);
  try {
    adamw_step(theta, g, st, 0.1, OptimConfig{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
}

TEST_CASE("sam with rho zero matches plain adamw bitwise") {
  MlpConfig mc;
  mc.in_dim = 3;
  mc.hidden_dim = 4;
  mc.out_dim = 2;
  MlpRegressionLoss loss(mc);
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = int(loss.param_count());
    VecX<double> theta(n);
    for (int i = 0; i < n; ++i) theta[i] = 0.3 * rng.normal();
    auto st = AdamWState<double>::zeros(n);
    st.t = int64_t(rng.below(50));
    for (int i = 0; i < n; ++i) {
      st.m[i] = 0.01 * rng.normal();
      st.v[i] = 0.01 * rng.uniform();
    }
    VecBatch vb;
    vb.x = Eigen::MatrixXd(2, 3);
    vb.y = Eigen::MatrixXd(2, 2);
    for (int i = 0; i < vb.x.size(); ++i) vb.x(i / 3, i % 3) = rng.normal();
    for (int i = 0; i < vb.y.size(); ++i) vb.y(i / 2, i % 2) = rng.normal();
    Batch batch = vb;
    OptimConfig cfg;
    cfg.weight_decay = trial % 2 ? 0.1 : 0.0;
    const double lr = 0.01 * (1.0 + rng.uniform());

    VecX<double> ta = theta, tb = theta;
    auto sa = st, sb = st;
    SAMConfig sam;
    sam.rho = 0.0;
    auto info = sam_step(ta, batch, loss, sa, lr, sam, cfg);
    CHECK(!info.ascent_skipped);

    VecX<double> g(n);
    {
      Eigen::VectorXd gd =
          value_and_grad(loss, ParamVector(Eigen::VectorXd(theta)), batch)
              .grad.vec();
      g = gd;
    }
    adamw_step(tb, g, sb, lr, cfg);

    REQUIRE(same_bits(ta, tb));
    REQUIRE(same_bits(sa.m, sb.m));
    REQUIRE(same_bits(sa.v, sb.v));
    REQUIRE(sa.t == sb.t);
  }
}

TEST_CASE("sam perturbation has l2 norm rho and points along the gradient") {
  // On f = 1/2 ||theta||^2 the gradient at theta + eps is theta + eps, so the
  // first moment of a fresh state recovers the perturbed gradient exactly.
  const int n = 5;
  QuadraticLoss loss(Mat::Identity(n, n), Eigen::VectorXd::Zero(n));
  Rng rng(31);
  VecX<double> theta(n);
  for (int i = 0; i < n; ++i) theta[i] = rng.normal();
  auto st = AdamWState<double>::zeros(n);
  SAMConfig sam;
  sam.rho = 0.05;
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  const VecX<double> theta0 = theta;
  sam_step(theta, dummy_batch(), loss, st, 0.0, sam, cfg);

  const Eigen::VectorXd g2 = st.m / (1.0 - cfg.beta1);
  const Eigen::VectorXd eps = g2 - theta0;
  CHECK(std::abs(eps.norm() - sam.rho) <= 1e-12 * sam.rho);
  // direction: eps parallel to gradient theta0
  const double cosine = eps.dot(theta0) / (eps.norm() * theta0.norm());
  CHECK(cosine == doctest::Approx(1.0).epsilon(1e-12));
  // lr = 0 also proves theta was restored, not recomputed
  CHECK(same_bits(theta, theta0));
}

TEST_CASE("sam perturbed gradient matches the closed form on a quadratic") {
  Mat a(2, 2);
  a << 2.0, 0.0, 0.0, 4.0;
  QuadraticLoss loss(a, Eigen::VectorXd::Zero(2));
  VecX<double> theta(2);
  theta << 1.0, 1.0;
  auto st = AdamWState<double>::zeros(2);
  SAMConfig sam;
  sam.rho = 0.05;
  sam_step(theta, dummy_batch(), loss, st, 0.0, sam, OptimConfig{});

  const Eigen::VectorXd g = a * Eigen::Vector2d(1.0, 1.0);
  const Eigen::VectorXd expected = a * (Eigen::Vector2d(1.0, 1.0) + sam.rho * g / g.norm());
  const Eigen::VectorXd got = st.m / (1.0 - 0.9);
  CHECK(got[0] == doctest::Approx(expected[0]).epsilon(1e-12));
  CHECK(got[1] == doctest::Approx(expected[1]).epsilon(1e-12));
}

TEST_CASE("sam at a stationary point skips the ascent and reports it") {
  Mat a = Mat::Identity(3, 3);
  QuadraticLoss loss(a, Eigen::VectorXd::Zero(3));
  VecX<double> theta = VecX<double>::Zero(3);
  auto st = AdamWState<double>::zeros(3);
  SAMConfig sam;
  sam.rho = 0.05;
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  auto info = sam_step(theta, dummy_batch(), loss, st, 0.1, sam, cfg);
  CHECK(info.ascent_skipped);
  CHECK(theta.norm() == 0.0);
  CHECK(info.loss == 0.0);
}

TEST_CASE("both optimizers drive a convex quadratic to its minimum") {
  Mat a(2, 2);
  a << 2.0, 0.0, 0.0, 4.0;
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  for (bool use_sam : {false, true}) {
    QuadraticLoss loss(a, Eigen::VectorXd::Zero(2));
    VecX<double> theta(2);
    theta << 5.0, -3.0;
    auto st = AdamWState<double>::zeros(2);
    SAMConfig sam;
    sam.rho = use_sam ? 0.05 : 0.0;
    for (int i = 0; i < 400; ++i) {
      sam_step(theta, dummy_batch(), loss, st, 0.05, sam, cfg);
    }
    CHECK(theta.norm() < 0.05);
  }
}

TEST_CASE("float instantiation runs and rho zero identity holds bitwise") {
  MlpConfig mc;
  mc.in_dim = 2;
  mc.hidden_dim = 3;
  mc.out_dim = 1;
  MlpRegressionLoss loss(mc);
  const int n = int(loss.param_count());
  Rng rng(41);
  VecX<float> theta(n);
  for (int i = 0; i < n; ++i) theta[i] = float(0.3 * rng.normal());
  VecBatch vb;
  vb.x = Eigen::MatrixXd(3, 2);
  vb.y = Eigen::MatrixXd(3, 1);
  for (int i = 0; i < vb.x.size(); ++i) vb.x(i / 2, i % 2) = rng.normal();
  for (int i = 0; i < vb.y.size(); ++i) vb.y(i, 0) = rng.normal();
  Batch batch = vb;
  OptimConfig cfg;
  cfg.weight_decay = 0.1;

  VecX<float> ta = theta, tb = theta;
  auto sa = AdamWState<float>::zeros(n);
  auto sb = AdamWState<float>::zeros(n);
  SAMConfig sam;
  sam.rho = 0.0;
  sam_step(ta, batch, loss, sa, 3e-4, sam, cfg);
  VecX<float> g = value_and_grad_t<float>(loss, VecX<float>(theta), batch).second;
  adamw_step(tb, g, sb, 3e-4, cfg);
  REQUIRE(same_bits(ta, tb));
  REQUIRE(same_bits(sa.m, sb.m));
  REQUIRE(same_bits(sa.v, sb.v));

  // and a nonzero-rho float step stays finite and moves
  SAMConfig sam2;
  sam2.rho = 0.05;
  auto info = sam_step(ta, batch, loss, sa, 3e-4, sam2, cfg);
  CHECK(!info.ascent_skipped);
  CHECK(std::isfinite(double(info.loss)));
  CHECK(!same_bits(ta, tb));
}

TEST_CASE("fisher diagonal equals squared gradients averaged over the draw") {
  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.hidden_dim = 8;
  mc.vocab_size = 64;
  mc.context_len = 8;
  mc.seed = 5;
  ModelState state = init_transformer(mc);

  CorpusSpec spec;
  spec.family = "markov2";
  spec.seed = 3;
  spec.n_tokens = 8192;
  spec.split = "train";

  auto loss = make_loss(state.config);
  const ParamVector theta = state.flatten();
  BatchStream stream(spec, 32, mc.context_len);
  const int64_t n_available = stream.n_windows() / 32;
  REQUIRE(n_available >= 2);

  for (int n_batches : {1, 8}) {
    const uint64_t seed = 17;
    ParamVector got = fisher_diag(state, spec, n_batches, seed);

    Rng rng(derive_seed(seed, "fisher"));
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(theta.size());
    for (int b = 0; b < n_batches; ++b) {
      const int64_t idx = int64_t(rng.below(uint64_t(n_available)));
      Batch batch = stream.batch(idx);
      acc.array() += value_and_grad(*loss, theta, batch).grad.vec().array().square();
    }
    acc /= double(n_batches);
    REQUIRE(got.size() == acc.size());
    for (Eigen::Index i = 0; i < acc.size(); ++i) {
      CHECK(got[i] == acc[i]);
      CHECK(got[i] >= 0.0);
    }
  }

  CHECK_THROWS_AS(fisher_diag(state, spec, 0, 1), ConfigError);
}

TEST_CASE("ewc penalty value and gradient") {
  MlpConfig mc;
  mc.in_dim = 2;
  mc.hidden_dim = 3;
  mc.out_dim = 1;
  mc.seed = 9;
  ModelState state = init_mlp(mc);
  MlpRegressionLoss base(mc);
  const int n = int(base.param_count());

  Rng rng(51);
  Eigen::VectorXd anchor(n), fisher(n), th(n);
  for (int i = 0; i < n; ++i) {
    anchor[i] = rng.normal();
    fisher[i] = rng.uniform();  // >= 0
    th[i] = rng.normal();
  }
  ParamVector theta(th);
  VecBatch vb;
  vb.x = Eigen::MatrixXd(4, 2);
  vb.y = Eigen::MatrixXd(4, 1);
  for (int i = 0; i < vb.x.size(); ++i) vb.x(i / 2, i % 2) = rng.normal();
  for (int i = 0; i < vb.y.size(); ++i) vb.y(i, 0) = rng.normal();
  Batch batch = vb;

  const double base_val = loss_value(base, theta, batch);
  const Eigen::VectorXd base_grad = value_and_grad(base, theta, batch).grad.vec();

  SUBCASE("lambda zero and theta at the anchor are both the base loss") {
    EWCConfig c0(0.0, ParamVector(fisher), ParamVector(anchor));
    CHECK(ewc_loss(base_val, theta, c0) == base_val);
    EwcAugmentedLoss aug0(base, c0);
    CHECK(loss_value(aug0, theta, batch) == base_val);

    EWCConfig c1(3.0, ParamVector(fisher), ParamVector(anchor));
    CHECK(ewc_loss(loss_value(base, ParamVector(anchor), batch),
                   ParamVector(anchor), c1) ==
          loss_value(base, ParamVector(anchor), batch));
  }

  SUBCASE("penalty matches the hand-expanded sum") {
    EWCConfig c(2.5, ParamVector(fisher), ParamVector(anchor));
    double pen = 0.0;
    for (int i = 0; i < n; ++i) {
      pen += fisher[i] * (th[i] - anchor[i]) * (th[i] - anchor[i]);
    }
    CHECK(ewc_loss(base_val, theta, c) ==
          doctest::Approx(base_val + 2.5 * pen).epsilon(1e-14));

    EwcAugmentedLoss aug(base, c);
    CHECK(loss_value(aug, theta, batch) ==
          doctest::Approx(base_val + 2.5 * pen).epsilon(1e-14));
  }

  SUBCASE("gradient adds 2 lambda F (theta - anchor)") {
    EWCConfig c(2.5, ParamVector(fisher), ParamVector(anchor));
    EwcAugmentedLoss aug(base, c);
    const Eigen::VectorXd got = value_and_grad(aug, theta, batch).grad.vec();
    const Eigen::VectorXd expected =
        base_grad.array() + 2.0 * 2.5 * fisher.array() * (th - anchor).array();
    for (int i = 0; i < n; ++i) {
      CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    }

    const Eigen::VectorXd fd = oracle::fd_gradient(aug, th, batch);
    for (int i = 0; i < n; ++i) {
      CHECK(got[i] == doctest::Approx(fd[i]).epsilon(1e-6));
    }
  }

  SUBCASE("mismatched lengths are rejected") {
    CHECK_THROWS_AS(
        EWCConfig(1.0, ParamVector::zeros(n), ParamVector::zeros(n + 1)),
        StructureError);
    Eigen::VectorXd bad = fisher;
    bad[0] = -1.0;
    CHECK_THROWS_AS(EWCConfig(1.0, ParamVector(bad), ParamVector(anchor)),
                    ConfigError);
    EWCConfig c(1.0, ParamVector::zeros(n + 1), ParamVector::zeros(n + 1));
    CHECK_THROWS_AS(EwcAugmentedLoss(base, c), StructureError);
  }
}

TEST_CASE("huge ewc lambda pins training to the anchor") {
  MlpConfig mc;
  mc.in_dim = 2;
  mc.hidden_dim = 3;
  mc.out_dim = 1;
  mc.seed = 13;
  ModelState state = init_mlp(mc);
  MlpRegressionLoss base(mc);
  const int n = int(base.param_count());

  Rng rng(61);
  Eigen::VectorXd anchor = state.flatten().vec();
  Eigen::VectorXd start = anchor;
  for (int i = 0; i < n; ++i) start[i] += 0.5 * rng.normal();
  EWCConfig c(1e6, ParamVector(Eigen::VectorXd::Ones(n)), ParamVector(anchor));
  EwcAugmentedLoss aug(base, c);

  VecBatch vb;
  vb.x = Eigen::MatrixXd(8, 2);
  vb.y = Eigen::MatrixXd(8, 1);
  for (int i = 0; i < vb.x.size(); ++i) vb.x(i / 2, i % 2) = rng.normal();
  for (int i = 0; i < vb.y.size(); ++i) vb.y(i, 0) = rng.normal();
  Batch batch = vb;

  VecX<double> theta = start;
  auto st = AdamWState<double>::zeros(n);
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<double> dist;
  dist.push_back((Eigen::VectorXd(theta) - anchor).norm());
  for (int step = 1; step <= 100; ++step) {
    VecX<double> g =
        value_and_grad(aug, ParamVector(Eigen::VectorXd(theta)), batch).grad.vec();
    adamw_step(theta, g, st, 1e-3, cfg);
    if (step % 10 == 0) dist.push_back((Eigen::VectorXd(theta) - anchor).norm());
  }
  for (size_t i = 1; i < dist.size(); ++i) CHECK(dist[i] < dist[i - 1]);
  // AdamW moves at most ~lr per coordinate per step, so expect roughly
  // 100 * lr * sqrt(n) of travel toward the anchor, not full convergence.
  CHECK(dist.back() < dist.front() - 0.5 * 100 * 1e-3 * std::sqrt(double(n)));
}

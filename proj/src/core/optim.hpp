#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "autodiff.hpp"
#include "data.hpp"
#include "loss.hpp"
#include "param_vector.hpp"

namespace shlab {

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.0;  // 0.1 pretraining, 0.0 fine-tuning

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must be in [0, 1)");
    if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  }
};

struct SAMConfig {
  double rho = 0.05;  // ascent radius, global l2 over the whole vector

  void validate() const {
    if (!(rho >= 0.0) || !std::isfinite(rho)) {
      throw ConfigError("sam rho must be finite and >= 0");
    }
  }
};

template <typename T>
struct AdamWState {
  VecX<T> m;
  VecX<T> v;
  int64_t t = 0;

  static AdamWState zeros(Eigen::Index n) {
    if (n < 1) throw StructureError("optimizer state needs >= 1 parameter");
    return {VecX<T>::Zero(n), VecX<T>::Zero(n), 0};
  }
};

namespace detail {
template <typename T>
void require_finite_update(const VecX<T>& theta) {
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (!scalar::finite(theta[i])) {
      throw NumericError("parameter update is not finite at flat index " +
                         std::to_string(i));
    }
  }
}
}  // namespace detail

// One AdamW update in place. Bias correction uses t after the increment;
// weight decay is decoupled and applied to the incoming theta:
//   theta' = theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
template <typename T>
void adamw_step(VecX<T>& theta, const VecX<T>& g, AdamWState<T>& st, double lr,
                const OptimConfig& cfg) {
  cfg.validate();
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (g.size() != theta.size() || st.m.size() != theta.size() ||
      st.v.size() != theta.size()) {
    throw StructureError("adamw_step: vector lengths disagree");
  }
  st.t += 1;
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  st.m = b1 * st.m + (T(1.0) - b1) * g;
  st.v = b2 * st.v + (T(1.0) - b2) * g.cwiseProduct(g);
  const T bc1 = T(1.0 / (1.0 - std::pow(cfg.beta1, double(st.t))));
  const T bc2 = T(1.0 / (1.0 - std::pow(cfg.beta2, double(st.t))));
  const T eps = T(cfg.adam_epsilon);
  const T step = T(lr);
  const T decay = T(lr * cfg.weight_decay);
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    using std::sqrt;
    const T mhat = st.m[i] * bc1;
    const T vhat = st.v[i] * bc2;
    theta[i] = theta[i] - step * mhat / (sqrt(vhat) + eps) - decay * theta[i];
  }
  detail::require_finite_update(theta);
}

template <typename T>
struct SamStepInfo {
  T loss;                     // loss at the unperturbed theta
  bool ascent_skipped = false;  // zero gradient with rho > 0
};

// SAM wrapped around AdamW: ascend rho * g / ||g||, re-evaluate the gradient
// on the SAME batch, restore theta exactly (kept copy, not arithmetic
// inverse), then hand the perturbed gradient to adamw_step, so moments see
// the perturbed gradient and decay applies at the original theta.
// rho = 0 short-circuits into a single evaluation, making the adamw identity
// hold bitwise at half cost.
template <typename T>
SamStepInfo<T> sam_step(VecX<T>& theta, const Batch& batch,
                        const LossFunction& f, AdamWState<T>& st, double lr,
                        const SAMConfig& sam, const OptimConfig& cfg) {
  sam.validate();
  auto [loss, g] = value_and_grad_t<T>(f, theta, batch);
  if (sam.rho == 0.0) {
    adamw_step(theta, g, st, lr, cfg);
    return {loss, false};
  }
  using std::sqrt;
  T norm_sq = T(0.0);
  for (Eigen::Index i = 0; i < g.size(); ++i) norm_sq += g[i] * g[i];
  if (!(scalar::value_of(norm_sq) > 0.0)) {
    adamw_step(theta, g, st, lr, cfg);  // skip-ascent fallback
    return {loss, true};
  }
  const T scale = T(sam.rho) / sqrt(norm_sq);
  const VecX<T> original = theta;
  theta += scale * g;
  VecX<T> g_perturbed = value_and_grad_t<T>(f, theta, batch).second;
  theta = original;
  adamw_step(theta, g_perturbed, st, lr, cfg);
  return {loss, false};
}

struct EWCConfig {
  double lambda = 0.0;
  ParamVector fisher;
  ParamVector anchor;

  EWCConfig(double lambda_, ParamVector fisher_, ParamVector anchor_)
      : lambda(lambda_), fisher(std::move(fisher_)), anchor(std::move(anchor_)) {
    if (!(lambda >= 0.0)) throw ConfigError("ewc lambda must be >= 0");
    if (fisher.size() != anchor.size()) {
      throw StructureError("ewc fisher and anchor lengths disagree");
    }
    for (Eigen::Index i = 0; i < fisher.size(); ++i) {
      if (!(fisher[i] >= 0.0)) {
        throw ConfigError("ewc fisher entries must be >= 0");
      }
    }
  }
};

// base + lambda * sum_i F_i (theta_i - anchor_i)^2, plain arithmetic.
inline double ewc_loss(double base, const ParamVector& theta,
                       const EWCConfig& cfg) {
  if (theta.size() != cfg.anchor.size()) {
    throw StructureError("ewc theta length does not match anchor");
  }
  const Eigen::ArrayXd d = theta.vec().array() - cfg.anchor.vec().array();
  return base + cfg.lambda * (cfg.fisher.vec().array() * d * d).sum();
}

// Differentiable wrapper: the same penalty expressed on the tape, so EWC
// fine-tuning uses the ordinary training loop. The penalty gradient is
// 2 * lambda * F .* (theta - anchor).
class EwcAugmentedLoss : public LossFunctionOf<EwcAugmentedLoss> {
 public:
  EwcAugmentedLoss(const LossFunction& base, EWCConfig cfg)
      : base_(base), cfg_(std::move(cfg)) {
    if (base_.param_count() != cfg_.anchor.size()) {
      throw StructureError("ewc anchor length does not match the model");
    }
  }

  const std::vector<TensorSpec>& param_layout() const override {
    return base_.param_layout();
  }

  template <typename T>
  typename Tape<T>::Node graph(Tape<T>& t,
                               std::span<const typename Tape<T>::Node> p,
                               const Batch& batch) const {
    auto out = base_.build(t, std::span<const typename Tape<T>::Node>(p), batch);
    if (cfg_.lambda == 0.0) return out;
    const auto& layout = base_.param_layout();
    Eigen::Index off = 0;
    typename Tape<T>::Node penalty{};
    bool first = true;
    for (size_t i = 0; i < layout.size(); ++i) {
      const auto& s = layout[i];
      MatX<T> anchor(s.rows, s.cols), fisher(s.rows, s.cols);
      for (Eigen::Index k = 0; k < s.size(); ++k) {
        anchor(k / s.cols, k % s.cols) = T(cfg_.anchor[off + k]);
        fisher(k / s.cols, k % s.cols) = T(cfg_.fisher[off + k]);
      }
      off += s.size();
      auto d = t.sub(p[i], t.constant(std::move(anchor)));
      auto term = t.dot(t.constant(std::move(fisher)), t.mul(d, d));
      penalty = first ? term : t.add(penalty, term);
      first = false;
    }
    return t.add(out, t.scale(penalty, cfg_.lambda));
  }

 private:
  const LossFunction& base_;
  EWCConfig cfg_;
};

// Diagonal Fisher estimate: mean over sampled batches of the elementwise
// squared loss gradient. Batch picks are seeded and recorded by the caller.
ParamVector fisher_diag(const ModelState& state, const CorpusSpec& spec,
                        int n_batches, uint64_t seed);

}  // namespace shlab

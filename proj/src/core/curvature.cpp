#include "curvature.hpp"

#include <charconv>
#include <cmath>

#include "errors.hpp"
#include "rng.hpp"

namespace shlab {

namespace {

// Batch-mean Hessian-vector product: one hvp per batch, averaged.
Eigen::VectorXd mean_hvp(const LossFunction& f, const ParamVector& theta,
                         const ParamVector& v,
                         const std::vector<Batch>& batches) {
  if (batches.empty()) throw ConfigError("curvature needs at least one batch");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(theta.size());
  for (const Batch& b : batches) {
    acc += hvp(f, theta, v, b).vec();
  }
  return acc / static_cast<double>(batches.size());
}

double require_finite(double x, const char* what) {
  if (!std::isfinite(x)) {
    throw NumericError(std::string(what) + " estimate is not finite");
  }
  return x;
}

std::string num(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  if (ec != std::errc()) throw Error("number formatting failed");
  return std::string(buf, ptr);
}

}  // namespace

CurvatureBatches curvature_batches(const CorpusSpec& val_spec, int context_len,
                                   int n_batches, uint64_t seed) {
  if (n_batches < 1) throw ConfigError("n_batches must be >= 1");
  BatchStream stream(val_spec, 32, context_len);
  const int64_t n_available = stream.n_windows() / 32;
  if (n_available < 1) {
    throw ConfigError("corpus too small for one curvature batch");
  }
  Rng rng(derive_seed(seed, "curvature"));
  CurvatureBatches out;
  out.seed = seed;
  out.batches.reserve(static_cast<size_t>(n_batches));
  for (int i = 0; i < n_batches; ++i) {
    out.batches.push_back(
        stream.batch(static_cast<int64_t>(rng.below(uint64_t(n_available)))));
  }
  return out;
}

double subsample_loss(const LossFunction& f, const ParamVector& theta,
                      const std::vector<Batch>& batches) {
  if (batches.empty()) throw ConfigError("curvature needs at least one batch");
  double acc = 0.0;
  for (const Batch& b : batches) acc += loss_value(f, theta, b);
  return acc / static_cast<double>(batches.size());
}

double directional_sharpness(const LossFunction& f, const ParamVector& theta,
                             const ParamVector& delta,
                             const std::vector<Batch>& batches) {
  const double norm_sq = delta.vec().squaredNorm();
  if (norm_sq == 0.0) {
    throw DomainError("directional sharpness of a zero direction");
  }
  const double quad = delta.vec().dot(mean_hvp(f, theta, delta, batches));
  return require_finite(quad / norm_sq, "directional sharpness");
}

ForgettingPrediction quadratic_forgetting_prediction(
    const LossFunction& f, const ParamVector& theta, const ParamVector& delta,
    const std::vector<Batch>& batches) {
  if (batches.empty()) throw ConfigError("curvature needs at least one batch");
  ForgettingPrediction out;
  double loss_acc = 0.0;
  double grad_acc = 0.0;
  for (const Batch& b : batches) {
    ValueGrad vg = value_and_grad(f, theta, b);
    loss_acc += vg.value;
    grad_acc += vg.grad.vec().dot(delta.vec());
  }
  const double n = static_cast<double>(batches.size());
  out.base_loss = loss_acc / n;
  out.gradient_term = grad_acc / n;
  if (delta.vec().squaredNorm() == 0.0) {
    out.quadratic_term = 0.0;  // H * 0 = 0; skip the hvp pass
  } else {
    out.quadratic_term =
        0.5 * delta.vec().dot(mean_hvp(f, theta, delta, batches));
  }
  require_finite(out.with_gradient(), "forgetting prediction");
  return out;
}

TraceEstimate hessian_trace(const LossFunction& f, const ParamVector& theta,
                            int n_probes, const std::vector<Batch>& batches,
                            uint64_t seed) {
  if (n_probes < 1) throw ConfigError("n_probes must be >= 1");
  Rng rng(derive_seed(seed, "hutchinson"));
  TraceEstimate out;
  out.seed = seed;
  out.per_probe.reserve(static_cast<size_t>(n_probes));
  Eigen::VectorXd z(theta.size());
  double acc = 0.0;
  for (int p = 0; p < n_probes; ++p) {
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      z[i] = (rng.next_u64() & 1u) ? 1.0 : -1.0;
    }
    ParamVector probe(z);
    const double quad = z.dot(mean_hvp(f, theta, probe, batches));
    require_finite(quad, "hessian trace");
    out.per_probe.push_back(quad);
    acc += quad;
  }
  out.value = acc / static_cast<double>(n_probes);
  return out;
}

LambdaMaxEstimate lambda_max(const LossFunction& f, const ParamVector& theta,
                             int max_iters, double tol,
                             const std::vector<Batch>& batches, uint64_t seed) {
  if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
  if (!(tol > 0.0) || !std::isfinite(tol)) {
    throw ConfigError("tol must be positive and finite");
  }
  Rng rng(derive_seed(seed, "powiter"));
  Eigen::VectorXd v(theta.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
  const double v0_norm = v.norm();
  if (v0_norm == 0.0) throw Error("degenerate power iteration start");
  v /= v0_norm;

  LambdaMaxEstimate out;
  out.seed = seed;
  double prev = 0.0;
  bool have_prev = false;
  for (int it = 0; it < max_iters; ++it) {
    const Eigen::VectorXd w = mean_hvp(f, theta, ParamVector(v), batches);
    // Rayleigh quotient with ||v|| = 1 keeps the dominant eigenvalue's sign.
    const double est = require_finite(v.dot(w), "lambda_max");
    out.value = est;
    out.iters = it + 1;
    const double w_norm = w.norm();
    if (w_norm == 0.0) {
      out.converged = true;  // v is in the null space and H v = 0 stays there
      return out;
    }
    if (have_prev &&
        std::abs(est - prev) < tol * std::max(std::abs(est), 1e-300)) {
      out.converged = true;
      return out;
    }
    prev = est;
    have_prev = true;
    v = w / w_norm;
  }
  out.converged = false;
  return out;
}

void append_curvature_csv(std::string& csv, const std::string& run_id,
                          const std::string& kind, double value,
                          int64_t probes_or_iters, uint64_t seed,
                          uint64_t batch_seed) {
  csv += run_id;
  csv += ',';
  csv += kind;
  csv += ',';
  csv += num(value);
  csv += ',';
  csv += std::to_string(probes_or_iters);
  csv += ',';
  csv += std::to_string(seed);
  csv += ',';
  csv += std::to_string(batch_seed);
  csv += '\n';
}

}  // namespace shlab

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "data.hpp"

namespace shlab {

// Every curvature estimate is taken against a fixed batch subsample so that
// comparisons across checkpoints and optimizers share the same Hessian.
// The picking seed travels with the estimate (batch_seed in the CSV).
struct CurvatureBatches {
  std::vector<Batch> batches;
  uint64_t seed = 0;
};

// n_batches windows of the validation stream, drawn by a seeded generator.
CurvatureBatches curvature_batches(const CorpusSpec& val_spec, int context_len,
                                   int n_batches, uint64_t seed);

// Mean loss over the subsample: the "observed" side of prediction pairs.
double subsample_loss(const LossFunction& f, const ParamVector& theta,
                      const std::vector<Batch>& batches);

// kappa(delta) = delta' H delta / ||delta||^2 with H the batch-mean Hessian,
// one hvp per batch. Scale-invariant in delta by construction.
double directional_sharpness(const LossFunction& f, const ParamVector& theta,
                             const ParamVector& delta,
                             const std::vector<Batch>& batches);

struct ForgettingPrediction {
  double base_loss = 0.0;       // L at theta on the subsample
  double gradient_term = 0.0;   // g . delta, always computed
  double quadratic_term = 0.0;  // 1/2 delta' H delta

  double with_gradient() const {
    return base_loss + gradient_term + quadratic_term;
  }
  double without_gradient() const { return base_loss + quadratic_term; }
  double value(bool include_gradient_term) const {
    return include_gradient_term ? with_gradient() : without_gradient();
  }
};

// Second-order prediction of the loss at theta + delta. Callers pair it with
// subsample_loss(f, theta + delta, batches) over the same batches.
ForgettingPrediction quadratic_forgetting_prediction(
    const LossFunction& f, const ParamVector& theta, const ParamVector& delta,
    const std::vector<Batch>& batches);

struct TraceEstimate {
  double value = 0.0;
  std::vector<double> per_probe;
  uint64_t seed = 0;
};

// Hutchinson estimator: mean over Rademacher probes z of z' H z.
TraceEstimate hessian_trace(const LossFunction& f, const ParamVector& theta,
                            int n_probes, const std::vector<Batch>& batches,
                            uint64_t seed);

struct LambdaMaxEstimate {
  double value = 0.0;  // Rayleigh quotient, so the sign is recovered
  int iters = 0;
  bool converged = false;
  uint64_t seed = 0;
};

// Power iteration on the batch-mean Hessian with Rayleigh readout. Stops on
// relative change < tol; otherwise returns the last estimate, flagged.
LambdaMaxEstimate lambda_max(const LossFunction& f, const ParamVector& theta,
                             int max_iters, double tol,
                             const std::vector<Batch>& batches, uint64_t seed);

inline constexpr const char* kCurvatureCsvHeader =
    "run_id,kind,value,probes_or_iters,seed,batch_seed\n";

void append_curvature_csv(std::string& csv, const std::string& run_id,
                          const std::string& kind, double value,
                          int64_t probes_or_iters, uint64_t seed,
                          uint64_t batch_seed);

}  // namespace shlab

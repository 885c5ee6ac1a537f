#include "optim.hpp"

#include "rng.hpp"

namespace shlab {

ParamVector fisher_diag(const ModelState& state, const CorpusSpec& spec,
                        int n_batches, uint64_t seed) {
  if (n_batches < 1) throw ConfigError("fisher_diag needs n_batches >= 1");
  auto loss = make_loss(state.config);
  const ParamVector theta = state.flatten();

  const int context = state.config.at("context_len").get<int>();
  const int rows = 32;
  BatchStream stream(spec, rows, context);
  const int64_t n_available = stream.n_windows() / rows;
  if (n_available < 1) throw ConfigError("corpus too small for fisher batches");

  Rng rng(derive_seed(seed, "fisher"));
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(theta.size());
  for (int b = 0; b < n_batches; ++b) {
    const int64_t idx = int64_t(rng.below(uint64_t(n_available)));
    Batch batch = stream.batch(idx);
    ValueGrad vg = value_and_grad(*loss, theta, batch);
    acc.array() += vg.grad.vec().array().square();
  }
  acc /= double(n_batches);
  return ParamVector(std::move(acc));
}

}  // namespace shlab

#include "model.hpp"

#include <algorithm>

namespace shlab {

namespace {

uint64_t get_seed(const json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("missing field: ") + key);
  return j.at(key).get<uint64_t>();
}

int get_int(const json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("missing field: ") + key);
  if (!j.at(key).is_number_integer()) {
    throw ConfigError(std::string("field must be an integer: ") + key);
  }
  return j.at(key).get<int>();
}

std::vector<TensorSpec> layout_for(const json& config) {
  const std::string kind = config.value("kind", "");
  if (kind == "transformer") return transformer_layout(ModelConfig::from_json(config));
  if (kind == "mlp") return mlp_layout(MlpConfig::from_json(config));
  throw ConfigError("unknown model kind: '" + kind + "'");
}

ModelState init_from_layout(const json& config,
                            const std::vector<TensorSpec>& layout,
                            uint64_t seed, double weight_std) {
  ModelState st;
  st.config = config;
  st.tensors.reserve(layout.size());
  for (const auto& spec : layout) {
    Mat m(spec.rows, spec.cols);
    const std::string last = spec.name.substr(spec.name.rfind('.') + 1);
    const bool is_gain = last == "gain";
    const bool is_bias = !last.empty() && last[0] == 'b';
    if (is_gain) {
      m.setOnes();
    } else if (is_bias) {
      m.setZero();
    } else {
      Rng rng(derive_seed(seed, spec.name));
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
          m(i, j) = weight_std * rng.normal();
        }
      }
    }
    st.tensors.emplace_back(spec.name, std::move(m));
  }
  return st;
}

}  // namespace

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.layers = get_int(j, "layers");
  c.heads = get_int(j, "heads");
  c.hidden_dim = get_int(j, "hidden_dim");
  c.vocab_size = get_int(j, "vocab_size");
  c.context_len = get_int(j, "context_len");
  c.seed = get_seed(j, "seed");
  c.validate();
  return c;
}

MlpConfig MlpConfig::from_json(const json& j) {
  MlpConfig c;
  c.in_dim = get_int(j, "in_dim");
  c.hidden_dim = get_int(j, "hidden_dim");
  c.out_dim = get_int(j, "out_dim");
  c.seed = get_seed(j, "seed");
  c.validate();
  return c;
}

ModelState init_transformer(const ModelConfig& cfg) {
  cfg.validate();
  return init_from_layout(cfg.to_json(), transformer_layout(cfg), cfg.seed, 0.02);
}

ModelState init_mlp(const MlpConfig& cfg) {
  cfg.validate();
  return init_from_layout(cfg.to_json(), mlp_layout(cfg), cfg.seed, 0.2);
}

std::unique_ptr<LossFunction> make_loss(const json& config) {
  const std::string kind = config.value("kind", "");
  if (kind == "transformer") {
    return std::make_unique<TransformerLoss>(ModelConfig::from_json(config));
  }
  if (kind == "mlp") {
    return std::make_unique<MlpRegressionLoss>(MlpConfig::from_json(config));
  }
  throw ConfigError("unknown model kind: '" + kind + "'");
}

ModelState unflatten(const json& config, const ParamVector& v) {
  const auto layout = layout_for(config);
  Eigen::Index total = 0;
  for (const auto& s : layout) total += s.size();
  if (v.size() != total) {
    throw StructureError("unflatten: vector length " + std::to_string(v.size()) +
                         " does not match layout size " + std::to_string(total));
  }
  ModelState st;
  st.config = config;
  st.tensors.reserve(layout.size());
  Eigen::Index off = 0;
  for (const auto& s : layout) {
    Mat m(s.rows, s.cols);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      m(i / s.cols, i % s.cols) = v[off + i];
    }
    off += s.size();
    st.tensors.emplace_back(s.name, std::move(m));
  }
  return st;
}

double lm_loss(const ModelState& state, const TokenBatch& batch) {
  auto loss = make_loss(state.config);
  return loss_value(*loss, state.flatten(), Batch(batch));
}

}  // namespace shlab

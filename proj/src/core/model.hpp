#pragma once

#include <json.hpp>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "loss.hpp"
#include "param_vector.hpp"
#include "rng.hpp"

namespace shlab {

using Mat = MatX<double>;
using json = nlohmann::json;

// Decoder-only transformer architecture knobs. The MLP expansion is fixed at
// 4x and is not a knob.
struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int hidden_dim = 64;
  int vocab_size = 64;
  int context_len = 64;
  uint64_t seed = 1;

  void validate() const {
    if (layers < 1) throw ConfigError("model.layers must be >= 1");
    if (heads < 1) throw ConfigError("model.heads must be >= 1");
    if (hidden_dim < 1) throw ConfigError("model.hidden_dim must be >= 1");
    if (hidden_dim % heads != 0) {
      throw ConfigError("model.hidden_dim must be divisible by model.heads");
    }
    if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
    if (context_len < 2) throw ConfigError("model.context_len must be >= 2");
  }

  json to_json() const {
    return json{{"kind", "transformer"}, {"layers", layers}, {"heads", heads},
                {"hidden_dim", hidden_dim}, {"vocab_size", vocab_size},
                {"context_len", context_len}, {"seed", seed}};
  }
  static ModelConfig from_json(const json& j);
};

// Two-layer tanh MLP regressor with biases; exists so fast tests and the
// quantizer's bias exemption have a tiny non-transformer model to chew on.
struct MlpConfig {
  int in_dim = 4;
  int hidden_dim = 16;
  int out_dim = 2;
  uint64_t seed = 1;

  void validate() const {
    if (in_dim < 1) throw ConfigError("mlp.in_dim must be >= 1");
    if (hidden_dim < 1) throw ConfigError("mlp.hidden_dim must be >= 1");
    if (out_dim < 1) throw ConfigError("mlp.out_dim must be >= 1");
  }

  json to_json() const {
    return json{{"kind", "mlp"}, {"in_dim", in_dim}, {"hidden_dim", hidden_dim},
                {"out_dim", out_dim}, {"seed", seed}};
  }
  static MlpConfig from_json(const json& j);
};

// Named, shaped parameter tensors plus the architecture config that produced
// them. The tensor list is always in layout order (lexicographic by name),
// so flatten/unflatten are plain concatenation.
struct ModelState {
  json config;
  std::vector<std::pair<std::string, Mat>> tensors;

  Eigen::Index param_count() const {
    Eigen::Index n = 0;
    for (const auto& [name, m] : tensors) n += m.size();
    return n;
  }

  ParamVector flatten() const {
    Eigen::VectorXd v(param_count());
    Eigen::Index off = 0;
    for (const auto& [name, m] : tensors) {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        v[off + i] = m(i / m.cols(), i % m.cols());
      }
      off += m.size();
    }
    return ParamVector(std::move(v));
  }

  const Mat* find(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
      if (n == name) return &m;
    }
    return nullptr;
  }
};

// ---- transformer ----

inline std::string layer_prefix(int l) {
  std::string n = std::to_string(l);
  if (n.size() < 2) n.insert(n.begin(), '0');
  return "layer." + n + ".";
}

inline std::vector<TensorSpec> transformer_layout(const ModelConfig& c) {
  c.validate();
  const Eigen::Index d = c.hidden_dim;
  const Eigen::Index ff = 4 * d;
  std::vector<TensorSpec> out;
  out.push_back({"embed.pos", c.context_len, d});
  out.push_back({"embed.tok", c.vocab_size, d});
  out.push_back({"final.norm.gain", 1, d});
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = layer_prefix(l);
    out.push_back({p + "attn.norm.gain", 1, d});
    out.push_back({p + "attn.wk", d, d});
    out.push_back({p + "attn.wo", d, d});
    out.push_back({p + "attn.wq", d, d});
    out.push_back({p + "attn.wv", d, d});
    out.push_back({p + "mlp.norm.gain", 1, d});
    out.push_back({p + "mlp.w1", d, ff});
    out.push_back({p + "mlp.w2", ff, d});
  }
  out.push_back({"unembed.w", d, c.vocab_size});
  return out;
}

// Pre-norm decoder transformer: residual stream with RMS-normed attention and
// GELU MLP blocks, learned absolute positions, untied unembedding. The loss
// is mean next-token cross entropy over all B*(L-1) prediction sites.
class TransformerLoss : public LossFunctionOf<TransformerLoss> {
 public:
  explicit TransformerLoss(ModelConfig cfg) : cfg_(cfg) {
    layout_ = transformer_layout(cfg_);
    for (size_t i = 0; i < layout_.size(); ++i) index_[layout_[i].name] = i;
  }

  const std::vector<TensorSpec>& param_layout() const override { return layout_; }
  const ModelConfig& config() const { return cfg_; }

  template <typename T>
  typename Tape<T>::Node graph(Tape<T>& t,
                               std::span<const typename Tape<T>::Node> p,
                               const Batch& batch) const {
    const auto* tb = std::get_if<TokenBatch>(&batch);
    if (!tb) throw StructureError("transformer loss expects a token batch");
    const Eigen::Index B = tb->seq.rows();
    const Eigen::Index L = tb->seq.cols();
    if (B < 1 || L < 2) {
      throw StructureError("token batch must be [B >= 1, L >= 2]");
    }
    if (L - 1 > cfg_.context_len) {
      throw StructureError("sequence exceeds model context length");
    }
    const Eigen::Index S = L - 1;  // prediction sites per sequence
    std::vector<int32_t> in_ids, pos_ids, targets;
    in_ids.reserve(B * S);
    pos_ids.reserve(B * S);
    targets.reserve(B * S);
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index i = 0; i < L; ++i) {
        const int32_t id = tb->seq(b, i);
        if (id < 0 || id >= cfg_.vocab_size) {
          throw DomainError("token id " + std::to_string(id) + " at sequence " +
                            std::to_string(b) + ", position " +
                            std::to_string(i) + " outside vocabulary");
        }
        if (i < S) {
          in_ids.push_back(id);
          pos_ids.push_back(static_cast<int32_t>(i));
        }
        if (i > 0) targets.push_back(id);
      }
    }

    auto P = [&](const std::string& name) { return p[index_.at(name)]; };
    auto x = t.add(t.rows(P("embed.tok"), in_ids),
                   t.rows(P("embed.pos"), pos_ids));
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string pre = layer_prefix(l);
      auto h = t.rmsnorm(x, P(pre + "attn.norm.gain"));
      auto att = t.causal_attention(t.matmul(h, P(pre + "attn.wq")),
                                    t.matmul(h, P(pre + "attn.wk")),
                                    t.matmul(h, P(pre + "attn.wv")),
                                    cfg_.heads, S);
      x = t.add(x, t.matmul(att, P(pre + "attn.wo")));
      auto h2 = t.rmsnorm(x, P(pre + "mlp.norm.gain"));
      auto ff = t.matmul(t.gelu(t.matmul(h2, P(pre + "mlp.w1"))),
                         P(pre + "mlp.w2"));
      x = t.add(x, ff);
    }
    auto logits = t.matmul(t.rmsnorm(x, P("final.norm.gain")), P("unembed.w"));
    return t.mean_cross_entropy(logits, std::move(targets));
  }

 private:
  ModelConfig cfg_;
  std::vector<TensorSpec> layout_;
  std::map<std::string, size_t> index_;
};

// ---- MLP regressor ----

inline std::vector<TensorSpec> mlp_layout(const MlpConfig& c) {
  c.validate();
  return {{"mlp.b1", 1, c.hidden_dim},
          {"mlp.b2", 1, c.out_dim},
          {"mlp.w1", c.in_dim, c.hidden_dim},
          {"mlp.w2", c.hidden_dim, c.out_dim}};
}

class MlpRegressionLoss : public LossFunctionOf<MlpRegressionLoss> {
 public:
  explicit MlpRegressionLoss(MlpConfig cfg) : cfg_(cfg), layout_(mlp_layout(cfg)) {}

  const std::vector<TensorSpec>& param_layout() const override { return layout_; }
  const MlpConfig& config() const { return cfg_; }

  template <typename T>
  typename Tape<T>::Node graph(Tape<T>& t,
                               std::span<const typename Tape<T>::Node> p,
                               const Batch& batch) const {
    const auto* vb = std::get_if<VecBatch>(&batch);
    if (!vb) throw StructureError("mlp loss expects a vector batch");
    if (vb->x.cols() != cfg_.in_dim || vb->y.cols() != cfg_.out_dim ||
        vb->x.rows() != vb->y.rows() || vb->x.rows() < 1) {
      throw StructureError("vector batch shape does not match mlp config");
    }
    MatX<T> xin = vb->x.cast<T>();
    MatX<T> yt = vb->y.cast<T>();
    auto x = t.constant(std::move(xin));
    auto h = t.tanh_fn(t.add_row(t.matmul(x, p[2]), p[0]));
    auto pred = t.add_row(t.matmul(h, p[3]), p[1]);
    return t.mean_sq(pred, std::move(yt));
  }

 private:
  MlpConfig cfg_;
  std::vector<TensorSpec> layout_;
};

// ---- quadratic probe loss ----

// f(theta) = 1/2 theta' A theta + b' theta. Its Hessian is (A + A') / 2 and
// its gradient is that Hessian times theta plus b, which makes it the exact
// oracle for hvp, curvature, and the quadratic forgetting prediction.
class QuadraticLoss : public LossFunctionOf<QuadraticLoss> {
 public:
  QuadraticLoss(Mat a, Eigen::VectorXd b) : a_(std::move(a)), b_(std::move(b)) {
    if (a_.rows() != a_.cols() || a_.rows() != b_.size() || a_.rows() < 1) {
      throw StructureError("quadratic loss needs square A and matching b");
    }
    layout_ = {{"theta", a_.rows(), 1}};
  }

  const std::vector<TensorSpec>& param_layout() const override { return layout_; }

  Mat hessian() const { return 0.5 * (a_ + Mat(a_.transpose())); }

  template <typename T>
  typename Tape<T>::Node graph(Tape<T>& t,
                               std::span<const typename Tape<T>::Node> p,
                               const Batch&) const {
    auto a = t.constant(a_.cast<T>());
    MatX<T> bm(b_.size(), 1);
    for (Eigen::Index i = 0; i < b_.size(); ++i) bm(i, 0) = T(b_[i]);
    auto b = t.constant(std::move(bm));
    auto quad = t.scale(t.dot(p[0], t.matmul(a, p[0])), 0.5);
    return t.add(quad, t.dot(b, p[0]));
  }

 private:
  Mat a_;
  Eigen::VectorXd b_;
  std::vector<TensorSpec> layout_;
};

// ---- init / state plumbing ----

// Draws every weight tensor from an independent per-name stream so the values
// do not shift if the layout gains or reorders tensors. Norm gains start at 1.
ModelState init_transformer(const ModelConfig& cfg);
ModelState init_mlp(const MlpConfig& cfg);

// Rebuilds the loss function matching a state's config ("kind" field).
std::unique_ptr<LossFunction> make_loss(const json& config);

// Inverse of ModelState::flatten for a known config.
ModelState unflatten(const json& config, const ParamVector& v);

// Mean next-token cross entropy of a state on one batch, f64.
double lm_loss(const ModelState& state, const TokenBatch& batch);

}  // namespace shlab

#include "probes.hpp"

#include <cmath>
#include <charconv>
#include <cstdio>

#include "rng.hpp"

namespace shlab {

ModelState gaussian_perturb(const ModelState& state, double gamma,
                            uint64_t seed,
                            std::vector<std::string>* skipped) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw ConfigError("gaussian_perturb needs finite gamma >= 0");
  }
  ModelState out = state;
  if (gamma == 0.0) return out;
  for (auto& [name, mat] : out.tensors) {
    const double w_norm = mat.norm();
    if (w_norm == 0.0) {
      if (skipped) skipped->push_back(name);
      continue;
    }
    Rng rng(derive_seed(seed, "perturb:" + name));
    Mat z(mat.rows(), mat.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
    const double z_norm = z.norm();
    mat += (gamma * w_norm / z_norm) * z;
  }
  return out;
}

bool quant_exempt(const std::string& name) {
  if (name.rfind("embed.", 0) == 0) return true;  // embeddings, not unembed
  const size_t dot = name.rfind('.');
  const std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
  if (last == "gain") return true;                 // norm layers
  if (!last.empty() && last[0] == 'b') return true;  // biases
  return false;
}

std::vector<std::string> quant_exempt_tensors(const ModelState& state) {
  std::vector<std::string> out;
  for (const auto& [name, mat] : state.tensors) {
    if (quant_exempt(name)) out.push_back(name);
  }
  return out;
}

namespace {

// Nearest NF4 level by brute force; first match wins ties deterministically.
double nf4_snap(double x) {
  double best = kNf4Levels[0];
  double best_d = std::abs(x - best);
  for (size_t i = 1; i < kNf4Levels.size(); ++i) {
    const double d = std::abs(x - kNf4Levels[i]);
    if (d < best_d) {
      best_d = d;
      best = kNf4Levels[i];
    }
  }
  return best;
}

}  // namespace

void quantize_dequantize_block(double* data, Eigen::Index n, int bits) {
  if (bits != 4 && bits != 8) throw ConfigError("bits must be 4 or 8");
  double absmax = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) absmax = std::max(absmax, std::abs(data[i]));
  if (absmax == 0.0) {
    for (Eigen::Index i = 0; i < n; ++i) data[i] = 0.0;
    return;
  }
  if (bits == 8) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double q = std::nearbyint(data[i] / absmax * 127.0);
      q = std::min(127.0, std::max(-127.0, q));
      data[i] = absmax * (q / 127.0);
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      data[i] = absmax * nf4_snap(data[i] / absmax);
    }
  }
}

ModelState quantize(const ModelState& state, int bits, int block_size) {
  if (bits != 4 && bits != 8) throw ConfigError("bits must be 4 or 8");
  if (block_size < 2) throw ConfigError("block_size must be >= 2");
  ModelState out = state;
  for (auto& [name, mat] : out.tensors) {
    if (quant_exempt(name)) continue;
    double* d = mat.data();
    const Eigen::Index n = mat.size();
    for (Eigen::Index start = 0; start < n; start += block_size) {
      quantize_dequantize_block(d + start, std::min<Eigen::Index>(block_size, n - start),
                                bits);
    }
  }
  return out;
}

std::vector<ProbeResult> probe_sweep(const ModelState& state,
                                     const std::vector<ProbeSpec>& specs,
                                     const CorpusSpec& eval_spec,
                                     int max_batches) {
  std::vector<ProbeResult> out;
  if (specs.empty()) return out;
  const double base = eval_loss(state, eval_spec, max_batches);
  for (const auto& spec : specs) {
    ProbeResult r;
    r.kind = spec.kind;
    r.base_loss = base;
    if (spec.kind == "gaussian") {
      if (spec.seeds.size() < 3) {
        throw ConfigError("gaussian probes need >= 3 seeds");
      }
      r.param = spec.gamma;
      double sum = 0.0;
      for (uint64_t seed : spec.seeds) {
        std::vector<std::string> skipped;
        const ModelState perturbed =
            gaussian_perturb(state, spec.gamma, seed, &skipped);
        const double loss = eval_loss(perturbed, eval_spec, max_batches);
        r.per_seed.emplace_back(seed, loss);
        sum += loss;
        if (r.skipped.empty()) r.skipped = std::move(skipped);
      }
      r.perturbed_loss = sum / double(spec.seeds.size());
    } else if (spec.kind == "quant") {
      r.param = double(spec.bits);
      const ModelState q = quantize(state, spec.bits, spec.block_size);
      r.perturbed_loss = eval_loss(q, eval_spec, max_batches);
    } else {
      throw ConfigError("unknown probe kind: " + spec.kind);
    }
    r.degradation = r.perturbed_loss - r.base_loss;
    if (!std::isfinite(r.degradation)) {
      throw NumericError("probe degradation is not finite");
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace {
// Shortest decimal that parses back to the same double.
std::string num(double x) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, end);
}
}  // namespace

void append_probe_csv(std::string& csv, const std::string& run_id,
                      const ProbeResult& r) {
  for (const auto& [seed, loss] : r.per_seed) {
    csv += run_id + "," + r.kind + "," + num(r.param) + "," +
           std::to_string(seed) + "," + num(r.base_loss) + "," + num(loss) +
           "," + num(loss - r.base_loss) + "\n";
  }
  const std::string agg = r.kind == "gaussian" ? "mean" : "-";
  csv += run_id + "," + r.kind + "," + num(r.param) + "," + agg + "," +
         num(r.base_loss) + "," + num(r.perturbed_loss) + "," +
         num(r.degradation) + "\n";
}

}  // namespace shlab

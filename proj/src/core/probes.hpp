#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "data.hpp"
#include "model.hpp"

namespace shlab {

// Noise magnitudes used by the default gaussian probe sweep.
inline constexpr std::array<double, 5> kGammaGrid = {0.009, 0.013, 0.017,
                                                     0.020, 0.025};

// The 16 levels of the 4-bit normal-float quantizer, in ascending order.
// Blocks are scaled by absmax into [-1, 1] and snapped to the nearest level.
inline constexpr std::array<double, 16> kNf4Levels = {
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0};

// W + gamma * ||W||_F * Z / ||Z||_F per tensor, fresh standard normal Z per
// tensor, so the relative Frobenius distortion is exactly gamma everywhere.
// Zero-norm tensors are left alone and their names collected in `skipped`.
ModelState gaussian_perturb(const ModelState& state, double gamma,
                            uint64_t seed,
                            std::vector<std::string>* skipped = nullptr);

// Norm gains, biases, and embeddings stay full precision; the unembedding
// and all square projection / mlp weights are quantized.
bool quant_exempt(const std::string& name);
std::vector<std::string> quant_exempt_tensors(const ModelState& state);

// In-place quantize-then-dequantize of one block. bits 8: symmetric absmax
// int8 grid. bits 4: absmax-scaled nearest-level NF4. All-zero blocks
// dequantize to zeros. Exposed for direct contract tests.
void quantize_dequantize_block(double* data, Eigen::Index n, int bits);

// Simulated blockwise quantization of every non-exempt tensor; evaluation
// downstream stays in float.
ModelState quantize(const ModelState& state, int bits, int block_size = 64);

struct ProbeSpec {
  std::string kind;  // gaussian | quant
  double gamma = 0.0;
  int bits = 0;
  int block_size = 64;
  std::vector<uint64_t> seeds = {1, 2, 3};  // gaussian only, >= 3 of them
};

struct ProbeResult {
  std::string kind;
  double param = 0.0;  // gamma, or the bit width
  double base_loss = 0.0;
  double perturbed_loss = 0.0;  // gaussian: mean over seeds
  double degradation = 0.0;     // perturbed - base, negative kept as-is
  std::vector<std::pair<uint64_t, double>> per_seed;  // gaussian only
  std::vector<std::string> skipped;  // zero-norm tensors left unperturbed
};

// One result per spec, measured with the same eval_loss path as training
// validation so degradations are comparable to the forgetting axis.
std::vector<ProbeResult> probe_sweep(const ModelState& state,
                                     const std::vector<ProbeSpec>& specs,
                                     const CorpusSpec& eval_spec,
                                     int max_batches);

inline constexpr const char* kProbeCsvHeader =
    "run_id,probe_kind,param,seed,base_loss,perturbed_loss,degradation\n";

// Appends the aggregate row, preceded by per-seed rows for gaussian probes.
void append_probe_csv(std::string& csv, const std::string& run_id,
                      const ProbeResult& r);

}  // namespace shlab

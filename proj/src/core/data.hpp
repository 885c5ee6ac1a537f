#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loss.hpp"
#include "model.hpp"

namespace shlab {

// All corpus families emit ids from one shared 64-symbol vocabulary so that
// checkpoints transfer between families without remapping:
//   0..9   digits          10 '+'   11 '='   12 ';'
//   13 record start        14 copy marker    15 reverse marker
//   16..63 letters (markov chains draw from the low `alphabet` ids)
inline constexpr int kVocabSize = 64;

// Deterministic synthetic corpus description. `params` is family-specific;
// unknown keys are rejected. Train and val splits of the same spec share the
// underlying distribution but draw from disjoint seed streams.
struct CorpusSpec {
  std::string family;  // markov2 | arithmetic | copy-pattern
  json params = json::object();
  uint64_t seed = 1;
  int64_t n_tokens = 0;
  std::string split;  // train | val

  void validate() const;
  json to_json() const;  // with family defaults resolved, for manifests
  static CorpusSpec from_json(const json& j);
};

// Exactly n_tokens ids, deterministic per spec.
std::vector<int32_t> generate(const CorpusSpec& spec);

// Order-2 transition probabilities, row (a * alphabet + b) = P(. | a, b).
// Exposed so tests can compare empirical frequencies to the true matrix.
Mat markov2_matrix(const CorpusSpec& spec);

// Exact conditional entropy of the stationary pair distribution, nats/token.
// markov2 only.
double entropy_rate(const CorpusSpec& spec);

// Deterministic batcher: consecutive non-overlapping seq_len windows of the
// generated stream, batch i taking windows [i*B, (i+1)*B), cycling.
class BatchStream {
 public:
  BatchStream(const CorpusSpec& spec, int batch_size, int seq_len);

  TokenBatch batch(int64_t index) const;
  int64_t n_windows() const { return n_windows_; }

 private:
  std::vector<int32_t> tokens_;
  int batch_size_;
  int seq_len_;
  int64_t n_windows_;
};

// Mean lm_loss over the first max_batches batches of a val-split stream;
// the L_PT / L_FT measurement used everywhere downstream. Batch rows 32,
// sequence length = model context.
double eval_loss(const ModelState& state, const CorpusSpec& spec,
                 int max_batches);
double eval_loss(const LossFunction& f, const ParamVector& theta,
                 int context_len, const CorpusSpec& spec, int max_batches);

// Optional disk cache: raw little-endian int32 array plus a JSON sidecar
// carrying the resolved spec, keyed by the spec hash. Returns the token file
// path. Generation is cheap, so this mainly documents runs.
std::string cache_corpus(const CorpusSpec& spec, const std::string& cache_dir);

}  // namespace shlab

#ifndef SHLAB_H
#define SHLAB_H

/* C interface to the sharpness-lab core. All orchestration entry points
 * take a JSON config string and return a malloc'd JSON result string the
 * caller frees with shlab_string_free. Functions never throw; failures
 * come back as a status code with the message available from
 * shlab_last_error until the next call on the same thread. */

#include <stddef.h>
#include <stdint.h>

#if defined(__GNUC__)
#define SHLAB_API __attribute__((visibility("default")))
#else
#define SHLAB_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum shlab_status {
  SHLAB_OK = 0,
  /* 1 is reserved so statuses can double as process exit codes without
   * colliding with the generic shell failure. */
  SHLAB_ERR_CONFIG = 2,
  SHLAB_ERR_IO = 3,
  SHLAB_ERR_NUMERIC = 4,
  SHLAB_ERR_STRUCTURE = 5,
  SHLAB_ERR_DOMAIN = 6,
  SHLAB_ERR_INTERNAL = 7
} shlab_status;

/* Message from the most recent failing call on this thread; empty string
 * if the last call succeeded. The pointer stays valid until the next
 * shlab_* call on the same thread. */
SHLAB_API const char* shlab_last_error(void);

/* Frees any char* the library handed out. NULL is fine. */
SHLAB_API void shlab_string_free(char* s);

/* ---- model handles ------------------------------------------------- */

typedef struct shlab_model shlab_model;

SHLAB_API shlab_status shlab_model_load(const char* path, shlab_model** out);
SHLAB_API shlab_status shlab_model_save(const shlab_model* m,
                                        const char* path);
SHLAB_API void shlab_model_free(shlab_model* m);

SHLAB_API shlab_status shlab_model_param_count(const shlab_model* m,
                                               int64_t* out);

/* Mean validation loss over the corpus described by corpus_spec_json
 * (same protocol the training runs use for their reported losses). */
SHLAB_API shlab_status shlab_model_eval_loss(const shlab_model* m,
                                             const char* corpus_spec_json,
                                             int max_batches, double* out);

/* Simulated blockwise quantization (bits 8 or 4); returns a new handle. */
SHLAB_API shlab_status shlab_model_quantize(const shlab_model* m, int bits,
                                            int block_size,
                                            shlab_model** out);

/* Per-tensor relative Frobenius perturbation of magnitude gamma. */
SHLAB_API shlab_status shlab_model_gaussian_perturb(const shlab_model* m,
                                                    double gamma,
                                                    uint64_t seed,
                                                    shlab_model** out);

/* ---- orchestration -------------------------------------------------- */

/* Runs (or replays from cache) one pretraining run under out_root.
 * spec_json is the pretrain spec object; the result JSON carries run_id,
 * run_dir, status, L_PT, checkpoint paths, and from_cache. */
SHLAB_API shlab_status shlab_run_pretrain(const char* spec_json,
                                          const char* out_root,
                                          char** out_json);

/* Fine-tunes a parent checkpoint across a learning-rate grid with `jobs`
 * worker threads. config: {"parent_run_dir": str, "lrs": [..]?, "ft":
 * fine-tune spec template (its lr is ignored)}. Appends rows to
 * out_root/results_index.csv and writes the trade-off set summary. */
SHLAB_API shlab_status shlab_run_finetune_sweep(const char* config_json,
                                                const char* out_root,
                                                int jobs, char** out_json);

/* Robustness probes on a saved checkpoint. config: {"run_id": str,
 * "checkpoint": path, "corpus": corpus spec, "eval_max_batches": int?,
 * "kind": "quant"|"gaussian", "bits": [..]?, "block_size": int?,
 * "gammas": [..]?, "seeds": [..]?}. Appends to out_dir/probes.csv. */
SHLAB_API shlab_status shlab_run_probe(const char* config_json,
                                       const char* out_dir,
                                       char** out_json);

/* Curvature diagnostics on a saved checkpoint. config: {"run_id": str,
 * "checkpoint": path, "corpus": corpus spec, "n_batches": int?, "seed":
 * u64?, "trace": {"probes": int}?, "lambda_max": {"max_iters": int,
 * "tol": double}?, "direction": {"run_id": str, "checkpoint": path}?}.
 * Appends scalar rows to out_dir/curvature.csv. */
SHLAB_API shlab_status shlab_run_curvature(const char* config_json,
                                           const char* out_dir,
                                           char** out_json);

/* Pareto frontier of one sweep read back from a results index.
 * config: {"index": path, "parent_run_id": str?} (the id may be omitted
 * when the index holds a single parent). */
SHLAB_API shlab_status shlab_pareto_from_index(const char* config_json,
                                               char** out_json);

/* Matched-fine-tuning threshold comparison across parents. config:
 * {"index": path, "parents": [{"run_id": str, "label": str?}..],
 * "reduction": {"a": label, "b": label, "base_a": double,
 * "base_b": double}?}. */
SHLAB_API shlab_status shlab_threshold_from_index(const char* config_json,
                                                  char** out_json);

/* Figure-ready CSV export. config: {"index": path, "sets":
 * [{"parent_run_id": str, "label": str, "checkpoint": path?}..],
 * "quant": {"bits": [..], "block_size": int?, "corpus": corpus spec,
 * "eval_max_batches": int?}?}. Writes out_dir/frontier.csv and, when
 * quant is present, out_dir/quantization.csv. */
SHLAB_API shlab_status shlab_run_report(const char* config_json,
                                        const char* out_dir,
                                        char** out_json);

#ifdef __cplusplus
}
#endif

#endif /* SHLAB_H */

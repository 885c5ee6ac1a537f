#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "data.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "schedule.hpp"

namespace shlab {

// The fine-tuning learning-rate grid used by desk experiments: 12 points
// spanning 1e-5 to 3e-3 so both the under-fitting and the catastrophic end
// show up in one sweep. 4e-4 is the grid's canonical middle rate, the one
// direction-level probes are taken at.
inline const std::vector<double> kDeskFtLrGrid = {
    1e-5, 2e-5, 4e-5, 8e-5, 1.5e-4, 2.5e-4, 4e-4, 6e-4, 1e-3, 1.5e-3,
    2e-3,  3e-3};
inline constexpr double kCanonicalFtLr = 4e-4;

// Inputs of one pretraining run. Everything that affects a bit of the output
// lives here; the run id is a content hash of the resolved JSON form.
struct PretrainSpec {
  ModelConfig model;
  CorpusSpec train_corpus;  // train split
  CorpusSpec val_corpus;    // val split, the fixed L_PT measurement
  ScheduleSpec schedule;
  PhasePlan phases = PhasePlan::constant(OptTag::adamw);
  OptimConfig optim;
  SAMConfig sam;
  int64_t steps = 2000;
  int batch_size = 32;
  uint64_t data_seed = 1;   // batch-order stream
  std::string train_dtype = "f32";  // f32 | f64
  // Steps after which an intermediate checkpoint is written. Empty means the
  // desk default {T/4, T/2}; the final state is always persisted.
  std::vector<int64_t> checkpoint_steps;
  int eval_max_batches = 32;

  void validate() const;
  std::vector<int64_t> resolved_checkpoint_steps() const;
  json to_json() const;  // resolved inputs, the hashed content
  static PretrainSpec from_json(const json& j);
};

// Inputs of one fine-tuning run on top of a parent checkpoint.
struct FinetuneSpec {
  CorpusSpec ft_corpus;      // train split
  CorpusSpec ft_val_corpus;  // val split, the fixed L_FT measurement
  double lr = kCanonicalFtLr;
  int64_t steps = 300;
  double warmup_frac = 0.10;
  int batch_size = 32;
  double weight_decay = 0.0;
  uint64_t data_seed = 1;
  std::string train_dtype = "f32";
  int eval_max_batches = 32;

  void validate() const;
  json to_json() const;
  static FinetuneSpec from_json(const json& j);
};

// Content-hash id of a spec: sha256 of the canonical JSON, first 16 hex.
std::string pretrain_run_id(const PretrainSpec& spec);
std::string finetune_run_id(const std::string& parent_run_id,
                            const FinetuneSpec& spec);

struct PretrainResult {
  std::string run_id;
  std::string run_dir;
  std::string status;  // ok | numeric_failure
  std::string error;   // set on numeric_failure
  int64_t steps_completed = 0;
  double L_PT = 0.0;   // eval of the retained final state
  std::map<int64_t, std::string> checkpoints;  // step -> file name
  std::string final_checkpoint;                // file name
  bool from_cache = false;
};

// Runs (or replays from cache) one pretraining run under
// <out_root>/runs/<run_id>/. Written artifacts: manifest.json, trace.csv,
// checkpoint files, result.json, timing.json. A run whose result.json already
// exists is returned as-is; identical specs therefore share work. Numeric
// failure keeps the last good parameters as the final checkpoint and reports
// status instead of throwing.
PretrainResult pretrain_run(const PretrainSpec& spec,
                            const std::string& out_root);

struct TradeoffPoint {
  double ft_lr = 0.0;
  double L_FT = 0.0;  // nats on the fine-tune val spec
  double L_PT = 0.0;  // nats on the parent's val spec
  std::string ft_run_id;
};

struct FinetuneResult {
  TradeoffPoint point;  // meaningful when status == ok
  std::string status;   // ok | numeric_failure
  std::string error;
  std::string run_id;
  std::string run_dir;
  std::string final_checkpoint;  // file name, saved for displacement probes
  std::vector<std::string> alarms;
  bool from_cache = false;
};

// AdamW + cosine fine-tune from a parent run's final checkpoint. L_PT uses
// the parent's val spec and eval batch count so points are comparable to the
// parent's own base loss; any L_PT more than 0.02 nats BELOW it is logged as
// a calibration alarm, not failed.
FinetuneResult finetune_run(const std::string& parent_run_dir,
                            const FinetuneSpec& spec,
                            const std::string& out_root);

struct SweepFailure {
  double ft_lr = 0.0;
  std::string ft_run_id;
  std::string error;
};

struct TradeoffSet {
  std::string set_id;
  std::string parent_run_id;
  std::string label;  // free-form, e.g. which checkpoint this set belongs to
  std::vector<TradeoffPoint> points;      // successful runs, lr-list order
  std::vector<SweepFailure> failures;     // excluded from frontiers
  std::vector<std::string> alarms;

  json to_json() const;
  static TradeoffSet from_json(const json& j);
};

// One finetune_run per lr (jobs > 1 runs them on worker threads; every run
// writes only inside its own directory). Failed runs are recorded and
// excluded; an entirely failed nonempty sweep throws. Appends one row per lr
// to <out_root>/results_index.csv.
TradeoffSet finetune_sweep(const std::string& parent_run_dir,
                           const std::vector<double>& lrs,
                           const FinetuneSpec& spec_template,
                           const std::string& out_root, int jobs = 1);

inline constexpr const char* kResultsIndexHeader =
    "parent_run_id,ft_run_id,ft_lr,L_FT,L_PT,status\n";

struct FrontierResult {
  std::string provenance;  // set id of the tradeoff set it was cut from
  std::vector<TradeoffPoint> points;  // L_FT ascending, ties kept

  json to_json() const;
};

// Minimize both axes. Kept points are exactly those not dominated by any
// other; equal points survive together; order is L_FT ascending, input order
// within exact ties.
FrontierResult pareto_frontier(const TradeoffSet& set);
std::vector<TradeoffPoint> pareto_frontier(std::vector<TradeoffPoint> points);

struct CheckpointThreshold {
  std::string label;      // set label (or id) it summarizes
  double min_L_FT = 0.0;  // best fine-tune loss this checkpoint reached
  double L_PT_at_tau = 0.0;  // min L_PT among its points with L_FT <= tau
};

struct ThresholdReport {
  double tau = 0.0;  // max over per-checkpoint minima of L_FT
  std::vector<CheckpointThreshold> checkpoints;

  json to_json() const;
};

// The loss-matched comparison: tau is the weakest checkpoint's best L_FT, so
// every checkpoint has at least one point with L_FT <= tau (asserted).
ThresholdReport matched_ft_threshold(const std::vector<TradeoffSet>& sets);

struct ForgettingReduction {
  bool defined = false;  // false when forget_a <= 0
  double value = 0.0;    // 1 - forget_b / forget_a, may be negative
  double forget_a = 0.0;
  double forget_b = 0.0;

  json to_json() const;
};

// forget_X = (min L_PT among frontier points with L_FT <= tau) - base_X.
// Requires both frontiers to reach tau; a non-positive forget_a makes the
// ratio meaningless and is reported as undefined rather than thrown.
ForgettingReduction forgetting_reduction(const FrontierResult& frontier_a,
                                         const FrontierResult& frontier_b,
                                         double tau, double base_a,
                                         double base_b);

// Shortest decimal that round-trips; the one float format every CSV uses.
std::string format_number(double x);

}  // namespace shlab

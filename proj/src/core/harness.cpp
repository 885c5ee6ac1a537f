#include "harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <thread>

#include "persistence.hpp"
#include "rng.hpp"

namespace fs = std::filesystem;

namespace shlab {

std::string format_number(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  if (ec != std::errc()) throw Error("number formatting failed");
  return std::string(buf, ptr);
}

namespace {

void check_keys(const json& j, const char* what,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(std::string("unknown key in ") + what + ": " + k);
  }
}

double need_number(const json& j, const char* what, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number()) {
    throw ConfigError(std::string(what) + " needs numeric field " + key);
  }
  return j.at(key).get<double>();
}

int64_t need_count(const json& j, const char* what, const char* key) {
  const double v = need_number(j, what, key);
  if (v != std::floor(v)) {
    throw ConfigError(std::string(what) + "." + key + " must be an integer");
  }
  return int64_t(v);
}

json optim_to_json(const OptimConfig& c) {
  return json{{"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_epsilon", c.adam_epsilon},
              {"weight_decay", c.weight_decay}};
}

OptimConfig optim_from_json(const json& j) {
  check_keys(j, "optim", {"beta1", "beta2", "adam_epsilon", "weight_decay"});
  OptimConfig c;
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.validate();
  return c;
}

std::string hash16(const json& inputs) {
  return json_sha256(inputs).substr(0, 16);
}

void require_dtype(const std::string& dtype) {
  if (dtype != "f32" && dtype != "f64") {
    throw ConfigError("train_dtype must be f32 or f64");
  }
}

uint8_t dtype_code(const std::string& dtype) {
  return dtype == "f32" ? kDtypeF32 : kDtypeF64;
}

struct LoopOutcome {
  std::string status = "ok";
  std::string error;
  int64_t steps_completed = 0;
};

// The one training loop behind pretraining and fine-tuning. Update k
// (1-based) runs at lr_at(k) under phase_at(k - 1); a numeric failure rolls
// theta back to the last completed step and stops. on_step_done fires after
// each completed update, for checkpointing.
template <typename T>
LoopOutcome run_updates(VecX<T>& th, const LossFunction& f,
                        const BatchStream& stream, int64_t n_batches,
                        const ScheduleSpec& sched, const PhasePlan& phases,
                        const OptimConfig& oc, const SAMConfig& sc,
                        int64_t steps, uint64_t order_seed,
                        const char* order_tag, std::string& trace,
                        const std::function<void(int64_t)>& on_step_done) {
  LoopOutcome out;
  AdamWState<T> st = AdamWState<T>::zeros(th.size());
  Rng order(derive_seed(order_seed, order_tag));
  VecX<T> last_good = th;
  for (int64_t k = 1; k <= steps; ++k) {
    const Batch batch =
        stream.batch(int64_t(order.below(uint64_t(n_batches))));
    const double lr = lr_at(sched, k);
    const OptTag tag = phase_at(phases, k - 1);
    double loss = 0.0;
    try {
      if (tag == OptTag::sam) {
        loss = double(sam_step(th, batch, f, st, lr, sc, oc).loss);
      } else {
        auto [lv, g] = value_and_grad_t<T>(f, th, batch);
        loss = double(lv);
        adamw_step(th, g, st, lr, oc);
      }
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite training loss");
      }
    } catch (const NumericError& e) {
      th = last_good;
      out.status = "numeric_failure";
      out.error = std::string(e.what()) + " at step " + std::to_string(k);
      return out;
    }
    last_good = th;
    trace += std::to_string(k);
    trace += ',';
    trace += to_string(tag);
    trace += ',';
    trace += format_number(lr);
    trace += ',';
    trace += format_number(loss);
    trace += '\n';
    out.steps_completed = k;
    on_step_done(k);
  }
  return out;
}

void save_state_checkpoint(const json& config, const Eigen::VectorXd& theta,
                           uint8_t dtype, const std::string& path) {
  Checkpoint ckpt;
  ckpt.state = unflatten(config, ParamVector(theta));
  ckpt.dtype = dtype;
  save_checkpoint(ckpt, path);
}

void write_timing(const std::string& run_dir, double wall_seconds,
                  int64_t steps) {
  json t{{"wall_seconds", wall_seconds}, {"steps_completed", steps}};
  t["ms_per_step"] =
      steps > 0 ? 1000.0 * wall_seconds / double(steps) : 0.0;
  write_json_atomic(t, run_dir + "/timing.json");
}

// status "failed" in the index marks runs excluded from frontiers.
void append_index_rows(const std::string& out_root, const std::string& rows) {
  const std::string path = out_root + "/results_index.csv";
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot append to " + path);
  if (fresh) out << kResultsIndexHeader;
  out << rows;
  if (!out.good()) throw IoError("write failed on " + path);
}

std::vector<TradeoffPoint> points_from_json(const json& arr) {
  std::vector<TradeoffPoint> out;
  for (const auto& p : arr) {
    out.push_back(TradeoffPoint{p.at("ft_lr").get<double>(),
                                p.at("L_FT").get<double>(),
                                p.at("L_PT").get<double>(),
                                p.value("ft_run_id", std::string())});
  }
  return out;
}

json points_to_json(const std::vector<TradeoffPoint>& points) {
  json arr = json::array();
  for (const TradeoffPoint& p : points) {
    arr.push_back(json{{"ft_lr", p.ft_lr},
                       {"L_FT", p.L_FT},
                       {"L_PT", p.L_PT},
                       {"ft_run_id", p.ft_run_id}});
  }
  return arr;
}

}  // namespace

void PretrainSpec::validate() const {
  model.validate();
  train_corpus.validate();
  val_corpus.validate();
  if (train_corpus.split != "train") {
    throw ConfigError("pretrain train_corpus must be the train split");
  }
  if (val_corpus.split != "val") {
    throw ConfigError("pretrain val_corpus must be the val split");
  }
  schedule.validate();
  optim.validate();
  sam.validate();
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (steps > 0 && schedule.T != steps) {
    throw ConfigError("schedule.T must equal the step count");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_max_batches < 1) throw ConfigError("eval_max_batches must be >= 1");
  require_dtype(train_dtype);
  for (int64_t s : checkpoint_steps) {
    if (s < 1 || s > steps) {
      throw ConfigError("checkpoint_steps must lie in [1, steps]");
    }
  }
}

std::vector<int64_t> PretrainSpec::resolved_checkpoint_steps() const {
  std::vector<int64_t> out = checkpoint_steps;
  if (out.empty() && steps > 0) {
    if (steps / 4 >= 1) out.push_back(steps / 4);
    if (steps / 2 >= 1) out.push_back(steps / 2);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  // The final state has its own file; an explicit T entry would duplicate it.
  while (!out.empty() && out.back() >= steps) out.pop_back();
  return out;
}

json PretrainSpec::to_json() const {
  validate();
  json ckpts = json::array();
  for (int64_t s : resolved_checkpoint_steps()) ckpts.push_back(s);
  return json{{"kind", "pretrain"},
              {"model", model.to_json()},
              {"train_corpus", train_corpus.to_json()},
              {"val_corpus", val_corpus.to_json()},
              {"schedule", schedule.to_json()},
              {"phases", phases.to_json()},
              {"optim", optim_to_json(optim)},
              {"sam", json{{"rho", sam.rho}}},
              {"steps", steps},
              {"batch_size", batch_size},
              {"data_seed", data_seed},
              {"train_dtype", train_dtype},
              {"checkpoint_steps", ckpts},
              {"eval_max_batches", eval_max_batches}};
}

PretrainSpec PretrainSpec::from_json(const json& j) {
  check_keys(j, "pretrain spec",
             {"kind", "model", "train_corpus", "val_corpus", "schedule",
              "phases", "optim", "sam", "steps", "batch_size", "data_seed",
              "train_dtype", "checkpoint_steps", "eval_max_batches"});
  if (j.contains("kind") && j.at("kind") != "pretrain") {
    throw ConfigError("pretrain spec kind must be \"pretrain\"");
  }
  PretrainSpec s;
  s.model = ModelConfig::from_json(j.at("model"));
  s.train_corpus = CorpusSpec::from_json(j.at("train_corpus"));
  s.val_corpus = CorpusSpec::from_json(j.at("val_corpus"));
  s.schedule = ScheduleSpec::from_json(j.at("schedule"));
  if (j.contains("phases")) s.phases = PhasePlan::from_json(j.at("phases"));
  if (j.contains("optim")) s.optim = optim_from_json(j.at("optim"));
  if (j.contains("sam")) {
    check_keys(j.at("sam"), "sam", {"rho"});
    s.sam.rho = need_number(j.at("sam"), "sam", "rho");
  }
  s.steps = need_count(j, "pretrain spec", "steps");
  if (j.contains("batch_size")) {
    s.batch_size = int(need_count(j, "pretrain spec", "batch_size"));
  }
  if (j.contains("data_seed")) {
    s.data_seed = uint64_t(need_count(j, "pretrain spec", "data_seed"));
  }
  s.train_dtype = j.value("train_dtype", s.train_dtype);
  if (j.contains("checkpoint_steps")) {
    if (!j.at("checkpoint_steps").is_array()) {
      throw ConfigError("checkpoint_steps must be an array");
    }
    for (const auto& e : j.at("checkpoint_steps")) {
      s.checkpoint_steps.push_back(e.get<int64_t>());
    }
  }
  if (j.contains("eval_max_batches")) {
    s.eval_max_batches = int(need_count(j, "pretrain spec", "eval_max_batches"));
  }
  s.validate();
  return s;
}

void FinetuneSpec::validate() const {
  ft_corpus.validate();
  ft_val_corpus.validate();
  if (ft_corpus.split != "train") {
    throw ConfigError("finetune ft_corpus must be the train split");
  }
  if (ft_val_corpus.split != "val") {
    throw ConfigError("finetune ft_val_corpus must be the val split");
  }
  if (!std::isfinite(lr) || lr < 0.0) {
    throw ConfigError("finetune lr must be finite and >= 0");
  }
  if (steps < 1) throw ConfigError("finetune steps must be >= 1");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) {
    throw ConfigError("warmup_frac must be in [0, 1)");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (eval_max_batches < 1) throw ConfigError("eval_max_batches must be >= 1");
  require_dtype(train_dtype);
}

json FinetuneSpec::to_json() const {
  validate();
  return json{{"kind", "finetune"},
              {"ft_corpus", ft_corpus.to_json()},
              {"ft_val_corpus", ft_val_corpus.to_json()},
              {"lr", lr},
              {"steps", steps},
              {"warmup_frac", warmup_frac},
              {"batch_size", batch_size},
              {"weight_decay", weight_decay},
              {"data_seed", data_seed},
              {"train_dtype", train_dtype},
              {"eval_max_batches", eval_max_batches}};
}

FinetuneSpec FinetuneSpec::from_json(const json& j) {
  check_keys(j, "finetune spec",
             {"kind", "ft_corpus", "ft_val_corpus", "lr", "steps",
              "warmup_frac", "batch_size", "weight_decay", "data_seed",
              "train_dtype", "eval_max_batches"});
  if (j.contains("kind") && j.at("kind") != "finetune") {
    throw ConfigError("finetune spec kind must be \"finetune\"");
  }
  FinetuneSpec s;
  s.ft_corpus = CorpusSpec::from_json(j.at("ft_corpus"));
  s.ft_val_corpus = CorpusSpec::from_json(j.at("ft_val_corpus"));
  s.lr = need_number(j, "finetune spec", "lr");
  if (j.contains("steps")) s.steps = need_count(j, "finetune spec", "steps");
  s.warmup_frac = j.value("warmup_frac", s.warmup_frac);
  if (j.contains("batch_size")) {
    s.batch_size = int(need_count(j, "finetune spec", "batch_size"));
  }
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  if (j.contains("data_seed")) {
    s.data_seed = uint64_t(need_count(j, "finetune spec", "data_seed"));
  }
  s.train_dtype = j.value("train_dtype", s.train_dtype);
  if (j.contains("eval_max_batches")) {
    s.eval_max_batches =
        int(need_count(j, "finetune spec", "eval_max_batches"));
  }
  s.validate();
  return s;
}

std::string pretrain_run_id(const PretrainSpec& spec) {
  return hash16(spec.to_json());
}

std::string finetune_run_id(const std::string& parent_run_id,
                            const FinetuneSpec& spec) {
  return hash16(json{{"kind", "finetune"},
                     {"parent_run_id", parent_run_id},
                     {"spec", spec.to_json()}});
}

PretrainResult pretrain_run(const PretrainSpec& spec,
                            const std::string& out_root) {
  spec.validate();
  const json inputs = spec.to_json();
  PretrainResult res;
  res.run_id = hash16(inputs);
  res.run_dir = out_root + "/runs/" + res.run_id;

  const std::string result_path = res.run_dir + "/result.json";
  if (fs::exists(result_path)) {
    const json r = read_json_file(result_path);
    res.status = r.at("status").get<std::string>();
    res.error = r.value("error", std::string());
    res.steps_completed = r.at("steps_completed").get<int64_t>();
    res.L_PT = r.at("L_PT").get<double>();
    res.final_checkpoint = r.at("final_checkpoint").get<std::string>();
    for (const auto& [k, v] : r.at("checkpoints").items()) {
      res.checkpoints[std::stoll(k)] = v.get<std::string>();
    }
    res.from_cache = true;
    return res;
  }
  fs::create_directories(res.run_dir);

  const auto t0 = std::chrono::steady_clock::now();
  const ModelState init = init_transformer(spec.model);
  const auto f = make_loss(init.config);
  const BatchStream stream(spec.train_corpus, spec.batch_size,
                           spec.model.context_len);
  const int64_t n_batches = stream.n_windows() / spec.batch_size;
  if (n_batches < 1) {
    throw ConfigError("train corpus too small for one batch");
  }

  const uint8_t dtype = dtype_code(spec.train_dtype);
  std::string trace = "step,phase,lr,loss\n";
  Eigen::VectorXd final_theta;
  LoopOutcome outcome;

  auto on_checkpoint = [&](int64_t k, const Eigen::VectorXd& th64,
                           const std::vector<int64_t>& at) {
    if (std::find(at.begin(), at.end(), k) == at.end()) return;
    const std::string name = "checkpoint_s" + std::to_string(k) + ".shlb";
    save_state_checkpoint(init.config, th64, dtype, res.run_dir + "/" + name);
    res.checkpoints[k] = name;
  };
  const std::vector<int64_t> ckpt_steps = spec.resolved_checkpoint_steps();

  if (spec.steps == 0) {
    final_theta = init.flatten().vec();
    if (spec.train_dtype == "f32") {
      final_theta = final_theta.cast<float>().cast<double>().eval();
    }
  } else if (spec.train_dtype == "f32") {
    VecX<float> th = init.flatten().vec().cast<float>();
    outcome = run_updates<float>(
        th, *f, stream, n_batches, spec.schedule, spec.phases, spec.optim,
        spec.sam, spec.steps, spec.data_seed, "pretrain-order", trace,
        [&](int64_t k) {
          on_checkpoint(k, th.cast<double>().eval(), ckpt_steps);
        });
    final_theta = th.cast<double>();
  } else {
    VecX<double> th = init.flatten().vec();
    outcome = run_updates<double>(
        th, *f, stream, n_batches, spec.schedule, spec.phases, spec.optim,
        spec.sam, spec.steps, spec.data_seed, "pretrain-order", trace,
        [&](int64_t k) { on_checkpoint(k, th, ckpt_steps); });
    final_theta = th;
  }
  res.status = outcome.status;
  res.error = outcome.error;
  res.steps_completed = spec.steps == 0 ? 0 : outcome.steps_completed;

  res.final_checkpoint = "checkpoint_final.shlb";
  save_state_checkpoint(init.config, final_theta, dtype,
                        res.run_dir + "/" + res.final_checkpoint);
  const ModelState final_state =
      unflatten(init.config, ParamVector(final_theta));
  res.L_PT = eval_loss(final_state, spec.val_corpus, spec.eval_max_batches);

  write_text_atomic(trace, res.run_dir + "/trace.csv");
  json ckpt_map = json::object();
  for (const auto& [k, name] : res.checkpoints) {
    ckpt_map[std::to_string(k)] = name;
  }
  json manifest = inputs;
  manifest["run_id"] = res.run_id;
  manifest["checkpoints"] = ckpt_map;
  manifest["final_checkpoint"] = res.final_checkpoint;
  write_json_atomic(manifest, res.run_dir + "/manifest.json");

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_timing(res.run_dir, wall, res.steps_completed);

  json result{{"run_id", res.run_id},
              {"status", res.status},
              {"steps_completed", res.steps_completed},
              {"L_PT", res.L_PT},
              {"final_checkpoint", res.final_checkpoint},
              {"checkpoints", ckpt_map}};
  if (!res.error.empty()) result["error"] = res.error;
  write_json_atomic(result, result_path);
  return res;
}

FinetuneResult finetune_run(const std::string& parent_run_dir,
                            const FinetuneSpec& spec,
                            const std::string& out_root) {
  spec.validate();
  const json parent_manifest =
      read_json_file(parent_run_dir + "/manifest.json");
  const json parent_result = read_json_file(parent_run_dir + "/result.json");
  const std::string parent_run_id =
      parent_manifest.at("run_id").get<std::string>();
  const double parent_base_lpt = parent_result.at("L_PT").get<double>();

  FinetuneResult res;
  res.run_id = finetune_run_id(parent_run_id, spec);
  res.run_dir = out_root + "/runs/" + res.run_id;
  const std::string result_path = res.run_dir + "/result.json";
  if (fs::exists(result_path)) {
    const json r = read_json_file(result_path);
    res.status = r.at("status").get<std::string>();
    res.error = r.value("error", std::string());
    res.final_checkpoint = r.value("final_checkpoint", std::string());
    for (const auto& a : r.value("alarms", json::array())) {
      res.alarms.push_back(a.get<std::string>());
    }
    if (res.status == "ok") {
      res.point = TradeoffPoint{r.at("ft_lr").get<double>(),
                                r.at("L_FT").get<double>(),
                                r.at("L_PT").get<double>(), res.run_id};
    }
    res.from_cache = true;
    return res;
  }
  fs::create_directories(res.run_dir);
  const auto t0 = std::chrono::steady_clock::now();

  const Checkpoint parent = load_checkpoint(
      parent_run_dir + "/" +
          parent_manifest.at("final_checkpoint").get<std::string>(),
      false);
  const int context_len = parent.state.config.at("context_len").get<int>();
  if (parent.state.config.at("vocab_size").get<int>() != kVocabSize) {
    throw ConfigError("parent vocabulary does not match the corpus family");
  }
  const CorpusSpec parent_val =
      CorpusSpec::from_json(parent_manifest.at("val_corpus"));
  const int parent_eval_batches =
      parent_manifest.at("eval_max_batches").get<int>();

  const auto f = make_loss(parent.state.config);
  const BatchStream stream(spec.ft_corpus, spec.batch_size, context_len);
  const int64_t n_batches = stream.n_windows() / spec.batch_size;
  if (n_batches < 1) throw ConfigError("ft corpus too small for one batch");

  int64_t warmup = int64_t(std::llround(spec.warmup_frac * double(spec.steps)));
  warmup = std::min(warmup, spec.steps - 1);
  const ScheduleSpec sched =
      ScheduleSpec::cosine(spec.lr, 0.0, warmup, spec.steps);
  const PhasePlan phases = PhasePlan::constant(OptTag::adamw);
  OptimConfig oc;
  oc.weight_decay = spec.weight_decay;
  const SAMConfig sc{0.0};

  std::string trace = "step,phase,lr,loss\n";
  Eigen::VectorXd final_theta;
  LoopOutcome outcome;
  if (spec.train_dtype == "f32") {
    VecX<float> th = parent.state.flatten().vec().cast<float>();
    outcome = run_updates<float>(th, *f, stream, n_batches, sched, phases, oc,
                                 sc, spec.steps, spec.data_seed,
                                 "finetune-order", trace, [](int64_t) {});
    final_theta = th.cast<double>();
  } else {
    VecX<double> th = parent.state.flatten().vec();
    outcome = run_updates<double>(th, *f, stream, n_batches, sched, phases, oc,
                                  sc, spec.steps, spec.data_seed,
                                  "finetune-order", trace, [](int64_t) {});
    final_theta = th;
  }
  res.status = outcome.status;
  res.error = outcome.error;

  write_text_atomic(trace, res.run_dir + "/trace.csv");
  json manifest{{"kind", "finetune"},
                {"run_id", res.run_id},
                {"parent_run_id", parent_run_id},
                {"parent_run_dir", parent_run_dir},
                {"spec", spec.to_json()}};

  json result{{"run_id", res.run_id},
              {"parent_run_id", parent_run_id},
              {"status", res.status},
              {"ft_lr", spec.lr}};
  if (res.status == "ok") {
    const ModelState final_state =
        unflatten(parent.state.config, ParamVector(final_theta));
    const double l_ft =
        eval_loss(final_state, spec.ft_val_corpus, spec.eval_max_batches);
    const double l_pt = eval_loss(final_state, parent_val, parent_eval_batches);
    if (!std::isfinite(l_ft) || !std::isfinite(l_pt)) {
      res.status = "numeric_failure";
      res.error = "non-finite evaluation loss";
      result["status"] = res.status;
    } else {
      res.point = TradeoffPoint{spec.lr, l_ft, l_pt, res.run_id};
      if (l_pt < parent_base_lpt - 0.02) {
        res.alarms.push_back(
            "calibration alarm: run " + res.run_id + " L_PT " +
            format_number(l_pt) + " is more than 0.02 below the parent's " +
            format_number(parent_base_lpt));
      }
      res.final_checkpoint = "checkpoint_final.shlb";
      save_state_checkpoint(parent.state.config, final_theta,
                            dtype_code(spec.train_dtype),
                            res.run_dir + "/" + res.final_checkpoint);
      manifest["final_checkpoint"] = res.final_checkpoint;
      result["L_FT"] = l_ft;
      result["L_PT"] = l_pt;
      result["final_checkpoint"] = res.final_checkpoint;
      result["alarms"] = res.alarms;
    }
  }
  if (!res.error.empty()) result["error"] = res.error;
  write_json_atomic(manifest, res.run_dir + "/manifest.json");
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_timing(res.run_dir, wall, outcome.steps_completed);
  write_json_atomic(result, result_path);
  return res;
}

TradeoffSet finetune_sweep(const std::string& parent_run_dir,
                           const std::vector<double>& lrs,
                           const FinetuneSpec& spec_template,
                           const std::string& out_root, int jobs) {
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  const json parent_manifest =
      read_json_file(parent_run_dir + "/manifest.json");

  TradeoffSet set;
  set.parent_run_id = parent_manifest.at("run_id").get<std::string>();
  json lrs_json = json::array();
  for (double lr : lrs) lrs_json.push_back(lr);
  {
    FinetuneSpec probe = spec_template;
    probe.lr = kCanonicalFtLr;  // template identity must not depend on its lr
    set.set_id = hash16(json{{"kind", "sweep"},
                             {"parent_run_id", set.parent_run_id},
                             {"lrs", lrs_json},
                             {"template", probe.to_json()}});
  }

  const size_t n = lrs.size();
  std::vector<FinetuneResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        FinetuneSpec spec = spec_template;
        spec.lr = lrs[i];
        results[i] = finetune_run(parent_run_dir, spec, out_root);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n_workers = int(std::min<size_t>(size_t(jobs), std::max<size_t>(n, 1)));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::string rows;
  for (size_t i = 0; i < n; ++i) {
    const FinetuneResult& r = results[i];
    rows += set.parent_run_id;
    rows += ',';
    rows += r.run_id;
    rows += ',';
    rows += format_number(lrs[i]);
    if (r.status == "ok") {
      set.points.push_back(r.point);
      rows += ',';
      rows += format_number(r.point.L_FT);
      rows += ',';
      rows += format_number(r.point.L_PT);
      rows += ",ok\n";
    } else {
      set.failures.push_back(SweepFailure{lrs[i], r.run_id, r.error});
      rows += ",nan,nan,failed\n";
    }
    for (const std::string& a : r.alarms) set.alarms.push_back(a);
  }
  if (!lrs.empty() && set.points.empty()) {
    throw NumericError("every fine-tune in the sweep failed");
  }

  // The summary doubles as the index idempotency marker: a replayed sweep
  // whose summary already exists does not append duplicate rows.
  const std::string summary_path =
      out_root + "/sweeps/" + set.set_id + ".json";
  if (!fs::exists(summary_path)) {
    append_index_rows(out_root, rows);
    fs::create_directories(out_root + "/sweeps");
    write_json_atomic(set.to_json(), summary_path);
  }
  return set;
}

json TradeoffSet::to_json() const {
  json failures_json = json::array();
  for (const SweepFailure& f : failures) {
    failures_json.push_back(json{
        {"ft_lr", f.ft_lr}, {"ft_run_id", f.ft_run_id}, {"error", f.error}});
  }
  return json{{"set_id", set_id},
              {"parent_run_id", parent_run_id},
              {"label", label},
              {"points", points_to_json(points)},
              {"failures", failures_json},
              {"alarms", alarms}};
}

TradeoffSet TradeoffSet::from_json(const json& j) {
  TradeoffSet s;
  s.set_id = j.value("set_id", std::string());
  s.parent_run_id = j.value("parent_run_id", std::string());
  s.label = j.value("label", std::string());
  s.points = points_from_json(j.at("points"));
  for (const auto& f : j.value("failures", json::array())) {
    s.failures.push_back(SweepFailure{f.at("ft_lr").get<double>(),
                                      f.value("ft_run_id", std::string()),
                                      f.value("error", std::string())});
  }
  for (const auto& a : j.value("alarms", json::array())) {
    s.alarms.push_back(a.get<std::string>());
  }
  return s;
}

json FrontierResult::to_json() const {
  return json{{"provenance", provenance}, {"points", points_to_json(points)}};
}

std::vector<TradeoffPoint> pareto_frontier(std::vector<TradeoffPoint> points) {
  if (points.empty()) {
    throw DomainError("pareto frontier of an empty tradeoff set");
  }
  for (const TradeoffPoint& p : points) {
    if (!std::isfinite(p.L_FT) || !std::isfinite(p.L_PT)) {
      throw NumericError("tradeoff point losses must be finite");
    }
  }
  std::stable_sort(points.begin(), points.end(),
                   [](const TradeoffPoint& a, const TradeoffPoint& b) {
                     if (a.L_FT != b.L_FT) return a.L_FT < b.L_FT;
                     return a.L_PT < b.L_PT;
                   });
  std::vector<TradeoffPoint> kept;
  double best_prev = std::numeric_limits<double>::infinity();
  size_t i = 0;
  while (i < points.size()) {
    size_t j = i;
    while (j < points.size() && points[j].L_FT == points[i].L_FT) ++j;
    const double group_min = points[i].L_PT;  // sorted within the group
    if (group_min < best_prev) {
      for (size_t k = i; k < j && points[k].L_PT == group_min; ++k) {
        kept.push_back(points[k]);
      }
      best_prev = group_min;
    }
    i = j;
  }
  return kept;
}

FrontierResult pareto_frontier(const TradeoffSet& set) {
  FrontierResult out;
  out.provenance = set.set_id;
  out.points = pareto_frontier(set.points);
  return out;
}

json ThresholdReport::to_json() const {
  json arr = json::array();
  for (const CheckpointThreshold& c : checkpoints) {
    arr.push_back(json{{"label", c.label},
                       {"min_L_FT", c.min_L_FT},
                       {"L_PT_at_tau", c.L_PT_at_tau}});
  }
  return json{{"tau", tau}, {"checkpoints", arr}};
}

ThresholdReport matched_ft_threshold(const std::vector<TradeoffSet>& sets) {
  if (sets.empty()) {
    throw DomainError("threshold needs at least one tradeoff set");
  }
  ThresholdReport report;
  report.tau = -std::numeric_limits<double>::infinity();
  for (const TradeoffSet& s : sets) {
    if (s.points.empty()) {
      throw DomainError("threshold needs every tradeoff set nonempty");
    }
    double min_lft = std::numeric_limits<double>::infinity();
    for (const TradeoffPoint& p : s.points) {
      min_lft = std::min(min_lft, p.L_FT);
    }
    report.checkpoints.push_back(CheckpointThreshold{
        s.label.empty() ? s.set_id : s.label, min_lft, 0.0});
    report.tau = std::max(report.tau, min_lft);
  }
  for (size_t i = 0; i < sets.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const TradeoffPoint& p : sets[i].points) {
      if (p.L_FT <= report.tau) best = std::min(best, p.L_PT);
    }
    if (!std::isfinite(best)) {
      // tau is the max of per-set minima, so every set reaches it.
      throw Error("threshold invariant violated: a set has no point at tau");
    }
    report.checkpoints[i].L_PT_at_tau = best;
  }
  return report;
}

json ForgettingReduction::to_json() const {
  json j{{"defined", defined},
         {"forget_a", forget_a},
         {"forget_b", forget_b}};
  if (defined) {
    j["value"] = value;
  } else {
    j["value"] = nullptr;
    j["note"] = "undefined: baseline forgetting is not positive";
  }
  return j;
}

ForgettingReduction forgetting_reduction(const FrontierResult& frontier_a,
                                         const FrontierResult& frontier_b,
                                         double tau, double base_a,
                                         double base_b) {
  auto lpt_at_tau = [tau](const FrontierResult& fr, const char* which) {
    double best = std::numeric_limits<double>::infinity();
    for (const TradeoffPoint& p : fr.points) {
      if (p.L_FT <= tau) best = std::min(best, p.L_PT);
    }
    if (!std::isfinite(best)) {
      throw DomainError(std::string("frontier ") + which +
                        " has no point with L_FT <= tau");
    }
    return best;
  };
  ForgettingReduction out;
  out.forget_a = lpt_at_tau(frontier_a, "A") - base_a;
  out.forget_b = lpt_at_tau(frontier_b, "B") - base_b;
  if (out.forget_a <= 0.0) {
    out.defined = false;
    return out;
  }
  out.defined = true;
  out.value = 1.0 - out.forget_b / out.forget_a;
  return out;
}

}  // namespace shlab

#include "shlab.h"

#include <charconv>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "core/curvature.hpp"
#include "core/data.hpp"
#include "core/errors.hpp"
#include "core/harness.hpp"
#include "core/model.hpp"
#include "core/persistence.hpp"
#include "core/probes.hpp"

namespace fs = std::filesystem;
using shlab::json;

struct shlab_model {
  shlab::Checkpoint ckpt;
};

namespace {

thread_local std::string g_last_error;

shlab_status fail(shlab_status code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

// Every entry point funnels through here so the C surface never throws and
// the code <-> exception mapping lives in one place.
template <typename Fn>
shlab_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return SHLAB_OK;
  } catch (const shlab::ConfigError& e) {
    return fail(SHLAB_ERR_CONFIG, e.what());
  } catch (const shlab::IoError& e) {
    return fail(SHLAB_ERR_IO, e.what());
  } catch (const shlab::NumericError& e) {
    return fail(SHLAB_ERR_NUMERIC, e.what());
  } catch (const shlab::StructureError& e) {
    return fail(SHLAB_ERR_STRUCTURE, e.what());
  } catch (const shlab::DomainError& e) {
    return fail(SHLAB_ERR_DOMAIN, e.what());
  } catch (const json::exception& e) {
    return fail(SHLAB_ERR_CONFIG, e.what());
  } catch (const std::exception& e) {
    return fail(SHLAB_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(SHLAB_ERR_INTERNAL, "unknown error");
  }
}

const char* require_cstr(const char* s, const char* what) {
  if (!s) throw shlab::ConfigError(std::string(what) + " is null");
  return s;
}

template <typename T>
T* require_ptr(T* p, const char* what) {
  if (!p) throw shlab::ConfigError(std::string(what) + " is null");
  return p;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_config(const char* s, const char* what) {
  require_cstr(s, what);
  json j = json::parse(s, nullptr, false);
  if (j.is_discarded()) {
    throw shlab::ConfigError(std::string(what) + " is not valid json");
  }
  if (!j.is_object()) {
    throw shlab::ConfigError(std::string(what) + " must be a json object");
  }
  return j;
}

void check_keys(const json& j, const char* what,
                std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) {
      throw shlab::ConfigError(std::string(what) + ": unknown key \"" + key +
                               "\"");
    }
  }
}

std::vector<double> number_list(const json& j, const char* what) {
  if (!j.is_array()) throw shlab::ConfigError(std::string(what) + " must be an array");
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) {
      throw shlab::ConfigError(std::string(what) + " must hold numbers");
    }
    out.push_back(v.get<double>());
  }
  return out;
}

void append_with_header(const std::string& path, const char* header,
                        const std::string& rows) {
  fs::create_directories(fs::path(path).parent_path());
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw shlab::IoError("cannot append to " + path);
  if (fresh) out << header;
  out << rows;
  if (!out.good()) throw shlab::IoError("write failed on " + path);
}

// ---- results index reading ---------------------------------------------

struct IndexRow {
  std::string parent_run_id;
  std::string ft_run_id;
  double ft_lr = 0.0;
  double L_FT = 0.0;
  double L_PT = 0.0;
  std::string status;
};

double parse_csv_number(const std::string& field, const std::string& line) {
  double v = 0.0;
  const char* b = field.data();
  const char* e = b + field.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) {
    throw shlab::ConfigError("malformed number in index row: " + line);
  }
  return v;
}

std::vector<IndexRow> read_results_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw shlab::IoError("cannot open results index: " + path);
  std::string line;
  if (!std::getline(in, line) || line + "\n" != shlab::kResultsIndexHeader) {
    throw shlab::ConfigError("not a results index: " + path);
  }
  std::vector<IndexRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    size_t start = 0;
    while (true) {
      size_t comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 6) {
      throw shlab::ConfigError("malformed index row: " + line);
    }
    IndexRow r;
    r.parent_run_id = f[0];
    r.ft_run_id = f[1];
    r.ft_lr = parse_csv_number(f[2], line);
    r.L_FT = parse_csv_number(f[3], line);
    r.L_PT = parse_csv_number(f[4], line);
    r.status = f[5];
    rows.push_back(std::move(r));
  }
  return rows;
}

// Successful rows of one parent, in file order, as a trade-off set.
shlab::TradeoffSet set_from_index(const std::vector<IndexRow>& rows,
                                  const std::string& parent_run_id,
                                  const std::string& label) {
  shlab::TradeoffSet set;
  set.set_id = parent_run_id;
  set.parent_run_id = parent_run_id;
  set.label = label.empty() ? parent_run_id : label;
  for (const auto& r : rows) {
    if (r.parent_run_id != parent_run_id || r.status != "ok") continue;
    set.points.push_back({r.ft_lr, r.L_FT, r.L_PT, r.ft_run_id});
  }
  return set;
}

json prediction_json(const shlab::ForgettingPrediction& p) {
  return json{{"base_loss", p.base_loss},
              {"gradient_term", p.gradient_term},
              {"quadratic_term", p.quadratic_term},
              {"with_gradient", p.with_gradient()},
              {"without_gradient", p.without_gradient()}};
}

}  // namespace

extern "C" {

const char* shlab_last_error(void) { return g_last_error.c_str(); }

void shlab_string_free(char* s) { std::free(s); }

// ---- model handles -------------------------------------------------------

shlab_status shlab_model_load(const char* path, shlab_model** out) {
  return guarded([&] {
    require_ptr(out, "out");
    auto m = std::make_unique<shlab_model>();
    m->ckpt = shlab::load_checkpoint(require_cstr(path, "path"), true);
    *out = m.release();
  });
}

shlab_status shlab_model_save(const shlab_model* m, const char* path) {
  return guarded([&] {
    require_ptr(m, "model");
    shlab::save_checkpoint(m->ckpt, require_cstr(path, "path"));
  });
}

void shlab_model_free(shlab_model* m) { delete m; }

shlab_status shlab_model_param_count(const shlab_model* m, int64_t* out) {
  return guarded([&] {
    require_ptr(m, "model");
    require_ptr(out, "out");
    *out = int64_t(m->ckpt.state.param_count());
  });
}

shlab_status shlab_model_eval_loss(const shlab_model* m,
                                   const char* corpus_spec_json,
                                   int max_batches, double* out) {
  return guarded([&] {
    require_ptr(m, "model");
    require_ptr(out, "out");
    const auto spec = shlab::CorpusSpec::from_json(
        parse_config(corpus_spec_json, "corpus spec"));
    *out = shlab::eval_loss(m->ckpt.state, spec, max_batches);
  });
}

shlab_status shlab_model_quantize(const shlab_model* m, int bits,
                                  int block_size, shlab_model** out) {
  return guarded([&] {
    require_ptr(m, "model");
    require_ptr(out, "out");
    auto q = std::make_unique<shlab_model>();
    q->ckpt.state = shlab::quantize(m->ckpt.state, bits, block_size);
    q->ckpt.dtype = m->ckpt.dtype;
    *out = q.release();
  });
}

shlab_status shlab_model_gaussian_perturb(const shlab_model* m, double gamma,
                                          uint64_t seed, shlab_model** out) {
  return guarded([&] {
    require_ptr(m, "model");
    require_ptr(out, "out");
    auto p = std::make_unique<shlab_model>();
    p->ckpt.state = shlab::gaussian_perturb(m->ckpt.state, gamma, seed);
    p->ckpt.dtype = m->ckpt.dtype;
    *out = p.release();
  });
}

// ---- orchestration ---------------------------------------------------------

shlab_status shlab_run_pretrain(const char* spec_json, const char* out_root,
                                char** out_json) {
  return guarded([&] {
    require_ptr(out_json, "out_json");
    const auto spec =
        shlab::PretrainSpec::from_json(parse_config(spec_json, "pretrain spec"));
    const auto r =
        shlab::pretrain_run(spec, require_cstr(out_root, "out_root"));
    json ckpts = json::object();
    for (const auto& [step, name] : r.checkpoints) {
      ckpts[std::to_string(step)] = name;
    }
    json out{{"run_id", r.run_id},
             {"run_dir", r.run_dir},
             {"status", r.status},
             {"steps_completed", r.steps_completed},
             {"L_PT", r.L_PT},
             {"checkpoints", ckpts},
             {"final_checkpoint", r.final_checkpoint},
             {"from_cache", r.from_cache}};
    if (!r.error.empty()) out["error"] = r.error;
    *out_json = dup_string(out.dump(2));
  });
}

shlab_status shlab_run_finetune_sweep(const char* config_json,
                                      const char* out_root, int jobs,
                                      char** out_json) {
  return guarded([&] {
    require_ptr(out_json, "out_json");
    if (jobs < 1) throw shlab::ConfigError("jobs must be >= 1");
    const json c = parse_config(config_json, "sweep config");
    check_keys(c, "sweep config", {"parent_run_dir", "lrs", "ft"});
    const std::string parent =
        c.at("parent_run_dir").get<std::string>();
    std::vector<double> lrs = shlab::kDeskFtLrGrid;
    if (c.contains("lrs")) lrs = number_list(c.at("lrs"), "lrs");
    const auto ft = shlab::FinetuneSpec::from_json(c.at("ft"));
    const auto set = shlab::finetune_sweep(
        parent, lrs, ft, require_cstr(out_root, "out_root"), jobs);
    *out_json = dup_string(set.to_json().dump(2));
  });
}

shlab_status shlab_run_probe(const char* config_json, const char* out_dir,
                             char** out_json) {
  return guarded([&] {
    require_ptr(out_json, "out_json");
    const std::string dir = require_cstr(out_dir, "out_dir");
    const json c = parse_config(config_json, "probe config");
    check_keys(c, "probe config",
               {"run_id", "checkpoint", "corpus", "eval_max_batches", "kind",
                "bits", "block_size", "gammas", "seeds"});
    const std::string run_id = c.at("run_id").get<std::string>();
    const std::string kind = c.at("kind").get<std::string>();
    const auto corpus = shlab::CorpusSpec::from_json(c.at("corpus"));
    const int max_batches = c.value("eval_max_batches", 32);
    const auto ckpt =
        shlab::load_checkpoint(c.at("checkpoint").get<std::string>(), false);

    std::vector<shlab::ProbeSpec> specs;
    if (kind == "quant") {
      std::vector<double> bits = {8.0, 4.0};
      if (c.contains("bits")) bits = number_list(c.at("bits"), "bits");
      const int block = c.value("block_size", 64);
      for (double b : bits) {
        shlab::ProbeSpec s;
        s.kind = "quant";
        s.bits = int(b);
        s.block_size = block;
        specs.push_back(s);
      }
    } else if (kind == "gaussian") {
      std::vector<double> gammas(shlab::kGammaGrid.begin(),
                                 shlab::kGammaGrid.end());
      if (c.contains("gammas")) gammas = number_list(c.at("gammas"), "gammas");
      std::vector<uint64_t> seeds = {1, 2, 3};
      if (c.contains("seeds")) {
        seeds.clear();
        for (double s : number_list(c.at("seeds"), "seeds")) {
          seeds.push_back(uint64_t(s));
        }
      }
      for (double g : gammas) {
        shlab::ProbeSpec s;
        s.kind = "gaussian";
        s.gamma = g;
        s.seeds = seeds;
        specs.push_back(s);
      }
    } else {
      throw shlab::ConfigError("probe kind must be quant or gaussian");
    }

    const auto results =
        shlab::probe_sweep(ckpt.state, specs, corpus, max_batches);
    std::string csv;
    json out_results = json::array();
    for (const auto& r : results) {
      shlab::append_probe_csv(csv, run_id, r);
      json jr{{"kind", r.kind},
              {"param", r.param},
              {"base_loss", r.base_loss},
              {"perturbed_loss", r.perturbed_loss},
              {"degradation", r.degradation}};
      if (!r.per_seed.empty()) {
        json per = json::array();
        for (const auto& [s, loss] : r.per_seed) {
          per.push_back(json{{"seed", s}, {"loss", loss}});
        }
        jr["per_seed"] = per;
      }
      if (!r.skipped.empty()) jr["skipped"] = r.skipped;
      out_results.push_back(jr);
    }
    const std::string csv_path = dir + "/probes.csv";
    append_with_header(csv_path, shlab::kProbeCsvHeader, csv);
    json out{{"run_id", run_id}, {"csv", csv_path}, {"results", out_results}};
    *out_json = dup_string(out.dump(2));
  });
}

shlab_status shlab_run_curvature(const char* config_json, const char* out_dir,
                                 char** out_json) {
  return guarded([&] {
    require_ptr(out_json, "out_json");
    const std::string dir = require_cstr(out_dir, "out_dir");
    const json c = parse_config(config_json, "curvature config");
    check_keys(c, "curvature config",
               {"run_id", "checkpoint", "corpus", "n_batches", "seed", "trace",
                "lambda_max", "direction"});
    const std::string run_id = c.at("run_id").get<std::string>();
    const auto corpus = shlab::CorpusSpec::from_json(c.at("corpus"));
    const int n_batches = c.value("n_batches", 8);
    const uint64_t seed = c.value("seed", uint64_t(1));
    const auto ckpt =
        shlab::load_checkpoint(c.at("checkpoint").get<std::string>(), false);
    const auto loss = shlab::make_loss(ckpt.state.config);
    const auto theta = ckpt.state.flatten();
    const int context_len = ckpt.state.config.at("context_len").get<int>();
    const auto cb =
        shlab::curvature_batches(corpus, context_len, n_batches, seed);

    std::string csv;
    json out{{"run_id", run_id},
             {"batch_seed", cb.seed},
             {"n_batches", n_batches}};

    if (c.contains("trace")) {
      check_keys(c.at("trace"), "trace", {"probes"});
      const int probes = c.at("trace").at("probes").get<int>();
      const auto t =
          shlab::hessian_trace(*loss, theta, probes, cb.batches, seed);
      shlab::append_curvature_csv(csv, run_id, "trace", t.value, probes, seed,
                                  cb.seed);
      out["trace"] = json{{"value", t.value},
                          {"probes", probes},
                          {"per_probe", t.per_probe}};
    }
    if (c.contains("lambda_max")) {
      check_keys(c.at("lambda_max"), "lambda_max", {"max_iters", "tol"});
      const int max_iters = c.at("lambda_max").at("max_iters").get<int>();
      const double tol = c.at("lambda_max").at("tol").get<double>();
      const auto l =
          shlab::lambda_max(*loss, theta, max_iters, tol, cb.batches, seed);
      shlab::append_curvature_csv(csv, run_id, "lambda_max", l.value, l.iters,
                                  seed, cb.seed);
      out["lambda_max"] = json{{"value", l.value},
                               {"iters", l.iters},
                               {"converged", l.converged}};
    }
    if (c.contains("direction")) {
      check_keys(c.at("direction"), "direction", {"run_id", "checkpoint"});
      const std::string dir_run_id =
          c.at("direction").at("run_id").get<std::string>();
      const auto other = shlab::load_checkpoint(
          c.at("direction").at("checkpoint").get<std::string>(), false);
      if (other.state.param_count() != ckpt.state.param_count()) {
        throw shlab::StructureError(
            "direction checkpoint has a different parameter count");
      }
      const auto theta_ft = other.state.flatten();
      const shlab::ParamVector delta(theta_ft.vec() - theta.vec());
      const double kappa =
          shlab::directional_sharpness(*loss, theta, delta, cb.batches);
      shlab::append_curvature_csv(csv, dir_run_id, "kappa", kappa, 0, 0,
                                  cb.seed);
      const auto pred = shlab::quadratic_forgetting_prediction(
          *loss, theta, delta, cb.batches);
      const double observed =
          shlab::subsample_loss(*loss, theta_ft, cb.batches);
      out["direction"] = json{{"finetune_run_id", dir_run_id},
                              {"pretrain_run_id", run_id},
                              {"kappa", kappa},
                              {"prediction", prediction_json(pred)},
                              {"observed", observed}};
    }
    const std::string csv_path = dir + "/curvature.csv";
    if (!csv.empty()) {
      append_with_header(csv_path, shlab::kCurvatureCsvHeader, csv);
    }
    out["csv"] = csv_path;
    *out_json = dup_string(out.dump(2));
  });
}

shlab_status shlab_pareto_from_index(const char* config_json,
                                     char** out_json) {
  return guarded([&] {
    require_ptr(out_json, "out_json");
    const json c = parse_config(config_json, "pareto config");
    check_keys(c, "pareto config", {"index", "parent_run_id"});
    const auto rows = read_results_index(c.at("index").get<std::string>());
    std::string parent;
    if (c.contains("parent_run_id")) {
      parent = c.at("parent_run_id").get<std::string>();
    } else {
      std::set<std::string> parents;
      for (const auto& r : rows) parents.insert(r.parent_run_id);
      if (parents.size() != 1) {
        throw shlab::ConfigError(
            "index holds " + std::to_string(parents.size()) +
            " parents; pass parent_run_id");
      }
      parent = *parents.begin();
    }
    const auto set = set_from_index(rows, parent, parent);
    if (set.points.empty()) {
      bool seen = false;
      for (const auto& r : rows) seen = seen || r.parent_run_id == parent;
      if (!seen) {
        throw shlab::DomainError("no rows for parent " + parent +
                                 " in the index");
      }
    }
    const auto frontier = shlab::pareto_frontier(set);
    *out_json = dup_string(frontier.to_json().dump(2));
  });
}

shlab_status shlab_threshold_from_index(const char* config_json,
                                        char** out_json) {
  return guarded([&] {
    require_ptr(out_json, "out_json");
    const json c = parse_config(config_json, "threshold config");
    check_keys(c, "threshold config", {"index", "parents", "reduction"});
    const auto rows = read_results_index(c.at("index").get<std::string>());
    if (!c.at("parents").is_array() || c.at("parents").empty()) {
      throw shlab::ConfigError("parents must be a nonempty array");
    }
    std::vector<shlab::TradeoffSet> sets;
    for (const auto& p : c.at("parents")) {
      check_keys(p, "parents entry", {"run_id", "label"});
      sets.push_back(set_from_index(rows, p.at("run_id").get<std::string>(),
                                    p.value("label", "")));
    }
    const auto report = shlab::matched_ft_threshold(sets);
    json out = report.to_json();
    if (c.contains("reduction")) {
      const json& r = c.at("reduction");
      check_keys(r, "reduction", {"a", "b", "base_a", "base_b"});
      const std::string a = r.at("a").get<std::string>();
      const std::string b = r.at("b").get<std::string>();
      const shlab::TradeoffSet* set_a = nullptr;
      const shlab::TradeoffSet* set_b = nullptr;
      for (const auto& s : sets) {
        if (s.label == a) set_a = &s;
        if (s.label == b) set_b = &s;
      }
      if (!set_a || !set_b) {
        throw shlab::ConfigError("reduction labels must name listed parents");
      }
      const auto red = shlab::forgetting_reduction(
          shlab::pareto_frontier(*set_a), shlab::pareto_frontier(*set_b),
          report.tau, r.at("base_a").get<double>(),
          r.at("base_b").get<double>());
      json jr = red.to_json();
      jr["a"] = a;
      jr["b"] = b;
      out["forgetting_reduction"] = jr;
    }
    *out_json = dup_string(out.dump(2));
  });
}

shlab_status shlab_run_report(const char* config_json, const char* out_dir,
                              char** out_json) {
  return guarded([&] {
    require_ptr(out_json, "out_json");
    const std::string dir = require_cstr(out_dir, "out_dir");
    const json c = parse_config(config_json, "report config");
    check_keys(c, "report config", {"index", "sets", "quant"});
    const auto rows = read_results_index(c.at("index").get<std::string>());
    if (!c.at("sets").is_array() || c.at("sets").empty()) {
      throw shlab::ConfigError("sets must be a nonempty array");
    }

    std::string frontier_csv = "label,ft_lr,L_FT,L_PT\n";
    json out_sets = json::array();
    std::vector<std::pair<std::string, std::string>> checkpoints;
    for (const auto& s : c.at("sets")) {
      check_keys(s, "sets entry", {"parent_run_id", "label", "checkpoint"});
      const std::string parent = s.at("parent_run_id").get<std::string>();
      const std::string label = s.value("label", parent);
      const auto set = set_from_index(rows, parent, label);
      const auto frontier = shlab::pareto_frontier(set);
      for (const auto& p : frontier.points) {
        frontier_csv += label + "," + shlab::format_number(p.ft_lr) + "," +
                        shlab::format_number(p.L_FT) + "," +
                        shlab::format_number(p.L_PT) + "\n";
      }
      out_sets.push_back(json{{"label", label},
                              {"parent_run_id", parent},
                              {"frontier_points", frontier.points.size()}});
      checkpoints.emplace_back(label, s.value("checkpoint", ""));
    }
    fs::create_directories(dir);
    const std::string frontier_path = dir + "/frontier.csv";
    shlab::write_text_atomic(frontier_csv, frontier_path);
    json out{{"frontier_csv", frontier_path},
             {"quantization_csv", nullptr},
             {"sets", out_sets}};

    if (c.contains("quant")) {
      const json& q = c.at("quant");
      check_keys(q, "quant", {"bits", "block_size", "corpus",
                              "eval_max_batches"});
      const auto bits = number_list(q.at("bits"), "bits");
      const int block = q.value("block_size", 64);
      const auto corpus = shlab::CorpusSpec::from_json(q.at("corpus"));
      const int max_batches = q.value("eval_max_batches", 32);
      std::string quant_csv = "label,bits,base_loss,quantized_loss,degradation\n";
      for (const auto& [label, ckpt_path] : checkpoints) {
        if (ckpt_path.empty()) {
          throw shlab::ConfigError("set \"" + label +
                                   "\" needs a checkpoint for quant rows");
        }
        const auto ckpt = shlab::load_checkpoint(ckpt_path, false);
        std::vector<shlab::ProbeSpec> specs;
        for (double b : bits) {
          shlab::ProbeSpec ps;
          ps.kind = "quant";
          ps.bits = int(b);
          ps.block_size = block;
          specs.push_back(ps);
        }
        const auto results =
            shlab::probe_sweep(ckpt.state, specs, corpus, max_batches);
        for (const auto& r : results) {
          quant_csv += label + "," + shlab::format_number(r.param) + "," +
                       shlab::format_number(r.base_loss) + "," +
                       shlab::format_number(r.perturbed_loss) + "," +
                       shlab::format_number(r.degradation) + "\n";
        }
      }
      const std::string quant_path = dir + "/quantization.csv";
      shlab::write_text_atomic(quant_csv, quant_path);
      out["quantization_csv"] = quant_path;
    }
    *out_json = dup_string(out.dump(2));
  });
}

}  // extern "C"

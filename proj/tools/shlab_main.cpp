// Operator shell: resolves a JSON config (file + dotted-key overrides),
// writes the resolved manifest next to the outputs, and hands the config to
// the C library. All results go to stdout as JSON; failures produce a
// machine-readable error object on stderr and the library's status code as
// the exit code, so config (2), io (3), and numeric (4) failures are
// distinguishable by a caller.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "shlab.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* status_kind(int code) {
  switch (code) {
    case SHLAB_ERR_CONFIG: return "config";
    case SHLAB_ERR_IO: return "io";
    case SHLAB_ERR_NUMERIC: return "numeric";
    case SHLAB_ERR_STRUCTURE: return "structure";
    case SHLAB_ERR_DOMAIN: return "domain";
    default: return "internal";
  }
}

int emit_error(int code, const std::string& message) {
  json err{{"error", {{"code", code},
                      {"kind", status_kind(code)},
                      {"message", message}}}};
  std::fprintf(stderr, "%s\n", err.dump().c_str());
  return code;
}

json read_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::pair<int, std::string>(SHLAB_ERR_IO,
                                             "cannot open config: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) {
    throw std::pair<int, std::string>(SHLAB_ERR_CONFIG,
                                      "config is not valid json: " + path);
  }
  if (!j.is_object()) {
    throw std::pair<int, std::string>(SHLAB_ERR_CONFIG,
                                      "config must be a json object: " + path);
  }
  return j;
}

// key.path=value; the value is parsed as JSON when it parses, kept as a
// string otherwise, so `steps=40`, `lrs=[1e-4]`, and `variant=wsd` all work.
void apply_override(json& config, const std::string& kv) {
  const auto bad = [&](const std::string& why) {
    throw std::pair<int, std::string>(
        SHLAB_ERR_CONFIG, "bad override \"" + kv + "\": " + why);
  };
  const size_t eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) bad("expected key=value");
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    const size_t dot = key.find('.', start);
    parts.push_back(key.substr(start, dot - start));
    if (parts.back().empty()) bad("empty key segment");
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json* node = &config;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (!next.is_object() && !next.is_null()) {
      bad("\"" + parts[i] + "\" is not an object");
    }
    node = &next;
  }
  (*node)[parts.back()] = value;
}

void write_manifest(const std::string& out_dir, const std::string& subcommand,
                    const json& config, int jobs) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    throw std::pair<int, std::string>(
        SHLAB_ERR_IO, "cannot create output dir: " + out_dir);
  }
  json m{{"subcommand", subcommand}, {"out", out_dir}, {"config", config}};
  if (subcommand == "finetune-sweep") m["jobs"] = jobs;
  const std::string path = out_dir + "/" + subcommand + "_manifest.json";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::pair<int, std::string>(SHLAB_ERR_IO,
                                      "cannot write manifest: " + path);
  }
  out << m.dump(2) << "\n";
  if (!out.good()) {
    throw std::pair<int, std::string>(SHLAB_ERR_IO,
                                      "cannot write manifest: " + path);
  }
}

// The probe subcommand pair is the only place the CLI adds a config field.
void set_probe_kind(json& config, const std::string& kind) {
  if (config.contains("kind") && config.at("kind") != kind) {
    throw std::pair<int, std::string>(
        SHLAB_ERR_CONFIG, "config kind \"" +
                              config.at("kind").get<std::string>() +
                              "\" conflicts with the subcommand");
  }
  config["kind"] = kind;
}

int run_command(const std::string& name, const std::string& config_path,
                std::string out_dir, const std::vector<std::string>& overrides,
                int jobs) {
  if (const char* env = std::getenv("SHLB_OUT"); env && *env) out_dir = env;

  json config;
  try {
    config = read_config(config_path);
    for (const auto& kv : overrides) apply_override(config, kv);
    if (name == "probe-quant") set_probe_kind(config, "quant");
    if (name == "probe-noise") set_probe_kind(config, "gaussian");
    write_manifest(out_dir, name, config, jobs);
  } catch (const std::pair<int, std::string>& e) {
    return emit_error(e.first, e.second);
  }

  const std::string config_str = config.dump();
  char* result = nullptr;
  shlab_status st = SHLAB_OK;
  if (name == "pretrain") {
    st = shlab_run_pretrain(config_str.c_str(), out_dir.c_str(), &result);
  } else if (name == "finetune-sweep") {
    st = shlab_run_finetune_sweep(config_str.c_str(), out_dir.c_str(), jobs,
                                  &result);
  } else if (name == "probe-quant" || name == "probe-noise") {
    st = shlab_run_probe(config_str.c_str(), out_dir.c_str(), &result);
  } else if (name == "curvature") {
    st = shlab_run_curvature(config_str.c_str(), out_dir.c_str(), &result);
  } else if (name == "pareto") {
    st = shlab_pareto_from_index(config_str.c_str(), &result);
  } else if (name == "threshold") {
    st = shlab_threshold_from_index(config_str.c_str(), &result);
  } else if (name == "report") {
    st = shlab_run_report(config_str.c_str(), out_dir.c_str(), &result);
  }
  if (st != SHLAB_OK) return emit_error(st, shlab_last_error());

  std::printf("%s\n", result);
  int exit_code = 0;
  if (name == "pretrain") {
    // A diverged run is recorded (and cached) as a result, but scripted
    // callers still need the numeric-failure exit.
    const json r = json::parse(result);
    if (r.value("status", "ok") == "numeric_failure") {
      exit_code = SHLAB_ERR_NUMERIC;
    }
  }
  shlab_string_free(result);
  return exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sharpness laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
  int jobs = 1;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "run one pretraining recipe"},
      {"finetune-sweep", "fine-tune a checkpoint across a learning-rate grid"},
      {"probe-quant", "quantization robustness probe on a checkpoint"},
      {"probe-noise", "gaussian robustness probe on a checkpoint"},
      {"curvature", "hessian diagnostics on a checkpoint"},
      {"pareto", "cut the learning-forgetting frontier from a results index"},
      {"threshold", "matched fine-tuning loss comparison across parents"},
      {"report", "figure-ready csv export"}};
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON config path")->required();
    sub->add_option("--out", out_dir,
                    "output root (env SHLB_OUT overrides it)");
    sub->add_option("--override", overrides,
                    "dotted-key=value config override, repeatable");
    if (name == "finetune-sweep") {
      sub->add_option("--jobs", jobs, "worker threads")
          ->check(CLI::PositiveNumber);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return emit_error(SHLAB_ERR_CONFIG, e.what());
  }
  return run_command(app.get_subcommands().front()->get_name(), config_path,
                     out_dir, overrides, jobs);
}

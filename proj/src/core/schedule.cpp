#include "schedule.hpp"

#include <set>

namespace shlab {

namespace {

void check_keys(const json& j, const std::set<std::string>& known,
                const char* what) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) {
      throw ConfigError(std::string(what) + " has unknown key '" + key + "'");
    }
  }
}

double need_number(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number()) {
    throw ConfigError(std::string("schedule needs numeric '") + key + "'");
  }
  return j.at(key).get<double>();
}

int64_t need_count(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number_integer()) {
    throw ConfigError(std::string("schedule needs integer '") + key + "'");
  }
  return j.at(key).get<int64_t>();
}

}  // namespace

ScheduleSpec ScheduleSpec::from_json(const json& j) {
  if (!j.is_object() || !j.contains("variant") ||
      !j.at("variant").is_string()) {
    throw ConfigError("schedule json needs a string 'variant'");
  }
  // Both variants share one key set so a config can carry parameters for
  // either and be retargeted by overriding just schedule.variant.
  check_keys(j,
             {"variant", "alpha_max", "alpha_min", "alpha_peak", "T_warmup",
              "T", "decay_fraction", "floor_ratio"},
             "schedule");
  ScheduleSpec s;
  s.kind = j.at("variant").get<std::string>();
  if (s.kind == "cosine") {
    s.alpha_max = need_number(j, "alpha_max");
    s.alpha_min = j.contains("alpha_min") ? need_number(j, "alpha_min") : 0.0;
    s.T_warmup = need_count(j, "T_warmup");
    s.T = need_count(j, "T");
  } else if (s.kind == "wsd") {
    s.alpha_peak = need_number(j, "alpha_peak");
    s.T_warmup = need_count(j, "T_warmup");
    s.T = need_count(j, "T");
    s.decay_fraction = j.contains("decay_fraction")
                           ? need_number(j, "decay_fraction")
                           : 0.1;
    s.floor_ratio =
        j.contains("floor_ratio") ? need_number(j, "floor_ratio") : 0.1;
  } else {
    throw ConfigError("schedule variant must be cosine or wsd");
  }
  s.validate();
  return s;
}

PhasePlan PhasePlan::from_json(const json& j) {
  check_keys(j, {"before", "after", "switch_step"}, "phase plan");
  if (!j.contains("before") || !j.contains("after") ||
      !j.contains("switch_step") || !j.at("switch_step").is_number_integer()) {
    throw ConfigError("phase plan needs before, after, switch_step");
  }
  PhasePlan p;
  p.before = opt_tag_from_string(j.at("before").get<std::string>());
  p.after = opt_tag_from_string(j.at("after").get<std::string>());
  p.switch_step = j.at("switch_step").get<int64_t>();
  if (p.switch_step < 0) throw ConfigError("switch_step must be >= 0");
  return p;
}

}  // namespace shlab

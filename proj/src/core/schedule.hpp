#pragma once

#include <array>
#include <cmath>
#include <string>

#include "errors.hpp"
#include "model.hpp"

namespace shlab {

// Peak learning rates used by the sweep recipes.
inline constexpr std::array<double, 6> kPeakLrPresets = {1e-4, 3e-4, 6e-4,
                                                         1e-3, 3e-3, 1e-2};

// Learning-rate schedule over steps 0..T inclusive. Two shapes:
//   cosine: linear warmup 0 -> alpha_max over T_warmup steps, then cosine
//           from alpha_max down to alpha_min at t = T.
//   wsd:    linear warmup to alpha_peak, exactly constant until the decay
//           switch at ceil((1 - d) * T), then linear down to
//           floor_ratio * alpha_peak at t = T.
struct ScheduleSpec {
  std::string kind;  // cosine | wsd
  double alpha_max = 0.0;
  double alpha_min = 0.0;
  double alpha_peak = 0.0;
  int64_t T_warmup = 0;
  int64_t T = 0;
  double decay_fraction = 0.1;
  double floor_ratio = 0.1;

  static ScheduleSpec cosine(double alpha_max, double alpha_min,
                             int64_t t_warmup, int64_t t_total) {
    ScheduleSpec s;
    s.kind = "cosine";
    s.alpha_max = alpha_max;
    s.alpha_min = alpha_min;
    s.T_warmup = t_warmup;
    s.T = t_total;
    s.validate();
    return s;
  }

  static ScheduleSpec wsd(double alpha_peak, int64_t t_warmup, int64_t t_total,
                          double d, double floor_ratio = 0.1) {
    ScheduleSpec s;
    s.kind = "wsd";
    s.alpha_peak = alpha_peak;
    s.T_warmup = t_warmup;
    s.T = t_total;
    s.decay_fraction = d;
    s.floor_ratio = floor_ratio;
    s.validate();
    return s;
  }

  void validate() const {
    if (kind != "cosine" && kind != "wsd") {
      throw ConfigError("schedule kind must be cosine or wsd");
    }
    if (T < 1) throw ConfigError("schedule needs T >= 1");
    if (T_warmup < 0 || T_warmup >= T) {
      throw ConfigError("schedule needs 0 <= T_warmup < T");
    }
    if (kind == "cosine") {
      if (!std::isfinite(alpha_max) || !std::isfinite(alpha_min) ||
          alpha_min < 0.0 || alpha_min > alpha_max) {
        throw ConfigError("cosine needs 0 <= alpha_min <= alpha_max, finite");
      }
    } else {
      if (!std::isfinite(alpha_peak) || alpha_peak <= 0.0) {
        throw ConfigError("wsd needs alpha_peak > 0");
      }
      if (!(decay_fraction > 0.0 && decay_fraction <= 1.0)) {
        throw ConfigError("wsd needs 0 < decay_fraction <= 1");
      }
      if (!(floor_ratio >= 0.0 && floor_ratio <= 1.0)) {
        throw ConfigError("wsd needs floor_ratio in [0, 1]");
      }
    }
  }

  double peak() const { return kind == "cosine" ? alpha_max : alpha_peak; }

  json to_json() const {
    if (kind == "cosine") {
      return json{{"variant", "cosine"},
                  {"alpha_max", alpha_max},
                  {"alpha_min", alpha_min},
                  {"T_warmup", T_warmup},
                  {"T", T}};
    }
    return json{{"variant", "wsd"},       {"alpha_peak", alpha_peak},
                {"T_warmup", T_warmup},   {"T", T},
                {"decay_fraction", decay_fraction},
                {"floor_ratio", floor_ratio}};
  }

  static ScheduleSpec from_json(const json& j);
};

namespace detail {
// ceil((1 - d) * T) with the float product snapped to an exact integer when
// it is within rounding error of one, so d = 0.10, T = 1000 lands on 900,
// not 901.
inline int64_t decay_switch_step(double d, int64_t t_total) {
  const double x = (1.0 - d) * double(t_total);
  const double r = std::nearbyint(x);
  if (std::abs(x - r) < 1e-6) return int64_t(r);
  return int64_t(std::ceil(x));
}
}  // namespace detail

// First step of the wsd decay phase.
inline int64_t wsd_decay_start(const ScheduleSpec& spec) {
  spec.validate();
  if (spec.kind != "wsd") throw ConfigError("decay start is a wsd notion");
  return detail::decay_switch_step(spec.decay_fraction, spec.T);
}

inline double lr_at(const ScheduleSpec& spec, int64_t t) {
  spec.validate();
  if (t < 0 || t > spec.T) {
    throw DomainError("schedule step " + std::to_string(t) +
                      " outside [0, " + std::to_string(spec.T) + "]");
  }
  const double peak = spec.peak();
  if (t < spec.T_warmup) {
    return peak * double(t) / double(spec.T_warmup);
  }
  if (spec.kind == "cosine") {
    const double frac =
        double(t - spec.T_warmup) / double(spec.T - spec.T_warmup);
    return spec.alpha_min +
           0.5 * (spec.alpha_max - spec.alpha_min) *
               (1.0 + std::cos(M_PI * frac));
  }
  const int64_t sw = detail::decay_switch_step(spec.decay_fraction, spec.T);
  if (t < sw) return peak;
  if (sw >= spec.T) return t == spec.T ? spec.floor_ratio * peak : peak;
  const double frac = double(t - sw) / double(spec.T - sw);
  // lerp written so frac = 0 and frac = 1 hit the endpoints bitwise
  return peak * ((1.0 - frac) + spec.floor_ratio * frac);
}

enum class OptTag { adamw, sam };

inline std::string to_string(OptTag tag) {
  return tag == OptTag::adamw ? "adamw" : "sam";
}

inline OptTag opt_tag_from_string(const std::string& s) {
  if (s == "adamw") return OptTag::adamw;
  if (s == "sam") return OptTag::sam;
  throw ConfigError("unknown optimizer tag: " + s);
}

// Which optimizer runs each step: `before` strictly below switch_step, `after`
// at and beyond. A single switch by construction.
struct PhasePlan {
  OptTag before = OptTag::adamw;
  OptTag after = OptTag::adamw;
  int64_t switch_step = 0;

  static PhasePlan constant(OptTag tag) { return {tag, tag, 0}; }

  // The anneal recipe: plain adamw through the stable phase, sam from the
  // first decay step onward. d = 1 means sam for the whole run.
  static PhasePlan sam_anneal(double d, int64_t t_total) {
    if (!(d > 0.0 && d <= 1.0)) throw ConfigError("needs 0 < d <= 1");
    if (t_total < 1) throw ConfigError("needs T >= 1");
    return {OptTag::adamw, OptTag::sam,
            detail::decay_switch_step(d, t_total)};
  }

  static PhasePlan sam_anneal(const ScheduleSpec& wsd_spec) {
    return {OptTag::adamw, OptTag::sam, wsd_decay_start(wsd_spec)};
  }

  json to_json() const {
    return json{{"before", to_string(before)},
                {"after", to_string(after)},
                {"switch_step", switch_step}};
  }

  static PhasePlan from_json(const json& j);
};

inline OptTag phase_at(const PhasePlan& plan, int64_t t) {
  return t < plan.switch_step ? plan.before : plan.after;
}

}  // namespace shlab

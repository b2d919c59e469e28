#include "actdiff/schedules.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace actdiff {

double mask_ratio(double t, const MaskSchedule& schedule) {
  if (!(t >= 0.0 && t < 1.0))
    throw DomainError("mask_ratio: t must lie in [0,1), got " + std::to_string(t));
  switch (schedule.kind) {
    case ScheduleKind::cosine:
      return std::cos(std::numbers::pi / 2.0 * t);
    case ScheduleKind::linear:
      return 1.0 - t;
  }
  throw DomainError("mask_ratio: unknown schedule kind");
}

int keep_count(double t_next, const MaskSchedule& schedule) {
  if (!(t_next >= 0.0 && t_next <= 1.0))
    throw DomainError("keep_count: t_next must lie in [0,1], got " + std::to_string(t_next));
  const int len = schedule.chunk_len;
  // The schedule terminates at ratio 0, so t_next == 1 commits everything.
  const double ratio = t_next >= 1.0 ? 0.0 : mask_ratio(t_next, schedule);
  const int raw = static_cast<int>(std::ceil((1.0 - ratio) * len));
  return std::clamp(raw, 1, len);
}

double choice_temperature(double t, TemperatureMode mode, double fixed_value,
                          const MaskSchedule* schedule) {
  if (!(t >= 0.0 && t < 1.0))
    throw DomainError("choice_temperature: t must lie in [0,1), got " + std::to_string(t));
  switch (mode) {
    case TemperatureMode::decay:
      return 1.0 - t;
    case TemperatureMode::fixed:
      return fixed_value;
    case TemperatureMode::hard:
      return 0.0;
    case TemperatureMode::track_ratio: {
      MaskSchedule fallback;
      return mask_ratio(t, schedule ? *schedule : fallback);
    }
  }
  throw DomainError("choice_temperature: unknown mode");
}

double abs_confidence_threshold(int round, int total_rounds, const ThresholdSchedule& schedule) {
  const double frac = total_rounds > 0 ? static_cast<double>(round) / total_rounds : 0.0;
  return schedule.abs_start + (schedule.abs_end - schedule.abs_start) * frac;
}

const char* to_string(ScheduleKind kind) {
  return kind == ScheduleKind::cosine ? "cosine" : "linear";
}

const char* to_string(TemperatureMode mode) {
  switch (mode) {
    case TemperatureMode::decay: return "decay";
    case TemperatureMode::fixed: return "fixed";
    case TemperatureMode::hard: return "hard";
    case TemperatureMode::track_ratio: return "track_ratio";
  }
  return "?";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "linear") return ScheduleKind::linear;
  throw ConfigError("unknown schedule kind: " + s);
}

TemperatureMode temperature_mode_from_string(const std::string& s) {
  if (s == "decay") return TemperatureMode::decay;
  if (s == "fixed") return TemperatureMode::fixed;
  if (s == "hard") return TemperatureMode::hard;
  if (s == "track_ratio") return TemperatureMode::track_ratio;
  throw ConfigError("unknown temperature mode: " + s);
}

}  // namespace actdiff

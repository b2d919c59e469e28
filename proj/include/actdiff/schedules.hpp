#pragma once

#include <string>

#include "actdiff/errors.hpp"

namespace actdiff {

enum class ScheduleKind { cosine, linear };

// Mask-ratio schedule over normalized time t in [0,1). Drives both the
// training-time corruption draw and the decoder's per-round keep targets.
struct MaskSchedule {
  ScheduleKind kind = ScheduleKind::cosine;
  int total_rounds = 12;
  int chunk_len = 56;
};

enum class TemperatureMode {
  decay,        // 1 - t
  fixed,        // constant
  hard,         // 0, argmax commits
  track_ratio,  // follows the mask ratio itself; non-default alternative
};

// Secondary re-mask knobs. The absolute threshold ramps linearly from
// abs_start at round 0 toward abs_end; drop_limit bounds the tolerated
// confidence decay since first commit. top_q > 0 switches the residual rule
// from thresholding to "re-mask the Q most-degraded tokens".
struct ThresholdSchedule {
  double abs_start = 0.0;
  double abs_end = 0.9;
  double drop_limit = 0.15;
  int top_q = 0;
};

// Fraction of positions still masked at time t. 1 at t=0, strictly
// decreasing, ->0 as t->1. Throws DomainError outside [0,1).
double mask_ratio(double t, const MaskSchedule& schedule);

// Cumulative number of committed positions the decoder should reach once the
// round ending at t_next completes: ceil((1 - ratio(t_next)) * L) clamped to
// [1, L]. t_next may be exactly 1 (ratio defined as 0, full commitment).
int keep_count(double t_next, const MaskSchedule& schedule);

// Choice temperature for committing tokens at time t.
double choice_temperature(double t, TemperatureMode mode, double fixed_value = 1.0,
                          const MaskSchedule* schedule = nullptr);

// Absolute-confidence re-mask threshold for a given round; non-decreasing in
// the round index.
double abs_confidence_threshold(int round, int total_rounds, const ThresholdSchedule& schedule);

const char* to_string(ScheduleKind kind);
const char* to_string(TemperatureMode mode);
ScheduleKind schedule_kind_from_string(const std::string& s);
TemperatureMode temperature_mode_from_string(const std::string& s);

}  // namespace actdiff

#include <cmath>
#include <numbers>

#include "actdiff/schedules.hpp"
#include "actdiff/verification.hpp"
#include "doctest.h"

using namespace actdiff;

TEST_CASE("cosine mask ratio hits its analytic values") {
  const MaskSchedule cosine{ScheduleKind::cosine, 12, 56};
  CHECK(mask_ratio(0.0, cosine) == 1.0);
  CHECK(mask_ratio(0.5, cosine) == doctest::Approx(0.7071067811865476).epsilon(1e-12));
  CHECK(std::abs(mask_ratio(2.0 / 3.0, cosine) - 0.5) < 1e-12);
}

TEST_CASE("linear mask ratio is 1 - t") {
  const MaskSchedule linear{ScheduleKind::linear, 12, 56};
  CHECK(mask_ratio(0.0, linear) == 1.0);
  CHECK(mask_ratio(0.25, linear) == 0.75);
}

TEST_CASE("mask ratio rejects time outside [0,1)") {
  const MaskSchedule s{ScheduleKind::cosine, 12, 56};
  CHECK_THROWS_AS(mask_ratio(-0.1, s), DomainError);
  CHECK_THROWS_AS(mask_ratio(1.0, s), DomainError);
}

TEST_CASE("keep_count follows ceil((1-ratio)*L) with clamping") {
  // linear kind gives ratio(0.5) = 0.5 exactly
  const MaskSchedule linear{ScheduleKind::linear, 2, 4};
  CHECK(keep_count(0.5, linear) == 2);

  const MaskSchedule cosine{ScheduleKind::cosine, 12, 56};
  CHECK(keep_count(1.0, cosine) == 56);  // final round commits everything

  // ratio 0.99: ceil(0.56) with the minimum-progress clamp
  const double t99 = std::acos(0.99) * 2.0 / std::numbers::pi;
  CHECK(keep_count(t99, cosine) == 1);
}

TEST_CASE("choice temperature modes") {
  CHECK(choice_temperature(0.0, TemperatureMode::decay) == 1.0);
  CHECK(choice_temperature(0.75, TemperatureMode::decay) == 0.25);
  CHECK(choice_temperature(0.3, TemperatureMode::hard) == 0.0);
  CHECK(choice_temperature(0.9, TemperatureMode::fixed, 0.7) == 0.7);
  const MaskSchedule cosine{ScheduleKind::cosine, 12, 56};
  CHECK(choice_temperature(0.5, TemperatureMode::track_ratio, 1.0, &cosine) ==
        mask_ratio(0.5, cosine));
  CHECK_THROWS_AS(choice_temperature(1.5, TemperatureMode::decay), DomainError);
}

TEST_CASE("absolute re-mask threshold interpolates linearly") {
  const ThresholdSchedule t{0.0, 0.9, 0.15, 0};
  CHECK(abs_confidence_threshold(0, 12, t) == 0.0);
  CHECK(abs_confidence_threshold(6, 12, t) == doctest::Approx(0.45));
  const ThresholdSchedule c{0.5, 0.5, 0.15, 0};
  for (int r = 0; r < 12; ++r) CHECK(abs_confidence_threshold(r, 12, c) == 0.5);
}

TEST_CASE("schedule property fuzz") {
  const auto r = verify::check_schedule_properties(300, 99);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("enum round trips") {
  CHECK(schedule_kind_from_string("cosine") == ScheduleKind::cosine);
  CHECK(schedule_kind_from_string("linear") == ScheduleKind::linear);
  CHECK_THROWS_AS(schedule_kind_from_string("bogus"), ConfigError);
  CHECK(temperature_mode_from_string(to_string(TemperatureMode::track_ratio)) ==
        TemperatureMode::track_ratio);
}

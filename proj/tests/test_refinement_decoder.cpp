#include <algorithm>
#include <cmath>
#include <sstream>

#include "actdiff/policy_model.hpp"
#include "actdiff/refinement_decoder.hpp"
#include "actdiff/verification.hpp"
#include "doctest.h"

using namespace actdiff;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> data) {
  Matrix m(static_cast<int>(data.size()), static_cast<int>(data.begin()->size()));
  int r = 0;
  for (const auto& row : data) {
    int c = 0;
    for (double v : row) m.at(r, c++) = v;
    ++r;
  }
  return m;
}

}  // namespace

TEST_CASE("position scores: max confidence and confidence gap") {
  const Matrix p = rows({{0.7, 0.2, 0.1}, {1.0 / 3, 1.0 / 3, 1.0 / 3}, {0.0, 1.0, 0.0}});
  Rng rng(1);
  const auto s = score_positions(p, Scoring::max_confidence, rng);
  CHECK(s[0] == doctest::Approx(0.7));
  CHECK(s[1] == doctest::Approx(1.0 / 3));
  CHECK(s[2] == 1.0);
  const auto g = score_positions(p, Scoring::confidence_gap, rng);
  CHECK(g[0] == doctest::Approx(0.5));
  CHECK(g[1] == doctest::Approx(0.0));
  CHECK(g[2] == 1.0);
}

TEST_CASE("confidence gap needs two classes") {
  Matrix p(2, 1);
  p.at(0, 0) = 1.0;
  p.at(1, 0) = 1.0;
  Rng rng(2);
  CHECK_THROWS_AS(score_positions(p, Scoring::confidence_gap, rng), ConfigError);
}

TEST_CASE("random scores are reproducible per seed") {
  const Matrix p = rows({{0.5, 0.5}, {0.5, 0.5}});
  Rng a(3), b(3), c(4), d(3);
  CHECK(score_positions(p, Scoring::random_order, a) ==
        score_positions(p, Scoring::random_order, b));
  CHECK(score_positions(p, Scoring::random_order, d) !=
        score_positions(p, Scoring::random_order, c));
}

TEST_CASE("keep-set selection") {
  SUBCASE("top scores among the masked win") {
    const std::vector<double> scores{0.9, 0.1, 0.8, 0.5};
    const std::vector<uint8_t> masked{1, 1, 1, 1};
    CHECK(select_keep_set(scores, masked, 2) == std::vector<int>{0, 2});
  }
  SUBCASE("ties break toward the lower index") {
    const std::vector<double> scores{0.5, 0.5, 0.5, 0.5};
    const std::vector<uint8_t> masked{1, 1, 1, 1};
    CHECK(select_keep_set(scores, masked, 2) == std::vector<int>{0, 1});
  }
  SUBCASE("final-round target takes every masked position") {
    const std::vector<double> scores{0.1, 0.2, 0.3, 0.4};
    const std::vector<uint8_t> masked{0, 1, 0, 1};
    CHECK(select_keep_set(scores, masked, 4) == std::vector<int>{1, 3});
  }
  SUBCASE("already-met target is a no-op") {
    const std::vector<double> scores{0.1, 0.2};
    const std::vector<uint8_t> masked{0, 1};
    CHECK(select_keep_set(scores, masked, 1).empty());
  }
  SUBCASE("committed positions are never selected") {
    const std::vector<double> scores{0.99, 0.1};
    const std::vector<uint8_t> masked{0, 1};
    CHECK(select_keep_set(scores, masked, 2) == std::vector<int>{1});
  }
}

TEST_CASE("token sampling: argmax short-circuit and tie-break") {
  Rng rng(5);
  CHECK(sample_token(std::vector<double>{0.1, 0.6, 0.3}, 0.0, rng) == 1);
  CHECK(sample_token(std::vector<double>{0.4, 0.4, 0.2}, 0.0, rng) == 0);  // lower id wins
}

TEST_CASE("token sampling at unit temperature matches categorical frequencies") {
  // independent oracle: plain inverse-cdf categorical sampling
  Rng oracle_rng(6);
  int oracle_hits = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) oracle_hits += (oracle_rng.uniform() < 0.6) ? 1 : 0;
  const double oracle_freq = static_cast<double>(oracle_hits) / draws;

  Rng rng(7);
  int hits = 0;
  const std::vector<double> p{0.6, 0.4};
  for (int i = 0; i < draws; ++i) hits += sample_token(p, 1.0, rng) == 0 ? 1 : 0;
  const double freq = static_cast<double>(hits) / draws;

  CHECK(std::abs(freq - 0.6) < 0.01);
  CHECK(std::abs(oracle_freq - 0.6) < 0.01);
}

TEST_CASE("low temperature concentrates on the argmax") {
  Rng rng(8);
  const std::vector<double> p{0.1, 0.6, 0.3};
  int hits = 0;
  for (int i = 0; i < 10000; ++i) hits += sample_token(p, 0.01, rng) == 1 ? 1 : 0;
  CHECK(hits >= 9900);
}

TEST_CASE("secondary re-mask checks") {
  DecodeConfig cfg;
  cfg.total_rounds = 10;
  cfg.thresholds = ThresholdSchedule{0.5, 0.5, 0.15, 0};

  const std::vector<int> candidates{0, 1, 2};
  const std::vector<double> current{0.3, 0.7, 0.95};
  const std::vector<double> reference{0.35, 0.9, 0.97};

  SUBCASE("absolute threshold") {
    cfg.threshold_check = true;
    cfg.residual_drop = false;
    const auto [abs_set, drop_set] = secondary_remask(candidates, current, reference, 3, cfg);
    CHECK(abs_set == std::vector<int>{0});
    CHECK(drop_set.empty());
  }
  SUBCASE("residual drop") {
    cfg.threshold_check = false;
    cfg.residual_drop = true;
    const auto [abs_set, drop_set] = secondary_remask(candidates, current, reference, 3, cfg);
    CHECK(abs_set.empty());
    CHECK(drop_set == std::vector<int>{1});  // 0.9 - 0.7 = 0.2 > 0.15
  }
  SUBCASE("top-q alternative picks the most degraded") {
    cfg.threshold_check = false;
    cfg.residual_drop = true;
    cfg.thresholds.top_q = 1;
    const auto [abs_set, drop_set] = secondary_remask(candidates, current, reference, 3, cfg);
    CHECK(drop_set == std::vector<int>{1});
  }
  SUBCASE("both disabled yields the empty set") {
    cfg.threshold_check = false;
    cfg.residual_drop = false;
    const auto [abs_set, drop_set] = secondary_remask(candidates, current, reference, 3, cfg);
    CHECK(abs_set.empty());
    CHECK(drop_set.empty());
  }
}

TEST_CASE("decode runs one forward per round on the default layout") {
  ModelConfig cfg;  // 8 x 7 = 56 positions
  PolicyModel model(cfg, Rng(9));
  std::vector<int> context(cfg.context_len, 0);
  DecodeConfig decode_cfg;
  decode_cfg.total_rounds = 12;
  auto [chunk, trace] = decode(model, context, decode_cfg);
  CHECK(trace.nfe == 12);
  CHECK(static_cast<int>(trace.rounds.size()) == 12);
  CHECK(!chunk.has_mask());
  CHECK(chunk.horizon == 8);
  CHECK(chunk.dims == 7);
}

TEST_CASE("one-shot parallel decoding commits everything by argmax in one round") {
  const verify::HashModel model(2, 2, 5, 77);
  DecodeConfig cfg;
  cfg.scoring = Scoring::one_shot_parallel;
  cfg.total_rounds = 12;  // forced down to one round
  cfg.temperature_mode = TemperatureMode::decay;
  auto [chunk, trace] = decode(model, std::vector<int>{0}, cfg);
  CHECK(trace.nfe == 1);
  REQUIRE(trace.rounds.size() == 1);
  const Matrix& p = trace.rounds[0].posteriors;
  for (int i = 0; i < 4; ++i) {
    const double* row = p.row(i);
    const int argmax = static_cast<int>(std::max_element(row, row + p.cols) - row);
    CHECK(chunk.tokens[i] == argmax);
  }
}

TEST_CASE("committed counts follow the schedule when re-masking is off") {
  const verify::HashModel model(4, 3, 4, 123);
  DecodeConfig cfg;
  cfg.total_rounds = 6;
  cfg.threshold_check = false;
  cfg.residual_drop = false;
  cfg.temperature_mode = TemperatureMode::hard;
  auto [chunk, trace] = decode(model, std::vector<int>{0}, cfg);
  const MaskSchedule schedule{cfg.ratio_kind, cfg.total_rounds, 12};
  int committed = 0;
  for (const auto& rec : trace.rounds) {
    committed += static_cast<int>(rec.committed.size());
    const double t_next = static_cast<double>(rec.round + 1) / cfg.total_rounds;
    const int want = rec.round + 1 == cfg.total_rounds ? 12 : keep_count(t_next, schedule);
    CHECK(committed == want);
  }
  CHECK(committed == 12);
}

TEST_CASE("trace serializes one jsonl record per round") {
  const verify::HashModel model(2, 2, 3, 5);
  DecodeConfig cfg;
  cfg.total_rounds = 7;
  auto [chunk, trace] = decode(model, std::vector<int>{0}, cfg);
  const std::string jsonl = trace.to_jsonl();
  const int lines = static_cast<int>(std::count(jsonl.begin(), jsonl.end(), '\n'));
  CHECK(lines == 7);
  CHECK(jsonl.find("\"keep_target\"") != std::string::npos);
  CHECK(jsonl.find("\"nfe\"") != std::string::npos);
}

TEST_CASE("decoder invariant fuzz") {
  const auto r = verify::check_decoder_invariants(400, 31);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("rejects invalid posterior rows") {
  struct BrokenModel : Denoiser {
    int chunk_horizon() const override { return 2; }
    int chunk_dims() const override { return 1; }
    int num_classes() const override { return 3; }
    Matrix posteriors(std::span<const int>, std::span<const int>) const override {
      Matrix p(2, 3);
      p.at(0, 0) = 0.9;  // row sums to 0.9
      p.at(1, 1) = 1.0;
      return p;
    }
  };
  const BrokenModel model;
  DecodeConfig cfg;
  CHECK_THROWS_AS(decode(model, std::vector<int>{0}, cfg), ModelContractError);
}

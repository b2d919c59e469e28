#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "actdiff/action_codec.hpp"
#include "actdiff/denoiser.hpp"
#include "actdiff/rng.hpp"
#include "actdiff/schedules.hpp"

namespace actdiff {

enum class Scoring { max_confidence, confidence_gap, random_order, one_shot_parallel };

const char* to_string(Scoring s);
Scoring scoring_from_string(const std::string& s);

struct DecodeConfig {
  int total_rounds = 12;
  Scoring scoring = Scoring::max_confidence;
  TemperatureMode temperature_mode = TemperatureMode::decay;
  double fixed_temperature = 1.0;
  bool threshold_check = true;   // re-mask committed tokens under the rising threshold
  bool residual_drop = true;     // re-mask committed tokens whose confidence decayed
  ThresholdSchedule thresholds;
  ScheduleKind ratio_kind = ScheduleKind::cosine;
  bool early_exit = false;       // optional stop once nothing is masked; off by default
  uint64_t seed = 0;

  int effective_rounds() const {
    return scoring == Scoring::one_shot_parallel ? 1 : total_rounds;
  }
  uint64_t fingerprint() const;
};

struct RoundRecord {
  int round = 0;
  double t = 0.0;
  double t_next = 0.0;
  double ratio_next = 0.0;
  double temperature = 0.0;
  double abs_threshold = 0.0;
  int keep_target = 0;
  std::vector<uint8_t> masked_before;
  std::vector<uint8_t> masked_after;
  Matrix posteriors;
  std::vector<double> scores;          // selection scores, all positions
  std::vector<double> max_confidence;  // per-position max posterior, all positions
  std::vector<int> keep_set;
  std::vector<std::pair<int, int>> committed;  // (position, token)
  std::vector<int> remask_abs;
  std::vector<int> remask_drop;
  int nfe_after = 0;
};

struct DecodeTrace {
  std::vector<RoundRecord> rounds;
  std::vector<double> reference_confidence;  // per position, -1 when unset
  std::vector<int> first_commit_round;       // per position, -1 when never committed
  int nfe = 0;
  uint64_t config_fingerprint = 0;

  // One JSON record per round (without the full posterior matrices).
  std::string to_jsonl() const;
};

// Per-position selection scores. max_confidence: highest class probability;
// confidence_gap: top-1 minus top-2; random_order: i.i.d. uniforms drawn in
// ascending position order.
std::vector<double> score_positions(const Matrix& posteriors, Scoring scoring, Rng& rng);

// Masked positions with the highest scores, enough to bring the cumulative
// committed count up to keep_target. Ties break toward the lower index.
// Returns an empty set when keep_target is already met.
std::vector<int> select_keep_set(std::span<const double> scores,
                                 const std::vector<uint8_t>& masked, int keep_target);

// One token draw from the tempered posterior via Gumbel-max:
// argmax_k(log p_k / tau + g_k). tau == 0 short-circuits to the argmax of p
// (ties toward the lower token id) and consumes no randomness.
int sample_token(std::span<const double> probs, double tau, Rng& rng);

// Batch form over an index set; draws run in ascending position order.
std::vector<int> commit_tokens(const Matrix& posteriors, std::span<const int> positions,
                               double tau, Rng& rng);

// Re-mask checks over previously committed positions. Returns the positions
// failing the absolute-confidence threshold and the residual-drop rule.
std::pair<std::vector<int>, std::vector<int>> secondary_remask(
    std::span<const int> candidates, std::span<const double> current_confidence,
    std::span<const double> reference_confidence, int round, const DecodeConfig& config);

// Iterative parallel refinement from a fully masked chunk. Exactly one model
// forward per round; the final round commits every remaining position.
std::pair<ActionChunk, DecodeTrace> decode(const Denoiser& model,
                                           std::span<const int> context,
                                           const DecodeConfig& config);

}  // namespace actdiff

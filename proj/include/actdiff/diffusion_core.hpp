#pragma once

#include <span>
#include <vector>

#include "actdiff/action_codec.hpp"
#include "actdiff/matrix.hpp"
#include "actdiff/rng.hpp"

namespace actdiff {

// Probabilities below this are clamped before log so an untrained model
// cannot produce infinite losses.
constexpr double kLogFloor = 1e-12;

struct CorruptionOutcome {
  ActionChunk corrupted;
  std::vector<int> masked_set;  // ascending positions that became the mask symbol
  double ratio_used = 0.0;
};

// Replace exactly round(ratio * L) positions, chosen uniformly without
// replacement, with the mask symbol. Deterministic given the generator state.
CorruptionOutcome corrupt_fixed_count(const ActionChunk& chunk, double ratio, Rng& rng);

// Mask each position independently with probability mask_prob.
CorruptionOutcome corrupt_bernoulli(const ActionChunk& chunk, double mask_prob, Rng& rng);

// Closed-form marginal of the absorbing forward chain after applying the
// given per-step mask probabilities: (1 - b) on the original token and b on
// the mask symbol, with b = 1 - prod(1 - beta_s). Returns a categorical over
// vocab_size symbols (mask symbol = vocab_size - 1).
std::vector<double> forward_marginal(int token, std::span<const double> betas, int vocab_size);

// Cross-entropy against hard one-hot targets, summed over the masked
// positions only. Posterior rows span the K real classes (no mask column).
double masked_cross_entropy(const Matrix& posteriors, const ActionChunk& targets,
                            std::span<const int> masked_set);

}  // namespace actdiff

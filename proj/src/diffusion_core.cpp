#include "actdiff/diffusion_core.hpp"

#include <algorithm>
#include <cmath>

namespace actdiff {

CorruptionOutcome corrupt_fixed_count(const ActionChunk& chunk, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw DomainError("corrupt_fixed_count: mask ratio must lie in (0,1], got " +
                      std::to_string(ratio));
  if (chunk.has_mask())
    throw ValidationError("corrupt_fixed_count: input chunk already contains the mask symbol");

  const int len = chunk.len();
  const int count = static_cast<int>(std::llround(ratio * len));

  // Partial Fisher-Yates: the first `count` entries are a uniform sample
  // without replacement.
  std::vector<int> order(len);
  for (int i = 0; i < len; ++i) order[i] = i;
  for (int i = 0; i < count; ++i) {
    const int j = i + rng.uniform_int(len - i);
    std::swap(order[i], order[j]);
  }
  std::vector<int> masked(order.begin(), order.begin() + count);
  std::sort(masked.begin(), masked.end());

  CorruptionOutcome out;
  out.corrupted = chunk;
  for (int pos : masked) out.corrupted.tokens[pos] = chunk.mask_id;
  out.masked_set = std::move(masked);
  out.ratio_used = ratio;
  return out;
}

CorruptionOutcome corrupt_bernoulli(const ActionChunk& chunk, double mask_prob, Rng& rng) {
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0))
    throw DomainError("corrupt_bernoulli: mask probability must lie in [0,1]");
  CorruptionOutcome out;
  out.corrupted = chunk;
  out.ratio_used = mask_prob;
  for (int pos = 0; pos < chunk.len(); ++pos) {
    if (rng.bernoulli(mask_prob)) {
      out.corrupted.tokens[pos] = chunk.mask_id;
      out.masked_set.push_back(pos);
    }
  }
  return out;
}

std::vector<double> forward_marginal(int token, std::span<const double> betas, int vocab_size) {
  if (token < 0 || token >= vocab_size)
    throw ValidationError("forward_marginal: token outside vocabulary");
  double survive = 1.0;
  for (double b : betas) {
    if (!(b >= 0.0 && b <= 1.0))
      throw DomainError("forward_marginal: step probability must lie in [0,1]");
    survive *= 1.0 - b;
  }
  const int mask = vocab_size - 1;
  std::vector<double> dist(vocab_size, 0.0);
  if (token == mask) {
    dist[mask] = 1.0;  // the mask symbol is absorbing
  } else {
    dist[token] = survive;
    dist[mask] = 1.0 - survive;
  }
  return dist;
}

double masked_cross_entropy(const Matrix& posteriors, const ActionChunk& targets,
                            std::span<const int> masked_set) {
  if (targets.has_mask())
    throw ValidationError("masked_cross_entropy: targets must not contain the mask symbol");
  if (posteriors.rows != targets.len())
    throw ValidationError("masked_cross_entropy: posterior rows must match chunk length");
  double loss = 0.0;
  for (int pos : masked_set) {
    if (pos < 0 || pos >= targets.len())
      throw ValidationError("masked_cross_entropy: masked index out of range");
    const int target = targets.tokens[pos];
    if (target >= posteriors.cols)
      throw ValidationError("masked_cross_entropy: target class outside posterior width");
    loss -= std::log(std::max(posteriors.at(pos, target), kLogFloor));
  }
  return loss;
}

}  // namespace actdiff

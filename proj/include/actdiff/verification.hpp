#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "actdiff/denoiser.hpp"
#include "actdiff/rng.hpp"

namespace actdiff::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Pure function of its inputs: per-position posteriors come from hashing the
// full token state, so they are valid, state-dependent and reproducible.
// Substrate for decoder invariant fuzzing.
class HashModel : public Denoiser {
 public:
  HashModel(int horizon, int dims, int num_classes, uint64_t seed)
      : horizon_(horizon), dims_(dims), num_classes_(num_classes), seed_(seed) {}

  int chunk_horizon() const override { return horizon_; }
  int chunk_dims() const override { return dims_; }
  int num_classes() const override { return num_classes_; }
  Matrix posteriors(std::span<const int> context, std::span<const int> tokens) const override;

 private:
  int horizon_, dims_, num_classes_;
  uint64_t seed_;
};

CheckResult check_schedule_exactness();
CheckResult check_schedule_properties(int cases, uint64_t seed);
CheckResult check_forward_marginal_agreement(int cases, uint64_t seed, double tolerance);
CheckResult check_masked_ce_values();
CheckResult check_gradients(double epsilon, double tolerance);
CheckResult check_decode_oracle_agreement(int cases, uint64_t seed);
CheckResult check_decoder_invariants(int episodes, uint64_t seed);
CheckResult check_nfe_accounting();
CheckResult check_tokenizer_properties(int cases, uint64_t seed);

// Canonical description of the decode-oracle fuzz cases for a given count
// and seed; committed to the repository so failures are replayable.
std::string decode_oracle_fixture_json(int cases, uint64_t seed);

}  // namespace actdiff::verify

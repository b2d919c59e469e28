#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "actdiff/action_codec.hpp"
#include "actdiff/denoiser.hpp"
#include "actdiff/refinement_decoder.hpp"
#include "actdiff/rng.hpp"

namespace actdiff::oracle {

// Exhaustive lookup-table predictor over tiny (L, K): one posterior matrix
// per reachable token state (every position either committed or masked).
// Shared substrate for decode cross-checks; covers the whole state space so
// a miss is a hard error, never a silent default.
class TabulatedModel : public Denoiser {
 public:
  TabulatedModel(int chunk_len, int num_classes, int context_id);

  static TabulatedModel random(int chunk_len, int num_classes, uint64_t seed);

  int chunk_horizon() const override { return chunk_len_; }
  int chunk_dims() const override { return 1; }
  int num_classes() const override { return num_classes_; }
  int context_id() const { return context_id_; }

  Matrix posteriors(std::span<const int> context, std::span<const int> tokens) const override;

  // Installs the posterior matrix for one token state (tests build tiny
  // handcrafted tables this way).
  void set_posteriors(std::span<const int> tokens, Matrix posteriors);

  size_t state_count() const { return table_.size(); }
  uint64_t digest() const;

 private:
  size_t state_code(std::span<const int> tokens) const;

  int chunk_len_;
  int num_classes_;
  int context_id_;
  std::vector<Matrix> table_;
};

// Forward marginal by explicit dense transition-matrix products: build each
// V x V single-step matrix, left-multiply them together, apply to the
// one-hot token vector. No closed-form shortcuts.
std::vector<double> dense_forward_marginal(int token, std::span<const double> betas,
                                           int vocab_size);

// Step-by-step replay of the refinement procedure on a tabulated model,
// written independently of the production decoder. Supports deterministic
// configs only: hard temperature, secondary re-masking off.
// `commit_round`, when given, receives the round each position was committed.
ActionChunk reference_decode(const TabulatedModel& model, const DecodeConfig& config,
                             std::vector<int>* commit_round = nullptr);

struct ArDecodeResult {
  ActionChunk chunk;
  int nfe = 0;
};

// Left-to-right greedy baseline: one forward per position, always L total.
ArDecodeResult ar_baseline_decode(const Denoiser& model, std::span<const int> context);

}  // namespace actdiff::oracle

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "actdiff/errors.hpp"

namespace actdiff {

// Per-dimension binning of continuous controls. Regular dimensions carry
// num_bins quantile bins; the gripper dimension is binary with a 0.5
// decision threshold. Immutable after fitting and safe to share.
struct TokenizerSpec {
  int num_bins = 256;          // bins per continuous (non-gripper) dimension
  int dims = 7;
  int gripper_dim_index = 6;   // -1 when no binary dimension exists
  std::vector<std::vector<double>> edges;    // per dim, bins_for(dim)+1 ascending boundaries
  std::vector<std::vector<double>> centers;  // per dim, bins_for(dim) bin centers

  int bins_for(int dim) const { return dim == gripper_dim_index ? 2 : num_bins; }
  int mask_id() const { return num_bins; }
  int vocab_size() const { return num_bins + 1; }

  void validate() const;
  uint64_t checksum() const;

  std::string to_json_string() const;
  static TokenizerSpec from_json_string(const std::string& text);
  void save(const std::string& path) const;
  static TokenizerSpec load(const std::string& path);
};

// Flattened token view of H future timesteps of a dims-dimensional control.
// Token ids live in {0..K-1} plus the mask symbol mask_id == K.
struct ActionChunk {
  std::vector<int> tokens;
  int horizon = 0;
  int dims = 0;
  int mask_id = 0;

  int len() const { return horizon * dims; }
  int vocab_size() const { return mask_id + 1; }
  int dim_of(int pos) const { return pos % dims; }
  bool has_mask() const;
  void validate() const;

  static ActionChunk fully_masked(int horizon, int dims, int mask_id);
};

// Quantile edges for one dimension: outer edges at the 1st/99th percentiles,
// interior edges at equally spaced quantiles in between (linear-interpolation
// quantiles over the sorted samples). Centers are arithmetic midpoints.
std::vector<double> fit_quantile_edges(std::vector<double> samples, int num_bins);

// Evenly spaced edges over [lo, hi]; fallback for dimensions whose data
// cannot support quantile fitting (e.g. held constant by a benchmark).
std::vector<double> uniform_edges(double lo, double hi, int num_bins);

// Fit the full tokenizer from per-dimension sample lists. The gripper
// dimension bypasses quantiles and gets fixed binary edges.
TokenizerSpec fit_bins(const std::vector<std::vector<double>>& samples, int num_bins,
                       int gripper_dim_index);

// Values map to the half-open bin [edge_i, edge_{i+1}); out-of-range values
// clip to the first/last bin. `continuous` is row-major horizon x dims.
ActionChunk tokenize_chunk(const std::vector<double>& continuous, int horizon,
                           const TokenizerSpec& spec);

// Inverse map: token -> bin center (gripper -> exactly 0 or 1). Rejects
// chunks that still contain the mask symbol.
std::vector<double> detokenize_chunk(const ActionChunk& chunk, const TokenizerSpec& spec);

int tokenize_value(double value, const TokenizerSpec& spec, int dim);
double detokenize_value(int token, const TokenizerSpec& spec, int dim);

}  // namespace actdiff

#pragma once

#include <span>

#include "actdiff/matrix.hpp"

namespace actdiff {

// Anything that maps (context tokens, partially masked action tokens) to
// per-position posteriors over the K real classes. The refinement decoder,
// the reference decoder, and the AR baseline all run against this surface.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual int chunk_horizon() const = 0;
  virtual int chunk_dims() const = 0;
  virtual int num_classes() const = 0;  // K; the mask symbol is input-only

  int chunk_len() const { return chunk_horizon() * chunk_dims(); }
  int mask_id() const { return num_classes(); }

  // Rows are positions, columns the K classes; every row is a distribution.
  virtual Matrix posteriors(std::span<const int> context,
                            std::span<const int> tokens) const = 0;
};

}  // namespace actdiff

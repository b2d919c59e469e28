#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "actdiff/action_codec.hpp"
#include "actdiff/denoiser.hpp"
#include "actdiff/matrix.hpp"
#include "actdiff/rng.hpp"
#include "actdiff/schedules.hpp"

namespace actdiff {

struct ModelConfig {
  int vocab_size = 257;    // K + 1; the last id is the mask symbol
  int context_vocab = 128;
  int context_len = 6;
  int horizon = 8;
  int dims = 7;
  int embed_dim = 64;
  int layers = 2;
  int heads = 4;
  int ff_dim = 128;

  int num_classes() const { return vocab_size - 1; }
  int chunk_len() const { return horizon * dims; }
  int seq_len() const { return context_len + chunk_len(); }
  void validate() const;
};

// A config small enough that finite differences over every parameter stay
// cheap; used by gradient verification.
ModelConfig tiny_model_config();

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> v;

  size_t size() const { return v.size(); }
};

// Activations retained by a forward pass so backward() can run without
// recomputation.
struct ForwardCache {
  std::vector<int> context;
  std::vector<int> tokens;
  struct LayerCache {
    Matrix x_in, ln1_xhat, ln1_out, q, k, v, att_p, o, x_mid, ln2_xhat, ln2_out, ff_u, ff_h;
    std::vector<double> ln1_inv, ln2_inv;
  };
  std::vector<LayerCache> layers;
  Matrix x_final, lnf_xhat, lnf_out;
  std::vector<double> lnf_inv;
  Matrix logits, probs;
};

using GradBuffer = std::vector<std::vector<double>>;

// Bidirectional transformer over [context tokens ; action tokens]. Attention
// carries no causal mask, so every action position sees the whole sequence.
// The classification head covers the K real classes only; the mask symbol is
// never predicted.
class PolicyModel : public Denoiser {
 public:
  PolicyModel(const ModelConfig& config, Rng init_rng);

  const ModelConfig& config() const { return config_; }
  int chunk_horizon() const override { return config_.horizon; }
  int chunk_dims() const override { return config_.dims; }
  int num_classes() const override { return config_.num_classes(); }

  Matrix posteriors(std::span<const int> context, std::span<const int> tokens) const override;
  Matrix posteriors(std::span<const int> context, std::span<const int> tokens,
                    ForwardCache& cache) const;

  // Gradient of a scalar loss with d(logits) given; accumulates into `grads`
  // (same layout as params()).
  void backward(const ForwardCache& cache, const Matrix& dlogits, GradBuffer& grads) const;

  std::vector<NamedTensor>& params() { return params_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  size_t parameter_count() const;
  GradBuffer zero_grads() const;

  void save(const std::string& path_stem) const;
  static PolicyModel load(const std::string& path_stem);

  uint64_t checksum() const;

 private:
  explicit PolicyModel(const ModelConfig& config);
  void allocate();
  void initialize(Rng& rng);
  const NamedTensor& tensor(const std::string& name) const;

  ModelConfig config_;
  std::vector<NamedTensor> params_;
};

// ---- training ----

enum class TrainObjective {
  masked_diffusion,  // fixed-count corruption at a schedule-drawn ratio
  suffix_ar,         // mask a contiguous suffix, supervise its first position
};

struct TrainOptions {
  double learning_rate = 0.3;
  double momentum = 0.9;
  bool rescale_by_mask_count = true;  // report/optimize per-masked-token mean
  TrainObjective objective = TrainObjective::masked_diffusion;
  ScheduleKind ratio_schedule = ScheduleKind::cosine;
  int threads = 1;
};

struct SgdMomentum {
  double learning_rate = 0.3;
  double momentum = 0.9;
  GradBuffer velocity;

  void apply(PolicyModel& model, const GradBuffer& grads);
};

struct TrainItem {
  std::vector<int> context;
  ActionChunk target;
};

// One optimizer step over the batch: corrupt each item, forward, accumulate
// gradients, update. Returns the pre-update loss (mean per masked token when
// rescaling, otherwise the summed cross-entropy).
double train_step(PolicyModel& model, std::span<const TrainItem> batch,
                  const TrainOptions& options, SgdMomentum& optimizer, Rng& rng);

// Compares the analytic gradient of the masked cross-entropy against central
// finite differences on every parameter; returns the maximum relative error.
double grad_check(PolicyModel& model, const TrainItem& item,
                  std::span<const int> masked_set, double epsilon);

// Same check restricted to tensors whose name contains `filter`.
double grad_check_filtered(PolicyModel& model, const TrainItem& item,
                           std::span<const int> masked_set, double epsilon,
                           const std::string& filter);

}  // namespace actdiff

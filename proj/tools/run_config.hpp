#pragma once

#include <cstdint>
#include <string>

#include "actdiff/policy_model.hpp"
#include "actdiff/refinement_decoder.hpp"
#include "actdiff/task_bench.hpp"
#include "json.hpp"

namespace actdiff::cli {

struct TrainSettings {
  int steps = 4000;
  int batch_size = 16;
  double learning_rate = 0.02;
  double momentum = 0.9;
  bool rescale_by_mask_count = true;
  std::string objective = "masked_diffusion";  // or "suffix_ar"
  std::string ratio_schedule = "cosine";
  int log_every = 200;
};

struct ModelSettings {
  int embed_dim = 64;
  int layers = 2;
  int heads = 4;
  int ff_dim = 128;
};

struct DecodeSettings {
  int rounds = 12;
  std::string scoring = "max_confidence";
  std::string temperature_mode = "decay";
  double fixed_temperature = 1.0;
  bool threshold_check = true;
  bool residual_drop = true;
  double abs_start = 0.0;
  double abs_end = 0.9;
  double drop_limit = 0.15;
  int top_q = 0;
  std::string ratio_schedule = "cosine";
  bool early_exit = false;
};

struct EvalSettings {
  int episodes = 100;
  std::string split = "holdout";  // holdout | train | all
  std::string decoder = "refinement";  // refinement | ar
};

// Everything a run needs, loadable from one JSON file. Unknown keys are
// rejected so typos cannot silently fall back to defaults.
struct RunConfig {
  uint64_t seed = 42;
  int n_tasks = 1000;
  bench::BenchConfig data;
  ModelSettings model;
  TrainSettings train;
  DecodeSettings decode;
  EvalSettings eval;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  uint64_t fingerprint() const;

  ModelConfig model_config() const;
  DecodeConfig decode_config(uint64_t decode_seed) const;
  TrainOptions train_options(int threads) const;
};

int thread_count_from_env();

}  // namespace actdiff::cli

#include "run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <thread>

#include "actdiff/errors.hpp"

namespace actdiff::cli {

namespace {

// Every key in `j` must exist in the default-shaped `schema`.
void reject_unknown_keys(const nlohmann::json& j, const nlohmann::json& schema,
                         const std::string& prefix) {
  if (!j.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key: " + path);
    if (value.is_object()) reject_unknown_keys(value, schema.at(key), path);
  }
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["seed"] = seed;
  j["n_tasks"] = n_tasks;
  j["data"] = {{"horizon", data.horizon},
               {"dims", data.dims},
               {"num_bins", data.num_bins},
               {"context_len", data.context_len},
               {"context_vocab", data.context_vocab},
               {"gripper_dim_index", data.gripper_dim_index},
               {"workspace_lo", data.workspace_lo},
               {"workspace_hi", data.workspace_hi},
               {"success_radius", data.success_radius}};
  j["model"] = {{"embed_dim", model.embed_dim},
                {"layers", model.layers},
                {"heads", model.heads},
                {"ff_dim", model.ff_dim}};
  j["train"] = {{"steps", train.steps},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"momentum", train.momentum},
                {"rescale_by_mask_count", train.rescale_by_mask_count},
                {"objective", train.objective},
                {"ratio_schedule", train.ratio_schedule},
                {"log_every", train.log_every}};
  j["decode"] = {{"rounds", decode.rounds},
                 {"scoring", decode.scoring},
                 {"temperature_mode", decode.temperature_mode},
                 {"fixed_temperature", decode.fixed_temperature},
                 {"threshold_check", decode.threshold_check},
                 {"residual_drop", decode.residual_drop},
                 {"abs_start", decode.abs_start},
                 {"abs_end", decode.abs_end},
                 {"drop_limit", decode.drop_limit},
                 {"top_q", decode.top_q},
                 {"ratio_schedule", decode.ratio_schedule},
                 {"early_exit", decode.early_exit}};
  j["eval"] = {{"episodes", eval.episodes}, {"split", eval.split}, {"decoder", eval.decoder}};
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig cfg;
  reject_unknown_keys(j, cfg.to_json(), "");
  if (j.contains("version") && j.at("version").get<int>() != 1)
    throw ConfigError("config: unsupported version");
  get_if(j, "seed", cfg.seed);
  get_if(j, "n_tasks", cfg.n_tasks);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    get_if(d, "horizon", cfg.data.horizon);
    get_if(d, "dims", cfg.data.dims);
    get_if(d, "num_bins", cfg.data.num_bins);
    get_if(d, "context_len", cfg.data.context_len);
    get_if(d, "context_vocab", cfg.data.context_vocab);
    get_if(d, "gripper_dim_index", cfg.data.gripper_dim_index);
    get_if(d, "workspace_lo", cfg.data.workspace_lo);
    get_if(d, "workspace_hi", cfg.data.workspace_hi);
    get_if(d, "success_radius", cfg.data.success_radius);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    get_if(m, "embed_dim", cfg.model.embed_dim);
    get_if(m, "layers", cfg.model.layers);
    get_if(m, "heads", cfg.model.heads);
    get_if(m, "ff_dim", cfg.model.ff_dim);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    get_if(t, "steps", cfg.train.steps);
    get_if(t, "batch_size", cfg.train.batch_size);
    get_if(t, "learning_rate", cfg.train.learning_rate);
    get_if(t, "momentum", cfg.train.momentum);
    get_if(t, "rescale_by_mask_count", cfg.train.rescale_by_mask_count);
    get_if(t, "objective", cfg.train.objective);
    get_if(t, "ratio_schedule", cfg.train.ratio_schedule);
    get_if(t, "log_every", cfg.train.log_every);
  }
  if (j.contains("decode")) {
    const auto& d = j.at("decode");
    get_if(d, "rounds", cfg.decode.rounds);
    get_if(d, "scoring", cfg.decode.scoring);
    get_if(d, "temperature_mode", cfg.decode.temperature_mode);
    get_if(d, "fixed_temperature", cfg.decode.fixed_temperature);
    get_if(d, "threshold_check", cfg.decode.threshold_check);
    get_if(d, "residual_drop", cfg.decode.residual_drop);
    get_if(d, "abs_start", cfg.decode.abs_start);
    get_if(d, "abs_end", cfg.decode.abs_end);
    get_if(d, "drop_limit", cfg.decode.drop_limit);
    get_if(d, "top_q", cfg.decode.top_q);
    get_if(d, "ratio_schedule", cfg.decode.ratio_schedule);
    get_if(d, "early_exit", cfg.decode.early_exit);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    get_if(e, "episodes", cfg.eval.episodes);
    get_if(e, "split", cfg.eval.split);
    get_if(e, "decoder", cfg.eval.decoder);
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return from_json(j);
}

uint64_t RunConfig::fingerprint() const { return fnv1a64(to_json().dump()); }

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.vocab_size = data.num_bins + 1;
  mc.context_vocab = data.context_vocab;
  mc.context_len = data.context_len;
  mc.horizon = data.horizon;
  mc.dims = data.dims;
  mc.embed_dim = model.embed_dim;
  mc.layers = model.layers;
  mc.heads = model.heads;
  mc.ff_dim = model.ff_dim;
  return mc;
}

DecodeConfig RunConfig::decode_config(uint64_t decode_seed) const {
  DecodeConfig dc;
  dc.total_rounds = decode.rounds;
  dc.scoring = scoring_from_string(decode.scoring);
  dc.temperature_mode = temperature_mode_from_string(decode.temperature_mode);
  dc.fixed_temperature = decode.fixed_temperature;
  dc.threshold_check = decode.threshold_check;
  dc.residual_drop = decode.residual_drop;
  dc.thresholds = ThresholdSchedule{decode.abs_start, decode.abs_end, decode.drop_limit,
                                    decode.top_q};
  dc.ratio_kind = schedule_kind_from_string(decode.ratio_schedule);
  dc.early_exit = decode.early_exit;
  dc.seed = decode_seed;
  return dc;
}

TrainOptions RunConfig::train_options(int threads) const {
  TrainOptions to;
  to.learning_rate = train.learning_rate;
  to.momentum = train.momentum;
  to.rescale_by_mask_count = train.rescale_by_mask_count;
  if (train.objective == "masked_diffusion")
    to.objective = TrainObjective::masked_diffusion;
  else if (train.objective == "suffix_ar")
    to.objective = TrainObjective::suffix_ar;
  else
    throw ConfigError("unknown train objective: " + train.objective);
  to.ratio_schedule = schedule_kind_from_string(train.ratio_schedule);
  to.threads = threads;
  return to;
}

int thread_count_from_env() {
  if (const char* env = std::getenv("ACTDIFF_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace actdiff::cli

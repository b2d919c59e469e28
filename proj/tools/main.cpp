// Command-line entry point: dataset generation, training, decoding with
// trace dumps, evaluation, ablation grids and the verification suites.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "actdiff/oracle_suite.hpp"
#include "actdiff/policy_model.hpp"
#include "actdiff/refinement_decoder.hpp"
#include "actdiff/task_bench.hpp"
#include "actdiff/verification.hpp"
#include "json.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace actdiff;
using cli::RunConfig;

namespace {

uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    h = fnv1a64_bytes(buf, static_cast<size_t>(in.gcount()), h);
  return h;
}

struct Manifest {
  std::string command;
  RunConfig config;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void add_input(const std::string& path) { inputs[path] = file_checksum(path); }
  void add_output(const std::string& path) { outputs[path] = file_checksum(path); }

  void write(const std::string& out_dir) const {
    nlohmann::json j;
    j["version"] = 1;
    j["command"] = command;
    j["seed"] = config.seed;
    j["config"] = config.to_json();
    j["config_fingerprint"] = config.fingerprint();
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    // wall clock lives under one key so reproducibility checks can strip it
    j["timing"] = {{"seconds", std::chrono::duration<double>(
                                   std::chrono::steady_clock::now() - started)
                                   .count()}};
    std::ofstream out(fs::path(out_dir) / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + out_dir);
    out << j.dump(2) << "\n";
  }
};

void ensure_out_dir(const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir);
}

std::vector<TrainItem> to_train_items(std::span<const bench::EpisodeRecord> episodes,
                                      const bench::Dataset& dataset) {
  std::vector<TrainItem> items;
  items.reserve(episodes.size());
  for (const auto& ep : episodes) {
    TrainItem item;
    item.context = ep.task.context;
    item.target = tokenize_chunk(ep.expert, dataset.config.horizon, dataset.tokenizer);
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<bench::EpisodeRecord> pick_split(const bench::Dataset& dataset,
                                             const std::string& split) {
  if (split == "holdout") return bench::split(dataset, true);
  if (split == "train") return bench::split(dataset, false);
  if (split == "all") return dataset.episodes;
  throw ConfigError("unknown eval split: " + split);
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  Manifest manifest{"gen-data", cfg};
  ensure_out_dir(out_dir);
  const bench::Dataset dataset = bench::generate_dataset(cfg.n_tasks, cfg.seed, cfg.data);
  const std::string data_path = (fs::path(out_dir) / "dataset.bin").string();
  const std::string tok_path = (fs::path(out_dir) / "tokenizer.json").string();
  bench::save_dataset(dataset, data_path);
  dataset.tokenizer.save(tok_path);
  manifest.add_output(data_path);
  manifest.add_output(tok_path);
  manifest.write(out_dir);
  std::cout << "wrote " << dataset.episodes.size() << " episodes to " << data_path << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_path, const std::string& tok_path,
              const std::string& out_dir, int threads) {
  Manifest manifest{"train", cfg};
  ensure_out_dir(out_dir);
  manifest.add_input(data_path);
  manifest.add_input(tok_path);

  const TokenizerSpec tokenizer = TokenizerSpec::load(tok_path);
  const bench::Dataset dataset = bench::load_dataset(data_path, tokenizer);
  const auto train_eps = bench::split(dataset, false);
  const std::vector<TrainItem> items = to_train_items(train_eps, dataset);

  PolicyModel model(cfg.model_config(), Rng(cfg.seed).fork("init"));
  const TrainOptions options = cfg.train_options(threads);
  SgdMomentum optimizer;
  Rng corruption = Rng(cfg.seed).fork("corruption");
  Rng batches = Rng(cfg.seed).fork("batches");

  const std::string log_path = (fs::path(out_dir) / "train_log.csv").string();
  std::ofstream log(log_path);
  log << "step,loss\n";

  for (int step = 0; step < cfg.train.steps; ++step) {
    std::vector<TrainItem> batch;
    batch.reserve(cfg.train.batch_size);
    for (int i = 0; i < cfg.train.batch_size; ++i)
      batch.push_back(items[batches.uniform_int(static_cast<int>(items.size()))]);
    const double loss = train_step(model, batch, options, optimizer, corruption);
    if (step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps) {
      log << step << "," << loss << "\n";
      std::cout << "step " << step << " loss " << loss << "\n";
    }
  }

  const std::string model_stem = (fs::path(out_dir) / "model").string();
  model.save(model_stem);
  manifest.add_output(model_stem + ".bin");
  manifest.add_output(model_stem + ".json");
  manifest.add_output(log_path);
  manifest.write(out_dir);
  std::cout << "saved checkpoint " << model_stem << ".bin\n";
  return 0;
}

int cmd_decode(const RunConfig& cfg, const std::string& model_stem, const std::string& tok_path,
               const std::string& data_path, int episode_index,
               std::optional<uint64_t> task_seed, bool trace_flag,
               const std::string& out_dir) {
  Manifest manifest{"decode", cfg};
  ensure_out_dir(out_dir);
  manifest.add_input(model_stem + ".bin");
  manifest.add_input(tok_path);

  const TokenizerSpec tokenizer = TokenizerSpec::load(tok_path);
  const PolicyModel model = PolicyModel::load(model_stem);

  bench::TaskSpec task;
  if (task_seed.has_value()) {
    Rng rng = Rng(*task_seed).fork("data");
    task = bench::sample_task(rng, cfg.data, /*task_id=*/0);
  } else {
    if (data_path.empty())
      throw ConfigError("decode: provide --data with --episode, or --task-seed");
    manifest.add_input(data_path);
    const bench::Dataset dataset = bench::load_dataset(data_path, tokenizer);
    if (episode_index < 0 || episode_index >= static_cast<int>(dataset.episodes.size()))
      throw ConfigError("decode: episode index out of range");
    task = dataset.episodes[episode_index].task;
  }

  const DecodeConfig decode_cfg = cfg.decode_config(Rng(cfg.seed).fork("decode").next_u64());
  auto [chunk, trace] = decode(model, task.context, decode_cfg);
  const std::vector<double> actions = detokenize_chunk(chunk, tokenizer);
  const bool success = bench::rollout_success(task, actions, tokenizer.dims);

  nlohmann::json j;
  j["version"] = 1;
  j["context"] = task.context;
  j["tokens"] = chunk.tokens;
  j["actions"] = actions;
  j["horizon"] = chunk.horizon;
  j["dims"] = chunk.dims;
  j["nfe"] = trace.nfe;
  j["rollout_success"] = success;
  j["config_fingerprint"] = decode_cfg.fingerprint();
  const std::string decoded_path = (fs::path(out_dir) / "decoded.json").string();
  {
    std::ofstream out(decoded_path);
    out << j.dump(2) << "\n";
  }
  manifest.add_output(decoded_path);

  if (trace_flag) {
    const std::string trace_path = (fs::path(out_dir) / "trace.jsonl").string();
    std::ofstream out(trace_path);
    out << trace.to_jsonl();
    manifest.add_output(trace_path);
    std::cout << "trace: " << trace.rounds.size() << " rounds -> " << trace_path << "\n";
  }
  manifest.write(out_dir);
  std::cout << "decoded chunk with " << trace.nfe << " forward passes, rollout "
            << (success ? "reached" : "missed") << " the target\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& model_stem, const std::string& tok_path,
             const std::string& data_path, const std::string& out_dir, int threads) {
  Manifest manifest{"eval", cfg};
  ensure_out_dir(out_dir);
  manifest.add_input(model_stem + ".bin");
  manifest.add_input(tok_path);
  manifest.add_input(data_path);

  const TokenizerSpec tokenizer = TokenizerSpec::load(tok_path);
  const bench::Dataset dataset = bench::load_dataset(data_path, tokenizer);
  const PolicyModel model = PolicyModel::load(model_stem);
  const auto episodes = pick_split(dataset, cfg.eval.split);

  bench::EvalOptions options;
  options.n_episodes = cfg.eval.episodes;
  options.seed = cfg.seed;
  options.threads = threads;

  bench::EvalReport report;
  if (cfg.eval.decoder == "refinement") {
    report = bench::evaluate(model, tokenizer, cfg.decode_config(0), episodes, options);
  } else if (cfg.eval.decoder == "ar") {
    // left-to-right baseline: one forward per position
    const int n = std::min<int>(options.n_episodes, static_cast<int>(episodes.size()));
    if (n < 1) throw ValidationError("eval: no episodes to run");
    int wins = 0;
    double nfe_sum = 0.0;
    uint64_t digest = fnv1a64("episodes-v1");
    for (int i = 0; i < n; ++i) {
      const auto ar = oracle::ar_baseline_decode(model, episodes[i].task.context);
      const auto actions = detokenize_chunk(ar.chunk, tokenizer);
      wins += bench::rollout_success(episodes[i].task, actions, tokenizer.dims) ? 1 : 0;
      nfe_sum += ar.nfe;
      digest = fnv1a64_bytes(&episodes[i].task.task_id, sizeof(uint64_t), digest);
    }
    report.success_rate = static_cast<double>(wins) / n;
    report.episodes = n;
    report.mean_nfe = nfe_sum / n;
    report.episodes_digest = digest;
    report.config_fingerprint = cfg.fingerprint();
  } else {
    throw ConfigError("unknown eval decoder: " + cfg.eval.decoder);
  }

  const std::string csv_path = (fs::path(out_dir) / "eval.csv").string();
  {
    std::ofstream out(csv_path);
    out << bench::eval_report_csv_header() << "\n" << bench::eval_report_csv_row(report) << "\n";
  }
  manifest.add_output(csv_path);
  manifest.write(out_dir);
  std::cout << "success rate " << report.success_rate << " over " << report.episodes
            << " episodes (mean forwards " << report.mean_nfe << ")\n";
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& model_stem, const std::string& tok_path,
               const std::string& data_path, const std::string& out_dir, int threads) {
  Manifest manifest{"ablate", cfg};
  ensure_out_dir(out_dir);
  manifest.add_input(model_stem + ".bin");
  manifest.add_input(tok_path);
  manifest.add_input(data_path);

  const TokenizerSpec tokenizer = TokenizerSpec::load(tok_path);
  const bench::Dataset dataset = bench::load_dataset(data_path, tokenizer);
  const PolicyModel model = PolicyModel::load(model_stem);
  const auto episodes = pick_split(dataset, cfg.eval.split);

  bench::EvalOptions options;
  options.n_episodes = cfg.eval.episodes;
  options.seed = cfg.seed;
  options.threads = threads;

  const auto cells =
      bench::run_ablation(model, tokenizer, cfg.decode_config(0), episodes, options);
  const std::string csv_path = (fs::path(out_dir) / "ablation.csv").string();
  {
    std::ofstream out(csv_path);
    out << bench::ablation_csv(cells);
  }
  manifest.add_output(csv_path);
  manifest.write(out_dir);
  for (const auto& cell : cells)
    std::cout << to_string(cell.scoring) << " / " << to_string(cell.temperature)
              << ": success " << cell.report.success_rate << "\n";
  std::cout << "wrote " << cells.size() << " cells to " << csv_path << "\n";
  return 0;
}

int cmd_verify(uint64_t seed) {
  using namespace actdiff::verify;
  const CheckResult results[] = {
      check_schedule_exactness(),
      check_schedule_properties(200, seed),
      check_tokenizer_properties(20000, seed),
      check_masked_ce_values(),
      check_forward_marginal_agreement(100, seed, 1e-12),
      check_gradients(1e-4, 1e-4),
      check_decode_oracle_agreement(50, seed),
      check_decoder_invariants(300, seed),
      check_nfe_accounting(),
  };
  int failures = 0;
  for (const auto& r : results) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name;
    if (!r.detail.empty()) std::cout << " -- " << r.detail;
    std::cout << "\n";
    failures += r.pass ? 0 : 1;
  }
  std::cout << (failures == 0 ? "all suites passed\n"
                              : std::to_string(failures) + " suite(s) failed\n");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"discrete-diffusion action decoder"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path;
  std::string out_dir = "out";
  std::string data_path;
  std::string tok_path;
  std::string model_stem;
  std::optional<uint64_t> seed_override;
  std::optional<int> rounds_override;
  std::optional<int> episodes_override;
  std::optional<int> steps_override;
  std::optional<uint64_t> task_seed;
  int episode_index = 0;
  bool trace_flag = false;

  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed_override, "root seed override");
  app.add_option("--out", out_dir, "output directory");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset + tokenizer");

  auto* train = app.add_subcommand("train", "train a policy on a dataset");
  train->add_option("--data", data_path, "dataset file")->required();
  train->add_option("--tokenizer", tok_path, "tokenizer file")->required();
  train->add_option("--steps", steps_override, "training steps override");

  auto* dec = app.add_subcommand("decode", "decode one action chunk");
  dec->add_option("--model", model_stem, "checkpoint stem (without .bin)")->required();
  dec->add_option("--tokenizer", tok_path, "tokenizer file")->required();
  dec->add_option("--data", data_path, "dataset file (with --episode)");
  dec->add_option("--episode", episode_index, "episode index into the dataset");
  dec->add_option("--task-seed", task_seed, "decode a freshly sampled task instead");
  dec->add_flag("--trace", trace_flag, "write a per-round jsonl trace");
  dec->add_option("--rounds", rounds_override, "refinement rounds override");

  auto* ev = app.add_subcommand("eval", "evaluate success rates");
  ev->add_option("--model", model_stem, "checkpoint stem")->required();
  ev->add_option("--tokenizer", tok_path, "tokenizer file")->required();
  ev->add_option("--data", data_path, "dataset file")->required();
  ev->add_option("--episodes", episodes_override, "episode count override");

  auto* ab = app.add_subcommand("ablate", "strategy x temperature grid");
  ab->add_option("--model", model_stem, "checkpoint stem")->required();
  ab->add_option("--tokenizer", tok_path, "tokenizer file")->required();
  ab->add_option("--data", data_path, "dataset file")->required();
  ab->add_option("--episodes", episodes_override, "episode count override");

  auto* ver = app.add_subcommand("verify", "run the verification suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (rounds_override) cfg.decode.rounds = *rounds_override;
    if (episodes_override) cfg.eval.episodes = *episodes_override;
    if (steps_override) cfg.train.steps = *steps_override;
    const int threads = cli::thread_count_from_env();

    if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
    if (train->parsed()) return cmd_train(cfg, data_path, tok_path, out_dir, threads);
    if (dec->parsed())
      return cmd_decode(cfg, model_stem, tok_path, data_path, episode_index, task_seed,
                        trace_flag, out_dir);
    if (ev->parsed()) return cmd_eval(cfg, model_stem, tok_path, data_path, out_dir, threads);
    if (ab->parsed()) return cmd_ablate(cfg, model_stem, tok_path, data_path, out_dir, threads);
    if (ver->parsed()) return cmd_verify(cfg.seed);
    std::cerr << "error [usage]: no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error [" << e.category() << "]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error [" << e.category() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error [internal]: " << e.what() << "\n";
    return 1;
  }
}

#include "actdiff/task_bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

namespace actdiff::bench {

namespace {

void check_config(const BenchConfig& c) {
  if (c.horizon < 1 || c.dims < 3 || c.num_bins < 2 || c.context_vocab < 2)
    throw ValidationError("bench config: horizon/dims/bins/context_vocab too small");
  if (!(c.workspace_lo < c.workspace_hi) || !(c.success_radius > 0.0))
    throw ValidationError("bench config: workspace must be a box and the radius positive");
}

}  // namespace

int quantize_coord(double value, const BenchConfig& config) {
  const double span = config.workspace_hi - config.workspace_lo;
  const double frac = (value - config.workspace_lo) / span;
  const int bin = static_cast<int>(std::floor(frac * config.context_vocab));
  return std::clamp(bin, 0, config.context_vocab - 1);
}

int quantize_displacement(double value, const BenchConfig& config) {
  const double span = config.workspace_hi - config.workspace_lo;
  const double frac = (value + span) / (2.0 * span);  // displacements live in [-span, span]
  const int bin = static_cast<int>(std::floor(frac * config.context_vocab));
  return std::clamp(bin, 0, config.context_vocab - 1);
}

TaskSpec sample_task(Rng& rng, const BenchConfig& config, uint64_t task_id) {
  TaskSpec task;
  task.horizon = config.horizon;
  task.success_radius = config.success_radius;
  task.task_id = task_id;
  const double lo = config.workspace_lo;
  const double span = config.workspace_hi - config.workspace_lo;
  for (int axis = 0; axis < 2; ++axis) task.start[axis] = lo + span * rng.uniform();
  for (int axis = 0; axis < 2; ++axis) task.target[axis] = lo + span * rng.uniform();
  task.context = {quantize_coord(task.start[0], config),
                  quantize_coord(task.start[1], config),
                  quantize_coord(task.target[0], config),
                  quantize_coord(task.target[1], config),
                  quantize_displacement(task.target[0] - task.start[0], config),
                  quantize_displacement(task.target[1] - task.start[1], config)};
  return task;
}

std::vector<double> expert_chunk(const TaskSpec& task, const BenchConfig& config) {
  std::vector<double> chunk(static_cast<size_t>(task.horizon) * config.dims, 0.0);
  for (int axis = 0; axis < 2; ++axis) {
    const double delta = (task.target[axis] - task.start[axis]) / task.horizon;
    for (int h = 0; h < task.horizon; ++h)
      chunk[static_cast<size_t>(h) * config.dims + axis] = delta;
  }
  return chunk;
}

Dataset generate_dataset(int n_tasks, uint64_t seed, const BenchConfig& config) {
  check_config(config);
  if (n_tasks < 1) throw ValidationError("generate_dataset: need at least one task");

  Dataset dataset;
  dataset.config = config;
  dataset.seed = seed;
  Rng rng = Rng(seed).fork("data");

  for (int i = 0; i < n_tasks; ++i) {
    EpisodeRecord ep;
    ep.task = sample_task(rng, config, static_cast<uint64_t>(i));
    ep.seed = splitmix64(seed ^ (0x5151000051510000ull + i));
    ep.expert = expert_chunk(ep.task, config);
    dataset.episodes.push_back(std::move(ep));
  }

  // Fit the tokenizer on the generated action distribution. Dimensions the
  // benchmark holds constant cannot support quantile fitting; they fall back
  // to a fixed uniform binning.
  std::vector<std::vector<double>> samples(config.dims);
  for (const auto& ep : dataset.episodes)
    for (int h = 0; h < config.horizon; ++h)
      for (int d = 0; d < config.dims; ++d)
        samples[d].push_back(ep.expert[static_cast<size_t>(h) * config.dims + d]);

  TokenizerSpec tok;
  tok.num_bins = config.num_bins;
  tok.dims = config.dims;
  tok.gripper_dim_index = config.gripper_dim_index;
  tok.edges.resize(config.dims);
  tok.centers.resize(config.dims);
  for (int d = 0; d < config.dims; ++d) {
    if (d == config.gripper_dim_index) {
      tok.edges[d] = {-std::numeric_limits<double>::infinity(), 0.5,
                      std::numeric_limits<double>::infinity()};
      tok.centers[d] = {0.0, 1.0};
      continue;
    }
    try {
      tok.edges[d] = fit_quantile_edges(samples[d], config.num_bins);
    } catch (const DegenerateDataError&) {
      tok.edges[d] = uniform_edges(-1.0, 1.0, config.num_bins);
    }
    tok.centers[d].resize(config.num_bins);
    for (int i = 0; i < config.num_bins; ++i)
      tok.centers[d][i] = 0.5 * (tok.edges[d][i] + tok.edges[d][i + 1]);
  }
  tok.validate();
  dataset.tokenizer = std::move(tok);
  return dataset;
}

bool is_holdout(const EpisodeRecord& episode) {
  return episode.task.task_id % 10 == 0;
}

std::vector<EpisodeRecord> split(const Dataset& dataset, bool holdout) {
  std::vector<EpisodeRecord> out;
  for (const auto& ep : dataset.episodes)
    if (is_holdout(ep) == holdout) out.push_back(ep);
  return out;
}

namespace {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof v);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  const auto& c = dataset.config;
  out << "actdiff-dataset v1\n"
      << "episodes " << dataset.episodes.size() << "\n"
      << "horizon " << c.horizon << "\n"
      << "dims " << c.dims << "\n"
      << "num_bins " << c.num_bins << "\n"
      << "context_len " << c.context_len << "\n"
      << "context_vocab " << c.context_vocab << "\n"
      << "gripper_dim " << c.gripper_dim_index << "\n"
      << "workspace " << fmt_double(c.workspace_lo) << " " << fmt_double(c.workspace_hi) << "\n"
      << "success_radius " << fmt_double(c.success_radius) << "\n"
      << "seed " << dataset.seed << "\n"
      << "tokenizer_checksum " << dataset.tokenizer.checksum() << "\n"
      << "end_header\n";
  for (const auto& ep : dataset.episodes) {
    write_pod(out, ep.task.task_id);
    write_pod(out, ep.seed);
    write_pod(out, ep.task.start[0]);
    write_pod(out, ep.task.start[1]);
    write_pod(out, ep.task.target[0]);
    write_pod(out, ep.task.target[1]);
    for (int tok : ep.task.context) write_pod(out, static_cast<uint32_t>(tok));
    for (double v : ep.expert) write_pod(out, v);
  }
  if (!out) throw IoError("failed while writing " + path);
}

Dataset load_dataset(const std::string& path, const TokenizerSpec& tokenizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != "actdiff-dataset v1")
    throw IoError("dataset file: unsupported format or version");

  Dataset dataset;
  size_t episodes = 0;
  uint64_t tok_checksum = 0;
  auto& c = dataset.config;
  while (std::getline(in, line) && line != "end_header") {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "episodes") ss >> episodes;
    else if (key == "horizon") ss >> c.horizon;
    else if (key == "dims") ss >> c.dims;
    else if (key == "num_bins") ss >> c.num_bins;
    else if (key == "context_len") ss >> c.context_len;
    else if (key == "context_vocab") ss >> c.context_vocab;
    else if (key == "gripper_dim") ss >> c.gripper_dim_index;
    else if (key == "workspace") ss >> c.workspace_lo >> c.workspace_hi;
    else if (key == "success_radius") ss >> c.success_radius;
    else if (key == "seed") ss >> dataset.seed;
    else if (key == "tokenizer_checksum") ss >> tok_checksum;
    else throw IoError("dataset file: unknown header key '" + key + "'");
    if (!ss) throw IoError("dataset file: malformed header line '" + line + "'");
  }
  if (line != "end_header") throw IoError("dataset file: missing end_header");
  if (tok_checksum != tokenizer.checksum())
    throw IoError("dataset file: tokenizer checksum mismatch");
  dataset.tokenizer = tokenizer;

  for (size_t i = 0; i < episodes; ++i) {
    EpisodeRecord ep;
    ep.task.horizon = c.horizon;
    ep.task.success_radius = c.success_radius;
    read_pod(in, ep.task.task_id);
    read_pod(in, ep.seed);
    read_pod(in, ep.task.start[0]);
    read_pod(in, ep.task.start[1]);
    read_pod(in, ep.task.target[0]);
    read_pod(in, ep.task.target[1]);
    ep.task.context.resize(c.context_len);
    for (int& tok : ep.task.context) {
      uint32_t raw = 0;
      read_pod(in, raw);
      tok = static_cast<int>(raw);
    }
    ep.expert.resize(static_cast<size_t>(c.horizon) * c.dims);
    for (double& v : ep.expert) read_pod(in, v);
    if (!in) throw IoError("dataset file: truncated episode " + std::to_string(i));
    dataset.episodes.push_back(std::move(ep));
  }
  return dataset;
}

bool rollout_success(const TaskSpec& task, std::span<const double> chunk, int dims) {
  double x = task.start[0];
  double y = task.start[1];
  for (int h = 0; h < task.horizon; ++h) {
    x += chunk[static_cast<size_t>(h) * dims + 0];
    y += chunk[static_cast<size_t>(h) * dims + 1];
  }
  const double dx = x - task.target[0];
  const double dy = y - task.target[1];
  return std::sqrt(dx * dx + dy * dy) <= task.success_radius;
}

EvalReport evaluate(const Denoiser& model, const TokenizerSpec& tokenizer,
                    const DecodeConfig& decode_config, std::span<const EpisodeRecord> episodes,
                    const EvalOptions& options) {
  if (model.num_classes() != tokenizer.num_bins)
    throw ConfigError("evaluate: model classes and tokenizer bins disagree");
  const int n = std::min<int>(options.n_episodes, static_cast<int>(episodes.size()));
  if (n < 1) throw ValidationError("evaluate: no episodes to run");

  std::vector<uint8_t> success(n, 0);
  std::vector<int> nfe(n, 0);
  std::vector<double> ms(n, 0.0);

  auto run_episode = [&](int i) {
    const auto& ep = episodes[i];
    DecodeConfig cfg = decode_config;
    // per-episode seed depends only on the eval seed and the task, so
    // different decode configs see identical randomness per episode
    cfg.seed = splitmix64(options.seed ^ splitmix64(ep.task.task_id));
    const auto start = std::chrono::steady_clock::now();
    auto [chunk, trace] = decode(model, ep.task.context, cfg);
    const auto stop = std::chrono::steady_clock::now();
    ms[i] = std::chrono::duration<double, std::milli>(stop - start).count();
    nfe[i] = trace.nfe;
    const std::vector<double> actions = detokenize_chunk(chunk, tokenizer);
    success[i] = rollout_success(ep.task, actions, tokenizer.dims) ? 1 : 0;
  };

  const int threads = std::max(1, options.threads);
  if (threads == 1) {
    for (int i = 0; i < n; ++i) run_episode(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) run_episode(i);
      });
    for (auto& th : pool) th.join();
  }

  EvalReport report;
  report.episodes = n;
  int wins = 0;
  double nfe_sum = 0.0, ms_sum = 0.0;
  uint64_t digest = fnv1a64("episodes-v1");
  for (int i = 0; i < n; ++i) {
    wins += success[i];
    nfe_sum += nfe[i];
    ms_sum += ms[i];
    digest = fnv1a64_bytes(&episodes[i].task.task_id, sizeof(uint64_t), digest);
  }
  report.success_rate = static_cast<double>(wins) / n;
  report.mean_nfe = nfe_sum / n;
  report.mean_decode_ms = ms_sum / n;
  report.episodes_digest = digest;
  report.config_fingerprint = decode_config.fingerprint();
  return report;
}

std::vector<AblationCell> run_ablation(const Denoiser& model, const TokenizerSpec& tokenizer,
                                       const DecodeConfig& base_config,
                                       std::span<const EpisodeRecord> episodes,
                                       const EvalOptions& options) {
  const Scoring strategies[] = {Scoring::one_shot_parallel, Scoring::random_order,
                                Scoring::confidence_gap, Scoring::max_confidence};
  const TemperatureMode temps[] = {TemperatureMode::hard, TemperatureMode::fixed,
                                   TemperatureMode::decay};
  std::vector<AblationCell> cells;
  for (Scoring s : strategies) {
    for (TemperatureMode m : temps) {
      DecodeConfig cfg = base_config;
      cfg.scoring = s;
      cfg.temperature_mode = m;
      AblationCell cell{s, m, evaluate(model, tokenizer, cfg, episodes, options)};
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

std::string eval_report_csv_header() {
  return "success_rate,episodes,mean_nfe,episodes_digest,config_fingerprint,mean_decode_ms";
}

std::string eval_report_csv_row(const EvalReport& r) {
  std::ostringstream ss;
  ss << fmt_double(r.success_rate) << ',' << r.episodes << ',' << fmt_double(r.mean_nfe) << ','
     << r.episodes_digest << ',' << r.config_fingerprint << ',' << fmt_double(r.mean_decode_ms);
  return ss.str();
}

std::string ablation_csv(std::span<const AblationCell> cells) {
  std::ostringstream ss;
  ss << "strategy,temperature," << eval_report_csv_header() << "\n";
  for (const auto& cell : cells)
    ss << to_string(cell.scoring) << ',' << to_string(cell.temperature) << ','
       << eval_report_csv_row(cell.report) << "\n";
  return ss.str();
}

}  // namespace actdiff::bench

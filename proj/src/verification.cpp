#include "actdiff/verification.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "actdiff/action_codec.hpp"
#include "actdiff/diffusion_core.hpp"
#include "actdiff/oracle_suite.hpp"
#include "actdiff/policy_model.hpp"
#include "actdiff/refinement_decoder.hpp"
#include "actdiff/schedules.hpp"
#include "json.hpp"

namespace actdiff::verify {

namespace {

CheckResult pass(std::string name, std::string detail = "") {
  return {std::move(name), true, std::move(detail)};
}

CheckResult fail(std::string name, std::string detail) {
  return {std::move(name), false, std::move(detail)};
}

}  // namespace

Matrix HashModel::posteriors(std::span<const int> context, std::span<const int> tokens) const {
  uint64_t h = seed_;
  for (int c : context) h = splitmix64(h ^ static_cast<uint64_t>(c + 1));
  for (int t : tokens) h = splitmix64(h ^ (static_cast<uint64_t>(t) * 0x9e3779b97f4a7c15ull + 7));
  const int len = chunk_len();
  Matrix p(len, num_classes_);
  for (int i = 0; i < len; ++i) {
    double* row = p.row(i);
    double mx = -1e300;
    for (int k = 0; k < num_classes_; ++k) {
      const uint64_t u = splitmix64(h ^ (static_cast<uint64_t>(i) * 131 + k));
      row[k] = 4.0 * static_cast<double>(u >> 11) * 0x1.0p-53;
      mx = std::max(mx, row[k]);
    }
    double sum = 0.0;
    for (int k = 0; k < num_classes_; ++k) {
      row[k] = std::exp(row[k] - mx);
      sum += row[k];
    }
    for (int k = 0; k < num_classes_; ++k) row[k] /= sum;
  }
  return p;
}

CheckResult check_schedule_exactness() {
  const char* name = "schedule exactness";
  const MaskSchedule cosine{ScheduleKind::cosine, 12, 56};
  const double v0 = mask_ratio(0.0, cosine);
  const double v1 = mask_ratio(0.5, cosine);
  const double v2 = mask_ratio(2.0 / 3.0, cosine);
  std::ostringstream detail;
  detail << "ratio(0)=" << v0 << " ratio(0.5)=" << v1 << " ratio(2/3)=" << v2;
  if (std::abs(v0 - 1.0) > 1e-12) return fail(name, detail.str());
  if (std::abs(v1 - std::cos(std::numbers::pi / 4.0)) > 1e-12) return fail(name, detail.str());
  if (std::abs(v2 - 0.5) > 1e-12) return fail(name, detail.str());
  return pass(name, detail.str());
}

CheckResult check_schedule_properties(int cases, uint64_t seed) {
  const char* name = "schedule properties";
  Rng rng = Rng(seed).fork("schedule-fuzz");
  for (int c = 0; c < cases; ++c) {
    const auto kind = c % 2 == 0 ? ScheduleKind::cosine : ScheduleKind::linear;
    const int rounds = 1 + rng.uniform_int(24);
    const int len = 1 + rng.uniform_int(80);
    const MaskSchedule schedule{kind, rounds, len};

    double t1 = rng.uniform() * 0.999;
    double t2 = rng.uniform() * 0.999;
    if (t1 > t2) std::swap(t1, t2);
    if (t2 - t1 > 1e-9 &&
        !(mask_ratio(t1, schedule) > mask_ratio(t2, schedule)))
      return fail(name, "mask ratio is not strictly decreasing");

    int prev = 0;
    int committed_sum = 0;
    for (int r = 0; r < rounds; ++r) {
      const double t_next = static_cast<double>(r + 1) / rounds;
      const int kc = keep_count(t_next, schedule);
      if (kc < prev) return fail(name, "keep_count decreased between rounds");
      committed_sum += kc - prev;
      prev = kc;
    }
    if (prev != len) return fail(name, "keep_count did not reach the chunk length");
    if (committed_sum != len) return fail(name, "per-round commitments do not sum to the length");

    const ThresholdSchedule thresholds{rng.uniform(), rng.uniform() + 1.0, 0.15, 0};
    double prev_eta = -1e300;
    for (int r = 0; r < rounds; ++r) {
      const double eta = abs_confidence_threshold(r, rounds, thresholds);
      if (eta < prev_eta) return fail(name, "absolute threshold decreased");
      prev_eta = eta;
    }
  }
  return pass(name, std::to_string(cases) + " fuzz cases");
}

CheckResult check_forward_marginal_agreement(int cases, uint64_t seed, double tolerance) {
  const char* name = "forward-marginal oracle agreement";
  Rng rng = Rng(seed).fork("marginal-fuzz");
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    const int vocab = (c % 10 == 9) ? 200 + rng.uniform_int(58) : 2 + rng.uniform_int(31);
    const int steps = 1 + rng.uniform_int(4);
    std::vector<double> betas(steps);
    for (auto& b : betas) {
      const double u = rng.uniform();
      b = u < 0.05 ? 0.0 : (u > 0.95 ? 1.0 : rng.uniform());
    }
    const int token = rng.uniform_int(vocab);
    const auto closed = forward_marginal(token, betas, vocab);
    const auto dense = oracle::dense_forward_marginal(token, betas, vocab);
    double sum = 0.0;
    for (int i = 0; i < vocab; ++i) {
      worst = std::max(worst, std::abs(closed[i] - dense[i]));
      sum += closed[i];
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  std::ostringstream detail;
  detail << cases << " cases, max deviation " << worst;
  return worst < tolerance ? pass(name, detail.str()) : fail(name, detail.str());
}

CheckResult check_masked_ce_values() {
  const char* name = "masked cross-entropy values";
  const int k = 256;
  ActionChunk targets;
  targets.horizon = 4;
  targets.dims = 1;
  targets.mask_id = k;
  targets.tokens = {7, 11, 13, 17};

  Matrix uniform(4, k);
  for (auto& v : uniform.m) v = 1.0 / k;
  const std::vector<int> masked{0, 2, 3};
  const double got = masked_cross_entropy(uniform, targets, masked);
  const double want = masked.size() * std::log(static_cast<double>(k));
  if (std::abs(got - want) > 1e-9)
    return fail(name, "uniform-posterior loss " + std::to_string(got));

  Matrix perfect(4, k);
  for (int i = 0; i < 4; ++i) perfect.at(i, targets.tokens[i]) = 1.0;
  if (masked_cross_entropy(perfect, targets, masked) != 0.0)
    return fail(name, "perfect-prediction loss is not zero");

  Matrix partial(4, k);
  for (int i = 0; i < 4; ++i) partial.at(i, targets.tokens[i]) = i == 0 ? 0.5 : 0.25;
  for (int i = 0; i < 4; ++i) {
    double rest = (1.0 - partial.at(i, targets.tokens[i])) / (k - 1);
    for (int c = 0; c < k; ++c)
      if (c != targets.tokens[i]) partial.at(i, c) = rest;
  }
  const std::vector<int> two{0, 2};
  const double got2 = masked_cross_entropy(partial, targets, two);
  if (std::abs(got2 - (std::log(2.0) + std::log(4.0))) > 1e-9)
    return fail(name, "two-index loss " + std::to_string(got2));
  return pass(name);
}

CheckResult check_gradients(double epsilon, double tolerance) {
  const char* name = "gradient check";
  PolicyModel model(tiny_model_config(), Rng(20240817));
  TrainItem item;
  item.context = {0, 2};
  item.target.horizon = 2;
  item.target.dims = 2;
  item.target.mask_id = model.num_classes();
  item.target.tokens = {1, 3, 0, 2};
  const std::vector<int> masked{0, 2, 3};
  const double err = grad_check(model, item, masked, epsilon);
  std::ostringstream detail;
  detail << model.parameter_count() << " parameters, max relative error " << err;
  return err < tolerance ? pass(name, detail.str()) : fail(name, detail.str());
}

namespace {

struct OracleCase {
  uint64_t seed;
  int chunk_len;
  int num_classes;
  int rounds;
  Scoring scoring;
  ScheduleKind kind;
};

OracleCase make_oracle_case(int index, uint64_t seed) {
  OracleCase c{};
  c.seed = splitmix64(seed ^ static_cast<uint64_t>(index) * 0x2545f4914f6cdd1dull);
  Rng rng(c.seed);
  c.chunk_len = 1 + rng.uniform_int(4);
  c.num_classes = 2 + rng.uniform_int(2);
  c.rounds = 1 + rng.uniform_int(c.chunk_len + 2);
  const Scoring scorings[] = {Scoring::max_confidence, Scoring::confidence_gap,
                              Scoring::random_order, Scoring::one_shot_parallel};
  c.scoring = scorings[rng.uniform_int(4)];
  c.kind = rng.uniform_int(2) == 0 ? ScheduleKind::cosine : ScheduleKind::linear;
  return c;
}

DecodeConfig oracle_case_config(const OracleCase& c) {
  DecodeConfig cfg;
  cfg.total_rounds = c.rounds;
  cfg.scoring = c.scoring;
  cfg.temperature_mode = TemperatureMode::hard;
  cfg.threshold_check = false;
  cfg.residual_drop = false;
  cfg.ratio_kind = c.kind;
  cfg.seed = c.seed;
  return cfg;
}

}  // namespace

std::string decode_oracle_fixture_json(int cases, uint64_t seed) {
  nlohmann::json j;
  j["format"] = "actdiff-decode-oracle-cases";
  j["version"] = 1;
  j["root_seed"] = seed;
  nlohmann::json arr = nlohmann::json::array();
  for (int i = 0; i < cases; ++i) {
    const OracleCase c = make_oracle_case(i, seed);
    const auto model = oracle::TabulatedModel::random(c.chunk_len, c.num_classes, c.seed);
    arr.push_back({{"case", i},
                   {"seed", c.seed},
                   {"chunk_len", c.chunk_len},
                   {"num_classes", c.num_classes},
                   {"rounds", c.rounds},
                   {"scoring", to_string(c.scoring)},
                   {"schedule", to_string(c.kind)},
                   {"table_digest", model.digest()}});
  }
  j["cases"] = std::move(arr);
  return j.dump(2);
}

CheckResult check_decode_oracle_agreement(int cases, uint64_t seed) {
  const char* name = "decode oracle agreement";
  for (int i = 0; i < cases; ++i) {
    const OracleCase c = make_oracle_case(i, seed);
    const auto model = oracle::TabulatedModel::random(c.chunk_len, c.num_classes, c.seed);
    const DecodeConfig cfg = oracle_case_config(c);
    const std::vector<int> context{model.context_id()};
    auto [chunk, trace] = decode(model, context, cfg);
    const ActionChunk want = oracle::reference_decode(model, cfg);
    if (chunk.tokens != want.tokens)
      return fail(name, "case " + std::to_string(i) + " diverged from the reference decoder");
    if (trace.nfe != cfg.effective_rounds())
      return fail(name, "case " + std::to_string(i) + " recorded the wrong forward count");
  }
  return pass(name, std::to_string(cases) + " tabulated models, outputs identical");
}

namespace {

struct InvariantEpisode {
  DecodeConfig cfg;
  int horizon, dims, num_classes;
  uint64_t model_seed;
};

InvariantEpisode make_invariant_episode(int index, uint64_t seed) {
  Rng rng(splitmix64(seed ^ (0xabcddcba0000ull + index)));
  InvariantEpisode e{};
  e.horizon = 1 + rng.uniform_int(6);
  e.dims = 1 + rng.uniform_int(3);
  e.num_classes = 2 + rng.uniform_int(7);
  e.model_seed = rng.next_u64();
  e.cfg.total_rounds = 1 + rng.uniform_int(16);
  const Scoring scorings[] = {Scoring::max_confidence, Scoring::confidence_gap,
                              Scoring::random_order, Scoring::one_shot_parallel};
  e.cfg.scoring = scorings[rng.uniform_int(4)];
  const TemperatureMode temps[] = {TemperatureMode::decay, TemperatureMode::fixed,
                                   TemperatureMode::hard, TemperatureMode::track_ratio};
  e.cfg.temperature_mode = temps[rng.uniform_int(4)];
  e.cfg.fixed_temperature = 0.25 + rng.uniform();
  e.cfg.threshold_check = rng.uniform() < 0.5;
  e.cfg.residual_drop = rng.uniform() < 0.5;
  e.cfg.thresholds.abs_start = rng.uniform() * 0.3;
  e.cfg.thresholds.abs_end = 0.4 + rng.uniform() * 0.6;
  e.cfg.thresholds.drop_limit = 0.02 + rng.uniform() * 0.4;
  e.cfg.thresholds.top_q = rng.uniform() < 0.25 ? 1 + rng.uniform_int(2) : 0;
  e.cfg.ratio_kind = rng.uniform_int(2) == 0 ? ScheduleKind::cosine : ScheduleKind::linear;
  e.cfg.seed = rng.next_u64();
  return e;
}

// Replays the trace records against an independent state machine and checks
// every decoder invariant. Returns an empty string when clean.
std::string audit_decode(const InvariantEpisode& e, const ActionChunk& chunk,
                         const DecodeTrace& trace) {
  const int len = e.horizon * e.dims;
  const int mask = e.num_classes;
  const int rounds = e.cfg.effective_rounds();

  if (trace.nfe != rounds) return "forward count differs from the round count";
  if (static_cast<int>(trace.rounds.size()) != rounds) return "trace is missing rounds";
  if (chunk.has_mask()) return "masked position survived the final round";

  std::vector<int> state(len, mask);
  std::vector<int> first_commit(len, -1);
  const MaskSchedule schedule{e.cfg.ratio_kind, rounds, len};
  const bool remask_enabled = e.cfg.threshold_check || e.cfg.residual_drop;

  for (int r = 0; r < rounds; ++r) {
    const auto& rec = trace.rounds[r];
    if (rec.round != r) return "round indices out of order";
    if (rec.nfe_after != r + 1) return "per-round forward count drifted";

    for (int i = 0; i < len; ++i) {
      const bool masked = state[i] == mask;
      if (masked != static_cast<bool>(rec.masked_before[i]))
        return "recorded pre-round mask state diverged";
    }

    // committed records must cover exactly the keep set, all masked before
    if (rec.committed.size() != rec.keep_set.size()) return "keep set and commits differ";
    for (size_t i = 0; i < rec.keep_set.size(); ++i) {
      const int pos = rec.keep_set[i];
      if (rec.committed[i].first != pos) return "commit order differs from the keep set";
      if (state[pos] != mask) return "committed a position that was not masked";
      state[pos] = rec.committed[i].second;
      if (state[pos] < 0 || state[pos] >= e.num_classes) return "committed an invalid token";
      first_commit[pos] = r;
    }

    // secondary re-masking applies the union of both check sets; a token can
    // fail both. Only earlier rounds' commits are eligible, never this one's.
    std::vector<int> remask_union;
    remask_union.insert(remask_union.end(), rec.remask_abs.begin(), rec.remask_abs.end());
    remask_union.insert(remask_union.end(), rec.remask_drop.begin(), rec.remask_drop.end());
    std::sort(remask_union.begin(), remask_union.end());
    remask_union.erase(std::unique(remask_union.begin(), remask_union.end()),
                       remask_union.end());
    for (int pos : remask_union) {
      if (r == rounds - 1) return "re-masked on the final round";
      if (state[pos] == mask) return "re-masked a position that was not committed";
      if (first_commit[pos] < 0 || first_commit[pos] >= r)
        return "re-masked a position not committed in an earlier round";
      state[pos] = mask;
      first_commit[pos] = -1;
    }

    for (int i = 0; i < len; ++i) {
      const bool masked = state[i] == mask;
      if (masked != static_cast<bool>(rec.masked_after[i]))
        return "recorded post-round mask state diverged";
    }

    int committed_now = 0;
    for (int i = 0; i < len; ++i)
      if (state[i] != mask) ++committed_now;
    if (!remask_enabled) {
      const double t_next = static_cast<double>(r + 1) / rounds;
      const int want = r + 1 == rounds ? len : keep_count(t_next, schedule);
      if (committed_now != want) return "committed count drifted from the schedule";
    }
  }

  // commit persistence: the replayed state is exactly the returned chunk
  for (int i = 0; i < len; ++i)
    if (state[i] != chunk.tokens[i]) return "final chunk differs from the committed history";
  return "";
}

}  // namespace

CheckResult check_decoder_invariants(int episodes, uint64_t seed) {
  const char* name = "decoder invariants";
  for (int idx = 0; idx < episodes; ++idx) {
    const InvariantEpisode e = make_invariant_episode(idx, seed);
    const HashModel model(e.horizon, e.dims, e.num_classes, e.model_seed);
    const std::vector<int> context{0};

    auto [chunk, trace] = decode(model, context, e.cfg);
    const std::string problem = audit_decode(e, chunk, trace);
    if (!problem.empty())
      return fail(name, "episode " + std::to_string(idx) + ": " + problem);

    // determinism: identical inputs reproduce the chunk and the trace
    auto [chunk2, trace2] = decode(model, context, e.cfg);
    if (chunk2.tokens != chunk.tokens || trace2.nfe != trace.nfe ||
        trace2.rounds.size() != trace.rounds.size())
      return fail(name, "episode " + std::to_string(idx) + ": decode is not deterministic");
    for (size_t r = 0; r < trace.rounds.size(); ++r) {
      const auto& a = trace.rounds[r];
      const auto& b = trace2.rounds[r];
      if (a.committed != b.committed || a.scores != b.scores || a.keep_set != b.keep_set ||
          a.remask_abs != b.remask_abs || a.remask_drop != b.remask_drop ||
          !(a.posteriors == b.posteriors))
        return fail(name, "episode " + std::to_string(idx) + ": trace is not deterministic");
    }

    // hard commits without random ordering ignore the seed entirely
    if (e.cfg.temperature_mode == TemperatureMode::hard &&
        e.cfg.scoring != Scoring::random_order) {
      DecodeConfig reseeded = e.cfg;
      reseeded.seed = e.cfg.seed + 1;
      auto [chunk3, trace3] = decode(model, context, reseeded);
      if (chunk3.tokens != chunk.tokens)
        return fail(name, "episode " + std::to_string(idx) + ": hard mode depends on the seed");
    }
  }
  return pass(name, std::to_string(episodes) + " randomized episodes, zero violations");
}

CheckResult check_nfe_accounting() {
  const char* name = "forward-pass accounting";
  ModelConfig cfg;  // defaults: horizon 8 x dims 7 = 56 positions
  PolicyModel model(cfg, Rng(5));
  std::vector<int> context(cfg.context_len, 1);

  DecodeConfig decode_cfg;
  decode_cfg.total_rounds = 12;
  auto [chunk, trace] = decode(model, context, decode_cfg);
  const auto ar = oracle::ar_baseline_decode(model, context);
  std::ostringstream detail;
  detail << "refinement " << trace.nfe << " forwards, left-to-right " << ar.nfe
         << ", ratio " << (static_cast<double>(ar.nfe) / trace.nfe);
  if (trace.nfe != 12) return fail(name, detail.str());
  if (ar.nfe != 56) return fail(name, detail.str());
  const double ratio = static_cast<double>(ar.nfe) / trace.nfe;
  if (std::round(ratio * 10.0) / 10.0 != 4.7) return fail(name, detail.str());
  return pass(name, detail.str());
}

CheckResult check_tokenizer_properties(int cases, uint64_t seed) {
  const char* name = "tokenizer properties";
  Rng rng = Rng(seed).fork("tokenizer-fuzz");

  const int dims = 7;
  const int bins = 256;
  std::vector<std::vector<double>> samples(dims);
  for (int d = 0; d < dims; ++d) {
    if (d == 6) {
      for (int i = 0; i < 512; ++i) samples[d].push_back(i % 2);
      continue;
    }
    const double scale = 0.5 + d * 0.25;
    for (int i = 0; i < 4000; ++i) samples[d].push_back(scale * (rng.normal() + 0.2 * d));
  }
  const TokenizerSpec spec = fit_bins(samples, bins, 6);

  std::vector<double> max_width(dims, 0.0);
  for (int d = 0; d < dims; ++d) {
    if (d == 6) continue;
    for (int i = 0; i < bins; ++i)
      max_width[d] = std::max(max_width[d], spec.edges[d][i + 1] - spec.edges[d][i]);
  }

  for (int c = 0; c < cases; ++c) {
    const int d = rng.uniform_int(6);  // continuous dims only
    const double lo = spec.edges[d].front();
    const double hi = spec.edges[d].back();
    const double x = lo + (hi - lo) * rng.uniform();
    const int tok = tokenize_value(x, spec, d);
    if (tok < 0 || tok >= bins) return fail(name, "token outside range");
    const double back = detokenize_value(tok, spec, d);
    if (std::abs(back - x) > max_width[d]) return fail(name, "round-trip error beyond bin width");
    if (tokenize_value(back, spec, d) != tok) return fail(name, "tokenize is not idempotent");
    const double y = lo + (hi - lo) * rng.uniform();
    if (x <= y && !(tok <= tokenize_value(y, spec, d)))
      return fail(name, "tokenize is not monotone");
  }

  // gripper binarization is exact
  if (tokenize_value(0.0, spec, 6) != 0 || tokenize_value(1.0, spec, 6) != 1 ||
      tokenize_value(0.49, spec, 6) != 0 || tokenize_value(0.51, spec, 6) != 1)
    return fail(name, "gripper threshold is wrong");
  if (detokenize_value(0, spec, 6) != 0.0 || detokenize_value(1, spec, 6) != 1.0)
    return fail(name, "gripper values are not exactly binary");
  return pass(name, std::to_string(cases) + " fuzzed values");
}

}  // namespace actdiff::verify

#include "actdiff/refinement_decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace actdiff {

const char* to_string(Scoring s) {
  switch (s) {
    case Scoring::max_confidence: return "max_confidence";
    case Scoring::confidence_gap: return "confidence_gap";
    case Scoring::random_order: return "random_order";
    case Scoring::one_shot_parallel: return "one_shot_parallel";
  }
  return "?";
}

Scoring scoring_from_string(const std::string& s) {
  if (s == "max_confidence") return Scoring::max_confidence;
  if (s == "confidence_gap") return Scoring::confidence_gap;
  if (s == "random_order") return Scoring::random_order;
  if (s == "one_shot_parallel") return Scoring::one_shot_parallel;
  throw ConfigError("unknown scoring mode: " + s);
}

uint64_t DecodeConfig::fingerprint() const {
  std::ostringstream ss;
  ss << effective_rounds() << '|' << to_string(scoring) << '|' << to_string(temperature_mode)
     << '|' << fixed_temperature << '|' << threshold_check << '|' << residual_drop << '|'
     << thresholds.abs_start << '|' << thresholds.abs_end << '|' << thresholds.drop_limit << '|'
     << thresholds.top_q << '|' << to_string(ratio_kind) << '|' << early_exit << '|' << seed;
  return fnv1a64(ss.str());
}

std::vector<double> score_positions(const Matrix& posteriors, Scoring scoring, Rng& rng) {
  const int n = posteriors.rows;
  const int k = posteriors.cols;
  std::vector<double> scores(n, 0.0);
  switch (scoring) {
    case Scoring::random_order:
      for (int i = 0; i < n; ++i) scores[i] = rng.uniform();
      return scores;
    case Scoring::confidence_gap: {
      if (k < 2) throw ConfigError("confidence_gap needs at least 2 classes");
      for (int i = 0; i < n; ++i) {
        const double* row = posteriors.row(i);
        double best = -1.0, second = -1.0;
        for (int c = 0; c < k; ++c) {
          if (row[c] > best) {
            second = best;
            best = row[c];
          } else if (row[c] > second) {
            second = row[c];
          }
        }
        scores[i] = best - second;
      }
      return scores;
    }
    case Scoring::max_confidence:
    case Scoring::one_shot_parallel:
      for (int i = 0; i < n; ++i) {
        const double* row = posteriors.row(i);
        scores[i] = *std::max_element(row, row + k);
      }
      return scores;
  }
  throw ConfigError("unknown scoring mode");
}

std::vector<int> select_keep_set(std::span<const double> scores,
                                 const std::vector<uint8_t>& masked, int keep_target) {
  const int n = static_cast<int>(masked.size());
  int committed = 0;
  std::vector<int> candidates;
  for (int i = 0; i < n; ++i) {
    if (masked[i])
      candidates.push_back(i);
    else
      ++committed;
  }
  const int need = keep_target - committed;
  if (need <= 0) return {};
  std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  candidates.resize(std::min<size_t>(candidates.size(), static_cast<size_t>(need)));
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

int sample_token(std::span<const double> probs, double tau, Rng& rng) {
  const int k = static_cast<int>(probs.size());
  if (tau < 0.0) throw DomainError("sample_token: temperature must be >= 0");
  if (tau == 0.0) {
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (probs[c] > probs[best]) best = c;
    return best;
  }
  // Gumbel-max over the tempered distribution p^(1/tau).
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < k; ++c) {
    const double g = rng.gumbel();
    if (probs[c] <= 0.0) continue;  // zero mass can never win
    const double score = std::log(probs[c]) / tau + g;
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  if (best < 0) throw ModelContractError("sample_token: posterior row has no positive mass");
  return best;
}

std::vector<int> commit_tokens(const Matrix& posteriors, std::span<const int> positions,
                               double tau, Rng& rng) {
  std::vector<int> tokens(positions.size());
  for (size_t i = 0; i < positions.size(); ++i)
    tokens[i] = sample_token(posteriors.row_span(positions[i]), tau, rng);
  return tokens;
}

std::pair<std::vector<int>, std::vector<int>> secondary_remask(
    std::span<const int> candidates, std::span<const double> current_confidence,
    std::span<const double> reference_confidence, int round, const DecodeConfig& config) {
  std::vector<int> abs_set;
  std::vector<int> drop_set;
  if (config.threshold_check) {
    const double threshold =
        abs_confidence_threshold(round, config.effective_rounds(), config.thresholds);
    for (int pos : candidates)
      if (current_confidence[pos] < threshold) abs_set.push_back(pos);
  }
  if (config.residual_drop) {
    if (config.thresholds.top_q > 0) {
      // the Q most-degraded tokens, among those that actually degraded
      std::vector<std::pair<double, int>> degraded;
      for (int pos : candidates) {
        const double delta = reference_confidence[pos] - current_confidence[pos];
        if (delta > 0.0) degraded.emplace_back(delta, pos);
      }
      std::stable_sort(degraded.begin(), degraded.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      const size_t q = std::min<size_t>(degraded.size(), static_cast<size_t>(config.thresholds.top_q));
      for (size_t i = 0; i < q; ++i) drop_set.push_back(degraded[i].second);
      std::sort(drop_set.begin(), drop_set.end());
    } else {
      for (int pos : candidates) {
        const double delta = reference_confidence[pos] - current_confidence[pos];
        if (delta > config.thresholds.drop_limit) drop_set.push_back(pos);
      }
    }
  }
  return {std::move(abs_set), std::move(drop_set)};
}

std::pair<ActionChunk, DecodeTrace> decode(const Denoiser& model, std::span<const int> context,
                                           const DecodeConfig& config) {
  if (config.total_rounds < 1) throw ConfigError("decode: total_rounds must be >= 1");
  const int rounds = config.effective_rounds();
  const int L = model.chunk_len();
  const int mask_id = model.mask_id();
  const MaskSchedule schedule{config.ratio_kind, rounds, L};

  ActionChunk chunk = ActionChunk::fully_masked(model.chunk_horizon(), model.chunk_dims(), mask_id);
  std::vector<uint8_t> masked(L, 1);

  DecodeTrace trace;
  trace.config_fingerprint = config.fingerprint();
  trace.reference_confidence.assign(L, -1.0);
  trace.first_commit_round.assign(L, -1);

  Rng rng = Rng(config.seed).fork("decode");

  for (int round = 0; round < rounds; ++round) {
    const bool final_round = round == rounds - 1;
    RoundRecord rec;
    rec.round = round;
    rec.t = static_cast<double>(round) / rounds;
    rec.t_next = static_cast<double>(round + 1) / rounds;
    rec.ratio_next = rec.t_next >= 1.0 ? 0.0 : mask_ratio(rec.t_next, schedule);
    rec.masked_before = masked;

    // the single forward pass of this round
    rec.posteriors = model.posteriors(context, chunk.tokens);
    trace.nfe += 1;
    if (rec.posteriors.rows != L || rec.posteriors.cols != model.num_classes())
      throw ModelContractError("decode: posterior matrix has the wrong shape");
    require_row_stochastic(rec.posteriors, 1e-9, "decode");

    rec.max_confidence.resize(L);
    for (int i = 0; i < L; ++i) {
      const double* row = rec.posteriors.row(i);
      rec.max_confidence[i] = *std::max_element(row, row + rec.posteriors.cols);
    }
    rec.scores = score_positions(rec.posteriors, config.scoring, rng);

    rec.keep_target = final_round ? L : keep_count(rec.t_next, schedule);
    rec.keep_set = select_keep_set(rec.scores, masked, rec.keep_target);

    const double temperature =
        config.scoring == Scoring::one_shot_parallel
            ? 0.0  // the one-shot baseline commits everything by argmax
            : choice_temperature(rec.t, config.temperature_mode, config.fixed_temperature,
                                 &schedule);
    rec.temperature = temperature;

    const std::vector<int> sampled = commit_tokens(rec.posteriors, rec.keep_set, temperature, rng);
    for (size_t i = 0; i < rec.keep_set.size(); ++i) {
      const int pos = rec.keep_set[i];
      chunk.tokens[pos] = sampled[i];
      masked[pos] = 0;
      trace.reference_confidence[pos] = rec.max_confidence[pos];
      trace.first_commit_round[pos] = round;
      rec.committed.emplace_back(pos, sampled[i]);
    }

    // Secondary checks apply to tokens committed in earlier rounds; the final
    // round must leave everything committed.
    rec.abs_threshold =
        abs_confidence_threshold(round, rounds, config.thresholds);
    if (!final_round && (config.threshold_check || config.residual_drop)) {
      std::vector<int> candidates;
      for (int i = 0; i < L; ++i)
        if (!masked[i] && trace.first_commit_round[i] < round) candidates.push_back(i);
      auto [abs_set, drop_set] = secondary_remask(candidates, rec.max_confidence,
                                                  trace.reference_confidence, round, config);
      rec.remask_abs = abs_set;
      rec.remask_drop = drop_set;
      for (const auto& set : {abs_set, drop_set}) {
        for (int pos : set) {
          chunk.tokens[pos] = mask_id;
          masked[pos] = 1;
          trace.reference_confidence[pos] = -1.0;
          trace.first_commit_round[pos] = -1;
        }
      }
    }

    rec.masked_after = masked;
    rec.nfe_after = trace.nfe;
    trace.rounds.push_back(std::move(rec));

    if (config.early_exit && std::none_of(masked.begin(), masked.end(),
                                          [](uint8_t m) { return m != 0; }))
      break;
  }

  internal_check(!chunk.has_mask(), "decode: no position may remain masked after the final round");
  return {std::move(chunk), std::move(trace)};
}

std::string DecodeTrace::to_jsonl() const {
  std::ostringstream out;
  for (const auto& r : rounds) {
    nlohmann::json j;
    j["v"] = 1;
    j["round"] = r.round;
    j["t"] = r.t;
    j["t_next"] = r.t_next;
    j["ratio_next"] = r.ratio_next;
    j["temperature"] = r.temperature;
    j["abs_threshold"] = r.abs_threshold;
    j["keep_target"] = r.keep_target;
    auto indices_of = [](const std::vector<uint8_t>& flags) {
      std::vector<int> idx;
      for (size_t i = 0; i < flags.size(); ++i)
        if (flags[i]) idx.push_back(static_cast<int>(i));
      return idx;
    };
    j["masked_before"] = indices_of(r.masked_before);
    j["scores"] = r.scores;
    j["max_confidence"] = r.max_confidence;
    j["keep_set"] = r.keep_set;
    nlohmann::json committed = nlohmann::json::array();
    for (const auto& [pos, tok] : r.committed) committed.push_back({pos, tok});
    j["committed"] = std::move(committed);
    j["remask_abs"] = r.remask_abs;
    j["remask_drop"] = r.remask_drop;
    j["masked_after"] = indices_of(r.masked_after);
    j["nfe"] = r.nfe_after;
    j["config_fingerprint"] = config_fingerprint;
    out << j.dump() << "\n";
  }
  return out.str();
}

}  // namespace actdiff

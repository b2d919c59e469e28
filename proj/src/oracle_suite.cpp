#include "actdiff/oracle_suite.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace actdiff::oracle {

TabulatedModel::TabulatedModel(int chunk_len, int num_classes, int context_id)
    : chunk_len_(chunk_len), num_classes_(num_classes), context_id_(context_id) {
  if (chunk_len < 1 || chunk_len > 4 || num_classes < 2 || num_classes > 3)
    throw ValidationError("tabulated model: supported sizes are L in [1,4], K in [2,3]");
  size_t states = 1;
  for (int i = 0; i < chunk_len; ++i) states *= static_cast<size_t>(num_classes + 1);
  table_.assign(states, Matrix());
}

size_t TabulatedModel::state_code(std::span<const int> tokens) const {
  const int vocab = num_classes_ + 1;
  size_t code = 0;
  size_t base = 1;
  for (int i = 0; i < chunk_len_; ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab)
      throw ValidationError("tabulated model: token outside vocabulary");
    code += static_cast<size_t>(tokens[i]) * base;
    base *= static_cast<size_t>(vocab);
  }
  return code;
}

Matrix TabulatedModel::posteriors(std::span<const int> context,
                                  std::span<const int> tokens) const {
  if (context.size() != 1 || context[0] != context_id_)
    throw CoverageError("tabulated model: unknown context id");
  if (static_cast<int>(tokens.size()) != chunk_len_)
    throw ValidationError("tabulated model: wrong chunk length");
  const size_t code = state_code(tokens);
  const Matrix& entry = table_[code];
  if (entry.rows == 0)
    throw CoverageError("tabulated model: no entry for state " + std::to_string(code));
  return entry;
}

void TabulatedModel::set_posteriors(std::span<const int> tokens, Matrix posteriors) {
  if (posteriors.rows != chunk_len_ || posteriors.cols != num_classes_)
    throw ValidationError("tabulated model: posterior shape must be L x K");
  require_row_stochastic(posteriors, 1e-9, "tabulated model");
  table_[state_code(tokens)] = std::move(posteriors);
}

TabulatedModel TabulatedModel::random(int chunk_len, int num_classes, uint64_t seed) {
  TabulatedModel model(chunk_len, num_classes, /*context_id=*/0);
  Rng rng = Rng(seed).fork("tabulated-model");
  for (auto& entry : model.table_) {
    entry = Matrix(chunk_len, num_classes);
    for (int i = 0; i < chunk_len; ++i) {
      double* row = entry.row(i);
      double sum = 0.0;
      for (int k = 0; k < num_classes; ++k) {
        // squared exponentials give peaked rows, so confidence ordering varies
        const double e = -std::log(rng.uniform_open());
        row[k] = e * e;
        sum += row[k];
      }
      for (int k = 0; k < num_classes; ++k) row[k] /= sum;
    }
  }
  return model;
}

uint64_t TabulatedModel::digest() const {
  uint64_t h = fnv1a64("tabulated-v1");
  h = fnv1a64_bytes(&chunk_len_, sizeof chunk_len_, h);
  h = fnv1a64_bytes(&num_classes_, sizeof num_classes_, h);
  for (const auto& entry : table_)
    h = fnv1a64_bytes(entry.m.data(), entry.m.size() * sizeof(double), h);
  return h;
}

std::vector<double> dense_forward_marginal(int token, std::span<const double> betas,
                                           int vocab_size) {
  if (vocab_size < 2 || vocab_size > 300)
    throw ValidationError("dense marginal: vocab must be in [2, 300]");
  if (token < 0 || token >= vocab_size)
    throw ValidationError("dense marginal: token outside vocabulary");
  const int v = vocab_size;
  const int mask = v - 1;

  // accumulated product, starts as the identity
  std::vector<double> prod(static_cast<size_t>(v) * v, 0.0);
  for (int i = 0; i < v; ++i) prod[static_cast<size_t>(i) * v + i] = 1.0;

  std::vector<double> step(static_cast<size_t>(v) * v);
  std::vector<double> next(static_cast<size_t>(v) * v);
  for (double beta : betas) {
    if (!(beta >= 0.0 && beta <= 1.0))
      throw DomainError("dense marginal: step probability must lie in [0,1]");
    // single-step matrix: column j keeps j with 1-beta and moves to the mask
    // row with beta; the mask column is absorbing
    std::fill(step.begin(), step.end(), 0.0);
    for (int j = 0; j < v; ++j) {
      if (j == mask) {
        step[static_cast<size_t>(mask) * v + j] = 1.0;
      } else {
        step[static_cast<size_t>(j) * v + j] = 1.0 - beta;
        step[static_cast<size_t>(mask) * v + j] = beta;
      }
    }
    // left-multiply: next = step * prod
    std::fill(next.begin(), next.end(), 0.0);
    for (int i = 0; i < v; ++i) {
      for (int k = 0; k < v; ++k) {
        const double a = step[static_cast<size_t>(i) * v + k];
        if (a == 0.0) continue;
        const double* brow = &prod[static_cast<size_t>(k) * v];
        double* nrow = &next[static_cast<size_t>(i) * v];
        for (int j = 0; j < v; ++j) nrow[j] += a * brow[j];
      }
    }
    prod.swap(next);
  }

  std::vector<double> out(v);
  for (int i = 0; i < v; ++i) out[i] = prod[static_cast<size_t>(i) * v + token];
  return out;
}

ActionChunk reference_decode(const TabulatedModel& model, const DecodeConfig& config,
                             std::vector<int>* commit_round) {
  if (config.temperature_mode != TemperatureMode::hard &&
      config.scoring != Scoring::one_shot_parallel)
    throw ConfigError("reference decode: only the hard temperature is supported");
  if (config.threshold_check || config.residual_drop)
    throw ConfigError("reference decode: secondary re-masking is not supported");

  const int len = model.chunk_len();
  const int classes = model.num_classes();
  const int mask = classes;
  const int rounds = config.scoring == Scoring::one_shot_parallel ? 1 : config.total_rounds;
  const std::vector<int> context{model.context_id()};

  std::vector<int> tokens(len, mask);
  std::vector<int> committed_at(len, -1);
  Rng rng = Rng(config.seed).fork("decode");

  for (int round = 0; round < rounds; ++round) {
    const Matrix probs = model.posteriors(context, tokens);

    // position scores per the configured rule; random scores are drawn for
    // every position in ascending order
    std::vector<double> score(len);
    for (int i = 0; i < len; ++i) {
      const double* row = probs.row(i);
      switch (config.scoring) {
        case Scoring::random_order:
          score[i] = rng.uniform();
          break;
        case Scoring::confidence_gap: {
          double hi = -1.0, lo = -1.0;
          for (int k = 0; k < classes; ++k) {
            if (row[k] > hi) {
              lo = hi;
              hi = row[k];
            } else if (row[k] > lo) {
              lo = row[k];
            }
          }
          score[i] = hi - lo;
          break;
        }
        default: {
          double hi = row[0];
          for (int k = 1; k < classes; ++k) hi = std::max(hi, row[k]);
          score[i] = hi;
          break;
        }
      }
    }

    // committed total this round must reach ceil((1 - ratio(t_next)) * L)
    int target;
    if (round + 1 >= rounds) {
      target = len;
    } else {
      const double t_next = static_cast<double>(round + 1) / rounds;
      const double ratio = config.ratio_kind == ScheduleKind::cosine
                               ? std::cos(std::numbers::pi / 2.0 * t_next)
                               : 1.0 - t_next;
      target = std::clamp(static_cast<int>(std::ceil((1.0 - ratio) * len)), 1, len);
    }
    int already = 0;
    for (int i = 0; i < len; ++i)
      if (tokens[i] != mask) ++already;

    for (int need = target - already; need > 0; --need) {
      // best masked position; ties fall to the lower index
      int pick = -1;
      for (int i = 0; i < len; ++i)
        if (tokens[i] == mask && (pick == -1 || score[i] > score[pick])) pick = i;
      internal_check(pick >= 0, "reference decode: ran out of masked positions");
      const double* row = probs.row(pick);
      int best = 0;
      for (int k = 1; k < classes; ++k)
        if (row[k] > row[best]) best = k;
      tokens[pick] = best;
      committed_at[pick] = round;
    }
  }

  if (commit_round) *commit_round = committed_at;
  ActionChunk chunk;
  chunk.horizon = len;
  chunk.dims = 1;
  chunk.mask_id = mask;
  chunk.tokens = std::move(tokens);
  return chunk;
}

ArDecodeResult ar_baseline_decode(const Denoiser& model, std::span<const int> context) {
  const int len = model.chunk_len();
  const int mask = model.mask_id();
  ArDecodeResult result;
  result.chunk = ActionChunk::fully_masked(model.chunk_horizon(), model.chunk_dims(), mask);
  for (int pos = 0; pos < len; ++pos) {
    const Matrix probs = model.posteriors(context, result.chunk.tokens);
    result.nfe += 1;
    const double* row = probs.row(pos);
    int best = 0;
    for (int k = 1; k < probs.cols; ++k)
      if (row[k] > row[best]) best = k;
    result.chunk.tokens[pos] = best;
  }
  return result;
}

}  // namespace actdiff::oracle

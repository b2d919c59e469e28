#include "actdiff/policy_model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "actdiff/diffusion_core.hpp"
#include "json.hpp"

namespace actdiff {

namespace {

constexpr double kLnEps = 1e-5;

// Parameter layout: [tok_embed, ctx_embed, pos_embed, 16 tensors per layer,
// ln_f.gain, ln_f.bias, head.w, head.b]. Offsets inside a layer block:
enum LayerSlot {
  kLn1Gain = 0, kLn1Bias, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
  kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2, kLayerSlots
};
constexpr size_t kTokEmbed = 0, kCtxEmbed = 1, kPosEmbed = 2, kFirstLayer = 3;

size_t layer_idx(int layer, LayerSlot slot) {
  return kFirstLayer + static_cast<size_t>(layer) * kLayerSlots + slot;
}
size_t lnf_gain_idx(int layers) { return kFirstLayer + static_cast<size_t>(layers) * kLayerSlots; }
size_t lnf_bias_idx(int layers) { return lnf_gain_idx(layers) + 1; }
size_t head_w_idx(int layers) { return lnf_gain_idx(layers) + 2; }
size_t head_b_idx(int layers) { return lnf_gain_idx(layers) + 3; }

// C = A (n x k) * B (k x m), row-major.
void mm_set(const double* a, int n, int k, const double* b, int m, double* c) {
  std::fill(c, c + static_cast<size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<size_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (n x m) += A^T * B where A is stored k x n and B is k x m.
void mm_acc_tn(const double* a, int k, int n, const double* b, int m, double* c) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<size_t>(p) * n;
    const double* brow = b + static_cast<size_t>(p) * m;
    for (int i = 0; i < n; ++i) {
      const double av = arow[i];
      double* crow = c + static_cast<size_t>(i) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (n x m) = A (n x k) * B^T where B is stored m x k.
void mm_set_nt(const double* a, int n, int k, const double* b, int m, double* c) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

void add_row_bias(Matrix& x, const std::vector<double>& b) {
  for (int i = 0; i < x.rows; ++i) {
    double* row = x.row(i);
    for (int j = 0; j < x.cols; ++j) row[j] += b[j];
  }
}

void col_sums_acc(const Matrix& x, std::vector<double>& out) {
  for (int i = 0; i < x.rows; ++i) {
    const double* row = x.row(i);
    for (int j = 0; j < x.cols; ++j) out[j] += row[j];
  }
}

void softmax_row(double* row, int n) {
  double mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < n; ++j) row[j] *= inv;
}

double gelu(double x) { return x * 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double gelu_grad(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// y = gain .* (x - mean) / sqrt(var + eps) + bias, per row.
void layernorm_forward(const Matrix& x, const std::vector<double>& gain,
                       const std::vector<double>& bias, Matrix& xhat, Matrix& y,
                       std::vector<double>& inv_std) {
  const int n = x.rows, d = x.cols;
  xhat = Matrix(n, d);
  y = Matrix(n, d);
  inv_std.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* row = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    inv_std[i] = inv;
    double* xh = xhat.row(i);
    double* yr = y.row(i);
    for (int j = 0; j < d; ++j) {
      xh[j] = (row[j] - mean) * inv;
      yr[j] = gain[j] * xh[j] + bias[j];
    }
  }
}

void layernorm_backward(const Matrix& dy, const Matrix& xhat, const std::vector<double>& inv_std,
                        const std::vector<double>& gain, Matrix& dx,
                        std::vector<double>& dgain, std::vector<double>& dbias) {
  const int n = dy.rows, d = dy.cols;
  dx = Matrix(n, d);
  std::vector<double> dxhat(d);
  for (int i = 0; i < n; ++i) {
    const double* dyr = dy.row(i);
    const double* xh = xhat.row(i);
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < d; ++j) {
      dgain[j] += dyr[j] * xh[j];
      dbias[j] += dyr[j];
      dxhat[j] = dyr[j] * gain[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * xh[j];
    }
    m1 /= d;
    m2 /= d;
    double* dxr = dx.row(i);
    const double inv = inv_std[i];
    for (int j = 0; j < d; ++j) dxr[j] = inv * (dxhat[j] - m1 - xh[j] * m2);
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2 || context_vocab < 1 || context_len < 1 || horizon < 1 || dims < 1 ||
      embed_dim < 1 || layers < 1 || heads < 1 || ff_dim < 1)
    throw ValidationError("model config: all counts must be >= 1 (and vocab >= 2)");
  if (embed_dim % heads != 0)
    throw ValidationError("model config: embed_dim must be divisible by heads");
}

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.vocab_size = 5;  // K = 4
  cfg.context_vocab = 3;
  cfg.context_len = 2;
  cfg.horizon = 2;
  cfg.dims = 2;
  cfg.embed_dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ff_dim = 16;
  return cfg;
}

PolicyModel::PolicyModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  allocate();
}

PolicyModel::PolicyModel(const ModelConfig& config, Rng init_rng) : PolicyModel(config) {
  initialize(init_rng);
}

void PolicyModel::allocate() {
  params_.clear();
  auto add = [&](const std::string& name, std::vector<int> shape) {
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    params_.push_back(NamedTensor{name, std::move(shape), std::vector<double>(n, 0.0)});
  };
  const int d = config_.embed_dim;
  add("tok_embed", {config_.vocab_size, d});
  add("ctx_embed", {config_.context_vocab, d});
  add("pos_embed", {config_.seq_len(), d});
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.gain", {d});
    add(p + "ln1.bias", {d});
    add(p + "attn.wq", {d, d});
    add(p + "attn.bq", {d});
    add(p + "attn.wk", {d, d});
    add(p + "attn.bk", {d});
    add(p + "attn.wv", {d, d});
    add(p + "attn.bv", {d});
    add(p + "attn.wo", {d, d});
    add(p + "attn.bo", {d});
    add(p + "ln2.gain", {d});
    add(p + "ln2.bias", {d});
    add(p + "ff.w1", {d, config_.ff_dim});
    add(p + "ff.b1", {config_.ff_dim});
    add(p + "ff.w2", {config_.ff_dim, d});
    add(p + "ff.b2", {d});
  }
  add("ln_f.gain", {d});
  add("ln_f.bias", {d});
  add("head.w", {d, config_.num_classes()});
  add("head.b", {config_.num_classes()});
}

namespace {

// Sinusoid features of the id: token ids are ordinal (bin indices), so
// numerically close ids start with close embeddings.
void init_ordinal_embedding(NamedTensor& t, int rows, int d, double scale, Rng& rng) {
  for (int id = 0; id < rows; ++id) {
    for (int j = 0; j < d; ++j) {
      const int pair = j / 2;
      const double freq = std::pow(10000.0, -2.0 * pair / d);
      const double angle = id * freq;
      const double base = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
      t.v[static_cast<size_t>(id) * d + j] = scale * base + 0.01 * rng.normal();
    }
  }
}

}  // namespace

void PolicyModel::initialize(Rng& rng) {
  const int d = config_.embed_dim;
  const double residual_scale = 1.0 / std::sqrt(2.0 * config_.layers);
  for (auto& t : params_) {
    if (t.name == "tok_embed") {
      init_ordinal_embedding(t, config_.vocab_size - 1, d, 0.5, rng);
      // the mask symbol is not ordinal; give it an independent row
      for (int j = 0; j < d; ++j)
        t.v[static_cast<size_t>(config_.vocab_size - 1) * d + j] = 0.2 * rng.normal();
    } else if (t.name == "ctx_embed") {
      init_ordinal_embedding(t, config_.context_vocab, d, 0.5, rng);
    } else if (t.name == "pos_embed") {
      for (auto& v : t.v) v = 0.02 * rng.normal();
    } else if (t.name.ends_with(".gain")) {
      std::fill(t.v.begin(), t.v.end(), 1.0);
    } else if (t.shape.size() == 2 && !t.name.ends_with("head.w")) {
      const int fan_in = t.shape[0];
      const int fan_out = t.shape[1];
      double std = std::sqrt(2.0 / (fan_in + fan_out));
      if (t.name.ends_with("attn.wo") || t.name.ends_with("ff.w2")) std *= residual_scale;
      for (auto& v : t.v) v = std * rng.normal();
    }
    // biases, ln biases and the head stay zero: a fresh head yields exactly
    // uniform posteriors
  }
}

const NamedTensor& PolicyModel::tensor(const std::string& name) const {
  for (const auto& t : params_)
    if (t.name == name) return t;
  throw InternalError("model tensor table is missing " + name);
}

size_t PolicyModel::parameter_count() const {
  size_t n = 0;
  for (const auto& t : params_) n += t.size();
  return n;
}

GradBuffer PolicyModel::zero_grads() const {
  GradBuffer g(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) g[i].assign(params_[i].size(), 0.0);
  return g;
}

Matrix PolicyModel::posteriors(std::span<const int> context, std::span<const int> tokens) const {
  ForwardCache cache;
  return posteriors(context, tokens, cache);
}

Matrix PolicyModel::posteriors(std::span<const int> context, std::span<const int> tokens,
                               ForwardCache& cache) const {
  const int C = config_.context_len;
  const int L = config_.chunk_len();
  const int S = config_.seq_len();
  const int d = config_.embed_dim;
  const int heads = config_.heads;
  const int dh = d / heads;
  const int K = config_.num_classes();
  const int layers = config_.layers;

  if (static_cast<int>(context.size()) != C)
    throw ValidationError("forward: context length " + std::to_string(context.size()) +
                          " does not match config " + std::to_string(C));
  if (static_cast<int>(tokens.size()) != L)
    throw ValidationError("forward: action length " + std::to_string(tokens.size()) +
                          " does not match config " + std::to_string(L));
  for (int c : context)
    if (c < 0 || c >= config_.context_vocab)
      throw ValidationError("forward: context token outside vocabulary");
  for (int t : tokens)
    if (t < 0 || t >= config_.vocab_size)
      throw ValidationError("forward: action token outside vocabulary");

  cache.context.assign(context.begin(), context.end());
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.layers.assign(layers, {});

  const auto& P = params_;
  Matrix x(S, d);
  for (int s = 0; s < S; ++s) {
    const double* emb = s < C ? &P[kCtxEmbed].v[static_cast<size_t>(context[s]) * d]
                              : &P[kTokEmbed].v[static_cast<size_t>(tokens[s - C]) * d];
    const double* pos = &P[kPosEmbed].v[static_cast<size_t>(s) * d];
    double* row = x.row(s);
    for (int j = 0; j < d; ++j) row[j] = emb[j] + pos[j];
  }

  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int l = 0; l < layers; ++l) {
    auto& lc = cache.layers[l];
    lc.x_in = x;

    layernorm_forward(x, P[layer_idx(l, kLn1Gain)].v, P[layer_idx(l, kLn1Bias)].v, lc.ln1_xhat,
                      lc.ln1_out, lc.ln1_inv);

    lc.q = Matrix(S, d);
    lc.k = Matrix(S, d);
    lc.v = Matrix(S, d);
    mm_set(lc.ln1_out.m.data(), S, d, P[layer_idx(l, kWq)].v.data(), d, lc.q.m.data());
    mm_set(lc.ln1_out.m.data(), S, d, P[layer_idx(l, kWk)].v.data(), d, lc.k.m.data());
    mm_set(lc.ln1_out.m.data(), S, d, P[layer_idx(l, kWv)].v.data(), d, lc.v.m.data());
    add_row_bias(lc.q, P[layer_idx(l, kBq)].v);
    add_row_bias(lc.k, P[layer_idx(l, kBk)].v);
    add_row_bias(lc.v, P[layer_idx(l, kBv)].v);

    // all positions attend to all positions (no causal mask)
    lc.att_p = Matrix(heads * S, S);
    lc.o = Matrix(S, d);
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      for (int s = 0; s < S; ++s) {
        double* prow = lc.att_p.row(h * S + s);
        const double* qrow = lc.q.row(s) + off;
        for (int t = 0; t < S; ++t) {
          const double* krow = lc.k.row(t) + off;
          double acc = 0.0;
          for (int j = 0; j < dh; ++j) acc += qrow[j] * krow[j];
          prow[t] = acc * att_scale;
        }
        softmax_row(prow, S);
        double* orow = lc.o.row(s) + off;
        std::fill(orow, orow + dh, 0.0);
        for (int t = 0; t < S; ++t) {
          const double pv = prow[t];
          const double* vrow = lc.v.row(t) + off;
          for (int j = 0; j < dh; ++j) orow[j] += pv * vrow[j];
        }
      }
    }

    Matrix attn_out(S, d);
    mm_set(lc.o.m.data(), S, d, P[layer_idx(l, kWo)].v.data(), d, attn_out.m.data());
    add_row_bias(attn_out, P[layer_idx(l, kBo)].v);

    lc.x_mid = Matrix(S, d);
    for (size_t i = 0; i < x.m.size(); ++i) lc.x_mid.m[i] = x.m[i] + attn_out.m[i];

    layernorm_forward(lc.x_mid, P[layer_idx(l, kLn2Gain)].v, P[layer_idx(l, kLn2Bias)].v,
                      lc.ln2_xhat, lc.ln2_out, lc.ln2_inv);

    lc.ff_u = Matrix(S, config_.ff_dim);
    mm_set(lc.ln2_out.m.data(), S, d, P[layer_idx(l, kW1)].v.data(), config_.ff_dim,
           lc.ff_u.m.data());
    add_row_bias(lc.ff_u, P[layer_idx(l, kB1)].v);

    lc.ff_h = Matrix(S, config_.ff_dim);
    for (size_t i = 0; i < lc.ff_u.m.size(); ++i) lc.ff_h.m[i] = gelu(lc.ff_u.m[i]);

    Matrix ff_out(S, d);
    mm_set(lc.ff_h.m.data(), S, config_.ff_dim, P[layer_idx(l, kW2)].v.data(), d,
           ff_out.m.data());
    add_row_bias(ff_out, P[layer_idx(l, kB2)].v);

    for (size_t i = 0; i < x.m.size(); ++i) x.m[i] = lc.x_mid.m[i] + ff_out.m[i];
  }

  cache.x_final = x;
  layernorm_forward(x, P[lnf_gain_idx(layers)].v, P[lnf_bias_idx(layers)].v, cache.lnf_xhat,
                    cache.lnf_out, cache.lnf_inv);

  cache.logits = Matrix(L, K);
  const auto& head_w = P[head_w_idx(layers)].v;
  const auto& head_b = P[head_b_idx(layers)].v;
  for (int i = 0; i < L; ++i) {
    const double* yrow = cache.lnf_out.row(C + i);
    double* lrow = cache.logits.row(i);
    for (int k = 0; k < K; ++k) lrow[k] = head_b[k];
    for (int j = 0; j < d; ++j) {
      const double yv = yrow[j];
      const double* wrow = &head_w[static_cast<size_t>(j) * K];
      for (int k = 0; k < K; ++k) lrow[k] += yv * wrow[k];
    }
  }

  cache.probs = cache.logits;
  for (int i = 0; i < L; ++i) softmax_row(cache.probs.row(i), K);
  return cache.probs;
}

void PolicyModel::backward(const ForwardCache& cache, const Matrix& dlogits,
                           GradBuffer& grads) const {
  const int C = config_.context_len;
  const int L = config_.chunk_len();
  const int S = config_.seq_len();
  const int d = config_.embed_dim;
  const int heads = config_.heads;
  const int dh = d / heads;
  const int K = config_.num_classes();
  const int ff = config_.ff_dim;
  const int layers = config_.layers;

  if (dlogits.rows != L || dlogits.cols != K)
    throw ValidationError("backward: dlogits must be chunk_len x num_classes");
  if (grads.size() != params_.size()) throw ValidationError("backward: bad gradient buffer");

  const auto& P = params_;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // head
  Matrix dy(S, d);
  {
    auto& dhead_w = grads[head_w_idx(layers)];
    auto& dhead_b = grads[head_b_idx(layers)];
    const auto& head_w = P[head_w_idx(layers)].v;
    for (int i = 0; i < L; ++i) {
      const double* dlrow = dlogits.row(i);
      const double* yrow = cache.lnf_out.row(C + i);
      double* dyrow = dy.row(C + i);
      for (int k = 0; k < K; ++k) dhead_b[k] += dlrow[k];
      for (int j = 0; j < d; ++j) {
        const double yv = yrow[j];
        double* dwrow = &dhead_w[static_cast<size_t>(j) * K];
        const double* wrow = &head_w[static_cast<size_t>(j) * K];
        double acc = 0.0;
        for (int k = 0; k < K; ++k) {
          dwrow[k] += yv * dlrow[k];
          acc += wrow[k] * dlrow[k];
        }
        dyrow[j] += acc;
      }
    }
  }

  Matrix dx;
  layernorm_backward(dy, cache.lnf_xhat, cache.lnf_inv, P[lnf_gain_idx(layers)].v, dx,
                     grads[lnf_gain_idx(layers)], grads[lnf_bias_idx(layers)]);

  for (int l = layers - 1; l >= 0; --l) {
    const auto& lc = cache.layers[l];

    // feed-forward block: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
    Matrix dff_h(S, ff);
    mm_set_nt(dx.m.data(), S, d, P[layer_idx(l, kW2)].v.data(), ff, dff_h.m.data());
    mm_acc_tn(lc.ff_h.m.data(), S, ff, dx.m.data(), d, grads[layer_idx(l, kW2)].data());
    col_sums_acc(dx, grads[layer_idx(l, kB2)]);

    Matrix dff_u(S, ff);
    for (size_t i = 0; i < dff_u.m.size(); ++i)
      dff_u.m[i] = dff_h.m[i] * gelu_grad(lc.ff_u.m[i]);

    Matrix dln2_out(S, d);
    mm_set_nt(dff_u.m.data(), S, ff, P[layer_idx(l, kW1)].v.data(), d, dln2_out.m.data());
    mm_acc_tn(lc.ln2_out.m.data(), S, d, dff_u.m.data(), ff, grads[layer_idx(l, kW1)].data());
    col_sums_acc(dff_u, grads[layer_idx(l, kB1)]);

    Matrix dx_mid;
    layernorm_backward(dln2_out, lc.ln2_xhat, lc.ln2_inv, P[layer_idx(l, kLn2Gain)].v, dx_mid,
                       grads[layer_idx(l, kLn2Gain)], grads[layer_idx(l, kLn2Bias)]);
    for (size_t i = 0; i < dx_mid.m.size(); ++i) dx_mid.m[i] += dx.m[i];  // residual

    // attention block: x_mid = x_in + Wo concat(softmax(QK^T/s) V) + bo
    Matrix dattn_o(S, d);
    mm_set_nt(dx_mid.m.data(), S, d, P[layer_idx(l, kWo)].v.data(), d, dattn_o.m.data());
    mm_acc_tn(lc.o.m.data(), S, d, dx_mid.m.data(), d, grads[layer_idx(l, kWo)].data());
    col_sums_acc(dx_mid, grads[layer_idx(l, kBo)]);

    Matrix dq(S, d), dk(S, d), dv(S, d);
    std::vector<double> dp(S), datt(S);
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      for (int s = 0; s < S; ++s) {
        const double* prow = lc.att_p.row(h * S + s);
        const double* dorow = dattn_o.row(s) + off;
        double inner = 0.0;
        for (int t = 0; t < S; ++t) {
          const double* vrow = lc.v.row(t) + off;
          double acc = 0.0;
          for (int j = 0; j < dh; ++j) acc += dorow[j] * vrow[j];
          dp[t] = acc;
          inner += acc * prow[t];
          double* dvrow = dv.row(t) + off;
          for (int j = 0; j < dh; ++j) dvrow[j] += prow[t] * dorow[j];
        }
        for (int t = 0; t < S; ++t) datt[t] = prow[t] * (dp[t] - inner) * att_scale;
        double* dqrow = dq.row(s) + off;
        const double* qrow = lc.q.row(s) + off;
        for (int t = 0; t < S; ++t) {
          const double dval = datt[t];
          const double* krow = lc.k.row(t) + off;
          double* dkrow = dk.row(t) + off;
          for (int j = 0; j < dh; ++j) {
            dqrow[j] += dval * krow[j];
            dkrow[j] += dval * qrow[j];
          }
        }
      }
    }

    Matrix dln1_out(S, d);
    mm_set_nt(dq.m.data(), S, d, P[layer_idx(l, kWq)].v.data(), d, dln1_out.m.data());
    {
      Matrix tmp(S, d);
      mm_set_nt(dk.m.data(), S, d, P[layer_idx(l, kWk)].v.data(), d, tmp.m.data());
      for (size_t i = 0; i < tmp.m.size(); ++i) dln1_out.m[i] += tmp.m[i];
      mm_set_nt(dv.m.data(), S, d, P[layer_idx(l, kWv)].v.data(), d, tmp.m.data());
      for (size_t i = 0; i < tmp.m.size(); ++i) dln1_out.m[i] += tmp.m[i];
    }
    mm_acc_tn(lc.ln1_out.m.data(), S, d, dq.m.data(), d, grads[layer_idx(l, kWq)].data());
    mm_acc_tn(lc.ln1_out.m.data(), S, d, dk.m.data(), d, grads[layer_idx(l, kWk)].data());
    mm_acc_tn(lc.ln1_out.m.data(), S, d, dv.m.data(), d, grads[layer_idx(l, kWv)].data());
    col_sums_acc(dq, grads[layer_idx(l, kBq)]);
    col_sums_acc(dk, grads[layer_idx(l, kBk)]);
    col_sums_acc(dv, grads[layer_idx(l, kBv)]);

    Matrix dx_in;
    layernorm_backward(dln1_out, lc.ln1_xhat, lc.ln1_inv, P[layer_idx(l, kLn1Gain)].v, dx_in,
                       grads[layer_idx(l, kLn1Gain)], grads[layer_idx(l, kLn1Bias)]);
    for (size_t i = 0; i < dx_in.m.size(); ++i) dx_in.m[i] += dx_mid.m[i];  // residual
    dx = std::move(dx_in);
  }

  // embeddings
  auto& dtok = grads[kTokEmbed];
  auto& dctx = grads[kCtxEmbed];
  auto& dpos = grads[kPosEmbed];
  for (int s = 0; s < S; ++s) {
    const double* dxr = dx.row(s);
    double* dposr = &dpos[static_cast<size_t>(s) * d];
    double* dembr = s < C ? &dctx[static_cast<size_t>(cache.context[s]) * d]
                          : &dtok[static_cast<size_t>(cache.tokens[s - C]) * d];
    for (int j = 0; j < d; ++j) {
      dposr[j] += dxr[j];
      dembr[j] += dxr[j];
    }
  }
}

void SgdMomentum::apply(PolicyModel& model, const GradBuffer& grads) {
  auto& params = model.params();
  if (velocity.empty()) {
    velocity.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) velocity[i].assign(params[i].size(), 0.0);
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto& v = velocity[i];
    auto& p = params[i].v;
    const auto& g = grads[i];
    for (size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      p[j] -= learning_rate * v[j];
    }
  }
}

namespace {

struct ItemWork {
  CorruptionOutcome corruption;
  double ce = 0.0;
  int masked = 0;
};

}  // namespace

double train_step(PolicyModel& model, std::span<const TrainItem> batch,
                  const TrainOptions& options, SgdMomentum& optimizer, Rng& rng) {
  if (batch.empty()) throw ValidationError("train_step: batch must be non-empty");
  const int L = model.config().chunk_len();
  const MaskSchedule schedule{options.ratio_schedule, 1, L};

  // Randomness is consumed up-front in item order so the outcome does not
  // depend on the thread count.
  std::vector<ItemWork> work(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& item = batch[i];
    if (item.target.has_mask())
      throw ValidationError("train_step: target chunk contains the mask symbol");
    if (options.objective == TrainObjective::masked_diffusion) {
      const double ratio = mask_ratio(rng.uniform(), schedule);
      work[i].corruption = corrupt_fixed_count(item.target, ratio, rng);
    } else {
      // suffix corruption: hide positions j..L-1, supervise position j only
      const int j = rng.uniform_int(L);
      work[i].corruption.corrupted = item.target;
      for (int pos = j; pos < L; ++pos)
        work[i].corruption.corrupted.tokens[pos] = item.target.mask_id;
      work[i].corruption.masked_set = {j};
      work[i].corruption.ratio_used = static_cast<double>(L - j) / L;
    }
  }

  std::vector<GradBuffer> item_grads(batch.size());
  auto run_item = [&](size_t i) {
    const auto& item = batch[i];
    auto& w = work[i];
    item_grads[i] = model.zero_grads();
    w.masked = static_cast<int>(w.corruption.masked_set.size());
    if (w.masked == 0) return;  // a near-zero ratio can round to an empty mask
    ForwardCache cache;
    Matrix probs = model.posteriors(item.context, w.corruption.corrupted.tokens, cache);
    w.ce = masked_cross_entropy(probs, item.target, w.corruption.masked_set);
    Matrix dlogits(probs.rows, probs.cols);
    for (int pos : w.corruption.masked_set) {
      const double* prow = probs.row(pos);
      double* drow = dlogits.row(pos);
      for (int k = 0; k < probs.cols; ++k) drow[k] = prow[k];
      drow[item.target.tokens[pos]] -= 1.0;
    }
    model.backward(cache, dlogits, item_grads[i]);
  };

  const int threads = std::max(1, options.threads);
  if (threads == 1 || batch.size() == 1) {
    for (size_t i = 0; i < batch.size(); ++i) run_item(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (size_t i = next.fetch_add(1); i < batch.size(); i = next.fetch_add(1)) run_item(i);
      });
    for (auto& th : pool) th.join();
  }

  double total_ce = 0.0;
  long total_masked = 0;
  for (const auto& w : work) {
    total_ce += w.ce;
    total_masked += w.masked;
  }
  const double scale = options.rescale_by_mask_count && total_masked > 0
                           ? 1.0 / static_cast<double>(total_masked)
                           : 1.0;
  const double loss = total_ce * scale;
  if (!std::isfinite(loss))
    throw TrainingDivergenceError("train_step: non-finite loss (ce=" + std::to_string(total_ce) +
                                  ", masked=" + std::to_string(total_masked) + ")");

  // reduce per-item gradients in item order
  GradBuffer grads = model.zero_grads();
  for (size_t i = 0; i < batch.size(); ++i)
    for (size_t t = 0; t < grads.size(); ++t)
      for (size_t j = 0; j < grads[t].size(); ++j) grads[t][j] += item_grads[i][t][j] * scale;

  optimizer.learning_rate = options.learning_rate;
  optimizer.momentum = options.momentum;
  optimizer.apply(model, grads);
  return loss;
}

namespace {

double loss_at(const PolicyModel& model, const TrainItem& item, std::span<const int> masked_set,
               const std::vector<int>& corrupted_tokens) {
  Matrix probs = model.posteriors(item.context, corrupted_tokens);
  return masked_cross_entropy(probs, item.target, masked_set);
}

double grad_check_impl(PolicyModel& model, const TrainItem& item,
                       std::span<const int> masked_set, double epsilon,
                       const std::string& filter) {
  std::vector<int> corrupted = item.target.tokens;
  for (int pos : masked_set) corrupted[pos] = item.target.mask_id;

  ForwardCache cache;
  Matrix probs = model.posteriors(item.context, corrupted, cache);
  Matrix dlogits(probs.rows, probs.cols);
  for (int pos : masked_set) {
    const double* prow = probs.row(pos);
    double* drow = dlogits.row(pos);
    for (int k = 0; k < probs.cols; ++k) drow[k] = prow[k];
    drow[item.target.tokens[pos]] -= 1.0;
  }
  GradBuffer analytic = model.zero_grads();
  model.backward(cache, dlogits, analytic);

  double max_rel = 0.0;
  for (size_t t = 0; t < model.params().size(); ++t) {
    auto& tensor = model.params()[t];
    if (!filter.empty() && tensor.name.find(filter) == std::string::npos) continue;
    for (size_t j = 0; j < tensor.v.size(); ++j) {
      const double saved = tensor.v[j];
      tensor.v[j] = saved + epsilon;
      const double up = loss_at(model, item, masked_set, corrupted);
      tensor.v[j] = saved - epsilon;
      const double down = loss_at(model, item, masked_set, corrupted);
      tensor.v[j] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[t][j];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace

double grad_check(PolicyModel& model, const TrainItem& item, std::span<const int> masked_set,
                  double epsilon) {
  return grad_check_impl(model, item, masked_set, epsilon, "");
}

double grad_check_filtered(PolicyModel& model, const TrainItem& item,
                           std::span<const int> masked_set, double epsilon,
                           const std::string& filter) {
  return grad_check_impl(model, item, masked_set, epsilon, filter);
}

uint64_t PolicyModel::checksum() const {
  uint64_t h = fnv1a64("actdiff-model-v1");
  for (const auto& t : params_) {
    h = fnv1a64(t.name, h);
    h = fnv1a64_bytes(t.v.data(), t.v.size() * sizeof(double), h);
  }
  return h;
}

void PolicyModel::save(const std::string& path_stem) const {
  nlohmann::json manifest;
  manifest["format"] = "actdiff-model";
  manifest["version"] = 1;
  manifest["config"] = {
      {"vocab_size", config_.vocab_size},   {"context_vocab", config_.context_vocab},
      {"context_len", config_.context_len}, {"horizon", config_.horizon},
      {"dims", config_.dims},               {"embed_dim", config_.embed_dim},
      {"layers", config_.layers},           {"heads", config_.heads},
      {"ff_dim", config_.ff_dim},
  };
  manifest["parameter_count"] = parameter_count();
  manifest["checksum"] = checksum();

  std::ofstream bin(path_stem + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + path_stem + ".bin");
  nlohmann::json tensors = nlohmann::json::array();
  size_t offset = 0;
  for (const auto& t : params_) {
    bin.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    tensors.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"count", t.v.size()},
                       {"fnv1a64", fnv1a64_bytes(t.v.data(), t.v.size() * sizeof(double))}});
    offset += t.v.size() * sizeof(double);
  }
  manifest["tensors"] = std::move(tensors);
  if (!bin) throw IoError("failed while writing " + path_stem + ".bin");
  bin.close();

  std::ofstream mf(path_stem + ".json", std::ios::binary);
  if (!mf) throw IoError("cannot write " + path_stem + ".json");
  mf << manifest.dump(2) << "\n";
}

PolicyModel PolicyModel::load(const std::string& path_stem) {
  std::ifstream mf(path_stem + ".json", std::ios::binary);
  if (!mf) throw IoError("cannot read " + path_stem + ".json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "actdiff-model" || manifest.value("version", 0) != 1)
    throw IoError("model manifest: unsupported format or version");

  ModelConfig cfg;
  const auto& jc = manifest.at("config");
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.context_vocab = jc.at("context_vocab").get<int>();
  cfg.context_len = jc.at("context_len").get<int>();
  cfg.horizon = jc.at("horizon").get<int>();
  cfg.dims = jc.at("dims").get<int>();
  cfg.embed_dim = jc.at("embed_dim").get<int>();
  cfg.layers = jc.at("layers").get<int>();
  cfg.heads = jc.at("heads").get<int>();
  cfg.ff_dim = jc.at("ff_dim").get<int>();

  PolicyModel model(cfg);
  const auto& jt = manifest.at("tensors");
  if (jt.size() != model.params_.size())
    throw IoError("model manifest: tensor count does not match the architecture");

  std::ifstream bin(path_stem + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot read " + path_stem + ".bin");
  for (size_t i = 0; i < model.params_.size(); ++i) {
    auto& t = model.params_[i];
    const auto& j = jt[i];
    if (j.at("name").get<std::string>() != t.name ||
        j.at("shape").get<std::vector<int>>() != t.shape)
      throw IoError("model manifest: tensor " + t.name + " does not match the architecture");
    bin.seekg(static_cast<std::streamoff>(j.at("offset").get<size_t>()));
    bin.read(reinterpret_cast<char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (!bin) throw IoError("model data: truncated tensor " + t.name);
    if (fnv1a64_bytes(t.v.data(), t.v.size() * sizeof(double)) != j.at("fnv1a64").get<uint64_t>())
      throw IoError("model data: checksum mismatch in tensor " + t.name);
  }
  if (manifest.at("checksum").get<uint64_t>() != model.checksum())
    throw IoError("model data: overall checksum mismatch");
  return model;
}

}  // namespace actdiff

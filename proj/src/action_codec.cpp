#include "actdiff/action_codec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "actdiff/rng.hpp"
#include "json.hpp"

namespace actdiff {

namespace {

constexpr double kGripperInf = std::numeric_limits<double>::infinity();

// Linear-interpolation quantile at fraction q over sorted samples: the value
// at fractional index q * (n - 1).
double sorted_quantile(const std::vector<double>& sorted, double q) {
  const size_t n = sorted.size();
  const double idx = q * static_cast<double>(n - 1);
  const size_t lo = static_cast<size_t>(std::floor(idx));
  const size_t hi = std::min(lo + 1, n - 1);
  const double frac = idx - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

}  // namespace

void TokenizerSpec::validate() const {
  if (dims <= 0 || num_bins < 2)
    throw ValidationError("tokenizer: dims and num_bins must be positive (and >= 2 bins)");
  if (static_cast<int>(edges.size()) != dims || static_cast<int>(centers.size()) != dims)
    throw ValidationError("tokenizer: edges/centers must cover every dimension");
  for (int d = 0; d < dims; ++d) {
    const int k = bins_for(d);
    if (static_cast<int>(edges[d].size()) != k + 1)
      throw ValidationError("tokenizer: dimension " + std::to_string(d) + " needs " +
                            std::to_string(k + 1) + " edges");
    if (static_cast<int>(centers[d].size()) != k)
      throw ValidationError("tokenizer: dimension " + std::to_string(d) + " needs " +
                            std::to_string(k) + " centers");
    for (int i = 0; i < k; ++i) {
      if (!(edges[d][i] < edges[d][i + 1]))
        throw ValidationError("tokenizer: edges must be strictly increasing (dim " +
                              std::to_string(d) + ")");
      if (!(centers[d][i] > edges[d][i] && centers[d][i] < edges[d][i + 1]))
        throw ValidationError("tokenizer: center outside its bin (dim " + std::to_string(d) +
                              ", bin " + std::to_string(i) + ")");
    }
  }
  if (gripper_dim_index >= 0) {
    if (gripper_dim_index >= dims)
      throw ValidationError("tokenizer: gripper dimension index out of range");
    const auto& e = edges[gripper_dim_index];
    if (e.size() != 3 || !(e[1] == 0.5))
      throw ValidationError("tokenizer: gripper dimension must have 2 bins split at 0.5");
  }
}

uint64_t TokenizerSpec::checksum() const {
  uint64_t h = fnv1a64("tokenizer-v1");
  h = fnv1a64_bytes(&num_bins, sizeof num_bins, h);
  h = fnv1a64_bytes(&dims, sizeof dims, h);
  h = fnv1a64_bytes(&gripper_dim_index, sizeof gripper_dim_index, h);
  for (const auto& e : edges) h = fnv1a64_bytes(e.data(), e.size() * sizeof(double), h);
  for (const auto& c : centers) h = fnv1a64_bytes(c.data(), c.size() * sizeof(double), h);
  return h;
}

namespace {

nlohmann::json edge_to_json(double v) {
  if (v == kGripperInf) return "+inf";
  if (v == -kGripperInf) return "-inf";
  return v;
}

double edge_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "+inf") return kGripperInf;
    if (s == "-inf") return -kGripperInf;
    throw IoError("tokenizer file: bad edge value '" + s + "'");
  }
  return j.get<double>();
}

}  // namespace

std::string TokenizerSpec::to_json_string() const {
  nlohmann::json j;
  j["format"] = "actdiff-tokenizer";
  j["version"] = 1;
  j["num_bins"] = num_bins;
  j["dims"] = dims;
  j["gripper_dim_index"] = gripper_dim_index;
  j["fit_scope"] = "dataset";  // percentile anchors are computed over the whole dataset
  nlohmann::json je = nlohmann::json::array();
  nlohmann::json jc = nlohmann::json::array();
  for (int d = 0; d < dims; ++d) {
    nlohmann::json row = nlohmann::json::array();
    for (double v : edges[d]) row.push_back(edge_to_json(v));
    je.push_back(std::move(row));
    jc.push_back(centers[d]);
  }
  j["edges"] = std::move(je);
  j["centers"] = std::move(jc);
  j["checksum"] = checksum();
  return j.dump(2);
}

TokenizerSpec TokenizerSpec::from_json_string(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "actdiff-tokenizer" || j.value("version", 0) != 1)
    throw IoError("tokenizer file: unsupported format or version");
  TokenizerSpec spec;
  spec.num_bins = j.at("num_bins").get<int>();
  spec.dims = j.at("dims").get<int>();
  spec.gripper_dim_index = j.at("gripper_dim_index").get<int>();
  for (const auto& row : j.at("edges")) {
    std::vector<double> e;
    for (const auto& v : row) e.push_back(edge_from_json(v));
    spec.edges.push_back(std::move(e));
  }
  spec.centers = j.at("centers").get<std::vector<std::vector<double>>>();
  spec.validate();
  if (j.contains("checksum") && j["checksum"].get<uint64_t>() != spec.checksum())
    throw IoError("tokenizer file: checksum mismatch");
  return spec;
}

void TokenizerSpec::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << to_json_string() << "\n";
}

TokenizerSpec TokenizerSpec::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_string(ss.str());
}

bool ActionChunk::has_mask() const {
  return std::find(tokens.begin(), tokens.end(), mask_id) != tokens.end();
}

void ActionChunk::validate() const {
  if (static_cast<int>(tokens.size()) != horizon * dims)
    throw ValidationError("chunk: token count must equal horizon * dims");
  for (int t : tokens)
    if (t < 0 || t > mask_id)
      throw ValidationError("chunk: token id " + std::to_string(t) + " outside vocabulary");
}

ActionChunk ActionChunk::fully_masked(int horizon, int dims, int mask_id) {
  ActionChunk c;
  c.horizon = horizon;
  c.dims = dims;
  c.mask_id = mask_id;
  c.tokens.assign(static_cast<size_t>(horizon) * dims, mask_id);
  return c;
}

std::vector<double> fit_quantile_edges(std::vector<double> samples, int num_bins) {
  if (num_bins < 2) throw ValidationError("fit: need at least 2 bins");
  for (double v : samples)
    if (!std::isfinite(v)) throw ValidationError("fit: non-finite sample");
  std::sort(samples.begin(), samples.end());
  size_t distinct = samples.empty() ? 0 : 1;
  for (size_t i = 1; i < samples.size(); ++i)
    if (samples[i] != samples[i - 1]) ++distinct;
  if (distinct < static_cast<size_t>(num_bins))
    throw DegenerateDataError("fit: fewer distinct samples (" + std::to_string(distinct) +
                              ") than bins (" + std::to_string(num_bins) + ")");

  std::vector<double> edges(num_bins + 1);
  for (int i = 0; i <= num_bins; ++i) {
    const double q = 0.01 + (0.99 - 0.01) * static_cast<double>(i) / num_bins;
    edges[i] = sorted_quantile(samples, q);
  }
  for (int i = 0; i < num_bins; ++i)
    if (!(edges[i] < edges[i + 1]))
      throw DegenerateDataError("fit: quantile edges collapse at bin " + std::to_string(i));
  return edges;
}

std::vector<double> uniform_edges(double lo, double hi, int num_bins) {
  if (!(lo < hi)) throw ValidationError("uniform_edges: lo must be < hi");
  std::vector<double> edges(num_bins + 1);
  for (int i = 0; i <= num_bins; ++i)
    edges[i] = lo + (hi - lo) * static_cast<double>(i) / num_bins;
  return edges;
}

namespace {

std::vector<double> midpoints(const std::vector<double>& edges) {
  std::vector<double> centers(edges.size() - 1);
  for (size_t i = 0; i + 1 < edges.size(); ++i)
    centers[i] = 0.5 * (edges[i] + edges[i + 1]);
  return centers;
}

}  // namespace

TokenizerSpec fit_bins(const std::vector<std::vector<double>>& samples, int num_bins,
                       int gripper_dim_index) {
  TokenizerSpec spec;
  spec.num_bins = num_bins;
  spec.dims = static_cast<int>(samples.size());
  spec.gripper_dim_index = gripper_dim_index;
  spec.edges.resize(spec.dims);
  spec.centers.resize(spec.dims);
  for (int d = 0; d < spec.dims; ++d) {
    if (d == gripper_dim_index) {
      for (double v : samples[d])
        if (!std::isfinite(v)) throw ValidationError("fit: non-finite gripper sample");
      spec.edges[d] = {-kGripperInf, 0.5, kGripperInf};
      spec.centers[d] = {0.0, 1.0};
    } else {
      spec.edges[d] = fit_quantile_edges(samples[d], num_bins);
      spec.centers[d] = midpoints(spec.edges[d]);
    }
  }
  spec.validate();
  return spec;
}

int tokenize_value(double value, const TokenizerSpec& spec, int dim) {
  if (!std::isfinite(value))
    throw ValidationError("tokenize: non-finite value in dimension " + std::to_string(dim));
  const auto& edges = spec.edges[dim];
  const int k = spec.bins_for(dim);
  if (value < edges.front()) return 0;
  if (value >= edges.back()) return k - 1;
  // first edge strictly greater than value, minus one, gives the half-open bin
  const auto it = std::upper_bound(edges.begin(), edges.end(), value);
  return static_cast<int>(it - edges.begin()) - 1;
}

double detokenize_value(int token, const TokenizerSpec& spec, int dim) {
  if (token < 0 || token >= spec.num_bins)
    throw ValidationError("detokenize: token " + std::to_string(token) +
                          " outside the vocabulary");
  // The shared vocabulary is num_bins wide at every position, so a dimension
  // with fewer bins (the binary gripper) can legally receive a higher id;
  // ids at or above its bin count clip to the last bin.
  const int k = spec.bins_for(dim);
  return spec.centers[dim][std::min(token, k - 1)];
}

ActionChunk tokenize_chunk(const std::vector<double>& continuous, int horizon,
                           const TokenizerSpec& spec) {
  if (static_cast<int>(continuous.size()) != horizon * spec.dims)
    throw ValidationError("tokenize: matrix shape must be horizon x dims");
  ActionChunk chunk;
  chunk.horizon = horizon;
  chunk.dims = spec.dims;
  chunk.mask_id = spec.mask_id();
  chunk.tokens.resize(continuous.size());
  for (size_t i = 0; i < continuous.size(); ++i)
    chunk.tokens[i] = tokenize_value(continuous[i], spec, static_cast<int>(i) % spec.dims);
  return chunk;
}

std::vector<double> detokenize_chunk(const ActionChunk& chunk, const TokenizerSpec& spec) {
  if (chunk.dims != spec.dims)
    throw ValidationError("detokenize: chunk dims do not match the tokenizer");
  std::vector<double> out(chunk.tokens.size());
  for (size_t i = 0; i < chunk.tokens.size(); ++i) {
    if (chunk.tokens[i] == chunk.mask_id)
      throw IncompleteChunkError("detokenize: chunk still contains the mask symbol at position " +
                                 std::to_string(i));
    out[i] = detokenize_value(chunk.tokens[i], spec, static_cast<int>(i) % spec.dims);
  }
  return out;
}

}  // namespace actdiff

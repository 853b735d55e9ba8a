#include "irmkit/env.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace irm::envgen {

static_assert(std::endian::native == std::endian::little,
              "binary dump format assumes a little-endian host");

namespace {

// Template patterns are global benchmark constants, not per-environment
// randomness.
constexpr uint64_t kTemplateSeed = 0x7e3b17u;

double pair_max(const std::array<double, 2>& w) { return w[0] > w[1] ? w[0] : w[1]; }

}  // namespace

bool ImbalanceWeights::uniform() const {
  auto all_one = [](auto& arr) {
    for (double v : arr)
      if (v != 1.0) return false;
    return true;
  };
  return all_one(group) && all_one(color) && all_one(digit);
}

Mat half_template(int half_dim, int which_half) {
  Rng rng(kTemplateSeed + static_cast<uint64_t>(which_half));
  Mat p(1, half_dim);
  for (int i = 0; i < half_dim; ++i) p(0, i) = rng.bernoulli(0.5) ? 1.0 : -1.0;
  return p;
}

EnvDataset generate_two_bit(const EnvironmentSpec& spec, int feature_dim,
                            double noise_std, const ImbalanceWeights& weights) {
  if (feature_dim % 2 != 0) throw InvalidDim("feature_dim must be even");
  if (feature_dim <= 0) throw InvalidDim("feature_dim must be positive");
  if (!(spec.alpha >= 0.0 && spec.alpha < 0.5)) {
    throw InvalidConfig("alpha must lie in [0, 0.5)");
  }
  if (!(spec.beta >= 0.0 && spec.beta <= 1.0)) {
    throw InvalidConfig("beta must lie in [0, 1]");
  }
  if (noise_std < 0.0) throw InvalidConfig("noise_std must be >= 0");

  const int half = feature_dim / 2;
  const Mat t_inv = half_template(half, 0);
  const Mat t_sp = half_template(half, 1);

  EnvDataset ds;
  ds.spec = spec;
  ds.features.resize(spec.n_samples, feature_dim);
  ds.labels.resize(spec.n_samples, 1);
  ds.invariant_bits.resize(spec.n_samples);
  ds.spurious_bits.resize(spec.n_samples);

  Rng rng(spec.seed);
  const bool resample = !weights.uniform();
  const double max_g = pair_max(weights.group);
  const double max_c = pair_max(weights.color);

  long i = 0;
  while (i < spec.n_samples) {
    // Fixed draw order per accepted sample: g, label flip, color flip, noise.
    const int g = rng.bernoulli(0.5) ? 1 : 0;
    const int y = g ^ (rng.bernoulli(spec.alpha) ? 1 : 0);
    const int c = y ^ (rng.bernoulli(spec.beta) ? 1 : 0);
    if (resample) {
      // Rejection keeps the conditional structure intact while reweighting
      // the marginals of g and c.
      const double accept = (weights.group[g] / max_g) * (weights.color[c] / max_c);
      if (!rng.bernoulli(accept)) continue;
    }
    const double sg = g ? 1.0 : -1.0;
    const double sc = c ? 1.0 : -1.0;
    for (int j = 0; j < half; ++j) {
      ds.features(i, j) = sg * t_inv(0, j) + noise_std * rng.normal();
    }
    for (int j = 0; j < half; ++j) {
      ds.features(i, half + j) = sc * t_sp(0, j) + noise_std * rng.normal();
    }
    ds.labels(i, 0) = static_cast<double>(y);
    ds.invariant_bits[i] = static_cast<uint8_t>(g);
    ds.spurious_bits[i] = static_cast<uint8_t>(c);
    ++i;
  }
  return ds;
}

std::vector<EnvDataset> make_training_envs(
    const std::vector<std::pair<double, double>>& alphas_betas, long n_per_env,
    uint64_t seed, int feature_dim, double noise_std, bool allow_mixed_alpha) {
  if (alphas_betas.empty()) throw NoEnvironments("no training environments given");
  if (!allow_mixed_alpha) {
    for (const auto& [a, b] : alphas_betas) {
      if (a != alphas_betas.front().first) {
        throw InvalidConfig("training environments have mixed alpha; pass allow_mixed_alpha to permit");
      }
    }
  }
  std::vector<EnvDataset> out;
  out.reserve(alphas_betas.size());
  for (size_t e = 0; e < alphas_betas.size(); ++e) {
    EnvironmentSpec spec;
    spec.alpha = alphas_betas[e].first;
    spec.beta = alphas_betas[e].second;
    spec.n_samples = n_per_env;
    spec.seed = seed + e;
    out.push_back(generate_two_bit(spec, feature_dim, noise_std));
  }
  return out;
}

std::vector<double> default_test_betas() {
  std::vector<double> betas;
  for (int i = 1; i <= 19; ++i) betas.push_back(0.05 * i);
  return betas;
}

std::vector<EnvDataset> make_test_grid(double alpha,
                                       const std::vector<double>& betas,
                                       long n_per_env, uint64_t seed,
                                       int feature_dim, double noise_std,
                                       std::span<const uint64_t> train_seeds) {
  for (size_t i = 0; i < betas.size(); ++i) {
    if (betas[i] < 0.0 || betas[i] > 1.0) throw InvalidConfig("test beta outside [0,1]");
    if (i > 0 && betas[i] <= betas[i - 1]) {
      throw InvalidConfig("test betas must be strictly increasing");
    }
  }
  std::set<uint64_t> train(train_seeds.begin(), train_seeds.end());
  std::vector<EnvDataset> out;
  out.reserve(betas.size());
  for (size_t i = 0; i < betas.size(); ++i) {
    EnvironmentSpec spec;
    spec.alpha = alpha;
    spec.beta = betas[i];
    spec.n_samples = n_per_env;
    spec.seed = seed + i;
    if (train.count(spec.seed)) {
      throw InvalidConfig("test-grid seed collides with a training seed");
    }
    out.push_back(generate_two_bit(spec, feature_dim, noise_std));
  }
  return out;
}

Batcher::Batcher(const EnvDataset& ds, long batch_size, uint64_t epoch_seed)
    : ds_(&ds), batch_size_(batch_size) {
  if (batch_size < 1 || batch_size > ds.n()) {
    throw InvalidBatch("batch_size must lie in [1, n]");
  }
  perm_.resize(ds.n());
  std::iota(perm_.begin(), perm_.end(), 0);
  Rng rng(epoch_seed);
  rng.shuffle(perm_);
}

long Batcher::count() const {
  return (static_cast<long>(perm_.size()) + batch_size_ - 1) / batch_size_;
}

Batcher::Batch Batcher::get(long k) const {
  const long begin = k * batch_size_;
  const long end = std::min<long>(begin + batch_size_, perm_.size());
  Batch b;
  b.x.resize(end - begin, ds_->dim());
  b.y.resize(end - begin, 1);
  for (long i = begin; i < end; ++i) {
    b.x.row(i - begin) = ds_->features.row(perm_[i]);
    b.y(i - begin, 0) = ds_->labels(perm_[i], 0);
  }
  return b;
}

void save_binary(const EnvDataset& ds, const std::string& path) {
  nlohmann::json meta{
      {"rows", ds.n()},
      {"cols", ds.dim()},
      {"alpha", ds.spec.alpha},
      {"beta", ds.spec.beta},
      {"n_samples", ds.spec.n_samples},
      {"seed", ds.spec.seed},
      {"source", ds.spec.source == SourceKind::SyntheticTwoBit ? "synthetic" : "idx"},
  };
  const std::string header = meta.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  const char magic[8] = {'I', 'R', 'M', 'E', 'N', 'V', 'D', '\0'};
  f.write(magic, 8);
  const uint64_t len = header.size();
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(header.data(), header.size());
  f.write(reinterpret_cast<const char*>(ds.features.data()),
          sizeof(double) * ds.features.size());
  f.write(reinterpret_cast<const char*>(ds.labels.data()),
          sizeof(double) * ds.labels.size());
  f.write(reinterpret_cast<const char*>(ds.invariant_bits.data()), ds.n());
  f.write(reinterpret_cast<const char*>(ds.spurious_bits.data()), ds.n());
}

EnvDataset load_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::memcmp(magic, "IRMENVD\0", 8) != 0) throw FormatError("bad dataset magic");
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 8);
  std::string header(len, '\0');
  f.read(header.data(), len);
  const auto meta = nlohmann::json::parse(header);

  EnvDataset ds;
  const long rows = meta.at("rows");
  const long cols = meta.at("cols");
  ds.spec.alpha = meta.at("alpha");
  ds.spec.beta = meta.at("beta");
  ds.spec.n_samples = meta.at("n_samples");
  ds.spec.seed = meta.at("seed");
  ds.spec.source = meta.at("source") == "synthetic" ? SourceKind::SyntheticTwoBit
                                                    : SourceKind::ColorizedIdx;
  ds.features.resize(rows, cols);
  ds.labels.resize(rows, 1);
  ds.invariant_bits.resize(rows);
  ds.spurious_bits.resize(rows);
  f.read(reinterpret_cast<char*>(ds.features.data()), sizeof(double) * rows * cols);
  f.read(reinterpret_cast<char*>(ds.labels.data()), sizeof(double) * rows);
  f.read(reinterpret_cast<char*>(ds.invariant_bits.data()), rows);
  f.read(reinterpret_cast<char*>(ds.spurious_bits.data()), rows);
  if (!f) throw FormatError("truncated dataset file " + path);
  return ds;
}

double probe_accuracy(const EnvDataset& ds, ProbeHalf half, ProbeTarget target) {
  const int d = static_cast<int>(ds.dim());
  if (d % 2 != 0) throw InvalidDim("probe requires an even feature dimension");
  const int h = d / 2;
  const Mat pattern = half_template(h, half == ProbeHalf::Invariant ? 0 : 1);
  const int offset = half == ProbeHalf::Invariant ? 0 : h;

  long correct = 0;
  for (long i = 0; i < ds.n(); ++i) {
    double logit = 0.0;
    for (int j = 0; j < h; ++j) logit += ds.features(i, offset + j) * pattern(0, j);
    const int pred = logit > 0.0 ? 1 : 0;  // ties to class 0
    const int truth = target == ProbeTarget::Labels
                          ? static_cast<int>(ds.labels(i, 0))
                          : static_cast<int>(ds.invariant_bits[i]);
    if (pred == truth) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.n());
}

}  // namespace irm::envgen

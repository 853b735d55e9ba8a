#pragma once

#include "irmkit/types.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace irm::envgen {

enum class SourceKind { SyntheticTwoBit, ColorizedIdx };

/// Parametric two-bit environment: alpha is the label-noise probability,
/// beta the probability that the spurious attribute disagrees with the
/// noisy label.
struct EnvironmentSpec {
  double alpha = 0.25;
  double beta = 0.1;
  long n_samples = 0;
  uint64_t seed = 0;
  SourceKind source = SourceKind::SyntheticTwoBit;
  std::string images_path;
  std::string labels_path;
};

/// Optional covariate-shift knobs: resampling weights on the group bit, the
/// spurious bit, and (IDX path only) the digit identity. Uniform by default.
struct ImbalanceWeights {
  std::array<double, 2> group{1.0, 1.0};
  std::array<double, 2> color{1.0, 1.0};
  std::array<double, 10> digit{1, 1, 1, 1, 1, 1, 1, 1, 1, 1};
  bool uniform() const;
};

struct EnvDataset {
  Mat features;             // n×d
  Mat labels;               // n×1, entries 0/1
  EnvironmentSpec spec;
  std::vector<uint8_t> invariant_bits;
  std::vector<uint8_t> spurious_bits;

  long n() const { return features.rows(); }
  long dim() const { return features.cols(); }
};

/// The fixed ±1 pattern used for one feature half. Drawn once from the
/// constant template seed, so every environment of a given dimensionality
/// shares the same geometry and the Bayes-optimal invariant accuracy is
/// exactly 1−alpha as noise_std → 0.
Mat half_template(int half_dim, int which_half);

/// Synthetic two-bit sampler: g ~ Bernoulli(1/2), y = g xor Bernoulli(alpha),
/// c = y xor Bernoulli(beta), feature = [(2g−1)·T0, (2c−1)·T1] + N(0, noise_std²).
EnvDataset generate_two_bit(const EnvironmentSpec& spec, int feature_dim,
                            double noise_std,
                            const ImbalanceWeights& weights = {});

/// One dataset per (alpha, beta) pair; seeds derived as seed + env index.
std::vector<EnvDataset> make_training_envs(
    const std::vector<std::pair<double, double>>& alphas_betas, long n_per_env,
    uint64_t seed, int feature_dim, double noise_std,
    bool allow_mixed_alpha = false);

/// The 19-point grid {0.05, 0.10, ..., 0.95}.
std::vector<double> default_test_betas();

/// Fresh datasets over the beta grid; seeds seed + index, checked disjoint
/// from the given training seeds.
std::vector<EnvDataset> make_test_grid(double alpha,
                                       const std::vector<double>& betas,
                                       long n_per_env, uint64_t seed,
                                       int feature_dim, double noise_std,
                                       std::span<const uint64_t> train_seeds = {});

/// IDX-backed colorized digits: group bit from digit<5, two stacked 28×28
/// channels (d = 1568), the spurious bit picks which channel holds the
/// image. With grayscale both channels hold the image and color carries no
/// information.
EnvDataset load_idx_colorized(const std::string& images_path,
                              const std::string& labels_path,
                              const EnvironmentSpec& spec,
                              bool grayscale = false,
                              const ImbalanceWeights& weights = {});

/// Deterministic mini-batch view: a fresh per-epoch permutation keyed by
/// epoch_seed, short final batch kept, batch_size == n reproduces full-batch
/// gradient descent.
class Batcher {
 public:
  struct Batch {
    Mat x;
    Mat y;
  };

  Batcher(const EnvDataset& ds, long batch_size, uint64_t epoch_seed);
  long count() const;
  Batch get(long k) const;

 private:
  const EnvDataset* ds_;
  long batch_size_;
  std::vector<int32_t> perm_;
};

void save_binary(const EnvDataset& ds, const std::string& path);
EnvDataset load_binary(const std::string& path);

// Hand-coded linear probes over one feature half; diagnostics for the
// benchmark itself rather than any learned model.
enum class ProbeHalf { Invariant, Spurious };
enum class ProbeTarget { Labels, GroupBit };
double probe_accuracy(const EnvDataset& ds, ProbeHalf half, ProbeTarget target);

}  // namespace irm::envgen

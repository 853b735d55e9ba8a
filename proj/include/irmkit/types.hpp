#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace irm {

/// Dense row-major f64 matrix. Vectors are n×1 (column) or 1×n (row),
/// scalars 1×1. Row-major so the flat buffer matches sample-major layouts
/// and the little-endian f64 dump format directly.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Mat scalar_mat(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return m;
}

// ---------------------------------------------------------------------------
// Errors

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FiniteViolation : std::runtime_error {
  int node_id;
  explicit FiniteViolation(int node, const std::string& what)
      : std::runtime_error(what), node_id(node) {}
};

struct NotALeaf : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedSecondOrder : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidDim : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidBatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NoEnvironments : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct HeadModeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BadEnvIndex : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidConfig : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  long step;
  DivergenceError(long step_index, const std::string& what)
      : std::runtime_error(what), step(step_index) {}
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LengthMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Rng
//
// mt19937_64 with hand-rolled transforms so draws do not depend on the
// standard library's unspecified distribution algorithms. Box-Muller keeps
// no cached spare, so every normal() consumes exactly two raw draws.

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1]; safe as a log() argument.
  double uniform01_open() {
    return (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  double normal() {
    const double u1 = uniform01_open();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n).
  int below(int n) { return static_cast<int>(gen_() % static_cast<uint64_t>(n)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[below(i + 1)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace irm

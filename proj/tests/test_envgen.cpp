#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "irmkit/env.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

using namespace irm;
using namespace irm::envgen;

namespace {

EnvironmentSpec spec_of(double alpha, double beta, long n, uint64_t seed) {
  EnvironmentSpec s;
  s.alpha = alpha;
  s.beta = beta;
  s.n_samples = n;
  s.seed = seed;
  return s;
}

double disagree_rate(const EnvDataset& ds) {
  long d = 0;
  for (long i = 0; i < ds.n(); ++i) {
    if (ds.spurious_bits[i] != static_cast<int>(ds.labels(i, 0))) ++d;
  }
  return static_cast<double>(d) / ds.n();
}

double label_noise_rate(const EnvDataset& ds) {
  long d = 0;
  for (long i = 0; i < ds.n(); ++i) {
    if (ds.invariant_bits[i] != static_cast<int>(ds.labels(i, 0))) ++d;
  }
  return static_cast<double>(d) / ds.n();
}

void write_be32(std::ostream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<char*>(b), 4);
}

/// Tiny synthetic IDX pair: `n` 4x4 images, pixel values = digit, digits
/// cycling 0..9.
void write_idx_pair(const std::string& images, const std::string& labels, int n,
                    uint32_t images_magic = 0x803, uint32_t labels_magic = 0x801,
                    int label_count = -1) {
  {
    std::ofstream f(images, std::ios::binary);
    write_be32(f, images_magic);
    write_be32(f, n);
    write_be32(f, 4);
    write_be32(f, 4);
    for (int i = 0; i < n; ++i) {
      unsigned char px[16];
      std::memset(px, static_cast<unsigned char>((i % 10) * 20 + 10), 16);
      f.write(reinterpret_cast<char*>(px), 16);
    }
  }
  {
    std::ofstream f(labels, std::ios::binary);
    write_be32(f, labels_magic);
    write_be32(f, label_count < 0 ? n : label_count);
    for (int i = 0; i < n; ++i) {
      char d = static_cast<char>(i % 10);
      f.write(&d, 1);
    }
  }
}

}  // namespace

TEST_CASE("beta=0 makes the spurious bit equal the noisy label everywhere") {
  auto ds = generate_two_bit(spec_of(0.25, 0.0, 2000, 5), 8, 0.1);
  for (long i = 0; i < ds.n(); ++i) {
    CHECK(ds.spurious_bits[i] == static_cast<int>(ds.labels(i, 0)));
  }
}

TEST_CASE("beta=0.5 decorrelates the spurious bit from the label") {
  auto ds = generate_two_bit(spec_of(0.25, 0.5, 100000, 11), 8, 0.1);
  double mean_c = 0, mean_y = 0;
  for (long i = 0; i < ds.n(); ++i) {
    mean_c += ds.spurious_bits[i];
    mean_y += ds.labels(i, 0);
  }
  mean_c /= ds.n();
  mean_y /= ds.n();
  double cov = 0, var_c = 0, var_y = 0;
  for (long i = 0; i < ds.n(); ++i) {
    const double dc = ds.spurious_bits[i] - mean_c;
    const double dy = ds.labels(i, 0) - mean_y;
    cov += dc * dy;
    var_c += dc * dc;
    var_y += dy * dy;
  }
  const double corr = cov / std::sqrt(var_c * var_y);
  CHECK(std::abs(corr) <= 0.02);
}

TEST_CASE("empirical rates stay within 3 sigma of alpha and beta") {
  const long n = 100000;
  for (auto [alpha, beta] : {std::pair{0.25, 0.1}, {0.25, 0.2}, {0.1, 0.25}, {0.0, 0.9}}) {
    auto ds = generate_two_bit(spec_of(alpha, beta, n, 42), 8, 0.1);
    const double sd_b = std::sqrt(beta * (1 - beta) / n);
    const double sd_a = std::sqrt(alpha * (1 - alpha) / n);
    CHECK(std::abs(disagree_rate(ds) - beta) <= 3 * sd_b + 1e-12);
    CHECK(std::abs(label_noise_rate(ds) - alpha) <= 3 * sd_a + 1e-12);
  }
}

TEST_CASE("same spec and seed reproduce the dataset bitwise") {
  auto a = generate_two_bit(spec_of(0.25, 0.1, 500, 77), 8, 0.1);
  auto b = generate_two_bit(spec_of(0.25, 0.1, 500, 77), 8, 0.1);
  CHECK(std::memcmp(a.features.data(), b.features.data(),
                    sizeof(double) * a.features.size()) == 0);
  CHECK(a.invariant_bits == b.invariant_bits);
  auto c = generate_two_bit(spec_of(0.25, 0.1, 500, 78), 8, 0.1);
  CHECK(std::memcmp(a.features.data(), c.features.data(),
                    sizeof(double) * a.features.size()) != 0);
}

TEST_CASE("oracle separation: probes recover 1-alpha and 1-beta") {
  for (auto [alpha, beta] : {std::pair{0.25, 0.1}, {0.25, 0.2}, {0.1, 0.25}}) {
    auto ds = generate_two_bit(spec_of(alpha, beta, 100000, 31), 8, 0.1);
    CHECK(probe_accuracy(ds, ProbeHalf::Invariant, ProbeTarget::Labels) ==
          doctest::Approx(1 - alpha).epsilon(0.013));
    CHECK(probe_accuracy(ds, ProbeHalf::Spurious, ProbeTarget::Labels) ==
          doctest::Approx(1 - beta).epsilon(0.013));
    // Agreement with the clean group bit follows the 4-cell closed form
    // (1-a)(1-b) + a*b.
    const double agree = (1 - alpha) * (1 - beta) + alpha * beta;
    CHECK(probe_accuracy(ds, ProbeHalf::Spurious, ProbeTarget::GroupBit) ==
          doctest::Approx(agree).epsilon(0.015));
  }
}

TEST_CASE("make_training_envs: paper pairs and validation") {
  auto two = make_training_envs({{0.25, 0.1}, {0.25, 0.2}}, 50000, 100, 8, 0.1);
  REQUIRE(two.size() == 2);
  CHECK(disagree_rate(two[0]) == doctest::Approx(0.1).epsilon(0.05));
  CHECK(disagree_rate(two[1]) == doctest::Approx(0.2).epsilon(0.05));
  CHECK(two[0].spec.seed == 100);
  CHECK(two[1].spec.seed == 101);

  auto three = make_training_envs({{0.25, 0.1}, {0.25, 0.15}, {0.25, 0.2}}, 1000, 9, 8, 0.1);
  CHECK(three.size() == 3);

  auto fail_pair = make_training_envs({{0.1, 0.2}, {0.1, 0.25}}, 1000, 9, 8, 0.1);
  CHECK(fail_pair.size() == 2);

  CHECK_THROWS_AS(make_training_envs({}, 10, 0, 8, 0.1), NoEnvironments);
  CHECK_THROWS_AS(make_training_envs({{0.1, 0.2}, {0.2, 0.2}}, 10, 0, 8, 0.1),
                  InvalidConfig);
  CHECK(make_training_envs({{0.1, 0.2}, {0.2, 0.2}}, 10, 0, 8, 0.1, true).size() == 2);
}

TEST_CASE("make_test_grid: default 19 environments, disjoint seeds") {
  CHECK(default_test_betas().size() == 19);
  auto grid = make_test_grid(0.25, default_test_betas(), 100, 1000, 8, 0.1);
  CHECK(grid.size() == 19);
  CHECK(grid.front().spec.beta == doctest::Approx(0.05));
  CHECK(grid.back().spec.beta == doctest::Approx(0.95));

  auto single = make_test_grid(0.25, {0.9}, 100, 1000, 8, 0.1);
  CHECK(single.size() == 1);

  const uint64_t train_seeds[] = {1005};
  CHECK_THROWS_AS(make_test_grid(0.25, default_test_betas(), 100, 1000, 8, 0.1,
                                 std::span<const uint64_t>(train_seeds, 1)),
                  InvalidConfig);
  CHECK_THROWS_AS(make_test_grid(0.25, {0.2, 0.2}, 10, 0, 8, 0.1), InvalidConfig);
  CHECK_THROWS_AS(make_test_grid(0.25, {0.2, 1.5}, 10, 0, 8, 0.1), InvalidConfig);
}

TEST_CASE("beta=0.5 env: spurious-only probe sits at chance") {
  auto ds = generate_two_bit(spec_of(0.25, 0.5, 100000, 3), 8, 0.1);
  CHECK(probe_accuracy(ds, ProbeHalf::Spurious, ProbeTarget::Labels) ==
        doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("batches: sizes, coverage, determinism") {
  auto ds = generate_two_bit(spec_of(0.25, 0.1, 10, 4), 8, 0.1);
  Batcher b(ds, 3, 99);
  REQUIRE(b.count() == 4);
  CHECK(b.get(0).x.rows() == 3);
  CHECK(b.get(1).x.rows() == 3);
  CHECK(b.get(2).x.rows() == 3);
  CHECK(b.get(3).x.rows() == 1);

  // Every sample appears exactly once per epoch.
  std::vector<int> seen;
  for (long k = 0; k < b.count(); ++k) {
    const auto batch = b.get(k);
    for (long i = 0; i < batch.x.rows(); ++i) {
      for (long r = 0; r < ds.n(); ++r) {
        if ((batch.x.row(i) - ds.features.row(r)).cwiseAbs().maxCoeff() == 0.0) {
          seen.push_back(static_cast<int>(r));
        }
      }
    }
  }
  std::sort(seen.begin(), seen.end());
  CHECK(seen.size() == 10);
  CHECK(std::unique(seen.begin(), seen.end()) == seen.end());

  Batcher b2(ds, 3, 99);
  CHECK(std::memcmp(b.get(1).x.data(), b2.get(1).x.data(),
                    sizeof(double) * b.get(1).x.size()) == 0);
  Batcher b3(ds, 3, 100);
  bool same = true;
  for (long k = 0; k < 3 && same; ++k) {
    same = std::memcmp(b.get(k).x.data(), b3.get(k).x.data(),
                       sizeof(double) * b.get(k).x.size()) == 0;
  }
  CHECK_FALSE(same);

  Batcher full(ds, 10, 1);
  CHECK(full.count() == 1);
  CHECK_THROWS_AS(Batcher(ds, 0, 1), InvalidBatch);
  CHECK_THROWS_AS(Batcher(ds, 11, 1), InvalidBatch);
}

TEST_CASE("binary dump round-trips bitwise") {
  auto ds = generate_two_bit(spec_of(0.25, 0.2, 64, 8), 8, 0.1);
  const std::string path = "/tmp/irmkit_env_dump.bin";
  save_binary(ds, path);
  auto back = load_binary(path);
  CHECK(back.n() == ds.n());
  CHECK(back.spec.beta == ds.spec.beta);
  CHECK(std::memcmp(back.features.data(), ds.features.data(),
                    sizeof(double) * ds.features.size()) == 0);
  CHECK(std::memcmp(back.labels.data(), ds.labels.data(),
                    sizeof(double) * ds.labels.size()) == 0);
  CHECK(back.invariant_bits == ds.invariant_bits);
  CHECK(back.spurious_bits == ds.spurious_bits);
  std::remove(path.c_str());
}

TEST_CASE("invalid dimensions and parameters are rejected") {
  CHECK_THROWS_AS(generate_two_bit(spec_of(0.25, 0.1, 10, 0), 7, 0.1), InvalidDim);
  CHECK_THROWS_AS(generate_two_bit(spec_of(0.5, 0.1, 10, 0), 8, 0.1), InvalidConfig);
  CHECK_THROWS_AS(generate_two_bit(spec_of(0.25, 1.1, 10, 0), 8, 0.1), InvalidConfig);
  CHECK_THROWS_AS(generate_two_bit(spec_of(0.25, 0.1, 10, 0), 8, -0.1), InvalidConfig);
}

TEST_CASE("imbalance weights skew the marginals") {
  ImbalanceWeights w;
  w.group = {1.0, 3.0};
  auto ds = generate_two_bit(spec_of(0.25, 0.1, 40000, 21), 8, 0.1, w);
  double g1 = 0;
  for (long i = 0; i < ds.n(); ++i) g1 += ds.invariant_bits[i];
  CHECK(g1 / ds.n() == doctest::Approx(0.75).epsilon(0.03));
}

TEST_CASE("idx loader: colorization semantics") {
  const std::string imgs = "/tmp/irmkit_test_images.idx";
  const std::string lbls = "/tmp/irmkit_test_labels.idx";
  write_idx_pair(imgs, lbls, 200);

  auto ds = load_idx_colorized(imgs, lbls, spec_of(0.25, 0.0, 100, 7));
  CHECK(ds.dim() == 32);  // two 4x4 channels
  for (long i = 0; i < ds.n(); ++i) {
    const int y = static_cast<int>(ds.labels(i, 0));
    CHECK(ds.spurious_bits[i] == y);  // beta = 0
    const double ch0 = ds.features.row(i).head(16).sum();
    const double ch1 = ds.features.row(i).tail(16).sum();
    if (ds.spurious_bits[i] == 0) {
      CHECK(ch0 > 0.0);
      CHECK(ch1 == 0.0);
    } else {
      CHECK(ch1 > 0.0);
      CHECK(ch0 == 0.0);
    }
  }
  // Group bit comes from digit < 5 vs >= 5; with cycling digits half each.
  double g = 0;
  for (long i = 0; i < ds.n(); ++i) g += ds.invariant_bits[i];
  CHECK(g / ds.n() == doctest::Approx(0.5).epsilon(0.05));

  auto gray = load_idx_colorized(imgs, lbls, spec_of(0.25, 0.1, 100, 7), true);
  for (long i = 0; i < gray.n(); ++i) {
    CHECK((gray.features.row(i).head(16) - gray.features.row(i).tail(16))
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
  std::remove(imgs.c_str());
  std::remove(lbls.c_str());
}

TEST_CASE("idx loader: format errors") {
  const std::string imgs = "/tmp/irmkit_bad_images.idx";
  const std::string lbls = "/tmp/irmkit_bad_labels.idx";

  write_idx_pair(imgs, lbls, 10, 0x804);
  CHECK_THROWS_AS(load_idx_colorized(imgs, lbls, spec_of(0.25, 0.1, 5, 0)), FormatError);

  write_idx_pair(imgs, lbls, 10, 0x803, 0x802);
  CHECK_THROWS_AS(load_idx_colorized(imgs, lbls, spec_of(0.25, 0.1, 5, 0)), FormatError);

  write_idx_pair(imgs, lbls, 10, 0x803, 0x801, 9);
  CHECK_THROWS_AS(load_idx_colorized(imgs, lbls, spec_of(0.25, 0.1, 5, 0)),
                  LengthMismatch);

  write_idx_pair(imgs, lbls, 10);
  CHECK_THROWS_AS(load_idx_colorized(imgs, lbls, spec_of(0.25, 0.1, 11, 0)),
                  LengthMismatch);
  std::remove(imgs.c_str());
  std::remove(lbls.c_str());
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "irmkit/finite_diff.hpp"
#include "irmkit/ops.hpp"

#include <cmath>
#include <cstring>

using namespace irm;
using namespace irm::ad;

namespace {

Mat filled(int r, int c, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

Mat binary(int r, int c, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return m;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST_CASE("forward records primitives and reproduces direct evaluation") {
  Tape t;
  Var x = t.leaf(scalar_mat(3.0));
  Var y = square(x);
  CHECK(y.scalar() == 9.0);
  CHECK(t.size() == 2);  // one leaf, one primitive

  Mat v(3, 1);
  v << 1, 2, 3;
  Var s = sum(t.leaf(v));
  CHECK(s.scalar() == 6.0);

  Var logit = t.leaf(scalar_mat(0.0));
  Var label = t.constant(scalar_mat(1.0));
  Var loss = bce_with_logits(logit, label);
  CHECK(loss.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK(t.replay_matches());
}

TEST_CASE("non-finite intermediate raises FiniteViolation with node id") {
  Tape t;
  Var x = t.leaf(scalar_mat(-1.0));
  CHECK_THROWS_AS(ad::log(x), FiniteViolation);
  try {
    ad::log(t.leaf(scalar_mat(-2.0)));
    FAIL("expected FiniteViolation");
  } catch (const FiniteViolation& e) {
    CHECK(e.node_id == static_cast<int>(t.size()));
  }
}

TEST_CASE("grad: basics") {
  Tape t;
  Var x = t.leaf(scalar_mat(3.0));
  Var y = square(x);
  auto g = grad_values(y, {x});
  CHECK(g[0](0, 0) == 6.0);

  Mat v(2, 1);
  v << 5.0, -7.0;
  Var a = t.leaf(v);
  auto gs = grad_values(sum(a), {a});
  CHECK(gs[0](0, 0) == 1.0);
  CHECK(gs[0](1, 0) == 1.0);
}

TEST_CASE("grad wrt tensor not on tape raises NotALeaf") {
  Tape t, other;
  Var x = t.leaf(scalar_mat(1.0));
  Var y = square(x);
  Var foreign = other.leaf(scalar_mat(1.0));
  std::vector<Var> wrt{foreign};
  CHECK_THROWS_AS(grad(y, std::span<const Var>(wrt), false), NotALeaf);
  std::vector<Var> detached{Var{}};
  CHECK_THROWS_AS(grad(y, std::span<const Var>(detached), false), NotALeaf);
}

TEST_CASE("second order: gradient of a squared gradient norm") {
  // l(w, theta) = (w*theta)^2; P = ||dl/dw||^2 = 4 w^2 theta^4.
  // At w=1, theta=2: dl/dw = 8, P = 64, dP/dtheta = 16 w^2 theta^3 = 128,
  // dP/dw = 8 w theta^4 = 128.
  Tape t;
  Var w = t.leaf(scalar_mat(1.0));
  Var th = t.leaf(scalar_mat(2.0));
  Var loss = square(mul(w, th));
  auto gw = grad(loss, {w}, true);
  CHECK(gw[0].scalar() == 8.0);
  Var pen = squared_norm(gw[0]);
  CHECK(pen.scalar() == 64.0);
  auto gp = grad_values(pen, {th, w});
  CHECK(gp[0](0, 0) == doctest::Approx(128.0).epsilon(1e-12));
  CHECK(gp[1](0, 0) == doctest::Approx(128.0).epsilon(1e-12));
}

TEST_CASE("second order: polynomial and logistic against symbolic forms") {
  for (double x0 : {-1.3, -0.2, 0.7, 2.0}) {
    Tape t;
    Var x = t.leaf(scalar_mat(x0));
    Var cube = mul(square(x), x);
    auto g1 = grad(cube, {x}, true);
    CHECK(g1[0].scalar() == doctest::Approx(3.0 * x0 * x0).epsilon(1e-12));
    auto g2 = grad_values(g1[0], {x});
    CHECK(g2[0](0, 0) == doctest::Approx(6.0 * x0).epsilon(1e-4));

    Tape t2;
    Var z = t2.leaf(scalar_mat(x0));
    Var s = sigmoid(z);
    const double sv = 1.0 / (1.0 + std::exp(-x0));
    auto h1 = grad(s, {z}, true);
    CHECK(h1[0].scalar() == doctest::Approx(sv * (1 - sv)).epsilon(1e-10));
    auto h2 = grad_values(h1[0], {z});
    CHECK(h2[0](0, 0) == doctest::Approx(sv * (1 - sv) * (1 - 2 * sv)).epsilon(1e-4));
  }
}

TEST_CASE("third order chains stay differentiable") {
  // f = x^4: f' = 4x^3, f'' = 12x^2, f''' = 24x.
  Tape t;
  Var x = t.leaf(scalar_mat(1.5));
  Var f = square(square(x));
  auto g1 = grad(f, {x}, true);
  auto g2 = grad(g1[0], {x}, true);
  auto g3 = grad_values(g2[0], {x});
  CHECK(g1[0].scalar() == doctest::Approx(4 * std::pow(1.5, 3)).epsilon(1e-12));
  CHECK(g2[0].scalar() == doctest::Approx(12 * 1.5 * 1.5).epsilon(1e-12));
  CHECK(g3[0](0, 0) == doctest::Approx(24 * 1.5).epsilon(1e-12));
}

TEST_CASE("grad without create_graph is detached") {
  Tape t;
  Var x = t.leaf(scalar_mat(2.0));
  Var y = square(square(x));
  auto g = grad(y, {x}, false);
  CHECK(g[0].scalar() == doctest::Approx(32.0));
  // Differentiating through a detached gradient sees a constant.
  auto gg = grad_values(sum(g[0]), {x});
  CHECK(gg[0](0, 0) == 0.0);
}

TEST_CASE("grad_values truncates backward scratch off the tape") {
  Tape t;
  Var x = t.leaf(scalar_mat(2.0));
  Var y = square(x);
  const size_t before = t.size();
  auto g = grad_values(y, {x});
  CHECK(g[0](0, 0) == 4.0);
  CHECK(t.size() == before);
}

TEST_CASE("finite_diff_check examples") {
  GraphFn cube = [](Tape&, std::span<const Var> in) {
    return sum(mul(square(in[0]), in[0]));
  };
  CHECK(finite_diff_check(cube, {scalar_mat(2.0)}, 1e-5) <= 1e-6);

  GraphFn relu_fn = [](Tape&, std::span<const Var> in) { return sum(relu(in[0])); };
  CHECK(finite_diff_check(relu_fn, {scalar_mat(1.0)}, 1e-6) <= 1e-8);
  // x = 0 is the subgradient point: excluded from finite-difference
  // comparison; the convention grad(relu)(0) = 0 is asserted directly.
  Tape t;
  Var x = t.leaf(scalar_mat(0.0));
  auto g = grad_values(sum(relu(x)), {x});
  CHECK(g[0](0, 0) == 0.0);
}

TEST_CASE("gradient correctness: every primitive vs central differences") {
  // Each output element is weighted by a random constant so mixed-up
  // backward rules cannot cancel inside the reduction.
  Rng rng(20240811);
  constexpr double kTol = 1e-4;
  const int kTrials = 100;

  for (int trial = 0; trial < kTrials; ++trial) {
    const Mat w23 = filled(2, 3, rng);
    const Mat w22 = filled(2, 2, rng);
    const Mat w33 = filled(3, 3, rng);
    const Mat labels = binary(2, 3, rng);

    auto weighted = [](Tape& t, Var v, const Mat& w) {
      return sum(mul(t.constant(w), v));
    };

    struct Case {
      const char* name;
      GraphFn fn;
      std::vector<Mat> inputs;
    };
    std::vector<Case> cases;
    cases.push_back({"add",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, add(in[0], in[1]), w23);
                     },
                     {filled(2, 3, rng), filled(2, 3, rng)}});
    cases.push_back({"add_rowvec",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, add_rowvec(in[0], in[1]), w23);
                     },
                     {filled(2, 3, rng), filled(1, 3, rng)}});
    cases.push_back({"sub",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, sub(in[0], in[1]), w23);
                     },
                     {filled(2, 3, rng), filled(2, 3, rng)}});
    cases.push_back({"mul",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, mul(in[0], in[1]), w23);
                     },
                     {filled(2, 3, rng), filled(2, 3, rng)}});
    cases.push_back({"divide",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, divide(in[0], in[1]), w23);
                     },
                     {filled(2, 3, rng), filled(2, 3, rng, 0.5, 2.0)}});
    cases.push_back({"scalar_mul",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, scalar_mul(-1.7, in[0]), w23);
                     },
                     {filled(2, 3, rng)}});
    cases.push_back({"scale",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, scale(in[0], in[1]), w23);
                     },
                     {filled(2, 3, rng), filled(1, 1, rng)}});
    cases.push_back({"matmul",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, matmul(in[0], in[1]), w22);
                     },
                     {filled(2, 3, rng), filled(3, 2, rng)}});
    cases.push_back({"matmul_tn",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, matmul_tn(in[0], in[1]), w22);
                     },
                     {filled(3, 2, rng), filled(3, 2, rng)}});
    cases.push_back({"matmul_nt",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, matmul_nt(in[0], in[1]), w33);
                     },
                     {filled(3, 2, rng), filled(3, 2, rng)}});
    cases.push_back({"transpose",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, transpose(in[0]), w23);
                     },
                     {filled(3, 2, rng)}});
    cases.push_back({"relu",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, relu(in[0]), w23);
                     },
                     {filled(2, 3, rng, 0.2, 2.0) -
                      filled(2, 3, rng, 0.0, 0.0)}});  // kept away from 0
    cases.push_back({"sigmoid",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, sigmoid(in[0]), w23);
                     },
                     {filled(2, 3, rng)}});
    cases.push_back({"log",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, ad::log(in[0]), w23);
                     },
                     {filled(2, 3, rng, 0.3, 3.0)}});
    cases.push_back({"sqrt",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, ad::sqrt(in[0]), w23);
                     },
                     {filled(2, 3, rng, 0.3, 3.0)}});
    cases.push_back({"sum",
                     [&](Tape&, std::span<const Var> in) { return sum(in[0]); },
                     {filled(2, 3, rng)}});
    cases.push_back({"mean",
                     [&](Tape&, std::span<const Var> in) { return mean(in[0]); },
                     {filled(2, 3, rng)}});
    cases.push_back({"square",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, square(in[0]), w23);
                     },
                     {filled(2, 3, rng)}});
    cases.push_back({"bce_with_logits",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, bce_with_logits(in[0], t.constant(labels)), w23);
                     },
                     {filled(2, 3, rng)}});
    cases.push_back({"log_softmax",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, log_softmax(in[0]), w23);
                     },
                     {filled(2, 3, rng)}});
    cases.push_back({"softmax",
                     [&](Tape& t, std::span<const Var> in) {
                       return weighted(t, softmax(in[0]), w23);
                     },
                     {filled(2, 3, rng)}});
    cases.push_back({"softmax_cross_entropy",
                     [&](Tape& t, std::span<const Var> in) {
                       Mat onehot = Mat::Zero(2, 3);
                       onehot(0, 1) = 1.0;
                       onehot(1, 2) = 1.0;
                       return softmax_cross_entropy(in[0], t.constant(onehot));
                     },
                     {filled(2, 3, rng)}});
    cases.push_back({"squared_norm",
                     [&](Tape&, std::span<const Var> in) { return squared_norm(in[0]); },
                     {filled(2, 3, rng)}});

    for (auto& c : cases) {
      const double err = finite_diff_check(c.fn, c.inputs, 1e-5);
      CHECK_MESSAGE(err <= kTol, c.name << " rel err " << err);
    }
  }
}

TEST_CASE("determinism: identical op sequences give bitwise identical grads") {
  auto run = [] {
    Rng rng(7);
    Tape t;
    Var a = t.leaf(filled(4, 3, rng));
    Var b = t.leaf(filled(3, 2, rng));
    Var out = mean(sigmoid(matmul(relu(a), b)));
    return grad_values(out, {a, b});
  };
  auto g1 = run();
  auto g2 = run();
  CHECK(bitwise_equal(g1[0], g2[0]));
  CHECK(bitwise_equal(g1[1], g2[1]));
}

TEST_CASE("linearity of grad") {
  Rng rng(99);
  const Mat x0 = filled(3, 2, rng);
  const double a = 1.7, b = -0.4;

  Tape t;
  Var x = t.leaf(x0);
  Var f = sum(square(x));
  Var g = mean(sigmoid(x));
  Var combo = add(scalar_mul(a, f), scalar_mul(b, g));
  auto gc = grad_values(combo, {x});
  auto gf = grad_values(f, {x});
  auto gg = grad_values(g, {x});
  Mat expect = a * gf[0] + b * gg[0];
  CHECK((gc[0] - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("tape replay after a full second-order pass") {
  Rng rng(3);
  Tape t;
  Var x = t.leaf(filled(3, 2, rng));
  Var w = t.leaf(filled(2, 1, rng));
  Var y = t.constant(binary(3, 1, rng));
  Var loss = mean(bce_with_logits(matmul(x, w), y));
  auto gw = grad(loss, {w}, true);
  Var pen = squared_norm(gw[0]);
  auto gx = grad(pen, {x}, true);
  CHECK(gx[0].rows() == 3);
  CHECK(t.replay_matches());
}

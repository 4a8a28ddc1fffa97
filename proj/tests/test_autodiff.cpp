#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "dpe/autodiff.hpp"
#include "dpe/rng.hpp"

using namespace dpe;
using ad::Tape;
using ad::Var;

namespace {

Eigen::MatrixXd random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = dist(rng);
  return m;
}

// Central-difference check of d(scalar fn)/d(input matrix) against the tape.
double fd_max_rel_error(const std::function<double(const Eigen::MatrixXd&)>& f,
                        const Eigen::MatrixXd& at, const Eigen::MatrixXd& grad,
                        double step = 1e-6) {
  double worst = 0.0;
  Eigen::MatrixXd x = at;
  for (int i = 0; i < at.rows(); ++i) {
    for (int j = 0; j < at.cols(); ++j) {
      const double keep = x(i, j);
      x(i, j) = keep + step;
      const double hi = f(x);
      x(i, j) = keep - step;
      const double lo = f(x);
      x(i, j) = keep;
      const double fd = (hi - lo) / (2.0 * step);
      const double denom = std::max({1.0, std::abs(fd), std::abs(grad(i, j))});
      worst = std::max(worst, std::abs(fd - grad(i, j)) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("tape gradients match finite differences on a dense composite") {
  Rng rng = make_rng(7);
  const Eigen::MatrixXd a0 = random_matrix(3, 4, rng);
  const Eigen::MatrixXd b0 = random_matrix(4, 2, rng);
  const Eigen::MatrixXd c0 = random_matrix(1, 2, rng);

  auto run = [&](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                 const Eigen::MatrixXd& c, Eigen::MatrixXd* ga,
                 Eigen::MatrixXd* gb, Eigen::MatrixXd* gc) {
    Tape tape;
    Var va = tape.leaf(a);
    Var vb = tape.leaf(b);
    Var vc = tape.leaf(c);
    Var h = tape.tanh(tape.add_rowvec(tape.matmul(va, vb), vc));
    Var s = tape.sum(tape.square(tape.scale(h, 0.7)));
    tape.backward(s);
    if (ga) *ga = va.grad();
    if (gb) *gb = vb.grad();
    if (gc) *gc = vc.grad();
    return tape.value(s)(0, 0);
  };

  Eigen::MatrixXd ga, gb, gc;
  run(a0, b0, c0, &ga, &gb, &gc);

  auto fa = [&](const Eigen::MatrixXd& a) { return run(a, b0, c0, nullptr, nullptr, nullptr); };
  auto fb = [&](const Eigen::MatrixXd& b) { return run(a0, b, c0, nullptr, nullptr, nullptr); };
  auto fc = [&](const Eigen::MatrixXd& c) { return run(a0, b0, c, nullptr, nullptr, nullptr); };
  CHECK(fd_max_rel_error(fa, a0, ga) < 1e-7);
  CHECK(fd_max_rel_error(fb, b0, gb) < 1e-7);
  CHECK(fd_max_rel_error(fc, c0, gc) < 1e-7);
}

TEST_CASE("elementwise ops differentiate correctly") {
  Rng rng = make_rng(11);
  // keep strictly positive for log / inverse
  Eigen::MatrixXd x0 = random_matrix(2, 3, rng).array().abs() + 0.5;

  auto run = [&](const Eigen::MatrixXd& x, Eigen::MatrixXd* gx) {
    Tape tape;
    Var v = tape.leaf(x);
    Var y = tape.add(tape.log(v), tape.cwise_inverse(tape.exp(v)));
    Var z = tape.sum(tape.hadamard(y, y));
    tape.backward(z);
    if (gx) *gx = v.grad();
    return tape.value(z)(0, 0);
  };
  Eigen::MatrixXd g;
  run(x0, &g);
  CHECK(fd_max_rel_error([&](const Eigen::MatrixXd& x) { return run(x, nullptr); }, x0, g) <
        1e-7);
}

TEST_CASE("relu and cwise_max gradients vanish in the clamped region") {
  Tape tape;
  Eigen::MatrixXd x(1, 4);
  x << -2.0, -0.5, 0.5, 2.0;
  Var v = tape.leaf(x);
  Var s = tape.sum(tape.relu(v));
  tape.backward(s);
  Eigen::MatrixXd expected(1, 4);
  expected << 0, 0, 1, 1;
  CHECK(v.grad() == expected);

  Tape tape2;
  Var v2 = tape2.leaf(x);
  Var s2 = tape2.sum(tape2.cwise_max(v2, 0.75));
  tape2.backward(s2);
  Eigen::MatrixXd expected2(1, 4);
  expected2 << 0, 0, 0, 1;
  CHECK(v2.grad() == expected2);
}

TEST_CASE("row/column structure ops differentiate correctly") {
  Rng rng = make_rng(23);
  const Eigen::MatrixXd x0 = random_matrix(4, 6, rng);
  Eigen::VectorXd w(3);
  w << 0.5, -1.25, 2.0;

  auto run = [&](const Eigen::MatrixXd& x, Eigen::MatrixXd* gx) {
    Tape tape;
    Var v = tape.leaf(x);
    Var picked = tape.rows(v, {0, 2, 2});  // duplicate index exercises scatter-add
    Var left = tape.cols(picked, 0, 3);
    Var right = tape.cols(picked, 3, 3);
    Var mixed = tape.concat_cols({left, tape.mul_rows(right, w)});
    Var stacked = tape.concat_rows({mixed, tape.scale(mixed, -0.5)});
    Var out = tape.sum(tape.square(stacked));
    tape.backward(out);
    if (gx) *gx = v.grad();
    return tape.value(out)(0, 0);
  };
  Eigen::MatrixXd g;
  run(x0, &g);
  CHECK(fd_max_rel_error([&](const Eigen::MatrixXd& x) { return run(x, nullptr); }, x0, g) <
        1e-7);
}

TEST_CASE("masked softmax rows: values, gradient, and hard zeros") {
  Rng rng = make_rng(31);
  const Eigen::MatrixXd x0 = random_matrix(3, 3, rng);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(3, 3);
  mask(0, 1) = neg_inf;
  mask(0, 2) = neg_inf;
  mask(1, 2) = neg_inf;

  Tape tape;
  Var v = tape.leaf(x0);
  Var p = tape.softmax_rows(v, mask);
  const Eigen::MatrixXd pv = p.value();
  CHECK(pv(0, 0) == 1.0);
  CHECK(pv(0, 1) == 0.0);  // exactly zero, not merely tiny
  CHECK(pv(0, 2) == 0.0);
  CHECK(pv(1, 2) == 0.0);
  for (int r = 0; r < 3; ++r) CHECK(pv.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));

  auto run = [&](const Eigen::MatrixXd& x, Eigen::MatrixXd* gx) {
    Tape t2;
    Var v2 = t2.leaf(x);
    Eigen::MatrixXd weights = Eigen::MatrixXd::Constant(3, 3, 1.0);
    weights(2, 0) = -2.0;
    Var out = t2.sum(t2.hadamard(t2.softmax_rows(v2, mask), t2.constant(weights)));
    t2.backward(out);
    if (gx) *gx = v2.grad();
    return t2.value(out)(0, 0);
  };
  Eigen::MatrixXd g;
  run(x0, &g);
  CHECK(fd_max_rel_error([&](const Eigen::MatrixXd& x) { return run(x, nullptr); }, x0, g) <
        1e-7);
}

TEST_CASE("layer norm rows matches finite differences") {
  Rng rng = make_rng(41);
  const Eigen::MatrixXd x0 = random_matrix(3, 5, rng);
  const Eigen::MatrixXd g0 = random_matrix(1, 5, rng) * 0.3 + Eigen::MatrixXd::Ones(1, 5);
  const Eigen::MatrixXd b0 = random_matrix(1, 5, rng) * 0.1;

  auto run = [&](const Eigen::MatrixXd& x, const Eigen::MatrixXd& gain,
                 const Eigen::MatrixXd& bias, Eigen::MatrixXd* gx, Eigen::MatrixXd* gg,
                 Eigen::MatrixXd* gb) {
    Tape tape;
    Var vx = tape.leaf(x);
    Var vg = tape.leaf(gain);
    Var vb = tape.leaf(bias);
    Var y = tape.layer_norm_rows(vx, vg, vb);
    Eigen::MatrixXd mix = Eigen::MatrixXd::Zero(3, 5);
    mix(0, 0) = 1.0; mix(1, 3) = -0.7; mix(2, 2) = 0.4; mix(2, 4) = 1.3;
    Var out = tape.sum(tape.hadamard(y, tape.constant(mix)));
    tape.backward(out);
    if (gx) *gx = vx.grad();
    if (gg) *gg = vg.grad();
    if (gb) *gb = vb.grad();
    return tape.value(out)(0, 0);
  };
  Eigen::MatrixXd gx, gg, gb;
  run(x0, g0, b0, &gx, &gg, &gb);
  CHECK(fd_max_rel_error([&](const Eigen::MatrixXd& x) { return run(x, g0, b0, nullptr, nullptr, nullptr); }, x0, gx) < 1e-6);
  CHECK(fd_max_rel_error([&](const Eigen::MatrixXd& g) { return run(x0, g, b0, nullptr, nullptr, nullptr); }, g0, gg) < 1e-6);
  CHECK(fd_max_rel_error([&](const Eigen::MatrixXd& b) { return run(x0, g0, b, nullptr, nullptr, nullptr); }, b0, gb) < 1e-6);
}

TEST_CASE("gradient accumulates across reuse of a node") {
  Tape tape;
  Eigen::MatrixXd x(1, 1);
  x << 3.0;
  Var v = tape.leaf(x);
  Var y = tape.add(tape.square(v), tape.scale(v, 5.0));  // x^2 + 5x
  tape.backward(tape.sum(y));
  CHECK(v.grad()(0, 0) == doctest::Approx(2.0 * 3.0 + 5.0));
}

TEST_CASE("unused leaves read back zero gradient") {
  Tape tape;
  Var used = tape.leaf(Eigen::MatrixXd::Ones(1, 1));
  Var unused = tape.leaf(Eigen::MatrixXd::Ones(2, 2));
  tape.backward(tape.sum(tape.square(used)));
  CHECK(tape.grad_or_zero(unused) == Eigen::MatrixXd::Zero(2, 2));
  CHECK_THROWS_AS(unused.grad(), NumericError);
}

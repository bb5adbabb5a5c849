#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "firework/fieldops.hpp"
#include "firework/losses.hpp"
#include "oracles.hpp"

#include <random>

using namespace firework;

namespace {

std::vector<double> flat(const VolumeD& v) { return {v.data.data(), v.data.data() + v.data.size()}; }
std::vector<double> flat(const FieldD& f) { return {f.data.data(), f.data.data() + f.data.size()}; }
VolumeD unflat_volume(const Shape3& s, const std::vector<double>& x) {
  VolumeD v(s);
  std::copy(x.begin(), x.end(), v.data.data());
  return v;
}
FieldD unflat_field(const Shape3& s, const std::vector<double>& x) {
  FieldD f(s);
  std::copy(x.begin(), x.end(), f.data.data());
  return f;
}

FieldD kink_free_field(const Shape3& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  std::bernoulli_distribution sign(0.5);
  FieldD f(s);
  for (Index n = 0; n < f.data.size(); ++n) f.data.data()[n] = (sign(rng) ? 0.5 : -0.5) + u(rng);
  return f;
}

// Per-axis mean of squared forward differences, averaged over axes.
double penalty_oracle(const FieldD& f) {
  const Shape3 s = f.shape;
  double total = 0;
  for (int a = 0; a < 3; ++a) {
    double sum = 0;
    Index pairs = 0;
    for (Index i = 0; i < s.d; ++i)
      for (Index j = 0; j < s.h; ++j)
        for (Index k = 0; k < s.w; ++k) {
          const Index q[3] = {i + (a == 0), j + (a == 1), k + (a == 2)};
          if (q[0] >= s.d || q[1] >= s.h || q[2] >= s.w) continue;
          for (int c = 0; c < 3; ++c) {
            const double d = f.data(s.index(q[0], q[1], q[2]), c) - f.data(s.index(i, j, k), c);
            sum += d * d;
            ++pairs;
          }
        }
    total += sum / double(pairs);
  }
  return total / 3.0;
}

}  // namespace

TEST_CASE("local_ncc of an image with itself or an affine copy is -1") {
  const Shape3 s{10, 9, 8};
  const VolumeD a = oracle::random_volume(s, 1);
  CHECK(local_ncc(a, a) == doctest::Approx(-1.0).epsilon(1e-4));
  const VolumeD b(s, VolumeD::Array(2.0 * a.data + 3.0));
  CHECK(local_ncc(a, b) == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("local_ncc matches the explicit window oracle") {
  const Shape3 s{7, 8, 6};
  const VolumeD a = oracle::random_volume(s, 2), b = oracle::random_volume(s, 3);
  for (int window : {1, 3, 5, 9}) {
    CAPTURE(window);
    CHECK(local_ncc(a, b, window) == doctest::Approx(oracle::local_ncc(a, b, window)).epsilon(1e-10));
  }
}

TEST_CASE("local_ncc of independent noise is near zero") {
  const Shape3 s{16, 16, 16};
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const double v = local_ncc(oracle::random_volume(s, 100 + seed), oracle::random_volume(s, 200 + seed));
    CHECK(v <= 0.0);
    CHECK(std::abs(v) < 0.05);
  }
}

TEST_CASE("local_ncc is symmetric and invariant to affine intensity changes") {
  const Shape3 s{8, 8, 8};
  const VolumeD a = oracle::smooth_volume(s, 4);
  const VolumeD b = oracle::random_volume(s, 5);
  const double ab = local_ncc(a, b), ba = local_ncc(b, a);
  CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
  for (auto [gamma, delta] : {std::pair{3.0, -1.0}, std::pair{-0.5, 2.0}, std::pair{10.0, 0.0}}) {
    const VolumeD c(s, VolumeD::Array(gamma * b.data + delta));
    CHECK(std::abs(local_ncc(a, c) - ab) < 1e-4);
  }
}

TEST_CASE("local_ncc argument checks") {
  const VolumeD a(Shape3{4, 4, 4});
  CHECK_THROWS_AS(local_ncc(a, a, 4), std::invalid_argument);
  CHECK_THROWS_AS(local_ncc(a, a, 0), std::invalid_argument);
  CHECK_THROWS_AS(local_ncc(a, VolumeD(Shape3{4, 4, 5})), std::invalid_argument);
}

TEST_CASE("local_ncc gradients match central differences on 8^3") {
  const Shape3 s{8, 8, 8};
  const VolumeD a = oracle::random_volume(s, 6), b = oracle::random_volume(s, 7);
  for (int window : {3, 9}) {
    CAPTURE(window);
    const NccGradient<double> g = local_ncc_gradient(a, b, window);
    CHECK(g.value == doctest::Approx(local_ncc(a, b, window)).epsilon(1e-12));
    const auto na = oracle::fd_gradient(
        [&](const std::vector<double>& x) { return local_ncc(unflat_volume(s, x), b, window); }, flat(a), 1e-3);
    const auto nb = oracle::fd_gradient(
        [&](const std::vector<double>& x) { return local_ncc(a, unflat_volume(s, x), window); }, flat(b), 1e-3);
    CHECK(oracle::relative_error(flat(g.grad_a), na) < 1e-4);
    CHECK(oracle::relative_error(flat(g.grad_b), nb) < 1e-4);
  }
}

TEST_CASE("grad_penalty of zero, constant and linear fields") {
  const Shape3 s{5, 6, 7};
  CHECK(grad_penalty(FieldD(s)) == 0.0);
  CHECK(grad_penalty(FieldD::Constant(s, 1.5, -2.0, 0.25)) == 0.0);

  const double alpha = 0.3;
  FieldD lin(s);
  for (Index i = 0; i < s.d; ++i)
    for (Index j = 0; j < s.h; ++j)
      for (Index k = 0; k < s.w; ++k) {
        const Index n = s.index(i, j, k);
        lin.data.row(n) << alpha * i, alpha * j, alpha * k;
      }
  // Along each axis exactly one of the three components changes, by alpha.
  CHECK(grad_penalty(lin) == doctest::Approx(alpha * alpha / 3.0).epsilon(1e-12));
  CHECK(grad_penalty(lin) == doctest::Approx(penalty_oracle(lin)).epsilon(1e-12));
}

TEST_CASE("grad_penalty is positive for non-constant fields and matches the oracle") {
  const Shape3 s{4, 5, 6};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const FieldD f = oracle::random_field(s, 1.0, seed);
    CHECK(grad_penalty(f) > 0.0);
    CHECK(grad_penalty(f) == doctest::Approx(penalty_oracle(f)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(grad_penalty(FieldD(Shape3{1, 4, 4})), std::invalid_argument);
}

TEST_CASE("grad_penalty gradient matches central differences") {
  const Shape3 s{8, 8, 8};
  const FieldD f = oracle::random_field(s, 1.0, 8);
  const auto numeric = oracle::fd_gradient(
      [&](const std::vector<double>& x) { return grad_penalty(unflat_field(s, x)); }, flat(f), 1e-3);
  CHECK(oracle::relative_error(flat(grad_penalty_gradient(f)), numeric) < 1e-4);
}

TEST_CASE("firework_loss of identical images and zero fields is -2") {
  const Shape3 s{8, 8, 8};
  const VolumeD img = oracle::smooth_volume(s, 9);
  const LossParts<double> parts = firework_loss(img, img, FieldD(s), FieldD(s), 4.0);
  CHECK(parts.total == doctest::Approx(-2.0).epsilon(1e-4));
  CHECK(parts.reg1 == 0.0);
  CHECK(parts.reg2 == 0.0);
  CHECK(parts.lambda == 4.0);
  CHECK(parts.all_finite());
}

TEST_CASE("firework_loss equals the sum of its four terms") {
  const Shape3 s{8, 8, 8};
  const VolumeD m = oracle::smooth_volume(s, 10), f = oracle::smooth_volume(s, 11);
  const FieldD phi1 = oracle::smooth_field(s, 1.0, 12), phi2 = oracle::smooth_field(s, 1.5, 13);

  const LossParts<double> zero_lambda = firework_loss(m, f, phi1, phi2, 0.0);
  CHECK(zero_lambda.total == zero_lambda.sim1 + zero_lambda.sim2);

  const double lambda = 4.0;
  const LossParts<double> parts = firework_loss(m, f, phi1, phi2, lambda);
  const double sim1 = local_ncc(warp(m, phi1), f), sim2 = local_ncc(warp(m, phi2), f);
  const double reg1 = grad_penalty(phi1), reg2 = grad_penalty(phi2);
  CHECK(parts.sim1 == doctest::Approx(sim1).epsilon(1e-14));
  CHECK(parts.sim2 == doctest::Approx(sim2).epsilon(1e-14));
  CHECK(parts.reg1 == doctest::Approx(reg1).epsilon(1e-14));
  CHECK(parts.reg2 == doctest::Approx(reg2).epsilon(1e-14));
  CHECK(parts.total == doctest::Approx(sim1 + lambda * reg1 + sim2 + lambda * reg2).epsilon(1e-14));
  CHECK(parts.total == doctest::Approx(parts.sim1 + lambda * parts.reg1 + parts.sim2 + lambda * parts.reg2).epsilon(1e-15));

  CHECK_THROWS_AS(firework_loss(m, f, phi1, phi2, -1.0), std::invalid_argument);
}

TEST_CASE("firework_loss gradient matches central differences in both fields") {
  const Shape3 s{6, 6, 6};
  const VolumeD m = oracle::smooth_volume(s, 14), f = oracle::smooth_volume(s, 15);
  const FieldD phi1 = kink_free_field(s, 16), phi2 = kink_free_field(s, 17);
  const double lambda = 0.5;
  const int window = 5;
  const FireworkLossGradient<double> g = firework_loss_gradient(m, f, phi1, phi2, lambda, window);
  CHECK(g.parts.total == doctest::Approx(firework_loss(m, f, phi1, phi2, lambda, window).total).epsilon(1e-14));
  const auto n1 = oracle::fd_gradient(
      [&](const std::vector<double>& x) { return firework_loss(m, f, unflat_field(s, x), phi2, lambda, window).total; },
      flat(phi1), 1e-3);
  const auto n2 = oracle::fd_gradient(
      [&](const std::vector<double>& x) { return firework_loss(m, f, phi1, unflat_field(s, x), lambda, window).total; },
      flat(phi2), 1e-3);
  CHECK(oracle::relative_error(flat(g.grad_phi1), n1) < 1e-4);
  CHECK(oracle::relative_error(flat(g.grad_phi2), n2) < 1e-4);
}

#include <doctest.h>

#include <cmath>
#include <random>

#include "batchreuse/errors.hpp"
#include "batchreuse/hermite.hpp"
#include "support/oracles.hpp"

using namespace batchreuse::hermite;

TEST_SUITE("hermite") {

TEST_CASE("hermite_eval examples") {
  CHECK(hermite_eval(0, 7.3) == 1.0);
  CHECK(hermite_eval(3, 2.0) == 2.0);
  CHECK(hermite_eval(4, 0.0) == 3.0);
  CHECK(hermite_eval(1, -1.5) == -1.5);
}

TEST_CASE("coefficient table follows the recurrence exactly") {
  HermiteBasis basis(20);
  for (int n = 1; n < 20; ++n) {
    auto next = basis.coefficients(n + 1);
    auto cur = basis.coefficients(n);
    auto prev = basis.coefficients(n - 1);
    for (int m = 0; m <= n + 1; ++m) {
      std::int64_t x_cur = m >= 1 && m - 1 <= n ? cur[m - 1] : 0;
      std::int64_t p = m <= n - 1 ? prev[m] : 0;
      CHECK(next[m] == x_cur - n * p);
    }
  }
}

TEST_CASE("recurrence holds at random points") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    double x = u(rng);
    for (int n = 1; n < 10; ++n) {
      double lhs = hermite_eval(n + 1, x);
      double rhs = x * hermite_eval(n, x) - n * hermite_eval(n - 1, x);
      CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
    }
  }
}

TEST_CASE("orthogonality under the Gaussian") {
  auto rule = QuadratureRule::gauss_hermite(40);
  for (int i = 0; i <= 10; ++i)
    for (int j = 0; j <= 10; ++j) {
      double e = gauss_expectation_1d([&](double x) { return hermite_eval(i, x) * hermite_eval(j, x); },
                                      rule);
      double want = i == j ? factorial(i) : 0.0;
      CHECK(std::abs(e - want) < 1e-8);
    }
}

TEST_CASE("gaussian_moment") {
  CHECK(gaussian_moment(4) == 3.0);
  CHECK(gaussian_moment(7) == 0.0);
  CHECK(gaussian_moment(10) == 945.0);
  auto rule = QuadratureRule::gauss_hermite(40);
  for (int k = 0; k <= 12; ++k) {
    double q = gauss_expectation_1d([&](double x) { return std::pow(x, k); }, rule);
    CHECK(std::abs(q - gaussian_moment(k)) < 1e-8);
    CHECK(gaussian_moment(k) == oracle::double_factorial_moment(k));
  }
}

TEST_CASE("gauss_expectation examples") {
  auto rule = QuadratureRule::gauss_hermite(40);
  CHECK(std::abs(gauss_expectation_1d([](double x) { return x * x; }, rule) - 1.0) < 1e-12);
  auto he3 = [](double x) { return x * x * x - 3 * x; };
  CHECK(std::abs(gauss_expectation_1d([&](double x) { return he3(x) * he3(x); }, rule) - 6.0) < 1e-10);
  double m = gauss_expectation_1d([&](double x) { return std::pow(he3(x), 3) * x; }, rule);
  CHECK(std::abs(m - 324.0) < 1e-8);
  CHECK(oracle::moment(oracle::hermite(1, 0, 3), {1.0}, 3) == 324.0);
}

TEST_CASE("weights sum to one and degree 2n-1 is exact") {
  auto rule = QuadratureRule::gauss_hermite(8);
  double s = 0.0;
  for (double w : rule.weights()) {
    CHECK(w > 0.0);
    s += w;
  }
  CHECK(std::abs(s - 1.0) < 1e-13);
  double m14 = gauss_expectation_1d([](double x) { return std::pow(x, 14); }, rule);
  CHECK(std::abs(m14 - gaussian_moment(14)) < 1e-8 * gaussian_moment(14));
  double m16 = gauss_expectation_1d([](double x) { return std::pow(x, 16); }, rule);
  CHECK(std::abs(m16 - gaussian_moment(16)) > 1.0);
}

TEST_CASE("tensor rules and the dimension cap") {
  auto rule = QuadratureRule::gauss_hermite(10, 3);
  double e = gauss_expectation(
      [](std::span<const double> x) { return x[0] * x[0] * x[1] * x[1] * x[2] * x[2]; }, rule);
  CHECK(std::abs(e - 1.0) < 1e-12);
  auto big = QuadratureRule::gauss_hermite(2, 6);
  CHECK_THROWS_AS(gauss_expectation([](std::span<const double>) { return 1.0; }, big),
                  batchreuse::DimensionError);
}

TEST_CASE("hermite_coefficients examples") {
  auto rule = QuadratureRule::gauss_hermite(40);
  auto nu = hermite_coefficients([](double x) { return hermite_eval(3, x); }, 4, rule);
  REQUIRE(nu.size() == 5);
  for (int j = 0; j <= 4; ++j) CHECK(std::abs(nu[j] - (j == 3 ? 6.0 : 0.0)) < 1e-10);
  auto id = hermite_coefficients([](double x) { return x; }, 4, rule);
  for (int j = 0; j <= 4; ++j) CHECK(std::abs(id[j] - (j == 1 ? 1.0 : 0.0)) < 1e-12);
  // nu_1(tanh) = E[sech^2] = 0.6057055096021588 (high-precision reference); the
  // quadrature error of this non-polynomial integrand shrinks with the node count
  const double nu1 = 0.6057055096021588;
  auto th = hermite_coefficients([](double x) { return std::tanh(x); }, 1, rule);
  CHECK(std::abs(th[1] - nu1) < 1e-7);
  auto fine = QuadratureRule::gauss_hermite(160);
  auto th_fine = hermite_coefficients([](double x) { return std::tanh(x); }, 1, fine);
  double sech2 = gauss_expectation_1d([](double x) { return 1.0 / std::pow(std::cosh(x), 2); }, fine);
  CHECK(std::abs(th_fine[1] - nu1) < 1e-13);
  CHECK(std::abs(th_fine[1] - sech2) < 1e-13);
}

}  // TEST_SUITE

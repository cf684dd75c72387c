#include "batchreuse/hermite.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

#include "batchreuse/errors.hpp"

namespace batchreuse::hermite {

HermiteBasis::HermiteBasis(int max_degree) {
  if (max_degree < 0 || max_degree > kMaxTableDegree)
    throw ConfigError("hermite table degree must be in [0, 20]");
  coeffs_.resize(max_degree + 1);
  coeffs_[0] = {1};
  if (max_degree >= 1) coeffs_[1] = {0, 1};
  for (int n = 1; n < max_degree; ++n) {
    std::vector<std::int64_t> next(n + 2, 0);
    for (int m = 0; m <= n; ++m) next[m + 1] += coeffs_[n][m];
    for (int m = 0; m <= n - 1; ++m) next[m] -= static_cast<std::int64_t>(n) * coeffs_[n - 1][m];
    coeffs_[n + 1] = std::move(next);
  }
}

std::span<const std::int64_t> HermiteBasis::coefficients(int j) const {
  if (j < 0 || j > max_degree()) throw ConfigError("hermite degree outside table");
  return coeffs_[j];
}

double HermiteBasis::eval(int j, double x) const {
  auto c = coefficients(j);
  double acc = 0.0;
  for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * x + static_cast<double>(*it);
  return acc;
}

double hermite_eval(int j, double x) {
  if (j == 0) return 1.0;
  double prev = 1.0, cur = x;
  for (int n = 1; n < j; ++n) {
    double next = x * cur - n * prev;
    prev = cur;
    cur = next;
  }
  return cur;
}

double gaussian_moment(int k) {
  if (k < 0) throw ConfigError("moment order must be non-negative");
  if (k % 2 == 1) return 0.0;
  double r = 1.0;
  for (int m = k - 1; m > 1; m -= 2) r *= m;
  return r;
}

double factorial(int n) {
  double r = 1.0;
  for (int m = 2; m <= n; ++m) r *= m;
  return r;
}

namespace {

// Orthonormal psi_n = He_n / sqrt(n!) and psi_{n-1} at x; no overflow for large n.
std::pair<double, double> hermite_pair(int n, double x) {
  double prev = 1.0, cur = x;
  for (int m = 1; m < n; ++m) {
    double next = (x * cur - std::sqrt(double(m)) * prev) / std::sqrt(m + 1.0);
    prev = cur;
    cur = next;
  }
  return {cur, prev};
}

}  // namespace

QuadratureRule QuadratureRule::gauss_hermite(int n, int dimension) {
  if (n < 1) throw ConfigError("quadrature needs at least one node");
  if (dimension < 1) throw ConfigError("quadrature dimension must be positive");
  QuadratureRule rule;
  rule.dimension_ = dimension;
  rule.nodes_.resize(n);
  rule.weights_.resize(n);
  // Roots from the Jacobi matrix (Golub-Welsch), polished by Newton on psi_n; then
  // weights w_i = n! / (n He_{n-1}(x_i))^2 = 1 / (n psi_{n-1}(x_i)^2).
  const int half = n / 2;
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n), sub(std::max(n - 1, 0));
  for (int k = 1; k < n; ++k) sub[k - 1] = std::sqrt(double(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> jacobi;
  jacobi.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
  std::vector<double> roots;
  for (int i = 0; i < half; ++i) {
    double x = jacobi.eigenvalues()[n - 1 - i];
    for (int it = 0; it < 10; ++it) {
      auto [hn, hn1] = hermite_pair(n, x);
      double dx = hn / (std::sqrt(double(n)) * hn1);
      x -= dx;
      if (std::abs(dx) <= 1e-15 * std::max(1.0, std::abs(x))) break;
    }
    roots.push_back(x);
  }
  auto weight = [&](double r) {
    auto [hn, hn1] = hermite_pair(n, r);
    (void)hn;
    return 1.0 / (n * hn1 * hn1);
  };
  for (int i = 0; i < half; ++i) {
    rule.nodes_[i] = -roots[i];
    rule.weights_[i] = weight(roots[i]);
    rule.nodes_[n - 1 - i] = roots[i];
    rule.weights_[n - 1 - i] = rule.weights_[i];
  }
  if (n % 2 == 1) {
    rule.nodes_[half] = 0.0;
    rule.weights_[half] = weight(0.0);
  }
  double total = 0.0;
  for (double w : rule.weights_) total += w;
  if (std::abs(total - 1.0) > 1e-10)
    throw NumericalError("Gauss-Hermite weights failed to normalise");
  for (double& w : rule.weights_) w /= total;
  return rule;
}

QuadratureRule QuadratureRule::with_dimension(int dimension) const {
  QuadratureRule r = *this;
  r.dimension_ = dimension;
  return r;
}

void for_each_node(const QuadratureRule& rule,
                   const std::function<void(std::span<const double>, double)>& visit) {
  const int m = rule.dimension();
  if (m > kMaxQuadratureDimension)
    throw DimensionError("tensor quadrature supports at most 5 dimensions; use Monte Carlo");
  const int n = rule.size();
  auto nodes = rule.nodes();
  auto weights = rule.weights();
  std::vector<int> idx(m, 0);
  std::vector<double> z(m);
  for (;;) {
    double w = 1.0;
    for (int i = 0; i < m; ++i) {
      z[i] = nodes[idx[i]];
      w *= weights[idx[i]];
    }
    visit(z, w);
    int pos = m - 1;
    while (pos >= 0 && ++idx[pos] == n) idx[pos--] = 0;
    if (pos < 0) break;
  }
}

double gauss_expectation(const MultiFunction& f, const QuadratureRule& rule) {
  double acc = 0.0;
  for_each_node(rule, [&](std::span<const double> z, double w) { acc += w * f(z); });
  return acc;
}

double gauss_expectation_1d(const std::function<double(double)>& f, const QuadratureRule& rule) {
  if (rule.dimension() != 1) throw ConfigError("one-dimensional rule expected");
  double acc = 0.0;
  auto nodes = rule.nodes();
  auto weights = rule.weights();
  for (int i = 0; i < rule.size(); ++i) acc += weights[i] * f(nodes[i]);
  return acc;
}

std::vector<double> hermite_coefficients(const std::function<double(double)>& g, int max_j,
                                         const QuadratureRule& rule) {
  if (max_j < 0) throw ConfigError("max_j must be non-negative");
  std::vector<double> nu(max_j + 1, 0.0);
  auto nodes = rule.nodes();
  auto weights = rule.weights();
  for (int i = 0; i < rule.size(); ++i) {
    const double x = nodes[i];
    const double gx = g(x) * weights[i];
    double prev = 1.0, cur = x;
    nu[0] += gx;
    if (max_j >= 1) nu[1] += gx * x;
    for (int n = 1; n < max_j; ++n) {
      double next = x * cur - n * prev;
      prev = cur;
      cur = next;
      nu[n + 1] += gx * cur;
    }
  }
  return nu;
}

}  // namespace batchreuse::hermite

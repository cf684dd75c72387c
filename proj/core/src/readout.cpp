#include "batchreuse/readout.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "batchreuse/errors.hpp"
#include "rng.hpp"

namespace batchreuse {

std::string to_string(Residual r) { return r == Residual::Network ? "network" : "teacher_only"; }

Residual parse_residual(const std::string& s) {
  if (s == "network") return Residual::Network;
  if (s == "teacher_only") return Residual::TeacherOnly;
  throw ConfigError("unknown residual mode '" + s + "'", "residual");
}

double Readout::output(const double* h) const {
  const int n = p();
  if (n == 1) return a[0] * sigma.value(h[0]);
  std::array<double, 16> small;
  std::vector<double> big;
  double* terms = small.data();
  if (n > 16) {
    big.resize(n);
    terms = big.data();
  }
  for (int j = 0; j < n; ++j) terms[j] = a[j] * sigma.value(h[j]);
  // Order by magnitude so that +x/-x pairs from the symmetric init cancel exactly,
  // independent of the neuron order.
  std::sort(terms, terms + n, [](double u, double v) {
    return std::abs(u) != std::abs(v) ? std::abs(u) < std::abs(v) : u < v;
  });
  double f = 0.0;
  for (int j = 0; j < n; ++j) f += terms[j];
  return f;
}

double Readout::loss(const double* h, double y) const {
  double f = output(h);
  if (residual == Residual::Network) return 0.5 * (y - f) * (y - f);
  return 0.5 * y * y - y * f;
}

void Readout::gradient(const double* h, double y, double* F) const {
  const double r = residual == Residual::Network ? y - output(h) : y;
  for (int j = 0; j < p(); ++j) F[j] = -a[j] * r * sigma.d1(h[j]);
}

void Readout::hessian(const double* h, double y, Eigen::Ref<Eigen::MatrixXd> H) const {
  const int n = p();
  const double r = residual == Residual::Network ? y - output(h) : y;
  for (int i = 0; i < n; ++i) {
    const double di = sigma.d1(h[i]);
    for (int j = 0; j < n; ++j)
      H(i, j) = residual == Residual::Network ? a[i] * a[j] * di * sigma.d1(h[j]) : 0.0;
    H(i, i) -= a[i] * r * sigma.d2(h[i]);
  }
}

void Readout::gradient_dy(const double* h, double* out) const {
  for (int j = 0; j < p(); ++j) out[j] = -a[j] * sigma.d1(h[j]);
}

Residual default_residual(int p) { return p == 1 ? Residual::TeacherOnly : Residual::Network; }

int pair_of(int j, int p) { return p == 1 ? 0 : p - 1 - j; }

Eigen::VectorXd make_second_layer(int p, SecondLayer law, unsigned long long seed) {
  if (p < 1) throw ConfigError("p must be >= 1", "p");
  if (p == 1) return Eigen::VectorXd::Ones(1);
  if (p % 2 != 0) throw ConfigError("p must be even (symmetric pairing) or 1", "p");
  Eigen::VectorXd a(p);
  auto engine = detail::make_engine(seed, {detail::kStudentStream, 1});
  detail::Normal normal;
  for (int i = 0; i < p / 2; ++i) {
    double c = law == SecondLayer::PlusMinus ? 1.0 / std::sqrt(static_cast<double>(p))
                                             : normal(engine) / std::sqrt(static_cast<double>(p));
    a[i] = c;
    a[p - 1 - i] = -c;
  }
  return a;
}

Eigen::MatrixXd initial_covariance(int p) {
  Eigen::MatrixXd C = Eigen::MatrixXd::Identity(p, p);
  if (p > 1)
    for (int j = 0; j < p; ++j) C(j, pair_of(j, p)) = 1.0;
  return C;
}

}  // namespace batchreuse

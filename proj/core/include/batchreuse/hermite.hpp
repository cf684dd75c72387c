#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

// Probabilists' Hermite polynomials and Gauss-Hermite expectations under N(0, I_m).
namespace batchreuse::hermite {

inline constexpr int kMaxTableDegree = 20;
inline constexpr int kMaxQuadratureDimension = 5;
inline constexpr int kDefaultNodes = 40;

// Exact integer monomial coefficients of He_0..He_max_degree.
class HermiteBasis {
 public:
  explicit HermiteBasis(int max_degree = kMaxTableDegree);

  int max_degree() const { return static_cast<int>(coeffs_.size()) - 1; }
  // coefficients(j)[m] is the coefficient of x^m in He_j.
  std::span<const std::int64_t> coefficients(int j) const;
  double eval(int j, double x) const;

 private:
  std::vector<std::vector<std::int64_t>> coeffs_;
};

double hermite_eval(int j, double x);
double gaussian_moment(int k);
double factorial(int n);

class QuadratureRule {
 public:
  // Gauss-Hermite rule for the standard normal density, tensorised `dimension` times.
  static QuadratureRule gauss_hermite(int n_nodes = kDefaultNodes, int dimension = 1);

  std::span<const double> nodes() const { return nodes_; }
  std::span<const double> weights() const { return weights_; }
  int dimension() const { return dimension_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  QuadratureRule with_dimension(int dimension) const;

 private:
  std::vector<double> nodes_;
  std::vector<double> weights_;
  int dimension_ = 1;
};

using MultiFunction = std::function<double(std::span<const double>)>;

// Throws DimensionError when rule.dimension() > kMaxQuadratureDimension.
double gauss_expectation(const MultiFunction& f, const QuadratureRule& rule);
double gauss_expectation_1d(const std::function<double(double)>& f, const QuadratureRule& rule);

// Visits every tensor node with its product weight; used by callers that need
// several integrals from one sweep.
void for_each_node(const QuadratureRule& rule,
                   const std::function<void(std::span<const double>, double)>& visit);

std::vector<double> hermite_coefficients(const std::function<double(double)>& g, int max_j,
                                         const QuadratureRule& rule);

}  // namespace batchreuse::hermite

#pragma once

#include <string>
#include <string_view>

namespace batchreuse {

// Scalar function with first and second derivatives. Used both as the student
// activation and as the link function inside targets.
class ScalarFunction {
 public:
  enum class Kind { Linear, Hermite, Tanh, Relu, Softplus, Erf };

  ScalarFunction() = default;
  ScalarFunction(Kind kind, int degree = 0, double scale = 1.0);

  // Names: linear|id|identity, he<n>, tanh, relu, softplus, erf; optional "<c>*" prefix.
  static ScalarFunction parse(std::string_view name);
  static ScalarFunction linear() { return {Kind::Linear}; }
  static ScalarFunction hermite(int n) { return {Kind::Hermite, n}; }
  static ScalarFunction tanh() { return {Kind::Tanh}; }
  static ScalarFunction relu() { return {Kind::Relu}; }

  double value(double x) const;
  double d1(double x) const;
  double d2(double x) const;

  // False for relu: second derivative is a point mass the pathwise estimators cannot see.
  bool smooth() const { return kind_ != Kind::Relu; }
  bool is_polynomial() const { return kind_ == Kind::Linear || kind_ == Kind::Hermite; }
  int polynomial_degree() const;
  Kind kind() const { return kind_; }
  int degree() const { return degree_; }
  double scale() const { return scale_; }
  ScalarFunction scaled(double c) const { return {kind_, degree_, scale_ * c}; }
  std::string name() const;

 private:
  Kind kind_ = Kind::Linear;
  int degree_ = 1;
  double scale_ = 1.0;
};

}  // namespace batchreuse

#include "batchreuse/functions.hpp"

#include <charconv>
#include <cmath>
#include <numbers>
#include <sstream>

#include "batchreuse/errors.hpp"

namespace batchreuse {

ScalarFunction::ScalarFunction(Kind kind, int degree, double scale)
    : kind_(kind), degree_(kind == Kind::Hermite ? degree : 1), scale_(scale) {
  if (kind == Kind::Hermite && (degree < 0 || degree > 40))
    throw ConfigError("hermite degree must be in [0, 40]");
}

ScalarFunction ScalarFunction::parse(std::string_view name) {
  double scale = 1.0;
  if (auto star = name.find('*'); star != std::string_view::npos) {
    auto head = name.substr(0, star);
    auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), scale);
    if (ec != std::errc{} || ptr != head.data() + head.size())
      throw ConfigError("bad scale factor in function name '" + std::string(name) + "'");
    name = name.substr(star + 1);
  }
  ScalarFunction f;
  if (name == "linear" || name == "id" || name == "identity") {
    f = linear();
  } else if (name == "tanh") {
    f = tanh();
  } else if (name == "relu") {
    f = relu();
  } else if (name == "softplus") {
    f = ScalarFunction(Kind::Softplus);
  } else if (name == "erf") {
    f = ScalarFunction(Kind::Erf);
  } else if (name.size() > 2 && name.substr(0, 2) == "he") {
    int n = 0;
    auto digits = name.substr(2);
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
    if (ec != std::errc{} || ptr != digits.data() + digits.size())
      throw ConfigError("bad hermite degree in '" + std::string(name) + "'");
    f = hermite(n);
  } else {
    throw ConfigError("unknown function '" + std::string(name) + "'");
  }
  return f.scaled(scale);
}

namespace {

// He_n, He_{n-1}, He_{n-2} at x.
void hermite_triple(int n, double x, double& h, double& h1, double& h2) {
  double hm2 = 0.0, hm1 = 0.0, cur = 1.0;
  if (n >= 1) {
    hm1 = cur;
    cur = x;
  }
  for (int m = 1; m < n; ++m) {
    double next = x * cur - m * hm1;
    hm2 = hm1;
    hm1 = cur;
    cur = next;
  }
  h = cur;
  h1 = hm1;
  h2 = hm2;
}

}  // namespace

double ScalarFunction::value(double x) const {
  switch (kind_) {
    case Kind::Linear: return scale_ * x;
    case Kind::Hermite: {
      double h, h1, h2;
      hermite_triple(degree_, x, h, h1, h2);
      return scale_ * h;
    }
    case Kind::Tanh: return scale_ * std::tanh(x);
    case Kind::Relu: return x > 0.0 ? scale_ * x : 0.0;
    case Kind::Softplus: return scale_ * (x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)));
    case Kind::Erf: return scale_ * std::erf(x);
  }
  return 0.0;
}

double ScalarFunction::d1(double x) const {
  switch (kind_) {
    case Kind::Linear: return scale_;
    case Kind::Hermite: {
      double h, h1, h2;
      hermite_triple(degree_, x, h, h1, h2);
      return scale_ * degree_ * h1;
    }
    case Kind::Tanh: {
      double t = std::tanh(x);
      return scale_ * (1.0 - t * t);
    }
    case Kind::Relu: return x > 0.0 ? scale_ : 0.0;  // relu'(0) := 0
    case Kind::Softplus: return scale_ / (1.0 + std::exp(-x));
    case Kind::Erf: return scale_ * 2.0 * std::numbers::inv_sqrtpi * std::exp(-x * x);
  }
  return 0.0;
}

double ScalarFunction::d2(double x) const {
  switch (kind_) {
    case Kind::Linear: return 0.0;
    case Kind::Hermite: {
      double h, h1, h2;
      hermite_triple(degree_, x, h, h1, h2);
      return degree_ >= 2 ? scale_ * degree_ * (degree_ - 1) * h2 : 0.0;
    }
    case Kind::Tanh: {
      double t = std::tanh(x);
      return scale_ * (-2.0 * t * (1.0 - t * t));
    }
    case Kind::Relu: return 0.0;
    case Kind::Softplus: {
      double s = 1.0 / (1.0 + std::exp(-x));
      return scale_ * s * (1.0 - s);
    }
    case Kind::Erf: return scale_ * -4.0 * x * std::numbers::inv_sqrtpi * std::exp(-x * x);
  }
  return 0.0;
}

int ScalarFunction::polynomial_degree() const {
  if (kind_ == Kind::Linear) return 1;
  if (kind_ == Kind::Hermite) return degree_;
  return -1;
}

std::string ScalarFunction::name() const {
  std::string base;
  switch (kind_) {
    case Kind::Linear: base = "linear"; break;
    case Kind::Hermite: base = "he" + std::to_string(degree_); break;
    case Kind::Tanh: base = "tanh"; break;
    case Kind::Relu: base = "relu"; break;
    case Kind::Softplus: base = "softplus"; break;
    case Kind::Erf: base = "erf"; break;
  }
  if (scale_ == 1.0) return base;
  std::ostringstream os;
  os.precision(17);
  os << scale_ << "*" << base;
  return os.str();
}

}  // namespace batchreuse

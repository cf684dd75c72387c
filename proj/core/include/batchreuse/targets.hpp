#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "batchreuse/functions.hpp"

namespace batchreuse::targets {

// Multi-index link g(h), h in R^k. Coordinates are 0-based internally and
// 1-based in the text grammar.
class TargetFunction {
 public:
  struct SingleIndex {
    ScalarFunction g;
    int index = 0;
  };
  struct Product {
    std::vector<int> indices;
  };
  // z1 + z1 z2 + ... + z1...z_depth
  struct Staircase {
    int depth = 1;
  };
  // sum_{r < width} g(z_r)
  struct Committee {
    ScalarFunction g;
    int width = 1;
  };
  struct Sum {
    std::vector<TargetFunction> terms;
  };
  using Kind = std::variant<SingleIndex, Product, Staircase, Committee, Sum>;

  // One product of per-coordinate factors, used by the generic evaluator.
  struct SeparableTerm {
    double coef = 1.0;
    std::vector<std::pair<int, ScalarFunction>> factors;
  };

  explicit TargetFunction(Kind kind, std::optional<int> declared_leap = std::nullopt);

  static TargetFunction single(ScalarFunction g, int index = 0);
  static TargetFunction product(std::vector<int> indices);
  static TargetFunction staircase(int depth);
  static TargetFunction committee(ScalarFunction g, int width);
  static TargetFunction sum(std::vector<TargetFunction> terms);

  int k() const { return k_; }
  const Kind& kind() const { return kind_; }
  std::optional<int> declared_leap() const { return declared_leap_; }
  void set_declared_leap(std::optional<int> leap) { declared_leap_ = leap; }

  double eval(std::span<const double> h) const;
  void gradient(std::span<const double> h, std::span<double> out) const;
  // Same value computed from the lowered separable form (closed forms and
  // lowering use the same operation order, so results agree bit for bit).
  double eval_generic(std::span<const double> h) const;
  // Groups of separable terms; each group is summed, then groups are added.
  const std::vector<std::vector<SeparableTerm>>& lowered() const { return lowered_; }

  bool is_single_index() const;
  const ScalarFunction& single_function() const;
  // Max polynomial degree per coordinate, or nullopt if some factor is not polynomial.
  std::optional<std::vector<int>> coordinate_degrees() const;
  // Set of coordinates the target actually reads.
  std::vector<int> support() const;
  std::string spec() const;

 private:
  double eval_closed(const double* h) const;
  void grad_closed(const double* h, double* out) const;
  void lower_into(std::vector<std::vector<SeparableTerm>>& groups) const;

  Kind kind_;
  int k_ = 1;
  std::optional<int> declared_leap_;
  std::vector<std::vector<SeparableTerm>> lowered_;
};

// Grammar:
//   target    := single | product | staircase | committee | sum
//   single    := "single:" fname ["@" index]
//   product   := "product:" index {"," index}
//   staircase := "staircase:" depth
//   committee := "committee:" fname ",k=" width
//   sum       := "sum(" target {";" target} ")"
//   fname     := [number "*"] ("linear" | "tanh" | "relu" | "softplus" | "erf" | "he" n)
// Indices are 1-based. Sum terms must use disjoint coordinates.
TargetFunction parse_target(std::string_view text);

struct Teacher {
  Eigen::MatrixXd W;  // k x d, rows orthogonal with norm sqrt(d)
  int d() const { return static_cast<int>(W.cols()); }
  int k() const { return static_cast<int>(W.rows()); }
};

Teacher make_teacher(int d, int k, std::uint64_t seed);
Teacher canonical_teacher(int d, int k);

// First j >= 1 whose normalised Hermite coefficient |nu_j| / sqrt(j! E[g^2])
// exceeds tol. Throws NotFoundError if none up to max_j.
int information_exponent(const TargetFunction& t, int max_j = 12, double tol = 1e-8);

struct RegistryEntry {
  std::string name;
  std::string spec;
  std::optional<int> declared_leap;
  std::string description;
};

const std::vector<RegistryEntry>& registry();
TargetFunction registry_target(std::string_view name);

}  // namespace batchreuse::targets

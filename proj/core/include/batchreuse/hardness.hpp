#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "batchreuse/readout.hpp"
#include "batchreuse/targets.hpp"

namespace batchreuse::hardness {

using targets::TargetFunction;

// Unit vector u in the teacher basis.
struct Direction {
  Eigen::VectorXd u;
  std::string name;

  static Direction from_coefficients(const std::vector<double>& coeffs, std::string name = {});
  static Direction axis(int k, int i);  // e_{i+1}
  Direction negated() const { return {-u, name.empty() ? name : "-" + name}; }
};

struct MomentEstimate {
  int k = 0;
  double value = 0.0;
  double std_error = 0.0;  // 0 for quadrature
  double scale = 0.0;      // E[|g|^k |<h,u>|], sets the rounding floor
  double threshold = 0.0;
};

struct MomentOptions {
  int quad_nodes = 0;            // 0: chosen from the target's polynomial degree
  std::size_t n_mc = 100000;     // used when k > 5 or force_mc
  std::uint64_t seed = 1;
  bool force_mc = false;
  double floor = 1e-8;           // relative to max(1, scale)
  double se_multiplier = 5.0;
};

MomentEstimate moment_functional(const TargetFunction& t, const Direction& dir, int k,
                                 const MomentOptions& opts = {});
// Moments for powers 1..k_max from a single sweep.
std::vector<MomentEstimate> moment_functionals(const TargetFunction& t, const Direction& dir,
                                               int k_max, const MomentOptions& opts = {});

struct OrthogonalTransform {
  Eigen::MatrixXd matrix;  // k x k map applied to h*: O_perp composed with the reflection
  std::string description;
};

struct OrthoEvenWitness {
  // Direct: one transform for the direction itself. Span: the direction lies in
  // the span of axes that each carry a transform.
  enum class Kind { Direct, Span } kind = Kind::Direct;
  std::vector<std::pair<std::string, OrthogonalTransform>> transforms;
  std::string description() const;
};

enum class Status { FiniteTLearnable, HardUpToK };

struct DirectionVerdict {
  Direction direction;
  Status status = Status::HardUpToK;
  int witness_k = 0;  // for FiniteTLearnable
  int k_max = 8;
  bool even_symmetric = false;
  std::optional<bool> ortho_even_symmetric;
  std::optional<OrthoEvenWitness> witness;
  std::vector<MomentEstimate> moments;
  bool inconclusive = false;
  std::vector<std::string> warnings;
};

struct SymmetryOptions {
  int trials = 64;
  double tol = 1e-9;  // relative to max(1, |g|)
  std::uint64_t seed = 7;
};

DirectionVerdict classify_direction(const TargetFunction& t, const Direction& dir, int k_max = 8,
                                    const MomentOptions& opts = {},
                                    const SymmetryOptions& sym = {});

bool is_even_symmetric(const TargetFunction& t, const Direction& dir,
                       const SymmetryOptions& sym = {});

// Sign flips and signed permutations of an orthonormal basis of the complement
// of u, ordered by how many basis vectors they move (identity first).
std::vector<OrthogonalTransform> default_candidates(const Direction& dir);

std::optional<OrthogonalTransform> is_ortho_even_symmetric(
    const TargetFunction& t, const Direction& dir,
    const std::vector<OrthogonalTransform>& candidates, const SymmetryOptions& sym = {});

// Direct witness, or membership in the span of witnessed coordinate axes.
std::optional<OrthoEvenWitness> ortho_even_witness(const TargetFunction& t, const Direction& dir,
                                                   const SymmetryOptions& sym = {});

struct McValue {
  double value = 0.0;
  double std_error = 0.0;
};

// phi(a) = E[g(h*) sigma'(eta a g(h*) sigma'(h0) + a xi) <h*, u>] with h0, xi
// independent standard normals.
McValue phi_curve(const TargetFunction& t, const Direction& dir, const ScalarFunction& sigma,
                  double a_j, double eta, std::size_t n_mc, std::uint64_t seed);

struct TwoStepPrediction {
  Eigen::MatrixXd M1;           // p x k
  Eigen::MatrixXd M2;           // p x k
  Eigen::VectorXd overlap;      // M2 u, per neuron
  Eigen::VectorXd std_error;    // of overlap
  Eigen::VectorXd first_step;   // M1 u
};

// Two gradient steps on the reused batch in the high-dimensional limit,
// evaluated by direct sampling of (h*, omega0, omega1): the first step is in
// closed form, the second uses h1 = omega1 - eta F(h0).
TwoStepPrediction predict_two_step_overlap(const TargetFunction& t, const Readout& readout,
                                           double eta, double lambda, double alpha,
                                           const Direction& dir, std::size_t n_mc,
                                           std::uint64_t seed);

struct OnePassComplexity {
  int d_power = 0;        // steps scale as d^{d_power} (times log factor)
  bool log_factor = false;
  std::string text;
};

// One-pass SGD sample complexity from the information exponent.
OnePassComplexity one_pass_complexity(int information_exponent);

const char* to_string(Status s);
nlohmann::json to_json(const DirectionVerdict& v);

}  // namespace batchreuse::hardness

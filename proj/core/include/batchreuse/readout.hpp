#pragma once

#include <Eigen/Dense>
#include <string>

#include "batchreuse/functions.hpp"

namespace batchreuse {

// How the per-sample residual is formed.
//   Network:     loss = 1/2 (y - f(h))^2 with f(h) = sum_j a_j sigma(h_j).
//   TeacherOnly: loss = 1/2 y^2 - y f(h); the gradient treats the network output
//                as zero, which is the p = 1 convention (no symmetric partner to
//                cancel the initial output).
enum class Residual { Network, TeacherOnly };

std::string to_string(Residual r);
Residual parse_residual(const std::string& s);

enum class SecondLayer { PlusMinus, Gaussian };

// Fixed second layer plus activation. All functions act on one sample with
// pre-activations h (length p) and label y.
struct Readout {
  Eigen::VectorXd a;
  ScalarFunction sigma;
  Residual residual = Residual::Network;

  int p() const { return static_cast<int>(a.size()); }

  // Order-independent sum (terms sorted before adding), so permuting neurons
  // leaves the output bit-identical.
  double output(const double* h) const;
  double loss(const double* h, double y) const;
  // F_j = d loss / d h_j.
  void gradient(const double* h, double y, double* F) const;
  // H(i, j) = d F_i / d h_j.
  void hessian(const double* h, double y, Eigen::Ref<Eigen::MatrixXd> H) const;
  // dF_j / dy.
  void gradient_dy(const double* h, double* out) const;
};

// Residual used by default: Network for paired students, TeacherOnly for p = 1.
Residual default_residual(int p);

// p = 1: a = 1. Even p: a_i = +c_i, a_{p-1-i} = -c_i with c_i = 1/sqrt(p)
// (PlusMinus) or c_i ~ N(0, 1/p) drawn from `seed` (Gaussian).
Eigen::VectorXd make_second_layer(int p, SecondLayer law, unsigned long long seed);

// Covariance of the initial pre-activations: identity, with ones linking each
// paired neuron i and p-1-i (their weights coincide at t = 0).
Eigen::MatrixXd initial_covariance(int p);
int pair_of(int j, int p);

}  // namespace batchreuse

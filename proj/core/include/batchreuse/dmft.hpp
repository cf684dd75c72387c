#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "batchreuse/gaussian.hpp"
#include "batchreuse/readout.hpp"
#include "batchreuse/targets.hpp"

// Discrete-time dynamical mean-field theory for full-batch gradient descent on
// a reused batch, in the limit n, d -> infinity with n/d = alpha.
//
// Conventions (all kernels p x p unless noted, F = d loss / d h):
//   Lambda^t      = alpha E[dF^t/dh^t]
//   R_L^(t,s)     = alpha E[dF^t/d omega^s],  s < t   (response to the noise at s)
//   R~_L^(t,s)    = alpha E[dF^t/dh*|_s]     (p x k, h* entering through F^s)
//   g^t           = alpha E[F^t h*^T]         (p x k)
//   C_L^(t,s)     = alpha E[F^t F^s^T]
//   A_t           = (1 - eta lambda) I - eta Lambda^t
//   R_theta^(t,t) = I,
//   R_theta^(t+1,tau) = A_t R_theta^(t,tau) - eta sum_{s=tau}^{t-1} R_L^(t,s) R_theta^(s,tau)
// Pre-activation:  h^t = omega^t - eta sum_{s<t} R_theta^(t,s+1) F^s
// Weights:  theta^{t+1} = A_t theta^t - eta sum_{s<t} R_L^(t,s) theta^s - eta G^t theta* - eta u^t
//   with u a Gaussian process of covariance C_L and
//   G^t = g^t - Lambda^t M^t - sum_{s<t} R_L^(t,s) M^s,
// so that M^{t+1} = (1 - eta lambda) M^t - eta g^t and omega ~ theta in law.
namespace batchreuse::dmft {

using targets::TargetFunction;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class KernelMode { Auto, Pathwise, FiniteDifference, Stein };
enum class Formulation { TwoProcess, SingleProcess };

std::string to_string(KernelMode m);
std::string to_string(Formulation f);
KernelMode parse_kernel_mode(const std::string& s);
Formulation parse_formulation(const std::string& s);

struct DmftConfig {
  double alpha = 3.0;
  double eta = 0.1;
  double lambda = 0.0;
  int T = 6;
  std::size_t n_samples = 100000;
  std::uint64_t seed = 1;
  KernelMode kernel_mode = KernelMode::Auto;
  Formulation formulation = Formulation::TwoProcess;
  double fd_eps = 1e-4;
  // Central differences across the relu kink need a wider step to see it.
  double fd_eps_nonsmooth = 2e-2;
  int tp_ceiling = 512;
  unsigned threads = 0;
  double memory_limit_gb = 3.0;
  // Debug: sample theta^t from its linear representation and compare the
  // empirical covariance with C_theta.
  bool theta_ensemble_check = false;

  void validate(int p) const;
};

struct Kernels {
  Eigen::MatrixXd Lambda;
  std::vector<Eigen::MatrixXd> R_L;       // s < t
  std::vector<Eigen::MatrixXd> R_tilde;   // s < t, p x k; empty when not resolved
  Eigen::MatrixXd Lambda_tilde;           // p x k, direct dependence at t
  Eigen::MatrixXd G_total;                // p x k, all uses of h* at fixed omega
  Eigen::MatrixXd G_eff;                  // p x k
  Eigen::MatrixXd g, g_se;                // p x k
  std::vector<Eigen::MatrixXd> C_L;       // s <= t
  double loss_mean = 0.0, loss_se = 0.0;
  double stein_residual = 0.0;            // max |G_total - G_eff|
};

// Coefficients of each theta^t in the primitives (theta*, theta^0, u^0, u^1, ...).
class LinearRepresentation {
 public:
  LinearRepresentation(int p, int k, Eigen::MatrixXd C0, double eta, double lambda);

  int p() const { return p_; }
  int k() const { return k_; }
  int times() const { return static_cast<int>(P_.size()); }
  int width(int t) const { return k_ + p_ + t * p_; }
  int star_offset() const { return 0; }
  int theta0_offset() const { return k_; }
  int u_offset(int s) const { return k_ + p_ + s * p_; }

  // Uses the kernels of the last known time t to define theta^{t+1}.
  // C_L_row holds C_L^(t,s) for s = 0..t.
  void advance(const Eigen::MatrixXd& Lambda, const std::vector<Eigen::MatrixXd>& R_L,
               const Eigen::MatrixXd& G_eff, const std::vector<Eigen::MatrixXd>& C_L_row);

  const Eigen::MatrixXd& P(int t) const { return P_[t]; }  // p x width(t)
  Eigen::MatrixXd C_theta(int t, int s) const;
  Eigen::MatrixXd M(int t) const { return P_[t].leftCols(k_); }
  Eigen::MatrixXd R_theta(int t, int s) const { return R_theta_[t][s]; }
  // Same kernel read off the u^{s-1} coefficients of theta^t (s >= 1).
  Eigen::MatrixXd R_theta_from_coefficients(int t, int s) const;
  const Eigen::MatrixXd& C0() const { return C0_; }
  const Eigen::MatrixXd& C_L(int t, int s) const { return C_L_[t][s]; }

 private:
  int p_, k_;
  double eta_, lambda_;
  Eigen::MatrixXd C0_;
  std::vector<Eigen::MatrixXd> P_;
  std::vector<std::vector<Eigen::MatrixXd>> R_theta_;
  std::vector<std::vector<Eigen::MatrixXd>> C_L_;  // [t][s], s <= t
  std::vector<std::vector<Eigen::MatrixXd>> R_L_;  // [t][s], s < t
};

// Empirical check of C_theta by sampling the representation (debug aid).
double theta_ensemble_error(const LinearRepresentation& rep, int t, std::size_t n, std::uint64_t seed);

struct DmftTrace {
  int p = 0, k = 0, T = 0;
  Formulation formulation = Formulation::TwoProcess;
  KernelMode mode_used = KernelMode::Pathwise;
  std::vector<Eigen::MatrixXd> M, M_se;       // t = 0..T
  std::vector<Kernels> kernels;               // t = 0..T
  std::vector<std::vector<Eigen::MatrixXd>> C_theta, R_theta;  // [t][s], s <= t
  std::vector<double> omega_min_eigenvalue;   // per sampled block
  std::vector<double> noise_min_eigenvalue;   // C_L blocks (single process)
  std::vector<std::string> warnings;
  double theta_check_error = 0.0;
  double wall_seconds = 0.0;
};

// Per-replica state of the two-process form.
struct Ensemble {
  std::size_t N = 0;
  int p = 0, k = 0;
  RowMatrix hstar;       // N x k
  Eigen::VectorXd y;     // N
  RowMatrix grad_y;      // N x k, gradient of the target at h*
  std::vector<RowMatrix> omega, h, F;  // per t, N x p
  RowMatrix xi;          // N x rank, white innovations
};

// h^t = omega^t - eta sum_{s<t} R_theta^(t,s+1) F^s for one replica.
Eigen::VectorXd step_preactivation(const Eigen::VectorXd& omega,
                                   const std::vector<Eigen::VectorXd>& F_history,
                                   const LinearRepresentation& rep, int t, double eta);

class TwoProcessIntegrator {
 public:
  TwoProcessIntegrator(const DmftConfig& cfg, const TargetFunction& target, const Readout& readout);
  ~TwoProcessIntegrator();
  TwoProcessIntegrator(const TwoProcessIntegrator&) = delete;
  TwoProcessIntegrator& operator=(const TwoProcessIntegrator&) = delete;

  // Samples omega^t, forms h^t, estimates the kernels of time t and, for t < T,
  // advances to t + 1.
  void step();
  bool done() const;
  int time() const;
  const Ensemble& ensemble() const;
  const LinearRepresentation& representation() const;
  const DmftTrace& trace() const;
  DmftTrace run();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class SingleProcessIntegrator {
 public:
  SingleProcessIntegrator(const DmftConfig& cfg, const TargetFunction& target, const Readout& readout);
  ~SingleProcessIntegrator();
  SingleProcessIntegrator(const SingleProcessIntegrator&) = delete;
  SingleProcessIntegrator& operator=(const SingleProcessIntegrator&) = delete;

  void step();
  bool done() const;
  int time() const;
  const LinearRepresentation& representation() const;
  const DmftTrace& trace() const;
  // Per-replica r^t (N x p).
  const RowMatrix& r(int t) const;
  DmftTrace run();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

DmftTrace dmft_integrate(const DmftConfig& cfg, const TargetFunction& target, const Readout& readout);
DmftTrace single_process_integrate(const DmftConfig& cfg, const TargetFunction& target,
                                   const Readout& readout);
// Fresh-batch limit: pre-activations stay jointly Gaussian with (C_theta^(t,t), M^t).
DmftTrace one_pass_effective(const DmftConfig& cfg, const TargetFunction& target,
                             const Readout& readout);

nlohmann::json kernels_json(const DmftTrace& trace);

}  // namespace batchreuse::dmft

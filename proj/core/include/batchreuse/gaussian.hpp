#pragma once

#include <Eigen/Dense>
#include <vector>

namespace batchreuse {

struct PsdFactor {
  Eigen::MatrixXd L;           // n x r with L L^T = S restricted to kept eigenvalues
  double min_eigenvalue = 0.0;  // of the symmetrised input, before truncation
  double max_eigenvalue = 0.0;
};

// Rank-revealing factor of a symmetric PSD matrix. Eigenvalues below
// rel_tol * max(1, max eigenvalue) are dropped; that threshold plays the role of
// diagonal jitter but keeps exactly degenerate directions (paired neurons) exact.
// Throws NumericalError when the matrix is indefinite beyond neg_tol (relative).
PsdFactor psd_factor(const Eigen::MatrixXd& S, double rel_tol = 1e-10, double neg_tol = 1e-6);

// Joint Gaussian vector built block by block: x = L xi with xi white and L
// block lower triangular. Adding a block y with Cov(y, x) = cross and
// Cov(y, y) = self gives y = K xi + L_new xi_new.
class GaussianSequenceSampler {
 public:
  struct Extension {
    Eigen::MatrixXd K;      // n_y x (current rank)
    Eigen::MatrixXd L_new;  // n_y x r_new
    double min_eigenvalue = 0.0;
  };

  Extension extend(const Eigen::MatrixXd& cross, const Eigen::MatrixXd& self);

  Eigen::Index size() const { return n_; }
  Eigen::Index rank() const { return r_; }
  // Full factor, n x r.
  Eigen::MatrixXd factor() const;
  const std::vector<Eigen::Index>& block_sizes() const { return sizes_; }
  const std::vector<Eigen::Index>& block_ranks() const { return ranks_; }

 private:
  // Row-block b of L, split by column block.
  std::vector<std::vector<Eigen::MatrixXd>> rows_;
  // Diagonal blocks as V_b and D_b^{-1/2} for the forward solve.
  std::vector<Eigen::MatrixXd> diag_pinv_;
  std::vector<Eigen::Index> sizes_, ranks_;
  Eigen::Index n_ = 0, r_ = 0;
};

}  // namespace batchreuse

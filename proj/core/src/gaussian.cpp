#include "batchreuse/gaussian.hpp"

#include <cmath>
#include <sstream>

#include "batchreuse/errors.hpp"

namespace batchreuse {

PsdFactor psd_factor(const Eigen::MatrixXd& S, double rel_tol, double neg_tol) {
  PsdFactor out;
  const Eigen::Index n = S.rows();
  if (n == 0) {
    out.L.resize(0, 0);
    return out;
  }
  Eigen::MatrixXd sym = 0.5 * (S + S.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  const auto& ev = es.eigenvalues();
  out.min_eigenvalue = ev.minCoeff();
  out.max_eigenvalue = ev.maxCoeff();
  const double scale = std::max(1.0, out.max_eigenvalue);
  if (out.min_eigenvalue < -neg_tol * scale) {
    std::ostringstream os;
    os << "covariance block is indefinite: min eigenvalue " << out.min_eigenvalue
       << ", max eigenvalue " << out.max_eigenvalue;
    throw NumericalError(os.str());
  }
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = n - 1; i >= 0; --i)
    if (ev[i] > rel_tol * scale) keep.push_back(i);
  out.L.resize(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c)
    out.L.col(c) = es.eigenvectors().col(keep[c]) * std::sqrt(ev[keep[c]]);
  return out;
}

GaussianSequenceSampler::Extension GaussianSequenceSampler::extend(const Eigen::MatrixXd& cross,
                                                                   const Eigen::MatrixXd& self) {
  const Eigen::Index ny = self.rows();
  if (self.cols() != ny || cross.rows() != ny || cross.cols() != n_)
    throw ConfigError("sampler extension has inconsistent block shapes");
  Extension ext;
  ext.K.resize(ny, r_);
  // Forward substitution over blocks: K_b L_bb^T = cross_b - sum_{c<b} K_c L_bc^T.
  Eigen::Index row0 = 0, col0 = 0;
  for (std::size_t b = 0; b < sizes_.size(); ++b) {
    Eigen::MatrixXd rhs = cross.middleCols(row0, sizes_[b]);
    Eigen::Index cc = 0;
    for (std::size_t c = 0; c < b; ++c) {
      rhs.noalias() -= ext.K.middleCols(cc, ranks_[c]) * rows_[b][c].transpose();
      cc += ranks_[c];
    }
    ext.K.middleCols(col0, ranks_[b]) = rhs * diag_pinv_[b];
    row0 += sizes_[b];
    col0 += ranks_[b];
  }
  Eigen::MatrixXd schur = self - ext.K * ext.K.transpose();
  PsdFactor f = psd_factor(schur);
  ext.L_new = f.L;
  ext.min_eigenvalue = f.min_eigenvalue;

  std::vector<Eigen::MatrixXd> row;
  Eigen::Index cc = 0;
  for (std::size_t c = 0; c < sizes_.size(); ++c) {
    row.push_back(ext.K.middleCols(cc, ranks_[c]));
    cc += ranks_[c];
  }
  row.push_back(f.L);
  rows_.push_back(std::move(row));
  // L_bb = V sqrt(D) has orthogonal columns, so L_bb (L_bb^T L_bb)^{-1} = V D^{-1/2}.
  Eigen::MatrixXd pinv = f.L;
  for (Eigen::Index c = 0; c < pinv.cols(); ++c) pinv.col(c) /= f.L.col(c).squaredNorm();
  diag_pinv_.push_back(std::move(pinv));
  sizes_.push_back(ny);
  ranks_.push_back(f.L.cols());
  n_ += ny;
  r_ += f.L.cols();
  return ext;
}

Eigen::MatrixXd GaussianSequenceSampler::factor() const {
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n_, r_);
  Eigen::Index row0 = 0;
  for (std::size_t b = 0; b < rows_.size(); ++b) {
    Eigen::Index col0 = 0;
    for (std::size_t c = 0; c <= b; ++c) {
      L.block(row0, col0, sizes_[b], ranks_[c]) = rows_[b][c];
      col0 += ranks_[c];
    }
    row0 += sizes_[b];
  }
  return L;
}

}  // namespace batchreuse

#include "batchreuse/dmft.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "batchreuse/errors.hpp"
#include "batchreuse/parallel.hpp"
#include "rng.hpp"

namespace batchreuse::dmft {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(KernelMode m) {
  switch (m) {
    case KernelMode::Auto: return "auto";
    case KernelMode::Pathwise: return "pathwise";
    case KernelMode::FiniteDifference: return "finite_difference";
    case KernelMode::Stein: return "stein";
  }
  return "auto";
}

std::string to_string(Formulation f) {
  return f == Formulation::TwoProcess ? "two_process" : "single_process";
}

KernelMode parse_kernel_mode(const std::string& s) {
  if (s == "auto") return KernelMode::Auto;
  if (s == "pathwise") return KernelMode::Pathwise;
  if (s == "finite_difference" || s == "fd") return KernelMode::FiniteDifference;
  if (s == "stein") return KernelMode::Stein;
  throw ConfigError("unknown kernel mode '" + s + "'", "dmft.kernel_mode");
}

Formulation parse_formulation(const std::string& s) {
  if (s == "two_process") return Formulation::TwoProcess;
  if (s == "single_process") return Formulation::SingleProcess;
  throw ConfigError("unknown formulation '" + s + "'", "dmft.formulation");
}

void DmftConfig::validate(int p) const {
  if (!(alpha > 0)) throw ConfigError("alpha must be positive", "alpha");
  if (!(eta > 0)) throw ConfigError("eta must be positive", "eta");
  if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative", "lambda");
  if (T < 0) throw ConfigError("T must be non-negative", "T");
  if (n_samples < 100) throw ConfigError("dmft.samples must be at least 100", "dmft.samples");
  if (!(fd_eps > 0) || !(fd_eps_nonsmooth > 0))
    throw ConfigError("finite-difference steps must be positive", "dmft.fd_eps");
  if (static_cast<long>(T + 1) * p > tp_ceiling) {
    std::ostringstream os;
    os << "(T+1)*p = " << (T + 1) * p << " exceeds the DMFT ceiling " << tp_ceiling
       << "; lower T or p, or raise dmft.tp_ceiling";
    throw ConfigError(os.str(), "dmft.tp_ceiling");
  }
}

// ---------------------------------------------------------------- representation

LinearRepresentation::LinearRepresentation(int p, int k, MatrixXd C0, double eta, double lambda)
    : p_(p), k_(k), eta_(eta), lambda_(lambda), C0_(std::move(C0)) {
  MatrixXd P0 = MatrixXd::Zero(p, width(0));
  P0.block(0, theta0_offset(), p, p).setIdentity();
  P_.push_back(std::move(P0));
  R_theta_.push_back({MatrixXd::Identity(p, p)});
}

void LinearRepresentation::advance(const MatrixXd& Lambda, const std::vector<MatrixXd>& R_L,
                                   const MatrixXd& G_eff, const std::vector<MatrixXd>& C_L_row) {
  const int t = times() - 1;
  if (static_cast<int>(R_L.size()) != t || static_cast<int>(C_L_row.size()) != t + 1)
    throw ConfigError("kernel history does not match the representation time");
  const MatrixXd A = (1.0 - eta_ * lambda_) * MatrixXd::Identity(p_, p_) - eta_ * Lambda;
  MatrixXd next = MatrixXd::Zero(p_, width(t + 1));
  next.leftCols(width(t)) = A * P_[t];
  for (int s = 0; s < t; ++s) next.leftCols(width(s)) -= eta_ * R_L[s] * P_[s];
  next.leftCols(k_) -= eta_ * G_eff;
  next.block(0, u_offset(t), p_, p_) -= eta_ * MatrixXd::Identity(p_, p_);
  P_.push_back(std::move(next));

  std::vector<MatrixXd> row(t + 2);
  row[t + 1] = MatrixXd::Identity(p_, p_);
  for (int tau = 0; tau <= t; ++tau) {
    MatrixXd r = A * R_theta_[t][tau];
    for (int s = tau; s < t; ++s) r -= eta_ * R_L[s] * R_theta_[s][tau];
    row[tau] = std::move(r);
  }
  R_theta_.push_back(std::move(row));
  R_L_.push_back(R_L);
  C_L_.push_back(C_L_row);
}

Eigen::MatrixXd LinearRepresentation::C_theta(int t, int s) const {
  // Cov(pi) = blockdiag(I_k, C0, C_L) over the primitives.
  const MatrixXd& Pt = P_[t];
  const MatrixXd& Ps = P_[s];
  MatrixXd out = Pt.leftCols(k_) * Ps.leftCols(k_).transpose();
  out += Pt.block(0, theta0_offset(), p_, p_) * C0_ * Ps.block(0, theta0_offset(), p_, p_).transpose();
  const int nt = t, ns = s;  // u^0..u^{t-1} enter theta^t
  for (int a = 0; a < nt; ++a) {
    auto Pa = Pt.block(0, u_offset(a), p_, p_);
    for (int b = 0; b < ns; ++b) {
      const MatrixXd& c = a >= b ? C_L_[a][b] : C_L_[b][a];
      if (a >= b)
        out += Pa * c * Ps.block(0, u_offset(b), p_, p_).transpose();
      else
        out += Pa * c.transpose() * Ps.block(0, u_offset(b), p_, p_).transpose();
    }
  }
  return out;
}

Eigen::MatrixXd LinearRepresentation::R_theta_from_coefficients(int t, int s) const {
  if (s < 1 || s > t) throw ConfigError("R_theta_from_coefficients needs 1 <= s <= t");
  return -P_[t].block(0, u_offset(s - 1), p_, p_) / eta_;
}

double theta_ensemble_error(const LinearRepresentation& rep, int t, std::size_t n, std::uint64_t seed) {
  const int p = rep.p(), k = rep.k(), w = rep.width(t);
  MatrixXd cov = MatrixXd::Zero(w, w);
  cov.topLeftCorner(k, k).setIdentity();
  cov.block(k, k, p, p) = rep.C0();
  for (int a = 0; a < t; ++a)
    for (int b = 0; b <= a; ++b) {
      cov.block(rep.u_offset(a), rep.u_offset(b), p, p) = rep.C_L(a, b);
      cov.block(rep.u_offset(b), rep.u_offset(a), p, p) = rep.C_L(a, b).transpose();
    }
  MatrixXd L = psd_factor(cov).L;
  auto eng = detail::make_engine(seed, {detail::kMcStream, static_cast<std::uint64_t>(t)});
  detail::Normal normal;
  MatrixXd S = MatrixXd::Zero(p, p);
  VectorXd xi(L.cols());
  for (std::size_t i = 0; i < n; ++i) {
    normal.fill(eng, xi.data(), xi.data() + xi.size());
    VectorXd theta = rep.P(t) * (L * xi);
    S += theta * theta.transpose();
  }
  S /= static_cast<double>(n);
  return (S - rep.C_theta(t, t)).cwiseAbs().maxCoeff();
}

Eigen::VectorXd step_preactivation(const VectorXd& omega, const std::vector<VectorXd>& F_history,
                                   const LinearRepresentation& rep, int t, double eta) {
  VectorXd h = omega;
  for (int s = 0; s < t; ++s) h -= eta * rep.R_theta(t, s + 1) * F_history[s];
  return h;
}

// ---------------------------------------------------------------- shared pieces

namespace {

constexpr std::size_t kShard = 2048;

struct Accum {
  MatrixXd Fh, Fh2;  // sum F h*^T and its elementwise square
  MatrixXd FF;       // [F^t F^0^T | ... | F^t F^t^T]
  MatrixXd D;        // derivative sums, layout chosen by the integrator
  MatrixXd Fxi;      // sum F xi^T (Stein)
  double loss = 0.0, loss2 = 0.0;

  void reset(int p, int k, int nff, Eigen::Index nd, Eigen::Index nxi) {
    Fh = MatrixXd::Zero(p, k);
    Fh2 = MatrixXd::Zero(p, k);
    FF = MatrixXd::Zero(p, nff);
    D = MatrixXd::Zero(p, nd);
    Fxi = MatrixXd::Zero(p, nxi);
    loss = loss2 = 0.0;
  }
  void add(const Accum& o) {
    Fh += o.Fh;
    Fh2 += o.Fh2;
    FF += o.FF;
    D += o.D;
    Fxi += o.Fxi;
    loss += o.loss;
    loss2 += o.loss2;
  }
  void add_sample(const VectorXd& F, const double* hstar, int k, double loss_value) {
    for (int l = 0; l < k; ++l) {
      VectorXd c = F * hstar[l];
      Fh.col(l) += c;
      Fh2.col(l) += c.cwiseAbs2();
    }
    loss += loss_value;
    loss2 += loss_value * loss_value;
  }
};

unsigned resolve_threads(unsigned t) { return t == 0 ? default_threads() : t; }

std::size_t shard_count(std::size_t n) { return (n + kShard - 1) / kShard; }

void check_finite(const MatrixXd& m, const char* what, int t) {
  if (!m.allFinite()) {
    std::ostringstream os;
    os << "non-finite " << what << " at DMFT step " << t;
    throw NumericalError(os.str());
  }
}

void check_memory(double bytes, const DmftConfig& cfg) {
  if (bytes > cfg.memory_limit_gb * 1e9) {
    std::ostringstream os;
    os << "DMFT ensemble needs about " << bytes / 1e9 << " GB, above the " << cfg.memory_limit_gb
       << " GB limit; reduce dmft.samples, T or p, or use kernel_mode finite_difference";
    throw ConfigError(os.str(), "dmft.samples");
  }
}

KernelMode resolve_mode(const DmftConfig& cfg, const Readout& readout, std::vector<std::string>& warnings) {
  KernelMode m = cfg.kernel_mode;
  if (m == KernelMode::Auto)
    return readout.sigma.smooth() ? KernelMode::Pathwise : KernelMode::FiniteDifference;
  if (m == KernelMode::Pathwise && !readout.sigma.smooth()) {
    warnings.push_back("pathwise kernels need a twice differentiable activation; " +
                       readout.sigma.name() + " falls back to finite differences");
    return KernelMode::FiniteDifference;
  }
  return m;
}

// Common reduction of sums into the kernels reported at time t.
void finish_basic(Kernels& ker, const Accum& acc, int t, int p, int k, std::size_t N, double alpha) {
  const double n = static_cast<double>(N);
  ker.g = alpha * acc.Fh / n;
  MatrixXd mean = acc.Fh / n;
  MatrixXd var = (acc.Fh2 / n - mean.cwiseAbs2()).cwiseMax(0.0) * (n / (n - 1.0));
  ker.g_se = alpha * (var / n).cwiseSqrt();
  ker.C_L.resize(t + 1);
  for (int s = 0; s <= t; ++s) {
    ker.C_L[s] = alpha * acc.FF.middleCols(s * p, p) / n;
    if (s == t) ker.C_L[s] = 0.5 * (ker.C_L[s] + ker.C_L[s].transpose()).eval();
  }
  ker.loss_mean = acc.loss / n;
  const double lv = std::max(0.0, acc.loss2 / n - ker.loss_mean * ker.loss_mean);
  ker.loss_se = std::sqrt(lv / (n - 1.0));
  (void)k;
}

MatrixXd stein_gradient(const MatrixXd& Fxi_mean, const MatrixXd& L) {
  // x = L xi with L of full column rank: d/dx = E[F xi^T] (L^T L)^{-1} L^T.
  MatrixXd gram = L.transpose() * L;
  return Fxi_mean * gram.ldlt().solve(L.transpose());
}

void propagate_M(DmftTrace& tr, const Kernels& ker, double eta, double lambda) {
  const MatrixXd& M = tr.M.back();
  const MatrixXd& se = tr.M_se.back();
  tr.M.push_back((1.0 - eta * lambda) * M - eta * ker.g);
  tr.M_se.push_back((((1.0 - eta * lambda) * se).cwiseAbs2() + (eta * ker.g_se).cwiseAbs2()).cwiseSqrt());
}

void record_rows(DmftTrace& tr, const LinearRepresentation& rep, int t) {
  std::vector<MatrixXd> C(t + 1), R(t + 1);
  for (int s = 0; s <= t; ++s) {
    C[s] = rep.C_theta(t, s);
    R[s] = rep.R_theta(t, s);
  }
  tr.C_theta.push_back(std::move(C));
  tr.R_theta.push_back(std::move(R));
}

MatrixXd outer_dy(const Readout& readout, const double* h, const double* grad_y, int k) {
  VectorXd dy(readout.p());
  readout.gradient_dy(h, dy.data());
  return dy * Eigen::Map<const Eigen::RowVectorXd>(grad_y, k);
}

}  // namespace

// ---------------------------------------------------------------- two-process form

struct TwoProcessIntegrator::Impl {
  DmftConfig cfg;
  const TargetFunction& target;
  Readout readout;
  int p, k, t = 0;
  std::size_t N;
  unsigned threads;
  KernelMode mode;
  double eps;
  LinearRepresentation rep;
  GaussianSequenceSampler sampler;
  Ensemble ens;
  DmftTrace trace;
  // Pathwise Jacobians: Q[t][s] = dF^t/d omega^s (p x p), Qs[t][s] = dF^t/dh*|_s (p x k).
  std::vector<std::vector<RowMatrix>> Q, Qs;
  MatrixXd Lstar;
  // R_theta rows cached for the replica loop.
  std::vector<std::vector<MatrixXd>> R;

  Impl(const DmftConfig& c, const TargetFunction& tg, const Readout& ro)
      : cfg(c), target(tg), readout(ro), p(ro.p()), k(tg.k()), N(c.n_samples),
        threads(resolve_threads(c.threads)), mode(KernelMode::Pathwise), eps(c.fd_eps),
        rep(ro.p(), tg.k(), initial_covariance(ro.p()), c.eta, c.lambda) {
    cfg.validate(p);
    mode = resolve_mode(cfg, readout, trace.warnings);
    if (mode == KernelMode::FiniteDifference && !readout.sigma.smooth()) eps = cfg.fd_eps_nonsmooth;
    const int T = cfg.T;
    const double rmax = k + (T + 1.0) * p;
    double per = 2.0 * k + 1 + 3.0 * (T + 1) * p + rmax;
    if (mode == KernelMode::Pathwise)
      per += 0.5 * (T + 1.0) * (T + 2.0) * (p * p + p * k);
    check_memory(8.0 * per * static_cast<double>(N), cfg);

    trace.p = p;
    trace.k = k;
    trace.T = T;
    trace.formulation = Formulation::TwoProcess;
    trace.mode_used = mode;
    trace.M.push_back(MatrixXd::Zero(p, k));
    trace.M_se.push_back(MatrixXd::Zero(p, k));

    ens.N = N;
    ens.p = p;
    ens.k = k;
    ens.hstar.resize(N, k);
    ens.y.resize(N);
    ens.grad_y.resize(N, k);
    ens.xi = RowMatrix::Zero(N, static_cast<Eigen::Index>(rmax));
  }

  void replica(std::size_t i, Accum& acc, int first_new, int rank_after, const MatrixXd& K,
               const MatrixXd& Lnew) {
    detail::Normal normal;
    auto eng = detail::make_engine(cfg.seed, {detail::kReplicaStream, 0, i, static_cast<std::uint64_t>(t)});
    double* xi = ens.xi.row(i).data();
    normal.fill(eng, xi + first_new, xi + rank_after);
    if (t == 0) {
      Eigen::Map<Eigen::RowVectorXd>(ens.hstar.row(i).data(), k) =
          (Lstar * Eigen::Map<const VectorXd>(xi, k)).transpose();
      ens.y[i] = target.eval({ens.hstar.row(i).data(), static_cast<std::size_t>(k)});
      target.gradient({ens.hstar.row(i).data(), static_cast<std::size_t>(k)},
                      {ens.grad_y.row(i).data(), static_cast<std::size_t>(k)});
    }
    const Eigen::Index kc = K.cols();
    Eigen::Map<VectorXd> om(ens.omega[t].row(i).data(), p);
    om = K * Eigen::Map<const VectorXd>(xi, kc) + Lnew * Eigen::Map<const VectorXd>(xi + kc, Lnew.cols());
    Eigen::Map<VectorXd> h(ens.h[t].row(i).data(), p);
    h = om;
    for (int s = 0; s < t; ++s)
      h.noalias() -= cfg.eta * R[t][s + 1] * Eigen::Map<const VectorXd>(ens.F[s].row(i).data(), p);
    const double y = ens.y[i];
    VectorXd F(p);
    readout.gradient(h.data(), y, F.data());
    Eigen::Map<VectorXd>(ens.F[t].row(i).data(), p) = F;
    acc.add_sample(F, ens.hstar.row(i).data(), k, readout.loss(h.data(), y));
    for (int s = 0; s <= t; ++s)
      acc.FF.middleCols(s * p, p) += F * Eigen::Map<const Eigen::RowVectorXd>(ens.F[s].row(i).data(), p);

    // Derivative layout: [dF/dh*|_0 .. dF/dh*|_t (k each) | dF/domega^0 .. dF/domega^t (p each)].
    const Eigen::Index off_w = static_cast<Eigen::Index>(t + 1) * k;
    if (mode == KernelMode::Pathwise) {
      MatrixXd H(p, p);
      readout.hessian(h.data(), y, H);
      MatrixXd D = outer_dy(readout, h.data(), ens.grad_y.row(i).data(), k);
      Eigen::Map<MatrixXd>(Q[t][t].row(i).data(), p, p) = H;
      Eigen::Map<MatrixXd>(Qs[t][t].row(i).data(), p, k) = D;
      for (int s = 0; s < t; ++s) {
        MatrixXd J = MatrixXd::Zero(p, p), Js = MatrixXd::Zero(p, k);
        for (int q = s; q < t; ++q) {
          J.noalias() += R[t][q + 1] * Eigen::Map<const MatrixXd>(Q[q][s].row(i).data(), p, p);
          Js.noalias() += R[t][q + 1] * Eigen::Map<const MatrixXd>(Qs[q][s].row(i).data(), p, k);
        }
        Eigen::Map<MatrixXd>(Q[t][s].row(i).data(), p, p) = -cfg.eta * H * J;
        Eigen::Map<MatrixXd>(Qs[t][s].row(i).data(), p, k) = -cfg.eta * H * Js;
      }
      for (int s = 0; s <= t; ++s) {
        acc.D.middleCols(s * k, k) += Eigen::Map<const MatrixXd>(Qs[t][s].row(i).data(), p, k);
        acc.D.middleCols(off_w + s * p, p) += Eigen::Map<const MatrixXd>(Q[t][s].row(i).data(), p, p);
      }
    } else if (mode == KernelMode::FiniteDifference) {
      VectorXd up(p), down(p);
      std::vector<VectorXd> work(t + 1, VectorXd(p));
      for (int s = 0; s <= t; ++s) {
        for (int l = 0; l < k; ++l) {
          resim(i, s, true, l, eps, work, up);
          resim(i, s, true, l, -eps, work, down);
          acc.D.col(s * k + l) += (up - down) / (2.0 * eps);
        }
        for (int j = 0; j < p; ++j) {
          resim(i, s, false, j, eps, work, up);
          resim(i, s, false, j, -eps, work, down);
          acc.D.col(off_w + s * p + j) += (up - down) / (2.0 * eps);
        }
      }
    } else {
      acc.Fxi += F * Eigen::Map<const Eigen::RowVectorXd>(xi, rank_after);
    }
  }

  // F^t after shifting omega^{s0}_idx (or h* where F^{s0} reads it) by e.
  void resim(std::size_t i, int s0, bool star, int idx, double e, std::vector<VectorXd>& Fp,
             VectorXd& out) const {
    for (int q = 0; q < s0; ++q) Fp[q] = Eigen::Map<const VectorXd>(ens.F[q].row(i).data(), p);
    VectorXd hq(p);
    std::vector<double> hs(ens.hstar.row(i).data(), ens.hstar.row(i).data() + k);
    for (int q = s0; q <= t; ++q) {
      hq = Eigen::Map<const VectorXd>(ens.omega[q].row(i).data(), p);
      if (!star && q == s0) hq[idx] += e;
      for (int r = 0; r < q; ++r) hq.noalias() -= cfg.eta * R[q][r + 1] * Fp[r];
      double y = ens.y[i];
      if (star && q == s0) {
        hs[idx] += e;
        y = target.eval(hs);
        hs[idx] -= e;
      }
      readout.gradient(hq.data(), y, Fp[q].data());
    }
    out = Fp[t];
  }

  void step() {
    if (t > cfg.T) throw ConfigError("DMFT integrator already finished");
    record_rows(trace, rep, t);
    R.push_back({});
    for (int s = 0; s <= t; ++s) R[t].push_back(rep.R_theta(t, s));

    const int first_new = static_cast<int>(sampler.rank());
    if (t == 0) {
      Lstar = sampler.extend(MatrixXd(k, 0), MatrixXd::Identity(k, k)).L_new;
    }
    MatrixXd cross(p, sampler.size());
    cross.leftCols(k) = rep.M(t);
    for (int s = 0; s < t; ++s) cross.middleCols(k + s * p, p) = rep.C_theta(t, s);
    auto ext = sampler.extend(cross, rep.C_theta(t, t));
    trace.omega_min_eigenvalue.push_back(ext.min_eigenvalue);
    const int rank_after = static_cast<int>(sampler.rank());

    ens.omega.emplace_back(N, p);
    ens.h.emplace_back(N, p);
    ens.F.emplace_back(N, p);
    if (mode == KernelMode::Pathwise) {
      Q.emplace_back();
      Qs.emplace_back();
      for (int s = 0; s <= t; ++s) {
        Q[t].emplace_back(N, p * p);
        Qs[t].emplace_back(N, p * k);
      }
    }

    const Eigen::Index nd = static_cast<Eigen::Index>(t + 1) * (k + p);
    const std::size_t shards = shard_count(N);
    std::vector<Accum> acc(shards);
    parallel_for(shards, threads, [&](std::size_t b) {
      acc[b].reset(p, k, (t + 1) * p, mode == KernelMode::Stein ? 0 : nd,
                   mode == KernelMode::Stein ? rank_after : 0);
      const std::size_t end = std::min(N, (b + 1) * kShard);
      for (std::size_t i = b * kShard; i < end; ++i) replica(i, acc[b], first_new, rank_after, ext.K, ext.L_new);
    });
    for (std::size_t b = 1; b < shards; ++b) acc[0].add(acc[b]);
    const Accum& sum = acc[0];

    Kernels ker;
    finish_basic(ker, sum, t, p, k, N, cfg.alpha);
    const double n = static_cast<double>(N);
    std::vector<MatrixXd> dw(t + 1), dstar(t + 1);
    if (mode == KernelMode::Stein) {
      MatrixXd grad = cfg.alpha * stein_gradient(sum.Fxi / n, sampler.factor());
      ker.G_total = grad.leftCols(k);
      for (int s = 0; s <= t; ++s) dw[s] = grad.middleCols(k + s * p, p);
    } else {
      const Eigen::Index off_w = static_cast<Eigen::Index>(t + 1) * k;
      ker.G_total = MatrixXd::Zero(p, k);
      for (int s = 0; s <= t; ++s) {
        dstar[s] = cfg.alpha * sum.D.middleCols(s * k, k) / n;
        dw[s] = cfg.alpha * sum.D.middleCols(off_w + s * p, p) / n;
        ker.G_total += dstar[s];
      }
      ker.Lambda_tilde = dstar[t];
      for (int s = 0; s < t; ++s) ker.R_tilde.push_back(dstar[s]);
    }
    ker.Lambda = dw[t];
    for (int s = 0; s < t; ++s) ker.R_L.push_back(dw[s]);
    if (mode == KernelMode::Stein) ker.Lambda_tilde = MatrixXd();
    const MatrixXd& M = trace.M[t];
    ker.G_eff = ker.g - ker.Lambda * M;
    for (int s = 0; s < t; ++s) ker.G_eff -= ker.R_L[s] * trace.M[s];
    ker.stein_residual = (ker.G_total - ker.G_eff).cwiseAbs().maxCoeff();
    check_finite(ker.Lambda, "Lambda", t);
    check_finite(ker.g, "g", t);
    for (const auto& c : ker.C_L) check_finite(c, "C_L", t);

    if (t < cfg.T) {
      propagate_M(trace, ker, cfg.eta, cfg.lambda);
      rep.advance(ker.Lambda, ker.R_L, ker.G_eff, ker.C_L);
    }
    trace.kernels.push_back(std::move(ker));
    ++t;
    if (t > cfg.T && cfg.theta_ensemble_check)
      trace.theta_check_error = theta_ensemble_error(rep, cfg.T, 200000, cfg.seed);
  }
};

TwoProcessIntegrator::TwoProcessIntegrator(const DmftConfig& cfg, const TargetFunction& target,
                                           const Readout& readout)
    : impl_(std::make_unique<Impl>(cfg, target, readout)) {}
TwoProcessIntegrator::~TwoProcessIntegrator() = default;
void TwoProcessIntegrator::step() { impl_->step(); }
bool TwoProcessIntegrator::done() const { return impl_->t > impl_->cfg.T; }
int TwoProcessIntegrator::time() const { return impl_->t; }
const Ensemble& TwoProcessIntegrator::ensemble() const { return impl_->ens; }
const LinearRepresentation& TwoProcessIntegrator::representation() const { return impl_->rep; }
const DmftTrace& TwoProcessIntegrator::trace() const { return impl_->trace; }
DmftTrace TwoProcessIntegrator::run() {
  auto start = std::chrono::steady_clock::now();
  while (!done()) step();
  impl_->trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return impl_->trace;
}

// ---------------------------------------------------------------- single-process form
//
// h^t = r^t + M^t h*, r^0 = omega^0,
// r^{t+1} = A_t r^t - eta sum_{s<t} R_L^(t,s) r^s - eta F^t - eta zeta^t, zeta ~ GP(C_L).
// Kernels are estimated as derivatives with respect to the primitives
// (h*, omega^0, zeta^0, ...) and converted to omega-derivatives through the
// linear representation, whose u^{s-1} coefficients of theta^s are -eta I.

struct SingleProcessIntegrator::Impl {
  DmftConfig cfg;
  const TargetFunction& target;
  Readout readout;
  int p, k, t = 0, wmax;
  std::size_t N;
  unsigned threads;
  KernelMode mode;
  double eps;
  LinearRepresentation rep;
  MatrixXd L0;
  int r0;
  GaussianSequenceSampler zeta_sampler;
  DmftTrace trace;
  RowMatrix hstar, grad_y, xi;  // xi: [h* (k) | omega^0 (r0) | zeta innovations]
  VectorXd y;
  std::vector<RowMatrix> r, h, F, zeta;
  std::vector<RowMatrix> Jr;  // per t, N x (p * wmax): d r^t / d pi
  std::vector<MatrixXd> A;    // A_t
  std::vector<RowMatrix> dF_cache;  // pathwise dF^t/d pi, kept between the two passes

  Impl(const DmftConfig& c, const TargetFunction& tg, const Readout& ro)
      : cfg(c), target(tg), readout(ro), p(ro.p()), k(tg.k()), N(c.n_samples),
        threads(resolve_threads(c.threads)), mode(KernelMode::Pathwise), eps(c.fd_eps),
        rep(ro.p(), tg.k(), initial_covariance(ro.p()), c.eta, c.lambda) {
    cfg.validate(p);
    mode = resolve_mode(cfg, readout, trace.warnings);
    if (mode == KernelMode::FiniteDifference && !readout.sigma.smooth()) eps = cfg.fd_eps_nonsmooth;
    L0 = psd_factor(rep.C0()).L;
    r0 = static_cast<int>(L0.cols());
    const int T = cfg.T;
    wmax = rep.width(T);
    double per = 2.0 * k + 1 + k + r0 + T * p + 4.0 * (T + 1) * p;
    if (mode == KernelMode::Pathwise) per += (T + 1.0) * p * wmax;
    check_memory(8.0 * per * static_cast<double>(N), cfg);

    trace.p = p;
    trace.k = k;
    trace.T = T;
    trace.formulation = Formulation::SingleProcess;
    trace.mode_used = mode;
    trace.M.push_back(MatrixXd::Zero(p, k));
    trace.M_se.push_back(MatrixXd::Zero(p, k));
    hstar.resize(N, k);
    grad_y.resize(N, k);
    y.resize(N);
    xi = RowMatrix::Zero(N, k + r0 + static_cast<Eigen::Index>(T) * p);
  }

  int xi_zeta_offset() const { return k + r0; }

  void draw_initial(std::size_t i) {
    detail::Normal normal;
    auto eng = detail::make_engine(cfg.seed, {detail::kReplicaStream, 1, i, 0});
    double* x = xi.row(i).data();
    normal.fill(eng, x, x + k + r0);
    for (int l = 0; l < k; ++l) hstar(i, l) = x[l];
    y[i] = target.eval({hstar.row(i).data(), static_cast<std::size_t>(k)});
    target.gradient({hstar.row(i).data(), static_cast<std::size_t>(k)},
                    {grad_y.row(i).data(), static_cast<std::size_t>(k)});
    Eigen::Map<VectorXd>(r[0].row(i).data(), p) = L0 * Eigen::Map<const VectorXd>(x + k, r0);
    if (mode == KernelMode::Pathwise) {
      Eigen::Map<MatrixXd> J(Jr[0].row(i).data(), p, wmax);
      J.setZero();
      J.block(0, rep.theta0_offset(), p, p).setIdentity();
    }
  }

  // F^t with primitive column c shifted by e.
  void resim(std::size_t i, int c, double e, std::vector<VectorXd>& rp, std::vector<VectorXd>& Fp,
             VectorXd& out) const {
    std::vector<double> hs(hstar.row(i).data(), hstar.row(i).data() + k);
    double yv = y[i];
    int start = 0;
    if (c < k) {
      hs[c] += e;
      yv = target.eval(hs);
    } else if (c >= k + p) {
      start = (c - k - p) / p + 1;
    }
    Eigen::Map<const VectorXd> hsv(hs.data(), k);
    for (int q = 0; q < start; ++q) {
      rp[q] = Eigen::Map<const VectorXd>(r[q].row(i).data(), p);
      Fp[q] = Eigen::Map<const VectorXd>(F[q].row(i).data(), p);
    }
    if (start == 0) {
      rp[0] = Eigen::Map<const VectorXd>(r[0].row(i).data(), p);
      if (c >= k && c < k + p) rp[0][c - k] += e;
    } else {
      const int q = start - 1;  // zeta^q was shifted
      VectorXd z = Eigen::Map<const VectorXd>(zeta[q].row(i).data(), p);
      z[(c - k - p) % p] += e;
      rp[start] = A[q] * rp[q] - cfg.eta * Fp[q] - cfg.eta * z;
      for (int s = 0; s < q; ++s) rp[start].noalias() -= cfg.eta * trace.kernels[q].R_L[s] * rp[s];
    }
    for (int q = start; q <= t; ++q) {
      VectorXd hq = rp[q] + trace.M[q] * hsv;
      readout.gradient(hq.data(), yv, Fp[q].data());
      if (q == t) break;
      rp[q + 1] = A[q] * rp[q] - cfg.eta * Fp[q] -
                  cfg.eta * Eigen::Map<const VectorXd>(zeta[q].row(i).data(), p);
      for (int s = 0; s < q; ++s) rp[q + 1].noalias() -= cfg.eta * trace.kernels[q].R_L[s] * rp[s];
    }
    out = Fp[t];
  }

  // Second pass of a step: sample zeta^t and form r^{t+1}.
  void advance_replica(std::size_t i, const GaussianSequenceSampler::Extension& ext, int first_new) {
    detail::Normal normal;
    auto eng = detail::make_engine(cfg.seed, {detail::kReplicaStream, 1, i, static_cast<std::uint64_t>(t + 1)});
    double* x = xi.row(i).data() + xi_zeta_offset();
    const Eigen::Index rn = ext.L_new.cols();
    normal.fill(eng, x + first_new, x + first_new + rn);
    Eigen::Map<VectorXd> z(zeta[t].row(i).data(), p);
    z = ext.K * Eigen::Map<const VectorXd>(x, ext.K.cols()) + ext.L_new * Eigen::Map<const VectorXd>(x + first_new, rn);
    Eigen::Map<VectorXd> rn1(r[t + 1].row(i).data(), p);
    rn1 = A[t] * Eigen::Map<const VectorXd>(r[t].row(i).data(), p) -
          cfg.eta * Eigen::Map<const VectorXd>(F[t].row(i).data(), p) - cfg.eta * z;
    for (int s = 0; s < t; ++s)
      rn1.noalias() -= cfg.eta * trace.kernels[t].R_L[s] * Eigen::Map<const VectorXd>(r[s].row(i).data(), p);
  }

  void step() {
    if (t > cfg.T) throw ConfigError("DMFT integrator already finished");
    record_rows(trace, rep, t);
    const int w = rep.width(t);
    if (t == 0) {
      r.emplace_back(N, p);
      if (mode == KernelMode::Pathwise) Jr.emplace_back(N, p * wmax);
    }
    h.emplace_back(N, p);
    F.emplace_back(N, p);
    const int rank_pi = k + r0 + static_cast<int>(zeta_sampler.rank());
    const std::size_t shards = shard_count(N);
    if (mode == KernelMode::Pathwise) {
      dF_cache.emplace_back(N, p * w);
      if (t < cfg.T) Jr.emplace_back(N, p * wmax);
    }
    // A_t is only known after the kernels, so the pathwise recursion for
    // d r^{t+1}/d pi runs in the second pass below.
    std::vector<Accum> acc(shards);
    const bool path = mode == KernelMode::Pathwise;
    parallel_for(shards, threads, [&](std::size_t b) {
      acc[b].reset(p, k, (t + 1) * p, mode == KernelMode::Stein ? 0 : w,
                   mode == KernelMode::Stein ? rank_pi : 0);
      const std::size_t end = std::min(N, (b + 1) * kShard);
      for (std::size_t i = b * kShard; i < end; ++i) first_pass(i, acc[b], w, rank_pi);
    });
    for (std::size_t b = 1; b < shards; ++b) acc[0].add(acc[b]);
    const Accum& sum = acc[0];
    const double n = static_cast<double>(N);

    Kernels ker;
    finish_basic(ker, sum, t, p, k, N, cfg.alpha);
    MatrixXd X;  // alpha E[dF^t/d pi], p x w
    if (mode == KernelMode::Stein) {
      MatrixXd Lpi = MatrixXd::Zero(w, rank_pi);
      Lpi.topLeftCorner(k, k).setIdentity();
      Lpi.block(k, k, p, r0) = L0;
      if (t > 0) Lpi.bottomRightCorner(t * p, zeta_sampler.rank()) = zeta_sampler.factor();
      X = cfg.alpha * stein_gradient(sum.Fxi / n, Lpi);
    } else {
      X = cfg.alpha * sum.D / n;
    }
    // X = G_total E* + sum_{s<=t} Y_s P_s; solve for Y from the u blocks down.
    std::vector<MatrixXd> Y(t + 1);
    for (int q = t - 1; q >= 0; --q) {
      MatrixXd rhs = X.middleCols(rep.u_offset(q), p);
      for (int s = q + 2; s <= t; ++s) rhs -= Y[s] * rep.P(s).middleCols(rep.u_offset(q), p);
      Y[q + 1] = rhs / (-cfg.eta);
    }
    {
      MatrixXd rhs = X.middleCols(rep.theta0_offset(), p);
      for (int s = 1; s <= t; ++s) rhs -= Y[s] * rep.P(s).middleCols(rep.theta0_offset(), p);
      Y[0] = rhs;
    }
    ker.G_total = X.leftCols(k);
    for (int s = 0; s <= t; ++s) ker.G_total -= Y[s] * rep.M(s);
    ker.Lambda = Y[t];
    for (int s = 0; s < t; ++s) ker.R_L.push_back(Y[s]);
    ker.G_eff = ker.g - ker.Lambda * trace.M[t];
    for (int s = 0; s < t; ++s) ker.G_eff -= ker.R_L[s] * trace.M[s];
    ker.stein_residual = (ker.G_total - ker.G_eff).cwiseAbs().maxCoeff();
    check_finite(ker.Lambda, "Lambda", t);
    check_finite(ker.g, "g", t);
    for (const auto& c : ker.C_L) check_finite(c, "C_L", t);

    A.push_back((1.0 - cfg.eta * cfg.lambda) * MatrixXd::Identity(p, p) - cfg.eta * ker.Lambda);
    const bool last = t >= cfg.T;
    if (!last) {
      propagate_M(trace, ker, cfg.eta, cfg.lambda);
      rep.advance(ker.Lambda, ker.R_L, ker.G_eff, ker.C_L);
    }
    trace.kernels.push_back(std::move(ker));
    if (!last) {
      MatrixXd cross(p, zeta_sampler.size());
      for (int s = 0; s < t; ++s) cross.middleCols(s * p, p) = trace.kernels[t].C_L[s];
      const int first_new = static_cast<int>(zeta_sampler.rank());
      auto ext = zeta_sampler.extend(cross, trace.kernels[t].C_L[t]);
      trace.noise_min_eigenvalue.push_back(ext.min_eigenvalue);
      zeta.emplace_back(N, p);
      r.emplace_back(N, p);
      parallel_for(shards, threads, [&](std::size_t b) {
        const std::size_t end = std::min(N, (b + 1) * kShard);
        for (std::size_t i = b * kShard; i < end; ++i) {
          advance_replica(i, ext, first_new);
          if (path) pathwise_advance(i, w);
        }
      });
    }
    if (path) dF_cache[t].resize(0, 0);
    ++t;
    if (t > cfg.T && cfg.theta_ensemble_check)
      trace.theta_check_error = theta_ensemble_error(rep, cfg.T, 200000, cfg.seed);
  }

  void first_pass(std::size_t i, Accum& acc, int w, int rank_pi) {
    if (t == 0) draw_initial(i);
    Eigen::Map<const VectorXd> hs(hstar.row(i).data(), k);
    Eigen::Map<VectorXd> hv(h[t].row(i).data(), p);
    hv = Eigen::Map<const VectorXd>(r[t].row(i).data(), p) + trace.M[t] * hs;
    VectorXd Fv(p);
    readout.gradient(hv.data(), y[i], Fv.data());
    Eigen::Map<VectorXd>(F[t].row(i).data(), p) = Fv;
    acc.add_sample(Fv, hstar.row(i).data(), k, readout.loss(hv.data(), y[i]));
    for (int s = 0; s <= t; ++s)
      acc.FF.middleCols(s * p, p) += Fv * Eigen::Map<const Eigen::RowVectorXd>(F[s].row(i).data(), p);

    if (mode == KernelMode::Pathwise) {
      MatrixXd H(p, p);
      readout.hessian(hv.data(), y[i], H);
      MatrixXd D = outer_dy(readout, hv.data(), grad_y.row(i).data(), k);
      Eigen::Map<const MatrixXd> J(Jr[t].row(i).data(), p, wmax);
      Eigen::Map<MatrixXd> dF(dF_cache[t].row(i).data(), p, w);
      dF = H * J.leftCols(w);
      dF.leftCols(k) += H * trace.M[t] + D;
      acc.D += dF;
    } else if (mode == KernelMode::FiniteDifference) {
      std::vector<VectorXd> rp(t + 1, VectorXd(p)), Fp(t + 1, VectorXd(p));
      VectorXd up(p), down(p);
      for (int c = 0; c < w; ++c) {
        resim(i, c, eps, rp, Fp, up);
        resim(i, c, -eps, rp, Fp, down);
        acc.D.col(c) += (up - down) / (2.0 * eps);
      }
    } else {
      acc.Fxi += Fv * Eigen::Map<const Eigen::RowVectorXd>(xi.row(i).data(), rank_pi);
    }
  }

  void pathwise_advance(std::size_t i, int w) {
    Eigen::Map<const MatrixXd> J(Jr[t].row(i).data(), p, wmax);
    Eigen::Map<const MatrixXd> dF(dF_cache[t].row(i).data(), p, w);
    Eigen::Map<MatrixXd> Jn(Jr[t + 1].row(i).data(), p, wmax);
    Jn = A[t] * J;
    for (int s = 0; s < t; ++s)
      Jn.noalias() -= cfg.eta * trace.kernels[t].R_L[s] * Eigen::Map<const MatrixXd>(Jr[s].row(i).data(), p, wmax);
    Jn.leftCols(w) -= cfg.eta * dF;
    Jn.block(0, rep.u_offset(t), p, p) -= cfg.eta * MatrixXd::Identity(p, p);
  }
};

SingleProcessIntegrator::SingleProcessIntegrator(const DmftConfig& cfg, const TargetFunction& target,
                                                 const Readout& readout)
    : impl_(std::make_unique<Impl>(cfg, target, readout)) {}
SingleProcessIntegrator::~SingleProcessIntegrator() = default;
void SingleProcessIntegrator::step() { impl_->step(); }
bool SingleProcessIntegrator::done() const { return impl_->t > impl_->cfg.T; }
int SingleProcessIntegrator::time() const { return impl_->t; }
const LinearRepresentation& SingleProcessIntegrator::representation() const { return impl_->rep; }
const DmftTrace& SingleProcessIntegrator::trace() const { return impl_->trace; }
const RowMatrix& SingleProcessIntegrator::r(int t) const { return impl_->r.at(t); }
DmftTrace SingleProcessIntegrator::run() {
  auto start = std::chrono::steady_clock::now();
  while (!done()) step();
  impl_->trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return impl_->trace;
}

DmftTrace dmft_integrate(const DmftConfig& cfg, const TargetFunction& target, const Readout& readout) {
  if (cfg.formulation == Formulation::SingleProcess) return single_process_integrate(cfg, target, readout);
  TwoProcessIntegrator integ(cfg, target, readout);
  return integ.run();
}

DmftTrace single_process_integrate(const DmftConfig& cfg, const TargetFunction& target,
                                   const Readout& readout) {
  SingleProcessIntegrator integ(cfg, target, readout);
  return integ.run();
}

// ---------------------------------------------------------------- fresh batches

DmftTrace one_pass_effective(const DmftConfig& cfg, const TargetFunction& target, const Readout& readout) {
  auto start = std::chrono::steady_clock::now();
  const int p = readout.p(), k = target.k();
  cfg.validate(p);
  const std::size_t N = cfg.n_samples;
  const unsigned threads = resolve_threads(cfg.threads);
  const double eta = cfg.eta, decay = 1.0 - cfg.eta * cfg.lambda;
  DmftTrace tr;
  tr.p = p;
  tr.k = k;
  tr.T = cfg.T;
  tr.mode_used = KernelMode::Stein;
  tr.M.push_back(MatrixXd::Zero(p, k));
  tr.M_se.push_back(MatrixXd::Zero(p, k));
  MatrixXd C = initial_covariance(p);
  const int n = k + p;
  for (int t = 0; t <= cfg.T; ++t) {
    tr.C_theta.push_back({C});
    const MatrixXd& M = tr.M[t];
    MatrixXd Sx(n, n);
    Sx.topLeftCorner(k, k).setIdentity();
    Sx.topRightCorner(k, p) = M.transpose();
    Sx.bottomLeftCorner(p, k) = M;
    Sx.bottomRightCorner(p, p) = C;
    PsdFactor fac = psd_factor(Sx);
    tr.omega_min_eigenvalue.push_back(fac.min_eigenvalue);
    const MatrixXd& Lx = fac.L;
    const std::size_t shards = shard_count(N);
    std::vector<Accum> acc(shards);
    parallel_for(shards, threads, [&](std::size_t b) {
      acc[b].reset(p, k, p, n, 0);
      detail::Normal normal;
      VectorXd xi(Lx.cols()), x(n), F(p);
      const std::size_t end = std::min(N, (b + 1) * kShard);
      for (std::size_t i = b * kShard; i < end; ++i) {
        auto eng = detail::make_engine(cfg.seed, {detail::kReplicaStream, 2, i, static_cast<std::uint64_t>(t)});
        normal.fill(eng, xi.data(), xi.data() + xi.size());
        x.noalias() = Lx * xi;
        const double y = target.eval({x.data(), static_cast<std::size_t>(k)});
        readout.gradient(x.data() + k, y, F.data());
        acc[b].add_sample(F, x.data(), k, readout.loss(x.data() + k, y));
        acc[b].FF += F * F.transpose();
        acc[b].D += F * x.transpose();  // sum F x^T
      }
    });
    for (std::size_t b = 1; b < shards; ++b) acc[0].add(acc[b]);
    Kernels ker;
    finish_basic(ker, acc[0], 0, p, k, N, cfg.alpha);
    const MatrixXd E = cfg.alpha * acc[0].D / static_cast<double>(N);  // alpha E[F x^T]
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(Sx);
    const MatrixXd B = E * cod.pseudoInverse();  // [G | Lambda]
    ker.G_total = B.leftCols(k);
    ker.Lambda = B.rightCols(p);
    ker.G_eff = ker.g - ker.Lambda * M;
    ker.stein_residual = (ker.G_total - ker.G_eff).cwiseAbs().maxCoeff();
    check_finite(E, "E[F x]", t);
    if (t < cfg.T) {
      const MatrixXd Eh = E.rightCols(p);
      MatrixXd Cn = decay * decay * C - eta * decay * (Eh + Eh.transpose()) + eta * eta * (B * E.transpose()) +
                    eta * eta * ker.C_L[0];
      C = 0.5 * (Cn + Cn.transpose());
      propagate_M(tr, ker, eta, cfg.lambda);
    }
    tr.kernels.push_back(std::move(ker));
  }
  tr.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return tr;
}

// ---------------------------------------------------------------- export

namespace {

nlohmann::json mat(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json mats(const std::vector<MatrixXd>& v) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& m : v) out.push_back(mat(m));
  return out;
}

}  // namespace

nlohmann::json kernels_json(const DmftTrace& tr) {
  nlohmann::json j;
  j["p"] = tr.p;
  j["k"] = tr.k;
  j["T"] = tr.T;
  j["formulation"] = to_string(tr.formulation);
  j["kernel_mode"] = to_string(tr.mode_used);
  j["wall_seconds"] = tr.wall_seconds;
  j["warnings"] = tr.warnings;
  j["omega_min_eigenvalue"] = tr.omega_min_eigenvalue;
  j["noise_min_eigenvalue"] = tr.noise_min_eigenvalue;
  if (tr.theta_check_error > 0) j["theta_check_error"] = tr.theta_check_error;
  nlohmann::json steps = nlohmann::json::array();
  for (std::size_t t = 0; t < tr.kernels.size(); ++t) {
    const Kernels& k = tr.kernels[t];
    nlohmann::json s;
    s["t"] = t;
    s["M"] = mat(tr.M[t]);
    s["M_se"] = mat(tr.M_se[t]);
    s["Lambda"] = mat(k.Lambda);
    // R_L^(t,t) is zero by construction; the equal-time response is Lambda.
    s["R_L"] = mats(k.R_L);
    s["R_tilde"] = mats(k.R_tilde);
    if (k.Lambda_tilde.size()) s["Lambda_tilde"] = mat(k.Lambda_tilde);
    s["G_total"] = mat(k.G_total);
    s["G_eff"] = mat(k.G_eff);
    s["g"] = mat(k.g);
    s["g_se"] = mat(k.g_se);
    s["C_L"] = mats(k.C_L);
    s["loss_mean"] = k.loss_mean;
    s["loss_se"] = k.loss_se;
    s["stein_residual"] = k.stein_residual;
    if (t < tr.C_theta.size()) s["C_theta"] = mats(tr.C_theta[t]);
    if (t < tr.R_theta.size()) s["R_theta"] = mats(tr.R_theta[t]);
    steps.push_back(std::move(s));
  }
  j["steps"] = std::move(steps);
  return j;
}

}  // namespace batchreuse::dmft

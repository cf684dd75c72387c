#include <doctest.h>

#include <chrono>
#include <cmath>

#include "batchreuse/dmft.hpp"
#include "batchreuse/errors.hpp"
#include "batchreuse/hermite.hpp"

using namespace batchreuse;
using namespace batchreuse::dmft;
using targets::parse_target;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Readout make_readout(int p, const std::string& act) {
  Readout r;
  r.a = make_second_layer(p, SecondLayer::PlusMinus, 0);
  r.sigma = ScalarFunction::parse(act);
  r.residual = default_residual(p);
  return r;
}

DmftConfig make_config(int T, std::size_t N, std::uint64_t seed = 1) {
  DmftConfig c;
  c.T = T;
  c.n_samples = N;
  c.seed = seed;
  c.threads = 1;
  return c;
}

double min_eig(const MatrixXd& S) {
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(0.5 * (S + S.transpose())).eigenvalues().minCoeff();
}

double rel_diff(const MatrixXd& a, const MatrixXd& b) {
  double scale = std::max({1e-3, a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace

TEST_SUITE("dmft") {

TEST_CASE("closed form first step for a linear target") {
  auto target = parse_target("single:linear");
  auto cfg = make_config(1, 200000);
  for (int p : {1, 2}) {
    auto r = make_readout(p, "relu");
    auto tr = dmft_integrate(cfg, target, r);
    CHECK(tr.M[0].cwiseAbs().maxCoeff() == 0.0);
    for (int j = 0; j < p; ++j) {
      double want = cfg.eta * cfg.alpha * r.a[j] * 0.5;
      CAPTURE(p);
      CHECK(std::abs(tr.M[1](j, 0) - want) <= 4 * tr.M_se[1](j, 0));
    }
    auto sp = single_process_integrate(cfg, target, r);
    auto op = one_pass_effective(cfg, target, r);
    for (int j = 0; j < p; ++j) {
      double want = cfg.eta * cfg.alpha * r.a[j] * 0.5;
      CHECK(std::abs(sp.M[1](j, 0) - want) <= 4 * sp.M_se[1](j, 0));
      CHECK(std::abs(op.M[1](j, 0) - want) <= 4 * op.M_se[1](j, 0));
    }
  }
}

TEST_CASE("t = 0 and t = 1 pre-activations") {
  auto target = parse_target("single:he3");
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(2, 20000);
  TwoProcessIntegrator integ(cfg, target, r);
  integ.step();
  integ.step();
  const auto& e = integ.ensemble();
  // h0 = omega0, independent of h*
  CHECK(e.h[0] == e.omega[0]);
  double c = (e.h[0].col(0).array() * e.hstar.col(0).array()).mean();
  CHECK(std::abs(c) < 4.0 / std::sqrt(double(e.N)));
  // F at the symmetric init equals -a (y) sigma'(h0)
  for (std::size_t i = 0; i < 50; ++i)
    for (int j = 0; j < 2; ++j) {
      double want = -r.a[j] * e.y[i] * r.sigma.d1(e.h[0](i, j));
      CHECK(e.F[0](i, j) == doctest::Approx(want).epsilon(1e-12));
    }
  // h1 = omega1 - eta F0 because R_theta^(1,1) = I
  const auto& rep = integ.representation();
  CHECK(rep.R_theta(1, 1) == MatrixXd::Identity(2, 2));
  for (std::size_t i = 0; i < 50; ++i) {
    VectorXd om = e.omega[1].row(i).transpose();
    VectorXd h = step_preactivation(om, {e.F[0].row(i).transpose()}, rep, 1, cfg.eta);
    for (int j = 0; j < 2; ++j) {
      CHECK(e.h[1](i, j) == doctest::Approx(om[j] - cfg.eta * e.F[0](i, j)).epsilon(1e-12));
      CHECK(h[j] == doctest::Approx(e.h[1](i, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("Lambda at initialisation matches quadrature") {
  auto target = parse_target("single:he3");
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(0, 400000);
  auto tr = dmft_integrate(cfg, target, r);
  auto rule = hermite::QuadratureRule::gauss_hermite(60);
  double s4 = hermite::gauss_expectation_1d([](double x) { return std::pow(std::cosh(x), -4); }, rule);
  MatrixXd want = cfg.alpha * s4 * r.a * r.a.transpose();
  // y sigma'' term has zero mean because E[He3] = 0
  CHECK((tr.kernels[0].Lambda - want).cwiseAbs().maxCoeff() < 0.02 * want.cwiseAbs().maxCoeff());
}

TEST_CASE("causality and the two routes to R_theta") {
  auto target = parse_target("staircase:2");
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(4, 20000);
  cfg.lambda = 0.1;
  auto tr = dmft_integrate(cfg, target, r);
  for (int t = 0; t <= cfg.T; ++t) CHECK(tr.R_theta[t][t] == MatrixXd::Identity(2, 2));
  MatrixXd A0 = (1 - cfg.eta * cfg.lambda) * MatrixXd::Identity(2, 2) - cfg.eta * tr.kernels[0].Lambda;
  CHECK((tr.R_theta[1][0] - A0).cwiseAbs().maxCoeff() < 1e-14);

  TwoProcessIntegrator integ(cfg, target, r);
  integ.run();
  const auto& rep = integ.representation();
  for (int t = 1; t <= cfg.T; ++t)
    for (int s = 1; s <= t; ++s)
      CHECK((rep.R_theta(t, s) - rep.R_theta_from_coefficients(t, s)).cwiseAbs().maxCoeff() < 1e-12);
  // kernels only look backwards in time
  for (int t = 0; t <= cfg.T; ++t) {
    CHECK(static_cast<int>(tr.kernels[t].R_L.size()) == t);
    CHECK(static_cast<int>(tr.kernels[t].C_L.size()) == t + 1);
  }
}

TEST_CASE("assembled covariances are symmetric PSD") {
  auto target = parse_target("sum(single:linear@1; single:he3@2)");
  auto r = make_readout(2, "relu");
  auto cfg = make_config(4, 20000);
  auto tr = dmft_integrate(cfg, target, r);
  const int p = tr.p, T = tr.T;
  MatrixXd Ct(p * (T + 1), p * (T + 1)), CL(p * (T + 1), p * (T + 1));
  for (int t = 0; t <= T; ++t)
    for (int s = 0; s <= t; ++s) {
      Ct.block(t * p, s * p, p, p) = tr.C_theta[t][s];
      Ct.block(s * p, t * p, p, p) = tr.C_theta[t][s].transpose();
      CL.block(t * p, s * p, p, p) = tr.kernels[t].C_L[s];
      CL.block(s * p, t * p, p, p) = tr.kernels[t].C_L[s].transpose();
    }
  for (int t = 0; t <= T; ++t) {
    CHECK((tr.C_theta[t][t] - tr.C_theta[t][t].transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((tr.kernels[t].C_L[t] - tr.kernels[t].C_L[t].transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(min_eig(Ct) >= -1e-8 * std::max(1.0, Ct.norm()));
  CHECK(min_eig(CL) >= -1e-8 * std::max(1.0, CL.norm()));
  for (double e : tr.omega_min_eigenvalue) CHECK(e >= -1e-8);
}

TEST_CASE("pathwise and finite difference kernels agree for tanh") {
  auto target = parse_target("single:he3");
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(3, 50000);
  cfg.kernel_mode = KernelMode::Pathwise;
  auto pw = dmft_integrate(cfg, target, r);
  cfg.kernel_mode = KernelMode::FiniteDifference;
  auto fd = dmft_integrate(cfg, target, r);
  CHECK(pw.mode_used == KernelMode::Pathwise);
  CHECK(fd.mode_used == KernelMode::FiniteDifference);
  for (int t = 0; t <= 3; ++t) {
    CAPTURE(t);
    CHECK(rel_diff(pw.kernels[t].Lambda, fd.kernels[t].Lambda) < 1e-2);
    for (int s = 0; s < t; ++s) CHECK(rel_diff(pw.kernels[t].R_L[s], fd.kernels[t].R_L[s]) < 1e-2);
    CHECK(rel_diff(pw.kernels[t].g, fd.kernels[t].g) < 1e-2);
    CHECK(rel_diff(pw.M[t], fd.M[t]) < 1e-2);
  }
}

TEST_CASE("pathwise on relu falls back with a warning") {
  auto r = make_readout(2, "relu");
  auto cfg = make_config(1, 2000);
  cfg.kernel_mode = KernelMode::Pathwise;
  auto tr = dmft_integrate(cfg, parse_target("single:he3"), r);
  CHECK(tr.mode_used == KernelMode::FiniteDifference);
  CHECK(!tr.warnings.empty());
}

TEST_CASE("two-process and single-process agree on He3") {
  auto target = parse_target("single:he3");
  auto r = make_readout(1, "relu");
  auto cfg = make_config(2, 100000);
  auto tp = dmft_integrate(cfg, target, r);
  cfg.formulation = Formulation::SingleProcess;
  auto sp = dmft_integrate(cfg, target, r);
  CHECK(sp.formulation == Formulation::SingleProcess);
  double diff = std::abs(tp.M[2](0, 0) - sp.M[2](0, 0));
  double se = std::hypot(tp.M_se[2](0, 0), sp.M_se[2](0, 0));
  CHECK(diff <= 4 * se);
  CHECK(std::abs(tp.M[2](0, 0)) > 4 * tp.M_se[2](0, 0));
}

TEST_CASE("M update without ridge") {
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(3, 5000);
  for (auto f : {Formulation::TwoProcess, Formulation::SingleProcess}) {
    cfg.formulation = f;
    auto tr = dmft_integrate(cfg, parse_target("staircase:2"), r);
    for (int t = 0; t < 3; ++t)
      CHECK((tr.M[t + 1] - (tr.M[t] - cfg.eta * tr.kernels[t].g)).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("even targets stay at zero overlap") {
  auto he4 = parse_target("single:he4");
  auto r = make_readout(1, "relu");
  auto cfg = make_config(6, 50000);
  auto tr = dmft_integrate(cfg, he4, r);
  for (int t = 0; t <= 6; ++t) {
    CHECK(std::abs(tr.M[t](0, 0)) <= 4 * tr.M_se[t](0, 0) + 1e-15);
    CHECK(std::abs(tr.kernels[t].g(0, 0)) <= 4 * tr.kernels[t].g_se(0, 0) + 1e-15);
  }
  // committee: antisymmetric direction is even-symmetric, its g projection vanishes
  auto committee = parse_target("committee:he2,k=2");
  auto r2 = make_readout(2, "tanh");
  auto cfg2 = make_config(3, 50000);
  auto tc = dmft_integrate(cfg2, committee, r2);
  VectorXd u(2);
  u << -1 / std::sqrt(2.0), 1 / std::sqrt(2.0);
  for (int t = 0; t <= 3; ++t)
    for (int j = 0; j < 2; ++j) {
      double proj = tc.kernels[t].g.row(j).dot(u);
      double se = std::sqrt(tc.kernels[t].g_se.row(j).cwiseAbs2().sum());
      CHECK(std::abs(proj) <= 4 * se + 1e-15);
    }
}

TEST_CASE("even dependence of h1 on h*") {
  auto he4 = parse_target("single:he4");
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(1, 50000);
  TwoProcessIntegrator integ(cfg, he4, r);
  integ.step();
  integ.step();
  const auto& e = integ.ensemble();
  for (int j = 0; j < 2; ++j) {
    Eigen::ArrayXd prod = e.h[1].col(j).array() * e.hstar.col(0).array();
    double m = prod.mean();
    double sd = std::sqrt((prod - m).square().sum() / (e.N - 1.0));
    CHECK(std::abs(m) <= 4 * sd / std::sqrt(double(e.N)));
  }
}

TEST_CASE("one pass theory learns nothing from He3") {
  auto r = make_readout(1, "relu");
  auto cfg = make_config(6, 50000);
  auto tr = one_pass_effective(cfg, parse_target("single:he3"), r);
  for (int t = 0; t <= 6; ++t) CHECK(std::abs(tr.M[t](0, 0)) <= 4 * tr.M_se[t](0, 0) + 1e-15);
}

TEST_CASE("stein kernels agree with finite differences") {
  auto target = parse_target("single:tanh");
  auto r = make_readout(1, "relu");
  auto cfg = make_config(3, 50000);
  auto fd = dmft_integrate(cfg, target, r);
  cfg.kernel_mode = KernelMode::Stein;
  auto st = dmft_integrate(cfg, target, r);
  for (int t = 0; t <= 3; ++t)
    CHECK(std::abs(fd.M[t](0, 0) - st.M[t](0, 0)) <= 4 * std::hypot(fd.M_se[t](0, 0), st.M_se[t](0, 0)) + 1e-12);
}

TEST_CASE("determinism and replica independence") {
  auto target = parse_target("single:he3");
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(2, 4000);
  auto a = dmft_integrate(cfg, target, r);
  auto b = dmft_integrate(cfg, target, r);
  cfg.threads = 3;
  auto c = dmft_integrate(cfg, target, r);
  for (int t = 0; t <= 2; ++t) {
    CHECK(a.M[t] == b.M[t]);
    CHECK(a.M[t] == c.M[t]);
  }
  cfg.threads = 1;

  // each replica draws from its own stream, so growing N keeps the first rows
  TwoProcessIntegrator small(cfg, target, r);
  auto big_cfg = cfg;
  big_cfg.n_samples = 6000;
  TwoProcessIntegrator big(big_cfg, target, r);
  small.step();
  big.step();
  const auto& es = small.ensemble();
  const auto& eb = big.ensemble();
  CHECK(eb.hstar.topRows(es.N) == es.hstar);
  CHECK(eb.omega[0].topRows(es.N) == es.omega[0]);
  CHECK(eb.xi.topRows(es.N) == es.xi);
}

TEST_CASE("cost grows no faster than T^4") {
  auto target = parse_target("single:he3");
  auto r = make_readout(2, "tanh");
  auto time_for = [&](int T) {
    auto cfg = make_config(T, 4000);
    auto start = std::chrono::steady_clock::now();
    dmft_integrate(cfg, target, r);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  double t4 = time_for(4), t8 = time_for(8), t16 = time_for(16);
  CHECK(t8 >= t4);
  CHECK(t16 >= t8);
  CHECK(t16 / t8 <= 1.5 * 16.0);
}

TEST_CASE("configuration limits") {
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(300, 1000);
  CHECK_THROWS_AS(dmft_integrate(cfg, parse_target("single:he3"), r), ConfigError);
  auto big = make_config(5, 100000000);
  big.memory_limit_gb = 0.01;
  CHECK_THROWS_AS(dmft_integrate(big, parse_target("single:he3"), r), ConfigError);
  CHECK(parse_kernel_mode("finite_difference") == KernelMode::FiniteDifference);
  CHECK(parse_formulation("single_process") == Formulation::SingleProcess);
  CHECK_THROWS_AS(parse_kernel_mode("magic"), ConfigError);
}

TEST_CASE("theta ensemble reproduces C_theta") {
  auto target = parse_target("staircase:2");
  auto r = make_readout(2, "tanh");
  auto cfg = make_config(3, 20000);
  TwoProcessIntegrator integ(cfg, target, r);
  integ.run();
  const auto& rep = integ.representation();
  double scale = rep.C_theta(3, 3).cwiseAbs().maxCoeff();
  CHECK(theta_ensemble_error(rep, 3, 200000, 5) < 0.02 * scale);
}

TEST_CASE("kernel json dump") {
  auto r = make_readout(2, "tanh");
  auto tr = dmft_integrate(make_config(2, 2000), parse_target("single:he3"), r);
  auto j = kernels_json(tr);
  CHECK(j.dump().find("Lambda") != std::string::npos);
}

}  // TEST_SUITE

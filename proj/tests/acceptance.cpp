// One PASS/FAIL line per acceptance criterion. Exit status is the number of failures.
#include <Eigen/SVD>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "batchreuse/dmft.hpp"
#include "batchreuse/experiment.hpp"
#include "batchreuse/gdsim.hpp"
#include "batchreuse/hardness.hpp"
#include "batchreuse/hermite.hpp"
#include "batchreuse/targets.hpp"
#include "support/oracles.hpp"

using namespace batchreuse;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void criterion(const std::string& name, const std::function<void(Outcome&)>& body) {
  Outcome o;
  auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  if (!o.pass) ++failures;
  std::printf("%s %s (%.0fs):%s\n", o.pass ? "PASS" : "FAIL", name.c_str(), seconds_since(t0),
              o.detail.str().c_str());
  std::fflush(stdout);
}

struct SimResult {
  std::map<std::string, gdsim::OverlapTrace> by_schedule;
  double seconds = 0.0;
  double overlap(const std::string& schedule, const std::string& dir, int t) const {
    const auto& tr = by_schedule.at(schedule);
    auto it = std::find(tr.directions.begin(), tr.directions.end(), dir);
    auto s = std::find(tr.steps.begin(), tr.steps.end(), t);
    return tr.overlap_mean[s - tr.steps.begin()][it - tr.directions.begin()];
  }
};

SimResult simulate(const experiment::ExperimentConfig& cfg) {
  auto t0 = Clock::now();
  auto target = targets::parse_target(cfg.target);
  auto teacher = targets::make_teacher(cfg.d, target.k(), cfg.seed + 1000);
  std::vector<gdsim::NamedDirection> dirs;
  for (const auto& name : cfg.directions) dirs.push_back(gdsim::resolve_direction(name, target));
  SimResult r;
  for (const auto& s : cfg.schedules)
    r.by_schedule[s] = gdsim::train(cfg.train_config(s), teacher, target, dirs);
  r.seconds = seconds_since(t0);
  return r;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// Largest per-entry |M_dmft - M_sim| in units of the allowed gap.
double agreement_ratio(const gdsim::OverlapTrace& sim, const dmft::DmftTrace& th, int t, double slack) {
  double worst = 0.0;
  const auto& a = sim.M_mean[t];
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) {
      double se = std::hypot(sim.M_se[t](i, j), th.M_se[t](i, j));
      worst = std::max(worst, std::abs(a(i, j) - th.M[t](i, j)) / (4.0 * se + slack));
    }
  return worst;
}

void fig1_left(Outcome& o) {
  auto cfg = experiment::preset("fig1_left");
  auto r = simulate(cfg);
  for (const char* s : {"full", "fresh"}) {
    double v = r.overlap(s, "teacher", 2);
    o.detail << ' ' << s << "(t=2)=" << fmt(v);
    o.require(v > 0.1, std::string(s) + " overlap at t=2 > 0.1");
  }
  o.detail << " d=" << cfg.d << " runs=" << cfg.runs;
  o.require(r.seconds < 120.0, "runtime < 2 min");
}

void fig1_center(Outcome& o) {
  auto cfg = experiment::preset("fig1_center");
  auto r = simulate(cfg);
  double full = r.overlap("full", "teacher", 2), fresh = r.overlap("fresh", "teacher", 2);
  double bound = 15.0 / std::sqrt(double(cfg.d));
  o.detail << " full(t=2)=" << fmt(full) << " fresh(t=2)=" << fmt(fresh);
  o.require(full > 0.05, "full overlap at t=2 > 0.05");
  o.require(full > 5.0 * fresh, "full > 5x fresh at t=2");
  double worst = 0.0;
  for (int t = 0; t <= 6; ++t) worst = std::max(worst, r.overlap("fresh", "teacher", t));
  o.detail << " max fresh=" << fmt(worst) << " bound=" << fmt(bound);
  o.require(worst < bound, "fresh < 15/sqrt(d) for t <= 6");
}

void fig1_right(Outcome& o) {
  auto cfg = experiment::preset("fig1_right");
  auto r = simulate(cfg);
  double bound = 15.0 / std::sqrt(double(cfg.d));
  for (const char* s : {"full", "fresh"}) {
    double worst = 0.0;
    for (int t = 0; t <= 6; ++t) worst = std::max(worst, r.overlap(s, "teacher", t));
    o.detail << ' ' << s << " max=" << fmt(worst);
    o.require(worst < bound, std::string(s) + " < 15/sqrt(d)");
  }
  o.detail << " bound=" << fmt(bound);
}

void fig2_center(Outcome& o) {
  auto cfg = experiment::preset("fig2_center");
  cfg.directions = {"C1", "C1_perp"};
  auto r = simulate(cfg);
  double bound = 15.0 / std::sqrt(double(cfg.d));
  for (const char* s : {"full", "fresh"}) {
    double c1 = r.overlap(s, "C1", 1);
    o.detail << ' ' << s << " C1(t=1)=" << fmt(c1);
    o.require(c1 > 0.1, std::string(s) + " C1 overlap at t=1 > 0.1");
  }
  o.detail << " full C1_perp:";
  for (int t = 2; t <= cfg.T; ++t) {
    double v = r.overlap("full", "C1_perp", t);
    o.detail << ' ' << fmt(v);
    o.require(v > 0.05, "full C1_perp > 0.05 at t=" + std::to_string(t));
  }
  double worst = 0.0;
  for (int t = 2; t <= cfg.T; ++t) worst = std::max(worst, r.overlap("fresh", "C1_perp", t));
  o.detail << " fresh C1_perp max=" << fmt(worst) << " bound=" << fmt(bound);
  o.require(worst < bound, "fresh C1_perp < 15/sqrt(d)");
}

void fig2_right(Outcome& o) {
  auto cfg = experiment::preset("fig2_right");
  cfg.directions = {"custom:-1,1"};
  auto r = simulate(cfg);
  double bound = 15.0 / std::sqrt(double(cfg.d));
  for (const char* s : {"full", "fresh"}) {
    double worst = 0.0;
    for (int t = 0; t <= 6; ++t) worst = std::max(worst, r.overlap(s, "custom:-1,1", t));
    o.detail << ' ' << s << " max=" << fmt(worst);
    o.require(worst < bound, std::string(s) + " < 15/sqrt(d)");
  }
  o.detail << " bound=" << fmt(bound);
}

void dmft_agreement(Outcome& o) {
  for (const char* name : {"fig1_left", "fig1_center", "staircase"}) {
    auto t0 = Clock::now();
    auto cfg = experiment::preset(name);
    cfg.d = 4000;
    cfg.T = 4;
    cfg.schedules = {"full"};
    cfg.directions = {"teacher"};
    auto target = targets::parse_target(cfg.target);
    auto r = simulate(cfg);
    auto th = dmft::dmft_integrate(cfg.dmft_config(), target, cfg.readout());
    double slack = 0.5 / std::sqrt(double(cfg.d));
    double worst = 0.0;
    for (int t = 0; t <= 4; ++t) worst = std::max(worst, agreement_ratio(r.by_schedule.at("full"), th, t, slack));
    double secs = seconds_since(t0);
    o.detail << ' ' << name << " worst_gap/allowed=" << fmt(worst) << " (" << fmt(secs) << "s)";
    o.require(worst <= 1.0, std::string(name) + " per-entry agreement");
    o.require(secs < 600.0, std::string(name) + " runtime < 10 min");
  }
}

void anchor(Outcome& o) {
  auto cfg = experiment::preset("anchor_linear");
  cfg.d = 4000;
  cfg.runs = 32;
  auto target = targets::parse_target(cfg.target);
  auto r = simulate(cfg);
  const auto& tr = r.by_schedule.at("full");
  double sim = tr.M_mean[1](0, 0), sim_se = tr.M_se[1](0, 0);
  o.detail << " sim=" << fmt(sim) << "+-" << fmt(sim_se);
  o.require(std::abs(sim - 0.15) <= 3.0 * sim_se, "gdsim within 3 se of 0.15");
  auto th = dmft::dmft_integrate(cfg.dmft_config(), target, cfg.readout());
  auto op = dmft::one_pass_effective(cfg.dmft_config(), target, cfg.readout());
  for (auto [label, tr2] : {std::pair{"dmft", &th}, std::pair{"one_pass", &op}}) {
    double v = tr2->M[1](0, 0), se = tr2->M_se[1](0, 0);
    o.detail << ' ' << label << '=' << fmt(v) << "+-" << fmt(se);
    o.require(std::abs(v - 0.15) <= 3.0 * se, std::string(label) + " within 3 se of 0.15");
  }
}

void hardness_suite(Outcome& o) {
  using hardness::Direction;
  auto he3 = targets::parse_target("single:he3");
  auto he4 = targets::parse_target("single:he4");
  auto st = targets::parse_target("staircase:3");
  auto pr = targets::parse_target("product:1,2,3");
  double v = hardness::moment_functional(he3, Direction::axis(1, 0), 3).value;
  o.detail << " he3_k3=" << fmt(v);
  o.require(std::abs(v - 324.0) < 1e-6, "He3 k=3 equals 324");
  for (int i : {1, 2}) {
    double m = hardness::moment_functional(st, Direction::axis(3, i), 2).value;
    o.require(std::abs(m - 2.0) < 1e-6, "staircase e" + std::to_string(i + 1) + " k=2 equals 2");
  }
  auto diag = Direction::from_coefficients({1, 1, 1});
  int zero_checks = 0;
  for (auto [t, dir, label] : {std::tuple{&pr, Direction::axis(3, 0), "product e1"},
                               std::tuple{&pr, diag, "product diag"},
                               std::tuple{&he4, Direction::axis(1, 0), "He4"}}) {
    for (const auto& m : hardness::moment_functionals(*t, dir, 8)) {
      ++zero_checks;
      bool exact = m.std_error == 0.0;
      bool ok = exact ? std::abs(m.value) <= 1e-6 * std::max(1.0, m.scale)
                      : std::abs(m.value) <= 4.0 * m.std_error;
      o.require(ok, std::string(label) + " zero at k=" + std::to_string(m.k));
    }
  }
  o.detail << " zero_checks=" << zero_checks;

  struct Case {
    const targets::TargetFunction* t;
    oracle::Poly poly;
    std::vector<double> u;
  };
  double r3 = 1.0 / std::sqrt(3.0);
  std::vector<Case> cases{{&he3, oracle::hermite(1, 0, 3), {1.0}},
                          {&st, oracle::staircase(3), {0, 1, 0}},
                          {&st, oracle::staircase(3), {r3, r3, r3}},
                          {&pr, oracle::product(3, {0, 1, 2}), {r3, r3, r3}}};
  double worst_q = 0.0, worst_mc = 0.0;
  for (const auto& c : cases) {
    auto dir = Direction::from_coefficients(c.u);
    auto q = hardness::moment_functionals(*c.t, dir, 5);
    hardness::MomentOptions mc;
    mc.force_mc = true;
    mc.n_mc = 200000;
    auto m = hardness::moment_functionals(*c.t, dir, 5, mc);
    for (int k = 1; k <= 5; ++k) {
      double want = oracle::moment(c.poly, c.u, k);
      worst_q = std::max(worst_q, std::abs(q[k - 1].value - want) / std::max(1.0, std::abs(want)));
      if (m[k - 1].std_error > 0) worst_mc = std::max(worst_mc, std::abs(m[k - 1].value - want) / m[k - 1].std_error);
    }
  }
  o.detail << " quad_rel_err=" << fmt(worst_q) << " mc_sigmas=" << fmt(worst_mc);
  o.require(worst_q <= 1e-6, "quadrature vs Isserlis within 1e-6");
  o.require(worst_mc <= 4.0, "Monte Carlo within 4 sigma");
}

int first_crossing(const SimResult& r, const std::string& schedule, const std::string& dir, int T,
                   double level) {
  for (int t = 0; t <= T; ++t)
    if (r.overlap(schedule, dir, t) > level) return t;
  return -1;
}

void schedules(Outcome& o) {
  // The orthogonal direction is the He3 axis e4 of the product-plus-He3 target.
  auto seq = experiment::preset("fig4_sequential");
  auto rs = simulate(seq);
  // Step t uses block t mod 5; the first reused block is applied at t = 5 and shows in M at t = 6.
  int ts = first_crossing(rs, "sequential:n/5", "e4", seq.T, 0.05);
  o.detail << " d=" << seq.d << " sequential e4:";
  for (int t = 0; t <= seq.T; ++t) o.detail << ' ' << fmt(rs.overlap("sequential:n/5", "e4", t));
  o.detail << " first>0.05 at t=" << ts;
  o.require(ts >= 5 && ts <= 7, "sequential first crossing at the start of epoch 2 (t in 5..7)");

  auto rep = experiment::preset("fig4_replacement");
  auto rr = simulate(rep);
  int tr = first_crossing(rr, "replacement:n/5", "e4", rep.T, 0.05);
  o.detail << "; replacement e4:";
  for (int t = 0; t <= 3; ++t) o.detail << ' ' << fmt(rr.overlap("replacement:n/5", "e4", t));
  o.detail << " first>0.05 at t=" << tr;
  o.require(tr >= 0 && tr <= 2, "replacement exceeds 0.05 by t=2");
}

void properties(Outcome& o) {
  // Hermite orthogonality
  auto rule = hermite::QuadratureRule::gauss_hermite(40);
  double worst_orth = 0.0;
  for (int i = 0; i <= 10; ++i)
    for (int j = 0; j <= 10; ++j) {
      double s = 0.0;
      for (int q = 0; q < rule.size(); ++q)
        s += rule.weights()[q] * hermite::hermite_eval(i, rule.nodes()[q]) *
             hermite::hermite_eval(j, rule.nodes()[q]);
      double want = i == j ? std::tgamma(i + 1.0) : 0.0;
      worst_orth = std::max(worst_orth, std::abs(s - want) / std::max(1.0, want));
    }
  o.detail << " orth=" << fmt(worst_orth);
  o.require(worst_orth < 1e-8, "Hermite orthogonality");

  // gradient vs central finite differences
  experiment::ExperimentConfig base;
  base.target = "single:tanh";
  base.activation = "tanh";
  base.d = 20;
  base.p = 4;
  auto tc = base.train_config("full");
  auto target = targets::parse_target(base.target);
  auto teacher = targets::make_teacher(tc.d, target.k(), 3);
  auto data = gdsim::generate_dataset(tc, teacher, target, 5);
  auto s = gdsim::init_student(tc, 7);
  gdsim::Batch all{&data, 0, data.size(), {}};
  auto g = gdsim::batch_gradient(s, all, nullptr);
  double worst_fd = 0.0;
  for (int i = 0; i < s.W.rows(); ++i)
    for (int j = 0; j < s.W.cols(); ++j) {
      auto sp = s, sm = s;
      double eps = 1e-5;
      sp.W(i, j) += eps;
      sm.W(i, j) -= eps;
      double n = double(data.size());
      double fd = (gdsim::batch_loss(sp, all) - gdsim::batch_loss(sm, all)) * n / (2 * eps);
      worst_fd = std::max(worst_fd, std::abs(fd - g(i, j)) / std::max(1.0, std::abs(g(i, j))));
    }
  o.detail << " grad_fd=" << fmt(worst_fd);
  o.require(worst_fd < 1e-6, "gradient vs finite differences");

  // PSD covariances and causality of the response kernels
  experiment::ExperimentConfig dc;
  dc.target = "single:he3";
  dc.activation = "tanh";
  dc.p = 2;
  dc.T = 3;
  dc.samples = 20000;
  auto dt = targets::parse_target(dc.target);
  auto th = dmft::dmft_integrate(dc.dmft_config(), dt, dc.readout());
  double min_eig = 0.0;
  for (int t = 0; t <= dc.T; ++t) {
    int blocks = t + 1, p = dc.p;
    Eigen::MatrixXd C(blocks * p, blocks * p);
    for (int a = 0; a < blocks; ++a)
      for (int b = 0; b <= a; ++b) {
        C.block(a * p, b * p, p, p) = th.C_theta[a][b];
        C.block(b * p, a * p, p, p) = th.C_theta[a][b].transpose();
      }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    min_eig = std::min(min_eig, es.eigenvalues().minCoeff() / std::max(1.0, es.eigenvalues().maxCoeff()));
  }
  o.detail << " psd_min=" << fmt(min_eig);
  o.require(min_eig > -1e-10, "C_theta PSD");
  double causal = 0.0;
  for (int t = 0; t <= dc.T; ++t) {
    causal = std::max(causal, (th.R_theta[t][t] - Eigen::MatrixXd::Identity(dc.p, dc.p)).cwiseAbs().maxCoeff());
    for (int u = 0; u < t; ++u) causal = std::max(causal, double(th.kernels[t].R_L.size() != std::size_t(t)));
  }
  o.detail << " causality=" << fmt(causal);
  o.require(causal < 1e-12, "R_theta(t,t)=I and strictly causal R_L");

  // determinism
  auto det = experiment::preset("fig1_center");
  det.d = 400;
  det.runs = 3;
  det.T = 3;
  det.schedules = {"full"};
  det.threads = 1;
  auto r1 = simulate(det);
  det.threads = 0;
  auto r2 = simulate(det);
  bool same = true;
  for (std::size_t t = 0; t < r1.by_schedule["full"].M_mean.size(); ++t)
    same &= r1.by_schedule["full"].M_mean[t] == r2.by_schedule["full"].M_mean[t];
  o.require(same, "bit-identical traces across thread counts");

  // rank-one first step, on the run-averaged M at t=1
  auto ro = experiment::preset("fig2_left");
  ro.d = 4000;
  ro.runs = 32;
  ro.T = 1;
  ro.schedules = {"full"};
  ro.directions = {"e1"};
  auto rr = simulate(ro);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(rr.by_schedule["full"].M_mean[1]);
  double ratio = svd.singularValues()(1) / svd.singularValues()(0);
  o.detail << " rank1_ratio=" << fmt(ratio);
  o.require(ratio < 0.1, "sigma2/sigma1 of M(1) < 0.1");
}

}  // namespace

int main() {
  std::cout << "acceptance: desk scale, one line per criterion\n";
  criterion("fig1_left tanh: both schedules > 0.1 at t=2", fig1_left);
  criterion("fig1_center He3: reuse > 0.05 and > 5x fresh at t=2, fresh < 15/sqrt(d)", fig1_center);
  criterion("fig1_right He4: both schedules < 15/sqrt(d) for t <= 6", fig1_right);
  criterion("fig2_center: C1_perp > 0.05 for t >= 2 under reuse, fresh < 15/sqrt(d), C1 > 0.1 at t=1", fig2_center);
  criterion("fig2_right committee: (e2-e1)/sqrt2 < 15/sqrt(d) for t <= 6", fig2_right);
  criterion("DMFT agreement at d=4000, t <= 4", dmft_agreement);
  criterion("closed-form anchor M(1) = 0.15", anchor);
  criterion("hardness oracle suite", hardness_suite);
  criterion("minibatch schedules: sequential at epoch 2, replacement by t=2", schedules);
  criterion("property suites", properties);
  std::cout << failures << " criteria failed\n";
  return failures;
}

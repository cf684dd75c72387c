#include "batchreuse/hardness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "batchreuse/errors.hpp"
#include "batchreuse/gaussian.hpp"
#include "batchreuse/hermite.hpp"
#include "rng.hpp"

namespace batchreuse::hardness {

Direction Direction::from_coefficients(const std::vector<double>& coeffs, std::string name) {
  if (coeffs.empty()) throw ConfigError("direction needs at least one coefficient", "directions");
  Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(coeffs.data(), coeffs.size());
  double n = u.norm();
  if (!(n > 0.0)) throw ConfigError("direction must be nonzero", "directions");
  return {u / n, std::move(name)};
}

Direction Direction::axis(int k, int i) {
  if (i < 0 || i >= k) throw ConfigError("axis index outside teacher basis", "directions");
  Eigen::VectorXd u = Eigen::VectorXd::Zero(k);
  u[i] = 1.0;
  return {u, "e" + std::to_string(i + 1)};
}

namespace {

void check_dir(const TargetFunction& t, const Direction& dir) {
  if (dir.u.size() != t.k())
    throw ConfigError("direction has " + std::to_string(dir.u.size()) +
                          " coefficients but the target has k=" + std::to_string(t.k()),
                      "directions");
}

int auto_nodes(const TargetFunction& t, int k_max) {
  if (auto deg = t.coordinate_degrees()) {
    int dmax = *std::max_element(deg->begin(), deg->end());
    // exact for per-coordinate degree k_max*dmax + 1
    int n = (k_max * dmax + 1) / 2 + 1;
    return std::clamp(n, 4, hermite::kDefaultNodes);
  }
  return t.k() <= 4 ? hermite::kDefaultNodes : 24;
}

void finish_thresholds(std::vector<MomentEstimate>& m, const MomentOptions& opts) {
  for (auto& e : m)
    e.threshold = std::max(opts.floor * std::max(1.0, e.scale), opts.se_multiplier * e.std_error);
}

}  // namespace

std::vector<MomentEstimate> moment_functionals(const TargetFunction& t, const Direction& dir,
                                               int k_max, const MomentOptions& opts) {
  check_dir(t, dir);
  if (k_max < 1) throw ConfigError("moment order must be >= 1");
  std::vector<MomentEstimate> out(k_max);
  for (int k = 0; k < k_max; ++k) out[k].k = k + 1;
  const int dim = t.k();
  if (!opts.force_mc && dim <= hermite::kMaxQuadratureDimension) {
    int nodes = opts.quad_nodes > 0 ? opts.quad_nodes : auto_nodes(t, k_max);
    auto rule = hermite::QuadratureRule::gauss_hermite(nodes, dim);
    std::vector<double> val(k_max, 0.0), scale(k_max, 0.0);
    hermite::for_each_node(rule, [&](std::span<const double> h, double w) {
      double g = t.eval(h);
      double proj = 0.0;
      for (int i = 0; i < dim; ++i) proj += h[i] * dir.u[i];
      double gp = 1.0;
      for (int k = 0; k < k_max; ++k) {
        gp *= g;
        val[k] += w * gp * proj;
        scale[k] += w * std::abs(gp * proj);
      }
    });
    for (int k = 0; k < k_max; ++k) {
      out[k].value = val[k];
      out[k].scale = scale[k];
    }
  } else {
    // Monte Carlo in fixed shards so the result does not depend on threading.
    constexpr std::size_t kShard = 10000;
    const std::size_t shards = (opts.n_mc + kShard - 1) / kShard;
    std::vector<double> s1(k_max, 0.0), s2(k_max, 0.0), sa(k_max, 0.0);
    std::vector<double> h(dim);
    detail::Normal normal;
    std::size_t total = 0;
    for (std::size_t s = 0; s < shards; ++s) {
      auto engine = detail::make_engine(opts.seed, {detail::kMcStream, s});
      std::size_t m = std::min(kShard, opts.n_mc - s * kShard);
      for (std::size_t i = 0; i < m; ++i) {
        normal.fill(engine, h.begin(), h.end());
        double g = t.eval(h);
        double proj = 0.0;
        for (int c = 0; c < dim; ++c) proj += h[c] * dir.u[c];
        double gp = 1.0;
        for (int k = 0; k < k_max; ++k) {
          gp *= g;
          double v = gp * proj;
          s1[k] += v;
          s2[k] += v * v;
          sa[k] += std::abs(v);
        }
      }
      total += m;
    }
    const double n = static_cast<double>(total);
    for (int k = 0; k < k_max; ++k) {
      double mean = s1[k] / n;
      double var = std::max(0.0, s2[k] / n - mean * mean);
      out[k].value = mean;
      out[k].std_error = std::sqrt(var / (n - 1.0));
      out[k].scale = sa[k] / n;
    }
  }
  finish_thresholds(out, opts);
  return out;
}

MomentEstimate moment_functional(const TargetFunction& t, const Direction& dir, int k,
                                 const MomentOptions& opts) {
  if (k < 1) throw ConfigError("moment order must be >= 1");
  MomentOptions o = opts;
  if (o.quad_nodes == 0 && !o.force_mc && t.k() <= hermite::kMaxQuadratureDimension)
    o.quad_nodes = auto_nodes(t, k);
  return moment_functionals(t, dir, k, o).back();
}

namespace {

bool invariant_under(const TargetFunction& t, const Eigen::MatrixXd& T, const SymmetryOptions& sym) {
  const int k = t.k();
  auto engine = detail::make_engine(sym.seed, {detail::kSymmetryStream});
  detail::Normal normal;
  Eigen::VectorXd h(k), h2(k);
  for (int trial = 0; trial < sym.trials; ++trial) {
    for (int i = 0; i < k; ++i) h[i] = 1.5 * normal(engine);
    h2.noalias() = T * h;
    double g1 = t.eval(std::span<const double>(h.data(), k));
    double g2 = t.eval(std::span<const double>(h2.data(), k));
    if (std::abs(g1 - g2) > sym.tol * std::max(1.0, std::abs(g1))) return false;
  }
  return true;
}

// Orthonormal basis of the complement of u together with labels for the
// description. Coordinate axes are used verbatim when u is an axis.
std::pair<Eigen::MatrixXd, std::vector<std::string>> complement_basis(const Eigen::VectorXd& u) {
  const int k = static_cast<int>(u.size());
  Eigen::MatrixXd Q(k, std::max(0, k - 1));
  std::vector<std::string> labels;
  Eigen::Index axis = -1;
  u.cwiseAbs().maxCoeff(&axis);
  if (std::abs(std::abs(u[axis]) - 1.0) < 1e-12) {
    int c = 0;
    for (int i = 0; i < k; ++i)
      if (i != axis) {
        Q.col(c++) = Eigen::VectorXd::Unit(k, i);
        labels.push_back("z" + std::to_string(i + 1));
      }
    return {Q, labels};
  }
  int c = 0;
  for (int i = 0; i < k && c < k - 1; ++i) {
    Eigen::VectorXd v = Eigen::VectorXd::Unit(k, i);
    v -= v.dot(u) * u;
    for (int j = 0; j < c; ++j) v -= v.dot(Q.col(j)) * Q.col(j);
    if (v.norm() < 1e-8) continue;
    Q.col(c++) = v.normalized();
    labels.push_back("b" + std::to_string(c));
  }
  return {Q, labels};
}

}  // namespace

bool is_even_symmetric(const TargetFunction& t, const Direction& dir, const SymmetryOptions& sym) {
  check_dir(t, dir);
  Eigen::MatrixXd R = Eigen::MatrixXd::Identity(t.k(), t.k()) - 2.0 * dir.u * dir.u.transpose();
  return invariant_under(t, R, sym);
}

std::vector<OrthogonalTransform> default_candidates(const Direction& dir) {
  const int k = static_cast<int>(dir.u.size());
  auto [Q, labels] = complement_basis(dir.u);
  const int m = k - 1;
  Eigen::MatrixXd reflect = -dir.u * dir.u.transpose();
  struct Candidate {
    int moved;
    OrthogonalTransform tr;
  };
  std::vector<Candidate> all;
  std::vector<int> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  do {
    for (int signs = 0; signs < (1 << m); ++signs) {
      Eigen::MatrixXd P = Eigen::MatrixXd::Zero(m, m);
      int moved = 0;
      std::string desc;
      for (int j = 0; j < m; ++j) {
        double s = (signs >> j) & 1 ? -1.0 : 1.0;
        P(perm[j], j) = s;
        if (perm[j] != j || s < 0) {
          ++moved;
          if (!desc.empty()) desc += ", ";
          desc += labels[j] + "->" + (s < 0 ? "-" : "") + labels[perm[j]];
        }
      }
      Eigen::MatrixXd T = reflect;
      if (m > 0) T += Q * P * Q.transpose();
      all.push_back({moved, {T, moved == 0 ? "identity" : desc}});
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  std::stable_sort(all.begin(), all.end(),
                   [](const Candidate& a, const Candidate& b) { return a.moved < b.moved; });
  std::vector<OrthogonalTransform> out;
  out.reserve(all.size());
  for (auto& c : all) out.push_back(std::move(c.tr));
  return out;
}

std::optional<OrthogonalTransform> is_ortho_even_symmetric(
    const TargetFunction& t, const Direction& dir,
    const std::vector<OrthogonalTransform>& candidates, const SymmetryOptions& sym) {
  check_dir(t, dir);
  for (const auto& c : candidates)
    if (invariant_under(t, c.matrix, sym)) return c;
  return std::nullopt;
}

std::string OrthoEvenWitness::description() const {
  std::string s = kind == Kind::Direct ? "" : "span of ";
  for (std::size_t i = 0; i < transforms.size(); ++i) {
    if (i) s += "; ";
    if (kind == Kind::Span) s += transforms[i].first + " via ";
    s += transforms[i].second.description;
  }
  return s;
}

std::optional<OrthoEvenWitness> ortho_even_witness(const TargetFunction& t, const Direction& dir,
                                                   const SymmetryOptions& sym) {
  check_dir(t, dir);
  if (auto w = is_ortho_even_symmetric(t, dir, default_candidates(dir), sym)) {
    OrthoEvenWitness out;
    out.kind = OrthoEvenWitness::Kind::Direct;
    out.transforms.emplace_back(dir.name, *w);
    return out;
  }
  const int k = t.k();
  OrthoEvenWitness span;
  span.kind = OrthoEvenWitness::Kind::Span;
  std::vector<int> axes;
  for (int i = 0; i < k; ++i) {
    auto e = Direction::axis(k, i);
    if (auto w = is_ortho_even_symmetric(t, e, default_candidates(e), sym)) {
      span.transforms.emplace_back(e.name, *w);
      axes.push_back(i);
    }
  }
  double outside = 0.0;
  for (int i = 0; i < k; ++i)
    if (std::find(axes.begin(), axes.end(), i) == axes.end()) outside += dir.u[i] * dir.u[i];
  if (axes.empty() || outside > 1e-20) return std::nullopt;
  // Keep only the axes the direction actually uses.
  std::erase_if(span.transforms, [&](const auto& entry) {
    int i = std::stoi(entry.first.substr(1)) - 1;
    return dir.u[i] == 0.0;
  });
  return span;
}

DirectionVerdict classify_direction(const TargetFunction& t, const Direction& dir, int k_max,
                                    const MomentOptions& opts, const SymmetryOptions& sym) {
  DirectionVerdict v;
  v.direction = dir;
  v.k_max = k_max;
  v.moments = moment_functionals(t, dir, k_max, opts);
  for (const auto& m : v.moments) {
    if (std::abs(m.value) > m.threshold) {
      v.status = Status::FiniteTLearnable;
      v.witness_k = m.k;
      break;
    }
  }
  for (const auto& m : v.moments) {
    if (m.std_error > 0.0 && std::abs(m.value) - m.std_error < m.threshold &&
        std::abs(m.value) + m.std_error > m.threshold)
      v.inconclusive = true;
    if (m.std_error > 0.1 * std::max(m.threshold / opts.se_multiplier, std::abs(m.value)) &&
        std::abs(m.value) > m.threshold)
      v.warnings.push_back("moment k=" + std::to_string(m.k) + " has relative MC error above 10%");
  }
  v.even_symmetric = is_even_symmetric(t, dir, sym);
  v.witness = ortho_even_witness(t, dir, sym);
  v.ortho_even_symmetric = v.witness.has_value();
  return v;
}

McValue phi_curve(const TargetFunction& t, const Direction& dir, const ScalarFunction& sigma,
                  double a_j, double eta, std::size_t n_mc, std::uint64_t seed) {
  check_dir(t, dir);
  if (n_mc < 10000) throw ConfigError("phi_curve needs at least 1e4 samples", "n_mc");
  const int k = t.k();
  std::vector<double> h(k);
  detail::Normal normal;
  double s1 = 0.0, s2 = 0.0;
  constexpr std::size_t kShard = 10000;
  for (std::size_t s = 0; s * kShard < n_mc; ++s) {
    auto engine = detail::make_engine(seed, {detail::kMcStream, 101, s});
    std::size_t m = std::min(kShard, n_mc - s * kShard);
    for (std::size_t i = 0; i < m; ++i) {
      normal.fill(engine, h.begin(), h.end());
      double h0 = normal(engine), xi = normal(engine);
      double g = t.eval(h);
      double proj = 0.0;
      for (int c = 0; c < k; ++c) proj += h[c] * dir.u[c];
      double v = g * sigma.d1(eta * a_j * g * sigma.d1(h0) + a_j * xi) * proj;
      s1 += v;
      s2 += v * v;
    }
  }
  const double n = static_cast<double>(n_mc);
  double mean = s1 / n;
  return {mean, std::sqrt(std::max(0.0, s2 / n - mean * mean) / (n - 1.0))};
}

TwoStepPrediction predict_two_step_overlap(const TargetFunction& t, const Readout& readout,
                                           double eta, double lambda, double alpha,
                                           const Direction& dir, std::size_t n_mc,
                                           std::uint64_t seed) {
  check_dir(t, dir);
  if (n_mc < 10000) throw ConfigError("two-step prediction needs at least 1e4 samples", "n_mc");
  const int k = t.k(), p = readout.p();
  const double n = static_cast<double>(n_mc);
  Eigen::MatrixXd L0 = psd_factor(initial_covariance(p)).L;
  const int r0 = static_cast<int>(L0.cols());
  detail::Normal normal;

  // Step 0: h0 independent of h*. Accumulate E[F xi^T] (gives Lambda0 L0 by
  // Stein), E[F h*^T] and E[F F^T].
  Eigen::MatrixXd FxiT = Eigen::MatrixXd::Zero(p, r0), Fhs = Eigen::MatrixXd::Zero(p, k),
                  FF = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd hs(k), xi(r0), h0(p), F(p);
  Eigen::VectorXd q1 = Eigen::VectorXd::Zero(p), q2 = Eigen::VectorXd::Zero(p);
  {
    auto engine = detail::make_engine(seed, {detail::kMcStream, 201});
    for (std::size_t i = 0; i < n_mc; ++i) {
      for (int c = 0; c < k; ++c) hs[c] = normal(engine);
      for (int c = 0; c < r0; ++c) xi[c] = normal(engine);
      h0.noalias() = L0 * xi;
      readout.gradient(h0.data(), t.eval(std::span<const double>(hs.data(), k)), F.data());
      FxiT.noalias() += F * xi.transpose();
      Fhs.noalias() += F * hs.transpose();
      FF.noalias() += F * F.transpose();
      Eigen::VectorXd fu = F * hs.dot(dir.u);
      q1 += fu;
      q2 += fu.cwiseProduct(fu);
    }
  }
  Eigen::MatrixXd LamL0 = alpha * FxiT / n;  // Lambda0 * L0
  Eigen::MatrixXd g0 = alpha * Fhs / n;
  Eigen::MatrixXd Cu = alpha * FF / n;
  Eigen::MatrixXd M1 = -eta * g0;
  auto Lu = psd_factor(Cu).L;
  const int ru = static_cast<int>(Lu.cols());

  // Step 1 sampled from primitives: omega1 = A0 omega0 - eta g0 h* - eta u.
  Eigen::MatrixXd s1 = Eigen::MatrixXd::Zero(p, k), s2 = Eigen::MatrixXd::Zero(p, k);
  Eigen::VectorXd proj1(p), h1(p), F1(p), w1(p), xu(ru);
  Eigen::VectorXd o1 = Eigen::VectorXd::Zero(p), o2 = Eigen::VectorXd::Zero(p);
  {
    auto engine = detail::make_engine(seed, {detail::kMcStream, 202});
    for (std::size_t i = 0; i < n_mc; ++i) {
      for (int c = 0; c < k; ++c) hs[c] = normal(engine);
      for (int c = 0; c < r0; ++c) xi[c] = normal(engine);
      for (int c = 0; c < ru; ++c) xu[c] = normal(engine);
      h0.noalias() = L0 * xi;
      const double y = t.eval(std::span<const double>(hs.data(), k));
      readout.gradient(h0.data(), y, F.data());
      w1.noalias() = (1.0 - eta * lambda) * h0 - eta * (LamL0 * xi) - eta * (g0 * hs) - eta * (Lu * xu);
      h1 = w1 - eta * F;
      readout.gradient(h1.data(), y, F1.data());
      double pu = hs.dot(dir.u);
      proj1 = F1 * pu;
      o1 += proj1;
      o2 += proj1.cwiseProduct(proj1);
      s1.noalias() += F1 * hs.transpose();
    }
  }
  TwoStepPrediction out;
  out.M1 = M1;
  out.M2 = (1.0 - eta * lambda) * M1 - eta * alpha * s1 / n;
  out.overlap = out.M2 * dir.u;
  out.first_step = M1 * dir.u;
  Eigen::VectorXd mean = o1 / n;
  Eigen::VectorXd var = (o2 / n - mean.cwiseProduct(mean)).cwiseMax(0.0);
  Eigen::VectorXd mean0 = q1 / n;
  Eigen::VectorXd var0 = (q2 / n - mean0.cwiseProduct(mean0)).cwiseMax(0.0);
  // The two sample sets are independent, so the variances add.
  out.std_error = (eta * alpha) *
                  ((var / (n - 1.0)) + (1.0 - eta * lambda) * (1.0 - eta * lambda) * var0 / (n - 1.0))
                      .cwiseSqrt();
  return out;
}

OnePassComplexity one_pass_complexity(int ie) {
  if (ie < 1) throw ConfigError("information exponent must be >= 1");
  if (ie == 1) return {1, false, "O(d)"};
  if (ie == 2) return {1, true, "O(d log d)"};
  return {ie - 1, false, "O(d^" + std::to_string(ie - 1) + ")"};
}

const char* to_string(Status s) {
  return s == Status::FiniteTLearnable ? "FiniteTLearnable" : "HardUpToK";
}

nlohmann::json to_json(const DirectionVerdict& v) {
  nlohmann::json j;
  j["direction"] = {{"name", v.direction.name},
                    {"u", std::vector<double>(v.direction.u.data(),
                                              v.direction.u.data() + v.direction.u.size())}};
  j["status"] = to_string(v.status);
  if (v.status == Status::FiniteTLearnable)
    j["witness_k"] = v.witness_k;
  else
    j["witness_k"] = nullptr;
  j["k_max"] = v.k_max;
  nlohmann::json moments = nlohmann::json::array();
  for (const auto& m : v.moments)
    moments.push_back({{"k", m.k}, {"value", m.value}, {"stderr", m.std_error},
                       {"threshold", m.threshold}});
  j["moments"] = moments;
  nlohmann::json sym;
  sym["even"] = v.even_symmetric;
  sym["ortho_even"] = v.ortho_even_symmetric.value_or(false);
  sym["witness"] = v.witness ? nlohmann::json(v.witness->description()) : nlohmann::json(nullptr);
  j["symmetry"] = sym;
  j["inconclusive"] = v.inconclusive;
  j["warnings"] = v.warnings;
  return j;
}

}  // namespace batchreuse::hardness

#include "batchreuse/gdsim.hpp"

#include <charconv>
#include <cmath>

#include "batchreuse/errors.hpp"
#include "batchreuse/hermite.hpp"
#include "batchreuse/parallel.hpp"
#include "rng.hpp"

namespace batchreuse::gdsim {

namespace {

constexpr std::size_t kBlockRows = 512;

std::size_t parse_size(std::string_view s, const std::string& field) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
    throw ConfigError("expected a positive integer in '" + std::string(s) + "'", field);
  return v;
}

}  // namespace

BatchSchedule BatchSchedule::parse(const std::string& text) {
  auto colon = text.find(':');
  std::string kind = text.substr(0, colon);
  std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto size_arg = [&](BatchSchedule s) {
    if (arg.empty()) throw ConfigError("schedule '" + kind + "' needs a size", "schedule");
    if (arg.rfind("n/", 0) == 0) {
      s.fraction = parse_size(std::string_view(arg).substr(2), "schedule");
      if (s.fraction == 0) throw ConfigError("n/0 in schedule", "schedule");
    } else {
      s.param = parse_size(arg, "schedule");
      if (s.param == 0) throw ConfigError("schedule size must be positive", "schedule");
    }
    return s;
  };
  if (kind == "full" || kind == "full_batch_reuse") return full();
  if (kind == "fresh" || kind == "fresh_one_pass") return fresh();
  if (kind == "cycle") return size_arg(BatchSchedule{Kind::CycleEpochs});
  if (kind == "replacement") return size_arg(BatchSchedule{Kind::WithReplacement});
  if (kind == "sequential") return size_arg(BatchSchedule{Kind::Sequential});
  throw ConfigError("unknown schedule '" + text + "'", "schedule");
}

std::string BatchSchedule::name() const {
  std::string arg = fraction ? "n/" + std::to_string(fraction) : std::to_string(param);
  switch (kind) {
    case Kind::FullBatchReuse: return "full";
    case Kind::FreshOnePass: return "fresh";
    case Kind::CycleEpochs: return "cycle:" + arg;
    case Kind::WithReplacement: return "replacement:" + arg;
    case Kind::Sequential: return "sequential:" + arg;
  }
  return "full";
}

std::size_t BatchSchedule::batch_size(std::size_t n) const {
  switch (kind) {
    case Kind::FullBatchReuse:
    case Kind::FreshOnePass: return n;
    case Kind::CycleEpochs: {
      std::size_t blocks = fraction ? n / fraction : param;
      return blocks ? n / blocks : 0;
    }
    case Kind::WithReplacement:
    case Kind::Sequential: return fraction ? n / fraction : param;
  }
  return n;
}

void BatchSchedule::validate(std::size_t n) const {
  std::size_t nb = batch_size(n);
  if (nb == 0 || nb > n) throw ConfigError("minibatch size must be in [1, n]", "schedule");
  if (fraction && n % fraction != 0)
    throw ConfigError("n is not divisible by " + std::to_string(fraction), "schedule");
  if ((kind == Kind::CycleEpochs || kind == Kind::Sequential) && n % nb != 0)
    throw ConfigError("minibatch size must divide n for cycling schedules", "schedule");
}

std::size_t TrainConfig::n() const {
  return static_cast<std::size_t>(std::llround(alpha * d));
}

void TrainConfig::validate() const {
  if (d < 1) throw ConfigError("d must be >= 1", "d");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0", "alpha");
  if (p < 1 || (p > 1 && p % 2 != 0)) throw ConfigError("p must be 1 or even", "p");
  if (T < 1) throw ConfigError("T must be >= 1", "T");
  if (runs < 1) throw ConfigError("runs must be >= 1", "runs");
  if (record_every < 1) throw ConfigError("record_every must be >= 1", "record_every");
  if (!(eta > 0.0)) throw ConfigError("eta must be > 0", "eta");
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0", "lambda");
  if (n() < 1) throw ConfigError("alpha * d rounds to zero samples", "alpha");
  schedule.validate(n());
}

Dataset::Dataset(int d, std::size_t n, std::uint64_t seed, const Teacher& teacher,
                 const TargetFunction& target, bool materialize)
    : d_(d), n_(n), seed_(seed) {
  if (teacher.d() != d) throw ConfigError("teacher dimension does not match d", "d");
  if (teacher.k() < target.k()) throw ConfigError("teacher has fewer rows than target needs");
  const int k = teacher.k();
  y_.resize(n);
  hstar_.resize(n, k);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  if (materialize) {
    Z_.resize(n, d);
    for (std::size_t i = 0; i < n; ++i) generate_row(i, Z_.row(i).data());
  }
  RowMatrix block;
  for (std::size_t b = 0; b < n; b += kBlockRows) {
    std::size_t m = std::min(kBlockRows, n - b);
    if (materialize) {
      hstar_.middleRows(b, m).noalias() = Z_.middleRows(b, m) * teacher.W.transpose() * inv_sqrt_d;
    } else {
      rows(b, m, block);
      hstar_.middleRows(b, m).noalias() = block * teacher.W.transpose() * inv_sqrt_d;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    y_[i] = target.eval(std::span<const double>(hstar_.row(i).data(), k));
}

void Dataset::row(std::size_t i, double* out) const {
  if (materialized()) {
    std::copy_n(Z_.row(i).data(), d_, out);
    return;
  }
  generate_row(i, out);
}

void Dataset::generate_row(std::size_t i, double* out) const {
  auto engine = detail::make_engine(seed_, {detail::kDataStream, i});
  detail::Normal normal;
  normal.fill(engine, out, out + d_);
}

void Dataset::rows(std::size_t begin, std::size_t count, RowMatrix& out) const {
  out.resize(count, d_);
  for (std::size_t i = 0; i < count; ++i) row(begin + i, out.row(i).data());
}

Dataset generate_dataset(const TrainConfig& cfg, const Teacher& teacher,
                         const TargetFunction& target, std::uint64_t seed) {
  const std::size_t n = cfg.n();
  return Dataset(cfg.d, n, seed, teacher, target, n * cfg.d <= cfg.materialize_limit);
}

StudentState init_student(const TrainConfig& cfg, std::uint64_t seed) {
  const int p = cfg.p, d = cfg.d;
  StudentState s;
  s.readout.a = make_second_layer(p, cfg.second_layer, seed);
  s.readout.sigma = cfg.sigma;
  s.readout.residual = cfg.residual.value_or(default_residual(p));
  s.W.resize(p, d);
  auto engine = detail::make_engine(seed, {detail::kStudentStream});
  detail::Normal normal;
  const int free_rows = p == 1 ? 1 : p / 2;
  for (int i = 0; i < free_rows; ++i)
    for (int c = 0; c < d; ++c) s.W(i, c) = normal(engine);
  for (int i = free_rows; i < p; ++i) s.W.row(i) = s.W.row(pair_of(i, p));
  return s;
}

namespace {

// Calls fn(block, first_position) over the batch in fixed-size blocks.
template <class Fn>
void for_each_block(const Batch& batch, Fn&& fn) {
  const Dataset& data = *batch.data;
  RowMatrix buffer;
  const std::size_t total = batch.size();
  for (std::size_t b = 0; b < total; b += kBlockRows) {
    std::size_t m = std::min(kBlockRows, total - b);
    if (batch.indices.empty()) {
      if (data.materialized()) {
        fn(data.stored().middleRows(batch.begin + b, m), b);
      } else {
        data.rows(batch.begin + b, m, buffer);
        fn(buffer, b);
      }
    } else {
      buffer.resize(m, data.dim());
      for (std::size_t i = 0; i < m; ++i) data.row(batch.indices[b + i], buffer.row(i).data());
      fn(buffer, b);
    }
  }
}

std::size_t global_index(const Batch& batch, std::size_t pos) {
  return batch.indices.empty() ? batch.begin + pos : batch.indices[pos];
}

}  // namespace

Eigen::MatrixXd batch_gradient(const StudentState& s, const Batch& batch, double* loss_sum) {
  const int p = s.readout.p();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(s.W.cols()));
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(p, s.W.cols());
  const auto& y = batch.data->labels();
  double loss = 0.0;
  RowMatrix H, F;
  for_each_block(batch, [&](const auto& Zb, std::size_t first) {
    const Eigen::Index m = Zb.rows();
    H.resize(m, p);
    H.noalias() = Zb * s.W.transpose();
    H *= inv_sqrt_d;
    F.resize(m, p);
    for (Eigen::Index i = 0; i < m; ++i) {
      double yi = y[global_index(batch, first + i)];
      s.readout.gradient(H.row(i).data(), yi, F.row(i).data());
      loss += s.readout.loss(H.row(i).data(), yi);
    }
    G.noalias() += F.transpose() * Zb;
  });
  G *= inv_sqrt_d;
  if (loss_sum) *loss_sum = loss;
  return G;
}

double batch_loss(const StudentState& s, const Batch& batch) {
  const int p = s.readout.p();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(s.W.cols()));
  const auto& y = batch.data->labels();
  double loss = 0.0;
  RowMatrix H;
  for_each_block(batch, [&](const auto& Zb, std::size_t first) {
    H.resize(Zb.rows(), p);
    H.noalias() = Zb * s.W.transpose();
    H *= inv_sqrt_d;
    for (Eigen::Index i = 0; i < Zb.rows(); ++i)
      loss += s.readout.loss(H.row(i).data(), y[global_index(batch, first + i)]);
  });
  return loss / static_cast<double>(batch.size());
}

StepResult gd_step(StudentState& s, const Batch& batch, double eta, double lambda,
                   GradNormalization normalization) {
  if (batch.size() == 0) throw ConfigError("empty batch");
  double loss = 0.0;
  Eigen::MatrixXd G = batch_gradient(s, batch, &loss);
  if (!G.allFinite())
    throw NumericalError("non-finite gradient; the step size is likely too large");
  if (normalization == GradNormalization::Mean) G /= static_cast<double>(batch.size());
  if (lambda != 0.0) s.W *= (1.0 - eta * lambda);
  s.W.noalias() -= eta * G;
  return {loss / static_cast<double>(batch.size())};
}

NamedDirection resolve_direction(const std::string& name, const TargetFunction& target) {
  const int k = target.k();
  NamedDirection out{name, {}};
  auto c1 = [&] {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(k);
    if (k <= hermite::kMaxQuadratureDimension) {
      auto rule = hermite::QuadratureRule::gauss_hermite(k <= 3 ? 40 : 16, k);
      hermite::for_each_node(rule, [&](std::span<const double> h, double w) {
        double g = target.eval(h) * w;
        for (int i = 0; i < k; ++i) c[i] += g * h[i];
      });
    } else {
      auto engine = detail::make_engine(12345, {detail::kMcStream, 301});
      detail::Normal normal;
      std::vector<double> h(k);
      const int n = 1000000;
      for (int s = 0; s < n; ++s) {
        normal.fill(engine, h.begin(), h.end());
        double g = target.eval(h);
        for (int i = 0; i < k; ++i) c[i] += g * h[i] / n;
      }
    }
    if (c.norm() < 1e-8)
      throw ConfigError("C1 direction is undefined: E[g(h*) h*] vanishes for this target",
                        "directions");
    return Eigen::VectorXd(c.normalized());
  };
  if (name == "teacher") {
    out.basis = Eigen::MatrixXd::Identity(k, k);
  } else if (name.size() > 1 && name[0] == 'e' && std::isdigit(static_cast<unsigned char>(name[1]))) {
    int i = std::stoi(name.substr(1)) - 1;
    if (i < 0 || i >= k) throw ConfigError("direction " + name + " outside teacher basis", "directions");
    out.basis = Eigen::VectorXd::Unit(k, i);
  } else if (name == "C1") {
    out.basis = c1();
  } else if (name == "C1_perp") {
    if (k < 2) throw ConfigError("C1_perp needs k >= 2", "directions");
    Eigen::VectorXd c = c1();
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(k, k) - c * c.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(P);
    out.basis = es.eigenvectors().rightCols(k - 1);
  } else if (name.rfind("custom:", 0) == 0) {
    std::vector<double> coeffs;
    std::string rest = name.substr(7);
    std::size_t start = 0;
    while (start <= rest.size()) {
      auto comma = rest.find(',', start);
      std::string tok = rest.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      try {
        coeffs.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError("bad coefficient '" + tok + "' in " + name, "directions");
      }
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (static_cast<int>(coeffs.size()) != k)
      throw ConfigError(name + " needs " + std::to_string(k) + " coefficients", "directions");
    Eigen::VectorXd u = Eigen::Map<Eigen::VectorXd>(coeffs.data(), k);
    if (u.norm() == 0.0) throw ConfigError(name + " is the zero vector", "directions");
    out.basis = u.normalized();
  } else {
    throw ConfigError("unknown direction '" + name + "'", "directions");
  }
  return out;
}

double projection(const Eigen::MatrixXd& M, const NamedDirection& dir) {
  return (M * dir.basis).norm();
}

double span_singular_value(const Eigen::MatrixXd& M, const Eigen::MatrixXd& basis) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M * basis);
  return svd.singularValues().minCoeff();
}

RunRecord train_run(const TrainConfig& cfg, const Teacher& teacher, const TargetFunction& target,
                    int run) {
  const std::uint64_t run_seed = detail::stream_seed(cfg.seed, {detail::kRunStream,
                                                                static_cast<std::uint64_t>(run)});
  const std::size_t n = cfg.n();
  const std::size_t nb = cfg.schedule.batch_size(n);
  const double inv_d = 1.0 / cfg.d;
  unsigned threads = cfg.threads ? cfg.threads : default_threads();
  const bool materialize =
      n * static_cast<std::size_t>(cfg.d) * std::min<unsigned>(threads, cfg.runs) <=
      cfg.materialize_limit;
  auto data_seed = [&](int t) {
    return detail::stream_seed(run_seed, {detail::kDataStream, static_cast<std::uint64_t>(t)});
  };
  using Kind = BatchSchedule::Kind;
  const Kind kind = cfg.schedule.kind;

  StudentState s = init_student(cfg, detail::stream_seed(run_seed, {detail::kStudentStream}));
  std::optional<Dataset> shared;
  if (kind != Kind::FreshOnePass) shared.emplace(cfg.d, n, data_seed(0), teacher, target, materialize);
  std::optional<Dataset> fresh;

  auto batch_for = [&](int t) {
    Batch b;
    if (kind == Kind::FreshOnePass) {
      fresh.emplace(cfg.d, n, data_seed(t), teacher, target, materialize);
      b.data = &*fresh;
      b.count = n;
      return b;
    }
    b.data = &*shared;
    switch (kind) {
      case Kind::FullBatchReuse: b.count = n; break;
      case Kind::CycleEpochs:
      case Kind::Sequential: {
        std::size_t blocks = n / nb;
        b.begin = (static_cast<std::size_t>(t) % blocks) * nb;
        b.count = nb;
        break;
      }
      case Kind::WithReplacement: {
        auto engine = detail::make_engine(run_seed, {detail::kReplacementStream,
                                                     static_cast<std::uint64_t>(t)});
        boost::random::uniform_int_distribution<std::size_t> pick(0, n - 1);
        b.indices.resize(nb);
        for (auto& i : b.indices) i = pick(engine);
        break;
      }
      default: break;
    }
    return b;
  };

  RunRecord rec;
  for (int t = 0; t <= cfg.T; ++t) {
    const bool record = t % cfg.record_every == 0 || t == cfg.T;
    Batch b = batch_for(t);
    double loss;
    if (t < cfg.T) {
      Eigen::MatrixXd M = s.W * teacher.W.transpose() * inv_d;
      loss = gd_step(s, b, cfg.eta, cfg.lambda, cfg.normalization).loss_mean;
      if (record) {
        rec.steps.push_back(t);
        rec.M.push_back(std::move(M));
        rec.loss.push_back(loss);
      }
    } else {
      rec.steps.push_back(t);
      rec.M.push_back(s.W * teacher.W.transpose() * inv_d);
      rec.loss.push_back(batch_loss(s, b));
    }
  }
  return rec;
}

OverlapTrace aggregate(const std::vector<RunRecord>& runs, const std::vector<NamedDirection>& dirs,
                       const std::string& schedule) {
  OverlapTrace tr;
  tr.schedule = schedule;
  tr.runs = static_cast<int>(runs.size());
  for (const auto& d : dirs) tr.directions.push_back(d.name);
  if (runs.empty()) return tr;
  tr.steps = runs.front().steps;
  const std::size_t S = tr.steps.size();
  const double R = static_cast<double>(runs.size());
  auto se_of = [&](double sum, double sumsq) {
    if (runs.size() < 2) return 0.0;
    double mean = sum / R;
    double var = std::max(0.0, (sumsq - R * mean * mean) / (R - 1.0));
    return std::sqrt(var / R);
  };
  for (std::size_t i = 0; i < S; ++i) {
    std::vector<double> om, os;
    for (const auto& d : dirs) {
      double s1 = 0.0, s2 = 0.0;
      for (const auto& r : runs) {
        double v = projection(r.M[i], d);
        s1 += v;
        s2 += v * v;
      }
      om.push_back(s1 / R);
      os.push_back(se_of(s1, s2));
    }
    tr.overlap_mean.push_back(om);
    tr.overlap_se.push_back(os);
    double l1 = 0.0, l2 = 0.0;
    Eigen::MatrixXd m1 = Eigen::MatrixXd::Zero(runs[0].M[i].rows(), runs[0].M[i].cols());
    Eigen::MatrixXd m2 = m1;
    for (const auto& r : runs) {
      l1 += r.loss[i];
      l2 += r.loss[i] * r.loss[i];
      m1 += r.M[i];
      m2 += r.M[i].cwiseProduct(r.M[i]);
    }
    tr.loss_mean.push_back(l1 / R);
    tr.loss_se.push_back(se_of(l1, l2));
    Eigen::MatrixXd se = m1;
    for (Eigen::Index a = 0; a < se.rows(); ++a)
      for (Eigen::Index b = 0; b < se.cols(); ++b) se(a, b) = se_of(m1(a, b), m2(a, b));
    tr.M_mean.push_back(m1 / R);
    tr.M_se.push_back(se);
  }
  tr.per_run = runs;
  return tr;
}

OverlapTrace train(const TrainConfig& cfg, const Teacher& teacher, const TargetFunction& target,
                   const std::vector<NamedDirection>& directions) {
  cfg.validate();
  std::vector<RunRecord> runs(cfg.runs);
  unsigned threads = cfg.threads ? cfg.threads : default_threads();
  parallel_for(runs.size(), threads,
               [&](std::size_t r) { runs[r] = train_run(cfg, teacher, target, static_cast<int>(r)); });
  return aggregate(runs, directions, cfg.schedule.name());
}

OverlapTrace online_sgd_continue(const StudentState& student, const Teacher& teacher,
                                 const TargetFunction& target, double eta2, std::size_t steps,
                                 std::uint64_t seed, std::size_t record_every,
                                 const std::vector<NamedDirection>& directions, bool spherical) {
  if (record_every == 0) throw ConfigError("record_every must be positive");
  StudentState s = student;
  const double radius = std::sqrt(static_cast<double>(s.W.cols()));
  const int d = static_cast<int>(s.W.cols()), p = s.readout.p(), k = teacher.k();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d)), inv_d = 1.0 / d;
  Eigen::VectorXd z(d), h(p), hs(k), F(p);
  detail::Normal normal;
  RunRecord rec;
  for (std::size_t step = 0;; ++step) {
    const bool record = step % record_every == 0 || step == steps;
    if (step == steps) {
      rec.steps.push_back(static_cast<int>(step));
      rec.M.push_back(s.W * teacher.W.transpose() * inv_d);
      rec.loss.push_back(std::nan(""));
      break;
    }
    auto engine = detail::make_engine(seed, {detail::kOnlineStream, step});
    normal.fill(engine, z.data(), z.data() + d);
    h.noalias() = s.W * z * inv_sqrt_d;
    hs.noalias() = teacher.W * z * inv_sqrt_d;
    double y = target.eval(std::span<const double>(hs.data(), k));
    if (record) {
      rec.steps.push_back(static_cast<int>(step));
      rec.M.push_back(s.W * teacher.W.transpose() * inv_d);
      rec.loss.push_back(s.readout.loss(h.data(), y));
    }
    s.readout.gradient(h.data(), y, F.data());
    s.W.noalias() -= (eta2 * inv_sqrt_d) * F * z.transpose();
    if (!s.W.allFinite()) throw NumericalError("online SGD diverged; reduce eta2");
    if (spherical)
      for (int j = 0; j < p; ++j) s.W.row(j) *= radius / s.W.row(j).norm();
  }
  return aggregate({rec}, directions, "online");
}

}  // namespace batchreuse::gdsim

#include "batchreuse/targets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>

#include "batchreuse/errors.hpp"
#include "batchreuse/hermite.hpp"
#include "rng.hpp"

namespace batchreuse::targets {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

int max_index(const TargetFunction::Kind& kind) {
  return std::visit(
      Overloaded{
          [](const TargetFunction::SingleIndex& s) { return s.index; },
          [](const TargetFunction::Product& p) {
            return *std::max_element(p.indices.begin(), p.indices.end());
          },
          [](const TargetFunction::Staircase& s) { return s.depth - 1; },
          [](const TargetFunction::Committee& c) { return c.width - 1; },
          [](const TargetFunction::Sum& s) {
            int m = 0;
            for (const auto& t : s.terms) m = std::max(m, t.k() - 1);
            return m;
          },
      },
      kind);
}

}  // namespace

TargetFunction::TargetFunction(Kind kind, std::optional<int> declared_leap)
    : kind_(std::move(kind)), declared_leap_(declared_leap) {
  std::visit(Overloaded{
                 [](const SingleIndex& s) {
                   if (s.index < 0) throw ConfigError("single-index coordinate must be >= 1");
                 },
                 [](const Product& p) {
                   if (p.indices.empty()) throw ConfigError("product needs at least one index");
                   std::set<int> seen(p.indices.begin(), p.indices.end());
                   if (seen.size() != p.indices.size())
                     throw ConfigError("product indices must be distinct");
                   if (*seen.begin() < 0) throw ConfigError("product indices must be >= 1");
                 },
                 [](const Staircase& s) {
                   if (s.depth < 1) throw ConfigError("staircase depth must be >= 1");
                 },
                 [](const Committee& c) {
                   if (c.width < 1) throw ConfigError("committee width must be >= 1");
                 },
                 [](const Sum& s) {
                   if (s.terms.empty()) throw ConfigError("sum needs at least one term");
                   std::set<int> used;
                   for (const auto& t : s.terms)
                     for (int c : t.support())
                       if (!used.insert(c).second)
                         throw ConfigError("sum terms must use disjoint coordinates");
                 },
             },
             kind_);
  k_ = max_index(kind_) + 1;
  lower_into(lowered_);
}

TargetFunction TargetFunction::single(ScalarFunction g, int index) {
  return TargetFunction(SingleIndex{g, index});
}
TargetFunction TargetFunction::product(std::vector<int> indices) {
  return TargetFunction(Product{std::move(indices)});
}
TargetFunction TargetFunction::staircase(int depth) { return TargetFunction(Staircase{depth}); }
TargetFunction TargetFunction::committee(ScalarFunction g, int width) {
  return TargetFunction(Committee{g, width});
}
TargetFunction TargetFunction::sum(std::vector<TargetFunction> terms) {
  return TargetFunction(Sum{std::move(terms)});
}

double TargetFunction::eval(std::span<const double> h) const {
  if (static_cast<int>(h.size()) < k_) throw ConfigError("h* shorter than target index count");
  return eval_closed(h.data());
}

double TargetFunction::eval_closed(const double* h) const {
  return std::visit(Overloaded{
                        [&](const SingleIndex& s) { return s.g.value(h[s.index]); },
                        [&](const Product& p) {
                          double v = 1.0;
                          for (int i : p.indices) v *= h[i];
                          return v;
                        },
                        [&](const Staircase& s) {
                          double acc = 0.0, v = 1.0;
                          for (int m = 0; m < s.depth; ++m) {
                            v *= h[m];
                            acc += v;
                          }
                          return acc;
                        },
                        [&](const Committee& c) {
                          double acc = 0.0;
                          for (int r = 0; r < c.width; ++r) acc += c.g.value(h[r]);
                          return acc;
                        },
                        [&](const Sum& s) {
                          double acc = 0.0;
                          for (const auto& t : s.terms) acc += t.eval_closed(h);
                          return acc;
                        },
                    },
                    kind_);
}

void TargetFunction::gradient(std::span<const double> h, std::span<double> out) const {
  if (static_cast<int>(h.size()) < k_ || static_cast<int>(out.size()) < k_)
    throw ConfigError("gradient buffers shorter than target index count");
  std::fill(out.begin(), out.begin() + k_, 0.0);
  grad_closed(h.data(), out.data());
}

void TargetFunction::grad_closed(const double* h, double* out) const {
  std::visit(Overloaded{
                 [&](const SingleIndex& s) { out[s.index] += s.g.d1(h[s.index]); },
                 [&](const Product& p) {
                   for (int i : p.indices) {
                     double v = 1.0;
                     for (int j : p.indices)
                       if (j != i) v *= h[j];
                     out[i] += v;
                   }
                 },
                 [&](const Staircase& s) {
                   for (int i = 0; i < s.depth; ++i) {
                     double prefix = 1.0;  // product of z_l for l < i
                     for (int l = 0; l < i; ++l) prefix *= h[l];
                     double tail = 1.0, acc = 0.0;
                     for (int m = i; m < s.depth; ++m) {
                       if (m > i) tail *= h[m];
                       acc += tail;
                     }
                     out[i] += prefix * acc;
                   }
                 },
                 [&](const Committee& c) {
                   for (int r = 0; r < c.width; ++r) out[r] += c.g.d1(h[r]);
                 },
                 [&](const Sum& s) {
                   for (const auto& t : s.terms) t.grad_closed(h, out);
                 },
             },
             kind_);
}

void TargetFunction::lower_into(std::vector<std::vector<SeparableTerm>>& groups) const {
  const ScalarFunction id = ScalarFunction::linear();
  std::visit(Overloaded{
                 [&](const SingleIndex& s) {
                   groups.push_back({SeparableTerm{1.0, {{s.index, s.g}}}});
                 },
                 [&](const Product& p) {
                   SeparableTerm t;
                   for (int i : p.indices) t.factors.emplace_back(i, id);
                   groups.push_back({t});
                 },
                 [&](const Staircase& s) {
                   std::vector<SeparableTerm> g;
                   for (int m = 0; m < s.depth; ++m) {
                     SeparableTerm t;
                     for (int l = 0; l <= m; ++l) t.factors.emplace_back(l, id);
                     g.push_back(t);
                   }
                   groups.push_back(g);
                 },
                 [&](const Committee& c) {
                   std::vector<SeparableTerm> g;
                   for (int r = 0; r < c.width; ++r) g.push_back(SeparableTerm{1.0, {{r, c.g}}});
                   groups.push_back(g);
                 },
                 [&](const Sum& s) {
                   for (const auto& t : s.terms) t.lower_into(groups);
                 },
             },
             kind_);
}

double TargetFunction::eval_generic(std::span<const double> h) const {
  double acc = 0.0;
  for (const auto& group : lowered_) {
    double g = 0.0;
    for (const auto& term : group) {
      double v = term.coef;
      for (const auto& [c, f] : term.factors) v *= f.value(h[c]);
      g += v;
    }
    acc += g;
  }
  return acc;
}

bool TargetFunction::is_single_index() const {
  if (auto* s = std::get_if<SingleIndex>(&kind_)) return s->index == 0;
  return false;
}

const ScalarFunction& TargetFunction::single_function() const {
  if (!is_single_index()) throw ConfigError("target is not single-index");
  return std::get<SingleIndex>(kind_).g;
}

std::optional<std::vector<int>> TargetFunction::coordinate_degrees() const {
  std::vector<int> deg(k_, 0);
  for (const auto& group : lowered_)
    for (const auto& term : group)
      for (const auto& [c, f] : term.factors) {
        int pd = f.polynomial_degree();
        if (pd < 0) return std::nullopt;
        deg[c] = std::max(deg[c], pd);
      }
  return deg;
}

std::vector<int> TargetFunction::support() const {
  std::set<int> s;
  for (const auto& group : lowered_)
    for (const auto& term : group)
      for (const auto& [c, f] : term.factors) s.insert(c);
  return {s.begin(), s.end()};
}

std::string TargetFunction::spec() const {
  return std::visit(Overloaded{
                        [](const SingleIndex& s) {
                          std::string r = "single:" + s.g.name();
                          if (s.index != 0) r += "@" + std::to_string(s.index + 1);
                          return r;
                        },
                        [](const Product& p) {
                          std::string r = "product:";
                          for (std::size_t i = 0; i < p.indices.size(); ++i)
                            r += (i ? "," : "") + std::to_string(p.indices[i] + 1);
                          return r;
                        },
                        [](const Staircase& s) { return "staircase:" + std::to_string(s.depth); },
                        [](const Committee& c) {
                          return "committee:" + c.g.name() + ",k=" + std::to_string(c.width);
                        },
                        [](const Sum& s) {
                          std::string r = "sum(";
                          for (std::size_t i = 0; i < s.terms.size(); ++i)
                            r += (i ? "; " : "") + s.terms[i].spec();
                          return r + ")";
                        },
                    },
                    kind_);
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

int parse_int(std::string_view s, const char* what) {
  s = trim(s);
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
    throw ConfigError(std::string("expected integer ") + what + ", got '" + std::string(s) + "'",
                      "target");
  return v;
}

}  // namespace

TargetFunction parse_target(std::string_view text) {
  text = trim(text);
  if (text.starts_with("sum(")) {
    if (!text.ends_with(")")) throw ConfigError("unterminated sum(...) in target", "target");
    auto body = text.substr(4, text.size() - 5);
    std::vector<TargetFunction> terms;
    int depth = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= body.size(); ++i) {
      if (i == body.size() || (body[i] == ';' && depth == 0)) {
        terms.push_back(parse_target(body.substr(start, i - start)));
        start = i + 1;
      } else if (body[i] == '(') {
        ++depth;
      } else if (body[i] == ')') {
        --depth;
      }
    }
    return TargetFunction::sum(std::move(terms));
  }
  auto colon = text.find(':');
  if (colon == std::string_view::npos)
    throw ConfigError("target '" + std::string(text) + "' lacks a kind prefix", "target");
  auto kind = text.substr(0, colon);
  auto rest = trim(text.substr(colon + 1));
  if (kind == "single") {
    int index = 0;
    if (auto at = rest.find('@'); at != std::string_view::npos) {
      index = parse_int(rest.substr(at + 1), "coordinate") - 1;
      rest = rest.substr(0, at);
    }
    return TargetFunction::single(ScalarFunction::parse(trim(rest)), index);
  }
  if (kind == "product") {
    std::vector<int> idx;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= rest.size(); ++i)
      if (i == rest.size() || rest[i] == ',') {
        idx.push_back(parse_int(rest.substr(start, i - start), "product index") - 1);
        start = i + 1;
      }
    return TargetFunction::product(std::move(idx));
  }
  if (kind == "staircase") return TargetFunction::staircase(parse_int(rest, "staircase depth"));
  if (kind == "committee") {
    auto comma = rest.find(',');
    if (comma == std::string_view::npos) throw ConfigError("committee needs ',k=<width>'", "target");
    auto width = trim(rest.substr(comma + 1));
    if (!width.starts_with("k=")) throw ConfigError("committee needs ',k=<width>'", "target");
    return TargetFunction::committee(ScalarFunction::parse(trim(rest.substr(0, comma))),
                                     parse_int(width.substr(2), "committee width"));
  }
  throw ConfigError("unknown target kind '" + std::string(kind) + "'", "target");
}

Teacher make_teacher(int d, int k, std::uint64_t seed) {
  if (k < 1 || d < k) throw ConfigError("teacher needs d >= k >= 1");
  auto engine = detail::make_engine(seed, {detail::kTeacherStream});
  detail::Normal normal;
  Eigen::MatrixXd W(k, d);
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < d; ++c) W(r, c) = normal(engine);
  // Two passes of modified Gram-Schmidt keep cross products at rounding level.
  for (int pass = 0; pass < 2; ++pass)
    for (int r = 0; r < k; ++r) {
      for (int q = 0; q < r; ++q) W.row(r) -= W.row(r).dot(W.row(q)) * W.row(q);
      W.row(r).normalize();
    }
  W *= std::sqrt(static_cast<double>(d));
  return Teacher{std::move(W)};
}

Teacher canonical_teacher(int d, int k) {
  if (k < 1 || d < k) throw ConfigError("teacher needs d >= k >= 1");
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(k, d);
  for (int r = 0; r < k; ++r) W(r, r) = std::sqrt(static_cast<double>(d));
  return Teacher{std::move(W)};
}

int information_exponent(const TargetFunction& t, int max_j, double tol) {
  if (!t.is_single_index()) throw ConfigError("information exponent needs a single-index target");
  if (max_j < 1) throw ConfigError("max_j must be >= 1");
  const auto& g = t.single_function();
  auto rule = hermite::QuadratureRule::gauss_hermite(hermite::kDefaultNodes);
  auto f = [&](double x) { return g.value(x); };
  auto nu = hermite::hermite_coefficients(f, max_j, rule);
  double norm = std::sqrt(hermite::gauss_expectation_1d([&](double x) { return f(x) * f(x); }, rule));
  if (norm == 0.0) throw NotFoundError("target is identically zero");
  for (int j = 1; j <= max_j; ++j)
    if (std::abs(nu[j]) / std::sqrt(hermite::factorial(j)) > tol * norm) return j;
  throw NotFoundError("no Hermite coefficient above tolerance up to degree " +
                      std::to_string(max_j));
}

const std::vector<RegistryEntry>& registry() {
  static const std::vector<RegistryEntry> entries = {
      {"tanh", "single:tanh", 1, "single-index tanh, information exponent 1"},
      {"he3", "single:he3", 3, "single-index He3, information exponent 3"},
      {"he4", "single:he4", 4, "single-index He4, even target"},
      {"easy_multi", "staircase:2", 1, "z1 + z1 z2, learnable by one pass through staircase"},
      {"leap3_multi", "sum(single:linear@1; single:he3@2)", 3,
       "z1 + He3(z2), second direction needs batch reuse"},
      {"committee", "committee:relu,k=2", 2, "relu(z1) + relu(z2)"},
      {"staircase", "staircase:3", 1, "z1 + z1 z2 + z1 z2 z3"},
      {"product_he3", "sum(product:1,2,3; single:he3@4)", 3, "z1 z2 z3 + He3(z4)"},
  };
  return entries;
}

TargetFunction registry_target(std::string_view name) {
  for (const auto& e : registry())
    if (e.name == name) {
      auto t = parse_target(e.spec);
      t.set_declared_leap(e.declared_leap);
      return t;
    }
  throw ConfigError("unknown registry target '" + std::string(name) + "'", "target");
}

}  // namespace batchreuse::targets

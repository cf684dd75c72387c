#include "batchreuse/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "batchreuse/csv.hpp"
#include "batchreuse/errors.hpp"
#include "batchreuse/hardness.hpp"
#include "batchreuse/version.hpp"
#include "rng.hpp"

namespace batchreuse::experiment {

namespace {

const std::vector<std::string> kEngines{"sim", "dmft", "one_pass_theory", "hardness"};

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

SecondLayer parse_second_layer(const std::string& s) {
  if (s == "plus_minus") return SecondLayer::PlusMinus;
  if (s == "gaussian") return SecondLayer::Gaussian;
  throw ConfigError("unknown second_layer '" + s + "' (plus_minus | gaussian)", "second_layer");
}

gdsim::GradNormalization parse_normalization(const std::string& s) {
  if (s == "sum") return gdsim::GradNormalization::Sum;
  if (s == "mean") return gdsim::GradNormalization::Mean;
  throw ConfigError("unknown normalization '" + s + "' (sum | mean)", "train.normalization");
}

}  // namespace

// ---------------------------------------------------------------- config object

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  if (!preset.empty()) j["preset"] = preset;
  j["full_scale"] = full_scale;
  j["target"] = target;
  j["activation"] = activation;
  j["residual"] = residual;
  j["second_layer"] = second_layer;
  j["alpha"] = alpha;
  j["eta"] = eta;
  j["lambda"] = lambda;
  j["p"] = p;
  j["T"] = T;
  j["seed"] = seed;
  j["engines"] = engines;
  j["directions"] = directions;
  j["output"] = output;
  j["train"] = {{"d", d},
                {"runs", runs},
                {"schedules", schedules},
                {"record_every", record_every},
                {"epochs", epochs},
                {"normalization", normalization},
                {"threads", threads}};
  j["dmft"] = {{"samples", samples},
               {"kernel_mode", kernel_mode},
               {"formulation", formulation},
               {"fd_eps", fd_eps},
               {"fd_eps_nonsmooth", fd_eps_nonsmooth},
               {"tp_ceiling", tp_ceiling},
               {"memory_limit_gb", memory_limit_gb}};
  j["hardness"] = {{"k_max", k_max}, {"directions", hardness_directions}, {"mc_samples", hardness_mc_samples}};
  return j;
}

Readout ExperimentConfig::readout() const {
  Readout r;
  r.sigma = ScalarFunction::parse(activation);
  r.a = make_second_layer(p, parse_second_layer(second_layer),
                          detail::stream_seed(seed, {detail::kStudentStream}));
  r.residual = residual == "auto" ? default_residual(p) : parse_residual(residual);
  return r;
}

gdsim::TrainConfig ExperimentConfig::train_config(const std::string& schedule) const {
  gdsim::TrainConfig c;
  c.d = d;
  c.alpha = alpha;
  c.p = p;
  c.eta = eta;
  c.lambda = lambda;
  c.T = T;
  c.schedule = gdsim::BatchSchedule::parse(schedule);
  c.seed = seed;
  c.runs = runs;
  c.sigma = ScalarFunction::parse(activation);
  c.second_layer = parse_second_layer(second_layer);
  c.normalization = parse_normalization(normalization);
  if (residual != "auto") c.residual = parse_residual(residual);
  c.record_every = record_every;
  c.threads = threads;
  if (epochs > 0) {
    const std::size_t n = c.n();
    const std::size_t nb = c.schedule.batch_size(n);
    c.T = static_cast<int>(epochs * (n / nb));
  }
  return c;
}

dmft::DmftConfig ExperimentConfig::dmft_config() const {
  dmft::DmftConfig c;
  c.alpha = alpha;
  c.eta = eta;
  c.lambda = lambda;
  c.T = T;
  c.n_samples = samples;
  c.seed = seed;
  c.kernel_mode = dmft::parse_kernel_mode(kernel_mode);
  c.formulation = dmft::parse_formulation(formulation);
  c.fd_eps = fd_eps;
  c.fd_eps_nonsmooth = fd_eps_nonsmooth;
  c.tp_ceiling = tp_ceiling;
  c.memory_limit_gb = memory_limit_gb;
  c.threads = threads;
  return c;
}

void ExperimentConfig::validate() const {
  if (engines.empty()) throw ConfigError("at least one engine is required", "engines");
  for (const auto& e : engines)
    if (!contains(kEngines, e))
      throw ConfigError("unknown engine '" + e + "' (sim | dmft | one_pass_theory | hardness)", "engines");
  auto tagged = [](const char* field, auto&& fn) {
    try {
      return fn();
    } catch (const ConfigError& e) {
      if (!e.field().empty()) throw;
      throw ConfigError(e.what(), field);
    }
  };
  auto t = tagged("target", [&] { return targets::parse_target(target); });
  tagged("activation", [&] { return ScalarFunction::parse(activation); });
  tagged("residual", [&] { return readout(); });
  if (p < 1) throw ConfigError("p must be at least 1", "p");
  if (k_max < 1) throw ConfigError("hardness.k_max must be at least 1", "hardness.k_max");
  for (const auto& dname : directions) gdsim::resolve_direction(dname, t);
  if (contains(engines, "sim")) {
    if (schedules.empty()) throw ConfigError("sim engine needs at least one schedule", "train.schedules");
    for (const auto& s : schedules) {
      auto tc = train_config(s);
      tc.validate();
      tc.schedule.validate(tc.n());
    }
  }
  if (contains(engines, "dmft") || contains(engines, "one_pass_theory")) dmft_config().validate(p);
}

// ---------------------------------------------------------------- parsing

namespace {

struct Parser {
  ExperimentConfig& cfg;

  static int line_of(const YAML::Node& n) { return n.Mark().line >= 0 ? n.Mark().line + 1 : -1; }

  template <class T>
  static T get(const YAML::Node& n, const std::string& field) {
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError("field '" + field + "' has the wrong type", field, line_of(n));
    }
  }

  static std::vector<std::string> list(const YAML::Node& n, const std::string& field) {
    std::vector<std::string> out;
    if (n.IsSequence()) {
      for (const auto& e : n) out.push_back(get<std::string>(e, field));
    } else if (n.IsScalar()) {
      // Comma separated shorthand; custom directions keep their commas.
      std::string s = get<std::string>(n, field);
      std::string cur;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == ',' && cur.rfind("custom:", 0) != 0) {
          if (!cur.empty()) out.push_back(cur);
          cur.clear();
        } else if (s[i] != ' ') {
          cur.push_back(s[i]);
        }
      }
      if (!cur.empty()) out.push_back(cur);
    } else if (!n.IsNull()) {
      throw ConfigError("field '" + field + "' must be a list", field, line_of(n));
    }
    return out;
  }

  using Setter = std::function<void(const YAML::Node&, const std::string&)>;

  void apply_map(const YAML::Node& node, const std::map<std::string, Setter>& setters,
                 const std::string& prefix) {
    if (!node.IsMap())
      throw ConfigError("section '" + prefix + "' must be a mapping", prefix, line_of(node));
    for (const auto& kv : node) {
      const std::string key = get<std::string>(kv.first, prefix);
      const std::string field = prefix.empty() ? key : prefix + "." + key;
      auto it = setters.find(key);
      if (it == setters.end()) throw ConfigError("unknown field '" + field + "'", field, line_of(kv.first));
      try {
        it->second(kv.second, field);
      } catch (ConfigError& e) {
        if (e.line() < 0) throw ConfigError(e.what(), e.field().empty() ? field : e.field(), line_of(kv.second));
        throw;
      }
    }
  }

  void apply(const YAML::Node& root) {
    if (!root.IsMap()) throw ConfigError("config must be a mapping", "", line_of(root));
    if (root["preset"]) cfg = preset(get<std::string>(root["preset"], "preset"));
    if (root["full_scale"] && get<bool>(root["full_scale"], "full_scale")) apply_full_scale(cfg);
    auto str = [](std::string& dst) { return [&dst](const YAML::Node& n, const std::string& f) { dst = get<std::string>(n, f); }; };
    auto dbl = [](double& dst) { return [&dst](const YAML::Node& n, const std::string& f) { dst = get<double>(n, f); }; };
    auto integer = [](int& dst) { return [&dst](const YAML::Node& n, const std::string& f) { dst = get<int>(n, f); }; };
    auto strs = [](std::vector<std::string>& dst) {
      return [&dst](const YAML::Node& n, const std::string& f) { dst = list(n, f); };
    };
    std::map<std::string, Setter> train{
        {"d", integer(cfg.d)},
        {"runs", integer(cfg.runs)},
        {"schedules", strs(cfg.schedules)},
        {"record_every", integer(cfg.record_every)},
        {"epochs", integer(cfg.epochs)},
        {"normalization", str(cfg.normalization)},
        {"threads", [this](const YAML::Node& n, const std::string& f) { cfg.threads = get<unsigned>(n, f); }},
    };
    std::map<std::string, Setter> dm{
        {"samples", [this](const YAML::Node& n, const std::string& f) { cfg.samples = get<std::size_t>(n, f); }},
        {"kernel_mode", str(cfg.kernel_mode)},
        {"formulation", str(cfg.formulation)},
        {"fd_eps", dbl(cfg.fd_eps)},
        {"fd_eps_nonsmooth", dbl(cfg.fd_eps_nonsmooth)},
        {"tp_ceiling", integer(cfg.tp_ceiling)},
        {"memory_limit_gb", dbl(cfg.memory_limit_gb)},
    };
    std::map<std::string, Setter> hd{
        {"k_max", integer(cfg.k_max)},
        {"directions", strs(cfg.hardness_directions)},
        {"mc_samples",
         [this](const YAML::Node& n, const std::string& f) { cfg.hardness_mc_samples = get<std::size_t>(n, f); }},
    };
    std::map<std::string, Setter> top{
        {"preset", [this](const YAML::Node& n, const std::string& f) { cfg.preset = get<std::string>(n, f); }},
        {"full_scale", [this](const YAML::Node& n, const std::string& f) { cfg.full_scale = get<bool>(n, f); }},
        {"target", str(cfg.target)},
        {"activation", str(cfg.activation)},
        {"residual", str(cfg.residual)},
        {"second_layer", str(cfg.second_layer)},
        {"alpha", dbl(cfg.alpha)},
        {"eta", dbl(cfg.eta)},
        {"lambda", dbl(cfg.lambda)},
        {"p", integer(cfg.p)},
        {"T", integer(cfg.T)},
        {"seed", [this](const YAML::Node& n, const std::string& f) { cfg.seed = get<std::uint64_t>(n, f); }},
        {"engines", strs(cfg.engines)},
        {"directions", strs(cfg.directions)},
        {"output", str(cfg.output)},
        {"train", [&](const YAML::Node& n, const std::string& f) { apply_map(n, train, f); }},
        {"dmft", [&](const YAML::Node& n, const std::string& f) { apply_map(n, dm, f); }},
        {"hardness", [&](const YAML::Node& n, const std::string& f) { apply_map(n, hd, f); }},
    };
    apply_map(root, top, "");
  }
};

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.msg, "", e.mark.line + 1);
  }
  if (root.IsMap() && root["config"] && root["config"].IsMap()) root = root["config"];
  ExperimentConfig cfg;
  Parser{cfg}.apply(root);
  // Re-validate values whose meaning depends on other fields.
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    int line = -1;
    // Point at the offending key when it is present at top level or in a section.
    std::string field = e.field();
    auto dot = field.find('.');
    YAML::Node n = dot == std::string::npos ? root[field] : root[field.substr(0, dot)];
    if (!field.empty() && n) {
      if (dot != std::string::npos && n.IsMap() && n[field.substr(dot + 1)]) n = n[field.substr(dot + 1)];
      line = Parser::line_of(n);
    }
    throw ConfigError(e.what(), field, line);
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string(), "config");
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str());
}

// ---------------------------------------------------------------- presets

const std::vector<PresetInfo>& list_presets() {
  static const std::vector<PresetInfo> presets{
      {"fig1_left", "Fig. 1 left", "single-index tanh (IE 1), p = 1"},
      {"fig1_center", "Fig. 1 center", "single-index He3 (IE 3, odd), p = 1"},
      {"fig1_right", "Fig. 1 right", "single-index He4 (even), p = 1"},
      {"fig2_left", "Fig. 2 left", "easy multi-index staircase z1 + z1 z2, p = 8"},
      {"fig2_center", "Fig. 2 center", "z1 + He3(z2), learned by reuse at T = 2, p = 2"},
      {"fig2_right", "Fig. 2 right", "committee relu(z1) + relu(z2), hard orthogonal direction, p = 2"},
      {"fig3", "Fig. 3", "z1 z2 z3 + He3(z4), full-batch reuse, p = 4"},
      {"fig4_sequential", "Fig. 4 left", "fig3 target, sequential minibatches of n/5"},
      {"fig4_replacement", "Fig. 4 right", "fig3 target, minibatches of n/5 drawn with replacement"},
      {"fig5_minibatch1", "Fig. 5", "fig3 target, minibatches of one sample (sequential and with replacement)"},
      {"staircase", "DMFT check", "staircase z1 + z1 z2 + z1 z2 z3, p = 1"},
      {"anchor_linear", "closed form", "g(x) = x, one step: M1 = eta alpha a E[relu'] = 0.15"},
  };
  return presets;
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  c.output = "out/" + name;
  const std::string fig3_target = "sum(product:1,2,3; single:he3@4)";
  auto fig1 = [&](const char* target) {
    c.target = target;
    c.engines = {"sim", "dmft", "one_pass_theory", "hardness"};
    c.directions = {"teacher"};
  };
  auto fig2 = [&](const char* target, int p) {
    c.target = target;
    c.p = p;
    c.engines = {"sim", "dmft", "one_pass_theory", "hardness"};
    c.directions = {"C1", "C1_perp"};
  };
  auto fig3 = [&] {
    c.target = fig3_target;
    c.p = 4;
    c.alpha = 5.0;
    c.eta = 0.2;
    c.d = 4000;
    c.directions = {"e1", "e2", "e3", "e4"};
    c.hardness_directions = {"custom:1,1,1,0"};
  };
  if (name == "fig1_left") {
    fig1("single:tanh");
  } else if (name == "fig1_center") {
    fig1("single:he3");
  } else if (name == "fig1_right") {
    fig1("single:he4");
  } else if (name == "fig2_left") {
    fig2("staircase:2", 8);
  } else if (name == "fig2_center") {
    fig2("sum(single:linear@1; single:he3@2)", 2);
  } else if (name == "fig2_right") {
    fig2("committee:relu,k=2", 2);
  } else if (name == "fig3") {
    fig3();
    c.schedules = {"full"};
    c.engines = {"sim", "dmft", "hardness"};
  } else if (name == "fig4_sequential") {
    fig3();
    c.schedules = {"sequential:n/5"};
    c.T = 10;
    c.engines = {"sim"};
  } else if (name == "fig4_replacement") {
    fig3();
    c.schedules = {"replacement:n/5"};
    c.T = 10;
    c.engines = {"sim"};
  } else if (name == "fig5_minibatch1") {
    fig3();
    c.schedules = {"sequential:1", "replacement:1"};
    c.epochs = 2;
    c.record_every = 1000;
    c.engines = {"sim"};
  } else if (name == "staircase") {
    c.target = "staircase:3";
    c.d = 4000;
    c.T = 4;
    c.schedules = {"full"};
    c.engines = {"sim", "dmft"};
    c.directions = {"e1", "e2", "e3"};
  } else if (name == "anchor_linear") {
    c.target = "single:linear";
    c.T = 1;
    c.runs = 32;
    c.schedules = {"full"};
    c.engines = {"sim", "dmft", "one_pass_theory"};
  } else {
    std::string names;
    for (const auto& p : list_presets()) names += (names.empty() ? "" : ", ") + p.name;
    throw ConfigError("unknown preset '" + name + "'; available: " + names, "preset");
  }
  return c;
}

void apply_full_scale(ExperimentConfig& c) {
  c.full_scale = true;
  const bool big = c.preset.rfind("fig3", 0) == 0 || c.preset.rfind("fig4", 0) == 0 ||
                   c.preset.rfind("fig5", 0) == 0;
  c.d = big ? 10000 : 5000;
  c.runs = 32;
  c.samples = 1000000;
}

// ---------------------------------------------------------------- running

nlohmann::json hardness_report(const std::string& target_text, int k_max,
                               const std::vector<std::string>& customs, std::size_t mc_samples,
                               std::uint64_t seed) {
  auto target = targets::parse_target(target_text);
  const int k = target.k();
  std::vector<hardness::Direction> dirs;
  for (int i = 0; i < k; ++i) dirs.push_back(hardness::Direction::axis(k, i));
  for (const auto& c : customs) {
    auto nd = gdsim::resolve_direction(c.rfind("custom:", 0) == 0 ? c : "custom:" + c, target);
    hardness::Direction d;
    d.u = nd.basis.col(0);
    d.name = nd.name.rfind("custom:", 0) == 0 ? nd.name : "custom:" + c;
    dirs.push_back(d);
  }
  hardness::MomentOptions mo;
  mo.n_mc = mc_samples;
  mo.seed = seed;
  nlohmann::json out;
  out["target"] = target.spec();
  out["k"] = k;
  out["k_max"] = k_max;
  if (target.is_single_index()) {
    const int ie = targets::information_exponent(target);
    out["information_exponent"] = ie;
    out["one_pass_complexity"] = hardness::one_pass_complexity(ie).text;
  }
  if (target.declared_leap()) out["declared_leap"] = *target.declared_leap();
  nlohmann::json verdicts = nlohmann::json::array();
  for (const auto& d : dirs) verdicts.push_back(hardness::to_json(hardness::classify_direction(target, d, k_max, mo)));
  out["verdicts"] = std::move(verdicts);
  return out;
}

RunSummary run(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  namespace fs = std::filesystem;
  using clock = std::chrono::steady_clock;
  auto target = targets::parse_target(cfg.target);
  std::vector<gdsim::NamedDirection> dirs;
  for (const auto& name : cfg.directions) dirs.push_back(gdsim::resolve_direction(name, target));
  const fs::path out = cfg.output;
  fs::create_directories(out);
  RunSummary summary;
  nlohmann::json wall;
  auto seconds = [](clock::time_point a) { return std::chrono::duration<double>(clock::now() - a).count(); };
  auto say = [&](const std::string& s) {
    if (log) *log << s << std::endl;
  };
  const Readout readout = cfg.readout();

  if (contains(cfg.engines, "sim")) {
    auto start = clock::now();
    const auto teacher = targets::make_teacher(cfg.d, target.k(), detail::stream_seed(cfg.seed, {detail::kTeacherStream}));
    std::vector<io::CsvRow> rows;
    for (const auto& s : cfg.schedules) {
      auto t0 = clock::now();
      auto tc = cfg.train_config(s);
      auto trace = gdsim::train(tc, teacher, target, dirs);
      auto r = io::rows_from_trace(trace);
      rows.insert(rows.end(), r.begin(), r.end());
      wall["sim:" + tc.schedule.name()] = seconds(t0);
      say("sim " + tc.schedule.name() + ": " + io::format_double(seconds(t0)) + " s");
    }
    io::write_csv(out / "sim.csv", rows);
    summary.files.push_back(out / "sim.csv");
    wall["sim"] = seconds(start);
  }
  if (contains(cfg.engines, "dmft")) {
    auto start = clock::now();
    auto trace = dmft::dmft_integrate(cfg.dmft_config(), target, readout);
    io::write_csv(out / "dmft.csv", io::rows_from_dmft(trace, dirs, "full"));
    std::ofstream(out / "dmft_kernels.json") << dmft::kernels_json(trace).dump(1) << '\n';
    summary.files.push_back(out / "dmft.csv");
    summary.files.push_back(out / "dmft_kernels.json");
    for (const auto& w : trace.warnings) say("dmft warning: " + w);
    wall["dmft"] = seconds(start);
    say("dmft (" + dmft::to_string(trace.mode_used) + "): " + io::format_double(seconds(start)) + " s");
  }
  if (contains(cfg.engines, "one_pass_theory")) {
    auto start = clock::now();
    auto trace = dmft::one_pass_effective(cfg.dmft_config(), target, readout);
    io::write_csv(out / "one_pass_theory.csv", io::rows_from_dmft(trace, dirs, "fresh"));
    summary.files.push_back(out / "one_pass_theory.csv");
    wall["one_pass_theory"] = seconds(start);
    say("one_pass_theory: " + io::format_double(seconds(start)) + " s");
  }
  if (contains(cfg.engines, "hardness")) {
    auto start = clock::now();
    auto rep = hardness_report(cfg.target, cfg.k_max, cfg.hardness_directions, cfg.hardness_mc_samples, cfg.seed);
    std::ofstream(out / "hardness.json") << rep.dump(1) << '\n';
    summary.files.push_back(out / "hardness.json");
    wall["hardness"] = seconds(start);
    say("hardness: " + io::format_double(seconds(start)) + " s");
  }

  nlohmann::json m;
  m["config"] = cfg.to_json();
  m["version"] = kVersion;
  m["seeds"] = {{"base", cfg.seed},
                {"teacher", detail::stream_seed(cfg.seed, {detail::kTeacherStream})},
                {"readout", detail::stream_seed(cfg.seed, {detail::kStudentStream})}};
  m["wall_seconds"] = wall;
  nlohmann::json files = nlohmann::json::array();
  for (const auto& f : summary.files) files.push_back(f.filename().string());
  m["files"] = files;
  m["csv_header"] = io::kCsvHeader;
  std::ofstream(out / "manifest.json") << m.dump(1) << '\n';
  summary.files.push_back(out / "manifest.json");
  summary.manifest = std::move(m);
  return summary;
}

}  // namespace batchreuse::experiment

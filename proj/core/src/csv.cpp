#include "batchreuse/csv.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "batchreuse/errors.hpp"

namespace batchreuse::io {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string to_csv(const std::vector<CsvRow>& rows) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : rows)
    os << r.t << ',' << r.schedule << ',' << r.direction << ',' << format_double(r.overlap_mean) << ','
       << format_double(r.overlap_std) << ',' << format_double(r.loss_mean) << '\n';
  return os.str();
}

void write_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string(), "output");
  out << to_csv(rows);
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double to_double(const std::string& s, const std::string& column) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("bad number '" + s + "' in column " + column, column);
  return v;
}

}  // namespace

std::vector<CsvRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty CSV");
  auto header = split(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* name : {"t", "schedule", "direction_name", "overlap_mean", "overlap_std", "loss_mean"})
    if (!col.count(name)) throw ConfigError(std::string("CSV is missing column ") + name, name);
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto f = split(line);
    if (f.size() < header.size()) throw ConfigError("short CSV row: " + line);
    CsvRow r;
    r.t = static_cast<int>(to_double(f[col["t"]], "t"));
    r.schedule = f[col["schedule"]];
    r.direction = f[col["direction_name"]];
    r.overlap_mean = to_double(f[col["overlap_mean"]], "overlap_mean");
    r.overlap_std = to_double(f[col["overlap_std"]], "overlap_std");
    r.loss_mean = to_double(f[col["loss_mean"]], "loss_mean");
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<CsvRow> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_csv(os.str());
}

std::vector<CsvRow> rows_from_trace(const gdsim::OverlapTrace& trace) {
  std::vector<CsvRow> rows;
  for (std::size_t s = 0; s < trace.steps.size(); ++s)
    for (std::size_t j = 0; j < trace.directions.size(); ++j)
      rows.push_back({trace.steps[s], trace.schedule, trace.directions[j], trace.overlap_mean[s][j],
                      trace.overlap_se[s][j], trace.loss_mean[s]});
  return rows;
}

TheoryOverlap theory_projection(const Eigen::MatrixXd& M, const Eigen::MatrixXd& M_se,
                                const gdsim::NamedDirection& dir) {
  TheoryOverlap out;
  const Eigen::MatrixXd P = M * dir.basis;
  out.value = P.norm();
  if (out.value > 0) {
    // d||MB|| / dM = (MB) B^T / ||MB||
    const Eigen::MatrixXd grad = P * dir.basis.transpose() / out.value;
    out.std_error = std::sqrt((grad.cwiseProduct(M_se)).cwiseAbs2().sum());
  } else {
    out.std_error = (M_se * dir.basis.cwiseAbs()).norm();
  }
  return out;
}

std::vector<CsvRow> rows_from_dmft(const dmft::DmftTrace& trace,
                                   const std::vector<gdsim::NamedDirection>& directions,
                                   const std::string& schedule) {
  std::vector<CsvRow> rows;
  for (std::size_t t = 0; t < trace.M.size(); ++t)
    for (const auto& d : directions) {
      auto o = theory_projection(trace.M[t], trace.M_se[t], d);
      rows.push_back({static_cast<int>(t), schedule, d.name, o.value, o.std_error,
                      trace.kernels[t].loss_mean});
    }
  return rows;
}

}  // namespace batchreuse::io

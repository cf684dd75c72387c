#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "batchreuse/dmft.hpp"
#include "batchreuse/gdsim.hpp"

// Shared CSV schema for every engine:
//   t,schedule,direction_name,overlap_mean,overlap_std,loss_mean
// overlap_std is the standard error of overlap_mean (over runs for the
// simulation, Monte-Carlo error for the theory engines).
namespace batchreuse::io {

inline constexpr const char* kCsvHeader = "t,schedule,direction_name,overlap_mean,overlap_std,loss_mean";

struct CsvRow {
  int t = 0;
  std::string schedule;
  std::string direction;
  double overlap_mean = 0.0;
  double overlap_std = 0.0;
  double loss_mean = 0.0;
};

// Shortest text that parses back to the same double.
std::string format_double(double v);

void write_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows);
std::string to_csv(const std::vector<CsvRow>& rows);
// Columns are located by header name; unknown columns are ignored.
std::vector<CsvRow> read_csv(const std::filesystem::path& path);
std::vector<CsvRow> parse_csv(const std::string& text);

std::vector<CsvRow> rows_from_trace(const gdsim::OverlapTrace& trace);

// Projection ||M B||_F of the theory overlap with its delta-method error.
struct TheoryOverlap {
  double value = 0.0;
  double std_error = 0.0;
};
TheoryOverlap theory_projection(const Eigen::MatrixXd& M, const Eigen::MatrixXd& M_se,
                                const gdsim::NamedDirection& dir);
std::vector<CsvRow> rows_from_dmft(const dmft::DmftTrace& trace,
                                   const std::vector<gdsim::NamedDirection>& directions,
                                   const std::string& schedule);

}  // namespace batchreuse::io

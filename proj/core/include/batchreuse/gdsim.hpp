#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "batchreuse/readout.hpp"
#include "batchreuse/targets.hpp"

namespace batchreuse::gdsim {

using targets::TargetFunction;
using targets::Teacher;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class GradNormalization { Sum, Mean };

struct BatchSchedule {
  enum class Kind { FullBatchReuse, FreshOnePass, CycleEpochs, WithReplacement, Sequential };
  Kind kind = Kind::FullBatchReuse;
  // CycleEpochs: number of blocks. WithReplacement / Sequential: minibatch size.
  // When `fraction` > 0 the size is n / fraction, resolved once n is known.
  std::size_t param = 0;
  std::size_t fraction = 0;

  static BatchSchedule full() { return {Kind::FullBatchReuse}; }
  static BatchSchedule fresh() { return {Kind::FreshOnePass}; }
  static BatchSchedule cycle(std::size_t blocks) { return {Kind::CycleEpochs, blocks}; }
  static BatchSchedule with_replacement(std::size_t nb) { return {Kind::WithReplacement, nb}; }
  static BatchSchedule sequential(std::size_t nb) { return {Kind::Sequential, nb}; }

  // full | fresh | cycle:<blocks> | replacement:<nb> | sequential:<nb>, where
  // <nb> may be written n/<m>.
  static BatchSchedule parse(const std::string& text);
  std::string name() const;
  // Minibatch size for dataset size n (n for full/fresh).
  std::size_t batch_size(std::size_t n) const;
  void validate(std::size_t n) const;
};

struct TrainConfig {
  int d = 2000;
  double alpha = 3.0;
  int p = 1;
  double eta = 0.1;
  double lambda = 0.0;
  int T = 6;
  BatchSchedule schedule;
  std::uint64_t seed = 1;
  int runs = 16;
  ScalarFunction sigma = ScalarFunction::relu();
  SecondLayer second_layer = SecondLayer::PlusMinus;
  GradNormalization normalization = GradNormalization::Sum;
  // Unset means the default for p (teacher-only for p = 1).
  std::optional<Residual> residual;
  int record_every = 1;
  unsigned threads = 0;  // 0: hardware concurrency
  // Datasets larger than this many doubles are regenerated block by block.
  std::size_t materialize_limit = std::size_t{1} << 28;

  std::size_t n() const;
  void validate() const;
};

// n standard Gaussian inputs; row i depends only on (seed, i), so stored and
// streamed datasets hold identical numbers.
class Dataset {
 public:
  Dataset(int d, std::size_t n, std::uint64_t seed, const Teacher& teacher,
          const TargetFunction& target, bool materialize);

  std::size_t size() const { return n_; }
  int dim() const { return d_; }
  bool materialized() const { return Z_.size() > 0; }
  const Eigen::VectorXd& labels() const { return y_; }
  const RowMatrix& teacher_preactivations() const { return hstar_; }  // n x k
  void row(std::size_t i, double* out) const;
  // Rows [begin, begin + count) into out (count x d).
  void rows(std::size_t begin, std::size_t count, RowMatrix& out) const;
  const RowMatrix& stored() const { return Z_; }

 private:
  void generate_row(std::size_t i, double* out) const;

  int d_;
  std::size_t n_;
  std::uint64_t seed_;
  RowMatrix Z_;
  Eigen::VectorXd y_;
  RowMatrix hstar_;
};

Dataset generate_dataset(const TrainConfig& cfg, const Teacher& teacher,
                         const TargetFunction& target, std::uint64_t seed);

struct StudentState {
  Eigen::MatrixXd W;  // p x d
  Readout readout;
};

StudentState init_student(const TrainConfig& cfg, std::uint64_t seed);

// A minibatch as a list of row ranges or gathered indices in a dataset.
struct Batch {
  const Dataset* data = nullptr;
  std::size_t begin = 0, count = 0;    // contiguous range when indices is empty
  std::vector<std::size_t> indices;
  std::size_t size() const { return indices.empty() ? count : indices.size(); }
};

struct StepResult {
  double loss_mean = 0.0;  // per-sample loss at the weights before the step
};

// w <- (1 - eta lambda) w - eta sum_nu grad_w loss_nu (Sum) or the batch mean (Mean).
// Throws NumericalError on a non-finite gradient.
StepResult gd_step(StudentState& s, const Batch& batch, double eta, double lambda,
                   GradNormalization normalization = GradNormalization::Sum);

// Gradient of the summed batch loss with respect to W, plus the loss sum.
Eigen::MatrixXd batch_gradient(const StudentState& s, const Batch& batch, double* loss_sum);
double batch_loss(const StudentState& s, const Batch& batch);

// Projection of M (p x k) on a set of teacher-basis directions: ||M B||_F with
// B orthonormal k x r.
struct NamedDirection {
  std::string name;
  Eigen::MatrixXd basis;
};

// teacher | e<i> | C1 | C1_perp | custom:<c1>,<c2>,...
NamedDirection resolve_direction(const std::string& name, const TargetFunction& target);
double projection(const Eigen::MatrixXd& M, const NamedDirection& dir);

struct RunRecord {
  std::vector<int> steps;             // recorded t values
  std::vector<Eigen::MatrixXd> M;     // per recorded step
  std::vector<double> loss;           // per recorded step
};

struct OverlapTrace {
  std::string schedule;
  std::vector<std::string> directions;
  std::vector<int> steps;
  // [step][direction]
  std::vector<std::vector<double>> overlap_mean, overlap_se;
  std::vector<double> loss_mean, loss_se;
  std::vector<Eigen::MatrixXd> M_mean, M_se;  // per step, p x k
  int runs = 0;
  std::vector<RunRecord> per_run;
};

OverlapTrace aggregate(const std::vector<RunRecord>& runs, const std::vector<NamedDirection>& dirs,
                       const std::string& schedule);

// One complete run (seeded by run index) returning the recorded overlaps.
RunRecord train_run(const TrainConfig& cfg, const Teacher& teacher, const TargetFunction& target,
                    int run);

OverlapTrace train(const TrainConfig& cfg, const Teacher& teacher, const TargetFunction& target,
                   const std::vector<NamedDirection>& directions);

// Online SGD: one fresh sample per step, recording every `record_every` steps.
// With `spherical`, each row of W is rescaled to norm sqrt(d) after every step.
OverlapTrace online_sgd_continue(const StudentState& student, const Teacher& teacher,
                                 const TargetFunction& target, double eta2, std::size_t steps,
                                 std::uint64_t seed, std::size_t record_every,
                                 const std::vector<NamedDirection>& directions,
                                 bool spherical = true);

// Smallest singular value of M restricted to the span of `dirs`.
double span_singular_value(const Eigen::MatrixXd& M, const Eigen::MatrixXd& basis);

}  // namespace batchreuse::gdsim

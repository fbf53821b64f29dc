#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bwnh/binarizer.hpp"
#include "bwnh/dataset.hpp"
#include "bwnh/model.hpp"
#include "bwnh/pipeline.hpp"

namespace bwnh {

inline constexpr int kMaxEnumerationBits = 20;

struct OracleSolution {
  Eigen::VectorXd codes;
  double alpha = 0.0;
  double objective = 0.0;
};

// Global minimiser of one column's hashing problem by enumerating all 2^S
// codes with the closed-form scale for each. Among equal objectives the
// lexicographically smallest code wins, with +1 ordered
// before -1. Throws for S > 20.
OracleSolution exhaustive_solve(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col);

struct SignBaselines {
  Eigen::MatrixXd codes;       // sign(W), sign(0) = +1
  Eigen::VectorXd unit_alpha;  // all ones
  Eigen::VectorXd mean_l1_alpha;
};

SignBaselines naive_sign_binarize(const Eigen::MatrixXd& w);

struct ConvergenceSeries {
  double initial = 0.0;
  std::vector<std::pair<int, double>> points;  // (iteration, total objective)

  // First iteration whose value is within `fraction` of the final value.
  int iterations_to_within(double fraction) const;
};

// Total layer objective after each outer iteration; columns that stopped
// early hold their final value.
ConvergenceSeries convergence_curve(const HashProblem& problem, const SolverConfig& cfg);

struct OracleReport {
  std::string instance;
  double oracle_objective = 0.0;
  double solver_objective = 0.0;
  double gap = 0.0;
  double elapsed_seconds = 0.0;
};

// Random column instance: X~ is S x M Gaussian, w is Gaussian, and the target
// is X^T w with X = X~ + noise * G for an independent Gaussian G.
struct ColumnInstance {
  Eigen::MatrixXd x_tilde;
  Eigen::VectorXd s_col;
  Eigen::VectorXd w_col;
};

ColumnInstance random_column_instance(int s, int m, double noise, std::mt19937_64& rng);

struct OracleSummary {
  std::vector<OracleReport> reports;
  std::size_t optimal = 0;  // solver within tolerance of the oracle
  std::size_t violations = 0;  // solver below the oracle beyond tolerance
  double optimal_rate() const;
};

// Relative tolerance used to call a solver objective equal to the oracle's.
inline constexpr double kOracleTolerance = 1e-9;

OracleSummary run_oracle_trials(int s_max, int trials, std::uint64_t seed, const SolverConfig& cfg);

struct AblationRow {
  std::size_t depth = 0;  // number of binarized conv layers
  std::string layer;
  double scaled_top1 = 0.0;
  double unscaled_top1 = 0.0;
};

// Progressively binarizes conv1..convK in two arms (solver scales versus
// scales pinned to 1) and evaluates top-1 after each layer.
std::vector<AblationRow> ablate_scale(const Model& model, const Dataset& calibration,
                                      const Dataset& eval, const BinarizeConfig& cfg);

std::string oracle_summary_json(const OracleSummary& s);
std::string convergence_json(const ConvergenceSeries& c);
std::string ablation_json(const std::vector<AblationRow>& rows);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace bwnh

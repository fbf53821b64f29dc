#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace bwnh {

// Layer-level inner-product preserving hashing: find codes B in {-1,+1}^{S x N}
// and per-column scales alpha minimising ||S_target - X~^T B diag(alpha)||_F^2.
// Columns are independent; each is solved by alternating an exact closed-form
// scale update with one discrete cyclic coordinate descent (DCC) sweep.

enum class TieBreak { PlusOne };
enum class ZeroDenominatorPolicy { MeanL1Fallback };

struct SolverConfig {
  int max_iter = 20;
  double rel_tol = 1e-6;
  TieBreak tie_break = TieBreak::PlusOne;
  ZeroDenominatorPolicy zero_denominator_policy = ZeroDenominatorPolicy::MeanL1Fallback;
  std::uint64_t seed = 42;
  // When set, alpha is pinned to this value and only the codes are optimised
  // (the unscaled objective when the value is 1).
  std::optional<double> fixed_scale;
  int threads = 1;
};

void validate(const SolverConfig& cfg);

struct HashProblem {
  Eigen::MatrixXd x_tilde;   // S x M featuremaps seen by the binarized model
  Eigen::MatrixXd s_target;  // M x N target similarities
  Eigen::MatrixXd w;         // S x N real-valued weights (initialisation)

  Eigen::Index s_dim() const { return x_tilde.rows(); }
  Eigen::Index m_dim() const { return x_tilde.cols(); }
  Eigen::Index n_dim() const { return w.cols(); }
  void validate() const;
};

struct ScaleUpdate {
  double alpha = 0.0;
  bool fallback = false;  // zero denominator; alpha came from the policy
};

struct ColumnSolution {
  Eigen::VectorXd codes;
  double alpha = 0.0;
  double initial_objective = 0.0;
  std::vector<double> trace;  // objective after each outer iteration
  bool flagged = false;
};

struct BinarySolution {
  Eigen::MatrixXd codes;  // S x N, entries +-1
  Eigen::VectorXd alpha;  // N
  std::vector<std::vector<double>> objective_trace;
  std::vector<double> initial_objective;
  std::vector<std::size_t> flagged_columns;

  double total_initial() const;
  double total_final() const;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LayerSolveError : public std::runtime_error {
 public:
  LayerSolveError(std::vector<std::pair<std::size_t, std::string>> failures);
  const std::vector<std::pair<std::size_t, std::string>>& failures() const { return failures_; }

 private:
  std::vector<std::pair<std::size_t, std::string>> failures_;
};

// ||s_col - alpha * X~^T b_col||^2.
double objective(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col,
                 const Eigen::VectorXd& b_col, double alpha);

// sign(w) with sign(0) = +1.
Eigen::VectorXd init_codes(const Eigen::VectorXd& w_col);

// Mean absolute value of w_col.
double init_scale(const Eigen::VectorXd& w_col);

// Exact minimiser over alpha for fixed codes: s^T X~^T b / ||X~^T b||^2.
// A zero denominator returns `fallback` with the flag set.
ScaleUpdate update_scale(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col,
                         const Eigen::VectorXd& b_col, double fallback);

// One ascending pass over the bits, setting each to its conditional optimum
// with the others fixed. `flips` receives the number of bits that changed.
Eigen::VectorXd dcc_sweep(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col,
                          const Eigen::VectorXd& b_col, double alpha,
                          std::size_t* flips = nullptr);

ColumnSolution solve_column(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col,
                            const Eigen::VectorXd& w_col, const SolverConfig& cfg);

BinarySolution solve_layer(const HashProblem& problem, const SolverConfig& cfg);

}  // namespace bwnh

#include "bwnh/binarizer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "bwnh/parallel.hpp"

namespace bwnh {

namespace {

void check_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + " contains non-finite values");
}

void check_column_dims(const Eigen::MatrixXd& x, const Eigen::VectorXd& s,
                       const Eigen::VectorXd& b) {
  if (s.size() != x.cols() || b.size() != x.rows()) {
    std::ostringstream os;
    os << "dimension mismatch: X~ is " << x.rows() << "x" << x.cols() << ", S_col has "
       << s.size() << " entries, B_col has " << b.size();
    throw std::invalid_argument(os.str());
  }
}

// Precomputed per-column quantities: gram = X~ X~^T (shared by all columns of
// a layer) and proj = X~ s_col.
struct ColumnTerms {
  const Eigen::MatrixXd& gram;
  Eigen::VectorXd proj;
};

double scale_from(const Eigen::VectorXd& u, const Eigen::VectorXd& s, double fallback,
                  bool* fell_back) {
  const double denom = u.squaredNorm();
  *fell_back = !(denom > 0.0);
  if (*fell_back) return fallback;
  const double alpha = s.dot(u) / denom;
  if (!std::isfinite(alpha)) throw NumericError("non-finite scale update");
  return alpha;
}

// One DCC pass in Gram form. With Z = alpha X~ and q = alpha X~ s, the bit
// update b_j = sign(q_j - sum_{k != j} (Z Z^T)_{jk} b_k) becomes
// sign(alpha p_j - alpha^2 ((G b)_j - G_jj b_j)).
std::size_t dcc_pass(const ColumnTerms& t, Eigen::VectorXd& b, double alpha) {
  const Eigen::Index s = b.size();
  Eigen::VectorXd gb = t.gram * b;
  const double a2 = alpha * alpha;
  std::size_t flips = 0;
  for (Eigen::Index j = 0; j < s; ++j) {
    const double coupling = gb(j) - t.gram(j, j) * b(j);
    const double arg = alpha * t.proj(j) - a2 * coupling;
    const double nb = arg < 0.0 ? -1.0 : 1.0;  // tie -> +1
    if (nb != b(j)) {
      gb += t.gram.col(j) * (nb - b(j));
      b(j) = nb;
      ++flips;
    }
  }
  return flips;
}

ColumnSolution solve_column_impl(const Eigen::MatrixXd& x, const Eigen::VectorXd& s,
                                 const Eigen::VectorXd& w, const ColumnTerms& terms,
                                 const SolverConfig& cfg) {
  ColumnSolution out;
  Eigen::VectorXd b = init_codes(w);
  const double mean_l1 = init_scale(w);
  const double fallback = mean_l1 != 0.0 ? mean_l1 : 1.0;
  double alpha = cfg.fixed_scale ? *cfg.fixed_scale : mean_l1;

  Eigen::VectorXd u = x.transpose() * b;
  double loss = (s - alpha * u).squaredNorm();
  out.initial_objective = loss;

  bool changed_last = false;
  double prev = loss;
  for (int it = 0; it < cfg.max_iter; ++it) {
    if (!cfg.fixed_scale) {
      bool fell_back = false;
      const double a = scale_from(u, s, fallback, &fell_back);
      const double la = (s - a * u).squaredNorm();
      // The closed form is the exact minimiser; the guard only absorbs
      // last-ulp rounding so the recorded trace stays monotone.
      if (la <= loss) {
        alpha = a;
        loss = la;
      }
      out.flagged = out.flagged || fell_back;
    }

    Eigen::VectorXd nb = b;
    std::size_t flips = dcc_pass(terms, nb, alpha);
    if (flips > 0) {
      Eigen::VectorXd nu = x.transpose() * nb;
      const double lb = (s - alpha * nu).squaredNorm();
      if (lb <= loss) {
        b = std::move(nb);
        u = std::move(nu);
        loss = lb;
      } else {
        flips = 0;
      }
    }
    out.trace.push_back(loss);
    changed_last = flips > 0;
    if (flips == 0) break;
    if (prev - loss <= cfg.rel_tol * prev) break;
    prev = loss;
  }

  // Codes moved in the last sweep: refit alpha so the returned pair is
  // alpha-stationary. This can only lower the final objective.
  if (changed_last && !cfg.fixed_scale) {
    bool fell_back = false;
    const double a = scale_from(u, s, fallback, &fell_back);
    const double la = (s - a * u).squaredNorm();
    if (la <= loss) {
      alpha = a;
      loss = la;
      out.trace.back() = loss;
    }
    out.flagged = out.flagged || fell_back;
  }

  out.codes = std::move(b);
  out.alpha = alpha;
  return out;
}

}  // namespace

void validate(const SolverConfig& cfg) {
  if (cfg.max_iter < 1) throw std::invalid_argument("max_iter must be >= 1");
  if (!(cfg.rel_tol >= 0.0)) throw std::invalid_argument("rel_tol must be nonnegative");
  if (cfg.fixed_scale && !std::isfinite(*cfg.fixed_scale)) {
    throw std::invalid_argument("fixed_scale must be finite");
  }
  if (cfg.threads < 1) throw std::invalid_argument("threads must be >= 1");
}

void HashProblem::validate() const {
  if (x_tilde.rows() == 0 || x_tilde.cols() == 0 || w.cols() == 0) {
    throw std::invalid_argument("empty hash problem");
  }
  if (w.rows() != x_tilde.rows()) {
    throw std::invalid_argument("W rows must equal X~ rows (S)");
  }
  if (s_target.rows() != x_tilde.cols() || s_target.cols() != w.cols()) {
    throw std::invalid_argument("S_target must be M x N");
  }
}

double BinarySolution::total_initial() const {
  return std::accumulate(initial_objective.begin(), initial_objective.end(), 0.0);
}

double BinarySolution::total_final() const {
  double total = 0.0;
  for (std::size_t i = 0; i < objective_trace.size(); ++i) {
    total += objective_trace[i].empty() ? initial_objective[i] : objective_trace[i].back();
  }
  return total;
}

LayerSolveError::LayerSolveError(std::vector<std::pair<std::size_t, std::string>> failures)
    : std::runtime_error([&] {
        std::ostringstream os;
        os << failures.size() << " column(s) failed:";
        for (const auto& [col, msg] : failures) os << " [column " << col << ": " << msg << "]";
        return os.str();
      }()),
      failures_(std::move(failures)) {}

double objective(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col,
                 const Eigen::VectorXd& b_col, double alpha) {
  check_column_dims(x_tilde, s_col, b_col);
  if (!std::isfinite(alpha)) throw NumericError("alpha is not finite");
  check_finite(x_tilde, "X~");
  check_finite(s_col, "S_col");
  check_finite(b_col, "B_col");
  const double value = (s_col - alpha * (x_tilde.transpose() * b_col)).squaredNorm();
  if (!std::isfinite(value)) throw NumericError("objective overflowed");
  return value;
}

Eigen::VectorXd init_codes(const Eigen::VectorXd& w_col) {
  return w_col.unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
}

double init_scale(const Eigen::VectorXd& w_col) {
  if (w_col.size() == 0) throw std::invalid_argument("init_scale of empty column");
  return w_col.cwiseAbs().sum() / static_cast<double>(w_col.size());
}

ScaleUpdate update_scale(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col,
                         const Eigen::VectorXd& b_col, double fallback) {
  check_column_dims(x_tilde, s_col, b_col);
  const Eigen::VectorXd u = x_tilde.transpose() * b_col;
  if (!u.allFinite()) throw NumericError("non-finite X~^T B");
  ScaleUpdate r;
  r.alpha = scale_from(u, s_col, fallback, &r.fallback);
  return r;
}

Eigen::VectorXd dcc_sweep(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col,
                          const Eigen::VectorXd& b_col, double alpha, std::size_t* flips) {
  check_column_dims(x_tilde, s_col, b_col);
  if (!std::isfinite(alpha)) throw NumericError("alpha is not finite");
  const Eigen::MatrixXd gram = x_tilde * x_tilde.transpose();
  ColumnTerms terms{gram, x_tilde * s_col};
  for (Eigen::Index j = 0; j < b_col.size(); ++j) {
    if (b_col(j) != 1.0 && b_col(j) != -1.0) {
      throw std::invalid_argument("B_col entries must be +-1");
    }
  }
  Eigen::VectorXd b = b_col;
  const auto n = dcc_pass(terms, b, alpha);
  if (flips) *flips = n;
  return b;
}

ColumnSolution solve_column(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col,
                            const Eigen::VectorXd& w_col, const SolverConfig& cfg) {
  validate(cfg);
  check_column_dims(x_tilde, s_col, w_col);
  check_finite(x_tilde, "X~");
  check_finite(s_col, "S_col");
  check_finite(w_col, "W_col");
  const Eigen::MatrixXd gram = x_tilde * x_tilde.transpose();
  ColumnTerms terms{gram, x_tilde * s_col};
  return solve_column_impl(x_tilde, s_col, w_col, terms, cfg);
}

BinarySolution solve_layer(const HashProblem& problem, const SolverConfig& cfg) {
  validate(cfg);
  problem.validate();
  check_finite(problem.x_tilde, "X~");
  check_finite(problem.s_target, "S_target");
  check_finite(problem.w, "W");

  const auto& x = problem.x_tilde;
  const Eigen::Index n = problem.n_dim();
  const Eigen::MatrixXd gram = x * x.transpose();
  const Eigen::MatrixXd proj = x * problem.s_target;

  std::vector<ColumnSolution> cols(static_cast<std::size_t>(n));
  std::vector<std::string> errors(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), cfg.threads, [&](std::size_t i) {
    const auto c = static_cast<Eigen::Index>(i);
    try {
      ColumnTerms terms{gram, proj.col(c)};
      cols[i] = solve_column_impl(x, problem.s_target.col(c), problem.w.col(c), terms, cfg);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  std::vector<std::pair<std::size_t, std::string>> failures;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) failures.emplace_back(i, errors[i]);
  }
  if (!failures.empty()) throw LayerSolveError(std::move(failures));

  BinarySolution sol;
  sol.codes.resize(problem.s_dim(), n);
  sol.alpha.resize(n);
  for (Eigen::Index c = 0; c < n; ++c) {
    auto& col = cols[static_cast<std::size_t>(c)];
    sol.codes.col(c) = col.codes;
    sol.alpha(c) = col.alpha;
    sol.initial_objective.push_back(col.initial_objective);
    sol.objective_trace.push_back(std::move(col.trace));
    if (col.flagged) sol.flagged_columns.push_back(static_cast<std::size_t>(c));
  }
  return sol;
}

}  // namespace bwnh

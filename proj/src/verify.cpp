#include "bwnh/verify.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "bwnh/net.hpp"

namespace bwnh {

namespace {

// -1 sorts after +1, so the all-(+1) code is the smallest.
bool lexicographically_less(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    if (a(j) != b(j)) return a(j) > b(j);
  }
  return false;
}

}  // namespace

OracleSolution exhaustive_solve(const Eigen::MatrixXd& x_tilde, const Eigen::VectorXd& s_col) {
  const Eigen::Index s = x_tilde.rows();
  if (s < 1) throw std::invalid_argument("exhaustive_solve needs S >= 1");
  if (s > kMaxEnumerationBits) {
    throw std::invalid_argument("exhaustive_solve: S = " + std::to_string(s) +
                                " exceeds the enumeration cap of " +
                                std::to_string(kMaxEnumerationBits));
  }
  if (s_col.size() != x_tilde.cols()) throw std::invalid_argument("S_col must have M entries");

  const Eigen::MatrixXd gram = x_tilde * x_tilde.transpose();
  const Eigen::VectorXd proj = x_tilde * s_col;
  const double ss = s_col.squaredNorm();

  // L(b) = L(-b) because alpha is signed, so only codes with b_0 = +1 are
  // enumerated; that member of each pair is also the lexicographically
  // smaller one. Bits 1..S-1 follow a Gray code so each step flips one bit.
  Eigen::VectorXd b = Eigen::VectorXd::Ones(s);
  Eigen::VectorXd gb = gram * b;
  double bgb = b.dot(gb);
  double pb = proj.dot(b);
  auto loss_of = [&] { return bgb > 0.0 ? ss - pb * pb / bgb : ss; };

  Eigen::VectorXd best = b;
  double best_loss = loss_of();
  const std::uint64_t steps = std::uint64_t{1} << (s - 1);
  for (std::uint64_t k = 1; k < steps; ++k) {
    const auto j = static_cast<Eigen::Index>(std::countr_zero(k)) + 1;
    const double delta = -2.0 * b(j);
    pb += delta * proj(j);
    bgb += 2.0 * delta * gb(j) + delta * delta * gram(j, j);
    gb += delta * gram.col(j);
    b(j) = -b(j);
    const double loss = loss_of();
    const double tol = 1e-12 * std::max(1.0, std::abs(best_loss));
    if (loss < best_loss - tol || (loss <= best_loss + tol && lexicographically_less(b, best))) {
      best = b;
      best_loss = std::min(loss, best_loss);
    }
  }

  OracleSolution out;
  out.codes = best;
  out.alpha = update_scale(x_tilde, s_col, best, 1.0).alpha;
  out.objective = objective(x_tilde, s_col, best, out.alpha);
  return out;
}

SignBaselines naive_sign_binarize(const Eigen::MatrixXd& w) {
  SignBaselines out;
  out.codes.resize(w.rows(), w.cols());
  out.unit_alpha = Eigen::VectorXd::Ones(w.cols());
  out.mean_l1_alpha.resize(w.cols());
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    out.codes.col(c) = init_codes(w.col(c));
    out.mean_l1_alpha(c) = init_scale(w.col(c));
  }
  return out;
}

int ConvergenceSeries::iterations_to_within(double fraction) const {
  if (points.empty()) return 0;
  const double final_value = points.back().second;
  for (const auto& [it, v] : points) {
    if (v - final_value <= fraction * std::abs(final_value)) return it;
  }
  return points.back().first;
}

ConvergenceSeries convergence_curve(const HashProblem& problem, const SolverConfig& cfg) {
  const BinarySolution sol = solve_layer(problem, cfg);
  ConvergenceSeries out;
  out.initial = sol.total_initial();
  std::size_t longest = 0;
  for (const auto& t : sol.objective_trace) longest = std::max(longest, t.size());
  for (std::size_t k = 0; k < longest; ++k) {
    double total = 0.0;
    for (std::size_t c = 0; c < sol.objective_trace.size(); ++c) {
      const auto& t = sol.objective_trace[c];
      total += t.empty() ? sol.initial_objective[c] : t[std::min(k, t.size() - 1)];
    }
    out.points.emplace_back(static_cast<int>(k + 1), total);
  }
  return out;
}

ColumnInstance random_column_instance(int s, int m, double noise, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd g(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) g(i, j) = normal(rng);
    return g;
  };
  ColumnInstance inst;
  inst.x_tilde = gaussian(s, m);
  inst.w_col = gaussian(s, 1).col(0);
  const Eigen::MatrixXd x = inst.x_tilde + noise * gaussian(s, m);
  inst.s_col = x.transpose() * inst.w_col;
  return inst;
}

double OracleSummary::optimal_rate() const {
  return reports.empty() ? 0.0
                         : static_cast<double>(optimal) / static_cast<double>(reports.size());
}

OracleSummary run_oracle_trials(int s_max, int trials, std::uint64_t seed,
                                const SolverConfig& cfg) {
  if (s_max < 1 || s_max > kMaxEnumerationBits) {
    throw std::invalid_argument("s_max must be in [1, 20]");
  }
  if (trials < 1) throw std::invalid_argument("trials must be positive");
  std::mt19937_64 rng(seed);
  const int s_min = std::min(4, s_max);
  std::uniform_int_distribution<int> s_dist(s_min, s_max), m_dist(8, 64);

  OracleSummary summary;
  for (int t = 0; t < trials; ++t) {
    const int s = s_dist(rng), m = m_dist(rng);
    const auto inst = random_column_instance(s, m, 0.25, rng);
    const auto start = std::chrono::steady_clock::now();
    const auto oracle = exhaustive_solve(inst.x_tilde, inst.s_col);
    const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);
    const auto sol = solve_column(inst.x_tilde, inst.s_col, inst.w_col, cfg);
    const double solver_obj = objective(inst.x_tilde, inst.s_col, sol.codes, sol.alpha);

    OracleReport r;
    r.instance = "trial " + std::to_string(t) + " S=" + std::to_string(s) +
                 " M=" + std::to_string(m);
    r.oracle_objective = oracle.objective;
    r.solver_objective = solver_obj;
    r.gap = solver_obj - oracle.objective;
    r.elapsed_seconds = elapsed.count();
    const double tol = kOracleTolerance * std::max(1.0, oracle.objective);
    if (std::abs(r.gap) <= tol) ++summary.optimal;
    if (r.gap < -tol) ++summary.violations;
    summary.reports.push_back(std::move(r));
  }
  return summary;
}

std::vector<AblationRow> ablate_scale(const Model& model, const Dataset& calibration,
                                      const Dataset& eval, const BinarizeConfig& cfg) {
  const double full = evaluate(model, eval, ExecutionMode::Float).top1;
  std::vector<AblationRow> rows{{0, "", full, full}};

  auto run_arm = [&](bool scaled) {
    BinarizeConfig arm = cfg;
    arm.conv_only = true;
    if (scaled) {
      arm.solver.fixed_scale.reset();
    } else {
      arm.solver.fixed_scale = 1.0;
    }
    std::vector<std::pair<std::string, double>> acc;
    binarize_model(model, calibration, arm, [&](const BinarizeRun& run, std::size_t layer) {
      acc.emplace_back(run.target.manifest.layers[layer].name,
                       evaluate(run.target, eval, ExecutionMode::Mixed).top1);
    });
    return acc;
  };

  const auto scaled = run_arm(true);
  const auto unscaled = run_arm(false);
  for (std::size_t k = 0; k < scaled.size(); ++k) {
    rows.push_back({k + 1, scaled[k].first, scaled[k].second, unscaled.at(k).second});
  }
  return rows;
}

std::string oracle_summary_json(const OracleSummary& s) {
  nlohmann::json j;
  j["trials"] = s.reports.size();
  j["optimal"] = s.optimal;
  j["optimal_rate"] = s.optimal_rate();
  j["violations"] = s.violations;
  j["reports"] = nlohmann::json::array();
  for (const auto& r : s.reports) {
    j["reports"].push_back({{"instance", r.instance},
                            {"oracle_objective", r.oracle_objective},
                            {"solver_objective", r.solver_objective},
                            {"gap", r.gap},
                            {"elapsed_seconds", r.elapsed_seconds}});
  }
  return j.dump(2) + "\n";
}

std::string convergence_json(const ConvergenceSeries& c) {
  nlohmann::json j;
  j["initial"] = c.initial;
  j["series"] = nlohmann::json::array();
  for (const auto& [it, v] : c.points) j["series"].push_back({{"iteration", it}, {"objective", v}});
  j["iterations_to_within_1pct"] = c.iterations_to_within(0.01);
  return j.dump(2) + "\n";
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"depth", r.depth},
                 {"layer", r.layer},
                 {"scaled_top1", r.scaled_top1},
                 {"unscaled_top1", r.unscaled_top1}});
  }
  return j.dump(2) + "\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace bwnh

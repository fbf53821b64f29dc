#include <chrono>
#include <limits>

#include <doctest.h>
#include <json.hpp>

#include "bwnh/net.hpp"
#include "bwnh/verify.hpp"
#include "helpers.hpp"

using namespace bwnh;
using testing::gaussian;

TEST_CASE("exhaustive search on the identity example") {
  const auto r = exhaustive_solve(Eigen::MatrixXd::Identity(2, 2), Eigen::Vector2d(2, -4));
  CHECK(r.codes == Eigen::Vector2d(1, -1));
  CHECK(r.alpha == doctest::Approx(3.0));
  CHECK(r.objective == doctest::Approx(2.0));
}

TEST_CASE("single-bit problems pick the better of the two codes") {
  Eigen::MatrixXd x(1, 3);
  x << 1, -2, 0.5;
  const Eigen::Vector3d s(-1, 2, -0.5);
  const auto r = exhaustive_solve(x, s);
  REQUIRE(r.codes.size() == 1);
  CHECK(r.codes(0) == 1.0);  // both signs tie through alpha; +1 is the smaller code
  CHECK(r.objective == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.alpha == doctest::Approx(-1.0));
}

TEST_CASE("enumeration agrees with a plain loop over all codes") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    const Eigen::MatrixXd x = gaussian(7, 15, rng);
    const Eigen::VectorXd s = gaussian(15, 1, rng).col(0);
    double best = std::numeric_limits<double>::infinity();
    for (std::uint32_t mask = 0; mask < 128; ++mask) {
      Eigen::VectorXd b(7);
      for (int j = 0; j < 7; ++j) b(j) = (mask >> j) & 1u ? -1.0 : 1.0;
      best = std::min(best, objective(x, s, b, update_scale(x, s, b, 1.0).alpha));
    }
    CHECK(exhaustive_solve(x, s).objective == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("enumeration limits") {
  std::mt19937_64 rng(4);
  CHECK_THROWS_AS(exhaustive_solve(gaussian(21, 4, rng), gaussian(4, 1, rng).col(0)),
                  std::invalid_argument);
  const auto start = std::chrono::steady_clock::now();
  exhaustive_solve(gaussian(12, 64, rng), gaussian(64, 1, rng).col(0));
  const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
  CHECK(took.count() < 5.0);
}

TEST_CASE("sign baselines") {
  Eigen::MatrixXd w(3, 3);
  w << 2, 0, -0.001,
      -4, 0, 0.001,
       1, 0, 0.0;
  const auto base = naive_sign_binarize(w);
  CHECK(base.codes.col(0) == Eigen::Vector3d(1, -1, 1));
  CHECK(base.codes.col(1) == Eigen::Vector3d(1, 1, 1));
  CHECK(base.codes.col(2) == Eigen::Vector3d(-1, 1, 1));
  CHECK(base.unit_alpha.isOnes());
  CHECK(base.mean_l1_alpha(0) == doctest::Approx(7.0 / 3.0));
  CHECK(base.mean_l1_alpha(1) == 0.0);
}

TEST_CASE("convergence series") {
  SUBCASE("identity problem is flat after the first iteration") {
    HashProblem p;
    p.x_tilde = Eigen::MatrixXd::Identity(3, 3);
    p.w = Eigen::MatrixXd(3, 2);
    p.w << 1, -2, -1, 2, 1, 0.5;
    p.s_target = p.w;
    const auto c = convergence_curve(p, SolverConfig{});
    REQUIRE_FALSE(c.points.empty());
    for (const auto& [it, v] : c.points) CHECK(v == c.points.front().second);
    CHECK(c.iterations_to_within(0.01) == 1);
  }

  SUBCASE("random layer: monotone and bounded by max_iter") {
    std::mt19937_64 rng(9);
    HashProblem p;
    p.x_tilde = gaussian(36, 400, rng);
    p.w = gaussian(36, 12, rng);
    p.s_target = (p.x_tilde + 0.3 * gaussian(36, 400, rng)).transpose() * p.w;
    SolverConfig cfg;
    cfg.max_iter = 7;
    const auto c = convergence_curve(p, cfg);
    CHECK(c.points.size() <= 7);
    double prev = c.initial;
    for (const auto& [it, v] : c.points) {
      CHECK(v <= prev);
      prev = v;
    }
    const auto j = nlohmann::json::parse(convergence_json(c));
    CHECK(j["series"].size() == c.points.size());
  }
}

TEST_CASE("oracle trials never undercut the global optimum") {
  const auto summary = run_oracle_trials(10, 30, 5, SolverConfig{});
  CHECK(summary.reports.size() == 30);
  CHECK(summary.violations == 0);
  for (const auto& r : summary.reports) CHECK(r.gap >= -1e-9 * std::max(1.0, r.oracle_objective));
  const auto j = nlohmann::json::parse(oracle_summary_json(summary));
  CHECK(j["optimal"] == summary.optimal);
  CHECK_THROWS(run_oracle_trials(25, 1, 5, SolverConfig{}));
}

TEST_CASE("scale ablation starts from the real-valued accuracy") {
  const Dataset data = make_synthetic_digits(200, 12);
  const auto& d = data.images.dims();
  const auto m = parse_architecture("(1x4C3)-MP2-(1x8C3)-MP2-10FC-Softmax", "abl", {d[1], d[2], d[3]});
  TrainConfig tc;
  tc.max_iters = 60;
  const Model model = train_baseline(initialize_model(m, 1), data, tc);
  BinarizeConfig cfg;
  cfg.batch_size = 32;
  const auto rows = ablate_scale(model, data, data, cfg);
  REQUIRE(rows.size() == 3);
  const double full = evaluate(model, data, ExecutionMode::Float).top1;
  CHECK(rows[0].scaled_top1 == full);
  CHECK(rows[0].unscaled_top1 == full);
  CHECK(rows[1].layer == "conv1");
  CHECK(rows[2].layer == "conv2");
  const auto j = nlohmann::json::parse(ablation_json(rows));
  CHECK(j.size() == 3);
}

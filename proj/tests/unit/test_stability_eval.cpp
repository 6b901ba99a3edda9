#include <cmath>
#include <limits>
#include <vector>

#include "amalgam/errors.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/stability_eval.hpp"
#include "doctest.h"

using namespace amalgam;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

EvaluationRecord record(std::vector<double> train, std::vector<double> val, bool diverged = false) {
  EvaluationRecord r;
  r.train_curve = std::move(train);
  r.val_curve = std::move(val);
  r.diverged = diverged;
  return r;
}

}  // namespace

TEST_CASE("evaluation summary: best validation and final training loss") {
  EvalSummary s = summarize_eval(record({5.0, 4.0, 4.5}, {3.0, 1.0, 2.0}));
  CHECK(s.best_val_loss == 1.0);
  CHECK(s.final_train_loss == 4.5);

  // Monotone-decreasing validation curve: the best is the last value.
  EvalSummary mono = summarize_eval(record({3.0, 2.0, 1.0}, {0.9, 0.8, 0.7}));
  CHECK(mono.best_val_loss == 0.7);

  // Diverged records summarize to +infinity sentinels.
  EvalSummary div = summarize_eval(record({1.0, 2.0}, {1.0, 2.0}, true));
  CHECK(div.best_val_loss == kInf);
  CHECK(div.final_train_loss == kInf);

  CHECK_THROWS_AS(summarize_eval(record({}, {})), ShapeError);
  CHECK_THROWS_AS(summarize_eval(record({1.0, 2.0}, {1.0})), ShapeError);
}

TEST_CASE("evaluation summary agrees with a naive scan") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> train, val;
    const int epochs = 5 + static_cast<int>(rng.uniform_int(0, 20));
    for (int e = 0; e < epochs; ++e) {
      train.push_back(rng.uniform(0.1, 5.0));
      val.push_back(rng.uniform(0.1, 5.0));
    }
    EvalSummary s = summarize_eval(record(train, val));
    double best = val[0];
    for (double v : val)
      if (v < best) best = v;
    CHECK(s.best_val_loss == best);
    CHECK(s.final_train_loss == train[epochs - 1]);
  }
}

TEST_CASE("t quantile: textbook values") {
  CHECK(t_quantile_975(1) == doctest::Approx(12.7062).epsilon(1e-4));
  CHECK(t_quantile_975(3) == doctest::Approx(3.1824).epsilon(1e-4));
  CHECK(t_quantile_975(7) == doctest::Approx(2.3646).epsilon(1e-4));
  CHECK(t_quantile_975(9) == doctest::Approx(2.2622).epsilon(1e-4));
  CHECK(t_quantile_975(30) == doctest::Approx(2.0423).epsilon(1e-4));
  // Converges toward the normal quantile 1.95996 for large df.
  CHECK(t_quantile_975(100000) == doctest::Approx(1.95996).epsilon(1e-3));
  CHECK_THROWS_AS(t_quantile_975(0), DomainError);
}

TEST_CASE("variance components: hand-checked two-group fit") {
  // Groups {1,1} and {3,3}: no within-group spread, group means 1 and 3.
  // MSW = 0; MSB = 2 * ((1-2)^2 + (3-2)^2) / (2-1) = 4;
  // sigma_alpha^2 = (4 - 0) / 2 = 2.
  StabilityModel m = variance_components({{1.0, 1.0}, {3.0, 3.0}});
  CHECK(m.mu == 2.0);
  CHECK(m.sigma_eps == 0.0);
  CHECK(m.sigma_alpha == std::sqrt(2.0));
  CHECK(m.replicates == 2);
  CHECK(m.evals_per_replicate == 2);
  // CI: 2 +- t975(1) * sqrt(MSB / (k n)) = 2 +- 12.7062 * 1.
  CHECK(m.ci_low == doctest::Approx(2.0 - 12.7062).epsilon(1e-4));
  CHECK(m.ci_high == doctest::Approx(2.0 + 12.7062).epsilon(1e-4));
}

TEST_CASE("variance components: degenerate and clamped cases") {
  // All observations equal: both spreads vanish and the CI collapses.
  StabilityModel flat = variance_components({{4.0, 4.0, 4.0}, {4.0, 4.0, 4.0}});
  CHECK(flat.mu == 4.0);
  CHECK(flat.sigma_alpha == 0.0);
  CHECK(flat.sigma_eps == 0.0);
  CHECK(flat.ci_low == 4.0);
  CHECK(flat.ci_high == 4.0);

  // Identical group means with within-group spread: MSB < MSW would give a
  // negative moment estimate; it must clamp to zero.
  StabilityModel clamp = variance_components({{1.0, 3.0}, {2.0, 2.0}});
  CHECK(clamp.sigma_alpha == 0.0);
  CHECK(clamp.sigma_eps == std::sqrt(1.0));
}

TEST_CASE("variance components: input validation") {
  CHECK_THROWS_AS(variance_components({{1.0, 2.0}}), ShapeError);             // k = 1
  CHECK_THROWS_AS(variance_components({{1.0}, {2.0}}), ShapeError);           // n = 1
  CHECK_THROWS_AS(variance_components({{1.0, 2.0}, {1.0}}), ShapeError);      // unbalanced
  CHECK_THROWS_AS(variance_components({{1.0, kInf}, {1.0, 2.0}}), DomainError);
}

TEST_CASE("variance components: shifting every observation only moves the mean") {
  Rng rng(5);
  std::vector<std::vector<double>> y;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> row;
    for (int j = 0; j < 6; ++j) row.push_back(rng.normal(1.0, 2.0));
    y.push_back(row);
  }
  StabilityModel a = variance_components(y);
  std::vector<std::vector<double>> shifted = y;
  for (auto& row : shifted)
    for (double& v : row) v += 100.0;
  StabilityModel b = variance_components(shifted);
  CHECK(b.mu == doctest::Approx(a.mu + 100.0).epsilon(1e-12));
  CHECK(b.sigma_alpha == doctest::Approx(a.sigma_alpha).epsilon(1e-9));
  CHECK(b.sigma_eps == doctest::Approx(a.sigma_eps).epsilon(1e-9));
  CHECK(b.ci_high - b.ci_low == doctest::Approx(a.ci_high - a.ci_low).epsilon(1e-9));
}

TEST_CASE("variance components: recovers simulated spreads") {
  // 8 replicates x 10 evaluations around mean 5 with sigma_alpha = 1.0 and
  // sigma_eps = 0.5. The seed is arbitrary but fixed; the moment estimates
  // must land within 30% of the truth.
  Rng rng(2);
  std::vector<std::vector<double>> y;
  for (int i = 0; i < 8; ++i) {
    const double a = rng.normal(0.0, 1.0);
    std::vector<double> row;
    for (int j = 0; j < 10; ++j) row.push_back(5.0 + a + rng.normal(0.0, 0.5));
    y.push_back(row);
  }
  StabilityModel m = variance_components(y);
  CHECK(m.sigma_alpha == doctest::Approx(1.0).epsilon(0.30));
  CHECK(m.sigma_eps == doctest::Approx(0.5).epsilon(0.30));
  CHECK(m.mu == doctest::Approx(5.0).epsilon(0.15));
  CHECK(m.ci_low < 5.0);
  CHECK(5.0 < m.ci_high);
}

TEST_CASE("balancing groups for the fit drops sentinels and trims to a common size") {
  BalancedGroups bg = balance_for_fit({{1.0, kInf, 2.0}, {3.0, 4.0, 5.0}});
  REQUIRE(bg.groups.size() == 2);
  CHECK(bg.groups[0] == std::vector<double>{1.0, 2.0});
  CHECK(bg.groups[1] == std::vector<double>{3.0, 4.0});
  CHECK(bg.dropped == 2);  // one sentinel, one balance trim

  BalancedGroups clean = balance_for_fit({{1.0, 2.0}, {3.0, 4.0}});
  CHECK(clean.dropped == 0);
  CHECK(clean.groups[1] == std::vector<double>{3.0, 4.0});

  BalancedGroups empty = balance_for_fit({});
  CHECK(empty.groups.empty());
  CHECK(empty.dropped == 0);
}

TEST_CASE("gaussian kernel: truncation radius, normalization, symmetry") {
  std::vector<double> w = gaussian_kernel(2.0);
  REQUIRE(w.size() == 17);  // radius ceil(4 * 2) = 8 on each side
  double sum = 0.0;
  for (double v : w) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
  for (size_t i = 0; i < w.size(); ++i) CHECK(w[i] == w[w.size() - 1 - i]);
  for (size_t i = 1; i < 9; ++i) CHECK(w[i] > w[i - 1]);  // rises to the center
  CHECK_THROWS_AS(gaussian_kernel(0.0), ConfigError);
  CHECK_THROWS_AS(gaussian_kernel(-1.0), ConfigError);
}

TEST_CASE("gaussian smoothing: constants pass through, lines bend only at edges") {
  std::vector<double> flat(30, 3.25);
  for (double v : gaussian_smooth(flat, 2.0)) CHECK(v == doctest::Approx(3.25).epsilon(1e-14));

  // A symmetric kernel preserves straight lines away from the boundary;
  // nearest-edge padding flattens the ends toward the edge values.
  std::vector<double> line;
  for (int t = 0; t < 40; ++t) line.push_back(1.0 + 0.5 * t);
  std::vector<double> sm = gaussian_smooth(line, 2.0);
  for (int t = 8; t < 32; ++t) CHECK(sm[t] == doctest::Approx(line[t]).epsilon(1e-12));
  CHECK(sm[0] > line[0]);                      // pulled up toward interior values
  CHECK(sm[39] < line[39]);                    // pulled down symmetrically
}

TEST_CASE("optimization stability: hand cases and invariances") {
  // Constant curve: residuals vanish (to rounding).
  CHECK(optimization_stability(std::vector<double>(25, 2.0)) < 1e-14);

  Rng rng(9);
  std::vector<double> curve;
  for (int t = 0; t < 60; ++t) curve.push_back(3.0 + 0.02 * t + rng.normal(0.0, 0.2));
  const double base = optimization_stability(curve);
  CHECK(base > 0.0);

  // Invariant to adding a constant; scales linearly with the curve.
  std::vector<double> shifted = curve, scaled = curve;
  for (double& v : shifted) v += 50.0;
  for (double& v : scaled) v *= 3.0;
  CHECK(optimization_stability(shifted) == doctest::Approx(base).epsilon(1e-9));
  CHECK(optimization_stability(scaled) == doctest::Approx(3.0 * base).epsilon(1e-12));

  CHECK_THROWS_AS(optimization_stability({1.0, 2.0, 3.0, 4.0}), ShapeError);
  CHECK_THROWS_AS(optimization_stability({1.0, 2.0, kInf, 4.0, 5.0}), DomainError);
}

TEST_CASE("optimization stability: recovers injected noise on a smooth trend") {
  // Smooth quadratic plus i.i.d. N(0, 0.1^2) over 100 epochs. The filter
  // absorbs a little of the noise into the trend, so the estimate sits
  // slightly below 0.1; it must land within 20%.
  Rng rng(1);
  std::vector<double> curve;
  for (int t = 0; t < 100; ++t) {
    const double smooth = 2.0 + 0.001 * (t - 50.0) * (t - 50.0);
    curve.push_back(smooth + rng.normal(0.0, 0.1));
  }
  CHECK(optimization_stability(curve, 2.0) == doctest::Approx(0.1).epsilon(0.20));
}

TEST_CASE("optimization stability report: per-evaluation spreads plus the model fit") {
  // Three replicates, three evaluations each, with one divergence. Each
  // curve is flat plus seeded noise of known scale 0.05.
  std::vector<std::vector<EvaluationRecord>> by_rep;
  uint64_t seed = 100;
  for (int i = 0; i < 3; ++i) {
    std::vector<EvaluationRecord> evals;
    for (int j = 0; j < 3; ++j) {
      Rng rng(seed++);
      std::vector<double> val;
      for (int t = 0; t < 40; ++t) val.push_back(1.0 + rng.normal(0.0, 0.05));
      EvaluationRecord r = record(std::vector<double>(40, 0.5), val, i == 1 && j == 2);
      r.replicate_id = i;
      r.evaluation_id = j;
      evals.push_back(r);
    }
    by_rep.push_back(evals);
  }
  OptimizationStabilityReport rep = optimization_stability_report(by_rep, 2.0);
  REQUIRE(rep.sigma_eta.size() == 3);
  CHECK(rep.sigma_eta[1][2] == kInf);              // diverged slot keeps its sentinel
  CHECK(rep.excluded == 3);                        // 9 total, balanced fit keeps 3 x 2
  CHECK(rep.model.replicates == 3);
  CHECK(rep.model.evals_per_replicate == 2);
  CHECK(rep.model.mu == doctest::Approx(0.05).epsilon(0.25));
  CHECK(rep.model.ci_low < rep.model.mu);
  CHECK(rep.model.mu < rep.model.ci_high);
  for (size_t i = 0; i < 3; ++i)
    for (size_t j = 0; j < 3; ++j)
      if (!(i == 1 && j == 2))
        CHECK(rep.sigma_eta[i][j] ==
              optimization_stability(by_rep[i][j].val_curve, 2.0));
}

TEST_CASE("oracle baseline: picks the member with the lowest best validation loss") {
  auto with_val = [](double best) {
    return record({1.0, 1.0, 1.0}, {best + 1.0, best, best + 0.5});
  };
  // Single member: trivially that member.
  OracleChoice solo = oracle_best({{with_val(0.4)}});
  CHECK(solo.member == 0);
  CHECK(solo.best_val_loss == 0.4);

  // Best val losses 0.5, 0.3, 0.9: member 1 wins.
  OracleChoice c = oracle_best({{with_val(0.5)}, {with_val(0.3)}, {with_val(0.9)}});
  CHECK(c.member == 1);
  CHECK(c.best_val_loss == 0.3);

  // Diverged evaluations never win, even with an excellent curve.
  OracleChoice skip = oracle_best({{record({1.0}, {0.01}, true)}, {with_val(0.8)}});
  CHECK(skip.member == 1);

  CHECK_THROWS_AS(oracle_best({}), ShapeError);
  CHECK_THROWS_AS(oracle_best({{record({1.0}, {0.5}, true)}, {record({1.0}, {0.2}, true)}}),
                  DomainError);
}

TEST_CASE("oracle baseline agrees with a brute-force scan") {
  Rng rng(31);
  std::vector<std::vector<EvaluationRecord>> members;
  for (int m = 0; m < 5; ++m) {
    std::vector<EvaluationRecord> recs;
    for (int r = 0; r < 4; ++r) {
      std::vector<double> train, val;
      for (int e = 0; e < 10; ++e) {
        train.push_back(rng.uniform(0.1, 2.0));
        val.push_back(rng.uniform(0.1, 2.0));
      }
      recs.push_back(record(train, val, rng.uniform() < 0.2));
    }
    members.push_back(recs);
  }
  OracleChoice c = oracle_best(members);
  double best = kInf;
  size_t best_m = 0, best_r = 0;
  for (size_t m = 0; m < members.size(); ++m)
    for (size_t r = 0; r < members[m].size(); ++r) {
      if (members[m][r].diverged) continue;
      for (double v : members[m][r].val_curve)
        if (v < best) {
          best = v;
          best_m = m;
          best_r = r;
        }
    }
  CHECK(c.member == best_m);
  CHECK(c.record_index == best_r);
  CHECK(c.best_val_loss == best);
}

#pragma once

#include <cstdint>
#include <vector>

namespace amalgam {

/// One evaluation run of a trained optimizer replicate: per-epoch loss
/// curves (epoch 1 first) plus a divergence flag.
struct EvaluationRecord {
  int64_t replicate_id = 0;
  int64_t evaluation_id = 0;
  std::vector<double> train_curve;  // per-epoch training loss
  std::vector<double> val_curve;    // per-epoch validation loss, same length
  bool diverged = false;
};

struct EvalSummary {
  double best_val_loss = 0.0;     // min over epochs (+infinity if diverged)
  double final_train_loss = 0.0;  // last epoch (+infinity if diverged)
};

/// Collapses one evaluation to its two summary scores. Diverged records
/// summarize to +infinity sentinels so callers can exclude and count them.
EvalSummary summarize_eval(const EvaluationRecord& rec);

/// Fit of the one-way random-effects model Y_ij = mu + a_i + e_ij over
/// k replicates with n evaluations each: the grand mean with its 95%
/// confidence interval, the between-replicate spread sigma_alpha
/// (meta-stability), and the within-replicate spread sigma_eps
/// (evaluation stability). Variances are clamped at zero.
struct StabilityModel {
  double mu = 0.0;
  double sigma_alpha = 0.0;
  double sigma_eps = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int64_t replicates = 0;         // k
  int64_t evals_per_replicate = 0;  // n
};

/// Balanced method-of-moments one-way ANOVA: sigma_eps^2 = MSW,
/// sigma_alpha^2 = max(0, (MSB - MSW) / n), mu = grand mean with a
/// t-interval on the between-group standard error sqrt(MSB / (k n)),
/// k - 1 degrees of freedom. Needs k >= 2 equal-sized groups of n >= 2
/// finite observations; unbalanced or non-finite input is rejected.
StabilityModel variance_components(const std::vector<std::vector<double>>& groups);

/// Two-sided 97.5% Student-t quantile (the 95% interval half-width in
/// standard-error units) for the given degrees of freedom.
double t_quantile_975(int64_t df);

/// Per-replicate groups of summary values made fit-ready: non-finite
/// entries (divergence sentinels) are dropped, then every group is
/// truncated to the smallest surviving size so the design stays balanced.
struct BalancedGroups {
  std::vector<std::vector<double>> groups;
  int64_t dropped = 0;  // values removed (sentinels plus balance trims)
};

BalancedGroups balance_for_fit(const std::vector<std::vector<double>>& raw);

/// Normalized Gaussian weights truncated at radius ceil(4 sigma); the
/// renormalization makes them sum to one.
std::vector<double> gaussian_kernel(double sigma);

/// Gaussian-filtered curve with nearest-value edge padding.
std::vector<double> gaussian_smooth(const std::vector<double>& curve, double sigma);

/// Epoch-to-epoch spread left after removing the smooth trend: the
/// standard deviation of curve - gaussian_smooth(curve). Needs at least
/// 5 finite epochs.
double optimization_stability(const std::vector<double>& curve, double sigma = 2.0);

/// Optimization stability across a whole experiment: one sigma_eta per
/// evaluation (from its validation curve; +infinity for diverged runs)
/// and the random-effects fit over them, giving the mean optimization
/// stability with its 95% confidence interval.
struct OptimizationStabilityReport {
  std::vector<std::vector<double>> sigma_eta;  // [replicate][evaluation]
  StabilityModel model;
  int64_t excluded = 0;  // evaluations left out of the fit
};

OptimizationStabilityReport optimization_stability_report(
    const std::vector<std::vector<EvaluationRecord>>& by_replicate, double sigma = 2.0);

/// The pool member achieving the lowest best-validation loss across its
/// evaluations, with the evaluation that achieved it. Diverged
/// evaluations never win; an all-diverged pool is rejected.
struct OracleChoice {
  size_t member = 0;
  size_t record_index = 0;
  double best_val_loss = 0.0;
};

OracleChoice oracle_best(const std::vector<std::vector<EvaluationRecord>>& member_records);

}  // namespace amalgam

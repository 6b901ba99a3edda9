#include "amalgam/stability_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "amalgam/errors.hpp"

namespace amalgam {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Continued-fraction core of the regularized incomplete beta function
/// (modified Lentz recurrence).
double beta_cont_frac(double a, double b, double x) {
  constexpr double eps = 3e-16;
  constexpr double tiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

/// Regularized incomplete beta I_x(a, b).
double reg_inc_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cont_frac(a, b, x) / a;
  return 1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  const double x = df / (df + t * t);
  const double tail = 0.5 * reg_inc_beta(0.5 * df, 0.5, x);
  return t >= 0.0 ? 1.0 - tail : tail;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

EvalSummary summarize_eval(const EvaluationRecord& rec) {
  if (rec.train_curve.empty() || rec.val_curve.empty())
    throw ShapeError("evaluation record: loss curves must be nonempty");
  if (rec.train_curve.size() != rec.val_curve.size())
    throw ShapeError("evaluation record: training curve has " +
                     std::to_string(rec.train_curve.size()) + " epochs but validation curve has " +
                     std::to_string(rec.val_curve.size()));
  if (rec.diverged) return {kInf, kInf};
  EvalSummary s;
  s.best_val_loss = *std::min_element(rec.val_curve.begin(), rec.val_curve.end());
  s.final_train_loss = rec.train_curve.back();
  return s;
}

double t_quantile_975(int64_t df) {
  if (df < 1) throw DomainError("t quantile: degrees of freedom must be >= 1, got " +
                                std::to_string(df));
  double lo = 0.0;
  double hi = 1000.0;  // t_{0.975} is 12.706 at df = 1 and shrinks from there
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (student_t_cdf(mid, static_cast<double>(df)) < 0.975) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

StabilityModel variance_components(const std::vector<std::vector<double>>& groups) {
  const size_t k = groups.size();
  if (k < 2)
    throw ShapeError("variance components: need at least 2 replicates, got " + std::to_string(k));
  const size_t n = groups[0].size();
  for (const auto& g : groups)
    if (g.size() != n)
      throw ShapeError("variance components: unbalanced design (group sizes " +
                       std::to_string(n) + " vs " + std::to_string(g.size()) +
                       "); the estimator handles balanced designs only");
  if (n < 2)
    throw ShapeError("variance components: need at least 2 evaluations per replicate, got " +
                     std::to_string(n));
  for (const auto& g : groups)
    for (double v : g)
      if (!std::isfinite(v))
        throw DomainError(
            "variance components: non-finite observation; exclude diverged evaluations before "
            "fitting");

  std::vector<double> group_means;
  group_means.reserve(k);
  for (const auto& g : groups) group_means.push_back(mean_of(g));
  const double grand = mean_of(group_means);

  double ssw = 0.0;  // within-group squared deviations
  for (size_t i = 0; i < k; ++i)
    for (double v : groups[i]) ssw += (v - group_means[i]) * (v - group_means[i]);
  double ssb = 0.0;  // between-group squared deviations (times n)
  for (double gm : group_means) ssb += (gm - grand) * (gm - grand);
  ssb *= static_cast<double>(n);

  const double msw = ssw / static_cast<double>(k * (n - 1));
  const double msb = ssb / static_cast<double>(k - 1);

  StabilityModel m;
  m.mu = grand;
  m.sigma_eps = std::sqrt(msw);
  m.sigma_alpha = std::sqrt(std::max(0.0, (msb - msw) / static_cast<double>(n)));
  const double se = std::sqrt(msb / static_cast<double>(k * n));
  const double t = t_quantile_975(static_cast<int64_t>(k) - 1);
  m.ci_low = grand - t * se;
  m.ci_high = grand + t * se;
  m.replicates = static_cast<int64_t>(k);
  m.evals_per_replicate = static_cast<int64_t>(n);
  return m;
}

BalancedGroups balance_for_fit(const std::vector<std::vector<double>>& raw) {
  BalancedGroups out;
  if (raw.empty()) return out;
  int64_t total = 0;
  size_t n_min = std::numeric_limits<size_t>::max();
  for (const auto& row : raw) {
    std::vector<double> kept;
    kept.reserve(row.size());
    for (double v : row) {
      ++total;
      if (std::isfinite(v)) kept.push_back(v);
    }
    n_min = std::min(n_min, kept.size());
    out.groups.push_back(std::move(kept));
  }
  for (auto& g : out.groups) g.resize(n_min);
  out.dropped = total - static_cast<int64_t>(raw.size() * n_min);
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw ConfigError("gaussian kernel: sigma must be positive, got " + std::to_string(sigma));
  const int64_t radius = static_cast<int64_t>(std::ceil(4.0 * sigma));
  std::vector<double> w;
  w.reserve(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int64_t d = -radius; d <= radius; ++d) {
    const double v = std::exp(-static_cast<double>(d * d) / (2.0 * sigma * sigma));
    w.push_back(v);
    sum += v;
  }
  for (double& v : w) v /= sum;
  return w;
}

std::vector<double> gaussian_smooth(const std::vector<double>& curve, double sigma) {
  if (curve.empty()) throw ShapeError("gaussian smooth: curve is empty");
  const std::vector<double> w = gaussian_kernel(sigma);
  const int64_t radius = static_cast<int64_t>(w.size() / 2);
  const int64_t len = static_cast<int64_t>(curve.size());
  std::vector<double> out(curve.size());
  for (int64_t t = 0; t < len; ++t) {
    double acc = 0.0;
    for (int64_t d = -radius; d <= radius; ++d) {
      const int64_t idx = std::clamp(t + d, int64_t{0}, len - 1);  // nearest-edge padding
      acc += w[static_cast<size_t>(d + radius)] * curve[static_cast<size_t>(idx)];
    }
    out[static_cast<size_t>(t)] = acc;
  }
  return out;
}

double optimization_stability(const std::vector<double>& curve, double sigma) {
  if (curve.size() < 5)
    throw ShapeError("optimization stability: need at least 5 epochs, got " +
                     std::to_string(curve.size()));
  for (double v : curve)
    if (!std::isfinite(v))
      throw DomainError("optimization stability: curve has non-finite losses; exclude diverged "
                        "evaluations first");
  const std::vector<double> trend = gaussian_smooth(curve, sigma);
  std::vector<double> resid(curve.size());
  for (size_t i = 0; i < curve.size(); ++i) resid[i] = curve[i] - trend[i];
  const double mean = mean_of(resid);
  double sq = 0.0;
  for (double r : resid) sq += (r - mean) * (r - mean);
  return std::sqrt(sq / static_cast<double>(resid.size()));
}

OptimizationStabilityReport optimization_stability_report(
    const std::vector<std::vector<EvaluationRecord>>& by_replicate, double sigma) {
  OptimizationStabilityReport rep;
  for (const auto& recs : by_replicate) {
    std::vector<double> row;
    row.reserve(recs.size());
    for (const auto& rec : recs)
      row.push_back(rec.diverged ? kInf : optimization_stability(rec.val_curve, sigma));
    rep.sigma_eta.push_back(std::move(row));
  }
  BalancedGroups bg = balance_for_fit(rep.sigma_eta);
  rep.excluded = bg.dropped;
  rep.model = variance_components(bg.groups);
  return rep;
}

OracleChoice oracle_best(const std::vector<std::vector<EvaluationRecord>>& member_records) {
  if (member_records.empty()) throw ShapeError("oracle baseline: no pool members");
  OracleChoice best;
  best.best_val_loss = kInf;
  bool found = false;
  for (size_t m = 0; m < member_records.size(); ++m) {
    for (size_t r = 0; r < member_records[m].size(); ++r) {
      const EvalSummary s = summarize_eval(member_records[m][r]);
      if (s.best_val_loss < best.best_val_loss) {
        best.member = m;
        best.record_index = r;
        best.best_val_loss = s.best_val_loss;
        found = true;
      }
    }
  }
  if (!found)
    throw DomainError("oracle baseline: every pool member diverged in every evaluation");
  return best;
}

}  // namespace amalgam

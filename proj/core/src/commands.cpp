#include "amalgam/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <thread>
#include <utility>

#include "amalgam/errors.hpp"
#include "amalgam/file_io.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/stability_eval.hpp"

namespace amalgam {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

const std::vector<std::string>& policy_entry_names() {
  static const std::vector<std::string> names = {
      "rnnprop.l1.wx", "rnnprop.l1.wh", "rnnprop.l1.b", "rnnprop.l2.wx",
      "rnnprop.l2.wh", "rnnprop.l2.b",  "rnnprop.out_w", "rnnprop.out_b"};
  return names;
}

const std::vector<Shape>& policy_entry_shapes() {
  static const std::vector<Shape> shapes = [] {
    std::vector<Shape> out;
    for (const Tensor& t : RnnPropParams::init(0).flatten()) out.push_back(t.shape());
    return out;
  }();
  return shapes;
}

std::string shape_text(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

}  // namespace

std::vector<CheckpointEntry> policy_checkpoint_entries(const std::vector<Tensor>& flat) {
  const auto& names = policy_entry_names();
  if (flat.size() != names.size())
    throw ConfigError("policy checkpoint: expected " + std::to_string(names.size()) +
                      " tensors, got " + std::to_string(flat.size()));
  std::vector<CheckpointEntry> entries;
  entries.reserve(flat.size());
  for (size_t i = 0; i < flat.size(); ++i) entries.push_back({names[i], flat[i]});
  return entries;
}

RnnPropParams policy_from_checkpoint(const std::vector<CheckpointEntry>& entries) {
  const auto& names = policy_entry_names();
  const auto& shapes = policy_entry_shapes();
  std::map<std::string, const Tensor*> by_name;
  for (const CheckpointEntry& e : entries) by_name.emplace(e.name, &e.tensor);
  if (entries.size() != names.size() || by_name.size() != names.size()) {
    for (const CheckpointEntry& e : entries)
      if (std::find(names.begin(), names.end(), e.name) == names.end())
        throw IoError("checkpoint does not hold a learned policy: unexpected entry '" + e.name +
                      "'");
  }
  std::vector<Tensor> flat;
  flat.reserve(names.size());
  for (size_t i = 0; i < names.size(); ++i) {
    auto it = by_name.find(names[i]);
    if (it == by_name.end())
      throw IoError("checkpoint does not hold a learned policy: missing entry '" + names[i] +
                    "'");
    if (it->second->shape() != shapes[i])
      throw IoError("checkpoint entry '" + names[i] + "' has shape " +
                    shape_text(it->second->shape()) + " but the policy needs " +
                    shape_text(shapes[i]));
    flat.push_back(*it->second);
  }
  return RnnPropParams::unflatten(flat);
}

double final_validation_loss(const ExperimentConfig& cfg, const ExperimentProblem& prob,
                             Policy& policy, uint64_t rep_seed) {
  RolloutOptions ro;
  ro.steps = cfg.train.curriculum_stages.empty() ? cfg.train.unroll_n
                                                 : cfg.train.curriculum_stages.back();
  ro.warmup_steps = cfg.train.warmup_steps;
  ro.warmup_lr = cfg.train.warmup_lr;
  ro.eval_interval = 0;
  double total = 0.0;
  for (int64_t v = 0; v < cfg.train.validation_problems; ++v) {
    std::shared_ptr<const Optimizee> problem =
        prob.family(derive_seed(rep_seed, "final_val_problem", static_cast<uint64_t>(v)));
    Rng rng(derive_seed(rep_seed, "final_val_rollout", static_cast<uint64_t>(v)));
    total += rollout_meta_loss(*problem, policy, ro, rng);
  }
  return total / static_cast<double>(cfg.train.validation_problems);
}

// ---------------------------------------------------------------------------
// cmd_train
// ---------------------------------------------------------------------------

namespace {

const char* const kGridCsvHeader = "member,best_lr,best_score";

std::string format_grid_csv(const std::vector<PoolKind>& members,
                            const std::vector<PoolHyper>& hps,
                            const std::vector<double>& scores) {
  std::string out = kGridCsvHeader;
  out += "\n";
  for (size_t i = 0; i < members.size(); ++i) {
    out += pool_kind_name(members[i]);
    out += ",";
    out += format_real(hps[i].lr);
    out += ",";
    out += format_real(scores[i]);
    out += "\n";
  }
  return out;
}

/// Reads a cached grid.csv; returns true and fills hps only when the file
/// parses and holds exactly one row per pool member.
bool load_grid_cache(const std::string& path, const std::vector<PoolKind>& members,
                     std::vector<PoolHyper>* hps) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const IoError&) {
    return false;
  }
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kGridCsvHeader) return false;
  std::map<std::string, double> lr_by_member;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos) return false;
    const std::string member = line.substr(0, c1);
    double lr = 0.0;
    try {
      lr = parse_real_token(line.substr(c1 + 1, c2 - c1 - 1), "grid cache");
    } catch (const ConfigError&) {
      return false;
    }
    if (!lr_by_member.emplace(member, lr).second) return false;
  }
  if (lr_by_member.size() != members.size()) return false;
  std::vector<PoolHyper> out(members.size());
  for (size_t i = 0; i < members.size(); ++i) {
    auto it = lr_by_member.find(pool_kind_name(members[i]));
    if (it == lr_by_member.end()) return false;
    out[i].lr = it->second;
  }
  *hps = std::move(out);
  return true;
}

/// Grid-searches a learning rate per pool member (or reuses the cached
/// result). Every member tunes on a fresh instance of the same problem
/// seed, so members see identical data.
std::vector<PoolHyper> tuned_pool_hypers(const ExperimentConfig& cfg,
                                         const ExperimentProblem& prob,
                                         const std::vector<PoolKind>& members) {
  const std::string cache = grid_path(cfg.out_dir);
  std::vector<PoolHyper> hps;
  if (load_grid_cache(cache, members, &hps)) return hps;

  RolloutOptions opt;
  opt.steps = cfg.grid_steps;
  opt.warmup_steps = cfg.train.warmup_steps;
  opt.warmup_lr = cfg.train.warmup_lr;
  opt.eval_interval = 0;

  hps.assign(members.size(), PoolHyper{});
  std::vector<double> scores(members.size(), 0.0);
  for (size_t i = 0; i < members.size(); ++i) {
    std::shared_ptr<const Optimizee> problem = prob.family(derive_seed(cfg.seed, "grid_problem"));
    GridSearchResult g =
        grid_search_lr(members[i], *problem, cfg.grid_lrs, opt, cfg.grid_seeds,
                       derive_seed(cfg.seed, "grid_search", static_cast<uint64_t>(i)));
    hps[i].lr = g.best_lr;
    scores[i] = g.best_score;
  }
  write_file_atomic(cache, format_grid_csv(members, hps, scores));
  return hps;
}

struct ReplicateOutput {
  std::vector<CheckpointEntry> checkpoint;
  std::string train_log_csv;
  std::string summary_text;
};

ReplicateOutput run_replicate(const ExperimentConfig& cfg, const ExperimentProblem& prob,
                              const std::vector<PoolKind>& members,
                              const std::vector<PoolHyper>& hps, int64_t r) {
  const uint64_t rs = replicate_seed(cfg, r);
  TrainConfig tc = cfg.train;
  tc.seed = rs;

  AmalgamationMode mode;
  if (cfg.mode == AmalgamationKind::OptimalChoice && tc.alpha != 0.0) {
    TrainConfig cc = cfg.train;
    cc.meta_epochs = cfg.choice_meta_epochs;
    cc.seed = derive_seed(rs, "choice_pretrain");
    ChoiceParams teacher = train_choice_policy(members, hps, prob.family, cc);
    mode = make_choice_mode(std::move(teacher), members, hps);
  } else {
    mode = make_pool_mode(cfg.mode, members, hps);
  }

  MetaRnnProp student(RnnPropParams::init(derive_seed(rs, "student_init")));
  TrainResult result = train_truncated(student, mode, prob.family, tc);

  const std::vector<Tensor>& chosen =
      result.best_params.empty() ? result.meta_params : result.best_params;
  student.set_meta_params(chosen);
  const double final_val = final_validation_loss(cfg, prob, student.as_policy(), rs);

  ReplicateOutput out;
  out.checkpoint = policy_checkpoint_entries(chosen);
  out.train_log_csv = format_train_log_csv(result.log);
  std::string& s = out.summary_text;
  s += "replicate = " + std::to_string(r) + "\n";
  s += "seed = " + std::to_string(rs) + "\n";
  s += "problem = " + prob.name + "\n";
  s += "checkpoint = checkpoint-" + std::to_string(r) + ".amlg\n";
  s += "meta_updates = " + std::to_string(result.meta_updates) + "\n";
  s += "divergence_events = " + std::to_string(result.divergence_events) + "\n";
  s += "best_epoch = " + std::to_string(result.best_epoch) + "\n";
  s += "best_val_meta_loss = " + format_real(result.best_val_meta_loss) + "\n";
  s += "final_val_meta_loss = " + format_real(final_val) + "\n";
  return out;
}

}  // namespace

TrainArtifacts cmd_train(const ExperimentConfig& cfg) {
  validate_experiment(cfg);
  TrainArtifacts art;
  art.effective_config = effective_config_path(cfg.out_dir);
  write_file_atomic(art.effective_config, experiment_to_text(cfg));

  const ExperimentProblem prob = make_problem(cfg.optimizee, cfg.eval_steps_per_epoch);
  const std::vector<PoolKind> members = pool_members(cfg.pool);
  const std::vector<PoolHyper> hps = tuned_pool_hypers(cfg, prob, members);
  art.grid_file = grid_path(cfg.out_dir);

  std::vector<ReplicateOutput> outs(static_cast<size_t>(cfg.replicates));
  std::vector<std::exception_ptr> errors(static_cast<size_t>(cfg.replicates));
  auto body = [&](int64_t r) {
    try {
      outs[static_cast<size_t>(r)] = run_replicate(cfg, prob, members, hps, r);
    } catch (...) {
      errors[static_cast<size_t>(r)] = std::current_exception();
    }
  };

  int64_t workers =
      cfg.workers == 0 ? static_cast<int64_t>(std::thread::hardware_concurrency()) : cfg.workers;
  workers = std::max<int64_t>(1, std::min(workers, cfg.replicates));
  if (workers == 1) {
    for (int64_t r = 0; r < cfg.replicates; ++r) body(r);
  } else {
    // One replicate per worker at a time; workers share nothing mutable.
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(workers));
    for (int64_t t = 0; t < workers; ++t)
      threads.emplace_back([&, t] {
        for (int64_t r = t; r < cfg.replicates; r += workers) body(r);
      });
    for (std::thread& t : threads) t.join();
  }
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);

  // All writes happen here, in replicate order, on the main thread.
  for (int64_t r = 0; r < cfg.replicates; ++r) {
    const ReplicateOutput& o = outs[static_cast<size_t>(r)];
    const std::string cp = checkpoint_path(cfg.out_dir, r);
    save_checkpoint(o.checkpoint, cp);
    const std::string tl = train_log_path(cfg.out_dir, r);
    write_file_atomic(tl, o.train_log_csv);
    const std::string sm = summary_path(cfg.out_dir, r);
    write_file_atomic(sm, o.summary_text);
    art.checkpoints.push_back(cp);
    art.train_logs.push_back(tl);
    art.summaries.push_back(sm);
  }
  return art;
}

// ---------------------------------------------------------------------------
// cmd_evaluate
// ---------------------------------------------------------------------------

namespace {

void append_eval_rows(std::vector<EvalRow>& rows, const RolloutResult& rr, int64_t replicate,
                      int64_t eval, int64_t epochs, int64_t spe) {
  const int64_t recorded = static_cast<int64_t>(rr.step_train_loss.size());
  for (int64_t ep = 1; ep <= epochs; ++ep) {
    const int64_t lo = (ep - 1) * spe;
    const int64_t hi = ep * spe;
    EvalRow row;
    row.replicate = replicate;
    row.eval = eval;
    row.epoch = ep;
    if (hi <= recorded) {
      double sum = 0.0;
      for (int64_t i = lo; i < hi; ++i) sum += rr.step_train_loss[static_cast<size_t>(i)];
      row.train_loss = sum / static_cast<double>(spe);
      const EvalPoint& pt = rr.evals[static_cast<size_t>(ep - 1)];
      if (pt.step != hi)
        throw Error("internal: evaluation cadence mismatch (epoch " + std::to_string(ep) +
                    " expected step " + std::to_string(hi) + ", got " + std::to_string(pt.step) +
                    ")");
      row.val_loss = pt.val_loss;
      row.diverged = false;
      rows.push_back(row);
    } else {
      // The rollout diverged inside this epoch: close the evaluation with
      // one flagged row (partial mean where any steps were recorded).
      double sum = 0.0;
      for (int64_t i = lo; i < recorded; ++i) sum += rr.step_train_loss[static_cast<size_t>(i)];
      row.train_loss = recorded > lo ? sum / static_cast<double>(recorded - lo) : kInf;
      row.val_loss = kInf;
      row.diverged = true;
      rows.push_back(row);
      break;
    }
  }
}

}  // namespace

std::string cmd_evaluate(const ExperimentConfig& cfg) {
  validate_experiment(cfg);
  const ExperimentProblem prob = make_problem(cfg.optimizee, cfg.eval_steps_per_epoch);
  const int64_t spe = prob.steps_per_epoch;

  std::vector<EvalRow> rows;
  for (int64_t r = 0; r < cfg.replicates; ++r) {
    RnnPropParams params = policy_from_checkpoint(load_checkpoint(checkpoint_path(cfg.out_dir, r)));
    RnnPropPolicy policy(std::move(params));
    const uint64_t rs = replicate_seed(cfg, r);
    for (int64_t e = 0; e < cfg.evals_per_replicate; ++e) {
      // A fresh instance per evaluation: same held-out problem seed, fresh
      // batching state, so evaluations are exchangeable.
      std::shared_ptr<const Optimizee> problem = prob.family(derive_seed(cfg.seed, "eval_problem"));
      Rng rng(derive_seed(rs, "evaluation", static_cast<uint64_t>(e)));
      RolloutOptions opt;
      opt.steps = cfg.eval_epochs * spe;
      opt.warmup_steps = cfg.train.warmup_steps;
      opt.warmup_lr = cfg.train.warmup_lr;
      opt.eval_interval = spe;
      RolloutResult rr = run_policy(*problem, policy, opt, rng);
      append_eval_rows(rows, rr, r, e, cfg.eval_epochs, spe);
    }
  }
  const std::string path = evaluation_path(cfg.out_dir);
  write_file_atomic(path, format_eval_csv(rows));
  return path;
}

// ---------------------------------------------------------------------------
// cmd_stability
// ---------------------------------------------------------------------------

namespace {

std::string record_tag(int64_t replicate, int64_t eval) {
  return "replicate " + std::to_string(replicate) + " evaluation " + std::to_string(eval);
}

std::vector<std::vector<EvaluationRecord>> group_eval_rows(const std::vector<EvalRow>& rows) {
  std::map<std::pair<int64_t, int64_t>, EvaluationRecord> recs;
  for (const EvalRow& row : rows) {
    const auto key = std::make_pair(row.replicate, row.eval);
    auto it = recs.find(key);
    if (it == recs.end()) {
      if (row.epoch != 1)
        throw IoError("evaluation CSV: " + record_tag(row.replicate, row.eval) +
                      " starts at epoch " + std::to_string(row.epoch) + " (expected 1)");
      EvaluationRecord rec;
      rec.replicate_id = row.replicate;
      rec.evaluation_id = row.eval;
      it = recs.emplace(key, std::move(rec)).first;
    } else {
      EvaluationRecord& rec = it->second;
      if (rec.diverged)
        throw IoError("evaluation CSV: " + record_tag(row.replicate, row.eval) +
                      " has rows after its diverged row");
      const int64_t expected = static_cast<int64_t>(rec.train_curve.size()) + 1;
      if (row.epoch != expected)
        throw IoError("evaluation CSV: " + record_tag(row.replicate, row.eval) + " jumps to epoch " +
                      std::to_string(row.epoch) + " (expected " + std::to_string(expected) + ")");
    }
    EvaluationRecord& rec = it->second;
    rec.train_curve.push_back(row.train_loss);
    rec.val_curve.push_back(row.val_loss);
    rec.diverged = rec.diverged || row.diverged;
  }
  std::map<int64_t, std::vector<EvaluationRecord>> by_rep;
  for (auto& [key, rec] : recs) by_rep[key.first].push_back(std::move(rec));
  std::vector<std::vector<EvaluationRecord>> out;
  out.reserve(by_rep.size());
  for (auto& [rep, v] : by_rep) out.push_back(std::move(v));
  return out;
}

struct PartialFit {
  double mu = kNaN;
  double sigma_alpha = kNaN;
  double sigma_eps = kNaN;
  double ci_low = kNaN;
  double ci_high = kNaN;
};

double sample_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Variance-components fit that degrades gracefully: groups that lost every
/// finite value are dropped, and designs too small for the full estimator
/// report what they can (nan elsewhere) instead of failing.
PartialFit fit_scores(const std::vector<std::vector<double>>& raw) {
  PartialFit out;
  std::vector<std::vector<double>> usable;
  for (const auto& g : raw) {
    size_t finite = 0;
    for (double v : g) finite += std::isfinite(v) ? 1 : 0;
    if (finite > 0) usable.push_back(g);
  }
  if (usable.empty()) return out;
  const BalancedGroups bg = balance_for_fit(usable);
  const int64_t k = static_cast<int64_t>(bg.groups.size());
  const int64_t n = k > 0 ? static_cast<int64_t>(bg.groups[0].size()) : 0;
  if (k == 0 || n == 0) return out;

  if (k >= 2 && n >= 2) {
    const StabilityModel m = variance_components(bg.groups);
    out.mu = m.mu;
    out.sigma_alpha = m.sigma_alpha;
    out.sigma_eps = m.sigma_eps;
    out.ci_low = m.ci_low;
    out.ci_high = m.ci_high;
    return out;
  }
  if (k == 1) {
    out.mu = sample_mean(bg.groups[0]);
    if (n >= 2) out.sigma_eps = sample_std(bg.groups[0]);
    return out;
  }
  // k >= 2, n == 1: the replicate means are all there is; their spread
  // still yields a t-interval on the mean, but the two variance components
  // cannot be separated.
  std::vector<double> means;
  means.reserve(static_cast<size_t>(k));
  for (const auto& g : bg.groups) means.push_back(g[0]);
  out.mu = sample_mean(means);
  const double s = sample_std(means);
  const double half = t_quantile_975(k - 1) * s / std::sqrt(static_cast<double>(k));
  out.ci_low = out.mu - half;
  out.ci_high = out.mu + half;
  return out;
}

}  // namespace

std::string cmd_stability(const ExperimentConfig& cfg) {
  validate_experiment(cfg);
  const std::string in_path = evaluation_path(cfg.out_dir);
  const std::vector<EvalRow> all_rows = parse_eval_csv(read_text_file(in_path));
  if (all_rows.empty())
    throw IoError("stability: no data — '" + in_path + "' holds a header but no rows");
  const std::vector<std::vector<EvaluationRecord>> by_rep = group_eval_rows(all_rows);

  int64_t n_diverged = 0;
  std::vector<std::vector<double>> best_val;
  std::vector<std::vector<double>> sigma_eta;
  for (const auto& rep : by_rep) {
    std::vector<double> bv;
    std::vector<double> se;
    for (const EvaluationRecord& rec : rep) {
      n_diverged += rec.diverged ? 1 : 0;
      bv.push_back(summarize_eval(rec).best_val_loss);
      if (rec.diverged) {
        se.push_back(kInf);
      } else {
        // Curves too short (or otherwise unscorable) become sentinels the
        // balancing step drops, rather than killing the whole report.
        try {
          se.push_back(optimization_stability(rec.val_curve));
        } catch (const Error&) {
          se.push_back(kInf);
        }
      }
    }
    best_val.push_back(std::move(bv));
    sigma_eta.push_back(std::move(se));
  }

  const PartialFit score = fit_scores(best_val);
  const PartialFit opt = fit_scores(sigma_eta);
  const std::string name = problem_name(cfg.optimizee);

  std::vector<StabilityRow> rows;
  auto push = [&](const std::string& metric, double estimate, double lo, double hi) {
    rows.push_back(StabilityRow{name, metric, estimate, lo, hi, n_diverged});
  };
  push("best_val_mean", score.mu, score.ci_low, score.ci_high);
  push("meta_stability", score.sigma_alpha, kNaN, kNaN);
  push("evaluation_stability", score.sigma_eps, kNaN, kNaN);
  push("optimization_stability_mean", opt.mu, opt.ci_low, opt.ci_high);
  push("optimization_meta_stability", opt.sigma_alpha, kNaN, kNaN);
  push("optimization_evaluation_stability", opt.sigma_eps, kNaN, kNaN);

  const std::string out_path = stability_path(cfg.out_dir);
  write_file_atomic(out_path, format_stability_csv(rows));
  return out_path;
}

// ---------------------------------------------------------------------------
// cmd_report
// ---------------------------------------------------------------------------

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fixed2(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 2);
  (void)ec;
  return std::string(buf, ptr);
}

std::string label4(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 4);
  (void)ec;
  return std::string(buf, ptr);
}

struct SeriesStats {
  std::vector<double> mean;  // per epoch; nan when no curve covers the epoch
  std::vector<double> lo;    // mean - 2 std
  std::vector<double> hi;    // mean + 2 std
};

SeriesStats series_stats(const std::vector<const std::vector<double>*>& curves, size_t epochs) {
  SeriesStats s;
  for (size_t i = 0; i < epochs; ++i) {
    std::vector<double> vals;
    for (const auto* c : curves)
      if (i < c->size() && std::isfinite((*c)[i])) vals.push_back((*c)[i]);
    if (vals.empty()) {
      s.mean.push_back(kNaN);
      s.lo.push_back(kNaN);
      s.hi.push_back(kNaN);
      continue;
    }
    const double m = sample_mean(vals);
    const double sd = vals.size() >= 2 ? sample_std(vals) : 0.0;
    s.mean.push_back(m);
    s.lo.push_back(m - 2.0 * sd);
    s.hi.push_back(m + 2.0 * sd);
  }
  return s;
}

void render_panel(std::string& svg, double x0, double y0, double w, double h,
                  const SeriesStats& s, const std::string& title) {
  const size_t epochs = s.mean.size();
  double dlo = kInf;
  double dhi = -kInf;
  for (size_t i = 0; i < epochs; ++i) {
    if (!std::isfinite(s.mean[i])) continue;
    dlo = std::min(dlo, s.lo[i]);
    dhi = std::max(dhi, s.hi[i]);
  }
  if (!std::isfinite(dlo)) {
    dlo = 0.0;
    dhi = 1.0;
  }
  double pad = 0.05 * (dhi - dlo);
  if (pad <= 0.0) pad = std::abs(dhi) > 0 ? 0.05 * std::abs(dhi) : 1.0;
  const double ylo = dlo - pad;
  const double yhi = dhi + pad;

  const double denom = epochs > 1 ? static_cast<double>(epochs - 1) : 1.0;
  auto px = [&](size_t i) {
    return epochs > 1 ? x0 + w * static_cast<double>(i) / denom : x0 + w / 2.0;
  };
  auto py = [&](double v) { return y0 + h * (yhi - v) / (yhi - ylo); };

  svg += "<text x=\"" + fixed2(x0) + "\" y=\"" + fixed2(y0 - 14.0) + "\" font-size=\"14\">" +
         xml_escape(title) + "</text>\n";
  svg += "<rect x=\"" + fixed2(x0) + "\" y=\"" + fixed2(y0) + "\" width=\"" + fixed2(w) +
         "\" height=\"" + fixed2(h) + "\" fill=\"none\" stroke=\"#777777\"/>\n";

  // +/- 2 std band: upper edge left to right, lower edge back.
  std::string band;
  for (size_t i = 0; i < epochs; ++i) {
    if (!std::isfinite(s.mean[i])) continue;
    band += fixed2(px(i)) + "," + fixed2(py(s.hi[i])) + " ";
  }
  for (size_t i = epochs; i-- > 0;) {
    if (!std::isfinite(s.mean[i])) continue;
    band += fixed2(px(i)) + "," + fixed2(py(s.lo[i])) + " ";
  }
  if (!band.empty()) band.pop_back();
  svg += "<polygon points=\"" + band + "\" fill=\"#6699cc\" fill-opacity=\"0.30\" stroke=\"none\"/>\n";

  std::string line;
  for (size_t i = 0; i < epochs; ++i) {
    if (!std::isfinite(s.mean[i])) continue;
    line += fixed2(px(i)) + "," + fixed2(py(s.mean[i])) + " ";
  }
  if (!line.empty()) line.pop_back();
  svg += "<polyline points=\"" + line +
         "\" fill=\"none\" stroke=\"#234e77\" stroke-width=\"1.5\"/>\n";

  // Axis labels: y extremes on the left, first and last epoch underneath.
  svg += "<text x=\"" + fixed2(x0 - 6.0) + "\" y=\"" + fixed2(y0 + 4.0) +
         "\" text-anchor=\"end\">" + xml_escape(label4(yhi)) + "</text>\n";
  svg += "<text x=\"" + fixed2(x0 - 6.0) + "\" y=\"" + fixed2(y0 + h + 4.0) +
         "\" text-anchor=\"end\">" + xml_escape(label4(ylo)) + "</text>\n";
  svg += "<text x=\"" + fixed2(x0) + "\" y=\"" + fixed2(y0 + h + 18.0) +
         "\" text-anchor=\"middle\">1</text>\n";
  svg += "<text x=\"" + fixed2(x0 + w) + "\" y=\"" + fixed2(y0 + h + 18.0) +
         "\" text-anchor=\"middle\">" + std::to_string(epochs) + "</text>\n";
  svg += "<text x=\"" + fixed2(x0 + w / 2.0) + "\" y=\"" + fixed2(y0 + h + 34.0) +
         "\" text-anchor=\"middle\">epoch</text>\n";
}

}  // namespace

std::string cmd_report(const ExperimentConfig& cfg) {
  validate_experiment(cfg);
  const std::string in_path = evaluation_path(cfg.out_dir);
  const std::vector<EvalRow> all_rows = parse_eval_csv(read_text_file(in_path));
  if (all_rows.empty())
    throw IoError("report: no data — '" + in_path + "' holds a header but no rows");
  const std::vector<std::vector<EvaluationRecord>> by_rep = group_eval_rows(all_rows);

  std::vector<const std::vector<double>*> train_curves;
  std::vector<const std::vector<double>*> val_curves;
  int64_t n_diverged = 0;
  size_t epochs = 0;
  for (const auto& rep : by_rep) {
    for (const EvaluationRecord& rec : rep) {
      if (rec.diverged) {
        ++n_diverged;
        continue;
      }
      train_curves.push_back(&rec.train_curve);
      val_curves.push_back(&rec.val_curve);
      epochs = std::max(epochs, rec.train_curve.size());
    }
  }
  if (train_curves.empty())
    throw IoError("report: no usable curves — every evaluation in '" + in_path + "' diverged");

  const SeriesStats train = series_stats(train_curves, epochs);
  const SeriesStats val = series_stats(val_curves, epochs);
  const std::string name = problem_name(cfg.optimizee);

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"940\" height=\"470\" "
         "viewBox=\"0 0 940 470\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<title>" + xml_escape(name) + " evaluation losses</title>\n";
  svg += "<text x=\"20\" y=\"28\" font-size=\"16\">" + xml_escape(name) +
         ": loss vs epoch, mean and +/- 2 std over " + std::to_string(train_curves.size()) +
         " evaluations</text>\n";
  render_panel(svg, 90.0, 70.0, 360.0, 310.0, train, "training loss");
  render_panel(svg, 550.0, 70.0, 360.0, 310.0, val, "validation loss");
  svg += "<text x=\"20\" y=\"452\">" + std::to_string(n_diverged) +
         " diverged evaluation(s) excluded</text>\n";
  svg += "</svg>\n";

  const std::string out_path = report_path(cfg.out_dir);
  write_file_atomic(out_path, svg);
  return out_path;
}

}  // namespace amalgam

#include "amalgam/amalgamation_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "amalgam/errors.hpp"
#include "amalgam/perturbation.hpp"

namespace amalgam {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool all_params_finite(const std::vector<Tensor>& params) {
  for (const auto& p : params)
    if (!p.all_finite()) return false;
  return true;
}

void check_step_counts(const Trajectory& student, const Trajectory& teacher) {
  if (teacher.params_at_step.size() != student.params_at_step.size())
    throw ShapeError("distillation: student has " + std::to_string(student.params_at_step.size()) +
                     " steps but teacher '" + teacher.policy_tag + "' has " +
                     std::to_string(teacher.params_at_step.size()));
}

/// log(||theta_s - theta_t||_2 + eps) for one step; the norm runs over every
/// parameter tensor jointly. Teacher snapshots are detached so the gradient
/// can only flow through the student side.
Tensor step_log_distance(Tape* tape, const std::vector<Tensor>& sp, const std::vector<Tensor>& tp,
                         double eps) {
  if (sp.size() != tp.size())
    throw ShapeError("distillation: parameter lists differ in length (" +
                     std::to_string(sp.size()) + " vs " + std::to_string(tp.size()) + ")");
  std::vector<Tensor> flat;
  flat.reserve(sp.size());
  for (size_t i = 0; i < sp.size(); ++i) {
    if (sp[i].shape() != tp[i].shape())
      throw ShapeError("distillation: parameter tensor " + std::to_string(i) + " is " +
                       shape_str(sp[i].shape()) + " for the student but " +
                       shape_str(tp[i].shape()) + " for the teacher");
    Tensor diff = sub(tape, sp[i], tp[i].detached());
    flat.push_back(reshape(tape, diff, {diff.size()}));
  }
  Tensor joined = flat.size() == 1 ? flat[0] : concat(tape, flat, 0);
  return log(tape, add_scalar(tape, l2_norm(tape, joined), eps));
}

}  // namespace

Tensor meta_loss(Tape* tape, const Trajectory& traj) {
  const size_t steps = traj.losses_at_step.size();
  if (steps == 0) throw ShapeError("meta loss: trajectory has no steps");
  if (traj.initial_losses.size() != steps)
    throw ShapeError("meta loss: " + std::to_string(steps) + " step losses but " +
                     std::to_string(traj.initial_losses.size()) + " initial losses");
  Tensor acc;
  for (size_t i = 0; i < steps; ++i) {
    const Tensor& li = traj.losses_at_step[i];
    if (!li.is_scalar())
      throw ShapeError("meta loss: step " + std::to_string(i) + " loss has shape " +
                       shape_str(li.shape()) + "; expected a scalar");
    const double l0 = traj.initial_losses[i];
    if (!(li.item() > 0.0) || !std::isfinite(li.item()))
      throw DomainError("meta loss: step " + std::to_string(i) + " loss is " +
                        std::to_string(li.item()) + "; the log ratio needs positive losses");
    if (!(l0 > 0.0) || !std::isfinite(l0))
      throw DomainError("meta loss: step " + std::to_string(i) + " initial loss is " +
                        std::to_string(l0) + "; the log ratio needs positive losses");
    Tensor term = add_scalar(tape, log(tape, li), -std::log(l0));
    acc = (i == 0) ? term : add(tape, acc, term);
  }
  return mul_scalar(tape, acc, 1.0 / static_cast<double>(steps));
}

Tensor distill_loss(Tape* tape, const Trajectory& student, const Trajectory& teacher, double eps) {
  if (student.params_at_step.empty()) throw ShapeError("distillation: trajectory has no steps");
  check_step_counts(student, teacher);
  Tensor acc;
  for (size_t i = 0; i < student.params_at_step.size(); ++i) {
    Tensor term = step_log_distance(tape, student.params_at_step[i], teacher.params_at_step[i], eps);
    acc = (i == 0) ? term : add(tape, acc, term);
  }
  return mul_scalar(tape, acc, 1.0 / static_cast<double>(student.params_at_step.size()));
}

const char* amalgamation_kind_name(AmalgamationKind k) {
  switch (k) {
    case AmalgamationKind::Mean: return "mean";
    case AmalgamationKind::MinMax: return "min-max";
    case AmalgamationKind::OptimalChoice: return "optimal-choice";
  }
  return "?";
}

AmalgamationKind amalgamation_kind_from_name(const std::string& name) {
  if (name == "mean") return AmalgamationKind::Mean;
  if (name == "min-max") return AmalgamationKind::MinMax;
  if (name == "optimal-choice") return AmalgamationKind::OptimalChoice;
  throw ConfigError("unknown amalgamation kind '" + name +
                    "' (expected mean, min-max, or optimal-choice)");
}

Tensor amalgamation_loss(Tape* tape, AmalgamationKind kind, const Trajectory& student,
                         const std::vector<Trajectory>& teachers, double alpha, double eps) {
  if (alpha < 0.0) throw ConfigError("amalgamation: alpha must be non-negative");
  Tensor meta = meta_loss(tape, student);
  if (alpha == 0.0) return meta;
  if (teachers.empty())
    throw ConfigError("amalgamation: distillation weight is nonzero but there are no teachers");

  Tensor term;
  switch (kind) {
    case AmalgamationKind::Mean: {
      Tensor acc;
      for (size_t k = 0; k < teachers.size(); ++k) {
        Tensor d = distill_loss(tape, student, teachers[k], eps);
        acc = (k == 0) ? d : add(tape, acc, d);
      }
      term = mul_scalar(tape, acc, 1.0 / static_cast<double>(teachers.size()));
      break;
    }
    case AmalgamationKind::MinMax: {
      // Per step, distill toward whichever teacher is currently farthest
      // (in log distance). The winner is picked numerically and only its
      // term enters the graph, so gradients target the active constraint.
      for (const auto& t : teachers) check_step_counts(student, t);
      const size_t steps = student.params_at_step.size();
      if (steps == 0) throw ShapeError("distillation: trajectory has no steps");
      Tensor acc;
      for (size_t i = 0; i < steps; ++i) {
        size_t worst = 0;
        double worst_val = -kInf;
        for (size_t k = 0; k < teachers.size(); ++k) {
          double d = step_log_distance(nullptr, student.params_at_step[i],
                                       teachers[k].params_at_step[i], eps)
                         .item();
          if (d > worst_val) {
            worst_val = d;
            worst = k;
          }
        }
        Tensor term_i = step_log_distance(tape, student.params_at_step[i],
                                          teachers[worst].params_at_step[i], eps);
        acc = (i == 0) ? term_i : add(tape, acc, term_i);
      }
      term = mul_scalar(tape, acc, 1.0 / static_cast<double>(steps));
      break;
    }
    case AmalgamationKind::OptimalChoice: {
      if (teachers.size() != 1)
        throw ConfigError("amalgamation: optimal-choice distills from exactly one teacher, got " +
                          std::to_string(teachers.size()));
      term = distill_loss(tape, student, teachers[0], eps);
      break;
    }
  }
  return add(tape, meta, mul_scalar(tape, term, alpha));
}

Tensor RandomScaling::scale_grad(Tape* tape, size_t i, const Tensor& g) const {
  const double s = scales.at(i);
  if (s == 1.0) return g;
  return mul_scalar(tape, g, s);
}

Tensor RandomScaling::unscale_update(Tape* tape, size_t i, const Tensor& u) const {
  const double s = scales.at(i);
  if (s == 1.0) return u;
  return mul_scalar(tape, u, 1.0 / s);
}

RandomScaling RandomScaling::identity(size_t tensors) {
  return RandomScaling{std::vector<double>(tensors, 1.0)};
}

RandomScaling draw_random_scaling(const std::vector<Shape>& shapes, double lo, double hi,
                                  Rng& rng) {
  if (!(lo > 0.0) || hi < lo)
    throw ConfigError("random scaling: bounds must satisfy 0 < lo <= hi");
  RandomScaling out;
  out.scales.reserve(shapes.size());
  const double log_lo = std::log(lo);
  const double log_hi = std::log(hi);
  for (size_t i = 0; i < shapes.size(); ++i)
    out.scales.push_back(std::exp(rng.uniform(log_lo, log_hi)));
  return out;
}

WarmupResult warmup(const Optimizee& problem, std::vector<Tensor> params, int64_t steps,
                    double lr, Rng& rng) {
  if (steps < 0) throw ConfigError("warmup: steps must be non-negative");
  WarmupResult out;
  for (int64_t k = 0; k < steps; ++k) {
    Batch b = problem.sample_batch(rng);
    LossGrads lg = problem.gradients(params, b);
    for (size_t i = 0; i < params.size(); ++i)
      params[i] = sub(nullptr, params[i], mul_scalar(nullptr, lg.grads[i], lr));
    if (!std::isfinite(lg.loss) || !all_params_finite(params)) {
      out.diverged = true;
      break;
    }
  }
  out.params = std::move(params);
  return out;
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.meta_epochs < 0) throw ConfigError("train config: meta_epochs must be non-negative");
  if (cfg.truncation_t < 1) throw ConfigError("train config: truncation_t must be positive");
  const std::vector<int64_t> stages =
      cfg.curriculum_stages.empty() ? std::vector<int64_t>{cfg.unroll_n} : cfg.curriculum_stages;
  for (int64_t n : stages) {
    if (n < 1) throw ConfigError("train config: unroll length must be positive, got " +
                                 std::to_string(n));
    if (n % cfg.truncation_t != 0)
      throw ConfigError("train config: truncation length " + std::to_string(cfg.truncation_t) +
                        " does not divide unroll length " + std::to_string(n));
  }
  if (cfg.alpha < 0.0) throw ConfigError("train config: alpha must be non-negative");
  if (cfg.meta_lr < 0.0) throw ConfigError("train config: meta_lr must be non-negative");
  if (!(cfg.clip_norm > 0.0)) throw ConfigError("train config: clip_norm must be positive");
  if (cfg.validation_interval < 1)
    throw ConfigError("train config: validation_interval must be positive");
  if (cfg.patience < 1) throw ConfigError("train config: patience must be positive");
  if (cfg.stage_max_epochs < 0)
    throw ConfigError("train config: stage_max_epochs must be non-negative");
  if (cfg.validation_problems < 1)
    throw ConfigError("train config: validation_problems must be positive");
  if (cfg.warmup_steps < 0) throw ConfigError("train config: warmup_steps must be non-negative");
  if (cfg.warmup_lr < 0.0) throw ConfigError("train config: warmup_lr must be non-negative");
  if (cfg.random_scaling && (!(cfg.scale_min > 0.0) || cfg.scale_max < cfg.scale_min))
    throw ConfigError("train config: scaling bounds must satisfy 0 < scale_min <= scale_max");
  validate_perturbation_config(cfg.perturb);
}

AmalgamationMode make_pool_mode(AmalgamationKind kind, const std::vector<PoolKind>& members,
                                const std::vector<PoolHyper>& hps) {
  if (kind == AmalgamationKind::OptimalChoice)
    throw ConfigError("optimal-choice mode takes a trained choice policy; use make_choice_mode");
  if (members.empty()) throw ConfigError("pool mode: need at least one teacher");
  if (hps.size() != members.size())
    throw ConfigError("pool mode: " + std::to_string(members.size()) + " members but " +
                      std::to_string(hps.size()) + " hyperparameter sets");
  AmalgamationMode mode;
  mode.kind = kind;
  for (size_t i = 0; i < members.size(); ++i)
    mode.teachers.push_back(std::make_unique<PoolPolicy>(members[i], hps[i]));
  return mode;
}

AmalgamationMode make_choice_mode(ChoiceParams params, std::vector<PoolKind> members,
                                  std::vector<PoolHyper> member_hps) {
  AmalgamationMode mode;
  mode.kind = AmalgamationKind::OptimalChoice;
  mode.teachers.push_back(std::make_unique<ChoicePolicy>(std::move(params), std::move(members),
                                                         std::move(member_hps)));
  return mode;
}

ProblemFactory single_problem_family(const Optimizee& problem) {
  const Optimizee* p = &problem;
  return [p](uint64_t) { return std::shared_ptr<const Optimizee>(p, [](const Optimizee*) {}); };
}

double rollout_meta_loss(const Optimizee& problem, Policy& policy, const RolloutOptions& opt,
                         Rng& rng) {
  std::vector<Tensor> params = problem.init_params(rng);
  WarmupResult w = warmup(problem, std::move(params), opt.warmup_steps, opt.warmup_lr, rng);
  if (w.diverged) return kInf;
  const std::vector<Tensor> theta0 = w.params;
  params = w.params;
  policy.reset(problem.param_shapes());
  double acc = 0.0;
  for (int64_t step = 1; step <= opt.steps; ++step) {
    Batch b = problem.sample_batch(rng);
    const double initial = problem.loss(nullptr, theta0, b).item();
    if (!std::isfinite(initial) || initial <= 0.0) return kInf;
    LossGrads lg = problem.gradients(params, b);
    if (!std::isfinite(lg.loss)) return kInf;
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor u = policy.update(nullptr, i, lg.grads[i], step);
      params[i] = sub(nullptr, params[i], u);
    }
    if (!all_params_finite(params)) return kInf;
    const double after = problem.loss(nullptr, params, b).item();
    if (!std::isfinite(after) || after <= 0.0) return kInf;
    acc += std::log(after) - std::log(initial);
  }
  return acc / static_cast<double>(opt.steps);
}

namespace {

/// Everything one meta-epoch produces besides its log record.
struct EpochOutcome {
  bool diverged = false;
  int64_t completed_truncations = 0;
  double meta_sum = 0.0;   // sum of per-truncation meta losses
  double total_sum = 0.0;  // sum of per-truncation amalgamation losses
};

/// Applies one clipped Adam step to the meta parameters. Returns false when
/// the meta gradient is non-finite (the caller records a divergence).
bool apply_meta_update(std::vector<Tensor>& phi, std::vector<PoolState>& meta_state,
                       int64_t meta_step, const PoolHyper& meta_hp, double clip_norm,
                       std::vector<Tensor> mg) {
  double sq = 0.0;
  for (const auto& g : mg)
    for (int64_t c = 0; c < g.size(); ++c) sq += g[c] * g[c];
  const double gn = std::sqrt(sq);
  if (!std::isfinite(gn)) return false;
  if (gn > clip_norm)
    for (auto& g : mg) g = mul_scalar(nullptr, g, clip_norm / gn);
  for (size_t j = 0; j < phi.size(); ++j) {
    PoolUpdateResult r = pool_update(nullptr, PoolKind::Adam, meta_state[j], mg[j], meta_step,
                                     meta_hp);
    meta_state[j] = r.state;
    phi[j] = sub(nullptr, phi[j], r.update);
  }
  return true;
}

}  // namespace

TrainResult train_truncated(MetaPolicy& student, const AmalgamationMode& mode,
                            const ProblemFactory& family, const TrainConfig& cfg) {
  validate_train_config(cfg);
  const bool distilling = cfg.alpha != 0.0;
  if (distilling && mode.teachers.empty())
    throw ConfigError("amalgamation: distillation weight is nonzero but there are no teachers");
  if (distilling && mode.kind == AmalgamationKind::OptimalChoice && mode.teachers.size() != 1)
    throw ConfigError("amalgamation: optimal-choice distills from exactly one teacher, got " +
                      std::to_string(mode.teachers.size()));
  if (!family) throw ConfigError("train: problem factory is empty");

  const std::vector<int64_t> stages =
      cfg.curriculum_stages.empty() ? std::vector<int64_t>{cfg.unroll_n} : cfg.curriculum_stages;
  const size_t n_teachers = distilling ? mode.teachers.size() : 0;

  TrainResult result;
  std::vector<Tensor> phi = student.meta_params();
  std::vector<PoolState> meta_state;
  meta_state.reserve(phi.size());
  for (const auto& t : phi) meta_state.push_back(init_pool_state(t.shape()));
  PoolHyper meta_hp;
  meta_hp.lr = cfg.meta_lr;
  int64_t meta_step = 0;

  size_t stage_idx = 0;
  int64_t epochs_in_stage = 0;
  int64_t stalled = 0;
  double best_val = kInf;

  for (int64_t epoch = 0; epoch < cfg.meta_epochs; ++epoch) {
    const int64_t unroll_n = stages[stage_idx];
    const int64_t t = cfg.truncation_t;
    MetaEpochRecord rec;
    rec.epoch = epoch;
    rec.stage = static_cast<int64_t>(stage_idx);

    std::shared_ptr<const Optimizee> problem = family(derive_seed(cfg.seed, "train_problem",
                                                                  static_cast<uint64_t>(epoch)));
    Rng rng(derive_seed(cfg.seed, "meta_epoch", static_cast<uint64_t>(epoch)));
    // Perturbation randomness lives in its own stream so turning noise on
    // or off never shifts the batch draws below.
    Rng prng(derive_seed(cfg.seed, "perturbation", static_cast<uint64_t>(epoch)));
    EpochOutcome outcome;

    try {
      std::vector<Tensor> theta0 = problem->init_params(rng);
      WarmupResult w = warmup(*problem, std::move(theta0), cfg.warmup_steps, cfg.warmup_lr, rng);
      if (w.diverged) throw DivergenceError("warmup diverged");
      theta0 = std::move(w.params);
      const std::vector<Shape> shapes = problem->param_shapes();
      student.as_policy().reset(shapes);
      std::vector<Tensor> sparams = theta0;
      std::vector<std::vector<Tensor>> tparams(n_teachers, theta0);
      for (size_t k = 0; k < n_teachers; ++k) mode.teachers[k]->reset(shapes);
      RandomScaling scaling = cfg.random_scaling
                                  ? draw_random_scaling(shapes, cfg.scale_min, cfg.scale_max, rng)
                                  : RandomScaling::identity(shapes.size());

      const int64_t n_truncations = unroll_n / t;
      for (int64_t trunc = 0; trunc < n_truncations; ++trunc) {
        // Batches and baseline losses for the whole segment, sampled up
        // front so the student part can be re-run on identical data (the
        // adversarial attack evaluates it several times).
        std::vector<Batch> batches;
        std::vector<double> initials;
        batches.reserve(static_cast<size_t>(t));
        initials.reserve(static_cast<size_t>(t));
        for (int64_t i = 0; i < t; ++i) {
          batches.push_back(problem->sample_batch(rng));
          const double initial = problem->loss(nullptr, theta0, batches.back()).item();
          if (!std::isfinite(initial) || initial <= 0.0)
            throw DivergenceError("baseline loss left the positive domain");
          initials.push_back(initial);
        }
        std::vector<uint64_t> noise_seeds;
        if (cfg.perturb.kind == PerturbationKind::InputNoise && cfg.perturb.sigma > 0.0)
          for (int64_t i = 0; i < t; ++i) noise_seeds.push_back(prng.next_u64());

        // Teacher segment: same batches, clean unscaled gradients, no tape,
        // no perturbations. Independent of the student, so it runs once.
        if (cfg.reset_teachers_to_student && trunc > 0) {
          for (size_t k = 0; k < n_teachers; ++k) {
            for (size_t i = 0; i < sparams.size(); ++i) tparams[k][i] = sparams[i].detached();
            mode.teachers[k]->reset(shapes);
          }
        }
        std::vector<Trajectory> ttrajs(n_teachers);
        for (size_t k = 0; k < n_teachers; ++k)
          ttrajs[k].policy_tag = "teacher-" + std::to_string(k);
        for (int64_t i = 1; i <= t; ++i) {
          const Batch& b = batches[static_cast<size_t>(i - 1)];
          const int64_t teacher_step = cfg.reset_teachers_to_student ? i : trunc * t + i;
          for (size_t k = 0; k < n_teachers; ++k) {
            LossGrads tg = problem->gradients(tparams[k], b);
            if (!std::isfinite(tg.loss)) throw DivergenceError("teacher loss became non-finite");
            for (size_t j = 0; j < tparams[k].size(); ++j) {
              Tensor u = mode.teachers[k]->update(nullptr, j, tg.grads[j], teacher_step);
              tparams[k][j] = sub(nullptr, tparams[k][j], u);
            }
            if (!all_params_finite(tparams[k]))
              throw DivergenceError("teacher parameters became non-finite");
            ttrajs[k].params_at_step.push_back(tparams[k]);
          }
        }

        // Student segment, re-runnable from the truncation-start snapshot.
        // Closed-form problem gradients stay taped (full unrolled
        // differentiation); otherwise each per-step gradient enters as a
        // constant and the meta-gradient flows through the update rule
        // alone.
        const std::vector<Tensor> start_params = sparams;
        student.save_rollout_state();
        auto roll = [&](Tape* tape, const std::vector<Tensor>& policy_params,
                        std::vector<Tensor>* final_params) -> Trajectory {
          student.restore_rollout_state();
          student.set_meta_params(policy_params);
          std::vector<Tensor> cur = start_params;
          Trajectory traj;
          traj.policy_tag = "student";
          for (int64_t i = 1; i <= t; ++i) {
            const int64_t global_step = trunc * t + i;
            const Batch& b = batches[static_cast<size_t>(i - 1)];
            std::vector<Tensor> sgrads;
            if (problem->has_taped_grad()) {
              sgrads = problem->taped_grad(tape, cur, b);
            } else {
              LossGrads lg = problem->gradients(cur, b);
              if (!std::isfinite(lg.loss))
                throw DivergenceError("student loss became non-finite");
              sgrads = std::move(lg.grads);
            }
            for (size_t j = 0; j < cur.size(); ++j) {
              Tensor g = sgrads[j];
              if (!noise_seeds.empty())
                g = input_perturb(g, cfg.perturb.sigma,
                                  derive_seed(noise_seeds[static_cast<size_t>(i - 1)],
                                              "grad_tensor", static_cast<uint64_t>(j)));
              g = scaling.scale_grad(tape, j, g);
              Tensor u = student.as_policy().update(tape, j, g, global_step);
              u = scaling.unscale_update(tape, j, u);
              cur[j] = sub(tape, cur[j], u);
            }
            if (!all_params_finite(cur))
              throw DivergenceError("student parameters became non-finite");
            Tensor step_loss = problem->loss(tape, cur, b);
            if (!std::isfinite(step_loss.item()) || step_loss.item() <= 0.0)
              throw DivergenceError("student loss left the positive domain");
            traj.params_at_step.push_back(cur);
            traj.losses_at_step.push_back(step_loss);
            traj.initial_losses.push_back(initials[static_cast<size_t>(i - 1)]);
          }
          if (final_params) *final_params = std::move(cur);
          return traj;
        };

        // Where the student evaluates this segment: the canonical
        // parameters or a perturbed forward copy. The meta update always
        // lands on phi.
        std::vector<Tensor> base = phi;
        if (cfg.perturb.kind == PerturbationKind::GaussianWeight && cfg.perturb.sigma > 0.0) {
          base = gaussian_weight_perturb(phi, cfg.perturb.sigma, prng.next_u64());
        } else if (cfg.perturb.kind == PerturbationKind::AdversarialWeight &&
                   cfg.perturb.epsilon > 0.0) {
          base = adversarial_weight_perturb(
              [&](Tape* attack_tape, const std::vector<Tensor>& at) {
                Trajectory attacked = roll(attack_tape, at, nullptr);
                return amalgamation_loss(attack_tape, mode.kind, attacked, ttrajs, cfg.alpha);
              },
              phi, cfg.perturb.epsilon, cfg.perturb.steps_A);
        }

        Tape tape;
        std::vector<Tensor> leaves;
        leaves.reserve(base.size());
        for (const auto& p : base) leaves.push_back(tape.leaf(p));
        Trajectory straj = roll(&tape, leaves, &sparams);

        Tensor total = amalgamation_loss(&tape, mode.kind, straj, ttrajs, cfg.alpha);
        if (!std::isfinite(total.item()))
          throw DivergenceError("amalgamation loss became non-finite");
        GradMap grads = backward(tape, total);
        std::vector<Tensor> mg;
        mg.reserve(leaves.size());
        for (const auto& leaf : leaves) mg.push_back(grads.grad(leaf));
        if (!apply_meta_update(phi, meta_state, meta_step + 1, meta_hp, cfg.clip_norm,
                               std::move(mg)))
          throw DivergenceError("meta gradient became non-finite");
        ++meta_step;
        ++result.meta_updates;
        ++outcome.completed_truncations;
        outcome.meta_sum += meta_loss(nullptr, straj).item();
        outcome.total_sum += total.item();
      }
    } catch (const DivergenceError&) {
      // Completed truncations' meta updates stand; the aborted one never
      // touched phi. The epoch is recorded and the run moves on.
      outcome.diverged = true;
    }

    // The policy must leave the epoch holding plain (untaped) parameters.
    student.set_meta_params(phi);

    if (outcome.diverged) {
      rec.diverged = true;
      ++result.divergence_events;
    }
    const double n_done = static_cast<double>(outcome.completed_truncations);
    rec.train_meta_loss = outcome.completed_truncations > 0 ? outcome.meta_sum / n_done : kNaN;
    rec.train_total_loss = outcome.completed_truncations > 0 ? outcome.total_sum / n_done : kNaN;

    if ((epoch + 1) % cfg.validation_interval == 0) {
      double val_sum = 0.0;
      for (int64_t v = 0; v < cfg.validation_problems; ++v) {
        std::shared_ptr<const Optimizee> vp =
            family(derive_seed(cfg.seed, "val_problem", static_cast<uint64_t>(v)));
        Rng vrng(derive_seed(cfg.seed, "val_rollout", static_cast<uint64_t>(v)));
        RolloutOptions ro;
        ro.steps = unroll_n;
        ro.warmup_steps = cfg.warmup_steps;
        ro.warmup_lr = cfg.warmup_lr;
        val_sum += rollout_meta_loss(*vp, student.as_policy(), ro, vrng);
      }
      rec.validated = true;
      rec.val_meta_loss = val_sum / static_cast<double>(cfg.validation_problems);
      if (rec.val_meta_loss < result.best_val_meta_loss) {
        result.best_val_meta_loss = rec.val_meta_loss;
        result.best_epoch = epoch;
        result.best_params = phi;  // tensors are copy-on-write; this is cheap
      }
      if (rec.val_meta_loss < best_val) {
        best_val = rec.val_meta_loss;
        stalled = 0;
      } else {
        ++stalled;
      }
      if (stalled >= cfg.patience && stage_idx + 1 < stages.size()) {
        ++stage_idx;
        epochs_in_stage = -1;  // incremented to 0 below
        stalled = 0;
        best_val = kInf;
      }
    }

    ++epochs_in_stage;
    if (cfg.stage_max_epochs > 0 && epochs_in_stage >= cfg.stage_max_epochs &&
        stage_idx + 1 < stages.size()) {
      ++stage_idx;
      epochs_in_stage = 0;
      stalled = 0;
      best_val = kInf;
    }
    result.log.push_back(std::move(rec));
  }

  student.set_meta_params(phi);
  result.meta_params = std::move(phi);
  return result;
}

ChoiceParams train_choice_policy(const std::vector<PoolKind>& pool,
                                 const std::vector<PoolHyper>& hps, const ProblemFactory& family,
                                 TrainConfig cfg, TrainResult* out_log) {
  if (pool.empty()) throw ConfigError("choice training: pool must not be empty");
  if (hps.size() != pool.size())
    throw ConfigError("choice training: " + std::to_string(pool.size()) + " members but " +
                      std::to_string(hps.size()) + " hyperparameter sets");
  cfg.alpha = 0.0;          // bare meta loss; nothing to distill from yet
  cfg.random_scaling = false;
  ChoiceParams init = ChoiceParams::init(derive_seed(cfg.seed, "choice_init"),
                                         static_cast<int64_t>(pool.size()));
  MetaChoice student(std::move(init), pool, hps);
  AmalgamationMode mode;  // no teachers; alpha is zero
  mode.kind = AmalgamationKind::Mean;
  TrainResult r = train_truncated(student, mode, family, cfg);
  ChoiceParams trained = ChoiceParams::unflatten(r.meta_params);
  if (out_log) *out_log = std::move(r);
  return trained;
}

}  // namespace amalgam

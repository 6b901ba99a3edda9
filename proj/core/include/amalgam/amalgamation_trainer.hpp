#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "amalgam/learned_optimizer.hpp"
#include "amalgam/optimizee.hpp"
#include "amalgam/optimizer_pool.hpp"
#include "amalgam/perturbation.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/tape.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

/// One rollout segment: parameter snapshots after each step, the training
/// loss each step's batch sees at the post-step parameters, and the same
/// batch's loss at the trajectory's starting parameters (a constant).
/// Teacher trajectories only need the parameter snapshots; their loss
/// fields may stay empty.
struct Trajectory {
  std::string policy_tag;  // who produced it ("student", "teacher-2", ...)
  std::vector<std::vector<Tensor>> params_at_step;
  std::vector<Tensor> losses_at_step;   // scalar tensors, taped for the student
  std::vector<double> initial_losses;   // loss of step i's batch at theta_0
};

/// Mean over steps of log(loss_i) - log(initial_loss_i): the mean log
/// improvement, invariant to uniform rescaling of the losses. Throws
/// DomainError on non-positive losses (the log is undefined there).
Tensor meta_loss(Tape* tape, const Trajectory& traj);

/// Mean over steps of log(||theta_student - theta_teacher||_2 + eps), the
/// norm taken over all parameter tensors jointly. Teacher snapshots are
/// constants: gradients flow only through the student trajectory.
Tensor distill_loss(Tape* tape, const Trajectory& student, const Trajectory& teacher,
                    double eps = 1e-12);

enum class AmalgamationKind { Mean, MinMax, OptimalChoice };

const char* amalgamation_kind_name(AmalgamationKind k);
AmalgamationKind amalgamation_kind_from_name(const std::string& name);

/// meta_loss(student) + alpha * distillation term, where the term is
///   Mean:          average of distill_loss over the teachers,
///   MinMax:        per-step max over teachers of the log-distance,
///                  averaged over steps (the worst teacher wins each step),
///   OptimalChoice: distill_loss against the single (choice-policy) teacher.
/// alpha = 0 skips the term entirely and allows an empty teacher list.
Tensor amalgamation_loss(Tape* tape, AmalgamationKind kind, const Trajectory& student,
                         const std::vector<Trajectory>& teachers, double alpha,
                         double eps = 1e-12);

/// Per-tensor multiplicative gradient scaling: the student sees s * g and
/// its update is divided by s, so rules that are homogeneous in the
/// gradient (plain SGD) are unaffected while magnitude-sensitive learned
/// rules must not overfit to gradient scale. Teachers never see it.
struct RandomScaling {
  std::vector<double> scales;  // one positive scalar per parameter tensor

  Tensor scale_grad(Tape* tape, size_t i, const Tensor& g) const;
  Tensor unscale_update(Tape* tape, size_t i, const Tensor& u) const;

  static RandomScaling identity(size_t tensors);
};

/// Log-uniform draw in [lo, hi] per tensor.
RandomScaling draw_random_scaling(const std::vector<Shape>& shapes, double lo, double hi,
                                  Rng& rng);

struct WarmupResult {
  std::vector<Tensor> params;
  bool diverged = false;
};

/// Plain SGD steps (params -= lr * grad) on freshly sampled batches; the
/// common starting procedure for training and evaluation runs. steps = 0
/// returns the parameters untouched.
WarmupResult warmup(const Optimizee& problem, std::vector<Tensor> params, int64_t steps,
                    double lr, Rng& rng);

struct TrainConfig {
  int64_t meta_epochs = 200;
  int64_t unroll_n = 100;      // used when curriculum_stages is empty
  int64_t truncation_t = 20;   // must divide every active unroll length
  double alpha = 1.0;          // distillation weight
  double meta_lr = 1e-3;       // Adam step size on the policy parameters
  double clip_norm = 10.0;     // global-norm clip on the meta gradient
  std::vector<int64_t> curriculum_stages;  // e.g. {100, 200, 500, 1000}
  int64_t validation_interval = 40;  // meta-epochs between validations
  int64_t patience = 3;        // stalled validations before a stage advance
  int64_t stage_max_epochs = 0;      // optional per-stage cap (0 = none)
  int64_t validation_problems = 1;   // held-out family seeds per validation
  int64_t warmup_steps = 100;
  double warmup_lr = 0.01;
  bool random_scaling = true;
  double scale_min = 0.36787944117144233;  // e^-1
  double scale_max = 2.718281828459045;    // e^1
  bool reset_teachers_to_student = false;  // restart teachers at the student's
                                           // parameters each truncation
  // Training-time robustness noise, applied per truncation to a forward
  // copy of the policy parameters (weight kinds) or to the student's
  // gradients (input noise). The trainer draws its randomness from `seed`'s
  // own perturbation stream, so enabling noise never shifts the batch
  // draws; teachers always stay clean.
  PerturbationConfig perturb;
  uint64_t seed = 0;
};

void validate_train_config(const TrainConfig& cfg);

/// A policy whose parameters are meta-learned: exposes them as a flat
/// tensor list (rebindable to a tape as leaves) plus the Policy itself.
class MetaPolicy {
 public:
  virtual ~MetaPolicy() = default;
  virtual std::vector<Tensor> meta_params() const = 0;
  virtual void set_meta_params(const std::vector<Tensor>& ts) = 0;
  virtual Policy& as_policy() = 0;

  /// Snapshot / restore the per-rollout state (moment accumulators, LSTM
  /// states). Restoring rewinds to the last snapshot so a rollout segment
  /// can be re-run, which the adversarial weight attack needs.
  virtual void save_rollout_state() = 0;
  virtual void restore_rollout_state() = 0;
};

class MetaRnnProp : public MetaPolicy {
 public:
  explicit MetaRnnProp(RnnPropParams p, RnnPropHyper hp = {}) : policy_(std::move(p), hp) {}
  std::vector<Tensor> meta_params() const override { return policy_.params().flatten(); }
  void set_meta_params(const std::vector<Tensor>& ts) override {
    policy_.set_params(RnnPropParams::unflatten(ts));
  }
  Policy& as_policy() override { return policy_; }
  RnnPropPolicy& inner() { return policy_; }
  void save_rollout_state() override { saved_states_ = policy_.states(); }
  void restore_rollout_state() override { policy_.states() = saved_states_; }

 private:
  RnnPropPolicy policy_;
  std::vector<CoordState> saved_states_;
};

class MetaChoice : public MetaPolicy {
 public:
  MetaChoice(ChoiceParams p, std::vector<PoolKind> members, std::vector<PoolHyper> member_hps,
             RnnPropHyper hp = {})
      : policy_(std::move(p), std::move(members), std::move(member_hps), hp) {}
  std::vector<Tensor> meta_params() const override { return policy_.params().flatten(); }
  void set_meta_params(const std::vector<Tensor>& ts) override {
    policy_.set_params(ChoiceParams::unflatten(ts));
  }
  Policy& as_policy() override { return policy_; }
  ChoicePolicy& inner() { return policy_; }
  void save_rollout_state() override { saved_ = policy_.rollout_state(); }
  void restore_rollout_state() override { policy_.set_rollout_state(saved_); }

 private:
  ChoicePolicy policy_;
  ChoicePolicy::RolloutState saved_;
};

/// What the student is distilled from: pool members (mean / min-max) or a
/// single pre-trained choice policy (optimal choice).
struct AmalgamationMode {
  AmalgamationKind kind = AmalgamationKind::Mean;
  std::vector<std::unique_ptr<Policy>> teachers;
};

AmalgamationMode make_pool_mode(AmalgamationKind kind, const std::vector<PoolKind>& members,
                                const std::vector<PoolHyper>& hps);
AmalgamationMode make_choice_mode(ChoiceParams params, std::vector<PoolKind> members,
                                  std::vector<PoolHyper> member_hps);

struct MetaEpochRecord {
  int64_t epoch = 0;
  int64_t stage = 0;                // curriculum stage index trained this epoch
  double train_meta_loss = 0.0;     // mean per-truncation meta loss (NaN if none finished)
  double train_total_loss = 0.0;    // mean per-truncation amalgamation loss
  bool diverged = false;
  bool validated = false;
  double val_meta_loss = 0.0;
};

struct TrainResult {
  std::vector<Tensor> meta_params;
  std::vector<MetaEpochRecord> log;
  int64_t meta_updates = 0;
  int64_t divergence_events = 0;
  // Policy parameters at the best validation seen over the whole run
  // (empty when no validation ever produced a finite meta loss); the
  // snapshot that deserves to be checkpointed.
  std::vector<Tensor> best_params;
  double best_val_meta_loss = std::numeric_limits<double>::infinity();
  int64_t best_epoch = -1;
};

/// Source of training/validation problems: maps a seed to a problem
/// instance. A family samples fresh instances; single-problem training
/// wraps one instance (see single_problem_family).
using ProblemFactory = std::function<std::shared_ptr<const Optimizee>(uint64_t seed)>;

/// Wraps one problem instance (not owned) as a constant family.
ProblemFactory single_problem_family(const Optimizee& problem);

/// Truncated backpropagation trainer. Per meta-epoch: draw a problem and
/// starting parameters, warm up, copy the start to the student and every
/// teacher, then roll unroll_n steps in truncation_t-step segments. Each
/// segment runs on a fresh tape (numeric state carries over, gradients do
/// not), ends with the amalgamation loss, and applies one clipped Adam
/// step to the policy parameters. Non-finite values abort the meta-epoch
/// and count as a divergence event; the run continues.
///
/// Perturbations (cfg.perturb) re-sample every segment: the weight kinds
/// evaluate the segment at a perturbed forward copy of the policy
/// parameters — the meta gradient is taken there, but the Adam step still
/// lands on the canonical parameters — while input noise lands on the
/// student's gradients only. Teachers always run clean.
TrainResult train_truncated(MetaPolicy& student, const AmalgamationMode& mode,
                            const ProblemFactory& family, const TrainConfig& cfg);

/// Pre-trains the soft-choice policy on the bare meta loss (no
/// distillation term, no random scaling), returning its parameters for
/// use as the optimal-choice teacher.
ChoiceParams train_choice_policy(const std::vector<PoolKind>& pool,
                                 const std::vector<PoolHyper>& hps, const ProblemFactory& family,
                                 TrainConfig cfg, TrainResult* out_log = nullptr);

/// Numeric (untaped) rollout scored by the meta loss; +infinity when the
/// rollout diverges. Used for validation and for brute-force baselines.
double rollout_meta_loss(const Optimizee& problem, Policy& policy, const RolloutOptions& opt,
                         Rng& rng);

}  // namespace amalgam

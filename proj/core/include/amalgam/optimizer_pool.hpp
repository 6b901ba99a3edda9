#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "amalgam/optimizee.hpp"
#include "amalgam/tape.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

/// The six analytical update rules the amalgamation pool draws from.
enum class PoolKind { Sgd, Momentum, RmsProp, Adam, AddSign, PowerSign };

const char* pool_kind_name(PoolKind k);
PoolKind pool_kind_from_name(const std::string& name);
const std::vector<PoolKind>& all_pool_kinds();

struct PoolHyper {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-10;  // added after the square root in every denominator
};

/// Exponential moving averages carried per parameter tensor.
struct PoolState {
  Tensor m;  // first moment
  Tensor v;  // second moment
};

PoolState init_pool_state(const Shape& shape);

/// tanh(m_hat / (sqrt(v_hat) + eps)) * tanh(g / (sqrt(v_hat) + eps)):
/// a smooth measure of agreement between the averaged and current gradient,
/// shared by the additive- and multiplicative-sign rules.
Tensor soft_sign_agreement(Tape* tape, const Tensor& m_hat, const Tensor& v_hat, const Tensor& g,
                           double eps);

struct PoolUpdateResult {
  Tensor update;    // applied as params' = params - update
  PoolState state;  // moments advanced by this step
};

/// One step of an analytical rule. Moments use decay-corrected estimates
/// (m / (1 - beta1^step), v / (1 - beta2^step), step counted from 1). All
/// math runs through tape primitives, so when a tape is supplied the update
/// is differentiable with respect to the incoming gradient.
PoolUpdateResult pool_update(Tape* tape, PoolKind kind, const PoolState& state, const Tensor& grad,
                             int64_t step, const PoolHyper& hp);

/// Anything that can turn per-tensor gradients into per-tensor updates,
/// one optimization step at a time.
class Policy {
 public:
  virtual ~Policy() = default;

  /// Fresh internal state for a new rollout over tensors of these shapes.
  virtual void reset(const std::vector<Shape>& shapes) = 0;

  /// Update for parameter tensor `i` given its gradient; `step` is 1-based.
  virtual Tensor update(Tape* tape, size_t i, const Tensor& grad, int64_t step) = 0;
};

class PoolPolicy : public Policy {
 public:
  PoolPolicy(PoolKind kind, PoolHyper hp) : kind_(kind), hp_(hp) {}

  void reset(const std::vector<Shape>& shapes) override;
  Tensor update(Tape* tape, size_t i, const Tensor& grad, int64_t step) override;

  PoolKind kind() const { return kind_; }
  const PoolHyper& hyper() const { return hp_; }

 private:
  PoolKind kind_;
  PoolHyper hp_;
  std::vector<PoolState> states_;
};

struct RolloutOptions {
  int64_t steps = 500;
  int64_t warmup_steps = 100;   // plain gradient steps before the policy runs
  double warmup_lr = 0.01;
  int64_t eval_interval = 50;   // validation cadence; 0 = final step only
};

struct EvalPoint {
  int64_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool diverged = false;
};

struct RolloutResult {
  std::vector<EvalPoint> evals;
  std::vector<double> step_train_loss;  // per policy step, up to divergence
  bool diverged = false;
  int64_t diverged_at = -1;  // first step whose loss/params went non-finite
  std::vector<Tensor> final_params;
};

/// Runs warmup followed by `steps` policy updates, recording training loss
/// each step and validation loss on the eval cadence. A non-finite loss,
/// gradient, or parameter stops the rollout and marks it diverged.
RolloutResult run_policy(const Optimizee& problem, Policy& policy, const RolloutOptions& opt,
                         Rng& rng);

struct GridSearchResult {
  double best_lr = 0.0;
  double best_score = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, double>> tried;  // (lr, mean final val loss)
};

/// Exhaustive learning-rate search for one pool member. Every learning rate
/// sees the same problem draws (seeds are derived per replicate, not per
/// grid point), so the comparison is paired. Diverged replicates score
/// +infinity.
GridSearchResult grid_search_lr(PoolKind kind, const Optimizee& problem,
                                const std::vector<double>& lr_grid, const RolloutOptions& opt,
                                int64_t n_seeds, uint64_t seed);

}  // namespace amalgam

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "amalgam/optimizer_pool.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/tape.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

/// One LSTM cell's weights. Gate order in the packed (in, 4*units) /
/// (units, 4*units) kernels and the (4*units) bias is
/// [input, forget, candidate, output].
struct LstmCellParams {
  Tensor wx;  // (in_dim, 4 * units)
  Tensor wh;  // (units, 4 * units)
  Tensor b;   // (4 * units)

  int64_t units() const { return wh.shape()[0]; }
};

struct LstmState {
  Tensor h;  // (rows, units)
  Tensor c;  // (rows, units)
};

LstmState lstm_zero_state(int64_t rows, int64_t units);

/// Standard LSTM step: sigmoid gates, tanh activations, applied row-wise
/// (each row is an independent sequence element sharing the weights).
LstmState lstm_cell(Tape* tape, const LstmCellParams& p, const Tensor& x, const LstmState& s);

/// Kernels uniform in +-1/sqrt(fan_in); forget-gate bias `forget_bias`,
/// all other biases zero.
LstmCellParams init_lstm(Rng& rng, int64_t in_dim, int64_t units, double forget_bias = 1.0);

/// Recurrent-optimizer hyperparameters for the gradient-feature moments.
struct RnnPropHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-10;  // added after the square root
};

constexpr int64_t kLstmUnits = 20;

/// The learned coordinate-wise optimizer: a 2-layer LSTM (20 units per
/// layer) over normalized gradient features, closed by a fully connected
/// layer with tanh activation producing one scalar update per coordinate.
struct RnnPropParams {
  LstmCellParams l1;  // input width 2 (the two gradient features)
  LstmCellParams l2;  // input width 20
  Tensor out_w;       // (20, 1)
  Tensor out_b;       // (1)

  /// Fixed flattening order: l1.wx, l1.wh, l1.b, l2.wx, l2.wh, l2.b,
  /// out_w, out_b. Used for meta-gradients and checkpointing.
  std::vector<Tensor> flatten() const;
  static RnnPropParams unflatten(const std::vector<Tensor>& ts);
  static RnnPropParams init(uint64_t seed);
};

int64_t rnnprop_param_count();

/// Per-parameter-tensor recurrent state: moment accumulators feeding the
/// features plus the two LSTM layers' (h, c), one row per coordinate.
struct CoordState {
  Tensor m;      // (n, 1) first moment
  Tensor v;      // (n, 1) second moment
  LstmState s1;  // (n, units)
  LstmState s2;  // (n, units)
  int64_t step = 0;  // feature steps taken (drives bias correction)

  static CoordState zero(int64_t n, int64_t units = kLstmUnits);

  /// Cuts any tape bindings so the state crosses a truncation boundary as
  /// a constant (numeric values carry over; gradients do not).
  void detach();
};

struct FeaturePair {
  Tensor adam_dir;     // m_hat / (sqrt(v_hat) + eps)
  Tensor rmsprop_dir;  // g / (sqrt(v_hat) + eps)
};

/// Advances the moment EMAs by one gradient observation (bias-corrected,
/// step counted from 1) and returns the two normalized directions.
/// `grad_col` must be a column (n, 1); the state advances in place.
FeaturePair rnnprop_features(Tape* tape, const Tensor& grad_col, CoordState& state,
                             const RnnPropHyper& hp);

/// One learned-optimizer step: features -> LSTM x2 -> tanh(FC). Returns the
/// update (applied as params' = params - update) with the gradient's shape.
Tensor rnnprop_step(Tape* tape, const RnnPropParams& p, const Tensor& grad, CoordState& state,
                    const RnnPropHyper& hp);

/// The soft-choice network: same 2-layer LSTM trunk, fed the pool members'
/// candidate updates plus a bounded time encoding and the parameter
/// tensor's rank (one-hot), closed by a softmax head with one weight per
/// pool member.
struct ChoiceParams {
  LstmCellParams l1;  // input width pool_size + 6
  LstmCellParams l2;  // input width 20
  Tensor head_w;      // (20, pool_size)
  Tensor head_b;      // (pool_size)

  int64_t pool_size() const { return head_b.size(); }

  std::vector<Tensor> flatten() const;
  static ChoiceParams unflatten(const std::vector<Tensor>& ts);
  static ChoiceParams init(uint64_t seed, int64_t pool_size);
};

int64_t choice_param_count(int64_t pool_size);

struct ChoiceResult {
  Tensor weights;  // (n, pool_size), rows on the probability simplex
  Tensor update;   // convex combination of the pool updates, input shape
};

/// Soft choice over candidate updates. `step` is the 1-based optimization
/// step (encoded as tanh(step/100)); `ndim` is the parameter tensor's rank,
/// one-hot over [0, 4]. Only the LSTM state inside `state` is used.
ChoiceResult choice_forward(Tape* tape, const ChoiceParams& p,
                            const std::vector<Tensor>& pool_updates, int64_t step, int64_t ndim,
                            CoordState& state);

/// Policy adapter: run the learned optimizer inside rollouts and
/// meta-training. Parameters are swappable so a meta-trainer can rebind
/// them as tape leaves each truncation.
class RnnPropPolicy : public Policy {
 public:
  explicit RnnPropPolicy(RnnPropParams params, RnnPropHyper hp = {});

  void reset(const std::vector<Shape>& shapes) override;
  Tensor update(Tape* tape, size_t i, const Tensor& grad, int64_t step) override;

  const RnnPropParams& params() const { return params_; }
  void set_params(RnnPropParams p) { params_ = std::move(p); }
  std::vector<CoordState>& states() { return states_; }

 private:
  RnnPropParams params_;
  RnnPropHyper hp_;
  std::vector<CoordState> states_;
};

/// Policy adapter for the choice network: every step, each pool member
/// proposes an update from its own moment state and the choice net blends
/// the proposals.
class ChoicePolicy : public Policy {
 public:
  /// `member_hps` pairs with `members` (one tuned hyper set per member);
  /// the single-hyper overload applies the same setting to every member.
  ChoicePolicy(ChoiceParams params, std::vector<PoolKind> members,
               std::vector<PoolHyper> member_hps, RnnPropHyper hp = {});
  ChoicePolicy(ChoiceParams params, std::vector<PoolKind> members, PoolHyper member_hp = {},
               RnnPropHyper hp = {});

  void reset(const std::vector<Shape>& shapes) override;
  Tensor update(Tape* tape, size_t i, const Tensor& grad, int64_t step) override;

  const ChoiceParams& params() const { return params_; }
  void set_params(ChoiceParams p) { params_ = std::move(p); }
  const std::vector<PoolKind>& members() const { return members_; }
  std::vector<CoordState>& states() { return states_; }

  /// Mean soft weight per member, averaged over every coordinate and step
  /// since the last reset. Diagnostic only (never differentiated).
  std::vector<double> mean_member_weights() const;

  /// Everything update() advances between resets, as one copyable value so
  /// a caller can re-run a rollout segment from a snapshot.
  struct RolloutState {
    std::vector<CoordState> states;
    std::vector<std::vector<PoolState>> member_states;
    std::vector<double> weight_sums;
    int64_t weight_rows = 0;
  };
  RolloutState rollout_state() const {
    return {states_, member_states_, weight_sums_, weight_rows_};
  }
  void set_rollout_state(RolloutState s) {
    states_ = std::move(s.states);
    member_states_ = std::move(s.member_states);
    weight_sums_ = std::move(s.weight_sums);
    weight_rows_ = s.weight_rows;
  }

 private:
  ChoiceParams params_;
  std::vector<PoolKind> members_;
  std::vector<PoolHyper> member_hps_;
  RnnPropHyper hp_;
  std::vector<CoordState> states_;
  std::vector<std::vector<PoolState>> member_states_;  // [member][tensor]
  std::vector<Shape> shapes_;
  std::vector<double> weight_sums_;
  int64_t weight_rows_ = 0;
};

}  // namespace amalgam

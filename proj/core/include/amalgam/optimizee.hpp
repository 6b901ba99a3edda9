#pragma once

#include <vector>

#include "amalgam/rng.hpp"
#include "amalgam/tape.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

struct Batch {
  Tensor x;
  Tensor y;                     // one-hot targets for classification losses
  std::vector<int64_t> labels;  // raw class ids when applicable
};

struct LossGrads {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

/// A trainable problem: a parameter list, a batched training loss, and a
/// held-out validation loss. Parameters are plain tensors so that any update
/// policy (analytical or learned) can drive them.
class Optimizee {
 public:
  virtual ~Optimizee() = default;

  virtual std::vector<Shape> param_shapes() const = 0;
  virtual std::vector<Tensor> init_params(Rng& rng) const = 0;
  virtual Batch sample_batch(Rng& rng) const = 0;

  /// Training loss on one batch as a graph over (possibly taped) parameters.
  virtual Tensor loss(Tape* tape, const std::vector<Tensor>& params, const Batch& batch) const = 0;

  /// Mean loss over the validation split, evaluated without a tape.
  virtual double validation_loss(const std::vector<Tensor>& params) const = 0;

  /// Model outputs (e.g. class logits) for raw inputs. Problems without a
  /// prediction head leave the default, which signals.
  virtual Tensor forward(Tape* tape, const std::vector<Tensor>& params, const Tensor& x) const;

  /// Batch loss and parameter gradients, detached from any caller tape. The
  /// default runs a private tape over `loss` and hands back its sweep.
  virtual LossGrads gradients(const std::vector<Tensor>& params, const Batch& batch) const;

  /// Problems whose gradient is itself a closed-form primitive graph can
  /// expose it here; unrolled rollouts then stay differentiable end to end
  /// instead of treating per-step gradients as constants.
  virtual bool has_taped_grad() const { return false; }
  virtual std::vector<Tensor> taped_grad(Tape* tape, const std::vector<Tensor>& params,
                                         const Batch& batch) const;
};

}  // namespace amalgam

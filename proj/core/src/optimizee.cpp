#include "amalgam/optimizee.hpp"

#include "amalgam/errors.hpp"

namespace amalgam {

LossGrads Optimizee::gradients(const std::vector<Tensor>& params, const Batch& batch) const {
  Tape tape;
  std::vector<Tensor> leafed;
  leafed.reserve(params.size());
  for (const Tensor& p : params) leafed.push_back(tape.leaf(p));
  Tensor l = loss(&tape, leafed, batch);
  GradMap gm = backward(tape, l);
  LossGrads out;
  out.loss = l.item();
  out.grads.reserve(params.size());
  for (const Tensor& p : leafed) out.grads.push_back(gm.grad(p).detached());
  return out;
}

std::vector<Tensor> Optimizee::taped_grad(Tape*, const std::vector<Tensor>&, const Batch&) const {
  throw Error("taped_grad: this problem does not expose a closed-form gradient graph");
}

Tensor Optimizee::forward(Tape*, const std::vector<Tensor>&, const Tensor&) const {
  throw Error("forward: this problem has no prediction head");
}

}  // namespace amalgam

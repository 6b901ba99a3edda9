#include "amalgam/optimizer_pool.hpp"

#include <cmath>

#include "amalgam/errors.hpp"

namespace amalgam {

const char* pool_kind_name(PoolKind k) {
  switch (k) {
    case PoolKind::Sgd: return "sgd";
    case PoolKind::Momentum: return "momentum";
    case PoolKind::RmsProp: return "rmsprop";
    case PoolKind::Adam: return "adam";
    case PoolKind::AddSign: return "addsign";
    case PoolKind::PowerSign: return "powersign";
  }
  return "?";
}

PoolKind pool_kind_from_name(const std::string& name) {
  for (PoolKind k : all_pool_kinds())
    if (name == pool_kind_name(k)) return k;
  throw ConfigError("unknown optimizer '" + name +
                    "' (expected sgd, momentum, rmsprop, adam, addsign, or powersign)");
}

const std::vector<PoolKind>& all_pool_kinds() {
  static const std::vector<PoolKind> kinds = {PoolKind::Sgd,  PoolKind::Momentum,
                                              PoolKind::RmsProp, PoolKind::Adam,
                                              PoolKind::AddSign, PoolKind::PowerSign};
  return kinds;
}

PoolState init_pool_state(const Shape& shape) {
  return PoolState{Tensor::zeros(shape), Tensor::zeros(shape)};
}

Tensor soft_sign_agreement(Tape* tape, const Tensor& m_hat, const Tensor& v_hat, const Tensor& g,
                           double eps) {
  Tensor d = add_scalar(tape, sqrt(tape, v_hat), eps);
  return mul(tape, tanh(tape, div(tape, m_hat, d)), tanh(tape, div(tape, g, d)));
}

PoolUpdateResult pool_update(Tape* tape, PoolKind kind, const PoolState& state, const Tensor& grad,
                             int64_t step, const PoolHyper& hp) {
  if (step < 1) throw Error("pool_update: step counts from 1");
  PoolUpdateResult r;
  r.state = state;
  const double omb1 = 1.0 - hp.beta1;
  const double omb2 = 1.0 - hp.beta2;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));

  auto advance_m = [&]() {
    r.state.m = add(tape, mul_scalar(tape, state.m, hp.beta1), mul_scalar(tape, grad, omb1));
    return div(tape, r.state.m, Tensor::scalar(c1));
  };
  auto advance_v = [&]() {
    r.state.v =
        add(tape, mul_scalar(tape, state.v, hp.beta2), mul_scalar(tape, square(tape, grad), omb2));
    return div(tape, r.state.v, Tensor::scalar(c2));
  };
  auto eps_denom = [&](const Tensor& v_hat) {
    return add_scalar(tape, sqrt(tape, v_hat), hp.eps);
  };

  switch (kind) {
    case PoolKind::Sgd:
      r.update = mul_scalar(tape, grad, hp.lr);
      break;
    case PoolKind::Momentum:
      r.update = mul_scalar(tape, advance_m(), hp.lr);
      break;
    case PoolKind::RmsProp:
      r.update = mul_scalar(tape, div(tape, grad, eps_denom(advance_v())), hp.lr);
      break;
    case PoolKind::Adam: {
      Tensor m_hat = advance_m();
      Tensor v_hat = advance_v();
      r.update = mul_scalar(tape, div(tape, m_hat, eps_denom(v_hat)), hp.lr);
      break;
    }
    case PoolKind::AddSign: {
      Tensor m_hat = advance_m();
      Tensor v_hat = advance_v();
      Tensor s = soft_sign_agreement(tape, m_hat, v_hat, grad, hp.eps);
      r.update = mul_scalar(tape, mul(tape, grad, add_scalar(tape, s, 1.0)), hp.lr);
      break;
    }
    case PoolKind::PowerSign: {
      Tensor m_hat = advance_m();
      Tensor v_hat = advance_v();
      Tensor s = soft_sign_agreement(tape, m_hat, v_hat, grad, hp.eps);
      r.update = mul_scalar(tape, mul(tape, grad, exp(tape, s)), hp.lr);
      break;
    }
  }
  return r;
}

void PoolPolicy::reset(const std::vector<Shape>& shapes) {
  states_.clear();
  states_.reserve(shapes.size());
  for (const Shape& s : shapes) states_.push_back(init_pool_state(s));
}

Tensor PoolPolicy::update(Tape* tape, size_t i, const Tensor& grad, int64_t step) {
  if (i >= states_.size()) throw Error("PoolPolicy: tensor index out of range; call reset first");
  PoolUpdateResult r = pool_update(tape, kind_, states_[i], grad, step, hp_);
  states_[i] = r.state;
  return r.update;
}

RolloutResult run_policy(const Optimizee& problem, Policy& policy, const RolloutOptions& opt,
                         Rng& rng) {
  std::vector<Tensor> params = problem.init_params(rng);
  for (int64_t w = 0; w < opt.warmup_steps; ++w) {
    Batch b = problem.sample_batch(rng);
    LossGrads lg = problem.gradients(params, b);
    for (size_t i = 0; i < params.size(); ++i)
      params[i] = sub(nullptr, params[i], mul_scalar(nullptr, lg.grads[i], opt.warmup_lr));
  }
  policy.reset(problem.param_shapes());

  RolloutResult res;
  const double inf = std::numeric_limits<double>::infinity();
  for (int64_t step = 1; step <= opt.steps; ++step) {
    Batch b = problem.sample_batch(rng);
    LossGrads lg = problem.gradients(params, b);
    bool bad = !std::isfinite(lg.loss);
    for (const Tensor& g : lg.grads)
      if (!g.all_finite()) bad = true;
    if (!bad) {
      for (size_t i = 0; i < params.size(); ++i)
        params[i] = sub(nullptr, params[i], policy.update(nullptr, i, lg.grads[i], step));
      for (const Tensor& p : params)
        if (!p.all_finite()) bad = true;
    }
    if (bad) {
      res.diverged = true;
      res.diverged_at = step;
      res.evals.push_back(EvalPoint{step, inf, inf, true});
      break;
    }
    res.step_train_loss.push_back(lg.loss);
    bool due = (opt.eval_interval > 0 && step % opt.eval_interval == 0) || step == opt.steps;
    if (due && (res.evals.empty() || res.evals.back().step != step))
      res.evals.push_back(EvalPoint{step, lg.loss, problem.validation_loss(params), false});
  }
  res.final_params = params;
  return res;
}

GridSearchResult grid_search_lr(PoolKind kind, const Optimizee& problem,
                                const std::vector<double>& lr_grid, const RolloutOptions& opt,
                                int64_t n_seeds, uint64_t seed) {
  GridSearchResult out;
  for (size_t li = 0; li < lr_grid.size(); ++li) {
    double total = 0.0;
    for (int64_t s = 0; s < n_seeds; ++s) {
      // Same replicate seed across every learning rate: paired comparison.
      Rng rng(derive_seed(seed, "grid_replicate", static_cast<uint64_t>(s)));
      PoolPolicy policy(kind, PoolHyper{lr_grid[li]});
      RolloutResult r = run_policy(problem, policy, opt, rng);
      total += (r.diverged || r.evals.empty()) ? std::numeric_limits<double>::infinity()
                                               : r.evals.back().val_loss;
    }
    double score = total / static_cast<double>(n_seeds);
    out.tried.emplace_back(lr_grid[li], score);
    if (score < out.best_score) {
      out.best_score = score;
      out.best_lr = lr_grid[li];
    }
  }
  if (!std::isfinite(out.best_score) && !lr_grid.empty()) out.best_lr = lr_grid.front();
  return out;
}

}  // namespace amalgam

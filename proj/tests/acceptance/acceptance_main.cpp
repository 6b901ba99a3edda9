// Acceptance suite: nine release gates for the amalgamation toolkit, each
// printed as one [PASS]/[FAIL] line with the measured numbers. The binary
// exits nonzero when any gate fails. Gates with a runtime budget time
// themselves and fail when they blow it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "amalgam/amalgamation_trainer.hpp"
#include "amalgam/checkpoint.hpp"
#include "amalgam/commands.hpp"
#include "amalgam/errors.hpp"
#include "amalgam/experiment.hpp"
#include "amalgam/file_io.hpp"
#include "amalgam/learned_optimizer.hpp"
#include "amalgam/optimizee_zoo.hpp"
#include "amalgam/optimizer_pool.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/stability_eval.hpp"
#include "amalgam/tape.hpp"
#include "amalgam/tensor.hpp"

using namespace amalgam;
namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

Tensor rand_normal(Rng& rng, Shape shape, double scale = 1.0) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return Tensor(std::move(shape), rng.normal_vec(static_cast<size_t>(n), 0.0, scale));
}

Tensor rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return Tensor(std::move(shape), rng.uniform_vec(static_cast<size_t>(n), lo, hi));
}

/// Values bounded away from zero so kinked or divided-by ops stay smooth
/// around the finite-difference probe.
Tensor rand_away_from_zero(Rng& rng, Shape shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) {
    const double mag = rng.uniform(0.4, 1.6);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor(std::move(shape), std::move(v));
}

/// Distinct, well-separated values so max-pooling picks a stable winner
/// under the finite-difference probe.
Tensor distinct_grid(Shape shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    v[static_cast<size_t>(i)] = 0.173 * static_cast<double>((i * 37) % n) - 1.0;
  return Tensor(std::move(shape), std::move(v));
}

using Builder = std::function<Tensor(Tape*, const std::vector<Tensor>&)>;

/// Scalarizes a tensor-valued op with a fixed weight so every output
/// coordinate gets a distinct upstream gradient.
Builder weighted(const std::function<Tensor(Tape*, const std::vector<Tensor>&)>& op,
                 const Tensor& w) {
  return [op, w](Tape* t, const std::vector<Tensor>& x) { return sum(t, mul(t, op(t, x), w)); };
}

double final_train_loss(const RolloutResult& rr, int64_t tail) {
  if (rr.diverged) return kInf;
  const int64_t n = static_cast<int64_t>(rr.step_train_loss.size());
  const int64_t take = std::min(tail, n);
  if (take <= 0) return kInf;
  double s = 0.0;
  for (int64_t i = n - take; i < n; ++i) s += rr.step_train_loss[static_cast<size_t>(i)];
  return s / static_cast<double>(take);
}

double sample_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// The desk problem family shared by gates 4 and 6: a synthetic
/// 3-class MLP with 227 parameters (inside the 200–2000 band).
ProblemFactory desk_mlp_family() {
  return [](uint64_t seed) -> std::shared_ptr<const Optimizee> {
    auto src = synth_classification(160, 10, 3, 2.0, derive_seed(seed, "data"), 16);
    return make_mlp(16, 10, 3, derive_seed(seed, "init"), std::move(src));
  };
}

std::vector<PoolHyper> tune_small_pool(const ProblemFactory& family, uint64_t seed,
                                       const std::vector<PoolKind>& members) {
  RolloutOptions opt;
  opt.steps = 200;
  opt.warmup_steps = 50;
  opt.warmup_lr = 0.01;
  opt.eval_interval = 0;
  const std::vector<double> lrs{1e-3, 3e-3, 1e-2, 3e-2, 1e-1};
  std::vector<PoolHyper> hps(members.size());
  for (size_t i = 0; i < members.size(); ++i) {
    auto problem = family(derive_seed(seed, "grid_problem"));
    GridSearchResult g = grid_search_lr(members[i], *problem, lrs, opt, 2,
                                        derive_seed(seed, "grid_search", i));
    hps[i].lr = g.best_lr;
  }
  return hps;
}

// ---------------------------------------------------------------------------
// Gate 1: gradient fidelity — every primitive plus the meta loss through a
// 10-step learned-policy unroll on a 2-parameter quadratic.
// ---------------------------------------------------------------------------

Outcome gate_gradient_fidelity() {
  Rng rng(20250801);
  const double tol = 1e-4;

  const Tensor w32 = rand_normal(rng, {3, 2});
  const Tensor w24 = rand_normal(rng, {2, 4});
  const Tensor w_conv = rand_normal(rng, {2, 3, 4, 4});
  const Tensor w_pool = rand_normal(rng, {2, 3, 2, 3});
  const Tensor w25 = rand_normal(rng, {2, 5});
  const Tensor w13 = rand_normal(rng, {1, 3});
  const Tensor w34 = rand_normal(rng, {3, 4});
  const Tensor w33 = rand_normal(rng, {3, 3});
  const Tensor w23 = rand_normal(rng, {2, 3});
  const Tensor labels({3, 4}, {1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});

  struct OpCase {
    std::string name;
    Builder f;
    std::vector<Tensor> inputs;
  };
  auto bin = [](Tensor (*op)(Tape*, const Tensor&, const Tensor&)) {
    return [op](Tape* t, const std::vector<Tensor>& x) { return op(t, x[0], x[1]); };
  };
  auto una = [](Tensor (*op)(Tape*, const Tensor&)) {
    return [op](Tape* t, const std::vector<Tensor>& x) { return op(t, x[0]); };
  };

  std::vector<OpCase> cases;
  cases.push_back({"add", weighted(bin(&add), w32), {rand_normal(rng, {3, 2}), rand_normal(rng, {3, 2})}});
  cases.push_back({"sub", weighted(bin(&sub), w32), {rand_normal(rng, {3, 2}), rand_normal(rng, {3, 2})}});
  cases.push_back({"mul", weighted(bin(&mul), w32), {rand_normal(rng, {3, 2}), rand_normal(rng, {3, 2})}});
  cases.push_back({"div", weighted(bin(&div), w32),
                   {rand_normal(rng, {3, 2}), rand_away_from_zero(rng, {3, 2})}});
  cases.push_back({"add broadcast", weighted(bin(&add), w32),
                   {rand_normal(rng, {3, 2}), rand_normal(rng, Shape{})}});
  cases.push_back({"mul broadcast", weighted(bin(&mul), w32),
                   {rand_normal(rng, Shape{}), rand_normal(rng, {3, 2})}});
  cases.push_back({"neg", weighted(una(&neg), w32), {rand_normal(rng, {3, 2})}});
  cases.push_back({"matmul", weighted(bin(&matmul), w24),
                   {rand_normal(rng, {2, 3}), rand_normal(rng, {3, 4})}});
  cases.push_back({"conv2d", weighted(bin(&conv2d), w_conv),
                   {rand_normal(rng, {2, 2, 5, 6}), rand_normal(rng, {3, 2, 2, 3})}});
  cases.push_back({"maxpool2x2", weighted(una(&maxpool2x2), w_pool), {distinct_grid({2, 3, 4, 6})}});
  cases.push_back({"tanh", weighted(una(&tanh), w32), {rand_normal(rng, {3, 2})}});
  cases.push_back({"sigmoid", weighted(una(&sigmoid), w32), {rand_normal(rng, {3, 2})}});
  cases.push_back({"relu", weighted(una(&relu), w32), {rand_away_from_zero(rng, {3, 2})}});
  cases.push_back({"exp", weighted(una(&exp), w32), {rand_normal(rng, {3, 2}, 0.5)}});
  cases.push_back({"log", weighted(una(&log), w32), {rand_uniform(rng, {3, 2}, 0.5, 3.0)}});
  cases.push_back({"sqrt", weighted(una(&sqrt), w32), {rand_uniform(rng, {3, 2}, 0.5, 3.0)}});
  cases.push_back({"square", weighted(una(&square), w32), {rand_normal(rng, {3, 2})}});
  cases.push_back({"sum", una(&sum), {rand_normal(rng, {6})}});
  cases.push_back({"mean", una(&mean), {rand_normal(rng, {2, 3})}});
  cases.push_back({"l2_norm",
                   [](Tape* t, const std::vector<Tensor>& x) {
                     return mul(t, l2_norm(t, x[0]), Tensor::scalar(1.7));
                   },
                   {rand_away_from_zero(rng, {7})}});
  cases.push_back({"concat axis1",
                   weighted([](Tape* t, const std::vector<Tensor>& x) {
                     return concat(t, {x[0], x[1], x[2]}, 1);
                   }, w25),
                   {rand_normal(rng, {2, 2}), rand_normal(rng, {2, 2}), rand_normal(rng, {2, 1})}});
  cases.push_back({"concat axis0",
                   weighted([](Tape* t, const std::vector<Tensor>& x) {
                     return concat(t, {x[0], x[1]}, 0);
                   }, w32),
                   {rand_normal(rng, {1, 2}), rand_normal(rng, {2, 2})}});
  cases.push_back({"slice",
                   weighted([](Tape* t, const std::vector<Tensor>& x) {
                     return slice(t, x[0], 1, 1, 3);
                   }, w13),
                   {rand_normal(rng, {1, 5})}});
  cases.push_back({"softmax_cross_entropy",
                   [labels](Tape* t, const std::vector<Tensor>& x) {
                     return softmax_cross_entropy(t, x[0], labels);
                   },
                   {rand_normal(rng, {3, 4})}});
  cases.push_back({"reshape",
                   weighted([](Tape* t, const std::vector<Tensor>& x) {
                     return reshape(t, x[0], {3, 4});
                   }, w34),
                   {rand_normal(rng, {2, 6})}});
  cases.push_back({"tile_rows",
                   weighted([](Tape* t, const std::vector<Tensor>& x) {
                     return tile_rows(t, x[0], 3);
                   }, w33),
                   {rand_normal(rng, {3})}});
  cases.push_back({"row_softmax",
                   weighted([](Tape* t, const std::vector<Tensor>& x) {
                     return row_softmax(t, x[0]);
                   }, w23),
                   {rand_normal(rng, {2, 3}, 2.0)}});
  cases.push_back({"add_scalar",
                   weighted([](Tape* t, const std::vector<Tensor>& x) {
                     return add_scalar(t, x[0], 0.37);
                   }, w32),
                   {rand_normal(rng, {3, 2})}});
  cases.push_back({"mul_scalar",
                   weighted([](Tape* t, const std::vector<Tensor>& x) {
                     return mul_scalar(t, x[0], -1.9);
                   }, w32),
                   {rand_normal(rng, {3, 2})}});

  double worst_op = 0.0;
  std::string worst_name = "-";
  for (const OpCase& c : cases) {
    const double err = grad_check(c.f, c.inputs);
    if (err > worst_op) {
      worst_op = err;
      worst_name = c.name;
    }
    if (err > tol)
      return {false, "primitive '" + c.name + "' relative error " + fmt(err) + " > 1e-4"};
  }

  // Meta loss through a 10-step learned-policy unroll on a 2-parameter
  // quadratic, differentiated with respect to all policy parameters.
  auto problem = make_quadratic(2, 3.0, 7);
  Rng prng(11);
  const std::vector<Tensor> theta0 = problem->init_params(prng);
  Rng brng(13);
  std::vector<Batch> batches;
  std::vector<double> base_losses;
  for (int s = 0; s < 10; ++s) {
    batches.push_back(problem->sample_batch(brng));
    base_losses.push_back(problem->loss(nullptr, theta0, batches.back()).item());
  }
  auto unrolled = [&](Tape* tape, const std::vector<Tensor>& flat) -> Tensor {
    RnnPropPolicy policy(RnnPropParams::unflatten(flat));
    policy.reset(problem->param_shapes());
    std::vector<Tensor> theta = theta0;
    Trajectory traj;
    traj.policy_tag = "student";
    for (int step = 1; step <= 10; ++step) {
      const Batch& b = batches[static_cast<size_t>(step - 1)];
      const std::vector<Tensor> grads = problem->taped_grad(tape, theta, b);
      for (size_t i = 0; i < theta.size(); ++i)
        theta[i] = sub(tape, theta[i], policy.update(tape, i, grads[i], step));
      traj.params_at_step.push_back(theta);
      traj.losses_at_step.push_back(problem->loss(tape, theta, b));
      traj.initial_losses.push_back(base_losses[static_cast<size_t>(step - 1)]);
    }
    return meta_loss(tape, traj);
  };
  const std::vector<Tensor> flat = RnnPropParams::init(31).flatten();
  int64_t n_meta = 0;
  for (const Tensor& t : flat) n_meta += t.size();
  const double meta_err = grad_check(unrolled, flat);
  if (meta_err > tol)
    return {false, "meta-loss unroll relative error " + fmt(meta_err) + " > 1e-4"};

  return {true, std::to_string(cases.size()) + " primitives (worst " + fmt(worst_op) + " on " +
                    worst_name + "), 10-step unroll over " + std::to_string(n_meta) +
                    " policy parameters (worst " + fmt(meta_err) + "), all <= 1e-4"};
}

// ---------------------------------------------------------------------------
// Gate 2: analytical pool closed forms and descent.
// ---------------------------------------------------------------------------

Outcome gate_pool_closed_forms() {
  const PoolHyper hp{0.01, 0.9, 0.999, 1e-10};
  const Tensor g({2}, {0.7, -1.3});

  // Plain gradient descent: update is exactly lr * g.
  PoolUpdateResult sgd = pool_update(nullptr, PoolKind::Sgd, init_pool_state({2}), g, 1, hp);
  for (int64_t i = 0; i < 2; ++i)
    if (std::abs(sgd.update[i] - hp.lr * g[i]) > 1e-12)
      return {false, "sgd update deviates from lr*g by " +
                         fmt(std::abs(sgd.update[i] - hp.lr * g[i]))};

  // Adam's first step: bias correction makes it lr * g / (|g| + eps), i.e.
  // lr * sign(g) up to the denominator guard. The guard deviation is
  // exactly lr * eps / (|g| + eps), so the sign form is checked against
  // that analytic bound and the eps-aware closed form against 1e-12.
  PoolUpdateResult adam = pool_update(nullptr, PoolKind::Adam, init_pool_state({2}), g, 1, hp);
  for (int64_t i = 0; i < 2; ++i) {
    const double mag = std::abs(g[i]);
    const double want_sign = hp.lr * (g[i] > 0 ? 1.0 : -1.0);
    if (std::abs(adam.update[i] - want_sign) > hp.lr * hp.eps / mag + 1e-14)
      return {false, "adam first step vs lr*sign(g): |" + fmt(adam.update[i], 17) + " - " +
                         fmt(want_sign) + "| exceeds the lr*eps/|g| guard bound"};
    const double want_exact = hp.lr * g[i] / (mag + hp.eps);
    if (std::abs(adam.update[i] - want_exact) > 1e-12)
      return {false, "adam first step deviates from the eps-aware closed form by " +
                         fmt(std::abs(adam.update[i] - want_exact))};
  }
  // Unit gradient: the sign form itself holds to lr*eps + 1e-15.
  const Tensor gu({2}, {1.0, -1.0});
  PoolUpdateResult adam_u = pool_update(nullptr, PoolKind::Adam, init_pool_state({2}), gu, 1, hp);
  for (int64_t i = 0; i < 2; ++i)
    if (std::abs(adam_u.update[i] - hp.lr * (gu[i] > 0 ? 1.0 : -1.0)) > hp.lr * hp.eps + 1e-15)
      return {false, "adam first step on unit gradient is not lr*sign(g) within lr*eps"};

  // AddSign / PowerSign collapse to lr * g when the gradient average is
  // exactly zero (agreement factor 1).
  for (PoolKind kind : {PoolKind::AddSign, PoolKind::PowerSign}) {
    PoolHyper shp{0.05, 0.9, 0.999, 1e-10};
    const Tensor g1({1}, {1.0});
    const double m1 = (1.0 - shp.beta1) * 1.0;
    const Tensor g2({1}, {-shp.beta1 * m1 / (1.0 - shp.beta1)});
    PoolUpdateResult r1 = pool_update(nullptr, kind, init_pool_state({1}), g1, 1, shp);
    PoolUpdateResult r2 = pool_update(nullptr, kind, r1.state, g2, 2, shp);
    if (r2.state.m[0] != 0.0)
      return {false, std::string(pool_kind_name(kind)) + ": constructed momentum is not zero"};
    if (std::abs(r2.update[0] - shp.lr * g2[0]) > 1e-12)
      return {false, std::string(pool_kind_name(kind)) + " at zero momentum deviates from lr*g by " +
                         fmt(std::abs(r2.update[0] - shp.lr * g2[0]))};
  }

  // Every member monotonically descends 0.5*||theta||^2 for 50 steps.
  for (PoolKind kind : all_pool_kinds()) {
    Tensor theta({3}, {1.2, -0.8, 0.6});
    PoolState st = init_pool_state({3});
    auto quad = [](const Tensor& t) {
      double s = 0.0;
      for (int64_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
      return 0.5 * s;
    };
    double prev = quad(theta);
    for (int step = 1; step <= 50; ++step) {
      PoolUpdateResult r = pool_update(nullptr, kind, st, theta, step, hp);
      st = r.state;
      theta = sub(nullptr, theta, r.update);
      const double cur = quad(theta);
      if (!(cur < prev))
        return {false, std::string(pool_kind_name(kind)) + " failed to descend at step " +
                           std::to_string(step) + " (" + fmt(cur) + " >= " + fmt(prev) + ")"};
      prev = cur;
    }
  }
  return {true, "sgd/adam/addsign/powersign closed forms exact to 1e-12; "
                "all 6 members descend the bowl for 50 straight steps"};
}

// ---------------------------------------------------------------------------
// Gate 3: the trained choice policy tracks a dominant pool member.
// ---------------------------------------------------------------------------

Outcome gate_choice_policy() {
  const std::vector<PoolKind> pool{PoolKind::Adam, PoolKind::Sgd};
  PoolHyper fast, slow;
  fast.lr = 0.05;
  slow.lr = 1e-6;
  const std::vector<PoolHyper> hps{fast, slow};
  ProblemFactory fam = [](uint64_t s) -> std::shared_ptr<const Optimizee> {
    return std::shared_ptr<const Optimizee>(make_quadratic(4, 10.0, s));
  };

  TrainConfig cfg;
  cfg.meta_epochs = 60;
  cfg.unroll_n = 10;
  cfg.truncation_t = 10;
  cfg.meta_lr = 0.02;
  cfg.warmup_steps = 0;
  cfg.validation_interval = 1000;
  cfg.seed = 21;
  const ChoiceParams trained = train_choice_policy(pool, hps, fam, cfg);

  // Meta losses on held-out instances, identical streams per contender.
  RolloutOptions ro;
  ro.steps = 30;
  ro.warmup_steps = 0;
  ro.eval_interval = 0;
  const int kProblems = 5;
  double choice_sum = 0.0;
  std::vector<double> member_sum(pool.size(), 0.0);
  std::vector<double> weight_sum(pool.size(), 0.0);
  for (int p = 0; p < kProblems; ++p) {
    auto problem = fam(derive_seed(900, "choice_eval", static_cast<uint64_t>(p)));
    {
      ChoicePolicy policy(trained, pool, hps);
      Rng rng(derive_seed(901, "rollout", static_cast<uint64_t>(p)));
      choice_sum += rollout_meta_loss(*problem, policy, ro, rng);
      const std::vector<double> w = policy.mean_member_weights();
      for (size_t i = 0; i < w.size(); ++i) weight_sum[i] += w[i];
    }
    for (size_t i = 0; i < pool.size(); ++i) {
      PoolPolicy member(pool[i], hps[i]);
      Rng rng(derive_seed(901, "rollout", static_cast<uint64_t>(p)));
      member_sum[i] += rollout_meta_loss(*problem, member, ro, rng);
    }
  }
  const double choice_loss = choice_sum / kProblems;
  double best_member = kInf;
  size_t best_idx = 0;
  for (size_t i = 0; i < pool.size(); ++i) {
    if (member_sum[i] / kProblems < best_member) {
      best_member = member_sum[i] / kProblems;
      best_idx = i;
    }
  }
  const double mean_weight_best = weight_sum[best_idx] / kProblems;

  // Meta losses are log improvements and can be negative, so "within 5%"
  // is applied as slack in the unfavorable direction: for positive values
  // this is exactly best * 1.05.
  const double threshold = best_member + 0.05 * std::abs(best_member);
  if (!(choice_loss <= threshold))
    return {false, "choice meta loss " + fmt(choice_loss) + " above the 5% band around best member " +
                       fmt(best_member) + " (threshold " + fmt(threshold) + ")"};
  if (!(mean_weight_best > 0.5))
    return {false, "mean weight on the dominant member is " + fmt(mean_weight_best) + " <= 0.5"};
  return {true, "choice meta loss " + fmt(choice_loss) + " vs best member (" +
                    pool_kind_name(pool[best_idx]) + ") " + fmt(best_member) +
                    "; mean weight on it " + fmt(mean_weight_best)};
}

// ---------------------------------------------------------------------------
// Gate 4: optimal-choice amalgamation matches the oracle pool member on a
// held-out 500-step budget.
// ---------------------------------------------------------------------------

Outcome gate_amalgamation_efficacy() {
  const uint64_t seed = 4001;
  const ProblemFactory family = desk_mlp_family();
  {
    Rng r(1);
    auto probe = family(1);
    int64_t total = total_params(*probe);
    if (total < 200 || total > 2000)
      return {false, "desk problem has " + std::to_string(total) + " parameters, outside 200-2000"};
  }

  const std::vector<PoolKind> members{PoolKind::Adam, PoolKind::RmsProp};
  const std::vector<PoolHyper> hps = tune_small_pool(family, seed, members);

  // Choice pre-training, then distillation against the choice teacher.
  TrainConfig cc;
  cc.meta_epochs = 50;
  cc.unroll_n = 20;
  cc.truncation_t = 10;
  cc.meta_lr = 0.02;
  cc.warmup_steps = 50;
  cc.warmup_lr = 0.01;
  cc.validation_interval = 1000;
  cc.seed = derive_seed(seed, "choice_pretrain");
  const ChoiceParams teacher = train_choice_policy(members, hps, family, cc);

  TrainConfig tc;
  tc.meta_epochs = 150;
  tc.curriculum_stages = {20, 50};
  tc.truncation_t = 10;
  tc.alpha = 1.0;
  tc.meta_lr = 1e-3;
  tc.warmup_steps = 50;
  tc.warmup_lr = 0.01;
  tc.validation_interval = 20;
  tc.patience = 4;
  tc.validation_problems = 1;
  tc.seed = derive_seed(seed, "train");
  MetaRnnProp student(RnnPropParams::init(derive_seed(seed, "student_init")));
  AmalgamationMode mode = make_choice_mode(teacher, members, hps);
  const TrainResult result = train_truncated(student, mode, family, tc);
  const std::vector<Tensor>& chosen =
      result.best_params.empty() ? result.meta_params : result.best_params;

  // Held-out evaluation: 500 steps, 3 seeds, identical streams per
  // contender; score = mean training loss over the final 50 steps.
  RolloutOptions ro;
  ro.steps = 500;
  ro.warmup_steps = 50;
  ro.warmup_lr = 0.01;
  ro.eval_interval = 0;
  const int kSeeds = 3;
  double student_sum = 0.0;
  std::vector<double> member_sum(members.size(), 0.0);
  for (int s = 0; s < kSeeds; ++s) {
    const uint64_t pseed = derive_seed(seed, "eval_problem", static_cast<uint64_t>(s));
    const uint64_t rseed = derive_seed(seed, "eval_rollout", static_cast<uint64_t>(s));
    {
      RnnPropPolicy policy(RnnPropParams::unflatten(chosen));
      auto problem = family(pseed);
      Rng rng(rseed);
      student_sum += final_train_loss(run_policy(*problem, policy, ro, rng), 50);
    }
    for (size_t i = 0; i < members.size(); ++i) {
      PoolPolicy member(members[i], hps[i]);
      auto problem = family(pseed);
      Rng rng(rseed);
      member_sum[i] += final_train_loss(run_policy(*problem, member, ro, rng), 50);
    }
  }
  const double student_avg = student_sum / kSeeds;
  double oracle = kInf;
  size_t oracle_idx = 0;
  for (size_t i = 0; i < members.size(); ++i) {
    if (member_sum[i] / kSeeds < oracle) {
      oracle = member_sum[i] / kSeeds;
      oracle_idx = i;
    }
  }
  if (!std::isfinite(student_avg))
    return {false, "student diverged on the held-out 500-step rollouts"};
  if (!(student_avg <= 1.1 * oracle))
    return {false, "student final train loss " + fmt(student_avg) + " > 1.1 x oracle (" +
                       pool_kind_name(members[oracle_idx]) + ") " + fmt(oracle)};
  return {true, "student " + fmt(student_avg) + " vs oracle (" +
                    pool_kind_name(members[oracle_idx]) + " lr " + fmt(hps[oracle_idx].lr) + ") " +
                    fmt(oracle) + " over 500 steps x 3 seeds (ratio " +
                    fmt(student_avg / oracle, 4) + ", gate 1.1)"};
}

// ---------------------------------------------------------------------------
// Gate 5: loss-scheme ordering — worst-teacher >= mean-teacher per
// truncation, and a single teacher makes them equal.
// ---------------------------------------------------------------------------

Outcome gate_loss_ordering() {
  Rng rng(55);
  const int kTrials = 25;
  for (int trial = 0; trial < kTrials; ++trial) {
    const int T = 1 + static_cast<int>(rng.uniform_int(1, 6));
    auto make_traj = [&](bool with_losses) {
      Trajectory t;
      for (int s = 0; s < T; ++s) {
        t.params_at_step.push_back(
            {rand_normal(rng, {3}), rand_normal(rng, {2, 2})});
        if (with_losses) {
          t.losses_at_step.push_back(Tensor::scalar(rng.uniform(0.2, 5.0)));
          t.initial_losses.push_back(rng.uniform(0.2, 5.0));
        }
      }
      return t;
    };
    const Trajectory student = make_traj(true);
    const std::vector<Trajectory> teachers{make_traj(false), make_traj(false),
                                           make_traj(false)};
    const double mean_v =
        amalgamation_loss(nullptr, AmalgamationKind::Mean, student, teachers, 1.0).item();
    const double minmax_v =
        amalgamation_loss(nullptr, AmalgamationKind::MinMax, student, teachers, 1.0).item();
    if (!(minmax_v >= mean_v))
      return {false, "trial " + std::to_string(trial) + ": min-max " + fmt(minmax_v, 17) +
                         " < mean " + fmt(mean_v, 17)};

    const std::vector<Trajectory> solo{teachers[0]};
    const double mean_1 =
        amalgamation_loss(nullptr, AmalgamationKind::Mean, student, solo, 1.0).item();
    const double minmax_1 =
        amalgamation_loss(nullptr, AmalgamationKind::MinMax, student, solo, 1.0).item();
    if (mean_1 != minmax_1)
      return {false, "single teacher: mean " + fmt(mean_1, 17) + " != min-max " +
                         fmt(minmax_1, 17)};
  }
  return {true, std::to_string(kTrials) +
                    " random trajectory sets: min-max >= mean throughout; single-teacher "
                    "mean == min-max bitwise"};
}

// ---------------------------------------------------------------------------
// Gate 6: weight-noise perturbation tightens across-replicate spread at
// sigma 1e-3 (hard gate at 2x) and mostly diverges at sigma 1e-1 (reported).
// ---------------------------------------------------------------------------

Outcome gate_perturbation_stability() {
  const uint64_t seed = 6001;
  const ProblemFactory family = desk_mlp_family();
  const std::vector<PoolKind> members{PoolKind::Adam, PoolKind::RmsProp};
  const std::vector<PoolHyper> hps = tune_small_pool(family, seed, members);
  const int kReplicates = 4;

  auto train_replicate = [&](double sigma, int r) {
    TrainConfig tc;
    tc.meta_epochs = 60;
    tc.unroll_n = 20;
    tc.truncation_t = 10;
    tc.alpha = 1.0;
    tc.meta_lr = 1e-3;
    tc.warmup_steps = 50;
    tc.warmup_lr = 0.01;
    tc.validation_interval = 1000;
    tc.seed = derive_seed(seed, "replicate", static_cast<uint64_t>(r));
    if (sigma > 0.0 || sigma == 0.0) {
      tc.perturb.kind = sigma > 0.0 ? PerturbationKind::GaussianWeight : PerturbationKind::None;
      tc.perturb.sigma = sigma;
    }
    MetaRnnProp student(
        RnnPropParams::init(derive_seed(seed, "student_init", static_cast<uint64_t>(r))));
    AmalgamationMode mode = make_pool_mode(AmalgamationKind::MinMax, members, hps);
    return train_truncated(student, mode, family, tc);
  };
  auto eval_rollout = [&](const TrainResult& result) {
    RnnPropPolicy policy(RnnPropParams::unflatten(result.meta_params));
    auto problem = family(derive_seed(seed, "eval_problem"));
    RolloutOptions ro;
    ro.steps = 100;
    ro.warmup_steps = 50;
    ro.warmup_lr = 0.01;
    ro.eval_interval = 0;
    Rng rng(derive_seed(seed, "eval_rollout"));
    return run_policy(*problem, policy, ro, rng);
  };
  auto eval_final_loss = [&](const TrainResult& result) {
    return final_train_loss(eval_rollout(result), 20);
  };

  auto spread = [&](double sigma, std::string* err) -> double {
    std::vector<double> finals;
    for (int r = 0; r < kReplicates; ++r) {
      const double v = eval_final_loss(train_replicate(sigma, r));
      if (!std::isfinite(v)) {
        *err = "replicate " + std::to_string(r) + " at sigma " + fmt(sigma) + " diverged";
        return kInf;
      }
      finals.push_back(v);
    }
    return sample_std(finals);
  };

  std::string err;
  const double std_clean = spread(0.0, &err);
  if (!std::isfinite(std_clean)) return {false, err};
  const double std_noise = spread(1e-3, &err);
  if (!std::isfinite(std_noise)) return {false, err};

  // Heavy noise: a replicate is flagged divergent if its training logged
  // divergence events, its held-out rollout tripped the divergence flag,
  // or its final loss is non-finite. Reported, never gated.
  int heavy_divergent = 0;
  double heavy_loss_sum = 0.0;
  for (int r = 0; r < kReplicates; ++r) {
    const TrainResult res = train_replicate(1e-1, r);
    const RolloutResult roll = eval_rollout(res);
    const double fl = final_train_loss(roll, 20);
    heavy_loss_sum += fl;
    if (res.divergence_events > 0 || roll.diverged || !std::isfinite(fl)) ++heavy_divergent;
  }

  std::string detail = "final-loss std across " + std::to_string(kReplicates) +
                       " replicates: sigma=0 " + fmt(std_clean) + ", sigma=1e-3 " +
                       fmt(std_noise) +
                       (std_noise <= std_clean
                            ? " (tighter, as expected)"
                            : " (LOOSER than clean — tracked expectation missed, within 2x gate)") +
                       "; sigma=1e-1: " + std::to_string(heavy_divergent) + "/" +
                       std::to_string(kReplicates) + " replicates flagged divergent" +
                       (2 * heavy_divergent >= kReplicates
                            ? ""
                            : " (below the at-least-half expectation; mean final loss " +
                                  fmt(heavy_loss_sum / kReplicates) + " — reported, not gated)");
  if (std_noise > 2.0 * std_clean)
    return {false, "sigma=1e-3 spread " + fmt(std_noise) + " exceeds 2x the clean spread " +
                       fmt(std_clean) + " — " + detail};
  return {true, detail};
}

// ---------------------------------------------------------------------------
// Gate 7: stability estimators on synthetic and hand-built data.
// ---------------------------------------------------------------------------

Outcome gate_stability_estimators() {
  // Moment recovery on 8 replicates x 10 evaluations.
  Rng rng(2);
  std::vector<std::vector<double>> y;
  for (int i = 0; i < 8; ++i) {
    const double a = rng.normal(0.0, 1.0);
    std::vector<double> row;
    for (int j = 0; j < 10; ++j) row.push_back(5.0 + a + rng.normal(0.0, 0.5));
    y.push_back(row);
  }
  const StabilityModel m = variance_components(y);
  if (std::abs(m.sigma_alpha - 1.0) > 0.30)
    return {false, "sigma_alpha " + fmt(m.sigma_alpha) + " misses 1.0 by more than 30%"};
  if (std::abs(m.sigma_eps - 0.5) > 0.15)
    return {false, "sigma_eps " + fmt(m.sigma_eps) + " misses 0.5 by more than 30%"};

  // Hand ANOVA: {[1,1],[3,3]} has within-variance 0 and between-variance 2.
  const StabilityModel hand = variance_components({{1.0, 1.0}, {3.0, 3.0}});
  if (hand.sigma_eps != 0.0)
    return {false, "hand case sigma_eps is " + fmt(hand.sigma_eps, 17) + ", want exactly 0"};
  if (hand.sigma_alpha != std::sqrt(2.0))
    return {false, "hand case sigma_alpha is " + fmt(hand.sigma_alpha, 17) + ", want sqrt(2)"};

  // Filter residual: exactly quiet on a constant curve, and within 20% of
  // injected noise on a smooth 100-epoch trend.
  const double flat = optimization_stability(std::vector<double>(100, 2.5));
  if (flat > 1e-12)
    return {false, "constant-curve stability " + fmt(flat, 17) + " is not zero (tol 1e-12)"};
  Rng nrng(1);
  std::vector<double> curve;
  for (int t = 0; t < 100; ++t) {
    const double smooth = 2.0 + 0.001 * (t - 50.0) * (t - 50.0);
    curve.push_back(smooth + nrng.normal(0.0, 0.1));
  }
  const double est = optimization_stability(curve, 2.0);
  if (std::abs(est - 0.1) > 0.02)
    return {false, "noise recovery " + fmt(est) + " misses 0.1 by more than 20%"};

  return {true, "moments (" + fmt(m.sigma_alpha, 4) + ", " + fmt(m.sigma_eps, 4) +
                    ") vs truth (1.0, 0.5); hand ANOVA exact; constant curve " + fmt(flat, 3) +
                    "; injected 0.1 recovered as " + fmt(est, 4)};
}

// ---------------------------------------------------------------------------
// Gate 8: published architecture parameter counts.
// ---------------------------------------------------------------------------

Outcome gate_parameter_counts() {
  const auto mlp = make_mlp(20, 784, 10, 1);
  const int64_t mlp_n = total_params(*mlp);
  const auto cnn = make_cnn({16, 32}, 10, 1);
  const int64_t cnn_n = total_params(*cnn);
  if (mlp_n != 15910)
    return {false, "mlp parameter count " + std::to_string(mlp_n) + " != 15910"};
  if (cnn_n != 18122)
    return {false, "train-cnn parameter count " + std::to_string(cnn_n) + " != 18122"};
  return {true, "mlp 15910, train cnn 18122 — both exact"};
}

// ---------------------------------------------------------------------------
// Gate 9: byte-level reproducibility of the command pipeline.
// ---------------------------------------------------------------------------

Outcome gate_reproducibility() {
  const fs::path root = fs::temp_directory_path() / "amalgam_acceptance";
  fs::remove_all(root);

  ExperimentConfig cfg;
  cfg.mode = AmalgamationKind::Mean;
  cfg.pool = PoolPreset::Small;
  cfg.seed = 99;
  cfg.optimizee.kind = "quadratic";
  cfg.optimizee.dim = 3;
  cfg.optimizee.conditioning = 4.0;
  cfg.train.meta_epochs = 4;
  cfg.train.unroll_n = 10;
  cfg.train.truncation_t = 5;
  cfg.train.warmup_steps = 5;
  cfg.train.validation_interval = 2;
  cfg.train.validation_problems = 1;
  cfg.grid_lrs = {1e-2, 1e-1};
  cfg.grid_seeds = 1;
  cfg.grid_steps = 30;
  cfg.evals_per_replicate = 2;
  cfg.eval_epochs = 3;
  cfg.eval_steps_per_epoch = 5;

  ExperimentConfig a = cfg, b = cfg;
  a.out_dir = (root / "run-a").string();
  b.out_dir = (root / "run-b").string();
  cmd_train(a);
  cmd_evaluate(a);
  cmd_train(b);
  cmd_evaluate(b);

  const std::string csv_a = read_text_file(evaluation_path(a.out_dir));
  const std::string csv_b = read_text_file(evaluation_path(b.out_dir));
  if (csv_a != csv_b) return {false, "evaluation CSVs differ between two identical runs"};
  const std::vector<unsigned char> cp_a = read_binary_file(checkpoint_path(a.out_dir, 0));
  const std::vector<unsigned char> cp_b = read_binary_file(checkpoint_path(b.out_dir, 0));
  if (cp_a != cp_b) return {false, "checkpoints differ between two identical runs"};
  if (read_text_file(train_log_path(a.out_dir, 0)) != read_text_file(train_log_path(b.out_dir, 0)))
    return {false, "train logs differ between two identical runs"};

  // Checkpoint round-trip: decode -> encode reproduces the file bitwise.
  const std::vector<CheckpointEntry> entries = decode_checkpoint(cp_a);
  const std::vector<unsigned char> re = encode_checkpoint(entries);
  if (re != cp_a) return {false, "checkpoint decode->encode is not bitwise stable"};

  return {true, "two runs byte-identical (" + std::to_string(csv_a.size()) + "-byte CSV, " +
                    std::to_string(cp_a.size()) + "-byte checkpoint); checkpoint round-trip bitwise"};
}

// ---------------------------------------------------------------------------

struct Gate {
  int id;
  std::string title;
  double budget_seconds;  // 0 = no budget
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Gate> gates = {
      {1, "gradient fidelity (primitives + 10-step policy unroll)", 120.0, gate_gradient_fidelity},
      {2, "analytical pool closed forms and monotone descent", 0.0, gate_pool_closed_forms},
      {3, "choice policy favors the dominant pool member", 600.0, gate_choice_policy},
      {4, "optimal-choice amalgamation vs oracle member at 500 steps", 1800.0,
       gate_amalgamation_efficacy},
      {5, "worst-teacher loss dominates mean-teacher loss", 0.0, gate_loss_ordering},
      {6, "weight noise tightens replicate spread; heavy noise diverges", 0.0,
       gate_perturbation_stability},
      {7, "stability estimators recover known spreads", 0.0, gate_stability_estimators},
      {8, "published architecture parameter counts", 0.0, gate_parameter_counts},
      {9, "byte-identical reruns and bitwise checkpoint round-trip", 0.0, gate_reproducibility},
  };

  int failures = 0;
  for (const Gate& g : gates) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = g.run();
    } catch (const std::exception& e) {
      out = {false, std::string("threw: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (out.pass && g.budget_seconds > 0.0 && secs > g.budget_seconds) {
      out.pass = false;
      out.detail += " — exceeded the " + fmt(g.budget_seconds, 3) + "s budget";
    }
    std::printf("[%s] %d. %s (%.1fs)\n        %s\n", out.pass ? "PASS" : "FAIL", g.id,
                g.title.c_str(), secs, out.detail.c_str());
    std::fflush(stdout);
    if (!out.pass) ++failures;
  }
  if (failures > 0) {
    std::printf("%d of %zu acceptance gates FAILED\n", failures, gates.size());
    return 1;
  }
  std::printf("all %zu acceptance gates passed\n", gates.size());
  return 0;
}

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "amalgam/errors.hpp"
#include "amalgam/learned_optimizer.hpp"
#include "amalgam/optimizee_zoo.hpp"
#include "amalgam/optimizer_pool.hpp"
#include "amalgam/tape.hpp"
#include "doctest.h"

using namespace amalgam;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("lstm cell: hand-computed single-unit step") {
  LstmCellParams p;
  p.wx = Tensor({1, 4}, {0.1, 0.2, 0.3, 0.4});
  p.wh = Tensor({1, 4}, {0.5, -0.5, 0.25, -0.25});
  p.b = Tensor({4}, {0.01, 1.0, -0.01, 0.02});
  Tensor x({1, 1}, {0.5});
  LstmState s{Tensor({1, 1}, {0.3}), Tensor({1, 1}, {0.2})};

  LstmState out = lstm_cell(nullptr, p, x, s);

  double gi = sig(0.5 * 0.1 + 0.3 * 0.5 + 0.01);
  double gf = sig(0.5 * 0.2 + 0.3 * -0.5 + 1.0);
  double gc = std::tanh(0.5 * 0.3 + 0.3 * 0.25 - 0.01);
  double go = sig(0.5 * 0.4 + 0.3 * -0.25 + 0.02);
  double c = gf * 0.2 + gi * gc;
  double h = go * std::tanh(c);
  CHECK(out.c[0] == doctest::Approx(c).epsilon(1e-12));
  CHECK(out.h[0] == doctest::Approx(h).epsilon(1e-12));
}

TEST_CASE("lstm cell: zero input and state stay exactly zero under default init") {
  Rng rng(3);
  LstmCellParams p = init_lstm(rng, 4, 20);
  LstmState s = lstm_zero_state(3, 20);
  LstmState out = lstm_cell(nullptr, p, Tensor::zeros({3, 4}), s);
  for (int64_t i = 0; i < out.h.size(); ++i) {
    CHECK(out.h[i] == 0.0);
    CHECK(out.c[i] == 0.0);
  }
}

TEST_CASE("lstm init: forget bias one, other biases zero, kernels bounded") {
  Rng rng(11);
  LstmCellParams p = init_lstm(rng, 6, 20);
  CHECK(p.wx.shape() == Shape{6, 80});
  CHECK(p.wh.shape() == Shape{20, 80});
  CHECK(p.b.shape() == Shape{80});
  for (int64_t i = 0; i < 80; ++i) {
    if (i >= 20 && i < 40)
      CHECK(p.b[i] == 1.0);
    else
      CHECK(p.b[i] == 0.0);
  }
  double bx = 1.0 / std::sqrt(6.0), bh = 1.0 / std::sqrt(20.0);
  for (int64_t i = 0; i < p.wx.size(); ++i) CHECK(std::abs(p.wx[i]) <= bx);
  for (int64_t i = 0; i < p.wh.size(); ++i) CHECK(std::abs(p.wh[i]) <= bh);
}

TEST_CASE("parameter counts are pinned by the architecture") {
  CHECK(rnnprop_param_count() == 5141);

  // LSTM(in) = in*80 + 20*80 + 80 packed kernels/bias; head = 20*T + T.
  auto lstm_n = [](int64_t in) { return in * 80 + 20 * 80 + 80; };
  for (int64_t t : {2, 6}) {
    CHECK(choice_param_count(t) == lstm_n(t + 6) + lstm_n(20) + 20 * t + t);
  }

  // Flatten/unflatten round trip preserves every tensor bitwise.
  RnnPropParams p = RnnPropParams::init(5);
  RnnPropParams q = RnnPropParams::unflatten(p.flatten());
  CHECK(bitwise_equal(p.l1.wx, q.l1.wx));
  CHECK(bitwise_equal(p.l2.b, q.l2.b));
  CHECK(bitwise_equal(p.out_w, q.out_w));
  CHECK_THROWS_AS(RnnPropParams::unflatten({Tensor::zeros({1})}), ConfigError);
  CHECK_THROWS_AS(ChoiceParams::unflatten({}), ConfigError);

  // Init is deterministic per seed.
  CHECK(bitwise_equal(RnnPropParams::init(5).out_w, p.out_w));
  CHECK_FALSE(bitwise_equal(RnnPropParams::init(6).out_w, p.out_w));
}

TEST_CASE("gradient features: first step and zero-gradient edge") {
  RnnPropHyper hp;
  CoordState st = CoordState::zero(1);
  FeaturePair f = rnnprop_features(nullptr, Tensor({1, 1}, {1.0}), st, hp);
  // Bias correction makes m_hat = 1 and v_hat = 1 on the first step, so both
  // directions are 1/(1 + eps).
  CHECK(f.adam_dir[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(f.rmsprop_dir[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(st.step == 1);

  CoordState zs = CoordState::zero(2);
  FeaturePair z = rnnprop_features(nullptr, Tensor::zeros({2, 1}), zs, hp);
  for (int64_t i = 0; i < 2; ++i) {
    CHECK(z.adam_dir[i] == 0.0);
    CHECK(z.rmsprop_dir[i] == 0.0);
  }
}

TEST_CASE("gradient features: 20-step sequence matches a direct EMA oracle") {
  const int64_t n = 3;
  RnnPropHyper hp;
  CoordState st = CoordState::zero(n);
  std::vector<double> m(n, 0.0), v(n, 0.0);
  Rng rng(17);
  for (int64_t t = 1; t <= 20; ++t) {
    std::vector<double> g = rng.normal_vec(static_cast<size_t>(n));
    FeaturePair f = rnnprop_features(nullptr, Tensor({n, 1}, g), st, hp);
    for (int64_t i = 0; i < n; ++i) {
      size_t k = static_cast<size_t>(i);
      m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
      v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
      double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
      double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
      double den = std::sqrt(v[k] / bc2) + hp.eps;
      CHECK(f.adam_dir[i] == doctest::Approx((m[k] / bc1) / den).epsilon(1e-12));
      CHECK(f.rmsprop_dir[i] == doctest::Approx(g[k] / den).epsilon(1e-12));
      CHECK(st.m[i] == doctest::Approx(m[k]).epsilon(1e-12));
      CHECK(st.v[i] == doctest::Approx(v[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("learned step: zero output layer gives the zero update") {
  RnnPropParams p = RnnPropParams::init(7);
  p.out_w = Tensor::zeros({kLstmUnits, 1});
  p.out_b = Tensor::zeros({1});
  CoordState st = CoordState::zero(12);
  Rng rng(19);
  Tensor grad({3, 4}, rng.normal_vec(12));
  Tensor u = rnnprop_step(nullptr, p, grad, st, {});
  CHECK(u.shape() == Shape{3, 4});
  for (int64_t i = 0; i < 12; ++i) CHECK(u[i] == 0.0);
  CHECK(st.s1.h.shape() == Shape{12, 20});
  CHECK(st.s2.c.shape() == Shape{12, 20});
}

TEST_CASE("learned step: updates stay inside the tanh range") {
  RnnPropParams p = RnnPropParams::init(23);
  CoordState st = CoordState::zero(40);
  Rng rng(29);
  for (int64_t t = 0; t < 5; ++t) {
    Tensor grad({40}, rng.normal_vec(40, 0.0, 10.0));
    Tensor u = rnnprop_step(nullptr, p, grad, st, {});
    for (int64_t i = 0; i < 40; ++i) CHECK(std::abs(u[i]) <= 1.0);
  }
}

TEST_CASE("learned step: coordinate permutation equivariance") {
  RnnPropParams p = RnnPropParams::init(31);
  Rng rng(37);
  std::vector<double> g = rng.normal_vec(6);
  std::vector<int64_t> perm = {4, 2, 0, 5, 1, 3};
  std::vector<double> gp(6);
  for (int64_t i = 0; i < 6; ++i) gp[static_cast<size_t>(i)] = g[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  CoordState s1 = CoordState::zero(6), s2 = CoordState::zero(6);
  Tensor u = rnnprop_step(nullptr, p, Tensor({6}, g), s1, {});
  Tensor up = rnnprop_step(nullptr, p, Tensor({6}, gp), s2, {});
  for (int64_t i = 0; i < 6; ++i) CHECK(up[i] == u[perm[static_cast<size_t>(i)]]);
}

TEST_CASE("learned step: unrolled meta-gradient matches finite differences") {
  auto q = make_quadratic(2, 3.0, 41);
  Rng rng(43);
  Tensor theta0({2}, rng.normal_vec(2));
  RnnPropParams init = RnnPropParams::init(47);

  auto unroll = [&](Tape* tape, const std::vector<Tensor>& pts) {
    RnnPropParams p = RnnPropParams::unflatten(pts);
    CoordState st = CoordState::zero(2);
    Tensor theta = theta0;
    Tensor total = Tensor::scalar(0.0);
    for (int step = 0; step < 5; ++step) {
      std::vector<Tensor> grads = q->taped_grad(tape, {theta}, Batch{});
      Tensor u = rnnprop_step(tape, p, grads[0], st, {});
      theta = sub(tape, theta, u);
      total = add(tape, total, q->loss(tape, {theta}, Batch{}));
    }
    return total;
  };

  std::vector<Tensor> inputs = init.flatten();
  Tape tape;
  std::vector<Tensor> leafed;
  leafed.reserve(inputs.size());
  for (const Tensor& t : inputs) leafed.push_back(tape.leaf(t));
  GradMap gm = backward(tape, unroll(&tape, leafed));

  // Central differences have an absolute noise floor near 1e-9 here
  // (loss ~ O(10), h = 1e-5), so the error denominator carries a 1e-4
  // floor: healthy coordinates are held to 1e-4 relative error, and
  // coordinates living below the floor to 1e-8 absolute error.
  const double h = 1e-5;
  double worst = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor analytic = gm.grad(leafed[ti]);
    for (int64_t c = 0; c < inputs[ti].size(); ++c) {
      std::vector<double> vp(inputs[ti].data(), inputs[ti].data() + inputs[ti].size());
      std::vector<double> vm = vp;
      vp[static_cast<size_t>(c)] += h;
      vm[static_cast<size_t>(c)] -= h;
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[ti] = Tensor(inputs[ti].shape(), vp);
      minus[ti] = Tensor(inputs[ti].shape(), vm);
      double numeric = (unroll(nullptr, plus).item() - unroll(nullptr, minus).item()) / (2.0 * h);
      double a = analytic[c];
      worst = std::max(worst,
                       std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-4));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("choice: zero head spreads weight uniformly") {
  ChoiceParams p = ChoiceParams::init(53, 2);
  p.head_w = Tensor::zeros({kLstmUnits, 2});
  p.head_b = Tensor::zeros({2});
  Rng rng(59);
  Tensor u1({2, 3}, rng.normal_vec(6));
  Tensor u2({2, 3}, rng.normal_vec(6));
  CoordState st = CoordState::zero(6);
  ChoiceResult r = choice_forward(nullptr, p, {u1, u2}, 1, 2, st);

  for (int64_t i = 0; i < r.weights.size(); ++i) CHECK(r.weights[i] == 0.5);
  for (int64_t i = 0; i < 6; ++i)
    CHECK(r.update[i] == doctest::Approx(0.5 * u1[i] + 0.5 * u2[i]).epsilon(1e-15));
  CHECK(r.update.shape() == Shape{2, 3});
}

TEST_CASE("choice: saturated head collapses onto one member") {
  ChoiceParams p = ChoiceParams::init(61, 2);
  p.head_w = Tensor::zeros({kLstmUnits, 2});
  p.head_b = Tensor({2}, {0.0, 50.0});
  Rng rng(67);
  Tensor u1({4}, rng.normal_vec(4));
  Tensor u2({4}, rng.normal_vec(4));
  CoordState st = CoordState::zero(4);
  ChoiceResult r = choice_forward(nullptr, p, {u1, u2}, 3, 1, st);
  for (int64_t i = 0; i < 4; ++i) CHECK(r.update[i] == doctest::Approx(u2[i]).epsilon(1e-9));
}

TEST_CASE("choice: weights live on the simplex and updates in the hull") {
  const int64_t t_pool = 4;
  ChoiceParams p = ChoiceParams::init(71, t_pool);
  Rng rng(73);
  std::vector<Tensor> updates;
  for (int64_t j = 0; j < t_pool; ++j) updates.push_back(Tensor({5}, rng.normal_vec(5)));
  CoordState st = CoordState::zero(5);
  ChoiceResult r = choice_forward(nullptr, p, updates, 17, 1, st);

  REQUIRE(r.weights.shape() == Shape{5, t_pool});
  for (int64_t i = 0; i < 5; ++i) {
    double row_sum = 0.0;
    for (int64_t j = 0; j < t_pool; ++j) {
      double w = r.weights[i * t_pool + j];
      CHECK(w >= 0.0);
      row_sum += w;
    }
    CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-9));

    double lo = updates[0][i], hi = updates[0][i];
    for (int64_t j = 1; j < t_pool; ++j) {
      lo = std::min(lo, updates[static_cast<size_t>(j)][i]);
      hi = std::max(hi, updates[static_cast<size_t>(j)][i]);
    }
    CHECK(r.update[i] >= lo - 1e-12);
    CHECK(r.update[i] <= hi + 1e-12);
  }

  // Adding a constant to every head logit changes nothing.
  ChoiceParams shifted = p;
  std::vector<double> hb(static_cast<size_t>(t_pool));
  for (int64_t j = 0; j < t_pool; ++j) hb[static_cast<size_t>(j)] = p.head_b[j] + 7.0;
  shifted.head_b = Tensor({t_pool}, hb);
  CoordState st2 = CoordState::zero(5);
  ChoiceResult r2 = choice_forward(nullptr, shifted, updates, 17, 1, st2);
  for (int64_t i = 0; i < r.weights.size(); ++i)
    CHECK(r2.weights[i] == doctest::Approx(r.weights[i]).epsilon(1e-12));
}

TEST_CASE("choice: input validation") {
  ChoiceParams p = ChoiceParams::init(79, 2);
  CoordState st = CoordState::zero(3);
  Tensor u({3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(choice_forward(nullptr, p, {}, 1, 1, st), Error);
  CHECK_THROWS_AS(choice_forward(nullptr, p, {u, u}, 1, 5, st), Error);
  CHECK_THROWS_AS(choice_forward(nullptr, p, {u, Tensor::zeros({2})}, 1, 1, st), ShapeError);
  CHECK_THROWS_AS(choice_forward(nullptr, p, {u}, 1, 1, st), ShapeError);  // head width 2
  CHECK_THROWS_AS(ChoicePolicy(p, {PoolKind::Adam}), ConfigError);
  CHECK_THROWS_AS(ChoicePolicy(ChoiceParams::init(1, 1), {}), ConfigError);
}

TEST_CASE("coord state: detach cuts tape links but keeps values") {
  Tape tape;
  RnnPropParams p = RnnPropParams::init(83);
  CoordState st = CoordState::zero(3);
  Rng rng(89);
  Tensor grad = tape.leaf(Tensor({3}, rng.normal_vec(3)));
  (void)rnnprop_step(&tape, p, grad, st, {});
  CHECK(st.s1.h.node() >= 0);

  Tensor h_before = st.s1.h;
  st.detach();
  CHECK(st.s1.h.node() == -1);
  CHECK(st.s2.c.node() == -1);
  CHECK(st.m.node() == -1);
  CHECK(bitwise_equal(st.s1.h, h_before));
}

TEST_CASE("learned policy: zero output layer leaves parameters untouched in a rollout") {
  RnnPropParams p = RnnPropParams::init(97);
  p.out_w = Tensor::zeros({kLstmUnits, 1});
  p.out_b = Tensor::zeros({1});
  RnnPropPolicy policy(p);

  auto q = make_quadratic(3, 2.0, 101);
  RolloutOptions opt;
  opt.steps = 3;
  opt.warmup_steps = 0;
  opt.eval_interval = 0;
  Rng rng(103);
  Tensor before;
  {
    Rng probe(103);
    before = q->init_params(probe)[0];
  }
  RolloutResult r = run_policy(*q, policy, opt, rng);
  CHECK_FALSE(r.diverged);
  CHECK(bitwise_equal(r.final_params[0], before));
}

TEST_CASE("choice policy: zero head blends members half and half") {
  ChoiceParams cp = ChoiceParams::init(107, 2);
  cp.head_w = Tensor::zeros({kLstmUnits, 2});
  cp.head_b = Tensor::zeros({2});
  PoolHyper hp;
  hp.lr = 0.01;
  ChoicePolicy policy(cp, {PoolKind::Adam, PoolKind::Sgd}, hp);
  policy.reset({{3}});

  Rng rng(109);
  Tensor grad({3}, rng.normal_vec(3));
  Tensor blended = policy.update(nullptr, 0, grad, 1);

  PoolState sa = init_pool_state({3}), ss = init_pool_state({3});
  Tensor ua = pool_update(nullptr, PoolKind::Adam, sa, grad, 1, hp).update;
  Tensor us = pool_update(nullptr, PoolKind::Sgd, ss, grad, 1, hp).update;
  for (int64_t i = 0; i < 3; ++i)
    CHECK(blended[i] == doctest::Approx(0.5 * ua[i] + 0.5 * us[i]).epsilon(1e-12));

  std::vector<double> mw = policy.mean_member_weights();
  CHECK(mw[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(mw[1] == doctest::Approx(0.5).epsilon(1e-12));
}

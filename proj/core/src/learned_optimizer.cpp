#include "amalgam/learned_optimizer.hpp"

#include <cmath>

#include "amalgam/errors.hpp"

namespace amalgam {

LstmState lstm_zero_state(int64_t rows, int64_t units) {
  return {Tensor::zeros({rows, units}), Tensor::zeros({rows, units})};
}

LstmState lstm_cell(Tape* tape, const LstmCellParams& p, const Tensor& x, const LstmState& s) {
  int64_t rows = x.shape()[0];
  int64_t units = p.units();
  Tensor pre = add(tape, add(tape, matmul(tape, x, p.wx), matmul(tape, s.h, p.wh)),
                   tile_rows(tape, p.b, rows));
  Tensor gi = sigmoid(tape, slice(tape, pre, 1, 0, units));
  Tensor gf = sigmoid(tape, slice(tape, pre, 1, units, units));
  Tensor gc = tanh(tape, slice(tape, pre, 1, 2 * units, units));
  Tensor go = sigmoid(tape, slice(tape, pre, 1, 3 * units, units));
  Tensor c = add(tape, mul(tape, gf, s.c), mul(tape, gi, gc));
  Tensor h = mul(tape, go, tanh(tape, c));
  return {h, c};
}

LstmCellParams init_lstm(Rng& rng, int64_t in_dim, int64_t units, double forget_bias) {
  double bx = 1.0 / std::sqrt(static_cast<double>(in_dim));
  double bh = 1.0 / std::sqrt(static_cast<double>(units));
  LstmCellParams p;
  p.wx = Tensor({in_dim, 4 * units}, rng.uniform_vec(static_cast<size_t>(in_dim * 4 * units), -bx, bx));
  p.wh = Tensor({units, 4 * units}, rng.uniform_vec(static_cast<size_t>(units * 4 * units), -bh, bh));
  std::vector<double> b(static_cast<size_t>(4 * units), 0.0);
  for (int64_t i = units; i < 2 * units; ++i) b[static_cast<size_t>(i)] = forget_bias;
  p.b = Tensor({4 * units}, std::move(b));
  return p;
}

std::vector<Tensor> RnnPropParams::flatten() const {
  return {l1.wx, l1.wh, l1.b, l2.wx, l2.wh, l2.b, out_w, out_b};
}

RnnPropParams RnnPropParams::unflatten(const std::vector<Tensor>& ts) {
  if (ts.size() != 8) throw ConfigError("rnnprop: expected 8 parameter tensors");
  RnnPropParams p;
  p.l1 = {ts[0], ts[1], ts[2]};
  p.l2 = {ts[3], ts[4], ts[5]};
  p.out_w = ts[6];
  p.out_b = ts[7];
  return p;
}

RnnPropParams RnnPropParams::init(uint64_t seed) {
  Rng rng(derive_seed(seed, "rnnprop_init"));
  RnnPropParams p;
  p.l1 = init_lstm(rng, 2, kLstmUnits);
  p.l2 = init_lstm(rng, kLstmUnits, kLstmUnits);
  double bo = 1.0 / std::sqrt(static_cast<double>(kLstmUnits));
  p.out_w = Tensor({kLstmUnits, 1}, rng.uniform_vec(static_cast<size_t>(kLstmUnits), -bo, bo));
  p.out_b = Tensor::zeros({1});
  return p;
}

int64_t rnnprop_param_count() {
  int64_t n = 0;
  for (const Tensor& t : RnnPropParams::init(0).flatten()) n += t.size();
  return n;
}

CoordState CoordState::zero(int64_t n, int64_t units) {
  CoordState s;
  s.m = Tensor::zeros({n, 1});
  s.v = Tensor::zeros({n, 1});
  s.s1 = lstm_zero_state(n, units);
  s.s2 = lstm_zero_state(n, units);
  s.step = 0;
  return s;
}

void CoordState::detach() {
  m = m.detached();
  v = v.detached();
  s1.h = s1.h.detached();
  s1.c = s1.c.detached();
  s2.h = s2.h.detached();
  s2.c = s2.c.detached();
}

FeaturePair rnnprop_features(Tape* tape, const Tensor& g, CoordState& state,
                             const RnnPropHyper& hp) {
  if (g.rank() != 2 || g.shape()[1] != 1)
    throw ShapeError("features: expected a column (n, 1), got " + shape_str(g.shape()));
  state.step += 1;
  Tensor m_new = add(tape, mul_scalar(tape, state.m, hp.beta1), mul_scalar(tape, g, 1.0 - hp.beta1));
  Tensor v_new = add(tape, mul_scalar(tape, state.v, hp.beta2),
                     mul_scalar(tape, square(tape, g), 1.0 - hp.beta2));
  double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  Tensor m_hat = mul_scalar(tape, m_new, 1.0 / bc1);
  Tensor v_hat = mul_scalar(tape, v_new, 1.0 / bc2);
  Tensor denom = add_scalar(tape, sqrt(tape, v_hat), hp.eps);
  state.m = m_new;
  state.v = v_new;
  return {div(tape, m_hat, denom), div(tape, g, denom)};
}

Tensor rnnprop_step(Tape* tape, const RnnPropParams& p, const Tensor& grad, CoordState& state,
                    const RnnPropHyper& hp) {
  int64_t n = grad.size();
  Tensor g = reshape(tape, grad, {n, 1});
  FeaturePair f = rnnprop_features(tape, g, state, hp);
  Tensor x = concat(tape, {f.adam_dir, f.rmsprop_dir}, 1);
  state.s1 = lstm_cell(tape, p.l1, x, state.s1);
  state.s2 = lstm_cell(tape, p.l2, state.s1.h, state.s2);
  Tensor pre = add(tape, matmul(tape, state.s2.h, p.out_w), tile_rows(tape, p.out_b, n));
  return reshape(tape, tanh(tape, pre), grad.shape());
}

std::vector<Tensor> ChoiceParams::flatten() const {
  return {l1.wx, l1.wh, l1.b, l2.wx, l2.wh, l2.b, head_w, head_b};
}

ChoiceParams ChoiceParams::unflatten(const std::vector<Tensor>& ts) {
  if (ts.size() != 8) throw ConfigError("choice: expected 8 parameter tensors");
  ChoiceParams p;
  p.l1 = {ts[0], ts[1], ts[2]};
  p.l2 = {ts[3], ts[4], ts[5]};
  p.head_w = ts[6];
  p.head_b = ts[7];
  return p;
}

ChoiceParams ChoiceParams::init(uint64_t seed, int64_t pool_size) {
  if (pool_size < 1) throw ConfigError("choice: pool must be nonempty");
  Rng rng(derive_seed(seed, "choice_init"));
  ChoiceParams p;
  p.l1 = init_lstm(rng, pool_size + 6, kLstmUnits);
  p.l2 = init_lstm(rng, kLstmUnits, kLstmUnits);
  double bh = 1.0 / std::sqrt(static_cast<double>(kLstmUnits));
  p.head_w =
      Tensor({kLstmUnits, pool_size}, rng.uniform_vec(static_cast<size_t>(kLstmUnits * pool_size), -bh, bh));
  p.head_b = Tensor::zeros({pool_size});
  return p;
}

int64_t choice_param_count(int64_t pool_size) {
  int64_t n = 0;
  for (const Tensor& t : ChoiceParams::init(0, pool_size).flatten()) n += t.size();
  return n;
}

ChoiceResult choice_forward(Tape* tape, const ChoiceParams& p,
                            const std::vector<Tensor>& pool_updates, int64_t step, int64_t ndim,
                            CoordState& state) {
  if (pool_updates.empty()) throw Error("choice: empty pool");
  if (static_cast<int64_t>(pool_updates.size()) != p.pool_size())
    throw ShapeError("choice: " + std::to_string(pool_updates.size()) +
                     " candidate updates for a head of width " + std::to_string(p.pool_size()));
  if (ndim < 0 || ndim > 4)
    throw Error("choice: tensor rank " + std::to_string(ndim) + " outside the one-hot range [0, 4]");
  const Shape& shape = pool_updates[0].shape();
  for (const Tensor& u : pool_updates)
    if (u.shape() != shape)
      throw ShapeError("choice: pool updates differ in shape: " + shape_str(shape) + " vs " +
                       shape_str(u.shape()));
  int64_t n = shape_numel(shape);

  std::vector<Tensor> cols;
  cols.reserve(pool_updates.size() + 2);
  for (const Tensor& u : pool_updates) cols.push_back(reshape(tape, u, {n, 1}));
  // Bounded time encoding and the tensor-rank one-hot enter as constants:
  // they carry no gradient.
  cols.push_back(Tensor::full({n, 1}, std::tanh(static_cast<double>(step) / 100.0)));
  std::vector<double> oh(static_cast<size_t>(n) * 5, 0.0);
  for (int64_t r = 0; r < n; ++r) oh[static_cast<size_t>(r * 5 + ndim)] = 1.0;
  cols.push_back(Tensor({n, 5}, std::move(oh)));

  Tensor x = concat(tape, cols, 1);
  state.s1 = lstm_cell(tape, p.l1, x, state.s1);
  state.s2 = lstm_cell(tape, p.l2, state.s1.h, state.s2);
  Tensor logits = add(tape, matmul(tape, state.s2.h, p.head_w), tile_rows(tape, p.head_b, n));
  Tensor w = row_softmax(tape, logits);

  Tensor combined;
  for (size_t j = 0; j < pool_updates.size(); ++j) {
    Tensor term = mul(tape, slice(tape, w, 1, static_cast<int64_t>(j), 1), cols[j]);
    combined = j == 0 ? term : add(tape, combined, term);
  }
  ChoiceResult out;
  out.weights = w;
  out.update = reshape(tape, combined, shape);
  return out;
}

RnnPropPolicy::RnnPropPolicy(RnnPropParams params, RnnPropHyper hp)
    : params_(std::move(params)), hp_(hp) {}

void RnnPropPolicy::reset(const std::vector<Shape>& shapes) {
  states_.clear();
  states_.reserve(shapes.size());
  for (const Shape& s : shapes) states_.push_back(CoordState::zero(shape_numel(s)));
}

Tensor RnnPropPolicy::update(Tape* tape, size_t i, const Tensor& grad, int64_t) {
  return rnnprop_step(tape, params_, grad, states_.at(i), hp_);
}

ChoicePolicy::ChoicePolicy(ChoiceParams params, std::vector<PoolKind> members,
                           std::vector<PoolHyper> member_hps, RnnPropHyper hp)
    : params_(std::move(params)), members_(std::move(members)), member_hps_(std::move(member_hps)),
      hp_(hp) {
  if (members_.empty()) throw ConfigError("choice policy: pool must be nonempty");
  if (members_.size() != member_hps_.size())
    throw ConfigError("choice policy: " + std::to_string(members_.size()) + " members but " +
                      std::to_string(member_hps_.size()) + " hyperparameter sets");
  if (static_cast<int64_t>(members_.size()) != params_.pool_size())
    throw ConfigError("choice policy: " + std::to_string(members_.size()) +
                      " members but a head of width " + std::to_string(params_.pool_size()));
}

ChoicePolicy::ChoicePolicy(ChoiceParams params, std::vector<PoolKind> members, PoolHyper member_hp,
                           RnnPropHyper hp)
    : ChoicePolicy(std::move(params), members, std::vector<PoolHyper>(members.size(), member_hp),
                   hp) {}

void ChoicePolicy::reset(const std::vector<Shape>& shapes) {
  shapes_ = shapes;
  states_.clear();
  for (const Shape& s : shapes) states_.push_back(CoordState::zero(shape_numel(s)));
  member_states_.assign(members_.size(), {});
  for (size_t j = 0; j < members_.size(); ++j)
    for (const Shape& s : shapes) member_states_[j].push_back(init_pool_state(s));
  weight_sums_.assign(members_.size(), 0.0);
  weight_rows_ = 0;
}

Tensor ChoicePolicy::update(Tape* tape, size_t i, const Tensor& grad, int64_t step) {
  std::vector<Tensor> proposals;
  proposals.reserve(members_.size());
  for (size_t j = 0; j < members_.size(); ++j) {
    PoolUpdateResult r =
        pool_update(tape, members_[j], member_states_[j].at(i), grad, step, member_hps_[j]);
    member_states_[j][i] = r.state;
    proposals.push_back(r.update);
  }
  int64_t ndim = static_cast<int64_t>(shapes_.at(i).size());
  ChoiceResult res = choice_forward(tape, params_, proposals, step, ndim, states_.at(i));

  int64_t rows = res.weights.shape()[0];
  for (int64_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < members_.size(); ++j)
      weight_sums_[j] += res.weights[r * static_cast<int64_t>(members_.size()) + static_cast<int64_t>(j)];
  weight_rows_ += rows;

  return res.update;
}

std::vector<double> ChoicePolicy::mean_member_weights() const {
  std::vector<double> out(weight_sums_.size(), 0.0);
  if (weight_rows_ == 0) return out;
  for (size_t j = 0; j < out.size(); ++j)
    out[j] = weight_sums_[j] / static_cast<double>(weight_rows_);
  return out;
}

}  // namespace amalgam

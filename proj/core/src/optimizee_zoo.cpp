#include "amalgam/optimizee_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "amalgam/errors.hpp"

namespace amalgam {

namespace {

Tensor gather_rows(const Tensor& data, const std::vector<int64_t>& idx) {
  int64_t n = data.shape()[0];
  int64_t row = data.size() / n;
  Shape out_shape = data.shape();
  out_shape[0] = static_cast<int64_t>(idx.size());
  std::vector<double> out(static_cast<size_t>(row) * idx.size());
  for (size_t k = 0; k < idx.size(); ++k) {
    const double* src = data.data() + idx[k] * row;
    std::copy(src, src + row, out.begin() + static_cast<int64_t>(k) * row);
  }
  return Tensor(out_shape, std::move(out));
}

Tensor one_hot(const std::vector<int64_t>& labels, int64_t classes) {
  std::vector<double> y(labels.size() * static_cast<size_t>(classes), 0.0);
  for (size_t i = 0; i < labels.size(); ++i)
    y[i * static_cast<size_t>(classes) + static_cast<size_t>(labels[i])] = 1.0;
  return Tensor({static_cast<int64_t>(labels.size()), classes}, std::move(y));
}

/// x @ w + bias, the bias tiled across rows through ones-matmul so the whole
/// expression stays on the tape.
Tensor dense(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor xw = matmul(tape, x, w);
  return add(tape, xw, tile_rows(tape, b, x.shape()[0]));
}

/// x: (B, C, H, W) plus a per-channel bias (C,), tiled via two matmuls.
Tensor add_channel_bias(Tape* tape, const Tensor& x, const Tensor& b) {
  int64_t bsz = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor bc = matmul(tape, Tensor::ones({bsz, 1}), reshape(tape, b, {1, c}));
  Tensor tiled = matmul(tape, reshape(tape, bc, {bsz * c, 1}), Tensor::ones({1, h * w}));
  return add(tape, x, reshape(tape, tiled, {bsz, c, h, w}));
}

Tensor normal_tensor(Rng& rng, Shape shape, double std) {
  return Tensor(shape, rng.normal_vec(static_cast<size_t>(shape_numel(shape)), 0.0, std));
}

}  // namespace

DatasetSource::DatasetSource(Tensor train_x, std::vector<int64_t> train_labels, Tensor val_x,
                             std::vector<int64_t> val_labels, int64_t classes, int64_t batch_size)
    : train_x_(std::move(train_x)),
      train_labels_(std::move(train_labels)),
      val_x_(std::move(val_x)),
      val_labels_(std::move(val_labels)),
      classes_(classes),
      batch_size_(batch_size) {
  if (classes_ < 2) throw ConfigError("dataset: need at least 2 classes");
  if (train_x_.shape().empty() || train_x_.shape()[0] != static_cast<int64_t>(train_labels_.size()))
    throw ShapeError("dataset: train inputs " + shape_str(train_x_.shape()) + " do not pair with " +
                     std::to_string(train_labels_.size()) + " labels");
  if (val_x_.shape().empty() || val_x_.shape()[0] != static_cast<int64_t>(val_labels_.size()))
    throw ShapeError("dataset: validation inputs " + shape_str(val_x_.shape()) +
                     " do not pair with " + std::to_string(val_labels_.size()) + " labels");
  if (batch_size_ < 1 || batch_size_ > train_size())
    throw ConfigError("dataset: batch size " + std::to_string(batch_size_) +
                      " outside [1, " + std::to_string(train_size()) + "]");
  for (int64_t l : train_labels_)
    if (l < 0 || l >= classes_)
      throw ConfigError("dataset: label " + std::to_string(l) + " outside [0, " +
                        std::to_string(classes_) + ")");
}

Batch DatasetSource::next_batch(Rng& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(batch_size_));
  for (int64_t k = 0; k < batch_size_; ++k) {
    if (pos_ >= order_.size()) {
      order_.resize(static_cast<size_t>(train_size()));
      for (int64_t i = 0; i < train_size(); ++i) order_[static_cast<size_t>(i)] = i;
      std::shuffle(order_.begin(), order_.end(), rng.engine());
      pos_ = 0;
    }
    idx[static_cast<size_t>(k)] = order_[pos_++];
  }
  Batch b;
  b.x = gather_rows(train_x_, idx);
  b.labels.reserve(idx.size());
  for (int64_t i : idx) b.labels.push_back(train_labels_[static_cast<size_t>(i)]);
  b.y = one_hot(b.labels, classes_);
  return b;
}

Batch DatasetSource::validation_batch() const {
  Batch b;
  b.x = val_x_;
  b.labels = val_labels_;
  b.y = one_hot(val_labels_, classes_);
  return b;
}

Shape DatasetSource::sample_shape() const {
  Shape s(train_x_.shape().begin() + 1, train_x_.shape().end());
  return s;
}

std::shared_ptr<DatasetSource> synth_classification(int64_t n, int64_t dim, int64_t classes,
                                                    double separation, uint64_t seed,
                                                    int64_t batch_size) {
  if (n < classes) throw ConfigError("synth_classification: need at least one sample per class");
  if (dim < 1 || classes < 2) throw ConfigError("synth_classification: dim and classes too small");
  if (separation < 0) throw ConfigError("synth_classification: separation must be non-negative");
  Rng rng(derive_seed(seed, "synth_classification"));

  // One unit direction per class, scaled out to the requested separation.
  std::vector<std::vector<double>> means(static_cast<size_t>(classes));
  for (auto& mu : means) {
    mu = rng.normal_vec(static_cast<size_t>(dim));
    double norm = 0.0;
    for (double v : mu) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : mu) v = (norm > 0 ? v / norm : 0.0) * separation;
  }

  std::vector<double> xs(static_cast<size_t>(n * dim));
  std::vector<int64_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int64_t c = i % classes;
    labels[static_cast<size_t>(i)] = c;
    for (int64_t d = 0; d < dim; ++d)
      xs[static_cast<size_t>(i * dim + d)] = means[static_cast<size_t>(c)][static_cast<size_t>(d)] +
                                             rng.normal();
  }

  int64_t n_val = std::max<int64_t>(1, n / 5);
  int64_t n_train = n - n_val;
  if (n_train < 1) throw ConfigError("synth_classification: too few samples to split");

  Tensor train_x({n_train, dim},
                 std::vector<double>(xs.begin(), xs.begin() + n_train * dim));
  Tensor val_x({n_val, dim}, std::vector<double>(xs.begin() + n_train * dim, xs.end()));
  std::vector<int64_t> train_l(labels.begin(), labels.begin() + n_train);
  std::vector<int64_t> val_l(labels.begin() + n_train, labels.end());
  return std::make_shared<DatasetSource>(train_x, std::move(train_l), val_x, std::move(val_l),
                                         classes, std::min(batch_size, n_train));
}

QuadraticProblem::QuadraticProblem(int64_t dim, double conditioning, uint64_t seed) : dim_(dim) {
  if (dim < 1) throw ConfigError("quadratic: dim must be at least 1");
  if (conditioning < 1.0) throw ConfigError("quadratic: conditioning must be at least 1");
  Rng rng(derive_seed(seed, "quadratic"));

  // Random orthogonal basis via Gram-Schmidt on a Gaussian matrix.
  std::vector<std::vector<double>> q(static_cast<size_t>(dim));
  for (int64_t i = 0; i < dim; ++i) {
    std::vector<double> v = rng.normal_vec(static_cast<size_t>(dim));
    for (int pass = 0; pass < 2; ++pass)
      for (int64_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (int64_t k = 0; k < dim; ++k) dot += v[static_cast<size_t>(k)] * q[static_cast<size_t>(j)][static_cast<size_t>(k)];
        for (int64_t k = 0; k < dim; ++k) v[static_cast<size_t>(k)] -= dot * q[static_cast<size_t>(j)][static_cast<size_t>(k)];
      }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    q[static_cast<size_t>(i)] = std::move(v);
  }

  std::vector<double> lam(static_cast<size_t>(dim), 1.0);
  for (int64_t i = 0; i < dim; ++i)
    lam[static_cast<size_t>(i)] =
        dim == 1 ? 1.0 : 1.0 + (conditioning - 1.0) * static_cast<double>(i) / static_cast<double>(dim - 1);

  std::vector<double> a(static_cast<size_t>(dim * dim), 0.0);
  for (int64_t i = 0; i < dim; ++i)
    for (int64_t j = 0; j < dim; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < dim; ++k)
        s += q[static_cast<size_t>(k)][static_cast<size_t>(i)] * lam[static_cast<size_t>(k)] *
             q[static_cast<size_t>(k)][static_cast<size_t>(j)];
      a[static_cast<size_t>(i * dim + j)] = s;
    }
  // Force exact symmetry so the gradient A*theta is exactly the loss gradient.
  for (int64_t i = 0; i < dim; ++i)
    for (int64_t j = i + 1; j < dim; ++j) {
      double m = 0.5 * (a[static_cast<size_t>(i * dim + j)] + a[static_cast<size_t>(j * dim + i)]);
      a[static_cast<size_t>(i * dim + j)] = m;
      a[static_cast<size_t>(j * dim + i)] = m;
    }
  a_ = Tensor({dim, dim}, std::move(a));
}

std::vector<Shape> QuadraticProblem::param_shapes() const { return {Shape{dim_}}; }

std::vector<Tensor> QuadraticProblem::init_params(Rng& rng) const {
  return {Tensor({dim_}, rng.normal_vec(static_cast<size_t>(dim_)))};
}

Batch QuadraticProblem::sample_batch(Rng&) const {
  return Batch{Tensor::scalar(0.0), Tensor::scalar(0.0), {}};
}

Tensor QuadraticProblem::loss(Tape* tape, const std::vector<Tensor>& params, const Batch&) const {
  Tensor theta = reshape(tape, params[0], {dim_, 1});
  Tensor a_theta = matmul(tape, a_, theta);
  return mul_scalar(tape, sum(tape, mul(tape, theta, a_theta)), 0.5);
}

double QuadraticProblem::validation_loss(const std::vector<Tensor>& params) const {
  return loss(nullptr, params, Batch{}).item();
}

std::vector<Tensor> QuadraticProblem::taped_grad(Tape* tape, const std::vector<Tensor>& params,
                                                 const Batch&) const {
  Tensor theta = reshape(tape, params[0], {dim_, 1});
  return {reshape(tape, matmul(tape, a_, theta), {dim_})};
}

std::unique_ptr<QuadraticProblem> make_quadratic(int64_t dim, double conditioning, uint64_t seed) {
  return std::make_unique<QuadraticProblem>(dim, conditioning, seed);
}

namespace {

class MlpProblem : public Optimizee {
 public:
  MlpProblem(int64_t hidden, int64_t in_dim, int64_t classes, uint64_t seed,
             std::shared_ptr<DatasetSource> source)
      : hidden_(hidden), in_dim_(in_dim), classes_(classes), seed_(seed), source_(std::move(source)) {
    if (hidden_ < 1 || in_dim_ < 1 || classes_ < 2)
      throw ConfigError("mlp: dimensions must be positive (classes at least 2)");
    if (source_) {
      Shape s = source_->sample_shape();
      if (shape_numel(s) != in_dim_)
        throw ConfigError("mlp: dataset samples have " + std::to_string(shape_numel(s)) +
                          " features but the model expects " + std::to_string(in_dim_));
      if (source_->classes() != classes_)
        throw ConfigError("mlp: dataset has " + std::to_string(source_->classes()) +
                          " classes but the model expects " + std::to_string(classes_));
    }
  }

  std::vector<Shape> param_shapes() const override {
    return {Shape{in_dim_, hidden_}, Shape{hidden_}, Shape{hidden_, classes_}, Shape{classes_}};
  }

  std::vector<Tensor> init_params(Rng& rng) const override {
    Rng local(derive_seed(seed_, "mlp_init", rng.next_u64()));
    return {normal_tensor(local, {in_dim_, hidden_}, 1.0 / std::sqrt(static_cast<double>(in_dim_))),
            Tensor::zeros({hidden_}),
            normal_tensor(local, {hidden_, classes_}, 1.0 / std::sqrt(static_cast<double>(hidden_))),
            Tensor::zeros({classes_})};
  }

  Batch sample_batch(Rng& rng) const override {
    if (!source_) throw Error("mlp: no dataset attached");
    return source_->next_batch(rng);
  }

  Tensor forward(Tape* tape, const std::vector<Tensor>& params, const Tensor& x) const override {
    Tensor flat = x.rank() == 2 ? x : reshape(nullptr, x, {x.shape()[0], x.size() / x.shape()[0]});
    Tensor h = sigmoid(tape, dense(tape, flat, params[0], params[1]));
    return dense(tape, h, params[2], params[3]);
  }

  Tensor loss(Tape* tape, const std::vector<Tensor>& params, const Batch& batch) const override {
    return softmax_cross_entropy(tape, forward(tape, params, batch.x), batch.y);
  }

  double validation_loss(const std::vector<Tensor>& params) const override {
    if (!source_) throw Error("mlp: no dataset attached");
    return loss(nullptr, params, source_->validation_batch()).item();
  }

 private:
  int64_t hidden_, in_dim_, classes_;
  uint64_t seed_;
  std::shared_ptr<DatasetSource> source_;
};

class CnnProblem : public Optimizee {
 public:
  CnnProblem(std::vector<int64_t> channels, int64_t classes, uint64_t seed,
             std::shared_ptr<DatasetSource> source, int64_t h, int64_t w, int64_t ch)
      : channels_(std::move(channels)), classes_(classes), seed_(seed), source_(std::move(source)),
        h_(h), w_(w), ch_(ch) {
    if (channels_.size() != 2 || channels_[0] < 1 || channels_[1] < 1)
      throw ConfigError("cnn: expects exactly two positive channel counts");
    if (classes_ < 2) throw ConfigError("cnn: need at least 2 classes");
    h1_ = h_ - 2;
    w1_ = w_ - 2;
    if (h1_ < 2 || w1_ < 2)
      throw ShapeError("cnn: image " + std::to_string(h_) + "x" + std::to_string(w_) +
                       " too small for the conv3-pool-conv5-pool stack (need at least 14x14)");
    p1h_ = h1_ / 2;
    p1w_ = w1_ / 2;
    h2_ = p1h_ - 4;
    w2_ = p1w_ - 4;
    if (h2_ < 2 || w2_ < 2)
      throw ShapeError("cnn: image " + std::to_string(h_) + "x" + std::to_string(w_) +
                       " too small for the conv3-pool-conv5-pool stack (need at least 14x14)");
    p2h_ = h2_ / 2;
    p2w_ = w2_ / 2;
    flat_ = channels_[1] * p2h_ * p2w_;
    if (source_) {
      Shape s = source_->sample_shape();
      if (s != Shape{ch_, h_, w_})
        throw ConfigError("cnn: dataset samples " + shape_str(s) + " do not match image shape " +
                          shape_str({ch_, h_, w_}));
      if (source_->classes() != classes_)
        throw ConfigError("cnn: dataset has " + std::to_string(source_->classes()) +
                          " classes but the model expects " + std::to_string(classes_));
    }
  }

  std::vector<Shape> param_shapes() const override {
    return {Shape{channels_[0], ch_, 3, 3}, Shape{channels_[0]},
            Shape{channels_[1], channels_[0], 5, 5}, Shape{channels_[1]},
            Shape{flat_, classes_}, Shape{classes_}};
  }

  std::vector<Tensor> init_params(Rng& rng) const override {
    Rng local(derive_seed(seed_, "cnn_init", rng.next_u64()));
    double f1 = std::sqrt(static_cast<double>(ch_ * 9));
    double f2 = std::sqrt(static_cast<double>(channels_[0] * 25));
    double f3 = std::sqrt(static_cast<double>(flat_));
    return {normal_tensor(local, {channels_[0], ch_, 3, 3}, 1.0 / f1), Tensor::zeros({channels_[0]}),
            normal_tensor(local, {channels_[1], channels_[0], 5, 5}, 1.0 / f2),
            Tensor::zeros({channels_[1]}),
            normal_tensor(local, {flat_, classes_}, 1.0 / f3), Tensor::zeros({classes_})};
  }

  Batch sample_batch(Rng& rng) const override {
    if (!source_) throw Error("cnn: no dataset attached");
    return source_->next_batch(rng);
  }

  Tensor forward(Tape* tape, const std::vector<Tensor>& params, const Tensor& x) const override {
    Tensor c1 = relu(tape, add_channel_bias(tape, conv2d(tape, x, params[0]), params[1]));
    Tensor p1 = maxpool2x2(tape, c1);
    Tensor c2 = relu(tape, add_channel_bias(tape, conv2d(tape, p1, params[2]), params[3]));
    Tensor p2 = maxpool2x2(tape, c2);
    Tensor flat = reshape(tape, p2, {x.shape()[0], flat_});
    return dense(tape, flat, params[4], params[5]);
  }

  Tensor loss(Tape* tape, const std::vector<Tensor>& params, const Batch& batch) const override {
    return softmax_cross_entropy(tape, forward(tape, params, batch.x), batch.y);
  }

  double validation_loss(const std::vector<Tensor>& params) const override {
    if (!source_) throw Error("cnn: no dataset attached");
    return loss(nullptr, params, source_->validation_batch()).item();
  }

 private:
  std::vector<int64_t> channels_;
  int64_t classes_;
  uint64_t seed_;
  std::shared_ptr<DatasetSource> source_;
  int64_t h_, w_, ch_;
  int64_t h1_ = 0, w1_ = 0, p1h_ = 0, p1w_ = 0, h2_ = 0, w2_ = 0, p2h_ = 0, p2w_ = 0, flat_ = 0;
};

class DpProblem : public Optimizee {
 public:
  DpProblem(std::unique_ptr<Optimizee> inner, double clip, double ratio, uint64_t seed)
      : inner_(std::move(inner)), clip_(clip), ratio_(ratio), seed_(seed) {
    if (clip_ <= 0) throw ConfigError("dp: clip norm must be positive");
    if (ratio_ < 0) throw ConfigError("dp: noise ratio must be non-negative");
  }

  std::vector<Shape> param_shapes() const override { return inner_->param_shapes(); }
  std::vector<Tensor> init_params(Rng& rng) const override { return inner_->init_params(rng); }
  Batch sample_batch(Rng& rng) const override { return inner_->sample_batch(rng); }
  Tensor loss(Tape* tape, const std::vector<Tensor>& params, const Batch& batch) const override {
    return inner_->loss(tape, params, batch);
  }
  double validation_loss(const std::vector<Tensor>& params) const override {
    return inner_->validation_loss(params);
  }
  Tensor forward(Tape* tape, const std::vector<Tensor>& params, const Tensor& x) const override {
    return inner_->forward(tape, params, x);
  }

  LossGrads gradients(const std::vector<Tensor>& params, const Batch& batch) const override {
    if (!batch.x.valid() || batch.x.rank() < 1)
      throw Error("dp: per-sample gradients need a batched input");
    int64_t bsz = batch.x.shape()[0];
    std::vector<Tensor> flat;
    flat.reserve(static_cast<size_t>(bsz));
    double loss_sum = 0.0;
    for (int64_t s = 0; s < bsz; ++s) {
      Batch one;
      one.x = slice(nullptr, batch.x, 0, s, 1);
      if (batch.y.valid() && batch.y.rank() == 2) one.y = slice(nullptr, batch.y, 0, s, 1);
      if (!batch.labels.empty()) one.labels = {batch.labels[static_cast<size_t>(s)]};
      LossGrads lg = inner_->gradients(params, one);
      loss_sum += lg.loss;
      std::vector<Tensor> pieces;
      pieces.reserve(lg.grads.size());
      for (const Tensor& g : lg.grads) pieces.push_back(reshape(nullptr, g, {g.size()}));
      flat.push_back(concat(nullptr, pieces, 0));
    }
    Tensor noised = dp_gradient(flat, clip_, ratio_, derive_seed(seed_, "dp_step", counter_++));
    LossGrads out;
    out.loss = loss_sum / static_cast<double>(bsz);
    int64_t offset = 0;
    for (const Shape& s : inner_->param_shapes()) {
      int64_t n = shape_numel(s);
      out.grads.push_back(reshape(nullptr, slice(nullptr, noised, 0, offset, n), s));
      offset += n;
    }
    return out;
  }

 private:
  std::unique_ptr<Optimizee> inner_;
  double clip_, ratio_;
  uint64_t seed_;
  mutable uint64_t counter_ = 0;
};

}  // namespace

std::unique_ptr<Optimizee> make_mlp(int64_t hidden, int64_t in_dim, int64_t classes, uint64_t seed,
                                    std::shared_ptr<DatasetSource> source) {
  return std::make_unique<MlpProblem>(hidden, in_dim, classes, seed, std::move(source));
}

std::unique_ptr<Optimizee> make_cnn(const std::vector<int64_t>& channels, int64_t classes,
                                    uint64_t seed, std::shared_ptr<DatasetSource> source,
                                    int64_t image_h, int64_t image_w, int64_t image_ch) {
  return std::make_unique<CnnProblem>(channels, classes, seed, std::move(source), image_h, image_w,
                                      image_ch);
}

std::unique_ptr<Optimizee> make_dp(std::unique_ptr<Optimizee> inner, double clip_eps,
                                   double noise_ratio, uint64_t seed) {
  return std::make_unique<DpProblem>(std::move(inner), clip_eps, noise_ratio, seed);
}

Tensor dp_gradient(const std::vector<Tensor>& per_sample_grads, double clip_eps,
                   double noise_ratio, uint64_t seed) {
  if (per_sample_grads.empty()) throw Error("dp_gradient: empty sample list");
  if (clip_eps <= 0) throw Error("dp_gradient: clip_eps must be positive");
  const Shape& shape = per_sample_grads[0].shape();
  for (const Tensor& g : per_sample_grads)
    if (g.shape() != shape)
      throw ShapeError("dp_gradient: sample gradients differ in shape: " + shape_str(shape) +
                       " vs " + shape_str(g.shape()));
  std::vector<double> acc(static_cast<size_t>(shape_numel(shape)), 0.0);
  for (const Tensor& g : per_sample_grads) {
    double norm = 0.0;
    for (int64_t i = 0; i < g.size(); ++i) norm += g[i] * g[i];
    norm = std::sqrt(norm);
    double scale = norm > clip_eps ? clip_eps / norm : 1.0;
    for (int64_t i = 0; i < g.size(); ++i) acc[static_cast<size_t>(i)] += g[i] * scale;
  }
  if (noise_ratio > 0) {
    Rng rng(derive_seed(seed, "dp_noise"));
    for (double& v : acc) v += rng.normal(0.0, noise_ratio * clip_eps);
  }
  double inv = 1.0 / static_cast<double>(per_sample_grads.size());
  for (double& v : acc) v *= inv;
  return Tensor(shape, std::move(acc));
}

IdxData load_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("idx: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 4)
    throw IoError("idx: " + path + " too short for a header (" + std::to_string(bytes.size()) +
                  " bytes)");
  if (bytes[0] != 0 || bytes[1] != 0)
    throw IoError("idx: bad magic in " + path + " (first two bytes must be zero)");
  if (bytes[2] != 0x08)
    throw IoError("idx: unsupported element type 0x" + std::to_string(bytes[2]) + " in " + path +
                  " (only unsigned byte is supported)");
  int rank = bytes[3];
  if (rank < 1) throw IoError("idx: zero-rank array in " + path);
  size_t header = 4 + 4 * static_cast<size_t>(rank);
  if (bytes.size() < header)
    throw IoError("idx: truncated header in " + path + ": expected " + std::to_string(header) +
                  " bytes, found " + std::to_string(bytes.size()));
  Shape dims(static_cast<size_t>(rank));
  int64_t total = 1;
  for (int d = 0; d < rank; ++d) {
    size_t o = 4 + 4 * static_cast<size_t>(d);
    uint32_t v = (static_cast<uint32_t>(bytes[o]) << 24) | (static_cast<uint32_t>(bytes[o + 1]) << 16) |
                 (static_cast<uint32_t>(bytes[o + 2]) << 8) | static_cast<uint32_t>(bytes[o + 3]);
    dims[static_cast<size_t>(d)] = static_cast<int64_t>(v);
    total *= dims[static_cast<size_t>(d)];
  }
  size_t expected = header + static_cast<size_t>(total);
  if (bytes.size() != expected)
    throw IoError("idx: payload size mismatch in " + path + ": expected " +
                  std::to_string(expected) + " bytes, found " + std::to_string(bytes.size()));
  IdxData out;
  out.dims = dims;
  out.values.resize(static_cast<size_t>(total));
  bool scale = rank >= 2;  // image data maps to [0, 1]; labels stay raw
  for (int64_t i = 0; i < total; ++i) {
    double v = static_cast<double>(bytes[header + static_cast<size_t>(i)]);
    out.values[static_cast<size_t>(i)] = scale ? v / 255.0 : v;
  }
  return out;
}

std::shared_ptr<DatasetSource> idx_source(const std::string& images_path,
                                          const std::string& labels_path, int64_t classes,
                                          int64_t batch_size, double val_fraction) {
  IdxData images = load_idx(images_path);
  IdxData labels = load_idx(labels_path);
  if (images.dims.size() < 2)
    throw IoError("idx: " + images_path + " holds rank-" + std::to_string(images.dims.size()) +
                  " data, expected images");
  if (labels.dims.size() != 1)
    throw IoError("idx: " + labels_path + " holds rank-" + std::to_string(labels.dims.size()) +
                  " data, expected labels");
  int64_t n = images.dims[0];
  if (labels.dims[0] != n)
    throw IoError("idx: " + std::to_string(n) + " images but " + std::to_string(labels.dims[0]) +
                  " labels");
  Shape row_shape;
  if (images.dims.size() == 3)
    row_shape = {1, images.dims[1], images.dims[2]};  // add the channel axis
  else
    row_shape = Shape(images.dims.begin() + 1, images.dims.end());
  int64_t row = shape_numel(row_shape);
  int64_t n_val = std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(n) * val_fraction)));
  if (n_val >= n) throw ConfigError("idx: validation fraction leaves no training data");
  int64_t n_train = n - n_val;

  Shape train_shape = row_shape;
  train_shape.insert(train_shape.begin(), n_train);
  Shape val_shape = row_shape;
  val_shape.insert(val_shape.begin(), n_val);
  Tensor train_x(train_shape, std::vector<double>(images.values.begin(),
                                                  images.values.begin() + n_train * row));
  Tensor val_x(val_shape,
               std::vector<double>(images.values.begin() + n_train * row, images.values.end()));
  std::vector<int64_t> train_l, val_l;
  train_l.reserve(static_cast<size_t>(n_train));
  val_l.reserve(static_cast<size_t>(n_val));
  for (int64_t i = 0; i < n_train; ++i) train_l.push_back(static_cast<int64_t>(labels.values[static_cast<size_t>(i)]));
  for (int64_t i = n_train; i < n; ++i) val_l.push_back(static_cast<int64_t>(labels.values[static_cast<size_t>(i)]));
  return std::make_shared<DatasetSource>(train_x, std::move(train_l), val_x, std::move(val_l),
                                         classes, batch_size);
}

int64_t total_params(const Optimizee& problem) {
  int64_t n = 0;
  for (const Shape& s : problem.param_shapes()) n += shape_numel(s);
  return n;
}

double classification_accuracy(const Optimizee& problem, const std::vector<Tensor>& params,
                               const Tensor& x, const std::vector<int64_t>& labels) {
  Tensor logits = problem.forward(nullptr, params, x);
  int64_t n = logits.shape()[0], k = logits.shape()[1];
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    if (best == labels[static_cast<size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace amalgam

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "amalgam/optimizee.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

/// Train/validation split with epoch-permutation batching: every epoch is
/// one full pass over a fresh shuffle, so the per-epoch sample multiset
/// never changes even when epochs end mid-batch. Single consumer; give each
/// replicate its own source.
class DatasetSource {
 public:
  DatasetSource(Tensor train_x, std::vector<int64_t> train_labels, Tensor val_x,
                std::vector<int64_t> val_labels, int64_t classes, int64_t batch_size);

  Batch next_batch(Rng& rng);
  Batch validation_batch() const;

  int64_t classes() const { return classes_; }
  int64_t batch_size() const { return batch_size_; }
  int64_t train_size() const { return static_cast<int64_t>(train_labels_.size()); }
  const Tensor& train_inputs() const { return train_x_; }
  const std::vector<int64_t>& train_labels() const { return train_labels_; }
  const Tensor& validation_inputs() const { return val_x_; }
  const std::vector<int64_t>& validation_labels() const { return val_labels_; }

  /// Feature shape of one sample (input shape without the leading N).
  Shape sample_shape() const;

 private:
  Tensor train_x_;
  std::vector<int64_t> train_labels_;
  Tensor val_x_;
  std::vector<int64_t> val_labels_;
  int64_t classes_;
  int64_t batch_size_;
  std::vector<int64_t> order_;
  size_t pos_ = 0;
};

/// Gaussian blobs, one per class, 80/20 train/validation, round-robin labels
/// (balanced within one sample). Deterministic per seed, byte for byte.
std::shared_ptr<DatasetSource> synth_classification(int64_t n, int64_t dim, int64_t classes,
                                                    double separation, uint64_t seed,
                                                    int64_t batch_size = 32);

/// f(theta) = 0.5 theta' A theta with A symmetric positive definite,
/// eigenvalues spread linearly across [1, conditioning]. Full-batch: every
/// "batch" is the same problem. The gradient A theta is exposed as a taped
/// graph, so unrolls over this problem differentiate exactly.
class QuadraticProblem : public Optimizee {
 public:
  QuadraticProblem(int64_t dim, double conditioning, uint64_t seed);

  std::vector<Shape> param_shapes() const override;
  std::vector<Tensor> init_params(Rng& rng) const override;
  Batch sample_batch(Rng& rng) const override;
  Tensor loss(Tape* tape, const std::vector<Tensor>& params, const Batch& batch) const override;
  double validation_loss(const std::vector<Tensor>& params) const override;
  bool has_taped_grad() const override { return true; }
  std::vector<Tensor> taped_grad(Tape* tape, const std::vector<Tensor>& params,
                                 const Batch& batch) const override;

  const Tensor& matrix() const { return a_; }

 private:
  int64_t dim_;
  Tensor a_;
};

std::unique_ptr<QuadraticProblem> make_quadratic(int64_t dim, double conditioning, uint64_t seed);

/// Two-layer perceptron: in_dim -> hidden (sigmoid) -> classes, softmax
/// cross-entropy loss. Pass a data source to make it trainable; without one
/// it still answers shape/count queries (and loss on explicit batches).
std::unique_ptr<Optimizee> make_mlp(int64_t hidden, int64_t in_dim, int64_t classes, uint64_t seed,
                                    std::shared_ptr<DatasetSource> source = nullptr);

/// Convolution stack: conv3x3 (channels[0]) -> maxpool -> conv5x5
/// (channels[1]) -> maxpool -> dense classes, relu activations, valid
/// padding. Image geometry defaults to 28x28x1.
std::unique_ptr<Optimizee> make_cnn(const std::vector<int64_t>& channels, int64_t classes,
                                    uint64_t seed, std::shared_ptr<DatasetSource> source = nullptr,
                                    int64_t image_h = 28, int64_t image_w = 28,
                                    int64_t image_ch = 1);

/// Per-sample clipped, noised, averaged gradient. Each sample's (flattened)
/// gradient is scaled to l2 norm <= clip_eps, the clipped gradients are
/// summed, Gaussian noise with std = noise_ratio * clip_eps is added to the
/// sum, and the result is divided by the sample count (so the noise on the
/// mean has std noise_ratio * clip_eps / n).
Tensor dp_gradient(const std::vector<Tensor>& per_sample_grads, double clip_eps,
                   double noise_ratio, uint64_t seed);

/// Wraps a problem so its batch gradients go through per-sample clipping and
/// noising (one private tape per sample).
std::unique_ptr<Optimizee> make_dp(std::unique_ptr<Optimizee> inner, double clip_eps,
                                   double noise_ratio, uint64_t seed);

struct IdxData {
  Shape dims;
  std::vector<double> values;
};

/// Reads one array in the big-endian IDX format (unsigned-byte element
/// type). Arrays of rank >= 2 are treated as image data and scaled to
/// [0, 1]; rank-1 arrays are labels and kept as raw values.
IdxData load_idx(const std::string& path);

/// Pairs an IDX image file with an IDX label file into a train/validation
/// source (the last `val_fraction` of rows become the validation split).
std::shared_ptr<DatasetSource> idx_source(const std::string& images_path,
                                          const std::string& labels_path, int64_t classes,
                                          int64_t batch_size, double val_fraction = 0.2);

int64_t total_params(const Optimizee& problem);

/// Fraction of rows whose argmax logit equals the label.
double classification_accuracy(const Optimizee& problem, const std::vector<Tensor>& params,
                               const Tensor& x, const std::vector<int64_t>& labels);

}  // namespace amalgam

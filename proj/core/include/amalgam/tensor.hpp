#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace amalgam {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of 64-bit reals. Values are immutable once
/// constructed; operations always allocate a fresh buffer, so copies are
/// cheap shared views. A tensor may carry a (tape id, node id) pair linking
/// it to the tape that produced it.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool valid() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool is_scalar() const { return size() == 1; }

  const double* data() const { return data_->data(); }
  const std::vector<double>& vec() const { return *data_; }
  double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  /// Value of a single-element tensor.
  double item() const;
  double at(int64_t i, int64_t j) const;

  bool all_finite() const;

  // Tape linkage. node() < 0 means the value is not attached to any tape.
  int node() const { return node_; }
  uint64_t tape_id() const { return tape_id_; }
  Tensor with_node(uint64_t tape_id, int node) const;
  Tensor detached() const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  uint64_t tape_id_ = 0;
  int node_ = -1;
};

}  // namespace amalgam

#include "amalgam/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace amalgam {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match data length " +
                                std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  }
  return (*data_)[0];
}

double Tensor::at(int64_t i, int64_t j) const {
  return (*data_)[static_cast<size_t>(i * shape_[1] + j)];
}

bool Tensor::all_finite() const {
  if (!data_) return true;
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::with_node(uint64_t tape_id, int node) const {
  Tensor t = *this;
  t.tape_id_ = tape_id;
  t.node_ = node;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_id_ = 0;
  t.node_ = -1;
  return t;
}

}  // namespace amalgam

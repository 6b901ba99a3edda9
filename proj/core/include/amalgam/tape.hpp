#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "amalgam/tensor.hpp"

namespace amalgam {

/// Primitive operations the tape knows how to differentiate.
enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  MatMul,
  Conv2d,
  MaxPool2x2,
  Tanh,
  Sigmoid,
  Relu,
  Exp,
  Log,
  Sqrt,
  Square,
  Sum,
  Mean,
  L2Norm,
  Concat,
  Slice,
  SoftmaxXent,
  Reshape,
};

const char* op_name(Op op);

struct OpAttrs {
  int64_t axis = 0;
  int64_t start = 0;
  int64_t len = 0;
  Shape shape;  // reshape target
};

/// One recorded operation: which primitive ran, which earlier nodes (or
/// constants) fed it, and the forward values needed by its backward rule.
struct Node {
  Op op = Op::Leaf;
  std::vector<int> inputs;  // node id per input; -1 when the input was a constant
  std::vector<Tensor> in_values;
  Tensor out_value;
  OpAttrs attrs;
  std::vector<int64_t> aux;  // maxpool: flat input index of each window max
};

/// Records a computation so it can be replayed backwards. Values produced on
/// one tape act as constants on any other tape, which is what lets truncated
/// unrolls cut gradient flow simply by starting a fresh tape.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  uint64_t id() const { return id_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }

  /// Registers a value as a gradient-tracked input of this tape.
  Tensor leaf(const Tensor& value);

  int record(Node node);

 private:
  uint64_t id_;
  std::vector<Node> nodes_;
};

/// Gradients of one scalar tape value with respect to every tape node.
/// Nodes the backward sweep never reached (and tensors that were constants
/// with respect to the tape) report a zero gradient of matching shape.
class GradMap {
 public:
  GradMap(uint64_t tape_id, std::vector<Tensor> grads)
      : tape_id_(tape_id), grads_(std::move(grads)) {}

  Tensor grad(const Tensor& t) const;
  bool reached(const Tensor& t) const;

 private:
  uint64_t tape_id_;
  std::vector<Tensor> grads_;
};

/// Reverse sweep from a scalar value recorded on `tape`.
GradMap backward(const Tape& tape, const Tensor& out);

// Primitive operations. Passing tape == nullptr evaluates without recording,
// which is how constants, finite differences, and detached math are computed.
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor div(Tape* tape, const Tensor& a, const Tensor& b);
Tensor neg(Tape* tape, const Tensor& a);
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernel);
Tensor maxpool2x2(Tape* tape, const Tensor& input);
Tensor tanh(Tape* tape, const Tensor& a);
Tensor sigmoid(Tape* tape, const Tensor& a);
Tensor relu(Tape* tape, const Tensor& a);
Tensor exp(Tape* tape, const Tensor& a);
Tensor log(Tape* tape, const Tensor& a);
Tensor sqrt(Tape* tape, const Tensor& a);
Tensor square(Tape* tape, const Tensor& a);
Tensor sum(Tape* tape, const Tensor& a);
Tensor mean(Tape* tape, const Tensor& a);
Tensor l2_norm(Tape* tape, const Tensor& a);
Tensor concat(Tape* tape, const std::vector<Tensor>& xs, int64_t axis);
Tensor slice(Tape* tape, const Tensor& a, int64_t axis, int64_t start, int64_t len);
Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, const Tensor& labels);
Tensor reshape(Tape* tape, const Tensor& a, Shape shape);

// Compositions of the primitives above (no backward rules of their own).

/// Stacks a length-k row vector into an (m, k) matrix: ones(m,1) @ row.
Tensor tile_rows(Tape* tape, const Tensor& row, int64_t m);

/// Row-wise softmax of an (m, k) matrix, built from exp / matmul / div.
Tensor row_softmax(Tape* tape, const Tensor& z);

Tensor add_scalar(Tape* tape, const Tensor& a, double c);
Tensor mul_scalar(Tape* tape, const Tensor& a, double c);

/// Central-difference check of the tape's gradients. `f` must map the given
/// input tensors (leafed when a tape is supplied) to one scalar. Returns the
/// worst relative error |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
/// over every coordinate of every input.
double grad_check(const std::function<Tensor(Tape*, const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double h = 1e-5);

}  // namespace amalgam

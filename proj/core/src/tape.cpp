#include "amalgam/tape.hpp"

#include <atomic>
#include <cmath>
#include <cstddef>

#include "amalgam/errors.hpp"

namespace amalgam {

namespace {

std::atomic<uint64_t> g_next_tape_id{1};

void require_valid(const char* name, const Tensor& t) {
  if (!t.valid()) throw Error(std::string(name) + ": empty tensor operand");
}

/// Elementwise binary with scalar broadcast: shapes must match exactly, or
/// one operand must hold a single element.
template <class F>
Tensor ew_forward(const char* name, const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(static_cast<size_t>(a.size()));
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = f(a[i], b[i]);
    return Tensor(a.shape(), std::move(out));
  }
  if (b.is_scalar()) {
    double bv = b.item();
    std::vector<double> out(static_cast<size_t>(a.size()));
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = f(a[i], bv);
    return Tensor(a.shape(), std::move(out));
  }
  if (a.is_scalar()) {
    double av = a.item();
    std::vector<double> out(static_cast<size_t>(b.size()));
    for (int64_t i = 0; i < b.size(); ++i) out[static_cast<size_t>(i)] = f(av, b[i]);
    return Tensor(b.shape(), std::move(out));
  }
  throw ShapeError(std::string(name) + ": operand shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " do not match and neither is a scalar");
}

template <class F>
Tensor ew_unary(const Tensor& a, F f) {
  std::vector<double> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = f(a[i]);
  return Tensor(a.shape(), std::move(out));
}

/// Sums a gradient down to a broadcast operand's (single element) shape, or
/// passes it through when shapes already agree.
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  double s = 0.0;
  for (int64_t i = 0; i < g.size(); ++i) s += g[i];
  return Tensor(target, std::vector<double>(1, s));
}

Tensor finish(Tape* tape, Op op, std::vector<Tensor> ins, Tensor out, OpAttrs attrs = {},
              std::vector<int64_t> aux = {}) {
  if (!tape) return out;
  Node n;
  n.op = op;
  n.inputs.reserve(ins.size());
  for (const Tensor& t : ins)
    n.inputs.push_back(t.tape_id() == tape->id() ? t.node() : -1);
  n.in_values = std::move(ins);
  n.out_value = out;
  n.attrs = std::move(attrs);
  n.aux = std::move(aux);
  int id = tape->record(std::move(n));
  return out.with_node(tape->id(), id);
}

// Strides for walking one axis of a row-major tensor: `outer` blocks, each
// holding dims[axis] groups of `inner` contiguous elements.
void axis_strides(const Shape& shape, int64_t axis, int64_t* outer, int64_t* inner) {
  int64_t o = 1, in = 1;
  for (int64_t i = 0; i < axis; ++i) o *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) in *= shape[i];
  *outer = o;
  *inner = in;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::MatMul: return "matmul";
    case Op::Conv2d: return "conv2d";
    case Op::MaxPool2x2: return "maxpool2x2";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Square: return "square";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::L2Norm: return "l2_norm";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::SoftmaxXent: return "softmax_cross_entropy";
    case Op::Reshape: return "reshape";
  }
  return "?";
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

Tensor Tape::leaf(const Tensor& value) {
  require_valid("leaf", value);
  Node n;
  n.op = Op::Leaf;
  n.out_value = value;
  nodes_.push_back(std::move(n));
  return value.with_node(id_, static_cast<int>(nodes_.size()) - 1);
}

int Tape::record(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor GradMap::grad(const Tensor& t) const {
  if (t.tape_id() == tape_id_ && t.node() >= 0 &&
      t.node() < static_cast<int>(grads_.size()) && grads_[static_cast<size_t>(t.node())].valid())
    return grads_[static_cast<size_t>(t.node())];
  return Tensor::zeros(t.shape());
}

bool GradMap::reached(const Tensor& t) const {
  return t.tape_id() == tape_id_ && t.node() >= 0 &&
         t.node() < static_cast<int>(grads_.size()) &&
         grads_[static_cast<size_t>(t.node())].valid();
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  require_valid("add", a);
  require_valid("add", b);
  return finish(tape, Op::Add, {a, b}, ew_forward("add", a, b, [](double x, double y) { return x + y; }));
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  require_valid("sub", a);
  require_valid("sub", b);
  return finish(tape, Op::Sub, {a, b}, ew_forward("sub", a, b, [](double x, double y) { return x - y; }));
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  require_valid("mul", a);
  require_valid("mul", b);
  return finish(tape, Op::Mul, {a, b}, ew_forward("mul", a, b, [](double x, double y) { return x * y; }));
}

Tensor div(Tape* tape, const Tensor& a, const Tensor& b) {
  require_valid("div", a);
  require_valid("div", b);
  return finish(tape, Op::Div, {a, b}, ew_forward("div", a, b, [](double x, double y) { return x / y; }));
}

Tensor neg(Tape* tape, const Tensor& a) {
  require_valid("neg", a);
  return finish(tape, Op::Neg, {a}, ew_unary(a, [](double x) { return -x; }));
}

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  require_valid("matmul", a);
  require_valid("matmul", b);
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError(std::string("matmul: expects rank-2 operands, got ") + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError(std::string("matmul: inner dimensions disagree: ") + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t kk = 0; kk < k; ++kk) {
      double aik = pa[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = pb + kk * n;
      double* crow = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  return finish(tape, Op::MatMul, {a, b}, Tensor({m, n}, std::move(out)));
}

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernel) {
  require_valid("conv2d", input);
  require_valid("conv2d", kernel);
  if (input.rank() != 4 || kernel.rank() != 4)
    throw ShapeError(std::string("conv2d: expects input (batch, in_ch, h, w) and kernel "
                                 "(out_ch, in_ch, kh, kw), got ") +
                     shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  int64_t bsz = input.shape()[0], ci = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  int64_t co = kernel.shape()[0], ci2 = kernel.shape()[1], kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (ci != ci2)
    throw ShapeError(std::string("conv2d: channel mismatch: input ") + shape_str(input.shape()) +
                     " vs kernel " + shape_str(kernel.shape()));
  if (kh > h || kw > w)
    throw ShapeError(std::string("conv2d: kernel ") + shape_str(kernel.shape()) +
                     " larger than input " + shape_str(input.shape()));
  int64_t oh = h - kh + 1, ow = w - kw + 1;
  std::vector<double> out(static_cast<size_t>(bsz * co * oh * ow), 0.0);
  const double* px = input.data();
  const double* pk = kernel.data();
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t ic = 0; ic < ci; ++ic) {
        const double* xc = px + (b * ci + ic) * h * w;
        const double* kc = pk + (oc * ci + ic) * kh * kw;
        double* oc_out = out.data() + (b * co + oc) * oh * ow;
        for (int64_t r = 0; r < oh; ++r)
          for (int64_t p = 0; p < kh; ++p)
            for (int64_t q = 0; q < kw; ++q) {
              double kv = kc[p * kw + q];
              if (kv == 0.0) continue;
              const double* xrow = xc + (r + p) * w + q;
              double* orow = oc_out + r * ow;
              for (int64_t c = 0; c < ow; ++c) orow[c] += kv * xrow[c];
            }
      }
  return finish(tape, Op::Conv2d, {input, kernel}, Tensor({bsz, co, oh, ow}, std::move(out)));
}

Tensor maxpool2x2(Tape* tape, const Tensor& input) {
  require_valid("maxpool2x2", input);
  if (input.rank() != 4)
    throw ShapeError(std::string("maxpool2x2: expects rank-4 input (batch, ch, h, w), got ") +
                     shape_str(input.shape()));
  int64_t bsz = input.shape()[0], ch = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  if (h < 2 || w < 2)
    throw ShapeError(std::string("maxpool2x2: spatial dims must be at least 2, got ") +
                     shape_str(input.shape()));
  int64_t oh = h / 2, ow = w / 2;
  std::vector<double> out(static_cast<size_t>(bsz * ch * oh * ow));
  std::vector<int64_t> arg(out.size());
  const double* px = input.data();
  int64_t o = 0;
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t c = 0; c < ch; ++c) {
      int64_t base = (b * ch + c) * h * w;
      for (int64_t r = 0; r < oh; ++r)
        for (int64_t q = 0; q < ow; ++q) {
          int64_t i00 = base + (2 * r) * w + 2 * q;
          double best = px[i00];
          int64_t best_i = i00;
          int64_t cand[3] = {i00 + 1, i00 + w, i00 + w + 1};
          for (int64_t ci : cand)
            if (px[ci] > best) {
              best = px[ci];
              best_i = ci;
            }
          out[static_cast<size_t>(o)] = best;
          arg[static_cast<size_t>(o)] = best_i;
          ++o;
        }
    }
  return finish(tape, Op::MaxPool2x2, {input}, Tensor({bsz, ch, oh, ow}, std::move(out)), {},
                std::move(arg));
}

Tensor tanh(Tape* tape, const Tensor& a) {
  require_valid("tanh", a);
  return finish(tape, Op::Tanh, {a}, ew_unary(a, [](double x) { return std::tanh(x); }));
}

Tensor sigmoid(Tape* tape, const Tensor& a) {
  require_valid("sigmoid", a);
  return finish(tape, Op::Sigmoid, {a},
                ew_unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }));
}

Tensor relu(Tape* tape, const Tensor& a) {
  require_valid("relu", a);
  return finish(tape, Op::Relu, {a}, ew_unary(a, [](double x) { return x > 0.0 ? x : 0.0; }));
}

Tensor exp(Tape* tape, const Tensor& a) {
  require_valid("exp", a);
  return finish(tape, Op::Exp, {a}, ew_unary(a, [](double x) { return std::exp(x); }));
}

Tensor log(Tape* tape, const Tensor& a) {
  require_valid("log", a);
  for (int64_t i = 0; i < a.size(); ++i)
    if (!(a[i] > 0.0))
      throw DomainError("log: input must be strictly positive, got " + std::to_string(a[i]));
  return finish(tape, Op::Log, {a}, ew_unary(a, [](double x) { return std::log(x); }));
}

Tensor sqrt(Tape* tape, const Tensor& a) {
  require_valid("sqrt", a);
  for (int64_t i = 0; i < a.size(); ++i)
    if (a[i] < 0.0)
      throw DomainError("sqrt: input must be non-negative, got " + std::to_string(a[i]));
  return finish(tape, Op::Sqrt, {a}, ew_unary(a, [](double x) { return std::sqrt(x); }));
}

Tensor square(Tape* tape, const Tensor& a) {
  require_valid("square", a);
  return finish(tape, Op::Square, {a}, ew_unary(a, [](double x) { return x * x; }));
}

Tensor sum(Tape* tape, const Tensor& a) {
  require_valid("sum", a);
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i];
  return finish(tape, Op::Sum, {a}, Tensor::scalar(s));
}

Tensor mean(Tape* tape, const Tensor& a) {
  require_valid("mean", a);
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i];
  return finish(tape, Op::Mean, {a}, Tensor::scalar(s / static_cast<double>(a.size())));
}

Tensor l2_norm(Tape* tape, const Tensor& a) {
  require_valid("l2_norm", a);
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
  return finish(tape, Op::L2Norm, {a}, Tensor::scalar(std::sqrt(s)));
}

Tensor concat(Tape* tape, const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: needs at least one input");
  for (const Tensor& t : xs) require_valid("concat", t);
  const Shape& first = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int64_t>(first.size()))
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(first));
  int64_t total_axis = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != xs[0].rank())
      throw ShapeError(std::string("concat: rank mismatch: ") + shape_str(first) + " vs " +
                       shape_str(t.shape()));
    for (int64_t d = 0; d < t.rank(); ++d)
      if (d != axis && t.shape()[static_cast<size_t>(d)] != first[static_cast<size_t>(d)])
        throw ShapeError(std::string("concat: shapes differ off the concat axis: ") +
                         shape_str(first) + " vs " + shape_str(t.shape()));
    total_axis += t.shape()[static_cast<size_t>(axis)];
  }
  Shape out_shape = first;
  out_shape[static_cast<size_t>(axis)] = total_axis;
  int64_t outer, inner;
  axis_strides(out_shape, axis, &outer, &inner);
  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t offset = 0;
  for (const Tensor& t : xs) {
    int64_t ext = t.shape()[static_cast<size_t>(axis)];
    const double* src = t.data();
    for (int64_t ou = 0; ou < outer; ++ou)
      for (int64_t e = 0; e < ext; ++e)
        for (int64_t in = 0; in < inner; ++in)
          out[static_cast<size_t>((ou * total_axis + offset + e) * inner + in)] =
              src[(ou * ext + e) * inner + in];
    offset += ext;
  }
  OpAttrs attrs;
  attrs.axis = axis;
  return finish(tape, Op::Concat, xs, Tensor(out_shape, std::move(out)), std::move(attrs));
}

Tensor slice(Tape* tape, const Tensor& a, int64_t axis, int64_t start, int64_t len) {
  require_valid("slice", a);
  if (axis < 0 || axis >= a.rank())
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(a.shape()));
  int64_t dim = a.shape()[static_cast<size_t>(axis)];
  if (start < 0 || len < 1 || start + len > dim)
    throw ShapeError("slice: window [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") does not fit axis " + std::to_string(axis) +
                     " of shape " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer, inner;
  axis_strides(a.shape(), axis, &outer, &inner);
  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  const double* src = a.data();
  for (int64_t ou = 0; ou < outer; ++ou)
    for (int64_t e = 0; e < len; ++e)
      for (int64_t in = 0; in < inner; ++in)
        out[static_cast<size_t>((ou * len + e) * inner + in)] =
            src[(ou * dim + start + e) * inner + in];
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.start = start;
  attrs.len = len;
  return finish(tape, Op::Slice, {a}, Tensor(out_shape, std::move(out)), std::move(attrs));
}

Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, const Tensor& labels) {
  require_valid("softmax_cross_entropy", logits);
  require_valid("softmax_cross_entropy", labels);
  if (logits.rank() != 2 || labels.shape() != logits.shape())
    throw ShapeError(std::string("softmax_cross_entropy: expects matching rank-2 logits and "
                                 "labels, got ") +
                     shape_str(logits.shape()) + " and " + shape_str(labels.shape()));
  int64_t bsz = logits.shape()[0], k = logits.shape()[1];
  double total = 0.0;
  for (int64_t b = 0; b < bsz; ++b) {
    const double* z = logits.data() + b * k;
    const double* l = labels.data() + b * k;
    double m = z[0];
    for (int64_t j = 1; j < k; ++j) m = std::max(m, z[j]);
    double s = 0.0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(z[j] - m);
    double lse = m + std::log(s);
    for (int64_t j = 0; j < k; ++j) total += l[j] * (lse - z[j]);
  }
  return finish(tape, Op::SoftmaxXent, {logits, labels},
                Tensor::scalar(total / static_cast<double>(bsz)));
}

Tensor reshape(Tape* tape, const Tensor& a, Shape shape) {
  require_valid("reshape", a);
  if (shape_numel(shape) != a.size())
    throw ShapeError(std::string("reshape: cannot view ") + shape_str(a.shape()) + " as " +
                     shape_str(shape) + " (element counts differ)");
  OpAttrs attrs;
  attrs.shape = shape;
  return finish(tape, Op::Reshape, {a}, Tensor(std::move(shape), a.vec()), std::move(attrs));
}

Tensor tile_rows(Tape* tape, const Tensor& row, int64_t m) {
  Tensor flat = row.rank() == 2 && row.shape()[0] == 1
                    ? row
                    : reshape(tape, row, {1, row.size()});
  return matmul(tape, Tensor::ones({m, 1}), flat);
}

Tensor row_softmax(Tape* tape, const Tensor& z) {
  require_valid("row_softmax", z);
  if (z.rank() != 2)
    throw ShapeError(std::string("row_softmax: expects rank-2 input, got ") + shape_str(z.shape()));
  int64_t m = z.shape()[0], k = z.shape()[1];
  // Subtracting each row's max (held constant) leaves the softmax and its
  // gradient unchanged while keeping exp() in range.
  std::vector<double> mx(static_cast<size_t>(m * k));
  for (int64_t i = 0; i < m; ++i) {
    double best = z[i * k];
    for (int64_t j = 1; j < k; ++j) best = std::max(best, z[i * k + j]);
    for (int64_t j = 0; j < k; ++j) mx[static_cast<size_t>(i * k + j)] = best;
  }
  Tensor shifted = sub(tape, z, Tensor({m, k}, std::move(mx)));
  Tensor e = exp(tape, shifted);
  Tensor row_sum = matmul(tape, e, Tensor::ones({k, 1}));          // (m, 1)
  Tensor denom = matmul(tape, row_sum, Tensor::ones({1, k}));      // (m, k)
  return div(tape, e, denom);
}

Tensor add_scalar(Tape* tape, const Tensor& a, double c) {
  return add(tape, a, Tensor::scalar(c));
}

Tensor mul_scalar(Tape* tape, const Tensor& a, double c) {
  return mul(tape, a, Tensor::scalar(c));
}

namespace {

void accumulate(std::vector<Tensor>& grads, int id, const Tensor& g) {
  if (id < 0) return;
  Tensor& slot = grads[static_cast<size_t>(id)];
  slot = slot.valid() ? add(nullptr, slot, g) : g;
}

void backward_node(const Node& n, const Tensor& g, std::vector<Tensor>& grads) {
  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::Add: {
      accumulate(grads, n.inputs[0], reduce_to(g, n.in_values[0].shape()));
      accumulate(grads, n.inputs[1], reduce_to(g, n.in_values[1].shape()));
      return;
    }
    case Op::Sub: {
      accumulate(grads, n.inputs[0], reduce_to(g, n.in_values[0].shape()));
      accumulate(grads, n.inputs[1], reduce_to(neg(nullptr, g), n.in_values[1].shape()));
      return;
    }
    case Op::Mul: {
      const Tensor& a = n.in_values[0];
      const Tensor& b = n.in_values[1];
      if (n.inputs[0] >= 0) accumulate(grads, n.inputs[0], reduce_to(mul(nullptr, g, b), a.shape()));
      if (n.inputs[1] >= 0) accumulate(grads, n.inputs[1], reduce_to(mul(nullptr, g, a), b.shape()));
      return;
    }
    case Op::Div: {
      const Tensor& a = n.in_values[0];
      const Tensor& b = n.in_values[1];
      if (n.inputs[0] >= 0) accumulate(grads, n.inputs[0], reduce_to(div(nullptr, g, b), a.shape()));
      if (n.inputs[1] >= 0) {
        Tensor gb = mul(nullptr, g, div(nullptr, neg(nullptr, a), mul(nullptr, b, b)));
        accumulate(grads, n.inputs[1], reduce_to(gb, b.shape()));
      }
      return;
    }
    case Op::Neg:
      accumulate(grads, n.inputs[0], neg(nullptr, g));
      return;
    case Op::MatMul: {
      const Tensor& a = n.in_values[0];
      const Tensor& b = n.in_values[1];
      int64_t m = a.shape()[0], k = a.shape()[1], nn = b.shape()[1];
      if (n.inputs[0] >= 0) {
        std::vector<double> ga(static_cast<size_t>(m * k), 0.0);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            double s = 0.0;
            const double* grow = g.data() + i * nn;
            const double* brow = b.data() + kk * nn;
            for (int64_t j = 0; j < nn; ++j) s += grow[j] * brow[j];
            ga[static_cast<size_t>(i * k + kk)] = s;
          }
        accumulate(grads, n.inputs[0], Tensor({m, k}, std::move(ga)));
      }
      if (n.inputs[1] >= 0) {
        std::vector<double> gb(static_cast<size_t>(k * nn), 0.0);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            double aik = a[i * k + kk];
            if (aik == 0.0) continue;
            const double* grow = g.data() + i * nn;
            double* gbrow = gb.data() + kk * nn;
            for (int64_t j = 0; j < nn; ++j) gbrow[j] += aik * grow[j];
          }
        accumulate(grads, n.inputs[1], Tensor({k, nn}, std::move(gb)));
      }
      return;
    }
    case Op::Conv2d: {
      const Tensor& x = n.in_values[0];
      const Tensor& ker = n.in_values[1];
      int64_t bsz = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
      int64_t co = ker.shape()[0], kh = ker.shape()[2], kw = ker.shape()[3];
      int64_t oh = h - kh + 1, ow = w - kw + 1;
      if (n.inputs[0] >= 0) {
        std::vector<double> gx(static_cast<size_t>(x.size()), 0.0);
        for (int64_t b = 0; b < bsz; ++b)
          for (int64_t oc = 0; oc < co; ++oc)
            for (int64_t ic = 0; ic < ci; ++ic) {
              const double* kc = ker.data() + (oc * ci + ic) * kh * kw;
              const double* gout = g.data() + (b * co + oc) * oh * ow;
              double* gxc = gx.data() + (b * ci + ic) * h * w;
              for (int64_t r = 0; r < oh; ++r)
                for (int64_t p = 0; p < kh; ++p)
                  for (int64_t q = 0; q < kw; ++q) {
                    double kv = kc[p * kw + q];
                    if (kv == 0.0) continue;
                    const double* grow = gout + r * ow;
                    double* gxrow = gxc + (r + p) * w + q;
                    for (int64_t c = 0; c < ow; ++c) gxrow[c] += kv * grow[c];
                  }
            }
        accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(gx)));
      }
      if (n.inputs[1] >= 0) {
        std::vector<double> gk(static_cast<size_t>(ker.size()), 0.0);
        for (int64_t b = 0; b < bsz; ++b)
          for (int64_t oc = 0; oc < co; ++oc)
            for (int64_t ic = 0; ic < ci; ++ic) {
              const double* xc = x.data() + (b * ci + ic) * h * w;
              const double* gout = g.data() + (b * co + oc) * oh * ow;
              double* gkc = gk.data() + (oc * ci + ic) * kh * kw;
              for (int64_t p = 0; p < kh; ++p)
                for (int64_t q = 0; q < kw; ++q) {
                  double s = 0.0;
                  for (int64_t r = 0; r < oh; ++r) {
                    const double* grow = gout + r * ow;
                    const double* xrow = xc + (r + p) * w + q;
                    for (int64_t c = 0; c < ow; ++c) s += grow[c] * xrow[c];
                  }
                  gkc[p * kw + q] += s;
                }
            }
        accumulate(grads, n.inputs[1], Tensor(ker.shape(), std::move(gk)));
      }
      return;
    }
    case Op::MaxPool2x2: {
      const Tensor& x = n.in_values[0];
      std::vector<double> gx(static_cast<size_t>(x.size()), 0.0);
      for (size_t o = 0; o < n.aux.size(); ++o)
        gx[static_cast<size_t>(n.aux[o])] += g[static_cast<int64_t>(o)];
      accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(gx)));
      return;
    }
    case Op::Tanh: {
      const Tensor& y = n.out_value;
      accumulate(grads, n.inputs[0],
                 ew_forward("tanh_vjp", g, y, [](double gv, double yv) { return gv * (1.0 - yv * yv); }));
      return;
    }
    case Op::Sigmoid: {
      const Tensor& y = n.out_value;
      accumulate(grads, n.inputs[0], ew_forward("sigmoid_vjp", g, y, [](double gv, double yv) {
                   return gv * yv * (1.0 - yv);
                 }));
      return;
    }
    case Op::Relu: {
      const Tensor& x = n.in_values[0];
      accumulate(grads, n.inputs[0],
                 ew_forward("relu_vjp", g, x, [](double gv, double xv) { return xv > 0.0 ? gv : 0.0; }));
      return;
    }
    case Op::Exp: {
      accumulate(grads, n.inputs[0], mul(nullptr, g, n.out_value));
      return;
    }
    case Op::Log: {
      accumulate(grads, n.inputs[0], div(nullptr, g, n.in_values[0]));
      return;
    }
    case Op::Sqrt: {
      // d sqrt(x)/dx = 1/(2 sqrt(x)); defined as 0 at x == 0 so that
      // eps-stabilized denominators keep finite gradients.
      const Tensor& y = n.out_value;
      accumulate(grads, n.inputs[0], ew_forward("sqrt_vjp", g, y, [](double gv, double yv) {
                   return yv > 0.0 ? gv * 0.5 / yv : 0.0;
                 }));
      return;
    }
    case Op::Square: {
      const Tensor& x = n.in_values[0];
      accumulate(grads, n.inputs[0],
                 ew_forward("square_vjp", g, x, [](double gv, double xv) { return gv * 2.0 * xv; }));
      return;
    }
    case Op::Sum: {
      accumulate(grads, n.inputs[0], Tensor::full(n.in_values[0].shape(), g.item()));
      return;
    }
    case Op::Mean: {
      const Tensor& x = n.in_values[0];
      accumulate(grads, n.inputs[0],
                 Tensor::full(x.shape(), g.item() / static_cast<double>(x.size())));
      return;
    }
    case Op::L2Norm: {
      // d||x||/dx = x/||x||; zero at the origin (the distillation loss wants
      // a vanishing gradient when trajectories coincide).
      const Tensor& x = n.in_values[0];
      double norm = n.out_value.item();
      if (norm == 0.0) {
        accumulate(grads, n.inputs[0], Tensor::zeros(x.shape()));
      } else {
        accumulate(grads, n.inputs[0], mul_scalar(nullptr, x, g.item() / norm));
      }
      return;
    }
    case Op::Concat: {
      int64_t offset = 0;
      for (size_t i = 0; i < n.in_values.size(); ++i) {
        int64_t ext = n.in_values[i].shape()[static_cast<size_t>(n.attrs.axis)];
        if (n.inputs[i] >= 0)
          accumulate(grads, n.inputs[i], slice(nullptr, g, n.attrs.axis, offset, ext));
        offset += ext;
      }
      return;
    }
    case Op::Slice: {
      const Tensor& x = n.in_values[0];
      int64_t dim = x.shape()[static_cast<size_t>(n.attrs.axis)];
      int64_t outer, inner;
      axis_strides(x.shape(), n.attrs.axis, &outer, &inner);
      std::vector<double> gx(static_cast<size_t>(x.size()), 0.0);
      for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t e = 0; e < n.attrs.len; ++e)
          for (int64_t in = 0; in < inner; ++in)
            gx[static_cast<size_t>((ou * dim + n.attrs.start + e) * inner + in)] =
                g[(ou * n.attrs.len + e) * inner + in];
      accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(gx)));
      return;
    }
    case Op::SoftmaxXent: {
      // Gradient reaches the logits only; labels are targets, not variables.
      if (n.inputs[0] < 0) return;
      const Tensor& z = n.in_values[0];
      const Tensor& l = n.in_values[1];
      int64_t bsz = z.shape()[0], k = z.shape()[1];
      double scale = g.item() / static_cast<double>(bsz);
      std::vector<double> gz(static_cast<size_t>(z.size()));
      for (int64_t b = 0; b < bsz; ++b) {
        const double* zr = z.data() + b * k;
        const double* lr = l.data() + b * k;
        double m = zr[0];
        for (int64_t j = 1; j < k; ++j) m = std::max(m, zr[j]);
        double s = 0.0;
        for (int64_t j = 0; j < k; ++j) s += std::exp(zr[j] - m);
        double lsum = 0.0;
        for (int64_t j = 0; j < k; ++j) lsum += lr[j];
        for (int64_t j = 0; j < k; ++j)
          gz[static_cast<size_t>(b * k + j)] = scale * (lsum * std::exp(zr[j] - m) / s - lr[j]);
      }
      accumulate(grads, n.inputs[0], Tensor(z.shape(), std::move(gz)));
      return;
    }
    case Op::Reshape: {
      accumulate(grads, n.inputs[0], Tensor(n.in_values[0].shape(), g.vec()));
      return;
    }
  }
}

}  // namespace

GradMap backward(const Tape& tape, const Tensor& out) {
  if (out.tape_id() != tape.id() || out.node() < 0)
    throw Error("backward: output value was not recorded on this tape");
  if (!out.is_scalar())
    throw ShapeError(std::string("backward: output must be a scalar, got shape ") +
                     shape_str(out.shape()));
  std::vector<Tensor> grads(static_cast<size_t>(tape.size()));
  grads[static_cast<size_t>(out.node())] = Tensor::full(out.shape(), 1.0);
  for (int i = out.node(); i >= 0; --i) {
    if (!grads[static_cast<size_t>(i)].valid()) continue;
    backward_node(tape.node(i), grads[static_cast<size_t>(i)], grads);
  }
  return GradMap(tape.id(), std::move(grads));
}

double grad_check(const std::function<Tensor(Tape*, const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double h) {
  Tape tape;
  std::vector<Tensor> leafed;
  leafed.reserve(inputs.size());
  for (const Tensor& p : inputs) leafed.push_back(tape.leaf(p));
  Tensor out = f(&tape, leafed);
  if (!out.is_scalar())
    throw ShapeError(std::string("grad_check: f must return a scalar, got shape ") +
                     shape_str(out.shape()));
  GradMap gm = backward(tape, out);
  std::vector<Tensor> analytic;
  analytic.reserve(leafed.size());
  for (const Tensor& l : leafed) analytic.push_back(gm.grad(l));

  auto eval_at = [&](size_t which, int64_t coord, double value) {
    std::vector<Tensor> pts = inputs;
    std::vector<double> d = pts[which].vec();
    d[static_cast<size_t>(coord)] = value;
    pts[which] = Tensor(inputs[which].shape(), std::move(d));
    return f(nullptr, pts).item();
  };

  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t c = 0; c < inputs[i].size(); ++c) {
      double x0 = inputs[i][c];
      double numeric = (eval_at(i, c, x0 + h) - eval_at(i, c, x0 - h)) / (2.0 * h);
      double a = analytic[i][c];
      double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace amalgam

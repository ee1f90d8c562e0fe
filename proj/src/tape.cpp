#include "wassalign/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "wassalign/kernels.hpp"
#include "wassalign/nn.hpp"

namespace wassalign {

void Parameter::zero_grad() {
  if (grad.shape() != value.shape() || grad.dtype() != value.dtype())
    grad = Tensor::zeros(value.shape(), value.dtype());
  for (int64_t i = 0; i < grad.numel(); ++i) grad.set(i, 0.0);
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::MatMul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Square: return "square";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SumLast: return "sum-last";
    case OpKind::MeanLast: return "mean-last";
    case OpKind::MaxPool2d: return "max-pool2d";
    case OpKind::Reshape: return "reshape";
    case OpKind::ConcatRows: return "concat-rows";
    case OpKind::IndexSelect: return "index-select";
    case OpKind::Sort: return "sort";
    case OpKind::Inner: return "inner-product";
    case OpKind::Transpose2d: return "transpose";
    case OpKind::Broadcast: return "broadcast";
    case OpKind::LogSoftmax: return "softmax-logits";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add-scalar";
    case OpKind::BatchNormTrain: return "batch-norm-train";
    case OpKind::BatchNormEval: return "batch-norm-eval";
    case OpKind::InstanceNorm: return "instance-norm";
    case OpKind::L2NormalizeRows: return "l2-normalize-rows";
  }
  return "?";
}

const Tensor& Var::val() const {
  if (!valid()) throw ValueError("Var: accessing value of an empty handle");
  return tape->value(*this);
}

namespace {

// Invoke f templated on the scalar type of dt.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::Float32) return f(float{});
  return f(double{});
}

bool suffix_of(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

}  // namespace

const Tensor& Tape::value(Var v) const {
  check_owned(v, "value");
  return values_[static_cast<size_t>(v.id)];
}

void Tape::check_owned(Var v, const char* op) const {
  if (v.tape != this)
    throw ValueError(std::string(op) + ": tensor is not on this tape");
  if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size())
    throw ValueError(std::string(op) + ": tape id out of range");
}

Var Tape::push(Node node, Tensor value) {
  nodes_.push_back(std::move(node));
  values_.push_back(std::move(value));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.kind = OpKind::Leaf;
  return push(std::move(n), std::move(value));
}

Var Tape::param(Parameter& p) {
  Var v = leaf(p.value);
  params_.emplace_back(v.id, &p);
  return v;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with scalar/suffix broadcasting.
// ---------------------------------------------------------------------------

Var Tape::binary(OpKind kind, Var a, Var b) {
  check_owned(a, op_name(kind));
  check_owned(b, op_name(kind));
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_same_dtype(ta, tb, op_name(kind));

  bool a_small = false;
  if (ta.shape() != tb.shape()) {
    if (tb.numel() == 1 || suffix_of(tb.shape(), ta.shape())) {
      // b broadcasts over a
    } else if (ta.numel() == 1 || suffix_of(ta.shape(), tb.shape())) {
      a_small = true;
    } else {
      throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " +
                       shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    }
  }
  const Tensor& big = a_small ? tb : ta;
  Tensor out(big.shape(), ta.dtype());
  int64_t na = ta.numel(), nb = tb.numel(), n = out.numel();
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = ta.data<T>();
    auto pb = tb.data<T>();
    auto po = out.data<T>();
    switch (kind) {
      case OpKind::Add:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i % na] + pb[i % nb];
        break;
      case OpKind::Sub:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i % na] - pb[i % nb];
        break;
      case OpKind::Mul:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i % na] * pb[i % nb];
        break;
      case OpKind::Div:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i % na] / pb[i % nb];
        break;
      default: throw Error("binary: bad kind");
    }
  });
  Node node;
  node.kind = kind;
  node.in = {a.id, b.id, -1};
  node.n_in = 2;
  return push(std::move(node), std::move(out));
}

Var Tape::add(Var a, Var b) { return binary(OpKind::Add, a, b); }
Var Tape::sub(Var a, Var b) { return binary(OpKind::Sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(OpKind::Mul, a, b); }
Var Tape::div(Var a, Var b) { return binary(OpKind::Div, a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

Var Tape::unary(OpKind kind, Var a) {
  check_owned(a, op_name(kind));
  const Tensor& ta = value(a);
  Tensor out(ta.shape(), ta.dtype());
  int64_t n = ta.numel();
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    switch (kind) {
      case OpKind::Relu:
        for (int64_t i = 0; i < n; ++i) q[i] = p[i] > T(0) ? p[i] : T(0);
        break;
      case OpKind::Exp:
        for (int64_t i = 0; i < n; ++i) q[i] = std::exp(p[i]);
        break;
      case OpKind::Log:
        for (int64_t i = 0; i < n; ++i) q[i] = std::log(p[i]);
        break;
      case OpKind::Sqrt:
        for (int64_t i = 0; i < n; ++i) q[i] = std::sqrt(p[i]);
        break;
      case OpKind::Square:
        for (int64_t i = 0; i < n; ++i) q[i] = p[i] * p[i];
        break;
      default: throw Error("unary: bad kind");
    }
  });
  Node node;
  node.kind = kind;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  return push(std::move(node), std::move(out));
}

Var Tape::relu(Var a) { return unary(OpKind::Relu, a); }
Var Tape::exp(Var a) { return unary(OpKind::Exp, a); }
Var Tape::log(Var a) { return unary(OpKind::Log, a); }
Var Tape::sqrt(Var a) { return unary(OpKind::Sqrt, a); }
Var Tape::square(Var a) { return unary(OpKind::Square, a); }

Var Tape::scale(Var a, double c) {
  check_owned(a, "scale");
  const Tensor& ta = value(a);
  Tensor out(ta.shape(), ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    T cc = static_cast<T>(c);
    for (int64_t i = 0; i < ta.numel(); ++i) q[i] = p[i] * cc;
  });
  Node node;
  node.kind = OpKind::Scale;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  node.attr = c;
  return push(std::move(node), std::move(out));
}

Var Tape::add_scalar(Var a, double c) {
  check_owned(a, "add-scalar");
  const Tensor& ta = value(a);
  Tensor out(ta.shape(), ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    T cc = static_cast<T>(c);
    for (int64_t i = 0; i < ta.numel(); ++i) q[i] = p[i] + cc;
  });
  Node node;
  node.kind = OpKind::AddScalar;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  node.attr = c;
  return push(std::move(node), std::move(out));
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  check_owned(a, "matmul");
  check_owned(b, "matmul");
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_same_dtype(ta, tb, "matmul");
  if (ta.ndim() != 2 || tb.ndim() != 2)
    throw ShapeError("matmul: expected 2-D operands, got " + shape_str(ta.shape()) + " x " +
                     shape_str(tb.shape()));
  if (ta.dim(1) != tb.dim(0))
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(ta.shape()) + " x " +
                     shape_str(tb.shape()));
  int64_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out(Shape{m, n}, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::matmul_nn<T>(ta.data<T>().data(), tb.data<T>().data(), out.data<T>().data(), m, k,
                          n);
  });
  Node node;
  node.kind = OpKind::MatMul;
  node.in = {a.id, b.id, -1};
  node.n_in = 2;
  return push(std::move(node), std::move(out));
}

Var Tape::transpose2d(Var a) {
  check_owned(a, "transpose");
  const Tensor& ta = value(a);
  if (ta.ndim() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(ta.shape()));
  int64_t m = ta.dim(0), n = ta.dim(1);
  Tensor out(Shape{n, m}, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) q[j * m + i] = p[i * n + j];
  });
  Node node;
  node.kind = OpKind::Transpose2d;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  return push(std::move(node), std::move(out));
}

Var Tape::inner(Var a, Var b) {
  check_owned(a, "inner-product");
  check_owned(b, "inner-product");
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_same_dtype(ta, tb, "inner-product");
  if (ta.shape() != tb.shape())
    throw ShapeError("inner-product: shapes differ, " + shape_str(ta.shape()) + " vs " +
                     shape_str(tb.shape()));
  Tensor out(Shape{}, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = tb.data<T>();
    T acc = 0;
    for (int64_t i = 0; i < ta.numel(); ++i) acc += p[i] * q[i];
    out.data<T>()[0] = acc;
  });
  Node node;
  node.kind = OpKind::Inner;
  node.in = {a.id, b.id, -1};
  node.n_in = 2;
  return push(std::move(node), std::move(out));
}

// ---------------------------------------------------------------------------
// Convolution / pooling.
// ---------------------------------------------------------------------------

Var Tape::conv2d(Var x, Var w, std::optional<Var> bias, int64_t stride, int64_t pad) {
  check_owned(x, "conv2d");
  check_owned(w, "conv2d");
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  check_same_dtype(tx, tw, "conv2d");
  if (tx.ndim() != 4 || tw.ndim() != 4)
    throw ShapeError("conv2d: expected input [N,C,H,W] and kernel [Co,Ci,kh,kw], got " +
                     shape_str(tx.shape()) + " and " + shape_str(tw.shape()));
  if (tx.dim(1) != tw.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(tx.dim(1)) +
                     " do not match kernel channels " + std::to_string(tw.dim(1)));
  if (stride < 1 || pad < 0) throw ValueError("conv2d: stride must be >= 1 and pad >= 0");
  int64_t nb = tx.dim(0), ci = tx.dim(1), h = tx.dim(2), wd = tx.dim(3);
  int64_t co = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
  int64_t oh = (h + 2 * pad - kh) / stride + 1;
  int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  if (h + 2 * pad < kh || wd + 2 * pad < kw || oh < 1 || ow < 1)
    throw ShapeError("conv2d: kernel " + shape_str(tw.shape()) + " does not fit input " +
                     shape_str(tx.shape()) + " with pad " + std::to_string(pad));
  const Tensor* tb = nullptr;
  if (bias) {
    check_owned(*bias, "conv2d");
    tb = &value(*bias);
    check_same_dtype(tx, *tb, "conv2d");
    if (tb->ndim() != 1 || tb->dim(0) != co)
      throw ShapeError("conv2d: bias shape " + shape_str(tb->shape()) + " expected [" +
                       std::to_string(co) + "]");
  }
  Tensor out(Shape{nb, co, oh, ow}, tx.dtype());
  dispatch(tx.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::conv2d_forward<T>(tx.data<T>().data(), tw.data<T>().data(),
                               tb ? tb->data<T>().data() : nullptr, out.data<T>().data(), nb,
                               ci, h, wd, co, kh, kw, oh, ow, stride, pad);
  });
  Node node;
  node.kind = OpKind::Conv2d;
  node.in = {x.id, w.id, bias ? bias->id : -1};
  node.n_in = bias ? 3 : 2;
  node.i0 = stride;
  node.i1 = pad;
  return push(std::move(node), std::move(out));
}

Var Tape::max_pool2d(Var x, int64_t kernel, int64_t stride) {
  check_owned(x, "max-pool2d");
  const Tensor& tx = value(x);
  if (tx.ndim() != 4)
    throw ShapeError("max-pool2d: expected [N,C,H,W], got " + shape_str(tx.shape()));
  if (kernel < 1 || stride < 1) throw ValueError("max-pool2d: kernel and stride must be >= 1");
  int64_t nb = tx.dim(0), c = tx.dim(1), h = tx.dim(2), wd = tx.dim(3);
  int64_t oh = (h - kernel) / stride + 1;
  int64_t ow = (wd - kernel) / stride + 1;
  if (h < kernel || wd < kernel || oh < 1 || ow < 1)
    throw ShapeError("max-pool2d: window " + std::to_string(kernel) + " does not fit input " +
                     shape_str(tx.shape()));
  Tensor out(Shape{nb, c, oh, ow}, tx.dtype());
  std::vector<int64_t> argmax(static_cast<size_t>(nb * c * oh * ow));
  dispatch(tx.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::serial::maxpool_forward<T>(tx.data<T>().data(), out.data<T>().data(),
                                        argmax.data(), nb, c, h, wd, kernel, stride, oh, ow);
  });
  Node node;
  node.kind = OpKind::MaxPool2d;
  node.in = {x.id, -1, -1};
  node.n_in = 1;
  node.i0 = kernel;
  node.i1 = stride;
  node.indices = std::move(argmax);
  return push(std::move(node), std::move(out));
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

Var Tape::sum(Var a) {
  check_owned(a, "sum");
  const Tensor& ta = value(a);
  Tensor out(Shape{}, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    T acc = 0;
    for (int64_t i = 0; i < ta.numel(); ++i) acc += p[i];
    out.data<T>()[0] = acc;
  });
  Node node;
  node.kind = OpKind::Sum;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  return push(std::move(node), std::move(out));
}

Var Tape::mean(Var a) {
  check_owned(a, "mean");
  const Tensor& ta = value(a);
  if (ta.numel() == 0) throw ShapeError("mean: empty tensor");
  Tensor out(Shape{}, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    T acc = 0;
    for (int64_t i = 0; i < ta.numel(); ++i) acc += p[i];
    out.data<T>()[0] = acc / static_cast<T>(ta.numel());
  });
  Node node;
  node.kind = OpKind::Mean;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  return push(std::move(node), std::move(out));
}

Var Tape::sum_last(Var a) {
  check_owned(a, "sum-last");
  const Tensor& ta = value(a);
  if (ta.ndim() < 1 || ta.dim(ta.ndim() - 1) < 1)
    throw ShapeError("sum-last: need a non-empty last axis, got " + shape_str(ta.shape()));
  int64_t k = ta.dim(ta.ndim() - 1);
  Shape out_shape(ta.shape().begin(), ta.shape().end() - 1);
  Tensor out(out_shape, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    for (int64_t r = 0; r < out.numel(); ++r) {
      T acc = 0;
      for (int64_t j = 0; j < k; ++j) acc += p[r * k + j];
      q[r] = acc;
    }
  });
  Node node;
  node.kind = OpKind::SumLast;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  node.i0 = k;
  return push(std::move(node), std::move(out));
}

Var Tape::mean_last(Var a) {
  check_owned(a, "mean-last");
  const Tensor& ta = value(a);
  if (ta.ndim() < 1 || ta.dim(ta.ndim() - 1) < 1)
    throw ShapeError("mean-last: need a non-empty last axis, got " + shape_str(ta.shape()));
  int64_t k = ta.dim(ta.ndim() - 1);
  Shape out_shape(ta.shape().begin(), ta.shape().end() - 1);
  Tensor out(out_shape, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    for (int64_t r = 0; r < out.numel(); ++r) {
      T acc = 0;
      for (int64_t j = 0; j < k; ++j) acc += p[r * k + j];
      q[r] = acc / static_cast<T>(k);
    }
  });
  Node node;
  node.kind = OpKind::MeanLast;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  node.i0 = k;
  return push(std::move(node), std::move(out));
}

// ---------------------------------------------------------------------------
// Structure.
// ---------------------------------------------------------------------------

Var Tape::reshape(Var a, Shape shape) {
  check_owned(a, "reshape");
  const Tensor& ta = value(a);
  Tensor out = ta.reshaped(shape);
  Node node;
  node.kind = OpKind::Reshape;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  node.in_shape = ta.shape();
  return push(std::move(node), std::move(out));
}

Var Tape::broadcast_to(Var a, Shape shape) {
  check_owned(a, "broadcast");
  const Tensor& ta = value(a);
  if (!(ta.numel() == 1 || suffix_of(ta.shape(), shape)))
    throw ShapeError("broadcast: " + shape_str(ta.shape()) + " cannot broadcast to " +
                     shape_str(shape) + " (scalar or trailing-suffix only)");
  Tensor out(shape, ta.dtype());
  int64_t na = ta.numel();
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    for (int64_t i = 0; i < out.numel(); ++i) q[i] = p[i % na];
  });
  Node node;
  node.kind = OpKind::Broadcast;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  node.in_shape = ta.shape();
  return push(std::move(node), std::move(out));
}

Var Tape::concat_rows(Var a, Var b) {
  check_owned(a, "concat-rows");
  check_owned(b, "concat-rows");
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_same_dtype(ta, tb, "concat-rows");
  if (ta.ndim() != tb.ndim() || ta.ndim() < 1)
    throw ShapeError("concat-rows: rank mismatch " + shape_str(ta.shape()) + " vs " +
                     shape_str(tb.shape()));
  for (size_t i = 1; i < ta.ndim(); ++i)
    if (ta.dim(i) != tb.dim(i))
      throw ShapeError("concat-rows: trailing dims differ, " + shape_str(ta.shape()) + " vs " +
                       shape_str(tb.shape()));
  Shape out_shape = ta.shape();
  out_shape[0] += tb.dim(0);
  Tensor out(out_shape, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = tb.data<T>();
    auto o = out.data<T>();
    std::copy(p.begin(), p.end(), o.begin());
    std::copy(q.begin(), q.end(), o.begin() + p.size());
  });
  Node node;
  node.kind = OpKind::ConcatRows;
  node.in = {a.id, b.id, -1};
  node.n_in = 2;
  node.i0 = ta.numel();
  return push(std::move(node), std::move(out));
}

Var Tape::index_select0(Var a, const std::vector<int64_t>& indices) {
  check_owned(a, "index-select");
  const Tensor& ta = value(a);
  if (ta.ndim() < 1) throw ShapeError("index-select: input must have at least one axis");
  int64_t rows = ta.dim(0);
  int64_t row_sz = rows > 0 ? ta.numel() / rows : 0;
  for (int64_t idx : indices)
    if (idx < 0 || idx >= rows)
      throw ShapeError("index-select: index " + std::to_string(idx) + " out of range [0," +
                       std::to_string(rows) + ")");
  Shape out_shape = ta.shape();
  out_shape[0] = static_cast<int64_t>(indices.size());
  Tensor out(out_shape, ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    for (size_t r = 0; r < indices.size(); ++r)
      std::copy_n(p.begin() + indices[r] * row_sz, row_sz,
                  q.begin() + static_cast<int64_t>(r) * row_sz);
  });
  Node node;
  node.kind = OpKind::IndexSelect;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  node.indices = indices;
  node.i0 = row_sz;
  node.in_shape = ta.shape();
  return push(std::move(node), std::move(out));
}

std::pair<Var, std::vector<int64_t>> Tape::sort1d(Var a) {
  check_owned(a, "sort");
  const Tensor& ta = value(a);
  if (ta.ndim() != 1) throw ShapeError("sort: expected 1-D input, got " + shape_str(ta.shape()));
  if (!ta.all_finite()) throw NumericError("sort: input contains non-finite values");
  int64_t n = ta.dim(0);
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  // Stable: equal projected values keep their input order, which fixes
  // the subgradient chosen at ties.
  std::stable_sort(perm.begin(), perm.end(),
                   [&](int64_t i, int64_t j) { return ta.at(i) < ta.at(j); });
  Tensor out(ta.shape(), ta.dtype());
  for (int64_t i = 0; i < n; ++i) out.set(i, ta.at(perm[static_cast<size_t>(i)]));
  Node node;
  node.kind = OpKind::Sort;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  node.indices = perm;
  Var v = push(std::move(node), std::move(out));
  return {v, std::move(perm)};
}

Var Tape::log_softmax_rows(Var a) {
  check_owned(a, "softmax-logits");
  const Tensor& ta = value(a);
  if (ta.ndim() != 2 || ta.dim(1) < 1)
    throw ShapeError("softmax-logits: expected [N,K] with K >= 1, got " + shape_str(ta.shape()));
  int64_t n = ta.dim(0), k = ta.dim(1);
  Tensor out(ta.shape(), ta.dtype());
  dispatch(ta.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = ta.data<T>();
    auto q = out.data<T>();
    for (int64_t r = 0; r < n; ++r) {
      T mx = p[r * k];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, p[r * k + j]);
      T acc = 0;
      for (int64_t j = 0; j < k; ++j) acc += std::exp(p[r * k + j] - mx);
      T lse = mx + std::log(acc);
      for (int64_t j = 0; j < k; ++j) q[r * k + j] = p[r * k + j] - lse;
    }
  });
  if (!out.all_finite()) throw NumericError("softmax-logits: non-finite output");
  Node node;
  node.kind = OpKind::LogSoftmax;
  node.in = {a.id, -1, -1};
  node.n_in = 1;
  return push(std::move(node), std::move(out));
}

// ---------------------------------------------------------------------------
// Fused normalization layers.
// ---------------------------------------------------------------------------

Var Tape::batch_norm_train(Var x, Var scale_v, Var shift_v, BatchNormState& state) {
  check_owned(x, "batch-norm");
  check_owned(scale_v, "batch-norm");
  check_owned(shift_v, "batch-norm");
  const Tensor& tx = value(x);
  if (tx.ndim() != 4) throw ShapeError("batch-norm: expected [N,C,H,W], got " + shape_str(tx.shape()));
  int64_t nb = tx.dim(0), c = tx.dim(1), hw = tx.dim(2) * tx.dim(3);
  if (nb < 2)
    throw ValueError("batch-norm: train mode needs batch size >= 2 (variance is degenerate)");
  if (state.eps <= 0) throw ValueError("batch-norm: epsilon must be > 0");
  const Tensor& ts = value(scale_v);
  const Tensor& tb = value(shift_v);
  if (ts.numel() != c || tb.numel() != c)
    throw ShapeError("batch-norm: scale/shift must have one entry per channel");
  Tensor out(tx.shape(), tx.dtype());
  Tensor xhat(tx.shape(), tx.dtype());
  Tensor mean(Shape{c}, tx.dtype());
  Tensor var(Shape{c}, tx.dtype());
  Tensor invstd(Shape{c}, tx.dtype());
  dispatch(tx.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::batch_norm_forward_train<T>(tx.data<T>().data(), ts.data<T>().data(),
                                         tb.data<T>().data(), out.data<T>().data(),
                                         xhat.data<T>().data(), mean.data<T>().data(),
                                         var.data<T>().data(), invstd.data<T>().data(), nb, c,
                                         hw, state.eps);
  });
  if (!out.all_finite()) throw NumericError("batch-norm: non-finite output");
  // run <- (1-m)*run + m*batch
  double m = state.momentum;
  for (int64_t ch = 0; ch < c; ++ch) {
    state.running_mean.set(ch, (1.0 - m) * state.running_mean.at(ch) + m * mean.at(ch));
    state.running_var.set(ch, (1.0 - m) * state.running_var.at(ch) + m * var.at(ch));
  }
  Node node;
  node.kind = OpKind::BatchNormTrain;
  node.in = {x.id, scale_v.id, shift_v.id};
  node.n_in = 3;
  node.saved = std::move(xhat);
  node.saved2 = std::move(invstd);
  return push(std::move(node), std::move(out));
}

Var Tape::batch_norm_eval(Var x, Var scale_v, Var shift_v, const BatchNormState& state) {
  check_owned(x, "batch-norm");
  const Tensor& tx = value(x);
  if (tx.ndim() != 4) throw ShapeError("batch-norm: expected [N,C,H,W], got " + shape_str(tx.shape()));
  if (state.eps <= 0) throw ValueError("batch-norm: epsilon must be > 0");
  int64_t nb = tx.dim(0), c = tx.dim(1), hw = tx.dim(2) * tx.dim(3);
  const Tensor& ts = value(scale_v);
  const Tensor& tb = value(shift_v);
  if (ts.numel() != c || tb.numel() != c)
    throw ShapeError("batch-norm: scale/shift must have one entry per channel");
  Tensor rmean = state.running_mean.astype(tx.dtype());
  Tensor rvar = state.running_var.astype(tx.dtype());
  Tensor out(tx.shape(), tx.dtype());
  dispatch(tx.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::serial::batch_norm_forward_eval<T>(tx.data<T>().data(), ts.data<T>().data(),
                                                tb.data<T>().data(), rmean.data<T>().data(),
                                                rvar.data<T>().data(), out.data<T>().data(), nb,
                                                c, hw, state.eps);
  });
  if (!out.all_finite()) throw NumericError("batch-norm: non-finite output");
  // Save eval-mode xhat and invstd for the backward rule.
  Tensor xhat(tx.shape(), tx.dtype());
  Tensor invstd(Shape{c}, tx.dtype());
  for (int64_t ch = 0; ch < c; ++ch)
    invstd.set(ch, 1.0 / std::sqrt(rvar.at(ch) + state.eps));
  for (int64_t p = 0; p < nb * c; ++p) {
    int64_t ch = p % c;
    for (int64_t i = 0; i < hw; ++i)
      xhat.set(p * hw + i, (tx.at(p * hw + i) - rmean.at(ch)) * invstd.at(ch));
  }
  Node node;
  node.kind = OpKind::BatchNormEval;
  node.in = {x.id, scale_v.id, shift_v.id};
  node.n_in = 3;
  node.saved = std::move(xhat);
  node.saved2 = std::move(invstd);
  return push(std::move(node), std::move(out));
}

Var Tape::instance_norm(Var x, Var scale_v, Var shift_v, double eps) {
  check_owned(x, "instance-norm");
  const Tensor& tx = value(x);
  if (tx.ndim() != 4)
    throw ShapeError("instance-norm: expected [N,C,H,W], got " + shape_str(tx.shape()));
  int64_t nb = tx.dim(0), c = tx.dim(1), hw = tx.dim(2) * tx.dim(3);
  if (hw < 2)
    throw ValueError("instance-norm: spatial size " + std::to_string(hw) +
                     " has no statistics (need H*W >= 2)");
  if (eps <= 0) throw ValueError("instance-norm: epsilon must be > 0");
  const Tensor& ts = value(scale_v);
  const Tensor& tb = value(shift_v);
  if (ts.numel() != c || tb.numel() != c)
    throw ShapeError("instance-norm: scale/shift must have one entry per channel");
  Tensor out(tx.shape(), tx.dtype());
  Tensor xhat(tx.shape(), tx.dtype());
  Tensor invstd(Shape{nb * c}, tx.dtype());
  dispatch(tx.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::instance_norm_forward<T>(tx.data<T>().data(), ts.data<T>().data(),
                                      tb.data<T>().data(), out.data<T>().data(),
                                      xhat.data<T>().data(), invstd.data<T>().data(), nb, c, hw,
                                      eps);
  });
  if (!out.all_finite()) throw NumericError("instance-norm: non-finite output");
  Node node;
  node.kind = OpKind::InstanceNorm;
  node.in = {x.id, scale_v.id, shift_v.id};
  node.n_in = 3;
  node.attr = eps;
  node.saved = std::move(xhat);
  node.saved2 = std::move(invstd);
  return push(std::move(node), std::move(out));
}

Var Tape::l2_normalize_rows(Var x, double eps) {
  check_owned(x, "l2-normalize-rows");
  const Tensor& tx = value(x);
  if (tx.ndim() != 2)
    throw ShapeError("l2-normalize-rows: expected [N,d], got " + shape_str(tx.shape()));
  int64_t n = tx.dim(0), d = tx.dim(1);
  Tensor out(tx.shape(), tx.dtype());
  Tensor inv_norm(Shape{n}, tx.dtype());
  dispatch(tx.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = tx.data<T>();
    auto q = out.data<T>();
    auto r = inv_norm.data<T>();
    for (int64_t i = 0; i < n; ++i) {
      T acc = 0;
      for (int64_t j = 0; j < d; ++j) acc += p[i * d + j] * p[i * d + j];
      T ir = static_cast<T>(1.0 / std::sqrt(static_cast<double>(acc) + eps));
      r[i] = ir;
      for (int64_t j = 0; j < d; ++j) q[i * d + j] = p[i * d + j] * ir;
    }
  });
  Node node;
  node.kind = OpKind::L2NormalizeRows;
  node.in = {x.id, -1, -1};
  node.n_in = 1;
  node.attr = eps;
  node.saved = std::move(inv_norm);
  return push(std::move(node), std::move(out));
}

// ---------------------------------------------------------------------------
// Backward sweep.
// ---------------------------------------------------------------------------

Tensor& Tape::grad_of(int32_t id, std::vector<Tensor>& grads, std::vector<uint8_t>& has_grad) {
  auto idx = static_cast<size_t>(id);
  if (!has_grad[idx]) {
    grads[idx] = Tensor::zeros(values_[idx].shape(), values_[idx].dtype());
    has_grad[idx] = 1;
  }
  return grads[idx];
}

namespace {

// dst (smaller, broadcast operand) accumulates src reduced over the
// leading repetition: dst[i % dst.numel] += factor * src[i].
template <class T>
void accumulate_reduced(Tensor& dst, const Tensor& src, T factor) {
  auto d = dst.data<T>();
  auto s = src.data<T>();
  int64_t nd = dst.numel();
  for (int64_t i = 0; i < src.numel(); ++i) d[i % nd] += factor * s[i];
}

}  // namespace

void Tape::backward(Var loss) {
  check_owned(loss, "backward");
  const Tensor& lv = values_[static_cast<size_t>(loss.id)];
  if (lv.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
  std::vector<Tensor> grads(nodes_.size());
  std::vector<uint8_t> has_grad(nodes_.size(), 0);
  grad_of(loss.id, grads, has_grad).set(0, 1.0);
  for (int32_t id = loss.id; id >= 0; --id) {
    if (!has_grad[static_cast<size_t>(id)]) continue;
    backward_node(id, grads, has_grad);
  }
  for (auto& [id, p] : params_) {
    if (!has_grad[static_cast<size_t>(id)]) continue;
    const Tensor& g = grads[static_cast<size_t>(id)];
    if (p->grad.shape() != g.shape())
      throw ShapeError("backward: gradient shape mismatch for parameter " + p->name);
    for (int64_t i = 0; i < g.numel(); ++i) p->grad.set(i, p->grad.at(i) + g.at(i));
  }
}

void Tape::backward_node(int32_t id, std::vector<Tensor>& grads,
                         std::vector<uint8_t>& has_grad) {
  const Node& node = nodes_[static_cast<size_t>(id)];
  if (node.kind == OpKind::Leaf) return;
  const Tensor& g = grads[static_cast<size_t>(id)];
  const Tensor& y = values_[static_cast<size_t>(id)];

  auto in_val = [&](int i) -> const Tensor& { return input_value(node, i); };
  auto in_grad = [&](int i) -> Tensor& {
    return grad_of(node.in[static_cast<size_t>(i)], grads, has_grad);
  };

  dispatch(y.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gp = g.data<T>();
    switch (node.kind) {
      case OpKind::Add: {
        accumulate_reduced<T>(in_grad(0), g, T(1));
        accumulate_reduced<T>(in_grad(1), g, T(1));
        break;
      }
      case OpKind::Sub: {
        accumulate_reduced<T>(in_grad(0), g, T(1));
        accumulate_reduced<T>(in_grad(1), g, T(-1));
        break;
      }
      case OpKind::Mul: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        Tensor& da = in_grad(0);
        Tensor& db = in_grad(1);
        auto pa = a.data<T>();
        auto pb = b.data<T>();
        auto pda = da.data<T>();
        auto pdb = db.data<T>();
        int64_t na = a.numel(), nb = b.numel();
        for (int64_t i = 0; i < g.numel(); ++i) {
          pda[i % na] += gp[i] * pb[i % nb];
          pdb[i % nb] += gp[i] * pa[i % na];
        }
        break;
      }
      case OpKind::Div: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        Tensor& da = in_grad(0);
        Tensor& db = in_grad(1);
        auto pa = a.data<T>();
        auto pb = b.data<T>();
        auto pda = da.data<T>();
        auto pdb = db.data<T>();
        int64_t na = a.numel(), nb = b.numel();
        for (int64_t i = 0; i < g.numel(); ++i) {
          T bv = pb[i % nb];
          pda[i % na] += gp[i] / bv;
          pdb[i % nb] -= gp[i] * pa[i % na] / (bv * bv);
        }
        break;
      }
      case OpKind::MatMul: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        Tensor da_t = Tensor::zeros(a.shape(), a.dtype());
        Tensor db_t = Tensor::zeros(b.shape(), b.dtype());
        kernels::matmul_nt<T>(gp.data(), b.data<T>().data(), da_t.data<T>().data(), m, n, k);
        kernels::matmul_tn<T>(a.data<T>().data(), gp.data(), db_t.data<T>().data(), m, k, n);
        accumulate_reduced<T>(in_grad(0), da_t, T(1));
        accumulate_reduced<T>(in_grad(1), db_t, T(1));
        break;
      }
      case OpKind::Conv2d: {
        const Tensor& x = in_val(0);
        const Tensor& w = in_val(1);
        int64_t nb = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
        int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
        int64_t oh = y.dim(2), ow = y.dim(3);
        kernels::conv2d_backward_input<T>(gp.data(), w.data<T>().data(),
                                          in_grad(0).data<T>().data(), nb, ci, h, wd, co, kh,
                                          kw, oh, ow, node.i0, node.i1);
        kernels::conv2d_backward_weight<T>(x.data<T>().data(), gp.data(),
                                           in_grad(1).data<T>().data(), nb, ci, h, wd, co, kh,
                                           kw, oh, ow, node.i0, node.i1);
        if (node.n_in == 3)
          kernels::serial::conv2d_backward_bias<T>(gp.data(), in_grad(2).data<T>().data(), nb,
                                                   co, oh, ow);
        break;
      }
      case OpKind::Relu: {
        const Tensor& x = in_val(0);
        auto px = x.data<T>();
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < g.numel(); ++i)
          if (px[i] > T(0)) pd[i] += gp[i];
        break;
      }
      case OpKind::Exp: {
        auto py = y.data<T>();
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < g.numel(); ++i) pd[i] += gp[i] * py[i];
        break;
      }
      case OpKind::Log: {
        auto px = in_val(0).data<T>();
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < g.numel(); ++i) pd[i] += gp[i] / px[i];
        break;
      }
      case OpKind::Sqrt: {
        auto py = y.data<T>();
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < g.numel(); ++i) pd[i] += gp[i] / (T(2) * py[i]);
        break;
      }
      case OpKind::Square: {
        auto px = in_val(0).data<T>();
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < g.numel(); ++i) pd[i] += T(2) * px[i] * gp[i];
        break;
      }
      case OpKind::Sum: {
        auto pd = in_grad(0).data<T>();
        T gv = gp[0];
        for (int64_t i = 0; i < in_val(0).numel(); ++i) pd[i] += gv;
        break;
      }
      case OpKind::Mean: {
        auto pd = in_grad(0).data<T>();
        T gv = gp[0] / static_cast<T>(in_val(0).numel());
        for (int64_t i = 0; i < in_val(0).numel(); ++i) pd[i] += gv;
        break;
      }
      case OpKind::SumLast: {
        auto pd = in_grad(0).data<T>();
        int64_t k = node.i0;
        for (int64_t r = 0; r < g.numel(); ++r)
          for (int64_t j = 0; j < k; ++j) pd[r * k + j] += gp[r];
        break;
      }
      case OpKind::MeanLast: {
        auto pd = in_grad(0).data<T>();
        int64_t k = node.i0;
        for (int64_t r = 0; r < g.numel(); ++r) {
          T gv = gp[r] / static_cast<T>(k);
          for (int64_t j = 0; j < k; ++j) pd[r * k + j] += gv;
        }
        break;
      }
      case OpKind::MaxPool2d: {
        const Tensor& x = in_val(0);
        int64_t hw_in = x.dim(2) * x.dim(3);
        int64_t hw_out = y.dim(2) * y.dim(3);
        kernels::serial::maxpool_backward<T>(gp.data(), node.indices.data(),
                                             in_grad(0).data<T>().data(), x.dim(0) * x.dim(1),
                                             hw_in, hw_out);
        break;
      }
      case OpKind::Reshape: {
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < g.numel(); ++i) pd[i] += gp[i];
        break;
      }
      case OpKind::Broadcast: {
        accumulate_reduced<T>(in_grad(0), g, T(1));
        break;
      }
      case OpKind::ConcatRows: {
        auto pd0 = in_grad(0).data<T>();
        auto pd1 = in_grad(1).data<T>();
        int64_t n0 = node.i0;
        for (int64_t i = 0; i < n0; ++i) pd0[i] += gp[i];
        for (int64_t i = n0; i < g.numel(); ++i) pd1[i - n0] += gp[i];
        break;
      }
      case OpKind::IndexSelect: {
        auto pd = in_grad(0).data<T>();
        int64_t row_sz = node.i0;
        for (size_t r = 0; r < node.indices.size(); ++r) {
          int64_t src = node.indices[r];
          for (int64_t j = 0; j < row_sz; ++j)
            pd[src * row_sz + j] += gp[static_cast<int64_t>(r) * row_sz + j];
        }
        break;
      }
      case OpKind::Sort: {
        auto pd = in_grad(0).data<T>();
        for (size_t i = 0; i < node.indices.size(); ++i)
          pd[node.indices[i]] += gp[static_cast<int64_t>(i)];
        break;
      }
      case OpKind::Inner: {
        auto pa = in_val(0).data<T>();
        auto pb = in_val(1).data<T>();
        auto pda = in_grad(0).data<T>();
        auto pdb = in_grad(1).data<T>();
        T gv = gp[0];
        for (int64_t i = 0; i < in_val(0).numel(); ++i) {
          pda[i] += gv * pb[i];
          pdb[i] += gv * pa[i];
        }
        break;
      }
      case OpKind::Transpose2d: {
        const Tensor& x = in_val(0);
        int64_t m = x.dim(0), n = x.dim(1);
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < m; ++j) pd[j * n + i] += gp[i * m + j];
        break;
      }
      case OpKind::LogSoftmax: {
        int64_t n = y.dim(0), k = y.dim(1);
        auto py = y.data<T>();
        auto pd = in_grad(0).data<T>();
        for (int64_t r = 0; r < n; ++r) {
          T row_sum = 0;
          for (int64_t j = 0; j < k; ++j) row_sum += gp[r * k + j];
          for (int64_t j = 0; j < k; ++j)
            pd[r * k + j] += gp[r * k + j] - std::exp(py[r * k + j]) * row_sum;
        }
        break;
      }
      case OpKind::Scale: {
        auto pd = in_grad(0).data<T>();
        T c = static_cast<T>(node.attr);
        for (int64_t i = 0; i < g.numel(); ++i) pd[i] += c * gp[i];
        break;
      }
      case OpKind::AddScalar: {
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < g.numel(); ++i) pd[i] += gp[i];
        break;
      }
      case OpKind::BatchNormTrain: {
        const Tensor& x = in_val(0);
        int64_t nb = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        kernels::serial::batch_norm_backward_input<T>(
            gp.data(), node.saved.data<T>().data(), node.saved2.data<T>().data(),
            in_val(1).data<T>().data(), in_grad(0).data<T>().data(), nb, c, hw);
        kernels::serial::norm_backward_affine<T>(gp.data(), node.saved.data<T>().data(),
                                                 in_grad(1).data<T>().data(),
                                                 in_grad(2).data<T>().data(), nb, c, hw);
        break;
      }
      case OpKind::BatchNormEval: {
        const Tensor& x = in_val(0);
        int64_t nb = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        auto scale = in_val(1).data<T>();
        auto istd = node.saved2.data<T>();
        auto pd = in_grad(0).data<T>();
        for (int64_t p = 0; p < nb * c; ++p) {
          int64_t ch = p % c;
          for (int64_t i = 0; i < hw; ++i)
            pd[p * hw + i] += gp[p * hw + i] * scale[ch] * istd[ch];
        }
        kernels::serial::norm_backward_affine<T>(gp.data(), node.saved.data<T>().data(),
                                                 in_grad(1).data<T>().data(),
                                                 in_grad(2).data<T>().data(), nb, c, hw);
        break;
      }
      case OpKind::InstanceNorm: {
        const Tensor& x = in_val(0);
        int64_t nb = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        kernels::instance_norm_backward_input<T>(
            gp.data(), node.saved.data<T>().data(), node.saved2.data<T>().data(),
            in_val(1).data<T>().data(), in_grad(0).data<T>().data(), nb, c, hw);
        kernels::serial::norm_backward_affine<T>(gp.data(), node.saved.data<T>().data(),
                                                 in_grad(1).data<T>().data(),
                                                 in_grad(2).data<T>().data(), nb, c, hw);
        break;
      }
      case OpKind::L2NormalizeRows: {
        const Tensor& x = in_val(0);
        int64_t n = x.dim(0), d = x.dim(1);
        auto px = x.data<T>();
        auto pir = node.saved.data<T>();
        auto pd = in_grad(0).data<T>();
        for (int64_t i = 0; i < n; ++i) {
          T dot = 0;
          for (int64_t j = 0; j < d; ++j) dot += gp[i * d + j] * px[i * d + j];
          T ir = pir[i];
          T ir3 = ir * ir * ir;
          for (int64_t j = 0; j < d; ++j)
            pd[i * d + j] += gp[i * d + j] * ir - px[i * d + j] * ir3 * dot;
        }
        break;
      }
      case OpKind::Leaf:
        break;
      default:
        throw Error(std::string("backward: missing rule for ") + op_name(node.kind));
    }
  });
}

}  // namespace wassalign

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wassalign/tensor.hpp"

namespace wassalign {

// Trainable tensor with a persistent gradient buffer of identical shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape(), value.dtype())) {}

  void zero_grad();
};

enum class OpKind : uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  MatMul,
  Conv2d,
  Relu,
  Exp,
  Log,
  Sqrt,
  Square,
  Sum,
  Mean,
  SumLast,
  MeanLast,
  MaxPool2d,
  Reshape,
  ConcatRows,
  IndexSelect,
  Sort,
  Inner,
  Transpose2d,
  Broadcast,
  LogSoftmax,
  Scale,
  AddScalar,
  BatchNormTrain,
  BatchNormEval,
  InstanceNorm,
  L2NormalizeRows,
};

const char* op_name(OpKind k);

class Tape;

// Lightweight handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  const Shape& shape() const { return val().shape(); }
  DType dtype() const { return val().dtype(); }
  double item() const { return val().item(); }
};

struct BatchNormState;  // nn.hpp

// Reverse-mode tape. Append-only during a forward pass; nodes are
// topologically ordered by construction (an op only references earlier
// ids). One tape serves one forward/backward cycle on one thread and is
// rebuilt per iteration.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves ---------------------------------------------------------------
  Var leaf(Tensor value);
  Var param(Parameter& p);  // gradient sink: backward accumulates into p.grad

  // Elementwise binary; shapes must match, or one operand is scalar, or
  // the smaller shape is a trailing suffix of the larger (the smaller is
  // repeated along the leading dimensions).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);

  // Elementwise unary.
  Var relu(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var square(Var a);

  // Scalar-attribute arithmetic.
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }

  // Linear algebra.
  Var matmul(Var a, Var b);    // [M,K] x [K,N]
  Var transpose2d(Var a);      // [M,N] -> [N,M]
  Var inner(Var a, Var b);     // full dot product -> scalar

  // Convolution / pooling.
  Var conv2d(Var x, Var w, std::optional<Var> bias, int64_t stride, int64_t pad);
  Var max_pool2d(Var x, int64_t kernel, int64_t stride);

  // Reductions.
  Var sum(Var a);        // scalar
  Var mean(Var a);       // scalar
  Var sum_last(Var a);   // reduce last axis
  Var mean_last(Var a);  // reduce last axis

  // Structure.
  Var reshape(Var a, Shape shape);
  Var broadcast_to(Var a, Shape shape);  // suffix/scalar broadcast only
  Var concat_rows(Var a, Var b);
  Var index_select0(Var a, const std::vector<int64_t>& indices);

  // 1-D ascending stable sort; returns the sorted values plus the applied
  // permutation (perm[i] = original position of the i-th smallest). The
  // backward pass routes gradients through this fixed permutation.
  std::pair<Var, std::vector<int64_t>> sort1d(Var a);

  // Row-wise log-softmax over the last axis of a 2-D tensor.
  Var log_softmax_rows(Var a);

  // Fused normalization layers (see nn module for the layer contracts).
  Var batch_norm_train(Var x, Var scale, Var shift, BatchNormState& state);
  Var batch_norm_eval(Var x, Var scale, Var shift, const BatchNormState& state);
  Var instance_norm(Var x, Var scale, Var shift, double eps);

  // Row-wise l2 normalization of [N,d].
  Var l2_normalize_rows(Var x, double eps = 1e-12);

  // Reverse sweep from a scalar loss. Fills bound Parameter gradients
  // additively; parameters not reachable from `loss` are untouched.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::array<int32_t, 3> in{{-1, -1, -1}};
    int n_in = 0;
    double attr = 0.0;           // scale constant / epsilon
    int64_t i0 = 0, i1 = 0;      // stride/pad or kernel/stride
    std::vector<int64_t> indices;
    Tensor saved;
    Tensor saved2;
    Shape in_shape;
  };

  Var push(Node node, Tensor value);
  Var unary(OpKind kind, Var a);
  Var binary(OpKind kind, Var a, Var b);
  void check_owned(Var v, const char* op) const;
  const Tensor& input_value(const Node& n, int i) const { return values_[static_cast<size_t>(n.in[static_cast<size_t>(i)])]; }

  void backward_node(int32_t id, std::vector<Tensor>& grads, std::vector<uint8_t>& has_grad);
  Tensor& grad_of(int32_t id, std::vector<Tensor>& grads, std::vector<uint8_t>& has_grad);

  std::vector<Node> nodes_;
  std::vector<Tensor> values_;
  std::vector<std::pair<int32_t, Parameter*>> params_;
};

}  // namespace wassalign

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hesskit/tensor.hpp"

namespace hesskit {

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
  kInput,
  kConst,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kMatMulNT,
  kRowSoftmax,
  kLayerNorm,
  kGelu,
  kRelu,
  kGatherPairs,
  kLogSumExpRows,
  kSumAll,
  kSliceCols,
  kConcatCols,
  kScatterIntoConst,
  kReshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kMatMulNT: return "matmul_nt";
    case Op::kRowSoftmax: return "row_softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kGelu: return "gelu";
    case Op::kRelu: return "relu";
    case Op::kGatherPairs: return "gather_pairs";
    case Op::kLogSumExpRows: return "log_sum_exp_rows";
    case Op::kSumAll: return "sum";
    case Op::kSliceCols: return "slice_cols";
    case Op::kConcatCols: return "concat_cols";
    case Op::kScatterIntoConst: return "scatter_into_const";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

struct Node {
  Op op;
  NodeId a = -1;
  NodeId b = -1;
  std::vector<std::int64_t> shape;   // output shape
  double scalar = 0.0;               // kScale factor / kLayerNorm epsilon
  std::vector<std::int64_t> ints;    // op-specific attributes
  std::int32_t const_id = -1;        // kConst / kScatterIntoConst base

  Node(Op o, NodeId x, NodeId y, std::vector<std::int64_t> shp)
      : op(o), a(x), b(y), shape(std::move(shp)) {}
};

/// Recorded straight-line computation with one designated input vector and
/// one scalar output. Recording happens once; executions replay the node
/// list in order, so repeated runs with the same input are bit-identical.
/// A Graph is immutable after set_output() and safe to share across threads;
/// each concurrent evaluation owns its Executor.
class Graph {
 public:
  NodeId input(std::int64_t length) {
    if (input_ >= 0) throw std::invalid_argument("graph: input leaf already defined");
    if (length < 0) throw std::invalid_argument("graph: negative input length");
    input_ = push({Op::kInput, -1, -1, {length}});
    input_length_ = length;
    return input_;
  }

  NodeId constant(Tensor value) {
    Node n{Op::kConst, -1, -1, value.shape};
    n.const_id = static_cast<std::int32_t>(constants_.size());
    constants_.push_back(std::move(value));
    return push(std::move(n));
  }

  NodeId add(NodeId x, NodeId y) { return elementwise(Op::kAdd, x, y); }
  NodeId sub(NodeId x, NodeId y) { return elementwise(Op::kSub, x, y); }
  NodeId mul(NodeId x, NodeId y) { return elementwise(Op::kMul, x, y); }

  NodeId scale(NodeId x, double factor) {
    Node n{Op::kScale, x, -1, shape_of(x)};
    n.scalar = factor;
    return push(std::move(n));
  }

  NodeId matmul(NodeId x, NodeId y) {
    require_matrix(x, "matmul");
    require_matrix(y, "matmul");
    if (shape_of(x)[1] != shape_of(y)[0])
      throw std::invalid_argument("matmul: inner extents differ");
    return push({Op::kMatMul, x, y, {shape_of(x)[0], shape_of(y)[1]}});
  }

  /// x * transpose(y); y given as [n, k] for output [m, n].
  NodeId matmul_nt(NodeId x, NodeId y) {
    require_matrix(x, "matmul_nt");
    require_matrix(y, "matmul_nt");
    if (shape_of(x)[1] != shape_of(y)[1])
      throw std::invalid_argument("matmul_nt: inner extents differ");
    return push({Op::kMatMulNT, x, y, {shape_of(x)[0], shape_of(y)[0]}});
  }

  /// Softmax along each row. With causal=true the input must be square and
  /// row i is normalized over columns 0..i only; masked entries are exactly
  /// zero and never enter the normalization.
  NodeId row_softmax(NodeId x, bool causal = false) {
    require_matrix(x, "row_softmax");
    if (causal && shape_of(x)[0] != shape_of(x)[1])
      throw std::invalid_argument("row_softmax: causal mask needs a square matrix");
    Node n{Op::kRowSoftmax, x, -1, shape_of(x)};
    n.ints = {causal ? std::int64_t{1} : std::int64_t{0}};
    return push(std::move(n));
  }

  NodeId layer_norm(NodeId x, double eps = 1e-5) {
    require_matrix(x, "layer_norm");
    Node n{Op::kLayerNorm, x, -1, shape_of(x)};
    n.scalar = eps;
    return push(std::move(n));
  }

  NodeId gelu(NodeId x) { return push({Op::kGelu, x, -1, shape_of(x)}); }
  NodeId relu(NodeId x) { return push({Op::kRelu, x, -1, shape_of(x)}); }

  /// Picks entries (row, col) of a matrix into a vector, in the order given.
  NodeId gather_pairs(NodeId x, const std::vector<std::pair<std::int64_t, std::int64_t>>& rc) {
    require_matrix(x, "gather_pairs");
    Node n{Op::kGatherPairs, x, -1, {static_cast<std::int64_t>(rc.size())}};
    n.ints.reserve(rc.size() * 2);
    for (const auto& [r, c] : rc) {
      if (r < 0 || r >= shape_of(x)[0] || c < 0 || c >= shape_of(x)[1])
        throw std::invalid_argument("gather_pairs: index out of range");
      n.ints.push_back(r);
      n.ints.push_back(c);
    }
    return push(std::move(n));
  }

  NodeId log_sum_exp_rows(NodeId x) {
    require_matrix(x, "log_sum_exp_rows");
    return push({Op::kLogSumExpRows, x, -1, {shape_of(x)[0]}});
  }

  NodeId sum_all(NodeId x) { return push({Op::kSumAll, x, -1, {std::int64_t{1}}}); }

  NodeId slice_cols(NodeId x, std::int64_t c0, std::int64_t c1) {
    require_matrix(x, "slice_cols");
    if (c0 < 0 || c1 > shape_of(x)[1] || c0 >= c1)
      throw std::invalid_argument("slice_cols: bad column range");
    Node n{Op::kSliceCols, x, -1, {shape_of(x)[0], c1 - c0}};
    n.ints = {c0, c1};
    return push(std::move(n));
  }

  NodeId concat_cols(NodeId x, NodeId y) {
    require_matrix(x, "concat_cols");
    require_matrix(y, "concat_cols");
    if (shape_of(x)[0] != shape_of(y)[0])
      throw std::invalid_argument("concat_cols: row counts differ");
    return push({Op::kConcatCols, x, y, {shape_of(x)[0], shape_of(x)[1] + shape_of(y)[1]}});
  }

  /// Copy of `base` with base.data[flat] replaced by u[index] for each
  /// (flat, index) pair. This is how a restricted parameter vector is
  /// scattered into a frozen layer matrix.
  NodeId scatter_into_const(Tensor base, NodeId u,
                            const std::vector<std::pair<std::int64_t, std::int64_t>>& positions) {
    const std::int64_t base_n = base.numel();
    const std::int64_t u_n = TensorT<double>::numel_of(shape_of(u));
    Node n{Op::kScatterIntoConst, u, -1, base.shape};
    n.const_id = static_cast<std::int32_t>(constants_.size());
    n.ints.reserve(positions.size() * 2);
    for (const auto& [flat, idx] : positions) {
      if (flat < 0 || flat >= base_n) throw std::invalid_argument("scatter: offset out of range");
      if (idx < 0 || idx >= u_n) throw std::invalid_argument("scatter: source index out of range");
      n.ints.push_back(flat);
      n.ints.push_back(idx);
    }
    constants_.push_back(std::move(base));
    return push(std::move(n));
  }

  NodeId reshape(NodeId x, std::vector<std::int64_t> new_shape) {
    if (TensorT<double>::numel_of(new_shape) != TensorT<double>::numel_of(shape_of(x)))
      throw std::invalid_argument("reshape: element counts differ");
    return push({Op::kReshape, x, -1, std::move(new_shape)});
  }

  void set_output(NodeId out) {
    if (TensorT<double>::numel_of(shape_of(out)) != 1)
      throw std::invalid_argument("graph: output must hold a single scalar");
    output_ = out;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Tensor>& constants() const { return constants_; }
  const std::vector<std::int64_t>& shape_of(NodeId id) const {
    return nodes_.at(static_cast<std::size_t>(id)).shape;
  }
  NodeId input_id() const { return input_; }
  NodeId output_id() const { return output_; }
  std::int64_t input_length() const { return input_length_; }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId elementwise(Op op, NodeId x, NodeId y) {
    if (!same_shape(shape_of(x), shape_of(y)))
      throw std::invalid_argument(std::string(op_name(op)) + ": shapes differ " +
                                  shape_to_string(shape_of(x)) + " vs " +
                                  shape_to_string(shape_of(y)));
    return push({op, x, y, shape_of(x)});
  }

  void require_matrix(NodeId x, const char* who) const {
    if (shape_of(x).size() != 2)
      throw std::invalid_argument(std::string(who) + ": expected a matrix, got shape " +
                                  shape_to_string(shape_of(x)));
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> constants_;
  NodeId input_ = -1;
  NodeId output_ = -1;
  std::int64_t input_length_ = 0;
};

}  // namespace hesskit

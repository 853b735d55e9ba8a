#pragma once

#include "irmkit/types.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace irm::ad {

enum class OpKind : uint8_t {
  Leaf,        // differentiable input
  Constant,    // non-differentiable input (data, masks, seeds)
  Add,         // elementwise, same shape
  AddRowVec,   // matrix + broadcast row vector (bias)
  Sub,
  Mul,         // Hadamard
  Div,         // elementwise
  ScalarMul,   // attr * tensor, attr a plain double
  Scale,       // tensor * (1×1 tensor), gradient flows to both
  MatMul,      // op(a) * op(b) with optional transposes
  Transpose,
  Relu,
  Sigmoid,
  Log,
  Sqrt,
  Sum,         // full reduction to 1×1
  Mean,        // full reduction to 1×1
  Square,
  BceWithLogits,  // elementwise; input b holds the labels
  LogSoftmax,     // row-wise
  Softmax,        // row-wise
};

struct Node {
  OpKind kind;
  int32_t a = -1;
  int32_t b = -1;
  bool trans_a = false;
  bool trans_b = false;
  double attr = 0.0;
  Mat value;
};

class Tape;

/// Handle to a recorded tensor: the tape it lives on plus its node id.
/// Copyable and cheap; the value is owned by the tape.
struct Var {
  Tape* tape = nullptr;
  int32_t id = -1;

  bool on_tape() const { return tape != nullptr && id >= 0; }
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  double scalar() const;
};

/// Append-only record of primitive operations. Node inputs always precede
/// the node, so the record is topologically ordered by construction.
/// Backward passes append onto the same tape, which is what makes gradients
/// themselves differentiable.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat v) { return emit(OpKind::Leaf, -1, -1, std::move(v)); }
  Var constant(Mat v) { return emit(OpKind::Constant, -1, -1, std::move(v)); }
  Var constant_scalar(double v) { return constant(scalar_mat(v)); }

  size_t size() const { return nodes_.size(); }
  const Node& node(int32_t id) const { return nodes_[id]; }
  Var var(int32_t id) { return Var{this, id}; }

  /// Mark for later truncation; pairs with truncate() to drop nodes
  /// recorded after the mark (used to discard non-create_graph backward
  /// scratch).
  size_t checkpoint() const { return nodes_.size(); }
  void truncate(size_t mark) { nodes_.resize(mark); }

  /// Recomputes every non-input node from its recorded inputs and checks
  /// the stored value is reproduced bitwise.
  bool replay_matches() const;

  Var emit(OpKind kind, int32_t a, int32_t b, Mat value, bool trans_a = false,
           bool trans_b = false, double attr = 0.0);

  /// Forward evaluation of a single node from input values; shared by
  /// emit() and replay_matches().
  static Mat eval(OpKind kind, const Mat* a, const Mat* b, bool trans_a,
                  bool trans_b, double attr);

 private:
  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->node(id).value; }

inline double Var::scalar() const {
  if (!is_scalar()) throw ShapeError("scalar() on non-1x1 tensor");
  return value()(0, 0);
}

}  // namespace irm::ad

#include "irmkit/tape.hpp"

#include <cmath>
#include <cstring>

namespace irm::ad {

namespace {

Mat row_softmax(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    Eigen::ArrayXd e = (x.row(i).array() - m).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return out;
}

Mat row_log_softmax(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return out;
}

}  // namespace

Mat Tape::eval(OpKind kind, const Mat* a, const Mat* b, bool trans_a,
               bool trans_b, double attr) {
  switch (kind) {
    case OpKind::Leaf:
    case OpKind::Constant:
      throw ShapeError("eval() called on an input node");
    case OpKind::Add:
      return *a + *b;
    case OpKind::AddRowVec: {
      Mat out = *a;
      out.rowwise() += b->row(0);
      return out;
    }
    case OpKind::Sub:
      return *a - *b;
    case OpKind::Mul:
      return a->cwiseProduct(*b);
    case OpKind::Div:
      return a->cwiseQuotient(*b);
    case OpKind::ScalarMul:
      return attr * (*a);
    case OpKind::Scale:
      return (*b)(0, 0) * (*a);
    case OpKind::MatMul: {
      if (trans_a && trans_b) throw ShapeError("matmul: double transpose unsupported");
      if (trans_a) return a->transpose() * (*b);
      if (trans_b) return (*a) * b->transpose();
      return (*a) * (*b);
    }
    case OpKind::Transpose:
      return a->transpose();
    case OpKind::Relu:
      return a->cwiseMax(0.0);
    case OpKind::Sigmoid: {
      // 1/(1+e^-x) evaluated from the non-overflowing side.
      Mat out(a->rows(), a->cols());
      const double* src = a->data();
      double* dst = out.data();
      for (Eigen::Index i = 0; i < a->size(); ++i) {
        const double x = src[i];
        if (x >= 0) {
          dst[i] = 1.0 / (1.0 + std::exp(-x));
        } else {
          const double e = std::exp(x);
          dst[i] = e / (1.0 + e);
        }
      }
      return out;
    }
    case OpKind::Log:
      return a->array().log().matrix();
    case OpKind::Sqrt:
      return a->array().sqrt().matrix();
    case OpKind::Sum:
      return scalar_mat(a->sum());
    case OpKind::Mean:
      return scalar_mat(a->mean());
    case OpKind::Square:
      return a->cwiseProduct(*a);
    case OpKind::BceWithLogits: {
      // softplus(x) - x*y, stable form max(x,0) - x*y + log1p(exp(-|x|)).
      Mat out(a->rows(), a->cols());
      const double* x = a->data();
      const double* y = b->data();
      double* dst = out.data();
      for (Eigen::Index i = 0; i < a->size(); ++i) {
        dst[i] = std::max(x[i], 0.0) - x[i] * y[i] + std::log1p(std::exp(-std::abs(x[i])));
      }
      return out;
    }
    case OpKind::LogSoftmax:
      return row_log_softmax(*a);
    case OpKind::Softmax:
      return row_softmax(*a);
  }
  throw ShapeError("unknown op kind");
}

Var Tape::emit(OpKind kind, int32_t a, int32_t b, Mat value, bool trans_a,
               bool trans_b, double attr) {
  const int32_t id = static_cast<int32_t>(nodes_.size());
  if (!value.allFinite()) {
    throw FiniteViolation(id, "non-finite value produced at node " + std::to_string(id));
  }
  Node n;
  n.kind = kind;
  n.a = a;
  n.b = b;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  n.attr = attr;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, id};
}

bool Tape::replay_matches() const {
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::Leaf || n.kind == OpKind::Constant) continue;
    const Mat* a = n.a >= 0 ? &nodes_[n.a].value : nullptr;
    const Mat* b = n.b >= 0 ? &nodes_[n.b].value : nullptr;
    Mat redo = eval(n.kind, a, b, n.trans_a, n.trans_b, n.attr);
    if (redo.rows() != n.value.rows() || redo.cols() != n.value.cols()) return false;
    if (std::memcmp(redo.data(), n.value.data(), sizeof(double) * redo.size()) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace irm::ad

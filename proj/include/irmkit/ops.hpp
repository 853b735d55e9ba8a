#pragma once

#include "irmkit/tape.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace irm::ad {

// Primitive free functions. Each records one node; shapes are validated and
// every produced value is checked finite (FiniteViolation otherwise).

Var add(Var a, Var b);
Var add_rowvec(Var m, Var r);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);
Var scalar_mul(double c, Var a);
Var scale(Var m, Var s);  // s is 1×1; gradient flows to both m and s
Var matmul(Var a, Var b);
Var matmul_tn(Var a, Var b);  // aᵀ·b
Var matmul_nt(Var a, Var b);  // a·bᵀ
Var transpose(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var log(Var a);
Var sqrt(Var a);
Var sum(Var a);
Var mean(Var a);
Var square(Var a);
Var bce_with_logits(Var logits, Var labels);
Var log_softmax(Var a);
Var softmax(Var a);

// Composites.

Var neg(Var a);
Var squared_norm(Var a);  // sum(square(a)), 1×1
/// Mean cross-entropy of row-wise softmax against one-hot labels.
Var softmax_cross_entropy(Var logits, Var onehot);

/// Reverse-mode gradients of a 1×1 output with respect to recorded tensors.
/// With create_graph the results stay on the tape and can be differentiated
/// again; without it the backward scratch is truncated away and plain
/// values are returned via grad_values().
std::vector<Var> grad(Var output, std::span<const Var> wrt, bool create_graph);
std::vector<Mat> grad_values(Var output, std::span<const Var> wrt);

inline std::vector<Var> grad(Var output, std::initializer_list<Var> wrt,
                             bool create_graph) {
  std::vector<Var> w(wrt);
  return grad(output, std::span<const Var>(w), create_graph);
}
inline std::vector<Mat> grad_values(Var output, std::initializer_list<Var> wrt) {
  std::vector<Var> w(wrt);
  return grad_values(output, std::span<const Var>(w));
}

/// Evaluates fn over fresh leaves for the given inputs.
struct ForwardResult {
  std::unique_ptr<Tape> tape;
  std::vector<Var> inputs;
  Var output;
};

using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

ForwardResult forward(const GraphFn& fn, const std::vector<Mat>& inputs);

}  // namespace irm::ad

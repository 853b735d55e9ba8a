#include "irmkit/ops.hpp"

#include <algorithm>

namespace irm::ad {

namespace {

Tape& tape_of(Var a) {
  if (!a.on_tape()) throw NotALeaf("operand is not on a tape");
  return *a.tape;
}

void same_tape(Var a, Var b) {
  tape_of(a);
  tape_of(b);
  if (a.tape != b.tape) throw ShapeError("operands recorded on different tapes");
}

void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch");
  }
}

Var emit2(OpKind kind, Var a, Var b, bool ta = false, bool tb = false,
          double attr = 0.0) {
  Mat v = Tape::eval(kind, &a.value(), &b.value(), ta, tb, attr);
  return a.tape->emit(kind, a.id, b.id, std::move(v), ta, tb, attr);
}

Var emit1(OpKind kind, Var a, double attr = 0.0) {
  Mat v = Tape::eval(kind, &a.value(), nullptr, false, false, attr);
  return a.tape->emit(kind, a.id, -1, std::move(v), false, false, attr);
}

}  // namespace

Var add(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "add");
  return emit2(OpKind::Add, a, b);
}

Var add_rowvec(Var m, Var r) {
  same_tape(m, r);
  if (r.rows() != 1 || r.cols() != m.cols()) throw ShapeError("add_rowvec: bad bias shape");
  return emit2(OpKind::AddRowVec, m, r);
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "sub");
  return emit2(OpKind::Sub, a, b);
}

Var mul(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "mul");
  return emit2(OpKind::Mul, a, b);
}

Var divide(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "divide");
  return emit2(OpKind::Div, a, b);
}

Var scalar_mul(double c, Var a) {
  tape_of(a);
  return emit1(OpKind::ScalarMul, a, c);
}

Var scale(Var m, Var s) {
  same_tape(m, s);
  if (!s.is_scalar()) throw ShapeError("scale: scale factor must be 1x1");
  return emit2(OpKind::Scale, m, s);
}

Var matmul(Var a, Var b) {
  same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  return emit2(OpKind::MatMul, a, b);
}

Var matmul_tn(Var a, Var b) {
  same_tape(a, b);
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn: inner dimension mismatch");
  return emit2(OpKind::MatMul, a, b, true, false);
}

Var matmul_nt(Var a, Var b) {
  same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  return emit2(OpKind::MatMul, a, b, false, true);
}

Var transpose(Var a) {
  tape_of(a);
  return emit1(OpKind::Transpose, a);
}

Var relu(Var a) {
  tape_of(a);
  return emit1(OpKind::Relu, a);
}

Var sigmoid(Var a) {
  tape_of(a);
  return emit1(OpKind::Sigmoid, a);
}

Var log(Var a) {
  tape_of(a);
  return emit1(OpKind::Log, a);
}

Var sqrt(Var a) {
  tape_of(a);
  return emit1(OpKind::Sqrt, a);
}

Var sum(Var a) {
  tape_of(a);
  return emit1(OpKind::Sum, a);
}

Var mean(Var a) {
  tape_of(a);
  return emit1(OpKind::Mean, a);
}

Var square(Var a) {
  tape_of(a);
  return emit1(OpKind::Square, a);
}

Var bce_with_logits(Var logits, Var labels) {
  same_tape(logits, labels);
  same_shape(logits, labels, "bce_with_logits");
  return emit2(OpKind::BceWithLogits, logits, labels);
}

Var log_softmax(Var a) {
  tape_of(a);
  return emit1(OpKind::LogSoftmax, a);
}

Var softmax(Var a) {
  tape_of(a);
  return emit1(OpKind::Softmax, a);
}

Var neg(Var a) { return scalar_mul(-1.0, a); }

Var squared_norm(Var a) { return sum(square(a)); }

Var softmax_cross_entropy(Var logits, Var onehot) {
  same_tape(logits, onehot);
  same_shape(logits, onehot, "softmax_cross_entropy");
  Var ls = log_softmax(logits);
  Var picked = mul(onehot, ls);
  return scalar_mul(-static_cast<double>(logits.rows()), mean(picked));
}

// ---------------------------------------------------------------------------
// Reverse sweep

namespace {

/// Broadcast of per-row sums back to full width: (g · 1ₖ) · 1ₖᵀ.
Var rowsum_broadcast(Var g) {
  Tape& t = *g.tape;
  Var ones_col = t.constant(Mat::Ones(g.cols(), 1));
  Var rs = matmul(g, ones_col);
  Var ones_row = t.constant(Mat::Ones(1, g.cols()));
  return matmul(rs, ones_row);
}

struct Accumulator {
  std::vector<int32_t> adj;  // node id of the adjoint, -1 if none
  std::vector<char> active;

  void accumulate(Tape& t, int32_t target, Var contrib) {
    if (adj[target] < 0) {
      adj[target] = contrib.id;
    } else {
      adj[target] = add(t.var(adj[target]), contrib).id;
    }
  }
};

/// Emits the backward of node `id` given its output adjoint g, routing
/// contributions to inputs that sit in the active subgraph. Every rule is
/// expressed through the primitives themselves, so recorded backwards are
/// differentiable to any order.
void backward_node(Tape& t, int32_t id, Var g, Accumulator& acc) {
  const Node& n = t.node(id);
  const bool want_a = n.a >= 0 && acc.active[n.a];
  const bool want_b = n.b >= 0 && acc.active[n.b];
  if (!want_a && !want_b) return;
  Var a = n.a >= 0 ? t.var(n.a) : Var{};
  Var b = n.b >= 0 ? t.var(n.b) : Var{};
  Var out = t.var(id);

  switch (n.kind) {
    case OpKind::Leaf:
    case OpKind::Constant:
      return;
    case OpKind::Add:
      if (want_a) acc.accumulate(t, n.a, g);
      if (want_b) acc.accumulate(t, n.b, g);
      return;
    case OpKind::AddRowVec:
      if (want_a) acc.accumulate(t, n.a, g);
      if (want_b) {
        Var ones = t.constant(Mat::Ones(1, g.rows()));
        acc.accumulate(t, n.b, matmul(ones, g));
      }
      return;
    case OpKind::Sub:
      if (want_a) acc.accumulate(t, n.a, g);
      if (want_b) acc.accumulate(t, n.b, neg(g));
      return;
    case OpKind::Mul:
      if (want_a) acc.accumulate(t, n.a, mul(g, b));
      if (want_b) acc.accumulate(t, n.b, mul(g, a));
      return;
    case OpKind::Div:
      if (want_a) acc.accumulate(t, n.a, divide(g, b));
      if (want_b) acc.accumulate(t, n.b, neg(divide(mul(g, a), mul(b, b))));
      return;
    case OpKind::ScalarMul:
      if (want_a) acc.accumulate(t, n.a, scalar_mul(n.attr, g));
      return;
    case OpKind::Scale:
      if (want_a) acc.accumulate(t, n.a, scale(g, b));
      if (want_b) acc.accumulate(t, n.b, sum(mul(g, a)));
      return;
    case OpKind::MatMul:
      if (!n.trans_a && !n.trans_b) {
        if (want_a) acc.accumulate(t, n.a, matmul_nt(g, b));
        if (want_b) acc.accumulate(t, n.b, matmul_tn(a, g));
      } else if (n.trans_b) {  // out = a·bᵀ
        if (want_a) acc.accumulate(t, n.a, matmul(g, b));
        if (want_b) acc.accumulate(t, n.b, matmul_tn(g, a));
      } else {  // out = aᵀ·b
        if (want_a) acc.accumulate(t, n.a, matmul_nt(b, g));
        if (want_b) acc.accumulate(t, n.b, matmul(a, g));
      }
      return;
    case OpKind::Transpose:
      if (want_a) acc.accumulate(t, n.a, transpose(g));
      return;
    case OpKind::Relu: {
      // Subgradient 0 at exactly 0; the mask is a constant of the re-recorded
      // graph, so second derivatives through relu are 0 almost everywhere.
      if (want_a) {
        Mat mask = (a.value().array() > 0.0).cast<double>().matrix();
        acc.accumulate(t, n.a, mul(g, t.constant(std::move(mask))));
      }
      return;
    }
    case OpKind::Sigmoid:
      if (want_a) {
        Var ones = t.constant(Mat::Ones(out.rows(), out.cols()));
        acc.accumulate(t, n.a, mul(g, mul(out, sub(ones, out))));
      }
      return;
    case OpKind::Log:
      if (want_a) acc.accumulate(t, n.a, divide(g, a));
      return;
    case OpKind::Sqrt:
      if (want_a) acc.accumulate(t, n.a, divide(g, scalar_mul(2.0, out)));
      return;
    case OpKind::Sum:
      if (want_a) acc.accumulate(t, n.a, scale(t.constant(Mat::Ones(a.rows(), a.cols())), g));
      return;
    case OpKind::Mean:
      if (want_a) {
        const double inv = 1.0 / static_cast<double>(a.value().size());
        Mat w = Mat::Constant(a.rows(), a.cols(), inv);
        acc.accumulate(t, n.a, scale(t.constant(std::move(w)), g));
      }
      return;
    case OpKind::Square:
      if (want_a) acc.accumulate(t, n.a, mul(g, scalar_mul(2.0, a)));
      return;
    case OpKind::BceWithLogits:
      // d/dx [softplus(x) - x·y] = sigmoid(x) - y. Labels get no gradient.
      if (want_a) acc.accumulate(t, n.a, mul(g, sub(sigmoid(a), b)));
      return;
    case OpKind::LogSoftmax:
      if (want_a) acc.accumulate(t, n.a, sub(g, mul(softmax(a), rowsum_broadcast(g))));
      return;
    case OpKind::Softmax:
      if (want_a) acc.accumulate(t, n.a, mul(out, sub(g, rowsum_broadcast(mul(out, g)))));
      return;
  }
  throw UnsupportedSecondOrder("no backward rule for op kind");
}

std::vector<Var> reverse_sweep(Var output, std::span<const Var> wrt) {
  Tape& t = tape_of(output);
  if (!output.is_scalar()) throw ShapeError("grad: output must be 1x1");
  for (const Var& w : wrt) {
    if (!w.on_tape() || w.tape != &t) throw NotALeaf("grad: wrt tensor not on the active tape");
  }

  const int32_t n = output.id + 1;
  std::vector<char> anc(n, 0), desc(n, 0);

  std::vector<int32_t> stack{output.id};
  anc[output.id] = 1;
  while (!stack.empty()) {
    const Node& node = t.node(stack.back());
    stack.pop_back();
    for (int32_t in : {node.a, node.b}) {
      if (in >= 0 && !anc[in]) {
        anc[in] = 1;
        stack.push_back(in);
      }
    }
  }
  for (const Var& w : wrt) {
    if (w.id < n) desc[w.id] = 1;
  }
  for (int32_t id = 0; id < n; ++id) {
    const Node& node = t.node(id);
    if ((node.a >= 0 && desc[node.a]) || (node.b >= 0 && desc[node.b])) desc[id] = 1;
  }

  Accumulator acc;
  acc.adj.assign(n, -1);
  acc.active.resize(n);
  for (int32_t id = 0; id < n; ++id) acc.active[id] = anc[id] && desc[id];

  if (acc.active[output.id]) {
    acc.adj[output.id] = t.constant_scalar(1.0).id;
  }
  for (int32_t id = output.id; id >= 0; --id) {
    if (!acc.active[id] || acc.adj[id] < 0) continue;
    backward_node(t, id, t.var(acc.adj[id]), acc);
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id < n && acc.adj[w.id] >= 0) {
      out.push_back(t.var(acc.adj[w.id]));
    } else {
      out.push_back(t.constant(Mat::Zero(w.rows(), w.cols())));
    }
  }
  return out;
}

}  // namespace

std::vector<Var> grad(Var output, std::span<const Var> wrt, bool create_graph) {
  Tape& t = tape_of(output);
  if (create_graph) return reverse_sweep(output, wrt);
  // Detached: compute through the same path, then drop the backward scratch
  // and re-emit the results as constants so a second grad() cannot flow
  // through them.
  const size_t mark = t.checkpoint();
  std::vector<Var> vars = reverse_sweep(output, wrt);
  std::vector<Mat> values;
  values.reserve(vars.size());
  for (const Var& v : vars) values.push_back(v.value());
  t.truncate(mark);
  std::vector<Var> out;
  out.reserve(values.size());
  for (Mat& m : values) out.push_back(t.constant(std::move(m)));
  return out;
}

std::vector<Mat> grad_values(Var output, std::span<const Var> wrt) {
  Tape& t = tape_of(output);
  const size_t mark = t.checkpoint();
  std::vector<Var> vars = reverse_sweep(output, wrt);
  std::vector<Mat> values;
  values.reserve(vars.size());
  for (const Var& v : vars) values.push_back(v.value());
  t.truncate(mark);
  return values;
}

ForwardResult forward(const GraphFn& fn, const std::vector<Mat>& inputs) {
  ForwardResult r;
  r.tape = std::make_unique<Tape>();
  r.inputs.reserve(inputs.size());
  for (const Mat& m : inputs) r.inputs.push_back(r.tape->leaf(m));
  r.output = fn(*r.tape, r.inputs);
  if (!r.output.is_scalar()) throw ShapeError("forward: graph output must be 1x1");
  return r;
}

}  // namespace irm::ad

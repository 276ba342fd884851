#pragma once

#include "fbsde/tensor.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fbsde {

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kCMul,
  kCDiv,
  kMatMul,
  kScale,
  kShift,
  kTanh,
  kSin,
  kCos,
  kRowSum,
  kBroadcastCols,
  kAddRowVec,
  kSumAll,
  kSquaredNorm,
  kConcatCols,
  kSliceCols,
  kRowwiseMatVec,
};

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Record of primitive operations over dense matrices with per-node value and
/// adjoint slots. Nodes are stored in topological (insertion) order; values
/// are computed eagerly on emission and can be recomputed with forward() after
/// leaf values change. backward() fills adjoints by one reverse sweep.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;

  struct Node {
    OpKind op = OpKind::kLeaf;
    Var a{}, b{};
    Scalar alpha = Scalar(0);  // scale / shift amount
    Index i0 = 0, i1 = 0;      // slice offset+width, or (q, m) for RowwiseMatVec
    Mat value;
    Mat adjoint;
    bool requires_grad = false;
    std::string name;
  };

  Var leaf(Mat value, bool requires_grad = false, std::string name = {}) {
    Node n;
    n.op = OpKind::kLeaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var constant(Mat value) { return leaf(std::move(value)); }

  Var emit(OpKind op, Var a, Var b = {}, Scalar alpha = Scalar(0), Index i0 = 0, Index i1 = 0) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.alpha = alpha;
    n.i0 = i0;
    n.i1 = i1;
    n.requires_grad = node(a).requires_grad || (b.valid() && node(b).requires_grad);
    nodes_.push_back(std::move(n));
    Var v{static_cast<std::int32_t>(nodes_.size() - 1)};
    compute(nodes_.back());
    return v;
  }

  std::size_t size() const { return nodes_.size(); }

  const Mat& value(Var v) const { return node(v).value; }

  Mat& mutable_value(Var v) {
    Node& n = node(v);
    if (n.op != OpKind::kLeaf) throw std::logic_error("mutable_value: not a leaf");
    return n.value;
  }

  void set_value(Var v, Mat value) {
    Node& n = node(v);
    if (n.op != OpKind::kLeaf) throw std::logic_error("set_value: not a leaf");
    if (value.rows() != n.value.rows() || value.cols() != n.value.cols())
      throw std::invalid_argument("set_value: shape mismatch");
    n.value = std::move(value);
  }

  const Mat& adjoint(Var v) const {
    const Node& n = node(v);
    if (n.adjoint.size() == 0) throw std::logic_error("adjoint not computed");
    return n.adjoint;
  }

  Var find(const std::string& name) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].name == name) return Var{static_cast<std::int32_t>(i)};
    return Var{};
  }

  /// Recomputes every non-leaf value in topological order (replay).
  void forward() {
    for (Node& n : nodes_)
      if (n.op != OpKind::kLeaf) compute(n);
  }

  /// Reverse sweep. The root must be a 1x1 scalar; its adjoint seeds at 1.
  void backward(Var root) {
    Node& rn = node(root);
    if (rn.value.rows() != 1 || rn.value.cols() != 1)
      throw std::invalid_argument("backward: root is not scalar");
    diverged_ = !rn.value.allFinite();
    for (Node& n : nodes_) {
      if (n.requires_grad) {
        n.adjoint.resize(n.value.rows(), n.value.cols());
        n.adjoint.setZero();
      }
    }
    if (!rn.requires_grad) return;
    rn.adjoint(0, 0) = Scalar(1);
    for (std::int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.op == OpKind::kLeaf) continue;
      propagate(n);
    }
  }

  /// True when the last backward() saw a non-finite root value.
  bool diverged() const { return diverged_; }

  /// Adjoints of all named gradient leaves, keyed by name.
  std::map<std::string, Mat> gradients() const {
    std::map<std::string, Mat> out;
    for (const Node& n : nodes_)
      if (n.op == OpKind::kLeaf && n.requires_grad && !n.name.empty()) out[n.name] = n.adjoint;
    return out;
  }

  std::vector<Var> grad_leaves() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == OpKind::kLeaf && nodes_[i].requires_grad)
        out.push_back(Var{static_cast<std::int32_t>(i)});
    return out;
  }

 private:
  Node& node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::out_of_range("invalid tape variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const { return const_cast<Tape*>(this)->node(v); }

  static void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
  }

  void compute(Node& n) {
    const Mat& A = n.a.valid() ? node(n.a).value : n.value;
    switch (n.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd: {
        const Mat& B = node(n.b).value;
        require(A.rows() == B.rows() && A.cols() == B.cols(), "add: shape mismatch");
        n.value = A + B;
        break;
      }
      case OpKind::kSub: {
        const Mat& B = node(n.b).value;
        require(A.rows() == B.rows() && A.cols() == B.cols(), "sub: shape mismatch");
        n.value = A - B;
        break;
      }
      case OpKind::kCMul: {
        const Mat& B = node(n.b).value;
        require(A.rows() == B.rows() && A.cols() == B.cols(), "cmul: shape mismatch");
        n.value = A.cwiseProduct(B);
        break;
      }
      case OpKind::kCDiv: {
        const Mat& B = node(n.b).value;
        require(A.rows() == B.rows() && A.cols() == B.cols(), "cdiv: shape mismatch");
        n.value = A.cwiseQuotient(B);
        break;
      }
      case OpKind::kMatMul: {
        const Mat& B = node(n.b).value;
        require(A.cols() == B.rows(), "matmul: inner dimension mismatch");
        n.value.noalias() = A * B;
        break;
      }
      case OpKind::kScale:
        n.value = n.alpha * A;
        break;
      case OpKind::kShift:
        n.value = A.array() + n.alpha;
        break;
      case OpKind::kTanh:
        n.value = A.array().tanh();
        break;
      case OpKind::kSin:
        n.value = A.array().sin();
        break;
      case OpKind::kCos:
        n.value = A.array().cos();
        break;
      case OpKind::kRowSum:
        n.value = A.rowwise().sum();
        break;
      case OpKind::kBroadcastCols:
        require(A.cols() == 1, "broadcast_cols: input must be a column");
        n.value = A.replicate(1, n.i0);
        break;
      case OpKind::kAddRowVec: {
        const Mat& B = node(n.b).value;
        require(B.rows() == 1 && B.cols() == A.cols(), "add_rowvec: shape mismatch");
        n.value = A.rowwise() + B.row(0);
        break;
      }
      case OpKind::kSumAll:
        n.value.resize(1, 1);
        n.value(0, 0) = A.sum();
        break;
      case OpKind::kSquaredNorm:
        n.value.resize(1, 1);
        n.value(0, 0) = A.squaredNorm();
        break;
      case OpKind::kConcatCols: {
        const Mat& B = node(n.b).value;
        require(A.rows() == B.rows(), "concat_cols: row mismatch");
        n.value.resize(A.rows(), A.cols() + B.cols());
        n.value.leftCols(A.cols()) = A;
        n.value.rightCols(B.cols()) = B;
        break;
      }
      case OpKind::kSliceCols:
        require(n.i0 >= 0 && n.i0 + n.i1 <= A.cols(), "slice_cols: out of range");
        n.value = A.middleCols(n.i0, n.i1);
        break;
      case OpKind::kRowwiseMatVec: {
        // Rows of A hold row-major (q x m) blocks, B is (batch x m); the
        // result row r is the q-vector (block_r * B_r).
        const Mat& B = node(n.b).value;
        const Index q = n.i0, m = n.i1;
        require(A.cols() == q * m && B.cols() == m && A.rows() == B.rows(),
                "rowwise_matvec: shape mismatch");
        n.value.resize(A.rows(), q);
        for (Index j = 0; j < q; ++j)
          n.value.col(j) = (A.middleCols(j * m, m).array() * B.array()).rowwise().sum();
        break;
      }
    }
  }

  void propagate(Node& n) {
    const Mat& g = n.adjoint;
    Node& na = node(n.a);
    auto add_to = [](Node& dst, const auto& contrib) {
      if (dst.requires_grad) dst.adjoint += contrib;
    };
    switch (n.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd:
        add_to(na, g);
        add_to(node(n.b), g);
        break;
      case OpKind::kSub:
        add_to(na, g);
        add_to(node(n.b), -g);
        break;
      case OpKind::kCMul:
        add_to(na, g.cwiseProduct(node(n.b).value));
        add_to(node(n.b), g.cwiseProduct(na.value));
        break;
      case OpKind::kCDiv: {
        Node& nb = node(n.b);
        add_to(na, g.cwiseQuotient(nb.value));
        add_to(nb, -g.cwiseProduct(n.value).cwiseQuotient(nb.value));
        break;
      }
      case OpKind::kMatMul: {
        Node& nb = node(n.b);
        if (na.requires_grad) na.adjoint.noalias() += g * nb.value.transpose();
        if (nb.requires_grad) nb.adjoint.noalias() += na.value.transpose() * g;
        break;
      }
      case OpKind::kScale:
        add_to(na, n.alpha * g);
        break;
      case OpKind::kShift:
        add_to(na, g);
        break;
      case OpKind::kTanh:
        add_to(na, (g.array() * (Scalar(1) - n.value.array().square())).matrix());
        break;
      case OpKind::kSin:
        add_to(na, (g.array() * na.value.array().cos()).matrix());
        break;
      case OpKind::kCos:
        add_to(na, (-g.array() * na.value.array().sin()).matrix());
        break;
      case OpKind::kRowSum:
        add_to(na, g.replicate(1, na.value.cols()));
        break;
      case OpKind::kBroadcastCols:
        add_to(na, g.rowwise().sum());
        break;
      case OpKind::kAddRowVec:
        add_to(na, g);
        add_to(node(n.b), g.colwise().sum());
        break;
      case OpKind::kSumAll:
        add_to(na, Mat::Constant(na.value.rows(), na.value.cols(), g(0, 0)));
        break;
      case OpKind::kSquaredNorm:
        add_to(na, Scalar(2) * g(0, 0) * na.value);
        break;
      case OpKind::kConcatCols: {
        Node& nb = node(n.b);
        if (na.requires_grad) na.adjoint += g.leftCols(na.value.cols());
        if (nb.requires_grad) nb.adjoint += g.rightCols(nb.value.cols());
        break;
      }
      case OpKind::kSliceCols:
        if (na.requires_grad) na.adjoint.middleCols(n.i0, n.i1) += g;
        break;
      case OpKind::kRowwiseMatVec: {
        Node& nb = node(n.b);
        const Index q = n.i0, m = n.i1;
        for (Index j = 0; j < q; ++j) {
          if (na.requires_grad)
            na.adjoint.middleCols(j * m, m) +=
                (nb.value.array().colwise() * g.col(j).array()).matrix();
          if (nb.requires_grad)
            nb.adjoint += (na.value.middleCols(j * m, m).array().colwise() * g.col(j).array())
                              .matrix();
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  bool diverged_ = false;
};

// Expression-building free functions.

template <class S> Var add(Tape<S>& t, Var a, Var b) { return t.emit(OpKind::kAdd, a, b); }
template <class S> Var sub(Tape<S>& t, Var a, Var b) { return t.emit(OpKind::kSub, a, b); }
template <class S> Var cmul(Tape<S>& t, Var a, Var b) { return t.emit(OpKind::kCMul, a, b); }
template <class S> Var cdiv(Tape<S>& t, Var a, Var b) { return t.emit(OpKind::kCDiv, a, b); }
template <class S> Var matmul(Tape<S>& t, Var a, Var b) { return t.emit(OpKind::kMatMul, a, b); }
template <class S> Var scale(Tape<S>& t, Var a, S c) { return t.emit(OpKind::kScale, a, {}, c); }
template <class S> Var shift(Tape<S>& t, Var a, S c) { return t.emit(OpKind::kShift, a, {}, c); }
template <class S> Var tanh(Tape<S>& t, Var a) { return t.emit(OpKind::kTanh, a); }
template <class S> Var sin(Tape<S>& t, Var a) { return t.emit(OpKind::kSin, a); }
template <class S> Var cos(Tape<S>& t, Var a) { return t.emit(OpKind::kCos, a); }
template <class S> Var rowsum(Tape<S>& t, Var a) { return t.emit(OpKind::kRowSum, a); }
template <class S> Var broadcast_cols(Tape<S>& t, Var a, Index k) {
  return t.emit(OpKind::kBroadcastCols, a, {}, S(0), k);
}
template <class S> Var add_rowvec(Tape<S>& t, Var a, Var row) {
  return t.emit(OpKind::kAddRowVec, a, row);
}
template <class S> Var sum_all(Tape<S>& t, Var a) { return t.emit(OpKind::kSumAll, a); }
template <class S> Var squared_norm(Tape<S>& t, Var a) { return t.emit(OpKind::kSquaredNorm, a); }
template <class S> Var concat_cols(Tape<S>& t, Var a, Var b) {
  return t.emit(OpKind::kConcatCols, a, b);
}
template <class S> Var slice_cols(Tape<S>& t, Var a, Index first, Index width) {
  return t.emit(OpKind::kSliceCols, a, {}, S(0), first, width);
}
template <class S> Var rowwise_matvec(Tape<S>& t, Var a, Var b, Index q, Index m) {
  return t.emit(OpKind::kRowwiseMatVec, a, b, S(0), q, m);
}

/// Replaces named leaf values, replays the tape, returns the root value.
template <class S>
Matrix<S> forward_eval(Tape<S>& tape, Var root, const std::map<std::string, Matrix<S>>& inputs) {
  for (const auto& [name, value] : inputs) {
    Var v = tape.find(name);
    if (!v.valid()) throw std::invalid_argument("forward_eval: unknown input " + name);
    tape.set_value(v, value);
  }
  tape.forward();
  return tape.value(root);
}

/// Runs the reverse sweep from a scalar root and returns adjoints of all
/// named gradient leaves.
template <class S>
std::map<std::string, Matrix<S>> backward_grad(Tape<S>& tape, Var root) {
  tape.backward(root);
  return tape.gradients();
}

/// Compares reverse-mode gradients against central finite differences of the
/// replayed root. Returns max over parameter entries of
/// |ad - fd| / (|fd| + eps).
template <class S>
S finite_diff_check(Tape<S>& tape, Var root, const std::vector<Var>& params, S fd_step,
                    S eps) {
  if (eps <= S(0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  tape.forward();
  tape.backward(root);
  std::vector<Matrix<S>> ad;
  ad.reserve(params.size());
  for (Var p : params) ad.push_back(tape.adjoint(p));

  S worst = S(0);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Matrix<S> base = tape.value(params[pi]);
    for (Index r = 0; r < base.rows(); ++r) {
      for (Index c = 0; c < base.cols(); ++c) {
        Matrix<S> bumped = base;
        bumped(r, c) = base(r, c) + fd_step;
        tape.set_value(params[pi], bumped);
        tape.forward();
        const S up = tape.value(root)(0, 0);
        bumped(r, c) = base(r, c) - fd_step;
        tape.set_value(params[pi], bumped);
        tape.forward();
        const S down = tape.value(root)(0, 0);
        const S fd = (up - down) / (S(2) * fd_step);
        const S rel = std::abs(ad[pi](r, c) - fd) / (std::abs(fd) + eps);
        if (rel > worst) worst = rel;
      }
    }
    tape.set_value(params[pi], base);
  }
  tape.forward();
  return worst;
}

}  // namespace fbsde

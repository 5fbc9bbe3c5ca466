#pragma once

#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hygen/numcore/functional.hpp"
#include "hygen/numcore/params.hpp"

namespace hygen {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 variable.
  double scalar() const;
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode gradient recorder. Every forward pass builds a fresh tape; backward runs once.
class Tape {
 public:
  /// Receives the upstream gradient and the node's own forward value.
  using BackwardFn = std::function<void(Tape&, const Matrix& grad, const Matrix& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf bound to `bundle[name]`. Non-trainable leaves behave like constants.
  /// Repeated calls with the same bundle and name return the same leaf.
  Var param(const ParamBundle& bundle, const std::string& name, bool trainable = true);

  /// Records a node whose gradient flows into `inputs` through `fn`.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn);

  /// Accumulates `g` into the gradient of `v` (no-op when `v` needs no gradient).
  template <typename Derived>
  void accumulate(const Var& v, const Eigen::MatrixBase<Derived>& g);
  /// Adds `g` into the block of `v`'s gradient that starts at (row, col).
  template <typename Derived>
  void accumulate_block(const Var& v, Eigen::Index row, Eigen::Index col, const Eigen::MatrixBase<Derived>& g);

  /// Back-propagates from a 1x1 `loss`. A tape supports a single backward pass.
  void backward(const Var& loss);
  bool backward_done() const { return backward_done_; }

  /// Gradient for every entry of `bundle`; entries not bound (or unused) get zeros.
  ParamBundle gradients(const ParamBundle& bundle) const;
  /// Gradients only for trainable entries that were bound on this tape.
  ParamBundle bound_gradients(const ParamBundle& bundle) const;

  std::size_t size() const { return nodes_.size(); }
  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  std::map<std::pair<const ParamBundle*, std::string>, int> bound_;
  bool backward_done_ = false;
};

template <typename Derived>
void Tape::accumulate(const Var& v, const Eigen::MatrixBase<Derived>& g) {
  Node& node = nodes_[static_cast<std::size_t>(v.id())];
  if (!node.requires_grad) return;
  if (!node.has_grad) {
    node.grad = g;
    node.has_grad = true;
  } else {
    node.grad += g;
  }
}

template <typename Derived>
void Tape::accumulate_block(const Var& v, Eigen::Index row, Eigen::Index col, const Eigen::MatrixBase<Derived>& g) {
  Node& node = nodes_[static_cast<std::size_t>(v.id())];
  if (!node.requires_grad) return;
  if (!node.has_grad) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
    node.has_grad = true;
  }
  node.grad.block(row, col, g.rows(), g.cols()) += g;
}

/// Differentiable operations. All matrices are row-major 2-D; vectors are n x 1 columns.
namespace ad {

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a (r x c) + row vector b (1 x c) broadcast over rows.
Var add_rowvec(const Var& a, const Var& b);
/// Each row of `a` scaled by the matching entry of column `c` (r x 1).
Var mul_colvec(const Var& a, const Var& c);
Var transpose(const Var& a);

Var relu(const Var& a);
Var elu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);

/// Softmax along `axis` (1: rows sum to one, 0: columns sum to one).
Var softmax(const Var& a, int axis = 1);
Var log_softmax_rows(const Var& a);
/// Log-softmax over the entries of each row where mask is true; masked entries are -inf.
Var masked_log_softmax_rows(const Var& a, const BoolMatrix& mask);
/// logsumexp along `axis`; axis 1 returns r x 1, axis 0 returns 1 x c.
Var logsumexp(const Var& a, int axis = 1);

Var sum(const Var& a);
Var mean(const Var& a);
/// Per-row sum, r x 1.
Var sum_rows(const Var& a);
/// Row-wise inner product of equally shaped a and b, r x 1.
Var rowwise_dot(const Var& a, const Var& b);
/// sum_i w_i * a_i for a column a and constant weights w.
Var weighted_sum(const Var& a, const Vector& w);

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& a, std::span<const int> index);
/// out(r) = a(r, index[r]).
Var pick(const Var& a, std::span<const int> index);

/// Compressed row lists: row r of the result aggregates source rows items[offsets[r]..offsets[r+1]).
struct RowLists {
  std::vector<int> offsets{0};
  std::vector<int> items;
  void push(std::span<const int> rows) {
    items.insert(items.end(), rows.begin(), rows.end());
    offsets.push_back(static_cast<int>(items.size()));
  }
  void push_range(int start, int count) {
    for (int i = 0; i < count; ++i) items.push_back(start + i);
    offsets.push_back(static_cast<int>(items.size()));
  }
  Eigen::Index lists() const { return static_cast<Eigen::Index>(offsets.size()) - 1; }
};

/// Mean of the listed rows of `a` for each list (zero row for an empty list).
Var pool_mean(const Var& a, const RowLists& lists);
/// Sum of the listed rows of `a` for each list.
Var pool_sum(const Var& a, const RowLists& lists);

/// out(r, j) = <query.row(r), keys.row(slots(r, j))>, or 0 where slots(r, j) < 0.
Var slot_scores(const Var& query, const Var& keys, const IndexMatrix& slots);

/// Scaled dot-product attention within contiguous row groups (start, length):
/// out_g = softmax(Q_g K_g^T / sqrt(d)) V_g.
Var grouped_attention(const Var& q, const Var& k, const Var& v,
                      std::span<const std::pair<int, int>> groups);

/// Gated recurrent unit step with gates ordered [reset, update, candidate]:
///   gx = x Wx + bx, gh = h Wh + bh (each r x 3H)
///   r = sigmoid(gx_r + gh_r), u = sigmoid(gx_u + gh_u), c = tanh(gx_c + r * gh_c)
///   h' = (1 - u) * c + u * h
Var gru_cell(const Var& x, const Var& h, const Var& wx, const Var& wh, const Var& bx, const Var& bh);

}  // namespace ad
}  // namespace hygen

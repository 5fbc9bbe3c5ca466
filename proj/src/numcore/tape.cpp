#include "hygen/numcore/tape.hpp"

#include <cmath>
#include <limits>

namespace hygen {

const Matrix& Var::value() const {
  if (!tape_) throw ContractError("access to an unbound Var");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw DimensionError("scalar() on " + shape_string(v.rows(), v.cols()));
  }
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(const ParamBundle& bundle, const std::string& name, bool trainable) {
  const auto key = std::make_pair(&bundle, name);
  if (auto it = bound_.find(key); it != bound_.end()) return Var(this, it->second);
  nodes_.push_back(Node{bundle.at(name), {}, trainable, false, {}});
  const int id = static_cast<int>(nodes_.size()) - 1;
  bound_.emplace(key, id);
  return Var(this, id);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape() != this) throw ContractError("operands recorded on different tapes");
    needs = needs || requires_grad(in.id());
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(fn) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::backward(const Var& loss) {
  if (backward_done_) throw ContractError("backward already ran on this tape");
  if (loss.tape() != this) throw ContractError("loss belongs to another tape");
  const Matrix& lv = loss.value();
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw DimensionError("backward needs a scalar loss, got " + shape_string(lv.rows(), lv.cols()));
  }
  if (!std::isfinite(lv(0, 0))) throw ValidityError("non-finite loss");
  backward_done_ = true;
  Node& root = nodes_[static_cast<std::size_t>(loss.id())];
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  root.has_grad = true;
  for (int i = loss.id(); i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.has_grad || !node.backward) continue;
    node.backward(*this, node.grad, node.value);
  }
}

ParamBundle Tape::gradients(const ParamBundle& bundle) const {
  ParamBundle out;
  for (const auto& name : bundle.names()) {
    auto it = bound_.find(std::make_pair(&bundle, name));
    const Matrix& p = bundle.at(name);
    if (it != bound_.end()) {
      const Node& node = nodes_[static_cast<std::size_t>(it->second)];
      if (node.has_grad) {
        out.add(name, node.grad);
        continue;
      }
    }
    out.add(name, Matrix::Zero(p.rows(), p.cols()));
  }
  return out;
}

ParamBundle Tape::bound_gradients(const ParamBundle& bundle) const {
  ParamBundle out;
  for (const auto& name : bundle.names()) {
    auto it = bound_.find(std::make_pair(&bundle, name));
    if (it == bound_.end()) continue;
    const Node& node = nodes_[static_cast<std::size_t>(it->second)];
    if (!node.requires_grad) continue;
    if (node.has_grad) {
      out.add(name, node.grad);
    } else {
      out.add(name, Matrix::Zero(node.value.rows(), node.value.cols()));
    }
  }
  return out;
}

namespace ad {
namespace {

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                         " vs " + shape_string(b.rows(), b.cols()));
  }
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

// Elementwise unary op whose derivative is expressed through input x and output y.
template <typename F, typename D>
Var unary(const Var& a, F f, D dfdx) {
  Matrix out = a.value().unaryExpr(f);
  return tape_of(a).record(std::move(out), {a}, [a, dfdx](Tape& t, const Matrix& g, const Matrix& y) {
    const Matrix& x = a.value();
    Matrix d(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) d.data()[i] = g.data()[i] * dfdx(x.data()[i], y.data()[i]);
    t.accumulate(a, d);
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.rows(), a.cols()) +
                         " x " + shape_string(b.rows(), b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) {
      Matrix da(g.rows(), b.rows());
      da.noalias() = g * b.value().transpose();
      t.accumulate(a, da);
    }
    if (b.requires_grad()) {
      Matrix db(a.cols(), g.cols());
      db.noalias() = a.value().transpose() * g;
      t.accumulate(b, db);
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  return tape_of(a).record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  return tape_of(a).record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(const Var& a, double s) {
  return tape_of(a).record(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g * s);
  });
}

Var add_scalar(const Var& a, double s) {
  Matrix out = a.value().array() + s;
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
  });
}

Var add_rowvec(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw DimensionError("add_rowvec: " + shape_string(a.rows(), a.cols()) + " + " +
                         shape_string(b.rows(), b.cols()));
  }
  Matrix out = a.value();
  out.rowwise() += b.value().row(0);
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (b.requires_grad()) t.accumulate(b, g.colwise().sum());
  });
}

Var mul_colvec(const Var& a, const Var& c) {
  if (c.cols() != 1 || c.rows() != a.rows()) {
    throw DimensionError("mul_colvec: " + shape_string(a.rows(), a.cols()) + " * " +
                         shape_string(c.rows(), c.cols()));
  }
  Matrix out = a.value().array().colwise() * c.value().col(0).array();
  return tape_of(a).record(std::move(out), {a, c}, [a, c](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) {
      Matrix da = g.array().colwise() * c.value().col(0).array();
      t.accumulate(a, da);
    }
    if (c.requires_grad()) t.accumulate(c, g.cwiseProduct(a.value()).rowwise().sum());
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.transpose());
  });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var elu(const Var& a) {
  return unary(a, [](double x) { return hygen::elu(x); },
               [](double x, double y) { return x > 0 ? 1.0 : y + 1.0; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var softmax(const Var& a, int axis) {
  if (axis == 0) return transpose(softmax(transpose(a), 1));
  if (axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  Matrix out = hygen::softmax(a.value(), 1);
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    // dx = y * (g - <g, y>)
    Vector inner = g.cwiseProduct(y).rowwise().sum();
    Matrix d = y.array() * (g.colwise() - inner).array();
    t.accumulate(a, d);
  });
}

Var log_softmax_rows(const Var& a) {
  Matrix out = hygen::log_softmax_rows(a.value());
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    // dx = g - softmax * sum(g)
    Vector gs = g.rowwise().sum();
    Matrix d = g - (y.array().exp().colwise() * gs.array()).matrix();
    t.accumulate(a, d);
  });
}

Var masked_log_softmax_rows(const Var& a, const BoolMatrix& mask) {
  const Matrix& x = a.value();
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) {
    throw DimensionError("masked_log_softmax_rows: mask " + shape_string(mask.rows(), mask.cols()) +
                         " vs " + shape_string(x.rows(), x.cols()));
  }
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = kNegInf;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask(r, c)) m = std::max(m, x(r, c));
    }
    if (m == kNegInf) throw ContractError("masked_log_softmax_rows: row with no valid entry");
    double s = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask(r, c)) s += std::exp(x(r, c) - m);
    }
    const double lse = m + std::log(s);
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = mask(r, c) ? x(r, c) - lse : kNegInf;
  }
  return tape_of(a).record(std::move(out), {a}, [a, mask](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix d = Matrix::Zero(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      double gs = 0;
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        if (mask(r, c)) gs += g(r, c);
      }
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        if (mask(r, c)) d(r, c) = g(r, c) - std::exp(y(r, c)) * gs;
      }
    }
    t.accumulate(a, d);
  });
}

Var logsumexp(const Var& a, int axis) {
  if (axis == 0) return transpose(logsumexp(transpose(a), 1));
  if (axis != 1) throw DimensionError("logsumexp: axis must be 0 or 1");
  Matrix out = hygen::logsumexp(a.value(), 1);
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix d = (a.value().colwise() - y.col(0)).array().exp();
    d.array().colwise() *= g.col(0).array();
    t.accumulate(a, d);
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const auto r = a.rows();
  const auto c = a.cols();
  return tape_of(a).record(std::move(out), {a}, [a, r, c](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  const auto c = a.cols();
  return tape_of(a).record(std::move(out), {a}, [a, c](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.col(0).replicate(1, c));
  });
}

Var rowwise_dot(const Var& a, const Var& b) {
  require_same_shape("rowwise_dot", a, b);
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t.accumulate(a, (b.value().array().colwise() * g.col(0).array()).matrix());
    if (b.requires_grad()) t.accumulate(b, (a.value().array().colwise() * g.col(0).array()).matrix());
  });
}

Var weighted_sum(const Var& a, const Vector& w) {
  if (a.cols() != 1 || a.rows() != w.size()) {
    throw DimensionError("weighted_sum: " + shape_string(a.rows(), a.cols()) + " with " +
                         std::to_string(w.size()) + " weights");
  }
  Matrix out(1, 1);
  out(0, 0) = a.value().col(0).dot(w);
  return tape_of(a).record(std::move(out), {a}, [a, w](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, w * g(0, 0));
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows out of range on " + shape_string(a.rows(), a.cols()));
  }
  Matrix out = a.value().middleRows(start, count);
  return tape_of(a).record(std::move(out), {a}, [a, start](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate_block(a, start, 0, g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols out of range on " + shape_string(a.rows(), a.cols()));
  }
  Matrix out = a.value().middleCols(start, count);
  return tape_of(a).record(std::move(out), {a}, [a, start](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate_block(a, 0, start, g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), parts, [inputs](Tape& t, const Matrix& g, const Matrix&) {
    Eigen::Index at = 0;
    for (const auto& p : inputs) {
      const auto n = p.rows();
      if (p.requires_grad()) t.accumulate(p, g.middleRows(at, n));
      at += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), parts, [inputs](Tape& t, const Matrix& g, const Matrix&) {
    Eigen::Index at = 0;
    for (const auto& p : inputs) {
      const auto n = p.cols();
      if (p.requires_grad()) t.accumulate(p, g.middleCols(at, n));
      at += n;
    }
  });
}

Var gather_rows(const Var& a, std::span<const int> index) {
  const Matrix& x = a.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return tape_of(a).record(std::move(out), {a}, [a, idx](Tape& t, const Matrix& g, const Matrix&) {
    for (std::size_t i = 0; i < idx.size(); ++i) t.accumulate_block(a, idx[i], 0, g.row(static_cast<Eigen::Index>(i)));
  });
}

Var pick(const Var& a, std::span<const int> index) {
  const Matrix& x = a.value();
  if (static_cast<Eigen::Index>(index.size()) != x.rows()) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " +
                         shape_string(x.rows(), x.cols()));
  }
  Matrix out(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int c = index[static_cast<std::size_t>(r)];
    if (c < 0 || c >= x.cols()) throw DimensionError("pick: column index out of range");
    out(r, 0) = x(r, c);
  }
  std::vector<int> idx(index.begin(), index.end());
  const auto cols = x.cols();
  return tape_of(a).record(std::move(out), {a}, [a, idx, cols](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = Matrix::Zero(g.rows(), cols);
    for (Eigen::Index r = 0; r < g.rows(); ++r) d(r, idx[static_cast<std::size_t>(r)]) = g(r, 0);
    t.accumulate(a, d);
  });
}

namespace {

Var pool(const Var& a, const RowLists& lists, bool average) {
  const Matrix& x = a.value();
  const Eigen::Index n = lists.lists();
  Matrix out = Matrix::Zero(n, x.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const int b = lists.offsets[static_cast<std::size_t>(r)];
    const int e = lists.offsets[static_cast<std::size_t>(r) + 1];
    for (int i = b; i < e; ++i) {
      const int src = lists.items[static_cast<std::size_t>(i)];
      if (src < 0 || src >= x.rows()) throw DimensionError("pool: row index out of range");
      out.row(r) += x.row(src);
    }
    if (average && e > b) out.row(r) /= static_cast<double>(e - b);
  }
  const auto rows = x.rows();
  return tape_of(a).record(std::move(out), {a}, [a, lists, average, rows](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = Matrix::Zero(rows, g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const int b = lists.offsets[static_cast<std::size_t>(r)];
      const int e = lists.offsets[static_cast<std::size_t>(r) + 1];
      if (e == b) continue;
      const double w = average ? 1.0 / static_cast<double>(e - b) : 1.0;
      for (int i = b; i < e; ++i) d.row(lists.items[static_cast<std::size_t>(i)]) += w * g.row(r);
    }
    t.accumulate(a, d);
  });
}

}  // namespace

Var pool_mean(const Var& a, const RowLists& lists) { return pool(a, lists, true); }
Var pool_sum(const Var& a, const RowLists& lists) { return pool(a, lists, false); }

Var slot_scores(const Var& query, const Var& keys, const IndexMatrix& slots) {
  const Matrix& q = query.value();
  const Matrix& k = keys.value();
  if (q.cols() != k.cols() || slots.rows() != q.rows()) {
    throw DimensionError("slot_scores: query " + shape_string(q.rows(), q.cols()) + ", keys " +
                         shape_string(k.rows(), k.cols()) + ", slots " +
                         shape_string(slots.rows(), slots.cols()));
  }
  Matrix out = Matrix::Zero(slots.rows(), slots.cols());
  for (Eigen::Index r = 0; r < slots.rows(); ++r) {
    for (Eigen::Index j = 0; j < slots.cols(); ++j) {
      const int s = slots(r, j);
      if (s < 0) continue;
      if (s >= k.rows()) throw DimensionError("slot_scores: key index out of range");
      out(r, j) = q.row(r).dot(k.row(s));
    }
  }
  return tape_of(query).record(std::move(out), {query, keys}, [query, keys, slots](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& q = query.value();
    const Matrix& k = keys.value();
    Matrix dq = Matrix::Zero(q.rows(), q.cols());
    Matrix dk = Matrix::Zero(k.rows(), k.cols());
    for (Eigen::Index r = 0; r < slots.rows(); ++r) {
      for (Eigen::Index j = 0; j < slots.cols(); ++j) {
        const int s = slots(r, j);
        if (s < 0) continue;
        dq.row(r) += g(r, j) * k.row(s);
        dk.row(s) += g(r, j) * q.row(r);
      }
    }
    t.accumulate(query, dq);
    t.accumulate(keys, dk);
  });
}

Var grouped_attention(const Var& q, const Var& k, const Var& v,
                      std::span<const std::pair<int, int>> groups) {
  require_same_shape("grouped_attention(q,k)", q, k);
  if (v.rows() != q.rows()) throw DimensionError("grouped_attention: value rows differ");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  std::vector<std::pair<int, int>> gs(groups.begin(), groups.end());
  std::vector<Matrix> weights;
  weights.reserve(gs.size());
  Matrix out = Matrix::Zero(q.rows(), v.cols());
  for (const auto& [start, len] : gs) {
    if (start < 0 || len <= 0 || start + len > q.rows()) {
      throw DimensionError("grouped_attention: group out of range");
    }
    Matrix s = q.value().middleRows(start, len) * k.value().middleRows(start, len).transpose() * inv_sqrt_d;
    Matrix w = hygen::softmax(s, 1);
    out.middleRows(start, len).noalias() = w * v.value().middleRows(start, len);
    weights.push_back(std::move(w));
  }
  return tape_of(q).record(std::move(out), {q, k, v},
                           [q, k, v, gs, weights = std::move(weights), inv_sqrt_d](Tape& t, const Matrix& g, const Matrix&) {
    Matrix dq = Matrix::Zero(q.rows(), q.cols());
    Matrix dk = Matrix::Zero(k.rows(), k.cols());
    Matrix dv = Matrix::Zero(v.rows(), v.cols());
    for (std::size_t i = 0; i < gs.size(); ++i) {
      const auto [start, len] = gs[i];
      const Matrix& w = weights[i];
      const auto gg = g.middleRows(start, len);
      dv.middleRows(start, len).noalias() += w.transpose() * gg;
      Matrix dw = gg * v.value().middleRows(start, len).transpose();
      Vector inner = dw.cwiseProduct(w).rowwise().sum();
      Matrix ds = w.array() * (dw.colwise() - inner).array();
      ds *= inv_sqrt_d;
      dq.middleRows(start, len).noalias() += ds * k.value().middleRows(start, len);
      dk.middleRows(start, len).noalias() += ds.transpose() * q.value().middleRows(start, len);
    }
    t.accumulate(q, dq);
    t.accumulate(k, dk);
    t.accumulate(v, dv);
  });
}

Var gru_cell(const Var& x, const Var& h, const Var& wx, const Var& wh, const Var& bx, const Var& bh) {
  const Eigen::Index hidden = h.cols();
  if (x.rows() != h.rows() || wx.rows() != x.cols() || wh.rows() != hidden || wx.cols() != 3 * hidden ||
      wh.cols() != 3 * hidden || bx.rows() != 1 || bh.rows() != 1 || bx.cols() != 3 * hidden ||
      bh.cols() != 3 * hidden) {
    throw DimensionError("gru_cell: x " + shape_string(x.rows(), x.cols()) + ", h " + shape_string(h.rows(), hidden) +
                         ", Wx " + shape_string(wx.rows(), wx.cols()) + ", Wh " + shape_string(wh.rows(), wh.cols()));
  }
  Matrix gx(x.rows(), 3 * hidden);
  gx.noalias() = x.value() * wx.value();
  gx.rowwise() += bx.value().row(0);
  Matrix gh(x.rows(), 3 * hidden);
  gh.noalias() = h.value() * wh.value();
  gh.rowwise() += bh.value().row(0);
  const Eigen::Index n = x.rows();
  Matrix r = (gx.leftCols(hidden) + gh.leftCols(hidden)).unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  Matrix u = (gx.middleCols(hidden, hidden) + gh.middleCols(hidden, hidden))
                 .unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  Matrix ghc = gh.rightCols(hidden);
  Matrix c = (gx.rightCols(hidden).array() + r.array() * ghc.array()).tanh().matrix();
  Matrix out = ((1.0 - u.array()) * c.array() + u.array() * h.value().array()).matrix();
  return tape_of(x).record(std::move(out), {x, h, wx, wh, bx, bh},
                           [x, h, wx, wh, bx, bh, r = std::move(r), u = std::move(u), c = std::move(c),
                            ghc = std::move(ghc), hidden, n](Tape& t, const Matrix& g, const Matrix&) {
    const auto ga = g.array();
    Matrix dgx(n, 3 * hidden);
    Matrix dgh(n, 3 * hidden);
    const Eigen::ArrayXXd dc_pre = ga * (1.0 - u.array()) * (1.0 - c.array().square());
    const Eigen::ArrayXXd du_pre = ga * (h.value().array() - c.array()) * u.array() * (1.0 - u.array());
    const Eigen::ArrayXXd dr_pre = dc_pre * ghc.array() * r.array() * (1.0 - r.array());
    dgx.leftCols(hidden) = dr_pre.matrix();
    dgx.middleCols(hidden, hidden) = du_pre.matrix();
    dgx.rightCols(hidden) = dc_pre.matrix();
    dgh.leftCols(hidden) = dr_pre.matrix();
    dgh.middleCols(hidden, hidden) = du_pre.matrix();
    dgh.rightCols(hidden) = (dc_pre * r.array()).matrix();
    if (x.requires_grad()) {
      Matrix dx(n, x.cols());
      dx.noalias() = dgx * wx.value().transpose();
      t.accumulate(x, dx);
    }
    if (h.requires_grad()) {
      Matrix dh = (ga * u.array()).matrix();
      dh.noalias() += dgh * wh.value().transpose();
      t.accumulate(h, dh);
    }
    if (wx.requires_grad()) {
      Matrix d(x.cols(), 3 * hidden);
      d.noalias() = x.value().transpose() * dgx;
      t.accumulate(wx, d);
    }
    if (wh.requires_grad()) {
      Matrix d(hidden, 3 * hidden);
      d.noalias() = h.value().transpose() * dgh;
      t.accumulate(wh, d);
    }
    if (bx.requires_grad()) t.accumulate(bx, dgx.colwise().sum());
    if (bh.requires_grad()) t.accumulate(bh, dgh.colwise().sum());
  });
}

}  // namespace ad
}  // namespace hygen

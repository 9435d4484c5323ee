#pragma once

// Minimal tape-based reverse-mode differentiation over dense Eigen matrices.
//
// Every value is a column-major matrix; batched activations put the batch
// along columns. A Graph records one forward pass; backward() replays the
// tape in reverse and accumulates gradients into the bound Parameters.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace palm::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool frozen = false;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Graph {
 public:
  using Mat = Matrix<T>;

  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return track_; }
  std::size_t size() const { return nodes_.size(); }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  T scalar(Var v) const { return value(v)(0, 0); }
  const Mat& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  Var constant(Mat v) { return leaf(std::move(v), false); }

  /// Binds a trainable parameter; its gradient is added to `p.grad` on backward().
  Var param(Parameter<T>& p) {
    const bool trainable = track_ && !p.frozen;
    Var out = leaf(p.value, trainable);
    if (trainable) {
      if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
      Parameter<T>* target = &p;
      nodes_[out.id].back = [this, target](int self) { target->grad += nodes_[self].grad; };
    }
    return out;
  }

  /// Embedding lookup: column `ids[b]` of `table` for every batch column b.
  Var lookup(Parameter<T>& table, std::span<const int> ids) {
    Mat v(table.value.rows(), static_cast<Eigen::Index>(ids.size()));
    for (std::size_t b = 0; b < ids.size(); ++b) {
      if (ids[b] < 0 || ids[b] >= table.value.cols()) throw std::out_of_range("lookup: id out of range");
      v.col(static_cast<Eigen::Index>(b)) = table.value.col(ids[b]);
    }
    const bool trainable = track_ && !table.frozen;
    Var out = leaf(std::move(v), trainable);
    if (trainable) {
      if (table.grad.rows() != table.value.rows() || table.grad.cols() != table.value.cols()) table.zero_grad();
      Parameter<T>* target = &table;
      std::vector<int> idx(ids.begin(), ids.end());
      nodes_[out.id].back = [this, target, idx = std::move(idx)](int self) {
        const Mat& g = nodes_[self].grad;
        for (std::size_t b = 0; b < idx.size(); ++b) target->grad.col(idx[b]) += g.col(static_cast<Eigen::Index>(b));
      };
    }
    return out;
  }

  Var matmul(Var a, Var b) {
    check(value(a).cols() == value(b).rows(), "matmul: inner dimensions differ");
    return op(value(a) * value(b), {a, b}, [this, a, b](int self) {
      const Mat& g = nodes_[self].grad;
      if (needs_grad(a)) acc(a, g * value(b).transpose());
      if (needs_grad(b)) acc(b, value(a).transpose() * g);
    });
  }

  /// a^T * b
  Var matmul_tn(Var a, Var b) {
    check(value(a).rows() == value(b).rows(), "matmul_tn: inner dimensions differ");
    return op(value(a).transpose() * value(b), {a, b}, [this, a, b](int self) {
      const Mat& g = nodes_[self].grad;
      if (needs_grad(a)) acc(a, value(b) * g.transpose());
      if (needs_grad(b)) acc(b, value(a) * g);
    });
  }

  /// w * x + bias, bias broadcast over columns.
  Var affine(Var w, Var x, Var bias) {
    check(value(bias).cols() == 1 && value(bias).rows() == value(w).rows(), "affine: bias shape");
    return add_bias(matmul(w, x), bias);
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return op(value(a) + value(b), {a, b}, [this, a, b](int self) {
      const Mat& g = nodes_[self].grad;
      if (needs_grad(a)) acc(a, g);
      if (needs_grad(b)) acc(b, g);
    });
  }

  Var add_n(std::span<const Var> xs) {
    check(!xs.empty(), "add_n: empty input");
    Mat v = value(xs[0]);
    for (std::size_t k = 1; k < xs.size(); ++k) {
      same_shape(xs[0], xs[k], "add_n");
      v += value(xs[k]);
    }
    std::vector<Var> in(xs.begin(), xs.end());
    return op(std::move(v), in, [this, in](int self) {
      for (Var x : in)
        if (needs_grad(x)) acc(x, nodes_[self].grad);
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return op(value(a) - value(b), {a, b}, [this, a, b](int self) {
      const Mat& g = nodes_[self].grad;
      if (needs_grad(a)) acc(a, g);
      if (needs_grad(b)) acc(b, -g);
    });
  }

  Var cmul(Var a, Var b) {
    same_shape(a, b, "cmul");
    return op(value(a).cwiseProduct(value(b)), {a, b}, [this, a, b](int self) {
      const Mat& g = nodes_[self].grad;
      if (needs_grad(a)) acc(a, g.cwiseProduct(value(b)));
      if (needs_grad(b)) acc(b, g.cwiseProduct(value(a)));
    });
  }

  Var scale(Var a, T s) {
    return op(value(a) * s, {a}, [this, a, s](int self) { acc(a, nodes_[self].grad * s); });
  }

  Var one_minus(Var a) {
    return op((T(1) - value(a).array()).matrix(), {a}, [this, a](int self) { acc(a, -nodes_[self].grad); });
  }

  Var add_bias(Var a, Var bias) {
    check(value(bias).cols() == 1 && value(bias).rows() == value(a).rows(), "add_bias: shape");
    Mat v = value(a).colwise() + value(bias).col(0);
    return op(std::move(v), {a, bias}, [this, a, bias](int self) {
      const Mat& g = nodes_[self].grad;
      if (needs_grad(a)) acc(a, g);
      if (needs_grad(bias)) acc(bias, g.rowwise().sum());
    });
  }

  /// m ⊙ broadcast(row), row is [1 x cols].
  Var mul_row_bcast(Var m, Var row) {
    check(value(row).rows() == 1 && value(row).cols() == value(m).cols(), "mul_row_bcast: shape");
    Mat v = (value(m).array().rowwise() * value(row).row(0).array()).matrix();
    return op(std::move(v), {m, row}, [this, m, row](int self) {
      const Mat& g = nodes_[self].grad;
      if (needs_grad(m)) acc(m, (g.array().rowwise() * value(row).row(0).array()).matrix());
      if (needs_grad(row)) acc(row, (g.array() * value(m).array()).colwise().sum().matrix());
    });
  }

  /// m ⊙ broadcast(col), col is [rows x 1].
  Var mul_col_bcast(Var m, Var col) {
    check(value(col).cols() == 1 && value(col).rows() == value(m).rows(), "mul_col_bcast: shape");
    Mat v = (value(m).array().colwise() * value(col).col(0).array()).matrix();
    return op(std::move(v), {m, col}, [this, m, col](int self) {
      const Mat& g = nodes_[self].grad;
      if (needs_grad(m)) acc(m, (g.array().colwise() * value(col).col(0).array()).matrix());
      if (needs_grad(col)) acc(col, (g.array() * value(m).array()).rowwise().sum().matrix());
    });
  }

  Var sigmoid(Var a) {
    Mat v = (T(1) / (T(1) + (-value(a).array()).exp())).matrix();
    return op(std::move(v), {a}, [this, a](int self) {
      const auto y = nodes_[self].value.array();
      acc(a, (nodes_[self].grad.array() * y * (T(1) - y)).matrix());
    });
  }

  Var tanh(Var a) {
    return op(value(a).array().tanh().matrix(), {a}, [this, a](int self) {
      const auto y = nodes_[self].value.array();
      acc(a, (nodes_[self].grad.array() * (T(1) - y * y)).matrix());
    });
  }

  Var exp(Var a) {
    return op(value(a).array().exp().matrix(), {a}, [this, a](int self) {
      acc(a, nodes_[self].grad.cwiseProduct(nodes_[self].value));
    });
  }

  Var log(Var a) {
    return op(value(a).array().log().matrix(), {a}, [this, a](int self) {
      acc(a, (nodes_[self].grad.array() / value(a).array()).matrix());
    });
  }

  /// Elementwise clamp; gradient passes only where the input lies inside [lo, hi].
  Var clamp(Var a, T lo, T hi) {
    return op(value(a).cwiseMax(lo).cwiseMin(hi), {a}, [this, a, lo, hi](int self) {
      const auto x = value(a).array();
      acc(a, ((x >= lo && x <= hi).template cast<T>() * nodes_[self].grad.array()).matrix());
    });
  }

  Var slice_rows(Var a, int start, int count) {
    check(start >= 0 && count >= 0 && start + count <= value(a).rows(), "slice_rows: range");
    return op(value(a).middleRows(start, count), {a}, [this, a, start, count](int self) {
      Mat g = Mat::Zero(value(a).rows(), value(a).cols());
      g.middleRows(start, count) = nodes_[self].grad;
      acc(a, g);
    });
  }

  Var concat_rows(std::span<const Var> xs) {
    check(!xs.empty(), "concat_rows: empty input");
    Eigen::Index rows = 0;
    const Eigen::Index cols = value(xs[0]).cols();
    for (Var x : xs) {
      check(value(x).cols() == cols, "concat_rows: column mismatch");
      rows += value(x).rows();
    }
    Mat v(rows, cols);
    Eigen::Index r = 0;
    for (Var x : xs) {
      v.middleRows(r, value(x).rows()) = value(x);
      r += value(x).rows();
    }
    std::vector<Var> in(xs.begin(), xs.end());
    return op(std::move(v), in, [this, in](int self) {
      Eigen::Index r0 = 0;
      for (Var x : in) {
        const Eigen::Index n = value(x).rows();
        if (needs_grad(x)) acc(x, nodes_[self].grad.middleRows(r0, n));
        r0 += n;
      }
    });
  }

  Var concat_rows(std::initializer_list<Var> xs) { return concat_rows(std::span<const Var>(xs.begin(), xs.size())); }

  /// Column-wise softmax with max subtraction.
  Var softmax_cols(Var a) {
    return op(column_softmax(value(a)), {a}, [this, a](int self) {
      const Mat& w = nodes_[self].value;
      const Mat& g = nodes_[self].grad;
      const Eigen::Matrix<T, 1, Eigen::Dynamic> dot = w.cwiseProduct(g).colwise().sum();
      acc(a, (w.array() * (g.rowwise() - dot).array()).matrix());
    });
  }

  Var sum_all(Var a) {
    Mat v(1, 1);
    v(0, 0) = value(a).sum();
    return op(std::move(v), {a}, [this, a](int self) {
      acc(a, Mat::Constant(value(a).rows(), value(a).cols(), nodes_[self].grad(0, 0)));
    });
  }

  /// Summed token cross-entropy; logits [V x B], one target per column (< 0 skips the column).
  Var softmax_xent(Var logits, std::span<const int> targets) {
    const Mat& z = value(logits);
    check(static_cast<Eigen::Index>(targets.size()) == z.cols(), "softmax_xent: target count");
    Mat p = column_softmax(z);
    T total = 0;
    for (Eigen::Index b = 0; b < z.cols(); ++b) {
      const int y = targets[static_cast<std::size_t>(b)];
      if (y < 0) continue;
      check(y < z.rows(), "softmax_xent: target out of range");
      const T mx = z.col(b).maxCoeff();
      total += mx + std::log((z.col(b).array() - mx).exp().sum()) - z(y, b);
    }
    Mat v(1, 1);
    v(0, 0) = total;
    std::vector<int> ys(targets.begin(), targets.end());
    return op(std::move(v), {logits}, [this, logits, p = std::move(p), ys = std::move(ys)](int self) {
      const T g = nodes_[self].grad(0, 0);
      Mat d = p * g;
      for (std::size_t b = 0; b < ys.size(); ++b) {
        const auto col = static_cast<Eigen::Index>(b);
        if (ys[b] < 0)
          d.col(col).setZero();
        else
          d(ys[b], col) -= g;
      }
      acc(logits, d);
    });
  }

  /// Summed soft-target cross-entropy: -sum_b sum_k y[k,b] log softmax(scores)[k,b].
  Var soft_xent(Var scores, const Mat& targets) {
    const Mat& z = value(scores);
    check(targets.rows() == z.rows() && targets.cols() == z.cols(), "soft_xent: shape");
    Mat p = column_softmax(z);
    T total = 0;
    for (Eigen::Index b = 0; b < z.cols(); ++b) {
      const T mass = targets.col(b).sum();
      if (mass == T(0)) continue;
      const T mx = z.col(b).maxCoeff();
      const T lse = mx + std::log((z.col(b).array() - mx).exp().sum());
      total += mass * lse - targets.col(b).dot(z.col(b));
    }
    Mat v(1, 1);
    v(0, 0) = total;
    return op(std::move(v), {scores}, [this, scores, p = std::move(p), targets](int self) {
      const T g = nodes_[self].grad(0, 0);
      const Eigen::Matrix<T, 1, Eigen::Dynamic> mass = targets.colwise().sum();
      acc(scores, ((p.array().rowwise() * mass.array()) - targets.array()).matrix() * g);
    });
  }

  /// Reverse sweep from a scalar root.
  void backward(Var root) {
    check(track_, "backward: graph built without gradient tracking");
    check(value(root).size() == 1, "backward: root must be scalar");
    if (!needs_grad(root)) return;
    nodes_[root.id].grad = Mat::Ones(1, 1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.back && n.grad.size() != 0) n.back(id);
    }
  }

  static Mat column_softmax(const Mat& z) {
    Mat p(z.rows(), z.cols());
    for (Eigen::Index b = 0; b < z.cols(); ++b) {
      const T mx = z.col(b).maxCoeff();
      p.col(b) = (z.col(b).array() - mx).exp().matrix();
      p.col(b) /= p.col(b).sum();
    }
    return p;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(int)> back;
    bool needs_grad = false;
  };

  Var leaf(Mat v, bool needs) {
    nodes_.push_back(Node{std::move(v), Mat(), nullptr, needs && track_});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename Back>
  Var op(Mat v, std::initializer_list<Var> inputs, Back&& back) {
    return op(std::move(v), std::vector<Var>(inputs), std::forward<Back>(back));
  }

  template <typename Back>
  Var op(Mat v, const std::vector<Var>& inputs, Back&& back) {
    bool needs = false;
    if (track_)
      for (Var x : inputs) needs = needs || nodes_[x.id].needs_grad;
    nodes_.push_back(Node{std::move(v), Mat(), nullptr, needs});
    if (needs) nodes_.back().back = std::forward<Back>(back);
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename Derived>
  void acc(Var x, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(x.id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void same_shape(Var a, Var b, const char* what) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }

  static void check(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
  }

  bool track_;
  std::vector<Node> nodes_;
};

}  // namespace palm::ad

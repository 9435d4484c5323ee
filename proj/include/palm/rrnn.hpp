#pragma once

// Rational RNN (unigram WFSA cell) and the span-representation table built by
// subtracting prefix states weighted by accumulated forget gates.
//
//   f_t = sigmoid(W_f h_t + b_f)        (clamped to [kMinForget, kMaxForget])
//   u_t = (1 - f_t) * tanh(W_u h_t + b_u)
//   c_t = f_t * c_{t-1} + u_t
//
// Because the cell is linear in c, the state of a chain started with zero at
// position i and run to j equals c_j - c_{i-1} * prod_{k=i..j} f_k. Products
// of gates are carried as sums of logs.

#include "palm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace palm::rrnn {

using ad::Matrix;
using ad::Vector;

inline constexpr double kMinForget = 1e-6;
inline constexpr double kMaxForget = 1.0 - 1e-6;

enum class Direction { forward, backward };

template <typename T>
struct RrnnParams {
  Matrix<T> forget_weight;  // [d_r x d_h]
  Matrix<T> update_weight;  // [d_r x d_h]
  Vector<T> forget_bias;    // [d_r]
  Vector<T> update_bias;    // [d_r]

  int width() const { return static_cast<int>(forget_weight.rows()); }
  int input_width() const { return static_cast<int>(forget_weight.cols()); }

  void validate() const {
    if (update_weight.rows() != forget_weight.rows() || update_weight.cols() != forget_weight.cols() ||
        forget_bias.size() != forget_weight.rows() || update_bias.size() != forget_weight.rows())
      throw std::invalid_argument("rrnn: inconsistent parameter shapes");
    if (!forget_weight.allFinite() || !update_weight.allFinite() || !forget_bias.allFinite() ||
        !update_bias.allFinite())
      throw std::domain_error("rrnn: non-finite parameter");
  }
};

template <typename T>
struct StepResult {
  Vector<T> cell;
  Vector<T> forget;
  Vector<T> update;
};

/// Forget gate and update for one input vector (no state involved).
template <typename T>
std::pair<Vector<T>, Vector<T>> gates(const RrnnParams<T>& p, const Vector<T>& h) {
  if (h.size() != p.input_width()) throw std::invalid_argument("rrnn: input width mismatch");
  if (!h.allFinite()) throw std::domain_error("rrnn: non-finite input");
  Vector<T> pre_f = p.forget_weight * h + p.forget_bias;
  Vector<T> f = (T(1) / (T(1) + (-pre_f.array()).exp())).matrix();
  f = f.cwiseMax(T(kMinForget)).cwiseMin(T(kMaxForget));
  Vector<T> u = ((T(1) - f.array()) * (p.update_weight * h + p.update_bias).array().tanh()).matrix();
  return {std::move(f), std::move(u)};
}

template <typename T>
StepResult<T> rrnn_step(const RrnnParams<T>& p, const Vector<T>& h, const Vector<T>& c_prev) {
  if (c_prev.size() != p.width()) throw std::invalid_argument("rrnn: state width mismatch");
  if (!c_prev.allFinite()) throw std::domain_error("rrnn: non-finite state");
  auto [f, u] = gates(p, h);
  Vector<T> c = f.cwiseProduct(c_prev) + u;
  return {std::move(c), std::move(f), std::move(u)};
}

/// Per-position chain values. Positions are 1-based; columns 0 and n+1 are the
/// boundaries. Forward: cell(0) = c_init, log_forget(t) = sum_{k<=t} log f_k.
/// Backward: cell(n+1) = c_init, log_forget(t) = sum_{k>=t} log f_k.
template <typename T>
struct RrnnTrace {
  Direction direction = Direction::forward;
  int length = 0;
  Matrix<T> cells;
  Matrix<T> forgets;
  Matrix<T> updates;
  Matrix<T> log_forgets;

  auto cell(int t) const { return cells.col(t); }
  auto forget(int t) const { return forgets.col(t); }
  auto update(int t) const { return updates.col(t); }
  auto log_forget(int t) const { return log_forgets.col(t); }
  int width() const { return static_cast<int>(cells.rows()); }
};

/// Runs the cell over the columns of `inputs` ([d_h x n]); the backward
/// direction consumes positions n..1.
template <typename T>
RrnnTrace<T> run_chain(const RrnnParams<T>& p, const Matrix<T>& inputs, const Vector<T>& c_init,
                       Direction direction = Direction::forward) {
  p.validate();
  const int n = static_cast<int>(inputs.cols());
  if (n < 1) throw std::invalid_argument("run_chain: empty input");
  const int d = p.width();
  RrnnTrace<T> tr;
  tr.direction = direction;
  tr.length = n;
  tr.cells = Matrix<T>::Zero(d, n + 2);
  tr.forgets = Matrix<T>::Ones(d, n + 2);
  tr.updates = Matrix<T>::Zero(d, n + 2);
  tr.log_forgets = Matrix<T>::Zero(d, n + 2);
  const bool fwd = direction == Direction::forward;
  const int boundary = fwd ? 0 : n + 1;
  tr.cells.col(boundary) = c_init;
  int prev = boundary;
  for (int k = 0; k < n; ++k) {
    const int t = fwd ? 1 + k : n - k;
    auto r = rrnn_step<T>(p, inputs.col(t - 1), tr.cells.col(prev));
    tr.cells.col(t) = r.cell;
    tr.forgets.col(t) = r.forget;
    tr.updates.col(t) = r.update;
    tr.log_forgets.col(t) = tr.log_forgets.col(prev) + r.forget.array().log().matrix();
    prev = t;
  }
  return tr;
}

/// c_{i,j} for every span of length <= max_span, grouped by end position.
template <typename T>
class SpanTable {
 public:
  SpanTable() = default;
  SpanTable(Direction direction, int length, int max_span, std::vector<Matrix<T>> by_end)
      : direction_(direction), length_(length), max_span_(max_span), by_end_(std::move(by_end)) {}

  Direction direction() const { return direction_; }
  int length() const { return length_; }
  int max_span() const { return max_span_; }
  /// Number of spans ending at j: min(j, max_span).
  int count(int j) const { return static_cast<int>(by_end_.at(static_cast<std::size_t>(j)).cols()); }
  /// Column k is the span [j-k, j].
  const Matrix<T>& ending_at(int j) const { return by_end_.at(static_cast<std::size_t>(j)); }

  bool covers(int i, int j) const { return i >= 1 && j <= length_ && i <= j && j - i < max_span_; }

  Vector<T> at(int i, int j) const {
    if (!covers(i, j))
      throw std::out_of_range("span table: [" + std::to_string(i) + "," + std::to_string(j) + "] not covered");
    return by_end_[static_cast<std::size_t>(j)].col(j - i);
  }

 private:
  Direction direction_ = Direction::forward;
  int length_ = 0;
  int max_span_ = 0;
  std::vector<Matrix<T>> by_end_;  // index 0 unused
};

/// Fills the table from a trace with the log-space subtraction identity.
template <typename T>
SpanTable<T> span_table(const RrnnTrace<T>& tr, int max_span) {
  if (max_span < 1) throw std::invalid_argument("span_table: max_span must be >= 1");
  const int n = tr.length;
  const int d = tr.width();
  std::vector<Matrix<T>> by_end(static_cast<std::size_t>(n) + 1);
  for (int j = 1; j <= n; ++j) {
    const int count = std::min(j, max_span);
    Matrix<T> m(d, count);
    for (int k = 0; k < count; ++k) {
      const int i = j - k;
      if (tr.direction == Direction::forward) {
        m.col(k) = tr.cell(j) - tr.cell(i - 1).cwiseProduct(
                                    (tr.log_forget(j) - tr.log_forget(i - 1)).array().exp().matrix());
      } else {
        m.col(k) = tr.cell(i) - tr.cell(j + 1).cwiseProduct(
                                    (tr.log_forget(i) - tr.log_forget(j + 1)).array().exp().matrix());
      }
    }
    by_end[static_cast<std::size_t>(j)] = std::move(m);
  }
  return SpanTable<T>(tr.direction, n, max_span, std::move(by_end));
}

/// Unbounded span length (parse-time scoring).
template <typename T>
SpanTable<T> span_table(const RrnnTrace<T>& tr) {
  return span_table(tr, tr.length);
}

/// Brute force: runs the cell afresh from a zero state across [i, j].
template <typename T>
Vector<T> naive_span(const RrnnParams<T>& p, const Matrix<T>& inputs, int i, int j,
                     Direction direction = Direction::forward) {
  const int n = static_cast<int>(inputs.cols());
  if (i < 1 || j > n || i > j)
    throw std::out_of_range("naive_span: [" + std::to_string(i) + "," + std::to_string(j) + "] outside 1.." +
                            std::to_string(n));
  Vector<T> c = Vector<T>::Zero(p.width());
  if (direction == Direction::forward) {
    for (int t = i; t <= j; ++t) c = rrnn_step<T>(p, inputs.col(t - 1), c).cell;
  } else {
    for (int t = j; t >= i; --t) c = rrnn_step<T>(p, inputs.col(t - 1), c).cell;
  }
  return c;
}

/// g([i,j]) = [forward c_{i,j}; backward c_{i,j}].
template <typename T>
Vector<T> bidir_span_repr(const SpanTable<T>& fwd, const SpanTable<T>& bwd, int i, int j) {
  if (fwd.direction() != Direction::forward || bwd.direction() != Direction::backward)
    throw std::invalid_argument("bidir_span_repr: table directions");
  Vector<T> a = fwd.at(i, j);
  Vector<T> b = bwd.at(i, j);
  Vector<T> out(a.size() + b.size());
  out << a, b;
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable versions on an ad::Graph. Every Var holds [d x B] with the
// batch along columns.

struct CellVars {
  ad::Var forget_weight, update_weight, forget_bias, update_bias;
};

template <typename T>
struct GateVars {
  ad::Var forget;
  ad::Var update;
};

template <typename T>
GateVars<T> graph_gates(ad::Graph<T>& g, const CellVars& p, ad::Var h) {
  ad::Var f = g.clamp(g.sigmoid(g.affine(p.forget_weight, h, p.forget_bias)), T(kMinForget), T(kMaxForget));
  ad::Var u = g.cmul(g.one_minus(f), g.tanh(g.affine(p.update_weight, h, p.update_bias)));
  return {f, u};
}

/// Forward chain in graph form. Index 0 is the boundary state (c_{start-1} and
/// its log-forget prefix); index t >= 1 are chain positions.
template <typename T>
struct ForwardChain {
  std::vector<ad::Var> cells;
  std::vector<ad::Var> log_forgets;

  int length() const { return static_cast<int>(cells.size()) - 1; }
};

/// Extends `chain` by one position given that position's gates.
template <typename T>
void extend_chain(ad::Graph<T>& g, ForwardChain<T>& chain, const GateVars<T>& gv) {
  ad::Var c = g.add(g.cmul(gv.forget, chain.cells.back()), gv.update);
  ad::Var lf = g.add(chain.log_forgets.back(), g.log(gv.forget));
  chain.cells.push_back(c);
  chain.log_forgets.push_back(lf);
}

/// Forward span [i, j] over chain indices via the subtraction identity.
template <typename T>
ad::Var graph_forward_span(ad::Graph<T>& g, const ForwardChain<T>& chain, int i, int j) {
  const auto ci = static_cast<std::size_t>(i - 1);
  const auto cj = static_cast<std::size_t>(j);
  ad::Var decay = g.exp(g.sub(chain.log_forgets[cj], chain.log_forgets[ci]));
  return g.sub(chain.cells[cj], g.cmul(chain.cells[ci], decay));
}

/// Backward spans [j-k, j] for k = 0..count-1 by extending leftward from j:
/// c_{j,j} = u_j, c_{i-1,j} = f_{i-1} * c_{i,j} + u_{i-1}. `gates[t]` holds the
/// backward-direction gates of position t (index 0 unused).
template <typename T>
std::vector<ad::Var> graph_backward_spans_ending_at(ad::Graph<T>& g, const std::vector<GateVars<T>>& gates, int j,
                                                    int count) {
  std::vector<ad::Var> out;
  out.reserve(static_cast<std::size_t>(count));
  ad::Var c = gates[static_cast<std::size_t>(j)].update;
  out.push_back(c);
  for (int k = 1; k < count; ++k) {
    const auto& gv = gates[static_cast<std::size_t>(j - k)];
    c = g.add(g.cmul(gv.forget, c), gv.update);
    out.push_back(c);
  }
  return out;
}

}  // namespace palm::rrnn

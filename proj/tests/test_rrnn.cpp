#include "palm/rrnn.hpp"
#include "palm/selftest.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace palm;
using namespace palm::rrnn;

namespace {

template <typename T = double>
RrnnParams<T> random_params(int dr, int dh, std::mt19937_64& rng, double scale = 0.8) {
  std::normal_distribution<double> n(0.0, scale);
  RrnnParams<T> p{Matrix<T>(dr, dh), Matrix<T>(dr, dh), Vector<T>(dr), Vector<T>(dr)};
  for (auto* m : {&p.forget_weight, &p.update_weight})
    for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = static_cast<T>(n(rng));
  for (auto* v : {&p.forget_bias, &p.update_bias})
    for (Eigen::Index k = 0; k < v->size(); ++k) (*v)[k] = static_cast<T>(n(rng));
  return p;
}

Matrix<double> random_inputs(int dh, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix<double> x(dh, n);
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = d(rng);
  return x;
}

double rel(const Vector<double>& a, const Vector<double>& b) { return relative_error<double>(a, b); }

// Scalar loops, written out separately from the Eigen code under test.
struct ScalarStep {
  std::vector<double> f, u, c;
};

ScalarStep scalar_step(const RrnnParams<double>& p, const Vector<double>& h, const Vector<double>& c_prev) {
  ScalarStep s;
  for (int r = 0; r < p.width(); ++r) {
    double zf = p.forget_bias[r], zu = p.update_bias[r];
    for (int k = 0; k < p.input_width(); ++k) {
      zf += p.forget_weight(r, k) * h[k];
      zu += p.update_weight(r, k) * h[k];
    }
    double f = 1.0 / (1.0 + std::exp(-zf));
    f = std::min(std::max(f, kMinForget), kMaxForget);
    const double u = (1.0 - f) * std::tanh(zu);
    s.f.push_back(f);
    s.u.push_back(u);
    s.c.push_back(f * c_prev[r] + u);
  }
  return s;
}

// Unrolled product form: forward c_{i,j} = sum_k u_k prod_{l=k+1..j} f_l,
// backward c_{i,j} = sum_k u_k prod_{l=i..k-1} f_l.
Vector<double> product_form(const RrnnParams<double>& p, const Matrix<double>& x, int i, int j, Direction dir) {
  const int d = p.width();
  std::vector<ScalarStep> g;
  for (int t = 1; t <= x.cols(); ++t) g.push_back(scalar_step(p, x.col(t - 1), Vector<double>::Zero(d)));
  Vector<double> out = Vector<double>::Zero(d);
  for (int r = 0; r < d; ++r) {
    for (int k = i; k <= j; ++k) {
      double prod = 1;
      if (dir == Direction::forward)
        for (int l = k + 1; l <= j; ++l) prod *= g[static_cast<std::size_t>(l - 1)].f[static_cast<std::size_t>(r)];
      else
        for (int l = i; l <= k - 1; ++l) prod *= g[static_cast<std::size_t>(l - 1)].f[static_cast<std::size_t>(r)];
      out[r] += g[static_cast<std::size_t>(k - 1)].u[static_cast<std::size_t>(r)] * prod;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("rrnn_step") {
  std::mt19937_64 rng(1);
  SUBCASE("zero input and biases halve the state") {
    RrnnParams<double> p = random_params(4, 3, rng);
    p.forget_bias.setZero();
    p.update_bias.setZero();
    const Vector<double> c_prev = Vector<double>::Random(4);
    const auto r = rrnn_step<double>(p, Vector<double>::Zero(3), c_prev);
    CHECK((r.forget.array() == 0.5).all());
    CHECK((r.update.array() == 0.0).all());
    CHECK(rel(r.cell, 0.5 * c_prev) < 1e-15);
  }
  SUBCASE("zero state gives the update") {
    const RrnnParams<double> p = random_params(4, 3, rng);
    const auto r = rrnn_step<double>(p, Vector<double>::Random(3), Vector<double>::Zero(4));
    CHECK(r.cell == r.update);
  }
  SUBCASE("3-dim instance matches scalar evaluation") {
    const RrnnParams<double> p = random_params(3, 3, rng);
    const Vector<double> h = Vector<double>::Random(3), c_prev = Vector<double>::Random(3);
    const auto r = rrnn_step<double>(p, h, c_prev);
    const auto s = scalar_step(p, h, c_prev);
    for (int k = 0; k < 3; ++k) {
      CHECK(r.forget[k] == doctest::Approx(s.f[static_cast<std::size_t>(k)]).epsilon(1e-14));
      CHECK(r.update[k] == doctest::Approx(s.u[static_cast<std::size_t>(k)]).epsilon(1e-14));
      CHECK(r.cell[k] == doctest::Approx(s.c[static_cast<std::size_t>(k)]).epsilon(1e-14));
    }
  }
  SUBCASE("forget gate clamp") {
    RrnnParams<double> p = random_params(2, 1, rng);
    p.forget_weight.setZero();
    p.forget_bias << 100.0, -100.0;
    const auto r = rrnn_step<double>(p, Vector<double>::Ones(1), Vector<double>::Ones(2));
    CHECK(r.forget[0] == kMaxForget);
    CHECK(r.forget[1] == kMinForget);
  }
  SUBCASE("errors") {
    const RrnnParams<double> p = random_params(2, 3, rng);
    Vector<double> h = Vector<double>::Zero(3);
    h[1] = std::nan("");
    CHECK_THROWS_AS(rrnn_step<double>(p, h, Vector<double>::Zero(2)), std::domain_error);
    h[1] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(rrnn_step<double>(p, h, Vector<double>::Zero(2)), std::domain_error);
    CHECK_THROWS_AS(rrnn_step<double>(p, Vector<double>::Zero(2), Vector<double>::Zero(2)), std::invalid_argument);
    CHECK_THROWS_AS(rrnn_step<double>(p, Vector<double>::Zero(3), Vector<double>::Zero(3)), std::invalid_argument);
  }
}

TEST_CASE("run_chain") {
  std::mt19937_64 rng(2);
  const RrnnParams<double> p = random_params(5, 4, rng);
  SUBCASE("n = 1") {
    const Matrix<double> x = random_inputs(4, 1, rng);
    const Vector<double> c0 = Vector<double>::Random(5);
    const auto tr = run_chain<double>(p, x, c0);
    const auto s = rrnn_step<double>(p, x.col(0), Vector<double>::Zero(5));
    CHECK(rel(tr.cell(1), s.forget.cwiseProduct(c0) + s.update) < 1e-15);
  }
  SUBCASE("prefix log-forget equals the direct product") {
    const Matrix<double> x = random_inputs(4, 30, rng);
    const auto tr = run_chain<double>(p, x, Vector<double>::Zero(5));
    Vector<double> prod = Vector<double>::Ones(5);
    for (int t = 1; t <= 30; ++t) prod = prod.cwiseProduct(tr.forget(t));
    CHECK(rel(tr.log_forget(30).array().exp().matrix(), prod) < 1e-6);
  }
  SUBCASE("backward on x equals forward on reversed x") {
    const Matrix<double> x = random_inputs(4, 12, rng);
    const Matrix<double> rev = x.rowwise().reverse();
    const auto b = run_chain<double>(p, x, Vector<double>::Zero(5), Direction::backward);
    const auto f = run_chain<double>(p, rev, Vector<double>::Zero(5), Direction::forward);
    for (int t = 1; t <= 12; ++t) {
      CHECK(rel(b.cell(t), f.cell(13 - t)) < 1e-14);
      CHECK(rel(b.log_forget(t), f.log_forget(13 - t)) < 1e-14);
    }
  }
  CHECK_THROWS_AS(run_chain<double>(p, Matrix<double>(4, 0), Vector<double>::Zero(5)), std::invalid_argument);
}

TEST_CASE("span_table identities") {
  std::mt19937_64 rng(3);
  const RrnnParams<double> p = random_params(6, 3, rng);
  const Matrix<double> x = random_inputs(3, 20, rng);
  for (auto dir : {Direction::forward, Direction::backward}) {
    const auto tr = run_chain<double>(p, x, Vector<double>::Zero(6), dir);
    const auto table = span_table(tr, 20);
    for (int j = 1; j <= 20; ++j) CHECK(rel(table.at(j, j), tr.update(j)) < 1e-14);
    const Vector<double> whole = table.at(1, 20);
    CHECK(rel(whole, dir == Direction::forward ? Vector<double>(tr.cell(20)) : Vector<double>(tr.cell(1))) < 1e-14);
  }
}

TEST_CASE("span_table with a nonzero initial state still isolates spans") {
  std::mt19937_64 rng(4);
  const RrnnParams<double> p = random_params(4, 3, rng);
  const Matrix<double> x = random_inputs(3, 15, rng);
  const auto tr = run_chain<double>(p, x, Vector<double>::Random(4));
  const auto table = span_table(tr, 15);
  for (int j = 1; j <= 15; ++j)
    for (int i = 1; i <= j; ++i) CHECK(rel(table.at(i, j), naive_span<double>(p, x, i, j)) < 1e-10);
}

TEST_CASE("span_table counts and coverage") {
  std::mt19937_64 rng(5);
  const RrnnParams<double> p = random_params(3, 2, rng);
  const auto tr = run_chain<double>(p, random_inputs(2, 9, rng), Vector<double>::Zero(3));
  const auto table = span_table(tr, 4);
  for (int j = 1; j <= 9; ++j) CHECK(table.count(j) == std::min(j, 4));
  CHECK(table.covers(6, 9));
  CHECK_FALSE(table.covers(5, 9));
  CHECK_THROWS_AS(table.at(5, 9), std::out_of_range);
  CHECK_THROWS_AS(table.at(0, 2), std::out_of_range);
  CHECK_THROWS_AS(table.at(3, 10), std::out_of_range);
  CHECK_THROWS_AS(span_table(tr, 0), std::invalid_argument);
}

TEST_CASE("span_table matches the naive chain on random draws") {
  std::mt19937_64 rng(6);
  for (int draw = 0; draw < 200; ++draw) {
    const int dr = std::uniform_int_distribution<int>(1, 16)(rng);
    const int dh = std::uniform_int_distribution<int>(1, 8)(rng);
    const int n = std::uniform_int_distribution<int>(1, 50)(rng);
    const RrnnParams<double> p = random_params(dr, dh, rng, 0.5);
    const Matrix<double> x = random_inputs(dh, n, rng);
    const int i = std::uniform_int_distribution<int>(1, n)(rng);
    const int j = std::uniform_int_distribution<int>(i, n)(rng);
    for (auto dir : {Direction::forward, Direction::backward}) {
      const auto table = span_table(run_chain<double>(p, x, Vector<double>::Zero(dr), dir));
      CHECK(rel(table.at(i, j), naive_span<double>(p, x, i, j, dir)) < 1e-10);
    }
  }
}

TEST_CASE("log-space table agrees with the unrolled product form") {
  std::mt19937_64 rng(7);
  for (int draw = 0; draw < 20; ++draw) {
    const RrnnParams<double> p = random_params(5, 4, rng);
    const Matrix<double> x = random_inputs(4, 25, rng);
    for (auto dir : {Direction::forward, Direction::backward}) {
      const auto table = span_table(run_chain<double>(p, x, Vector<double>::Zero(5), dir));
      for (int j = 1; j <= 25; ++j)
        for (int i = 1; i <= j; ++i) CHECK(rel(table.at(i, j), product_form(p, x, i, j, dir)) < 1e-6);
    }
  }
}

TEST_CASE("one-step extension recurrence") {
  std::mt19937_64 rng(8);
  const RrnnParams<double> p = random_params(4, 3, rng);
  const Matrix<double> x = random_inputs(3, 18, rng);
  const auto tr = run_chain<double>(p, x, Vector<double>::Zero(4));
  const auto table = span_table(tr, 18);
  for (int j = 2; j <= 18; ++j)
    for (int i = 1; i < j; ++i) {
      const Vector<double> ext = tr.forget(j).cwiseProduct(table.at(i, j - 1)) + tr.update(j);
      CHECK(rel(table.at(i, j), ext) < 1e-9);
    }
}

TEST_CASE("backward table mirrors the forward table on reversed input") {
  std::mt19937_64 rng(9);
  const RrnnParams<double> p = random_params(4, 3, rng);
  const int n = 14;
  const Matrix<double> x = random_inputs(3, n, rng);
  const Matrix<double> rev = x.rowwise().reverse();
  const auto b = span_table(run_chain<double>(p, x, Vector<double>::Zero(4), Direction::backward));
  const auto f = span_table(run_chain<double>(p, rev, Vector<double>::Zero(4), Direction::forward));
  for (int j = 1; j <= n; ++j)
    for (int i = 1; i <= j; ++i) CHECK(rel(b.at(i, j), f.at(n + 1 - j, n + 1 - i)) < 1e-10);
}

TEST_CASE("naive_span") {
  std::mt19937_64 rng(10);
  const RrnnParams<double> p = random_params(3, 2, rng);
  const Matrix<double> x = random_inputs(2, 6, rng);
  const auto tr = run_chain<double>(p, x, Vector<double>::Zero(3));
  for (int j = 1; j <= 6; ++j) {
    CHECK(rel(naive_span<double>(p, x, j, j), tr.update(j)) < 1e-15);
    CHECK(rel(naive_span<double>(p, x, 1, j), tr.cell(j)) < 1e-15);
  }
  CHECK_THROWS_AS(naive_span<double>(p, x, 0, 2), std::out_of_range);
  CHECK_THROWS_AS(naive_span<double>(p, x, 3, 2), std::out_of_range);
  CHECK_THROWS_AS(naive_span<double>(p, x, 2, 7), std::out_of_range);
}

TEST_CASE("bidir_span_repr") {
  std::mt19937_64 rng(11);
  const RrnnParams<double> pf = random_params(3, 2, rng), pb = random_params(3, 2, rng);
  const Matrix<double> x = random_inputs(2, 10, rng);
  const auto tf = run_chain<double>(pf, x, Vector<double>::Zero(3));
  const auto tb = run_chain<double>(pb, x, Vector<double>::Zero(3), Direction::backward);
  const auto f = span_table(tf, 10), b = span_table(tb, 10);
  for (int i = 1; i <= 10; ++i) {
    const Vector<double> g = bidir_span_repr(f, b, i, i);
    REQUIRE(g.size() == 6);
    CHECK(rel(g.head(3), tf.update(i)) < 1e-15);
    CHECK(rel(g.tail(3), tb.update(i)) < 1e-15);
  }
  for (int draw = 0; draw < 30; ++draw) {
    const int i = std::uniform_int_distribution<int>(1, 10)(rng);
    const int j = std::uniform_int_distribution<int>(i, 10)(rng);
    Vector<double> want(6);
    want << naive_span<double>(pf, x, i, j), naive_span<double>(pb, x, i, j, Direction::backward);
    CHECK(rel(bidir_span_repr(f, b, i, j), want) < 1e-10);
  }
  CHECK_THROWS_AS(bidir_span_repr(b, f, 1, 2), std::invalid_argument);
  const auto short_f = span_table(tf, 2);
  CHECK_THROWS_AS(bidir_span_repr(short_f, b, 1, 5), std::out_of_range);
}

TEST_CASE("graph span values and gradients") {
  // Scalar objective sum_{i,j} w_ij . [fwd c_ij; bwd c_ij] over all spans of a
  // 5-dim instance; gradients w.r.t. W_f, W_u, b_f, b_u and the inputs.
  std::mt19937_64 rng(12);
  const int dr = 5, dh = 5, n = 6;
  std::vector<ad::Parameter<double>> params(9);
  const RrnnParams<double> pf = random_params(dr, dh, rng, 0.5), pb = random_params(dr, dh, rng, 0.5);
  params[0] = {"fwf", pf.forget_weight, {}};
  params[1] = {"fwu", pf.update_weight, {}};
  params[2] = {"fbf", pf.forget_bias, {}};
  params[3] = {"fbu", pf.update_bias, {}};
  params[4] = {"bwf", pb.forget_weight, {}};
  params[5] = {"bwu", pb.update_weight, {}};
  params[6] = {"bbf", pb.forget_bias, {}};
  params[7] = {"bbu", pb.update_bias, {}};
  params[8] = {"x", random_inputs(dh, n, rng), {}};
  std::vector<Matrix<double>> weights;
  for (int k = 0; k < n * n; ++k) weights.push_back(Matrix<double>::Random(2 * dr, 1));

  auto build = [&](ad::Graph<double>& g, bool check_values) {
    std::vector<ad::Var> v;
    for (auto& p : params) v.push_back(g.param(p));
    const CellVars cf{v[0], v[1], v[2], v[3]}, cb{v[4], v[5], v[6], v[7]};
    ForwardChain<double> chain;
    chain.cells.push_back(g.constant(Matrix<double>::Zero(dr, 1)));
    chain.log_forgets.push_back(g.constant(Matrix<double>::Zero(dr, 1)));
    std::vector<GateVars<double>> bgates(n + 1);
    for (int t = 1; t <= n; ++t) {
      const ad::Var pick = g.constant(Matrix<double>(Matrix<double>::Identity(n, n).col(t - 1)));
      const ad::Var xt = g.matmul(v[8], pick);
      extend_chain(g, chain, graph_gates(g, cf, xt));
      bgates[static_cast<std::size_t>(t)] = graph_gates(g, cb, xt);
    }
    std::vector<ad::Var> terms;
    const RrnnParams<double> qf{params[0].value, params[1].value, params[2].value, params[3].value};
    const RrnnParams<double> qb{params[4].value, params[5].value, params[6].value, params[7].value};
    for (int j = 1; j <= n; ++j) {
      const auto back = graph_backward_spans_ending_at(g, bgates, j, j);
      for (int k = 0; k < j; ++k) {
        const int i = j - k;
        const ad::Var fwd = graph_forward_span(g, chain, i, j);
        if (check_values) {
          CHECK(rel(g.value(fwd).col(0), naive_span<double>(qf, params[8].value, i, j)) < 1e-10);
          CHECK(rel(g.value(back[static_cast<std::size_t>(k)]).col(0),
                    naive_span<double>(qb, params[8].value, i, j, Direction::backward)) < 1e-10);
        }
        const ad::Var both = g.concat_rows({fwd, back[static_cast<std::size_t>(k)]});
        terms.push_back(g.matmul_tn(g.constant(weights[static_cast<std::size_t>((i - 1) * n + (j - 1))]), both));
      }
    }
    return g.sum_all(g.add_n(terms));
  };

  ad::Graph<double> g(true);
  const ad::Var loss = build(g, true);
  for (auto& p : params) p.zero_grad();
  g.backward(loss);

  const double h = 1e-5;
  double worst = 0;
  for (auto& p : params) {
    for (Eigen::Index e = 0; e < p.value.size(); ++e) {
      const double saved = p.value.data()[e];
      auto eval = [&] {
        ad::Graph<double> f(false);
        return f.scalar(build(f, false));
      };
      p.value.data()[e] = saved + h;
      const double up = eval();
      p.value.data()[e] = saved - h;
      const double down = eval();
      p.value.data()[e] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad.data()[e];
      worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6}));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("span oracle suite") {
  SUBCASE("passes on the real table") {
    CHECK(span_oracle_suite<double>(40, 3, 1e-10, ErrorScope::per_span).passed);
    CHECK(span_oracle_suite<float>(40, 3, 1e-5, ErrorScope::per_table).passed);
  }
  SUBCASE("a sign flip in the subtraction is caught") {
    SpanTableBuilder<double> flipped = [](const RrnnTrace<double>& tr, int m) {
      const int n = tr.length;
      std::vector<Matrix<double>> by_end(static_cast<std::size_t>(n) + 1);
      for (int j = 1; j <= n; ++j) {
        const int count = std::min(j, m);
        Matrix<double> cols(tr.width(), count);
        for (int k = 0; k < count; ++k) {
          const int i = j - k;
          const int a = tr.direction == Direction::forward ? j : i;
          const int b = tr.direction == Direction::forward ? i - 1 : j + 1;
          cols.col(k) = tr.cell(a) + tr.cell(b).cwiseProduct(
                                         (tr.log_forget(a) - tr.log_forget(b)).array().exp().matrix());
        }
        by_end[static_cast<std::size_t>(j)] = std::move(cols);
      }
      return SpanTable<double>(tr.direction, n, m, std::move(by_end));
    };
    const auto per_span = span_oracle_suite<double>(40, 3, 1e-10, ErrorScope::per_span, flipped);
    CHECK_FALSE(per_span.passed);
    CHECK(per_span.detail.find("differs from the naive chain") != std::string::npos);
    CHECK_FALSE(span_oracle_suite<double>(40, 3, 1e-5, ErrorScope::per_table, flipped).passed);
  }
}

#include "palm/selftest.hpp"

#include "palm/corpus.hpp"
#include "palm/lm.hpp"
#include "palm/parser.hpp"
#include "palm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

namespace palm {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

template <typename T>
Matrix<T> normal_matrix(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

template <typename T>
Matrix<T> uniform_matrix(int rows, int cols, double range, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-range, range);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Uniformly random split points, recursively.
void random_tree_spans(int first, int last, std::mt19937_64& rng, std::set<Span>& out) {
  out.insert({first, last});
  if (first == last) return;
  const int split = uniform_int(rng, first, last - 1);
  random_tree_spans(first, split, rng, out);
  random_tree_spans(split + 1, last, rng, out);
}

}  // namespace

template <typename T>
SuiteResult span_oracle_suite(int draws, std::uint64_t seed, double tolerance, ErrorScope scope,
                              SpanTableBuilder<T> builder) {
  const auto start = Clock::now();
  if (!builder) builder = [](const rrnn::RrnnTrace<T>& tr, int m) { return rrnn::span_table(tr, m); };
  SuiteResult r;
  r.name = "span_oracle";
  std::mt19937_64 rng = seeded_stream(seed, "span_oracle");
  long checked = 0;
  double worst_span = 0;
  auto fail = [&](const std::string& what) {
    r.detail = what;
    r.seconds = since(start);
    return r;
  };
  for (int d = 0; d < draws; ++d) {
    const int dr = uniform_int(rng, 1, 16);
    const int dh = uniform_int(rng, 1, 8);
    const int n = uniform_int(rng, 1, 50);
    // Same scale as the model's initialization: U(-1/sqrt(d_h), 1/sqrt(d_h)).
    const double w = 1.0 / std::sqrt(static_cast<double>(dh));
    rrnn::RrnnParams<T> p{uniform_matrix<T>(dr, dh, w, rng), uniform_matrix<T>(dr, dh, w, rng),
                          uniform_matrix<T>(dr, 1, 0.5, rng), uniform_matrix<T>(dr, 1, 0.5, rng)};
    const Matrix<T> inputs = normal_matrix<T>(dh, n, 1.0, rng);
    for (auto dir : {rrnn::Direction::forward, rrnn::Direction::backward}) {
      const char* dir_name = dir == rrnn::Direction::forward ? "forward" : "backward";
      const auto trace = rrnn::run_chain<T>(p, inputs, Vector<T>::Zero(dr), dir);
      const auto table = builder(trace, n);
      double diff_sq = 0, ref_sq = 0;
      for (int j = 1; j <= n; ++j) {
        for (int i = 1; i <= j; ++i) {
          const Vector<T> got = table.at(i, j);
          const Vector<T> want = rrnn::naive_span<T>(p, inputs, i, j, dir);
          diff_sq += static_cast<double>((got - want).squaredNorm());
          ref_sq += static_cast<double>(want.squaredNorm());
          const double err = relative_error<T>(got, want);
          ++checked;
          worst_span = std::max(worst_span, err);
          if (scope == ErrorScope::per_span && !(err < tolerance)) {
            std::ostringstream msg;
            msg << dir_name << " span [" << i << "," << j << "] of draw " << d << " (d_r=" << dr << ", n=" << n
                << ") differs from the naive chain: relative error " << err << " >= " << tolerance;
            r.worst = err;
            return fail(msg.str());
          }
        }
      }
      const double table_err = std::sqrt(diff_sq) / std::max(std::sqrt(ref_sq), 1e-30);
      if (scope == ErrorScope::per_table) {
        r.worst = std::max(r.worst, table_err);
        if (!(table_err < tolerance)) {
          std::ostringstream msg;
          msg << dir_name << " table of draw " << d << " (d_r=" << dr << ", n=" << n
              << ") differs from the naive chain: relative error " << table_err << " >= " << tolerance;
          return fail(msg.str());
        }
      }
    }
  }
  if (scope == ErrorScope::per_span) r.worst = worst_span;
  r.passed = true;
  std::ostringstream msg;
  msg << checked << " spans over " << draws << " draws, max " << (scope == ErrorScope::per_span ? "span" : "table")
      << " relative error " << r.worst << " (max per-span " << worst_span << ")";
  r.detail = msg.str();
  r.seconds = since(start);
  return r;
}

template SuiteResult span_oracle_suite<float>(int, std::uint64_t, double, ErrorScope, SpanTableBuilder<float>);
template SuiteResult span_oracle_suite<double>(int, std::uint64_t, double, ErrorScope, SpanTableBuilder<double>);

SuiteResult gradient_suite(int seeds, std::uint64_t seed, double tolerance) {
  const auto start = Clock::now();
  SuiteResult r;
  r.name = "gradient_check";
  constexpr double kStep = 1e-6;
  constexpr double kFloor = 1e-6;  // denominators below this are treated as this
  long checked = 0;

  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t run_seed = seed + static_cast<std::uint64_t>(s);
    std::mt19937_64 rng = seeded_stream(run_seed, "gradient_check");
    ModelConfig c;
    c.vocab_size = 7;
    c.embedding_dim = 4;
    c.hidden_dim = 5;
    c.rrnn_dim = 3;
    c.max_span = 3;
    c.scorer_dim = 4;
    c.lambda = 0.5;
    c.dropout_embedding = c.dropout_hidden = c.dropout_output = 0.0;
    c.tie_weights = s % 2 == 0;
    c.gate_mode = s % 3 == 2 ? attention::GateMode::conditioned : attention::GateMode::fixed;
    LanguageModel<double> model(c, run_seed);

    // Random sentences over words 0..5 (6 is the end mark) with random binary trees.
    std::vector<GoldTree> trees;
    TokenStream stream;
    while (stream.ids.size() < 16) {
      const int n = uniform_int(rng, 2, 5);
      GoldTree t;
      for (int i = 0; i < n; ++i) {
        const int w = uniform_int(rng, 0, 5);
        t.leaves.push_back({std::to_string(w), ""});
        stream.ids.push_back(w);
        stream.sentence_end.push_back(0);
      }
      std::set<Span> spans;
      random_tree_spans(1, n, rng, spans);
      for (const auto& sp : spans)
        if (sp.length() >= 2) t.spans.push_back(sp);
      trees.push_back(std::move(t));
      stream.ids.push_back(6);
      stream.sentence_end.push_back(1);
    }
    const OracleSpanTargets oracle = stream_oracle_targets(trees, c.max_span);
    const auto windows = make_windows(stream, 2, 3);

    CarriedState<double> state;
    for (std::size_t w = 0; w < std::min<std::size_t>(2, windows.size()); ++w) {
      const Window& win = windows[w];
      ForwardOptions opt;
      auto objective = [&]() {
        ad::Graph<double> g(false);
        auto pass = build_forward(g, model, win, state, opt);
        return static_cast<double>(g.scalar(build_objective(g, pass, win, &oracle, c.lambda).total));
      };
      model.zero_grad();
      ad::Graph<double> g(true);
      auto pass = build_forward(g, model, win, state, opt);
      g.backward(build_objective(g, pass, win, &oracle, c.lambda).total);

      for (auto& p : model.params()) {
        if (p.frozen) continue;
        for (Eigen::Index e = 0; e < p.value.size(); ++e) {
          const double saved = p.value.data()[e];
          p.value.data()[e] = saved + kStep;
          const double up = objective();
          p.value.data()[e] = saved - kStep;
          const double down = objective();
          p.value.data()[e] = saved;
          const double numeric = (up - down) / (2 * kStep);
          const double analytic = p.grad.data()[e];
          const double err =
              std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFloor});
          ++checked;
          if (err > r.worst) r.worst = err;
          if (!(err < tolerance)) {
            std::ostringstream msg;
            msg << "d loss / d " << p.name << "[" << e << "] (seed " << run_seed << ", window " << w
                << "): analytic " << analytic << " vs numeric " << numeric << ", relative error " << err;
            r.detail = msg.str();
            r.seconds = since(start);
            return r;
          }
        }
      }
      state = std::move(pass.next);
    }
  }
  r.passed = true;
  std::ostringstream msg;
  msg << checked << " partial derivatives over " << seeds << " seeds, max relative error " << r.worst;
  r.detail = msg.str();
  r.seconds = since(start);
  return r;
}

SuiteResult recovery_suite(int trees, std::uint64_t seed, int min_length, int max_length) {
  const auto start = Clock::now();
  SuiteResult r;
  r.name = "tree_recovery";
  std::mt19937_64 rng = seeded_stream(seed, "tree_recovery");
  for (int t = 0; t < trees; ++t) {
    const int n = uniform_int(rng, min_length, max_length);
    std::set<Span> nodes;
    random_tree_spans(1, n, rng, nodes);
    ScoreMatrix s;
    s.rows.resize(static_cast<std::size_t>(n) + 1);
    for (int j = 1; j <= n; ++j)
      for (int k = 0; k < j; ++k) s.rows[static_cast<std::size_t>(j)].push_back(nodes.count({j - k, j}) ? 1.0 : 0.0);
    const ParseTree parsed = greedy_parse(s, n);
    if (tree_brackets(parsed, true) != nodes) {
      r.worst = 1;
      r.detail = "tree " + std::to_string(t) + " (n=" + std::to_string(n) + ") decoded as " + parsed.to_bracketed() +
                 ", which differs from the encoded tree";
      r.seconds = since(start);
      return r;
    }
  }
  r.passed = true;
  r.detail = std::to_string(trees) + " trees recovered exactly";
  r.seconds = since(start);
  return r;
}

std::vector<SuiteResult> run_selftest(std::uint64_t seed) {
  std::vector<SuiteResult> out;
  out.push_back(span_oracle_suite<double>(100, seed, 1e-10, ErrorScope::per_span));
  out.back().name += "_float64";
  out.push_back(span_oracle_suite<float>(100, seed, 1e-5, ErrorScope::per_table));
  out.back().name += "_float32";
  out.push_back(gradient_suite(2, seed, 1e-3));
  out.push_back(recovery_suite(300, seed, 2, 20));
  return out;
}

}  // namespace palm

#include "palm/lm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace palm {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("model: vocab_size must be >= 2");
  if (embedding_dim < 1 || hidden_dim < 1 || rrnn_dim < 1) throw std::invalid_argument("model: widths must be >= 1");
  if (num_layers < 2) throw std::invalid_argument("model: need at least 2 recurrent layers");
  if (max_span < 1) throw std::invalid_argument("model: max_span must be >= 1");
  if (lambda < 0) throw std::invalid_argument("model: lambda must be >= 0");
  if (attention_layer < 1 || attention_layer > num_layers - 1)
    throw std::invalid_argument("model: attention_layer must lie in [1, num_layers - 1]");
  for (double p : {dropout_embedding, dropout_hidden, dropout_output})
    if (p < 0 || p >= 1) throw std::invalid_argument("model: dropout rates must lie in [0, 1)");
}

int ModelConfig::layer_input_width(int layer) const { return layer == 1 ? embedding_dim : hidden_dim; }

int ModelConfig::layer_output_width(int layer) const {
  return (layer == num_layers && tie_weights) ? embedding_dim : hidden_dim;
}

std::mt19937_64 seeded_stream(std::uint64_t seed, const std::string& name) {
  // FNV-1a over the name, mixed with the seed through splitmix64.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return std::mt19937_64(z);
}

// ---------------------------------------------------------------------------
// LanguageModel

template <typename T>
int LanguageModel<T>::add_param(const std::string& name, int rows, int cols, std::mt19937_64& rng, double range) {
  ad::Parameter<T> p;
  p.name = name;
  p.value.resize(rows, cols);
  std::uniform_real_distribution<double> dist(-range, range);
  for (Eigen::Index c = 0; c < p.value.cols(); ++c)
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) p.value(r, c) = range == 0 ? T(0) : T(dist(rng));
  p.zero_grad();
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

template <typename T>
LanguageModel<T>::LanguageModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  auto rng = seeded_stream(seed, "init");
  const int v = config_.vocab_size;
  const int e = config_.embedding_dim;
  embedding = add_param("embedding", e, v, rng, 0.1);
  for (int l = 1; l <= config_.num_layers; ++l) {
    const int in = config_.layer_input_width(l);
    const int h = config_.layer_output_width(l);
    const double r = 1.0 / std::sqrt(static_cast<double>(h));
    const std::string pre = "lstm" + std::to_string(l) + ".";
    LstmLayer layer{};
    layer.input_weight = add_param(pre + "input_weight", 4 * h, in, rng, r);
    layer.hidden_weight = add_param(pre + "hidden_weight", 4 * h, h, rng, r);
    layer.bias = add_param(pre + "bias", 4 * h, 1, rng, r);
    layer.width = h;
    layers.push_back(layer);
  }
  const int last = config_.layer_output_width(config_.num_layers);
  if (!config_.tie_weights)
    output_weight = add_param("output_weight", last, v, rng, 1.0 / std::sqrt(static_cast<double>(last)));
  output_bias = add_param("output_bias", v, 1, rng, 0.0);

  const int dh = config_.attention_width();
  const int dr = config_.rrnn_dim;
  const double rr = 1.0 / std::sqrt(static_cast<double>(dh));
  for (auto [idx, pre] : {std::pair{&fwd_, "rrnn_forward."}, std::pair{&bwd_, "rrnn_backward."}}) {
    idx->forget_weight = add_param(std::string(pre) + "forget_weight", dr, dh, rng, rr);
    idx->update_weight = add_param(std::string(pre) + "update_weight", dr, dh, rng, rr);
    idx->forget_bias = add_param(std::string(pre) + "forget_bias", dr, 1, rng, rr);
    idx->update_bias = add_param(std::string(pre) + "update_bias", dr, 1, rng, rr);
  }
  const int s = config_.effective_scorer_dim();
  const int cat = dh + 2 * dr;
  const double rc = 1.0 / std::sqrt(static_cast<double>(cat));
  attn_.score_query_weight = add_param("attention.score_query_weight", s, dh, rng, rc);
  attn_.score_span_weight = add_param("attention.score_span_weight", s, 2 * dr, rng, rc);
  attn_.score_hidden_bias = add_param("attention.score_hidden_bias", s, 1, rng, rc);
  attn_.score_out_weight = add_param("attention.score_out_weight", s, 1, rng, 1.0 / std::sqrt(static_cast<double>(s)));
  if (config_.gate_mode == attention::GateMode::fixed) {
    attn_.gate_logit = add_param("attention.gate_logit", dh, 1, rng, 0.0);
  } else {
    attn_.gate_weight = add_param("attention.gate_weight", dh, cat, rng, rc);
    attn_.gate_bias = add_param("attention.gate_bias", dh, 1, rng, 0.0);
  }
  attn_.merge_weight = add_param("attention.merge_weight", dh, cat, rng, rc);
  attn_.merge_bias = add_param("attention.merge_bias", dh, 1, rng, rc);
  set_attention_mode(config_.attention_mode);
}

template <typename T>
void LanguageModel<T>::set_attention_mode(AttentionMode mode) {
  config_.attention_mode = mode;
  const bool freeze = mode == AttentionMode::right_branching;
  for (int idx : {attn_.score_query_weight, attn_.score_span_weight, attn_.score_hidden_bias, attn_.score_out_weight})
    param(idx).frozen = freeze;
}

template <typename T>
ad::Parameter<T>* LanguageModel<T>::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
std::size_t LanguageModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <typename T>
void LanguageModel<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void LanguageModel<T>::round_to_float32() {
  for (auto& p : params_) p.value = p.value.template cast<float>().template cast<T>();
}

template <typename T>
rrnn::RrnnParams<T> LanguageModel<T>::rrnn_params(const RrnnIndices& idx) const {
  rrnn::RrnnParams<T> p;
  p.forget_weight = param(idx.forget_weight).value;
  p.update_weight = param(idx.update_weight).value;
  p.forget_bias = param(idx.forget_bias).value.col(0);
  p.update_bias = param(idx.update_bias).value.col(0);
  return p;
}

template <typename T>
attention::AttentionParams<T> LanguageModel<T>::attention_params() const {
  attention::AttentionParams<T> p;
  p.score_query_weight = param(attn_.score_query_weight).value;
  p.score_span_weight = param(attn_.score_span_weight).value;
  p.score_hidden_bias = param(attn_.score_hidden_bias).value.col(0);
  p.score_out_weight = param(attn_.score_out_weight).value.col(0);
  p.gate_mode = config_.gate_mode;
  if (p.gate_mode == attention::GateMode::fixed) {
    p.gate_logit = param(attn_.gate_logit).value.col(0);
  } else {
    p.gate_weight = param(attn_.gate_weight).value;
    p.gate_bias = param(attn_.gate_bias).value.col(0);
  }
  p.merge_weight = param(attn_.merge_weight).value;
  p.merge_bias = param(attn_.merge_bias).value.col(0);
  return p;
}

template <typename T>
CarriedState<T> CarriedState<T>::fresh(const LanguageModel<T>& model, int batch) {
  CarriedState s;
  s.batch = batch;
  for (const auto& layer : model.layers) {
    s.hidden.push_back(Matrix<T>::Zero(layer.width, batch));
    s.cell.push_back(Matrix<T>::Zero(layer.width, batch));
  }
  s.tail_cells.push_back(Matrix<T>::Zero(model.config().rrnn_dim, batch));
  s.tail_log_forgets.push_back(Matrix<T>::Zero(model.config().rrnn_dim, batch));
  return s;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

template <typename T>
ad::Var dropout(ad::Graph<T>& g, ad::Var x, double rate, const ForwardOptions& opt) {
  if (!opt.training || rate <= 0) return x;
  if (opt.dropout_rng == nullptr) throw std::invalid_argument("forward: training needs a dropout stream");
  const auto& v = g.value(x);
  Matrix<T> mask(v.rows(), v.cols());
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = T(1.0 / (1.0 - rate));
  for (Eigen::Index c = 0; c < mask.cols(); ++c)
    for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, c) = keep(*opt.dropout_rng) ? scale : T(0);
  return g.cmul(x, g.constant(std::move(mask)));
}

template <typename T>
std::pair<ad::Var, ad::Var> lstm_step(ad::Graph<T>& g, ad::Var w_in, ad::Var w_hid, ad::Var bias, int width,
                                      ad::Var x, ad::Var h, ad::Var c) {
  ad::Var pre = g.add_bias(g.add(g.matmul(w_in, x), g.matmul(w_hid, h)), bias);
  ad::Var i = g.sigmoid(g.slice_rows(pre, 0, width));
  ad::Var f = g.sigmoid(g.slice_rows(pre, width, width));
  ad::Var cand = g.tanh(g.slice_rows(pre, 2 * width, width));
  ad::Var o = g.sigmoid(g.slice_rows(pre, 3 * width, width));
  ad::Var c_new = g.add(g.cmul(f, c), g.cmul(i, cand));
  ad::Var h_new = g.cmul(o, g.tanh(c_new));
  return {h_new, c_new};
}

}  // namespace

template <typename T>
ForwardPass<T> build_forward(ad::Graph<T>& g, LanguageModel<T>& model, const Window& window,
                             const CarriedState<T>& state_in, const ForwardOptions& opt) {
  const ModelConfig& cfg = model.config();
  const int B = window.batch;
  const int T_len = window.length;
  if (B < 1 || T_len < 1) throw std::invalid_argument("forward: empty window");
  for (int id : window.inputs)
    if (id < 0 || id >= cfg.vocab_size) throw std::out_of_range("forward: token id outside vocabulary");
  if (!state_in.empty() && !window.starts_lanes && state_in.batch != B)
    throw std::invalid_argument("forward: carried state batch differs from window batch");
  const CarriedState<T> state =
      (state_in.empty() || window.starts_lanes) ? CarriedState<T>::fresh(model, B) : state_in;
  if (static_cast<int>(state.hidden.size()) != cfg.num_layers)
    throw std::invalid_argument("forward: carried state does not match model depth");

  const int span_limit = opt.span_limit > 0 ? opt.span_limit : cfg.max_span;
  const int dr = cfg.rrnn_dim;
  const int L = cfg.num_layers;
  const int A = cfg.attention_layer;

  // Bind parameters once.
  auto P = [&](int idx) { return g.param(model.param(idx)); };
  std::vector<std::array<ad::Var, 3>> lstm;
  for (const auto& layer : model.layers) lstm.push_back({P(layer.input_weight), P(layer.hidden_weight), P(layer.bias)});
  rrnn::CellVars fwd{P(model.fwd_.forget_weight), P(model.fwd_.update_weight), P(model.fwd_.forget_bias),
                     P(model.fwd_.update_bias)};
  rrnn::CellVars bwd{P(model.bwd_.forget_weight), P(model.bwd_.update_weight), P(model.bwd_.forget_bias),
                     P(model.bwd_.update_bias)};
  attention::AttentionVars av;
  av.gate_mode = cfg.gate_mode;
  const bool learned = cfg.attention_mode == AttentionMode::learned;
  if (learned) {
    av.score_query_weight = P(model.attn_.score_query_weight);
    av.score_span_weight = P(model.attn_.score_span_weight);
    av.score_hidden_bias = P(model.attn_.score_hidden_bias);
    av.score_out_weight = P(model.attn_.score_out_weight);
  }
  if (cfg.gate_mode == attention::GateMode::fixed) {
    av.gate_logit = P(model.attn_.gate_logit);
  } else {
    av.gate_weight = P(model.attn_.gate_weight);
    av.gate_bias = P(model.attn_.gate_bias);
  }
  av.merge_weight = P(model.attn_.merge_weight);
  av.merge_bias = P(model.attn_.merge_bias);
  const ad::Var out_weight = model.output_weight >= 0 ? P(model.output_weight) : P(model.embedding);
  const ad::Var out_bias = P(model.output_bias);

  // Combined attention-layer history: tail positions (constants) then window positions.
  const int H0 = state.tail_length();
  std::vector<ad::Var> hist_hidden(1);  // index 0 unused
  std::vector<rrnn::GateVars<T>> back_gates(1);
  rrnn::ForwardChain<T> chain;
  const Matrix<T> base = state.tail_log_forgets.front();
  chain.cells.push_back(g.constant(state.tail_cells.front()));
  chain.log_forgets.push_back(g.constant(Matrix<T>::Zero(dr, B)));
  for (int q = 1; q <= H0; ++q) {
    ad::Var h = g.constant(state.tail_hidden[static_cast<std::size_t>(q - 1)]);
    hist_hidden.push_back(h);
    back_gates.push_back(rrnn::graph_gates(g, bwd, h));
    chain.cells.push_back(g.constant(state.tail_cells[static_cast<std::size_t>(q)]));
    chain.log_forgets.push_back(g.constant(state.tail_log_forgets[static_cast<std::size_t>(q)] - base));
  }

  std::vector<ad::Var> h_state, c_state;
  for (int l = 0; l < L; ++l) {
    h_state.push_back(g.constant(state.hidden[static_cast<std::size_t>(l)]));
    c_state.push_back(g.constant(state.cell[static_cast<std::size_t>(l)]));
  }

  ForwardPass<T> pass;
  pass.logits.reserve(static_cast<std::size_t>(T_len));
  std::vector<int> ids(static_cast<std::size_t>(B));
  for (int t = 0; t < T_len; ++t) {
    for (int b = 0; b < B; ++b) ids[static_cast<std::size_t>(b)] = window.input(t, b);
    ad::Var x = dropout(g, g.lookup(model.param(model.embedding), ids), cfg.dropout_embedding, opt);
    for (int l = 1; l <= L; ++l) {
      const auto& w = lstm[static_cast<std::size_t>(l - 1)];
      auto [h, c] = lstm_step(g, w[0], w[1], w[2], model.layers[static_cast<std::size_t>(l - 1)].width, x,
                              h_state[static_cast<std::size_t>(l - 1)], c_state[static_cast<std::size_t>(l - 1)]);
      h_state[static_cast<std::size_t>(l - 1)] = h;
      c_state[static_cast<std::size_t>(l - 1)] = c;
      ad::Var out = h;
      if (l == A) {
        const int q = H0 + t + 1;
        hist_hidden.push_back(h);
        rrnn::extend_chain(g, chain, rrnn::graph_gates(g, fwd, h));
        back_gates.push_back(rrnn::graph_gates(g, bwd, h));
        const int end = q - 1;
        const int K = std::min(end, span_limit);
        ad::Var context;
        if (K == 0 || cfg.attention_mode == AttentionMode::disabled) {
          context = g.constant(Matrix<T>::Zero(2 * dr, B));
          pass.scores.push_back(ad::Var{});
          pass.span_counts.push_back(cfg.attention_mode == AttentionMode::disabled ? 0 : K);
        } else {
          auto backward_spans = rrnn::graph_backward_spans_ending_at(g, back_gates, end, K);
          std::vector<ad::Var> spans;
          spans.reserve(static_cast<std::size_t>(K));
          for (int k = 0; k < K; ++k)
            spans.push_back(g.concat_rows(
                {rrnn::graph_forward_span(g, chain, end - k, end), backward_spans[static_cast<std::size_t>(k)]}));
          ad::Var scores;
          if (learned) {
            scores = attention::graph_scores(g, av, attention::graph_query_term(g, av, h), spans);
          } else {
            Matrix<T> rb(K, B);
            for (int k = 0; k < K; ++k) rb.row(k).setConstant(T(k + 1));  // 1, ..., K: longest span highest
            scores = g.constant(std::move(rb));
          }
          ad::Var weights = g.softmax_cols(scores);
          context = attention::graph_context(g, weights, spans);
          pass.scores.push_back(scores);
          pass.span_counts.push_back(K);
        }
        out = attention::graph_merge(g, av, h, context);
      }
      x = l < L ? dropout(g, out, cfg.dropout_hidden, opt) : dropout(g, out, cfg.dropout_output, opt);
    }
    pass.logits.push_back(g.add_bias(g.matmul_tn(out_weight, x), out_bias));
  }

  // Carry the last span_limit positions forward.
  CarriedState<T>& next = pass.next;
  next.batch = B;
  for (int l = 0; l < L; ++l) {
    next.hidden.push_back(g.value(h_state[static_cast<std::size_t>(l)]));
    next.cell.push_back(g.value(c_state[static_cast<std::size_t>(l)]));
  }
  const int total = H0 + T_len;
  const int keep = std::min(total, span_limit);
  const int first = total - keep + 1;
  const Matrix<T> rebase = g.value(chain.log_forgets[static_cast<std::size_t>(first - 1)]);
  next.tail_cells.push_back(g.value(chain.cells[static_cast<std::size_t>(first - 1)]));
  next.tail_log_forgets.push_back(Matrix<T>::Zero(dr, B));
  for (int q = first; q <= total; ++q) {
    next.tail_hidden.push_back(g.value(hist_hidden[static_cast<std::size_t>(q)]));
    next.tail_cells.push_back(g.value(chain.cells[static_cast<std::size_t>(q)]));
    next.tail_log_forgets.push_back(g.value(chain.log_forgets[static_cast<std::size_t>(q)]) - rebase);
  }
  return pass;
}

template <typename T>
ForwardResult<T> forward(LanguageModel<T>& model, const Window& window, const CarriedState<T>& state, int span_limit) {
  ad::Graph<T> g(false);
  ForwardOptions opt;
  opt.span_limit = span_limit;
  ForwardPass<T> pass = build_forward(g, model, window, state, opt);
  ForwardResult<T> out;
  for (ad::Var v : pass.logits) out.logits.push_back(g.value(v));
  for (std::size_t t = 0; t < pass.scores.size(); ++t) {
    AttentionStep<T> step;
    if (pass.scores[t].valid()) {
      step.scores = g.value(pass.scores[t]);
      step.weights = ad::Graph<T>::column_softmax(step.scores);
    } else {
      step.scores.resize(0, window.batch);
      step.weights.resize(0, window.batch);
    }
    out.attention.push_back(std::move(step));
  }
  out.next = std::move(pass.next);
  return out;
}

template <typename T>
double lm_loss(const std::vector<Matrix<T>>& logits, const std::vector<int>& targets) {
  double total = 0;
  std::size_t count = 0;
  std::size_t cell = 0;
  for (const auto& z : logits) {
    for (Eigen::Index b = 0; b < z.cols(); ++b, ++cell) {
      if (cell >= targets.size()) throw std::invalid_argument("lm_loss: fewer targets than predictions");
      const int y = targets[cell];
      const double mx = static_cast<double>(z.col(b).maxCoeff());
      double s = 0;
      for (Eigen::Index r = 0; r < z.rows(); ++r) s += std::exp(static_cast<double>(z(r, b)) - mx);
      total += mx + std::log(s) - static_cast<double>(z(y, b));
      ++count;
    }
  }
  if (cell != targets.size()) throw std::invalid_argument("lm_loss: more targets than predictions");
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

LossBreakdown joint_loss(double lm_nll, const std::vector<TokenAttention>& tokens, double lambda) {
  LossBreakdown out;
  out.lm_nll = lm_nll;
  double ce = 0;
  for (const auto& tok : tokens) {
    if (tok.target.empty()) continue;
    double mass = 0;
    for (double y : tok.target) mass += y;
    if (mass == 0) continue;
    ++out.supervised_tokens;
    for (std::size_t i = 0; i < tok.target.size(); ++i) {
      const double y = tok.target[i];
      if (y == 0) continue;
      if (i >= tok.weights.size()) {
        out.shortfall_mass += y;
        continue;
      }
      ce -= y * std::log(tok.weights[i]);
    }
  }
  out.attn_ce = out.supervised_tokens == 0 ? 0.0 : ce / out.supervised_tokens;
  out.total = lambda == 0 ? lm_nll : lm_nll + lambda * out.attn_ce;
  return out;
}

template <typename T>
WindowTargets<T> window_targets(const Window& window, const std::vector<int>& span_counts,
                                const OracleSpanTargets& oracle) {
  WindowTargets<T> out;
  for (int t = 0; t < window.length; ++t) {
    const int K = span_counts[static_cast<std::size_t>(t)];
    Matrix<T> y = Matrix<T>::Zero(K, window.batch);
    if (K > 0) {
      for (int b = 0; b < window.batch; ++b) {
        const std::size_t prev = window.position(t, b) - 1;
        if (prev >= oracle.targets.size()) throw std::out_of_range("window_targets: oracle shorter than stream");
        if (oracle.masked[prev]) continue;
        const auto& row = oracle.targets[prev];
        for (std::size_t i = 0; i < row.size(); ++i) {
          if (row[i] == 0) continue;
          if (static_cast<int>(i) < K)
            y(static_cast<Eigen::Index>(i), b) = T(row[i]);
          else
            out.shortfall += row[i];
        }
        ++out.supervised;
      }
    }
    out.targets.push_back(std::move(y));
  }
  return out;
}

#define PALM_INSTANTIATE(T)                                                                                  \
  template class LanguageModel<T>;                                                                           \
  template struct CarriedState<T>;                                                                           \
  template ForwardPass<T> build_forward<T>(ad::Graph<T>&, LanguageModel<T>&, const Window&,                  \
                                           const CarriedState<T>&, const ForwardOptions&);                   \
  template ForwardResult<T> forward<T>(LanguageModel<T>&, const Window&, const CarriedState<T>&, int);       \
  template double lm_loss<T>(const std::vector<Matrix<T>>&, const std::vector<int>&);                        \
  template WindowTargets<T> window_targets<T>(const Window&, const std::vector<int>&, const OracleSpanTargets&);

PALM_INSTANTIATE(float)
PALM_INSTANTIATE(double)

}  // namespace palm

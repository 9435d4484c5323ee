#pragma once

// Attention over the spans ending at the previous position, and the gated
// residual merge of the resulting context vector into the hidden state.
//
//   s_k   = w_o . tanh(W_q h + W_s g_k + b_s)
//   w     = softmax(s)
//   a     = sum_k w_k g_k
//   h_out = r * tanh(W_m [h; a] + b_m) + (1 - r) * h

#include "palm/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace palm::attention {

using ad::Matrix;
using ad::Vector;

enum class GateMode {
  fixed,        ///< r = sigmoid(learned vector), independent of the input
  conditioned,  ///< r = sigmoid(W_r [h; a] + b_r)
};

template <typename T>
struct AttentionParams {
  Matrix<T> score_query_weight;  // [s x d_h]
  Matrix<T> score_span_weight;   // [s x 2 d_r]
  Vector<T> score_hidden_bias;   // [s]
  Vector<T> score_out_weight;    // [s]

  GateMode gate_mode = GateMode::fixed;
  Vector<T> gate_logit;   // [d_h], fixed mode
  Matrix<T> gate_weight;  // [d_h x (d_h + 2 d_r)], conditioned mode
  Vector<T> gate_bias;    // [d_h], conditioned mode

  Matrix<T> merge_weight;  // [d_h x (d_h + 2 d_r)]
  Vector<T> merge_bias;    // [d_h]

  int hidden_width() const { return static_cast<int>(score_query_weight.cols()); }
  int span_width() const { return static_cast<int>(score_span_weight.cols()); }
};

template <typename T>
std::vector<T> score_spans(const AttentionParams<T>& p, const Vector<T>& query, const std::vector<Vector<T>>& spans) {
  if (spans.empty()) throw std::invalid_argument("score_spans: no spans");
  if (query.size() != p.hidden_width()) throw std::invalid_argument("score_spans: query width mismatch");
  const Vector<T> base = p.score_query_weight * query + p.score_hidden_bias;
  std::vector<T> out;
  out.reserve(spans.size());
  for (const auto& g : spans) {
    if (g.size() != p.span_width()) throw std::invalid_argument("score_spans: span width mismatch");
    const Vector<T> hidden = (base + p.score_span_weight * g).array().tanh().matrix();
    out.push_back(p.score_out_weight.dot(hidden));
  }
  return out;
}

template <typename T>
std::vector<T> attention_weights(const std::vector<T>& scores) {
  if (scores.empty()) throw std::invalid_argument("attention_weights: no scores");
  T mx = scores[0];
  for (T s : scores) mx = std::max(mx, s);
  std::vector<T> w(scores.size());
  T z = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) z += (w[k] = std::exp(scores[k] - mx));
  for (auto& v : w) v /= z;
  return w;
}

template <typename T>
Vector<T> context_vector(const std::vector<T>& weights, const std::vector<Vector<T>>& spans) {
  if (weights.size() != spans.size() || spans.empty())
    throw std::invalid_argument("context_vector: weights and spans differ in length");
  Vector<T> a = Vector<T>::Zero(spans[0].size());
  for (std::size_t k = 0; k < spans.size(); ++k) {
    if (spans[k].size() != a.size()) throw std::invalid_argument("context_vector: span width mismatch");
    a += weights[k] * spans[k];
  }
  return a;
}

/// r * mlp + (1 - r) * h for an explicit gate r.
template <typename T>
Vector<T> gated_residual(const Vector<T>& gate, const Vector<T>& mlp, const Vector<T>& h) {
  return (gate.array() * mlp.array() + (T(1) - gate.array()) * h.array()).matrix();
}

template <typename T>
Vector<T> merge_gate(const AttentionParams<T>& p, const Vector<T>& concat) {
  Vector<T> pre = p.gate_mode == GateMode::fixed ? p.gate_logit : Vector<T>(p.gate_weight * concat + p.gate_bias);
  return (T(1) / (T(1) + (-pre.array()).exp())).matrix();
}

template <typename T>
Vector<T> merge(const AttentionParams<T>& p, const Vector<T>& h, const Vector<T>& a) {
  if (h.size() != p.hidden_width() || a.size() != p.span_width())
    throw std::invalid_argument("merge: width mismatch");
  Vector<T> concat(h.size() + a.size());
  concat << h, a;
  const Vector<T> mlp = (p.merge_weight * concat + p.merge_bias).array().tanh().matrix();
  return gated_residual<T>(merge_gate(p, concat), mlp, h);
}

// ---------------------------------------------------------------------------
// Graph versions; matrices carry the batch along columns.

struct AttentionVars {
  ad::Var score_query_weight, score_span_weight, score_hidden_bias, score_out_weight;
  GateMode gate_mode = GateMode::fixed;
  ad::Var gate_logit, gate_weight, gate_bias;
  ad::Var merge_weight, merge_bias;
};

/// Scores [K x B] for spans g_k ([2 d_r x B] each) under queries [d_h x B].
/// `query_term` is W_q h + b_s, shared by every span of the step.
template <typename T>
ad::Var graph_scores(ad::Graph<T>& g, const AttentionVars& p, ad::Var query_term, const std::vector<ad::Var>& spans) {
  std::vector<ad::Var> rows;
  rows.reserve(spans.size());
  for (ad::Var s : spans) {
    ad::Var hidden = g.tanh(g.add(query_term, g.matmul(p.score_span_weight, s)));
    rows.push_back(g.matmul_tn(p.score_out_weight, hidden));
  }
  return g.concat_rows(rows);
}

template <typename T>
ad::Var graph_query_term(ad::Graph<T>& g, const AttentionVars& p, ad::Var query) {
  return g.affine(p.score_query_weight, query, p.score_hidden_bias);
}

/// sum_k weights[k, :] * spans[k]
template <typename T>
ad::Var graph_context(ad::Graph<T>& g, ad::Var weights, const std::vector<ad::Var>& spans) {
  std::vector<ad::Var> terms;
  terms.reserve(spans.size());
  for (std::size_t k = 0; k < spans.size(); ++k)
    terms.push_back(g.mul_row_bcast(spans[k], g.slice_rows(weights, static_cast<int>(k), 1)));
  return g.add_n(terms);
}

template <typename T>
ad::Var graph_merge(ad::Graph<T>& g, const AttentionVars& p, ad::Var h, ad::Var a) {
  ad::Var concat = g.concat_rows({h, a});
  ad::Var mlp = g.tanh(g.affine(p.merge_weight, concat, p.merge_bias));
  ad::Var delta = g.sub(mlp, h);
  if (p.gate_mode == GateMode::fixed) return g.add(h, g.mul_col_bcast(delta, g.sigmoid(p.gate_logit)));
  ad::Var gate = g.sigmoid(g.affine(p.gate_weight, concat, p.gate_bias));
  return g.add(h, g.cmul(gate, delta));
}

}  // namespace palm::attention

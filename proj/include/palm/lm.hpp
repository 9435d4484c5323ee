#pragma once

// Recurrent language model with span attention inserted between two LSTM
// layers. The prediction made at position t consumes x_t and attends over the
// spans [t-1-k, t-1], k < min(t-1, m), built from the insertion layer's hidden
// states by a bidirectional rational RNN; the query is that layer's h_t.

#include "palm/autodiff.hpp"
#include "palm/corpus.hpp"
#include "palm/rrnn.hpp"
#include "palm/span_attention.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace palm {

using ad::Matrix;
using ad::Vector;

enum class AttentionMode {
  learned,          ///< scorer MLP (unsupervised or supervised)
  right_branching,  ///< scores forced to 1, ..., K over spans of length 1..K (frozen scorer)
  disabled,         ///< context vector zeroed (ablation)
};

struct ModelConfig {
  int vocab_size = 0;
  int embedding_dim = 64;
  int hidden_dim = 128;
  int num_layers = 3;
  int rrnn_dim = 32;
  int max_span = 10;
  int scorer_dim = 0;       ///< 0 uses hidden_dim
  int attention_layer = 2;  ///< attention follows this (1-based) layer and feeds the next
  double lambda = 0.0;
  double dropout_embedding = 0.1;
  double dropout_hidden = 0.1;
  double dropout_output = 0.1;
  bool tie_weights = true;
  attention::GateMode gate_mode = attention::GateMode::fixed;
  AttentionMode attention_mode = AttentionMode::learned;

  void validate() const;
  int layer_input_width(int layer) const;
  int layer_output_width(int layer) const;
  int attention_width() const { return layer_output_width(attention_layer); }
  int effective_scorer_dim() const { return scorer_dim > 0 ? scorer_dim : hidden_dim; }
  bool operator==(const ModelConfig&) const = default;
};

/// Named deterministic sub-stream of a run seed.
std::mt19937_64 seeded_stream(std::uint64_t seed, const std::string& name);

template <typename T>
class LanguageModel {
 public:
  struct LstmLayer {
    int input_weight, hidden_weight, bias;  // indices into params()
    int width;
  };

  LanguageModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  /// Switches the attention mode; right-branching freezes the scorer.
  void set_attention_mode(AttentionMode mode);

  std::vector<ad::Parameter<T>>& params() { return params_; }
  const std::vector<ad::Parameter<T>>& params() const { return params_; }
  ad::Parameter<T>& param(int index) { return params_[static_cast<std::size_t>(index)]; }
  const ad::Parameter<T>& param(int index) const { return params_[static_cast<std::size_t>(index)]; }
  ad::Parameter<T>* find(const std::string& name);
  std::size_t parameter_count() const;

  void zero_grad();
  /// Rounds every parameter to the nearest float32 (checkpoint storage precision).
  void round_to_float32();

  rrnn::RrnnParams<T> forward_rrnn() const { return rrnn_params(fwd_); }
  rrnn::RrnnParams<T> backward_rrnn() const { return rrnn_params(bwd_); }
  attention::AttentionParams<T> attention_params() const;

  // Parameter indices, exposed for the forward pass.
  int embedding = -1;
  int output_weight = -1;  ///< -1 when tied to the embedding
  int output_bias = -1;
  std::vector<LstmLayer> layers;
  struct RrnnIndices {
    int forget_weight, update_weight, forget_bias, update_bias;
  } fwd_{}, bwd_{};
  struct AttentionIndices {
    int score_query_weight, score_span_weight, score_hidden_bias, score_out_weight;
    int gate_logit = -1, gate_weight = -1, gate_bias = -1;
    int merge_weight, merge_bias;
  } attn_{};

 private:
  int add_param(const std::string& name, int rows, int cols, std::mt19937_64& rng, double range);
  rrnn::RrnnParams<T> rrnn_params(const RrnnIndices& idx) const;

  ModelConfig config_;
  std::vector<ad::Parameter<T>> params_;
};

/// Recurrent state carried across consecutive windows of the same lanes.
template <typename T>
struct CarriedState {
  int batch = 0;
  std::vector<Matrix<T>> hidden;
  std::vector<Matrix<T>> cell;
  /// Insertion-layer hidden states of the most recent positions, oldest first.
  std::vector<Matrix<T>> tail_hidden;
  /// Forward RRNN cells / log-forget prefixes; one more entry than tail_hidden
  /// (entry 0 is the boundary before the oldest tail position).
  std::vector<Matrix<T>> tail_cells;
  std::vector<Matrix<T>> tail_log_forgets;

  bool empty() const { return batch == 0; }
  int tail_length() const { return static_cast<int>(tail_hidden.size()); }
  static CarriedState fresh(const LanguageModel<T>& model, int batch);
};

/// Attention values of one window position: [K x B] scores and weights.
template <typename T>
struct AttentionStep {
  Matrix<T> scores;
  Matrix<T> weights;
  int span_count() const { return static_cast<int>(scores.rows()); }
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* dropout_rng = nullptr;
  /// Overrides the model's max span (parse-time scoring); 0 keeps it.
  int span_limit = 0;
};

/// Graph handles produced by one window's forward pass.
template <typename T>
struct ForwardPass {
  std::vector<ad::Var> logits;  ///< per position, [V x B]
  std::vector<ad::Var> scores;  ///< per position, [K x B]; invalid when K = 0
  std::vector<int> span_counts;
  CarriedState<T> next;
};

/// Builds the forward graph of one window. An empty (or mismatched on a lane
/// start) state is replaced by a fresh one.
template <typename T>
ForwardPass<T> build_forward(ad::Graph<T>& g, LanguageModel<T>& model, const Window& window,
                             const CarriedState<T>& state, const ForwardOptions& options);

template <typename T>
struct ForwardResult {
  std::vector<Matrix<T>> logits;  ///< per position, [V x B]
  std::vector<AttentionStep<T>> attention;
  CarriedState<T> next;
};

/// Evaluation-mode forward pass returning values.
template <typename T>
ForwardResult<T> forward(LanguageModel<T>& model, const Window& window, const CarriedState<T>& state,
                         int span_limit = 0);

/// Mean token negative log-likelihood of logits (per position [V x B]) against targets.
template <typename T>
double lm_loss(const std::vector<Matrix<T>>& logits, const std::vector<int>& targets);

struct LossBreakdown {
  double lm_nll = 0;
  double attn_ce = 0;
  double total = 0;
  int supervised_tokens = 0;
  double shortfall_mass = 0;  ///< target mass on spans that were not available
};

/// One token's attention: weights over the available spans and its oracle
/// target (empty when masked).
struct TokenAttention {
  std::vector<double> weights;
  std::vector<double> target;
};

/// attn_ce = mean over unmasked tokens of -sum_i y_i ln w_i; total = lm_nll + lambda * attn_ce.
LossBreakdown joint_loss(double lm_nll, const std::vector<TokenAttention>& tokens, double lambda);

/// Oracle rows for the attention at each window position: column b of entry t
/// is y for the token preceding (t, b), zero when masked or unavailable.
template <typename T>
struct WindowTargets {
  std::vector<Matrix<T>> targets;
  int supervised = 0;
  double shortfall = 0;
};

template <typename T>
WindowTargets<T> window_targets(const Window& window, const std::vector<int>& span_counts,
                                const OracleSpanTargets& oracle);

}  // namespace palm

#pragma once

#include "palm/corpus.hpp"
#include "palm/lm.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace palm {

struct OptimizerConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 0.25;
  /// Averaged SGD after this many epochs (0 = never).
  int asgd_switch_epoch = 0;
  /// Switch to averaged SGD after this many non-improving validation epochs (0 = off).
  int asgd_nonmono = 0;
  double asgd_learning_rate = 1.0;
  bool operator==(const OptimizerConfig&) const = default;
};

/// Loss of one window: mean token NLL plus lambda * mean span-attention CE
/// (the CE term is computed whenever an oracle is given, added only if lambda > 0).
struct WindowObjective {
  ad::Var total;
  double lm_nll = 0;
  double attn_ce = 0;
  int tokens = 0;
  int supervised = 0;
  double shortfall = 0;
};

template <typename T>
WindowObjective build_objective(ad::Graph<T>& g, const ForwardPass<T>& pass, const Window& window,
                                const OracleSpanTargets* oracle, double lambda);

struct EpochStats {
  int epoch = 0;
  double lm_nll = 0;
  double attn_ce = 0;
  double total = 0;
  double ppl = 0;
  long tokens = 0;
  long supervised_tokens = 0;
  double shortfall_mass = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Serializable optimizer state (flat tensors keyed by "<slot>/<param name>").
template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  bool averaging = false;
  std::uint64_t averaged_steps = 0;
  std::map<std::string, Matrix<T>> tensors;
};

template <typename T>
class Trainer {
 public:
  Trainer(LanguageModel<T>& model, OptimizerConfig config, std::uint64_t seed);

  /// One pass over the windows in order; carried state is detached between windows.
  EpochStats train_epoch(const std::vector<Window>& windows, const OracleSpanTargets* oracle);

  /// Applies accumulated gradients (clipping by global norm first). Returns the pre-clip norm.
  double apply_gradients();

  /// Validation hook for the non-monotone switch; call once per epoch.
  void observe_validation(double nll);
  void switch_to_averaging();
  bool averaging() const { return state_.averaging; }

  /// Swaps in the running average (no-op unless averaging). Call again to swap back.
  void swap_averaged();

  int epoch() const { return epoch_; }
  void set_epoch(int e) { epoch_ = e; }
  const OptimizerState<T>& state() const { return state_; }
  void load_state(OptimizerState<T> state);
  const OptimizerConfig& config() const { return config_; }

 private:
  LanguageModel<T>& model_;
  OptimizerConfig config_;
  std::mt19937_64 dropout_rng_;
  OptimizerState<T> state_;
  int epoch_ = 0;
  std::vector<double> validation_history_;
};

struct EvalStats {
  double nll = 0;
  double ppl = 0;
  double attn_ce = 0;
  long tokens = 0;
  long supervised_tokens = 0;
  /// Fraction of supervised tokens whose attention argmax falls on a gold span.
  double argmax_agreement = 0;
};

/// Dropout-free pass over the windows with carried state; oracle optional.
template <typename T>
EvalStats evaluate(LanguageModel<T>& model, const std::vector<Window>& windows, const OracleSpanTargets* oracle);

template <typename T>
double evaluate_ppl(LanguageModel<T>& model, const std::vector<Window>& windows) {
  return evaluate(model, windows, nullptr).ppl;
}

}  // namespace palm

#include "palm/trainer.hpp"

#include <cmath>
#include <sstream>

namespace palm {

template <typename T>
Trainer<T>::Trainer(LanguageModel<T>& model, OptimizerConfig config, std::uint64_t seed)
    : model_(model), config_(config), dropout_rng_(seeded_stream(seed, "dropout")) {}

template <typename T>
WindowObjective build_objective(ad::Graph<T>& g, const ForwardPass<T>& pass, const Window& window,
                                const OracleSpanTargets* oracle, double lambda) {
  WindowObjective obj;
  std::vector<ad::Var> token_losses;
  for (int t = 0; t < window.length; ++t) {
    std::span<const int> targets(window.targets.data() + static_cast<std::size_t>(t * window.batch),
                                 static_cast<std::size_t>(window.batch));
    token_losses.push_back(g.softmax_xent(pass.logits[static_cast<std::size_t>(t)], targets));
  }
  obj.tokens = window.length * window.batch;
  ad::Var lm = g.scale(g.add_n(token_losses), T(1.0 / obj.tokens));
  obj.lm_nll = static_cast<double>(g.scalar(lm));
  obj.total = lm;
  if (oracle == nullptr) return obj;

  WindowTargets<T> wt = window_targets<T>(window, pass.span_counts, *oracle);
  std::vector<ad::Var> ce_terms;
  for (int t = 0; t < window.length; ++t) {
    const ad::Var scores = pass.scores[static_cast<std::size_t>(t)];
    if (!scores.valid()) continue;
    ce_terms.push_back(g.soft_xent(scores, wt.targets[static_cast<std::size_t>(t)]));
  }
  obj.supervised = wt.supervised;
  obj.shortfall = wt.shortfall;
  if (obj.supervised > 0 && !ce_terms.empty()) {
    ad::Var ce = g.scale(g.add_n(ce_terms), T(1.0 / obj.supervised));
    obj.attn_ce = static_cast<double>(g.scalar(ce));
    if (lambda > 0) obj.total = g.add(obj.total, g.scale(ce, T(lambda)));
  }
  return obj;
}

template <typename T>
EpochStats Trainer<T>::train_epoch(const std::vector<Window>& windows, const OracleSpanTargets* oracle) {
  ++epoch_;
  if (config_.asgd_switch_epoch > 0 && epoch_ > config_.asgd_switch_epoch && !state_.averaging)
    switch_to_averaging();

  const double lambda = model_.config().lambda;
  EpochStats stats;
  stats.epoch = epoch_;
  double nll_sum = 0;
  double ce_sum = 0;
  CarriedState<T> carried;
  ForwardOptions opt;
  opt.training = true;
  opt.dropout_rng = &dropout_rng_;

  for (std::size_t w = 0; w < windows.size(); ++w) {
    const Window& window = windows[w];
    ad::Graph<T> g(true);
    model_.zero_grad();
    ForwardPass<T> pass = build_forward(g, model_, window, carried, opt);

    WindowObjective obj = build_objective(g, pass, window, oracle, lambda);
    const int count = obj.tokens;
    const int supervised = obj.supervised;
    const double window_nll = obj.lm_nll;
    const double window_ce = obj.attn_ce;
    const ad::Var total = obj.total;
    stats.shortfall_mass += obj.shortfall;

    const double window_total = static_cast<double>(g.scalar(total));
    if (!std::isfinite(window_total)) {
      std::ostringstream msg;
      msg << "non-finite loss at epoch " << epoch_ << ", window " << w << " (lm_nll=" << window_nll
          << ", attn_ce=" << window_ce << ")";
      throw TrainingError(msg.str());
    }
    g.backward(total);
    apply_gradients();

    nll_sum += window_nll * count;
    ce_sum += window_ce * supervised;
    stats.tokens += count;
    stats.supervised_tokens += supervised;
    carried = std::move(pass.next);
  }
  stats.lm_nll = stats.tokens ? nll_sum / static_cast<double>(stats.tokens) : 0.0;
  stats.attn_ce = stats.supervised_tokens ? ce_sum / static_cast<double>(stats.supervised_tokens) : 0.0;
  stats.total = stats.lm_nll + lambda * stats.attn_ce;
  stats.ppl = std::exp(stats.lm_nll);
  return stats;
}

template <typename T>
double Trainer<T>::apply_gradients() {
  auto& params = model_.params();
  double sq = 0;
  for (const auto& p : params)
    if (!p.frozen) sq += static_cast<double>(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm");
  const T clip = (config_.clip_norm > 0 && norm > config_.clip_norm) ? T(config_.clip_norm / norm) : T(1);

  ++state_.step;
  if (!state_.averaging) {
    const T lr = T(config_.learning_rate);
    const T b1 = T(config_.beta1);
    const T b2 = T(config_.beta2);
    const T eps = T(config_.epsilon);
    const T wd = T(config_.weight_decay);
    const T c1 = T(1) - T(std::pow(config_.beta1, static_cast<double>(state_.step)));
    const T c2 = T(1) - T(std::pow(config_.beta2, static_cast<double>(state_.step)));
    for (auto& p : params) {
      if (p.frozen) continue;
      Matrix<T> grad = p.grad * clip;
      if (wd != T(0)) grad += wd * p.value;
      Matrix<T>& m = state_.tensors["adam.m/" + p.name];
      Matrix<T>& v = state_.tensors["adam.v/" + p.name];
      if (m.size() == 0) m = Matrix<T>::Zero(p.value.rows(), p.value.cols());
      if (v.size() == 0) v = Matrix<T>::Zero(p.value.rows(), p.value.cols());
      m = b1 * m + (T(1) - b1) * grad;
      v = b2 * v + (T(1) - b2) * grad.cwiseProduct(grad);
      p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
  } else {
    const T lr = T(config_.asgd_learning_rate);
    const T wd = T(config_.weight_decay);
    ++state_.averaged_steps;
    const T mix = T(1.0 / static_cast<double>(state_.averaged_steps));
    for (auto& p : params) {
      if (p.frozen) continue;
      Matrix<T> grad = p.grad * clip;
      if (wd != T(0)) grad += wd * p.value;
      p.value -= lr * grad;
      Matrix<T>& avg = state_.tensors["asgd.avg/" + p.name];
      if (avg.size() == 0) avg = p.value;
      avg += mix * (p.value - avg);
    }
  }
  return norm;
}

template <typename T>
void Trainer<T>::observe_validation(double nll) {
  validation_history_.push_back(nll);
  if (config_.asgd_nonmono <= 0 || state_.averaging) return;
  const auto n = static_cast<int>(validation_history_.size());
  if (n <= config_.asgd_nonmono) return;
  double best_before = validation_history_[0];
  for (int i = 1; i < n - config_.asgd_nonmono; ++i) best_before = std::min(best_before, validation_history_[static_cast<std::size_t>(i)]);
  bool improved = false;
  for (int i = n - config_.asgd_nonmono; i < n; ++i)
    improved = improved || validation_history_[static_cast<std::size_t>(i)] < best_before;
  if (!improved) switch_to_averaging();
}

template <typename T>
void Trainer<T>::switch_to_averaging() {
  state_.averaging = true;
  state_.averaged_steps = 0;
  for (auto it = state_.tensors.begin(); it != state_.tensors.end();)
    it = it->first.rfind("asgd.avg/", 0) == 0 ? state_.tensors.erase(it) : std::next(it);
}

template <typename T>
void Trainer<T>::swap_averaged() {
  if (!state_.averaging) return;
  for (auto& p : model_.params()) {
    auto it = state_.tensors.find("asgd.avg/" + p.name);
    if (it != state_.tensors.end()) p.value.swap(it->second);
  }
}

template <typename T>
void Trainer<T>::load_state(OptimizerState<T> state) {
  state_ = std::move(state);
}

template <typename T>
EvalStats evaluate(LanguageModel<T>& model, const std::vector<Window>& windows, const OracleSpanTargets* oracle) {
  EvalStats out;
  double nll_sum = 0;
  double ce_sum = 0;
  long agree = 0;
  CarriedState<T> carried;
  for (const Window& window : windows) {
    ForwardResult<T> res = forward(model, window, carried);
    const double nll = lm_loss<T>(res.logits, window.targets);
    const long count = static_cast<long>(window.length) * window.batch;
    nll_sum += nll * static_cast<double>(count);
    out.tokens += count;
    if (oracle != nullptr) {
      std::vector<int> counts;
      for (const auto& step : res.attention) counts.push_back(step.span_count());
      WindowTargets<T> wt = window_targets<T>(window, counts, *oracle);
      for (int t = 0; t < window.length; ++t) {
        const auto& step = res.attention[static_cast<std::size_t>(t)];
        const auto& y = wt.targets[static_cast<std::size_t>(t)];
        for (int b = 0; b < window.batch; ++b) {
          if (step.span_count() == 0) continue;
          const std::size_t prev = window.position(t, b) - 1;
          if (oracle->masked[prev]) continue;
          Eigen::Index best = 0;
          step.weights.col(b).maxCoeff(&best);
          if (y(best, b) > T(0)) ++agree;
          double ce = 0;
          for (Eigen::Index k = 0; k < y.rows(); ++k)
            if (y(k, b) > T(0)) ce -= static_cast<double>(y(k, b)) * std::log(static_cast<double>(step.weights(k, b)));
          ce_sum += ce;
          ++out.supervised_tokens;
        }
      }
    }
    carried = std::move(res.next);
  }
  out.nll = out.tokens ? nll_sum / static_cast<double>(out.tokens) : 0.0;
  out.ppl = std::exp(out.nll);
  if (out.supervised_tokens > 0) {
    out.attn_ce = ce_sum / static_cast<double>(out.supervised_tokens);
    out.argmax_agreement = static_cast<double>(agree) / static_cast<double>(out.supervised_tokens);
  }
  return out;
}

template WindowObjective build_objective<float>(ad::Graph<float>&, const ForwardPass<float>&, const Window&,
                                                const OracleSpanTargets*, double);
template WindowObjective build_objective<double>(ad::Graph<double>&, const ForwardPass<double>&, const Window&,
                                                 const OracleSpanTargets*, double);
template class Trainer<float>;
template class Trainer<double>;
template EvalStats evaluate<float>(LanguageModel<float>&, const std::vector<Window>&, const OracleSpanTargets*);
template EvalStats evaluate<double>(LanguageModel<double>&, const std::vector<Window>&, const OracleSpanTargets*);

}  // namespace palm

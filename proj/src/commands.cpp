#include "palm/commands.hpp"

#include "palm/checkpoint.hpp"
#include "palm/selftest.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>
#include <thread>

namespace palm {

using json = nlohmann::json;

TrainMode parse_train_mode(const std::string& s) {
  if (s == "U") return TrainMode::unsupervised;
  if (s == "S") return TrainMode::supervised;
  if (s == "RB") return TrainMode::right_branching;
  throw CommandError("unknown mode '" + s + "' (expected U, S or RB)");
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::unsupervised: return "U";
    case TrainMode::supervised: return "S";
    case TrainMode::right_branching: return "RB";
  }
  return "?";
}

std::string metric_json(const MetricRecord& r, bool with_wall_time) {
  json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["nll"] = r.nll;
  j["ppl"] = r.ppl;
  j["attn_ce"] = r.attn_ce;
  if (with_wall_time) j["wall_time_s"] = r.wall_time_s;
  return j.dump();
}

int worker_count(std::size_t jobs) {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("PALM_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1) n = std::min(n, cap);
    } catch (const std::exception&) {
      throw CommandError(std::string("PALM_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return std::max(1, std::min<int>(n, static_cast<int>(std::max<std::size_t>(jobs, 1))));
}

namespace {

std::vector<std::string> non_blank(const std::vector<std::string>& lines) {
  std::vector<std::string> out;
  for (const auto& l : lines)
    if (!split_tokens(l).empty()) out.push_back(l);
  return out;
}

void check_alignment(const std::vector<std::string>& lines, const std::vector<GoldTree>& trees, const char* what) {
  if (lines.size() != trees.size())
    throw CommandError(std::string(what) + ": " + std::to_string(trees.size()) + " trees for " +
                       std::to_string(lines.size()) + " sentences");
  for (std::size_t k = 0; k < lines.size(); ++k)
    if (split_tokens(lines[k]) != trees[k].words())
      throw CommandError(std::string(what) + ": sentence " + std::to_string(k + 1) +
                         " does not match the words of its tree");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
TrainResult train_impl(const RunConfig& base, TrainMode mode, const TrainData& data, std::ostream* log) {
  RunConfig config = base;
  ModelConfig& mc = config.model;
  switch (mode) {
    case TrainMode::unsupervised:
      mc.lambda = 0.0;
      if (mc.attention_mode == AttentionMode::right_branching)
        throw CommandError("attention_mode=right_branching is selected with --mode RB");
      break;
    case TrainMode::supervised:
      if (data.train_trees.empty()) throw CommandError("mode S needs gold trees for the training text (train_trees)");
      if (mc.attention_mode != AttentionMode::learned) throw CommandError("mode S needs attention_mode=learned");
      if (!(mc.lambda > 0)) throw CommandError("mode S needs lambda > 0");
      break;
    case TrainMode::right_branching:
      mc.lambda = 0.0;
      mc.attention_mode = AttentionMode::right_branching;
      break;
  }
  const auto train_lines = non_blank(data.train_lines);
  const auto valid_lines = non_blank(data.valid_lines);
  if (train_lines.empty()) throw CommandError("training corpus is empty");
  if (valid_lines.empty()) throw CommandError("validation corpus is empty");
  const bool supervised = mode == TrainMode::supervised;
  if (supervised) check_alignment(train_lines, data.train_trees, "train_trees");
  if (!data.valid_trees.empty()) check_alignment(valid_lines, data.valid_trees, "valid_trees");

  TrainResult result;
  result.vocab = build_vocab(train_lines, config.min_count);
  mc.vocab_size = result.vocab.size();
  if (base.model.vocab_size != 0 && base.model.vocab_size != mc.vocab_size)
    throw CommandError("vocab_size=" + std::to_string(base.model.vocab_size) + " but the corpus gives " +
                       std::to_string(mc.vocab_size));
  mc.validate();

  LanguageModel<T> model(mc, config.seed);
  Trainer<T> trainer(model, config.optimizer, config.seed);
  std::mt19937_64 shuffle_rng = seeded_stream(config.seed, "shuffle");

  const auto valid_windows =
      make_windows(encode_stream(valid_lines, result.vocab), config.eval_batch_size, config.bptt);
  std::optional<OracleSpanTargets> valid_oracle;
  if (!data.valid_trees.empty()) valid_oracle = stream_oracle_targets(data.valid_trees, mc.max_span);
  const OracleSpanTargets* valid_oracle_ptr = valid_oracle ? &*valid_oracle : nullptr;

  std::vector<std::size_t> order(train_lines.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Window> train_windows;
  OracleSpanTargets train_oracle;
  auto prepare_epoch = [&] {
    std::vector<std::string> lines;
    std::vector<GoldTree> trees;
    for (std::size_t k : order) {
      lines.push_back(train_lines[k]);
      if (supervised) trees.push_back(data.train_trees[k]);
    }
    train_windows = make_windows(encode_stream(lines, result.vocab), config.batch_size, config.bptt);
    if (supervised) train_oracle = stream_oracle_targets(trees, mc.max_span);
  };
  prepare_epoch();

  std::ofstream metrics_file;
  if (!config.metrics_path.empty()) {
    metrics_file.open(config.metrics_path, std::ios::trunc);
    if (!metrics_file) throw CommandError("cannot write metrics log " + config.metrics_path);
  }
  auto emit = [&](MetricRecord r) {
    if (metrics_file) metrics_file << metric_json(r, config.log_wall_time) << '\n' << std::flush;
    result.metrics.push_back(std::move(r));
  };

  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.shuffle_sentences && epoch > 1) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      prepare_epoch();
    }
    const EpochStats st = trainer.train_epoch(train_windows, supervised ? &train_oracle : nullptr);
    emit({epoch, "train", st.lm_nll, st.ppl, st.attn_ce, seconds_since(t0)});

    trainer.swap_averaged();
    const EvalStats ev = evaluate(model, valid_windows, valid_oracle_ptr);
    trainer.swap_averaged();
    trainer.observe_validation(ev.nll);
    emit({epoch, "valid", ev.nll, ev.ppl, ev.attn_ce, seconds_since(t0)});
    if (log)
      *log << "epoch " << epoch << ": train ppl " << st.ppl << ", valid ppl " << ev.ppl
           << (supervised || valid_oracle ? ", valid attn_ce " + std::to_string(ev.attn_ce) : std::string()) << '\n';
  }

  // The saved parameters are the ones evaluated last: averaged weights if
  // averaging is on, rounded to the checkpoint's float32 storage.
  trainer.swap_averaged();
  model.round_to_float32();
  result.final_valid = evaluate(model, valid_windows, valid_oracle_ptr);
  emit({config.epochs, "final_valid", result.final_valid.nll, result.final_valid.ppl, result.final_valid.attn_ce,
        seconds_since(t0)});
  result.model = model.config();

  if (!config.checkpoint_path.empty()) {
    save_checkpoint(config.checkpoint_path,
                    make_checkpoint(config, result.vocab, model, &trainer.state(),
                                    static_cast<std::uint64_t>(config.epochs)));
    if (log) *log << "saved " << config.checkpoint_path << '\n';
  }
  return result;
}

struct LoadedModel {
  Checkpoint ckpt;
  std::unique_ptr<LanguageModel<float>> f32;
  std::unique_ptr<LanguageModel<double>> f64;
};

LoadedModel load_model(const std::string& path) {
  LoadedModel m;
  m.ckpt = load_checkpoint(path);
  const ModelConfig& mc = m.ckpt.config.model;
  if (mc.vocab_size != m.ckpt.vocab.size())
    throw CheckpointError(path + ": vocabulary has " + std::to_string(m.ckpt.vocab.size()) +
                          " entries but the model expects " + std::to_string(mc.vocab_size));
  if (m.ckpt.config.precision == Precision::float32) {
    m.f32 = std::make_unique<LanguageModel<float>>(mc, m.ckpt.config.seed);
    restore_model(m.ckpt, *m.f32);
  } else {
    m.f64 = std::make_unique<LanguageModel<double>>(mc, m.ckpt.config.seed);
    restore_model(m.ckpt, *m.f64);
  }
  return m;
}

json f1_json(const F1Report& f) {
  return {{"precision", f.precision}, {"recall", f.recall}, {"f1", f.f1}, {"matched", f.matched},
          {"predicted", f.predicted}, {"gold", f.gold}};
}

}  // namespace

TrainData load_train_data(const RunConfig& config) {
  if (config.train_path.empty()) throw CommandError("train_path is not set");
  if (config.valid_path.empty()) throw CommandError("valid_path is not set");
  TrainData d;
  d.train_lines = read_lines(config.train_path);
  d.valid_lines = read_lines(config.valid_path);
  if (!config.train_trees.empty()) d.train_trees = read_bracketed_file(config.train_trees);
  if (!config.valid_trees.empty()) d.valid_trees = read_bracketed_file(config.valid_trees);
  return d;
}

TrainResult train_model(const RunConfig& config, TrainMode mode, const TrainData& data, std::ostream* log) {
  return config.precision == Precision::float32 ? train_impl<float>(config, mode, data, log)
                                                : train_impl<double>(config, mode, data, log);
}

int cmd_train(const RunConfig& config, TrainMode mode, std::ostream& out, std::ostream& log) {
  const TrainResult r = train_model(config, mode, load_train_data(config), &log);
  json j{{"command", "train"},
         {"mode", to_string(mode)},
         {"epochs", config.epochs},
         {"vocab_size", r.vocab.size()},
         {"final_valid_nll", r.final_valid.nll},
         {"final_valid_ppl", r.final_valid.ppl},
         {"checkpoint", config.checkpoint_path},
         {"metrics", config.metrics_path}};
  if (r.final_valid.supervised_tokens > 0) {
    j["final_valid_attn_ce"] = r.final_valid.attn_ce;
    j["argmax_agreement"] = r.final_valid.argmax_agreement;
  }
  out << j.dump() << '\n';
  return 0;
}

PplReport eval_ppl(const std::string& checkpoint, const std::vector<std::string>& lines,
                   const std::string& vocab_path) {
  LoadedModel m = load_model(checkpoint);
  if (!vocab_path.empty() && !(Vocabulary::load(vocab_path) == m.ckpt.vocab))
    throw CommandError("vocabulary " + vocab_path + " does not match the checkpoint's");
  const auto text = non_blank(lines);
  if (text.empty()) throw CommandError("evaluation corpus is empty");
  const auto windows = make_windows(encode_stream(text, m.ckpt.vocab), m.ckpt.config.eval_batch_size,
                                    m.ckpt.config.bptt);
  const EvalStats st = m.f32 ? evaluate(*m.f32, windows, nullptr) : evaluate(*m.f64, windows, nullptr);
  return {st.nll, st.ppl, st.tokens};
}

int cmd_eval_ppl(const std::string& checkpoint, const std::string& corpus, const std::string& vocab_path,
                 std::ostream& out, std::ostream&) {
  const PplReport r = eval_ppl(checkpoint, read_lines(corpus), vocab_path);
  out << json{{"command", "eval-ppl"}, {"corpus", corpus}, {"nll", r.nll}, {"ppl", r.ppl}, {"tokens", r.tokens}}.dump()
      << '\n';
  return 0;
}

std::vector<std::string> parse_lines(const std::string& checkpoint, const std::vector<std::string>& lines,
                                     std::optional<int> parse_max_len, std::ostream* log) {
  LoadedModel m = load_model(checkpoint);
  const int pml = parse_max_len.value_or(m.ckpt.config.parse_max_len);
  std::vector<std::vector<std::string>> sentences;
  for (std::size_t k = 0; k < lines.size(); ++k) {
    auto toks = split_tokens(lines[k]);
    if (toks.empty()) {
      if (log) *log << "warning: line " << (k + 1) << " is empty, skipped\n";
      continue;
    }
    sentences.push_back(std::move(toks));
  }
  std::vector<std::string> trees(sentences.size());
  const int workers = worker_count(sentences.size());
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  auto work = [&](int w) {
    try {
      for (std::size_t k = static_cast<std::size_t>(w); k < sentences.size(); k += static_cast<std::size_t>(workers)) {
        std::vector<int> ids;
        for (const auto& tok : sentences[k]) ids.push_back(m.ckpt.vocab.id(tok));
        const int eos = m.ckpt.vocab.eos_id();
        const ParseTree t = m.f32 ? parse_sentence(*m.f32, ids, eos, pml) : parse_sentence(*m.f64, ids, eos, pml);
        trees[k] = t.to_bracketed(sentences[k]);
      }
    } catch (...) {
      errors[static_cast<std::size_t>(w)] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return trees;
}

int cmd_parse(const std::string& checkpoint, const std::string& input, const std::string& output,
              std::optional<int> parse_max_len, std::ostream& out, std::ostream& log) {
  const auto trees = parse_lines(checkpoint, read_lines(input), parse_max_len, &log);
  std::ofstream file;
  if (!output.empty()) {
    file.open(output, std::ios::trunc);
    if (!file) throw CommandError("cannot write " + output);
  }
  std::ostream& dest = output.empty() ? out : file;
  for (const auto& t : trees) dest << t << '\n';
  if (!output.empty())
    out << json{{"command", "parse"}, {"output", output}, {"sentences", trees.size()}}.dump() << '\n';
  return 0;
}

ParseEvalReport evaluate_parses(const std::vector<GoldTree>& pred_in, const std::vector<GoldTree>& gold_in,
                                const ParseEvalOptions& options) {
  ParseEvalReport report;
  std::vector<GoldTree> gold;
  std::vector<GoldTree> pred;
  if (!options.wsj40) {
    if (pred_in.size() != gold_in.size())
      throw CommandError(std::to_string(pred_in.size()) + " predicted trees for " + std::to_string(gold_in.size()) +
                         " gold trees");
    gold = gold_in;
    pred = pred_in;
  } else {
    const FilterResult filtered = wsj40_filter(gold_in, options.removed, options.max_length);
    report.skipped_sentences = filtered.dropped_long + filtered.dropped_empty;
    gold = filtered.trees;
    // Predictions may cover every gold sentence or only the kept ones; each
    // may still contain the removed tokens.
    const bool full = pred_in.size() == gold_in.size();
    if (!full && pred_in.size() != filtered.trees.size())
      throw CommandError(std::to_string(pred_in.size()) + " predicted trees match neither the " +
                         std::to_string(gold_in.size()) + " gold trees nor the " +
                         std::to_string(filtered.trees.size()) + " kept by WSJ-40 filtering");
    for (std::size_t k = 0; k < filtered.kept.size(); ++k) {
      const std::size_t src = filtered.kept[k];
      const GoldTree& p = pred_in[full ? src : k];
      const GoldTree& original = gold_in[src];
      if (p.length() == gold[k].length()) {
        pred.push_back(p);
      } else if (p.length() == original.length()) {
        pred.push_back(remove_leaves(p, removal_mask(original, options.removed)));
      } else {
        throw CommandError("alignment failure at gold sentence " + std::to_string(src + 1) + ": predicted tree has " +
                           std::to_string(p.length()) + " tokens, gold has " + std::to_string(original.length()) +
                           " (" + std::to_string(gold[k].length()) + " after filtering)");
      }
    }
  }
  for (std::size_t k = 0; k < gold.size(); ++k)
    if (pred[k].length() != gold[k].length())
      throw CommandError("alignment failure at sentence " + std::to_string(k + 1) + ": predicted tree has " +
                         std::to_string(pred[k].length()) + " tokens, gold has " + std::to_string(gold[k].length()));

  report.f1 = unlabeled_f1(pred, gold);
  report.counted_sentences = static_cast<int>(gold.size());
  std::vector<ParseTree> pred_trees, gold_trees;
  for (const auto& p : pred) {
    if (!p.is_binary()) throw CommandError("predicted trees must be binary");
    pred_trees.push_back(ParseTree::from_gold(p));
  }
  for (const auto& g : gold)
    if (g.is_binary()) gold_trees.push_back(ParseTree::from_gold(g));
  report.branching = branching_stats(pred_trees);
  report.gold_branching = branching_stats(gold_trees);
  return report;
}

std::string parse_report_json(const ParseEvalReport& r) {
  json j = f1_json(r.f1);
  j["command"] = "eval-parse";
  j["counted_sentences"] = r.counted_sentences;
  j["skipped_sentences"] = r.skipped_sentences;
  j["%left"] = r.branching.left_percent;
  j["%right"] = r.branching.right_percent;
  j["counted_splits"] = r.branching.counted;
  j["gold_binary_%left"] = r.gold_branching.left_percent;
  j["gold_binary_%right"] = r.gold_branching.right_percent;
  j["brackets"] = "nontrivial (single tokens and root excluded), micro-averaged";
  return j.dump();
}

int cmd_eval_parse(const std::string& pred_path, const std::string& gold_path, const ParseEvalOptions& options,
                   std::ostream& out, std::ostream&) {
  const auto pred = read_bracketed_file(pred_path, TreeFormat::unlabeled);
  const auto gold = read_bracketed_file(gold_path, TreeFormat::labeled);
  out << parse_report_json(evaluate_parses(pred, gold, options)) << '\n';
  return 0;
}

int cmd_selftest(std::uint64_t seed, std::ostream& out, std::ostream& log) {
  bool ok = true;
  for (const auto& r : run_selftest(seed)) {
    out << json{{"suite", r.name}, {"passed", r.passed}, {"detail", r.detail}, {"seconds", r.seconds}}.dump() << '\n';
    if (!r.passed) {
      log << "FAILED " << r.name << ": " << r.detail << '\n';
      ok = false;
    }
  }
  out << json{{"command", "selftest"}, {"passed", ok}}.dump() << '\n';
  return ok ? 0 : 1;
}

}  // namespace palm

#include "palm/commands.hpp"
#include "palm/config.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

int main(int argc, char** argv) {
  CLI::App app{"palm: span-attention language model and greedy unsupervised parser"};
  app.require_subcommand(1);

  std::string config_path;
  std::string mode = "U";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint and metrics log");
  train->add_option("--config", config_path, "key=value run config");
  train->add_option("--mode", mode, "U (unsupervised), S (supervised attention) or RB (right-branching)")
      ->check(CLI::IsMember({"U", "S", "RB"}));
  train->add_option("--seed", seed, "overrides the config seed");
  train->add_option("--set", overrides, "extra key=value config overrides");

  std::string checkpoint, corpus, vocab;
  auto* eval_ppl = app.add_subcommand("eval-ppl", "perplexity of a checkpoint on a corpus");
  eval_ppl->add_option("--checkpoint", checkpoint)->required();
  eval_ppl->add_option("--corpus", corpus, "one sentence per line")->required();
  eval_ppl->add_option("--vocab", vocab, "require this vocabulary file to match the checkpoint");

  std::string input, output;
  std::optional<int> parse_max_len;
  auto* parse = app.add_subcommand("parse", "greedy trees for each input sentence");
  parse->add_option("--checkpoint", checkpoint)->required();
  parse->add_option("--input", input, "one sentence per line")->required();
  parse->add_option("--output", output, "tree file (default: stdout)");
  parse->add_option("--parse-max-len", parse_max_len, "longest span scored (0 = sentence length)");

  std::string pred, gold, eval_config;
  bool wsj40 = false;
  auto* eval_parse = app.add_subcommand("eval-parse", "unlabeled bracket F1 and branching statistics");
  eval_parse->add_option("--pred", pred, "predicted trees, one per line")->required();
  eval_parse->add_option("--gold", gold, "gold bracketed trees")->required();
  eval_parse->add_flag("--wsj40", wsj40, "drop punctuation and keep sentences of at most 40 tokens");
  eval_parse->add_option("--config", eval_config, "config supplying punctuation_tags / wsj40_max_length");

  std::uint64_t selftest_seed = 1;
  auto* selftest = app.add_subcommand("selftest", "span-oracle, gradient-check and tree-recovery suites");
  selftest->add_option("--seed", selftest_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      palm::RunConfig config = config_path.empty() ? palm::RunConfig{} : palm::load_run_config(config_path);
      for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw palm::ConfigError("--set expects key=value, got '" + kv + "'");
        palm::set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
      }
      if (seed) config.seed = *seed;
      return palm::cmd_train(config, palm::parse_train_mode(mode), std::cout, std::cerr);
    }
    if (eval_ppl->parsed()) return palm::cmd_eval_ppl(checkpoint, corpus, vocab, std::cout, std::cerr);
    if (parse->parsed()) return palm::cmd_parse(checkpoint, input, output, parse_max_len, std::cout, std::cerr);
    if (eval_parse->parsed()) {
      palm::ParseEvalOptions options;
      options.wsj40 = wsj40;
      if (!eval_config.empty()) {
        const auto c = palm::load_run_config(eval_config);
        options.removed = c.punctuation_tags;
        options.max_length = c.wsj40_max_length;
      }
      return palm::cmd_eval_parse(pred, gold, options, std::cout, std::cerr);
    }
    if (selftest->parsed()) return palm::cmd_selftest(selftest_seed, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

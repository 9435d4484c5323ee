// Writes a synthetic agreement-grammar corpus: <prefix>.txt (one sentence per
// line) and <prefix>.trees (aligned labeled trees) for train and valid splits.

#include "palm/lm.hpp"
#include "palm/synthetic.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace {

void write_split(const std::string& prefix, const std::vector<palm::GoldTree>& trees) {
  std::ofstream text(prefix + ".txt"), bracketed(prefix + ".trees");
  if (!text || !bracketed) throw std::runtime_error("cannot write " + prefix + ".{txt,trees}");
  for (const auto& line : palm::sentence_lines(trees)) text << line << '\n';
  for (const auto& t : trees) bracketed << palm::to_tagged_bracketed(t) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"palm-synth: synthetic corpus with gold trees"};
  std::string dir = ".";
  int train_tokens = 5000, valid_tokens = 3000;
  std::uint64_t seed = 1;
  palm::SyntheticConfig config;
  app.add_option("--out-dir", dir);
  app.add_option("--train-tokens", train_tokens);
  app.add_option("--valid-tokens", valid_tokens);
  app.add_option("--seed", seed);
  app.add_option("--max-depth", config.max_depth);
  app.add_option("--relative-prob", config.relative_prob);
  app.add_option("--object-relative-prob", config.object_relative_prob);
  app.add_option("--pp-prob", config.pp_prob);
  CLI11_PARSE(app, argc, argv);
  try {
    std::filesystem::create_directories(dir);
    std::mt19937_64 train_rng = palm::seeded_stream(seed, "synthetic/train");
    std::mt19937_64 valid_rng = palm::seeded_stream(seed, "synthetic/valid");
    write_split(dir + "/train", palm::generate_corpus(config, train_tokens, train_rng));
    write_split(dir + "/valid", palm::generate_corpus(config, valid_tokens, valid_rng));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

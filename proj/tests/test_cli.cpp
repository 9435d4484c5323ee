#include "palm/checkpoint.hpp"
#include "palm/commands.hpp"
#include "palm/config.hpp"
#include "palm/synthetic.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

using namespace palm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("palm_test_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Corpus {
  std::vector<GoldTree> train_trees;
  std::vector<GoldTree> valid_trees;
  TrainData data;
};

Corpus small_corpus() {
  Corpus c;
  SyntheticConfig sc;
  std::mt19937_64 train_rng = seeded_stream(3, "synthetic/train");
  std::mt19937_64 valid_rng = seeded_stream(3, "synthetic/valid");
  c.train_trees = generate_corpus(sc, 600, train_rng);
  c.valid_trees = generate_corpus(sc, 200, valid_rng);
  c.data.train_lines = sentence_lines(c.train_trees);
  c.data.valid_lines = sentence_lines(c.valid_trees);
  return c;
}

RunConfig small_config(const TempDir& dir) {
  RunConfig c;
  c.model.embedding_dim = 12;
  c.model.hidden_dim = 16;
  c.model.rrnn_dim = 6;
  c.model.max_span = 5;
  c.model.scorer_dim = 8;
  c.batch_size = 4;
  c.eval_batch_size = 3;
  c.bptt = 12;
  c.epochs = 1;
  c.log_wall_time = false;
  c.checkpoint_path = dir.file("model.ckpt");
  c.metrics_path = dir.file("metrics.jsonl");
  return c;
}

struct EnvGuard {
  std::string name;
  EnvGuard(const std::string& n, const std::string& value) : name(n) { ::setenv(n.c_str(), value.c_str(), 1); }
  ~EnvGuard() { ::unsetenv(name.c_str()); }
};

}  // namespace

TEST_CASE("run config text") {
  SUBCASE("serialize/parse round-trip, including changed fields") {
    RunConfig c;
    c.model.hidden_dim = 77;
    c.model.lambda = 0.125;
    c.model.gate_mode = attention::GateMode::conditioned;
    c.model.attention_mode = AttentionMode::disabled;
    c.optimizer.learning_rate = 3.3e-4;
    c.precision = Precision::float64;
    c.seed = 18446744073709551615ull;
    c.punctuation_tags = {",", ".", "``"};
    c.train_path = "data/train.txt";
    CHECK(parse_run_config(serialize_run_config(c)) == c);
    CHECK(parse_run_config(serialize_run_config(RunConfig{})) == RunConfig{});
  }
  SUBCASE("comments, blank lines and spaces") {
    const RunConfig c = parse_run_config("# run\n\n  hidden_dim = 12  \nlearning_rate=0.5\n# epochs = 3\n");
    CHECK(c.model.hidden_dim == 12);
    CHECK(c.optimizer.learning_rate == 0.5);
    CHECK(c.epochs == RunConfig{}.epochs);
  }
  SUBCASE("errors name the line") {
    auto message = [](const std::string& text) {
      try {
        parse_run_config(text);
      } catch (const ConfigError& e) {
        return std::string(e.what());
      }
      return std::string("no error");
    };
    CHECK(message("epochs = 2\nunknown_key = 1\n").find("line 2") != std::string::npos);
    CHECK(message("epochs = 2\nunknown_key = 1\n").find("unknown_key") != std::string::npos);
    CHECK(message("epochs = 2\nepochs = 3\n").find("duplicate") != std::string::npos);
    CHECK(message("# c\nepochs\n").find("line 2") != std::string::npos);
    CHECK(message("epochs = two\n").find("epochs") != std::string::npos);
    CHECK(message("precision = half\n").find("precision") != std::string::npos);
    CHECK(message("shuffle_sentences = maybe\n").find("line 1") != std::string::npos);
  }
  SUBCASE("shipped config files load") {
    const RunConfig desk = load_run_config(std::string(PALM_SOURCE_DIR) + "/configs/desk.cfg");
    CHECK(desk.optimizer.learning_rate == 0.005);
    CHECK(desk.model.hidden_dim == 128);
    CHECK(desk.model.lambda == 0.01);
    const RunConfig ptb_run = load_run_config(std::string(PALM_SOURCE_DIR) + "/configs/ptb.cfg");
    CHECK(ptb_run.model.rrnn_dim == 200);
    CHECK(ptb_run.model.hidden_dim == 1020);
    CHECK(ptb_run.model.max_span == 20);
    CHECK(ptb_run.optimizer.asgd_switch_epoch == 40);
    ModelConfig ptb = ptb_run.model;
    ptb.vocab_size = 10000;  // filled in from the corpus at train time
    CHECK_NOTHROW(ptb.validate());
  }
  SUBCASE("set_config_value") {
    RunConfig c;
    set_config_value(c, "max_span", "7");
    CHECK(c.model.max_span == 7);
    CHECK_THROWS_AS(set_config_value(c, "nope", "1"), ConfigError);
  }
}

TEST_CASE("train, checkpoint and evaluate") {
  TempDir dir;
  const Corpus corpus = small_corpus();
  RunConfig config = small_config(dir);
  const TrainResult r = train_model(config, TrainMode::unsupervised, corpus.data, nullptr);

  SUBCASE("metrics log has one train and one valid record per epoch plus the final one") {
    const std::string log = read_file(config.metrics_path);
    std::istringstream in(log);
    std::string line;
    std::vector<nlohmann::json> records;
    while (std::getline(in, line)) records.push_back(nlohmann::json::parse(line));
    REQUIRE(records.size() == 3);
    CHECK(records[0]["split"] == "train");
    CHECK(records[1]["split"] == "valid");
    CHECK(records[2]["split"] == "final_valid");
    for (const auto& j : records) {
      CHECK(j.contains("nll"));
      CHECK(j.contains("ppl"));
      CHECK(j.contains("attn_ce"));
      CHECK_FALSE(j.contains("wall_time_s"));
      CHECK(j["ppl"].get<double>() == doctest::Approx(std::exp(j["nll"].get<double>())));
    }
  }
  SUBCASE("eval-ppl on the saved checkpoint reproduces the final validation ppl") {
    const PplReport p = eval_ppl(config.checkpoint_path, corpus.data.valid_lines);
    CHECK(std::abs(p.ppl - r.final_valid.ppl) <= 1e-9);
    CHECK(p.tokens == r.final_valid.tokens);
    const PplReport again = eval_ppl(config.checkpoint_path, corpus.data.valid_lines);
    CHECK(again.nll == p.nll);
  }
  SUBCASE("checkpoint round-trip") {
    const Checkpoint a = load_checkpoint(config.checkpoint_path);
    CHECK(a.vocab == r.vocab);
    CHECK(a.epoch == 1);
    CHECK(a.config.model.vocab_size == r.vocab.size());
    save_checkpoint(dir.file("copy.ckpt"), a);
    CHECK(read_file(dir.file("copy.ckpt")) == read_file(config.checkpoint_path));
  }
  SUBCASE("vocabulary mismatch is refused") {
    r.vocab.save(dir.file("vocab.txt"));
    CHECK_NOTHROW(eval_ppl(config.checkpoint_path, corpus.data.valid_lines, dir.file("vocab.txt")));
    write_file(dir.file("other.txt"), "a\nb\n");
    CHECK_THROWS(eval_ppl(config.checkpoint_path, corpus.data.valid_lines, dir.file("other.txt")));
  }
  SUBCASE("corrupt checkpoints are rejected") {
    const std::string bytes = read_file(config.checkpoint_path);
    write_file(dir.file("magic.ckpt"), "XXXX" + bytes.substr(4));
    CHECK_THROWS_AS(load_checkpoint(dir.file("magic.ckpt")), CheckpointError);
    write_file(dir.file("short.ckpt"), bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir.file("short.ckpt")), CheckpointError);
    write_file(dir.file("empty.ckpt"), "");
    CHECK_THROWS_AS(load_checkpoint(dir.file("empty.ckpt")), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(dir.file("missing.ckpt")), CheckpointError);

    std::ostringstream out, err;
    CHECK_THROWS(cmd_eval_ppl(dir.file("short.ckpt"), config.checkpoint_path, "", out, err));
  }
  SUBCASE("parse_lines") {
    const std::vector<std::string> lines{corpus.data.valid_lines[0], "", corpus.data.valid_lines[1], "dog"};
    std::ostringstream warn;
    const auto trees = parse_lines(config.checkpoint_path, lines, std::nullopt, &warn);
    REQUIRE(trees.size() == 3);
    CHECK(warn.str().find("line 2") != std::string::npos);
    CHECK(trees[2] == "(dog)");
    for (std::size_t k = 0; k < 2; ++k) {
      const GoldTree t = read_bracketed(trees[k], TreeFormat::unlabeled).at(0);
      CHECK(t.words() == split_tokens(corpus.data.valid_lines[k]));
      CHECK(t.is_binary());
    }
    CHECK(parse_lines(config.checkpoint_path, lines, std::nullopt, nullptr) == trees);

    // Unknown words map to <unk>; three tokens give one of the two shapes.
    const auto three = parse_lines(config.checkpoint_path, {"x y z"}, std::nullopt, nullptr).at(0);
    CHECK((three == "((x y) z)" || three == "(x (y z))"));
  }
  SUBCASE("thread count does not change the parses") {
    std::vector<std::string> lines(corpus.data.valid_lines.begin(), corpus.data.valid_lines.end());
    std::vector<std::string> one, four;
    {
      EnvGuard g("PALM_THREADS", "1");
      one = parse_lines(config.checkpoint_path, lines, std::nullopt, nullptr);
    }
    {
      EnvGuard g("PALM_THREADS", "4");
      four = parse_lines(config.checkpoint_path, lines, 3, nullptr);
    }
    const auto one_limited = [&] {
      EnvGuard g("PALM_THREADS", "1");
      return parse_lines(config.checkpoint_path, lines, 3, nullptr);
    }();
    CHECK(four == one_limited);
    CHECK(one.size() == lines.size());
    EnvGuard bad("PALM_THREADS", "x");
    CHECK_THROWS_AS(worker_count(5), CommandError);
  }
}

TEST_CASE("training modes") {
  TempDir dir;
  const Corpus corpus = small_corpus();
  RunConfig config = small_config(dir);

  SUBCASE("S needs trees") {
    CHECK_THROWS_AS(train_model(config, TrainMode::supervised, corpus.data, nullptr), CommandError);
  }
  SUBCASE("S records attention metrics; misaligned trees are refused") {
    TrainData d = corpus.data;
    d.train_trees = corpus.train_trees;
    d.valid_trees = corpus.valid_trees;
    const TrainResult r = train_model(config, TrainMode::supervised, d, nullptr);
    CHECK(r.final_valid.supervised_tokens > 0);
    CHECK(r.final_valid.attn_ce > 0);
    d.train_trees.pop_back();
    CHECK_THROWS_AS(train_model(config, TrainMode::supervised, d, nullptr), CommandError);
  }
  SUBCASE("RB parses right-branching everywhere") {
    train_model(config, TrainMode::right_branching, corpus.data, nullptr);
    const auto trees = parse_lines(config.checkpoint_path, corpus.data.valid_lines, std::nullopt, nullptr);
    std::vector<ParseTree> parsed;
    for (const auto& t : trees) parsed.push_back(ParseTree::from_gold(read_bracketed(t, TreeFormat::unlabeled).at(0)));
    const BranchingStats st = branching_stats(parsed);
    CHECK(st.counted > 0);
    CHECK(st.right_percent == 100.0);
  }
  SUBCASE("float64 runs also round-trip") {
    config.precision = Precision::float64;
    const TrainResult r = train_model(config, TrainMode::unsupervised, corpus.data, nullptr);
    CHECK(std::abs(eval_ppl(config.checkpoint_path, corpus.data.valid_lines).ppl - r.final_valid.ppl) <= 1e-9);
  }
  SUBCASE("U on a 1k-token corpus: 20 epochs lower the training ppl") {
    TrainData d;
    SyntheticConfig sc;
    std::mt19937_64 rng = seeded_stream(4, "synthetic/train");
    d.train_lines = sentence_lines(generate_corpus(sc, 1000, rng));
    d.valid_lines = corpus.data.valid_lines;
    config.epochs = 20;
    const TrainResult r = train_model(config, TrainMode::unsupervised, d, nullptr);
    double first = 0, last = 0;
    for (const auto& m : r.metrics) {
      if (m.split != "train") continue;
      if (m.epoch == 1) first = m.ppl;
      last = m.ppl;
    }
    CHECK(first > 0);
    CHECK(last < first);
  }
  SUBCASE("vocab_size must agree with the corpus when set") {
    config.model.vocab_size = 3;
    CHECK_THROWS_AS(train_model(config, TrainMode::unsupervised, corpus.data, nullptr), CommandError);
  }
  SUBCASE("empty corpora are refused") {
    TrainData d = corpus.data;
    d.valid_lines = {"", "  "};
    CHECK_THROWS_AS(train_model(config, TrainMode::unsupervised, d, nullptr), CommandError);
  }
}

TEST_CASE("evaluate_parses") {
  const auto gold =
      read_bracketed("(S (NP (DT the) (NN dog)) (VP (VBD saw) (NP (DT a) (NN cat))))\n"
                     "(S (NP (PRP it)) (VP (VBD ran) (ADVP (RB away))) (. .))\n");
  SUBCASE("near-gold predictions, counted by hand") {
    const auto pred = read_bracketed("((the dog) (saw (a cat)))\n(it ((ran away) .))\n", TreeFormat::unlabeled);
    const auto r = evaluate_parses(pred, gold, {});
    // sentence 2 gold is n-ary: {[2,3]} only; the prediction adds [2,4]
    CHECK(r.f1.matched == 4);
    CHECK(r.f1.predicted == 5);
    CHECK(r.f1.gold == 4);
    CHECK(r.counted_sentences == 2);
    CHECK(r.f1.recall == 100.0);
  }
  SUBCASE("binarized gold scores 100") {
    const auto pred = read_bracketed("((the dog) (saw (a cat)))\n(it ((ran away) .))\n", TreeFormat::unlabeled);
    const auto bin = read_bracketed("((the dog) (saw (a cat)))\n(it ((ran away) .))\n", TreeFormat::unlabeled);
    CHECK(evaluate_parses(pred, bin, {}).f1.f1 == 100.0);
  }
  SUBCASE("WSJ-40 removes punctuation from predictions too") {
    ParseEvalOptions o;
    o.wsj40 = true;
    const auto pred = read_bracketed("(((the dog) saw) (a cat))\n((it ran) (away .))\n", TreeFormat::unlabeled);
    const auto r = evaluate_parses(pred, gold, o);
    // 1: pred {[1,2],[1,3],[4,5]} vs gold {[1,2],[3,5],[4,5]}: 2 matched
    // 2 after dropping ".": pred ((it ran) away) {[1,2]} vs gold (it (ran away)) {[2,3]}: 0
    CHECK(r.f1.matched == 2);
    CHECK(r.f1.predicted == 4);
    CHECK(r.f1.gold == 4);
    CHECK(r.skipped_sentences == 0);
  }
  SUBCASE("misaligned predictions are refused") {
    const auto pred = read_bracketed("((the dog) saw)\n(it ran)\n", TreeFormat::unlabeled);
    CHECK_THROWS_AS(evaluate_parses(pred, gold, {}), CommandError);
    CHECK_THROWS_AS(evaluate_parses({pred[0]}, gold, {}), CommandError);
  }
  SUBCASE("report json") {
    const auto pred = read_bracketed("(the (dog (saw (a cat))))\n(it (ran (away .)))\n", TreeFormat::unlabeled);
    const auto j = nlohmann::json::parse(parse_report_json(evaluate_parses(pred, gold, {})));
    CHECK(j["%right"].get<double>() == 100.0);
    CHECK(j["%left"].get<double>() == 0.0);
    for (const char* key : {"precision", "recall", "f1", "counted_sentences", "skipped_sentences"})
      CHECK(j.contains(key));
  }
}

TEST_CASE("command entry points") {
  TempDir dir;
  SUBCASE("selftest passes") {
    std::ostringstream out, err;
    CHECK(cmd_selftest(1, out, err) == 0);
    CHECK(out.str().find("\"passed\":true") != std::string::npos);
    CHECK(err.str().empty());
  }
  SUBCASE("eval-parse from files") {
    write_file(dir.file("gold.txt"), "(S (NP (DT the) (NN dog)) (VP (VBD ran)))\n");
    write_file(dir.file("pred.txt"), "((the dog) ran)\n");
    std::ostringstream out, err;
    CHECK(cmd_eval_parse(dir.file("pred.txt"), dir.file("gold.txt"), {}, out, err) == 0);
    CHECK(nlohmann::json::parse(out.str())["f1"].get<double>() == 100.0);
  }
  SUBCASE("train from config files, then parse to a file") {
    const Corpus corpus = small_corpus();
    std::string train, valid;
    for (const auto& l : corpus.data.train_lines) train += l + "\n";
    for (const auto& l : corpus.data.valid_lines) valid += l + "\n";
    write_file(dir.file("train.txt"), train);
    write_file(dir.file("valid.txt"), valid);
    RunConfig c = small_config(dir);
    c.train_path = dir.file("train.txt");
    c.valid_path = dir.file("valid.txt");
    write_file(dir.file("run.cfg"), serialize_run_config(c));
    std::ostringstream out, log;
    REQUIRE(cmd_train(load_run_config(dir.file("run.cfg")), TrainMode::unsupervised, out, log) == 0);
    const auto j = nlohmann::json::parse(out.str());
    CHECK(j["mode"] == "U");
    CHECK(fs::exists(c.checkpoint_path));

    std::ostringstream pout, plog;
    REQUIRE(cmd_parse(c.checkpoint_path, dir.file("valid.txt"), dir.file("trees.txt"), std::nullopt, pout, plog) == 0);
    const auto trees = read_bracketed_file(dir.file("trees.txt"), TreeFormat::unlabeled);
    CHECK(trees.size() == corpus.data.valid_lines.size());
  }
  SUBCASE("modes") {
    CHECK(parse_train_mode("RB") == TrainMode::right_branching);
    CHECK(to_string(parse_train_mode("S")) == "S");
    CHECK_THROWS_AS(parse_train_mode("X"), CommandError);
  }
}

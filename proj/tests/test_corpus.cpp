#include "palm/corpus.hpp"
#include "palm/synthetic.hpp"
#include "palm/lm.hpp"

#include <doctest.h>

#include <filesystem>
#include <numeric>

using namespace palm;

namespace {

std::vector<std::string> toks(const Vocabulary& v) { return v.tokens(); }

TokenStream counting_stream(int n) {
  TokenStream s;
  for (int i = 0; i < n; ++i) {
    s.ids.push_back(i);
    s.sentence_end.push_back(0);
  }
  return s;
}

GoldTree tree(const std::string& text, TreeFormat f = TreeFormat::unlabeled) { return read_bracketed(text, f).at(0); }

}  // namespace

TEST_CASE("build_vocab applies min_count and a deterministic order") {
  const Vocabulary v = build_vocab({"a b a", "b c"}, 2);
  CHECK(toks(v) == std::vector<std::string>{"a", "b", "<unk>", "<eos>"});
  CHECK(v.id("c") == v.unknown_id());
  CHECK(v.id("a") == 0);

  CHECK_THROWS_AS(build_vocab({}, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_vocab({"", "  "}, 1), std::invalid_argument);

  const Vocabulary one = build_vocab({"x"}, 1);
  CHECK(toks(one) == std::vector<std::string>{"x", "<unk>", "<eos>"});
}

TEST_CASE("build_vocab orders by count then token") {
  const Vocabulary v = build_vocab({"z y y x x x", "w"}, 1);
  CHECK(toks(v) == std::vector<std::string>{"x", "y", "w", "z", "<unk>", "<eos>"});
}

TEST_CASE("vocabulary save and load") {
  const auto path = std::filesystem::temp_directory_path() / "palm_vocab_test.txt";
  const Vocabulary v = build_vocab({"the cat", "the dog"}, 1);
  v.save(path.string());
  CHECK(Vocabulary::load(path.string()) == v);
  std::filesystem::remove(path);
  CHECK_THROWS(Vocabulary::from_tokens({"a", "b"}));
  CHECK_THROWS(Vocabulary::from_tokens({"a", "a", "<unk>", "<eos>"}));
}

TEST_CASE("encode_stream appends end marks") {
  const Vocabulary v = build_vocab({"a b"}, 1);
  const TokenStream s = encode_stream({"a b"}, v);
  CHECK(s.ids == std::vector<int>{v.id("a"), v.id("b"), v.eos_id()});
  CHECK(s.sentence_end == std::vector<unsigned char>{0, 0, 1});

  const TokenStream two = encode_stream({"a", "b"}, v);
  CHECK(two.ids == std::vector<int>{v.id("a"), v.eos_id(), v.id("b"), v.eos_id()});

  const TokenStream oov = encode_stream({"a z b"}, v);
  CHECK(oov.ids[1] == v.unknown_id());
}

TEST_CASE("decode(encode) is the identity on in-vocabulary text") {
  std::mt19937_64 rng(5);
  const auto lines = sentence_lines(generate_corpus(SyntheticConfig{}, 300, rng));
  const Vocabulary v = build_vocab(lines, 1);
  CHECK(decode_stream(encode_stream(lines, v), v) == lines);
}

TEST_CASE("make_windows cuts lanes into bptt windows") {
  const TokenStream s = counting_stream(10);
  SUBCASE("batch 1, bptt 4 gives 4, 4, 1") {
    const auto w = make_windows(s, 1, 4);
    REQUIRE(w.size() == 3);
    CHECK(w[0].length == 4);
    CHECK(w[1].length == 4);
    CHECK(w[2].length == 1);
    CHECK(w[2].input(0, 0) == 8);
    CHECK(w[2].target(0, 0) == 9);
    CHECK(w[0].starts_lanes);
    CHECK_FALSE(w[1].starts_lanes);
  }
  SUBCASE("batch 2 gives two lanes of 5") {
    const auto w = make_windows(s, 2, 10);
    REQUIRE(w.size() == 1);
    CHECK(w[0].length == 4);
    for (int t = 0; t < 4; ++t) {
      CHECK(w[0].input(t, 0) == t);
      CHECK(w[0].input(t, 1) == 5 + t);
      CHECK(w[0].position(t, 1) == static_cast<std::size_t>(5 + t));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(make_windows(s, 1, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_windows(s, 0, 4), std::invalid_argument);
    CHECK_THROWS_AS(make_windows(counting_stream(3), 2, 4), std::invalid_argument);
  }
}

TEST_CASE("make_windows: each lane's windows reproduce the lane slice") {
  const TokenStream s = counting_stream(103);
  for (int batch : {1, 2, 3, 7}) {
    for (int bptt : {1, 4, 35}) {
      const auto windows = make_windows(s, batch, bptt);
      const int lane = 103 / batch;
      for (int b = 0; b < batch; ++b) {
        std::vector<int> seen;
        for (const auto& w : windows)
          for (int t = 0; t < w.length; ++t) {
            if (seen.empty()) seen.push_back(w.input(t, b));
            CHECK(w.input(t, b) == seen.back());
            seen.push_back(w.target(t, b));
          }
        std::vector<int> slice(static_cast<std::size_t>(lane));
        std::iota(slice.begin(), slice.end(), b * lane);
        CHECK(seen == slice);
      }
    }
  }
}

TEST_CASE("read_bracketed") {
  SUBCASE("labels dropped, constituents kept") {
    const GoldTree t = tree("(S (NP a) (VP b c))", TreeFormat::labeled);
    CHECK(t.words() == std::vector<std::string>{"a", "b", "c"});
    CHECK(t.leaves[0].tag == "NP");
    CHECK(t.constituents(false) == std::set<Span>{{2, 3}, {1, 3}});
    CHECK(t.constituents(true) == std::set<Span>{{1, 1}, {2, 2}, {3, 3}, {2, 3}, {1, 3}});
  }
  SUBCASE("unary chains collapse") {
    const GoldTree t = tree("((a))");
    CHECK(t.length() == 1);
    CHECK(t.spans.empty());
    CHECK(to_bracketed(t) == "(a)");
    CHECK(to_bracketed(tree(to_bracketed(t))) == "(a)");
    const GoldTree u = tree("(ROOT (S (NP (DT the) (NN dog)) (VP (VBZ runs))))", TreeFormat::labeled);
    CHECK(u.constituents(false) == std::set<Span>{{1, 2}, {1, 3}});
  }
  SUBCASE("n-ary nodes kept") {
    const GoldTree t = tree("((a b c) d)");
    CHECK_FALSE(t.is_binary());
    CHECK(t.constituents(false) == std::set<Span>{{1, 3}, {1, 4}});
    CHECK(to_bracketed(t) == "((a b c) d)");
  }
  SUBCASE("unbalanced input reports the line") {
    CHECK_THROWS_AS(read_bracketed("(S (NP a"), ParseError);
    try {
      read_bracketed("(a b)\n(c d)\n(S (NP a\n");
      FAIL("no error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(read_bracketed("(a b))"), ParseError);
  }
  SUBCASE("several trees, one per line or spread over lines") {
    const auto ts = read_bracketed("((a b) c)\n(S\n  (X d)\n  (Y e))\n", TreeFormat::unlabeled);
    REQUIRE(ts.size() == 2);
    CHECK(ts[1].words() == std::vector<std::string>{"S", "X", "d", "Y", "e"});
    const auto labeled = read_bracketed("(S\n  (X d)\n  (Y e))\n", TreeFormat::labeled);
    CHECK(labeled[0].words() == std::vector<std::string>{"d", "e"});
  }
}

TEST_CASE("to_bracketed round-trips generated trees") {
  std::mt19937_64 rng(9);
  for (const auto& t : generate_corpus(SyntheticConfig{}, 500, rng)) {
    const GoldTree back = tree(to_bracketed(t));
    CHECK(back.words() == t.words());
    CHECK(back.constituents(true) == t.constituents(true));
    const GoldTree tagged = tree(to_tagged_bracketed(t), TreeFormat::labeled);
    CHECK(tagged.constituents(true) == t.constituents(true));
    CHECK(tagged.leaves[0].tag == t.leaves[0].tag);
  }
}

TEST_CASE("oracle_targets") {
  SUBCASE("((a b) c), m = 3") {
    const OracleSpanTargets y = oracle_targets(tree("((a b) c)"), 3);
    REQUIRE(y.length() == 3);
    CHECK(y.masked == std::vector<unsigned char>{1, 0, 1});
    CHECK(y.targets[1] == std::vector<double>{0, 1, 0});
  }
  SUBCASE("right-branching n = 2 is fully masked") {
    const OracleSpanTargets y = oracle_targets(tree("(a b)"), 3);
    CHECK(y.masked == std::vector<unsigned char>{1, 1});
  }
  SUBCASE("two gold spans ending at one token share the mass") {
    // [2,3] and [1,3] both end at token 3
    const OracleSpanTargets y = oracle_targets(tree("((a (b c)) d)"), 3);
    CHECK(y.masked == std::vector<unsigned char>{1, 1, 0, 1});
    CHECK(y.targets[2] == std::vector<double>{0, 0.5, 0.5});
  }
  SUBCASE("spans longer than m are left out") {
    const OracleSpanTargets y = oracle_targets(tree("((a (b c)) d)"), 2);
    CHECK(y.targets[2] == std::vector<double>{0, 1});
  }
  CHECK_THROWS_AS(oracle_targets(tree("(a b)"), 0), std::invalid_argument);
}

TEST_CASE("oracle_targets properties on generated trees") {
  std::mt19937_64 rng(3);
  for (const auto& t : generate_corpus(SyntheticConfig{}, 2000, rng)) {
    const int n = t.length();
    for (int m : {1, 3, 10}) {
      const OracleSpanTargets y = oracle_targets(t, m);
      const auto nontrivial = t.nontrivial_spans();
      for (int pos = 1; pos <= n; ++pos) {
        const auto& row = y.targets[static_cast<std::size_t>(pos - 1)];
        const double mass = std::accumulate(row.begin(), row.end(), 0.0);
        bool any = false;
        for (int i = 0; i < m; ++i) {
          const bool gold = i < pos && nontrivial.count({pos - i, pos}) > 0;
          any = any || gold;
          if (!gold) CHECK(row[static_cast<std::size_t>(i)] == 0.0);
          if (i >= pos - 1 && pos == n) CHECK(row[static_cast<std::size_t>(i)] == 0.0);  // root
          if (i == 0) CHECK(row[0] == 0.0);                                           // single token
        }
        CHECK(static_cast<bool>(y.masked[static_cast<std::size_t>(pos - 1)]) == !any);
        if (any) CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("stream_oracle_targets masks end marks") {
  const std::vector<GoldTree> ts{tree("((a b) c)"), tree("(d (e f))")};
  const OracleSpanTargets y = stream_oracle_targets(ts, 3);
  REQUIRE(y.length() == 8);
  CHECK(y.masked == std::vector<unsigned char>{1, 0, 1, 1, 1, 1, 0, 1});
  CHECK(y.targets[6] == std::vector<double>{0, 1, 0});
}

TEST_CASE("wsj40_filter") {
  const auto punct = default_punctuation_tags();
  auto sentence = [](int words, int marks) {
    std::string s = "(S";
    for (int i = 0; i < words; ++i) s += " (NN w" + std::to_string(i) + ")";
    for (int i = 0; i < marks; ++i) s += " (. .)";
    return s + ")";
  };
  const std::vector<GoldTree> in{tree(sentence(39, 2), TreeFormat::labeled),
                                 tree(sentence(45, 0), TreeFormat::labeled), tree("(S (. .) (, ,))", TreeFormat::labeled),
                                 tree("(S (NP (DT the) (NN dog)) (, ,) (VP (VBZ runs) (. .)))", TreeFormat::labeled)};
  const FilterResult r = wsj40_filter(in, punct, 40);
  REQUIRE(r.trees.size() == 2);
  CHECK(r.trees[0].length() == 39);
  CHECK(r.kept == std::vector<std::size_t>{0, 3});
  CHECK(r.dropped_long == 1);
  CHECK(r.dropped_empty == 1);
  // (VP runs .) becomes the single token runs; its bracket disappears.
  CHECK(r.trees[1].words() == std::vector<std::string>{"the", "dog", "runs"});
  CHECK(r.trees[1].constituents(false) == std::set<Span>{{1, 2}, {1, 3}});
}

TEST_CASE("remove_leaves re-indexes and keeps a valid tree") {
  const GoldTree t = tree("((a (b c)) (d e))");
  const GoldTree r = remove_leaves(t, {false, true, false, false, true});
  CHECK(r.words() == std::vector<std::string>{"a", "c", "d"});
  CHECK(r.constituents(false) == std::set<Span>{{1, 2}, {1, 3}});
  CHECK_NOTHROW(r.validate());
  CHECK_THROWS(remove_leaves(t, {true}));
}

TEST_CASE("GoldTree::validate rejects crossing and uncovered spans") {
  GoldTree t;
  t.leaves = {{"a", ""}, {"b", ""}, {"c", ""}};
  t.spans = {{1, 2}, {2, 3}, {1, 3}};
  CHECK_THROWS(t.validate());
  t.spans = {{1, 2}};
  CHECK_THROWS(t.validate());
  t.spans = {{1, 2}, {1, 3}};
  CHECK_NOTHROW(t.validate());
}

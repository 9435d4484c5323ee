#pragma once

// Small agreement grammar producing sentences with binary gold trees:
//
//   S      -> NP[n] VP[n]
//   NP[n]  -> Det[n] Nbar[n] | NP[n] PP | NP[n] RC[n]
//   Nbar[n]-> N[n] | Adj Nbar[n]
//   PP     -> P NP[*]
//   RC[n]  -> that VP[n] | that NP[m] Vt[m]
//   VP[n]  -> Vi[n] | Vt[n] NP[*]
//
// Number n (singular/plural) is shared by a head and its verb, so predicting
// the verb needs the subject phrase, possibly several tokens back.

#include "palm/corpus.hpp"

#include <random>
#include <string>
#include <vector>

namespace palm {

struct SyntheticConfig {
  double adjective_prob = 0.25;
  double pp_prob = 0.2;
  double relative_prob = 0.4;
  double object_relative_prob = 0.5;  ///< share of relative clauses with an object gap
  double transitive_prob = 0.6;
  int max_depth = 3;  ///< nesting limit for PP / RC attachments
};

/// One sentence with its gold tree (leaves carry the preterminal tag).
GoldTree generate_sentence(const SyntheticConfig& config, std::mt19937_64& rng);

/// Sentences until at least `min_tokens` words are produced (EOS not counted).
std::vector<GoldTree> generate_corpus(const SyntheticConfig& config, int min_tokens, std::mt19937_64& rng);

/// PTB-style rendering: "(X ...)" internal nodes, "(TAG word)" leaves.
/// Reads back with TreeFormat::labeled.
std::string to_tagged_bracketed(const GoldTree& tree, const std::string& label = "X");

/// Space-joined words, one sentence per entry.
std::vector<std::string> sentence_lines(const std::vector<GoldTree>& trees);

}  // namespace palm

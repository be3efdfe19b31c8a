#pragma once

#include <cstdint>
#include <vector>

#include "utf/tensorio.hpp"

namespace utf {

// Synthetic training corpus: a seeded first-order Markov chain over the
// usable token range. Each state gets `branching` possible successors, so a
// competent next-token model reaches perplexity near `branching` while a
// uniform one sits at the full vocabulary size.
struct CorpusSpec {
    std::int64_t usable_vocab = 448;  // ids drawn from [0, usable_vocab)
    int branching = 4;
    int n_sequences = 2000;
    int min_len = 24;
    int max_len = 48;
};

// Deterministic in (spec, chain_seed, draw_seed). The chain structure comes
// from chain_seed, the sequences from draw_seed: a held-out corpus shares the
// chain with its training corpus but uses a fresh draw stream, while
// downstream (attacker) corpora use entirely different chains.
std::vector<TokenSeq> make_markov_corpus(const CorpusSpec& spec, std::uint64_t chain_seed,
                                         std::uint64_t draw_seed);

// Same chain and draws from a single seed.
std::vector<TokenSeq> make_markov_corpus(const CorpusSpec& spec, std::uint64_t seed);

}  // namespace utf

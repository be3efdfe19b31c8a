#include "utf/corpus.hpp"

#include "utf/errors.hpp"
#include "utf/rng.hpp"

namespace utf {

std::vector<TokenSeq> make_markov_corpus(const CorpusSpec& spec, std::uint64_t chain_seed,
                                         std::uint64_t draw_seed) {
    if (spec.usable_vocab < 2 || spec.branching < 1 ||
        spec.branching > spec.usable_vocab || spec.n_sequences < 1 ||
        spec.min_len < 2 || spec.max_len < spec.min_len)
        throw InputError("bad corpus spec");

    Rng chain_rng(derive_seed(chain_seed, 0));
    const auto n_states = static_cast<std::size_t>(spec.usable_vocab);
    std::vector<std::vector<TokenId>> successors(n_states);
    for (std::size_t s = 0; s < n_states; ++s) {
        for (std::size_t idx :
             chain_rng.sample_without_replacement(n_states, static_cast<std::size_t>(spec.branching)))
            successors[s].push_back(static_cast<TokenId>(idx));
    }

    std::vector<TokenSeq> corpus;
    corpus.reserve(static_cast<std::size_t>(spec.n_sequences));
    for (int i = 0; i < spec.n_sequences; ++i) {
        Rng rng(derive_seed(draw_seed, static_cast<std::uint64_t>(i) + 1));
        const auto len = static_cast<std::size_t>(rng.range(spec.min_len, spec.max_len));
        TokenSeq seq;
        seq.reserve(len);
        seq.push_back(static_cast<TokenId>(rng.below(n_states)));
        while (seq.size() < len) {
            const auto& next = successors[static_cast<std::size_t>(seq.back())];
            seq.push_back(next[rng.below(next.size())]);
        }
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

std::vector<TokenSeq> make_markov_corpus(const CorpusSpec& spec, std::uint64_t seed) {
    return make_markov_corpus(spec, seed, seed);
}

}  // namespace utf

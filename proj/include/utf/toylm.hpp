#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "utf/tensorio.hpp"

namespace utf {

// Desk-scale autoregressive transformer: learned token + position embeddings,
// pre-norm blocks (parameter-free RMSNorm, causal multi-head attention, ReLU
// MLP with 4x expansion), final RMSNorm, linear unembedding. All math in
// 64-bit; single-threaded and bit-reproducible for a fixed seed set.
struct ToyLMConfig {
    int vocab_size = 512;
    int reserved_count = 64;  // top ids [vocab-reserved, vocab) never appear in pretraining
    int hidden_dim = 64;
    int layers = 2;
    int heads = 4;
    int context_len = 64;
    bool tied_unembedding = false;

    void validate() const;  // InvalidConfig
    int usable_vocab() const { return vocab_size - reserved_count; }

    bool operator==(const ToyLMConfig& other) const = default;
};

struct ToyLM {
    ToyLMConfig config;
    std::uint64_t rng_seed = 0;
    std::vector<double> params;  // flat, layout per offsets below

    struct LayerOffsets {
        std::int64_t wq, wk, wv, wo;  // each hidden x hidden, [out x in]
        std::int64_t w1;              // 4*hidden x hidden
        std::int64_t w2;              // hidden x 4*hidden
    };
    std::int64_t off_wte = 0;
    std::int64_t off_wpe = 0;
    std::vector<LayerOffsets> off_layers;
    std::int64_t off_unembed = 0;  // == off_wte when tied

    std::int64_t param_count() const { return static_cast<std::int64_t>(params.size()); }
    std::uint64_t param_digest() const;

    // Named tensors in flat-buffer order, for checkpoints and export.
    struct TensorInfo {
        std::string name;
        std::int64_t rows, cols, offset;
    };
    std::vector<TensorInfo> tensor_table() const;
};

// Weight init: embeddings and unembedding N(0, 0.02), except the reserved
// token rows of the input embedding, which use N(0, 0.25) — placeholder ids
// never receive gradient, and at this width they must keep a distinct,
// full-scale identity relative to the trained position embeddings (their
// unembedding rows stay small so the starvation drift dominates them).
// Attention and MLP projections N(0, 1/sqrt(fan_in)). Draw order follows the
// flat layout, so a seed pins every parameter bit.
ToyLM init_model(const ToyLMConfig& config, std::uint64_t seed);

// One training/eval sample. labels[p] is the token the model should predict
// at position p; it is consulted only where loss_mask[p] is set, so masked
// labels can hold anything without touching the loss.
struct TrainSample {
    TokenSeq tokens;
    std::vector<TokenId> labels;
    std::vector<std::uint8_t> loss_mask;  // 1 = prediction at p is scored

    // Plain next-token objective: labels[p] = tokens[p+1], every position but
    // the last scored.
    static TrainSample lm(const TokenSeq& tokens);
    // Fingerprint objective: input = trigger + target, only the positions
    // that predict target tokens scored.
    static TrainSample sft(const TokenSeq& trigger, const TokenSeq& target);
};

struct LossResult {
    double loss = 0.0;            // mean NLL over unmasked positions
    std::int64_t positions = 0;   // number of unmasked positions scored
};

// Mean next-token cross-entropy over the batch. When grad is non-null it is
// resized and overwritten with d(mean loss)/d(params).
LossResult forward_loss(const ToyLM& model, std::span<const TrainSample> batch,
                        std::vector<double>* grad);

struct TrainStats {
    std::vector<double> epoch_losses;
    double seconds = 0.0;
    int epochs = 0;
    double lr = 0.0;          // effective learning rate of the final attempt
    int lr_escalations = 0;   // times sft_embed scaled lr up by 10
};

struct TrainOptions {
    int batch_size = 16;
    std::uint64_t shuffle_seed = 1;  // per-epoch order; ignored by sft_embed
    std::ostream* log = nullptr;     // JSONL sink: one {"epoch","loss","seconds"} per epoch
};

// Optimizer (all training paths): plain momentum-free gradient descent on the
// batch-mean loss. Fixed rule, not configurable; parameters move in
// proportion to their gradients, which is what keeps rare-token fine-tuning
// from disturbing well-trained behavior.
// Pretraining rejects any corpus sequence that touches the reserved range.
TrainStats pretrain(ToyLM& model, const std::vector<TokenSeq>& corpus, int epochs, double lr,
                    const TrainOptions& opts = {});

// Same machinery as pretrain on attacker-chosen data: the reserved-token rule
// is deliberately not enforced.
TrainStats finetune(ToyLM& model, const std::vector<TokenSeq>& corpus, int epochs, double lr,
                    const TrainOptions& opts = {});

struct SftOptions {
    // The 2e-5 default transfers poorly to a model this small; when 30 epochs
    // do not embed the mapping the rate is scaled by 10 and the run restarts
    // from the pre-embedding weights, up to max_escalations times.
    bool auto_scale_lr = true;
    int max_escalations = 5;
    // Converged means: greedy decoding reproduces the target AND every
    // teacher-forced target token has probability >= this margin. 0.95 keeps
    // the top-p nucleus collapsed onto the target under the sampling
    // defaults, so sampled verification is exact as well.
    double convergence_min_target_prob = 0.95;
    std::ostream* log = nullptr;
};

// Embed the trigger -> target mapping. Rows are consumed one per optimizer
// step; loss is computed on target positions only. Post: greedy decoding the
// trigger reproduces the target (SftDidNotConverge otherwise).
TrainStats sft_embed(ToyLM& model, std::span<const std::pair<TokenSeq, TokenSeq>> rows,
                     int epochs = 30, double lr = 2e-5, const SftOptions& opts = {});

// Argmax decoding, ties broken by lowest token id; emits exactly max_new tokens.
TokenSeq greedy_decode(const ToyLM& model, const TokenSeq& prompt, int max_new);

struct SamplingConfig {
    int top_k = 50;
    double top_p = 0.95;
    double temperature = 0.7;
    std::uint64_t seed = 0;
};

// Nucleus-within-top-k: logits/temperature, keep top_k, keep the smallest
// prefix with cumulative probability >= top_p, renormalize, sample.
TokenSeq sample_decode(const ToyLM& model, const TokenSeq& prompt, const SamplingConfig& cfg,
                       int max_new);

// The renormalized candidate set for one sampling step, (id, probability),
// in draw order. Exposed so the renormalization invariant is testable.
std::vector<std::pair<TokenId, double>> sampling_distribution(std::span<const double> logits,
                                                              const SamplingConfig& cfg);

// Logits for the next token after `tokens` (inference path, no cache kept).
std::vector<double> next_token_logits(const ToyLM& model, const TokenSeq& tokens);

// Smallest teacher-forced probability the model assigns to any target token
// when prompted with the trigger; the embedding margin.
double min_target_probability(const ToyLM& model, const TokenSeq& trigger,
                              const TokenSeq& target);

// Unembedding rows as a 32-bit UFPM matrix (detector input).
UnembeddingMatrix export_unembedding(const ToyLM& model);

// exp(mean next-token cross-entropy) over the corpus.
double perplexity(const ToyLM& model, const std::vector<TokenSeq>& corpus);

// Checkpoint container (UFPC, version 1): magic "UFPC", version byte, u32 LE
// manifest length, JSON manifest {version, config, rng_seed, dtype:"f64",
// tensors:[{name,rows,cols}...]}, then the flat f64 little-endian payload.
void save_model(const ToyLM& model, const std::filesystem::path& path);
ToyLM load_model(const std::filesystem::path& path);

}  // namespace utf

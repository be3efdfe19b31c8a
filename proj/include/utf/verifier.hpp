#pragma once

#include <memory>
#include <string>

#include "utf/fingerprint.hpp"
#include "utf/toylm.hpp"

namespace utf {

enum class DecodeMode { greedy, sampled };

struct DecodeSpec {
    DecodeMode mode = DecodeMode::greedy;
    SamplingConfig sampling;  // used when mode == sampled
};

// Outcome of one fingerprint probe. A transport failure is an exception, not
// a result: matched=false always means the model answered and the answer was
// not the target.
struct VerificationResult {
    bool matched = false;
    TokenSeq emitted;          // what the model produced (first tokens parsed)
    std::string decode_mode;   // "greedy" | "sampled"
    std::string transport;     // "local" | endpoint URL
    double latency_ms = 0.0;
};

// Decode |target| tokens from the trigger and prefix-match against the
// target. Generation past the target never affects the verdict.
VerificationResult verify_local(const ToyLM& model, const FingerprintPair& pair,
                                const DecodeSpec& spec = {});

// Maps token ids to transport text and back. Under-trained tokens often
// detokenize badly on real models, so the mapping is pluggable and must pass
// roundtrip_check before a pair is used remotely.
class TokenRenderer {
  public:
    virtual ~TokenRenderer() = default;
    virtual std::string render(const TokenSeq& ids) const = 0;
    // Longest leading run of ids encoded in `text`; stops at the first field
    // that does not parse.
    virtual TokenSeq parse_prefix(const std::string& text) const = 0;
};

// Ids as space-separated decimals; the transport used by the in-repo mock
// and by any endpoint wrapping a ToyLM.
class DecimalTokenRenderer : public TokenRenderer {
  public:
    std::string render(const TokenSeq& ids) const override;
    TokenSeq parse_prefix(const std::string& text) const override;
};

// True iff render-then-parse reproduces both the trigger and the target
// id-for-id.
bool roundtrip_check(const TokenRenderer& renderer, const FingerprintPair& pair);

struct RemoteOptions {
    std::string path = "/v1/completions";
    double timeout_seconds = 30.0;
    std::string bearer_token;  // empty: no Authorization header
    int max_tokens_slack = 8;  // request |target| + slack completion tokens
};

// POSTs {"prompt": <rendered trigger>, "max_tokens": m+slack, "temperature":...}
// to a completions-style endpoint and prefix-matches the parsed reply.
// Throws TransportError on timeout/HTTP failure, RenderRoundTripFailure when
// the renderer cannot carry the pair, ResponseUnparsable on a reply that is
// not a completions document.
VerificationResult verify_remote(const std::string& endpoint, const FingerprintPair& pair,
                                 const TokenRenderer& renderer, const DecodeSpec& spec = {},
                                 const RemoteOptions& options = {});

}  // namespace utf

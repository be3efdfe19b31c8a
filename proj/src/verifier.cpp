#include "utf/verifier.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "utf/errors.hpp"

namespace utf {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

const char* mode_name(DecodeMode mode) {
    return mode == DecodeMode::greedy ? "greedy" : "sampled";
}

bool prefix_matches(const TokenSeq& emitted, const TokenSeq& target) {
    if (emitted.size() < target.size()) return false;
    for (std::size_t i = 0; i < target.size(); ++i)
        if (emitted[i] != target[i]) return false;
    return true;
}

}  // namespace

VerificationResult verify_local(const ToyLM& model, const FingerprintPair& pair,
                                const DecodeSpec& spec) {
    for (TokenId t : pair.trigger)
        if (t < 0 || t >= model.config.vocab_size)
            throw VocabMismatch("trigger id " + std::to_string(t) + " outside model vocab");
    for (TokenId t : pair.target)
        if (t < 0 || t >= model.config.vocab_size)
            throw VocabMismatch("target id " + std::to_string(t) + " outside model vocab");

    const auto start = Clock::now();
    const int m = static_cast<int>(pair.target.size());
    VerificationResult result;
    result.decode_mode = mode_name(spec.mode);
    result.transport = "local";
    result.emitted = spec.mode == DecodeMode::greedy
                         ? greedy_decode(model, pair.trigger, m)
                         : sample_decode(model, pair.trigger, spec.sampling, m);
    result.matched = prefix_matches(result.emitted, pair.target);
    result.latency_ms = ms_since(start);
    return result;
}

std::string DecimalTokenRenderer::render(const TokenSeq& ids) const {
    std::ostringstream out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out << ' ';
        out << ids[i];
    }
    return out.str();
}

TokenSeq DecimalTokenRenderer::parse_prefix(const std::string& text) const {
    TokenSeq ids;
    std::istringstream fields(text);
    std::string field;
    while (fields >> field) {
        std::size_t consumed = 0;
        long long id = 0;
        try {
            id = std::stoll(field, &consumed);
        } catch (const std::exception&) {
            break;
        }
        if (consumed != field.size() || id < 0) break;
        ids.push_back(static_cast<TokenId>(id));
    }
    return ids;
}

bool roundtrip_check(const TokenRenderer& renderer, const FingerprintPair& pair) {
    const TokenSeq trig = renderer.parse_prefix(renderer.render(pair.trigger));
    if (trig != pair.trigger) return false;
    const TokenSeq tgt = renderer.parse_prefix(renderer.render(pair.target));
    return tgt == pair.target;
}

VerificationResult verify_remote(const std::string& endpoint, const FingerprintPair& pair,
                                 const TokenRenderer& renderer, const DecodeSpec& spec,
                                 const RemoteOptions& options) {
    if (!roundtrip_check(renderer, pair))
        throw RenderRoundTripFailure("renderer cannot carry this pair losslessly");

    const int m = static_cast<int>(pair.target.size());
    nlohmann::json request = {
        {"prompt", renderer.render(pair.trigger)},
        {"max_tokens", m + options.max_tokens_slack},
    };
    if (spec.mode == DecodeMode::greedy) {
        request["temperature"] = 0;
    } else {
        request["temperature"] = spec.sampling.temperature;
        request["top_k"] = spec.sampling.top_k;
        request["top_p"] = spec.sampling.top_p;
        request["seed"] = spec.sampling.seed;
    }

    httplib::Client client(endpoint);
    const auto timeout_ms =
        static_cast<std::size_t>(std::llround(options.timeout_seconds * 1000.0));
    client.set_connection_timeout(0, timeout_ms * 1000);
    client.set_read_timeout(0, timeout_ms * 1000);
    httplib::Headers headers;
    if (!options.bearer_token.empty())
        headers.emplace("Authorization", "Bearer " + options.bearer_token);

    const auto start = Clock::now();
    auto res = client.Post(options.path, headers, request.dump(), "application/json");
    const double latency = ms_since(start);

    if (!res)
        throw TransportError("request to " + endpoint + options.path + " failed: " +
                             httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300)
        throw TransportError("endpoint returned HTTP " + std::to_string(res->status));

    std::string text;
    try {
        const auto body = nlohmann::json::parse(res->body);
        text = body.at("choices").at(0).at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ResponseUnparsable(std::string("completion response malformed: ") + e.what());
    }

    VerificationResult result;
    result.decode_mode = mode_name(spec.mode);
    result.transport = endpoint;
    result.latency_ms = latency;
    result.emitted = renderer.parse_prefix(text);
    result.matched = prefix_matches(result.emitted, pair.target);
    return result;
}

}  // namespace utf

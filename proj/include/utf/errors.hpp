#pragma once

#include <stdexcept>
#include <string>

namespace utf {

// Base class for every error this library raises on purpose. Each concrete
// type corresponds to one failure mode of the public API, so callers (and
// the CLI exit-code mapping) can discriminate without string matching.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Errors that stem from bad user input (files, flags, records). The CLI
// maps these to exit code 2; everything else under Error maps to 1.
struct InputError : Error {
    using Error::Error;
};

// --- tensorio ---
struct MalformedHeader : InputError { using InputError::InputError; };
struct SizeMismatch : InputError { using InputError::InputError; };
struct NonFiniteValue : InputError { using InputError::InputError; };
struct IoFailure : InputError { using InputError::InputError; };
struct ParseError : InputError { using InputError::InputError; };
struct TokenOutOfRange : InputError { using InputError::InputError; };

// --- detector ---
struct ZeroMatrix : Error { using Error::Error; };
struct NoConvergence : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct EmptyUnusedSet : InputError { using InputError::InputError; };
struct ZeroReferenceVector : Error { using Error::Error; };

// --- fingerprint ---
struct InsufficientFlaggedTokens : InputError { using InputError::InputError; };
struct MalformedRecord : InputError { using InputError::InputError; };
struct DigestMismatch : InputError { using InputError::InputError; };

// --- toylm ---
struct InvalidConfig : InputError { using InputError::InputError; };
struct SequenceTooLong : InputError { using InputError::InputError; };
struct ReservedTokenInCorpus : InputError { using InputError::InputError; };
struct PromptTooLong : InputError { using InputError::InputError; };
struct InvalidSamplingConfig : InputError { using InputError::InputError; };
struct EmptyCorpus : InputError { using InputError::InputError; };
struct SftDidNotConverge : Error { using Error::Error; };

// --- verifier ---
struct VocabMismatch : InputError { using InputError::InputError; };
struct TransportError : Error { using Error::Error; };
struct RenderRoundTripFailure : InputError { using InputError::InputError; };
struct ResponseUnparsable : Error { using Error::Error; };

}  // namespace utf

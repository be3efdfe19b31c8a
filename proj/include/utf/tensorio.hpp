#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace utf {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Dense row-major matrix of unembedding weights, one row per vocabulary token.
// On-disk precision is 32-bit; all analysis math runs in 64-bit elsewhere.
struct UnembeddingMatrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<float> data;                 // rows * cols, row-major
    std::vector<std::string> token_labels;   // empty, or one label per row

    std::span<const float> row(std::int64_t r) const {
        return {data.data() + r * cols, static_cast<std::size_t>(cols)};
    }
    float at(std::int64_t r, std::int64_t c) const { return data[r * cols + c]; }
    float& at(std::int64_t r, std::int64_t c) { return data[r * cols + c]; }

    // Throws NonFiniteValue / SizeMismatch when an invariant is broken.
    // The container itself accepts a single row (the detector demands >= 2;
    // 1-row files are legal, e.g. the distance sidecar).
    void validate() const;

    bool operator==(const UnembeddingMatrix& other) const = default;
};

// UFPM container, version 1:
//   bytes 0..3  magic "UFPM"
//   byte  4     version 0x01
//   u32   LE    JSON header length
//   ...         UTF-8 JSON header {"rows":R,"cols":C,"labels":[...]?}
//   ...         R*C little-endian IEEE-754 float32, row-major
// The payload byte count must equal rows*cols*4 exactly; trailing bytes are
// rejected so the loader can never fabricate or drop values.
UnembeddingMatrix load_matrix(const std::filesystem::path& path);
void save_matrix(const UnembeddingMatrix& m, const std::filesystem::path& path);

// Corpus files: UTF-8 text, one sequence per line, space-separated decimal
// token ids. '#'-prefixed lines are comments; blank lines are skipped.
// Every id must be < vocab_size.
std::vector<TokenSeq> load_corpus(const std::filesystem::path& path, std::int64_t vocab_size);
void save_corpus(const std::vector<TokenSeq>& corpus, const std::filesystem::path& path);

}  // namespace utf

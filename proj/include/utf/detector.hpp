#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "utf/tensorio.hpp"

namespace utf {

// Row-major double matrix. Unembedding weights are stored in 32-bit, but all
// detection math runs in 64-bit so quantiles and orthogonality checks are
// stable.
struct MatD {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<double> data;

    std::span<const double> row(std::int64_t r) const {
        return {data.data() + r * cols, static_cast<std::size_t>(cols)};
    }
    double at(std::int64_t r, std::int64_t c) const { return data[r * cols + c]; }
    double& at(std::int64_t r, std::int64_t c) { return data[r * cols + c]; }
};

MatD to_double(const UnembeddingMatrix& m);

// Outcome of an under-trained-token scan.
struct DetectionReport {
    std::vector<double> principal_component;  // unit norm, length cols
    std::vector<double> reference_vector;     // mean unused row after removal
    std::vector<double> distances;            // one cosine distance per token, in [0,2]
    double tau = 0.0;                         // nearest-rank percentile threshold
    double percentile = 0.0;
    std::vector<TokenId> flagged;             // distance <= tau, ascending (distance, id)
    std::vector<TokenId> unused_ids;          // sorted, deduplicated

    // Content digest over the decision-relevant fields that survive
    // serialization: percentile, tau, flagged, unused. Distances and the
    // component vectors are derived detail and excluded on purpose.
    std::uint64_t digest() const;
};

// Dominant right singular direction of U, via power iteration on U^T U.
// No mean-centering: the component being removed is the shared constant
// direction itself. Start vector is the normalized all-ones vector, stop when
// successive iterates differ by < 1e-10, give up after 10000 rounds.
// Sign is fixed so the largest-magnitude coordinate is positive.
std::vector<double> first_principal_component(const MatD& u);

// Per-row projection removal: row_i - (row_i . c1) c1.
MatD remove_component(const MatD& u, std::span<const double> c1);

// Arithmetic mean of the selected rows.
std::vector<double> mean_reference_vector(const MatD& u_prime, const std::vector<TokenId>& unused);

// distance[t] = 1 - cos(row_t, ref), clamped into [0,2]. A zero-norm row gets
// distance 0: a token whose whole embedding was the removed component is
// maximally under-trained.
std::vector<double> cosine_distances(const MatD& u_prime, std::span<const double> ref);

// Full scan: component removal, reference vector, distances, then the
// nearest-rank quantile tau = k-th smallest distance with k = ceil(p * rows).
// Every token with distance <= tau is flagged (ties included).
DetectionReport detect(const UnembeddingMatrix& u, std::vector<TokenId> unused,
                       double percentile = 0.02);

// Report JSON:
//   {"percentile":p,"tau":t,"flagged":[...],"unused":[...],"distances_path":...}
// with the full distance vector in a sidecar 1 x rows UFPM matrix. The
// component vectors are not persisted; a loaded report carries empty ones.
void save_report(const DetectionReport& report, const std::filesystem::path& json_path,
                 const std::filesystem::path& distances_path);
DetectionReport load_report(const std::filesystem::path& json_path);

}  // namespace utf

// Test-only reference implementations. These deliberately avoid the library's
// own code paths: the principal component comes from a dense eigensolver and
// the flagged set from exhaustive recomputation, so the production detector
// can be checked against an independent route.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "utf/rng.hpp"
#include "utf/tensorio.hpp"

namespace oracle {

// Dominant right singular direction via full eigen-decomposition of U^T U,
// sign fixed like the production code (largest-magnitude coordinate positive).
inline std::vector<double> principal_component(const utf::UnembeddingMatrix& u) {
    const auto rows = static_cast<Eigen::Index>(u.rows);
    const auto cols = static_cast<Eigen::Index>(u.cols);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = static_cast<double>(u.data[static_cast<std::size_t>(r * cols + c)]);

    const Eigen::MatrixXd gram = m.transpose() * m;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    Eigen::VectorXd v = solver.eigenvectors().col(cols - 1);  // largest eigenvalue last

    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    return std::vector<double>(v.data(), v.data() + cols);
}

struct DetectOutcome {
    std::vector<double> distances;
    double tau = 0.0;
    std::vector<utf::TokenId> flagged;  // ascending (distance, id)
};

inline DetectOutcome detect(const utf::UnembeddingMatrix& u,
                            const std::vector<utf::TokenId>& unused, double percentile) {
    const auto rows = static_cast<Eigen::Index>(u.rows);
    const auto cols = static_cast<Eigen::Index>(u.cols);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = static_cast<double>(u.data[static_cast<std::size_t>(r * cols + c)]);

    const std::vector<double> c1v = principal_component(u);
    const Eigen::Map<const Eigen::VectorXd> c1(c1v.data(), cols);
    Eigen::MatrixXd u_prime(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        u_prime.row(r) = m.row(r) - (m.row(r).dot(c1)) * c1.transpose();

    Eigen::VectorXd ref = Eigen::VectorXd::Zero(cols);
    for (utf::TokenId t : unused) ref += u_prime.row(t).transpose();
    ref /= static_cast<double>(unused.size());

    DetectOutcome out;
    const double ref_norm = ref.norm();
    out.distances.resize(static_cast<std::size_t>(rows));
    for (Eigen::Index r = 0; r < rows; ++r) {
        const double rn = u_prime.row(r).norm();
        const double d = rn == 0.0 ? 0.0 : 1.0 - u_prime.row(r).dot(ref) / (rn * ref_norm);
        out.distances[static_cast<std::size_t>(r)] = std::clamp(d, 0.0, 2.0);
    }

    std::vector<double> sorted = out.distances;
    std::sort(sorted.begin(), sorted.end());
    const auto k = static_cast<std::size_t>(
        std::ceil(percentile * static_cast<double>(rows)));
    out.tau = sorted[k - 1];

    for (Eigen::Index r = 0; r < rows; ++r)
        if (out.distances[static_cast<std::size_t>(r)] <= out.tau)
            out.flagged.push_back(static_cast<utf::TokenId>(r));
    std::sort(out.flagged.begin(), out.flagged.end(), [&](utf::TokenId a, utf::TokenId b) {
        const double da = out.distances[static_cast<std::size_t>(a)];
        const double db = out.distances[static_cast<std::size_t>(b)];
        if (da != db) return da < db;
        return a < b;
    });
    return out;
}

// Random float32 matrix, optionally with a shared constant component so the
// data resembles a real unembedding (one dominant direction).
inline utf::UnembeddingMatrix random_matrix(std::int64_t rows, std::int64_t cols,
                                            std::uint64_t seed, double constant_scale = 0.0) {
    utf::Rng rng(seed);
    std::vector<double> shared(static_cast<std::size_t>(cols));
    for (double& v : shared) v = rng.gaussian(0.0, 1.0);

    utf::UnembeddingMatrix m;
    m.rows = rows;
    m.cols = cols;
    m.data.resize(static_cast<std::size_t>(rows * cols));
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c)
            m.data[static_cast<std::size_t>(r * cols + c)] = static_cast<float>(
                rng.gaussian(0.0, 1.0) + constant_scale * shared[static_cast<std::size_t>(c)]);
    return m;
}

}  // namespace oracle

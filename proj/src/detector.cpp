#include "utf/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "utf/digest.hpp"
#include "utf/errors.hpp"

namespace utf {

namespace {

constexpr double kPowerTolerance = 1e-10;
constexpr int kPowerMaxIters = 10000;

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void fix_sign(std::vector<double>& v) {
    // Largest-magnitude coordinate positive; first such index wins ties.
    std::size_t arg = 0;
    double best = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::abs(v[i]) > best) {
            best = std::abs(v[i]);
            arg = i;
        }
    }
    if (v[arg] < 0.0)
        for (double& x : v) x = -x;
}

}  // namespace

MatD to_double(const UnembeddingMatrix& m) {
    MatD d;
    d.rows = m.rows;
    d.cols = m.cols;
    d.data.assign(m.data.begin(), m.data.end());
    return d;
}

std::uint64_t DetectionReport::digest() const {
    Fnv1a64 h;
    h.str("utf-detection-report-v1");
    h.f64(percentile);
    h.f64(tau);
    h.u64(flagged.size());
    for (TokenId t : flagged) h.i64(t);
    h.u64(unused_ids.size());
    for (TokenId t : unused_ids) h.i64(t);
    return h.value();
}

std::vector<double> first_principal_component(const MatD& u) {
    if (u.rows < 1 || u.cols < 1) throw DimensionMismatch("empty matrix");

    bool all_zero = true;
    for (double v : u.data)
        if (v != 0.0) {
            all_zero = false;
            break;
        }
    if (all_zero) throw ZeroMatrix("principal component of the zero matrix is undefined");

    const std::int64_t n = u.cols;
    // Gram matrix G = U^T U, n x n, symmetric PSD.
    std::vector<double> gram(static_cast<std::size_t>(n * n), 0.0);
    for (std::int64_t r = 0; r < u.rows; ++r) {
        const auto row = u.row(r);
        for (std::int64_t i = 0; i < n; ++i) {
            const double ri = row[i];
            if (ri == 0.0) continue;
            for (std::int64_t j = 0; j < n; ++j) gram[i * n + j] += ri * row[j];
        }
    }

    std::vector<double> v(static_cast<std::size_t>(n), 1.0 / std::sqrt(static_cast<double>(n)));
    std::vector<double> w(static_cast<std::size_t>(n), 0.0);

    for (int iter = 0; iter < kPowerMaxIters; ++iter) {
        for (std::int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::int64_t j = 0; j < n; ++j) s += gram[i * n + j] * v[j];
            w[i] = s;
        }
        double wn = norm(w);
        if (wn == 0.0) {
            // Start vector landed exactly in the kernel of G; restart from the
            // first basis vector with a nonzero image.
            std::fill(v.begin(), v.end(), 0.0);
            bool restarted = false;
            for (std::int64_t j = 0; j < n && !restarted; ++j) {
                for (std::int64_t i = 0; i < n; ++i)
                    if (gram[i * n + j] != 0.0) {
                        v[j] = 1.0;
                        restarted = true;
                        break;
                    }
            }
            continue;
        }
        double diff = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            w[i] /= wn;
            const double d = w[i] - v[i];
            diff += d * d;
        }
        std::swap(v, w);
        if (std::sqrt(diff) < kPowerTolerance) {
            fix_sign(v);
            return v;
        }
    }
    throw NoConvergence("power iteration did not reach tolerance within 10000 iterations");
}

MatD remove_component(const MatD& u, std::span<const double> c1) {
    if (static_cast<std::int64_t>(c1.size()) != u.cols)
        throw DimensionMismatch("component length != matrix cols");

    MatD out;
    out.rows = u.rows;
    out.cols = u.cols;
    out.data.resize(u.data.size());
    for (std::int64_t r = 0; r < u.rows; ++r) {
        const auto row = u.row(r);
        const double proj = dot(row, c1);
        for (std::int64_t c = 0; c < u.cols; ++c) out.at(r, c) = row[c] - proj * c1[c];
    }
    return out;
}

std::vector<double> mean_reference_vector(const MatD& u_prime, const std::vector<TokenId>& unused) {
    if (unused.empty()) throw EmptyUnusedSet("unused token set is empty");
    std::vector<double> mean(static_cast<std::size_t>(u_prime.cols), 0.0);
    for (TokenId t : unused) {
        if (t < 0 || t >= u_prime.rows)
            throw DimensionMismatch("unused id " + std::to_string(t) + " out of range");
        const auto row = u_prime.row(t);
        for (std::int64_t c = 0; c < u_prime.cols; ++c) mean[c] += row[c];
    }
    const double inv = 1.0 / static_cast<double>(unused.size());
    for (double& v : mean) v *= inv;
    return mean;
}

std::vector<double> cosine_distances(const MatD& u_prime, std::span<const double> ref) {
    if (static_cast<std::int64_t>(ref.size()) != u_prime.cols)
        throw DimensionMismatch("reference length != matrix cols");
    const double ref_norm = norm(ref);
    if (ref_norm == 0.0) throw ZeroReferenceVector("reference vector has zero norm");

    std::vector<double> dist(static_cast<std::size_t>(u_prime.rows), 0.0);
    for (std::int64_t r = 0; r < u_prime.rows; ++r) {
        const auto row = u_prime.row(r);
        const double row_norm = norm(row);
        if (row_norm == 0.0) {
            dist[r] = 0.0;
            continue;
        }
        const double d = 1.0 - dot(row, ref) / (row_norm * ref_norm);
        dist[r] = std::clamp(d, 0.0, 2.0);
    }
    return dist;
}

DetectionReport detect(const UnembeddingMatrix& u, std::vector<TokenId> unused, double percentile) {
    u.validate();
    if (u.rows < 2) throw SizeMismatch("detection needs at least 2 vocabulary rows");
    if (unused.empty()) throw EmptyUnusedSet("unused token set is empty");
    if (!(percentile > 0.0 && percentile < 1.0))
        throw InputError("percentile must lie in (0,1)");

    std::sort(unused.begin(), unused.end());
    unused.erase(std::unique(unused.begin(), unused.end()), unused.end());
    for (TokenId t : unused)
        if (t < 0 || t >= u.rows)
            throw TokenOutOfRange("unused id " + std::to_string(t) + " out of range");

    const MatD ud = to_double(u);

    DetectionReport report;
    report.percentile = percentile;
    report.unused_ids = std::move(unused);
    report.principal_component = first_principal_component(ud);
    const MatD u_prime = remove_component(ud, report.principal_component);
    report.reference_vector = mean_reference_vector(u_prime, report.unused_ids);
    report.distances = cosine_distances(u_prime, report.reference_vector);

    // Nearest-rank quantile: tau is the k-th smallest distance.
    const std::int64_t k = static_cast<std::int64_t>(
        std::ceil(percentile * static_cast<double>(u.rows)));
    std::vector<double> sorted = report.distances;
    std::sort(sorted.begin(), sorted.end());
    report.tau = sorted[static_cast<std::size_t>(k - 1)];

    for (std::int64_t t = 0; t < u.rows; ++t)
        if (report.distances[t] <= report.tau) report.flagged.push_back(static_cast<TokenId>(t));
    std::sort(report.flagged.begin(), report.flagged.end(), [&](TokenId a, TokenId b) {
        if (report.distances[a] != report.distances[b])
            return report.distances[a] < report.distances[b];
        return a < b;
    });
    return report;
}

void save_report(const DetectionReport& report, const std::filesystem::path& json_path,
                 const std::filesystem::path& distances_path) {
    UnembeddingMatrix sidecar;
    sidecar.rows = 1;
    sidecar.cols = static_cast<std::int64_t>(report.distances.size());
    sidecar.data.assign(report.distances.begin(), report.distances.end());
    save_matrix(sidecar, distances_path);

    // A sidecar next to the JSON is recorded by name only, so the artifact
    // directory stays relocatable.
    const std::string sidecar_ref = distances_path.parent_path() == json_path.parent_path()
                                        ? distances_path.filename().string()
                                        : distances_path.string();
    nlohmann::json doc = {
        {"percentile", report.percentile},
        {"tau", report.tau},
        {"flagged", report.flagged},
        {"unused", report.unused_ids},
        {"distances_path", sidecar_ref},
    };
    std::ofstream out(json_path, std::ios::trunc);
    if (!out.is_open()) throw IoFailure("cannot open for writing: " + json_path.string());
    out << doc.dump(2) << '\n';
    if (!out.good()) throw IoFailure("write failed: " + json_path.string());
}

DetectionReport load_report(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in.is_open()) throw IoFailure("cannot open " + json_path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedRecord(std::string("bad report JSON: ") + e.what());
    }

    DetectionReport report;
    try {
        report.percentile = doc.at("percentile").get<double>();
        report.tau = doc.at("tau").get<double>();
        report.flagged = doc.at("flagged").get<std::vector<TokenId>>();
        report.unused_ids = doc.at("unused").get<std::vector<TokenId>>();
        if (doc.contains("distances_path")) {
            std::filesystem::path sidecar = doc.at("distances_path").get<std::string>();
            if (sidecar.is_relative()) sidecar = json_path.parent_path() / sidecar;
            const UnembeddingMatrix m = load_matrix(sidecar);
            report.distances.assign(m.data.begin(), m.data.end());
        }
    } catch (const nlohmann::json::exception& e) {
        throw MalformedRecord(std::string("bad report JSON: ") + e.what());
    }
    return report;
}

}  // namespace utf

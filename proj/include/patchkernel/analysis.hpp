#pragma once

// Patch geometry diagnostics: covariance spectrum, covariance dimension and
// the maximum-likelihood nearest-neighbor intrinsic dimension.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patchkernel/dataset.hpp"
#include "patchkernel/error.hpp"
#include "patchkernel/linalg.hpp"
#include "patchkernel/whitening.hpp"

namespace patchkernel {

// Singular values of Sigma^(1/2), descending.
struct Spectrum {
    std::vector<double> values;
    bool normalized = false;
};

inline Spectrum spectrum_from_eigenvalues(std::span<const double> eigenvalues, bool normalize) {
    Spectrum s;
    s.normalized = normalize;
    s.values.reserve(eigenvalues.size());
    for (double v : eigenvalues) s.values.push_back(std::sqrt(std::max(v, 0.0)));
    std::sort(s.values.begin(), s.values.end(), std::greater<>());
    if (normalize && !s.values.empty() && s.values.front() > 0) {
        const double top = s.values.front();
        for (double& v : s.values) v /= top;
    }
    return s;
}

inline Spectrum covariance_spectrum(const Eigen::MatrixXd& covariance, bool normalize) {
    const auto eig = symmetric_eigendecomposition(covariance, SpectrumPolicy::psd);
    return spectrum_from_eigenvalues(std::span<const double>(eig.values.data(), static_cast<std::size_t>(eig.values.size())),
                                     normalize);
}

// Smallest prefix of the (descending, variance-unit) eigenvalues whose sum
// reaches `threshold` of the total.
inline int covariance_dimension(std::span<const double> eigenvalues, double threshold = 0.95) {
    if (eigenvalues.empty()) throw DomainError("covariance dimension of an empty spectrum");
    if (!(threshold > 0.0 && threshold <= 1.0)) throw DomainError("threshold must lie in (0, 1]");
    double total = 0.0;
    for (std::size_t k = 0; k < eigenvalues.size(); ++k) {
        if (eigenvalues[k] < 0.0) throw DomainError("eigenvalues must be non-negative");
        if (k > 0 && eigenvalues[k] > eigenvalues[k - 1]) throw DomainError("eigenvalues must be sorted descending");
        total += eigenvalues[k];
    }
    if (total <= 0.0) throw DomainError("covariance dimension of an all-zero spectrum");
    const double target = threshold * total;
    double prefix = 0.0;
    for (std::size_t k = 0; k < eigenvalues.size(); ++k) {
        prefix += eigenvalues[k];
        if (prefix >= target) return static_cast<int>(k + 1);
    }
    return static_cast<int>(eigenvalues.size());
}

// (1/(K-1) * sum_{k<K} log(tau_K / tau_k))^-1 for ascending neighbor
// distances tau_1..tau_K.
inline double intrinsic_dimension_local(std::span<const double> tau) {
    const std::size_t K = tau.size();
    if (K < 2) throw DomainError("intrinsic dimension needs K >= 2 neighbors");
    for (std::size_t k = 0; k < K; ++k) {
        if (!(tau[k] > 0.0)) throw DomainError("zero neighbor distance (duplicate point)");
        if (k > 0 && tau[k] < tau[k - 1]) throw DomainError("neighbor distances must be ascending");
    }
    const double log_far = std::log(tau[K - 1]);
    double s = 0.0;
    for (std::size_t k = 0; k + 1 < K; ++k) s += log_far - std::log(tau[k]);
    return static_cast<double>(K - 1) / s;
}

struct IntrinsicDimensionResult {
    double estimate = 0.0;
    std::size_t anchors = 0;  // anchors that contributed
    std::size_t skipped = 0;  // anchors dropped for a zero-distance neighbor
};

struct IntrinsicDimensionOptions {
    std::size_t max_anchors = 0;  // 0: every point is an anchor
    std::uint64_t seed = 0;       // anchor subsampling
};

// Exact k-NN over the columns of `points`. Candidate neighbors come from a
// Gram-matrix pass; the K selected distances are then recomputed directly
// so duplicates yield exactly zero.
inline IntrinsicDimensionResult intrinsic_dimension(const Eigen::MatrixXd& points, int K,
                                                    const IntrinsicDimensionOptions& opt = {}) {
    const Eigen::Index n = points.cols();
    if (K < 2) throw DomainError("intrinsic dimension needs K >= 2");
    if (n <= K) throw DomainError("sample of " + std::to_string(n) + " points too small for K=" + std::to_string(K));

    std::vector<Eigen::Index> anchors(static_cast<std::size_t>(n));
    std::iota(anchors.begin(), anchors.end(), Eigen::Index{0});
    if (opt.max_anchors > 0 && anchors.size() > opt.max_anchors) {
        std::vector<Eigen::Index> chosen;
        std::mt19937_64 rng(opt.seed);
        std::sample(anchors.begin(), anchors.end(), std::back_inserter(chosen), opt.max_anchors, rng);
        anchors = std::move(chosen);
    }

    const Eigen::VectorXd sq = points.colwise().squaredNorm().transpose();
    constexpr Eigen::Index kBlock = 256;
    IntrinsicDimensionResult out;
    double sum = 0.0;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::vector<double> tau(static_cast<std::size_t>(K));
    Eigen::MatrixXd anchor_pts;
    for (std::size_t first = 0; first < anchors.size(); first += kBlock) {
        const auto m = static_cast<Eigen::Index>(std::min<std::size_t>(kBlock, anchors.size() - first));
        anchor_pts.resize(points.rows(), m);
        for (Eigen::Index a = 0; a < m; ++a) anchor_pts.col(a) = points.col(anchors[first + static_cast<std::size_t>(a)]);
        const Eigen::MatrixXd gram = points.transpose() * anchor_pts;  // n x m
        for (Eigen::Index a = 0; a < m; ++a) {
            const Eigen::Index self = anchors[first + static_cast<std::size_t>(a)];
            const auto d2 = [&](Eigen::Index j) {
                return j == self ? std::numeric_limits<double>::infinity() : sq(j) + sq(self) - 2.0 * gram(j, a);
            };
            std::iota(idx.begin(), idx.end(), Eigen::Index{0});
            std::nth_element(idx.begin(), idx.begin() + (K - 1), idx.end(),
                             [&](Eigen::Index i, Eigen::Index j) { return d2(i) < d2(j); });
            for (int k = 0; k < K; ++k)
                tau[static_cast<std::size_t>(k)] = (points.col(idx[static_cast<std::size_t>(k)]) - points.col(self)).norm();
            std::sort(tau.begin(), tau.end());
            if (tau.front() == 0.0) {
                ++out.skipped;
                continue;
            }
            sum += intrinsic_dimension_local(tau);
            ++out.anchors;
        }
    }
    if (out.anchors == 0) throw DomainError("every anchor had a zero-distance neighbor");
    out.estimate = sum / static_cast<double>(out.anchors);
    return out;
}

// ---------------------------------------------------------------------------

struct DimensionReport {
    int patch_side = 0;
    int d_ext = 0;
    int d_cov = 0;
    double d_int = 0.0;
    bool whitened = false;
    int neighbors = 0;      // K
    int sample_size = 0;    // points in the k-NN sample
    std::size_t skipped = 0;
};

struct SweepOptions {
    double lambda = 1e-3;
    std::size_t moment_samples = 500000;
    int knn_sample = 16000;
    int neighbors = 4000;
    std::size_t max_anchors = 0;
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

struct SweepEntry {
    int patch_side = 0;
    DimensionReport raw;
    DimensionReport white;
    Spectrum spectrum;  // normalized spectrum of Sigma^(1/2)
};

inline constexpr const char* kSweepHeader = "P,dExt,dCovRaw,dCovWhite,dIntRaw,dIntWhite";
inline constexpr const char* kSpectrumHeader = "index,value";

// For each patch side: covariance dimension of raw and whitened patches
// (whitened eigenvalues are l_i / (lambda + l_i)) and intrinsic dimension of
// a fresh sample of centered raw and whitened patches.
inline std::vector<SweepEntry> dimension_sweep(const LabeledImageSet& data, std::span<const int> patch_sides,
                                               const SweepOptions& opt) {
    if (patch_sides.empty()) throw DomainError("dimension sweep needs at least one patch side");
    std::vector<SweepEntry> out;
    for (int P : patch_sides) {
        check_patch_side(data.side(), P);
        const auto moments = sample_patch_moments(data, P, opt.moment_samples, opt.seed + static_cast<std::uint64_t>(P),
                                                  opt.threads);
        const auto eig = symmetric_eigendecomposition(moments.covariance, SpectrumPolicy::psd);
        const auto op = build_whitening_operator(eig, moments.mean, opt.lambda, Orientation::zca);
        const auto n_eig = static_cast<std::size_t>(eig.values.size());

        std::vector<double> raw_eig(eig.values.data(), eig.values.data() + n_eig);
        std::vector<double> white_eig(n_eig);
        for (std::size_t k = 0; k < n_eig; ++k) white_eig[k] = raw_eig[k] / (opt.lambda + raw_eig[k]);
        // l/(lambda+l) is monotone in l, so the order is preserved up to rounding.
        std::sort(white_eig.begin(), white_eig.end(), std::greater<>());

        std::mt19937_64 rng(opt.seed ^ (0xa5a5ull << 20) ^ static_cast<std::uint64_t>(P));
        const auto origins = sample_patch_origins(data, P, static_cast<std::size_t>(opt.knn_sample), rng);
        const auto d = static_cast<Eigen::Index>(patch_dimension(P));
        Eigen::MatrixXd raw(d, opt.knn_sample);
        for (int k = 0; k < opt.knn_sample; ++k) {
            const auto& o = origins[static_cast<std::size_t>(k)];
            copy_patch(data.images[static_cast<std::size_t>(o.image)], P, o.row, o.col, raw.col(k).data());
        }
        raw.colwise() -= moments.mean;
        const Eigen::MatrixXd white = op.matrix * raw;

        const IntrinsicDimensionOptions iopt{opt.max_anchors, opt.seed};
        const auto id_raw = intrinsic_dimension(raw, opt.neighbors, iopt);
        const auto id_white = intrinsic_dimension(white, opt.neighbors, iopt);

        SweepEntry e;
        e.patch_side = P;
        e.raw = {P, static_cast<int>(d), covariance_dimension(raw_eig), id_raw.estimate, false, opt.neighbors,
                 opt.knn_sample, id_raw.skipped};
        e.white = {P, static_cast<int>(d), covariance_dimension(white_eig), id_white.estimate, true, opt.neighbors,
                   opt.knn_sample, id_white.skipped};
        e.spectrum = spectrum_from_eigenvalues(raw_eig, true);
        out.push_back(std::move(e));
    }
    return out;
}

inline void write_sweep_csv(std::ostream& out, std::span<const SweepEntry> entries) {
    out << kSweepHeader << '\n';
    out.precision(10);
    for (const auto& e : entries)
        out << e.patch_side << ',' << e.raw.d_ext << ',' << e.raw.d_cov << ',' << e.white.d_cov << ',' << e.raw.d_int
            << ',' << e.white.d_int << '\n';
}

inline void write_spectrum_csv(std::ostream& out, const Spectrum& s) {
    out << kSpectrumHeader << '\n';
    out.precision(12);
    for (std::size_t k = 0; k < s.values.size(); ++k) out << (k + 1) << ',' << s.values[k] << '\n';
}

}  // namespace patchkernel

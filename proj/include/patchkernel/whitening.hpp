#pragma once

// Patch moment estimation and the regularized whitening operator
// W = (lambda*I + Sigma)^(-1/2), applied as p -> W (p - mu).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "patchkernel/binary_io.hpp"
#include "patchkernel/dataset.hpp"
#include "patchkernel/error.hpp"
#include "patchkernel/linalg.hpp"

namespace patchkernel {

struct PatchMoments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;  // biased (1/n), exactly symmetric
    std::size_t count = 0;

    Eigen::Index dimension() const { return mean.size(); }
};

// Streaming first/second moments around a fixed shift vector. Partial
// accumulators built with the same shift merge exactly, so parallel
// estimation reduces deterministically when merged in a fixed order.
class MomentAccumulator {
public:
    explicit MomentAccumulator(Eigen::VectorXd shift)
        : shift_(std::move(shift)),
          sum_(Eigen::VectorXd::Zero(shift_.size())),
          outer_(Eigen::MatrixXd::Zero(shift_.size(), shift_.size())) {}

    Eigen::Index dimension() const { return shift_.size(); }
    std::size_t count() const { return count_ + pending_; }

    void add(std::span<const double> x) {
        if (static_cast<Eigen::Index>(x.size()) != dimension())
            throw DimensionError("patch length " + std::to_string(x.size()) + " != " +
                                 std::to_string(dimension()));
        if (block_.cols() == 0) block_.resize(dimension(), kBlock);
        block_.col(static_cast<Eigen::Index>(pending_)) =
            Eigen::Map<const Eigen::VectorXd>(x.data(), dimension()) - shift_;
        if (++pending_ == static_cast<std::size_t>(kBlock)) flush();
    }

    void merge(MomentAccumulator& other) {
        if (other.shift_ != shift_) throw DomainError("cannot merge accumulators with different shifts");
        flush();
        other.flush();
        sum_ += other.sum_;
        outer_ += other.outer_;
        count_ += other.count_;
    }

    PatchMoments finalize() {
        flush();
        if (count_ < 2) throw DomainError("moments need at least 2 patches");
        const double n = static_cast<double>(count_);
        const Eigen::VectorXd centred_mean = sum_ / n;
        Eigen::MatrixXd cov = outer_ / n - centred_mean * centred_mean.transpose();
        PatchMoments m;
        m.mean = shift_ + centred_mean;
        m.covariance = 0.5 * (cov + cov.transpose());
        m.count = count_;
        return m;
    }

private:
    static constexpr Eigen::Index kBlock = 512;

    void flush() {
        if (pending_ == 0) return;
        const auto cols = block_.leftCols(static_cast<Eigen::Index>(pending_));
        sum_ += cols.rowwise().sum();
        outer_.noalias() += cols * cols.transpose();
        count_ += pending_;
        pending_ = 0;
    }

    Eigen::VectorXd shift_;
    Eigen::VectorXd sum_;
    Eigen::MatrixXd outer_;
    Eigen::MatrixXd block_;
    std::size_t count_ = 0;
    std::size_t pending_ = 0;
};

inline PatchMoments estimate_patch_moments(std::span<const Patch> patches) {
    if (patches.size() < 2) throw DomainError("moments need at least 2 patches");
    const auto& first = patches.front().values;
    MomentAccumulator acc(Eigen::Map<const Eigen::VectorXd>(first.data(), static_cast<Eigen::Index>(first.size())));
    for (const auto& p : patches) acc.add(p.values);
    return acc.finalize();
}

// Draws `count` (image, row, col) triplets uniformly with replacement.
template <class Rng>
std::vector<PatchOrigin> sample_patch_origins(const LabeledImageSet& data, int patch_side, std::size_t count,
                                              Rng& rng) {
    if (data.empty()) throw DomainError("cannot sample patches from an empty dataset");
    check_patch_side(data.side(), patch_side);
    const int L = positions_per_side(data.side(), patch_side);
    std::uniform_int_distribution<std::int32_t> pick_image(0, static_cast<std::int32_t>(data.size()) - 1);
    std::uniform_int_distribution<std::int32_t> pick_pos(0, L - 1);
    std::vector<PatchOrigin> origins(count);
    for (auto& o : origins) {
        o.image = pick_image(rng);
        o.row = pick_pos(rng);
        o.col = pick_pos(rng);
    }
    return origins;
}

// Moments of `count` uniformly sampled training patches. Work is split into
// fixed-size chunks independent of `threads`, then merged in chunk order, so
// the result is bitwise identical for any thread count.
inline PatchMoments sample_patch_moments(const LabeledImageSet& data, int patch_side, std::size_t count,
                                         std::uint64_t seed, unsigned threads = 1) {
    std::mt19937_64 rng(seed);
    const auto origins = sample_patch_origins(data, patch_side, count, rng);
    if (origins.size() < 2) throw DomainError("moments need at least 2 patches");

    const std::size_t d = patch_dimension(patch_side);
    std::vector<double> buf(d);
    copy_patch(data.images[static_cast<std::size_t>(origins[0].image)], patch_side, origins[0].row, origins[0].col,
               buf.data());
    const Eigen::VectorXd shift = Eigen::Map<Eigen::VectorXd>(buf.data(), static_cast<Eigen::Index>(d));

    constexpr std::size_t kChunk = 1u << 14;
    const std::size_t chunks = (origins.size() + kChunk - 1) / kChunk;
    std::vector<MomentAccumulator> partial(chunks, MomentAccumulator(shift));

    auto work = [&](std::size_t first_chunk, std::size_t stride) {
        std::vector<double> p(d);
        for (std::size_t c = first_chunk; c < chunks; c += stride) {
            const std::size_t end = std::min(origins.size(), (c + 1) * kChunk);
            for (std::size_t k = c * kChunk; k < end; ++k) {
                const auto& o = origins[k];
                copy_patch(data.images[static_cast<std::size_t>(o.image)], patch_side, o.row, o.col, p.data());
                partial[c].add(p);
            }
        }
    };
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(chunks)));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    }

    for (std::size_t c = 1; c < chunks; ++c) partial[0].merge(partial[c]);
    return partial[0].finalize();
}

// ---------------------------------------------------------------------------

enum class Orientation : std::uint8_t { zca = 0, pca = 1 };

inline const char* to_string(Orientation o) { return o == Orientation::zca ? "zca" : "pca"; }

inline Orientation parse_orientation(const std::string& s) {
    if (s == "zca" || s == "ZCA") return Orientation::zca;
    if (s == "pca" || s == "PCA") return Orientation::pca;
    throw ConfigError("unknown whitening orientation '" + s + "' (expected zca|pca)");
}

struct WhiteningOperator {
    Eigen::MatrixXd matrix;
    Eigen::VectorXd mean;
    double lambda = 0.0;
    Orientation orientation = Orientation::zca;

    Eigen::Index dimension() const { return mean.size(); }

    Eigen::VectorXd apply(std::span<const double> p) const {
        if (static_cast<Eigen::Index>(p.size()) != dimension())
            throw DimensionError("patch length " + std::to_string(p.size()) + " != operator dimension " +
                                 std::to_string(dimension()));
        return matrix * (Eigen::Map<const Eigen::VectorXd>(p.data(), dimension()) - mean);
    }

    // Identifies the operator a dictionary was whitened with.
    std::uint64_t fingerprint() const {
        auto h = io::fnv1a_of(std::span<const double>(mean.data(), static_cast<std::size_t>(mean.size())));
        h = io::fnv1a_of(std::span<const double>(matrix.data(), static_cast<std::size_t>(matrix.size())), h);
        h = io::fnv1a_of(std::span<const double>(&lambda, 1), h);
        return h;
    }

    friend bool operator==(const WhiteningOperator& a, const WhiteningOperator& b) {
        return a.lambda == b.lambda && a.orientation == b.orientation && a.mean == b.mean && a.matrix == b.matrix;
    }
};

inline WhiteningOperator build_whitening_operator(const EigenDecomposition& eig, const Eigen::VectorXd& mean,
                                                  double lambda, Orientation orientation) {
    if (!(lambda >= 0.0)) throw DomainError("whitening regularizer must be >= 0");
    if (eig.dimension() != mean.size()) throw DimensionError("mean and covariance dimensions disagree");
    const Eigen::Index d = eig.dimension();
    if (lambda == 0.0 && d > 0) {
        const double floor = 1e-12 * eig.values(0);
        if (eig.values(d - 1) <= floor)
            throw NumericalError("lambda = 0 with a rank-deficient covariance");
    }
    Eigen::VectorXd scale(d);
    for (Eigen::Index k = 0; k < d; ++k) scale(k) = 1.0 / std::sqrt(lambda + eig.values(k));

    WhiteningOperator op;
    op.mean = mean;
    op.lambda = lambda;
    op.orientation = orientation;
    const Eigen::MatrixXd pca = scale.asDiagonal() * eig.vectors.transpose();
    if (orientation == Orientation::pca) {
        op.matrix = pca;
    } else {
        op.matrix = eig.vectors * pca;
        op.matrix = 0.5 * (op.matrix + op.matrix.transpose()).eval();
    }
    return op;
}

inline WhiteningOperator build_whitening_operator(const PatchMoments& moments, double lambda,
                                                  Orientation orientation = Orientation::zca) {
    if (!(lambda >= 0.0)) throw DomainError("whitening regularizer must be >= 0");
    const auto eig = symmetric_eigendecomposition(moments.covariance, SpectrumPolicy::psd);
    return build_whitening_operator(eig, moments.mean, lambda, orientation);
}

inline Patch whiten(const Patch& patch, const WhiteningOperator& op) {
    const Eigen::VectorXd w = op.apply(patch.values);
    return Patch{{w.data(), w.data() + w.size()}, patch.origin};
}

// ---------------------------------------------------------------------------
// Persistence: magic, version, d_ext (u32), lambda (f64), orientation (u8),
// then mu and W row-major as f64.

inline constexpr io::Magic kWhiteningMagic{'P', 'K', 'W', 'H'};
inline constexpr std::uint32_t kWhiteningVersion = 1;

inline void save_whitening(const std::filesystem::path& path, const WhiteningOperator& op) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    io::write_magic(out, kWhiteningMagic);
    io::write(out, kWhiteningVersion);
    io::write(out, static_cast<std::uint32_t>(op.dimension()));
    io::write(out, op.lambda);
    io::write(out, static_cast<std::uint8_t>(op.orientation));
    io::write_span(out, std::span<const double>(op.mean.data(), static_cast<std::size_t>(op.mean.size())));
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = op.matrix;
    io::write_span(out, std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())));
}

inline WhiteningOperator load_whitening(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing whitening file: " + path.string());
    io::expect_magic(in, kWhiteningMagic, "whitening");
    io::expect_version(io::read<std::uint32_t>(in, "version"), kWhiteningVersion, "whitening");
    const auto d = static_cast<Eigen::Index>(io::read<std::uint32_t>(in, "dimension"));
    WhiteningOperator op;
    op.lambda = io::read<double>(in, "lambda");
    const auto orient = io::read<std::uint8_t>(in, "orientation");
    if (orient > 1) throw FormatError("bad orientation byte in whitening file");
    op.orientation = static_cast<Orientation>(orient);
    op.mean.resize(d);
    io::read_span(in, std::span<double>(op.mean.data(), static_cast<std::size_t>(d)), "mean");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(d, d);
    io::read_span(in, std::span<double>(rm.data(), static_cast<std::size_t>(rm.size())), "matrix");
    io::expect_eof(in, "whitening operator");
    op.matrix = rm;
    return op;
}

}  // namespace patchkernel

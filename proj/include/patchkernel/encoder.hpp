#pragma once

// Q-nearest-neighbor encoding of image patches against a whitened
// dictionary, computed as a cross-correlation of the raw image.
//
// For a whitened atom a and raw patch p,
//   ||W(p - mu) - a||^2 = ||W(p - mu)||^2 + 2 * score(a, p)
//   score(a, p)         = ||a||^2 / 2 + <mu, W^T a> - <p, W^T a>
// so ranking atoms by score ranks them by whitened distance. Filters W^T a
// are applied to raw patches; the mean term folds into the bias. The atom
// -a shares the filter with opposite sign, so one product serves both.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patchkernel/dataset.hpp"
#include "patchkernel/dictionary.hpp"
#include "patchkernel/error.hpp"
#include "patchkernel/whitening.hpp"

namespace patchkernel {

enum class Assignment : std::uint8_t { hard = 0, soft = 1 };

inline const char* to_string(Assignment a) { return a == Assignment::hard ? "hard" : "soft"; }

inline Assignment parse_assignment(const std::string& s) {
    if (s == "hard") return Assignment::hard;
    if (s == "soft") return Assignment::soft;
    throw ConfigError("unknown assignment '" + s + "' (expected hard|soft)");
}

// Distance surrogates, channels x positions; column i holds every atom's
// score at spatial position i (row-major over the (N-P+1)^2 grid).
struct ScoreMap {
    Eigen::MatrixXd scores;
    int side = 0;
    int base_size = 0;

    int channels() const { return static_cast<int>(scores.rows()); }
    int positions() const { return static_cast<int>(scores.cols()); }
    double operator()(int atom, int position) const { return scores(atom, position); }
};

struct BinaryFeatureMap {
    std::vector<std::uint8_t> bits;  // position-major: bits[i * channels + d]
    std::vector<double> thresholds;  // Q-th smallest score at each position
    int channels = 0;
    int side = 0;
    int neighbors = 0;

    int positions() const { return side * side; }
    std::uint8_t operator()(int atom, int position) const {
        return bits[static_cast<std::size_t>(position) * channels + atom];
    }

    Eigen::MatrixXd as_matrix() const {
        Eigen::MatrixXd m(channels, positions());
        for (std::size_t k = 0; k < bits.size(); ++k) m.data()[k] = bits[k];
        return m;
    }
};

struct SoftFeatureMap {
    Eigen::MatrixXd values;  // channels x positions, each in (0,1)
    std::vector<double> thresholds;
    int side = 0;
    int neighbors = 0;
};

struct PooledFeatureMap {
    Eigen::MatrixXd values;  // channels x pooled positions
    int side = 0;
    int kernel = 0;
    int stride = 0;

    int channels() const { return static_cast<int>(values.rows()); }

    // [channels, side, side] row-major, the classifier's input layout.
    template <class T = double>
    std::vector<T> channel_major() const {
        std::vector<T> out(static_cast<std::size_t>(values.size()));
        const Eigen::Index C = values.rows(), J = values.cols();
        for (Eigen::Index c = 0; c < C; ++c)
            for (Eigen::Index j = 0; j < J; ++j) out[static_cast<std::size_t>(c * J + j)] = static_cast<T>(values(c, j));
        return out;
    }
};

// Filters and biases precomputed from a dictionary and whitening operator.
class ConvolutionalEncoder {
public:
    ConvolutionalEncoder(const Dictionary& dict, const WhiteningOperator& op)
        : patch_side_(dict.patch_side), base_size_(dict.base_size) {
        if (dict.dimension() != op.dimension())
            throw DimensionError("dictionary atoms have length " + std::to_string(dict.dimension()) +
                                 " but the whitening operator has dimension " + std::to_string(op.dimension()));
        if (dict.kind == DictionaryKind::whitened_patches && dict.whitening_ref != op.fingerprint())
            throw DomainError("dictionary was whitened with a different operator");

        const auto positive = dict.atoms.leftCols(base_size_);
        filters_ = (op.matrix.transpose() * positive).transpose();  // |D| x d_ext
        const Eigen::VectorXd half_norm = 0.5 * positive.colwise().squaredNorm().transpose();
        const Eigen::VectorXd mean_term = filters_ * op.mean;
        bias_positive_ = half_norm + mean_term;
        bias_negative_ = half_norm - mean_term;
    }

    int patch_side() const { return patch_side_; }
    int base_size() const { return base_size_; }
    int channels() const { return 2 * base_size_; }

    // Changes whenever the filters or biases do, so caches can detect a rebuilt dictionary.
    std::uint64_t fingerprint() const {
        auto h = io::fnv1a_of(std::span<const int>(&patch_side_, 1));
        h = io::fnv1a_of(std::span<const double>(filters_.data(), static_cast<std::size_t>(filters_.size())), h);
        h = io::fnv1a_of(std::span<const double>(bias_positive_.data(), static_cast<std::size_t>(bias_positive_.size())), h);
        return io::fnv1a_of(std::span<const double>(bias_negative_.data(), static_cast<std::size_t>(bias_negative_.size())), h);
    }

    ScoreMap scores(const Image& img) const {
        check_patch_side(img.side, patch_side_);
        const Eigen::MatrixXd patches = patch_matrix(img, patch_side_);
        ScoreMap out;
        out.side = positions_per_side(img.side, patch_side_);
        out.base_size = base_size_;
        out.scores.resize(channels(), patches.cols());
        out.scores.topRows(base_size_).noalias() = -(filters_ * patches);
        out.scores.bottomRows(base_size_) = -out.scores.topRows(base_size_);
        out.scores.topRows(base_size_).colwise() += bias_positive_;
        out.scores.bottomRows(base_size_).colwise() += bias_negative_;
        return out;
    }

private:
    int patch_side_;
    int base_size_;
    Eigen::MatrixXd filters_;
    Eigen::VectorXd bias_positive_;
    Eigen::VectorXd bias_negative_;
};

inline ScoreMap compute_scores(const Image& img, const Dictionary& dict, const WhiteningOperator& op) {
    return ConvolutionalEncoder(dict, op).scores(img);
}

namespace detail {

inline void check_neighbors(int q, int channels) {
    if (q < 1 || q > channels)
        throw DomainError("neighbor count Q=" + std::to_string(q) + " outside [1, " + std::to_string(channels) + "]");
}

// Q-th smallest value of a column.
inline double kth_smallest(const double* column, int n, int q, std::vector<double>& scratch) {
    scratch.assign(column, column + n);
    std::nth_element(scratch.begin(), scratch.begin() + (q - 1), scratch.end());
    return scratch[static_cast<std::size_t>(q - 1)];
}

}  // namespace detail

// Exactly Q ones per position: every score below tau, then ties at tau in
// ascending atom order.
inline BinaryFeatureMap encode_hard(const ScoreMap& s, int neighbors) {
    const int C = s.channels();
    detail::check_neighbors(neighbors, C);
    BinaryFeatureMap out;
    out.channels = C;
    out.side = s.side;
    out.neighbors = neighbors;
    out.bits.assign(static_cast<std::size_t>(C) * s.positions(), 0);
    out.thresholds.resize(static_cast<std::size_t>(s.positions()));

    std::vector<double> scratch;
    for (int i = 0; i < s.positions(); ++i) {
        const double* col = s.scores.col(i).data();
        const double tau = detail::kth_smallest(col, C, neighbors, scratch);
        out.thresholds[static_cast<std::size_t>(i)] = tau;
        std::uint8_t* bits = &out.bits[static_cast<std::size_t>(i) * C];
        int set = 0;
        for (int d = 0; d < C; ++d)
            if (col[d] < tau) {
                bits[d] = 1;
                ++set;
            }
        for (int d = 0; d < C && set < neighbors; ++d)
            if (col[d] == tau) {
                bits[d] = 1;
                ++set;
            }
    }
    return out;
}

// (1 + e^{score - tau})^{-1}, tau the Q-th smallest score at each position.
inline SoftFeatureMap encode_soft(const ScoreMap& s, int neighbors) {
    const int C = s.channels();
    detail::check_neighbors(neighbors, C);
    SoftFeatureMap out;
    out.side = s.side;
    out.neighbors = neighbors;
    out.values.resize(C, s.positions());
    out.thresholds.resize(static_cast<std::size_t>(s.positions()));
    std::vector<double> scratch;
    for (int i = 0; i < s.positions(); ++i) {
        const double tau = detail::kth_smallest(s.scores.col(i).data(), C, neighbors, scratch);
        out.thresholds[static_cast<std::size_t>(i)] = tau;
        for (int d = 0; d < C; ++d) out.values(d, i) = 1.0 / (1.0 + std::exp(s.scores(d, i) - tau));
    }
    return out;
}

inline int pooled_side(int side, int kernel, int stride) {
    if (kernel < 1 || stride < 1) throw DomainError("pool kernel and stride must be positive");
    if (kernel > side)
        throw DomainError("pool kernel " + std::to_string(kernel) + " larger than input side " + std::to_string(side));
    return (side - kernel) / stride + 1;
}

// Per-channel window means. values is channels x (side*side).
inline PooledFeatureMap pool(const Eigen::MatrixXd& values, int side, int kernel, int stride) {
    if (values.cols() != static_cast<Eigen::Index>(side) * side)
        throw DimensionError("feature map does not have side*side positions");
    const int out_side = pooled_side(side, kernel, stride);
    PooledFeatureMap out;
    out.side = out_side;
    out.kernel = kernel;
    out.stride = stride;
    out.values = Eigen::MatrixXd::Zero(values.rows(), static_cast<Eigen::Index>(out_side) * out_side);
    const double inv_area = 1.0 / (static_cast<double>(kernel) * kernel);
    for (int r = 0; r < out_side; ++r)
        for (int q = 0; q < out_side; ++q) {
            auto dst = out.values.col(r * out_side + q);
            for (int dr = 0; dr < kernel; ++dr)
                for (int dq = 0; dq < kernel; ++dq) dst += values.col((r * stride + dr) * side + q * stride + dq);
            dst *= inv_area;
        }
    return out;
}

inline PooledFeatureMap pool(const BinaryFeatureMap& bits, int kernel, int stride) {
    return pool(bits.as_matrix(), bits.side, kernel, stride);
}

inline PooledFeatureMap pool(const SoftFeatureMap& soft, int kernel, int stride) {
    return pool(soft.values, soft.side, kernel, stride);
}

// Squared Euclidean distance between binary encodings, i.e. the number of
// (atom, position) entries where they differ.
inline double encoding_distance(const BinaryFeatureMap& a, const BinaryFeatureMap& b) {
    if (a.channels != b.channels || a.side != b.side || a.bits.size() != b.bits.size())
        throw DimensionError("encodings have different shapes");
    std::size_t differ = 0;
    for (std::size_t k = 0; k < a.bits.size(); ++k) differ += (a.bits[k] != b.bits[k]);
    return static_cast<double>(differ);
}

struct EncodingParams {
    int neighbors = 0;
    int pool_kernel = 5;
    int pool_stride = 3;
    Assignment assignment = Assignment::hard;
};

inline PooledFeatureMap encode_image(const ConvolutionalEncoder& enc, const Image& img, const EncodingParams& p) {
    const ScoreMap s = enc.scores(img);
    if (p.assignment == Assignment::hard) return pool(encode_hard(s, p.neighbors), p.pool_kernel, p.pool_stride);
    return pool(encode_soft(s, p.neighbors), p.pool_kernel, p.pool_stride);
}

}  // namespace patchkernel

#pragma once

// CIFAR-10 ingestion, augmentation and patch extraction.
//
// Binary record layout (one per image, 3073 bytes):
//   [0]        label byte, 0..9
//   [1..1024]  red plane,   32x32 row-major
//   [1025..]   green plane
//   [2049..]   blue plane

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patchkernel/error.hpp"

namespace patchkernel {

inline constexpr int kChannels = 3;
inline constexpr int kCifarSide = 32;
inline constexpr int kCifarClasses = 10;
inline constexpr std::size_t kCifarRecordBytes = 1 + kChannels * kCifarSide * kCifarSide;

// Square color raster, channel-planar: pixels[c*N*N + row*N + col].
struct Image {
    int side = 0;
    std::vector<float> pixels;
    std::optional<int> label;

    Image() = default;
    explicit Image(int n, std::optional<int> lbl = std::nullopt)
        : side(n), pixels(static_cast<std::size_t>(kChannels) * n * n, 0.0f), label(lbl) {}

    float& at(int c, int row, int col) {
        return pixels[(static_cast<std::size_t>(c) * side + row) * side + col];
    }
    float at(int c, int row, int col) const {
        return pixels[(static_cast<std::size_t>(c) * side + row) * side + col];
    }

    friend bool operator==(const Image&, const Image&) = default;
};

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct LabeledImageSet {
    std::vector<Image> images;
    Split split = Split::train;

    std::size_t size() const { return images.size(); }
    bool empty() const { return images.empty(); }
    int side() const { return images.empty() ? 0 : images.front().side; }
};

struct PatchOrigin {
    std::int32_t image = -1;
    std::int32_t row = -1;
    std::int32_t col = -1;
    friend bool operator==(const PatchOrigin&, const PatchOrigin&) = default;
};

// Flattened P x P x 3 window, channel-major: values[c*P*P + r*P + q].
struct Patch {
    std::vector<double> values;
    PatchOrigin origin;
};

inline std::size_t patch_dimension(int patch_side) {
    return static_cast<std::size_t>(kChannels) * patch_side * patch_side;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

inline std::vector<std::filesystem::path> cifar10_files(const std::filesystem::path& dir,
                                                        Split split) {
    if (split == Split::test) return {dir / "test_batch.bin"};
    std::vector<std::filesystem::path> files;
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    return files;
}

inline void read_cifar10_batch(const std::filesystem::path& file, std::vector<Image>& out) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("missing CIFAR-10 file: " + file.string());
    const auto bytes = std::filesystem::file_size(file);
    if (bytes % kCifarRecordBytes != 0)
        throw FormatError(file.string() + ": length " + std::to_string(bytes) +
                          " is not a multiple of " + std::to_string(kCifarRecordBytes));

    const std::size_t records = bytes / kCifarRecordBytes;
    std::vector<unsigned char> buf(kCifarRecordBytes);
    out.reserve(out.size() + records);
    for (std::size_t r = 0; r < records; ++r) {
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() != static_cast<std::streamsize>(buf.size()))
            throw FormatError(file.string() + ": short read at record " + std::to_string(r));
        if (buf[0] >= kCifarClasses)
            throw FormatError(file.string() + ": label byte " + std::to_string(buf[0]) +
                              " out of range at record " + std::to_string(r));
        Image img(kCifarSide, static_cast<int>(buf[0]));
        for (std::size_t k = 0; k < img.pixels.size(); ++k)
            img.pixels[k] = static_cast<float>(buf[k + 1]) / 255.0f;
        out.push_back(std::move(img));
    }
}

inline LabeledImageSet load_cifar10(const std::filesystem::path& dir, Split split) {
    LabeledImageSet set;
    set.split = split;
    for (const auto& f : cifar10_files(dir, split)) read_cifar10_batch(f, set.images);
    return set;
}

inline std::uint8_t quantize_pixel(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Inverse of read_cifar10_batch for images that came from bytes.
inline void write_cifar10_batch(const std::filesystem::path& file, const std::vector<Image>& images) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + file.string());
    std::vector<unsigned char> buf(kCifarRecordBytes);
    for (const auto& img : images) {
        if (img.side != kCifarSide) throw DimensionError("CIFAR-10 records are 32x32");
        const int label = img.label.value_or(0);
        if (label < 0 || label >= kCifarClasses) throw DomainError("label out of range");
        buf[0] = static_cast<unsigned char>(label);
        for (std::size_t k = 0; k < img.pixels.size(); ++k) buf[k + 1] = quantize_pixel(img.pixels[k]);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw IoError("write failed: " + file.string());
}

// ---------------------------------------------------------------------------
// Augmentation

// Mirror without repeating the border pixel: index -1 maps to 1, N maps to N-2.
inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}

inline Image reflect_pad(const Image& img, int pad) {
    if (pad < 0 || pad >= img.side) throw DomainError("reflect pad must lie in [0, side)");
    Image out(img.side + 2 * pad, img.label);
    for (int c = 0; c < kChannels; ++c)
        for (int r = 0; r < out.side; ++r)
            for (int q = 0; q < out.side; ++q)
                out.at(c, r, q) = img.at(c, reflect_index(r - pad, img.side), reflect_index(q - pad, img.side));
    return out;
}

inline Image crop(const Image& img, int row, int col, int side) {
    if (row < 0 || col < 0 || row + side > img.side || col + side > img.side)
        throw DomainError("crop window outside image");
    Image out(side, img.label);
    for (int c = 0; c < kChannels; ++c)
        for (int r = 0; r < side; ++r)
            for (int q = 0; q < side; ++q) out.at(c, r, q) = img.at(c, row + r, col + q);
    return out;
}

inline Image flip_horizontal(const Image& img) {
    Image out(img.side, img.label);
    for (int c = 0; c < kChannels; ++c)
        for (int r = 0; r < img.side; ++r)
            for (int q = 0; q < img.side; ++q) out.at(c, r, q) = img.at(c, r, img.side - 1 - q);
    return out;
}

inline constexpr int kAugmentPad = 4;

// Deterministic core of augment(): pad, crop at (row, col) of the padded
// image, then optionally flip.
inline Image augment_with(const Image& img, int row, int col, bool flip, int pad = kAugmentPad) {
    Image out = crop(reflect_pad(img, pad), row, col, img.side);
    return flip ? flip_horizontal(out) : out;
}

template <class Rng>
Image augment(const Image& img, Rng& rng, int pad = kAugmentPad) {
    std::uniform_int_distribution<int> offset(0, 2 * pad);
    const int row = offset(rng);
    const int col = offset(rng);
    const bool flip = std::bernoulli_distribution(0.5)(rng);
    return augment_with(img, row, col, flip, pad);
}

// ---------------------------------------------------------------------------
// Patches

inline int positions_per_side(int image_side, int patch_side) { return image_side - patch_side + 1; }

inline void check_patch_side(int image_side, int patch_side) {
    if (patch_side < 1) throw DomainError("patch side must be positive");
    if (patch_side > image_side)
        throw DomainError("patch side " + std::to_string(patch_side) + " exceeds image side " +
                          std::to_string(image_side));
}

inline void copy_patch(const Image& img, int patch_side, int row, int col, double* dst) {
    for (int c = 0; c < kChannels; ++c)
        for (int r = 0; r < patch_side; ++r) {
            const float* src = &img.pixels[(static_cast<std::size_t>(c) * img.side + row + r) * img.side + col];
            for (int q = 0; q < patch_side; ++q) *dst++ = static_cast<double>(src[q]);
        }
}

inline Patch extract_patch(const Image& img, int patch_side, int row, int col, std::int32_t image_id = -1) {
    check_patch_side(img.side, patch_side);
    const int L = positions_per_side(img.side, patch_side);
    if (row < 0 || col < 0 || row >= L || col >= L) throw DomainError("patch origin outside image");
    Patch p;
    p.values.resize(patch_dimension(patch_side));
    p.origin = {image_id, row, col};
    copy_patch(img, patch_side, row, col, p.values.data());
    return p;
}

inline std::vector<Patch> extract_patches(const Image& img, int patch_side, std::int32_t image_id = -1) {
    check_patch_side(img.side, patch_side);
    const int L = positions_per_side(img.side, patch_side);
    std::vector<Patch> out;
    out.reserve(static_cast<std::size_t>(L) * L);
    for (int r = 0; r < L; ++r)
        for (int q = 0; q < L; ++q) out.push_back(extract_patch(img, patch_side, r, q, image_id));
    return out;
}

// All patches as columns of a d_ext x (N-P+1)^2 matrix, positions row-major.
inline Eigen::MatrixXd patch_matrix(const Image& img, int patch_side) {
    check_patch_side(img.side, patch_side);
    const int L = positions_per_side(img.side, patch_side);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(patch_dimension(patch_side)), L * L);
    for (int r = 0; r < L; ++r)
        for (int q = 0; q < L; ++q) copy_patch(img, patch_side, r, q, m.col(r * L + q).data());
    return m;
}

}  // namespace patchkernel

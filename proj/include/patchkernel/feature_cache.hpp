#pragma once

// On-disk pooled-feature cache.
//
// Header (little-endian):
//   magic "PKFC", version u32, count u64, channels u32, height u32, width u32,
//   encoding u8 (0 hard, 1 soft), quantization u8 (0 u8 counts, 1 u16 fixed),
//   pool area u16 (k1^2, the count denominator for hard features)
// Records, fixed size, in dataset order:
//   label u8, then channels*height*width quantized values, [C,H,W] row-major.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "patchkernel/binary_io.hpp"
#include "patchkernel/dataset.hpp"
#include "patchkernel/encoder.hpp"
#include "patchkernel/error.hpp"

namespace patchkernel {

enum class Quantization : std::uint8_t { count_u8 = 0, fixed_u16 = 1 };

struct FeatureCacheHeader {
    std::uint64_t count = 0;
    std::uint32_t channels = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    Assignment encoding = Assignment::hard;
    Quantization quantization = Quantization::count_u8;
    std::uint16_t pool_area = 1;
    std::uint32_t neighbors = 0;
    std::uint64_t source = 0;  // ConvolutionalEncoder::fingerprint()

    std::size_t features_per_record() const { return std::size_t{channels} * height * width; }
    std::size_t value_bytes() const { return quantization == Quantization::count_u8 ? 1 : 2; }
    std::size_t record_bytes() const { return 1 + features_per_record() * value_bytes(); }

    friend bool operator==(const FeatureCacheHeader&, const FeatureCacheHeader&) = default;
};

inline constexpr io::Magic kCacheMagic{'P', 'K', 'F', 'C'};
inline constexpr std::uint32_t kCacheVersion = 2;
inline constexpr std::size_t kCacheHeaderBytes = 4 + 4 + 8 + 4 * 3 + 1 + 1 + 2 + 4 + 8;

inline FeatureCacheHeader make_cache_header(std::uint64_t count, int channels, int side, const EncodingParams& p,
                                            std::uint64_t source = 0) {
    FeatureCacheHeader h;
    h.count = count;
    h.channels = static_cast<std::uint32_t>(channels);
    h.height = h.width = static_cast<std::uint32_t>(side);
    h.encoding = p.assignment;
    h.quantization = p.assignment == Assignment::hard ? Quantization::count_u8 : Quantization::fixed_u16;
    const int area = p.pool_kernel * p.pool_kernel;
    if (h.quantization == Quantization::count_u8 && area > 255)
        throw DomainError("hard features need pool_kernel^2 <= 255 to fit 8-bit counts");
    h.pool_area = static_cast<std::uint16_t>(area);
    h.neighbors = static_cast<std::uint32_t>(p.neighbors);
    h.source = source;
    return h;
}

inline void write_cache_header(std::ostream& out, const FeatureCacheHeader& h) {
    io::write_magic(out, kCacheMagic);
    io::write(out, kCacheVersion);
    io::write(out, h.count);
    io::write(out, h.channels);
    io::write(out, h.height);
    io::write(out, h.width);
    io::write(out, static_cast<std::uint8_t>(h.encoding));
    io::write(out, static_cast<std::uint8_t>(h.quantization));
    io::write(out, h.pool_area);
    io::write(out, h.neighbors);
    io::write(out, h.source);
}

inline FeatureCacheHeader read_cache_header(std::istream& in) {
    io::expect_magic(in, kCacheMagic, "feature cache");
    io::expect_version(io::read<std::uint32_t>(in, "version"), kCacheVersion, "feature cache");
    FeatureCacheHeader h;
    h.count = io::read<std::uint64_t>(in, "count");
    h.channels = io::read<std::uint32_t>(in, "channels");
    h.height = io::read<std::uint32_t>(in, "height");
    h.width = io::read<std::uint32_t>(in, "width");
    const auto enc = io::read<std::uint8_t>(in, "encoding");
    const auto quant = io::read<std::uint8_t>(in, "quantization");
    h.pool_area = io::read<std::uint16_t>(in, "pool area");
    h.neighbors = io::read<std::uint32_t>(in, "neighbors");
    h.source = io::read<std::uint64_t>(in, "source");
    if (enc > 1 || quant > 1 || h.pool_area == 0) throw FormatError("bad feature cache header");
    h.encoding = static_cast<Assignment>(enc);
    h.quantization = static_cast<Quantization>(quant);
    return h;
}

// Quantize a pooled map into `dst` (features_per_record() * value_bytes()).
inline void quantize_features(const PooledFeatureMap& m, const FeatureCacheHeader& h, std::span<std::uint8_t> dst) {
    const auto values = m.channel_major<double>();
    if (values.size() != h.features_per_record()) throw DimensionError("pooled map does not match cache shape");
    if (h.quantization == Quantization::count_u8) {
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double scaled = values[k] * h.pool_area;
            const double count = std::round(scaled);
            if (std::abs(scaled - count) > 1e-6 || count < 0 || count > 255)
                throw DomainError("hard pooled value is not a count over the pool window");
            dst[k] = static_cast<std::uint8_t>(count);
        }
    } else {
        for (std::size_t k = 0; k < values.size(); ++k) {
            const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(values[k], 0.0, 1.0) * 65535.0));
            std::memcpy(&dst[2 * k], &q, 2);
        }
    }
}

template <class T>
void dequantize_features(std::span<const std::uint8_t> src, const FeatureCacheHeader& h, T* out) {
    const std::size_t n = h.features_per_record();
    if (h.quantization == Quantization::count_u8) {
        const double inv = 1.0 / h.pool_area;
        for (std::size_t k = 0; k < n; ++k) out[k] = static_cast<T>(src[k] * inv);
    } else {
        for (std::size_t k = 0; k < n; ++k) {
            std::uint16_t q;
            std::memcpy(&q, &src[2 * k], 2);
            out[k] = static_cast<T>(q / 65535.0);
        }
    }
}

// Random-access reader; records are fixed size so the index is implicit.
class FeatureCacheReader {
public:
    explicit FeatureCacheReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("missing feature cache: " + path.string());
        header_ = read_cache_header(in_);
        const auto expected = kCacheHeaderBytes + header_.count * header_.record_bytes();
        const auto actual = std::filesystem::file_size(path);
        if (actual != expected)
            throw FormatError("feature cache " + path.string() + " has " + std::to_string(actual) +
                              " bytes, expected " + std::to_string(expected) + " (partial or corrupt)");
        buffer_.resize(header_.record_bytes());
    }

    const FeatureCacheHeader& header() const { return header_; }
    std::size_t size() const { return static_cast<std::size_t>(header_.count); }

    // Fills `out` with features_per_record() values; returns the label.
    template <class T>
    int read(std::size_t index, T* out) {
        if (index >= size()) throw DomainError("cache index out of range");
        in_.seekg(static_cast<std::streamoff>(kCacheHeaderBytes + index * header_.record_bytes()));
        io::read_span(in_, std::span<std::uint8_t>(buffer_), "cache record");
        dequantize_features<T>(std::span<const std::uint8_t>(buffer_).subspan(1), header_, out);
        return buffer_[0];
    }

    std::vector<int> labels() {
        std::vector<int> out(size());
        for (std::size_t i = 0; i < size(); ++i) {
            in_.seekg(static_cast<std::streamoff>(kCacheHeaderBytes + i * header_.record_bytes()));
            out[i] = io::read<std::uint8_t>(in_, "label");
        }
        return out;
    }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    FeatureCacheHeader header_;
    std::vector<std::uint8_t> buffer_;
};

enum class CacheStatus { written, already_complete };

struct EncodeReport {
    CacheStatus status = CacheStatus::written;
    FeatureCacheHeader header;
    double seconds = 0.0;
};

inline std::filesystem::path partial_path(const std::filesystem::path& path) {
    auto p = path;
    p += ".partial";
    return p;
}

// Encodes every image (unaugmented) into `path`. An existing complete cache
// with the same header is left untouched. Leftover partial output is an
// error rather than something to silently overwrite.
inline EncodeReport encode_dataset(const LabeledImageSet& data, const ConvolutionalEncoder& enc,
                                   const EncodingParams& params, const std::filesystem::path& path,
                                   unsigned threads = 1,
                                   const std::function<void(std::size_t, std::size_t)>& progress = {}) {
    if (data.empty()) throw DomainError("cannot encode an empty dataset");
    const int side = pooled_side(positions_per_side(data.side(), enc.patch_side()), params.pool_kernel,
                                 params.pool_stride);
    detail::check_neighbors(params.neighbors, enc.channels());
    const auto header = make_cache_header(data.size(), enc.channels(), side, params, enc.fingerprint());

    EncodeReport report;
    report.header = header;
    const auto tmp = partial_path(path);
    if (std::filesystem::exists(tmp))
        throw FormatError("partial cache detected at " + tmp.string() + "; remove it to re-encode");
    if (std::filesystem::exists(path)) {
        std::ifstream in(path, std::ios::binary);
        const auto existing = read_cache_header(in);
        if (!(existing == header))
            throw FormatError("existing cache " + path.string() + " was built with different parameters");
        const auto expected = kCacheHeaderBytes + header.count * header.record_bytes();
        if (std::filesystem::file_size(path) != expected)
            throw FormatError("partial cache detected at " + path.string());
        report.status = CacheStatus::already_complete;
        return report;
    }

    const auto start = std::chrono::steady_clock::now();
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        write_cache_header(out, header);

        threads = std::max(1u, threads);
        const std::size_t batch = std::size_t{threads} * 8;
        std::vector<std::vector<std::uint8_t>> records(batch, std::vector<std::uint8_t>(header.record_bytes()));
        for (std::size_t first = 0; first < data.size(); first += batch) {
            const std::size_t n = std::min(batch, data.size() - first);
            auto work = [&](std::size_t lane) {
                for (std::size_t k = lane; k < n; k += threads) {
                    const Image& img = data.images[first + k];
                    records[k][0] = static_cast<std::uint8_t>(img.label.value_or(0));
                    quantize_features(encode_image(enc, img, params), header,
                                      std::span<std::uint8_t>(records[k]).subspan(1));
                }
            };
            if (threads == 1) {
                work(0);
            } else {
                std::vector<std::jthread> pool;
                for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
            }
            for (std::size_t k = 0; k < n; ++k)
                io::write_span(out, std::span<const std::uint8_t>(records[k]));
            if (progress) progress(first + n, data.size());
        }
        out.flush();
        if (!out) throw IoError("write failed (disk full?): " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace patchkernel

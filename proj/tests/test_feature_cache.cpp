#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "patchkernel/feature_cache.hpp"
#include "support/synthetic.hpp"

using namespace patchkernel;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    LabeledImageSet data = fixtures::class_image_set(10, 21);
    WhiteningOperator op = build_whitening_operator(sample_patch_moments(data, 6, 20000, 2), 1e-3);
    Dictionary dict = sample_dictionary(data, 16, 6, op, 3);
    ConvolutionalEncoder enc{dict, op};
};

const Fixture& fx() {
    static const Fixture f;
    return f;
}

EncodingParams params(Assignment a) {
    EncodingParams p;
    p.neighbors = 13;
    p.assignment = a;
    return p;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(FeatureCache, HeaderSizeArithmetic) {
    EncodingParams p;
    const auto h = make_cache_header(50000, 4096, 8, p);
    EXPECT_EQ(h.record_bytes(), 1u + 4096u * 64u);
    EXPECT_EQ(kCacheHeaderBytes, 44u);
    EXPECT_EQ(kCacheHeaderBytes + h.count * h.record_bytes(), 44u + 50000ull * 262145ull);  // about 13.1 GB
    p.assignment = Assignment::soft;
    EXPECT_EQ(make_cache_header(1, 4096, 8, p).record_bytes(), 1u + 2u * 4096u * 64u);
    p.assignment = Assignment::hard;
    p.pool_kernel = 16;
    EXPECT_THROW(make_cache_header(1, 4, 1, p), DomainError);
}

TEST(FeatureCache, HardRoundTripIsExact) {
    const auto dir = fixtures::scratch_dir("cache_hard");
    const auto rep = encode_dataset(fx().data, fx().enc, params(Assignment::hard), dir / "train.bin");
    EXPECT_EQ(rep.status, CacheStatus::written);
    EXPECT_FALSE(fs::exists(partial_path(dir / "train.bin")));

    FeatureCacheReader reader(dir / "train.bin");
    ASSERT_EQ(reader.size(), 10u);
    EXPECT_EQ(reader.header().channels, 32u);
    EXPECT_EQ(reader.header().height, 8u);
    std::vector<double> got(reader.header().features_per_record());
    for (std::size_t i = 0; i < 10; ++i) {
        const int label = reader.read(i, got.data());
        EXPECT_EQ(label, fx().data.images[i].label);
        const auto want = encode_image(fx().enc, fx().data.images[i], params(Assignment::hard)).channel_major<double>();
        for (std::size_t k = 0; k < got.size(); ++k) {
            EXPECT_EQ(got[k], want[k]);
            EXPECT_NEAR(got[k] * 25, std::round(got[k] * 25), 1e-12);
        }
    }
    const auto labels = reader.labels();
    EXPECT_EQ(labels[3], fx().data.images[3].label);
}

TEST(FeatureCache, SoftRoundTripWithinQuantizationStep) {
    const auto dir = fixtures::scratch_dir("cache_soft");
    encode_dataset(fx().data, fx().enc, params(Assignment::soft), dir / "test.bin");
    FeatureCacheReader reader(dir / "test.bin");
    EXPECT_EQ(reader.header().quantization, Quantization::fixed_u16);
    std::vector<float> got(reader.header().features_per_record());
    for (std::size_t i = 0; i < 10; ++i) {
        reader.read(i, got.data());
        const auto want = encode_image(fx().enc, fx().data.images[i], params(Assignment::soft)).channel_major<double>();
        for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 0.5 / 65535 + 1e-7);
    }
}

TEST(FeatureCache, CompleteCacheIsLeftAlone) {
    const auto dir = fixtures::scratch_dir("cache_noop");
    const auto path = dir / "c.bin";
    encode_dataset(fx().data, fx().enc, params(Assignment::hard), path);
    const auto before = fs::last_write_time(path);
    const auto bytes = slurp(path);
    EXPECT_EQ(encode_dataset(fx().data, fx().enc, params(Assignment::hard), path).status,
              CacheStatus::already_complete);
    EXPECT_EQ(fs::last_write_time(path), before);
    EXPECT_EQ(slurp(path), bytes);

    auto other = params(Assignment::hard);
    other.neighbors = 5;
    EXPECT_THROW(encode_dataset(fx().data, fx().enc, other, path), FormatError);
    other = params(Assignment::hard);
    other.pool_kernel = 3;
    EXPECT_THROW(encode_dataset(fx().data, fx().enc, other, path), FormatError);

    // A dictionary rebuilt with another seed has the same shape but must not reuse the cache.
    const ConvolutionalEncoder rebuilt{sample_dictionary(fx().data, 16, 6, fx().op, 4), fx().op};
    EXPECT_NE(rebuilt.fingerprint(), fx().enc.fingerprint());
    EXPECT_THROW(encode_dataset(fx().data, rebuilt, params(Assignment::hard), path), FormatError);
    EXPECT_EQ(slurp(path), bytes);

    FeatureCacheReader reader(path);
    EXPECT_EQ(reader.header().neighbors, 13u);
    EXPECT_EQ(reader.header().source, fx().enc.fingerprint());
}

TEST(FeatureCache, PartialOutputIsDetected) {
    const auto dir = fixtures::scratch_dir("cache_partial");
    const auto path = dir / "c.bin";
    encode_dataset(fx().data, fx().enc, params(Assignment::hard), path);
    fs::resize_file(path, fs::file_size(path) - 100);
    EXPECT_THROW(FeatureCacheReader{path}, FormatError);
    EXPECT_THROW(encode_dataset(fx().data, fx().enc, params(Assignment::hard), path), FormatError);

    fs::remove(path);
    std::ofstream(partial_path(path)) << "leftover";
    EXPECT_THROW(encode_dataset(fx().data, fx().enc, params(Assignment::hard), path), FormatError);
    EXPECT_THROW(FeatureCacheReader{dir / "missing.bin"}, IoError);
}

TEST(FeatureCache, ThreadCountDoesNotChangeBytes) {
    const auto dir = fixtures::scratch_dir("cache_threads");
    encode_dataset(fx().data, fx().enc, params(Assignment::hard), dir / "a.bin", 1);
    encode_dataset(fx().data, fx().enc, params(Assignment::hard), dir / "b.bin", 3);
    EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
}

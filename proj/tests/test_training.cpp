#include <gtest/gtest.h>

#include <random>

#include "patchkernel/training.hpp"
#include "support/synthetic.hpp"

using namespace patchkernel;

namespace {

// Features whose class shows up as a shifted mean in one channel group.
InMemoryFeatures<float> separable_features(int n, int channels, int side, std::uint64_t seed, bool shuffle_labels = false) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g;
    std::uniform_int_distribution<int> label(0, 9);
    InMemoryFeatures<float> src(channels, side);
    std::vector<float> buf(static_cast<std::size_t>(channels) * side * side);
    for (int i = 0; i < n; ++i) {
        const int y = i % 10;
        for (auto& v : buf) v = g(rng);
        for (int k = 0; k < side * side; ++k) buf[static_cast<std::size_t>((y % channels) * side * side + k)] += 2.0f;
        src.add(buf, shuffle_labels ? label(rng) : y);
    }
    return src;
}

TrainConfig small_config(int epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.learning_rate = 0.05;
    cfg.decay_epochs = {};
    cfg.batch_size = 32;
    cfg.seed = 3;
    return cfg;
}

}  // namespace

TEST(Schedule, StepDecay) {
    TrainConfig cfg;
    EXPECT_DOUBLE_EQ(cfg.rate_at(0), 0.003);
    EXPECT_DOUBLE_EQ(cfg.rate_at(99), 0.003);
    EXPECT_NEAR(cfg.rate_at(100), 3e-4, 1e-18);
    EXPECT_NEAR(cfg.rate_at(149), 3e-4, 1e-18);
    EXPECT_NEAR(cfg.rate_at(150), 3e-5, 1e-18);
    EXPECT_NEAR(cfg.rate_at(174), 3e-5, 1e-18);
    EXPECT_NO_THROW(cfg.validate());
}

TEST(Train, ZeroEpochsReturnsInitialModel) {
    auto src = separable_features(20, 12, 3, 1);
    ClassifierSpec spec{12, 1, 8, 3, false, 10};
    auto cfg = small_config(0);
    const auto r = train<float>(spec, src, nullptr, cfg);
    EXPECT_TRUE(r.metrics.empty());
    EXPECT_EQ(r.model.conv1.weights, make_classifier<float>(spec, cfg.seed).conv1.weights);
}

TEST(Train, LearnsSeparableData) {
    auto train_src = separable_features(400, 12, 3, 1);
    auto test_src = separable_features(200, 12, 3, 2);
    ClassifierSpec spec{12, 1, 16, 3, false, 10};
    std::vector<double> seen;
    const auto r = train<float>(spec, train_src, &test_src, small_config(8),
                                [&](const EpochMetrics& m) { seen.push_back(m.train_loss); });
    ASSERT_EQ(r.metrics.size(), 8u);
    EXPECT_EQ(seen.size(), 8u);
    EXPECT_GT(r.metrics.back().train_acc, 0.9);
    EXPECT_GT(r.metrics.back().test_acc, 0.9);
    EXPECT_LT(r.metrics.back().train_loss, r.metrics.front().train_loss);
}

TEST(Train, BitwiseReproducible) {
    ClassifierSpec spec{12, 1, 8, 3, true, 10};
    auto a_src = separable_features(100, 12, 3, 4);
    auto b_src = separable_features(100, 12, 3, 4);
    const auto a = train<float>(spec, a_src, nullptr, small_config(3));
    const auto b = train<float>(spec, b_src, nullptr, small_config(3));
    const auto pa = a.model.parameters(), pb = b.model.parameters();
    for (std::size_t t = 0; t < pa.size(); ++t) EXPECT_TRUE(std::equal(pa[t].begin(), pa[t].end(), pb[t].begin()));
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_EQ(a.metrics[e].train_loss, b.metrics[e].train_loss);
        EXPECT_EQ(a.metrics[e].train_acc, b.metrics[e].train_acc);
    }
}

TEST(Train, Errors) {
    ClassifierSpec spec{12, 1, 8, 3, false, 10};
    auto src = separable_features(10, 6, 3, 1);
    EXPECT_THROW(train<float>(spec, src, nullptr, small_config(1)), DimensionError);
    auto bad = small_config(1);
    bad.batch_size = 1;
    auto ok = separable_features(10, 12, 3, 1);
    EXPECT_THROW(train<float>(spec, ok, nullptr, bad), ConfigError);
}

TEST(Train, DescentOnAFixedBatch) {
    int improving = 0;
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        auto src = separable_features(64, 12, 3, 100 + trial);
        ClassifierSpec spec{12, 1, 8, 3, false, 10};
        auto m = make_classifier<float>(spec, trial);
        SgdMomentum<float> opt(m);
        Batch<float> batch;
        std::vector<int> labels;
        std::vector<std::size_t> idx(64);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        load_batch<float>(src, idx, batch, labels);
        ForwardState<float> st;
        bool monotone = true;
        float prev = std::numeric_limits<float>::infinity();
        for (int step = 0; step < 10; ++step) {
            forward(m, batch, Mode::train, &st);
            float loss;
            const auto g = backward(m, batch, st, labels, &loss);
            if (loss > prev) monotone = false;
            prev = loss;
            opt.step(m, g, 1e-4f);
        }
        improving += monotone;
    }
    EXPECT_GE(improving, 9);
}

// ---------------------------------------------------------------------------

TEST(Evaluate, ConstantPredictor) {
    ClassifierSpec spec{4, 1, 2, 1, false, 10};
    auto m = make_classifier<float>(spec, 1);
    std::fill(m.conv2.weights.begin(), m.conv2.weights.end(), 0.0f);
    m.conv2.bias[0] = 1.0f;
    InMemoryFeatures<float> zeros(4, 2), mixed(4, 2);
    std::vector<float> buf(16, 0.5f);
    for (int i = 0; i < 30; ++i) {
        zeros.add(buf, 0);
        mixed.add(buf, i % 3);
    }
    EXPECT_EQ(evaluate(m, zeros, 7), 1.0);
    EXPECT_NEAR(evaluate(m, mixed, 7), 1.0 / 3.0, 1e-12);
}

TEST(Evaluate, RandomLabelsNearChance) {
    auto src = separable_features(10000, 12, 2, 5, true);
    ClassifierSpec spec{12, 1, 8, 2, false, 10};
    const auto m = make_classifier<float>(spec, 6);
    const double acc = evaluate(m, src);
    const double sigma = std::sqrt(0.1 * 0.9 / 10000);
    EXPECT_NEAR(acc, 0.1, 3 * sigma);
    EXPECT_EQ(acc, evaluate(m, src, 333));
}

// ---------------------------------------------------------------------------

TEST(EncodingSource, AugmentationSeededPerEpochAndIndex) {
    const auto data = fixtures::class_image_set(6, 7);
    const auto op = build_whitening_operator(sample_patch_moments(data, 6, 20000, 1), 1e-3);
    const auto dict = sample_dictionary(data, 8, 6, op, 2);
    ConvolutionalEncoder enc(dict, op);
    EncodingParams p{5, 5, 3, Assignment::hard};
    EncodingSource<float> a(data, enc, p, true, 11), b(data, enc, p, true, 11);
    EncodingSource<float> plain(data, enc, p, false, 11);
    EXPECT_EQ(a.side(), 8);
    EXPECT_EQ(a.channels(), 16);
    std::vector<float> x(a.sample_size()), y(a.sample_size()), z(a.sample_size());
    a.begin_epoch(2);
    b.begin_epoch(2);
    a.load(4, x.data());
    b.load(1, y.data());
    b.load(4, y.data());
    EXPECT_EQ(x, y);
    bool changes_with_epoch = false;
    for (int e = 3; e < 8 && !changes_with_epoch; ++e) {
        b.begin_epoch(e);
        b.load(4, z.data());
        changes_with_epoch = z != x;
    }
    EXPECT_TRUE(changes_with_epoch);
    plain.load(4, z.data());
    const auto want = encode_image(enc, data.images[4], p).channel_major<float>();
    EXPECT_EQ(z, want);
}

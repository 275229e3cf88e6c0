#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "patchkernel/classifier.hpp"
#include "support/synthetic.hpp"

using namespace patchkernel;

namespace {

template <class T>
Batch<T> random_batch(int n, int c, int side, std::uint64_t seed, double scale = 1.0, double offset = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Batch<T> b(n, c, side, side);
    for (auto& v : b.data) v = static_cast<T>(offset + scale * g(rng));
    return b;
}

std::vector<int> random_labels(int n, int classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> u(0, classes - 1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (auto& l : out) l = u(rng);
    return out;
}

double loss_of(const ClassifierModel<double>& m, const Batch<double>& x, const std::vector<int>& labels) {
    return cross_entropy<double>(forward(m, x, Mode::train), labels);
}

// Randomizes gamma and beta too so their gradients are exercised away from
// the identity.
ClassifierModel<double> toy_model(const ClassifierSpec& spec, std::uint64_t seed) {
    auto m = make_classifier<double>(spec, seed);
    std::mt19937_64 rng(seed + 1);
    std::uniform_real_distribution<double> u(0.5, 1.5), v(-0.5, 0.5);
    for (auto& g : m.bn.gamma) g = u(rng);
    for (auto& b : m.bn.beta) b = v(rng);
    for (auto& b : m.conv1.bias) b = v(rng);
    for (auto& b : m.conv2.bias) b = v(rng);
    return m;
}

void check_gradients(const ClassifierSpec& spec, int side, std::uint64_t seed) {
    auto m = toy_model(spec, seed);
    const auto x = random_batch<double>(4, spec.in_channels, side, seed + 2, 0.7, 0.3);
    const auto labels = random_labels(4, spec.classes, seed + 3);

    ForwardState<double> st;
    forward(m, x, Mode::train, &st);
    const auto g = backward(m, x, st, labels);
    const auto grads = g.tensors();
    auto params = m.parameters();
    const double h = 1e-4;
    for (std::size_t t = 0; t < params.size(); ++t) {
        for (std::size_t k = 0; k < params[t].size(); ++k) {
            const double keep = params[t][k];
            params[t][k] = keep + h;
            const double up = loss_of(m, x, labels);
            params[t][k] = keep - h;
            const double down = loss_of(m, x, labels);
            params[t][k] = keep;
            const double numeric = (up - down) / (2 * h);
            const double analytic = grads[t][k];
            EXPECT_LE(std::abs(numeric - analytic), 1e-3 * std::max(std::abs(numeric), std::abs(analytic)) + 1e-8)
                << kParameterNames[t] << "[" << k << "] analytic " << analytic << " numeric " << numeric;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Batch norm

TEST(BatchNorm, StandardizedInputIsAFixedPoint) {
    auto x = random_batch<double>(8, 3, 4, 1);
    std::vector<double> mean, var;
    batch_statistics(x, mean, var);
    const std::size_t hw = 16;
    for (int b = 0; b < 8; ++b)
        for (int c = 0; c < 3; ++c)
            for (std::size_t k = 0; k < hw; ++k) {
                auto& v = x.sample(b)[static_cast<std::size_t>(c) * hw + k];
                v = (v - mean[static_cast<std::size_t>(c)]) / std::sqrt(var[static_cast<std::size_t>(c)]);
            }
    BatchNormState<double> bn(3);
    bn.epsilon = 1e-12;  // the default epsilon alone shifts unit-variance data by ~5e-6 * |x|
    const auto y = batchnorm_forward(x, bn, Mode::train);
    for (std::size_t k = 0; k < x.data.size(); ++k) EXPECT_NEAR(y.data[k], x.data[k], 1e-6);
}

TEST(BatchNorm, ConstantChannelMapsToZero) {
    Batch<double> x(4, 2, 3, 3);
    for (int b = 0; b < 4; ++b)
        for (int k = 0; k < 9; ++k) {
            x.sample(b)[k] = 2.5;
            x.sample(b)[9 + k] = b + 0.1 * k;
        }
    BatchNormState<double> bn(2);
    const auto y = batchnorm_forward(x, bn, Mode::train);
    for (int b = 0; b < 4; ++b)
        for (int k = 0; k < 9; ++k) EXPECT_EQ(y.sample(b)[k], 0.0);
}

TEST(BatchNorm, TrainModeStatisticsAndRunningUpdate) {
    const auto x = random_batch<double>(16, 4, 5, 2, 3.0, 1.5);
    BatchNormState<double> bn(4);
    const auto y = batchnorm_forward(x, bn, Mode::train);
    std::vector<double> ym, yv, xm, xv;
    batch_statistics(y, ym, yv);
    batch_statistics(x, xm, xv);
    const double count = 16 * 25;
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_LE(std::abs(ym[c]), 1e-6);
        EXPECT_NEAR(yv[c], 1.0, 1e-4);
        EXPECT_NEAR(bn.running_mean[c], 0.1 * xm[c], 1e-12);
        EXPECT_NEAR(bn.running_var[c], 0.9 + 0.1 * xv[c] * count / (count - 1), 1e-12);
        EXPECT_GE(bn.running_var[c], 0.0);
    }

    // Eval mode uses the running estimates and leaves them alone.
    const auto before = bn.running_mean;
    const auto z = batchnorm_forward(x, bn, Mode::eval);
    EXPECT_EQ(bn.running_mean, before);
    const double want = bn.gamma[1] * (x.at(3, 1, 2, 2) - bn.running_mean[1]) / std::sqrt(bn.running_var[1] + bn.epsilon) + bn.beta[1];
    EXPECT_NEAR(z.at(3, 1, 2, 2), want, 1e-12);
}

TEST(BatchNorm, Errors) {
    BatchNormState<double> bn(3);
    EXPECT_THROW(batchnorm_forward(random_batch<double>(4, 2, 2, 1), bn, Mode::train), DimensionError);
    EXPECT_THROW(batchnorm_forward(random_batch<double>(1, 3, 2, 1), bn, Mode::train), DomainError);
    EXPECT_NO_THROW(batchnorm_forward(random_batch<double>(1, 3, 2, 1), bn, Mode::eval));
}

// ---------------------------------------------------------------------------
// Forward

TEST(Forward, ZeroWeightsGiveBias) {
    ClassifierSpec spec{6, 1, 5, 2, false, 10};
    auto m = make_classifier<double>(spec, 1);
    std::fill(m.conv1.weights.begin(), m.conv1.weights.end(), 0.0);
    std::fill(m.conv2.weights.begin(), m.conv2.weights.end(), 0.0);
    for (int k = 0; k < 10; ++k) m.conv2.bias[static_cast<std::size_t>(k)] = 0.1 * k - 0.3;
    const auto logits = forward(m, random_batch<double>(3, 6, 4, 2), Mode::train);
    for (int b = 0; b < 3; ++b)
        for (int k = 0; k < 10; ++k) EXPECT_DOUBLE_EQ(logits(b, k), 0.1 * k - 0.3);
}

TEST(Forward, ReferenceGeometry) {
    ClassifierSpec spec{32, 1, 128, 6, false, 10};
    const auto m = make_classifier<float>(spec, 3);
    ForwardState<float> st;
    const auto logits = forward(m, random_batch<float>(2, 32, 8, 4), Mode::train, &st);
    EXPECT_EQ(st.h1, 8);
    EXPECT_EQ(st.h2, 3);
    EXPECT_EQ(logits.rows(), 2);
    EXPECT_EQ(logits.cols(), 10);
    EXPECT_THROW(forward(m, random_batch<float>(2, 32, 5, 4), Mode::train), DimensionError);
}

TEST(Forward, SinglePixelIsAMatrixProduct) {
    ClassifierSpec spec{5, 1, 4, 1, false, 3};
    const auto m = make_classifier<double>(spec, 9);
    const auto x = random_batch<double>(6, 5, 1, 8);
    const auto logits = forward(m, x, Mode::eval);
    for (int b = 0; b < 6; ++b)
        for (int o = 0; o < 3; ++o) {
            double want = m.conv2.bias[static_cast<std::size_t>(o)];
            for (int h = 0; h < 4; ++h) {
                double z = m.conv1.bias[static_cast<std::size_t>(h)];
                for (int c = 0; c < 5; ++c) {
                    const auto cc = static_cast<std::size_t>(c);
                    const double y = (x.at(b, c, 0, 0) - m.bn.running_mean[cc]) /
                                     std::sqrt(m.bn.running_var[cc] + m.bn.epsilon);
                    z += m.conv1.weights[static_cast<std::size_t>(h * 5 + c)] * y;
                }
                want += m.conv2.weights[static_cast<std::size_t>(o * 4 + h)] * z;
            }
            EXPECT_NEAR(logits(b, o), want, 1e-12);
        }
}

TEST(Forward, InitializationRanges) {
    ClassifierSpec spec{16, 2, 8, 3, false, 10};
    const auto m = make_classifier<double>(spec, 4);
    const double a1 = 1.0 / std::sqrt(16.0 * 4), a2 = 1.0 / std::sqrt(8.0 * 9);
    for (double w : m.conv1.weights) EXPECT_LE(std::abs(w), a1);
    for (double w : m.conv2.weights) EXPECT_LE(std::abs(w), a2);
    for (double b : m.conv1.bias) EXPECT_EQ(b, 0.0);
    for (double b : m.conv2.bias) EXPECT_EQ(b, 0.0);
    EXPECT_EQ(make_classifier<double>(spec, 4).conv1.weights, m.conv1.weights);
    EXPECT_THROW(make_classifier<double>(ClassifierSpec{0, 1, 8, 3, false, 10}, 1), DomainError);
}

// ---------------------------------------------------------------------------
// Loss

TEST(CrossEntropy, UniformLogits) {
    RowMatrix<double> logits = RowMatrix<double>::Zero(3, 10);
    const std::vector<int> labels{0, 4, 9};
    EXPECT_NEAR(cross_entropy<double>(logits, labels), std::log(10.0), 1e-15);
}

TEST(CrossEntropy, LargeMarginTendsToZero) {
    RowMatrix<double> logits = RowMatrix<double>::Zero(1, 10);
    logits(0, 3) = 200.0;
    const std::vector<int> labels{3};
    EXPECT_LT(cross_entropy<double>(logits, labels), 1e-80);
    logits(0, 3) = 1000.0;  // no overflow in exp
    EXPECT_TRUE(std::isfinite(cross_entropy<double>(logits, labels)));
}

TEST(CrossEntropy, MatchesLongDoubleOracle) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 4.0);
    RowMatrix<double> logits(32, 10);
    for (Eigen::Index k = 0; k < logits.size(); ++k) logits.data()[k] = g(rng);
    const auto labels = random_labels(32, 10, 6);
    long double total = 0;
    for (int b = 0; b < 32; ++b) {
        long double z = 0;
        for (int k = 0; k < 10; ++k) z += std::exp(static_cast<long double>(logits(b, k)));
        total += std::log(z) - logits(b, labels[static_cast<std::size_t>(b)]);
    }
    EXPECT_NEAR(cross_entropy<double>(logits, labels), static_cast<double>(total / 32), 1e-8);
}

TEST(CrossEntropy, LabelChecks) {
    RowMatrix<double> logits = RowMatrix<double>::Zero(2, 10);
    EXPECT_THROW(cross_entropy<double>(logits, std::vector<int>{0, 10}), DomainError);
    EXPECT_THROW(cross_entropy<double>(logits, std::vector<int>{0}), DimensionError);
}

// ---------------------------------------------------------------------------
// Backward

TEST(Backward, FiniteDifferencesLinearHead) { check_gradients(ClassifierSpec{3, 2, 4, 2, false, 5}, 4, 11); }

TEST(Backward, FiniteDifferencesHiddenHead) { check_gradients(ClassifierSpec{3, 2, 4, 2, true, 5}, 4, 12); }

TEST(Backward, FiniteDifferencesPointwiseFirstLayer) { check_gradients(ClassifierSpec{4, 1, 3, 3, true, 4}, 4, 13); }

TEST(Backward, ZeroSecondLayerBlocksFirstLayerGradients) {
    ClassifierSpec spec{3, 1, 4, 2, true, 5};
    auto m = toy_model(spec, 14);
    std::fill(m.conv2.weights.begin(), m.conv2.weights.end(), 0.0);
    const auto x = random_batch<double>(4, 3, 3, 15);
    ForwardState<double> st;
    forward(m, x, Mode::train, &st);
    const auto g = backward(m, x, st, random_labels(4, 5, 16));
    for (double v : g.w1) EXPECT_EQ(v, 0.0);
    for (double v : g.b1) EXPECT_EQ(v, 0.0);
    for (double v : g.gamma) EXPECT_EQ(v, 0.0);
}

TEST(Backward, DuplicatedBatchGivesSameGradients) {
    ClassifierSpec spec{3, 2, 4, 2, false, 5};
    const auto m = toy_model(spec, 17);
    const auto x = random_batch<double>(3, 3, 4, 18);
    const auto labels = random_labels(3, 5, 19);
    Batch<double> xx(6, 3, 4, 4);
    std::copy(x.data.begin(), x.data.end(), xx.data.begin());
    std::copy(x.data.begin(), x.data.end(), xx.data.begin() + static_cast<std::ptrdiff_t>(x.data.size()));
    std::vector<int> ll = labels;
    ll.insert(ll.end(), labels.begin(), labels.end());

    ForwardState<double> s1, s2;
    forward(m, x, Mode::train, &s1);
    forward(m, xx, Mode::train, &s2);
    const auto g1 = backward(m, x, s1, labels);
    const auto g2 = backward(m, xx, s2, ll);
    const auto t1 = g1.tensors(), t2 = g2.tensors();
    for (std::size_t t = 0; t < t1.size(); ++t)
        for (std::size_t k = 0; k < t1[t].size(); ++k)
            EXPECT_NEAR(t1[t][k], t2[t][k], 1e-12 * std::max(1.0, std::abs(t1[t][k])));
}

// ---------------------------------------------------------------------------
// Optimizer

TEST(Sgd, PlainStepWithoutMomentum) {
    std::vector<double> p{1.0, 2.0}, g{0.5, -1.0}, v{0.0, 0.0};
    sgd_momentum_step<double>(p, g, v, 1.0, 0.0);
    EXPECT_EQ(p, (std::vector<double>{0.5, 3.0}));
}

TEST(Sgd, ZeroGradientDecaysVelocity) {
    std::vector<double> p{1.0}, g{0.0}, v{2.0};
    sgd_momentum_step<double>(p, g, v, 0.1, 0.9);
    EXPECT_DOUBLE_EQ(v[0], 1.8);
    EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.18);
}

TEST(Sgd, TwoStepsAccumulate) {
    std::vector<double> p{0.0}, g{1.0}, v{0.0};
    sgd_momentum_step<double>(p, g, v, 0.01, 0.9);
    sgd_momentum_step<double>(p, g, v, 0.01, 0.9);
    EXPECT_NEAR(p[0], -0.01 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, NonFiniteParametersAreReported) {
    ClassifierSpec spec{2, 1, 2, 1, false, 2};
    auto m = make_classifier<double>(spec, 1);
    SgdMomentum<double> opt(m);
    ClassifierGradients<double> g(m);
    g.w2[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(opt.step(m, g, 0.1), NumericalError);
    EXPECT_THROW(sgd_momentum_step<double>(std::span<double>(m.bn.gamma), std::span<const double>(g.w1),
                                           std::span<double>(m.bn.beta), 0.1, 0.9),
                 DimensionError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTrip) {
    const auto dir = fixtures::scratch_dir("checkpoint");
    ClassifierSpec spec{6, 1, 8, 3, true, 10};
    auto m = toy_model(spec, 21);
    m.bn.running_mean[2] = 0.25;
    m.bn.running_var[4] = 3.5;
    save_checkpoint(dir / "m.bin", m);
    const auto r = load_checkpoint<double>(dir / "m.bin");
    EXPECT_EQ(r.spec.hidden_relu, true);
    EXPECT_EQ(r.spec.kernel2, 3);
    const auto a = m.parameters();
    const auto b = r.parameters();
    for (std::size_t t = 0; t < a.size(); ++t) EXPECT_TRUE(std::equal(a[t].begin(), a[t].end(), b[t].begin()));
    EXPECT_EQ(r.bn.running_mean, m.bn.running_mean);
    EXPECT_EQ(r.bn.running_var, m.bn.running_var);

    const auto x = random_batch<double>(3, 6, 4, 22);
    EXPECT_EQ(forward(m, x, Mode::eval), forward(r, x, Mode::eval));

    // Float checkpoints load into the same layout.
    const auto f = load_checkpoint<float>(dir / "m.bin");
    EXPECT_EQ(f.conv1.weights.size(), m.conv1.weights.size());

    std::filesystem::resize_file(dir / "m.bin", std::filesystem::file_size(dir / "m.bin") - 8);
    EXPECT_THROW(load_checkpoint<double>(dir / "m.bin"), FormatError);
    EXPECT_THROW(load_checkpoint<double>(dir / "none.bin"), IoError);
}

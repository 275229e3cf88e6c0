#pragma once

// Trainable head over pooled features:
//   logits = global_mean(conv2(relu?(conv1(batchnorm(x)))))
// Templated on the scalar so that training can run in float while gradient
// checks run the identical code in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patchkernel/binary_io.hpp"
#include "patchkernel/error.hpp"

namespace patchkernel {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// [n, c, h, w] row-major.
template <class T>
struct Batch {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    Batch() = default;
    Batch(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

    std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
    T* sample(int b) { return data.data() + b * sample_size(); }
    const T* sample(int b) const { return data.data() + b * sample_size(); }
    T& at(int b, int ch, int y, int x) {
        return data[((static_cast<std::size_t>(b) * c + ch) * h + y) * w + x];
    }
    T at(int b, int ch, int y, int x) const {
        return data[((static_cast<std::size_t>(b) * c + ch) * h + y) * w + x];
    }
};

enum class Mode { train, eval };

template <class T>
struct BatchNormState {
    std::vector<T> gamma, beta, running_mean, running_var;
    T epsilon = T(1e-5);
    T momentum = T(0.1);

    BatchNormState() = default;
    explicit BatchNormState(int channels)
        : gamma(static_cast<std::size_t>(channels), T(1)),
          beta(static_cast<std::size_t>(channels), T(0)),
          running_mean(static_cast<std::size_t>(channels), T(0)),
          running_var(static_cast<std::size_t>(channels), T(1)) {}

    int channels() const { return static_cast<int>(gamma.size()); }

    // Exponential update from biased batch variance over `count` values;
    // the stored variance is the unbiased estimate.
    void absorb(std::span<const T> batch_mean, std::span<const T> batch_var, std::size_t count) {
        const T unbias = count > 1 ? T(count) / T(count - 1) : T(1);
        for (std::size_t c = 0; c < gamma.size(); ++c) {
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * batch_mean[c];
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * batch_var[c] * unbias;
        }
    }
};

// Per-channel mean and biased variance over (batch, height, width).
template <class T>
void batch_statistics(const Batch<T>& x, std::vector<T>& mean, std::vector<T>& var) {
    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    const double count = static_cast<double>(x.n) * hw;
    mean.assign(static_cast<std::size_t>(x.c), T(0));
    var.assign(static_cast<std::size_t>(x.c), T(0));
    for (int ch = 0; ch < x.c; ++ch) {
        double s = 0.0;
        for (int b = 0; b < x.n; ++b) {
            const T* p = x.sample(b) + ch * hw;
            for (std::size_t k = 0; k < hw; ++k) s += p[k];
        }
        const double m = s / count;
        double v = 0.0;
        for (int b = 0; b < x.n; ++b) {
            const T* p = x.sample(b) + ch * hw;
            for (std::size_t k = 0; k < hw; ++k) v += (p[k] - m) * (p[k] - m);
        }
        mean[static_cast<std::size_t>(ch)] = static_cast<T>(m);
        var[static_cast<std::size_t>(ch)] = static_cast<T>(v / count);
    }
}

namespace detail {

template <class T>
void check_bn_input(const Batch<T>& x, const BatchNormState<T>& bn, Mode mode) {
    if (x.c != bn.channels())
        throw DimensionError("batch has " + std::to_string(x.c) + " channels, batch norm expects " +
                             std::to_string(bn.channels()));
    if (mode == Mode::train && x.n < 2) throw DomainError("train-mode batch norm needs a batch of at least 2");
}

// y = gamma * (x - mean) * invstd + beta for one sample.
template <class T>
void normalize_sample(const T* x, T* y, int channels, std::size_t hw, const BatchNormState<T>& bn,
                      std::span<const T> mean, std::span<const T> invstd) {
    for (int ch = 0; ch < channels; ++ch) {
        const auto c = static_cast<std::size_t>(ch);
        const T scale = bn.gamma[c] * invstd[c];
        const T shift = bn.beta[c] - mean[c] * scale;
        const T* src = x + c * hw;
        T* dst = y + c * hw;
        for (std::size_t k = 0; k < hw; ++k) dst[k] = src[k] * scale + shift;
    }
}

template <class T>
std::vector<T> inverse_std(std::span<const T> var, T eps) {
    std::vector<T> out(var.size());
    for (std::size_t c = 0; c < var.size(); ++c) out[c] = T(1) / std::sqrt(var[c] + eps);
    return out;
}

}  // namespace detail

// Standalone batch normalization. Train mode uses batch statistics and
// updates the running statistics in `bn`; eval mode uses the running ones.
template <class T>
Batch<T> batchnorm_forward(const Batch<T>& x, BatchNormState<T>& bn, Mode mode) {
    detail::check_bn_input(x, bn, mode);
    std::vector<T> mean, var;
    if (mode == Mode::train) {
        batch_statistics(x, mean, var);
    } else {
        mean = bn.running_mean;
        var = bn.running_var;
    }
    const auto invstd = detail::inverse_std<T>(var, bn.epsilon);
    Batch<T> y(x.n, x.c, x.h, x.w);
    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    for (int b = 0; b < x.n; ++b) detail::normalize_sample<T>(x.sample(b), y.sample(b), x.c, hw, bn, mean, invstd);
    if (mode == Mode::train) bn.absorb(mean, var, static_cast<std::size_t>(x.n) * hw);
    return y;
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, no padding) through im2col.

template <class T>
struct ConvOperator {
    int out_channels = 0, in_channels = 0, kernel = 1;
    std::vector<T> weights;  // [out, in, k, k]
    std::vector<T> bias;     // [out]

    ConvOperator() = default;
    ConvOperator(int out, int in, int k)
        : out_channels(out), in_channels(in), kernel(k),
          weights(static_cast<std::size_t>(out) * in * k * k, T(0)),
          bias(static_cast<std::size_t>(out), T(0)) {}

    int patch_length() const { return in_channels * kernel * kernel; }

    Eigen::Map<const RowMatrix<T>> matrix() const {
        return {weights.data(), out_channels, patch_length()};
    }
};

namespace detail {

// cols[(ci*k + dy)*k + dx, y*wo + x] = in[ci, y+dy, x+dx]
template <class T>
void im2col(const T* in, int channels, int h, int w, int k, RowMatrix<T>& cols) {
    const int ho = h - k + 1, wo = w - k + 1;
    cols.resize(static_cast<Eigen::Index>(channels) * k * k, static_cast<Eigen::Index>(ho) * wo);
    for (int ci = 0; ci < channels; ++ci)
        for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
                T* row = cols.row((ci * k + dy) * k + dx).data();
                for (int y = 0; y < ho; ++y) {
                    const T* src = in + (static_cast<std::size_t>(ci) * h + y + dy) * w + dx;
                    std::copy(src, src + wo, row + y * wo);
                }
            }
}

template <class T>
void col2im_add(const RowMatrix<T>& cols, int channels, int h, int w, int k, T* out) {
    const int ho = h - k + 1, wo = w - k + 1;
    for (int ci = 0; ci < channels; ++ci)
        for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
                const T* row = cols.row((ci * k + dy) * k + dx).data();
                for (int y = 0; y < ho; ++y) {
                    T* dst = out + (static_cast<std::size_t>(ci) * h + y + dy) * w + dx;
                    for (int x = 0; x < wo; ++x) dst[x] += row[y * wo + x];
                }
            }
}

// out (Cout x ho*wo) = W * cols(in) + b for one sample.
template <class T>
void conv_sample(const ConvOperator<T>& op, const T* in, int h, int w, T* out, RowMatrix<T>& scratch) {
    const int ho = h - op.kernel + 1, wo = w - op.kernel + 1;
    Eigen::Map<RowMatrix<T>> dst(out, op.out_channels, static_cast<Eigen::Index>(ho) * wo);
    if (op.kernel == 1) {
        Eigen::Map<const RowMatrix<T>> src(in, op.in_channels, static_cast<Eigen::Index>(h) * w);
        dst.noalias() = op.matrix() * src;
    } else {
        im2col(in, op.in_channels, h, w, op.kernel, scratch);
        dst.noalias() = op.matrix() * scratch;
    }
    dst.colwise() += Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>>(op.bias.data(), op.out_channels);
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct ClassifierSpec {
    int in_channels = 0;  // 2|D|
    int kernel1 = 1;      // k2
    int channels1 = 128;  // c2
    int kernel2 = 6;      // k3
    bool hidden_relu = false;
    int classes = 10;

    friend bool operator==(const ClassifierSpec&, const ClassifierSpec&) = default;
};

template <class T>
struct ClassifierModel {
    ClassifierSpec spec;
    BatchNormState<T> bn;
    ConvOperator<T> conv1;
    ConvOperator<T> conv2;

    int min_input_side() const { return spec.kernel1 + spec.kernel2 - 1; }

    // Trainable tensors in a fixed order shared with ClassifierGradients.
    std::vector<std::span<T>> parameters() {
        return {bn.gamma, bn.beta, conv1.weights, conv1.bias, conv2.weights, conv2.bias};
    }
    std::vector<std::span<const T>> parameters() const {
        return {bn.gamma, bn.beta, conv1.weights, conv1.bias, conv2.weights, conv2.bias};
    }
};

inline const char* const kParameterNames[] = {"bn.gamma", "bn.beta", "conv1.weight",
                                              "conv1.bias", "conv2.weight", "conv2.bias"};

// Uniform(-a, a) weights with a = 1/sqrt(fan_in), zero biases.
template <class T>
ClassifierModel<T> make_classifier(const ClassifierSpec& spec, std::uint64_t seed) {
    if (spec.in_channels < 1 || spec.channels1 < 1 || spec.classes < 2 || spec.kernel1 < 1 || spec.kernel2 < 1)
        throw DomainError("invalid classifier shape");
    ClassifierModel<T> m;
    m.spec = spec;
    m.bn = BatchNormState<T>(spec.in_channels);
    m.conv1 = ConvOperator<T>(spec.channels1, spec.in_channels, spec.kernel1);
    m.conv2 = ConvOperator<T>(spec.classes, spec.channels1, spec.kernel2);
    std::mt19937_64 rng(seed);
    for (auto* op : {&m.conv1, &m.conv2}) {
        const double a = 1.0 / std::sqrt(static_cast<double>(op->patch_length()));
        std::uniform_real_distribution<double> u(-a, a);
        for (auto& w : op->weights) w = static_cast<T>(u(rng));
    }
    return m;
}

template <class T>
struct ClassifierGradients {
    std::vector<T> gamma, beta, w1, b1, w2, b2;

    explicit ClassifierGradients(const ClassifierModel<T>& m)
        : gamma(m.bn.gamma.size()), beta(m.bn.beta.size()), w1(m.conv1.weights.size()),
          b1(m.conv1.bias.size()), w2(m.conv2.weights.size()), b2(m.conv2.bias.size()) {}

    std::vector<std::span<T>> tensors() { return {gamma, beta, w1, b1, w2, b2}; }
    std::vector<std::span<const T>> tensors() const { return {gamma, beta, w1, b1, w2, b2}; }
};

// Intermediate values kept by forward() for backward().
template <class T>
struct ForwardState {
    Mode mode = Mode::eval;
    std::vector<T> mean, var, invstd;  // batch norm statistics used
    int h1 = 0, w1 = 0, h2 = 0, w2 = 0;
    std::vector<T> z1;  // [n, c2, h1, w1] conv1 output (pre-activation)
    RowMatrix<T> logits;
};

template <class T>
RowMatrix<T> forward(const ClassifierModel<T>& m, const Batch<T>& x, Mode mode, ForwardState<T>* state = nullptr) {
    detail::check_bn_input(x, m.bn, mode);
    if (x.h != x.w) throw DimensionError("classifier input must be square");
    if (x.h < m.min_input_side())
        throw DimensionError("input side " + std::to_string(x.h) + " smaller than k2 + k3 - 1 = " +
                             std::to_string(m.min_input_side()));

    ForwardState<T> local;
    ForwardState<T>& st = state ? *state : local;
    st.mode = mode;
    if (mode == Mode::train) {
        batch_statistics(x, st.mean, st.var);
    } else {
        st.mean = m.bn.running_mean;
        st.var = m.bn.running_var;
    }
    st.invstd = detail::inverse_std<T>(st.var, m.bn.epsilon);
    st.h1 = x.h - m.spec.kernel1 + 1;
    st.w1 = x.w - m.spec.kernel1 + 1;
    st.h2 = st.h1 - m.spec.kernel2 + 1;
    st.w2 = st.w1 - m.spec.kernel2 + 1;

    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    const std::size_t z1_size = static_cast<std::size_t>(m.spec.channels1) * st.h1 * st.w1;
    const std::size_t z2_size = static_cast<std::size_t>(m.spec.classes) * st.h2 * st.w2;
    st.z1.assign(static_cast<std::size_t>(x.n) * z1_size, T(0));
    st.logits.resize(x.n, m.spec.classes);

    std::vector<T> y(x.sample_size()), a1(z1_size), z2(z2_size);
    RowMatrix<T> scratch;
    for (int b = 0; b < x.n; ++b) {
        detail::normalize_sample<T>(x.sample(b), y.data(), x.c, hw, m.bn, st.mean, st.invstd);
        T* z1 = st.z1.data() + b * z1_size;
        detail::conv_sample(m.conv1, y.data(), x.h, x.w, z1, scratch);
        const T* act = z1;
        if (m.spec.hidden_relu) {
            for (std::size_t k = 0; k < z1_size; ++k) a1[k] = std::max(z1[k], T(0));
            act = a1.data();
        }
        detail::conv_sample(m.conv2, act, st.h1, st.w1, z2.data(), scratch);
        const std::size_t area = static_cast<std::size_t>(st.h2) * st.w2;
        for (int o = 0; o < m.spec.classes; ++o) {
            T s = T(0);
            for (std::size_t k = 0; k < area; ++k) s += z2[o * area + k];
            st.logits(b, o) = s / static_cast<T>(area);
        }
    }
    return st.logits;
}

// ---------------------------------------------------------------------------
// Loss

namespace detail {

template <class T>
void check_labels(std::span<const int> labels, Eigen::Index rows, Eigen::Index classes) {
    if (static_cast<Eigen::Index>(labels.size()) != rows) throw DimensionError("label count does not match batch");
    for (int l : labels)
        if (l < 0 || l >= classes) throw DomainError("label " + std::to_string(l) + " out of range");
}

}  // namespace detail

// Mean over the batch of -log softmax(logits)[label].
template <class T>
T cross_entropy(const RowMatrix<T>& logits, std::span<const int> labels, RowMatrix<T>* grad = nullptr) {
    detail::check_labels<T>(labels, logits.rows(), logits.cols());
    const Eigen::Index n = logits.rows();
    if (grad) grad->resize(n, logits.cols());
    T total = T(0);
    for (Eigen::Index b = 0; b < n; ++b) {
        const T mx = logits.row(b).maxCoeff();
        T z = T(0);
        for (Eigen::Index k = 0; k < logits.cols(); ++k) z += std::exp(logits(b, k) - mx);
        const T log_z = std::log(z) + mx;
        total += log_z - logits(b, labels[static_cast<std::size_t>(b)]);
        if (grad) {
            for (Eigen::Index k = 0; k < logits.cols(); ++k) (*grad)(b, k) = std::exp(logits(b, k) - log_z) / T(n);
            (*grad)(b, labels[static_cast<std::size_t>(b)]) -= T(1) / T(n);
        }
    }
    return total / static_cast<T>(n);
}

// Gradients of the mean cross-entropy for the batch forward() just saw.
// The features are data, so batch statistics carry no parameter
// dependence: gamma and beta gradients need only dL/dy and x-hat.
template <class T>
ClassifierGradients<T> backward(const ClassifierModel<T>& m, const Batch<T>& x, const ForwardState<T>& st,
                                std::span<const int> labels, T* loss_out = nullptr) {
    if (st.logits.rows() != x.n) throw DimensionError("forward state does not belong to this batch");
    RowMatrix<T> dlogits;
    const T loss = cross_entropy<T>(st.logits, labels, &dlogits);
    if (loss_out) *loss_out = loss;

    ClassifierGradients<T> g(m);
    Eigen::Map<RowMatrix<T>> dw1(g.w1.data(), m.conv1.out_channels, m.conv1.patch_length());
    Eigen::Map<RowMatrix<T>> dw2(g.w2.data(), m.conv2.out_channels, m.conv2.patch_length());
    Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> db1(g.b1.data(), m.conv1.out_channels);
    Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> db2(g.b2.data(), m.conv2.out_channels);

    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    const Eigen::Index area1 = static_cast<Eigen::Index>(st.h1) * st.w1;
    const Eigen::Index area2 = static_cast<Eigen::Index>(st.h2) * st.w2;
    const std::size_t z1_size = static_cast<std::size_t>(m.spec.channels1) * area1;

    std::vector<T> y(x.sample_size()), a1(z1_size);
    RowMatrix<T> cols, dz2(m.spec.classes, area2), dcols, dz1, dy;
    for (int b = 0; b < x.n; ++b) {
        const T* z1 = st.z1.data() + b * z1_size;
        const T* act = z1;
        if (m.spec.hidden_relu) {
            for (std::size_t k = 0; k < z1_size; ++k) a1[k] = std::max(z1[k], T(0));
            act = a1.data();
        }

        // Global mean pool spreads each logit gradient evenly.
        for (int o = 0; o < m.spec.classes; ++o) dz2.row(o).setConstant(dlogits(b, o) / static_cast<T>(area2));
        db2 += dz2.rowwise().sum();
        if (m.spec.kernel2 == 1) {
            Eigen::Map<const RowMatrix<T>> a(act, m.spec.channels1, area1);
            dw2.noalias() += dz2 * a.transpose();
            dz1.noalias() = m.conv2.matrix().transpose() * dz2;
        } else {
            detail::im2col(act, m.spec.channels1, st.h1, st.w1, m.spec.kernel2, cols);
            dw2.noalias() += dz2 * cols.transpose();
            dcols.noalias() = m.conv2.matrix().transpose() * dz2;
            dz1.setZero(m.spec.channels1, area1);
            detail::col2im_add(dcols, m.spec.channels1, st.h1, st.w1, m.spec.kernel2, dz1.data());
        }
        if (m.spec.hidden_relu)
            for (std::size_t k = 0; k < z1_size; ++k)
                if (!(z1[k] > T(0))) dz1.data()[k] = T(0);

        detail::normalize_sample<T>(x.sample(b), y.data(), x.c, hw, m.bn, st.mean, st.invstd);
        db1 += dz1.rowwise().sum();
        if (m.spec.kernel1 == 1) {
            Eigen::Map<const RowMatrix<T>> yin(y.data(), x.c, static_cast<Eigen::Index>(hw));
            dw1.noalias() += dz1 * yin.transpose();
            dy.noalias() = m.conv1.matrix().transpose() * dz1;
        } else {
            detail::im2col(y.data(), x.c, x.h, x.w, m.spec.kernel1, cols);
            dw1.noalias() += dz1 * cols.transpose();
            dcols.noalias() = m.conv1.matrix().transpose() * dz1;
            dy.setZero(x.c, static_cast<Eigen::Index>(hw));
            detail::col2im_add(dcols, x.c, x.h, x.w, m.spec.kernel1, dy.data());
        }

        // y = gamma * xhat + beta
        const T* xs = x.sample(b);
        for (int ch = 0; ch < x.c; ++ch) {
            const auto c = static_cast<std::size_t>(ch);
            T sg = T(0), sb = T(0);
            const T* dyc = dy.row(ch).data();
            const T* xc = xs + c * hw;
            for (std::size_t k = 0; k < hw; ++k) {
                sb += dyc[k];
                sg += dyc[k] * (xc[k] - st.mean[c]) * st.invstd[c];
            }
            g.gamma[c] += sg;
            g.beta[c] += sb;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Optimizer

// v <- momentum * v + g;  p <- p - lr * v   (no dampening, no weight decay)
template <class T>
void sgd_momentum_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, T lr, T momentum) {
    if (params.size() != grads.size() || params.size() != velocity.size())
        throw DimensionError("parameter, gradient and velocity sizes differ");
    for (std::size_t k = 0; k < params.size(); ++k) {
        velocity[k] = momentum * velocity[k] + grads[k];
        params[k] -= lr * velocity[k];
    }
}

template <class T>
class SgdMomentum {
public:
    explicit SgdMomentum(const ClassifierModel<T>& m, T momentum = T(0.9)) : momentum_(momentum) {
        for (auto p : m.parameters()) velocity_.emplace_back(p.size(), T(0));
    }

    void step(ClassifierModel<T>& m, const ClassifierGradients<T>& g, T lr) {
        auto params = m.parameters();
        auto grads = g.tensors();
        for (std::size_t t = 0; t < params.size(); ++t) {
            sgd_momentum_step<T>(params[t], grads[t], velocity_[t], lr, momentum_);
            for (T v : params[t])
                if (!std::isfinite(v))
                    throw NumericalError(std::string("non-finite value in ") + kParameterNames[t] +
                                         " after optimizer step");
        }
    }

    const std::vector<std::vector<T>>& velocity() const { return velocity_; }

private:
    T momentum_;
    std::vector<std::vector<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Checkpoint: magic, version, spec, bn epsilon/momentum, then each tensor as
// rank u32, dims u64..., f64 values row-major.

inline constexpr io::Magic kCheckpointMagic{'P', 'K', 'C', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_tensor(std::ostream& out, std::span<const T> values, std::initializer_list<std::uint64_t> dims) {
    io::write(out, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) io::write(out, d);
    for (T v : values) io::write(out, static_cast<double>(v));
}

template <class T>
void read_tensor(std::istream& in, std::span<T> values, std::initializer_list<std::uint64_t> dims) {
    const auto rank = io::read<std::uint32_t>(in, "tensor rank");
    if (rank != dims.size()) throw FormatError("checkpoint tensor rank mismatch");
    for (auto d : dims)
        if (io::read<std::uint64_t>(in, "tensor dim") != d) throw FormatError("checkpoint tensor shape mismatch");
    for (T& v : values) v = static_cast<T>(io::read<double>(in, "tensor values"));
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ClassifierModel<T>& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    io::write_magic(out, kCheckpointMagic);
    io::write(out, kCheckpointVersion);
    const auto& s = m.spec;
    for (int v : {s.in_channels, s.kernel1, s.channels1, s.kernel2, s.hidden_relu ? 1 : 0, s.classes})
        io::write(out, static_cast<std::int32_t>(v));
    io::write(out, static_cast<double>(m.bn.epsilon));
    io::write(out, static_cast<double>(m.bn.momentum));
    const std::uint64_t C = static_cast<std::uint64_t>(s.in_channels);
    for (const auto* t : {&m.bn.gamma, &m.bn.beta, &m.bn.running_mean, &m.bn.running_var})
        detail::write_tensor<T>(out, *t, {C});
    for (const auto* op : {&m.conv1, &m.conv2}) {
        detail::write_tensor<T>(out, op->weights,
                                {std::uint64_t(op->out_channels), std::uint64_t(op->in_channels),
                                 std::uint64_t(op->kernel), std::uint64_t(op->kernel)});
        detail::write_tensor<T>(out, op->bias, {std::uint64_t(op->out_channels)});
    }
}

template <class T>
ClassifierModel<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing checkpoint: " + path.string());
    io::expect_magic(in, kCheckpointMagic, "checkpoint");
    io::expect_version(io::read<std::uint32_t>(in, "version"), kCheckpointVersion, "checkpoint");
    ClassifierSpec s;
    s.in_channels = io::read<std::int32_t>(in, "spec");
    s.kernel1 = io::read<std::int32_t>(in, "spec");
    s.channels1 = io::read<std::int32_t>(in, "spec");
    s.kernel2 = io::read<std::int32_t>(in, "spec");
    s.hidden_relu = io::read<std::int32_t>(in, "spec") != 0;
    s.classes = io::read<std::int32_t>(in, "spec");
    auto m = make_classifier<T>(s, 0);
    m.bn.epsilon = static_cast<T>(io::read<double>(in, "bn epsilon"));
    m.bn.momentum = static_cast<T>(io::read<double>(in, "bn momentum"));
    const std::uint64_t C = static_cast<std::uint64_t>(s.in_channels);
    for (auto* t : {&m.bn.gamma, &m.bn.beta, &m.bn.running_mean, &m.bn.running_var})
        detail::read_tensor<T>(in, *t, {C});
    for (auto* op : {&m.conv1, &m.conv2}) {
        detail::read_tensor<T>(in, op->weights,
                               {std::uint64_t(op->out_channels), std::uint64_t(op->in_channels),
                                std::uint64_t(op->kernel), std::uint64_t(op->kernel)});
        detail::read_tensor<T>(in, op->bias, {std::uint64_t(op->out_channels)});
    }
    io::expect_eof(in, "checkpoint");
    return m;
}

}  // namespace patchkernel

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "patchkernel/classifier.hpp"
#include "patchkernel/dataset.hpp"
#include "patchkernel/encoder.hpp"
#include "patchkernel/error.hpp"
#include "patchkernel/feature_cache.hpp"

namespace patchkernel {

// Anything that yields pooled feature tensors [channels, side, side] by index.
template <class T>
class FeatureSource {
public:
    virtual ~FeatureSource() = default;
    virtual std::size_t size() const = 0;
    virtual int channels() const = 0;
    virtual int side() const = 0;
    // Called once per epoch before any load(); augmenting sources reseed here.
    virtual void begin_epoch(int /*epoch*/) {}
    // Writes channels()*side()^2 values; returns the label.
    virtual int load(std::size_t index, T* out) = 0;

    std::size_t sample_size() const { return static_cast<std::size_t>(channels()) * side() * side(); }
};

template <class T>
class InMemoryFeatures final : public FeatureSource<T> {
public:
    InMemoryFeatures(int channels, int side) : channels_(channels), side_(side) {}

    void add(std::span<const T> features, int label) {
        if (features.size() != this->sample_size()) throw DimensionError("feature tensor has the wrong size");
        data_.insert(data_.end(), features.begin(), features.end());
        labels_.push_back(label);
    }

    std::size_t size() const override { return labels_.size(); }
    int channels() const override { return channels_; }
    int side() const override { return side_; }
    int load(std::size_t index, T* out) override {
        if (index >= size()) throw DomainError("feature index out of range");
        const auto n = this->sample_size();
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(index * n), n, out);
        return labels_[index];
    }

private:
    int channels_, side_;
    std::vector<T> data_;
    std::vector<int> labels_;
};

template <class T>
class CachedFeatures final : public FeatureSource<T> {
public:
    explicit CachedFeatures(const std::filesystem::path& path) : reader_(path) {
        if (reader_.header().height != reader_.header().width) throw FormatError("cache features are not square");
    }

    const FeatureCacheHeader& header() const { return reader_.header(); }
    std::size_t size() const override { return reader_.size(); }
    int channels() const override { return static_cast<int>(reader_.header().channels); }
    int side() const override { return static_cast<int>(reader_.header().height); }
    int load(std::size_t index, T* out) override { return reader_.read<T>(index, out); }

    // Copies the whole cache into memory when it fits the caller's budget.
    std::unique_ptr<InMemoryFeatures<T>> materialize() {
        auto mem = std::make_unique<InMemoryFeatures<T>>(channels(), side());
        std::vector<T> buf(this->sample_size());
        for (std::size_t i = 0; i < size(); ++i) {
            const int label = load(i, buf.data());
            mem->add(buf, label);
        }
        return mem;
    }

private:
    FeatureCacheReader reader_;
};

// Encodes images on the fly, optionally augmenting each with a seed derived
// from (seed, epoch, index) so results do not depend on visiting order.
template <class T>
class EncodingSource final : public FeatureSource<T> {
public:
    EncodingSource(const LabeledImageSet& images, const ConvolutionalEncoder& enc, EncodingParams params,
                   bool augment, std::uint64_t seed)
        : images_(images), enc_(enc), params_(params), augment_(augment), seed_(seed) {
        if (images_.empty()) throw DomainError("no images to encode");
        side_ = pooled_side(positions_per_side(images_.side(), enc_.patch_side()), params_.pool_kernel,
                            params_.pool_stride);
    }

    std::size_t size() const override { return images_.size(); }
    int channels() const override { return enc_.channels(); }
    int side() const override { return side_; }
    void begin_epoch(int epoch) override { epoch_ = epoch; }

    int load(std::size_t index, T* out) override {
        const Image& src = images_.images.at(index);
        PooledFeatureMap f;
        if (augment_) {
            std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                              static_cast<std::uint32_t>(epoch_), static_cast<std::uint32_t>(index),
                              static_cast<std::uint32_t>(index >> 32)};
            std::mt19937_64 rng(seq);
            f = encode_image(enc_, augment(src, rng), params_);
        } else {
            f = encode_image(enc_, src, params_);
        }
        const auto v = f.channel_major<T>();
        std::copy(v.begin(), v.end(), out);
        return src.label.value_or(0);
    }

private:
    const LabeledImageSet& images_;
    const ConvolutionalEncoder& enc_;
    EncodingParams params_;
    bool augment_;
    std::uint64_t seed_;
    int side_ = 0;
    int epoch_ = 0;
};

template <class T>
void load_batch(FeatureSource<T>& src, std::span<const std::size_t> indices, Batch<T>& batch,
                std::vector<int>& labels) {
    const int n = static_cast<int>(indices.size());
    if (batch.n != n || batch.c != src.channels() || batch.h != src.side() || batch.w != src.side())
        batch = Batch<T>(n, src.channels(), src.side(), src.side());
    labels.resize(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k)
        labels[k] = src.load(indices[k], batch.sample(static_cast<int>(k)));
}

// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 175;
    double learning_rate = 0.003;
    double decay_factor = 0.1;
    std::vector<int> decay_epochs{100, 150};
    double momentum = 0.9;
    int batch_size = 512;
    std::uint64_t seed = 0;
    bool augment = false;

    void validate() const {
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 2) throw ConfigError("batch size must be >= 2");
        if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
        for (std::size_t k = 0; k < decay_epochs.size(); ++k) {
            if (k > 0 && decay_epochs[k] <= decay_epochs[k - 1])
                throw ConfigError("decay epochs must be strictly increasing");
            if (decay_epochs[k] >= epochs && epochs > 0) throw ConfigError("decay epochs must be < epochs");
        }
    }

    // Epochs are 0-based; the rate drops at the start of each decay epoch.
    double rate_at(int epoch) const {
        double lr = learning_rate;
        for (int d : decay_epochs)
            if (epoch >= d) lr *= decay_factor;
        return lr;
    }
};

struct EpochMetrics {
    int epoch = 0;
    double lr = 0, train_loss = 0, train_acc = 0, test_acc = std::nan(""), wall_seconds = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,trainLoss,trainAcc,testAcc,wallSeconds";

inline std::string metrics_row(const EpochMetrics& m) {
    std::ostringstream s;
    s << std::setprecision(10) << m.epoch << ',' << m.lr << ',' << m.train_loss << ',' << m.train_acc << ',';
    if (std::isnan(m.test_acc)) s << "nan";
    else s << m.test_acc;
    s << ',' << std::setprecision(6) << m.wall_seconds;
    return s.str();
}

template <class T>
double evaluate(const ClassifierModel<T>& model, FeatureSource<T>& src, int batch_size = 512) {
    if (src.channels() != model.spec.in_channels) throw DimensionError("feature channels do not match the model");
    if (src.size() == 0) throw DomainError("cannot evaluate on an empty set");
    src.begin_epoch(0);
    std::size_t correct = 0;
    Batch<T> batch;
    std::vector<int> labels;
    std::vector<std::size_t> idx;
    for (std::size_t first = 0; first < src.size(); first += static_cast<std::size_t>(batch_size)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size), src.size() - first);
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), first);
        load_batch(src, idx, batch, labels);
        const auto logits = forward(model, batch, Mode::eval);
        for (std::size_t b = 0; b < n; ++b) {
            Eigen::Index arg;
            logits.row(static_cast<Eigen::Index>(b)).maxCoeff(&arg);
            correct += (arg == labels[b]);
        }
    }
    return static_cast<double>(correct) / static_cast<double>(src.size());
}

template <class T>
struct TrainResult {
    ClassifierModel<T> model;
    std::vector<EpochMetrics> metrics;
};

// Mini-batch SGD with momentum. Each epoch reshuffles with a seeded
// generator; batch norm runs in train mode; the learning rate follows the
// step schedule. Batches of a single sample are skipped.
template <class T>
TrainResult<T> train(const ClassifierSpec& spec, FeatureSource<T>& train_src, FeatureSource<T>* test_src,
                     const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    cfg.validate();
    if (train_src.channels() != spec.in_channels) throw DimensionError("feature channels do not match the model");
    if (train_src.size() < 2) throw DomainError("need at least 2 training samples");

    TrainResult<T> result{make_classifier<T>(spec, cfg.seed), {}};
    auto& model = result.model;
    SgdMomentum<T> opt(model, static_cast<T>(cfg.momentum));
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(train_src.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    const auto start = std::chrono::steady_clock::now();
    Batch<T> batch;
    std::vector<int> labels;
    ForwardState<T> state;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.rate_at(epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        train_src.begin_epoch(epoch);
        double loss_sum = 0;
        std::size_t seen = 0, correct = 0;
        for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - first);
            if (n < 2) continue;
            load_batch(train_src, std::span<const std::size_t>(order).subspan(first, n), batch, labels);
            forward(model, batch, Mode::train, &state);
            T loss{};
            const auto grads = backward(model, batch, state, labels, &loss);
            model.bn.absorb(state.mean, state.var, static_cast<std::size_t>(batch.n) * batch.h * batch.w);
            opt.step(model, grads, static_cast<T>(lr));

            loss_sum += static_cast<double>(loss) * static_cast<double>(n);
            seen += n;
            for (std::size_t b = 0; b < n; ++b) {
                Eigen::Index arg;
                state.logits.row(static_cast<Eigen::Index>(b)).maxCoeff(&arg);
                correct += (arg == labels[b]);
            }
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.lr = lr;
        m.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
        m.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
        if (test_src) m.test_acc = evaluate(model, *test_src, cfg.batch_size);
        m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.metrics.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    return result;
}

}  // namespace patchkernel

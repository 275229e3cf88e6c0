#pragma once

// Experiment configuration: line-oriented `key = value` with [sections].
// Every key has a default equal to the reference CIFAR-10 linear setup, so an
// empty file is a valid configuration.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "patchkernel/classifier.hpp"
#include "patchkernel/encoder.hpp"
#include "patchkernel/error.hpp"
#include "patchkernel/training.hpp"
#include "patchkernel/whitening.hpp"

namespace patchkernel {

struct ExperimentConfig {
    std::string dataset_root = "data/cifar-10-batches-bin";

    // dictionary
    int patch_size = 6;
    int dict_size = 2048;
    double lambda = 1e-3;
    Orientation orientation = Orientation::zca;
    bool gaussian = false;
    std::uint64_t moment_samples = 500000;

    // encoding
    int neighbors = 0;  // explicit Q; 0 means derive from q_fraction
    double q_fraction = 0.4;
    int pool_kernel = 5;
    int pool_stride = 3;
    Assignment assignment = Assignment::hard;

    // classifier
    int kernel1 = 1;
    int channels1 = 128;
    int kernel2 = 6;
    bool hidden = false;

    // training
    int epochs = 175;
    double learning_rate = 0.003;
    std::vector<int> decay_epochs{100, 150};
    double decay_factor = 0.1;
    double momentum = 0.9;
    int batch_size = 512;
    bool augment = false;
    bool preload = false;  // copy the train cache into memory

    // seeds
    std::uint64_t dictionary_seed = 0;
    std::uint64_t training_seed = 0;
    std::uint64_t augmentation_seed = 0;

    // paths
    std::string dict_file = "artifacts/dictionary.bin";
    std::string whitening_file = "artifacts/whitening.bin";
    std::string train_cache = "artifacts/train.features";
    std::string test_cache = "artifacts/test.features";
    std::string model_file = "artifacts/model.ckpt";
    std::string metrics_csv = "metrics.csv";  // inside the run directory
    std::string runs_dir = "runs";

    // analysis
    std::vector<int> analysis_patch_sizes{4, 5, 6, 7, 8};
    std::vector<double> analysis_lambdas{1e-3};
    int knn_sample = 16000;
    int knn_neighbors = 4000;
    std::uint64_t max_anchors = 0;

    // runtime
    unsigned threads = 1;
    bool deterministic = false;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

    int resolved_neighbors() const {
        if (neighbors > 0) return neighbors;
        return static_cast<int>(std::lround(q_fraction * dict_size));
    }

    unsigned worker_threads() const { return deterministic ? 1u : std::max(1u, threads); }

    EncodingParams encoding() const { return {resolved_neighbors(), pool_kernel, pool_stride, assignment}; }

    TrainConfig train_config() const {
        TrainConfig t;
        t.epochs = epochs;
        t.learning_rate = learning_rate;
        t.decay_factor = decay_factor;
        t.decay_epochs = decay_epochs;
        t.momentum = momentum;
        t.batch_size = batch_size;
        t.seed = training_seed;
        t.augment = augment;
        return t;
    }

    ClassifierSpec classifier_spec() const {
        return {2 * dict_size, kernel1, channels1, kernel2, hidden, kCifarClasses};
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (patch_size < 1 || patch_size > kCifarSide) fail("patch_size must lie in [1, 32]");
        if (dict_size < 1) fail("dict_size must be >= 1");
        if (!(lambda >= 0)) fail("lambda must be >= 0");
        if (moment_samples < 2) fail("moment_samples must be >= 2");
        if (neighbors < 0) fail("neighbors must be >= 0");
        if (neighbors == 0 && !(q_fraction > 0 && q_fraction <= 1)) fail("q_fraction must lie in (0, 1]");
        const int q = resolved_neighbors();
        if (q < 1 || q > 2 * dict_size) fail("resolved Q=" + std::to_string(q) + " outside [1, 2|D|]");
        const int positions = kCifarSide - patch_size + 1;
        if (pool_kernel < 1 || pool_kernel > positions) fail("pool_kernel must lie in [1, N-P+1]");
        if (pool_stride < 1) fail("pool_stride must be >= 1");
        if (assignment == Assignment::hard && pool_kernel * pool_kernel > 255)
            fail("hard assignment needs pool_kernel^2 <= 255");
        const int pooled = (positions - pool_kernel) / pool_stride + 1;
        if (kernel1 < 1 || kernel2 < 1 || kernel1 + kernel2 - 1 > pooled)
            fail("classifier kernels k2 + k3 - 1 exceed the pooled side " + std::to_string(pooled));
        if (channels1 < 1) fail("channels1 must be >= 1");
        train_config().validate();
        if (knn_sample < 3 || knn_neighbors < 2 || knn_neighbors >= knn_sample)
            fail("analysis needs 2 <= knn_neighbors < knn_sample");
        for (int p : analysis_patch_sizes)
            if (p < 1 || p > kCifarSide) fail("analysis patch sizes must lie in [1, 32]");
        for (double l : analysis_lambdas)
            if (!(l >= 0)) fail("analysis lambdas must be >= 0");
    }
};

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
std::string join(const std::vector<T>& values) {
    std::string s;
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (k) s += ',';
        if constexpr (std::is_floating_point_v<T>) s += format_double(values[k]);
        else s += std::to_string(values[k]);
    }
    return s;
}

template <class T>
T parse_scalar(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    T v{};
    if constexpr (std::is_same_v<T, bool>) {
        std::string w;
        in >> w;
        if (w == "true" || w == "1" || w == "yes") return true;
        if (w == "false" || w == "0" || w == "no") return false;
        throw ConfigError("bad boolean for " + key + ": '" + text + "'");
    } else {
        in >> v;
        std::string rest;
        if (!in || (in >> rest)) throw ConfigError("bad value for " + key + ": '" + text + "'");
        return v;
    }
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
    std::vector<T> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        out.push_back(parse_scalar<T>(key, item.substr(b)));
    }
    return out;
}

// Single table of (section.key, field) bindings used for both directions.
template <class Visitor>
void visit_fields(ExperimentConfig& c, Visitor&& v) {
    v("data.root", c.dataset_root);
    v("dictionary.patch_size", c.patch_size);
    v("dictionary.size", c.dict_size);
    v("dictionary.lambda", c.lambda);
    v("dictionary.orientation", c.orientation);
    v("dictionary.gaussian", c.gaussian);
    v("dictionary.moment_samples", c.moment_samples);
    v("encoding.neighbors", c.neighbors);
    v("encoding.q_fraction", c.q_fraction);
    v("encoding.pool_kernel", c.pool_kernel);
    v("encoding.pool_stride", c.pool_stride);
    v("encoding.assignment", c.assignment);
    v("classifier.kernel1", c.kernel1);
    v("classifier.channels1", c.channels1);
    v("classifier.kernel2", c.kernel2);
    v("classifier.hidden", c.hidden);
    v("train.epochs", c.epochs);
    v("train.learning_rate", c.learning_rate);
    v("train.decay_epochs", c.decay_epochs);
    v("train.decay_factor", c.decay_factor);
    v("train.momentum", c.momentum);
    v("train.batch_size", c.batch_size);
    v("train.augment", c.augment);
    v("train.preload", c.preload);
    v("seeds.dictionary", c.dictionary_seed);
    v("seeds.training", c.training_seed);
    v("seeds.augmentation", c.augmentation_seed);
    v("paths.dict_file", c.dict_file);
    v("paths.whitening_file", c.whitening_file);
    v("paths.train_cache", c.train_cache);
    v("paths.test_cache", c.test_cache);
    v("paths.model_file", c.model_file);
    v("paths.metrics_csv", c.metrics_csv);
    v("paths.runs_dir", c.runs_dir);
    v("analysis.patch_sizes", c.analysis_patch_sizes);
    v("analysis.lambdas", c.analysis_lambdas);
    v("analysis.knn_sample", c.knn_sample);
    v("analysis.knn_neighbors", c.knn_neighbors);
    v("analysis.max_anchors", c.max_anchors);
    v("runtime.threads", c.threads);
    v("runtime.deterministic", c.deterministic);
}

template <class T>
std::string to_text(const T& v) {
    if constexpr (std::is_same_v<T, std::string>) return v;
    else if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
    else if constexpr (std::is_same_v<T, Orientation> || std::is_same_v<T, Assignment>) return to_string(v);
    else if constexpr (std::is_floating_point_v<T>) return format_double(v);
    else if constexpr (requires { v.begin(); }) return join(v);
    else return std::to_string(v);
}

template <class T>
void from_text(const std::string& key, const std::string& text, T& v) {
    if constexpr (std::is_same_v<T, std::string>) v = text;
    else if constexpr (std::is_same_v<T, Orientation>) v = parse_orientation(text);
    else if constexpr (std::is_same_v<T, Assignment>) v = parse_assignment(text);
    else if constexpr (requires { typename T::value_type; v.push_back({}); })
        v = parse_list<typename T::value_type>(key, text);
    else v = parse_scalar<T>(key, text);
}

}  // namespace detail

inline void save_config(std::ostream& out, ExperimentConfig c) {
    std::string section;
    detail::visit_fields(c, [&](const std::string& key, const auto& value) {
        const auto dot = key.find('.');
        const auto sec = key.substr(0, dot);
        if (sec != section) {
            out << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
            section = sec;
        }
        out << key.substr(dot + 1) << " = " << detail::to_text(value) << '\n';
    });
}

inline ExperimentConfig load_config(std::istream& in) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    ExperimentConfig c;
    std::set<std::string> known;
    detail::visit_fields(c, [&](const std::string& key, auto& value) {
        known.insert(key);
        if (auto node = tree.get_optional<std::string>(key)) detail::from_text(key, *node, value);
    });
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config key '" + section + "' must live in a [section]");
        for (const auto& [key, _] : body)
            if (!known.count(section + "." + key)) throw ConfigError("unknown config key " + section + "." + key);
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path.string());
    return load_config(in);
}

}  // namespace patchkernel

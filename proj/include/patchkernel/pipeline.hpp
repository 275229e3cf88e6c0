#pragma once

// End-to-end subcommands shared by the CLI and the acceptance suite.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "patchkernel/analysis.hpp"
#include "patchkernel/classifier.hpp"
#include "patchkernel/config.hpp"
#include "patchkernel/dataset.hpp"
#include "patchkernel/dictionary.hpp"
#include "patchkernel/encoder.hpp"
#include "patchkernel/feature_cache.hpp"
#include "patchkernel/training.hpp"
#include "patchkernel/whitening.hpp"

namespace patchkernel {

namespace fs = std::filesystem;

// Moments use their own stream so changing |D| does not move the patch sample.
inline constexpr std::uint64_t kMomentSeedSalt = 0x6d6f6d656e7473ull;

// Loads each split at most once.
class DatasetStore {
public:
    explicit DatasetStore(fs::path root) : root_(std::move(root)) {}

    // Pre-populated store, e.g. synthetic data in tests.
    DatasetStore(LabeledImageSet train, LabeledImageSet test) : train_(std::move(train)), test_(std::move(test)) {}

    const LabeledImageSet& train() { return get(train_, Split::train); }
    const LabeledImageSet& test() { return get(test_, Split::test); }

private:
    const LabeledImageSet& get(std::optional<LabeledImageSet>& slot, Split split) {
        if (!slot) {
            if (!fs::is_directory(root_)) throw IoError("dataset root is not a directory: " + root_.string());
            slot = load_cifar10(root_, split);
        }
        return *slot;
    }

    fs::path root_;
    std::optional<LabeledImageSet> train_, test_;
};

// <base>/<name>-YYYYmmdd-HHMMSS, suffixed -2, -3, ... rather than reusing a
// directory.
inline fs::path create_run_directory(const fs::path& base, const std::string& name) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    std::ostringstream stamp;
    stamp << name << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
    fs::create_directories(base);
    fs::path dir = base / stamp.str();
    for (int k = 2; fs::exists(dir); ++k) dir = base / (stamp.str() + "-" + std::to_string(k));
    fs::create_directory(dir);
    return dir;
}

inline void echo_config(const fs::path& run_dir, const ExperimentConfig& cfg,
                        const std::optional<fs::path>& source = std::nullopt) {
    std::ofstream out(run_dir / "config.ini");
    save_config(out, cfg);
    if (source) fs::copy_file(*source, run_dir / "config.input.ini", fs::copy_options::overwrite_existing);
}

inline void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// ---------------------------------------------------------------------------

struct DictionaryArtifacts {
    WhiteningOperator whitening;
    Dictionary dictionary;
};

inline DictionaryArtifacts build_dictionary_artifacts(const ExperimentConfig& cfg, const LabeledImageSet& train) {
    const auto moments = sample_patch_moments(train, cfg.patch_size, cfg.moment_samples,
                                              cfg.dictionary_seed ^ kMomentSeedSalt, cfg.worker_threads());
    DictionaryArtifacts a;
    a.whitening = build_whitening_operator(moments, cfg.lambda, cfg.orientation);
    a.dictionary = cfg.gaussian ? sample_gaussian_dictionary(cfg.dict_size, cfg.patch_size, cfg.dictionary_seed)
                                : sample_dictionary(train, cfg.dict_size, cfg.patch_size, a.whitening,
                                                    cfg.dictionary_seed);
    return a;
}

inline DictionaryArtifacts cmd_build_dict(const ExperimentConfig& cfg, DatasetStore& data, bool force,
                                          std::ostream& log) {
    cfg.validate();
    for (const auto& p : {cfg.dict_file, cfg.whitening_file})
        if (fs::exists(p) && !force) throw IoError("refusing to overwrite " + p + " (pass --force)");
    auto a = build_dictionary_artifacts(cfg, data.train());
    ensure_parent(cfg.dict_file);
    ensure_parent(cfg.whitening_file);
    save_whitening(cfg.whitening_file, a.whitening);
    save_dictionary(cfg.dict_file, a.dictionary);
    log << "dictionary: |D|=" << a.dictionary.base_size << " atoms=" << a.dictionary.atom_count()
        << " P=" << cfg.patch_size << " lambda=" << cfg.lambda << " d_ext=" << a.dictionary.dimension()
        << " kind=" << (cfg.gaussian ? "gaussian" : "patches") << " orientation=" << to_string(cfg.orientation)
        << '\n';
    return a;
}

inline DictionaryArtifacts load_dictionary_artifacts(const ExperimentConfig& cfg) {
    DictionaryArtifacts a{load_whitening(cfg.whitening_file), load_dictionary(cfg.dict_file)};
    if (a.dictionary.patch_side != cfg.patch_size)
        throw ConfigError("dictionary patch side " + std::to_string(a.dictionary.patch_side) +
                          " does not match config patch_size " + std::to_string(cfg.patch_size));
    if (a.dictionary.base_size != cfg.dict_size)
        throw ConfigError("dictionary size " + std::to_string(a.dictionary.base_size) +
                          " does not match config dict_size " + std::to_string(cfg.dict_size));
    return a;
}

inline void cmd_encode(const ExperimentConfig& cfg, DatasetStore& data, std::ostream& log) {
    cfg.validate();
    const auto a = load_dictionary_artifacts(cfg);
    const ConvolutionalEncoder enc(a.dictionary, a.whitening);
    const auto params = cfg.encoding();
    for (auto [split, path] : {std::pair{Split::train, cfg.train_cache}, std::pair{Split::test, cfg.test_cache}}) {
        const auto& set = split == Split::train ? data.train() : data.test();
        ensure_parent(path);
        const auto r = encode_dataset(set, enc, params, path, cfg.worker_threads());
        if (r.status == CacheStatus::already_complete) {
            log << "encode: " << path << " already complete, nothing to do\n";
            continue;
        }
        log << "encode: " << to_string(split) << " -> " << path << " [" << r.header.channels << ", " << r.header.height
            << ", " << r.header.width << "] " << to_string(params.assignment) << ", " << set.size() << " images in "
            << std::fixed << std::setprecision(1) << r.seconds << " s ("
            << std::setprecision(1) << (r.seconds > 0 ? set.size() / r.seconds : 0.0) << " img/s)\n"
            << std::defaultfloat;
    }
}

struct TrainOutcome {
    std::vector<EpochMetrics> metrics;
    double test_accuracy = 0.0;
    double train_accuracy = 0.0;
    fs::path metrics_path;
};

using ModelScalar = float;

inline TrainOutcome cmd_train(const ExperimentConfig& cfg, DatasetStore& data, const fs::path& run_dir,
                              std::ostream& log) {
    cfg.validate();
    const auto spec = cfg.classifier_spec();
    const auto tcfg = cfg.train_config();

    std::unique_ptr<FeatureSource<ModelScalar>> train_src, test_src;
    std::optional<DictionaryArtifacts> artifacts;
    std::optional<ConvolutionalEncoder> encoder;
    if (cfg.augment || !fs::exists(cfg.test_cache)) {
        artifacts = load_dictionary_artifacts(cfg);
        encoder.emplace(artifacts->dictionary, artifacts->whitening);
    }
    if (cfg.augment) {
        train_src = std::make_unique<EncodingSource<ModelScalar>>(data.train(), *encoder, cfg.encoding(), true,
                                                                  cfg.augmentation_seed);
    } else {
        auto cached = std::make_unique<CachedFeatures<ModelScalar>>(cfg.train_cache);
        if (cfg.preload) train_src = cached->materialize();
        else train_src = std::move(cached);
    }
    if (fs::exists(cfg.test_cache))
        test_src = std::make_unique<CachedFeatures<ModelScalar>>(cfg.test_cache);
    else
        test_src = std::make_unique<EncodingSource<ModelScalar>>(data.test(), *encoder, cfg.encoding(), false, 0);

    TrainOutcome outcome;
    outcome.metrics_path = run_dir / cfg.metrics_csv;
    std::ofstream csv(outcome.metrics_path);
    if (!csv) throw IoError("cannot write metrics: " + outcome.metrics_path.string());
    csv << kMetricsHeader << '\n';
    log << "train: " << train_src->size() << " samples [" << train_src->channels() << ", " << train_src->side() << ", "
        << train_src->side() << "], " << tcfg.epochs << " epochs, lr " << tcfg.learning_rate
        << (cfg.augment ? ", augmented" : ", from cache") << (cfg.hidden ? ", hidden ReLU" : "") << '\n';

    auto result = train<ModelScalar>(spec, *train_src, test_src.get(), tcfg, [&](const EpochMetrics& m) {
        csv << metrics_row(m) << '\n' << std::flush;
        log << "epoch " << m.epoch << " lr " << m.lr << " loss " << m.train_loss << " train " << m.train_acc
            << " test " << m.test_acc << " (" << m.wall_seconds << " s)\n";
    });
    outcome.metrics = result.metrics;
    outcome.test_accuracy = evaluate(result.model, *test_src, tcfg.batch_size);
    outcome.train_accuracy = result.metrics.empty() ? 0.0 : result.metrics.back().train_acc;

    ensure_parent(cfg.model_file);
    if (fs::exists(cfg.model_file)) log << "train: replacing existing checkpoint " << cfg.model_file << '\n';
    save_checkpoint(cfg.model_file, result.model);
    log << "test accuracy: " << outcome.test_accuracy << '\n';
    return outcome;
}

inline double cmd_evaluate(const ExperimentConfig& cfg, std::ostream& log) {
    const auto model = load_checkpoint<ModelScalar>(cfg.model_file);
    CachedFeatures<ModelScalar> test(cfg.test_cache);
    const double acc = evaluate(model, test, cfg.batch_size);
    log << "test accuracy: " << acc << " (" << test.size() << " samples)\n";
    return acc;
}

inline std::string value_tag(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

inline std::vector<SweepEntry> cmd_analyze(const ExperimentConfig& cfg, DatasetStore& data, const fs::path& run_dir,
                                           std::ostream& log) {
    cfg.validate();
    std::vector<SweepEntry> all;
    for (double lambda : cfg.analysis_lambdas) {
        SweepOptions opt;
        opt.lambda = lambda;
        opt.moment_samples = cfg.moment_samples;
        opt.knn_sample = cfg.knn_sample;
        opt.neighbors = cfg.knn_neighbors;
        opt.max_anchors = cfg.max_anchors;
        opt.seed = cfg.dictionary_seed;
        opt.threads = cfg.worker_threads();
        auto entries = dimension_sweep(data.train(), cfg.analysis_patch_sizes, opt);
        const auto path = run_dir / ("dimensions_lambda" + value_tag(lambda) + ".csv");
        std::ofstream out(path);
        write_sweep_csv(out, entries);
        for (const auto& e : entries) {
            std::ofstream spec(run_dir / ("spectrum_P" + std::to_string(e.patch_side) + ".csv"));
            write_spectrum_csv(spec, e.spectrum);
            log << "analyze: lambda=" << lambda << " P=" << e.patch_side << " d_ext=" << e.raw.d_ext
                << " d_cov raw/white=" << e.raw.d_cov << '/' << e.white.d_cov << " d_int raw/white=" << e.raw.d_int
                << '/' << e.white.d_int << " (skipped anchors " << e.raw.skipped << '/' << e.white.skipped << ")\n";
        }
        all.insert(all.end(), entries.begin(), entries.end());
    }
    return all;
}

// ---------------------------------------------------------------------------

enum class AblationAxis { dict_size, neighbors, patch_size, lambda };

inline AblationAxis parse_axis(const std::string& s) {
    if (s == "dictSize") return AblationAxis::dict_size;
    if (s == "Q") return AblationAxis::neighbors;
    if (s == "P") return AblationAxis::patch_size;
    if (s == "lambda") return AblationAxis::lambda;
    throw ConfigError("unknown ablation axis '" + s + "' (expected dictSize|Q|P|lambda)");
}

inline const char* to_string(AblationAxis a) {
    switch (a) {
        case AblationAxis::dict_size: return "dictSize";
        case AblationAxis::neighbors: return "Q";
        case AblationAxis::patch_size: return "P";
        case AblationAxis::lambda: return "lambda";
    }
    return "?";
}

inline ExperimentConfig apply_axis(ExperimentConfig c, AblationAxis axis, double value) {
    switch (axis) {
        case AblationAxis::dict_size: c.dict_size = static_cast<int>(value); break;
        case AblationAxis::neighbors: c.neighbors = static_cast<int>(value); break;
        case AblationAxis::patch_size: c.patch_size = static_cast<int>(value); break;
        case AblationAxis::lambda: c.lambda = value; break;
    }
    return c;
}

struct AblationRow {
    double value = 0;
    int neighbors = 0;
    double train_accuracy = 0;
    double test_accuracy = 0;
};

inline constexpr const char* kAblationHeader = "axis,value,Q,trainAcc,testAcc";

// Full pipeline per value with every other setting held at `cfg`. Artifacts
// for each value live under the run directory.
inline std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg, DatasetStore& data, AblationAxis axis,
                                           const std::vector<double>& values, const fs::path& run_dir,
                                           std::ostream& log) {
    if (values.empty()) throw ConfigError("ablation needs at least one value");
    std::vector<ExperimentConfig> runs;
    for (double v : values) {
        auto c = apply_axis(cfg, axis, v);
        const auto dir = run_dir / (std::string(to_string(axis)) + "_" + value_tag(v));
        c.dict_file = (dir / "dictionary.bin").string();
        c.whitening_file = (dir / "whitening.bin").string();
        c.train_cache = (dir / "train.features").string();
        c.test_cache = (dir / "test.features").string();
        c.model_file = (dir / "model.ckpt").string();
        c.validate();
        runs.push_back(std::move(c));
    }

    const auto csv_path = run_dir / "ablation.csv";
    std::ofstream csv(csv_path);
    csv << kAblationHeader << '\n';
    std::vector<AblationRow> rows;
    for (std::size_t k = 0; k < runs.size(); ++k) {
        const auto& c = runs[k];
        const fs::path dir = fs::path(c.model_file).parent_path();
        fs::create_directories(dir);
        echo_config(dir, c);
        log << "ablate: " << to_string(axis) << " = " << values[k] << '\n';
        cmd_build_dict(c, data, true, log);
        cmd_encode(c, data, log);
        const auto t = cmd_train(c, data, dir, log);
        rows.push_back({values[k], c.resolved_neighbors(), t.train_accuracy, t.test_accuracy});
        csv << to_string(axis) << ',' << values[k] << ',' << c.resolved_neighbors() << ',' << t.train_accuracy << ','
            << t.test_accuracy << '\n'
            << std::flush;
    }
    return rows;
}

}  // namespace patchkernel

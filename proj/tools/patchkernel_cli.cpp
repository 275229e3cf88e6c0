#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <streambuf>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "patchkernel/patchkernel.hpp"

namespace fs = std::filesystem;
using namespace patchkernel;

namespace {

// Writes to the console and the run directory's log at once.
class TeeBuf : public std::streambuf {
public:
    TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

protected:
    int overflow(int c) override {
        if (c == traits_type::eof()) return traits_type::not_eof(c);
        const auto ch = traits_type::to_char_type(c);
        return (a_->sputc(ch) == traits_type::eof() || b_->sputc(ch) == traits_type::eof()) ? traits_type::eof() : c;
    }
    int sync() override { return (a_->pubsync() | b_->pubsync()) == 0 ? 0 : -1; }

private:
    std::streambuf* a_;
    std::streambuf* b_;
};

struct Overrides {
    std::optional<std::string> config_file, data, runs_dir, orientation, assignment, decay_epochs;
    std::optional<int> patch_size, dict_size, neighbors, pool_kernel, pool_stride, epochs, batch_size;
    std::optional<double> q_fraction, lambda, lr;
    std::optional<std::uint64_t> dict_seed, train_seed, aug_seed;
    std::optional<unsigned> threads;
    bool deterministic = false;

    ExperimentConfig resolve() const {
        ExperimentConfig c = config_file ? load_config(*config_file) : ExperimentConfig{};
        if (data) c.dataset_root = *data;
        if (runs_dir) c.runs_dir = *runs_dir;
        if (orientation) c.orientation = parse_orientation(*orientation);
        if (assignment) c.assignment = parse_assignment(*assignment);
        if (patch_size) c.patch_size = *patch_size;
        if (dict_size) c.dict_size = *dict_size;
        if (neighbors) c.neighbors = *neighbors;
        if (q_fraction) {
            c.q_fraction = *q_fraction;
            if (!neighbors) c.neighbors = 0;
        }
        if (pool_kernel) c.pool_kernel = *pool_kernel;
        if (pool_stride) c.pool_stride = *pool_stride;
        if (epochs) c.epochs = *epochs;
        if (decay_epochs) c.decay_epochs = detail::parse_list<int>("--decay-epochs", *decay_epochs);
        if (batch_size) c.batch_size = *batch_size;
        if (lambda) c.lambda = *lambda;
        if (lr) c.learning_rate = *lr;
        if (dict_seed) c.dictionary_seed = *dict_seed;
        if (train_seed) c.training_seed = *train_seed;
        if (aug_seed) c.augmentation_seed = *aug_seed;
        if (threads) c.threads = *threads;
        if (deterministic) c.deterministic = true;
        return c;
    }
};

std::vector<double> parse_values(const std::string& text) { return detail::parse_list<double>("--values", text); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Whitened patch dictionary features with a shallow convolutional classifier"};
    app.require_subcommand(1);
    app.fallthrough();

    Overrides o;
    app.add_option("--config", o.config_file, "INI configuration file")->check(CLI::ExistingFile);
    app.add_option("--data", o.data, "CIFAR-10 binary directory");
    app.add_option("--runs-dir", o.runs_dir, "Parent directory for timestamped run directories");
    app.add_option("--patch-size", o.patch_size, "Patch side P");
    app.add_option("--dict-size", o.dict_size, "Dictionary size |D| (before negation)");
    app.add_option("--neighbors", o.neighbors, "Q, neighbors among the 2|D| atoms");
    app.add_option("--q-fraction", o.q_fraction, "Q as a fraction of |D| (when --neighbors is not given)");
    app.add_option("--lambda", o.lambda, "Whitening regularizer");
    app.add_option("--orientation", o.orientation, "zca|pca");
    app.add_option("--pool-kernel", o.pool_kernel, "Average pooling kernel k1");
    app.add_option("--pool-stride", o.pool_stride, "Average pooling stride s1");
    app.add_option("--assignment", o.assignment, "hard|soft");
    app.add_option("--epochs", o.epochs);
    app.add_option("--decay-epochs", o.decay_epochs, "Comma-separated epochs where lr decays (empty for none)");
    app.add_option("--batch-size", o.batch_size);
    app.add_option("--lr", o.lr, "Initial learning rate");
    app.add_option("--dict-seed", o.dict_seed);
    app.add_option("--train-seed", o.train_seed);
    app.add_option("--aug-seed", o.aug_seed);
    app.add_option("--threads", o.threads, "Worker thread cap");
    app.add_flag("--deterministic", o.deterministic, "Single-threaded reductions");

    auto* build = app.add_subcommand("build-dict", "Estimate whitening and sample the patch dictionary");
    bool gaussian = false, force = false;
    build->add_flag("--gaussian", gaussian, "Gaussian white-noise atoms instead of patches");
    build->add_flag("--force", force, "Overwrite existing dictionary/whitening files");

    app.add_subcommand("encode", "Encode train and test splits into feature caches");

    auto* trainc = app.add_subcommand("train", "Train the classifier");
    std::optional<bool> augment;
    bool hidden = false;
    trainc->add_flag("--augment,!--no-augment", augment, "Re-encode augmented images every epoch");
    trainc->add_flag("--hidden", hidden, "Insert a ReLU between the two convolutions");

    app.add_subcommand("evaluate", "Evaluate a checkpoint on the test cache");

    auto* analyze = app.add_subcommand("analyze", "Spectrum, covariance and intrinsic dimension of patches");
    std::string patch_sizes, lambdas;
    analyze->add_option("--patch-sizes", patch_sizes, "Comma-separated P values");
    analyze->add_option("--lambdas", lambdas, "Comma-separated whitening regularizers");

    auto* ablate = app.add_subcommand("ablate", "Run the pipeline across values of one hyper-parameter");
    std::string axis, values;
    ablate->add_option("--axis", axis, "dictSize|Q|P|lambda")->required();
    ablate->add_option("--values", values, "Comma-separated values")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = o.resolve();
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "build-dict" && gaussian) cfg.gaussian = true;
        if (name == "train") {
            if (augment) cfg.augment = *augment;
            if (hidden) cfg.hidden = true;
        }
        if (name == "analyze") {
            if (!patch_sizes.empty()) cfg.analysis_patch_sizes = detail::parse_list<int>("--patch-sizes", patch_sizes);
            if (!lambdas.empty()) cfg.analysis_lambdas = detail::parse_list<double>("--lambdas", lambdas);
        }
        cfg.validate();

        const fs::path run_dir = create_run_directory(cfg.runs_dir, name);
        echo_config(run_dir, cfg, o.config_file ? std::optional<fs::path>(*o.config_file) : std::nullopt);
        std::ofstream log_file(run_dir / "log.txt");
        TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
        std::ostream log(&tee);
        log << "run directory: " << run_dir.string() << '\n';

        DatasetStore data(cfg.dataset_root);
        if (name == "build-dict") {
            cmd_build_dict(cfg, data, force, log);
        } else if (name == "encode") {
            cmd_encode(cfg, data, log);
        } else if (name == "train") {
            cmd_train(cfg, data, run_dir, log);
        } else if (name == "evaluate") {
            cmd_evaluate(cfg, log);
        } else if (name == "analyze") {
            cmd_analyze(cfg, data, run_dir, log);
        } else if (name == "ablate") {
            const auto v = parse_values(values);
            cmd_ablate(cfg, data, parse_axis(axis), v, run_dir, log);
        }
        log.flush();
    } catch (const Error& e) {
        std::cerr << "error[" << e.kind() << "]: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error[IoError]: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error[Error]: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

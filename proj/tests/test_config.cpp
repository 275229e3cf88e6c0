#include <gtest/gtest.h>

#include <sstream>

#include "patchkernel/config.hpp"

using namespace patchkernel;

TEST(Config, ReferenceDefaults) {
    const ExperimentConfig c;
    EXPECT_EQ(c.patch_size, 6);
    EXPECT_EQ(c.dict_size, 2048);
    EXPECT_EQ(c.lambda, 1e-3);
    EXPECT_EQ(c.orientation, Orientation::zca);
    EXPECT_EQ(c.pool_kernel, 5);
    EXPECT_EQ(c.pool_stride, 3);
    EXPECT_EQ(c.kernel1, 1);
    EXPECT_EQ(c.channels1, 128);
    EXPECT_EQ(c.kernel2, 6);
    EXPECT_EQ(c.epochs, 175);
    EXPECT_EQ(c.learning_rate, 0.003);
    EXPECT_EQ(c.decay_epochs, (std::vector<int>{100, 150}));
    EXPECT_EQ(c.momentum, 0.9);
    EXPECT_EQ(c.batch_size, 512);
    EXPECT_EQ(c.moment_samples, 500000u);
    EXPECT_EQ(c.resolved_neighbors(), 819);  // round(0.4 * 2048)
    EXPECT_EQ(c.classifier_spec().in_channels, 4096);
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, NeighborResolution) {
    ExperimentConfig c;
    c.neighbors = 820;
    EXPECT_EQ(c.resolved_neighbors(), 820);
    c.neighbors = 0;
    c.dict_size = 512;
    EXPECT_EQ(c.resolved_neighbors(), 205);
    c.q_fraction = 1.0;
    EXPECT_EQ(c.resolved_neighbors(), 512);
    EXPECT_EQ(c.encoding().neighbors, 512);
}

TEST(Config, RoundTripPreservesEveryField) {
    ExperimentConfig c;
    c.dataset_root = "/data/cifar dir";
    c.lambda = 0.1 + 0.2;  // not exactly representable in short decimal
    c.orientation = Orientation::pca;
    c.assignment = Assignment::soft;
    c.neighbors = 77;
    c.decay_epochs = {3, 9, 12};
    c.analysis_lambdas = {1e-5, 1.0 / 3.0};
    c.dictionary_seed = 18446744073709551615ull;
    c.hidden = true;
    c.threads = 4;
    std::stringstream s;
    save_config(s, c);
    EXPECT_EQ(load_config(s), c);
}

TEST(Config, PartialFileKeepsDefaults) {
    std::istringstream in("[dictionary]\nsize = 512\n[train]\nepochs = 60\ndecay_epochs = 40, 50\n");
    const auto c = load_config(in);
    EXPECT_EQ(c.dict_size, 512);
    EXPECT_EQ(c.epochs, 60);
    EXPECT_EQ(c.decay_epochs, (std::vector<int>{40, 50}));
    EXPECT_EQ(c.patch_size, 6);
}

TEST(Config, RejectsUnknownOrMalformedInput) {
    std::istringstream unknown("[dictionary]\nsizee = 512\n");
    EXPECT_THROW(load_config(unknown), ConfigError);
    std::istringstream section("[dict]\nsize = 512\n");
    EXPECT_THROW(load_config(section), ConfigError);
    std::istringstream bad_int("[dictionary]\nsize = 5x\n");
    EXPECT_THROW(load_config(bad_int), ConfigError);
    std::istringstream bad_enum("[dictionary]\norientation = svd\n");
    EXPECT_THROW(load_config(bad_enum), ConfigError);
    std::istringstream bad_bool("[train]\naugment = maybe\n");
    EXPECT_THROW(load_config(bad_bool), ConfigError);
    EXPECT_THROW(load_config(std::filesystem::path("/nonexistent/config.ini")), IoError);
}

TEST(Config, Validation) {
    auto expect_invalid = [](auto mutate) {
        ExperimentConfig c;
        mutate(c);
        EXPECT_THROW(c.validate(), ConfigError);
    };
    expect_invalid([](auto& c) { c.patch_size = 33; });
    expect_invalid([](auto& c) { c.neighbors = 4097; });
    expect_invalid([](auto& c) { c.lambda = -1; });
    expect_invalid([](auto& c) { c.pool_kernel = 28; });
    expect_invalid([](auto& c) { c.kernel2 = 9; });
    expect_invalid([](auto& c) { c.decay_epochs = {150, 100}; });
    expect_invalid([](auto& c) { c.decay_epochs = {200}; });
    expect_invalid([](auto& c) { c.batch_size = 1; });
    expect_invalid([](auto& c) { c.knn_neighbors = c.knn_sample; });
    expect_invalid([](auto& c) { c.q_fraction = 0; });
}

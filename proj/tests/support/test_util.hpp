#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "semcom/downstream.hpp"
#include "semcom/experiment.hpp"

namespace testutil {

class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("semcom_test_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

// Small untrained backbone (ResNet-8) so tests stay fast.
inline semcom::BackboneBundle tiny_bundle(uint64_t seed = 7) {
    torch::manual_seed(seed);
    auto bundle = semcom::build_bundle(8);
    semcom::freeze_backbone(bundle);
    return bundle;
}

// Experiment config on synthetic data with a tiny codec and backbone checkpoint under `dir`.
inline semcom::ExperimentConfig tiny_config(const TempDir& dir) {
    const auto backbone = dir.file("backbone.ckpt");
    if (!std::filesystem::exists(backbone)) {
        semcom::save_bundle(tiny_bundle(), backbone, "test fixture");
    }
    semcom::ExperimentConfig c;
    c.output_dir = dir.file("run");
    c.data.dataset = "synthetic";
    c.data.train_subset = 64;
    c.codec.base_width = 4;
    c.codec.target_ratio = 1.0 / 6.0;
    c.downstream.backbone_checkpoint = backbone;
    c.downstream.accuracy_floor = 0.0;
    c.downstream.verify_accuracy = false;
    c.recipe.stage1_epochs = 2;
    c.recipe.stage2_epochs = 1;
    c.recipe.batch_size = 16;
    c.evaluation.subset = 32;
    c.evaluation.noise_seeds = 2;
    c.evaluation.batch_size = 16;
    return c;
}

}  // namespace testutil

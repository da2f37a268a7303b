#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semcom/codec.hpp"
#include "semcom/evaluation.hpp"
#include "semcom/semantic_loss.hpp"
#include "semcom/training.hpp"

namespace semcom {

inline constexpr int kConfigVersion = 1;

struct DataConfig {
    std::string root;  // empty: $DATA_ROOT, then ./data
    std::string dataset = "cifar10";
    std::string train_split = "train";
    int64_t train_subset = 0;  // first N training images; 0 = all
};

struct ChannelConfig {
    double snr_db = 20.0;
    double power = 1.0;
    uint64_t noise_seed = 0;
};

struct DownstreamConfig {
    std::string backbone_checkpoint;
    double accuracy_floor = 0.92;
    bool verify_accuracy = true;  // measure clean accuracy on the evaluation split at load
};

struct EvalConfig {
    std::string dataset;  // empty: same as data.dataset
    std::string split = "test";
    int64_t subset = 0;
    int64_t noise_seeds = 10;
    int64_t batch_size = 128;
};

/// Everything needed to reproduce one run. Parsed from a nested JSON document; unknown keys
/// are rejected and every default is materialized when the config is written back out.
struct ExperimentConfig {
    int config_version = kConfigVersion;
    DataConfig data;
    CodecConfig codec;
    LossConfig loss;
    ChannelConfig channel;
    DownstreamConfig downstream;
    TrainRecipe recipe;
    EvalConfig evaluation;
    std::string output_dir = "runs/default";

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    void validate() const;

    NoiseModel noise() const;
    std::string eval_dataset() const;
};

ExperimentConfig load_experiment_config(const std::string& path);

/// Applies a "dotted.key=value" override to a JSON document. The value is parsed as JSON when
/// possible (numbers, booleans, quoted strings) and taken as a raw string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Writes config.resolved.json into the output directory.
std::string write_resolved_config(const ExperimentConfig& config);

struct RecipeArtifacts {
    std::string stage1_checkpoint;
    std::string stage2_checkpoint;  // empty for deepjscc
    std::string final_checkpoint;
    std::vector<EpochRecord> history;
};

enum class StageSelection { One, Two, All };
StageSelection parse_stage_selection(const std::string& text);

/// Runs the recipe's stages, resuming from <output_dir>/stage{1,2}.ckpt when they exist:
///   proposed     stage 1 (L1 with contrastive term) then stage 2 (L2, codec + classifier)
///   deepjscc     stage 1 with alpha1 = 1; no stage 2
///   deepjscc_ft  deepjscc stage 1 then the proposed stage 2
///   deepsc_style stage 1 with fixed alpha1, then only the classifier retrained
/// Throws MissingPrerequisiteError when stage 2 is requested without a finished stage 1 or the
/// backbone checkpoint is absent.
RecipeArtifacts run_recipe(const ExperimentConfig& config,
                           StageSelection stages = StageSelection::All);

/// Backbone bundle named by the config. Measures clean accuracy on the evaluation split when
/// requested and available.
BackboneBundle load_configured_backbone(const ExperimentConfig& config);

/// Rebuilds models from a codec checkpoint. Throws IncompatibleError when the checkpoint's
/// codec configuration or backbone hash differs from `config`.
SystemModels load_system(const ExperimentConfig& config, const std::string& checkpoint_path,
                         Checkpoint* loaded = nullptr);

/// Codec-only view of a checkpoint (no backbone needed); used for image reconstruction.
SemanticCodec load_codec(const Checkpoint& checkpoint);

/// Evaluates a checkpoint on the configured evaluation split.
SweepResult evaluate_checkpoint(const ExperimentConfig& config, const std::string& checkpoint_path,
                                int64_t noise_seeds);

struct SweepConfig {
    ExperimentConfig base;
    SweepGrid grid;
    std::string output_dir = "runs/sweep";
    bool train_missing = true;

    static SweepConfig from_json(const nlohmann::json& j);
};

SweepConfig load_sweep_config(const std::string& path);

/// Experiment config for one grid cell; the cell trains under <output_dir>/cells/<tag>.
ExperimentConfig cell_config(const SweepConfig& sweep, const SweepCell& cell);

SweepOutcome run_configured_sweep(const SweepConfig& sweep);

struct ReconstructionReport {
    double psnr_db = 0.0;
    std::optional<double> ms_ssim;
    double snr_db = 0.0;
    std::string image_path;
    std::string metrics_path;
    std::string panel_path;
};

/// Sends one image through a trained codec and AWGN channel, writing the reconstruction, a
/// JSON metrics sidecar and optionally an original|reconstruction panel.
ReconstructionReport reconstruct_image(const std::string& checkpoint_path,
                                       const std::string& image_path, std::optional<double> snr_db,
                                       const std::string& out_path, bool panel, uint64_t seed);

}  // namespace semcom

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "semcom/channel.hpp"
#include "semcom/codec.hpp"
#include "semcom/data_io.hpp"
#include "semcom/downstream.hpp"
#include "semcom/semantic_loss.hpp"

namespace semcom {

enum class Method { Proposed, DeepJscc, DeepJsccFt, DeepScStyle };

std::string to_string(Method method);
Method parse_method(const std::string& text);

struct TrainRecipe {
    Method method = Method::Proposed;
    int64_t stage1_epochs = 200;
    int64_t stage2_epochs = 100;
    int64_t batch_size = 128;
    double stage1_lr = 0.01;
    double stage2_lr = 0.0001;
    int64_t lr_decay_every = 50;
    double lr_decay_factor = 0.5;
    uint64_t seed = 0;             // parameter initialization and data order
    int64_t checkpoint_every = 0;  // epochs between resumable checkpoints; 0 = stage end only
    double divergence_threshold = 1e3;
    double deepsc_alpha1 = 0.5;  // fixed reconstruction weight of the deepsc_style stage 1

    void validate() const;
};

/// lr0 * factor^floor(epoch / every).
double scheduled_lr(double lr0, int64_t epoch, int64_t every, double factor);

struct EpochRecord {
    int stage = 1;
    int64_t epoch = 0;
    double lr = 0.0;
    double l_rec = 0.0;
    std::optional<double> l_aux;  // L_sem in stage 1, L_task in stage 2; absent when unused
    double composite = 0.0;
    int64_t steps = 0;

    nlohmann::json to_json() const;
    static EpochRecord from_json(const nlohmann::json& j);
};

/// Every learnable piece of the system. Torch module handles share state, so copies of
/// this struct alias the same parameters.
struct SystemModels {
    SemanticCodec codec;
    ProjectionHead projection{nullptr};
    BackboneBundle bundle;
};

struct TrainableSet {
    bool codec = false;
    bool projection = false;
    bool classifier = false;
};

/// Fully resolved description of one training stage.
struct StagePlan {
    int stage = 1;
    int64_t epochs = 1;
    double lr0 = 0.01;
    int64_t lr_decay_every = 50;
    double lr_decay_factor = 0.5;
    int64_t batch_size = 128;
    uint64_t data_seed = 0;
    double alpha = 1.0;  // weight on L_rec; the rest goes to L_sem (stage 1) or L_task (stage 2)
    double tau = 0.1;
    bool include_positive_in_denominator = false;
    NoiseModel noise;
    double power = 1.0;
    TrainableSet trainable;
    double divergence_threshold = 1e3;

    std::string log_path;         // per-epoch JSON lines, appended; empty disables
    std::string checkpoint_path;  // written at stage end and every checkpoint_every epochs
    int64_t checkpoint_every = 0;
    nlohmann::json checkpoint_metadata = nlohmann::json::object();  // merged into each save

    /// Stop after this many epochs in this call (the checkpoint stays resumable); -1 runs to
    /// the end. Used to exercise interruption and resumption.
    int64_t stop_after = -1;
};

struct StageResult {
    std::vector<EpochRecord> history;
    std::string checkpoint_hash;
    bool completed = false;
};

/// Runs one stage: encode -> power_normalize -> AWGN -> decode, then the stage's composite
/// loss, updating only plan.trainable. Noise is re-drawn every step from a stream derived
/// from (noise.seed, stage, epoch, step); data order from (data_seed, epoch). With `resume`
/// the models, optimizer state and history are restored and training continues from the
/// recorded epoch. Throws DivergenceError (after writing "<checkpoint_path>.diverged") when
/// the loss is non-finite or exceeds the divergence threshold.
StageResult run_stage(SystemModels& models, const Dataset& data, const StagePlan& plan,
                      const Checkpoint* resume = nullptr);

/// Stage-1 plan from a recipe: L1 = a1 L_rec + (1 - a1) L_sem, training codec and projection.
StagePlan stage1_plan(const TrainRecipe& recipe, const LossConfig& loss, const CodecConfig& codec,
                      const NoiseModel& noise, double power);

/// Stage-2 plan: L2 = a2 L_rec + (1 - a2) L_task, training codec and classifier (or only the
/// classifier for deepsc_style).
StagePlan stage2_plan(const TrainRecipe& recipe, const LossConfig& loss, const NoiseModel& noise,
                      double power);

StageResult train_stage1(SystemModels& models, const Dataset& data, const StagePlan& plan);
StageResult train_stage2(SystemModels& models, const Dataset& data, const StagePlan& plan);

/// Writes every model part present in `models` into `checkpoint` (backbone excluded; its hash
/// is recorded instead).
void store_models(Checkpoint& checkpoint, const SystemModels& models);

/// Restores codec, projection and classifier parameters from a checkpoint.
void restore_models(const Checkpoint& checkpoint, SystemModels& models);

/// Noise stream seed for one training step.
uint64_t step_noise_seed(uint64_t base, int stage, int64_t epoch, int64_t step);

/// Seeds torch's global generator (parameter initialization) deterministically.
void seed_everything(uint64_t seed);

}  // namespace semcom

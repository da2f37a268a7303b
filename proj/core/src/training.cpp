#include "semcom/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "semcom/errors.hpp"

namespace semcom {

std::string to_string(Method method) {
    switch (method) {
        case Method::Proposed: return "proposed";
        case Method::DeepJscc: return "deepjscc";
        case Method::DeepJsccFt: return "deepjscc_ft";
        case Method::DeepScStyle: return "deepsc_style";
    }
    return "unknown";
}

Method parse_method(const std::string& text) {
    for (auto m : {Method::Proposed, Method::DeepJscc, Method::DeepJsccFt, Method::DeepScStyle}) {
        if (text == to_string(m)) {
            return m;
        }
    }
    throw ConfigError("unknown method '" + text +
                      "' (expected proposed, deepjscc, deepjscc_ft or deepsc_style)");
}

void TrainRecipe::validate() const {
    if (stage1_epochs < 1 || stage2_epochs < 1) {
        throw ConfigError("recipe epochs must be positive");
    }
    if (batch_size < 2) {
        throw ConfigError("recipe.batch_size must be at least 2 (contrastive negatives)");
    }
    if (!(stage1_lr > 0.0) || !(stage2_lr > 0.0)) {
        throw ConfigError("recipe learning rates must be positive");
    }
    if (lr_decay_every < 1) {
        throw ConfigError("recipe.lr_decay_every must be positive");
    }
    if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0)) {
        throw ConfigError("recipe.lr_decay_factor must lie in (0, 1)");
    }
    if (checkpoint_every < 0) {
        throw ConfigError("recipe.checkpoint_every must be >= 0");
    }
    if (!(deepsc_alpha1 >= 0.0 && deepsc_alpha1 <= 1.0)) {
        throw ConfigError("recipe.deepsc_alpha1 must lie in [0, 1]");
    }
}

double scheduled_lr(double lr0, int64_t epoch, int64_t every, double factor) {
    return lr0 * std::pow(factor, static_cast<double>(epoch / every));
}

nlohmann::json EpochRecord::to_json() const {
    nlohmann::json j{{"stage", stage}, {"epoch", epoch}, {"lr", lr},
                     {"l_rec", l_rec}, {"composite", composite}, {"steps", steps}};
    const char* aux_key = stage == 1 ? "l_sem" : "l_task";
    j[aux_key] = l_aux ? nlohmann::json(*l_aux) : nlohmann::json(nullptr);
    return j;
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.stage = j.at("stage").get<int>();
    r.epoch = j.at("epoch").get<int64_t>();
    r.lr = j.at("lr").get<double>();
    r.l_rec = j.at("l_rec").get<double>();
    r.composite = j.at("composite").get<double>();
    r.steps = j.at("steps").get<int64_t>();
    const char* aux_key = r.stage == 1 ? "l_sem" : "l_task";
    if (j.contains(aux_key) && !j[aux_key].is_null()) {
        r.l_aux = j[aux_key].get<double>();
    }
    return r;
}

uint64_t step_noise_seed(uint64_t base, int stage, int64_t epoch, int64_t step) {
    // splitmix64 over the packed coordinates
    auto mix = [](uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    };
    uint64_t h = mix(base);
    h = mix(h ^ static_cast<uint64_t>(stage));
    h = mix(h ^ static_cast<uint64_t>(epoch));
    return mix(h ^ static_cast<uint64_t>(step));
}

void seed_everything(uint64_t seed) {
    torch::manual_seed(seed);
}

StagePlan stage1_plan(const TrainRecipe& recipe, const LossConfig& loss, const CodecConfig& codec,
                      const NoiseModel& noise, double power) {
    recipe.validate();
    loss.validate();
    StagePlan plan;
    plan.stage = 1;
    plan.epochs = recipe.stage1_epochs;
    plan.lr0 = recipe.stage1_lr;
    plan.lr_decay_every = recipe.lr_decay_every;
    plan.lr_decay_factor = recipe.lr_decay_factor;
    plan.batch_size = recipe.batch_size;
    plan.data_seed = recipe.seed;
    plan.tau = loss.tau;
    plan.include_positive_in_denominator = loss.include_positive_in_denominator;
    plan.noise = noise;
    plan.power = power;
    plan.divergence_threshold = recipe.divergence_threshold;
    plan.checkpoint_every = recipe.checkpoint_every;
    switch (recipe.method) {
        case Method::Proposed:
            plan.alpha = resolve_alpha1(loss, codec.achieved_ratio().value());
            plan.trainable = {true, true, false};
            break;
        case Method::DeepJscc:
        case Method::DeepJsccFt:
            plan.alpha = 1.0;
            plan.trainable = {true, false, false};
            break;
        case Method::DeepScStyle:
            plan.alpha = recipe.deepsc_alpha1;
            plan.trainable = {true, true, false};
            break;
    }
    return plan;
}

StagePlan stage2_plan(const TrainRecipe& recipe, const LossConfig& loss, const NoiseModel& noise,
                      double power) {
    recipe.validate();
    loss.validate();
    StagePlan plan;
    plan.stage = 2;
    plan.epochs = recipe.stage2_epochs;
    plan.lr0 = recipe.stage2_lr;
    plan.lr_decay_every = recipe.lr_decay_every;
    plan.lr_decay_factor = recipe.lr_decay_factor;
    plan.batch_size = recipe.batch_size;
    plan.data_seed = recipe.seed;
    plan.tau = loss.tau;
    plan.noise = noise;
    plan.power = power;
    plan.divergence_threshold = recipe.divergence_threshold;
    plan.checkpoint_every = recipe.checkpoint_every;
    switch (recipe.method) {
        case Method::Proposed:
        case Method::DeepJsccFt:
            plan.alpha = loss.alpha2;
            plan.trainable = {true, false, true};
            break;
        case Method::DeepScStyle:
            // Codec frozen: L_rec is constant, so only the task loss drives the classifier.
            plan.alpha = 0.0;
            plan.trainable = {false, false, true};
            break;
        case Method::DeepJscc:
            throw ConfigError("the deepjscc recipe has no second stage");
    }
    return plan;
}

void store_models(Checkpoint& checkpoint, const SystemModels& models) {
    checkpoint.put_module("encoder", *models.codec.encoder);
    checkpoint.put_module("decoder", *models.codec.decoder);
    if (!models.projection.is_empty()) {
        checkpoint.put_module("projection", *models.projection);
    }
    if (!models.bundle.classifier.is_empty()) {
        checkpoint.put_module("classifier", *models.bundle.classifier);
    }
    if (!models.bundle.backbone.is_empty()) {
        checkpoint.metadata["backbone_hash"] = module_hash(*models.bundle.backbone);
    }
}

void restore_models(const Checkpoint& checkpoint, SystemModels& models) {
    checkpoint.get_module("encoder", *models.codec.encoder);
    checkpoint.get_module("decoder", *models.codec.decoder);
    if (!models.projection.is_empty() && checkpoint.has_module("projection")) {
        checkpoint.get_module("projection", *models.projection);
    }
    if (!models.bundle.classifier.is_empty() && checkpoint.has_module("classifier")) {
        checkpoint.get_module("classifier", *models.bundle.classifier);
    }
}

namespace {

std::vector<torch::Tensor> trainable_parameters(SystemModels& models, const TrainableSet& set) {
    std::vector<torch::Tensor> params;
    auto append = [&](const std::vector<torch::Tensor>& ps) {
        params.insert(params.end(), ps.begin(), ps.end());
    };
    if (set.codec) {
        append(models.codec.parameters());
    }
    if (set.projection) {
        if (models.projection.is_empty()) {
            throw ConfigError("stage trains the projection head but none was built");
        }
        append(models.projection->parameters());
    }
    if (set.classifier) {
        append(models.bundle.classifier->parameters());
    }
    if (params.empty()) {
        throw ConfigError("stage has no trainable parameters");
    }
    return params;
}

void set_grad_flags(SystemModels& models, const TrainableSet& set) {
    for (auto& p : models.codec.parameters()) {
        p.set_requires_grad(set.codec);
    }
    if (!models.projection.is_empty()) {
        for (auto& p : models.projection->parameters()) {
            p.set_requires_grad(set.projection);
        }
    }
    for (auto& p : models.bundle.classifier->parameters()) {
        p.set_requires_grad(set.classifier);
    }
    for (auto& p : models.bundle.backbone->parameters()) {
        p.set_requires_grad(false);
    }
}

std::string serialize_optimizer(torch::optim::Optimizer& opt) {
    torch::serialize::OutputArchive archive;
    opt.save(archive);
    std::ostringstream os;
    archive.save_to(os);
    return os.str();
}

void deserialize_optimizer(torch::optim::Optimizer& opt, const std::string& bytes) {
    torch::serialize::InputArchive archive;
    std::istringstream is(bytes);
    archive.load_from(is);
    opt.load(archive);
}

void set_learning_rate(torch::optim::Optimizer& opt, double lr) {
    for (auto& group : opt.param_groups()) {
        group.options().set_lr(lr);
    }
}

struct StepLosses {
    torch::Tensor composite;
    torch::Tensor l_rec;
    torch::Tensor l_aux;
};

StepLosses forward_step(SystemModels& models, const StagePlan& plan, AwgnChannel& channel,
                        const torch::Tensor& x, const torch::Tensor& labels) {
    auto& codec = models.codec;
    torch::Tensor x_hat;
    {
        std::optional<torch::NoGradGuard> frozen;
        if (!plan.trainable.codec) {
            frozen.emplace();
        }
        auto s = power_normalize(encode(codec.encoder, x), plan.power);
        auto s_hat = channel.transmit(s);
        x_hat = decode(codec.decoder, codec.config, s_hat, x.size(2), x.size(3));
    }

    StepLosses out;
    out.l_rec = reconstruction_loss(x, x_hat);
    if (plan.alpha == 1.0) {
        out.composite = out.l_rec;
        return out;
    }
    if (plan.stage == 1) {
        torch::Tensor clean_features;
        {
            torch::NoGradGuard no_grad;
            clean_features = extract_features(models.bundle, x);
        }
        auto anchors = project(models.projection, clean_features);
        auto positives = project(models.projection, extract_features(models.bundle, x_hat));
        out.l_aux = semantic_contrastive_loss(anchors, positives, plan.tau,
                                              plan.include_positive_in_denominator);
    } else {
        auto logits = classify_logits(models.bundle, extract_features(models.bundle, x_hat));
        out.l_aux = task_loss_from_logits(labels, logits);
    }
    out.composite = blend_losses(plan.alpha, out.l_rec, out.l_aux);
    return out;
}

void append_log(const std::string& path, const EpochRecord& record) {
    if (path.empty()) {
        return;
    }
    const std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::filesystem::create_directories(p.parent_path());
    }
    std::ofstream out(path, std::ios::app);
    out << record.to_json().dump() << '\n';
}

}  // namespace

StageResult run_stage(SystemModels& models, const Dataset& data, const StagePlan& plan,
                      const Checkpoint* resume) {
    if (plan.stage != 1 && plan.stage != 2) {
        throw ConfigError("stage must be 1 or 2");
    }
    if (plan.epochs < 1 || plan.batch_size < 2) {
        throw ConfigError("stage plan needs epochs >= 1 and batch_size >= 2");
    }
    if (plan.stage == 2 && plan.alpha < 1.0 && !data.has_labels()) {
        throw ConfigError("stage 2 needs a labelled dataset");
    }
    if (data.size() < 2) {
        throw ConfigError("training needs at least 2 images");
    }

    freeze_backbone(models.bundle);
    set_grad_flags(models, plan.trainable);
    auto params = trainable_parameters(models, plan.trainable);
    torch::optim::Adam optimizer(params, torch::optim::AdamOptions(plan.lr0));

    StageResult result;
    int64_t start_epoch = 0;
    if (resume != nullptr) {
        const auto& meta = resume->metadata;
        if (meta.value("stage", 0) != plan.stage) {
            throw IncompatibleError("resume checkpoint belongs to stage " +
                                    std::to_string(meta.value("stage", 0)));
        }
        restore_models(*resume, models);
        start_epoch = meta.value("next_epoch", int64_t{0});
        for (const auto& rec : meta.value("history", nlohmann::json::array())) {
            result.history.push_back(EpochRecord::from_json(rec));
        }
        if (start_epoch < plan.epochs) {
            deserialize_optimizer(optimizer, resume->get_bytes("optimizer"));
        }
    }

    auto save = [&](int64_t next_epoch, const std::string& path) {
        Checkpoint ck;
        ck.metadata = plan.checkpoint_metadata;
        ck.metadata["kind"] = "codec";
        ck.metadata["stage"] = plan.stage;
        ck.metadata["next_epoch"] = next_epoch;
        ck.metadata["stage_complete"] = next_epoch >= plan.epochs;
        ck.metadata["rng"] = {{"data_seed", plan.data_seed},
                              {"noise_seed", plan.noise.seed},
                              {"next_epoch", next_epoch}};
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& r : result.history) {
            hist.push_back(r.to_json());
        }
        ck.metadata["history"] = hist;
        store_models(ck, models);
        if (next_epoch < plan.epochs) {
            ck.put_bytes("optimizer", serialize_optimizer(optimizer));
        }
        return save_checkpoint(ck, path);
    };

    const bool codec_trains = plan.trainable.codec;
    models.codec.train(codec_trains);
    if (!models.projection.is_empty()) {
        models.projection->train(plan.trainable.projection);
    }

    AwgnChannel channel(plan.noise);
    int64_t epochs_run = 0;
    for (int64_t epoch = start_epoch; epoch < plan.epochs; ++epoch) {
        if (plan.stop_after >= 0 && epochs_run >= plan.stop_after) {
            break;
        }
        const double lr = scheduled_lr(plan.lr0, epoch, plan.lr_decay_every, plan.lr_decay_factor);
        set_learning_rate(optimizer, lr);

        const auto order = data.epoch_order(plan.data_seed, epoch);
        double sum_rec = 0.0, sum_aux = 0.0, sum_total = 0.0;
        int64_t steps = 0;
        bool has_aux = false;
        for (size_t start = 0; start + 2 <= order.size(); start += static_cast<size_t>(plan.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(plan.batch_size));
            if (end - start < 2) {
                break;
            }
            std::span<const int64_t> idx(order.data() + start, end - start);
            auto x = data.images(idx);
            torch::Tensor labels = data.has_labels() ? data.labels(idx) : torch::Tensor{};

            channel.reseed(step_noise_seed(plan.noise.seed, plan.stage, epoch, steps));
            auto losses = forward_step(models, plan, channel, x, labels);

            const double total = losses.composite.item<double>();
            if (!std::isfinite(total) || total > plan.divergence_threshold) {
                std::string dump;
                if (!plan.checkpoint_path.empty()) {
                    dump = plan.checkpoint_path + ".diverged";
                    save(epoch, dump);
                }
                throw DivergenceError("stage " + std::to_string(plan.stage) + " diverged at epoch " +
                                          std::to_string(epoch) + " step " +
                                          std::to_string(steps) + " (loss " +
                                          std::to_string(total) + ")",
                                      dump);
            }

            optimizer.zero_grad();
            losses.composite.backward();
            optimizer.step();

            sum_total += total;
            sum_rec += losses.l_rec.item<double>();
            if (losses.l_aux.defined()) {
                has_aux = true;
                sum_aux += losses.l_aux.item<double>();
            }
            ++steps;
        }

        EpochRecord record;
        record.stage = plan.stage;
        record.epoch = epoch;
        record.lr = lr;
        record.steps = steps;
        const double n = static_cast<double>(std::max<int64_t>(steps, 1));
        record.l_rec = sum_rec / n;
        record.composite = sum_total / n;
        if (has_aux) {
            record.l_aux = sum_aux / n;
        }
        result.history.push_back(record);
        append_log(plan.log_path, record);
        ++epochs_run;

        const bool last = epoch + 1 == plan.epochs;
        const bool periodic = plan.checkpoint_every > 0 && (epoch + 1) % plan.checkpoint_every == 0;
        const bool interrupted = plan.stop_after >= 0 && epochs_run >= plan.stop_after;
        if (!plan.checkpoint_path.empty() && (last || periodic || interrupted)) {
            result.checkpoint_hash = save(epoch + 1, plan.checkpoint_path);
        }
    }

    result.completed = !result.history.empty() && result.history.back().epoch + 1 == plan.epochs;
    if (start_epoch >= plan.epochs) {
        result.completed = true;
    }
    models.codec.train(false);
    if (!models.projection.is_empty()) {
        models.projection->train(false);
    }
    return result;
}

StageResult train_stage1(SystemModels& models, const Dataset& data, const StagePlan& plan) {
    if (plan.stage != 1) {
        throw ConfigError("train_stage1 needs a stage-1 plan");
    }
    return run_stage(models, data, plan);
}

StageResult train_stage2(SystemModels& models, const Dataset& data, const StagePlan& plan) {
    if (plan.stage != 2) {
        throw ConfigError("train_stage2 needs a stage-2 plan");
    }
    return run_stage(models, data, plan);
}

}  // namespace semcom

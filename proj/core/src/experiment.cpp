#include "semcom/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "semcom/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace semcom {

// --- config parsing -------------------------------------------------------------------------

namespace {

/// Reads fields from one JSON object, remembering which keys were consumed so that leftovers
/// can be reported as unknown.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(label() + "expected an object");
        }
    }

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        const auto& v = j_[key];
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_arithmetic_v<T>) {
                if (!v.is_number()) throw ConfigError("");
                if constexpr (std::is_integral_v<T>) {
                    if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("");
                }
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError("");
            }
            out = v.get<T>();
        } catch (const std::exception&) {
            throw ConfigError(label() + key + ": expected " + type_name<T>() + ", got " + v.dump());
        }
    }

    void read_ratio(const char* key, double& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        const auto& v = j_[key];
        try {
            if (v.is_string()) {
                out = parse_ratio(v.get<std::string>());
            } else if (v.is_number()) {
                std::ostringstream os;
                os << std::setprecision(17) << v.get<double>();
                out = parse_ratio(os.str());
            } else {
                throw ConfigError("expected a ratio such as \"1/48\" or 0.25");
            }
        } catch (const ConfigError& e) {
            throw ConfigError(label() + key + ": " + e.what());
        }
    }

    std::optional<json> section(const char* key) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return std::nullopt;
        }
        return std::optional<json>(std::in_place, j_[key]);
    }

    std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& item : j_.items()) {
            if (!seen_.count(item.key())) {
                throw ConfigError(label() + item.key() + ": unknown key");
            }
        }
    }

private:
    std::string label() const { return path_.empty() ? std::string{} : path_ + "."; }

    template <typename T>
    static std::string type_name() {
        if constexpr (std::is_same_v<T, bool>) return "a boolean";
        else if constexpr (std::is_integral_v<T>) return "an integer";
        else if constexpr (std::is_arithmetic_v<T>) return "a number";
        else return "a string";
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

json ratio_to_json(double ratio) {
    const auto text = format_ratio(ratio);
    if (parse_ratio(text) == ratio) {
        return text;
    }
    return ratio;
}

template <typename Fn>
void with_section(Fields& parent, const char* key, Fn&& fn) {
    if (auto sub = parent.section(key)) {
        Fields f(*sub, parent.child(key));
        fn(f);
        f.finish();
    }
}

json codec_json(const CodecConfig& c) {
    return {{"base_width", c.base_width},
            {"target_ratio", ratio_to_json(c.target_ratio)},
            {"image_channels", c.image_channels}};
}

CodecConfig codec_from_json(const json& j) {
    CodecConfig c;
    Fields f(j, "codec");
    f.read("base_width", c.base_width);
    f.read_ratio("target_ratio", c.target_ratio);
    f.read("image_channels", c.image_channels);
    f.finish();
    return c;
}

}  // namespace

json ExperimentConfig::to_json() const {
    json j;
    j["config_version"] = config_version;
    j["output_dir"] = output_dir;
    j["data"] = {{"root", data.root},
                 {"dataset", data.dataset},
                 {"train_split", data.train_split},
                 {"train_subset", data.train_subset}};
    j["codec"] = codec_json(codec);
    j["loss"] = {{"tau", loss.tau},
                 {"alpha1", loss.alpha1},
                 {"alpha1_policy", to_string(loss.alpha1_policy)},
                 {"alpha2", loss.alpha2},
                 {"include_positive_in_denominator", loss.include_positive_in_denominator},
                 {"projection_hidden_dim", loss.projection_hidden_dim},
                 {"projection_out_dim", loss.projection_out_dim}};
    j["channel"] = {{"snr_db", channel.snr_db},
                    {"power", channel.power},
                    {"noise_seed", channel.noise_seed}};
    j["downstream"] = {{"backbone_checkpoint", downstream.backbone_checkpoint},
                       {"accuracy_floor", downstream.accuracy_floor},
                       {"verify_accuracy", downstream.verify_accuracy}};
    j["recipe"] = {{"method", to_string(recipe.method)},
                   {"stage1_epochs", recipe.stage1_epochs},
                   {"stage2_epochs", recipe.stage2_epochs},
                   {"batch_size", recipe.batch_size},
                   {"stage1_lr", recipe.stage1_lr},
                   {"stage2_lr", recipe.stage2_lr},
                   {"lr_decay_every", recipe.lr_decay_every},
                   {"lr_decay_factor", recipe.lr_decay_factor},
                   {"seed", recipe.seed},
                   {"checkpoint_every", recipe.checkpoint_every},
                   {"divergence_threshold", recipe.divergence_threshold},
                   {"deepsc_alpha1", recipe.deepsc_alpha1}};
    j["evaluation"] = {{"dataset", evaluation.dataset},
                       {"split", evaluation.split},
                       {"subset", evaluation.subset},
                       {"noise_seeds", evaluation.noise_seeds},
                       {"batch_size", evaluation.batch_size}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    Fields top(j, "");
    top.read("config_version", c.config_version);
    if (c.config_version != kConfigVersion) {
        throw ConfigError("config_version: unsupported version " + std::to_string(c.config_version) +
                          " (expected " + std::to_string(kConfigVersion) + ")");
    }
    top.read("output_dir", c.output_dir);
    with_section(top, "data", [&](Fields& f) {
        f.read("root", c.data.root);
        f.read("dataset", c.data.dataset);
        f.read("train_split", c.data.train_split);
        f.read("train_subset", c.data.train_subset);
    });
    if (auto codec = top.section("codec")) {
        c.codec = codec_from_json(*codec);
    }
    with_section(top, "loss", [&](Fields& f) {
        f.read("tau", c.loss.tau);
        f.read("alpha1", c.loss.alpha1);
        std::string policy = to_string(c.loss.alpha1_policy);
        f.read("alpha1_policy", policy);
        try {
            c.loss.alpha1_policy = parse_alpha1_policy(policy);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("loss.alpha1_policy: ") + e.what());
        }
        f.read("alpha2", c.loss.alpha2);
        f.read("include_positive_in_denominator", c.loss.include_positive_in_denominator);
        f.read("projection_hidden_dim", c.loss.projection_hidden_dim);
        f.read("projection_out_dim", c.loss.projection_out_dim);
    });
    with_section(top, "channel", [&](Fields& f) {
        f.read("snr_db", c.channel.snr_db);
        f.read("power", c.channel.power);
        f.read("noise_seed", c.channel.noise_seed);
    });
    with_section(top, "downstream", [&](Fields& f) {
        f.read("backbone_checkpoint", c.downstream.backbone_checkpoint);
        f.read("accuracy_floor", c.downstream.accuracy_floor);
        f.read("verify_accuracy", c.downstream.verify_accuracy);
    });
    with_section(top, "recipe", [&](Fields& f) {
        std::string method = to_string(c.recipe.method);
        f.read("method", method);
        try {
            c.recipe.method = parse_method(method);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("recipe.method: ") + e.what());
        }
        f.read("stage1_epochs", c.recipe.stage1_epochs);
        f.read("stage2_epochs", c.recipe.stage2_epochs);
        f.read("batch_size", c.recipe.batch_size);
        f.read("stage1_lr", c.recipe.stage1_lr);
        f.read("stage2_lr", c.recipe.stage2_lr);
        f.read("lr_decay_every", c.recipe.lr_decay_every);
        f.read("lr_decay_factor", c.recipe.lr_decay_factor);
        f.read("seed", c.recipe.seed);
        f.read("checkpoint_every", c.recipe.checkpoint_every);
        f.read("divergence_threshold", c.recipe.divergence_threshold);
        f.read("deepsc_alpha1", c.recipe.deepsc_alpha1);
    });
    with_section(top, "evaluation", [&](Fields& f) {
        f.read("dataset", c.evaluation.dataset);
        f.read("split", c.evaluation.split);
        f.read("subset", c.evaluation.subset);
        f.read("noise_seeds", c.evaluation.noise_seeds);
        f.read("batch_size", c.evaluation.batch_size);
    });
    top.finish();
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    auto scoped = [](const char* section, auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            if (msg.rfind(section, 0) == 0) {
                throw;
            }
            throw ConfigError(std::string(section) + ": " + msg);
        }
    };
    scoped("codec", [&] { codec.validate(); });
    scoped("loss", [&] { loss.validate(); });
    scoped("recipe", [&] { recipe.validate(); });
    static const std::set<std::string> datasets = {"cifar10", "stl10", "kodak", "synthetic"};
    if (!datasets.count(data.dataset)) {
        throw ConfigError("data.dataset: unknown dataset '" + data.dataset + "'");
    }
    if (data.dataset == "kodak") {
        throw ConfigError("data.dataset: kodak has no labels or training split; use it for evaluation");
    }
    if (!evaluation.dataset.empty() && !datasets.count(evaluation.dataset)) {
        throw ConfigError("evaluation.dataset: unknown dataset '" + evaluation.dataset + "'");
    }
    if (data.train_subset < 0 || evaluation.subset < 0) {
        throw ConfigError("subset sizes must be >= 0");
    }
    if (!(channel.power > 0.0)) {
        throw ConfigError("channel.power: must be positive");
    }
    if (!std::isfinite(channel.snr_db)) {
        throw ConfigError("channel.snr_db: must be finite");
    }
    if (evaluation.noise_seeds < 1) {
        throw ConfigError("evaluation.noise_seeds: must be at least 1");
    }
    if (evaluation.batch_size < 1) {
        throw ConfigError("evaluation.batch_size: must be positive");
    }
    if (!(downstream.accuracy_floor >= 0.0 && downstream.accuracy_floor <= 1.0)) {
        throw ConfigError("downstream.accuracy_floor: must lie in [0, 1]");
    }
    if (output_dir.empty()) {
        throw ConfigError("output_dir: must not be empty");
    }
    if (codec.image_channels != 3) {
        throw ConfigError("codec.image_channels: the downstream backbone takes RGB input (3)");
    }
}

NoiseModel ExperimentConfig::noise() const {
    return NoiseModel::from_snr(channel.snr_db, channel.power, channel.noise_seed);
}

std::string ExperimentConfig::eval_dataset() const {
    return evaluation.dataset.empty() ? data.dataset : evaluation.dataset;
}

namespace {

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path);
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": invalid JSON: " + e.what());
    }
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
    return ExperimentConfig::from_json(read_json_file(path));
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' must look like section.key=value");
    }
    const auto key = assignment.substr(0, eq);
    const auto raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &doc;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) {
        path.push_back(part);
    }
    for (size_t i = 0; i + 1 < path.size(); ++i) {
        if (!node->contains(path[i])) {
            (*node)[path[i]] = json::object();
        }
        node = &(*node)[path[i]];
        if (!node->is_object()) {
            throw ConfigError("override '" + key + "': " + path[i] + " is not a section");
        }
    }
    (*node)[path.back()] = value;
}

std::string write_resolved_config(const ExperimentConfig& config) {
    fs::create_directories(config.output_dir);
    const auto path = (fs::path(config.output_dir) / "config.resolved.json").string();
    std::ofstream out(path, std::ios::trunc);
    out << config.to_json().dump(2) << '\n';
    return path;
}

StageSelection parse_stage_selection(const std::string& text) {
    if (text == "1") return StageSelection::One;
    if (text == "2") return StageSelection::Two;
    if (text == "all") return StageSelection::All;
    throw ConfigError("--stage must be 1, 2 or all, got '" + text + "'");
}

// --- orchestration --------------------------------------------------------------------------

BackboneBundle load_configured_backbone(const ExperimentConfig& config) {
    const auto& path = config.downstream.backbone_checkpoint;
    if (path.empty()) {
        throw MissingPrerequisiteError(
            "downstream.backbone_checkpoint is not set; pretrain one with `semcom pretrain-backbone`");
    }
    if (!fs::exists(path)) {
        throw MissingPrerequisiteError("backbone checkpoint not found: " + path);
    }
    std::optional<Dataset> test_set;
    if (config.downstream.verify_accuracy) {
        const auto root = resolve_data_root(config.data.root);
        const auto name = config.eval_dataset();
        if (name != "kodak" && dataset_available(name, root)) {
            test_set = load_dataset(name, config.evaluation.split, root);
        }
    }
    return load_backbone(path, config.downstream.accuracy_floor, test_set ? &*test_set : nullptr);
}

namespace {

bool has_projection(Method m) {
    return m == Method::Proposed || m == Method::DeepScStyle;
}

bool has_stage2(Method m) {
    return m != Method::DeepJscc;
}

void check_codec_matches(const json& meta, const CodecConfig& expected, const std::string& path) {
    if (!meta.contains("codec")) {
        throw IncompatibleError(path + ": checkpoint carries no codec configuration");
    }
    const auto stored = codec_from_json(meta["codec"]);
    if (stored.base_width != expected.base_width || stored.image_channels != expected.image_channels ||
        stored.latent_channels() != expected.latent_channels()) {
        throw IncompatibleError(path + ": checkpoint codec " + meta["codec"].dump() +
                                " does not match configured codec " + codec_json(expected).dump());
    }
}

SystemModels build_models(const ExperimentConfig& config, BackboneBundle bundle) {
    seed_everything(config.recipe.seed);
    SystemModels models;
    models.codec = build_codec(config.codec);
    if (has_projection(config.recipe.method)) {
        models.projection = build_projection(config.loss, bundle.feature_channels);
    }
    models.bundle = std::move(bundle);
    return models;
}

json base_metadata(const ExperimentConfig& config, const SystemModels& models) {
    json meta;
    meta["config"] = config.to_json();
    meta["method"] = to_string(config.recipe.method);
    meta["codec"] = codec_json(config.codec);
    meta["achieved_ratio"] = config.codec.achieved_ratio().str();
    meta["channel"] = {{"snr_db", config.channel.snr_db},
                       {"power", config.channel.power},
                       {"noise_seed", config.channel.noise_seed}};
    meta["backbone_checkpoint"] = config.downstream.backbone_checkpoint;
    meta["backbone_checkpoint_hash"] = models.bundle.checkpoint_hash;
    if (models.bundle.measured_accuracy) {
        meta["backbone_clean_accuracy"] = *models.bundle.measured_accuracy;
    }
    return meta;
}

std::vector<EpochRecord> history_of(const Checkpoint& ck) {
    std::vector<EpochRecord> out;
    for (const auto& r : ck.metadata.value("history", json::array())) {
        out.push_back(EpochRecord::from_json(r));
    }
    return out;
}

}  // namespace

RecipeArtifacts run_recipe(const ExperimentConfig& config, StageSelection stages) {
    config.validate();
    const Method method = config.recipe.method;
    if (stages == StageSelection::Two && !has_stage2(method)) {
        throw ConfigError("--stage 2: the deepjscc recipe has no second stage");
    }
    if (auto w = config.codec.warning()) {
        std::cerr << "warning: " << *w << '\n';
    }

    const fs::path out(config.output_dir);
    fs::create_directories(out);
    write_resolved_config(config);

    RecipeArtifacts artifacts;
    artifacts.stage1_checkpoint = (out / "stage1.ckpt").string();
    const auto log_path = (out / "train_log.jsonl").string();

    const bool want1 = stages != StageSelection::Two;
    const bool want2 = stages != StageSelection::One && has_stage2(method);

    std::optional<Checkpoint> stage1;
    if (fs::exists(artifacts.stage1_checkpoint)) {
        stage1 = load_checkpoint(artifacts.stage1_checkpoint);
        check_codec_matches(stage1->metadata, config.codec, artifacts.stage1_checkpoint);
    }
    if (!want1 && !(stage1 && stage1->metadata.value("stage_complete", false))) {
        throw MissingPrerequisiteError("stage 2 needs a finished stage-1 checkpoint at " +
                                       artifacts.stage1_checkpoint);
    }

    const auto root = resolve_data_root(config.data.root);
    auto train = load_dataset(config.data.dataset, config.data.train_split, root)
                     .head(config.data.train_subset);
    auto models = build_models(config, load_configured_backbone(config));
    const auto meta = base_metadata(config, models);

    if (want1) {
        auto plan = stage1_plan(config.recipe, config.loss, config.codec, config.noise(),
                                config.channel.power);
        plan.log_path = log_path;
        plan.checkpoint_path = artifacts.stage1_checkpoint;
        plan.checkpoint_metadata = meta;
        if (stage1 && stage1->metadata.value("stage_complete", false)) {
            restore_models(*stage1, models);
            artifacts.history = history_of(*stage1);
        } else {
            auto result = run_stage(models, train, plan, stage1 ? &*stage1 : nullptr);
            artifacts.history = result.history;
            stage1 = load_checkpoint(artifacts.stage1_checkpoint);
        }
    } else {
        restore_models(*stage1, models);
    }
    artifacts.final_checkpoint = artifacts.stage1_checkpoint;

    if (want2) {
        artifacts.stage2_checkpoint = (out / "stage2.ckpt").string();
        std::optional<Checkpoint> stage2;
        if (fs::exists(artifacts.stage2_checkpoint)) {
            stage2 = load_checkpoint(artifacts.stage2_checkpoint);
        }
        auto plan = stage2_plan(config.recipe, config.loss, config.noise(), config.channel.power);
        plan.log_path = log_path;
        plan.checkpoint_path = artifacts.stage2_checkpoint;
        plan.checkpoint_metadata = meta;
        plan.checkpoint_metadata["parent_hash"] = stage1->content_hash;
        plan.checkpoint_metadata["parent_path"] = "stage1.ckpt";
        if (stage2 && stage2->metadata.value("parent_hash", std::string{}) != stage1->content_hash) {
            throw IncompatibleError(artifacts.stage2_checkpoint +
                                    " was trained from a different stage-1 checkpoint");
        }
        std::vector<EpochRecord> hist2;
        if (stage2 && stage2->metadata.value("stage_complete", false)) {
            restore_models(*stage2, models);
            hist2 = history_of(*stage2);
        } else {
            hist2 = run_stage(models, train, plan, stage2 ? &*stage2 : nullptr).history;
        }
        artifacts.history.insert(artifacts.history.end(), hist2.begin(), hist2.end());
        artifacts.final_checkpoint = artifacts.stage2_checkpoint;
    }
    return artifacts;
}

SemanticCodec load_codec(const Checkpoint& checkpoint) {
    if (checkpoint.metadata.value("kind", std::string{}) != "codec") {
        throw IncompatibleError("not a codec checkpoint");
    }
    if (!checkpoint.metadata.contains("codec")) {
        throw IncompatibleError("checkpoint carries no codec configuration");
    }
    auto codec = build_codec(codec_from_json(checkpoint.metadata["codec"]));
    checkpoint.get_module("encoder", *codec.encoder);
    checkpoint.get_module("decoder", *codec.decoder);
    codec.train(false);
    return codec;
}

SystemModels load_system(const ExperimentConfig& config, const std::string& checkpoint_path,
                         Checkpoint* loaded) {
    Checkpoint ck;
    try {
        ck = load_checkpoint(checkpoint_path);
    } catch (const LoadError& e) {
        if (!fs::exists(checkpoint_path)) {
            throw MissingPrerequisiteError(e.what());
        }
        throw IncompatibleError(e.what());
    }
    if (ck.metadata.value("kind", std::string{}) != "codec") {
        throw IncompatibleError(checkpoint_path + " is not a codec checkpoint");
    }
    check_codec_matches(ck.metadata, config.codec, checkpoint_path);

    auto models = build_models(config, load_configured_backbone(config));
    const auto stored_hash = ck.metadata.value("backbone_hash", std::string{});
    if (!stored_hash.empty() && stored_hash != module_hash(*models.bundle.backbone)) {
        throw IncompatibleError(checkpoint_path + " was trained against a different backbone");
    }
    restore_models(ck, models);
    models.codec.train(false);
    if (loaded != nullptr) {
        *loaded = std::move(ck);
    }
    return models;
}

SweepResult evaluate_checkpoint(const ExperimentConfig& config, const std::string& checkpoint_path,
                                int64_t noise_seeds) {
    Checkpoint ck;
    auto models = load_system(config, checkpoint_path, &ck);
    const auto root = resolve_data_root(config.data.root);
    auto data = load_dataset(config.eval_dataset(), config.evaluation.split, root)
                    .head(config.evaluation.subset);
    EvaluationOptions options;
    options.noise_seeds = noise_seeds;
    options.batch_size = config.evaluation.batch_size;
    options.power = config.channel.power;
    auto result = evaluate_system(models, data, config.noise(), options);
    result.method = ck.metadata.value("method", to_string(config.recipe.method));
    std::string lineage;
    for (const auto& h : checkpoint_lineage(checkpoint_path)) {
        lineage += (lineage.empty() ? "" : "/") + h;
    }
    result.lineage = lineage;
    return result;
}

// --- sweep ----------------------------------------------------------------------------------

SweepConfig SweepConfig::from_json(const json& j) {
    SweepConfig s;
    Fields f(j, "");
    int version = kConfigVersion;
    f.read("config_version", version);
    if (version != kConfigVersion) {
        throw ConfigError("config_version: unsupported version " + std::to_string(version));
    }
    f.read("output_dir", s.output_dir);
    f.read("train_missing", s.train_missing);
    if (auto base = f.section("base")) {
        s.base = ExperimentConfig::from_json(*base);
    }
    if (auto methods = f.section("methods")) {
        for (const auto& m : *methods) {
            if (!m.is_string()) {
                throw ConfigError("methods: expected strings");
            }
            parse_method(m.get<std::string>());
            s.grid.methods.push_back(m.get<std::string>());
        }
    }
    if (auto snrs = f.section("snrs_db")) {
        for (const auto& v : *snrs) {
            if (!v.is_number()) {
                throw ConfigError("snrs_db: expected numbers");
            }
            s.grid.snrs_db.push_back(v.get<double>());
        }
    }
    if (auto ratios = f.section("ratios")) {
        for (const auto& v : *ratios) {
            try {
                s.grid.ratios.push_back(v.is_string() ? parse_ratio(v.get<std::string>())
                                                      : parse_ratio(v.dump()));
            } catch (const ConfigError& e) {
                throw ConfigError(std::string("ratios: ") + e.what());
            }
        }
    }
    f.finish();
    if (s.grid.cells().empty()) {
        throw ConfigError("sweep grid is empty: methods, snrs_db and ratios must all be non-empty");
    }
    return s;
}

SweepConfig load_sweep_config(const std::string& path) {
    return SweepConfig::from_json(read_json_file(path));
}

ExperimentConfig cell_config(const SweepConfig& sweep, const SweepCell& cell) {
    ExperimentConfig c = sweep.base;
    c.recipe.method = parse_method(cell.method);
    c.channel.snr_db = cell.snr_db;
    c.codec.target_ratio = cell.target_ratio;
    std::ostringstream tag;
    tag << cell.method << "_snr" << cell.snr_db << "_ratio" << format_ratio(cell.target_ratio);
    auto name = tag.str();
    std::replace(name.begin(), name.end(), '/', '-');
    c.output_dir = (fs::path(sweep.output_dir) / "cells" / name).string();
    c.validate();
    return c;
}

SweepOutcome run_configured_sweep(const SweepConfig& sweep) {
    fs::create_directories(sweep.output_dir);
    {
        std::ofstream out((fs::path(sweep.output_dir) / "sweep.resolved.json").string());
        json grid = {{"methods", sweep.grid.methods},
                     {"snrs_db", sweep.grid.snrs_db},
                     {"ratios", sweep.grid.ratios},
                     {"train_missing", sweep.train_missing},
                     {"base", sweep.base.to_json()}};
        out << grid.dump(2) << '\n';
    }
    auto runner = [&](const SweepCell& cell) {
        const auto config = cell_config(sweep, cell);
        const bool two = has_stage2(config.recipe.method);
        const auto final_path =
            (fs::path(config.output_dir) / (two ? "stage2.ckpt" : "stage1.ckpt")).string();
        bool done = false;
        if (fs::exists(final_path)) {
            done = load_checkpoint(final_path).metadata.value("stage_complete", false);
        }
        if (!done) {
            if (!sweep.train_missing) {
                throw MissingPrerequisiteError("no trained checkpoint at " + final_path);
            }
            run_recipe(config, StageSelection::All);
        }
        return evaluate_checkpoint(config, final_path, config.evaluation.noise_seeds);
    };
    return run_sweep(sweep.grid, sweep.output_dir, runner);
}

// --- reconstruction -------------------------------------------------------------------------

ReconstructionReport reconstruct_image(const std::string& checkpoint_path,
                                       const std::string& image_path, std::optional<double> snr_db,
                                       const std::string& out_path, bool panel, uint64_t seed) {
    if (!fs::exists(image_path)) {
        throw ConfigError("input image not found: " + image_path);
    }
    auto raw = read_png(image_path);
    check_spatial_dims(raw.size(1), raw.size(2));

    Checkpoint ck;
    try {
        ck = load_checkpoint(checkpoint_path);
    } catch (const LoadError& e) {
        throw IncompatibleError(e.what());
    }
    auto codec = load_codec(ck);
    const auto channel_meta = ck.metadata.value("channel", json::object());
    const double power = channel_meta.value("power", 1.0);
    const double snr = snr_db.value_or(channel_meta.value("snr_db", 20.0));

    torch::NoGradGuard no_grad;
    auto x = raw.to(torch::kFloat).div(255.0).unsqueeze(0);
    AwgnChannel channel(NoiseModel::from_snr(snr, power, seed));
    auto s = power_normalize(encode(codec.encoder, x), power);
    auto x_hat = decode(codec.decoder, codec.config, channel.transmit(s), x.size(2), x.size(3));
    // Score the image as it will be stored (8-bit quantized).
    auto stored = (x_hat.clamp(0, 1) * 255.0).round() / 255.0;

    ReconstructionReport report;
    report.snr_db = snr;
    report.psnr_db = psnr(x, stored);
    try {
        report.ms_ssim = ms_ssim(x, stored);
    } catch (const ShapeError&) {
    }

    const fs::path out(out_path);
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    report.image_path = out.string();
    write_png(report.image_path, x_hat[0]);

    if (panel) {
        auto gap = torch::ones({3, x.size(2), 4});
        auto side_by_side = torch::cat({x[0], gap, x_hat[0].clamp(0, 1)}, 2);
        report.panel_path = (out.parent_path() / (out.stem().string() + "_panel.png")).string();
        write_png(report.panel_path, side_by_side);
    }

    json metrics = {{"input", image_path},
                    {"checkpoint", checkpoint_path},
                    {"checkpoint_hash", ck.content_hash},
                    {"method", ck.metadata.value("method", std::string{})},
                    {"snr_db", snr},
                    {"noise_seed", seed},
                    {"target_ratio", ratio_to_json(codec.config.target_ratio)},
                    {"achieved_ratio", codec.config.achieved_ratio().str()},
                    {"psnr_db", report.psnr_db},
                    {"ms_ssim", report.ms_ssim ? json(*report.ms_ssim) : json(nullptr)}};
    report.metrics_path = out.string() + ".json";
    std::ofstream(report.metrics_path) << metrics.dump(2) << '\n';
    return report;
}

}  // namespace semcom

#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "semcom/data_io.hpp"
#include "semcom/errors.hpp"
#include "semcom/training.hpp"
#include "test_util.hpp"

using namespace semcom;

namespace {

SystemModels tiny_models(uint64_t seed = 1, bool projection = true) {
    SystemModels m;
    m.bundle = testutil::tiny_bundle(99);
    torch::manual_seed(seed);
    CodecConfig c;
    c.base_width = 4;
    c.target_ratio = 1.0 / 6.0;
    m.codec = build_codec(c);
    if (projection) {
        LossConfig loss;
        loss.projection_out_dim = 8;
        m.projection = build_projection(loss, m.bundle.feature_channels);
    }
    return m;
}

StagePlan tiny_plan(int stage, TrainableSet trainable, double alpha) {
    StagePlan p;
    p.stage = stage;
    p.epochs = 2;
    p.batch_size = 8;
    p.lr0 = 1e-3;
    p.alpha = alpha;
    p.noise = NoiseModel::from_snr(10.0, 1.0, 5);
    p.trainable = trainable;
    return p;
}

struct Hashes {
    std::string codec, projection, classifier, backbone;
};

Hashes hashes(const SystemModels& m) {
    Hashes h;
    h.codec = module_hash(*m.codec.encoder) + module_hash(*m.codec.decoder);
    h.projection = m.projection.is_empty() ? "" : module_hash(*m.projection);
    h.classifier = module_hash(*m.bundle.classifier);
    h.backbone = module_hash(*m.bundle.backbone, true);
    return h;
}

const Dataset& data() {
    static Dataset d = synthetic_dataset(32, 3);
    return d;
}

}  // namespace

TEST(Schedule, StepDecay) {
    EXPECT_DOUBLE_EQ(scheduled_lr(0.01, 0, 50, 0.5), 0.01);
    EXPECT_DOUBLE_EQ(scheduled_lr(0.01, 49, 50, 0.5), 0.01);
    EXPECT_DOUBLE_EQ(scheduled_lr(0.01, 50, 50, 0.5), 0.005);
    EXPECT_DOUBLE_EQ(scheduled_lr(0.01, 199, 50, 0.5), 0.01 * 0.125);
}

TEST(Seeds, StepNoiseSeedsAreDistinct) {
    std::set<uint64_t> seen;
    for (int stage : {1, 2})
        for (int64_t e = 0; e < 10; ++e)
            for (int64_t s = 0; s < 50; ++s) seen.insert(step_noise_seed(7, stage, e, s));
    EXPECT_EQ(seen.size(), 1000u);
    EXPECT_EQ(step_noise_seed(7, 1, 2, 3), step_noise_seed(7, 1, 2, 3));
    EXPECT_NE(step_noise_seed(7, 1, 2, 3), step_noise_seed(8, 1, 2, 3));
}

TEST(Recipe, ValidateAndMethodNames) {
    TrainRecipe r;
    EXPECT_NO_THROW(r.validate());
    r.batch_size = 1;
    EXPECT_THROW(r.validate(), ConfigError);
    r = TrainRecipe{};
    r.lr_decay_factor = 1.5;
    EXPECT_THROW(r.validate(), ConfigError);
    for (auto m : {Method::Proposed, Method::DeepJscc, Method::DeepJsccFt, Method::DeepScStyle}) {
        EXPECT_EQ(parse_method(to_string(m)), m);
    }
    EXPECT_THROW(parse_method("jscc"), ConfigError);
}

TEST(Recipe, StagePlansPerMethod) {
    TrainRecipe r;
    LossConfig loss;
    loss.alpha2 = 0.7;
    CodecConfig codec;
    codec.target_ratio = 1.0 / 24.0;
    const auto noise = NoiseModel::from_snr(20, 1, 0);

    r.method = Method::Proposed;
    auto p1 = stage1_plan(r, loss, codec, noise, 1.0);
    EXPECT_DOUBLE_EQ(p1.alpha, 1.0 / 24.0);
    EXPECT_TRUE(p1.trainable.codec && p1.trainable.projection && !p1.trainable.classifier);
    auto p2 = stage2_plan(r, loss, noise, 1.0);
    EXPECT_DOUBLE_EQ(p2.alpha, 0.7);
    EXPECT_TRUE(p2.trainable.codec && !p2.trainable.projection && p2.trainable.classifier);
    EXPECT_EQ(p2.stage, 2);
    EXPECT_DOUBLE_EQ(p2.lr0, r.stage2_lr);

    r.method = Method::DeepJscc;
    p1 = stage1_plan(r, loss, codec, noise, 1.0);
    EXPECT_DOUBLE_EQ(p1.alpha, 1.0);
    EXPECT_TRUE(p1.trainable.codec && !p1.trainable.projection && !p1.trainable.classifier);
    EXPECT_THROW(stage2_plan(r, loss, noise, 1.0), ConfigError);

    r.method = Method::DeepJsccFt;
    EXPECT_DOUBLE_EQ(stage1_plan(r, loss, codec, noise, 1.0).alpha, 1.0);
    EXPECT_TRUE(stage2_plan(r, loss, noise, 1.0).trainable.codec);

    r.method = Method::DeepScStyle;
    r.deepsc_alpha1 = 0.4;
    EXPECT_DOUBLE_EQ(stage1_plan(r, loss, codec, noise, 1.0).alpha, 0.4);
    p2 = stage2_plan(r, loss, noise, 1.0);
    EXPECT_FALSE(p2.trainable.codec);
    EXPECT_TRUE(p2.trainable.classifier);
}

TEST(EpochRecord, JsonRoundTrip) {
    EpochRecord r;
    r.stage = 2;
    r.epoch = 4;
    r.lr = 1e-4;
    r.l_rec = 0.01;
    r.l_aux = 0.2;
    r.composite = 0.1;
    r.steps = 9;
    auto j = r.to_json();
    EXPECT_TRUE(j.contains("l_task"));
    auto back = EpochRecord::from_json(j);
    EXPECT_EQ(back.to_json(), j);
    r.stage = 1;
    r.l_aux.reset();
    EXPECT_TRUE(r.to_json()["l_sem"].is_null());
}

TEST(Training, TrainableSetsAreExact) {
    auto m = tiny_models();
    const auto before = hashes(m);
    auto r1 = run_stage(m, data(), tiny_plan(1, {true, true, false}, 0.5));
    const auto after1 = hashes(m);
    EXPECT_NE(after1.codec, before.codec);
    EXPECT_NE(after1.projection, before.projection);
    EXPECT_EQ(after1.classifier, before.classifier);
    EXPECT_EQ(after1.backbone, before.backbone);
    ASSERT_EQ(r1.history.size(), 2u);
    EXPECT_TRUE(r1.history[0].l_aux.has_value());

    run_stage(m, data(), tiny_plan(2, {true, false, true}, 0.5));
    const auto after2 = hashes(m);
    EXPECT_NE(after2.codec, after1.codec);
    EXPECT_EQ(after2.projection, after1.projection);
    EXPECT_NE(after2.classifier, after1.classifier);
    EXPECT_EQ(after2.backbone, before.backbone);

    run_stage(m, data(), tiny_plan(2, {false, false, true}, 0.0));
    const auto after3 = hashes(m);
    EXPECT_EQ(after3.codec, after2.codec);
    EXPECT_NE(after3.classifier, after2.classifier);
    EXPECT_EQ(after3.backbone, before.backbone);
}

TEST(Training, ReconstructionOnlyStageNeedsNoProjection) {
    auto m = tiny_models(1, false);
    auto r = run_stage(m, data(), tiny_plan(1, {true, false, false}, 1.0));
    EXPECT_FALSE(r.history[0].l_aux.has_value());
    EXPECT_DOUBLE_EQ(r.history[0].composite, r.history[0].l_rec);
    EXPECT_THROW(run_stage(m, data(), tiny_plan(1, {true, true, false}, 0.5)), ConfigError);
    EXPECT_THROW(run_stage(m, data(), tiny_plan(1, {false, false, false}, 1.0)), ConfigError);
}

TEST(Training, DeterministicFromSeeds) {
    auto a = tiny_models(4);
    auto b = tiny_models(4);
    auto ra = run_stage(a, data(), tiny_plan(1, {true, true, false}, 0.5));
    auto rb = run_stage(b, data(), tiny_plan(1, {true, true, false}, 0.5));
    EXPECT_EQ(hashes(a).codec, hashes(b).codec);
    for (size_t i = 0; i < ra.history.size(); ++i) {
        EXPECT_EQ(ra.history[i].to_json(), rb.history[i].to_json());
    }
}

TEST(Training, ResumeIsBitExact) {
    testutil::TempDir dir;
    auto straight = tiny_models(6);
    auto plan = tiny_plan(1, {true, true, false}, 0.5);
    plan.epochs = 3;
    auto full = run_stage(straight, data(), plan);

    auto resumed = tiny_models(6);
    auto interrupted = plan;
    interrupted.checkpoint_path = dir.file("s1.ckpt");
    interrupted.stop_after = 1;
    auto part = run_stage(resumed, data(), interrupted);
    EXPECT_FALSE(part.completed);
    auto ck = load_checkpoint(dir.file("s1.ckpt"));
    EXPECT_EQ(ck.metadata["next_epoch"], 1);
    EXPECT_FALSE(ck.metadata["stage_complete"].get<bool>());

    auto fresh = tiny_models(123);  // different init: everything must come from the checkpoint
    auto rest_plan = interrupted;
    rest_plan.stop_after = -1;
    auto rest = run_stage(fresh, data(), rest_plan, &ck);
    EXPECT_TRUE(rest.completed);
    EXPECT_EQ(hashes(fresh).codec, hashes(straight).codec);
    EXPECT_EQ(hashes(fresh).projection, hashes(straight).projection);
    ASSERT_EQ(rest.history.size(), full.history.size());
    for (size_t i = 0; i < full.history.size(); ++i) {
        EXPECT_EQ(rest.history[i].to_json(), full.history[i].to_json());
    }

    auto wrong = plan;
    wrong.stage = 2;
    EXPECT_THROW(run_stage(fresh, data(), wrong, &ck), IncompatibleError);
}

TEST(Training, LogAndCheckpointOutputs) {
    testutil::TempDir dir;
    auto m = tiny_models();
    auto plan = tiny_plan(1, {true, true, false}, 0.5);
    plan.log_path = dir.file("log.jsonl");
    plan.checkpoint_path = dir.file("s1.ckpt");
    plan.checkpoint_metadata = {{"method", "proposed"}};
    auto r = run_stage(m, data(), plan);
    std::ifstream log(plan.log_path);
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["stage"], 1);
        EXPECT_EQ(j["epoch"], lines);
        ++lines;
    }
    EXPECT_EQ(lines, 2);
    auto ck = load_checkpoint(plan.checkpoint_path);
    EXPECT_EQ(ck.content_hash, r.checkpoint_hash);
    EXPECT_EQ(ck.metadata["kind"], "codec");
    EXPECT_EQ(ck.metadata["method"], "proposed");
    EXPECT_TRUE(ck.metadata["stage_complete"].get<bool>());
    EXPECT_EQ(ck.metadata["backbone_hash"], module_hash(*m.bundle.backbone));
    EXPECT_FALSE(ck.tensors.count("optimizer"));

    auto restored = tiny_models(77);
    restore_models(ck, restored);
    EXPECT_EQ(hashes(restored).codec, hashes(m).codec);
}

TEST(Training, DivergenceGuard) {
    testutil::TempDir dir;
    auto m = tiny_models();
    auto plan = tiny_plan(1, {true, true, false}, 0.5);
    plan.divergence_threshold = 1e-9;
    plan.checkpoint_path = dir.file("s1.ckpt");
    try {
        run_stage(m, data(), plan);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.dump_path(), dir.file("s1.ckpt") + ".diverged");
        EXPECT_TRUE(std::filesystem::exists(e.dump_path()));
    }
}

TEST(Training, RejectsBadPlans) {
    auto m = tiny_models();
    auto plan = tiny_plan(3, {true, false, false}, 1.0);
    EXPECT_THROW(run_stage(m, data(), plan), ConfigError);
    plan = tiny_plan(1, {true, false, false}, 1.0);
    EXPECT_THROW(run_stage(m, data().head(1), plan), ConfigError);
    Dataset unlabelled("u", "x", torch::zeros({4, 3, 32, 32}, torch::kByte));
    EXPECT_THROW(run_stage(m, unlabelled, tiny_plan(2, {true, false, true}, 0.5)), ConfigError);
}

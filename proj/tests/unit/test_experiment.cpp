#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "semcom/errors.hpp"
#include "semcom/experiment.hpp"
#include "test_util.hpp"

using namespace semcom;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string first_line(const std::string& path) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    return line;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream(path) << j.dump(2);
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
    ExperimentConfig c;
    c.downstream.backbone_checkpoint = "b.ckpt";
    const auto j = c.to_json();
    auto back = ExperimentConfig::from_json(j);
    EXPECT_EQ(back.to_json(), j);
    EXPECT_EQ(j["codec"]["target_ratio"], "1/6");
    EXPECT_EQ(j["loss"]["alpha1_policy"], "ratio-tied");
    EXPECT_EQ(j["recipe"]["stage1_epochs"], 200);
}

TEST(Config, PartialDocumentsFillDefaults) {
    auto c = ExperimentConfig::from_json(
        json::parse(R"({"codec": {"target_ratio": "1/2.5"}, "channel": {"snr_db": 5}})"));
    EXPECT_DOUBLE_EQ(c.codec.target_ratio, 0.4);
    EXPECT_DOUBLE_EQ(c.channel.snr_db, 5.0);
    EXPECT_EQ(c.codec.base_width, 32);
    EXPECT_NEAR(c.noise().sigma2, std::pow(10.0, -0.5), 1e-15);
    EXPECT_EQ(c.eval_dataset(), "cifar10");
    auto numeric = ExperimentConfig::from_json(json::parse(R"({"codec": {"target_ratio": 0.25}})"));
    EXPECT_DOUBLE_EQ(numeric.codec.target_ratio, 0.25);
}

TEST(Config, FieldLevelErrors) {
    auto message = [](const char* text) {
        try {
            ExperimentConfig::from_json(json::parse(text));
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message(R"({"codec": {"widht": 8}})").find("codec.widht: unknown key"), std::string::npos);
    EXPECT_NE(message(R"({"extra": 1})").find("extra: unknown key"), std::string::npos);
    EXPECT_NE(message(R"({"codec": {"base_width": "wide"}})").find("codec.base_width: expected an integer"),
              std::string::npos);
    EXPECT_NE(message(R"({"channel": {"snr_db": true}})").find("channel.snr_db"), std::string::npos);
    EXPECT_NE(message(R"({"codec": {"target_ratio": "3/2"}})").find("codec.target_ratio"), std::string::npos);
    EXPECT_NE(message(R"({"recipe": {"method": "magic"}})").find("recipe.method"), std::string::npos);
    EXPECT_NE(message(R"({"loss": {"tau": -1}})").find("tau"), std::string::npos);
    EXPECT_NE(message(R"({"config_version": 9})").find("config_version"), std::string::npos);
    EXPECT_NE(message(R"({"data": {"dataset": "kodak"}})").find("data.dataset"), std::string::npos);
    EXPECT_NE(message(R"({"channel": {"power": 0}})").find("channel.power"), std::string::npos);
    EXPECT_NE(message(R"([1, 2])").find("expected an object"), std::string::npos);
}

TEST(Config, Overrides) {
    json doc = json::parse(R"({"channel": {"snr_db": 20}})");
    apply_override(doc, "channel.snr_db=5");
    apply_override(doc, "recipe.method=deepjscc");
    apply_override(doc, "codec.target_ratio=\"1/48\"");
    apply_override(doc, "downstream.verify_accuracy=false");
    auto c = ExperimentConfig::from_json(doc);
    EXPECT_DOUBLE_EQ(c.channel.snr_db, 5.0);
    EXPECT_EQ(c.recipe.method, Method::DeepJscc);
    EXPECT_DOUBLE_EQ(c.codec.target_ratio, 1.0 / 48);
    EXPECT_FALSE(c.downstream.verify_accuracy);
    EXPECT_THROW(apply_override(doc, "novalue"), ConfigError);
    EXPECT_THROW(apply_override(doc, "channel.snr_db.deeper=1"), ConfigError);
}

TEST(Config, StageSelection) {
    EXPECT_EQ(parse_stage_selection("1"), StageSelection::One);
    EXPECT_EQ(parse_stage_selection("2"), StageSelection::Two);
    EXPECT_EQ(parse_stage_selection("all"), StageSelection::All);
    EXPECT_THROW(parse_stage_selection("3"), ConfigError);
}

TEST(Recipe, TwoStagesWithLineageAndResume) {
    testutil::TempDir dir;
    auto c = testutil::tiny_config(dir);
    auto art = run_recipe(c, StageSelection::All);
    EXPECT_TRUE(fs::exists(art.stage1_checkpoint));
    EXPECT_TRUE(fs::exists(art.stage2_checkpoint));
    EXPECT_EQ(art.final_checkpoint, art.stage2_checkpoint);
    EXPECT_EQ(art.history.size(), 3u);
    EXPECT_TRUE(fs::exists(c.output_dir + "/config.resolved.json"));
    EXPECT_TRUE(fs::exists(c.output_dir + "/train_log.jsonl"));

    auto resolved = load_experiment_config(c.output_dir + "/config.resolved.json");
    EXPECT_EQ(resolved.to_json(), c.to_json());

    const auto lineage = checkpoint_lineage(art.stage2_checkpoint);
    ASSERT_EQ(lineage.size(), 2u);
    EXPECT_EQ(lineage[1], load_checkpoint(art.stage1_checkpoint).content_hash);

    // a second run finds both stages complete and changes nothing
    const auto h2 = load_checkpoint(art.stage2_checkpoint).content_hash;
    auto again = run_recipe(c, StageSelection::All);
    EXPECT_EQ(load_checkpoint(again.stage2_checkpoint).content_hash, h2);

    auto row = evaluate_checkpoint(c, art.final_checkpoint, 2);
    EXPECT_EQ(row.method, "proposed");
    EXPECT_EQ(row.seeds, 2);
    EXPECT_EQ(row.lineage, lineage[0] + "/" + lineage[1]);
    EXPECT_TRUE(std::isfinite(row.accuracy_mean));
}

TEST(Recipe, DeepJsccHasOneStage) {
    testutil::TempDir dir;
    auto c = testutil::tiny_config(dir);
    c.recipe.method = Method::DeepJscc;
    auto art = run_recipe(c, StageSelection::All);
    EXPECT_TRUE(art.stage2_checkpoint.empty());
    EXPECT_EQ(art.final_checkpoint, art.stage1_checkpoint);
    EXPECT_THROW(run_recipe(c, StageSelection::Two), ConfigError);
}

TEST(Recipe, MissingPrerequisites) {
    testutil::TempDir dir;
    auto c = testutil::tiny_config(dir);
    EXPECT_THROW(run_recipe(c, StageSelection::Two), MissingPrerequisiteError);
    c.downstream.backbone_checkpoint = dir.file("nope.ckpt");
    EXPECT_THROW(run_recipe(c, StageSelection::One), MissingPrerequisiteError);
    c.downstream.backbone_checkpoint.clear();
    EXPECT_THROW(run_recipe(c, StageSelection::One), MissingPrerequisiteError);
}

TEST(Recipe, IncompatibleCheckpoints) {
    testutil::TempDir dir;
    auto c = testutil::tiny_config(dir);
    c.recipe.method = Method::DeepJscc;
    c.recipe.stage1_epochs = 1;
    auto art = run_recipe(c, StageSelection::One);

    auto other = c;
    other.codec.target_ratio = 1.0 / 48;
    EXPECT_THROW(load_system(other, art.final_checkpoint), IncompatibleError);

    auto swapped = c;
    swapped.downstream.backbone_checkpoint = dir.file("other_backbone.ckpt");
    save_bundle(testutil::tiny_bundle(1234), swapped.downstream.backbone_checkpoint, "other");
    EXPECT_THROW(load_system(swapped, art.final_checkpoint), IncompatibleError);

    std::ofstream(dir.file("junk.ckpt")) << "garbage";
    EXPECT_THROW(load_system(c, dir.file("junk.ckpt")), IncompatibleError);
    EXPECT_THROW(load_system(c, dir.file("absent.ckpt")), MissingPrerequisiteError);
}

TEST(SweepConfigTest, ParseAndCells) {
    auto j = json::parse(R"({
        "output_dir": "out",
        "methods": ["proposed", "deepjscc"],
        "snrs_db": [20],
        "ratios": ["1/48", 0.5],
        "base": {"codec": {"base_width": 4}}
    })");
    auto s = SweepConfig::from_json(j);
    EXPECT_EQ(s.grid.cells().size(), 4u);
    EXPECT_DOUBLE_EQ(s.grid.ratios[0], 1.0 / 48);
    auto cell = cell_config(s, s.grid.cells()[1]);
    EXPECT_EQ(cell.recipe.method, Method::Proposed);
    EXPECT_DOUBLE_EQ(cell.codec.target_ratio, 0.5);
    EXPECT_EQ(cell.codec.base_width, 4);
    EXPECT_EQ(cell.output_dir, "out/cells/proposed_snr20_ratio1-2");

    j["ratios"] = json::array();
    EXPECT_THROW(SweepConfig::from_json(j), ConfigError);
    j["ratios"] = {"1/6"};
    j["methods"] = {"nope"};
    EXPECT_THROW(SweepConfig::from_json(j), ConfigError);
    j["methods"] = {"proposed"};
    j["grid"] = 1;
    EXPECT_THROW(SweepConfig::from_json(j), ConfigError);
}

TEST(SweepConfigTest, TrainsAndEvaluatesCells) {
    testutil::TempDir dir;
    SweepConfig s;
    s.base = testutil::tiny_config(dir);
    s.base.recipe.stage1_epochs = 1;
    s.grid = SweepGrid{{"deepjscc"}, {10.0}, {1.0 / 6, 1.0 / 12}};
    s.output_dir = dir.file("sweep");
    s.train_missing = false;
    auto skipped = run_configured_sweep(s);
    EXPECT_EQ(skipped.rows.size(), 0u);
    EXPECT_EQ(skipped.missing.size(), 2u);

    s.train_missing = true;
    auto out = run_configured_sweep(s);
    EXPECT_EQ(out.rows.size(), 2u);
    EXPECT_TRUE(out.missing.empty());
    EXPECT_TRUE(fs::exists(dir.file("sweep/psnr_snr10dB.svg")));
    EXPECT_DOUBLE_EQ(out.rows[1].achieved_ratio, 1.0 / 12);
}

TEST(Reconstruct, WritesImageSidecarAndPanel) {
    testutil::TempDir dir;
    auto c = testutil::tiny_config(dir);
    c.recipe.method = Method::DeepJscc;
    c.recipe.stage1_epochs = 1;
    auto art = run_recipe(c, StageSelection::One);

    write_png(dir.file("in.png"), torch::rand({3, 24, 36}));
    auto rep = reconstruct_image(art.final_checkpoint, dir.file("in.png"), std::nullopt,
                                 dir.file("out/rec.png"), true, 3);
    EXPECT_DOUBLE_EQ(rep.snr_db, c.channel.snr_db);
    EXPECT_TRUE(fs::exists(rep.image_path));
    EXPECT_TRUE(fs::exists(rep.panel_path));
    EXPECT_EQ(read_png(rep.image_path).sizes(), (std::vector<int64_t>{3, 24, 36}));
    EXPECT_EQ(read_png(rep.panel_path).size(2), 36 * 2 + 4);
    std::ifstream side(rep.metrics_path);
    auto j = json::parse(side);
    EXPECT_NEAR(j["psnr_db"].get<double>(), rep.psnr_db, 1e-12);
    EXPECT_TRUE(j.contains("ms_ssim"));

    auto rep2 = reconstruct_image(art.final_checkpoint, dir.file("in.png"), 0.0,
                                  dir.file("out/rec0.png"), false, 3);
    EXPECT_DOUBLE_EQ(rep2.snr_db, 0.0);

    write_png(dir.file("odd.png"), torch::rand({3, 30, 32}));
    try {
        reconstruct_image(art.final_checkpoint, dir.file("odd.png"), std::nullopt,
                          dir.file("x.png"), false, 0);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("pad by 2 rows"), std::string::npos);
    }
    EXPECT_THROW(reconstruct_image(art.final_checkpoint, dir.file("none.png"), std::nullopt,
                                   dir.file("x.png"), false, 0),
                 ConfigError);
}

TEST(Reconstruct, OverfitCodecWithoutNoiseExceeds30Db) {
    testutil::TempDir dir;
    torch::manual_seed(11);
    auto xs = torch::linspace(0.0, 1.0, 32).view({1, 1, 32});
    auto ys = torch::linspace(0.0, 1.0, 32).view({1, 32, 1});
    auto img = torch::stack({0.2 + 0.6 * xs.expand({1, 32, 32})[0], 0.5 + 0.3 * torch::sin(6.0 * ys).expand({1, 32, 32})[0],
                             0.3 + 0.4 * (xs * ys)[0]})
                   .clamp(0, 1);
    write_png(dir.file("in.png"), img);
    auto x = read_png(dir.file("in.png")).to(torch::kFloat).div(255.0).unsqueeze(0);

    ExperimentConfig c;
    c.codec.base_width = 16;
    c.codec.target_ratio = 0.4;
    auto codec = build_codec(c.codec);
    codec.train(true);
    torch::optim::Adam opt(codec.parameters(), torch::optim::AdamOptions(2e-3));
    AwgnChannel noiseless(NoiseModel::noiseless());
    for (int step = 0; step < 400; ++step) {
        auto x_hat = decode(codec.decoder, c.codec,
                            noiseless.transmit(power_normalize(encode(codec.encoder, x), 1.0)), 32, 32);
        auto loss = reconstruction_loss(x, x_hat);
        opt.zero_grad();
        loss.backward();
        opt.step();
        if (loss.item<double>() < 1e-4) break;
    }
    codec.train(false);

    Checkpoint ck;
    ck.metadata["kind"] = "codec";
    ck.metadata["codec"] = c.to_json()["codec"];
    ck.put_module("encoder", *codec.encoder);
    ck.put_module("decoder", *codec.decoder);
    save_checkpoint(ck, dir.file("overfit.ckpt"));

    // 300 dB leaves sigma^2 at 1e-30
    auto rep = reconstruct_image(dir.file("overfit.ckpt"), dir.file("in.png"), 300.0,
                                 dir.file("rec.png"), false, 0);
    EXPECT_GT(rep.psnr_db, 30.0);
}

// --- command-line tool -------------------------------------------------------------------

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SEMCOM_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
    testutil::TempDir dir;
    auto c = testutil::tiny_config(dir);
    c.recipe.stage1_epochs = 1;
    write_json(dir.file("cfg.json"), c.to_json());

    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    EXPECT_EQ(run_cli("train " + dir.file("missing.json")), 2);

    auto bad = c.to_json();
    bad["codec"]["widht"] = 3;
    write_json(dir.file("bad.json"), bad);
    EXPECT_EQ(run_cli("train " + dir.file("bad.json")), 2);

    EXPECT_EQ(run_cli("train " + dir.file("cfg.json") + " --stage 2"), 3);
    EXPECT_EQ(run_cli("train " + dir.file("cfg.json") + " --stage 1"), 0);
    EXPECT_EQ(run_cli("train " + dir.file("cfg.json") + " --stage 2 --set recipe.stage2_epochs=1"), 0);
    EXPECT_TRUE(fs::exists(c.output_dir + "/stage2.ckpt"));

    EXPECT_EQ(run_cli("evaluate " + dir.file("cfg.json") + " --checkpoint " + c.output_dir +
                      "/stage2.ckpt --seeds 1 --csv " + dir.file("eval.csv")),
              0);
    EXPECT_EQ(read_sweep_csv(dir.file("eval.csv")).size(), 1u);

    std::ofstream(dir.file("junk.ckpt")) << "SEMCOMCK garbage";
    EXPECT_EQ(run_cli("evaluate " + dir.file("cfg.json") + " --checkpoint " + dir.file("junk.ckpt")), 4);
    EXPECT_EQ(run_cli("evaluate " + dir.file("cfg.json") + " --checkpoint " + dir.file("none.ckpt")), 3);
    EXPECT_EQ(run_cli("evaluate " + dir.file("cfg.json") + " --checkpoint " + c.output_dir +
                      "/stage2.ckpt --set codec.target_ratio=0.5"),
              4);

    write_json(dir.file("empty_grid.json"), json{{"methods", json::array()}, {"snrs_db", {20}}, {"ratios", {"1/6"}}});
    EXPECT_EQ(run_cli("sweep " + dir.file("empty_grid.json")), 2);

    EXPECT_EQ(run_cli("reconstruct --checkpoint " + c.output_dir + "/stage2.ckpt --image " +
                      dir.file("none.png") + " --out " + dir.file("r.png")),
              2);
    write_png(dir.file("odd.png"), torch::rand({3, 30, 32}));
    EXPECT_EQ(run_cli("reconstruct --checkpoint " + c.output_dir + "/stage2.ckpt --image " +
                      dir.file("odd.png") + " --out " + dir.file("r.png")),
              2);
    write_png(dir.file("ok.png"), torch::rand({3, 32, 32}));
    EXPECT_EQ(run_cli("reconstruct --checkpoint " + c.output_dir + "/stage2.ckpt --image " +
                      dir.file("ok.png") + " --out " + dir.file("r.png") + " --snr 20 --panel"),
              0);
    EXPECT_TRUE(fs::exists(dir.file("r.png.json")));
}

TEST(Cli, RerunReproducesFirstLogLine) {
    testutil::TempDir dir;
    auto c = testutil::tiny_config(dir);
    c.recipe.stage1_epochs = 1;
    write_json(dir.file("cfg.json"), c.to_json());
    ASSERT_EQ(run_cli("train " + dir.file("cfg.json") + " --stage 1 --set output_dir=" + dir.file("a")),
              0);
    ASSERT_EQ(run_cli("train " + dir.file("cfg.json") + " --stage 1 --set output_dir=" + dir.file("b")),
              0);
    const auto a = first_line(dir.file("a/train_log.jsonl"));
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, first_line(dir.file("b/train_log.jsonl")));
    EXPECT_EQ(load_checkpoint(dir.file("a/stage1.ckpt")).content_hash.size(), 64u);
}

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "semcom/data_io.hpp"
#include "semcom/downstream.hpp"
#include "semcom/errors.hpp"
#include "semcom/experiment.hpp"

using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kMissing = 3, kIncompatible = 4 };

semcom::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) {
        throw semcom::ConfigError("cannot open config file " + path);
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw semcom::ConfigError(path + ": invalid JSON: " + e.what());
    }
    for (const auto& o : overrides) {
        semcom::apply_override(doc, o);
    }
    return semcom::ExperimentConfig::from_json(doc);
}

void print_row(const semcom::SweepResult& r) {
    std::cout << semcom::sweep_csv_header() << '\n' << semcom::to_csv_row(r) << '\n';
}

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        fn();
        return kOk;
    } catch (const semcom::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const semcom::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << '\n';
        return kConfig;
    } catch (const semcom::DegenerateInputError& e) {
        std::cerr << "degenerate input: " << e.what() << '\n';
        return kConfig;
    } catch (const semcom::MissingPrerequisiteError& e) {
        std::cerr << "missing prerequisite: " << e.what() << '\n';
        return kMissing;
    } catch (const semcom::IncompatibleError& e) {
        std::cerr << "incompatible: " << e.what() << '\n';
        return kIncompatible;
    } catch (const semcom::LoadError& e) {
        std::cerr << "cannot load: " << e.what() << '\n';
        return kIncompatible;
    } catch (const semcom::DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << " (state dumped to " << e.dump_path() << ")\n";
        return kFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Contrastive semantic communication over AWGN channels"};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 ok, 2 config or shape error, 3 missing prerequisite, "
               "4 incompatible or malformed checkpoint.");

    std::string config_path;
    std::vector<std::string> overrides;

    auto* train = app.add_subcommand("train", "Run the two-stage training recipe");
    std::string stage = "all";
    train->add_option("config", config_path, "Experiment config (JSON)")->required();
    train->add_option("--stage", stage, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
    train->add_option("--set", overrides, "Override a config key, e.g. --set channel.snr_db=5");

    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a trained checkpoint");
    std::string checkpoint;
    std::optional<int64_t> seeds;
    std::string csv_out;
    evaluate->add_option("config", config_path, "Experiment config (JSON)")->required();
    evaluate->add_option("--checkpoint", checkpoint, "Codec checkpoint")->required();
    evaluate->add_option("--seeds", seeds, "Noise realizations (default: evaluation.noise_seeds)");
    evaluate->add_option("--csv", csv_out, "CSV file to write (default: <output_dir>/evaluate.csv)");
    evaluate->add_option("--set", overrides, "Override a config key");

    auto* sweep = app.add_subcommand("sweep", "Train and evaluate a method x SNR x ratio grid");
    std::string grid_path;
    bool no_train = false;
    sweep->add_option("grid", grid_path, "Sweep config (JSON)")->required();
    sweep->add_flag("--no-train", no_train, "Mark untrained cells missing instead of training them");

    auto* reconstruct = app.add_subcommand("reconstruct", "Send one image through a trained codec");
    std::string image_path;
    std::string out_path;
    std::optional<double> snr;
    bool panel = false;
    uint64_t noise_seed = 0;
    reconstruct->add_option("--checkpoint", checkpoint, "Codec checkpoint")->required();
    reconstruct->add_option("--image", image_path, "Input PNG")->required();
    reconstruct->add_option("--out", out_path, "Output PNG")->required();
    reconstruct->add_option("--snr", snr, "Channel SNR in dB (default: training SNR)");
    reconstruct->add_flag("--panel", panel, "Also write an original | reconstruction panel");
    reconstruct->add_option("--seed", noise_seed, "Noise seed");

    auto* pretrain = app.add_subcommand("pretrain-backbone", "Train the CIFAR ResNet backbone");
    std::string data_root;
    std::string dataset = "cifar10";
    semcom::PretrainOptions popts;
    bool no_augment = false;
    int64_t subset = 0;
    pretrain->add_option("--out", out_path, "Backbone checkpoint to write")->required();
    pretrain->add_option("--data-root", data_root, "Dataset root (default: $DATA_ROOT, then ./data)");
    pretrain->add_option("--dataset", dataset, "cifar10 or synthetic");
    pretrain->add_option("--depth", popts.depth, "ResNet depth 6n+2");
    pretrain->add_option("--epochs", popts.epochs);
    pretrain->add_option("--batch-size", popts.batch_size);
    pretrain->add_option("--lr", popts.lr);
    pretrain->add_option("--seed", popts.seed);
    pretrain->add_option("--subset", subset, "Use only the first N training images");
    pretrain->add_flag("--no-augment", no_augment, "Disable random crop and flip");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    if (train->parsed()) {
        return guarded([&] {
            const auto config = load_config(config_path, overrides);
            const auto artifacts = semcom::run_recipe(config, semcom::parse_stage_selection(stage));
            std::cout << "final checkpoint: " << artifacts.final_checkpoint << '\n';
        });
    }
    if (evaluate->parsed()) {
        return guarded([&] {
            const auto config = load_config(config_path, overrides);
            const auto n = seeds.value_or(config.evaluation.noise_seeds);
            if (n < 1) {
                throw semcom::ConfigError("--seeds must be at least 1");
            }
            const auto row = semcom::evaluate_checkpoint(config, checkpoint, n);
            const auto path = csv_out.empty() ? config.output_dir + "/evaluate.csv" : csv_out;
            semcom::write_sweep_csv(path, {row});
            print_row(row);
        });
    }
    if (sweep->parsed()) {
        return guarded([&] {
            auto config = semcom::load_sweep_config(grid_path);
            if (no_train) {
                config.train_missing = false;
            }
            const auto outcome = semcom::run_configured_sweep(config);
            std::cout << "wrote " << outcome.csv_path << " (" << outcome.rows.size() << " rows, "
                      << outcome.missing.size() << " missing)\n";
            for (const auto& m : outcome.missing) {
                std::cout << "missing: " << m << '\n';
            }
        });
    }
    if (reconstruct->parsed()) {
        return guarded([&] {
            const auto report =
                semcom::reconstruct_image(checkpoint, image_path, snr, out_path, panel, noise_seed);
            std::cout << "snr_db " << report.snr_db << "  psnr_db " << report.psnr_db;
            if (report.ms_ssim) {
                std::cout << "  ms_ssim " << *report.ms_ssim;
            }
            std::cout << "\nwrote " << report.image_path << " and " << report.metrics_path << '\n';
        });
    }
    if (pretrain->parsed()) {
        return guarded([&] {
            popts.augment = !no_augment;
            const auto root = semcom::resolve_data_root(data_root);
            auto train_set = semcom::load_dataset(dataset, "train", root).head(subset);
            auto test_set = semcom::load_dataset(dataset, "test", root);
            popts.log_path = out_path + ".log.jsonl";
            auto bundle = semcom::pretrain_backbone(train_set, popts, &test_set);
            semcom::save_bundle(bundle, out_path,
                                "pretrain-backbone " + dataset + " depth " +
                                    std::to_string(popts.depth) + " epochs " +
                                    std::to_string(popts.epochs) + " seed " +
                                    std::to_string(popts.seed));
            std::cout << "clean test accuracy " << bundle.measured_accuracy.value_or(0.0) << '\n';
        });
    }
    return kOk;
}

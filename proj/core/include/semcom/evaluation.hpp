#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "semcom/channel.hpp"
#include "semcom/data_io.hpp"
#include "semcom/training.hpp"

namespace semcom {

inline constexpr double kPsnrCapDb = 100.0;

/// 10 log10(1 / MSE) for images in [0, 1], capped at 100 dB. Accepts (c, h, w) or
/// (B, c, h, w); batched inputs return the mean of per-image values.
double psnr(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Per-image PSNR for (B, c, h, w) batches, shape (B).
torch::Tensor psnr_per_image(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Number of MS-SSIM scales used for an image whose shorter side is `min_side`: the largest
/// L <= 5 with min_side > 10 * 2^(L-1). Throws ShapeError when min_side <= 10.
int ms_ssim_levels(int64_t min_side);

/// Multi-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and the
/// standard five scale weights, truncated and renormalized when fewer scales fit. Accepts
/// (c, h, w) or (B, c, h, w); batched inputs return the mean of per-image values.
double ms_ssim(const torch::Tensor& x, const torch::Tensor& x_hat);
torch::Tensor ms_ssim_per_image(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Top-1 match fraction. Throws ConfigError on empty or mismatched inputs.
double accuracy(const torch::Tensor& predicted, const torch::Tensor& truth);

struct SweepResult {
    std::string method;
    double snr_db = 0.0;
    double target_ratio = 0.0;
    double achieved_ratio = 0.0;
    double accuracy_mean = std::numeric_limits<double>::quiet_NaN();
    double accuracy_std = std::numeric_limits<double>::quiet_NaN();
    double psnr_mean = 0.0;
    double psnr_std = 0.0;
    double msssim_mean = std::numeric_limits<double>::quiet_NaN();
    double msssim_std = std::numeric_limits<double>::quiet_NaN();
    int64_t seeds = 0;
    std::string lineage;  // content hashes of the evaluated checkpoint chain, '/'-joined

    nlohmann::json to_json() const;
    static SweepResult from_json(const nlohmann::json& j);
};

/// Exact CSV header of sweep tables.
std::string sweep_csv_header();
std::string to_csv_row(const SweepResult& r);
SweepResult parse_csv_row(const std::string& line);
void write_sweep_csv(const std::string& path, const std::vector<SweepResult>& rows);
std::vector<SweepResult> read_sweep_csv(const std::string& path);

struct EvaluationOptions {
    int64_t noise_seeds = 10;
    int64_t batch_size = 128;
    double power = 1.0;
};

/// Runs the full pipeline (encode, normalize, AWGN, decode, classify) over `data` once per
/// noise realization (seeds noise.seed + r) and reports mean and sample standard deviation of
/// the per-realization accuracy, PSNR and MS-SSIM. Accuracy is NaN for unlabelled data.
SweepResult evaluate_system(SystemModels& models, const Dataset& data, const NoiseModel& noise,
                            const EvaluationOptions& options);

/// One cell of a sweep grid.
struct SweepCell {
    std::string method;
    double snr_db = 0.0;
    double target_ratio = 0.0;

    std::string key() const;
};

struct SweepGrid {
    std::vector<std::string> methods;
    std::vector<double> snrs_db;
    std::vector<double> ratios;

    std::vector<SweepCell> cells() const;
};

/// Produces a result for one cell (training it first when needed). Throwing
/// MissingPrerequisiteError or LoadError marks the cell missing instead of aborting.
using CellRunner = std::function<SweepResult(const SweepCell&)>;

struct SweepOutcome {
    std::vector<SweepResult> rows;
    std::vector<std::string> missing;  // cell keys
    std::vector<std::string> plots;
    std::string csv_path;
};

/// Evaluates every cell, skipping cells already recorded in <out_dir>/manifest.json, then
/// writes <out_dir>/sweep.csv and one SVG per (metric, SNR) for accuracy and PSNR. The
/// manifest is rewritten after each cell so an interrupted sweep resumes where it stopped.
SweepOutcome run_sweep(const SweepGrid& grid, const std::string& out_dir, const CellRunner& runner);

/// Writes a simple line chart of `metric` ("accuracy", "psnr" or "msssim") against achieved
/// ratio, one series per method, for rows with the given SNR.
void write_metric_plot(const std::string& path, const std::vector<SweepResult>& rows,
                       const std::string& metric, double snr_db);

}  // namespace semcom

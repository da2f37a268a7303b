#include "semcom/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "semcom/errors.hpp"

namespace fs = std::filesystem;

namespace semcom {

namespace {

torch::Tensor as_batch(const torch::Tensor& t) {
    if (t.dim() == 3) {
        return t.unsqueeze(0);
    }
    if (t.dim() == 4) {
        return t;
    }
    throw ShapeError("expected (c, h, w) or (B, c, h, w), got " + c10::str(t.sizes()));
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " +
                         c10::str(b.sizes()));
    }
}

}  // namespace

torch::Tensor psnr_per_image(const torch::Tensor& x, const torch::Tensor& x_hat) {
    check_same_shape(x, x_hat, "psnr");
    auto a = as_batch(x).detach().to(torch::kDouble);
    auto b = as_batch(x_hat).detach().to(torch::kDouble);
    auto mse = (a - b).pow(2).flatten(1).mean(1);
    auto value = -10.0 * torch::log10(mse);
    return torch::where(mse > 0, value.clamp_max(kPsnrCapDb), torch::full_like(mse, kPsnrCapDb));
}

double psnr(const torch::Tensor& x, const torch::Tensor& x_hat) {
    return psnr_per_image(x, x_hat).mean().item<double>();
}

int ms_ssim_levels(int64_t min_side) {
    if (min_side <= 10) {
        throw ShapeError("image side " + std::to_string(min_side) +
                         " is too small for MS-SSIM (needs at least 11 pixels)");
    }
    int levels = 1;
    while (levels < 5 && min_side > 10 * (int64_t{1} << levels)) {
        ++levels;
    }
    return levels;
}

namespace {

constexpr double kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
constexpr int64_t kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

torch::Tensor gaussian_window() {
    auto coords = torch::arange(kWindow, torch::kDouble) - static_cast<double>(kWindow / 2);
    auto g = torch::exp(-(coords * coords) / (2.0 * kSigma * kSigma));
    return g / g.sum();
}

// Separable valid-mode Gaussian filter applied per channel.
torch::Tensor blur(const torch::Tensor& x, const torch::Tensor& g) {
    const int64_t c = x.size(1);
    auto horizontal = g.view({1, 1, 1, kWindow}).expand({c, 1, 1, kWindow});
    auto vertical = g.view({1, 1, kWindow, 1}).expand({c, 1, kWindow, 1});
    namespace F = torch::nn::functional;
    auto y = F::conv2d(x, horizontal, F::Conv2dFuncOptions().groups(c));
    return F::conv2d(y, vertical, F::Conv2dFuncOptions().groups(c));
}

// Per-channel mean SSIM and contrast-structure terms, each (B, c).
std::pair<torch::Tensor, torch::Tensor> ssim_terms(const torch::Tensor& x, const torch::Tensor& y,
                                                   const torch::Tensor& g) {
    auto mu_x = blur(x, g);
    auto mu_y = blur(y, g);
    auto sigma_xx = blur(x * x, g) - mu_x * mu_x;
    auto sigma_yy = blur(y * y, g) - mu_y * mu_y;
    auto sigma_xy = blur(x * y, g) - mu_x * mu_y;
    auto cs_map = (2.0 * sigma_xy + kC2) / (sigma_xx + sigma_yy + kC2);
    auto ssim_map = ((2.0 * mu_x * mu_y + kC1) / (mu_x * mu_x + mu_y * mu_y + kC1)) * cs_map;
    return {ssim_map.flatten(2).mean(2), cs_map.flatten(2).mean(2)};
}

}  // namespace

torch::Tensor ms_ssim_per_image(const torch::Tensor& x, const torch::Tensor& x_hat) {
    check_same_shape(x, x_hat, "ms_ssim");
    auto a = as_batch(x).detach().to(torch::kDouble);
    auto b = as_batch(x_hat).detach().to(torch::kDouble);
    const int levels = ms_ssim_levels(std::min(a.size(2), a.size(3)));

    // Renormalize only a truncated set; the full five weights are used as published
    // (they sum to 1.0001).
    double weight_sum = 1.0;
    if (levels < 5) {
        weight_sum = 0.0;
        for (int i = 0; i < levels; ++i) {
            weight_sum += kWeights[i];
        }
    }
    const auto g = gaussian_window();
    namespace F = torch::nn::functional;

    torch::Tensor result = torch::ones({a.size(0), a.size(1)}, torch::kDouble);
    for (int level = 0; level < levels; ++level) {
        auto [ssim, cs] = ssim_terms(a, b, g);
        const double w = kWeights[level] / weight_sum;
        if (level + 1 < levels) {
            result = result * torch::relu(cs).pow(w);
            const int64_t pad_h = a.size(2) % 2;
            const int64_t pad_w = a.size(3) % 2;
            auto pool = F::AvgPool2dFuncOptions(2).padding({pad_h, pad_w});
            a = F::avg_pool2d(a, pool);
            b = F::avg_pool2d(b, pool);
        } else {
            result = result * torch::relu(ssim).pow(w);
        }
    }
    return result.mean(1);
}

double ms_ssim(const torch::Tensor& x, const torch::Tensor& x_hat) {
    return ms_ssim_per_image(x, x_hat).mean().item<double>();
}

double accuracy(const torch::Tensor& predicted, const torch::Tensor& truth) {
    if (predicted.numel() == 0) {
        throw ConfigError("accuracy of an empty prediction set is undefined");
    }
    if (predicted.numel() != truth.numel()) {
        throw ConfigError("accuracy: " + std::to_string(predicted.numel()) + " predictions vs " +
                          std::to_string(truth.numel()) + " labels");
    }
    auto hits = predicted.flatten().to(torch::kLong).eq(truth.flatten().to(torch::kLong));
    return hits.sum().item<double>() / static_cast<double>(predicted.numel());
}

// --- SweepResult ----------------------------------------------------------------------------

namespace {

nlohmann::json number_or_null(double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

double number_or_nan(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return j[key].get<double>();
}

}  // namespace

nlohmann::json SweepResult::to_json() const {
    return {{"method", method},
            {"snr_db", snr_db},
            {"target_ratio", target_ratio},
            {"achieved_ratio", achieved_ratio},
            {"accuracy_mean", number_or_null(accuracy_mean)},
            {"accuracy_std", number_or_null(accuracy_std)},
            {"psnr_mean", number_or_null(psnr_mean)},
            {"psnr_std", number_or_null(psnr_std)},
            {"msssim_mean", number_or_null(msssim_mean)},
            {"msssim_std", number_or_null(msssim_std)},
            {"seeds", seeds},
            {"lineage", lineage}};
}

SweepResult SweepResult::from_json(const nlohmann::json& j) {
    SweepResult r;
    r.method = j.at("method").get<std::string>();
    r.snr_db = j.at("snr_db").get<double>();
    r.target_ratio = j.at("target_ratio").get<double>();
    r.achieved_ratio = j.at("achieved_ratio").get<double>();
    r.accuracy_mean = number_or_nan(j, "accuracy_mean");
    r.accuracy_std = number_or_nan(j, "accuracy_std");
    r.psnr_mean = number_or_nan(j, "psnr_mean");
    r.psnr_std = number_or_nan(j, "psnr_std");
    r.msssim_mean = number_or_nan(j, "msssim_mean");
    r.msssim_std = number_or_nan(j, "msssim_std");
    r.seeds = j.at("seeds").get<int64_t>();
    r.lineage = j.value("lineage", std::string{});
    return r;
}

std::string sweep_csv_header() {
    return "method,snr_db,target_ratio,achieved_ratio,accuracy_mean,accuracy_std,psnr_mean,"
           "psnr_std,msssim_mean,msssim_std,seeds";
}

std::string to_csv_row(const SweepResult& r) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << r.method << ',' << r.snr_db << ',' << r.target_ratio << ',' << r.achieved_ratio << ','
       << r.accuracy_mean << ',' << r.accuracy_std << ',' << r.psnr_mean << ',' << r.psnr_std
       << ',' << r.msssim_mean << ',' << r.msssim_std << ',' << r.seeds;
    return os.str();
}

SweepResult parse_csv_row(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
        fields.push_back(field);
    }
    if (fields.size() != 11) {
        throw LoadError("sweep CSV row has " + std::to_string(fields.size()) +
                        " fields, expected 11: " + line);
    }
    auto num = [&](size_t i) {
        const auto& f = fields[i];
        if (f == "nan" || f == "-nan") {
            return std::numeric_limits<double>::quiet_NaN();
        }
        try {
            return std::stod(f);
        } catch (const std::exception&) {
            throw LoadError("sweep CSV: bad number '" + f + "'");
        }
    };
    SweepResult r;
    r.method = fields[0];
    r.snr_db = num(1);
    r.target_ratio = num(2);
    r.achieved_ratio = num(3);
    r.accuracy_mean = num(4);
    r.accuracy_std = num(5);
    r.psnr_mean = num(6);
    r.psnr_std = num(7);
    r.msssim_mean = num(8);
    r.msssim_std = num(9);
    r.seeds = static_cast<int64_t>(num(10));
    return r;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepResult>& rows) {
    const fs::path p(path);
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw LoadError("cannot write " + path);
    }
    out << sweep_csv_header() << '\n';
    for (const auto& r : rows) {
        out << to_csv_row(r) << '\n';
    }
}

std::vector<SweepResult> read_sweep_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot read " + path);
    }
    std::string line;
    std::getline(in, line);
    if (line != sweep_csv_header()) {
        throw LoadError(path + ": unexpected CSV header");
    }
    std::vector<SweepResult> rows;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            rows.push_back(parse_csv_row(line));
        }
    }
    return rows;
}

// --- evaluate_system ------------------------------------------------------------------------

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) {
        return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    }
    double mean = 0.0;
    for (double x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) {
        var += (x - mean) * (x - mean);
    }
    const double denom = v.size() > 1 ? static_cast<double>(v.size() - 1) : 1.0;
    return {mean, std::sqrt(var / denom)};
}

}  // namespace

SweepResult evaluate_system(SystemModels& models, const Dataset& data, const NoiseModel& noise,
                            const EvaluationOptions& options) {
    if (options.noise_seeds < 1) {
        throw ConfigError("evaluation needs at least one noise seed");
    }
    if (data.size() == 0) {
        throw ConfigError("evaluation dataset is empty");
    }
    torch::NoGradGuard no_grad;
    models.codec.train(false);
    freeze_backbone(models.bundle);

    const bool labelled = data.has_labels() && !models.bundle.classifier.is_empty();
    auto& codec = models.codec;

    std::vector<double> accs, psnrs, msssims;
    bool msssim_ok = true;
    for (int64_t r = 0; r < options.noise_seeds; ++r) {
        NoiseModel realization = noise;
        realization.seed = noise.seed + static_cast<uint64_t>(r);
        AwgnChannel channel(realization);

        int64_t correct = 0;
        double psnr_sum = 0.0, msssim_sum = 0.0;
        auto run_batch = [&](const torch::Tensor& x, std::span<const int64_t> idx) {
            auto s = power_normalize(encode(codec.encoder, x), options.power);
            auto x_hat = decode(codec.decoder, codec.config, channel.transmit(s), x.size(2), x.size(3));
            psnr_sum += psnr_per_image(x, x_hat).sum().item<double>();
            if (msssim_ok) {
                try {
                    msssim_sum += ms_ssim_per_image(x, x_hat).sum().item<double>();
                } catch (const ShapeError&) {
                    msssim_ok = false;
                }
            }
            if (labelled) {
                auto logits = classify_logits(models.bundle, extract_features(models.bundle, x_hat));
                correct += logits.argmax(1).eq(data.labels(idx)).sum().item<int64_t>();
            }
        };

        std::vector<int64_t> idx;
        if (data.uniform_shape()) {
            for (int64_t start = 0; start < data.size(); start += options.batch_size) {
                const int64_t n = std::min(options.batch_size, data.size() - start);
                idx.resize(static_cast<size_t>(n));
                std::iota(idx.begin(), idx.end(), start);
                run_batch(data.images(idx), idx);
            }
        } else {
            for (int64_t i = 0; i < data.size(); ++i) {
                idx.assign(1, i);
                run_batch(data.image(i).unsqueeze(0), idx);
            }
        }
        const auto n = static_cast<double>(data.size());
        psnrs.push_back(psnr_sum / n);
        if (msssim_ok) {
            msssims.push_back(msssim_sum / n);
        }
        if (labelled) {
            accs.push_back(static_cast<double>(correct) / n);
        }
    }

    SweepResult result;
    result.snr_db = noise.snr_db;
    result.target_ratio = codec.config.target_ratio;
    result.achieved_ratio = codec.config.achieved_ratio().value();
    std::tie(result.psnr_mean, result.psnr_std) = mean_std(psnrs);
    if (msssim_ok) {
        std::tie(result.msssim_mean, result.msssim_std) = mean_std(msssims);
    }
    if (labelled) {
        std::tie(result.accuracy_mean, result.accuracy_std) = mean_std(accs);
    }
    result.seeds = options.noise_seeds;
    return result;
}

// --- sweep --------------------------------------------------------------------------------

std::string SweepCell::key() const {
    std::ostringstream os;
    os << method << "|snr=" << std::setprecision(17) << snr_db << "|ratio=" << target_ratio;
    return os.str();
}

std::vector<SweepCell> SweepGrid::cells() const {
    std::vector<SweepCell> out;
    for (const auto& m : methods) {
        for (double snr : snrs_db) {
            for (double ratio : ratios) {
                out.push_back(SweepCell{m, snr, ratio});
            }
        }
    }
    return out;
}

namespace {

std::string snr_tag(double snr_db) {
    std::ostringstream os;
    os << snr_db;
    auto s = os.str();
    std::replace(s.begin(), s.end(), '.', 'p');
    std::replace(s.begin(), s.end(), '-', 'm');
    return s;
}

}  // namespace

SweepOutcome run_sweep(const SweepGrid& grid, const std::string& out_dir, const CellRunner& runner) {
    const auto cells = grid.cells();
    if (cells.empty()) {
        throw ConfigError("sweep grid is empty (need at least one method, SNR and ratio)");
    }
    fs::create_directories(out_dir);
    const auto manifest_path = (fs::path(out_dir) / "manifest.json").string();

    nlohmann::json manifest = {{"completed", nlohmann::json::object()},
                               {"missing", nlohmann::json::object()}};
    if (fs::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        try {
            manifest = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(manifest_path + ": " + e.what());
        }
        manifest["missing"] = nlohmann::json::object();
    }
    auto flush = [&] {
        std::ofstream out(manifest_path + ".tmp", std::ios::trunc);
        out << manifest.dump(2) << '\n';
        out.close();
        fs::rename(manifest_path + ".tmp", manifest_path);
    };

    SweepOutcome outcome;
    for (const auto& cell : cells) {
        const auto key = cell.key();
        if (manifest["completed"].contains(key)) {
            outcome.rows.push_back(SweepResult::from_json(manifest["completed"][key]));
            continue;
        }
        try {
            auto result = runner(cell);
            result.method = cell.method;
            result.snr_db = cell.snr_db;
            result.target_ratio = cell.target_ratio;
            manifest["completed"][key] = result.to_json();
            outcome.rows.push_back(result);
        } catch (const MissingPrerequisiteError& e) {
            manifest["missing"][key] = e.what();
            outcome.missing.push_back(key);
        } catch (const LoadError& e) {
            manifest["missing"][key] = e.what();
            outcome.missing.push_back(key);
        }
        flush();
    }
    flush();

    outcome.csv_path = (fs::path(out_dir) / "sweep.csv").string();
    write_sweep_csv(outcome.csv_path, outcome.rows);

    std::set<double> snrs(grid.snrs_db.begin(), grid.snrs_db.end());
    for (double snr : snrs) {
        for (const char* metric : {"accuracy", "psnr"}) {
            const auto path =
                (fs::path(out_dir) / (std::string(metric) + "_snr" + snr_tag(snr) + "dB.svg")).string();
            write_metric_plot(path, outcome.rows, metric, snr);
            outcome.plots.push_back(path);
        }
    }
    return outcome;
}

// --- plotting -----------------------------------------------------------------------------

namespace {

double metric_value(const SweepResult& r, const std::string& metric) {
    if (metric == "accuracy") {
        return r.accuracy_mean * 100.0;
    }
    if (metric == "psnr") {
        return r.psnr_mean;
    }
    if (metric == "msssim") {
        return r.msssim_mean;
    }
    throw ConfigError("unknown plot metric '" + metric + "'");
}

std::string axis_label(const std::string& metric) {
    if (metric == "accuracy") {
        return "Accuracy (%)";
    }
    if (metric == "psnr") {
        return "PSNR (dB)";
    }
    return "MS-SSIM";
}

}  // namespace

void write_metric_plot(const std::string& path, const std::vector<SweepResult>& rows,
                       const std::string& metric, double snr_db) {
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    for (const auto& r : rows) {
        if (r.snr_db != snr_db) {
            continue;
        }
        const double y = metric_value(r, metric);
        if (std::isfinite(y)) {
            series[r.method].emplace_back(r.achieved_ratio, y);
        }
    }

    constexpr double kW = 640, kH = 420, kLeft = 70, kRight = 160, kTop = 40, kBottom = 60;
    const double plot_w = kW - kLeft - kRight;
    const double plot_h = kH - kTop - kBottom;

    double x_min = 1e9, x_max = -1e9, y_min = 1e9, y_max = -1e9;
    for (auto& [name, pts] : series) {
        std::sort(pts.begin(), pts.end());
        for (auto [x, y] : pts) {
            x_min = std::min(x_min, x);
            x_max = std::max(x_max, x);
            y_min = std::min(y_min, y);
            y_max = std::max(y_max, y);
        }
    }
    if (series.empty()) {
        x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
    }
    if (x_max - x_min < 1e-12) {
        x_min -= 0.01, x_max += 0.01;
    }
    const double y_pad = std::max(1e-6, 0.08 * (y_max - y_min));
    y_min -= y_pad;
    y_max += y_pad;

    auto sx = [&](double x) { return kLeft + (x - x_min) / (x_max - x_min) * plot_w; };
    auto sy = [&](double y) { return kTop + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h; };

    static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

    std::ostringstream svg;
    svg << std::fixed << std::setprecision(2);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
        << axis_label(metric) << " vs bandwidth ratio, SNR = " << snr_db << " dB</text>\n";
    svg << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << plot_w << "\" height=\""
        << plot_h << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = x_min + (x_max - x_min) * i / 4.0;
        const double yv = y_min + (y_max - y_min) * i / 4.0;
        svg << "<text x=\"" << sx(xv) << "\" y=\"" << kTop + plot_h + 18
            << "\" text-anchor=\"middle\">" << std::setprecision(3) << xv << "</text>\n";
        svg << "<text x=\"" << kLeft - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">"
            << yv << "</text>\n";
        svg << std::setprecision(2);
        svg << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + plot_w << "\" y1=\"" << sy(yv)
            << "\" y2=\"" << sy(yv) << "\" stroke=\"#dddddd\"/>\n";
    }
    svg << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kH - 16
        << "\" text-anchor=\"middle\">k/n</text>\n";
    svg << "<text transform=\"translate(18," << kTop + plot_h / 2
        << ") rotate(-90)\" text-anchor=\"middle\">" << axis_label(metric) << "</text>\n";

    size_t index = 0;
    for (const auto& [name, pts] : series) {
        const char* colour = colours[index % std::size(colours)];
        svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (auto [x, y] : pts) {
            svg << sx(x) << ',' << sy(y) << ' ';
        }
        svg << "\"/>\n";
        for (auto [x, y] : pts) {
            svg << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"3.5\" fill=\"" << colour
                << "\"/>\n";
        }
        const double ly = kTop + 16 + 18.0 * static_cast<double>(index);
        svg << "<line x1=\"" << kW - kRight + 12 << "\" x2=\"" << kW - kRight + 36 << "\" y1=\"" << ly
            << "\" y2=\"" << ly << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << kW - kRight + 42 << "\" y=\"" << ly + 4 << "\">" << name << "</text>\n";
        ++index;
    }
    svg << "</svg>\n";

    const fs::path p(path);
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw LoadError("cannot write plot " + path);
    }
    out << svg.str();
}

}  // namespace semcom

#include "semcom/channel.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <ATen/CPUGeneratorImpl.h>

#include "semcom/errors.hpp"

namespace semcom {

NoiseModel NoiseModel::from_snr(double snr_db, double power, uint64_t seed) {
    return NoiseModel{snr_db, snr_to_sigma2(snr_db, power), seed};
}

NoiseModel NoiseModel::noiseless(uint64_t seed) {
    return NoiseModel{std::numeric_limits<double>::infinity(), 0.0, seed};
}

double snr_to_sigma2(double snr_db, double power) {
    if (!(power > 0.0)) {
        throw ConfigError("power budget must be positive, got " + std::to_string(power));
    }
    return power * std::pow(10.0, -snr_db / 10.0);
}

namespace {

void check_symbol_layout(const torch::Tensor& t, const char* what) {
    if (t.dim() < 2 || t.size(-1) != 2) {
        throw ShapeError(std::string(what) + ": expected (..., k, 2) real/imag pairs, got " +
                         c10::str(t.sizes()));
    }
    if (t.size(-2) < 1) {
        throw ShapeError(std::string(what) + ": need at least one symbol");
    }
}

}  // namespace

torch::Tensor average_power(const torch::Tensor& symbols) {
    check_symbol_layout(symbols, "average_power");
    return symbols.pow(2).sum({-2, -1}) / static_cast<double>(symbols.size(-2));
}

ChannelSymbols power_normalize(const torch::Tensor& s_tilde, double power) {
    if (!(power > 0.0)) {
        throw ConfigError("power budget must be positive, got " + std::to_string(power));
    }
    check_symbol_layout(s_tilde, "power_normalize");

    const int64_t k = s_tilde.size(-2);
    auto energy = s_tilde.pow(2).sum({-2, -1}, /*keepdim=*/true);
    if ((energy <= 0).any().item<bool>()) {
        throw DegenerateInputError("power_normalize: zero-norm channel input cannot be normalized");
    }
    auto scaled = s_tilde * (std::sqrt(static_cast<double>(k) * power) * energy.rsqrt());
    return ChannelSymbols{scaled, k, power};
}

torch::Tensor pack_symbols(const torch::Tensor& features) {
    if (features.dim() != 4) {
        throw ShapeError("pack_symbols: expected (B, C, H, W), got " + c10::str(features.sizes()));
    }
    const int64_t per_image = features.size(1) * features.size(2) * features.size(3);
    if (per_image % 2 != 0) {
        throw ShapeError("pack_symbols: odd number of real values per image (" +
                         std::to_string(per_image) + ")");
    }
    return features.reshape({features.size(0), per_image / 2, 2});
}

torch::Tensor unpack_symbols(const torch::Tensor& symbols, int64_t channels, int64_t height,
                             int64_t width) {
    check_symbol_layout(symbols, "unpack_symbols");
    if (symbols.dim() != 3 || symbols.size(1) * 2 != channels * height * width) {
        throw ShapeError("unpack_symbols: " + c10::str(symbols.sizes()) +
                         " does not hold a feature map of " + std::to_string(channels) + "x" +
                         std::to_string(height) + "x" + std::to_string(width));
    }
    return symbols.reshape({symbols.size(0), channels, height, width});
}

AwgnChannel::AwgnChannel(NoiseModel noise)
    : noise_(noise), generator_(at::make_generator<at::CPUGeneratorImpl>(noise.seed)) {
    if (!(noise_.sigma2 >= 0.0)) {
        throw ConfigError("noise variance must be non-negative");
    }
}

void AwgnChannel::reseed(uint64_t seed) {
    noise_.seed = seed;
    generator_ = at::make_generator<at::CPUGeneratorImpl>(seed);
}

torch::Tensor AwgnChannel::sample_noise(const torch::Tensor& like) {
    auto eps = at::randn(like.sizes(), generator_, like.options().requires_grad(false));
    return eps * std::sqrt(noise_.sigma2 / 2.0);
}

torch::Tensor AwgnChannel::transmit(const torch::Tensor& symbols) {
    check_symbol_layout(symbols, "awgn_transmit");
    if (noise_.sigma2 == 0.0) {
        return symbols;
    }
    torch::Tensor eps;
    {
        torch::NoGradGuard no_grad;
        eps = sample_noise(symbols);
    }
    return symbols + eps;
}

torch::Tensor AwgnChannel::transmit(const ChannelSymbols& s) {
    return transmit(s.values);
}

}  // namespace semcom

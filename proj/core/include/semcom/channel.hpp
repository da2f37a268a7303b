#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace semcom {

/// Complex channel symbols stored as (..., k, 2) real tensors: [..., i, 0] is the
/// real part and [..., i, 1] the imaginary part of symbol i. A leading batch
/// dimension is allowed; normalization and power bookkeeping are per vector.
struct ChannelSymbols {
    torch::Tensor values;
    int64_t k = 0;
    double power = 1.0;
};

struct NoiseModel {
    double snr_db = 0.0;
    double sigma2 = 0.0;  // per complex symbol; real and imaginary parts each get sigma2 / 2
    uint64_t seed = 0;

    static NoiseModel from_snr(double snr_db, double power, uint64_t seed);
    static NoiseModel noiseless(uint64_t seed = 0);
};

/// Scales each vector to average power `power` per complex symbol:
/// s = sqrt(k P) * s_tilde / ||s_tilde||.
/// Throws DegenerateInputError on a zero-norm vector, ConfigError when power <= 0.
ChannelSymbols power_normalize(const torch::Tensor& s_tilde, double power);

/// sigma^2 = P * 10^(-snr_db / 10).
double snr_to_sigma2(double snr_db, double power);

/// Mean of |s_i|^2 over symbols, one entry per vector.
torch::Tensor average_power(const torch::Tensor& symbols);

/// Packs a real feature tensor (B, C, H, W) into (B, k, 2) symbols, pairing adjacent values.
/// C * H * W must be even.
torch::Tensor pack_symbols(const torch::Tensor& features);

/// Inverse of pack_symbols for the given per-image feature shape (C, H, W).
torch::Tensor unpack_symbols(const torch::Tensor& symbols, int64_t channels, int64_t height,
                             int64_t width);

/// AWGN channel with its own seeded generator. Not thread-safe; give each worker its own
/// instance seeded with base_seed + worker_index.
class AwgnChannel {
public:
    explicit AwgnChannel(NoiseModel noise);

    /// s_hat = s + eps, eps ~ CN(0, sigma2 I). Gradients pass straight through to s.
    torch::Tensor transmit(const ChannelSymbols& s);
    torch::Tensor transmit(const torch::Tensor& symbols);

    /// Draws a noise tensor shaped like `like` without adding it to anything.
    torch::Tensor sample_noise(const torch::Tensor& like);

    void reseed(uint64_t seed);
    const NoiseModel& noise() const noexcept { return noise_; }

private:
    NoiseModel noise_;
    at::Generator generator_;
};

}  // namespace semcom

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>

#include <torch/torch.h>

namespace semcom {

/// Exact rational number, used to report achieved bandwidth compression ratios.
struct Ratio {
    int64_t num = 1;
    int64_t den = 1;

    double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
    std::string str() const;

    static Ratio reduced(int64_t num, int64_t den);
};

/// Parses "1/48", "1/2.5" or "0.25" into a real ratio. Throws ConfigError on bad text.
double parse_ratio(const std::string& text);

/// Formats a ratio as "1/x" when that is exact to 6 digits, otherwise as a decimal.
std::string format_ratio(double ratio);

struct CodecConfig {
    int64_t base_width = 32;
    double target_ratio = 1.0 / 6.0;
    int64_t image_channels = 3;

    /// Real channels emitted by the channel-coding convolution: the even value nearest to
    /// 2 * target_ratio * 16 * c, clamped to at least 2.
    int64_t latent_channels() const;

    /// k / n = c_out / (32 c), exact.
    Ratio achieved_ratio() const;

    /// Complex symbols per image of the given spatial size.
    int64_t symbols_for(int64_t height, int64_t width) const;

    /// Set when the latent width had to be clamped or the target ratio is not realizable.
    std::optional<std::string> warning() const;

    void validate() const;
};

class ResBlockImpl : public torch::nn::Module {
public:
    explicit ResBlockImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
    torch::nn::PReLU act1_{nullptr}, act2_{nullptr};
};
TORCH_MODULE(ResBlock);

class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const CodecConfig& config);

    /// (B, c, h, w) -> (B, c_out, h/4, w/4) real feature map.
    torch::Tensor forward(const torch::Tensor& x);

    int64_t latent_channels() const noexcept { return latent_channels_; }

private:
    int64_t latent_channels_;
    torch::nn::Sequential head_{nullptr};
    torch::nn::Sequential down1_{nullptr}, down2_{nullptr};
    torch::nn::Conv2d channel_coding_{nullptr};
};
TORCH_MODULE(Encoder);

class DecoderImpl : public torch::nn::Module {
public:
    explicit DecoderImpl(const CodecConfig& config);

    /// (B, c_out, h/4, w/4) -> (B, c, h, w) with values in [0, 1].
    torch::Tensor forward(const torch::Tensor& z);

private:
    torch::nn::Sequential head_{nullptr};
    torch::nn::Sequential up1_{nullptr}, up2_{nullptr};
    torch::nn::Conv2d recode_{nullptr};
};
TORCH_MODULE(Decoder);

struct SemanticCodec {
    CodecConfig config;
    Encoder encoder{nullptr};
    Decoder decoder{nullptr};

    void train(bool on = true);
    void to(torch::Dtype dtype);
    std::vector<torch::Tensor> parameters() const;
};

SemanticCodec build_codec(const CodecConfig& config);

/// Emits s_tilde as (B, k, 2) complex symbols. Accepts (c, h, w) or (B, c, h, w);
/// h and w must be multiples of 4.
torch::Tensor encode(Encoder& encoder, const torch::Tensor& x);

/// Reconstructs (B, c, h, w) images from received symbols (B, k, 2).
torch::Tensor decode(Decoder& decoder, const CodecConfig& config, const torch::Tensor& s_hat,
                     int64_t height, int64_t width);

/// Throws ShapeError naming the padding needed when h or w is not a multiple of 4.
void check_spatial_dims(int64_t height, int64_t width);

}  // namespace semcom

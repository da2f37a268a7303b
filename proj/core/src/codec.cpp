#include "semcom/codec.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "semcom/channel.hpp"
#include "semcom/errors.hpp"

namespace semcom {

Ratio Ratio::reduced(int64_t num, int64_t den) {
    if (den <= 0) {
        throw ConfigError("ratio denominator must be positive");
    }
    const int64_t g = std::gcd(num, den);
    return Ratio{num / g, den / g};
}

std::string Ratio::str() const {
    return std::to_string(num) + "/" + std::to_string(den);
}

double parse_ratio(const std::string& text) {
    auto parse_number = [&](const std::string& part) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(part, &used);
        } catch (const std::exception&) {
            throw ConfigError("not a ratio: '" + text + "'");
        }
        if (used != part.size()) {
            throw ConfigError("not a ratio: '" + text + "'");
        }
        return v;
    };
    const auto slash = text.find('/');
    double value = 0.0;
    if (slash == std::string::npos) {
        value = parse_number(text);
    } else {
        const double den = parse_number(text.substr(slash + 1));
        if (den == 0.0) {
            throw ConfigError("ratio has zero denominator: '" + text + "'");
        }
        value = parse_number(text.substr(0, slash)) / den;
    }
    if (!(value > 0.0) || value > 1.0) {
        throw ConfigError("bandwidth ratio must lie in (0, 1], got '" + text + "'");
    }
    return value;
}

std::string format_ratio(double ratio) {
    std::ostringstream os;
    const double inv = 1.0 / ratio;
    const double rounded = std::round(inv * 1000.0) / 1000.0;
    if (std::abs(inv - rounded) < 1e-6 * inv) {
        os << "1/" << rounded;
    } else {
        os << ratio;
    }
    return os.str();
}

void CodecConfig::validate() const {
    if (base_width < 1) {
        throw ConfigError("codec.base_width must be positive");
    }
    if (image_channels < 1) {
        throw ConfigError("codec.image_channels must be positive");
    }
    if (!(target_ratio > 0.0) || target_ratio > 1.0) {
        throw ConfigError("codec.target_ratio must lie in (0, 1]");
    }
}

int64_t CodecConfig::latent_channels() const {
    const double real_channels = 2.0 * target_ratio * 16.0 * static_cast<double>(image_channels);
    const auto even = 2 * static_cast<int64_t>(std::llround(real_channels / 2.0));
    return std::max<int64_t>(2, even);
}

Ratio CodecConfig::achieved_ratio() const {
    return Ratio::reduced(latent_channels(), 32 * image_channels);
}

int64_t CodecConfig::symbols_for(int64_t height, int64_t width) const {
    check_spatial_dims(height, width);
    return (height / 4) * (width / 4) * latent_channels() / 2;
}

std::optional<std::string> CodecConfig::warning() const {
    const double raw = 2.0 * target_ratio * 16.0 * static_cast<double>(image_channels);
    const double achieved = achieved_ratio().value();
    std::ostringstream os;
    if (raw < 2.0 - 1e-9) {
        os << "target ratio " << format_ratio(target_ratio)
           << " needs fewer than 2 latent channels; clamped to 2 (achieved "
           << achieved_ratio().str() << ")";
        return os.str();
    }
    if (std::abs(achieved - target_ratio) > 1e-9 * target_ratio) {
        os << "target ratio " << format_ratio(target_ratio) << " is not realizable; achieved "
           << achieved_ratio().str() << " = " << format_ratio(achieved);
        return os.str();
    }
    return std::nullopt;
}

void check_spatial_dims(int64_t height, int64_t width) {
    if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0) {
        const int64_t pad_h = (4 - height % 4) % 4;
        const int64_t pad_w = (4 - width % 4) % 4;
        throw ShapeError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                         " must be a multiple of 4 in both dimensions; pad by " +
                         std::to_string(pad_h) + " rows and " + std::to_string(pad_w) +
                         " columns");
    }
}

namespace {

namespace nn = torch::nn;

nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

nn::PReLU prelu() {
    return nn::PReLU(nn::PReLUOptions().init(0.25));
}

nn::Sequential conv_bn_act(int64_t in, int64_t out, int64_t kernel, int64_t stride,
                           int64_t padding) {
    return nn::Sequential(conv(in, out, kernel, stride, padding), nn::BatchNorm2d(out), prelu());
}

}  // namespace

ResBlockImpl::ResBlockImpl(int64_t channels) {
    conv1_ = register_module("conv1", conv(channels, channels, 3, 1, 1));
    bn1_ = register_module("bn1", nn::BatchNorm2d(channels));
    act1_ = register_module("act1", prelu());
    conv2_ = register_module("conv2", conv(channels, channels, 3, 1, 1));
    bn2_ = register_module("bn2", nn::BatchNorm2d(channels));
    act2_ = register_module("act2", prelu());
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
    auto y = act1_(bn1_(conv1_(x)));
    y = bn2_(conv2_(y));
    return act2_(y + x);
}

EncoderImpl::EncoderImpl(const CodecConfig& config) : latent_channels_(config.latent_channels()) {
    config.validate();
    const int64_t w = config.base_width;
    head_ = register_module("head", conv_bn_act(config.image_channels, w, 5, 1, 2));

    auto downsampling = [&](int64_t in, int64_t out) {
        return nn::Sequential(ResBlock(in), conv(in, out, 4, 2, 1), nn::BatchNorm2d(out),
                              prelu());
    };
    down1_ = register_module("down1", downsampling(w, 2 * w));
    down2_ = register_module("down2", downsampling(2 * w, 4 * w));

    channel_coding_ = register_module("channel_coding", conv(4 * w, latent_channels_, 3, 1, 1));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) {
    return channel_coding_(down2_->forward(down1_->forward(head_->forward(x))));
}

DecoderImpl::DecoderImpl(const CodecConfig& config) {
    config.validate();
    const int64_t w = config.base_width;
    head_ = register_module("head", conv_bn_act(config.latent_channels(), 4 * w, 5, 1, 2));

    auto upsampling = [&](int64_t in, int64_t out) {
        return nn::Sequential(ResBlock(in), conv(in, 4 * out, 3, 1, 1),
                              nn::PixelShuffle(nn::PixelShuffleOptions(2)), nn::BatchNorm2d(out),
                              prelu());
    };
    up1_ = register_module("up1", upsampling(4 * w, 2 * w));
    up2_ = register_module("up2", upsampling(2 * w, w));
    recode_ = register_module("recode", conv(w, config.image_channels, 3, 1, 1));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& z) {
    return torch::sigmoid(recode_(up2_->forward(up1_->forward(head_->forward(z)))));
}

void SemanticCodec::train(bool on) {
    encoder->train(on);
    decoder->train(on);
}

void SemanticCodec::to(torch::Dtype dtype) {
    encoder->to(dtype);
    decoder->to(dtype);
}

std::vector<torch::Tensor> SemanticCodec::parameters() const {
    auto params = encoder->parameters();
    auto dec = decoder->parameters();
    params.insert(params.end(), dec.begin(), dec.end());
    return params;
}

SemanticCodec build_codec(const CodecConfig& config) {
    config.validate();
    return SemanticCodec{config, Encoder(config), Decoder(config)};
}

torch::Tensor encode(Encoder& encoder, const torch::Tensor& x) {
    auto batch = x.dim() == 3 ? x.unsqueeze(0) : x;
    if (batch.dim() != 4) {
        throw ShapeError("encode: expected (c, h, w) or (B, c, h, w), got " +
                         c10::str(x.sizes()));
    }
    check_spatial_dims(batch.size(2), batch.size(3));
    return pack_symbols(encoder->forward(batch));
}

torch::Tensor decode(Decoder& decoder, const CodecConfig& config, const torch::Tensor& s_hat,
                     int64_t height, int64_t width) {
    check_spatial_dims(height, width);
    auto batch = s_hat.dim() == 2 ? s_hat.unsqueeze(0) : s_hat;
    const int64_t expected = config.symbols_for(height, width);
    if (batch.dim() != 3 || batch.size(1) != expected || batch.size(2) != 2) {
        throw ShapeError("decode: " + c10::str(s_hat.sizes()) + " is inconsistent with " +
                         std::to_string(expected) + " symbols for a " + std::to_string(height) +
                         "x" + std::to_string(width) + " image");
    }
    auto z = unpack_symbols(batch, config.latent_channels(), height / 4, width / 4);
    return decoder->forward(z);
}

}  // namespace semcom

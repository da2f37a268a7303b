#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <torch/torch.h>

namespace semcom {

class Dataset;

/// CIFAR-style basic block; the shortcut zero-pads channels and subsamples spatially when
/// the shape changes, so it carries no parameters.
class BasicBlockImpl : public torch::nn::Module {
public:
    BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
    torch::Tensor forward(const torch::Tensor& x);

private:
    int64_t in_channels_, out_channels_, stride_;
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(BasicBlock);

/// ResNet-(6n+2) for 32x32 inputs up to the pre-pooling feature map: (B, 3, H, W) ->
/// (B, 64, H/4, W/4). Depth 56 is the standard ResNet-56.
class BackboneImpl : public torch::nn::Module {
public:
    explicit BackboneImpl(int64_t depth = 56);
    torch::Tensor forward(const torch::Tensor& x);

    int64_t depth() const noexcept { return depth_; }
    static constexpr int64_t kFeatureChannels = 64;

private:
    int64_t depth_;
    torch::nn::Conv2d stem_{nullptr};
    torch::nn::BatchNorm2d stem_bn_{nullptr};
    torch::nn::Sequential stages_{nullptr};
};
TORCH_MODULE(Backbone);

/// Global average pooling followed by a linear layer.
class ClassifierImpl : public torch::nn::Module {
public:
    ClassifierImpl(int64_t feature_channels, int64_t num_classes);
    torch::Tensor forward(const torch::Tensor& features);  // logits

private:
    torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(Classifier);

struct BackboneBundle {
    Backbone backbone{nullptr};
    Classifier classifier{nullptr};
    int64_t feature_channels = BackboneImpl::kFeatureChannels;
    int64_t num_classes = 10;
    std::optional<double> measured_accuracy;
    std::string provenance;
    std::string checkpoint_hash;
};

BackboneBundle build_bundle(int64_t depth = 56, int64_t num_classes = 10);

/// Loads a backbone checkpoint written by save_bundle. When `test_set` is given, measures
/// clean top-1 accuracy and records it; falling below `accuracy_floor` only logs a warning.
BackboneBundle load_backbone(const std::string& checkpoint_path, double accuracy_floor = 0.92,
                             const Dataset* test_set = nullptr);

void save_bundle(const BackboneBundle& bundle, const std::string& path,
                 const std::string& provenance);

/// Puts the bundle in inference mode and disables gradients on the backbone parameters.
/// Gradients still flow through the backbone to its input.
void freeze_backbone(BackboneBundle& bundle);

/// Applies the backbone's per-channel input standardization to [0, 1] images, then runs it.
torch::Tensor extract_features(BackboneBundle& bundle, const torch::Tensor& images);

/// Class probabilities (B, N_cls).
torch::Tensor classify(BackboneBundle& bundle, const torch::Tensor& features);
torch::Tensor classify_logits(BackboneBundle& bundle, const torch::Tensor& features);

/// Top-1 predictions on clean images, evaluated in batches without gradients.
torch::Tensor predict_labels(BackboneBundle& bundle, const torch::Tensor& images,
                             int64_t batch_size = 256);

/// Clean top-1 accuracy of the bundle on a labelled dataset.
double measure_accuracy(BackboneBundle& bundle, const Dataset& data, int64_t batch_size = 256);

struct PretrainOptions {
    int64_t depth = 56;
    int64_t epochs = 164;
    int64_t batch_size = 128;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    bool augment = true;  // pad-4 random crop and horizontal flip
    uint64_t seed = 0;
    std::string log_path;  // JSONL, one line per epoch; empty disables
};

/// SGD training of backbone and classifier with cross-entropy; lr drops 10x at 50% and 75%
/// of the epochs. Returns the trained bundle, frozen.
BackboneBundle pretrain_backbone(const Dataset& train, const PretrainOptions& options,
                                 const Dataset* test_set = nullptr);

}  // namespace semcom

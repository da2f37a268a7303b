#include "semcom/downstream.hpp"

#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "semcom/data_io.hpp"
#include "semcom/errors.hpp"

namespace semcom {

namespace nn = torch::nn;

namespace {

// CIFAR-10 training-set channel statistics.
constexpr double kMean[3] = {0.4914, 0.4822, 0.4465};
constexpr double kStd[3] = {0.2470, 0.2435, 0.2616};

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

}  // namespace

BasicBlockImpl::BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride)
    : in_channels_(in_channels), out_channels_(out_channels), stride_(stride) {
    conv1_ = register_module("conv1", conv3x3(in_channels, out_channels, stride));
    bn1_ = register_module("bn1", nn::BatchNorm2d(out_channels));
    conv2_ = register_module("conv2", conv3x3(out_channels, out_channels, 1));
    bn2_ = register_module("bn2", nn::BatchNorm2d(out_channels));
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1_(conv1_(x)));
    y = bn2_(conv2_(y));
    auto shortcut = x;
    if (stride_ != 1 || in_channels_ != out_channels_) {
        namespace F = torch::nn::functional;
        using torch::indexing::None;
        using torch::indexing::Slice;
        shortcut = x.index({Slice(), Slice(), Slice(None, None, stride_), Slice(None, None, stride_)});
        const int64_t pad = out_channels_ - in_channels_;
        shortcut = F::pad(shortcut, F::PadFuncOptions({0, 0, 0, 0, pad / 2, pad - pad / 2}));
    }
    return torch::relu(y + shortcut);
}

BackboneImpl::BackboneImpl(int64_t depth) : depth_(depth) {
    if (depth < 8 || (depth - 2) % 6 != 0) {
        throw ConfigError("backbone depth must be 6n+2 with n >= 1 (e.g. 20, 32, 56), got " +
                          std::to_string(depth));
    }
    const int64_t blocks = (depth - 2) / 6;
    stem_ = register_module("stem", conv3x3(3, 16, 1));
    stem_bn_ = register_module("stem_bn", nn::BatchNorm2d(16));
    stages_ = nn::Sequential();
    int64_t in = 16;
    for (int64_t width : {16, 32, 64}) {
        for (int64_t b = 0; b < blocks; ++b) {
            const int64_t stride = (b == 0 && width != 16) ? 2 : 1;
            stages_->push_back(BasicBlock(in, width, stride));
            in = width;
        }
    }
    stages_ = register_module("stages", stages_);
    for (auto& m : modules(/*include_self=*/false)) {
        if (auto* c = m->as<nn::Conv2d>()) {
            nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanOut, torch::kReLU);
        }
    }
}

torch::Tensor BackboneImpl::forward(const torch::Tensor& x) {
    return stages_->forward(torch::relu(stem_bn_(stem_(x))));
}

ClassifierImpl::ClassifierImpl(int64_t feature_channels, int64_t num_classes) {
    fc_ = register_module("fc", nn::Linear(feature_channels, num_classes));
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& features) {
    return fc_(features.mean({2, 3}));
}

BackboneBundle build_bundle(int64_t depth, int64_t num_classes) {
    BackboneBundle bundle;
    bundle.backbone = Backbone(depth);
    bundle.classifier = Classifier(BackboneImpl::kFeatureChannels, num_classes);
    bundle.num_classes = num_classes;
    return bundle;
}

void freeze_backbone(BackboneBundle& bundle) {
    bundle.backbone->eval();
    bundle.classifier->eval();
    for (auto& p : bundle.backbone->parameters()) {
        p.set_requires_grad(false);
    }
}

torch::Tensor extract_features(BackboneBundle& bundle, const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 3) {
        throw ShapeError("extract_features expects (B, 3, H, W) images, got " +
                         c10::str(images.sizes()));
    }
    auto opts = images.options().requires_grad(false);
    auto mean = torch::tensor({kMean[0], kMean[1], kMean[2]}, opts).view({1, 3, 1, 1});
    auto std = torch::tensor({kStd[0], kStd[1], kStd[2]}, opts).view({1, 3, 1, 1});
    return bundle.backbone->forward((images - mean) / std);
}

torch::Tensor classify_logits(BackboneBundle& bundle, const torch::Tensor& features) {
    if (features.dim() != 4 || features.size(1) != bundle.feature_channels) {
        throw ShapeError("classify expects (B, " + std::to_string(bundle.feature_channels) +
                         ", H, W) features, got " + c10::str(features.sizes()));
    }
    return bundle.classifier->forward(features);
}

torch::Tensor classify(BackboneBundle& bundle, const torch::Tensor& features) {
    return torch::softmax(classify_logits(bundle, features), 1);
}

torch::Tensor predict_labels(BackboneBundle& bundle, const torch::Tensor& images,
                             int64_t batch_size) {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    for (int64_t start = 0; start < images.size(0); start += batch_size) {
        auto chunk = images.narrow(0, start, std::min(batch_size, images.size(0) - start));
        out.push_back(classify_logits(bundle, extract_features(bundle, chunk)).argmax(1));
    }
    return torch::cat(out);
}

double measure_accuracy(BackboneBundle& bundle, const Dataset& data, int64_t batch_size) {
    if (!data.has_labels() || data.size() == 0) {
        throw ConfigError("accuracy needs a non-empty labelled dataset");
    }
    const bool was_training = bundle.backbone->is_training();
    bundle.backbone->eval();
    bundle.classifier->eval();
    torch::NoGradGuard no_grad;
    int64_t correct = 0;
    std::vector<int64_t> idx;
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        const int64_t n = std::min(batch_size, data.size() - start);
        idx.resize(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), start);
        auto pred = predict_labels(bundle, data.images(idx), batch_size);
        correct += pred.eq(data.labels(idx)).sum().item<int64_t>();
    }
    bundle.backbone->train(was_training);
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

void save_bundle(const BackboneBundle& bundle, const std::string& path,
                 const std::string& provenance) {
    Checkpoint ck;
    ck.metadata["kind"] = "backbone";
    ck.metadata["architecture"] = "cifar-resnet";
    ck.metadata["depth"] = bundle.backbone->depth();
    ck.metadata["num_classes"] = bundle.num_classes;
    ck.metadata["feature_channels"] = bundle.feature_channels;
    ck.metadata["provenance"] = provenance;
    if (bundle.measured_accuracy) {
        ck.metadata["measured_accuracy"] = *bundle.measured_accuracy;
    }
    ck.metadata["backbone_hash"] = module_hash(*bundle.backbone);
    ck.put_module("backbone", *bundle.backbone);
    ck.put_module("classifier", *bundle.classifier);
    save_checkpoint(ck, path);
}

BackboneBundle load_backbone(const std::string& checkpoint_path, double accuracy_floor,
                             const Dataset* test_set) {
    auto ck = load_checkpoint(checkpoint_path);
    if (ck.metadata.value("kind", std::string{}) != "backbone") {
        throw LoadError(checkpoint_path + " is not a backbone checkpoint");
    }
    const auto depth = ck.metadata.value("depth", int64_t{56});
    const auto num_classes = ck.metadata.value("num_classes", int64_t{10});
    auto bundle = build_bundle(depth, num_classes);
    try {
        ck.get_module("backbone", *bundle.backbone);
        ck.get_module("classifier", *bundle.classifier);
    } catch (const IncompatibleError& e) {
        throw LoadError(checkpoint_path + ": topology mismatch: " + e.what());
    }
    bundle.provenance = ck.metadata.value("provenance", std::string{});
    bundle.checkpoint_hash = ck.content_hash;
    if (ck.metadata.contains("measured_accuracy")) {
        bundle.measured_accuracy = ck.metadata["measured_accuracy"].get<double>();
    }
    freeze_backbone(bundle);

    if (test_set != nullptr) {
        bundle.measured_accuracy = measure_accuracy(bundle, *test_set);
        if (*bundle.measured_accuracy < accuracy_floor) {
            std::cerr << "warning: backbone " << checkpoint_path << " reaches "
                      << *bundle.measured_accuracy << " clean accuracy on " << test_set->name()
                      << "/" << test_set->split() << ", below the floor " << accuracy_floor
                      << '\n';
            bundle.provenance += " [below accuracy floor]";
        }
    }
    return bundle;
}

namespace {

torch::Tensor augment_batch(const torch::Tensor& x, std::mt19937_64& rng) {
    const auto h = x.size(2);
    const auto w = x.size(3);
    auto padded = torch::constant_pad_nd(x, {4, 4, 4, 4}, 0.0);
    auto out = torch::empty_like(x);
    std::uniform_int_distribution<int64_t> shift(0, 8);
    std::bernoulli_distribution flip(0.5);
    for (int64_t i = 0; i < x.size(0); ++i) {
        const auto dy = shift(rng);
        const auto dx = shift(rng);
        auto crop = padded[i].slice(1, dy, dy + h).slice(2, dx, dx + w);
        out[i].copy_(flip(rng) ? crop.flip({2}) : crop);
    }
    return out;
}

}  // namespace

BackboneBundle pretrain_backbone(const Dataset& train, const PretrainOptions& options,
                                 const Dataset* test_set) {
    if (!train.has_labels() || !train.uniform_shape()) {
        throw ConfigError("backbone pretraining needs a labelled uniform-shape dataset");
    }
    if (options.epochs < 1 || options.batch_size < 1 || !(options.lr > 0.0)) {
        throw ConfigError("pretraining epochs, batch_size and lr must be positive");
    }
    torch::manual_seed(options.seed);
    auto bundle = build_bundle(options.depth);
    std::vector<torch::Tensor> params = bundle.backbone->parameters();
    for (auto& p : bundle.classifier->parameters()) {
        params.push_back(p);
    }
    torch::optim::SGD sgd(params, torch::optim::SGDOptions(options.lr)
                                      .momentum(options.momentum)
                                      .weight_decay(options.weight_decay));
    std::mt19937_64 rng(options.seed ^ 0x5eedULL);
    std::ofstream log;
    if (!options.log_path.empty()) {
        log.open(options.log_path, std::ios::app);
    }

    for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
        double lr = options.lr;
        if (epoch >= options.epochs / 2) lr *= 0.1;
        if (epoch >= options.epochs * 3 / 4) lr *= 0.1;
        for (auto& group : sgd.param_groups()) {
            static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
        }
        bundle.backbone->train();
        bundle.classifier->train();
        const auto order = train.epoch_order(options.seed, epoch);
        double loss_sum = 0.0;
        int64_t steps = 0;
        for (size_t start = 0; start < order.size(); start += options.batch_size) {
            const auto end = std::min(order.size(), start + static_cast<size_t>(options.batch_size));
            std::span<const int64_t> idx(order.data() + start, end - start);
            auto x = train.images(idx);
            if (options.augment) {
                x = augment_batch(x, rng);
            }
            auto logits = classify_logits(bundle, extract_features(bundle, x));
            auto loss = torch::nn::functional::cross_entropy(logits, train.labels(idx));
            sgd.zero_grad();
            loss.backward();
            sgd.step();
            loss_sum += loss.item<double>();
            ++steps;
        }
        nlohmann::json rec = {{"epoch", epoch}, {"lr", lr}, {"loss", loss_sum / steps}};
        if (test_set != nullptr) {
            rec["test_accuracy"] = measure_accuracy(bundle, *test_set);
        }
        if (log) {
            log << rec.dump() << '\n' << std::flush;
        }
        std::cerr << rec.dump() << '\n';
    }
    freeze_backbone(bundle);
    if (test_set != nullptr) {
        bundle.measured_accuracy = measure_accuracy(bundle, *test_set);
    }
    return bundle;
}

}  // namespace semcom

#include "semcom/semantic_loss.hpp"

#include <algorithm>

#include "semcom/errors.hpp"

namespace semcom {

namespace {

constexpr double kProbabilityEps = 1e-12;
constexpr double kNormEps = 1e-12;

}  // namespace

std::string to_string(Alpha1Policy policy) {
    return policy == Alpha1Policy::Fixed ? "fixed" : "ratio-tied";
}

Alpha1Policy parse_alpha1_policy(const std::string& text) {
    if (text == "fixed") {
        return Alpha1Policy::Fixed;
    }
    if (text == "ratio-tied") {
        return Alpha1Policy::RatioTied;
    }
    throw ConfigError("loss.alpha1_policy must be 'fixed' or 'ratio-tied', got '" + text + "'");
}

void LossConfig::validate() const {
    if (!(tau > 0.0)) {
        throw ConfigError("loss.tau must be positive");
    }
    if (!(alpha1 >= 0.0 && alpha1 <= 1.0)) {
        throw ConfigError("loss.alpha1 must lie in [0, 1]");
    }
    if (!(alpha2 >= 0.0 && alpha2 <= 1.0)) {
        throw ConfigError("loss.alpha2 must lie in [0, 1]");
    }
    if (projection_hidden_dim < 0) {
        throw ConfigError("loss.projection_hidden_dim must be >= 0");
    }
    if (projection_out_dim < 1) {
        throw ConfigError("loss.projection_out_dim must be positive");
    }
}

ProjectionHeadImpl::ProjectionHeadImpl(int64_t feature_dim, int64_t hidden_dim, int64_t out_dim)
    : feature_dim_(feature_dim), out_dim_(out_dim) {
    fc1_ = register_module("fc1", torch::nn::Linear(feature_dim, hidden_dim));
    fc2_ = register_module("fc2", torch::nn::Linear(hidden_dim, out_dim));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& features) {
    auto pooled = features.dim() == 4 ? features.mean({2, 3}) : features;
    if (pooled.dim() != 2 || pooled.size(1) != feature_dim_) {
        throw ConfigError("projection head expects " + std::to_string(feature_dim_) +
                          "-channel features, got " + c10::str(features.sizes()));
    }
    return l2_normalize(fc2_(torch::relu(fc1_(pooled))));
}

ProjectionHead build_projection(const LossConfig& config, int64_t feature_dim) {
    const int64_t hidden =
        config.projection_hidden_dim > 0 ? config.projection_hidden_dim : feature_dim;
    return ProjectionHead(feature_dim, hidden, config.projection_out_dim);
}

torch::Tensor project(ProjectionHead& head, const torch::Tensor& features) {
    return head->forward(features);
}

torch::Tensor l2_normalize(const torch::Tensor& v) {
    return v * (v.pow(2).sum(-1, /*keepdim=*/true) + kNormEps).rsqrt();
}

torch::Tensor semantic_contrastive_loss(const torch::Tensor& anchors,
                                        const torch::Tensor& positives, double tau,
                                        bool include_positive) {
    if (anchors.dim() != 2 || positives.sizes() != anchors.sizes()) {
        throw ShapeError("semantic_contrastive_loss: anchors " + c10::str(anchors.sizes()) +
                         " and positives " + c10::str(positives.sizes()) +
                         " must both be (B, d)");
    }
    const int64_t batch = anchors.size(0);
    if (batch < 2) {
        throw ShapeError("semantic_contrastive_loss: need at least 2 samples for negatives");
    }
    if (!(tau > 0.0)) {
        throw ConfigError("temperature must be positive");
    }

    auto positive_logits = (anchors * positives).sum(1) / tau;
    auto negative_logits = anchors.matmul(anchors.t()) / tau;
    auto self_mask = torch::eye(batch, torch::TensorOptions().dtype(torch::kBool));
    negative_logits = negative_logits.masked_fill(self_mask, -std::numeric_limits<double>::infinity());
    if (include_positive) {
        negative_logits = torch::cat({negative_logits, positive_logits.unsqueeze(1)}, 1);
    }
    auto log_denominator = torch::logsumexp(negative_logits, 1);
    return (log_denominator - positive_logits).mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat) {
    if (x.sizes() != x_hat.sizes()) {
        throw ShapeError("reconstruction_loss: shape mismatch " + c10::str(x.sizes()) + " vs " +
                         c10::str(x_hat.sizes()));
    }
    // Every image has the same n, so the batch mean of per-image MSE is the global mean.
    return (x - x_hat).pow(2).mean();
}

namespace {

void check_labels(const torch::Tensor& labels, const torch::Tensor& scores, const char* what) {
    if (scores.dim() != 2 || labels.dim() != 1 || labels.size(0) != scores.size(0)) {
        throw ShapeError(std::string(what) + ": labels " + c10::str(labels.sizes()) +
                         " do not match scores " + c10::str(scores.sizes()));
    }
    if (scores.size(1) < 2) {
        throw ShapeError(std::string(what) + ": need at least 2 classes");
    }
}

}  // namespace

torch::Tensor task_loss(const torch::Tensor& labels, const torch::Tensor& probs) {
    check_labels(labels, probs, "task_loss");
    const auto num_classes = static_cast<double>(probs.size(1));
    auto p_true = probs.gather(1, labels.to(torch::kLong).unsqueeze(1)).squeeze(1);
    auto guarded = p_true.clamp(kProbabilityEps, 1.0 - kProbabilityEps);
    return -(guarded.log() / num_classes).mean();
}

torch::Tensor task_loss_from_logits(const torch::Tensor& labels, const torch::Tensor& logits) {
    check_labels(labels, logits, "task_loss_from_logits");
    const auto num_classes = static_cast<double>(logits.size(1));
    auto log_p = torch::log_softmax(logits, 1).gather(1, labels.to(torch::kLong).unsqueeze(1));
    return -(log_p.squeeze(1) / num_classes).mean();
}

double resolve_alpha1(const LossConfig& config, double achieved_ratio) {
    if (config.alpha1_policy == Alpha1Policy::RatioTied) {
        return std::clamp(achieved_ratio, 0.0, 1.0);
    }
    return config.alpha1;
}

}  // namespace semcom

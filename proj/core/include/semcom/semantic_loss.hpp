#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace semcom {

enum class Alpha1Policy { Fixed, RatioTied };

std::string to_string(Alpha1Policy policy);
Alpha1Policy parse_alpha1_policy(const std::string& text);

struct LossConfig {
    double tau = 0.1;
    double alpha1 = 0.5;
    Alpha1Policy alpha1_policy = Alpha1Policy::RatioTied;
    double alpha2 = 0.5;
    bool include_positive_in_denominator = false;
    int64_t projection_hidden_dim = 0;  // 0: same as the pooled backbone feature width
    int64_t projection_out_dim = 32;

    void validate() const;
};

/// Two fully connected layers over globally pooled backbone features, followed by
/// projection onto the unit hypersphere.
class ProjectionHeadImpl : public torch::nn::Module {
public:
    ProjectionHeadImpl(int64_t feature_dim, int64_t hidden_dim, int64_t out_dim);

    /// Accepts (B, C, H, W) feature maps or already pooled (B, C) features.
    torch::Tensor forward(const torch::Tensor& features);

    int64_t feature_dim() const noexcept { return feature_dim_; }
    int64_t out_dim() const noexcept { return out_dim_; }

private:
    int64_t feature_dim_;
    int64_t out_dim_;
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(ProjectionHead);

ProjectionHead build_projection(const LossConfig& config, int64_t feature_dim);

/// Maps backbone features to unit-norm semantic embeddings (B, out_dim).
/// Throws ConfigError when the feature width does not match the head.
torch::Tensor project(ProjectionHead& head, const torch::Tensor& features);

/// v / sqrt(||v||^2 + 1e-12) along the last dimension.
torch::Tensor l2_normalize(const torch::Tensor& v);

/// InfoNCE over a batch of B >= 2 anchors q_i (originals) and positives v+_i (their
/// reconstructions). The negatives for anchor i are the other anchors q_m, m != i:
///
///   L = mean_i -log( exp(q_i . v+_i / tau) / sum_{m != i} exp(q_i . q_m / tau) )
///
/// With include_positive the positive term is also added to the denominator.
torch::Tensor semantic_contrastive_loss(const torch::Tensor& anchors,
                                        const torch::Tensor& positives, double tau,
                                        bool include_positive = false);

/// Batch mean of (1/n) ||x - x_hat||^2, n = elements per image.
torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Batch mean of -(1/N_cls) * log(p_true), with p clamped to [1e-12, 1 - 1e-12].
/// `labels` holds class indices (B); `probs` is (B, N_cls) post-softmax.
torch::Tensor task_loss(const torch::Tensor& labels, const torch::Tensor& probs);

/// Same quantity computed from logits through log-softmax (no clamp).
torch::Tensor task_loss_from_logits(const torch::Tensor& labels, const torch::Tensor& logits);

/// alpha1 per policy; the ratio-tied policy uses the achieved k/n clamped to [0, 1].
double resolve_alpha1(const LossConfig& config, double achieved_ratio);

/// alpha * a + (1 - alpha) * b, returning exactly a or b at alpha = 1 or 0.
template <typename T>
T blend_losses(double alpha, const T& a, const T& b) {
    if (alpha == 1.0) {
        return a;
    }
    if (alpha == 0.0) {
        return b;
    }
    return alpha * a + (1.0 - alpha) * b;
}

template <typename T>
T stage1_loss(const T& l_rec, const T& l_sem, const LossConfig& config, double achieved_ratio) {
    return blend_losses(resolve_alpha1(config, achieved_ratio), l_rec, l_sem);
}

template <typename T>
T stage2_loss(const T& l_rec, const T& l_task, const LossConfig& config) {
    return blend_losses(config.alpha2, l_rec, l_task);
}

}  // namespace semcom

#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "oracles.hpp"
#include "semcom/errors.hpp"
#include "semcom/semantic_loss.hpp"

using namespace semcom;

namespace {

oracle::Matrix to_matrix(const torch::Tensor& t) {
    auto c = t.to(torch::kDouble).contiguous();
    oracle::Matrix m(c.size(0), std::vector<double>(c.size(1)));
    auto a = c.accessor<double, 2>();
    for (int64_t i = 0; i < c.size(0); ++i)
        for (int64_t j = 0; j < c.size(1); ++j) m[i][j] = a[i][j];
    return m;
}

torch::Tensor unit_rows(int64_t b, int64_t d, torch::Dtype dtype = torch::kDouble) {
    return l2_normalize(torch::randn({b, d}, dtype));
}

}  // namespace

TEST(InfoNce, MatchesScalarOracle) {
    torch::manual_seed(11);
    std::mt19937 rng(5);
    for (int trial = 0; trial < 40; ++trial) {
        const int64_t b = 2 + static_cast<int64_t>(rng() % 9);
        const int64_t d = 1 + static_cast<int64_t>(rng() % 16);
        const double tau = 0.05 + 0.02 * static_cast<double>(rng() % 50);
        auto q = unit_rows(b, d);
        auto v = unit_rows(b, d);
        for (bool inc : {false, true}) {
            const double got = semantic_contrastive_loss(q, v, tau, inc).item<double>();
            const double want = oracle::info_nce(to_matrix(q), to_matrix(v), tau, inc);
            EXPECT_NEAR(got, want, 1e-9 * std::max(1.0, std::abs(want)))
                << "b=" << b << " d=" << d << " tau=" << tau << " inc=" << inc;
        }
    }
}

TEST(InfoNce, SymmetricBatchIsLogBMinusOne) {
    for (int64_t b : {2, 3, 4, 8}) {
        auto q = l2_normalize(torch::ones({b, 5}, torch::kDouble));
        const double got = semantic_contrastive_loss(q, q, 0.1).item<double>();
        EXPECT_NEAR(got, std::log(static_cast<double>(b - 1)), 1e-12) << b;
        const double with_pos = semantic_contrastive_loss(q, q, 0.1, true).item<double>();
        EXPECT_NEAR(with_pos, std::log(static_cast<double>(b)), 1e-12) << b;
    }
}

TEST(InfoNce, SmallerWhenPositivesAlign) {
    torch::manual_seed(2);
    auto q = unit_rows(8, 16);
    auto far = unit_rows(8, 16);
    EXPECT_LT(semantic_contrastive_loss(q, q, 0.1).item<double>(),
              semantic_contrastive_loss(q, far, 0.1).item<double>());
}

TEST(InfoNce, StableAtLowTemperature) {
    torch::manual_seed(3);
    auto q = unit_rows(6, 4);
    auto v = unit_rows(6, 4);
    auto l = semantic_contrastive_loss(q, v, 1e-3);
    EXPECT_TRUE(std::isfinite(l.item<double>()));
    EXPECT_GE(l.item<double>(), 0.0 - 1e-9 - std::log(5.0));
}

TEST(InfoNce, Errors) {
    auto q = unit_rows(1, 4);
    EXPECT_THROW(semantic_contrastive_loss(q, q, 0.1), ShapeError);
    auto a = unit_rows(3, 4);
    EXPECT_THROW(semantic_contrastive_loss(a, unit_rows(3, 5), 0.1), ShapeError);
    EXPECT_THROW(semantic_contrastive_loss(a, a, 0.0), ConfigError);
}

TEST(InfoNce, FiniteDifferenceGradients) {
    torch::manual_seed(4);
    for (bool inc : {false, true}) {
        auto q = torch::randn({5, 6}, torch::kDouble).requires_grad_(true);
        auto v = torch::randn({5, 6}, torch::kDouble).requires_grad_(true);
        auto loss = semantic_contrastive_loss(q, v, 0.3, inc);
        auto grads = torch::autograd::grad({loss}, {q, v});
        const double h = 1e-6;
        for (int which = 0; which < 2; ++which) {
            auto base = (which == 0 ? q : v).detach().clone();
            auto fd = torch::zeros_like(base);
            for (int64_t i = 0; i < base.numel(); ++i) {
                auto plus = base.clone();
                auto minus = base.clone();
                plus.view(-1)[i] += h;
                minus.view(-1)[i] -= h;
                auto f = [&](const torch::Tensor& t) {
                    return which == 0
                               ? semantic_contrastive_loss(t, v.detach(), 0.3, inc).item<double>()
                               : semantic_contrastive_loss(q.detach(), t, 0.3, inc).item<double>();
                };
                fd.view(-1)[i] = (f(plus) - f(minus)) / (2 * h);
            }
            const double rel = (fd - grads[which]).norm().item<double>() /
                               grads[which].norm().item<double>();
            EXPECT_LT(rel, 1e-6) << "which=" << which << " inc=" << inc;
        }
    }
}

TEST(Projection, UnitNormOutputs) {
    torch::manual_seed(0);
    LossConfig cfg;
    cfg.projection_out_dim = 12;
    auto head = build_projection(cfg, 64);
    auto z = project(head, torch::randn({4, 64, 8, 8}));
    EXPECT_EQ(z.sizes(), (std::vector<int64_t>{4, 12}));
    EXPECT_TRUE(torch::allclose(z.norm(2, 1), torch::ones({4}), 1e-5, 1e-6));
    auto pooled = project(head, torch::randn({4, 64}));
    EXPECT_EQ(pooled.size(1), 12);
    EXPECT_THROW(project(head, torch::randn({4, 32, 8, 8})), ConfigError);
}

TEST(Projection, ZeroVectorStaysFinite) {
    auto z = l2_normalize(torch::zeros({2, 3}, torch::kDouble));
    EXPECT_TRUE(torch::isfinite(z).all().item<bool>());
}

TEST(Reconstruction, MeanSquaredError) {
    auto x = torch::zeros({2, 3, 4, 4});
    auto y = torch::full({2, 3, 4, 4}, 0.1);
    EXPECT_NEAR(reconstruction_loss(x, y).item<float>(), 0.01f, 1e-7);
    EXPECT_THROW(reconstruction_loss(x, torch::zeros({2, 3, 4, 5})), ShapeError);
}

TEST(TaskLoss, IncludesClassFactor) {
    const int64_t n = 10;
    auto probs = torch::full({3, n}, 1.0 / n, torch::kDouble);
    auto labels = torch::tensor({0, 4, 9}, torch::kLong);
    EXPECT_NEAR(task_loss(labels, probs).item<double>(), std::log(10.0) / 10.0, 1e-12);
}

TEST(TaskLoss, ClampsZeroProbability) {
    auto probs = torch::tensor({{1.0, 0.0}}, torch::kDouble);
    auto labels = torch::tensor({1}, torch::kLong);
    const double l = task_loss(labels, probs).item<double>();
    EXPECT_NEAR(l, -std::log(1e-12) / 2.0, 1e-9);
}

TEST(TaskLoss, LogitsVariantAgrees) {
    torch::manual_seed(1);
    auto logits = torch::randn({6, 10}, torch::kDouble);
    auto labels = torch::randint(0, 10, {6}, torch::kLong);
    EXPECT_NEAR(task_loss(labels, torch::softmax(logits, 1)).item<double>(),
                task_loss_from_logits(labels, logits).item<double>(), 1e-12);
    EXPECT_THROW(task_loss(torch::tensor({1}, torch::kLong), torch::ones({2, 3})), ShapeError);
}

TEST(Blend, ExactEndpoints) {
    auto a = torch::tensor(2.0, torch::kDouble);
    auto b = torch::tensor(5.0, torch::kDouble);
    EXPECT_TRUE(blend_losses(1.0, a, b).is_same(a));
    EXPECT_TRUE(blend_losses(0.0, a, b).is_same(b));
    EXPECT_DOUBLE_EQ(blend_losses(0.25, a, b).item<double>(), 0.25 * 2.0 + 0.75 * 5.0);
    EXPECT_DOUBLE_EQ(blend_losses(0.5, 1.0, 3.0), 2.0);
}

TEST(Blend, StageLosses) {
    LossConfig cfg;
    cfg.alpha1_policy = Alpha1Policy::Fixed;
    cfg.alpha1 = 0.3;
    cfg.alpha2 = 0.8;
    EXPECT_DOUBLE_EQ(stage1_loss(1.0, 2.0, cfg, 0.5), 0.3 + 0.7 * 2.0);
    EXPECT_DOUBLE_EQ(stage2_loss(1.0, 2.0, cfg), 0.8 + 0.2 * 2.0);
    cfg.alpha1_policy = Alpha1Policy::RatioTied;
    EXPECT_DOUBLE_EQ(resolve_alpha1(cfg, 1.0 / 48.0), 1.0 / 48.0);
    EXPECT_DOUBLE_EQ(stage1_loss(1.0, 2.0, cfg, 1.0 / 6.0), 1.0 / 6.0 + 5.0 / 6.0 * 2.0);
}

TEST(LossConfig, ValidateAndPolicyNames) {
    LossConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.tau = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = LossConfig{};
    cfg.alpha2 = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_EQ(parse_alpha1_policy(to_string(Alpha1Policy::Fixed)), Alpha1Policy::Fixed);
    EXPECT_EQ(parse_alpha1_policy(to_string(Alpha1Policy::RatioTied)), Alpha1Policy::RatioTied);
    EXPECT_THROW(parse_alpha1_policy("adaptive"), ConfigError);
}

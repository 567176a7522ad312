#pragma once

#include <cmath>
#include <limits>

#include "tensor.hpp"

namespace massl {

inline constexpr double kDiceSmoothing = 1.0;

/// Soft Dice loss over the whole batch:
///   1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps),  eps = 1.
/// g must be binary; only p receives gradient.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& g) {
    if (p.shape() != g.shape()) {
        throw ShapeError("dice_loss shape mismatch: " + to_string(p.shape()) + " vs " + to_string(g.shape()));
    }
    const auto pv = p.values();
    const auto gv = g.values();
    T inter = T(0), sp = T(0), sg = T(0);
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (gv[i] != T(0) && gv[i] != T(1)) {
            throw ValidationError("dice_loss ground truth must be binary, found " + std::to_string(gv[i]));
        }
        inter += pv[i] * gv[i];
        sp += pv[i];
        sg += gv[i];
    }
    const T eps = static_cast<T>(kDiceSmoothing);
    const T num = T(2) * inter + eps;
    const T den = sp + sg + eps;
    std::vector<T> target(gv.begin(), gv.end());
    return Tensor<T>::make_result({1}, {T(1) - num / den}, {p},
                                  [num, den, target = std::move(target)](detail::Node<T>& self) {
                                      // d/dp_i of -num/den = -(2 g_i den - num) / den^2
                                      T* gp = self.parents[0]->grad_buffer();
                                      const T g = self.grad[0];
                                      const T den2 = den * den;
                                      for (std::size_t i = 0; i < target.size(); ++i) {
                                          gp[i] += g * (num - T(2) * target[i] * den) / den2;
                                      }
                                  });
}

/// Soft foreground/background masks taken from the segmentation output with
/// gradient flow cut, so anything built on them cannot update the
/// segmentation decoder.
template <typename T>
struct AttentionMasks {
    Tensor<T> foreground;
    Tensor<T> background;
};

template <typename T>
AttentionMasks<T> make_attention_masks(const Tensor<T>& soft_segmentation) {
    NoGradGuard guard;
    AttentionMasks<T> m;
    m.foreground = stop_gradient(soft_segmentation);
    m.background = affine(m.foreground, T(-1), T(1));
    return m;
}

template <typename T>
struct AttentionReconLoss {
    Tensor<T> value;
    // Batch means of the per-image quantities.
    double fg_term = 0, bg_term = 0;
    double fg_weight = 0, bg_weight = 0;
};

/// Attention-masked reconstruction loss. Per image:
///   (sum(bg)/n) * MSE(recon_bg, x * bg) + (sum(fg)/n) * MSE(recon_fg, x * fg)
/// with n the voxel count; the batch loss is the mean over images.
template <typename T>
AttentionReconLoss<T> attention_recon_loss(const Tensor<T>& x, const Tensor<T>& recon_bg, const Tensor<T>& recon_fg,
                                           const AttentionMasks<T>& masks) {
    for (const auto* t : {&recon_bg, &recon_fg, &masks.foreground, &masks.background}) {
        if (t->shape() != x.shape()) {
            throw ShapeError("attention_recon_loss shape mismatch: " + to_string(x.shape()) + " vs " +
                             to_string(t->shape()));
        }
    }
    if (x.dim() < 1 || x.extent(0) == 0) throw ShapeError("attention_recon_loss needs a batch axis");
    const std::size_t items = x.extent(0);
    const T n = static_cast<T>(x.size() / items);
    const T inv_n = T(1) / n;

    Tensor<T> fg_target, bg_target, fg_weight, bg_weight;
    {
        NoGradGuard guard;
        const Tensor<T> xs = stop_gradient(x);
        fg_target = xs * masks.foreground;
        bg_target = xs * masks.background;
        fg_weight = scale(sum_per_item(masks.foreground), inv_n);
        bg_weight = scale(sum_per_item(masks.background), inv_n);
    }
    const Tensor<T> fg_mse = scale(sum_per_item(square(recon_fg - fg_target)), inv_n);
    const Tensor<T> bg_mse = scale(sum_per_item(square(recon_bg - bg_target)), inv_n);

    AttentionReconLoss<T> r;
    r.value = mean(bg_weight * bg_mse + fg_weight * fg_mse);
    auto batch_mean = [items](const Tensor<T>& t) {
        double acc = 0;
        for (T v : t.values()) acc += static_cast<double>(v);
        return acc / static_cast<double>(items);
    };
    r.fg_term = batch_mean(fg_mse);
    r.bg_term = batch_mean(bg_mse);
    r.fg_weight = batch_mean(fg_weight);
    r.bg_weight = batch_mean(bg_weight);
    return r;
}

/// Mean squared error between a reconstruction and its (constant) input.
template <typename T>
Tensor<T> plain_recon_loss(const Tensor<T>& x, const Tensor<T>& recon) {
    if (x.shape() != recon.shape()) {
        throw ShapeError("plain_recon_loss shape mismatch: " + to_string(x.shape()) + " vs " +
                         to_string(recon.shape()));
    }
    return mean(square(recon - stop_gradient(x)));
}

inline void check_gamma(double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) {
        throw ConfigError("gamma must lie in [0,1], got " + std::to_string(gamma), "gamma");
    }
}

/// gamma * l1 + (1 - gamma) * l2.
template <typename T>
Tensor<T> joint_loss(const Tensor<T>& l1, const Tensor<T>& l2, double gamma) {
    check_gamma(gamma);
    return scale(l1, static_cast<T>(gamma)) + scale(l2, static_cast<T>(1.0 - gamma));
}

/// One row of the per-epoch training log.
struct LossReport {
    double l1 = std::numeric_limits<double>::quiet_NaN();
    double l2 = std::numeric_limits<double>::quiet_NaN();
    double l2_fg_term = std::numeric_limits<double>::quiet_NaN();
    double l2_bg_term = std::numeric_limits<double>::quiet_NaN();
    double fg_weight = std::numeric_limits<double>::quiet_NaN();
    double bg_weight = std::numeric_limits<double>::quiet_NaN();
    double combined = std::numeric_limits<double>::quiet_NaN();
};

}  // namespace massl

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "data.hpp"

namespace massl {

struct AugmentParams {
    double max_rotation_deg = 10.0;
    double scale_lo = 0.9, scale_hi = 1.1;
    double flip_prob = 0.5;
};

/// A concrete draw of the random transform.
struct AugmentDraw {
    double rotation_deg = 0.0;
    double scale = 1.0;
    bool flip = false;
};

inline AugmentDraw draw_augmentation(const AugmentParams& p, SplitMix64& rng) {
    AugmentDraw d;
    d.rotation_deg = rng.uniform(-p.max_rotation_deg, p.max_rotation_deg);
    d.scale = rng.uniform(p.scale_lo, p.scale_hi);
    d.flip = rng.bernoulli(p.flip_prob);
    return d;
}

/// Rotates about the image centre, scales isotropically, then optionally
/// mirrors horizontally. Output pixels map back to source coordinates; the
/// image is sampled bilinearly (zero outside) and clamped to [0,1], the mask
/// by nearest neighbour so it stays binary.
inline Sample apply_augmentation(const Sample& s, const AugmentDraw& d) {
    const std::size_t H = s.height, W = s.width;
    const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
    const double a = d.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a) / d.scale, sn = std::sin(a) / d.scale;

    Sample out = s;
    auto pixel = [&](long y, long x) -> double {
        if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) return 0.0;
        return s.image[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
    };
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const double ox = d.flip ? static_cast<double>(W - 1 - x) : static_cast<double>(x);
            const double dy = static_cast<double>(y) - cy, dx = ox - cx;
            const double sy = c * dy - sn * dx + cy;
            const double sx = sn * dy + c * dx + cx;

            const double fy = std::floor(sy), fx = std::floor(sx);
            const double ty = sy - fy, tx = sx - fx;
            const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
            double v = pixel(y0, x0) * (1 - ty) * (1 - tx);
            if (tx != 0.0) v += pixel(y0, x0 + 1) * (1 - ty) * tx;
            if (ty != 0.0) v += pixel(y0 + 1, x0) * ty * (1 - tx);
            if (ty != 0.0 && tx != 0.0) v += pixel(y0 + 1, x0 + 1) * ty * tx;
            out.image[y * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));

            if (s.mask) {
                const long ny = std::lround(sy), nx = std::lround(sx);
                const bool inside = ny >= 0 && nx >= 0 && ny < static_cast<long>(H) && nx < static_cast<long>(W);
                (*out.mask)[y * W + x] =
                    inside ? (*s.mask)[static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx)] : 0;
            }
        }
    }
    return out;
}

inline Sample augment(const Sample& s, const AugmentParams& p, SplitMix64& rng) {
    return apply_augmentation(s, draw_augmentation(p, rng));
}

}  // namespace massl

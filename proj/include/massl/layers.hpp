#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "tensor.hpp"

namespace massl {

enum class LayerKind { conv, instance_norm, leaky_relu, sigmoid, avg_pool, upsample, concat };

namespace detail {

template <typename T>
void require_rank4(const Tensor<T>& x, const char* op) {
    if (x.dim() != 4) {
        throw ShapeError(std::string(op) + " expects (N,C,H,W), got " + to_string(x.shape()));
    }
}

}  // namespace detail

/// Stride-1 cross-correlation with zero padding k/2, so H and W are preserved.
///
/// weights: (Cout, Cin, k, k) with odd k; bias: (Cout).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
    detail::require_rank4(x, "conv2d input");
    detail::require_rank4(weights, "conv2d weights");
    const std::size_t N = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
    const std::size_t Cout = weights.extent(0), K = weights.extent(2);
    if (weights.extent(1) != Cin) {
        throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + " vs weights " +
                         to_string(weights.shape()));
    }
    if (K != weights.extent(3) || K % 2 == 0) {
        throw ShapeError("conv2d needs square odd kernels, got " + to_string(weights.shape()));
    }
    if (bias.shape() != Shape{Cout}) {
        throw ShapeError("conv2d bias " + to_string(bias.shape()) + " does not match weights " +
                         to_string(weights.shape()));
    }
    const long pad = static_cast<long>(K / 2);
    const long h = static_cast<long>(H), w = static_cast<long>(W);
    const auto xv = x.values();
    const auto wv = weights.values();
    const auto bv = bias.values();
    std::vector<T> out(N * Cout * H * W);

    // Visits every (output pixel, input pixel) pair of one kernel tap over the
    // valid row range; fn(out_index, in_index).
    auto for_tap = [=](long ky, long kx, auto&& fn) {
        const long dy = ky - pad, dx = kx - pad;
        const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
        const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
        for (long y = y0; y < y1; ++y) {
            const std::size_t orow = static_cast<std::size_t>(y * w);
            const std::size_t irow = static_cast<std::size_t>((y + dy) * w + dx);
            for (long c = x0; c < x1; ++c) fn(orow + c, irow + c);
        }
    };

    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Cout; ++co) {
            T* o = out.data() + (n * Cout + co) * H * W;
            std::fill(o, o + H * W, bv[co]);
            for (std::size_t ci = 0; ci < Cin; ++ci) {
                const T* in = xv.data() + (n * Cin + ci) * H * W;
                for (std::size_t ky = 0; ky < K; ++ky) {
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        const T wt = wv[((co * Cin + ci) * K + ky) * K + kx];
                        for_tap(ky, kx, [&](std::size_t oi, std::size_t ii) { o[oi] += wt * in[ii]; });
                    }
                }
            }
        }
    }

    return Tensor<T>::make_result(
        {N, Cout, H, W}, std::move(out), {x, weights, bias},
        [=](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            const T* g = self.grad.data();
            T* gx = px.requires_grad ? px.grad_buffer() : nullptr;
            T* gw = pw.requires_grad ? pw.grad_buffer() : nullptr;
            T* gb = pb.requires_grad ? pb.grad_buffer() : nullptr;
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t co = 0; co < Cout; ++co) {
                    const T* go = g + (n * Cout + co) * H * W;
                    if (gb) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < H * W; ++i) acc += go[i];
                        gb[co] += acc;
                    }
                    for (std::size_t ci = 0; ci < Cin; ++ci) {
                        const std::size_t plane = (n * Cin + ci) * H * W;
                        const T* in = px.value.data() + plane;
                        for (std::size_t ky = 0; ky < K; ++ky) {
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                const std::size_t widx = ((co * Cin + ci) * K + ky) * K + kx;
                                if (gw) {
                                    T acc = T(0);
                                    for_tap(ky, kx, [&](std::size_t oi, std::size_t ii) { acc += go[oi] * in[ii]; });
                                    gw[widx] += acc;
                                }
                                if (gx) {
                                    const T wt = pw.value[widx];
                                    T* gi = gx + plane;
                                    for_tap(ky, kx, [&](std::size_t oi, std::size_t ii) { gi[ii] += wt * go[oi]; });
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Per-(sample, channel) plane normalization followed by a learnable
/// per-channel affine map: scale * (x - mean) / sqrt(var + eps) + shift.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, T eps) {
    detail::require_rank4(x, "instance_norm");
    const std::size_t N = x.extent(0), C = x.extent(1), M = x.extent(2) * x.extent(3);
    if (scale.shape() != Shape{C} || shift.shape() != Shape{C}) {
        throw ShapeError("instance_norm affine terms must be (" + std::to_string(C) + "), got " +
                         to_string(scale.shape()) + " and " + to_string(shift.shape()));
    }
    if (M == 0) throw ShapeError("instance_norm on empty planes");
    if (!(eps > T(0))) throw ContractError("instance_norm eps must be positive");

    const auto xv = x.values();
    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(N * C);
    for (std::size_t p = 0; p < N * C; ++p) {
        const T* in = xv.data() + p * M;
        T mu = T(0);
        for (std::size_t i = 0; i < M; ++i) mu += in[i];
        mu /= static_cast<T>(M);
        T var = T(0);
        for (std::size_t i = 0; i < M; ++i) var += (in[i] - mu) * (in[i] - mu);
        var /= static_cast<T>(M);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[p] = inv;
        const std::size_t c = p % C;
        for (std::size_t i = 0; i < M; ++i) {
            xhat[p * M + i] = (in[i] - mu) * inv;
            out[p * M + i] = scale[c] * xhat[p * M + i] + shift[c];
        }
    }

    return Tensor<T>::make_result(
        x.shape(), std::move(out), {x, scale, shift},
        [N, C, M, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& ps = *self.parents[1];
            auto& pt = *self.parents[2];
            T* gx = px.requires_grad ? px.grad_buffer() : nullptr;
            T* gs = ps.requires_grad ? ps.grad_buffer() : nullptr;
            T* gt = pt.requires_grad ? pt.grad_buffer() : nullptr;
            const T m = static_cast<T>(M);
            for (std::size_t p = 0; p < N * C; ++p) {
                const std::size_t c = p % C;
                const T* g = self.grad.data() + p * M;
                const T* xh = xhat.data() + p * M;
                T sum_g = T(0), sum_gx = T(0);
                for (std::size_t i = 0; i < M; ++i) {
                    sum_g += g[i];
                    sum_gx += g[i] * xh[i];
                }
                if (gs) gs[c] += sum_gx;
                if (gt) gt[c] += sum_g;
                if (gx) {
                    // dL/dxhat = scale * g; closed form of the normalization Jacobian.
                    const T s = ps.value[c];
                    const T k = s * inv_std[p] / m;
                    for (std::size_t i = 0; i < M; ++i) {
                        gx[p * M + i] += k * (m * g[i] - sum_g - xh[i] * sum_gx);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    const auto xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] >= T(0) ? xv[i] : slope * xv[i];
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [slope](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        T* gx = p.grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            gx[i] += p.value[i] >= T(0) ? self.grad[i] : slope * self.grad[i];
        }
    });
}

/// Logistic function. Outputs are clamped into the open interval (0, 1) so the
/// result stays strictly inside it even where the exact value rounds to 0 or 1.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    constexpr T lo = std::numeric_limits<T>::min();
    const T hi = std::nextafter(T(1), T(0));
    const auto xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xv[i];
        const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        out[i] = std::clamp(s, lo, hi);
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T y = self.value[i];
            gx[i] += self.grad[i] * y * (T(1) - y);
        }
    });
}

/// Mean over non-overlapping 2x2 windows.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
    detail::require_rank4(x, "avg_pool2");
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (H % 2 || W % 2) throw ShapeError("avg_pool2 needs even spatial extents, got " + to_string(x.shape()));
    const std::size_t h = H / 2, w = W / 2;
    const auto xv = x.values();
    std::vector<T> out(N * C * h * w);
    for (std::size_t p = 0; p < N * C; ++p) {
        const T* in = xv.data() + p * H * W;
        T* o = out.data() + p * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t c = 0; c < w; ++c) {
                const T* a = in + 2 * y * W + 2 * c;
                o[y * w + c] = (a[0] + a[1] + a[W] + a[W + 1]) / T(4);
            }
        }
    }
    return Tensor<T>::make_result({N, C, h, w}, std::move(out), {x}, [N, C, H, W](detail::Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer();
        const std::size_t h = H / 2, w = W / 2;
        for (std::size_t p = 0; p < N * C; ++p) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t c = 0; c < w; ++c) {
                    const T g = self.grad[p * h * w + y * w + c] / T(4);
                    T* a = gx + p * H * W + 2 * y * W + 2 * c;
                    a[0] += g;
                    a[1] += g;
                    a[W] += g;
                    a[W + 1] += g;
                }
            }
        }
    });
}

/// Nearest-neighbour upsampling: each value fills a 2x2 block.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
    detail::require_rank4(x, "upsample2");
    const std::size_t N = x.extent(0), C = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::size_t H = 2 * h, W = 2 * w;
    const auto xv = x.values();
    std::vector<T> out(N * C * H * W);
    for (std::size_t p = 0; p < N * C; ++p) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t c = 0; c < W; ++c) out[p * H * W + y * W + c] = xv[p * h * w + (y / 2) * w + c / 2];
        }
    }
    return Tensor<T>::make_result({N, C, H, W}, std::move(out), {x}, [N, C, H, W](detail::Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer();
        const std::size_t h = H / 2, w = W / 2;
        for (std::size_t p = 0; p < N * C; ++p) {
            for (std::size_t y = 0; y < H; ++y) {
                for (std::size_t c = 0; c < W; ++c) gx[p * h * w + (y / 2) * w + c / 2] += self.grad[p * H * W + y * W + c];
            }
        }
    });
}

/// Channels of a followed by channels of b.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank4(a, "concat_channels");
    detail::require_rank4(b, "concat_channels");
    if (a.extent(0) != b.extent(0) || a.extent(2) != b.extent(2) || a.extent(3) != b.extent(3)) {
        throw ShapeError("concat_channels mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    const std::size_t N = a.extent(0), Ca = a.extent(1), Cb = b.extent(1), M = a.extent(2) * a.extent(3);
    std::vector<T> out(N * (Ca + Cb) * M);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(av.data() + n * Ca * M, Ca * M, out.data() + n * (Ca + Cb) * M);
        std::copy_n(bv.data() + n * Cb * M, Cb * M, out.data() + (n * (Ca + Cb) + Ca) * M);
    }
    return Tensor<T>::make_result(
        {N, Ca + Cb, a.extent(2), a.extent(3)}, std::move(out), {a, b}, [N, Ca, Cb, M](detail::Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t n = 0; n < N; ++n) {
                const T* g = self.grad.data() + n * (Ca + Cb) * M;
                if (pa.requires_grad) {
                    T* ga = pa.grad_buffer() + n * Ca * M;
                    for (std::size_t i = 0; i < Ca * M; ++i) ga[i] += g[i];
                }
                if (pb.requires_grad) {
                    T* gb = pb.grad_buffer() + n * Cb * M;
                    for (std::size_t i = 0; i < Cb * M; ++i) gb[i] += g[Ca * M + i];
                }
            }
        });
}

/// Channels [first, first + count) of x.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t first, std::size_t count) {
    detail::require_rank4(x, "slice_channels");
    const std::size_t N = x.extent(0), C = x.extent(1), M = x.extent(2) * x.extent(3);
    if (first + count > C || count == 0) {
        throw ShapeError("slice_channels [" + std::to_string(first) + "," + std::to_string(first + count) +
                         ") out of range for " + to_string(x.shape()));
    }
    std::vector<T> out(N * count * M);
    const auto xv = x.values();
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(xv.data() + (n * C + first) * M, count * M, out.data() + n * count * M);
    }
    return Tensor<T>::make_result(
        {N, count, x.extent(2), x.extent(3)}, std::move(out), {x}, [N, C, M, first, count](detail::Node<T>& self) {
            T* gx = self.parents[0]->grad_buffer();
            for (std::size_t n = 0; n < N; ++n) {
                const T* g = self.grad.data() + n * count * M;
                T* dst = gx + (n * C + first) * M;
                for (std::size_t i = 0; i < count * M; ++i) dst[i] += g[i];
            }
        });
}

}  // namespace massl

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace massl {

struct AdamParams {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed list of tensors. Moments live in the optimizer, so two
/// optimizers over overlapping tensors keep independent state.
template <typename T>
class Adam {
  public:
    Adam(std::vector<Tensor<T>> params, AdamParams hp) : params_(std::move(params)), hp_(hp) {
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), T(0));
            v_.emplace_back(p.size(), T(0));
        }
    }

    /// One update from the gradients currently stored on the tensors.
    void step() {
        for (const auto& p : params_) {
            if (!p.has_grad()) throw ContractError("adam step: a parameter in the group has no gradient");
        }
        ++t_;
        const T b1 = static_cast<T>(hp_.beta1), b2 = static_cast<T>(hp_.beta2);
        const T lr = static_cast<T>(hp_.lr), eps = static_cast<T>(hp_.eps);
        const T c1 = T(1) - std::pow(b1, static_cast<T>(t_));
        const T c2 = T(1) - std::pow(b2, static_cast<T>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto theta = params_[k].mutable_values();
            const auto g = params_[k].grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < theta.size(); ++i) {
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                const T m_hat = m[i] / c1;
                const T v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
            }
        }
    }

    void clear_grads() {
        for (auto& p : params_) p.clear_grad();
    }

    std::uint64_t steps() const { return t_; }
    const AdamParams& hyperparameters() const { return hp_; }
    const std::vector<Tensor<T>>& parameters() const { return params_; }

  private:
    std::vector<Tensor<T>> params_;
    AdamParams hp_;
    std::vector<std::vector<T>> m_, v_;
    std::uint64_t t_ = 0;
};

}  // namespace massl

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "data.hpp"
#include "model.hpp"

namespace massl {

/// Dice similarity of a thresholded prediction against a binary mask:
/// 2|P and G| / (|P| + |G|), and 1 when both sets are empty.
template <typename T, typename M>
double dice_score(std::span<const T> pred, std::span<const M> truth, double threshold = 0.5) {
    if (pred.size() != truth.size()) {
        throw ShapeError("dice_score size mismatch: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()));
    }
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool in_p = static_cast<double>(pred[i]) >= threshold;
        const bool in_g = truth[i] != M(0);
        p += in_p;
        g += in_g;
        both += in_p && in_g;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

template <typename T>
double dice_score(const Tensor<T>& pred, const Tensor<T>& truth, double threshold = 0.5) {
    if (pred.shape() != truth.shape()) {
        throw ShapeError("dice_score shape mismatch: " + to_string(pred.shape()) + " vs " + to_string(truth.shape()));
    }
    return dice_score<T, T>(pred.values(), truth.values(), threshold);
}

/// Soft segmentation of one sample without recording a graph.
template <typename T>
Tensor<T> predict(const Model<T>& model, const Sample& s) {
    NoGradGuard guard;
    return model.segment(model.encode(stack_images<T>({&s})));
}

/// Per-sample Dice of the model over a labeled set.
template <typename T>
std::vector<double> evaluate_dice(const Model<T>& model, const SampleSet& set, double threshold = 0.5) {
    std::vector<double> out;
    out.reserve(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        const Sample& s = set.at(i);
        if (!s.mask) throw ValidationError("sample '" + s.id + "' has no mask to evaluate against");
        const auto p = predict(model, s);
        out.push_back(dice_score<T, std::uint8_t>(p.values(), *s.mask, threshold));
    }
    return out;
}

}  // namespace massl

#pragma once

#include <vector>

#include "s2il/tensor.hpp"

namespace s2il {

// One forward pass worth of intermediate features: per-block activation maps,
// the globally pooled vector, and per-class similarity scores.
struct FeatureBundle {
    std::vector<Tensor> layers;  // each [N, C_i, H_i, W_i], post-activation
    Tensor pooled;               // [N, C_last]
    Tensor scores;               // [N, classes]

    const Tensor& last_maps() const {
        if (layers.empty()) throw StateError("FeatureBundle has no layers");
        return layers.back();
    }
};

}  // namespace s2il

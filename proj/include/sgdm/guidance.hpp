#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "sgdm/tensor.hpp"

namespace sgdm {

enum class GuidanceVariant { none, label, box, segmentation };

std::string to_string(GuidanceVariant v);
GuidanceVariant guidance_variant_from_string(const std::string& s);

// A conditioning signal at one of the paper's three granularities, plus the
// explicit null (unconditional) variant.
//  - label:        one-hot vector of dim K+1; index K is the reserved null slot
//  - box:          binary {1,H,W} mask (1 = inside the box) + a cluster one-hot
//  - segmentation: one-hot-per-pixel {K,H,W} mask + its pooled multi-hot
struct GuidanceSignal {
    GuidanceVariant variant = GuidanceVariant::none;
    std::vector<float> label;    // dim label_dim = K+1, entries in {0,1}
    Tensor<float> spatial_mask;  // box: {1,H,W}; segmentation: {K,H,W}; else empty

    static GuidanceSignal null_label(int label_dim) {
        GuidanceSignal g;
        g.variant = GuidanceVariant::none;
        g.label.assign(static_cast<size_t>(label_dim), 0.0f);
        g.label.back() = 1.0f;
        return g;
    }

    static GuidanceSignal one_hot(int index, int label_dim) {
        if (index < 0 || index >= label_dim) throw std::invalid_argument("guidance: label index out of range");
        GuidanceSignal g;
        g.variant = GuidanceVariant::label;
        g.label.assign(static_cast<size_t>(label_dim), 0.0f);
        g.label[static_cast<size_t>(index)] = 1.0f;
        return g;
    }

    // Null counterpart: null one-hot of the same label dim and no mask. The
    // denoiser substitutes all-zero mask channels for signals without a mask,
    // so the dropped signal keeps the model's input layout.
    GuidanceSignal as_null() const { return null_label(static_cast<int>(label.size())); }

    bool is_null() const {
        if (variant != GuidanceVariant::none) return false;
        for (size_t i = 0; i + 1 < label.size(); ++i)
            if (label[i] != 0.0f) return false;
        return label.empty() || label.back() == 1.0f;
    }
};

inline std::string to_string(GuidanceVariant v) {
    switch (v) {
        case GuidanceVariant::none: return "none";
        case GuidanceVariant::label: return "label";
        case GuidanceVariant::box: return "box";
        case GuidanceVariant::segmentation: return "segmentation";
    }
    return "none";
}

inline GuidanceVariant guidance_variant_from_string(const std::string& s) {
    if (s == "none") return GuidanceVariant::none;
    if (s == "label") return GuidanceVariant::label;
    if (s == "box") return GuidanceVariant::box;
    if (s == "segmentation") return GuidanceVariant::segmentation;
    throw std::invalid_argument("unknown guidance variant: " + s);
}

}  // namespace sgdm

#ifndef BLOCKCACHE_DATASET_HPP
#define BLOCKCACHE_DATASET_HPP

#include "blockcache/tensor.hpp"

namespace bc {

// Procedural class-conditional images in [-1,1]: each class pairs a color
// palette with a pattern family, with per-sample jitter from the rng.
inline Tensor make_sample(int64_t class_id, int64_t image_size, Rng& rng) {
    int64_t H = image_size;
    Tensor img({3, H, H});
    int64_t pattern = class_id % 4;
    int64_t palette = class_id / 4;
    float base_r = palette == 0 ? 0.8f : -0.4f;
    float base_g = palette == 0 ? -0.3f : 0.7f;
    float base_b = palette == 0 ? -0.5f : 0.2f;
    float jx = static_cast<float>(rng.next_uniform()) * 0.4f - 0.2f;
    float jy = static_cast<float>(rng.next_uniform()) * 0.4f - 0.2f;
    float js = 0.8f + 0.4f * static_cast<float>(rng.next_uniform());
    float jc = 0.85f + 0.3f * static_cast<float>(rng.next_uniform());
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < H; ++x) {
            float u = 2.0f * static_cast<float>(x) / static_cast<float>(H - 1) - 1.0f;
            float v = 2.0f * static_cast<float>(y) / static_cast<float>(H - 1) - 1.0f;
            float s;
            switch (pattern) {
                case 0: {  // centered blob
                    float dx = u - jx, dy = v - jy;
                    s = std::exp(-(dx * dx + dy * dy) * 4.0f * js) * 2.0f - 1.0f;
                    break;
                }
                case 1:  // diagonal gradient
                    s = std::tanh((u * js + v + jx) * 1.5f);
                    break;
                case 2:  // soft vertical stripes
                    s = std::sin((u + jx) * 6.283f * js) * 0.9f;
                    break;
                default: {  // two-lobe
                    float d1 = (u - 0.4f - jx) * (u - 0.4f - jx) + (v + 0.3f - jy) * (v + 0.3f - jy);
                    float d2 = (u + 0.4f + jx) * (u + 0.4f + jx) + (v - 0.3f + jy) * (v - 0.3f + jy);
                    s = (std::exp(-d1 * 5.0f) + std::exp(-d2 * 5.0f)) * 2.0f - 1.0f;
                    break;
                }
            }
            img.at({0, y, x}) = std::clamp(base_r * s * jc, -1.0f, 1.0f);
            img.at({1, y, x}) = std::clamp(base_g * s * jc, -1.0f, 1.0f);
            img.at({2, y, x}) = std::clamp(base_b * s * jc, -1.0f, 1.0f);
        }
    return img;
}

}  // namespace bc

#endif

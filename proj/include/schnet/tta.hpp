#pragma once

// Test-time augmentation: average probability maps over scaled inputs and
// (optionally) the horizontally flipped input, per scale. Scaled sizes snap
// to the nearest multiple of `size_multiple` so both encoder grids stay
// valid. With scales={1.0} and no flip the result is bitwise the plain
// forward.

#include <functional>
#include <vector>

#include "schnet/errors.hpp"
#include "schnet/tensor.hpp"

namespace schnet {

// img {H,W,3} -> probability map {H,W,K}
template <typename T>
using ForwardProbsFn = std::function<Tensor<T>(const Tensor<T>&)>;

// Optional label permutation applied when un-flipping, for datasets whose
// classes are lateralized (left/right pairs). Identity when null.
template <typename T>
Tensor<T> tta_predict(const ForwardProbsFn<T>& forward, const Tensor<T>& img,
                      const std::vector<double>& scales, bool flip, std::size_t size_multiple,
                      const std::vector<std::size_t>* flip_label_remap = nullptr) {
    if (scales.empty()) throw ConfigError("tta_predict: scales must be non-empty");
    if (img.rank() != 3) throw ShapeError("tta_predict: H x W x 3 image required");
    const std::size_t h = img.dim(0), w = img.dim(1);

    auto snap = [&](double v) {
        std::size_t m = size_multiple ? size_multiple : 1;
        std::size_t s = static_cast<std::size_t>(std::lround(v / m)) * m;
        return std::max(s, m);
    };

    Tensor<T> acc;
    std::size_t count = 0;
    auto accumulate = [&](const Tensor<T>& probs) {
        Tensor<T> up = (probs.dim(0) == h && probs.dim(1) == w)
                           ? probs
                           : resize_bilinear_raw(probs, h, w);
        if (count == 0) {
            acc = up.clone();
        } else {
            T* a = acc.data();
            const T* b = up.data();
            for (std::size_t i = 0; i < acc.numel(); ++i) a[i] += b[i];
        }
        ++count;
    };

    for (double s : scales) {
        const std::size_t sh = snap(h * s), sw = snap(w * s);
        Tensor<T> scaled =
            (sh == h && sw == w) ? img : resize_bilinear_raw(img, sh, sw);
        accumulate(forward(scaled));
        if (flip) {
            Tensor<T> probs_f = forward(hflip_raw(scaled));
            Tensor<T> unflipped = hflip_raw(probs_f);
            if (flip_label_remap) {
                const std::size_t k = unflipped.dim(2);
                if (flip_label_remap->size() != k)
                    throw ConfigError("tta_predict: flip label remap size mismatch");
                std::vector<T> remapped(unflipped.numel());
                const T* src = unflipped.data();
                for (std::size_t i = 0; i < unflipped.numel() / k; ++i)
                    for (std::size_t c = 0; c < k; ++c)
                        remapped[i * k + (*flip_label_remap)[c]] = src[i * k + c];
                unflipped = Tensor<T>::from_vector(unflipped.shape(), std::move(remapped));
            }
            accumulate(unflipped);
        }
    }

    T* a = acc.data();
    const T inv = T(1) / static_cast<T>(count);
    for (std::size_t i = 0; i < acc.numel(); ++i) a[i] *= inv;
    return acc;
}

}  // namespace schnet

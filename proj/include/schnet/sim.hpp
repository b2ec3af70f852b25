#pragma once

// Class-presence probabilities from the class embedding and text features:
// probs = softmax(f_cls (x) f_txt^T / temperature).

#include "schnet/encoders.hpp"
#include "schnet/errors.hpp"
#include "schnet/tensor.hpp"

namespace schnet {

template <typename T>
struct ClassSimilarity {
    Tensor<T> probs;  // K, entries in (0,1), sum 1
};

template <typename T>
ClassSimilarity<T> compute_similarity(const ClassEmbedding<T>& cls, const TextFeatures<T>& txt,
                                      T temperature = T(1)) {
    if (cls.vec.rank() != 1 || txt.mat.rank() != 2 || cls.vec.dim(0) != txt.mat.dim(1))
        throw ShapeError("compute_similarity: class embedding " + shape_str(cls.vec.shape()) +
                         " vs text features " + shape_str(txt.mat.shape()));
    // Both inputs come from frozen encoders; the similarity itself carries no
    // gradient (downstream consumers train their own projections of it).
    NoGradGuard ng;
    const std::size_t k = txt.mat.dim(0);
    Tensor<T> row = reshape(cls.vec, {1, cls.vec.dim(0)});
    Tensor<T> logits = scale_add(matmul(row, transpose2d(txt.mat)), T(1) / temperature);
    return ClassSimilarity<T>{reshape(softmax(logits, 1), {k})};
}

}  // namespace schnet

#pragma once

// Multi-scale fusion segmentation head and the training losses.
//
// decode: 1x1-project the four tapped stages, fuse their concatenation, add
// the projected stage-0 map, classify, bilinearly upsample to the output
// size. Loss: mean cross-entropy over labeled pixels plus w_iou times a
// soft-IoU (differentiable Jaccard) term averaged over classes present in
// the ground truth.

#include <map>
#include <string>
#include <vector>

#include "schnet/data.hpp"
#include "schnet/encoders.hpp"
#include "schnet/tensor.hpp"

namespace schnet {

template <typename T>
struct HeadParams {
    std::vector<MlpParams<T>> stage_proj;  // 5 of C_in -> C_head
    MlpParams<T> fuse;                     // 4*C_head -> C_head
    MlpParams<T> classifier;               // C_head -> K

    std::size_t num_classes() const { return classifier.out_dim(); }

    static HeadParams init(std::size_t c_in, std::size_t c_head, std::size_t num_classes,
                           Rng& rng) {
        HeadParams p;
        const double s_in = 1.0 / std::sqrt(static_cast<double>(c_in));
        for (int i = 0; i < 5; ++i)
            p.stage_proj.push_back(MlpParams<T>::seeded(c_head, c_in, rng, s_in));
        p.fuse = MlpParams<T>::seeded(c_head, 4 * c_head, rng,
                                      1.0 / std::sqrt(4.0 * static_cast<double>(c_head)));
        p.classifier = MlpParams<T>::seeded(num_classes, c_head, rng,
                                            1.0 / std::sqrt(static_cast<double>(c_head)));
        return p;
    }

    void set_trainable(bool v) {
        for (auto& m : stage_proj) m.set_trainable(v);
        fuse.set_trainable(v);
        classifier.set_trainable(v);
    }

    void collect(const std::string& prefix, std::map<std::string, Tensor<T>>& out) const {
        for (std::size_t i = 0; i < stage_proj.size(); ++i) {
            out[prefix + "/stage" + std::to_string(i) + "/W"] = stage_proj[i].W;
            out[prefix + "/stage" + std::to_string(i) + "/b"] = stage_proj[i].b;
        }
        out[prefix + "/fuse/W"] = fuse.W;
        out[prefix + "/fuse/b"] = fuse.b;
        out[prefix + "/classifier/W"] = classifier.W;
        out[prefix + "/classifier/b"] = classifier.b;
    }
};

template <typename T>
Tensor<T> decode_logits(const StageFeatures<T>& feats, const HeadParams<T>& p, std::size_t out_h,
                        std::size_t out_w) {
    if (feats.stages.size() != 5)
        throw ShapeError("decode_logits: 5 stage maps required, got " +
                         std::to_string(feats.stages.size()));
    const Shape& g = feats.stages[0].shape();
    for (const auto& s : feats.stages)
        if (s.shape() != g)
            throw ShapeError("decode_logits: stage grids " + shape_str(g) + " and " +
                             shape_str(s.shape()) + " disagree");
    const std::size_t gh = g[0], gw = g[1];
    const std::size_t ch = p.fuse.out_dim();
    const std::size_t l = gh * gw;

    Tensor<T> p0 = reshape(mlp_apply(p.stage_proj[0], feats.stages[0]), {l, ch});
    std::vector<Tensor<T>> tapped;
    for (int i = 1; i < 5; ++i)
        tapped.push_back(reshape(mlp_apply(p.stage_proj[i], feats.stages[i]), {l, ch}));
    Tensor<T> fused = add(mlp_apply(p.fuse, concat_cols(tapped)), p0);
    Tensor<T> logits = mlp_apply(p.classifier, fused);
    return bilinear_resize(reshape(logits, {gh, gw, p.num_classes()}), out_h, out_w);
}

// CE + w_iou * soft-IoU. Ignored pixels (255) drop out of both terms; soft
// IoU averages over classes present in the ground truth so a perfect
// prediction drives the whole loss to zero.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const Mask& gt, T w_iou) {
    if (logits.rank() != 3 || logits.dim(0) != gt.h || logits.dim(1) != gt.w)
        throw ShapeError("combined_loss: logits " + shape_str(logits.shape()) +
                         " vs mask " + std::to_string(gt.h) + "x" + std::to_string(gt.w));
    const std::size_t k = logits.dim(2);
    const std::size_t l = gt.h * gt.w;

    std::vector<T> onehot(l * k, T(0));
    std::vector<T> class_count(k, T(0));
    std::size_t n_valid = 0;
    for (std::size_t i = 0; i < l; ++i) {
        const std::uint8_t id = gt.ids[i];
        if (id == kIgnoreLabel) continue;
        if (id >= k)
            throw DataError("combined_loss: mask id " + std::to_string(id) + " >= K=" +
                            std::to_string(k));
        onehot[i * k + id] = T(1);
        class_count[id] += T(1);
        ++n_valid;
    }
    if (n_valid == 0) throw DataError("combined_loss: no labeled pixels in mask");

    Tensor<T> flat = reshape(logits, {l, k});
    Tensor<T> onehot_t = Tensor<T>::from_vector({l, k}, onehot);

    Tensor<T> ce = scale_add(sum_all(mul(log_softmax(flat, 1), onehot_t)),
                             T(-1) / static_cast<T>(n_valid));
    if (w_iou == T(0)) return ce;

    std::vector<T> present(k, T(0));
    std::size_t n_present = 0;
    for (std::size_t c = 0; c < k; ++c)
        if (class_count[c] > T(0)) {
            present[c] = T(1);
            ++n_present;
        }

    Tensor<T> probs = softmax(flat, 1);
    Tensor<T> ones = Tensor<T>::full({1, l}, T(1));
    Tensor<T> inter = matmul(ones, mul(probs, onehot_t));            // 1 x K
    Tensor<T> psum = matmul(ones, probs);                            // 1 x K
    Tensor<T> gsum = Tensor<T>::from_vector({1, k}, class_count);    // constant
    Tensor<T> uni = sub(add(psum, gsum), inter);
    Tensor<T> iou = div(inter, uni);
    Tensor<T> present_t = Tensor<T>::from_vector({1, k}, present);
    Tensor<T> mean_iou =
        scale_add(sum_all(mul(iou, present_t)), T(1) / static_cast<T>(n_present));
    Tensor<T> iou_loss = scale_add(mean_iou, -w_iou, w_iou);  // w_iou * (1 - mean)
    return add(ce, iou_loss);
}

}  // namespace schnet

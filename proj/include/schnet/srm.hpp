#pragma once

// Semantic-refinement module. One shared parameter set serves every
// injection stage:
//   inject:  f'_sv = MLP_proj(f_cv (.) MLP_sim(f_sim)) (+) f_sv
//   refine:  f''_sv = f'_sv (+) MLP_expand(GELU(MLP_squeeze(f'_sv)))
// MLP_proj and MLP_expand start at zero so the whole module is an exact
// identity on f_sv at initialization.

#include <map>
#include <string>

#include "schnet/sim.hpp"
#include "schnet/tensor.hpp"

namespace schnet {

template <typename T>
struct SrmParams {
    MlpParams<T> mlp_sim;      // K -> C_clip
    MlpParams<T> mlp_proj;     // C_clip -> C_sam, zero-init
    MlpParams<T> mlp_squeeze;  // C_sam -> C_sam / r
    MlpParams<T> mlp_expand;   // C_sam / r -> C_sam, zero-init
    std::size_t squeeze_ratio = 4;

    static SrmParams init(std::size_t num_classes, std::size_t c_clip, std::size_t c_sam,
                          std::size_t ratio, Rng& rng) {
        if (ratio == 0 || c_sam % ratio)
            throw ConfigError("srm squeeze ratio must divide the SAM channel dim");
        SrmParams p;
        p.squeeze_ratio = ratio;
        p.mlp_sim = MlpParams<T>::seeded(c_clip, num_classes, rng,
                                         1.0 / std::sqrt(static_cast<double>(num_classes)));
        p.mlp_proj = MlpParams<T>::zeros(c_sam, c_clip);
        p.mlp_squeeze = MlpParams<T>::seeded(c_sam / ratio, c_sam, rng,
                                             1.0 / std::sqrt(static_cast<double>(c_sam)));
        p.mlp_expand = MlpParams<T>::zeros(c_sam, c_sam / ratio);
        return p;
    }

    void set_trainable(bool v) {
        mlp_sim.set_trainable(v);
        mlp_proj.set_trainable(v);
        mlp_squeeze.set_trainable(v);
        mlp_expand.set_trainable(v);
    }

    void collect(const std::string& prefix, std::map<std::string, Tensor<T>>& out) const {
        out[prefix + "/mlp_sim/W"] = mlp_sim.W;
        out[prefix + "/mlp_sim/b"] = mlp_sim.b;
        out[prefix + "/mlp_proj/W"] = mlp_proj.W;
        out[prefix + "/mlp_proj/b"] = mlp_proj.b;
        out[prefix + "/mlp_squeeze/W"] = mlp_squeeze.W;
        out[prefix + "/mlp_squeeze/b"] = mlp_squeeze.b;
        out[prefix + "/mlp_expand/W"] = mlp_expand.W;
        out[prefix + "/mlp_expand/b"] = mlp_expand.b;
    }
};

// Bilinear grid alignment of a CLIP stage map onto the SAM grid. Identity
// (bitwise) when the grids already agree.
template <typename T>
Tensor<T> align_grids(const Tensor<T>& f_cv, std::size_t target_h, std::size_t target_w) {
    if (f_cv.rank() != 3)
        throw ShapeError("align_grids: H x W x C map required, got " + shape_str(f_cv.shape()));
    if (f_cv.dim(0) == target_h && f_cv.dim(1) == target_w) return f_cv;
    return bilinear_resize(f_cv, target_h, target_w);
}

template <typename T>
Tensor<T> srm_inject(const Tensor<T>& f_cv_aligned, const ClassSimilarity<T>& f_sim,
                     const Tensor<T>& f_sv_prev, const SrmParams<T>& p) {
    if (f_cv_aligned.rank() != 3 || f_sv_prev.rank() != 3 ||
        f_cv_aligned.dim(0) != f_sv_prev.dim(0) || f_cv_aligned.dim(1) != f_sv_prev.dim(1))
        throw ShapeError("srm_inject: grids " + shape_str(f_cv_aligned.shape()) + " and " +
                         shape_str(f_sv_prev.shape()) + " disagree");
    const std::size_t k = f_sim.probs.dim(0);
    Tensor<T> s =
        reshape(mlp_apply(p.mlp_sim, reshape(f_sim.probs, {1, k})), {p.mlp_sim.out_dim()});
    Tensor<T> gated = channel_mul(f_cv_aligned, s);
    return add(mlp_apply(p.mlp_proj, gated), f_sv_prev);
}

template <typename T>
Tensor<T> srm_refine(const Tensor<T>& f_sv_inj, const SrmParams<T>& p) {
    return add(f_sv_inj, mlp_apply(p.mlp_expand, gelu(mlp_apply(p.mlp_squeeze, f_sv_inj))));
}

}  // namespace schnet

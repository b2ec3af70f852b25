#pragma once

// Frozen, seed-deterministic stand-ins for the CLIP image encoder, CLIP text
// encoder and SAM image encoder. Topology mirrors the real wiring: isotropic
// pre-norm ViT blocks, four tapped stages per image encoder plus the SAM
// post-patch-embedding map, a dedicated class token on the CLIP side, and a
// hashed bag-of-tokens text embedding. Weights never train; the SAM patch
// embedding is deliberately external (it is part of the trainable set) and is
// passed into sam forward by the caller.

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "schnet/errors.hpp"
#include "schnet/rng.hpp"
#include "schnet/tensor.hpp"

namespace schnet {

struct EncoderConfig {
    std::size_t patch_size = 4;       // SAM grid stride
    std::size_t clip_patch_size = 8;  // CLIP grid stride (coarser, like the real pair)
    std::size_t embed_dim_clip = 32;
    std::size_t embed_dim_sam = 64;
    std::size_t joint_dim = 32;
    std::size_t n_layers_clip = 4;
    std::size_t n_layers_sam = 8;
    std::vector<std::size_t> clip_taps{1, 2, 3, 4};
    std::vector<std::size_t> sam_taps{2, 4, 6, 8};
    std::size_t n_heads = 2;
    std::size_t mlp_ratio = 2;  // hidden width multiple inside each block
    std::uint64_t seed = 1234;

    void validate() const {
        auto check_taps = [](const std::vector<std::size_t>& taps, std::size_t n_layers,
                             const char* which) {
            if (taps.size() != 4)
                throw ConfigError(std::string(which) + " taps must have exactly 4 entries");
            for (std::size_t i = 0; i < taps.size(); ++i) {
                if (taps[i] == 0 || taps[i] > n_layers)
                    throw ConfigError(std::string(which) + " tap out of range");
                if (i && taps[i] <= taps[i - 1])
                    throw ConfigError(std::string(which) + " taps must be strictly increasing");
            }
        };
        check_taps(clip_taps, n_layers_clip, "clip");
        check_taps(sam_taps, n_layers_sam, "sam");
        if (patch_size == 0 || clip_patch_size == 0) throw ConfigError("patch size must be positive");
        if (embed_dim_clip % n_heads || embed_dim_sam % n_heads)
            throw ConfigError("embed dims must be divisible by n_heads");
        if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
    }
};

enum class FeatureSource { clip, sam };

template <typename T>
struct StageFeatures {
    std::vector<Tensor<T>> stages;  // H x W x C grids, constant grid per source
    FeatureSource source = FeatureSource::sam;
};

template <typename T>
struct ClassEmbedding {
    Tensor<T> vec;  // joint_dim, unit L2 norm
};

template <typename T>
struct TextFeatures {
    Tensor<T> mat;  // K x joint_dim, unit-norm rows
};

// ----- shared pieces -----

namespace detail {

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// img {H,W,3} -> {Hp*Wp, p*p*3} constant token matrix, tokens row-major over
// the patch grid, pixels row-major within a patch.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& img, std::size_t p) {
    if (img.rank() != 3 || img.dim(2) != 3)
        throw ShapeError("extract_patches: H x W x 3 image required, got " +
                         shape_str(img.shape()));
    const std::size_t h = img.dim(0), w = img.dim(1);
    if (h % p || w % p)
        throw ShapeError("extract_patches: image " + shape_str(img.shape()) +
                         " not divisible by patch size " + std::to_string(p));
    const std::size_t gh = h / p, gw = w / p, dim = p * p * 3;
    std::vector<T> out(gh * gw * dim);
    const T* src = img.data();
    std::size_t at = 0;
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px)
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t c = 0; c < 3; ++c)
                        out[at++] = src[((py * p + y) * w + px * p + x) * 3 + c];
    return Tensor<T>::from_vector({gh * gw, dim}, std::move(out));
}

}  // namespace detail

template <typename T>
struct TransformerLayer {
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    MlpParams<T> qkv;   // 3C x C
    MlpParams<T> proj;  // C x C
    MlpParams<T> fc1;   // rC x C
    MlpParams<T> fc2;   // C x rC

    static TransformerLayer seeded(std::size_t c, std::size_t mlp_ratio, Rng& rng) {
        TransformerLayer l;
        l.ln1_g = Tensor<T>::full({c}, T(1));
        l.ln1_b = Tensor<T>::zeros({c});
        l.ln2_g = Tensor<T>::full({c}, T(1));
        l.ln2_b = Tensor<T>::zeros({c});
        const double s = 1.0 / std::sqrt(static_cast<double>(c));
        const std::size_t hidden = mlp_ratio * c;
        l.qkv = MlpParams<T>::seeded(3 * c, c, rng, s);
        l.proj = MlpParams<T>::seeded(c, c, rng, s);
        l.fc1 = MlpParams<T>::seeded(hidden, c, rng, s);
        l.fc2 = MlpParams<T>::seeded(c, hidden, rng, 1.0 / std::sqrt(double(hidden)));
        return l;
    }

    Tensor<T> forward(const Tensor<T>& x, std::size_t n_heads) const {
        const std::size_t c = x.dim(1);
        const std::size_t d = c / n_heads;
        Tensor<T> h = layer_norm(x, ln1_g, ln1_b);
        Tensor<T> qkv_out = mlp_apply(qkv, h);
        std::vector<Tensor<T>> heads;
        heads.reserve(n_heads);
        const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
        for (std::size_t hd = 0; hd < n_heads; ++hd) {
            Tensor<T> q = take_cols(qkv_out, hd * d, d);
            Tensor<T> k = take_cols(qkv_out, c + hd * d, d);
            Tensor<T> v = take_cols(qkv_out, 2 * c + hd * d, d);
            Tensor<T> scores = scale_add(matmul(q, transpose2d(k)), inv_sqrt_d);
            Tensor<T> attn = softmax(scores, 1);
            heads.push_back(matmul(attn, v));
        }
        Tensor<T> y = add(x, mlp_apply(proj, concat_cols(heads)));
        Tensor<T> h2 = layer_norm(y, ln2_g, ln2_b);
        return add(y, mlp_apply(fc2, gelu(mlp_apply(fc1, h2))));
    }

    void collect(const std::string& prefix, std::map<std::string, Tensor<T>>& out) const {
        out[prefix + "/ln1_g"] = ln1_g;
        out[prefix + "/ln1_b"] = ln1_b;
        out[prefix + "/ln2_g"] = ln2_g;
        out[prefix + "/ln2_b"] = ln2_b;
        out[prefix + "/qkv/W"] = qkv.W;
        out[prefix + "/qkv/b"] = qkv.b;
        out[prefix + "/proj/W"] = proj.W;
        out[prefix + "/proj/b"] = proj.b;
        out[prefix + "/fc1/W"] = fc1.W;
        out[prefix + "/fc1/b"] = fc1.b;
        out[prefix + "/fc2/W"] = fc2.W;
        out[prefix + "/fc2/b"] = fc2.b;
    }
};

// Graph-free unit L2 normalization (frozen outputs only).
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& v) {
    T norm2 = T(0);
    for (std::size_t i = 0; i < v.numel(); ++i) norm2 += v.data()[i] * v.data()[i];
    const T inv = T(1) / std::sqrt(norm2);
    std::vector<T> out(v.numel());
    for (std::size_t i = 0; i < v.numel(); ++i) out[i] = v.data()[i] * inv;
    return Tensor<T>::from_vector(v.shape(), std::move(out));
}

// ----- CLIP image encoder analog -----

// Positional maps are seeded at the base grid and bilinearly resampled when a
// scaled input (TTA) yields a different grid.
template <typename T>
Tensor<T> pos_for_grid(const Tensor<T>& base_pos, std::size_t base_gh, std::size_t base_gw,
                       std::size_t gh, std::size_t gw) {
    if (gh == base_gh && gw == base_gw) return base_pos;
    NoGradGuard ng;
    const std::size_t c = base_pos.dim(1);
    Tensor<T> grid = reshape(base_pos, {base_gh, base_gw, c});
    return reshape(resize_bilinear_raw(grid, gh, gw), {gh * gw, c});
}

template <typename T>
struct ClipEncoder {
    EncoderConfig cfg;
    std::size_t base_grid = 0;  // base tokens per side
    MlpParams<T> patch_embed;   // frozen, unlike the SAM one
    Tensor<T> cls_token;        // 1 x C
    Tensor<T> pos_cls;          // 1 x C
    Tensor<T> pos_grid;         // base_grid^2 x C
    std::vector<TransformerLayer<T>> layers;
    Tensor<T> final_ln_g, final_ln_b;
    MlpParams<T> joint_proj;  // joint_dim x C

    static ClipEncoder build(const EncoderConfig& cfg, std::size_t image_hw) {
        cfg.validate();
        Rng rng(mix_seed(cfg.seed, "clip"));
        ClipEncoder e;
        e.cfg = cfg;
        const std::size_t c = cfg.embed_dim_clip;
        const std::size_t p = cfg.clip_patch_size;
        e.base_grid = image_hw / p;
        e.patch_embed = MlpParams<T>::seeded(c, p * p * 3, rng, 1.0 / std::sqrt(p * p * 3.0));
        e.cls_token = Tensor<T>::gaussian({1, c}, rng, 0.3);
        e.pos_cls = Tensor<T>::gaussian({1, c}, rng, 0.3);
        e.pos_grid = Tensor<T>::gaussian({e.base_grid * e.base_grid, c}, rng, 0.3);
        for (std::size_t i = 0; i < cfg.n_layers_clip; ++i)
            e.layers.push_back(TransformerLayer<T>::seeded(c, cfg.mlp_ratio, rng));
        e.final_ln_g = Tensor<T>::full({c}, T(1));
        e.final_ln_b = Tensor<T>::zeros({c});
        e.joint_proj =
            MlpParams<T>::seeded(cfg.joint_dim, c, rng, 1.0 / std::sqrt(static_cast<double>(c)));
        return e;
    }

    // (f_cls, f_cv^{1..4}); optionally also the patch-embedding grid as a
    // fifth map in stage0 (used by the encoder-only decode path).
    std::pair<ClassEmbedding<T>, StageFeatures<T>> encode_image(const Tensor<T>& img,
                                                                bool with_stage0 = false) const {
        NoGradGuard frozen;  // nothing upstream of CLIP outputs ever trains
        const std::size_t p = cfg.clip_patch_size;
        const std::size_t gh = img.dim(0) / p, gw = img.dim(1) / p;
        Tensor<T> patches = detail::extract_patches(img, p);
        Tensor<T> tok = mlp_apply(patch_embed, patches);
        Tensor<T> pos = concat_rows<T>(
            {pos_cls, pos_for_grid(pos_grid, base_grid, base_grid, gh, gw)});
        Tensor<T> x = add(concat_rows<T>({cls_token, tok}), pos);

        StageFeatures<T> feats;
        feats.source = FeatureSource::clip;
        if (with_stage0)
            feats.stages.push_back(
                reshape(take_rows(x, 1, gh * gw), {gh, gw, cfg.embed_dim_clip}));
        std::size_t next_tap = 0;
        for (std::size_t i = 1; i <= cfg.n_layers_clip; ++i) {
            x = layers[i - 1].forward(x, cfg.n_heads);
            if (next_tap < cfg.clip_taps.size() && cfg.clip_taps[next_tap] == i) {
                feats.stages.push_back(
                    reshape(take_rows(x, 1, gh * gw), {gh, gw, cfg.embed_dim_clip}));
                ++next_tap;
            }
        }
        Tensor<T> cls_row = take_rows(layer_norm(x, final_ln_g, final_ln_b), 0, 1);
        Tensor<T> cls = l2_normalize(reshape(mlp_apply(joint_proj, cls_row), {cfg.joint_dim}));
        return {ClassEmbedding<T>{cls}, std::move(feats)};
    }

    void collect_weights(std::map<std::string, Tensor<T>>& out) const {
        out["encoders/clip/patch_embed/W"] = patch_embed.W;
        out["encoders/clip/patch_embed/b"] = patch_embed.b;
        out["encoders/clip/cls_token"] = cls_token;
        out["encoders/clip/pos_cls"] = pos_cls;
        out["encoders/clip/pos_grid"] = pos_grid;
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].collect("encoders/clip/layer" + std::to_string(i), out);
        out["encoders/clip/final_ln_g"] = final_ln_g;
        out["encoders/clip/final_ln_b"] = final_ln_b;
        out["encoders/clip/joint_proj/W"] = joint_proj.W;
        out["encoders/clip/joint_proj/b"] = joint_proj.b;
    }
};

// ----- CLIP text encoder analog -----

// Deterministic hashed bag-of-tokens embedding: token vectors are seeded by
// the token hash, the bag is projected by a matrix seeded by the prompt hash,
// rows are unit-normalized. Output depends only on the prompt strings and
// joint_dim, so a fixed prompt list always yields the same matrix.
template <typename T>
TextFeatures<T> clip_encode_text(const std::vector<std::string>& prompts,
                                 const EncoderConfig& cfg) {
    if (prompts.size() < 2) throw DataError("clip_encode_text: at least 2 prompts required");
    std::set<std::string> uniq(prompts.begin(), prompts.end());
    if (uniq.size() != prompts.size())
        throw DataError("clip_encode_text: duplicate prompts; classes must be distinguishable");

    const std::size_t d = cfg.joint_dim;
    std::vector<T> mat(prompts.size() * d);
    for (std::size_t k = 0; k < prompts.size(); ++k) {
        std::string lowered;
        lowered.reserve(prompts[k].size());
        for (char c : prompts[k]) lowered.push_back(static_cast<char>(std::tolower(c)));

        std::vector<double> bag(d, 0.0);
        std::size_t start = 0;
        while (start < lowered.size()) {
            while (start < lowered.size() && std::isspace(lowered[start])) ++start;
            std::size_t end = start;
            while (end < lowered.size() && !std::isspace(lowered[end])) ++end;
            if (end > start) {
                Rng tok_rng(mix_seed(detail::fnv1a64(lowered.substr(start, end - start)), "tok"));
                for (std::size_t i = 0; i < d; ++i) bag[i] += tok_rng.gaussian();
            }
            start = end;
        }

        Rng proj_rng(mix_seed(detail::fnv1a64(lowered), "proj"));
        std::vector<double> row(d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                row[i] += proj_rng.gaussian() / std::sqrt(static_cast<double>(d)) * bag[j];
        double norm2 = 0.0;
        for (double v : row) norm2 += v * v;
        const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-30));
        for (std::size_t i = 0; i < d; ++i) mat[k * d + i] = static_cast<T>(row[i] * inv);
    }
    return TextFeatures<T>{Tensor<T>::from_vector({prompts.size(), d}, std::move(mat))};
}

// ----- SAM image encoder analog -----

// Hooks: layer_hook runs on every layer output in token form {L,C} (the FTM
// site); stage_hook runs on the patch-embedding map and each tapped stage in
// grid form {H,W,C} before it feeds the next layer (the SRM site). Hooks must
// preserve shape.
template <typename T>
using LayerHook = std::function<Tensor<T>(std::size_t layer_idx, const Tensor<T>&)>;
template <typename T>
using StageHook = std::function<Tensor<T>(std::size_t stage_idx, const Tensor<T>&)>;

template <typename T>
struct SamEncoder {
    EncoderConfig cfg;
    std::size_t base_grid = 0;
    Tensor<T> pos;  // base_grid^2 x C, frozen
    std::vector<TransformerLayer<T>> layers;

    static SamEncoder build(const EncoderConfig& cfg, std::size_t image_hw) {
        cfg.validate();
        Rng rng(mix_seed(cfg.seed, "sam"));
        SamEncoder e;
        e.cfg = cfg;
        const std::size_t c = cfg.embed_dim_sam;
        e.base_grid = image_hw / cfg.patch_size;
        e.pos = Tensor<T>::gaussian({e.base_grid * e.base_grid, c}, rng, 0.3);
        for (std::size_t i = 0; i < cfg.n_layers_sam; ++i)
            e.layers.push_back(TransformerLayer<T>::seeded(c, cfg.mlp_ratio, rng));
        return e;
    }

    // Seeded init for the externally-owned trainable patch embedding.
    static MlpParams<T> make_patch_embed(const EncoderConfig& cfg, std::uint64_t seed) {
        Rng rng(mix_seed(seed, "sam_patch_embed"));
        const std::size_t in = cfg.patch_size * cfg.patch_size * 3;
        return MlpParams<T>::seeded(cfg.embed_dim_sam, in, rng, 1.0 / std::sqrt(double(in)));
    }

    StageFeatures<T> forward(const Tensor<T>& img, const MlpParams<T>& patch_embed,
                             const LayerHook<T>& layer_hook, const StageHook<T>& stage_hook) const {
        const std::size_t p = cfg.patch_size;
        const std::size_t gh = img.dim(0) / p, gw = img.dim(1) / p;
        const std::size_t c = cfg.embed_dim_sam;

        auto run_stage_hook = [&](std::size_t stage_idx, const Tensor<T>& grid) {
            if (!stage_hook) return grid;
            Tensor<T> out = stage_hook(stage_idx, grid);
            if (out.shape() != grid.shape())
                throw ContractError("stage_hook(" + std::to_string(stage_idx) +
                                    ") changed shape " + shape_str(grid.shape()) + " -> " +
                                    shape_str(out.shape()));
            return out;
        };
        auto run_layer_hook = [&](std::size_t layer_idx, const Tensor<T>& tok) {
            if (!layer_hook) return tok;
            Tensor<T> out = layer_hook(layer_idx, tok);
            if (out.shape() != tok.shape())
                throw ContractError("layer_hook(" + std::to_string(layer_idx) +
                                    ") changed shape " + shape_str(tok.shape()) + " -> " +
                                    shape_str(out.shape()));
            return out;
        };

        Tensor<T> tok = add(mlp_apply(patch_embed, detail::extract_patches(img, p)),
                            pos_for_grid(pos, base_grid, base_grid, gh, gw));
        StageFeatures<T> feats;
        feats.source = FeatureSource::sam;
        Tensor<T> g0 = run_stage_hook(0, reshape(tok, {gh, gw, c}));
        feats.stages.push_back(g0);
        Tensor<T> x = reshape(g0, {gh * gw, c});

        std::size_t next_tap = 0;
        for (std::size_t i = 1; i <= cfg.n_layers_sam; ++i) {
            x = layers[i - 1].forward(x, cfg.n_heads);
            x = run_layer_hook(i - 1, x);
            if (next_tap < cfg.sam_taps.size() && cfg.sam_taps[next_tap] == i) {
                Tensor<T> g = run_stage_hook(next_tap + 1, reshape(x, {gh, gw, c}));
                feats.stages.push_back(g);
                x = reshape(g, {gh * gw, c});
                ++next_tap;
            }
        }
        return feats;
    }

    void collect_weights(std::map<std::string, Tensor<T>>& out) const {
        out["encoders/sam/pos"] = pos;
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].collect("encoders/sam/layer" + std::to_string(i), out);
    }
};

}  // namespace schnet

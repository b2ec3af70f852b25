#pragma once

// Full network: frozen CLIP/SAM analogs + SimModule + SRM stage hooks + FTM
// layer hooks + fusion head. The trainable set is the SAM patch embedding,
// SRM, FTM (tokens, rho, MLPs) and the head; encoder weights are frozen and
// covered by a SHA-256 hash that training must not change.
//
// Injection wiring: f_cv^i is aligned onto the SAM grid and injected into
// f_sv^{i-1} for i in 1..4; the final SAM stage is refined only (config can
// switch it to re-inject the last CLIP map, or do nothing).

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "schnet/config.hpp"
#include "schnet/encoders.hpp"
#include "schnet/ftm.hpp"
#include "schnet/head.hpp"
#include "schnet/serialize.hpp"
#include "schnet/sim.hpp"
#include "schnet/srm.hpp"
#include "schnet/tensor.hpp"

namespace schnet {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
    bool decay;  // weight matrices only; biases, tokens and rho are exempt
};

template <typename T>
class SchnetModel {
  public:
    explicit SchnetModel(const RunConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t base = cfg_.data.crop;
        clip_ = ClipEncoder<T>::build(cfg_.encoder, base);
        sam_ = SamEncoder<T>::build(cfg_.encoder, base);
        txt_ = clip_encode_text<T>(cfg_.prompts_for_classes(), cfg_.encoder);

        const std::size_t k = cfg_.data.num_classes;
        const std::size_t c_clip = cfg_.encoder.embed_dim_clip;
        const std::size_t c_sam = cfg_.encoder.embed_dim_sam;

        if (uses_sam()) {
            patch_embed_ = SamEncoder<T>::make_patch_embed(cfg_.encoder, cfg_.seed);
            register_mlp("patch_embed", *patch_embed_);
        }
        if (uses_srm()) {
            Rng rng(mix_seed(cfg_.seed, "srm"));
            const std::size_t copies = cfg_.srm.shared ? 1 : 5;
            for (std::size_t i = 0; i < copies; ++i)
                srm_.push_back(SrmParams<T>::init(k, c_clip, c_sam, cfg_.srm.squeeze_ratio, rng));
            for (std::size_t i = 0; i < srm_.size(); ++i) {
                const std::string prefix =
                    cfg_.srm.shared ? std::string("srm") : "srm/stage" + std::to_string(i);
                register_mlp(prefix + "/mlp_sim", srm_[i].mlp_sim);
                register_mlp(prefix + "/mlp_proj", srm_[i].mlp_proj);
                register_mlp(prefix + "/mlp_squeeze", srm_[i].mlp_squeeze);
                register_mlp(prefix + "/mlp_expand", srm_[i].mlp_expand);
            }
        }
        if (uses_ftm()) {
            Rng rng(mix_seed(cfg_.seed, "ftm"));
            bank_ = TokenBank<T>::init(cfg_.encoder.n_layers_sam, cfg_.ftm.tokens_per_layer,
                                       c_sam, cfg_.ftm.rho_init, cfg_.ftm.scalar_rho, rng);
            ftm_ = FtmParams<T>::init(cfg_.encoder.n_layers_sam, c_sam, cfg_.ftm.squeeze_ratio,
                                      rng);
            register_param("ftm/tokens", bank_->tokens, /*decay=*/false);
            register_param("ftm/rho", bank_->rho, /*decay=*/false);
            for (std::size_t i = 0; i < cfg_.encoder.n_layers_sam; ++i) {
                const std::string l = "ftm/layer" + std::to_string(i);
                register_mlp(l + "/tok", ftm_->mlp_tok[i]);
                register_mlp(l + "/out", ftm_->mlp_out[i]);
                register_mlp(l + "/mid", ftm_->mlp_mid[i]);
            }
            register_mlp("ftm/down", ftm_->mlp_down);
            register_mlp("ftm/up", ftm_->mlp_up);
        }
        {
            Rng rng(mix_seed(cfg_.seed, "head"));
            const std::size_t c_in = uses_sam() ? c_sam : c_clip;
            head_ = HeadParams<T>::init(c_in, cfg_.head.channels, k, rng);
            for (std::size_t i = 0; i < 5; ++i)
                register_mlp("head/stage" + std::to_string(i), head_.stage_proj[i]);
            register_mlp("head/fuse", head_.fuse);
            register_mlp("head/classifier", head_.classifier);
        }
        frozen_hash_ = compute_frozen_hash();
    }

    bool uses_sam() const { return cfg_.backbone == Backbone::sam; }
    bool uses_srm() const { return uses_sam() && cfg_.srm.enabled; }
    bool uses_ftm() const { return uses_sam() && cfg_.ftm.enabled; }

    // Logits at the input's spatial size.
    Tensor<T> forward(const Tensor<T>& img) {
        if (!uses_sam()) {
            auto [cls, feats] = clip_.encode_image(img, /*with_stage0=*/true);
            return decode_logits(feats, head_, img.dim(0), img.dim(1));
        }

        std::optional<ClassSimilarity<T>> sim;
        std::vector<Tensor<T>> clip_stages;
        if (uses_srm()) {
            auto [cls, cfeats] = clip_.encode_image(img);
            sim = compute_similarity(cls, txt_, static_cast<T>(cfg_.sim.temperature));
            clip_stages = std::move(cfeats.stages);
        }

        StageHook<T> stage_hook;
        if (uses_srm()) {
            stage_hook = [&](std::size_t idx, const Tensor<T>& grid) -> Tensor<T> {
                const SrmParams<T>& p = srm_[cfg_.srm.shared ? 0 : idx];
                if (idx < 4) {
                    Tensor<T> aligned = align_grids(clip_stages[idx], grid.dim(0), grid.dim(1));
                    return srm_refine(srm_inject(aligned, *sim, grid, p), p);
                }
                switch (cfg_.srm.final_stage) {
                    case SrmFinalStage::refine_only:
                        return srm_refine(grid, p);
                    case SrmFinalStage::inject_reuse_last: {
                        Tensor<T> aligned =
                            align_grids(clip_stages[3], grid.dim(0), grid.dim(1));
                        return srm_refine(srm_inject(aligned, *sim, grid, p), p);
                    }
                    case SrmFinalStage::none:
                        return grid;
                }
                return grid;
            };
        }

        LayerHook<T> layer_hook;
        if (uses_ftm()) {
            layer_hook = [&](std::size_t layer, const Tensor<T>& tok) -> Tensor<T> {
                Tensor<T> attached = ftm_attach(tok, *bank_, layer, *ftm_);
                return ftm_refine(attached, tok, layer, *ftm_,
                                  cfg_.ftm.residual == FtmResidual::f_prime);
            };
        }

        StageFeatures<T> stages = sam_.forward(img, *patch_embed_, layer_hook, stage_hook);
        return decode_logits(stages, head_, img.dim(0), img.dim(1));
    }

    // Probability map, graph-free.
    Tensor<T> forward_probs(const Tensor<T>& img) {
        NoGradGuard ng;
        return softmax(forward(img), 2);
    }

    std::vector<NamedParam<T>>& params() { return params_; }
    const std::vector<NamedParam<T>>& params() const { return params_; }

    const HeadParams<T>& head() const { return head_; }
    const RunConfig& cfg() const { return cfg_; }
    const TextFeatures<T>& text_features() const { return txt_; }
    const std::string& frozen_hash() const { return frozen_hash_; }

    std::map<std::string, Tensor<T>> frozen_weights() const {
        std::map<std::string, Tensor<T>> out;
        clip_.collect_weights(out);
        sam_.collect_weights(out);
        return out;
    }

    std::string compute_frozen_hash() const { return hash_named_tensors(frozen_weights()); }

    // Overwrite trainable values from (name -> raw tensor), requiring exact
    // name-set and shape agreement.
    void load_params(const std::map<std::string, RawTensor>& stored) {
        if (stored.size() != params_.size())
            throw IoError("checkpoint holds " + std::to_string(stored.size()) +
                          " tensors, model has " + std::to_string(params_.size()));
        for (auto& p : params_) {
            auto it = stored.find(p.name);
            if (it == stored.end()) throw IoError("checkpoint missing tensor '" + p.name + "'");
            Tensor<T> loaded = it->second.template to<T>();
            if (loaded.shape() != p.tensor.shape())
                throw IoError("checkpoint tensor '" + p.name + "' shape " +
                              shape_str(loaded.shape()) + " != model shape " +
                              shape_str(p.tensor.shape()));
            std::copy(loaded.data(), loaded.data() + loaded.numel(), p.tensor.data());
        }
    }

  private:
    void register_param(const std::string& name, Tensor<T>& t, bool decay) {
        t.set_requires_grad(true);
        params_.push_back(NamedParam<T>{name, t, decay});
    }

    void register_mlp(const std::string& prefix, MlpParams<T>& m) {
        register_param(prefix + "/W", m.W, /*decay=*/true);
        register_param(prefix + "/b", m.b, /*decay=*/false);
    }

    RunConfig cfg_;
    ClipEncoder<T> clip_;
    SamEncoder<T> sam_;
    TextFeatures<T> txt_;
    std::optional<MlpParams<T>> patch_embed_;
    std::vector<SrmParams<T>> srm_;
    std::optional<TokenBank<T>> bank_;
    std::optional<FtmParams<T>> ftm_;
    HeadParams<T> head_;
    std::vector<NamedParam<T>> params_;
    std::string frozen_hash_;
};

}  // namespace schnet

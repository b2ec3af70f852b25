#pragma once

// Fine-tuning module. Per SAM layer:
//   attach:  f' = rho_i * MLP_out(Softmax(f (x) T_i^T) (x) MLP_tok(T_i)) (+) f
//   refine:  f'' = MLP_up(GELU(MLP_mid(GELU(MLP_down(f'))))) (+) f
// The refine residual targets the ORIGINAL layer output f (a config switch
// retargets it to f' for ablations). MLP_down and MLP_up are shared across
// layers; MLP_tok, MLP_out, MLP_mid and rho are per layer. MLP_up starts at
// zero, and with rho = 0 the whole hook is an exact identity.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "schnet/tensor.hpp"

namespace schnet {

template <typename T>
struct TokenBank {
    Tensor<T> tokens;  // n x m x c
    Tensor<T> rho;     // n (per layer) or 1 (scalar mode)
    bool scalar_rho = false;

    std::size_t n_layers() const { return tokens.dim(0); }
    std::size_t tokens_per_layer() const { return tokens.dim(1); }
    std::size_t channels() const { return tokens.dim(2); }

    static TokenBank init(std::size_t n_layers, std::size_t m, std::size_t c, double rho_init,
                          bool scalar_rho, Rng& rng) {
        TokenBank b;
        b.tokens = Tensor<T>::gaussian({n_layers, m, c}, rng, 1.0 / std::sqrt(double(c)));
        b.rho = Tensor<T>::full({scalar_rho ? std::size_t{1} : n_layers}, T(rho_init));
        b.scalar_rho = scalar_rho;
        return b;
    }

    Tensor<T> rho_at(std::size_t layer) const {
        return take_element(rho, scalar_rho ? 0 : layer);
    }

    void set_trainable(bool v) {
        tokens.set_requires_grad(v);
        rho.set_requires_grad(v);
    }
};

template <typename T>
struct FtmParams {
    std::vector<MlpParams<T>> mlp_tok;  // per layer, c -> c
    std::vector<MlpParams<T>> mlp_out;  // per layer, c -> c
    MlpParams<T> mlp_down;              // shared, c -> c/r
    std::vector<MlpParams<T>> mlp_mid;  // per layer, c/r -> c/r
    MlpParams<T> mlp_up;                // shared, c/r -> c, zero-init
    std::size_t squeeze_ratio = 4;

    static FtmParams init(std::size_t n_layers, std::size_t c, std::size_t ratio, Rng& rng) {
        if (ratio == 0 || c % ratio)
            throw ConfigError("ftm squeeze ratio must divide the SAM channel dim");
        FtmParams p;
        p.squeeze_ratio = ratio;
        const double s = 1.0 / std::sqrt(static_cast<double>(c));
        const std::size_t cr = c / ratio;
        for (std::size_t i = 0; i < n_layers; ++i) {
            p.mlp_tok.push_back(MlpParams<T>::seeded(c, c, rng, s));
            p.mlp_out.push_back(MlpParams<T>::seeded(c, c, rng, s));
            p.mlp_mid.push_back(
                MlpParams<T>::seeded(cr, cr, rng, 1.0 / std::sqrt(static_cast<double>(cr))));
        }
        p.mlp_down = MlpParams<T>::seeded(cr, c, rng, s);
        p.mlp_up = MlpParams<T>::zeros(c, cr);
        return p;
    }

    void set_trainable(bool v) {
        for (auto& m : mlp_tok) m.set_trainable(v);
        for (auto& m : mlp_out) m.set_trainable(v);
        for (auto& m : mlp_mid) m.set_trainable(v);
        mlp_down.set_trainable(v);
        mlp_up.set_trainable(v);
    }

    void collect(const std::string& prefix, std::map<std::string, Tensor<T>>& out) const {
        auto put = [&](const std::string& name, const MlpParams<T>& m) {
            out[prefix + "/" + name + "/W"] = m.W;
            out[prefix + "/" + name + "/b"] = m.b;
        };
        for (std::size_t i = 0; i < mlp_tok.size(); ++i) {
            const std::string l = "layer" + std::to_string(i);
            put(l + "/tok", mlp_tok[i]);
            put(l + "/out", mlp_out[i]);
            put(l + "/mid", mlp_mid[i]);
        }
        put("down", mlp_down);
        put("up", mlp_up);
    }
};

template <typename T>
Tensor<T> ftm_attach(const Tensor<T>& f_i, const TokenBank<T>& bank, std::size_t layer,
                     const FtmParams<T>& p) {
    if (layer >= bank.n_layers())
        throw std::out_of_range("ftm_attach: layer " + std::to_string(layer) + " out of " +
                                std::to_string(bank.n_layers()));
    const std::size_t m = bank.tokens_per_layer(), c = bank.channels();
    if (f_i.rank() != 2 || f_i.dim(1) != c)
        throw ShapeError("ftm_attach: feature " + shape_str(f_i.shape()) +
                         " incompatible with token dim " + std::to_string(c));
    Tensor<T> t_i =
        take_rows(reshape(bank.tokens, {bank.n_layers() * m, c}), layer * m, m);
    Tensor<T> attn = softmax(matmul(f_i, transpose2d(t_i)), 1);  // L x m, rows sum to 1
    Tensor<T> value = mlp_apply(p.mlp_tok[layer], t_i);
    Tensor<T> out = mlp_apply(p.mlp_out[layer], matmul(attn, value));
    return add(scalar_gate(out, bank.rho_at(layer)), f_i);
}

template <typename T>
Tensor<T> ftm_refine(const Tensor<T>& f_prime, const Tensor<T>& f_i, std::size_t layer,
                     const FtmParams<T>& p, bool residual_to_f_prime = false) {
    if (f_prime.shape() != f_i.shape())
        throw ShapeError("ftm_refine: shapes " + shape_str(f_prime.shape()) + " and " +
                         shape_str(f_i.shape()) + " differ");
    if (layer >= p.mlp_mid.size())
        throw std::out_of_range("ftm_refine: layer " + std::to_string(layer) + " out of " +
                                std::to_string(p.mlp_mid.size()));
    Tensor<T> h = gelu(mlp_apply(p.mlp_down, f_prime));
    h = gelu(mlp_apply(p.mlp_mid[layer], h));
    return add(mlp_apply(p.mlp_up, h), residual_to_f_prime ? f_prime : f_i);
}

}  // namespace schnet

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "schnet/ftm.hpp"
#include "schnet/gradcheck.hpp"
#include "schnet/sim.hpp"
#include "schnet/srm.hpp"

using namespace schnet;

namespace {

double gelu_ref(double x) { return x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

template <typename T>
std::vector<T> affine_ref(const MlpParams<T>& p, const std::vector<T>& x, std::size_t L) {
    const std::size_t in = p.in_dim(), out = p.out_dim();
    std::vector<T> y(L * out);
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t o = 0; o < out; ++o) {
            T s = 0;
            for (std::size_t i = 0; i < in; ++i) s += p.W.vec()[o * in + i] * x[l * in + i];
            y[l * out + o] = s + p.b.vec()[o];
        }
    return y;
}

}  // namespace

// ----- Eq. 1: similarity -----

TEST(Sim, UniformWhenRowsEqual) {
    ClassEmbedding<float> cls{Tensor<float>::from_vector({3}, {0.5f, 0.5f, 0.7f})};
    // all rows identical -> equal logits -> uniform probabilities
    std::vector<float> rows;
    for (int k = 0; k < 4; ++k) {
        rows.push_back(0.1f);
        rows.push_back(-0.4f);
        rows.push_back(0.9f);
    }
    TextFeatures<float> txt{Tensor<float>::from_vector({4, 3}, rows)};
    auto sim = compute_similarity(cls, txt);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(sim.probs.vec()[k], 0.25f, 1e-6f);
}

TEST(Sim, DerivedTwoClassValue) {
    // cls=[1,0], txt rows {[1,0],[0,1]} -> logits [1,0] -> softmax via
    // high-precision oracle e/(e+1)
    ClassEmbedding<float> cls{Tensor<float>::from_vector({2}, {1, 0})};
    TextFeatures<float> txt{Tensor<float>::from_vector({2, 2}, {1, 0, 0, 1})};
    auto sim = compute_similarity(cls, txt, 1.0f);
    const double e = std::exp(1.0);
    EXPECT_NEAR(sim.probs.vec()[0], e / (e + 1.0), 1e-4);
    EXPECT_NEAR(sim.probs.vec()[1], 1.0 / (e + 1.0), 1e-4);
    double sum = sim.probs.vec()[0] + sim.probs.vec()[1];
    EXPECT_NEAR(sum, 1.0, 1e-6);
}

TEST(Sim, PermutationEquivariance) {
    Rng rng(71);
    ClassEmbedding<float> cls{l2_normalize(Tensor<float>::gaussian({8}, rng, 1.0))};
    auto txt_t = Tensor<float>::gaussian({5, 8}, rng, 1.0);
    TextFeatures<float> txt{txt_t};
    auto base = compute_similarity(cls, txt);

    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<float> permuted(5 * 8);
    for (std::size_t k = 0; k < 5; ++k)
        std::copy(txt_t.data() + perm[k] * 8, txt_t.data() + (perm[k] + 1) * 8,
                  permuted.begin() + k * 8);
    TextFeatures<float> txt_p{Tensor<float>::from_vector({5, 8}, permuted)};
    auto out = compute_similarity(cls, txt_p);
    for (std::size_t k = 0; k < 5; ++k)
        EXPECT_EQ(out.probs.vec()[k], base.probs.vec()[perm[k]]);
}

TEST(Sim, TemperatureScalingEquivalence) {
    // scaling cls by lambda at temperature t == unscaled at t/lambda
    Rng rng(73);
    auto v = Tensor<float>::gaussian({6}, rng, 1.0);
    TextFeatures<float> txt{Tensor<float>::gaussian({4, 6}, rng, 1.0)};
    const float lambda = 2.5f;
    std::vector<float> scaled(6);
    for (int i = 0; i < 6; ++i) scaled[i] = v.vec()[i] * lambda;
    auto a = compute_similarity(ClassEmbedding<float>{v}, txt, 1.0f / lambda);
    auto b = compute_similarity(ClassEmbedding<float>{Tensor<float>::from_vector({6}, scaled)},
                                txt, 1.0f);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(a.probs.vec()[k], b.probs.vec()[k], 1e-6f);
}

TEST(Sim, DimMismatchIsShapeError) {
    ClassEmbedding<float> cls{Tensor<float>::zeros({3})};
    TextFeatures<float> txt{Tensor<float>::zeros({4, 5})};
    EXPECT_THROW(compute_similarity(cls, txt), ShapeError);
}

// ----- align_grids -----

TEST(AlignGrids, IdentityAndConstant) {
    Rng rng(79);
    auto f = Tensor<float>::gaussian({4, 4, 3}, rng, 1.0);
    auto same = align_grids(f, 4, 4);
    EXPECT_EQ(0, std::memcmp(same.data(), f.data(), f.numel() * sizeof(float)));

    auto c = Tensor<float>::full({2, 3, 2}, 1.75f);
    auto up = align_grids(c, 7, 5);
    for (std::size_t i = 0; i < up.numel(); ++i) EXPECT_FLOAT_EQ(up.vec()[i], 1.75f);
}

TEST(AlignGrids, RampMatchesClosedFormBilinear) {
    // 2x2 ramp upsampled to 4x4, checked against explicitly computed
    // half-pixel-center bilinear weights
    auto f = Tensor<double>::from_vector({2, 2, 1}, {0.0, 1.0, 2.0, 3.0});
    auto up = align_grids(f, 4, 4);
    auto src_at = [&](std::size_t y, std::size_t x) { return f.vec()[y * 2 + x]; };
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
            auto coord = [](std::size_t d) {
                double pos = (d + 0.5) * 2.0 / 4.0 - 0.5;
                return std::min(std::max(pos, 0.0), 1.0);
            };
            double fy = coord(y), fx = coord(x);
            std::size_t y0 = static_cast<std::size_t>(std::floor(fy));
            std::size_t x0 = static_cast<std::size_t>(std::floor(fx));
            std::size_t y1 = std::min<std::size_t>(y0 + 1, 1), x1 = std::min<std::size_t>(x0 + 1, 1);
            double wy = fy - y0, wx = fx - x0;
            double expect = (1 - wy) * ((1 - wx) * src_at(y0, x0) + wx * src_at(y0, x1)) +
                            wy * ((1 - wx) * src_at(y1, x0) + wx * src_at(y1, x1));
            EXPECT_NEAR(up.vec()[y * 4 + x], expect, 1e-6);
        }
}

// ----- Eq. 2: injection -----

TEST(Srm, ZeroProjIsExactIdentity) {
    Rng rng(83);
    SrmParams<float> p = SrmParams<float>::init(4, 3, 6, 2, rng);
    ClassSimilarity<float> sim{Tensor<float>::from_vector({4}, {0.1f, 0.2f, 0.3f, 0.4f})};
    auto f_cv = Tensor<float>::gaussian({2, 2, 3}, rng, 1.0);
    auto f_sv = Tensor<float>::gaussian({2, 2, 6}, rng, 1.0);
    auto out = srm_inject(f_cv, sim, f_sv, p);
    EXPECT_EQ(0, std::memcmp(out.data(), f_sv.data(), f_sv.numel() * sizeof(float)));
}

TEST(Srm, UniformSimIdentityMlpIsScalarBroadcast) {
    // K == C_clip, mlp_sim = identity, uniform similarity: the CLIP branch
    // reduces to mlp_proj(f_cv / K)
    Rng rng(89);
    SrmParams<float> p = SrmParams<float>::init(2, 2, 4, 2, rng);
    p.mlp_sim.W = Tensor<float>::from_vector({2, 2}, {1, 0, 0, 1});
    p.mlp_sim.b = Tensor<float>::zeros({2});
    p.mlp_proj = MlpParams<float>::seeded(4, 2, rng, 0.7);

    ClassSimilarity<float> sim{Tensor<float>::from_vector({2}, {0.5f, 0.5f})};
    auto f_cv = Tensor<float>::gaussian({2, 2, 2}, rng, 1.0);
    auto f_sv = Tensor<float>::zeros({2, 2, 4});
    auto out = srm_inject(f_cv, sim, f_sv, p);

    std::vector<float> scaled(f_cv.numel());
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = f_cv.vec()[i] * 0.5f;
    auto expect = affine_ref(p.mlp_proj, scaled, 4);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out.vec()[i], expect[i], 1e-6f);
}

TEST(Srm, SinglePixelHandOracle) {
    // 1x1 grid, K=2, all dims 2: full loop-evaluated oracle of
    // MLP(f_cv (.) MLP(f_sim)) (+) f_sv
    SrmParams<float> p;
    p.squeeze_ratio = 1;
    p.mlp_sim.W = Tensor<float>::from_vector({2, 2}, {1, 2, 3, 4});
    p.mlp_sim.b = Tensor<float>::from_vector({2}, {0.1f, -0.2f});
    p.mlp_proj.W = Tensor<float>::from_vector({2, 2}, {0.5f, -0.5f, 1.0f, 1.0f});
    p.mlp_proj.b = Tensor<float>::from_vector({2}, {0.0f, 0.25f});
    p.mlp_squeeze = MlpParams<float>::zeros(2, 2);
    p.mlp_expand = MlpParams<float>::zeros(2, 2);

    ClassSimilarity<float> sim{Tensor<float>::from_vector({2}, {0.3f, 0.7f})};
    auto f_cv = Tensor<float>::from_vector({1, 1, 2}, {0.5f, -1.0f});
    auto f_sv = Tensor<float>::from_vector({1, 1, 2}, {1.0f, 2.0f});
    auto out = srm_inject(f_cv, sim, f_sv, p);

    auto s = affine_ref(p.mlp_sim, sim.probs.vec(), 1);
    std::vector<float> gated{f_cv.vec()[0] * s[0], f_cv.vec()[1] * s[1]};
    auto proj = affine_ref(p.mlp_proj, gated, 1);
    EXPECT_NEAR(out.vec()[0], proj[0] + 1.0f, 1e-6f);
    EXPECT_NEAR(out.vec()[1], proj[1] + 2.0f, 1e-6f);
}

// ----- Eq. 4: squeeze/expand refinement -----

TEST(Srm, ZeroExpandIsExactIdentity) {
    Rng rng(97);
    SrmParams<float> p = SrmParams<float>::init(3, 2, 4, 2, rng);
    auto f = Tensor<float>::gaussian({2, 2, 4}, rng, 1.0);
    auto out = srm_refine(f, p);
    EXPECT_EQ(0, std::memcmp(out.data(), f.data(), f.numel() * sizeof(float)));
}

TEST(Srm, UnitRatioIdentityMlpsGiveFPlusGeluF) {
    SrmParams<float> p;
    p.squeeze_ratio = 1;
    p.mlp_squeeze.W = Tensor<float>::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    p.mlp_squeeze.b = Tensor<float>::zeros({3});
    p.mlp_expand.W = Tensor<float>::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    p.mlp_expand.b = Tensor<float>::zeros({3});
    Rng rng(101);
    auto f = Tensor<float>::gaussian({1, 2, 3}, rng, 1.5);
    auto out = srm_refine(f, p);
    for (std::size_t i = 0; i < f.numel(); ++i)
        EXPECT_NEAR(out.vec()[i], f.vec()[i] + gelu_ref(f.vec()[i]), 1e-6f);
}

TEST(Srm, GradCheckThroughInjectAndRefine) {
    Rng rng(103);
    SrmParams<double> p = SrmParams<double>::init(3, 2, 4, 2, rng);
    // randomize the zero-init branches so every path carries gradient
    p.mlp_proj = MlpParams<double>::seeded(4, 2, rng, 0.4);
    p.mlp_expand = MlpParams<double>::seeded(4, 2, rng, 0.4);
    p.set_trainable(true);

    ClassSimilarity<double> sim{Tensor<double>::from_vector({3}, {0.2, 0.5, 0.3})};
    auto f_cv = Tensor<double>::gaussian({2, 2, 2}, rng, 1.0);
    auto f_sv = Tensor<double>::gaussian({2, 2, 4}, rng, 1.0);
    auto w = Tensor<double>::gaussian({2, 2, 4}, rng, 1.0);

    auto loss = [&] { return sum_all(mul(srm_refine(srm_inject(f_cv, sim, f_sv, p), p), w)); };
    std::vector<std::pair<std::string, Tensor<double>>> params{
        {"sim/W", p.mlp_sim.W},         {"sim/b", p.mlp_sim.b},
        {"proj/W", p.mlp_proj.W},       {"proj/b", p.mlp_proj.b},
        {"squeeze/W", p.mlp_squeeze.W}, {"squeeze/b", p.mlp_squeeze.b},
        {"expand/W", p.mlp_expand.W},   {"expand/b", p.mlp_expand.b}};
    auto report = finite_diff_grad_check<double>(loss, params, 1e-5, 1e-4);
    EXPECT_TRUE(report.passed()) << report.worst_rel_err;
}

// ----- Eq. 5: token attachment -----

TEST(Ftm, ZeroRhoIsExactIdentity) {
    Rng rng(107);
    TokenBank<float> bank = TokenBank<float>::init(3, 4, 6, 0.0, false, rng);
    FtmParams<float> p = FtmParams<float>::init(3, 6, 2, rng);
    auto f = Tensor<float>::gaussian({5, 6}, rng, 1.0);
    auto out = ftm_attach(f, bank, 1, p);
    EXPECT_EQ(0, std::memcmp(out.data(), f.data(), f.numel() * sizeof(float)));
}

TEST(Ftm, SingleTokenDegenerateSoftmax) {
    // m=1: attention is an all-ones column; output broadcasts
    // rho * mlp_out(mlp_tok(T_i)) over positions
    Rng rng(109);
    TokenBank<float> bank = TokenBank<float>::init(2, 1, 3, 0.5, false, rng);
    FtmParams<float> p = FtmParams<float>::init(2, 3, 1, rng);
    auto f = Tensor<float>::gaussian({4, 3}, rng, 1.0);
    auto out = ftm_attach(f, bank, 0, p);

    std::vector<float> t_i(bank.tokens.data(), bank.tokens.data() + 3);
    auto v = affine_ref(p.mlp_tok[0], t_i, 1);
    auto o = affine_ref(p.mlp_out[0], v, 1);
    for (std::size_t l = 0; l < 4; ++l)
        for (std::size_t c = 0; c < 3; ++c)
            EXPECT_NEAR(out.vec()[l * 3 + c], 0.5f * o[c] + f.vec()[l * 3 + c], 1e-6f);
}

TEST(Ftm, HandOracleL2M2C2) {
    // full loop evaluation of Eq. 5 on a 2x2x2 instance
    TokenBank<float> bank;
    bank.tokens = Tensor<float>::from_vector({1, 2, 2}, {0.5f, -1.0f, 1.5f, 0.25f});
    bank.rho = Tensor<float>::from_vector({1}, {0.3f});
    FtmParams<float> p;
    p.squeeze_ratio = 1;
    p.mlp_tok.push_back({Tensor<float>::from_vector({2, 2}, {1, -1, 2, 0.5f}),
                         Tensor<float>::from_vector({2}, {0.1f, 0.0f})});
    p.mlp_out.push_back({Tensor<float>::from_vector({2, 2}, {0.5f, 0.5f, -0.25f, 1.0f}),
                         Tensor<float>::from_vector({2}, {0.0f, -0.1f})});
    p.mlp_mid.push_back(MlpParams<float>::zeros(2, 2));
    p.mlp_down = MlpParams<float>::zeros(2, 2);
    p.mlp_up = MlpParams<float>::zeros(2, 2);

    auto f = Tensor<float>::from_vector({2, 2}, {1.0f, 0.5f, -0.5f, 2.0f});
    auto out = ftm_attach(f, bank, 0, p);

    // oracle
    const float* t = bank.tokens.data();
    for (int l = 0; l < 2; ++l) {
        double s0 = f.vec()[l * 2] * t[0] + f.vec()[l * 2 + 1] * t[1];
        double s1 = f.vec()[l * 2] * t[2] + f.vec()[l * 2 + 1] * t[3];
        double mx = std::max(s0, s1);
        double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
        double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        std::vector<float> tok(t, t + 4);
        auto v = affine_ref(p.mlp_tok[0], tok, 2);  // 2 tokens x 2
        double mix0 = a0 * v[0] + a1 * v[2];
        double mix1 = a0 * v[1] + a1 * v[3];
        std::vector<float> mix{static_cast<float>(mix0), static_cast<float>(mix1)};
        auto o = affine_ref(p.mlp_out[0], mix, 1);
        for (int c = 0; c < 2; ++c)
            EXPECT_NEAR(out.vec()[l * 2 + c], 0.3f * o[c] + f.vec()[l * 2 + c], 1e-6f);
    }
}

TEST(Ftm, AttentionRowsSumToOne) {
    Rng rng(113);
    auto f = Tensor<float>::gaussian({6, 4}, rng, 2.0);
    auto tokens = Tensor<float>::gaussian({3, 4}, rng, 1.0);
    auto attn = softmax(matmul(f, transpose2d(tokens)), 1);
    for (std::size_t l = 0; l < 6; ++l) {
        float s = 0;
        for (std::size_t m = 0; m < 3; ++m) s += attn.vec()[l * 3 + m];
        EXPECT_NEAR(s, 1.0f, 1e-6f);
    }
}

// ----- Eq. 6: three-MLP refinement -----

TEST(Ftm, ZeroUpDiscardsFPrime) {
    Rng rng(127);
    FtmParams<float> p = FtmParams<float>::init(2, 4, 2, rng);  // mlp_up zero-init
    auto f_i = Tensor<float>::gaussian({3, 4}, rng, 1.0);
    auto f_prime = Tensor<float>::gaussian({3, 4}, rng, 1.0);  // unrelated
    auto out = ftm_refine(f_prime, f_i, 0, p);
    EXPECT_EQ(0, std::memcmp(out.data(), f_i.data(), f_i.numel() * sizeof(float)));
}

TEST(Ftm, AllZeroChainPassesFiThrough) {
    FtmParams<float> p;
    p.squeeze_ratio = 2;
    p.mlp_tok.push_back(MlpParams<float>::zeros(4, 4));
    p.mlp_out.push_back(MlpParams<float>::zeros(4, 4));
    p.mlp_mid.push_back(MlpParams<float>::zeros(2, 2));
    p.mlp_down = MlpParams<float>::zeros(2, 4);
    p.mlp_up = MlpParams<float>::zeros(4, 2);
    Rng rng(131);
    auto f_i = Tensor<float>::gaussian({3, 4}, rng, 1.0);
    auto out = ftm_refine(f_i, f_i, 0, p);
    EXPECT_EQ(0, std::memcmp(out.data(), f_i.data(), f_i.numel() * sizeof(float)));
}

TEST(Ftm, ResidualTargetsOriginalFi) {
    // with a non-trivial chain, output - chain(f') must equal f_i, not f'
    Rng rng(137);
    FtmParams<float> p = FtmParams<float>::init(1, 4, 2, rng);
    p.mlp_up = MlpParams<float>::seeded(4, 2, rng, 0.5);
    auto f_i = Tensor<float>::gaussian({2, 4}, rng, 1.0);
    auto f_prime = Tensor<float>::gaussian({2, 4}, rng, 1.0);
    auto out = ftm_refine(f_prime, f_i, 0, p);

    auto h1 = affine_ref(p.mlp_down, f_prime.vec(), 2);
    for (auto& v : h1) v = static_cast<float>(gelu_ref(v));
    auto h2 = affine_ref(p.mlp_mid[0], h1, 2);
    for (auto& v : h2) v = static_cast<float>(gelu_ref(v));
    auto up = affine_ref(p.mlp_up, h2, 2);
    for (std::size_t i = 0; i < out.numel(); ++i)
        EXPECT_NEAR(out.vec()[i], up[i] + f_i.vec()[i], 1e-6f);

    auto out_fp = ftm_refine(f_prime, f_i, 0, p, /*residual_to_f_prime=*/true);
    for (std::size_t i = 0; i < out.numel(); ++i)
        EXPECT_NEAR(out_fp.vec()[i], up[i] + f_prime.vec()[i], 1e-6f);
}

TEST(Ftm, GradCheckThroughAttachAndRefine) {
    // L=4, m=2, c=4; all parameter groups at tol 1e-4 in f64
    Rng rng(139);
    TokenBank<double> bank = TokenBank<double>::init(1, 2, 4, 0.5, false, rng);
    FtmParams<double> p = FtmParams<double>::init(1, 4, 2, rng);
    p.mlp_up = MlpParams<double>::seeded(4, 2, rng, 0.4);
    bank.set_trainable(true);
    p.set_trainable(true);

    auto f = Tensor<double>::gaussian({4, 4}, rng, 1.0);
    auto w = Tensor<double>::gaussian({4, 4}, rng, 1.0);
    auto loss = [&] {
        auto attached = ftm_attach(f, bank, 0, p);
        return sum_all(mul(ftm_refine(attached, f, 0, p), w));
    };
    std::vector<std::pair<std::string, Tensor<double>>> params{
        {"tokens", bank.tokens},   {"rho", bank.rho},
        {"tok/W", p.mlp_tok[0].W}, {"tok/b", p.mlp_tok[0].b},
        {"out/W", p.mlp_out[0].W}, {"out/b", p.mlp_out[0].b},
        {"down/W", p.mlp_down.W},  {"down/b", p.mlp_down.b},
        {"mid/W", p.mlp_mid[0].W}, {"mid/b", p.mlp_mid[0].b},
        {"up/W", p.mlp_up.W},      {"up/b", p.mlp_up.b}};
    auto report = finite_diff_grad_check<double>(loss, params, 1e-5, 1e-4);
    EXPECT_TRUE(report.passed()) << report.worst_rel_err;
}

TEST(Ftm, SharedMlpAffectsEveryLayer) {
    // the shared down/up projections are single instances: nudging them
    // changes the refine output at every layer
    Rng rng(149);
    TokenBank<float> bank = TokenBank<float>::init(3, 2, 4, 0.5, false, rng);
    FtmParams<float> p = FtmParams<float>::init(3, 4, 2, rng);
    p.mlp_up = MlpParams<float>::seeded(4, 2, rng, 0.5);
    auto f = Tensor<float>::gaussian({3, 4}, rng, 1.0);

    std::vector<Tensor<float>> before;
    for (std::size_t l = 0; l < 3; ++l) before.push_back(ftm_refine(f, f, l, p));
    p.mlp_down.W.data()[0] += 0.25f;
    for (std::size_t l = 0; l < 3; ++l) {
        auto after = ftm_refine(f, f, l, p);
        EXPECT_NE(0, std::memcmp(after.data(), before[l].data(), f.numel() * sizeof(float)))
            << "layer " << l;
    }
}

TEST(Ftm, TokenGradientFlowsAfterOneStep) {
    // At the mandated init the zero mlp_up blocks token gradients; one
    // training step moves mlp_up off zero, after which every used layer's
    // tokens receive gradient.
    Rng rng(151);
    TokenBank<double> bank = TokenBank<double>::init(2, 2, 4, 1e-4, false, rng);
    FtmParams<double> p = FtmParams<double>::init(2, 4, 2, rng);
    bank.set_trainable(true);
    p.set_trainable(true);
    auto f = Tensor<double>::gaussian({3, 4}, rng, 1.0);

    std::vector<Tensor<double>> trainables{bank.tokens,   bank.rho,        p.mlp_tok[0].W,
                                           p.mlp_tok[0].b, p.mlp_tok[1].W, p.mlp_tok[1].b,
                                           p.mlp_out[0].W, p.mlp_out[0].b, p.mlp_out[1].W,
                                           p.mlp_out[1].b, p.mlp_mid[0].W, p.mlp_mid[0].b,
                                           p.mlp_mid[1].W, p.mlp_mid[1].b, p.mlp_down.W,
                                           p.mlp_down.b,   p.mlp_up.W,     p.mlp_up.b};
    auto loss = [&] {
        Tensor<double> x = f;
        for (std::size_t l = 0; l < 2; ++l) {
            auto attached = ftm_attach(x, bank, l, p);
            x = ftm_refine(attached, x, l, p);
        }
        return sum_all(mul(x, x));
    };

    auto run_backward = [&] {
        for (auto& t : trainables) t.zero_grad();
        loss().backward();
    };
    run_backward();
    // one plain gradient step
    for (auto& t : trainables) {
        if (!t.has_grad()) continue;
        for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] -= 0.1 * t.grad()[i];
    }
    run_backward();

    ASSERT_TRUE(bank.tokens.has_grad());
    const auto& g = bank.tokens.grad();
    for (std::size_t layer = 0; layer < 2; ++layer) {
        bool any = false;
        for (std::size_t i = 0; i < 8; ++i) any = any || g[layer * 8 + i] != 0.0;
        EXPECT_TRUE(any) << "no token gradient at layer " << layer;
    }
}

TEST(Ftm, LayerOutOfRangeThrows) {
    Rng rng(157);
    TokenBank<float> bank = TokenBank<float>::init(2, 2, 4, 0.1, false, rng);
    FtmParams<float> p = FtmParams<float>::init(2, 4, 2, rng);
    auto f = Tensor<float>::gaussian({3, 4}, rng, 1.0);
    EXPECT_THROW(ftm_attach(f, bank, 2, p), std::out_of_range);
}

TEST(Ftm, ScalarRhoModeSharesOneGate) {
    Rng rng(163);
    TokenBank<float> bank = TokenBank<float>::init(3, 2, 4, 0.25, true, rng);
    EXPECT_EQ(bank.rho.numel(), 1u);
    auto r0 = bank.rho_at(0), r2 = bank.rho_at(2);
    EXPECT_FLOAT_EQ(r0.item(), 0.25f);
    EXPECT_FLOAT_EQ(r2.item(), 0.25f);
}

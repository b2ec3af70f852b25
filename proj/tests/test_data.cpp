#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <set>

#include "schnet/data.hpp"

using namespace schnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("schnet_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

SynthConfig small_cfg(std::size_t n_train = 8, std::size_t n_val = 4) {
    SynthConfig cfg;
    cfg.n_train = n_train;
    cfg.n_val = n_val;
    return cfg;
}

}  // namespace

TEST(Pnm, WriteReadRoundTripBitwise) {
    Sample s = render_synthetic_sample(small_cfg(), "rt", 123);
    auto dir = temp_dir("pnm_rt");
    write_sample(s, (dir / "img.ppm").string(), (dir / "mask.pgm").string());
    Sample back = read_sample((dir / "img.ppm").string(), (dir / "mask.pgm").string(), "rt");

    ASSERT_EQ(back.image.shape(), s.image.shape());
    EXPECT_EQ(0, std::memcmp(back.image.data(), s.image.data(),
                             s.image.numel() * sizeof(float)));
    EXPECT_EQ(back.mask.ids, s.mask.ids);

    // file-level: write(read(file)) == file
    write_sample(back, (dir / "img2.ppm").string(), (dir / "mask2.pgm").string());
    EXPECT_EQ(file_bytes(dir / "img.ppm"), file_bytes(dir / "img2.ppm"));
    EXPECT_EQ(file_bytes(dir / "mask.pgm"), file_bytes(dir / "mask2.pgm"));
}

TEST(Pnm, IgnoreLabelConvention) {
    Mask m{2, 2, {0, 5, 255, 1}};
    auto bytes = encode_pgm(m);
    Mask back = decode_pgm(bytes.data(), bytes.size());
    EXPECT_EQ(back.ids[2], kIgnoreLabel);
}

TEST(Pnm, HeaderCommentsAndWhitespace) {
    std::string txt = "P5 # comment\n# another\n 3\t2 \n255\nABCDEF";
    std::vector<std::uint8_t> bytes(txt.begin(), txt.end());
    Mask m = decode_pgm(bytes.data(), bytes.size());
    EXPECT_EQ(m.w, 3u);
    EXPECT_EQ(m.h, 2u);
    EXPECT_EQ(m.ids[0], 'A');
}

TEST(Pnm, FuzzTruncationAndCorruptionNeverCrashes) {
    Sample s = render_synthetic_sample(small_cfg(), "fuzz", 99);
    auto ppm = encode_ppm(s.image);
    auto pgm = encode_pgm(s.mask);
    Rng rng(2024);
    int format_errors = 0, total = 0;
    for (int i = 0; i < 500; ++i) {
        std::size_t cut = rng.uniform_index(ppm.size());
        ++total;
        try {
            decode_ppm(ppm.data(), cut);
        } catch (const FormatError& e) {
            EXPECT_LE(e.offset, ppm.size());
            ++format_errors;
        }
    }
    for (int i = 0; i < 250; ++i) {
        auto copy = pgm;
        std::size_t at = rng.uniform_index(std::min<std::size_t>(copy.size(), 16));
        copy[at] = static_cast<std::uint8_t>(rng.uniform_index(256));
        ++total;
        try {
            decode_pgm(copy.data(), copy.size());
        } catch (const FormatError&) {
            ++format_errors;
        }
    }
    for (int i = 0; i < 250; ++i) {
        std::size_t cut = rng.uniform_index(pgm.size());
        ++total;
        try {
            decode_pgm(pgm.data(), cut);
        } catch (const FormatError&) {
            ++format_errors;
        }
    }
    EXPECT_EQ(total, 1000);
    EXPECT_GT(format_errors, 900);  // most mutations break the format
}

TEST(Synthetic, DeterministicFiles) {
    auto cfg = small_cfg(3, 2);
    auto d1 = temp_dir("gen_a");
    auto d2 = temp_dir("gen_b");
    generate_synthetic(cfg, d1.string());
    generate_synthetic(cfg, d2.string());
    for (const auto& rel :
         {"manifest.tsv", "images/train_00000.ppm", "masks/val_00001.pgm"}) {
        EXPECT_EQ(file_bytes(d1 / rel), file_bytes(d2 / rel)) << rel;
    }

    SynthConfig other = cfg;
    other.seed = cfg.seed + 1;
    auto d3 = temp_dir("gen_c");
    generate_synthetic(other, d3.string());
    EXPECT_NE(file_bytes(d1 / "images/train_00000.ppm"),
              file_bytes(d3 / "images/train_00000.ppm"));
}

TEST(Synthetic, SmallKOnlyUsesAvailableClasses) {
    auto cfg = small_cfg(6, 0);
    cfg.num_classes = 2;
    for (std::size_t i = 0; i < cfg.n_train; ++i) {
        Sample s = render_synthetic_sample(cfg, "k2", mix_seed(cfg.seed, "k2" + std::to_string(i)));
        for (std::uint8_t v : s.mask.ids) EXPECT_LT(v, 2);
    }
}

TEST(Synthetic, ClassPresenceAudit) {
    SynthConfig cfg;  // default: K=6, canvas 64
    const int n = 120;
    std::vector<int> present(cfg.num_classes, 0);
    for (int i = 0; i < n; ++i) {
        Sample s = render_synthetic_sample(cfg, "audit",
                                           mix_seed(cfg.seed, "audit" + std::to_string(i)));
        std::set<std::uint8_t> classes(s.mask.ids.begin(), s.mask.ids.end());
        for (std::uint8_t k = 0; k < cfg.num_classes; ++k)
            if (classes.count(k)) ++present[k];
    }
    for (std::size_t k = 1; k < cfg.num_classes; ++k)
        EXPECT_GE(present[k], static_cast<int>(0.95 * n)) << "class " << k;
}

TEST(Synthetic, UnwritablePathIsIoError) {
    EXPECT_THROW(generate_synthetic(small_cfg(1, 0), "/proc/definitely/not/writable"), IoError);
}

TEST(Dataset, LoadMatchesGenerated) {
    auto cfg = small_cfg(3, 2);
    auto dir = temp_dir("load");
    generate_synthetic(cfg, dir.string());
    Dataset ds = load_dataset(dir.string());
    ASSERT_EQ(ds.train.size(), 3u);
    ASSERT_EQ(ds.val.size(), 2u);
    EXPECT_EQ(ds.train[0].id, "train_00000");
    EXPECT_EQ(ds.val[1].image.dim(0), cfg.canvas);
}

TEST(Augment, OutputDimsAlwaysFixed) {
    Sample s = render_synthetic_sample(small_cfg(), "dims", 7);
    Rng rng(55);
    for (int i = 0; i < 1000; ++i) {
        Sample a = augment_sample(s, rng, 64, 64);
        ASSERT_EQ(a.image.shape(), (Shape{64, 64, 3}));
        ASSERT_EQ(a.mask.ids.size(), 64u * 64u);
    }
}

TEST(Augment, ClassIdClosure) {
    Sample s = render_synthetic_sample(small_cfg(), "ids", 8);
    Rng rng(56);
    for (int i = 0; i < 200; ++i) {
        Sample a = augment_sample(s, rng, 64, 64);
        for (std::uint8_t v : a.mask.ids)
            ASSERT_TRUE(v < 6 || v == kIgnoreLabel) << int(v);
    }
}

TEST(Augment, ForcedFlipIsInvolution) {
    Sample s = render_synthetic_sample(small_cfg(), "flip", 9);
    AugParams p;
    p.scale = 1.0;
    p.flip = true;
    p.scaled_h = s.image.dim(0);
    p.scaled_w = s.image.dim(1);
    Sample once = apply_augmentation(s, p, s.image.dim(0), s.image.dim(1));
    Sample twice = apply_augmentation(once, p, s.image.dim(0), s.image.dim(1));
    EXPECT_EQ(twice.mask.ids, s.mask.ids);
    EXPECT_EQ(0, std::memcmp(twice.image.data(), s.image.data(),
                             s.image.numel() * sizeof(float)));
}

TEST(Augment, NeutralParamsPassThrough) {
    Sample s = render_synthetic_sample(small_cfg(), "pass", 10);
    AugParams p;
    p.scale = 1.0;
    p.scaled_h = s.image.dim(0);
    p.scaled_w = s.image.dim(1);
    Sample a = apply_augmentation(s, p, s.image.dim(0), s.image.dim(1));
    EXPECT_EQ(a.mask.ids, s.mask.ids);
    EXPECT_EQ(0, std::memcmp(a.image.data(), s.image.data(), s.image.numel() * sizeof(float)));
}

TEST(Augment, GeometryConsistencyBetweenImageAndMask) {
    // An id-valued plane pushed through the shared geometric chain with
    // nearest interpolation must equal the transformed mask exactly.
    Sample s = render_synthetic_sample(small_cfg(), "geom", 11);
    Rng rng(57);
    for (int i = 0; i < 100; ++i) {
        AugParams p = draw_aug_params(rng, s.image.dim(0), s.image.dim(1), 48, 48);
        auto mask_out = apply_geometry(s.mask.ids, s.mask.h, s.mask.w, 1, p, 48, 48,
                                       /*nearest=*/true, kIgnoreLabel);
        std::vector<float> id_plane(s.mask.ids.begin(), s.mask.ids.end());
        auto plane_out = apply_geometry(id_plane, s.mask.h, s.mask.w, 1, p, 48, 48,
                                        /*nearest=*/true, 255.0f);
        for (std::size_t j = 0; j < mask_out.size(); ++j)
            ASSERT_EQ(static_cast<float>(mask_out[j]), plane_out[j]);
    }
}

TEST(Augment, FixedRngStateGivesBitwiseIdenticalBatches) {
    Sample s = render_synthetic_sample(small_cfg(), "det", 12);
    auto run = [&](std::uint64_t seed) {
        Rng rng(seed);
        std::vector<Sample> batch;
        for (int i = 0; i < 8; ++i) batch.push_back(augment_sample(s, rng, 64, 64));
        return batch;
    };
    auto b1 = run(99), b2 = run(99);
    for (int i = 0; i < 8; ++i) {
        EXPECT_EQ(b1[i].mask.ids, b2[i].mask.ids);
        EXPECT_EQ(0, std::memcmp(b1[i].image.data(), b2[i].image.data(),
                                 b1[i].image.numel() * sizeof(float)));
    }
}

#pragma once

// Synthetic articulated-figure parsing dataset and its on-disk formats.
//
// Images are binary PPM (P6, maxval 255), masks binary PGM (P5, maxval 255)
// with pixel value = class id and 255 = ignore. A dataset directory holds
// images/{id}.ppm, masks/{id}.pgm and manifest.tsv with "id<TAB>split" lines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "schnet/errors.hpp"
#include "schnet/rng.hpp"
#include "schnet/tensor.hpp"

namespace schnet {

constexpr std::uint8_t kIgnoreLabel = 255;

struct Mask {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> ids;
};

struct Sample {
    Tensor<float> image;  // H x W x 3 in [0,1], values quantized to k/255
    Mask mask;
    std::string id;
};

struct SynthConfig {
    std::size_t n_train = 400;
    std::size_t n_val = 100;
    std::size_t num_classes = 6;  // background, head, torso, arms, legs, accessory
    std::size_t canvas = 64;
    std::uint64_t seed = 7;
    double clutter = 0.5;
};

inline const std::vector<std::string>& default_class_names() {
    static const std::vector<std::string> names{"background", "head",      "torso",
                                                "arms",       "legs",      "accessory"};
    return names;
}

// ----- PNM -----

namespace detail {

struct PnmCursor {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;

    int peek() const { return pos < size ? data[pos] : -1; }
    int get() { return pos < size ? data[pos++] : -1; }

    void skip_space_and_comments() {
        for (;;) {
            int c = peek();
            if (c == '#') {
                while (c != -1 && c != '\n') c = get();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                get();
            } else {
                return;
            }
        }
    }

    // Unsigned decimal token; `what` names the field in errors.
    std::size_t read_uint(const char* what) {
        skip_space_and_comments();
        if (!std::isdigit(peek()))
            throw FormatError(std::string("expected ") + what + " in PNM header", pos);
        std::size_t v = 0;
        while (std::isdigit(peek())) {
            v = v * 10 + static_cast<std::size_t>(get() - '0');
            if (v > 10'000'000) throw FormatError(std::string("implausible ") + what, pos);
        }
        return v;
    }
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

// Shared P5/P6 header parse: returns (w, h) and leaves the cursor on the
// first payload byte.
inline std::pair<std::size_t, std::size_t> parse_pnm_header(PnmCursor& cur, char kind) {
    if (cur.get() != 'P' || cur.get() != kind)
        throw FormatError(std::string("bad PNM magic, expected P") + kind, 0);
    std::size_t w = cur.read_uint("width");
    std::size_t h = cur.read_uint("height");
    std::size_t maxval = cur.read_uint("maxval");
    if (w == 0 || h == 0) throw FormatError("zero PNM dimension", cur.pos);
    if (maxval != 255) throw FormatError("unsupported PNM maxval " + std::to_string(maxval),
                                         cur.pos);
    int sep = cur.get();
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n')
        throw FormatError("missing whitespace after PNM maxval", cur.pos ? cur.pos - 1 : 0);
    return {w, h};
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_ppm(const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ShapeError("encode_ppm: H x W x 3 image required, got " + shape_str(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1);
    std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + h * w * 3);
    const float* p = image.data();
    for (std::size_t i = 0; i < h * w * 3; ++i) {
        float v = std::min(std::max(p[i], 0.0f), 1.0f);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
    return out;
}

inline Tensor<float> decode_ppm(const std::uint8_t* data, std::size_t size) {
    detail::PnmCursor cur{data, size};
    auto [w, h] = detail::parse_pnm_header(cur, '6');
    const std::size_t need = h * w * 3;
    if (cur.pos + need > size)
        throw FormatError("truncated PPM payload, need " + std::to_string(need) + " bytes",
                          cur.pos);
    std::vector<float> img(need);
    for (std::size_t i = 0; i < need; ++i)
        img[i] = static_cast<float>(data[cur.pos + i]) / 255.0f;
    return Tensor<float>::from_vector({h, w, 3}, std::move(img));
}

inline std::vector<std::uint8_t> encode_pgm(const Mask& mask) {
    std::string header = "P5\n" + std::to_string(mask.w) + " " + std::to_string(mask.h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), mask.ids.begin(), mask.ids.end());
    return out;
}

inline Mask decode_pgm(const std::uint8_t* data, std::size_t size) {
    detail::PnmCursor cur{data, size};
    auto [w, h] = detail::parse_pnm_header(cur, '5');
    const std::size_t need = h * w;
    if (cur.pos + need > size)
        throw FormatError("truncated PGM payload, need " + std::to_string(need) + " bytes",
                          cur.pos);
    Mask m;
    m.h = h;
    m.w = w;
    m.ids.assign(data + cur.pos, data + cur.pos + need);
    return m;
}

inline void write_sample(const Sample& s, const std::string& image_path,
                         const std::string& mask_path) {
    detail::write_file_bytes(image_path, encode_ppm(s.image));
    detail::write_file_bytes(mask_path, encode_pgm(s.mask));
}

inline Sample read_sample(const std::string& image_path, const std::string& mask_path,
                          std::string id = "") {
    auto img_bytes = detail::read_file_bytes(image_path);
    auto mask_bytes = detail::read_file_bytes(mask_path);
    Sample s;
    s.image = decode_ppm(img_bytes.data(), img_bytes.size());
    s.mask = decode_pgm(mask_bytes.data(), mask_bytes.size());
    s.id = std::move(id);
    if (s.mask.h != s.image.dim(0) || s.mask.w != s.image.dim(1))
        throw DataError("image/mask dimensions disagree for '" + image_path + "'");
    return s;
}

// ----- synthetic scene renderer -----

namespace detail {

struct Painter {
    std::size_t canvas;
    std::vector<float>& img;        // H x W x 3
    std::vector<std::uint8_t>& ids;  // H x W

    void put(std::size_t y, std::size_t x, const float* rgb, std::uint8_t cls) {
        std::size_t at = y * canvas + x;
        ids[at] = cls;
        for (int c = 0; c < 3; ++c) img[at * 3 + c] = rgb[c];
    }

    void circle(double cy, double cx, double r, const float* rgb, std::uint8_t cls) {
        const long y0 = std::max<long>(0, static_cast<long>(std::floor(cy - r)));
        const long y1 = std::min<long>(canvas - 1, static_cast<long>(std::ceil(cy + r)));
        const long x0 = std::max<long>(0, static_cast<long>(std::floor(cx - r)));
        const long x1 = std::min<long>(canvas - 1, static_cast<long>(std::ceil(cx + r)));
        for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) {
                double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
                if (dy * dy + dx * dx <= r * r) put(y, x, rgb, cls);
            }
    }

    // Thick segment from (y0,x0) to (y1,x1) with the given half width.
    void capsule(double ay, double ax, double by, double bx, double half_w, const float* rgb,
                 std::uint8_t cls) {
        const double pad = half_w + 1.0;
        const long ylo = std::max<long>(0, static_cast<long>(std::floor(std::min(ay, by) - pad)));
        const long yhi =
            std::min<long>(canvas - 1, static_cast<long>(std::ceil(std::max(ay, by) + pad)));
        const long xlo = std::max<long>(0, static_cast<long>(std::floor(std::min(ax, bx) - pad)));
        const long xhi =
            std::min<long>(canvas - 1, static_cast<long>(std::ceil(std::max(ax, bx) + pad)));
        const double vy = by - ay, vx = bx - ax;
        const double len2 = std::max(1e-9, vy * vy + vx * vx);
        for (long y = ylo; y <= yhi; ++y)
            for (long x = xlo; x <= xhi; ++x) {
                double py = y + 0.5 - ay, px = x + 0.5 - ax;
                double t = std::clamp((py * vy + px * vx) / len2, 0.0, 1.0);
                double dy = py - t * vy, dx = px - t * vx;
                if (dy * dy + dx * dx <= half_w * half_w) put(y, x, rgb, cls);
            }
    }

    // Axis-angle rectangle centered at (cy,cx).
    void box(double cy, double cx, double half_h, double half_w, double angle, const float* rgb,
             std::uint8_t cls) {
        const double pad = std::hypot(half_h, half_w) + 1.0;
        const long ylo = std::max<long>(0, static_cast<long>(std::floor(cy - pad)));
        const long yhi = std::min<long>(canvas - 1, static_cast<long>(std::ceil(cy + pad)));
        const long xlo = std::max<long>(0, static_cast<long>(std::floor(cx - pad)));
        const long xhi = std::min<long>(canvas - 1, static_cast<long>(std::ceil(cx + pad)));
        const double ca = std::cos(angle), sa = std::sin(angle);
        for (long y = ylo; y <= yhi; ++y)
            for (long x = xlo; x <= xhi; ++x) {
                double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
                double ly = ca * dy + sa * dx, lx = -sa * dy + ca * dx;
                if (std::abs(ly) <= half_h && std::abs(lx) <= half_w) put(y, x, rgb, cls);
            }
    }
};

inline void jitter_color(float* rgb, const float* base, Rng& rng, double amount) {
    for (int c = 0; c < 3; ++c) {
        double v = base[c] + rng.uniform(-amount, amount);
        rgb[c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

}  // namespace detail

// Renders one deterministic scene: circle head, rotated-box torso, capsule
// limbs, accessory blob, background clutter. Classes above num_classes-1 are
// simply not drawn, so small-K configs stay valid.
inline Sample render_synthetic_sample(const SynthConfig& cfg, const std::string& id,
                                      std::uint64_t sample_seed) {
    Rng rng(sample_seed);
    const std::size_t n = cfg.canvas;
    const double u = static_cast<double>(n) / 64.0;  // geometry designed at 64px

    std::vector<float> img(n * n * 3);
    std::vector<std::uint8_t> ids(n * n, 0);
    detail::Painter paint{n, img, ids};

    static const float kBase[6][3] = {
        {0.16f, 0.17f, 0.20f},  // background
        {0.93f, 0.78f, 0.60f},  // head
        {0.80f, 0.22f, 0.22f},  // torso
        {0.22f, 0.52f, 0.88f},  // arms
        {0.28f, 0.68f, 0.30f},  // legs
        {0.96f, 0.86f, 0.18f},  // accessory
    };

    float bg[3];
    detail::jitter_color(bg, kBase[0], rng, 0.05);
    for (std::size_t i = 0; i < n * n; ++i)
        for (int c = 0; c < 3; ++c) img[i * 3 + c] = bg[c];

    // clutter: muted random shapes, still background class
    const int n_clutter = static_cast<int>(std::lround(cfg.clutter * 6.0));
    for (int i = 0; i < n_clutter; ++i) {
        float col[3];
        for (int c = 0; c < 3; ++c) col[c] = static_cast<float>(rng.uniform(0.05, 0.55));
        double cy = rng.uniform(0.0, n), cx = rng.uniform(0.0, n);
        if (rng.bernoulli(0.5))
            paint.circle(cy, cx, rng.uniform(2.0, 5.0) * u, col, 0);
        else
            paint.box(cy, cx, rng.uniform(2.0, 5.0) * u, rng.uniform(2.0, 5.0) * u,
                      rng.uniform(0.0, M_PI), col, 0);
    }

    const std::uint8_t K = static_cast<std::uint8_t>(cfg.num_classes);
    const double cy = n * 0.52 + rng.uniform(-2.0, 2.0) * u;
    const double cx = n * 0.50 + rng.uniform(-3.0, 3.0) * u;
    const double torso_hh = rng.uniform(11.5, 13.5) * u;
    const double torso_hw = rng.uniform(9.5, 11.5) * u;
    const double lean = rng.uniform(-0.12, 0.12);

    float col[3];

    // legs first so the torso overlaps their roots
    if (K > 4) {
        detail::jitter_color(col, kBase[4], rng, 0.06);
        for (int side = -1; side <= 1; side += 2) {
            double hip_y = cy + torso_hh * 0.8;
            double hip_x = cx + side * torso_hw * 0.45;
            double ang = M_PI / 2 + side * rng.uniform(0.05, 0.30);
            double len = rng.uniform(15.0, 18.0) * u;
            paint.capsule(hip_y, hip_x, hip_y + std::sin(ang) * len,
                          hip_x + std::cos(ang) * len * side * -1.0, rng.uniform(5.0, 6.0) * u,
                          col, 4);
        }
    }
    if (K > 3) {
        detail::jitter_color(col, kBase[3], rng, 0.06);
        for (int side = -1; side <= 1; side += 2) {
            double sh_y = cy - torso_hh * 0.7;
            double sh_x = cx + side * torso_hw * 0.9;
            double ang = rng.uniform(0.40, 1.05);  // downward-outward
            double len = rng.uniform(12.0, 15.0) * u;
            paint.capsule(sh_y, sh_x, sh_y + std::sin(ang) * len, sh_x + side * std::cos(ang) * len,
                          rng.uniform(4.6, 5.6) * u, col, 3);
        }
    }
    if (K > 2) {
        detail::jitter_color(col, kBase[2], rng, 0.06);
        paint.box(cy, cx, torso_hh, torso_hw, lean, col, 2);
    }
    if (K > 1) {
        detail::jitter_color(col, kBase[1], rng, 0.06);
        double r = rng.uniform(9.5, 11.0) * u;
        paint.circle(cy - torso_hh - r * 0.75, cx + lean * -12.0 * u, r, col, 1);
    }
    if (K > 5) {
        detail::jitter_color(col, kBase[5], rng, 0.06);
        double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
        paint.circle(cy - torso_hh * rng.uniform(0.0, 0.9),
                     cx + side * (torso_hw + rng.uniform(4.0, 7.0) * u),
                     rng.uniform(6.0, 7.5) * u, col, 5);
    }

    // pixel noise, then quantize to the on-disk 8-bit grid
    for (std::size_t i = 0; i < img.size(); ++i) {
        double v = img[i] + rng.uniform(-0.03, 0.03);
        img[i] = static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
    }

    Sample s;
    s.image = Tensor<float>::from_vector({n, n, 3}, std::move(img));
    s.mask = Mask{n, n, std::move(ids)};
    s.id = id;
    return s;
}

struct ManifestEntry {
    std::string id;
    std::string split;  // "train" | "val"
};

// Writes images/, masks/ and manifest.tsv under out_dir. Bitwise reproducible
// for a given config.
inline std::vector<ManifestEntry> generate_synthetic(const SynthConfig& cfg,
                                                     const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    fs::create_directories(fs::path(out_dir) / "masks", ec);
    if (ec) throw IoError("cannot create dataset directories under '" + out_dir + "'");

    std::vector<ManifestEntry> manifest;
    auto emit = [&](const std::string& split, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s_%05zu", split.c_str(), i);
            std::string id(buf);
            Sample s = render_synthetic_sample(cfg, id, mix_seed(cfg.seed, "synth:" + id));
            write_sample(s, (fs::path(out_dir) / "images" / (id + ".ppm")).string(),
                         (fs::path(out_dir) / "masks" / (id + ".pgm")).string());
            manifest.push_back({id, split});
        }
    };
    emit("train", cfg.n_train);
    emit("val", cfg.n_val);

    std::ofstream mf(fs::path(out_dir) / "manifest.tsv");
    if (!mf) throw IoError("cannot write manifest under '" + out_dir + "'");
    for (const auto& e : manifest) mf << e.id << "\t" << e.split << "\n";
    return manifest;
}

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> val;
};

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.tsv");
    if (!mf) throw IoError("cannot open manifest.tsv under '" + dir + "'");
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(mf, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError("manifest.tsv line " + std::to_string(line_no) + ": missing tab");
        std::string id = line.substr(0, tab);
        std::string split = line.substr(tab + 1);
        if (!split.empty() && split.back() == '\r') split.pop_back();
        Sample s = read_sample((fs::path(dir) / "images" / (id + ".ppm")).string(),
                               (fs::path(dir) / "masks" / (id + ".pgm")).string(), id);
        if (split == "train")
            ds.train.push_back(std::move(s));
        else if (split == "val")
            ds.val.push_back(std::move(s));
        else
            throw DataError("manifest.tsv line " + std::to_string(line_no) + ": unknown split '" +
                            split + "'");
    }
    return ds;
}

// ----- augmentation -----

struct AugParams {
    double scale = 1.0;
    bool flip = false;
    double brightness = 0.0;  // additive
    double contrast = 1.0;    // multiplicative
    std::size_t scaled_h = 0, scaled_w = 0;
    std::size_t crop_y = 0, crop_x = 0;  // used on axes where scaled >= out
};

// All augmentation randomness is drawn here, in a fixed order, from the one
// explicit rng.
inline AugParams draw_aug_params(Rng& rng, std::size_t in_h, std::size_t in_w, std::size_t out_h,
                                 std::size_t out_w) {
    AugParams p;
    p.scale = rng.uniform(0.5, 2.0);
    p.flip = rng.bernoulli(0.5);
    p.brightness = rng.uniform(-0.2, 0.2);
    p.contrast = rng.uniform(0.8, 1.2);
    p.scaled_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(in_h * p.scale)));
    p.scaled_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(in_w * p.scale)));
    p.crop_y = p.scaled_h > out_h ? rng.uniform_index(p.scaled_h - out_h + 1) : 0;
    p.crop_x = p.scaled_w > out_w ? rng.uniform_index(p.scaled_w - out_w + 1) : 0;
    return p;
}

namespace detail {

template <typename T>
std::vector<T> resize_nearest(const std::vector<T>& src, std::size_t h, std::size_t w,
                              std::size_t c, std::size_t ho, std::size_t wo) {
    if (h == ho && w == wo) return src;
    std::vector<T> out(ho * wo * c);
    for (std::size_t y = 0; y < ho; ++y) {
        std::size_t sy = std::min(h - 1, static_cast<std::size_t>(
                                             (y + 0.5) * static_cast<double>(h) / ho));
        for (std::size_t x = 0; x < wo; ++x) {
            std::size_t sx = std::min(w - 1, static_cast<std::size_t>(
                                                 (x + 0.5) * static_cast<double>(w) / wo));
            for (std::size_t ch = 0; ch < c; ++ch)
                out[(y * wo + x) * c + ch] = src[(sy * w + sx) * c + ch];
        }
    }
    return out;
}

template <typename T>
void flip_horizontal(std::vector<T>& buf, std::size_t h, std::size_t w, std::size_t c) {
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w / 2; ++x)
            for (std::size_t ch = 0; ch < c; ++ch)
                std::swap(buf[(y * w + x) * c + ch], buf[(y * w + (w - 1 - x)) * c + ch]);
}

// Crop when larger, pad (top-left anchored content) when smaller, per axis.
template <typename T>
std::vector<T> crop_or_pad(const std::vector<T>& src, std::size_t h, std::size_t w, std::size_t c,
                           std::size_t out_h, std::size_t out_w, std::size_t crop_y,
                           std::size_t crop_x, T pad_value) {
    std::vector<T> out(out_h * out_w * c, pad_value);
    const std::size_t copy_h = std::min(h, out_h);
    const std::size_t copy_w = std::min(w, out_w);
    const std::size_t src_y0 = h > out_h ? crop_y : 0;
    const std::size_t src_x0 = w > out_w ? crop_x : 0;
    for (std::size_t y = 0; y < copy_h; ++y)
        for (std::size_t x = 0; x < copy_w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch)
                out[(y * out_w + x) * c + ch] = src[((y + src_y0) * w + x + src_x0) * c + ch];
    return out;
}

}  // namespace detail

// Geometric part only; shared verbatim by image (bilinear) and mask
// (nearest), so both always see identical scale/flip/crop.
template <typename T>
std::vector<T> apply_geometry(const std::vector<T>& src, std::size_t h, std::size_t w,
                              std::size_t c, const AugParams& p, std::size_t out_h,
                              std::size_t out_w, bool nearest, T pad_value) {
    std::vector<T> buf;
    if (nearest) {
        buf = detail::resize_nearest(src, h, w, c, p.scaled_h, p.scaled_w);
    } else {
        buf.resize(p.scaled_h * p.scaled_w * c);
        detail::bilinear_kernel(src.data(), h, w, c, buf.data(), p.scaled_h, p.scaled_w);
    }
    if (p.flip) detail::flip_horizontal(buf, p.scaled_h, p.scaled_w, c);
    return detail::crop_or_pad(buf, p.scaled_h, p.scaled_w, c, out_h, out_w, p.crop_y, p.crop_x,
                               pad_value);
}

// Order: scale, flip, photometric jitter (image only), crop/pad. Jitter runs
// before padding so padded image pixels stay exactly zero.
inline Sample apply_augmentation(const Sample& s, const AugParams& p, std::size_t out_h,
                                 std::size_t out_w) {
    const std::size_t h = s.image.dim(0), w = s.image.dim(1);

    std::vector<float> img(p.scaled_h * p.scaled_w * 3);
    detail::bilinear_kernel(s.image.data(), h, w, 3, img.data(), p.scaled_h, p.scaled_w);
    if (p.flip) detail::flip_horizontal(img, p.scaled_h, p.scaled_w, 3);
    for (auto& v : img)
        v = static_cast<float>(std::clamp(v * p.contrast + p.brightness, 0.0, 1.0));
    img = detail::crop_or_pad(img, p.scaled_h, p.scaled_w, 3, out_h, out_w, p.crop_y, p.crop_x,
                              0.0f);

    std::vector<std::uint8_t> ids =
        apply_geometry(s.mask.ids, h, w, 1, p, out_h, out_w, /*nearest=*/true, kIgnoreLabel);

    Sample out;
    out.image = Tensor<float>::from_vector({out_h, out_w, 3}, std::move(img));
    out.mask = Mask{out_h, out_w, std::move(ids)};
    out.id = s.id;
    return out;
}

// Scale in [0.5,2.0], flip p=0.5, brightness/contrast jitter (image only),
// then crop/pad to exactly (out_h, out_w). Masks pad with the ignore label.
inline Sample augment_sample(const Sample& s, Rng& rng, std::size_t out_h, std::size_t out_w) {
    AugParams p = draw_aug_params(rng, s.image.dim(0), s.image.dim(1), out_h, out_w);
    return apply_augmentation(s, p, out_h, out_w);
}

}  // namespace schnet

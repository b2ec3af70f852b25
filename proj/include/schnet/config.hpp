#pragma once

// Run configuration and its file format: UTF-8 "key = value" lines, '#'
// comments, dotted keys. Unknown keys are errors. dump() emits every key so
// a parsed dump reproduces the config exactly (config snapshots in
// checkpoints rely on this).

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "schnet/data.hpp"
#include "schnet/encoders.hpp"
#include "schnet/errors.hpp"

namespace schnet {

enum class Backbone { sam, clip };
enum class SrmFinalStage { refine_only, inject_reuse_last, none };
enum class FtmResidual { f_i, f_prime };

struct SrmConfig {
    bool enabled = true;
    std::size_t squeeze_ratio = 4;
    SrmFinalStage final_stage = SrmFinalStage::refine_only;
    bool shared = true;  // one SrmParams instance for all stages (ablation flag)
};

struct FtmConfig {
    bool enabled = true;
    std::size_t tokens_per_layer = 8;
    double rho_init = 1e-4;
    bool scalar_rho = false;
    FtmResidual residual = FtmResidual::f_i;
    std::size_t squeeze_ratio = 4;
};

struct HeadConfig {
    std::size_t channels = 64;
};

struct OptimConfig {
    double lr = 6e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;  // weights only, decoupled
    double eps = 1e-8;
};

struct ScheduleConfig {
    std::size_t total_iters = 2000;
    std::size_t warmup_iters = 150;
    double warmup_ratio = 1e-5;
    double poly_power = 0.0;  // 0 = constant lr after warmup
};

struct LossConfig {
    double w_iou = 1.0;
};

struct SimConfig {
    double temperature = 1.0;
};

struct DataConfig {
    std::string dir;
    std::size_t num_classes = 6;
    std::size_t crop = 64;
    std::vector<std::string> class_names = default_class_names();
    std::string prompt_template = "a photo of a {class}";
};

struct TtaConfig {
    std::vector<double> scales{0.75, 1.0, 1.25, 1.5};
    bool flip = true;
};

struct EvalConfig {
    std::size_t interval = 200;
    bool include_absent_as_one = false;
};

struct AblateConfig {
    std::size_t total_iters = 600;
    std::size_t warmup_iters = 50;
    std::size_t seeds = 3;
};

struct RunConfig {
    Backbone backbone = Backbone::sam;
    EncoderConfig encoder;
    SrmConfig srm;
    FtmConfig ftm;
    HeadConfig head;
    OptimConfig optim;
    ScheduleConfig schedule;
    LossConfig loss;
    SimConfig sim;
    DataConfig data;
    TtaConfig tta;
    EvalConfig eval;
    AblateConfig ablate;
    SynthConfig synth;
    std::size_t batch_size = 8;
    std::uint64_t seed = 42;

    // One prompt per task class from the template.
    std::vector<std::string> prompts_for_classes() const {
        std::vector<std::string> out;
        for (std::size_t c = 0; c < data.num_classes; ++c) {
            std::string p = data.prompt_template;
            const std::string ph = "{class}";
            auto at = p.find(ph);
            if (at == std::string::npos)
                throw ConfigError("prompt template must contain {class}");
            p.replace(at, ph.size(), data.class_names[c]);
            out.push_back(std::move(p));
        }
        return out;
    }

    void validate() const {
        encoder.validate();
        // lr = 0 is allowed so a null-optimizer run stays expressible
        if (optim.lr < 0) throw ConfigError("optim.lr must be >= 0");
        if (schedule.total_iters > 0 && schedule.warmup_iters >= schedule.total_iters)
            throw ConfigError("schedule.warmup_iters must be < schedule.total_iters");
        if (schedule.total_iters == 0 && schedule.warmup_iters != 0)
            throw ConfigError("schedule.warmup_iters must be 0 when total_iters is 0");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (data.num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
        if (data.class_names.size() < data.num_classes)
            throw ConfigError("data.class_names must cover data.num_classes entries");
        if (data.crop % encoder.patch_size || data.crop % encoder.clip_patch_size)
            throw ConfigError("data.crop must be divisible by both patch sizes");
        if (synth.canvas % encoder.patch_size || synth.canvas % encoder.clip_patch_size)
            throw ConfigError("synth.canvas must be divisible by both patch sizes");
        if (tta.scales.empty()) throw ConfigError("tta.scales must be non-empty");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct KvAccess {
    std::map<std::string, std::string> kv;

    bool parse_bool(const std::string& key, const std::string& v) const {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("config key '" + key + "': expected bool, got '" + v + "'");
    }

    template <typename F>
    void take(const std::string& key, F&& apply) {
        auto it = kv.find(key);
        if (it == kv.end()) return;
        apply(it->second);
        kv.erase(it);
    }
};

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(v);
    while (std::getline(is, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text) {
    detail::KvAccess acc;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (acc.kv.count(key))
            throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" +
                              key + "'");
        acc.kv[key] = value;
    }

    RunConfig cfg;
    auto u64 = [](const std::string& key, const std::string& v) -> std::uint64_t {
        try {
            std::size_t used = 0;
            std::uint64_t out = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument("trailing");
            return out;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
        }
    };
    auto f64 = [](const std::string& key, const std::string& v) -> double {
        try {
            std::size_t used = 0;
            double out = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument("trailing");
            return out;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
        }
    };

    auto& a = acc;
    a.take("backbone", [&](const std::string& v) {
        if (v == "sam")
            cfg.backbone = Backbone::sam;
        else if (v == "clip")
            cfg.backbone = Backbone::clip;
        else
            throw ConfigError("backbone must be sam or clip, got '" + v + "'");
    });
    a.take("seed", [&](const std::string& v) { cfg.seed = u64("seed", v); });
    a.take("batch_size", [&](const std::string& v) { cfg.batch_size = u64("batch_size", v); });

    a.take("encoder.patch_size", [&](const std::string& v) { cfg.encoder.patch_size = u64("encoder.patch_size", v); });
    a.take("encoder.clip_patch_size", [&](const std::string& v) { cfg.encoder.clip_patch_size = u64("encoder.clip_patch_size", v); });
    a.take("encoder.embed_dim_clip", [&](const std::string& v) { cfg.encoder.embed_dim_clip = u64("encoder.embed_dim_clip", v); });
    a.take("encoder.embed_dim_sam", [&](const std::string& v) { cfg.encoder.embed_dim_sam = u64("encoder.embed_dim_sam", v); });
    a.take("encoder.joint_dim", [&](const std::string& v) { cfg.encoder.joint_dim = u64("encoder.joint_dim", v); });
    a.take("encoder.n_layers_clip", [&](const std::string& v) { cfg.encoder.n_layers_clip = u64("encoder.n_layers_clip", v); });
    a.take("encoder.n_layers_sam", [&](const std::string& v) { cfg.encoder.n_layers_sam = u64("encoder.n_layers_sam", v); });
    a.take("encoder.n_heads", [&](const std::string& v) { cfg.encoder.n_heads = u64("encoder.n_heads", v); });
    a.take("encoder.mlp_ratio", [&](const std::string& v) { cfg.encoder.mlp_ratio = u64("encoder.mlp_ratio", v); });
    a.take("encoder.seed", [&](const std::string& v) { cfg.encoder.seed = u64("encoder.seed", v); });
    a.take("encoder.clip_taps", [&](const std::string& v) {
        cfg.encoder.clip_taps.clear();
        for (const auto& t : detail::split_list(v))
            cfg.encoder.clip_taps.push_back(u64("encoder.clip_taps", t));
    });
    a.take("encoder.sam_taps", [&](const std::string& v) {
        cfg.encoder.sam_taps.clear();
        for (const auto& t : detail::split_list(v))
            cfg.encoder.sam_taps.push_back(u64("encoder.sam_taps", t));
    });

    a.take("sim.temperature", [&](const std::string& v) { cfg.sim.temperature = f64("sim.temperature", v); });

    a.take("srm.enabled", [&](const std::string& v) { cfg.srm.enabled = a.parse_bool("srm.enabled", v); });
    a.take("srm.squeeze_ratio", [&](const std::string& v) { cfg.srm.squeeze_ratio = u64("srm.squeeze_ratio", v); });
    a.take("srm.shared", [&](const std::string& v) { cfg.srm.shared = a.parse_bool("srm.shared", v); });
    a.take("srm.final_stage", [&](const std::string& v) {
        if (v == "refine_only")
            cfg.srm.final_stage = SrmFinalStage::refine_only;
        else if (v == "inject_reuse_last")
            cfg.srm.final_stage = SrmFinalStage::inject_reuse_last;
        else if (v == "none")
            cfg.srm.final_stage = SrmFinalStage::none;
        else
            throw ConfigError("srm.final_stage must be refine_only|inject_reuse_last|none");
    });

    a.take("ftm.enabled", [&](const std::string& v) { cfg.ftm.enabled = a.parse_bool("ftm.enabled", v); });
    a.take("ftm.tokens", [&](const std::string& v) { cfg.ftm.tokens_per_layer = u64("ftm.tokens", v); });
    a.take("ftm.rho_init", [&](const std::string& v) { cfg.ftm.rho_init = f64("ftm.rho_init", v); });
    a.take("ftm.scalar_rho", [&](const std::string& v) { cfg.ftm.scalar_rho = a.parse_bool("ftm.scalar_rho", v); });
    a.take("ftm.squeeze_ratio", [&](const std::string& v) { cfg.ftm.squeeze_ratio = u64("ftm.squeeze_ratio", v); });
    a.take("ftm.residual", [&](const std::string& v) {
        if (v == "f_i")
            cfg.ftm.residual = FtmResidual::f_i;
        else if (v == "f_prime")
            cfg.ftm.residual = FtmResidual::f_prime;
        else
            throw ConfigError("ftm.residual must be f_i or f_prime");
    });

    a.take("head.channels", [&](const std::string& v) { cfg.head.channels = u64("head.channels", v); });
    a.take("loss.w_iou", [&](const std::string& v) { cfg.loss.w_iou = f64("loss.w_iou", v); });

    a.take("optim.lr", [&](const std::string& v) { cfg.optim.lr = f64("optim.lr", v); });
    a.take("optim.beta1", [&](const std::string& v) { cfg.optim.beta1 = f64("optim.beta1", v); });
    a.take("optim.beta2", [&](const std::string& v) { cfg.optim.beta2 = f64("optim.beta2", v); });
    a.take("optim.weight_decay", [&](const std::string& v) { cfg.optim.weight_decay = f64("optim.weight_decay", v); });
    a.take("optim.eps", [&](const std::string& v) { cfg.optim.eps = f64("optim.eps", v); });

    a.take("schedule.total_iters", [&](const std::string& v) { cfg.schedule.total_iters = u64("schedule.total_iters", v); });
    a.take("schedule.warmup_iters", [&](const std::string& v) { cfg.schedule.warmup_iters = u64("schedule.warmup_iters", v); });
    a.take("schedule.warmup_ratio", [&](const std::string& v) { cfg.schedule.warmup_ratio = f64("schedule.warmup_ratio", v); });
    a.take("schedule.poly_power", [&](const std::string& v) { cfg.schedule.poly_power = f64("schedule.poly_power", v); });

    a.take("data.dir", [&](const std::string& v) { cfg.data.dir = v; });
    a.take("data.num_classes", [&](const std::string& v) { cfg.data.num_classes = u64("data.num_classes", v); });
    a.take("data.crop", [&](const std::string& v) { cfg.data.crop = u64("data.crop", v); });
    a.take("data.class_names", [&](const std::string& v) { cfg.data.class_names = detail::split_list(v); });
    a.take("data.prompt_template", [&](const std::string& v) { cfg.data.prompt_template = v; });

    a.take("tta.scales", [&](const std::string& v) {
        cfg.tta.scales.clear();
        for (const auto& t : detail::split_list(v)) cfg.tta.scales.push_back(f64("tta.scales", t));
    });
    a.take("tta.flip", [&](const std::string& v) { cfg.tta.flip = a.parse_bool("tta.flip", v); });

    a.take("eval.interval", [&](const std::string& v) { cfg.eval.interval = u64("eval.interval", v); });
    a.take("eval.include_absent_as_one", [&](const std::string& v) {
        cfg.eval.include_absent_as_one = a.parse_bool("eval.include_absent_as_one", v);
    });

    a.take("ablate.total_iters", [&](const std::string& v) { cfg.ablate.total_iters = u64("ablate.total_iters", v); });
    a.take("ablate.warmup_iters", [&](const std::string& v) { cfg.ablate.warmup_iters = u64("ablate.warmup_iters", v); });
    a.take("ablate.seeds", [&](const std::string& v) { cfg.ablate.seeds = u64("ablate.seeds", v); });

    a.take("synth.n_train", [&](const std::string& v) { cfg.synth.n_train = u64("synth.n_train", v); });
    a.take("synth.n_val", [&](const std::string& v) { cfg.synth.n_val = u64("synth.n_val", v); });
    a.take("synth.num_classes", [&](const std::string& v) { cfg.synth.num_classes = u64("synth.num_classes", v); });
    a.take("synth.canvas", [&](const std::string& v) { cfg.synth.canvas = u64("synth.canvas", v); });
    a.take("synth.seed", [&](const std::string& v) { cfg.synth.seed = u64("synth.seed", v); });
    a.take("synth.clutter", [&](const std::string& v) { cfg.synth.clutter = f64("synth.clutter", v); });

    if (!a.kv.empty()) {
        std::string keys;
        for (const auto& [k, v] : a.kv) keys += (keys.empty() ? "" : ", ") + k;
        throw ConfigError("unknown config key(s): " + keys);
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config '" + path + "'");
    std::stringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str());
}

inline std::string dump_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << std::setprecision(17);
    auto list_u = [](const std::vector<std::size_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    os << "backbone = " << (cfg.backbone == Backbone::sam ? "sam" : "clip") << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "encoder.patch_size = " << cfg.encoder.patch_size << "\n";
    os << "encoder.clip_patch_size = " << cfg.encoder.clip_patch_size << "\n";
    os << "encoder.embed_dim_clip = " << cfg.encoder.embed_dim_clip << "\n";
    os << "encoder.embed_dim_sam = " << cfg.encoder.embed_dim_sam << "\n";
    os << "encoder.joint_dim = " << cfg.encoder.joint_dim << "\n";
    os << "encoder.n_layers_clip = " << cfg.encoder.n_layers_clip << "\n";
    os << "encoder.n_layers_sam = " << cfg.encoder.n_layers_sam << "\n";
    os << "encoder.n_heads = " << cfg.encoder.n_heads << "\n";
    os << "encoder.mlp_ratio = " << cfg.encoder.mlp_ratio << "\n";
    os << "encoder.seed = " << cfg.encoder.seed << "\n";
    os << "encoder.clip_taps = " << list_u(cfg.encoder.clip_taps) << "\n";
    os << "encoder.sam_taps = " << list_u(cfg.encoder.sam_taps) << "\n";
    os << "sim.temperature = " << cfg.sim.temperature << "\n";
    os << "srm.enabled = " << (cfg.srm.enabled ? "true" : "false") << "\n";
    os << "srm.squeeze_ratio = " << cfg.srm.squeeze_ratio << "\n";
    os << "srm.shared = " << (cfg.srm.shared ? "true" : "false") << "\n";
    os << "srm.final_stage = "
       << (cfg.srm.final_stage == SrmFinalStage::refine_only
               ? "refine_only"
               : cfg.srm.final_stage == SrmFinalStage::inject_reuse_last ? "inject_reuse_last"
                                                                         : "none")
       << "\n";
    os << "ftm.enabled = " << (cfg.ftm.enabled ? "true" : "false") << "\n";
    os << "ftm.tokens = " << cfg.ftm.tokens_per_layer << "\n";
    os << "ftm.rho_init = " << cfg.ftm.rho_init << "\n";
    os << "ftm.scalar_rho = " << (cfg.ftm.scalar_rho ? "true" : "false") << "\n";
    os << "ftm.squeeze_ratio = " << cfg.ftm.squeeze_ratio << "\n";
    os << "ftm.residual = " << (cfg.ftm.residual == FtmResidual::f_i ? "f_i" : "f_prime") << "\n";
    os << "head.channels = " << cfg.head.channels << "\n";
    os << "loss.w_iou = " << cfg.loss.w_iou << "\n";
    os << "optim.lr = " << cfg.optim.lr << "\n";
    os << "optim.beta1 = " << cfg.optim.beta1 << "\n";
    os << "optim.beta2 = " << cfg.optim.beta2 << "\n";
    os << "optim.weight_decay = " << cfg.optim.weight_decay << "\n";
    os << "optim.eps = " << cfg.optim.eps << "\n";
    os << "schedule.total_iters = " << cfg.schedule.total_iters << "\n";
    os << "schedule.warmup_iters = " << cfg.schedule.warmup_iters << "\n";
    os << "schedule.warmup_ratio = " << cfg.schedule.warmup_ratio << "\n";
    os << "schedule.poly_power = " << cfg.schedule.poly_power << "\n";
    os << "data.dir = " << cfg.data.dir << "\n";
    os << "data.num_classes = " << cfg.data.num_classes << "\n";
    os << "data.crop = " << cfg.data.crop << "\n";
    {
        std::string names;
        for (std::size_t i = 0; i < cfg.data.class_names.size(); ++i)
            names += (i ? "," : "") + cfg.data.class_names[i];
        os << "data.class_names = " << names << "\n";
    }
    os << "data.prompt_template = " << cfg.data.prompt_template << "\n";
    {
        std::string s;
        std::ostringstream ss;
        ss << std::setprecision(17);
        for (std::size_t i = 0; i < cfg.tta.scales.size(); ++i)
            ss << (i ? "," : "") << cfg.tta.scales[i];
        os << "tta.scales = " << ss.str() << "\n";
    }
    os << "tta.flip = " << (cfg.tta.flip ? "true" : "false") << "\n";
    os << "eval.interval = " << cfg.eval.interval << "\n";
    os << "eval.include_absent_as_one = " << (cfg.eval.include_absent_as_one ? "true" : "false")
       << "\n";
    os << "ablate.total_iters = " << cfg.ablate.total_iters << "\n";
    os << "ablate.warmup_iters = " << cfg.ablate.warmup_iters << "\n";
    os << "ablate.seeds = " << cfg.ablate.seeds << "\n";
    os << "synth.n_train = " << cfg.synth.n_train << "\n";
    os << "synth.n_val = " << cfg.synth.n_val << "\n";
    os << "synth.num_classes = " << cfg.synth.num_classes << "\n";
    os << "synth.canvas = " << cfg.synth.canvas << "\n";
    os << "synth.seed = " << cfg.synth.seed << "\n";
    os << "synth.clutter = " << cfg.synth.clutter << "\n";
    return os.str();
}

}  // namespace schnet

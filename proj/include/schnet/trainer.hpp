#pragma once

// Training, evaluation, ablation and full-stack gradient verification.
//
// The batch step is deterministic for any worker count: every sample's
// forward/backward runs single-threaded on a model replica, per-sample
// gradients land in their own buffers, and the reduction into the master
// parameters walks samples in batch order. SCHNET_THREADS caps the workers.

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "schnet/checkpoint.hpp"
#include "schnet/config.hpp"
#include "schnet/data.hpp"
#include "schnet/gradcheck.hpp"
#include "schnet/head.hpp"
#include "schnet/metrics.hpp"
#include "schnet/model.hpp"
#include "schnet/optim.hpp"
#include "schnet/tta.hpp"

namespace schnet {

struct TrainingAbort : std::runtime_error {
    std::size_t iteration;
    std::string last_checkpoint;
    TrainingAbort(std::size_t iter, const std::string& ckpt)
        : std::runtime_error("non-finite loss at iteration " + std::to_string(iter) +
                             (ckpt.empty() ? "; no checkpoint written yet"
                                           : "; last good checkpoint: " + ckpt)),
          iteration(iter),
          last_checkpoint(ckpt) {}
};

inline std::size_t worker_threads() {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SCHNET_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v >= 1) return std::min<std::size_t>(hw * 4, v);
    }
    return hw;
}

namespace detail {

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& body) {
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i, 0);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (;;) {
                    std::size_t i = next.fetch_add(1);
                    if (i >= n) return;
                    body(i, w);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace detail

// ----- evaluation -----

template <typename T>
std::vector<std::uint8_t> argmax_classes(const Tensor<T>& probs) {
    const std::size_t k = probs.dim(2);
    const std::size_t n = probs.numel() / k;
    std::vector<std::uint8_t> out(n);
    const T* p = probs.data();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        T bv = p[i * k];
        for (std::size_t c = 1; c < k; ++c)
            if (p[i * k + c] > bv) {
                bv = p[i * k + c];
                best = c;
            }
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// Concurrent read-only forwards over the sample list; per-thread confusion
// matrices are summed (integer counts, order-free).
template <typename T>
MetricsReport evaluate_model(SchnetModel<T>& model, const std::vector<Sample>& samples,
                             const TtaConfig* tta) {
    const std::size_t k = model.cfg().data.num_classes;
    const std::size_t workers = worker_threads();
    const std::size_t size_multiple =
        std::lcm(model.cfg().encoder.patch_size, model.cfg().encoder.clip_patch_size);
    std::vector<std::vector<std::int64_t>> confusion(std::max<std::size_t>(workers, 1),
                                                     std::vector<std::int64_t>(k * k, 0));
    detail::parallel_for(samples.size(), workers, [&](std::size_t i, std::size_t w) {
        const Sample& s = samples[i];
        Tensor<T> img = s.image.template cast<T>();
        Tensor<T> probs;
        if (tta) {
            ForwardProbsFn<T> fwd = [&](const Tensor<T>& in) { return model.forward_probs(in); };
            probs = tta_predict<T>(fwd, img, tta->scales, tta->flip, size_multiple);
        } else {
            probs = model.forward_probs(img);
        }
        accumulate_confusion(confusion[w], k, argmax_classes(probs), s.mask.ids);
    });
    std::vector<std::int64_t> total(k * k, 0);
    for (const auto& c : confusion)
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += c[i];
    return finalize_metrics(std::move(total), k, model.cfg().eval.include_absent_as_one);
}

// ----- deterministic batch-parallel step -----

template <typename T>
class BatchRunner {
  public:
    BatchRunner(const RunConfig& cfg, std::size_t workers)
        : workers_(std::max<std::size_t>(1, workers)) {
        for (std::size_t r = 0; r < workers_; ++r)
            replicas_.push_back(std::make_unique<SchnetModel<T>>(cfg));
    }

    SchnetModel<T>& master() { return *replicas_[0]; }

    // Accumulates d(mean loss)/d(params) into the master gradients and
    // returns the per-sample losses. Bitwise independent of worker count.
    std::vector<double> step(const std::vector<Sample>& batch, T w_iou) {
        const std::size_t b = batch.size();
        const auto& master_params = replicas_[0]->params();
        const std::size_t np = master_params.size();

        for (std::size_t r = 1; r < replicas_.size(); ++r) {
            auto& rp = replicas_[r]->params();
            for (std::size_t p = 0; p < np; ++p) {
                Tensor<T> dst = rp[p].tensor;
                const Tensor<T>& src = master_params[p].tensor;
                std::copy(src.data(), src.data() + src.numel(), dst.data());
            }
        }

        std::vector<std::vector<std::vector<T>>> sample_grads(b);
        std::vector<double> losses(b, 0.0);
        const T inv_b = T(1) / static_cast<T>(b);

        detail::parallel_for(b, workers_, [&](std::size_t i, std::size_t w) {
            SchnetModel<T>& m = *replicas_[w];
            for (auto& p : m.params()) {
                Tensor<T> t = p.tensor;
                t.zero_grad();
            }
            Tensor<T> img = batch[i].image.template cast<T>();
            Tensor<T> loss = combined_loss(m.forward(img), batch[i].mask, w_iou);
            losses[i] = static_cast<double>(loss.item());
            scale_add(loss, inv_b).backward();
            auto& slot = sample_grads[i];
            slot.resize(np);
            for (std::size_t p = 0; p < np; ++p) {
                const Tensor<T>& t = m.params()[p].tensor;
                if (t.has_grad())
                    slot[p] = t.grad();
                else
                    slot[p].assign(t.numel(), T(0));
            }
        });

        // master may itself have processed samples; wipe its buffers before
        // the ordered reduction so nothing is double counted
        for (std::size_t p = 0; p < np; ++p) {
            Tensor<T> t = replicas_[0]->params()[p].tensor;
            t.grad_mut().assign(t.numel(), T(0));
        }
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t p = 0; p < np; ++p) {
                Tensor<T> t = replicas_[0]->params()[p].tensor;
                auto& g = t.grad_mut();
                const auto& sg = sample_grads[i][p];
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += sg[j];
            }
        }
        return losses;
    }

  private:
    std::size_t workers_;
    std::vector<std::unique_ptr<SchnetModel<T>>> replicas_;
};

// ----- training -----

struct TrainResult {
    std::string checkpoint_path;
    MetricsReport val_metrics;
    std::size_t iterations = 0;
    std::string frozen_hash_before;
    std::string frozen_hash_after;
};

template <typename T = float>
TrainResult train_model(const RunConfig& cfg, const std::string& out_dir,
                        std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    cfg.validate();
    Dataset ds = load_dataset(cfg.data.dir);
    if (ds.train.empty() || ds.val.empty())
        throw DataError("dataset under '" + cfg.data.dir + "' needs train and val splits");

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::ofstream log_file(fs::path(out_dir) / "train_log.txt");
    auto log_line = [&](const std::string& s) {
        log_file << s << "\n";
        log_file.flush();
        if (log) (*log) << s << "\n";
    };

    BatchRunner<T> runner(cfg, worker_threads());
    SchnetModel<T>& model = runner.master();
    AdamW<T> opt(model.params(), cfg.optim);
    Rng aug_rng(mix_seed(cfg.seed, "aug"));
    Rng order_rng(mix_seed(cfg.seed, "order"));

    TrainResult result;
    result.frozen_hash_before = model.frozen_hash();
    log_line("frozen_hash = " + result.frozen_hash_before);

    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();  // trigger shuffle on first use
    auto next_index = [&]() {
        if (cursor >= order.size()) {
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[order_rng.uniform_index(i)]);
            cursor = 0;
        }
        return order[cursor++];
    };

    const std::string latest_path = (fs::path(out_dir) / "ckpt-latest.scht").string();
    std::string last_good;
    auto rng_state = [&]() { return aug_rng.save_state() + "\n" + order_rng.save_state(); };

    const std::size_t total = cfg.schedule.total_iters;
    for (std::size_t iter = 0; iter < total; ++iter) {
        const double lr = lr_at(cfg.schedule, cfg.optim.lr, iter);
        std::vector<Sample> batch;
        batch.reserve(cfg.batch_size);
        for (std::size_t bi = 0; bi < cfg.batch_size; ++bi)
            batch.push_back(
                augment_sample(ds.train[next_index()], aug_rng, cfg.data.crop, cfg.data.crop));

        opt.zero_grad();
        std::vector<double> losses = runner.step(batch, static_cast<T>(cfg.loss.w_iou));
        double mean_loss = 0;
        for (double l : losses) mean_loss += l;
        mean_loss /= losses.size();
        if (!std::isfinite(mean_loss)) {
            log_line("iter = " + std::to_string(iter) + "  loss = non-finite, aborting");
            throw TrainingAbort(iter, last_good);
        }
        opt.step(lr);

        if (iter % 25 == 0 || iter + 1 == total) {
            std::ostringstream os;
            os << "iter = " << iter << "  lr = " << std::setprecision(8) << lr
               << "  loss = " << std::setprecision(6) << mean_loss;
            log_line(os.str());
        }

        if ((iter + 1) % cfg.eval.interval == 0 && iter + 1 != total) {
            MetricsReport r = evaluate_model(model, ds.val, nullptr);
            std::ostringstream os;
            os << "iter = " << iter + 1 << "  val_miou = " << std::setprecision(6) << r.miou
               << "  val_pix_acc = " << r.pix_acc << "  val_mean_acc = " << r.mean_acc;
            log_line(os.str());
            save_checkpoint(latest_path, model, iter + 1, rng_state());
            last_good = latest_path;
        }
    }

    result.iterations = total;
    result.checkpoint_path = (fs::path(out_dir) / "checkpoint.scht").string();
    save_checkpoint(result.checkpoint_path, model, total, rng_state());
    result.val_metrics = evaluate_model(model, ds.val, nullptr);
    result.frozen_hash_after = model.compute_frozen_hash();
    {
        std::ostringstream os;
        os << "final val_miou = " << std::setprecision(6) << result.val_metrics.miou
           << "  val_pix_acc = " << result.val_metrics.pix_acc
           << "  val_mean_acc = " << result.val_metrics.mean_acc;
        log_line(os.str());
        std::ofstream metrics_file(fs::path(out_dir) / "val_metrics.txt");
        metrics_file << format_report(result.val_metrics, cfg.data.class_names);
        metrics_file << report_kv(result.val_metrics, cfg.data.class_names);
    }
    return result;
}

// ----- ablation -----

struct AblationRow {
    std::string name;
    MetricsReport mean;  // confusion summed over seeds; miou fields averaged
    std::vector<MetricsReport> per_seed;
    double mean_miou = 0, mean_pix_acc = 0, mean_mean_acc = 0;
};

inline RunConfig ablation_config(const RunConfig& base, const std::string& row,
                                 std::uint64_t seed) {
    RunConfig cfg = base;
    cfg.seed = seed;
    cfg.schedule.total_iters = base.ablate.total_iters;
    cfg.schedule.warmup_iters = base.ablate.warmup_iters;
    cfg.eval.interval = std::max<std::size_t>(1, base.ablate.total_iters);
    if (row == "clip_only") {
        cfg.backbone = Backbone::clip;
    } else if (row == "sam_only") {
        cfg.backbone = Backbone::sam;
        cfg.srm.enabled = false;
        cfg.ftm.enabled = false;
    } else if (row == "sam_srm") {
        cfg.backbone = Backbone::sam;
        cfg.srm.enabled = true;
        cfg.ftm.enabled = false;
    } else if (row == "sam_srm_ftm") {
        cfg.backbone = Backbone::sam;
        cfg.srm.enabled = true;
        cfg.ftm.enabled = true;
    } else {
        throw ConfigError("unknown ablation row '" + row + "'");
    }
    return cfg;
}

inline const std::vector<std::string>& ablation_rows() {
    static const std::vector<std::string> rows{"clip_only", "sam_only", "sam_srm", "sam_srm_ftm"};
    return rows;
}

// Trains the four rows under identical budgets and shared per-seed seeds;
// expected ordering (structurally, not numerically): injecting semantics
// into the detail backbone beats either encoder alone, and the token
// adapter does not hurt.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& out_dir,
                                             std::size_t seeds, std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    std::vector<AblationRow> rows;
    for (const auto& name : ablation_rows()) {
        AblationRow row;
        row.name = name;
        for (std::size_t s = 0; s < seeds; ++s) {
            RunConfig cfg = ablation_config(base, name, base.seed + s);
            std::string run_dir =
                (fs::path(out_dir) / (name + "_seed" + std::to_string(cfg.seed))).string();
            if (log) (*log) << "[ablate] " << name << " seed " << cfg.seed << "\n";
            TrainResult r = train_model<float>(cfg, run_dir, nullptr);
            if (log)
                (*log) << "[ablate] " << name << " seed " << cfg.seed
                       << " miou = " << r.val_metrics.miou << "\n";
            row.per_seed.push_back(r.val_metrics);
        }
        for (const auto& m : row.per_seed) {
            row.mean_miou += m.miou;
            row.mean_pix_acc += m.pix_acc;
            row.mean_mean_acc += m.mean_acc;
        }
        row.mean_miou /= row.per_seed.size();
        row.mean_pix_acc /= row.per_seed.size();
        row.mean_mean_acc /= row.per_seed.size();
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::setw(14) << "config" << std::setw(10) << "pixAcc" << std::setw(10) << "meanAcc"
       << std::setw(10) << "mIoU" << "\n";
    for (const auto& r : rows)
        os << std::setw(14) << r.name << std::setw(10) << r.mean_pix_acc << std::setw(10)
           << r.mean_mean_acc << std::setw(10) << r.mean_miou << "\n";
    return os.str();
}

// ----- full-stack gradient verification -----

struct GradCheckGroup {
    std::string name;
    double worst_rel_err = 0;
    std::size_t checked = 0;
    bool pass = true;
};

struct GradCheckSummary {
    std::vector<GradCheckGroup> groups;
    double worst_rel_err = 0;
    std::size_t checked = 0;
    bool passed = true;
};

// Shrinks the model to verification size but keeps the structural flags from
// the given config. 8x8 inputs, two samples, f64, central differences.
inline RunConfig gradcheck_config(const RunConfig& base) {
    RunConfig cfg = base;
    cfg.backbone = Backbone::sam;
    cfg.srm.enabled = true;
    cfg.ftm.enabled = true;
    cfg.srm.squeeze_ratio = 2;
    cfg.ftm.squeeze_ratio = 2;
    cfg.ftm.tokens_per_layer = 2;
    cfg.encoder.patch_size = 2;
    cfg.encoder.clip_patch_size = 4;
    cfg.encoder.embed_dim_clip = 8;
    cfg.encoder.embed_dim_sam = 8;
    cfg.encoder.joint_dim = 8;
    cfg.encoder.n_layers_clip = 4;
    cfg.encoder.n_layers_sam = 4;
    cfg.encoder.clip_taps = {1, 2, 3, 4};
    cfg.encoder.sam_taps = {1, 2, 3, 4};
    cfg.encoder.n_heads = 2;
    cfg.encoder.mlp_ratio = 2;
    cfg.head.channels = 8;
    cfg.data.num_classes = 3;
    cfg.data.crop = 8;
    cfg.data.class_names = {"background", "head", "torso"};
    return cfg;
}

inline GradCheckSummary gradcheck_full_stack(const RunConfig& base, double eps = 1e-5,
                                             double tol = 1e-4, std::ostream* log = nullptr) {
    RunConfig cfg = gradcheck_config(base);
    cfg.validate();
    SchnetModel<double> model(cfg);

    // Re-randomize every trainable (including the zero-init branches and
    // rho) so each parameter group carries gradient through the stack.
    Rng rng(mix_seed(cfg.seed, "gradcheck_init"));
    for (auto& p : model.params()) {
        if (p.name == "ftm/rho") {
            for (std::size_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = 0.5;
        } else {
            for (std::size_t i = 0; i < p.tensor.numel(); ++i)
                p.tensor.data()[i] = rng.gaussian() * 0.3;
        }
    }

    const std::size_t hw = cfg.data.crop;
    std::vector<Tensor<double>> imgs;
    std::vector<Mask> masks;
    for (int s = 0; s < 2; ++s) {
        imgs.push_back(Tensor<double>::gaussian({hw, hw, 3}, rng, 0.3));
        Mask m{hw, hw, std::vector<std::uint8_t>(hw * hw)};
        for (auto& v : m.ids)
            v = static_cast<std::uint8_t>(rng.uniform_index(cfg.data.num_classes + 1));
        for (auto& v : m.ids)
            if (v == cfg.data.num_classes) v = kIgnoreLabel;
        masks.push_back(std::move(m));
    }

    auto loss_fn = [&]() -> Tensor<double> {
        Tensor<double> total;
        for (int s = 0; s < 2; ++s) {
            Tensor<double> l = combined_loss(model.forward(imgs[s]), masks[s], 1.0);
            total = (s == 0) ? l : add(total, l);
        }
        return scale_add(total, 0.5);
    };

    std::vector<std::pair<std::string, Tensor<double>>> named;
    for (auto& p : model.params()) named.emplace_back(p.name, p.tensor);

    GradCheckReport<double> report =
        finite_diff_grad_check<double>(loss_fn, named, eps, tol);

    GradCheckSummary out;
    out.worst_rel_err = report.worst_rel_err;
    out.checked = report.checked;
    out.passed = report.passed();
    for (const auto& e : report.entries) {
        auto it = std::find_if(out.groups.begin(), out.groups.end(),
                               [&](const GradCheckGroup& g) { return g.name == e.param; });
        if (it == out.groups.end()) {
            out.groups.push_back(GradCheckGroup{e.param, static_cast<double>(e.rel_err), 1,
                                                e.pass});
        } else {
            it->worst_rel_err = std::max(it->worst_rel_err, static_cast<double>(e.rel_err));
            it->pass = it->pass && e.pass;
            ++it->checked;
        }
    }
    if (log) {
        (*log) << std::scientific << std::setprecision(3);
        for (const auto& g : out.groups)
            (*log) << (g.pass ? "[pass] " : "[FAIL] ") << std::setw(28) << std::left << g.name
                   << " worst rel err " << g.worst_rel_err << " (" << g.checked << " elements)\n";
        (*log) << (out.passed ? "[pass] " : "[FAIL] ") << "overall worst rel err "
               << out.worst_rel_err << " over " << out.checked << " elements\n";
    }
    return out;
}

}  // namespace schnet

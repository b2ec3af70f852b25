// schnet command-line driver: synthetic data generation, training,
// evaluation, the four-row ablation sweep, and full-stack gradient
// verification. Exit status 0 only on full success.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "schnet/schnet.hpp"

using namespace schnet;

namespace {

int cmd_synth_data(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path);
    auto manifest = generate_synthetic(cfg.synth, out_dir);
    std::size_t train = 0, val = 0;
    for (const auto& e : manifest) (e.split == "train" ? train : val) += 1;
    std::cout << "wrote " << train << " train + " << val << " val samples to " << out_dir
              << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path);
    TrainResult r = train_model<float>(cfg, out_dir, &std::cout);
    std::cout << "checkpoint: " << r.checkpoint_path << "\n";
    std::cout << format_report(r.val_metrics, cfg.data.class_names);
    if (r.frozen_hash_before != r.frozen_hash_after) {
        std::cerr << "error: frozen encoder weights changed during training\n";
        return 1;
    }
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, bool tta) {
    auto loaded = load_checkpoint<float>(ckpt_path);
    Dataset ds = load_dataset(data_dir);
    if (ds.val.empty()) throw DataError("no val split under '" + data_dir + "'");
    const RunConfig& cfg = loaded.model->cfg();
    MetricsReport r =
        evaluate_model(*loaded.model, ds.val, tta ? &cfg.tta : nullptr);
    std::cout << format_report(r, cfg.data.class_names);
    std::cout << report_kv(r, cfg.data.class_names);
    return 0;
}

int cmd_ablate(const std::string& config_path, std::size_t seeds, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path);
    auto rows = run_ablation(cfg, out_dir, seeds, &std::cout);
    std::cout << format_ablation_table(rows);
    return 0;
}

int cmd_gradcheck(const std::string& config_path) {
    RunConfig cfg = load_config(config_path);
    GradCheckSummary s = gradcheck_full_stack(cfg, 1e-5, 1e-4, &std::cout);
    return s.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"schnet: two-encoder human-parsing testbed"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path, data_dir;
    bool tta = false;
    std::size_t seeds = 3;

    auto* synth = app.add_subcommand("synth-data", "generate the synthetic parsing dataset");
    synth->add_option("--config", config_path, "config file")->required();
    synth->add_option("--out", out_dir, "output dataset directory")->required();

    auto* train = app.add_subcommand("train", "train on a dataset directory");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--out", out_dir, "run output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's val split");
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_flag("--tta", tta, "multi-scale + flip test-time augmentation");

    auto* ablate = app.add_subcommand("ablate", "train the four-configuration ablation");
    ablate->add_option("--config", config_path, "config file")->required();
    ablate->add_option("--seeds", seeds, "number of seeds per row");
    ablate->add_option("--out", out_dir, "directory for the ablation runs");

    auto* gradcheck = app.add_subcommand("gradcheck", "verify gradients with f64 differences");
    gradcheck->add_option("--config", config_path, "config file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth_data(config_path, out_dir);
        if (train->parsed()) return cmd_train(config_path, out_dir);
        if (eval->parsed()) return cmd_eval(ckpt_path, data_dir, tta);
        if (ablate->parsed())
            return cmd_ablate(config_path, seeds, out_dir.empty() ? "ablate_out" : out_dir);
        if (gradcheck->parsed()) return cmd_gradcheck(config_path);
    } catch (const TrainingAbort& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

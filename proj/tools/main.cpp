#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lmtc/ablate.hpp"
#include "lmtc/experiment.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    long long seed_override = -1;
    bool quick = false;
    bool no_label_bias = false;
    bool include_specials = false;
};

lmtc::ExperimentConfig resolve_config(const CommonOpts& opts) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    if (!opts.config_path.empty()) j = lmtc::load_json_file(opts.config_path);
    if (opts.quick) j = lmtc::quick_preset_overlay(j);
    if (opts.seed_override >= 0) j["seed"] = opts.seed_override;
    auto cfg = lmtc::parse_experiment_config(j);
    if (opts.no_label_bias) cfg.head.label_bias = false;
    if (opts.include_specials) cfg.train.segmenter.include_specials = true;
    return cfg;
}

std::string default_out(const char* fallback) {
    if (const char* env = std::getenv("LMTC_OUT")) return env;
    return fallback;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_flags = true) {
    cmd->add_option("--config", opts.config_path, "JSON experiment config");
    cmd->add_option("--seed", opts.seed_override, "override the config seed");
    cmd->add_flag("--quick", opts.quick, "CI-speed preset (1k docs, 50 labels, 1 layer, 3 epochs)");
    if (with_flags) {
        cmd->add_flag("--no-label-bias", opts.no_label_bias,
                      "drop the per-label bias inside the sigmoid (literal attention equation)");
        cmd->add_flag("--include-specials", opts.include_specials,
                      "keep CLS/SEP columns in the document hidden states");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale label-attention classifier for long, many-label documents"};
    app.require_subcommand(1);

    CommonOpts gen_opts, pre_opts, train_opts, ablate_opts;
    std::string out_dir, data_dir, init_ckpt, run_dir, split, suite, format = "md";
    double threshold_override = -1.0;
    bool dump_attention = false;
    std::vector<std::string> run_dirs;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    add_common(gen, gen_opts, false);
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* pre = app.add_subcommand("pretrain", "masked-language-model pretraining");
    add_common(pre, pre_opts, false);
    pre->add_option("--data", data_dir, "corpus directory (overrides config data_path)");
    pre->add_option("--out", init_ckpt, "output checkpoint path")->required();

    auto* train = app.add_subcommand("train", "fine-tune a classifier");
    add_common(train, train_opts);
    train->add_option("--data", data_dir, "corpus directory (overrides config data_path)");
    std::string train_init;
    train->add_option("--init", train_init, "encoder checkpoint to initialize from, or 'random'");
    train->add_option("--out", run_dir, "run directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a finished run");
    eval->add_option("--run", run_dir, "run directory")->required();
    eval->add_option("--split", split, "train/dev/test (default: config eval.split)");
    eval->add_option("--threshold", threshold_override, "override the tuned threshold");
    eval->add_flag("--dump-attention", dump_attention, "write per-document attention maps");

    auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
    add_common(ablate, ablate_opts);
    ablate->add_option("--suite", suite, "heads|pretrain|lengths|truncation|top-k|schedule")
        ->required();
    ablate->add_option("--out", out_dir, "output directory")->required();

    auto* report = app.add_subcommand("report", "merge run evaluations into one table");
    report->add_option("--runs", run_dirs, "run directories")->required()->expected(-1);
    report->add_option("--format", format, "json|csv|md");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            auto cfg = resolve_config(gen_opts);
            lmtc::run_gen_data(cfg, out_dir.empty() ? default_out("data") : out_dir);
        } else if (pre->parsed()) {
            auto cfg = resolve_config(pre_opts);
            if (!data_dir.empty()) cfg.data_path = data_dir;
            lmtc::run_pretrain(cfg, init_ckpt);
        } else if (train->parsed()) {
            auto cfg = resolve_config(train_opts);
            if (!data_dir.empty()) cfg.data_path = data_dir;
            if (train_init == "random") train_init.clear();
            auto out = lmtc::run_train(cfg, run_dir, train_init);
            std::cout << "best epoch " << out.result.best_epoch << ", threshold "
                      << out.result.best_threshold << ", dev micro_f1 "
                      << out.result.best_dev.micro_f1 << "\n";
        } else if (eval->parsed()) {
            auto out = lmtc::run_eval(run_dir, split, threshold_override, dump_attention);
            std::cout << lmtc::report_table(out.report);
            if (out.threshold_source == "override")
                std::cout << "threshold_source  override\n";
        } else if (ablate->parsed()) {
            auto cfg = resolve_config(ablate_opts);
            auto result = lmtc::run_ablate(suite, cfg, out_dir);
            std::cout << lmtc::comparison_markdown(result);
        } else if (report->parsed()) {
            auto result = lmtc::collect_runs(run_dirs);
            if (format == "json") std::cout << lmtc::comparison_json(result).dump(2) << "\n";
            else if (format == "csv") std::cout << lmtc::comparison_csv(result);
            else if (format == "md") std::cout << lmtc::comparison_markdown(result);
            else throw lmtc::ConfigError("report format must be json, csv, or md");
        }
    } catch (const lmtc::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const lmtc::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const lmtc::IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

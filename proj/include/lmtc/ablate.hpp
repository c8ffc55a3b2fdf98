#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lmtc/experiment.hpp"

namespace lmtc {

struct AblationRow {
    std::string variant;
    MetricsReport test;
};

struct AblationResult {
    std::string suite;
    std::vector<AblationRow> rows;
};

namespace ablate_detail {

inline nlohmann::ordered_json row_json(const AblationRow& r) {
    nlohmann::ordered_json j;
    j["variant"] = r.variant;
    j["micro_f1"] = r.test.micro_f1;
    j["macro_f1"] = r.test.macro_f1;
    j["micro_auc"] = r.test.micro_auc;
    j["macro_auc"] = r.test.macro_auc;
    j["p_at_5"] = r.test.p_at_5;
    j["p_at_8"] = r.test.p_at_8;
    j["p_at_15"] = r.test.p_at_15;
    return j;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

}  // namespace ablate_detail

inline const std::vector<std::pair<std::string, std::function<double(const MetricsReport&)>>>&
comparison_columns() {
    static const std::vector<std::pair<std::string, std::function<double(const MetricsReport&)>>>
        cols = {
            {"micro_f1", [](const MetricsReport& r) { return r.micro_f1; }},
            {"macro_f1", [](const MetricsReport& r) { return r.macro_f1; }},
            {"micro_auc", [](const MetricsReport& r) { return r.micro_auc; }},
            {"macro_auc", [](const MetricsReport& r) { return r.macro_auc; }},
            {"p@5", [](const MetricsReport& r) { return r.p_at_5; }},
            {"p@8", [](const MetricsReport& r) { return r.p_at_8; }},
            {"p@15", [](const MetricsReport& r) { return r.p_at_15; }},
        };
    return cols;
}

inline std::string comparison_csv(const AblationResult& result) {
    std::ostringstream os;
    os << "variant";
    for (const auto& [name, _] : comparison_columns()) os << "," << ablate_detail::csv_escape(name);
    os << "\r\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& row : result.rows) {
        os << ablate_detail::csv_escape(row.variant);
        for (const auto& [_, get] : comparison_columns()) os << "," << get(row.test);
        os << "\r\n";
    }
    return os.str();
}

inline std::string comparison_markdown(const AblationResult& result) {
    std::ostringstream os;
    os << "| variant |";
    for (const auto& [name, _] : comparison_columns()) os << " " << name << " |";
    os << "\n|---|";
    for (size_t i = 0; i < comparison_columns().size(); ++i) os << "---|";
    os << "\n" << std::fixed << std::setprecision(4);
    for (const auto& row : result.rows) {
        os << "| " << row.variant << " |";
        for (const auto& [_, get] : comparison_columns()) os << " " << get(row.test) << " |";
        os << "\n";
    }
    return os.str();
}

inline nlohmann::ordered_json comparison_json(const AblationResult& result) {
    nlohmann::ordered_json j;
    j["suite"] = result.suite;
    auto& rows = j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : result.rows) rows.push_back(ablate_detail::row_json(row));
    return j;
}

/// Runs a named ablation suite: the data and seed are fixed across variants
/// so metric differences isolate the ablated factor. Each variant gets its
/// own run directory; a consolidated comparison table lands in out_dir.
inline AblationResult run_ablate(const std::string& suite, ExperimentConfig cfg,
                                 const std::string& out_dir) {
    fs::create_directories(out_dir);
    // Shared data for every variant.
    if (cfg.data_path.empty()) {
        run_gen_data(cfg, out_dir + "/data");
        cfg.data_path = out_dir + "/data";
    }

    std::vector<std::pair<std::string, ExperimentConfig>> variants;
    std::string pretrain_ckpt;
    if (suite == "heads") {
        for (HeadKind kind :
             {HeadKind::kLaat, HeadKind::kCaml, HeadKind::kBertXml, HeadKind::kClsMean}) {
            ExperimentConfig v = cfg;
            v.head.kind = kind;
            variants.emplace_back(head_kind_name(kind), v);
        }
    } else if (suite == "pretrain") {
        pretrain_ckpt = out_dir + "/pretrained.ckpt";
        run_pretrain(cfg, pretrain_ckpt);
        variants.emplace_back("random-init", cfg);
        variants.emplace_back("mlm-pretrained", cfg);
    } else if (suite == "lengths") {
        const int base_max = cfg.train.segmenter.max_doc_len;
        for (int c : {32, 64, 128, 256}) {
            if (base_max < c) continue;
            ExperimentConfig v = cfg;
            v.train.segmenter.segment_len = c;
            v.train.segmenter.max_doc_len = (base_max / c) * c;
            variants.emplace_back("c" + std::to_string(c), v);
        }
        {
            ExperimentConfig v = cfg;  // doubled maximum document length
            v.train.segmenter.max_doc_len = base_max * 2;
            variants.emplace_back("max" + std::to_string(base_max * 2), v);
        }
    } else if (suite == "truncation") {
        variants.emplace_back("full", cfg);
        ExperimentConfig front = cfg;
        front.train.segmenter.max_doc_len = front.train.segmenter.segment_len;
        front.train.segmenter.truncation = TruncateMode::kFront;
        variants.emplace_back("front-1seg", front);
        ExperimentConfig back = front;
        back.train.segmenter.truncation = TruncateMode::kBack;
        variants.emplace_back("back-1seg", back);
    } else if (suite == "top-k") {
        ExperimentConfig full = cfg;
        full.top_k_labels = 0;
        variants.emplace_back("full-labels", full);
        ExperimentConfig topk = cfg;
        topk.top_k_labels = 50;
        variants.emplace_back("top-50", topk);
    } else if (suite == "schedule") {
        variants.emplace_back("warmup-linear-decay", cfg);
        ExperimentConfig constant = cfg;
        constant.train.schedule = TrainConfig::Schedule::kConstant;
        variants.emplace_back("constant", constant);
        ExperimentConfig low = cfg;  // the reduced-learning-rate comparison
        low.train.peak_lr = cfg.train.peak_lr * 0.4;
        variants.emplace_back("low-lr", low);
    } else {
        throw ConfigError("unknown ablation suite \"" + suite + "\"");
    }

    AblationResult result;
    result.suite = suite;
    for (auto& [name, vcfg] : variants) {
        const std::string run_dir = out_dir + "/" + name;
        const std::string init =
            (suite == "pretrain" && name == "mlm-pretrained") ? pretrain_ckpt : "";
        run_train(vcfg, run_dir, init);
        auto eval = run_eval(run_dir, "test");
        result.rows.push_back({name, eval.report});
    }

    write_text_file(out_dir + "/comparison.json", comparison_json(result).dump(2) + "\n");
    write_text_file(out_dir + "/comparison.csv", comparison_csv(result));
    write_text_file(out_dir + "/comparison.md", comparison_markdown(result));
    return result;
}

/// Merge eval reports from several run directories into one table.
inline AblationResult collect_runs(const std::vector<std::string>& run_dirs) {
    AblationResult result;
    result.suite = "report";
    for (const auto& dir : run_dirs) {
        const std::string eval_path = dir + "/eval_test.json";
        nlohmann::ordered_json j;
        if (fs::exists(eval_path)) {
            j = load_json_file(eval_path);
        } else if (fs::exists(dir + "/manifest.json")) {
            j = load_json_file(dir + "/manifest.json")["final_metrics"];
        } else {
            throw IoError("no eval_test.json or manifest.json under " + dir);
        }
        AblationRow row;
        row.variant = fs::path(dir).filename().string();
        row.test.micro_f1 = j.value("micro_f1", 0.0);
        row.test.macro_f1 = j.value("macro_f1", 0.0);
        row.test.micro_auc = j.value("micro_auc", 0.0);
        row.test.macro_auc = j.value("macro_auc", 0.0);
        row.test.p_at_5 = j.value("p_at_5", 0.0);
        row.test.p_at_8 = j.value("p_at_8", 0.0);
        row.test.p_at_15 = j.value("p_at_15", 0.0);
        result.rows.push_back(std::move(row));
    }
    return result;
}

}  // namespace lmtc

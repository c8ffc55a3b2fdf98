#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmtc/corpus.hpp"
#include "lmtc/encoder.hpp"
#include "lmtc/heads.hpp"
#include "lmtc/metrics.hpp"
#include "lmtc/segmenter.hpp"
#include "lmtc/tokenizer.hpp"
#include "lmtc/training.hpp"

#ifndef LMTC_BUILD_ID
#define LMTC_BUILD_ID "unknown"
#endif

namespace lmtc {

namespace fs = std::filesystem;

// ---- config ------------------------------------------------------------------

struct TokenizerConfig {
    Tokenizer::Kind kind = Tokenizer::Kind::kWord;
    int vocab_size = 8192;  // word-level budget
    int bpe_merges = 4096;
};

struct PretrainConfig {
    int steps = 1000;
    int batch_segments = 8;
    double peak_lr = 3e-4;
    int warmup_steps = 100;
    double weight_decay = 0.01;
};

struct EvalConfig {
    std::string split = "test";
    double threshold = -1.0;  // < 0: use the dev-tuned threshold
    bool permissive_labels = false;
    bool dump_attention = false;
    int attention_top_k = 10;
    int attention_docs = 8;
};

struct ExperimentConfig {
    uint64_t seed = 0;
    std::string data_path;   // empty: generate synthetically from `corpus`
    int top_k_labels = 0;    // 0: keep the full label space
    SyntheticSpec corpus;
    TokenizerConfig tokenizer;
    EncoderConfig encoder;   // vocab_size resolved after tokenizer training
    HeadConfig head;         // num_labels / hidden_dim resolved from data
    PretrainConfig pretrain;
    TrainConfig train;       // embeds SegmenterOptions
    EvalConfig eval;
};

namespace cfg_detail {

inline void reject_unknown(const nlohmann::ordered_json& j, const std::string& scope,
                           const std::set<std::string>& known) {
    for (const auto& [key, _] : j.items())
        if (!known.count(key))
            throw ConfigError("unknown config key \"" + (scope.empty() ? key : scope + "." + key) +
                              "\"");
}

template <typename T>
void maybe(const nlohmann::ordered_json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace cfg_detail

/// Strict parse: every key must be known, `seed` is mandatory, defaults fill
/// the rest. The resolved configuration (resolved_config_json) is the contract.
inline ExperimentConfig parse_experiment_config(const nlohmann::ordered_json& j) {
    using cfg_detail::maybe;
    using cfg_detail::reject_unknown;
    reject_unknown(j, "", {"seed", "data_path", "top_k_labels", "corpus", "tokenizer", "encoder",
                           "head", "pretrain", "train", "segmenter", "eval"});
    ExperimentConfig c;
    if (!j.contains("seed")) throw ConfigError("config requires a \"seed\"");
    c.seed = j.at("seed").get<uint64_t>();
    maybe(j, "data_path", c.data_path);
    maybe(j, "top_k_labels", c.top_k_labels);
    if (c.top_k_labels < 0) throw ConfigError("top_k_labels must be >= 0");

    if (j.contains("corpus")) {
        const auto& s = j.at("corpus");
        reject_unknown(s, "corpus",
                       {"num_labels", "zipf_exponent", "train_docs", "dev_docs", "test_docs",
                        "doc_len_mean", "doc_len_min", "doc_len_max", "mean_labels_per_doc",
                        "keywords_per_label", "noise_rate"});
        maybe(s, "num_labels", c.corpus.num_labels);
        maybe(s, "zipf_exponent", c.corpus.zipf_exponent);
        maybe(s, "train_docs", c.corpus.train_docs);
        maybe(s, "dev_docs", c.corpus.dev_docs);
        maybe(s, "test_docs", c.corpus.test_docs);
        maybe(s, "doc_len_mean", c.corpus.doc_len_mean);
        maybe(s, "doc_len_min", c.corpus.doc_len_min);
        maybe(s, "doc_len_max", c.corpus.doc_len_max);
        maybe(s, "mean_labels_per_doc", c.corpus.mean_labels_per_doc);
        maybe(s, "keywords_per_label", c.corpus.keywords_per_label);
        maybe(s, "noise_rate", c.corpus.noise_rate);
    }
    c.corpus.seed = c.seed;

    if (j.contains("tokenizer")) {
        const auto& s = j.at("tokenizer");
        reject_unknown(s, "tokenizer", {"type", "vocab_size", "bpe_merges"});
        if (s.contains("type")) {
            const std::string t = s.at("type").get<std::string>();
            if (t == "word") c.tokenizer.kind = Tokenizer::Kind::kWord;
            else if (t == "bpe") c.tokenizer.kind = Tokenizer::Kind::kBpe;
            else throw ConfigError("tokenizer.type must be \"word\" or \"bpe\"");
        }
        maybe(s, "vocab_size", c.tokenizer.vocab_size);
        maybe(s, "bpe_merges", c.tokenizer.bpe_merges);
    }

    if (j.contains("encoder")) {
        const auto& s = j.at("encoder");
        reject_unknown(s, "encoder", {"layers", "heads", "hidden_dim", "ffn_dim", "dropout"});
        maybe(s, "layers", c.encoder.layers);
        maybe(s, "heads", c.encoder.heads);
        maybe(s, "hidden_dim", c.encoder.hidden_dim);
        maybe(s, "ffn_dim", c.encoder.ffn_dim);
        maybe(s, "dropout", c.encoder.dropout);
    }

    if (j.contains("head")) {
        const auto& s = j.at("head");
        reject_unknown(s, "head", {"type", "attn_dim", "label_bias", "attention_bias"});
        if (s.contains("type")) c.head.kind = head_kind_from_name(s.at("type").get<std::string>());
        maybe(s, "attn_dim", c.head.attn_dim);
        maybe(s, "label_bias", c.head.label_bias);
        maybe(s, "attention_bias", c.head.attention_bias);
    }

    if (j.contains("pretrain")) {
        const auto& s = j.at("pretrain");
        reject_unknown(s, "pretrain",
                       {"steps", "batch_segments", "peak_lr", "warmup_steps", "weight_decay"});
        maybe(s, "steps", c.pretrain.steps);
        maybe(s, "batch_segments", c.pretrain.batch_segments);
        maybe(s, "peak_lr", c.pretrain.peak_lr);
        maybe(s, "warmup_steps", c.pretrain.warmup_steps);
        maybe(s, "weight_decay", c.pretrain.weight_decay);
    }

    if (j.contains("segmenter")) {
        const auto& s = j.at("segmenter");
        reject_unknown(s, "segmenter",
                       {"segment_len", "max_doc_len", "truncation", "include_specials"});
        maybe(s, "segment_len", c.train.segmenter.segment_len);
        maybe(s, "max_doc_len", c.train.segmenter.max_doc_len);
        if (s.contains("truncation")) {
            const std::string t = s.at("truncation").get<std::string>();
            if (t == "front") c.train.segmenter.truncation = TruncateMode::kFront;
            else if (t == "back") c.train.segmenter.truncation = TruncateMode::kBack;
            else throw ConfigError("segmenter.truncation must be \"front\" or \"back\"");
        }
        maybe(s, "include_specials", c.train.segmenter.include_specials);
    }
    if (c.train.segmenter.max_doc_len % c.train.segmenter.segment_len != 0) {
        const int rounded =
            (c.train.segmenter.max_doc_len / c.train.segmenter.segment_len) *
            c.train.segmenter.segment_len;
        if (rounded < c.train.segmenter.segment_len)
            throw ConfigError("segmenter.max_doc_len must be >= segment_len");
        std::cerr << "warning: segmenter.max_doc_len rounded down to " << rounded << "\n";
        c.train.segmenter.max_doc_len = rounded;
    }
    c.encoder.segment_len = c.train.segmenter.segment_len;

    if (j.contains("train")) {
        const auto& s = j.at("train");
        reject_unknown(s, "train",
                       {"epochs", "peak_lr", "warmup_steps", "batch_size", "weight_decay",
                        "schedule", "threshold_grid", "threads"});
        maybe(s, "epochs", c.train.epochs);
        maybe(s, "peak_lr", c.train.peak_lr);
        maybe(s, "warmup_steps", c.train.warmup_steps);
        maybe(s, "batch_size", c.train.batch_size);
        maybe(s, "weight_decay", c.train.weight_decay);
        maybe(s, "threads", c.train.threads);
        if (s.contains("schedule")) {
            const std::string t = s.at("schedule").get<std::string>();
            if (t == "linear-decay") c.train.schedule = TrainConfig::Schedule::kLinearDecay;
            else if (t == "constant") c.train.schedule = TrainConfig::Schedule::kConstant;
            else throw ConfigError("train.schedule must be \"linear-decay\" or \"constant\"");
        }
        if (s.contains("threshold_grid")) {
            const auto& g = s.at("threshold_grid");
            reject_unknown(g, "train.threshold_grid", {"start", "stop", "step"});
            maybe(g, "start", c.train.grid.start);
            maybe(g, "stop", c.train.grid.stop);
            maybe(g, "step", c.train.grid.step);
        }
    }
    c.train.seed = c.seed;

    if (j.contains("eval")) {
        const auto& s = j.at("eval");
        reject_unknown(s, "eval",
                       {"split", "threshold", "permissive_labels", "dump_attention",
                        "attention_top_k", "attention_docs"});
        maybe(s, "split", c.eval.split);
        if (s.contains("threshold") && !s.at("threshold").is_null())
            c.eval.threshold = s.at("threshold").get<double>();
        maybe(s, "permissive_labels", c.eval.permissive_labels);
        maybe(s, "dump_attention", c.eval.dump_attention);
        maybe(s, "attention_top_k", c.eval.attention_top_k);
        maybe(s, "attention_docs", c.eval.attention_docs);
    }
    return c;
}

inline nlohmann::ordered_json resolved_config_json(const ExperimentConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["data_path"] = c.data_path;
    j["top_k_labels"] = c.top_k_labels;
    j["corpus"] = {{"num_labels", c.corpus.num_labels},
                   {"zipf_exponent", c.corpus.zipf_exponent},
                   {"train_docs", c.corpus.train_docs},
                   {"dev_docs", c.corpus.dev_docs},
                   {"test_docs", c.corpus.test_docs},
                   {"doc_len_mean", c.corpus.doc_len_mean},
                   {"doc_len_min", c.corpus.doc_len_min},
                   {"doc_len_max", c.corpus.doc_len_max},
                   {"mean_labels_per_doc", c.corpus.mean_labels_per_doc},
                   {"keywords_per_label", c.corpus.keywords_per_label},
                   {"noise_rate", c.corpus.noise_rate}};
    j["tokenizer"] = {{"type", c.tokenizer.kind == Tokenizer::Kind::kWord ? "word" : "bpe"},
                      {"vocab_size", c.tokenizer.vocab_size},
                      {"bpe_merges", c.tokenizer.bpe_merges}};
    j["encoder"] = {{"layers", c.encoder.layers},
                    {"heads", c.encoder.heads},
                    {"hidden_dim", c.encoder.hidden_dim},
                    {"ffn_dim", c.encoder.ffn_dim},
                    {"dropout", c.encoder.dropout}};
    j["head"] = {{"type", head_kind_name(c.head.kind)},
                 {"attn_dim", c.head.attn_dim},
                 {"label_bias", c.head.label_bias},
                 {"attention_bias", c.head.attention_bias}};
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch_segments", c.pretrain.batch_segments},
                     {"peak_lr", c.pretrain.peak_lr},
                     {"warmup_steps", c.pretrain.warmup_steps},
                     {"weight_decay", c.pretrain.weight_decay}};
    j["segmenter"] = {{"segment_len", c.train.segmenter.segment_len},
                      {"max_doc_len", c.train.segmenter.max_doc_len},
                      {"truncation",
                       c.train.segmenter.truncation == TruncateMode::kFront ? "front" : "back"},
                      {"include_specials", c.train.segmenter.include_specials}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"peak_lr", c.train.peak_lr},
                  {"warmup_steps", c.train.warmup_steps},
                  {"batch_size", c.train.batch_size},
                  {"weight_decay", c.train.weight_decay},
                  {"schedule",
                   c.train.schedule == TrainConfig::Schedule::kLinearDecay ? "linear-decay"
                                                                           : "constant"},
                  {"threshold_grid",
                   {{"start", c.train.grid.start},
                    {"stop", c.train.grid.stop},
                    {"step", c.train.grid.step}}},
                  {"threads", c.train.threads}};
    j["eval"] = {{"split", c.eval.split},
                 {"threshold", c.eval.threshold < 0
                                   ? nlohmann::ordered_json(nullptr)
                                   : nlohmann::ordered_json(c.eval.threshold)},
                 {"permissive_labels", c.eval.permissive_labels},
                 {"dump_attention", c.eval.dump_attention},
                 {"attention_top_k", c.eval.attention_top_k},
                 {"attention_docs", c.eval.attention_docs}};
    return j;
}

inline nlohmann::ordered_json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    auto j = nlohmann::ordered_json::parse(in, nullptr, false);
    if (j.is_discarded()) throw IoError("malformed JSON in " + path);
    return j;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    return parse_experiment_config(load_json_file(path));
}

/// CI-speed preset: 1k docs, 50 labels, 1 encoder layer, 3 epochs, small
/// model. Applied before the user's config keys are read, so explicit keys
/// still win.
inline nlohmann::ordered_json quick_preset_overlay(nlohmann::ordered_json user) {
    nlohmann::ordered_json base;
    base["corpus"] = {{"num_labels", 50},     {"train_docs", 1000}, {"dev_docs", 200},
                      {"test_docs", 200},     {"doc_len_mean", 384}, {"doc_len_min", 128},
                      {"doc_len_max", 768},   {"mean_labels_per_doc", 4.0}};
    base["tokenizer"] = {{"vocab_size", 2048}};
    base["encoder"] = {{"layers", 1}, {"heads", 4}, {"hidden_dim", 64}, {"ffn_dim", 256},
                       {"dropout", 0.1}};
    base["segmenter"] = {{"segment_len", 128}, {"max_doc_len", 768}};
    base["train"] = {{"epochs", 3}, {"peak_lr", 3e-4}, {"warmup_steps", 50}, {"batch_size", 8}};
    base["pretrain"] = {{"steps", 300}};
    base.update(user, /*merge_objects=*/true);
    return base;
}

// ---- filesystem helpers --------------------------------------------------------

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << content;
    if (!out) throw IoError("short write on " + path);
}

/// Write-then-rename so readers never observe a partial file.
inline void write_text_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    write_text_file(tmp, content);
    fs::rename(tmp, path);
}

inline std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

// ---- data preparation ------------------------------------------------------------

struct PreparedData {
    Corpus corpus;  // after optional top-K filtering
    Tokenizer tokenizer;
    std::vector<TokenizedDoc> train, dev, test;
    int dropped_unknown_labels = 0;
};

inline Corpus load_corpus_dir(const std::string& dir, bool permissive) {
    Corpus corpus;
    const std::string ls_path = dir + "/labelspace.json";
    if (fs::exists(ls_path)) corpus.labels = LabelSpace::load(ls_path);
    auto train = load_jsonl(dir + "/train.jsonl", corpus.labels, LoadMode::kTrain);
    const auto mode = permissive ? LoadMode::kPermissive : LoadMode::kStrict;
    auto dev = load_jsonl(dir + "/dev.jsonl", corpus.labels, mode);
    auto test = load_jsonl(dir + "/test.jsonl", corpus.labels, mode);
    corpus.train = std::move(train.docs);
    corpus.dev = std::move(dev.docs);
    corpus.test = std::move(test.docs);
    if (dev.dropped_unknown_labels + test.dropped_unknown_labels > 0)
        std::cerr << "warning: dropped " << dev.dropped_unknown_labels +
                         test.dropped_unknown_labels
                  << " unknown label references in dev/test\n";
    // Frequencies may be absent when loading foreign data; recompute.
    std::fill(corpus.labels.train_frequency.begin(), corpus.labels.train_frequency.end(), 0LL);
    for (const auto& d : corpus.train)
        for (int l : d.labels) ++corpus.labels.train_frequency[static_cast<size_t>(l)];
    return corpus;
}

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    PreparedData data;
    data.corpus = cfg.data_path.empty() ? generate_synthetic(cfg.corpus)
                                        : load_corpus_dir(cfg.data_path, cfg.eval.permissive_labels);
    if (cfg.top_k_labels > 0) data.corpus = filter_top_labels(data.corpus, cfg.top_k_labels);

    std::vector<std::string> texts;
    texts.reserve(data.corpus.train.size());
    for (const auto& d : data.corpus.train) texts.push_back(join_words(d.words));
    data.tokenizer.kind = cfg.tokenizer.kind;
    if (cfg.tokenizer.kind == Tokenizer::Kind::kWord)
        data.tokenizer.word_vocab = train_word_vocab(texts, cfg.tokenizer.vocab_size);
    else
        data.tokenizer.bpe = train_bpe(texts, cfg.tokenizer.bpe_merges);

    data.train = tokenize_docs(data.corpus.train, data.tokenizer);
    data.dev = tokenize_docs(data.corpus.dev, data.tokenizer);
    data.test = tokenize_docs(data.corpus.test, data.tokenizer);
    return data;
}

template <typename T>
Model<T> build_model(const ExperimentConfig& cfg, int vocab_size, int num_labels) {
    EncoderConfig ec = cfg.encoder;
    ec.vocab_size = vocab_size;
    ec.segment_len = cfg.train.segmenter.segment_len;
    HeadConfig hc = cfg.head;
    hc.num_labels = num_labels;
    hc.hidden_dim = ec.hidden_dim;
    Model<T> m{init_encoder<T>(ec, cfg.seed), init_head<T>(hc, cfg.seed + 1),
               cfg.train.segmenter};
    return m;
}

// ---- commands ---------------------------------------------------------------------

/// gen-data: train/dev/test JSONL + label space + stats, fully deterministic.
inline void run_gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    Corpus corpus = generate_synthetic(cfg.corpus);
    save_jsonl(corpus.train, corpus.labels, out_dir + "/train.jsonl");
    save_jsonl(corpus.dev, corpus.labels, out_dir + "/dev.jsonl");
    save_jsonl(corpus.test, corpus.labels, out_dir + "/test.jsonl");
    corpus.labels.save(out_dir + "/labelspace.json");
    nlohmann::ordered_json stats;
    stats["train"] = dataset_stats(corpus.train, corpus.labels);
    if (!corpus.dev.empty()) stats["dev"] = dataset_stats(corpus.dev, corpus.labels);
    if (!corpus.test.empty()) stats["test"] = dataset_stats(corpus.test, corpus.labels);
    write_text_file(out_dir + "/stats.json", stats.dump(2) + "\n");
    write_text_file(out_dir + "/resolved_config.json", resolved_config_json(cfg).dump(2) + "\n");
}

inline void save_tokenizer(const Tokenizer& tok, const std::string& dir) {
    if (tok.kind == Tokenizer::Kind::kWord) {
        tok.word_vocab.save(dir + "/vocab.txt");
    } else {
        tok.bpe.save(dir + "/vocab.txt", dir + "/merges.txt");
    }
}

inline Tokenizer load_tokenizer(const ExperimentConfig& cfg, const std::string& dir) {
    Tokenizer tok;
    tok.kind = cfg.tokenizer.kind;
    if (tok.kind == Tokenizer::Kind::kWord)
        tok.word_vocab = Vocabulary::load(dir + "/vocab.txt");
    else
        tok.bpe = BpeModel::load(dir + "/vocab.txt", dir + "/merges.txt");
    return tok;
}

/// pretrain: MLM over the training split's segments; emits the encoder
/// checkpoint and a loss-curve JSONL.
inline void run_pretrain(const ExperimentConfig& cfg, const std::string& out_ckpt) {
    PreparedData data = prepare_data(cfg);
    EncoderConfig ec = cfg.encoder;
    ec.vocab_size = data.tokenizer.vocab_size();
    ec.segment_len = cfg.train.segmenter.segment_len;
    auto state = init_encoder<float>(ec, cfg.seed);
    auto params = state.parameters();
    auto opt = OptimizerState<float>::init(params);

    std::vector<Segment> segments;
    for (const auto& doc : data.train) {
        auto segs = split_segments(doc.tokens, cfg.train.segmenter.segment_len,
                                   cfg.train.segmenter.max_doc_len);
        for (auto& s : segs) segments.push_back(std::move(s));
    }
    if (segments.empty()) throw ConfigError("pretrain: no segments in training data");

    std::ofstream curve(out_ckpt + ".loss.jsonl", std::ios::binary);
    Rng rng = Rng::derive(cfg.seed, {0x6d6c6d});
    TrainConfig lr_cfg;
    lr_cfg.peak_lr = cfg.pretrain.peak_lr;
    lr_cfg.warmup_steps = std::min(cfg.pretrain.warmup_steps, cfg.pretrain.steps);
    Rng drop_rng = Rng::derive(cfg.seed, {0x6d6c6d, 0xd40b});
    for (int step = 1; step <= cfg.pretrain.steps; ++step) {
        std::vector<MlmExample> batch;
        for (int b = 0; b < cfg.pretrain.batch_segments; ++b) {
            const auto& seg = segments[rng.next_below(segments.size())];
            batch.push_back(
                make_mlm_example(seg.ids, seg.real, data.tokenizer.vocab_size(), rng));
        }
        const double lr = lr_at(step, lr_cfg, cfg.pretrain.steps);
        auto loss = mlm_pretrain_step(state, params, opt, batch, lr, cfg.pretrain.weight_decay,
                                      cfg.encoder.dropout > 0.0, &drop_rng);
        if (loss && curve) {
            nlohmann::ordered_json j;
            j["step"] = step;
            j["lr"] = lr;
            j["loss"] = *loss;
            curve << j.dump() << "\n";
        }
    }
    save_encoder(state, out_ckpt);
}

struct RunOutputs {
    TrainResult result;
    std::string run_dir;
    MetricsReport test_report;
    bool has_test_report = false;
};

/// train: full fine-tuning pipeline into a self-describing run directory.
inline RunOutputs run_train(const ExperimentConfig& cfg, const std::string& run_dir,
                            const std::string& init_ckpt = "") {
    const std::string started = iso_timestamp();
    fs::create_directories(run_dir);
    write_text_file(run_dir + "/resolved_config.json", resolved_config_json(cfg).dump(2) + "\n");

    PreparedData data = prepare_data(cfg);
    save_tokenizer(data.tokenizer, run_dir);
    data.corpus.labels.save(run_dir + "/labelspace.json");

    auto model = build_model<float>(cfg, data.tokenizer.vocab_size(), data.corpus.labels.size());
    if (!init_ckpt.empty()) load_encoder(model.encoder, init_ckpt);

    std::ofstream log(run_dir + "/train_log.jsonl", std::ios::binary);
    RunOutputs out;
    out.run_dir = run_dir;
    out.result = train_model(model, data.train, data.dev, data.corpus.labels.size(), cfg.train,
                             log ? &log : nullptr);

    nlohmann::ordered_json meta;
    meta["head"] = {{"type", head_kind_name(cfg.head.kind)},
                    {"num_labels", data.corpus.labels.size()},
                    {"attn_dim", cfg.head.attn_dim},
                    {"label_bias", cfg.head.label_bias},
                    {"attention_bias", cfg.head.attention_bias}};
    meta["threshold"] = out.result.best_threshold;
    std::vector<const Parameter<float>*> head_params;
    for (auto* p : model.head.parameters()) head_params.push_back(p);
    save_encoder(model.encoder, run_dir + "/model.ckpt", head_params, meta);

    nlohmann::ordered_json tr;
    tr["best_epoch"] = out.result.best_epoch;
    tr["threshold"] = out.result.best_threshold;
    tr["steps"] = out.result.steps;
    tr["dev"] = report_to_json(out.result.best_dev, data.corpus.labels.codes);
    write_text_file(run_dir + "/train_result.json", tr.dump(2) + "\n");

    nlohmann::ordered_json manifest;
    manifest["config"] = resolved_config_json(cfg);
    manifest["build"] = LMTC_BUILD_ID;
    manifest["started_at"] = started;
    manifest["finished_at"] = iso_timestamp();
    manifest["outputs"] = {"resolved_config.json", "vocab.txt",       "labelspace.json",
                           "train_log.jsonl",      "model.ckpt",      "train_result.json",
                           "manifest.json"};
    manifest["final_metrics"] = report_to_json(out.result.best_dev);
    write_text_atomic(run_dir + "/manifest.json", manifest.dump(2) + "\n");
    return out;
}

/// Rebuild the trained model recorded in a run directory.
template <typename T>
Model<T> load_run_model(const ExperimentConfig& cfg, const std::string& run_dir,
                        const Tokenizer& tok, int num_labels, double* threshold_out) {
    auto model = build_model<T>(cfg, tok.vocab_size(), num_labels);
    CheckpointReader reader = load_encoder(model.encoder, run_dir + "/model.ckpt");
    for (auto* p : model.head.parameters()) reader.load_into(*p);
    if (threshold_out) *threshold_out = reader.meta.at("threshold").get<double>();
    return model;
}

struct EvalOutputs {
    MetricsReport report;
    double threshold = 0.5;
    std::string threshold_source;  // "tuned" or "override"
};

/// eval: metrics report (JSON + table) and a prediction dump for one split,
/// using the dev-tuned threshold unless overridden.
inline EvalOutputs run_eval(const std::string& run_dir, std::string split = "",
                            double threshold_override = -1.0, bool dump_attention = false) {
    ExperimentConfig cfg =
        parse_experiment_config(load_json_file(run_dir + "/resolved_config.json"));
    if (split.empty()) split = cfg.eval.split;
    if (cfg.eval.threshold >= 0.0 && threshold_override < 0.0)
        threshold_override = cfg.eval.threshold;

    PreparedData data = prepare_data(cfg);
    const Tokenizer tok = load_tokenizer(cfg, run_dir);
    if (tok.vocab_size() != data.tokenizer.vocab_size())
        throw IoError("run tokenizer does not match the data (vocab " +
                      std::to_string(tok.vocab_size()) + " vs " +
                      std::to_string(data.tokenizer.vocab_size()) + ")");

    EvalOutputs out;
    auto model = load_run_model<float>(cfg, run_dir, tok, data.corpus.labels.size(),
                                       &out.threshold);
    out.threshold_source = "tuned";
    if (threshold_override >= 0.0) {
        out.threshold = threshold_override;
        out.threshold_source = "override";
    }

    const std::vector<TokenizedDoc>* docs = nullptr;
    if (split == "train") docs = &data.train;
    else if (split == "dev") docs = &data.dev;
    else if (split == "test") docs = &data.test;
    else throw ConfigError("eval split must be train/dev/test, got \"" + split + "\"");
    if (docs->empty()) throw ConfigError("eval: split \"" + split + "\" is empty");

    const int threads = resolve_threads(cfg.train.threads);
    const auto scores = score_docs(model, *docs, threads);
    const auto gold = gold_matrix(*docs, data.corpus.labels.size());
    out.report = compute_report(gold, scores, out.threshold, data.corpus.labels.train_frequency);

    nlohmann::ordered_json j = report_to_json(out.report, data.corpus.labels.codes);
    j["split"] = split;
    j["threshold_source"] = out.threshold_source;
    write_text_file(run_dir + "/eval_" + split + ".json", j.dump(2) + "\n");
    write_text_file(run_dir + "/eval_" + split + ".txt", report_table(out.report));

    std::ofstream preds(run_dir + "/predictions_" + split + ".jsonl", std::ios::binary);
    for (size_t i = 0; i < docs->size(); ++i) {
        nlohmann::ordered_json p;
        p["id"] = (*docs)[i].id;
        p["scores"] = scores[i];
        std::vector<std::string> codes;
        for (int l : (*docs)[i].labels)
            codes.push_back(data.corpus.labels.codes[static_cast<size_t>(l)]);
        p["gold"] = codes;
        preds << p.dump() << "\n";
    }

    if (dump_attention || cfg.eval.dump_attention) {
        std::ofstream att(run_dir + "/attention_" + split + ".jsonl", std::ios::binary);
        const int n_docs = std::min<int>(cfg.eval.attention_docs, static_cast<int>(docs->size()));
        for (int i = 0; i < n_docs; ++i) {
            Tape<float> tape;
            auto enc = encode_document(tape, model.encoder, (*docs)[static_cast<size_t>(i)].tokens,
                                       model.segmenter);
            auto pred = head_forward(tape, model.head, enc);
            nlohmann::ordered_json rec;
            rec["id"] = (*docs)[static_cast<size_t>(i)].id;
            auto& labels_json = rec["attention"] = nlohmann::ordered_json::object();
            if (pred.attention >= 0) {
                const auto& p = tape.val(pred.p);
                const auto& attn = tape.val(pred.attention);
                // Top-5 scored labels, each with its top-k token positions.
                std::vector<int> order(static_cast<size_t>(p.rows));
                for (size_t l = 0; l < order.size(); ++l) order[l] = static_cast<int>(l);
                std::sort(order.begin(), order.end(), [&](int a, int b) {
                    if (p.v[static_cast<size_t>(a)] != p.v[static_cast<size_t>(b)])
                        return p.v[static_cast<size_t>(a)] > p.v[static_cast<size_t>(b)];
                    return a < b;
                });
                for (int li = 0; li < std::min(5, p.rows); ++li) {
                    const int label = order[static_cast<size_t>(li)];
                    std::vector<std::pair<float, int>> weights;
                    for (int t = 0; t < attn.cols; ++t)
                        weights.emplace_back(-attn.at(label, t), t);
                    std::sort(weights.begin(), weights.end());
                    nlohmann::ordered_json top = nlohmann::ordered_json::array();
                    for (int t = 0; t < std::min<int>(cfg.eval.attention_top_k,
                                                      static_cast<int>(weights.size()));
                         ++t)
                        top.push_back({enc.doc_positions[static_cast<size_t>(weights[static_cast<size_t>(t)].second)],
                                       -weights[static_cast<size_t>(t)].first});
                    labels_json[data.corpus.labels.codes[static_cast<size_t>(label)]] =
                        std::move(top);
                }
            }
            att << rec.dump() << "\n";
        }
    }
    return out;
}

}  // namespace lmtc

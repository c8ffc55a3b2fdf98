#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lmtc/corpus.hpp"
#include "lmtc/encoder.hpp"
#include "lmtc/heads.hpp"
#include "lmtc/metrics.hpp"
#include "lmtc/segmenter.hpp"
#include "lmtc/tape.hpp"

namespace lmtc {

struct ThresholdGrid {
    double start = 0.02, stop = 0.98, step = 0.02;

    std::vector<double> values() const {
        if (step <= 0.0 || start <= 0.0 || stop >= 1.0 || start > stop)
            throw ConfigError("threshold grid must satisfy 0 < start <= stop < 1, step > 0");
        std::vector<double> ts;
        for (int i = 0;; ++i) {
            const double t = start + step * i;
            if (t > stop + 1e-12) break;
            ts.push_back(t);
        }
        return ts;
    }
};

struct TrainConfig {
    int epochs = 20;
    double peak_lr = 5e-5;
    int warmup_steps = 2000;
    int batch_size = 8;
    double weight_decay = 0.01;
    uint64_t seed = 1;
    enum class Schedule { kLinearDecay, kConstant } schedule = Schedule::kLinearDecay;
    ThresholdGrid grid;
    SegmenterOptions segmenter;  // max_doc_len and segment length c
    int threads = 0;             // 0: use hardware concurrency

    void validate(long long total_steps) const {
        if (epochs < 1 || batch_size < 1) throw ConfigError("epochs and batch size must be >= 1");
        if (warmup_steps < 0 || warmup_steps > total_steps)
            throw ConfigError("warmup steps must be <= total steps (" +
                              std::to_string(total_steps) + ")");
        if (peak_lr <= 0.0) throw ConfigError("peak learning rate must be positive");
    }
};

/// Linear warmup 0 -> peak over warmup_steps, then linear decay to 0 at
/// total_steps (or constant peak after warmup).
inline double lr_at(long long step, const TrainConfig& cfg, long long total_steps) {
    if (step < 0 || step > total_steps) throw ContractError("lr_at: step out of range");
    if (step <= cfg.warmup_steps && cfg.warmup_steps > 0)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (cfg.schedule == TrainConfig::Schedule::kConstant) return cfg.peak_lr;
    if (total_steps == cfg.warmup_steps) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - cfg.warmup_steps);
}

// ---- AdamW -----------------------------------------------------------------

template <typename T>
struct OptimizerState {
    struct Slot {
        Matrix<T> m, v;
    };
    std::vector<Slot> slots;
    long long step = 0;

    static OptimizerState init(const std::vector<Parameter<T>*>& params) {
        OptimizerState s;
        for (const auto* p : params)
            s.slots.push_back({Matrix<T>(p->value.rows, p->value.cols),
                               Matrix<T>(p->value.rows, p->value.cols)});
        return s;
    }
};

/// Decoupled weight decay: theta -= lr*lambda*theta separately from the
/// adaptive step, skipped for no_decay parameters (biases, layer-norm gains).
template <typename T>
void adamw_step(const std::vector<Parameter<T>*>& params, OptimizerState<T>& opt, double lr,
                double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8) {
    if (params.size() != opt.slots.size())
        throw ContractError("optimizer state does not match parameter list");
    for (const auto* p : params)
        for (T g : p->grad.v)
            if (!std::isfinite(static_cast<double>(g)))
                throw NumericError("non-finite gradient in parameter " + p->name);
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Parameter<T>& p = *params[i];
        auto& slot = opt.slots[i];
        const double decay = p.no_decay ? 0.0 : weight_decay;
        for (size_t k = 0; k < p.value.v.size(); ++k) {
            const double g = static_cast<double>(p.grad.v[k]);
            const double m = beta1 * static_cast<double>(slot.m.v[k]) + (1.0 - beta1) * g;
            const double v = beta2 * static_cast<double>(slot.v.v[k]) + (1.0 - beta2) * g * g;
            slot.m.v[k] = static_cast<T>(m);
            slot.v.v[k] = static_cast<T>(v);
            const double theta = static_cast<double>(p.value.v[k]);
            const double adaptive = (m / bc1) / (std::sqrt(v / bc2) + eps);
            p.value.v[k] = static_cast<T>(theta - lr * adaptive - lr * decay * theta);
        }
    }
}

// ---- model bundle ----------------------------------------------------------

template <typename T>
struct Model {
    EncoderState<T> encoder;
    Head<T> head;
    SegmenterOptions segmenter;

    std::vector<Parameter<T>*> parameters() {
        auto ps = encoder.parameters();
        for (auto* p : head.parameters()) ps.push_back(p);
        return ps;
    }
};

struct TokenizedDoc {
    std::string id;
    std::vector<int> tokens;
    std::vector<int> labels;
};

inline std::vector<TokenizedDoc> tokenize_docs(const std::vector<Document>& docs,
                                               const Tokenizer& tok) {
    std::vector<TokenizedDoc> out;
    out.reserve(docs.size());
    for (const auto& d : docs)
        out.push_back({d.id, tok.encode(join_words(d.words)), d.labels});
    return out;
}

inline int resolve_threads(int configured) {
    if (configured > 0) return configured;
    if (const char* env = std::getenv("LMTC_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(i) for i in [0, n) on `threads` workers. Work is chunked so the
/// caller can rely on every index completing before this returns; callers
/// needing determinism must make fn(i) independent of scheduling.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (;;) {
                    const int i = next.fetch_add(1);
                    if (i >= n) break;
                    fn(i);
                }
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

template <typename T>
Prediction<T> predict_doc(Tape<T>& tape, Model<T>& model, const std::vector<int>& tokens,
                          bool train = false, Rng* rng = nullptr) {
    auto enc = encode_document(tape, model.encoder, tokens, model.segmenter, train, rng);
    return head_forward(tape, model.head, enc);
}

/// Forward every document (no dropout) and return per-document label scores.
/// Embarrassingly parallel; results are keyed by index so ordering is fixed.
template <typename T>
std::vector<ScoreRow> score_docs(Model<T>& model, const std::vector<TokenizedDoc>& docs,
                                 int threads) {
    std::vector<ScoreRow> scores(docs.size());
    parallel_for(static_cast<int>(docs.size()), threads, [&](int i) {
        Tape<T> tape;
        auto pred = predict_doc(tape, model, docs[static_cast<size_t>(i)].tokens);
        const auto& p = tape.val(pred.p);
        ScoreRow row(p.v.size());
        for (size_t l = 0; l < p.v.size(); ++l) row[l] = static_cast<double>(p.v[l]);
        scores[static_cast<size_t>(i)] = std::move(row);
    });
    return scores;
}

inline std::vector<BitRow> gold_matrix(const std::vector<TokenizedDoc>& docs, int num_labels) {
    std::vector<BitRow> gold(docs.size(), BitRow(static_cast<size_t>(num_labels), 0));
    for (size_t i = 0; i < docs.size(); ++i)
        for (int l : docs[i].labels) gold[i][static_cast<size_t>(l)] = 1;
    return gold;
}

/// Grid value maximizing dev micro-F1; ties resolve to the smallest t.
inline double tune_threshold(const std::vector<BitRow>& gold,
                             const std::vector<ScoreRow>& scores, const ThresholdGrid& grid) {
    if (gold.empty()) throw ContractError("tune_threshold: empty dev set");
    double best_t = 0.0, best_f1 = -1.0;
    for (double t : grid.values()) {
        std::vector<BitRow> dec(gold.size());
        for (size_t i = 0; i < gold.size(); ++i) {
            dec[i].resize(gold[i].size());
            for (size_t l = 0; l < gold[i].size(); ++l) dec[i][l] = scores[i][l] >= t ? 1 : 0;
        }
        const double f1 = micro_f1(gold, dec);
        if (f1 > best_f1 + 1e-15) {
            best_f1 = f1;
            best_t = t;
        }
    }
    return best_t;
}

// ---- fine-tuning loop --------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double threshold = 0.5;
    MetricsReport dev;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = -1;
    double best_threshold = 0.5;
    MetricsReport best_dev;
    double last_loss = 0.0;
    long long steps = 0;
};

/// BCE fine-tuning with AdamW and warmup. Deterministic for a fixed config
/// and seed: shuffling, dropout streams, and gradient accumulation order are
/// all fixed; worker parallelism only spreads independent documents.
template <typename T>
TrainResult train_model(Model<T>& model, const std::vector<TokenizedDoc>& train_docs,
                        const std::vector<TokenizedDoc>& dev_docs, int num_labels,
                        const TrainConfig& cfg, std::ostream* log = nullptr) {
    if (train_docs.empty()) throw ConfigError("train: empty training set");
    const long long steps_per_epoch =
        (static_cast<long long>(train_docs.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const long long total_steps = steps_per_epoch * cfg.epochs;
    cfg.validate(total_steps);
    const int threads = resolve_threads(cfg.threads);

    auto params = model.parameters();
    auto opt = OptimizerState<T>::init(params);
    Rng shuffle_rng = Rng::derive(cfg.seed, {0x73687566});

    const auto dev_gold = gold_matrix(dev_docs, num_labels);

    // Per-parameter snapshot of the best epoch, restored at the end.
    std::vector<Matrix<T>> best_values;
    TrainResult result;
    double best_micro = -1.0;

    std::vector<int> order(train_docs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    long long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t stop = std::min(order.size(), start + cfg.batch_size);
            const int bsz = static_cast<int>(stop - start);
            ++step;

            for (auto* p : params) p->zero_grad();
            double batch_loss = 0.0;
            // Documents are processed in chunks of `threads` so at most that
            // many tapes are alive; gradients merge in document-index order.
            for (int chunk = 0; chunk < bsz; chunk += threads) {
                const int chunk_n = std::min(threads, bsz - chunk);
                std::vector<std::unique_ptr<Tape<T>>> tapes(static_cast<size_t>(chunk_n));
                std::vector<double> losses(static_cast<size_t>(chunk_n), 0.0);
                parallel_for(chunk_n, threads, [&](int j) {
                    const auto& doc =
                        train_docs[static_cast<size_t>(order[start + chunk + j])];
                    auto tape = std::make_unique<Tape<T>>();
                    Rng drop_rng = Rng::derive(cfg.seed, {0xd40b, static_cast<uint64_t>(step),
                                                          static_cast<uint64_t>(chunk + j)});
                    auto pred = predict_doc(*tape, model, doc.tokens, true, &drop_rng);
                    Matrix<T> y(num_labels, 1);
                    for (int l : doc.labels) y.v[static_cast<size_t>(l)] = T(1);
                    auto loss = tape->bce(pred.p, y);
                    losses[static_cast<size_t>(j)] = static_cast<double>(tape->val(loss).v[0]);
                    tape->backward(loss);
                    tapes[static_cast<size_t>(j)] = std::move(tape);
                });
                for (int j = 0; j < chunk_n; ++j) {
                    tapes[static_cast<size_t>(j)]->harvest_param_grads(T(1) / static_cast<T>(bsz));
                    batch_loss += losses[static_cast<size_t>(j)];
                }
            }
            batch_loss /= bsz;
            if (!std::isfinite(batch_loss))
                throw NumericError("non-finite loss at step " + std::to_string(step));
            const double lr = lr_at(step, cfg, total_steps);
            adamw_step(params, opt, lr, cfg.weight_decay);
            result.last_loss = batch_loss;
            if (log) {
                nlohmann::ordered_json j;
                j["step"] = step;
                j["lr"] = lr;
                j["loss"] = batch_loss;
                (*log) << j.dump() << "\n";
            }
        }

        if (!dev_docs.empty()) {
            const auto dev_scores = score_docs(model, dev_docs, threads);
            EpochRecord rec;
            rec.epoch = epoch;
            rec.threshold = tune_threshold(dev_gold, dev_scores, cfg.grid);
            std::vector<long long> freq(static_cast<size_t>(num_labels), 0);
            for (const auto& d : train_docs)
                for (int l : d.labels) ++freq[static_cast<size_t>(l)];
            rec.dev = compute_report(dev_gold, dev_scores, rec.threshold, freq);
            if (log) {
                nlohmann::ordered_json j;
                j["epoch"] = epoch;
                j["dev"] = report_to_json(rec.dev);
                (*log) << j.dump() << "\n";
            }
            if (rec.dev.micro_f1 > best_micro) {
                best_micro = rec.dev.micro_f1;
                result.best_epoch = epoch;
                result.best_threshold = rec.threshold;
                result.best_dev = rec.dev;
                best_values.clear();
                for (auto* p : params) best_values.push_back(p->value);
            }
            result.history.push_back(std::move(rec));
        }
    }
    result.steps = step;
    if (!best_values.empty())
        for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
    return result;
}

// ---- MLM pretraining step ----------------------------------------------------

/// One optimizer step over a batch of segments. Returns the loss, or nothing
/// when no position was maskable (step skipped with a warning).
template <typename T>
std::optional<double> mlm_pretrain_step(EncoderState<T>& state,
                                        std::vector<Parameter<T>*>& params,
                                        OptimizerState<T>& opt,
                                        const std::vector<MlmExample>& batch, double lr,
                                        double weight_decay, bool train_dropout, Rng* rng) {
    Tape<T> tape;
    auto loss = mlm_batch_loss(tape, state, batch, train_dropout, rng);
    if (!loss) {
        std::cerr << "warning: MLM batch has no maskable positions; step skipped\n";
        return std::nullopt;
    }
    const double value = static_cast<double>(tape.val(*loss).v[0]);
    if (!std::isfinite(value)) throw NumericError("non-finite MLM loss");
    for (auto* p : params) p->zero_grad();
    tape.backward(*loss);
    tape.harvest_param_grads();
    adamw_step(params, opt, lr, weight_decay);
    return value;
}

}  // namespace lmtc

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmtc/errors.hpp"

namespace lmtc {

using BitRow = std::vector<uint8_t>;
using ScoreRow = std::vector<double>;

namespace metrics_detail {

inline void check_batch(size_t docs, size_t labels, const std::vector<BitRow>& gold,
                        const std::vector<BitRow>& other) {
    if (gold.size() != other.size())
        throw ShapeError("metrics: " + std::to_string(gold.size()) + " gold rows vs " +
                         std::to_string(other.size()) + " prediction rows");
    for (size_t i = 0; i < docs; ++i)
        if (gold[i].size() != labels || other[i].size() != labels)
            throw ShapeError("metrics: ragged label vectors at document " + std::to_string(i));
}

inline double f1_from_counts(long long tp, long long fp, long long fn) {
    const long long denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

/// Mann-Whitney AUC with midrank tie handling over (score, is_positive)
/// pairs. Caller guarantees both classes are present.
inline double rank_auc(std::vector<std::pair<double, uint8_t>>& cells) {
    std::sort(cells.begin(), cells.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    const size_t n = cells.size();
    double rank_sum_pos = 0.0;
    long long pos = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && cells[j + 1].first == cells[i].first) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k)
            if (cells[k].second) {
                rank_sum_pos += midrank;
                ++pos;
            }
        i = j + 1;
    }
    const long long neg = static_cast<long long>(n) - pos;
    const double u = rank_sum_pos - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace metrics_detail

/// TP/FP/FN pooled over all (document, label) cells.
inline double micro_f1(const std::vector<BitRow>& gold, const std::vector<BitRow>& decisions) {
    if (gold.empty()) throw ContractError("micro_f1: empty batch");
    metrics_detail::check_batch(gold.size(), gold[0].size(), gold, decisions);
    long long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < gold.size(); ++i)
        for (size_t l = 0; l < gold[i].size(); ++l) {
            if (decisions[i][l] && gold[i][l]) ++tp;
            else if (decisions[i][l]) ++fp;
            else if (gold[i][l]) ++fn;
        }
    return metrics_detail::f1_from_counts(tp, fp, fn);
}

/// Unweighted mean of per-label F1 over all labels; labels with an empty
/// denominator (zero support and never predicted) score 0.
inline double macro_f1(const std::vector<BitRow>& gold, const std::vector<BitRow>& decisions) {
    if (gold.empty()) throw ContractError("macro_f1: empty batch");
    const size_t labels = gold[0].size();
    metrics_detail::check_batch(gold.size(), labels, gold, decisions);
    double sum = 0.0;
    for (size_t l = 0; l < labels; ++l) {
        long long tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < gold.size(); ++i) {
            if (decisions[i][l] && gold[i][l]) ++tp;
            else if (decisions[i][l]) ++fp;
            else if (gold[i][l]) ++fn;
        }
        sum += metrics_detail::f1_from_counts(tp, fp, fn);
    }
    return sum / static_cast<double>(labels);
}

/// ROC-AUC over all cells pooled. Undefined (error) when one class is absent.
inline double micro_auc(const std::vector<BitRow>& gold,
                        const std::vector<ScoreRow>& scores) {
    if (gold.empty()) throw ContractError("micro_auc: empty batch");
    std::vector<std::pair<double, uint8_t>> cells;
    long long pos = 0;
    for (size_t i = 0; i < gold.size(); ++i) {
        if (gold[i].size() != scores[i].size())
            throw ShapeError("micro_auc: ragged rows at document " + std::to_string(i));
        for (size_t l = 0; l < gold[i].size(); ++l) {
            cells.emplace_back(scores[i][l], gold[i][l]);
            pos += gold[i][l] ? 1 : 0;
        }
    }
    if (pos == 0 || pos == static_cast<long long>(cells.size()))
        throw NumericError("micro_auc undefined: a single class is present");
    return metrics_detail::rank_auc(cells);
}

struct MacroAucResult {
    double value = 0.0;
    int skipped_labels = 0;  // labels lacking one of the two classes
};

/// Mean per-label AUC over labels with both classes present; single-class
/// labels are skipped and counted, not scored.
inline MacroAucResult macro_auc(const std::vector<BitRow>& gold,
                                const std::vector<ScoreRow>& scores) {
    if (gold.empty()) throw ContractError("macro_auc: empty batch");
    const size_t labels = gold[0].size();
    MacroAucResult result;
    double sum = 0.0;
    int counted = 0;
    for (size_t l = 0; l < labels; ++l) {
        std::vector<std::pair<double, uint8_t>> cells;
        long long pos = 0;
        for (size_t i = 0; i < gold.size(); ++i) {
            cells.emplace_back(scores[i][l], gold[i][l]);
            pos += gold[i][l] ? 1 : 0;
        }
        if (pos == 0 || pos == static_cast<long long>(cells.size())) {
            ++result.skipped_labels;
            continue;
        }
        sum += metrics_detail::rank_auc(cells);
        ++counted;
    }
    result.value = counted == 0 ? 0.0 : sum / static_cast<double>(counted);
    return result;
}

/// Per document: fraction of the k top-scored labels (ties: lower label id
/// first) that are gold; documents with empty gold contribute 0; mean over
/// documents. When |Y| < k all labels are taken but the denominator stays k.
inline double precision_at_k(const std::vector<BitRow>& gold,
                             const std::vector<ScoreRow>& scores, int k) {
    if (k < 1) throw ConfigError("precision_at_k: k must be >= 1");
    if (gold.empty()) throw ContractError("precision_at_k: empty batch");
    double total = 0.0;
    for (size_t i = 0; i < gold.size(); ++i) {
        const size_t labels = gold[i].size();
        if (scores[i].size() != labels)
            throw ShapeError("precision_at_k: ragged rows at document " + std::to_string(i));
        std::vector<int> order(labels);
        std::iota(order.begin(), order.end(), 0);
        const size_t take = std::min<size_t>(static_cast<size_t>(k), labels);
        std::partial_sort(order.begin(), order.begin() + static_cast<long>(take), order.end(),
                          [&](int a, int b) {
                              if (scores[i][static_cast<size_t>(a)] !=
                                  scores[i][static_cast<size_t>(b)])
                                  return scores[i][static_cast<size_t>(a)] >
                                         scores[i][static_cast<size_t>(b)];
                              return a < b;
                          });
        int hits = 0;
        for (size_t j = 0; j < take; ++j)
            if (gold[i][static_cast<size_t>(order[j])]) ++hits;
        total += static_cast<double>(hits) / static_cast<double>(k);
    }
    return total / static_cast<double>(gold.size());
}

struct StratifiedF1 {
    double head = 0.0;
    double tail = 0.0;
    int head_labels = 0;
};

/// Micro-F1 split into head and tail label cells; head = labels in the top
/// `head_fraction` of training frequency (ties: lower id first).
inline StratifiedF1 stratified_micro_f1(const std::vector<BitRow>& gold,
                                        const std::vector<BitRow>& decisions,
                                        const std::vector<long long>& train_frequency,
                                        double head_fraction = 0.10) {
    if (gold.empty()) throw ContractError("stratified_micro_f1: empty batch");
    const size_t labels = gold[0].size();
    metrics_detail::check_batch(gold.size(), labels, gold, decisions);
    if (train_frequency.size() != labels)
        throw ShapeError("stratified_micro_f1: frequency table size mismatch");
    std::vector<int> order(labels);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (train_frequency[static_cast<size_t>(a)] != train_frequency[static_cast<size_t>(b)])
            return train_frequency[static_cast<size_t>(a)] > train_frequency[static_cast<size_t>(b)];
        return a < b;
    });
    StratifiedF1 out;
    out.head_labels = std::max(1, static_cast<int>(std::ceil(
                                      head_fraction * static_cast<double>(labels))));
    std::vector<uint8_t> is_head(labels, 0);
    for (int i = 0; i < out.head_labels; ++i) is_head[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
    long long tp_h = 0, fp_h = 0, fn_h = 0, tp_t = 0, fp_t = 0, fn_t = 0;
    for (size_t i = 0; i < gold.size(); ++i)
        for (size_t l = 0; l < labels; ++l) {
            auto& tp = is_head[l] ? tp_h : tp_t;
            auto& fp = is_head[l] ? fp_h : fp_t;
            auto& fn = is_head[l] ? fn_h : fn_t;
            if (decisions[i][l] && gold[i][l]) ++tp;
            else if (decisions[i][l]) ++fp;
            else if (gold[i][l]) ++fn;
        }
    out.head = metrics_detail::f1_from_counts(tp_h, fp_h, fn_h);
    out.tail = metrics_detail::f1_from_counts(tp_t, fp_t, fn_t);
    return out;
}

struct PerLabelPRF {
    long long tp = 0, fp = 0, fn = 0;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct MetricsReport {
    double micro_f1 = 0.0, macro_f1 = 0.0;
    double micro_auc = 0.0, macro_auc = 0.0;
    int macro_auc_skipped = 0;
    double p_at_5 = 0.0, p_at_8 = 0.0, p_at_15 = 0.0;
    double threshold = 0.5;
    StratifiedF1 stratified;
    std::vector<PerLabelPRF> per_label;
};

inline MetricsReport compute_report(const std::vector<BitRow>& gold,
                                    const std::vector<ScoreRow>& scores, double threshold,
                                    const std::vector<long long>& train_frequency) {
    if (gold.empty()) throw ContractError("compute_report: empty batch");
    const size_t labels = gold[0].size();
    std::vector<BitRow> decisions(gold.size());
    for (size_t i = 0; i < gold.size(); ++i) {
        decisions[i].resize(labels);
        for (size_t l = 0; l < labels; ++l)
            decisions[i][l] = scores[i][l] >= threshold ? 1 : 0;
    }
    MetricsReport r;
    r.threshold = threshold;
    r.micro_f1 = micro_f1(gold, decisions);
    r.macro_f1 = macro_f1(gold, decisions);
    try {
        r.micro_auc = micro_auc(gold, scores);
    } catch (const NumericError&) {
        r.micro_auc = 0.0;  // degenerate eval set; reported as 0
    }
    const auto ma = macro_auc(gold, scores);
    r.macro_auc = ma.value;
    r.macro_auc_skipped = ma.skipped_labels;
    r.p_at_5 = precision_at_k(gold, scores, 5);
    r.p_at_8 = precision_at_k(gold, scores, 8);
    r.p_at_15 = precision_at_k(gold, scores, 15);
    r.stratified = stratified_micro_f1(gold, decisions, train_frequency);
    r.per_label.resize(labels);
    for (size_t l = 0; l < labels; ++l) {
        auto& pl = r.per_label[l];
        for (size_t i = 0; i < gold.size(); ++i) {
            if (decisions[i][l] && gold[i][l]) ++pl.tp;
            else if (decisions[i][l]) ++pl.fp;
            else if (gold[i][l]) ++pl.fn;
        }
        pl.precision = (pl.tp + pl.fp) == 0 ? 0.0
                                            : static_cast<double>(pl.tp) /
                                                  static_cast<double>(pl.tp + pl.fp);
        pl.recall = (pl.tp + pl.fn) == 0
                        ? 0.0
                        : static_cast<double>(pl.tp) / static_cast<double>(pl.tp + pl.fn);
        pl.f1 = metrics_detail::f1_from_counts(pl.tp, pl.fp, pl.fn);
    }
    return r;
}

inline nlohmann::ordered_json report_to_json(const MetricsReport& r,
                                             const std::vector<std::string>& codes = {}) {
    nlohmann::ordered_json j;
    j["micro_f1"] = r.micro_f1;
    j["macro_f1"] = r.macro_f1;
    j["micro_auc"] = r.micro_auc;
    j["macro_auc"] = r.macro_auc;
    j["macro_auc_skipped_labels"] = r.macro_auc_skipped;
    j["p_at_5"] = r.p_at_5;
    j["p_at_8"] = r.p_at_8;
    j["p_at_15"] = r.p_at_15;
    j["threshold"] = r.threshold;
    j["head_micro_f1"] = r.stratified.head;
    j["tail_micro_f1"] = r.stratified.tail;
    j["head_label_count"] = r.stratified.head_labels;
    auto& table = j["per_label"] = nlohmann::ordered_json::array();
    for (size_t l = 0; l < r.per_label.size(); ++l) {
        const auto& pl = r.per_label[l];
        nlohmann::ordered_json row;
        row["label"] = l < codes.size() ? codes[l] : std::to_string(l);
        row["tp"] = pl.tp;
        row["fp"] = pl.fp;
        row["fn"] = pl.fn;
        row["precision"] = pl.precision;
        row["recall"] = pl.recall;
        row["f1"] = pl.f1;
        table.push_back(std::move(row));
    }
    return j;
}

/// Aligned plain-text rendering of the headline numbers.
inline std::string report_table(const MetricsReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    auto row = [&](const char* name, double v) {
        os << std::left << std::setw(18) << name << std::right << std::setw(8) << v << "\n";
    };
    row("micro_f1", r.micro_f1);
    row("macro_f1", r.macro_f1);
    row("micro_auc", r.micro_auc);
    row("macro_auc", r.macro_auc);
    row("p@5", r.p_at_5);
    row("p@8", r.p_at_8);
    row("p@15", r.p_at_15);
    row("head_micro_f1", r.stratified.head);
    row("tail_micro_f1", r.stratified.tail);
    row("threshold", r.threshold);
    return os.str();
}

}  // namespace lmtc

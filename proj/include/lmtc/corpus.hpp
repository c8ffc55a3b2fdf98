#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "lmtc/errors.hpp"
#include "lmtc/rng.hpp"
#include "lmtc/tokenizer.hpp"

namespace lmtc {

using Json = nlohmann::ordered_json;

struct Document {
    std::string id;
    std::vector<std::string> words;
    std::vector<int> labels;  // label ids, sorted ascending
};

struct LabelSpace {
    std::vector<std::string> codes;
    std::unordered_map<std::string, int> index;
    std::vector<long long> train_frequency;

    int add(const std::string& code) {
        auto it = index.find(code);
        if (it != index.end()) return it->second;
        const int id = static_cast<int>(codes.size());
        codes.push_back(code);
        index.emplace(code, id);
        train_frequency.push_back(0);
        return id;
    }
    int id_of(const std::string& code) const {
        auto it = index.find(code);
        return it == index.end() ? -1 : it->second;
    }
    int size() const { return static_cast<int>(codes.size()); }

    void save(const std::string& path) const {
        Json j;
        j["codes"] = codes;
        j["train_frequency"] = train_frequency;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path);
        out << j.dump(2) << "\n";
    }
    static LabelSpace load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read " + path);
        Json j = Json::parse(in, nullptr, false);
        if (j.is_discarded()) throw IoError("malformed JSON in " + path);
        LabelSpace ls;
        for (const auto& c : j.at("codes")) ls.add(c.get<std::string>());
        ls.train_frequency = j.at("train_frequency").get<std::vector<long long>>();
        if (ls.train_frequency.size() != ls.codes.size())
            throw IoError(path + ": train_frequency length mismatch");
        return ls;
    }
};

struct Corpus {
    LabelSpace labels;
    std::vector<Document> train, dev, test;
};

struct SyntheticSpec {
    int num_labels = 200;
    double zipf_exponent = 1.2;
    int train_docs = 5000, dev_docs = 500, test_docs = 500;
    int doc_len_mean = 1024, doc_len_min = 256, doc_len_max = 2048;
    double mean_labels_per_doc = 5.0;
    int keywords_per_label = 3;
    double noise_rate = 0.85;
    uint64_t seed = 1;

    void validate() const {
        if (num_labels < 1) throw ConfigError("num_labels must be positive");
        if (zipf_exponent <= 0.0) throw ConfigError("zipf_exponent must be > 0");
        if (train_docs < 1 || dev_docs < 0 || test_docs < 0)
            throw ConfigError("corpus split sizes must be positive");
        if (doc_len_min < 1 || doc_len_min > doc_len_mean || doc_len_mean > doc_len_max)
            throw ConfigError("doc length bounds must satisfy min <= mean <= max");
        if (mean_labels_per_doc < 1.0 || mean_labels_per_doc > num_labels)
            throw ConfigError("mean labels per doc must be in [1, num_labels]");
        if (keywords_per_label < 1) throw ConfigError("keywords_per_label must be >= 1");
        if (noise_rate < 0.0 || noise_rate > 1.0) throw ConfigError("noise_rate must be in [0,1]");
    }
};

namespace detail {

inline std::string label_code(int id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "L%04d", id);
    return buf;
}
inline std::string keyword_word(int label_id, int k) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "l%04dk%d", label_id, k);
    return buf;
}
inline std::string noise_word(int i) { return "n" + std::to_string(i); }

/// Symmetric triangular length draw centered on the mean, scaled to the
/// min/max bounds; exact IEEE arithmetic so runs match across platforms.
inline int draw_doc_len(const SyntheticSpec& s, Rng& rng) {
    const double offset = rng.next_double() + rng.next_double() - 1.0;  // [-1, 1)
    double len = offset < 0.0 ? s.doc_len_mean + offset * (s.doc_len_mean - s.doc_len_min)
                              : s.doc_len_mean + offset * (s.doc_len_max - s.doc_len_mean);
    int n = static_cast<int>(std::llround(len));
    return std::min(s.doc_len_max, std::max(s.doc_len_min, n));
}

}  // namespace detail

/// Deterministic synthetic corpus. Label marginals follow rank^(-s); every
/// document carries, for each of its labels, that label's k keywords at
/// positions drawn uniformly over the whole document, so evidence density
/// is position-uniform (truncation removes evidence proportionally). Each
/// remaining position holds a keyword of one of the document's labels with
/// probability (1 - noise_rate), otherwise a noise word.
inline Corpus generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Corpus corpus;
    for (int i = 0; i < spec.num_labels; ++i) corpus.labels.add(detail::label_code(i));

    // Zipf CDF over label ranks (rank == id here; id 0 is the head label).
    std::vector<double> cdf(static_cast<size_t>(spec.num_labels));
    double total = 0.0;
    for (int r = 0; r < spec.num_labels; ++r) {
        total += std::pow(static_cast<double>(r + 1), -spec.zipf_exponent);
        cdf[static_cast<size_t>(r)] = total;
    }
    for (auto& c : cdf) c /= total;

    const int noise_vocab = std::max(500, 5 * spec.num_labels);
    Rng rng(spec.seed);

    auto draw_label = [&]() {
        const double u = rng.next_double();
        return static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    };

    auto gen_split = [&](const char* split, int count, std::vector<Document>& out) {
        for (int d = 0; d < count; ++d) {
            Document doc;
            {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%s-%06d", split, d);
                doc.id = buf;
            }
            const int len = detail::draw_doc_len(spec, rng);
            int want = std::max(1, rng.next_poisson(spec.mean_labels_per_doc));
            want = std::min({want, spec.num_labels, len});
            std::set<int> labels;
            int attempts = 0;
            while (static_cast<int>(labels.size()) < want && attempts < 200 * want + 200) {
                labels.insert(draw_label());
                ++attempts;
            }
            for (int l = 0; static_cast<int>(labels.size()) < want; ++l) labels.insert(l);
            doc.labels.assign(labels.begin(), labels.end());

            doc.words.resize(static_cast<size_t>(len));
            for (int p = 0; p < len; ++p) {
                if (rng.next_bernoulli(spec.noise_rate)) {
                    doc.words[static_cast<size_t>(p)] =
                        detail::noise_word(static_cast<int>(rng.next_below(noise_vocab)));
                } else {
                    const int li = doc.labels[static_cast<size_t>(
                        rng.next_below(doc.labels.size()))];
                    doc.words[static_cast<size_t>(p)] = detail::keyword_word(
                        li, static_cast<int>(rng.next_below(spec.keywords_per_label)));
                }
            }
            // Guaranteed evidence: each label's keyword set is placed at
            // distinct uniform positions (overwriting noise, never each
            // other). Keyword-major order places one keyword per label
            // before any second keyword, so even very short documents hold
            // at least one keyword of every carried label.
            std::unordered_set<int> taken;
            for (int k = 0; k < spec.keywords_per_label; ++k) {
                for (int li : doc.labels) {
                    if (static_cast<int>(taken.size()) >= len) break;
                    int pos;
                    do {
                        pos = static_cast<int>(rng.next_below(static_cast<uint64_t>(len)));
                    } while (taken.count(pos));
                    taken.insert(pos);
                    doc.words[static_cast<size_t>(pos)] = detail::keyword_word(li, k);
                }
            }
            out.push_back(std::move(doc));
        }
    };

    gen_split("train", spec.train_docs, corpus.train);
    gen_split("dev", spec.dev_docs, corpus.dev);
    gen_split("test", spec.test_docs, corpus.test);

    for (const auto& doc : corpus.train)
        for (int l : doc.labels) ++corpus.labels.train_frequency[static_cast<size_t>(l)];
    return corpus;
}

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

inline void save_jsonl(const std::vector<Document>& docs, const LabelSpace& labels,
                       const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& doc : docs) {
        Json j;
        j["id"] = doc.id;
        j["text"] = join_words(doc.words);
        std::vector<std::string> codes;
        for (int l : doc.labels) codes.push_back(labels.codes[static_cast<size_t>(l)]);
        j["labels"] = codes;
        out << j.dump() << "\n";
    }
}

enum class LoadMode { kTrain, kStrict, kPermissive };

struct LoadResult {
    std::vector<Document> docs;
    int dropped_unknown_labels = 0;
};

/// One JSON object per line: {"id": str, "text": str, "labels": [str]}.
/// Training loads may extend the label space; dev/test loads fail on unknown
/// labels unless permissive (then the labels are dropped and counted).
inline LoadResult load_jsonl(const std::string& path, LabelSpace& labels, LoadMode mode) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    LoadResult result;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw IoError(path + ": malformed JSON on line " + std::to_string(lineno));
        for (const char* field : {"id", "text", "labels"})
            if (!j.contains(field))
                throw IoError(path + ": line " + std::to_string(lineno) + " missing field \"" +
                              field + "\"");
        Document doc;
        doc.id = j["id"].get<std::string>();
        if (!seen_ids.insert(doc.id).second)
            throw IoError(path + ": duplicate document id \"" + doc.id + "\" on line " +
                          std::to_string(lineno));
        doc.words = split_words(j["text"].get<std::string>());
        if (doc.words.empty())
            throw IoError(path + ": line " + std::to_string(lineno) + " has empty text");
        for (const auto& code_json : j["labels"]) {
            const std::string code = code_json.get<std::string>();
            int id = labels.id_of(code);
            if (id < 0) {
                if (mode == LoadMode::kTrain) {
                    id = labels.add(code);
                } else if (mode == LoadMode::kPermissive) {
                    ++result.dropped_unknown_labels;
                    continue;
                } else {
                    throw IoError(path + ": line " + std::to_string(lineno) +
                                  " has unknown label \"" + code + "\"");
                }
            }
            doc.labels.push_back(id);
        }
        std::sort(doc.labels.begin(), doc.labels.end());
        doc.labels.erase(std::unique(doc.labels.begin(), doc.labels.end()), doc.labels.end());
        result.docs.push_back(std::move(doc));
    }
    return result;
}

/// Restrict to the K most frequent training labels (ties: lower id first).
/// Train documents left with no labels are dropped; dev/test documents are
/// kept with empty gold sets so they still count in metric denominators.
inline Corpus filter_top_labels(const Corpus& corpus, int k) {
    if (k < 1) throw ConfigError("filter_top_labels: K must be >= 1");
    if (k > corpus.labels.size()) {
        std::cerr << "warning: K=" << k << " exceeds label count " << corpus.labels.size()
                  << ", clamping\n";
        k = corpus.labels.size();
    }
    std::vector<int> order(static_cast<size_t>(corpus.labels.size()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto fa = corpus.labels.train_frequency[static_cast<size_t>(a)];
        const auto fb = corpus.labels.train_frequency[static_cast<size_t>(b)];
        if (fa != fb) return fa > fb;
        return a < b;
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());  // keep original code order

    Corpus out;
    std::vector<int> remap(static_cast<size_t>(corpus.labels.size()), -1);
    for (int old_id : order) {
        const int new_id = out.labels.add(corpus.labels.codes[static_cast<size_t>(old_id)]);
        out.labels.train_frequency[static_cast<size_t>(new_id)] =
            corpus.labels.train_frequency[static_cast<size_t>(old_id)];
        remap[static_cast<size_t>(old_id)] = new_id;
    }
    auto remap_docs = [&](const std::vector<Document>& docs, bool drop_empty) {
        std::vector<Document> kept;
        for (const auto& doc : docs) {
            Document d = doc;
            d.labels.clear();
            for (int l : doc.labels)
                if (remap[static_cast<size_t>(l)] >= 0)
                    d.labels.push_back(remap[static_cast<size_t>(l)]);
            if (drop_empty && d.labels.empty()) continue;
            kept.push_back(std::move(d));
        }
        return kept;
    };
    out.train = remap_docs(corpus.train, true);
    out.dev = remap_docs(corpus.dev, false);
    out.test = remap_docs(corpus.test, false);
    return out;
}

/// Exact dataset statistics (no sampling).
inline Json dataset_stats(const std::vector<Document>& docs, const LabelSpace& labels) {
    if (docs.empty()) throw ConfigError("stats: empty dataset");
    std::vector<long long> lens;
    long long total_words = 0, total_labels = 0;
    std::vector<long long> label_counts(static_cast<size_t>(labels.size()), 0);
    for (const auto& d : docs) {
        lens.push_back(static_cast<long long>(d.words.size()));
        total_words += static_cast<long long>(d.words.size());
        total_labels += static_cast<long long>(d.labels.size());
        for (int l : d.labels) ++label_counts[static_cast<size_t>(l)];
    }
    std::sort(lens.begin(), lens.end());
    const size_t n = lens.size();
    const double median =
        n % 2 ? static_cast<double>(lens[n / 2])
              : 0.5 * static_cast<double>(lens[n / 2 - 1] + lens[n / 2]);
    Json j;
    j["doc_count"] = n;
    j["words"] = {{"mean", static_cast<double>(total_words) / static_cast<double>(n)},
                  {"median", median},
                  {"max", lens.back()}};
    j["label_count"] = labels.size();
    j["labels_per_doc_mean"] = static_cast<double>(total_labels) / static_cast<double>(n);
    j["label_frequency"] = label_counts;
    return j;
}

}  // namespace lmtc

#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmtc/errors.hpp"

namespace lmtc {

// Special token ids are fixed: PAD=0, CLS=1, SEP=2, UNK=3, MASK=4.
enum SpecialId : int { kPad = 0, kCls = 1, kSep = 2, kUnk = 3, kMask = 4 };
inline const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s = {"[PAD]", "[CLS]", "[SEP]", "[UNK]", "[MASK]"};
    return s;
}

/// Lowercase and split on whitespace. All tokenization starts here.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                words.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

class Vocabulary {
public:
    Vocabulary() {
        for (const auto& t : special_tokens()) add(t);
    }

    int add(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        const int id = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
        token_to_id_.emplace(token, id);
        return id;
    }

    /// Id for a raw-text token. Specials are never produced from raw text.
    int id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        if (it == token_to_id_.end() || it->second < 5) return kUnk;
        return it->second;
    }

    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }
    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id));
        return tokens_[static_cast<size_t>(id)];
    }
    int size() const { return static_cast<int>(tokens_.size()); }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path);
        for (const auto& t : tokens_) out << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read " + path);
        Vocabulary v;
        v.tokens_.clear();
        v.token_to_id_.clear();
        std::string line;
        while (std::getline(in, line)) v.add(line);
        for (int i = 0; i < 5 && i < v.size(); ++i)
            if (v.tokens_[static_cast<size_t>(i)] != special_tokens()[static_cast<size_t>(i)])
                throw IoError("vocabulary file " + path + " lacks the special-token header");
        if (v.size() < 5) throw IoError("vocabulary file " + path + " truncated");
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> token_to_id_;
};

/// Most frequent whitespace words, ties broken lexicographically (the
/// lexicographically smaller word wins the last slots).
inline Vocabulary train_word_vocab(const std::vector<std::string>& corpus, int max_size) {
    if (max_size < 6)
        throw ConfigError("word vocab max_size must be >= 6 (5 specials + at least 1 word)");
    if (corpus.empty()) throw ConfigError("cannot train a vocabulary on an empty corpus");
    std::unordered_map<std::string, long long> counts;
    for (const auto& text : corpus)
        for (auto& w : split_words(text)) ++counts[w];
    std::vector<std::pair<std::string, long long>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    const int budget = max_size - 5;
    for (int i = 0; i < budget && i < static_cast<int>(ranked.size()); ++i)
        v.add(ranked[static_cast<size_t>(i)].first);
    return v;
}

/// Byte-pair model over characters within words; "</w>" marks word ends so
/// detokenization can recover word boundaries.
class BpeModel {
public:
    static constexpr const char* kEow = "</w>";

    std::vector<std::pair<std::string, std::string>> merges;
    Vocabulary vocab;

    int merge_rank(const std::string& a, const std::string& b) const {
        auto it = rank_.find(a + "\x01" + b);
        return it == rank_.end() ? -1 : it->second;
    }

    void rebuild_rank_index() {
        rank_.clear();
        for (size_t i = 0; i < merges.size(); ++i)
            rank_.emplace(merges[i].first + "\x01" + merges[i].second, static_cast<int>(i));
    }

    /// Split one (already lowercased) word into subword symbols.
    std::vector<std::string> split_word(const std::string& word) const {
        std::vector<std::string> sym;
        for (char c : word) sym.emplace_back(1, c);
        sym.emplace_back(kEow);
        // Repeatedly apply the best-ranked merge present in the word.
        for (;;) {
            int best = -1;
            size_t best_pos = 0;
            for (size_t i = 0; i + 1 < sym.size(); ++i) {
                const int r = merge_rank(sym[i], sym[i + 1]);
                if (r >= 0 && (best < 0 || r < best)) {
                    best = r;
                    best_pos = i;
                }
            }
            if (best < 0) break;
            sym[best_pos] += sym[best_pos + 1];
            sym.erase(sym.begin() + static_cast<long>(best_pos) + 1);
        }
        return sym;
    }

    void save(const std::string& vocab_path, const std::string& merges_path) const {
        vocab.save(vocab_path);
        std::ofstream out(merges_path, std::ios::binary);
        if (!out) throw IoError("cannot write " + merges_path);
        for (const auto& [a, b] : merges) out << a << "\t" << b << "\n";
    }

    static BpeModel load(const std::string& vocab_path, const std::string& merges_path) {
        BpeModel m;
        m.vocab = Vocabulary::load(vocab_path);
        std::ifstream in(merges_path, std::ios::binary);
        if (!in) throw IoError("cannot read " + merges_path);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw IoError(merges_path + ":" + std::to_string(lineno) + ": expected tab");
            m.merges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
        }
        m.rebuild_rank_index();
        return m;
    }

private:
    std::unordered_map<std::string, int> rank_;
};

/// Greedy most-frequent-pair merging; ties broken by lexicographic pair
/// order so training is deterministic.
inline BpeModel train_bpe(const std::vector<std::string>& corpus, int num_merges) {
    if (corpus.empty()) throw ConfigError("cannot train BPE on an empty corpus");
    // Word types with frequencies; each represented as a symbol sequence.
    std::map<std::string, long long> word_freq;
    for (const auto& text : corpus)
        for (auto& w : split_words(text)) ++word_freq[w];

    struct WordRep {
        std::vector<std::string> sym;
        long long freq;
    };
    std::vector<WordRep> words;
    words.reserve(word_freq.size());
    for (const auto& [w, f] : word_freq) {
        WordRep rep;
        for (char c : w) rep.sym.emplace_back(1, c);
        rep.sym.emplace_back(BpeModel::kEow);
        rep.freq = f;
        words.push_back(std::move(rep));
    }

    BpeModel model;
    for (int step = 0; step < num_merges; ++step) {
        std::map<std::pair<std::string, std::string>, long long> pair_counts;
        for (const auto& w : words)
            for (size_t i = 0; i + 1 < w.sym.size(); ++i)
                pair_counts[{w.sym[i], w.sym[i + 1]}] += w.freq;
        if (pair_counts.empty()) break;
        // std::map iteration is lexicographic, so on equal counts the first
        // (smallest) pair seen wins.
        auto best = pair_counts.begin();
        for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it)
            if (it->second > best->second) best = it;
        const auto [left, right] = best->first;
        model.merges.emplace_back(left, right);
        const std::string joined = left + right;
        for (auto& w : words) {
            for (size_t i = 0; i + 1 < w.sym.size();) {
                if (w.sym[i] == left && w.sym[i + 1] == right) {
                    w.sym[i] = joined;
                    w.sym.erase(w.sym.begin() + static_cast<long>(i) + 1);
                } else {
                    ++i;
                }
            }
        }
    }

    // Base characters first (sorted), then merge products in merge order.
    std::map<std::string, bool> base_syms;
    for (const auto& [w, f] : word_freq) {
        for (char c : w) base_syms[std::string(1, c)] = true;
    }
    base_syms[BpeModel::kEow] = true;
    for (const auto& [s, _] : base_syms) model.vocab.add(s);
    for (const auto& [a, b] : model.merges) model.vocab.add(a + b);
    model.rebuild_rank_index();
    return model;
}

/// Tokenize raw text with a word-level vocabulary.
inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id_of(w));
    return ids;
}

/// Tokenize raw text with a BPE model. A per-call cache keeps repeated words
/// cheap without mutating the (shareable, immutable) model.
inline std::vector<int> tokenize(const std::string& text, const BpeModel& model) {
    std::vector<int> ids;
    std::unordered_map<std::string, std::vector<int>> cache;
    for (const auto& w : split_words(text)) {
        auto it = cache.find(w);
        if (it == cache.end()) {
            std::vector<int> wids;
            for (const auto& s : model.split_word(w)) wids.push_back(model.vocab.id_of(s));
            it = cache.emplace(w, std::move(wids)).first;
        }
        ids.insert(ids.end(), it->second.begin(), it->second.end());
    }
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

inline std::string detokenize(const std::vector<int>& ids, const BpeModel& model) {
    std::string glued;
    for (int id : ids) glued += model.vocab.token(id);
    // Word boundaries are the end-of-word markers.
    std::string out;
    size_t pos = 0;
    const std::string eow = BpeModel::kEow;
    while (pos < glued.size()) {
        const size_t next = glued.find(eow, pos);
        if (next == std::string::npos) {
            if (!out.empty()) out += ' ';
            out += glued.substr(pos);
            break;
        }
        if (!out.empty()) out += ' ';
        out += glued.substr(pos, next - pos);
        pos = next + eow.size();
    }
    return out;
}

/// Subword tokens emitted per whitespace word over a corpus.
template <typename Model>
double fragmentation_ratio(const std::vector<std::string>& corpus, const Model& model) {
    long long tokens = 0, words = 0;
    for (const auto& text : corpus) {
        words += static_cast<long long>(split_words(text).size());
        tokens += static_cast<long long>(tokenize(text, model).size());
    }
    if (words == 0) throw ConfigError("fragmentation_ratio: corpus has no words");
    return static_cast<double>(tokens) / static_cast<double>(words);
}

/// Either flavor behind one surface; which one is a config choice.
struct Tokenizer {
    enum class Kind { kWord, kBpe };
    Kind kind = Kind::kWord;
    Vocabulary word_vocab;
    BpeModel bpe;

    int vocab_size() const {
        return kind == Kind::kWord ? word_vocab.size() : bpe.vocab.size();
    }
    std::vector<int> encode(const std::string& text) const {
        return kind == Kind::kWord ? tokenize(text, word_vocab) : tokenize(text, bpe);
    }
    const Vocabulary& vocabulary() const {
        return kind == Kind::kWord ? word_vocab : bpe.vocab;
    }
};

}  // namespace lmtc

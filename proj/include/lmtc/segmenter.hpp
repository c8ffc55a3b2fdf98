#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "lmtc/encoder.hpp"
#include "lmtc/errors.hpp"
#include "lmtc/tape.hpp"
#include "lmtc/tokenizer.hpp"

namespace lmtc {

enum class TruncateMode { kFront, kBack };

/// front keeps the first `limit` tokens, back the last `limit`.
inline std::vector<int> truncate_tokens(const std::vector<int>& tokens, TruncateMode mode,
                                        int limit) {
    if (limit < 1) throw ConfigError("truncate limit must be >= 1");
    if (static_cast<int>(tokens.size()) <= limit) return tokens;
    if (mode == TruncateMode::kFront)
        return {tokens.begin(), tokens.begin() + limit};
    return {tokens.end() - limit, tokens.end()};
}

struct Segment {
    int index = 0;
    std::vector<int> ids;             // [CLS] + real tokens + [SEP] + PAD fill
    std::vector<uint8_t> real;        // attention mask; 0 marks PAD
    std::vector<int> doc_positions;   // per position: document token index, -1 for specials/PAD
    int real_len = 0;                 // document tokens in this segment
};

/// Keep-front truncation to max_doc_len, then consecutive c-token segments;
/// only the last segment is PAD-filled. Every segment is c+2 positions long
/// (CLS and SEP around the tokens). max_doc_len that is not a multiple of c
/// is rounded down with a warning.
inline std::vector<Segment> split_segments(const std::vector<int>& doc_tokens, int c,
                                           int max_doc_len) {
    if (doc_tokens.empty()) throw ContractError("cannot segment an empty document");
    if (c < 1) throw ConfigError("segment length must be >= 1");
    if (max_doc_len < c)
        throw ConfigError("max_doc_len " + std::to_string(max_doc_len) +
                          " is smaller than segment length " + std::to_string(c));
    if (max_doc_len % c != 0) {
        const int rounded = (max_doc_len / c) * c;
        std::cerr << "warning: max_doc_len " << max_doc_len << " rounded down to " << rounded
                  << " (multiple of segment length " << c << ")\n";
        max_doc_len = rounded;
    }
    const int n = std::min(static_cast<int>(doc_tokens.size()), max_doc_len);
    std::vector<Segment> segments;
    for (int start = 0; start < n; start += c) {
        Segment s;
        s.index = static_cast<int>(segments.size());
        s.real_len = std::min(c, n - start);
        s.ids.reserve(static_cast<size_t>(c) + 2);
        s.ids.push_back(kCls);
        s.doc_positions.push_back(-1);
        for (int i = 0; i < s.real_len; ++i) {
            s.ids.push_back(doc_tokens[static_cast<size_t>(start + i)]);
            s.doc_positions.push_back(start + i);
        }
        s.ids.push_back(kSep);
        s.doc_positions.push_back(-1);
        s.real.assign(s.ids.size(), 1);
        while (static_cast<int>(s.ids.size()) < c + 2) {
            s.ids.push_back(kPad);
            s.doc_positions.push_back(-1);
            s.real.push_back(0);
        }
        segments.push_back(std::move(s));
    }
    return segments;
}

/// Document-level hidden states assembled from independently encoded
/// segments, plus the per-segment views the ablation heads consume.
template <typename T>
struct EncodedDocument {
    typename Tape<T>::Id h = -1;                      // d x n, columns in document order
    int n = 0;                                        // columns of h
    std::vector<int> doc_positions;                   // column -> document token index
    std::vector<typename Tape<T>::Id> segment_h;      // per segment, d x len
    std::vector<typename Tape<T>::Id> segment_cls;    // per segment, 1 x d
};

struct SegmenterOptions {
    int segment_len = 128;     // c
    int max_doc_len = 3072;
    TruncateMode truncation = TruncateMode::kFront;
    bool include_specials = false;  // keep CLS/SEP columns in H
};

template <typename T>
EncodedDocument<T> encode_document(Tape<T>& tape, EncoderState<T>& state,
                                   const std::vector<int>& doc_tokens,
                                   const SegmenterOptions& opts, bool train = false,
                                   Rng* rng = nullptr) {
    if (opts.segment_len + 2 > state.config.max_positions())
        throw ConfigError("segment length " + std::to_string(opts.segment_len) +
                          " needs max positions >= " + std::to_string(opts.segment_len + 2));
    const auto truncated = truncate_tokens(doc_tokens, opts.truncation, opts.max_doc_len);
    const auto segments = split_segments(truncated, opts.segment_len, opts.max_doc_len);
    EncodedDocument<T> doc;
    std::vector<typename Tape<T>::Id> token_rows;
    for (const auto& seg : segments) {
        auto enc = encode_segment_rows(tape, state, seg.ids, seg.real, train, rng);
        const int lo = opts.include_specials ? 0 : 1;
        const int hi = opts.include_specials ? seg.real_len + 2 : seg.real_len + 1;
        auto rows = tape.row_slice(enc, lo, hi);
        token_rows.push_back(rows);
        doc.segment_h.push_back(tape.transpose(rows));
        doc.segment_cls.push_back(tape.row_slice(enc, 0, 1));
        for (int p = lo; p < hi; ++p)
            doc.doc_positions.push_back(seg.doc_positions[static_cast<size_t>(p)]);
    }
    doc.h = tape.transpose(tape.vstack(token_rows));
    doc.n = static_cast<int>(doc.doc_positions.size());
    return doc;
}

}  // namespace lmtc

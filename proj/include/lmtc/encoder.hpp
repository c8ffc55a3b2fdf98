#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmtc/checkpoint.hpp"
#include "lmtc/errors.hpp"
#include "lmtc/matrix.hpp"
#include "lmtc/rng.hpp"
#include "lmtc/tape.hpp"
#include "lmtc/tokenizer.hpp"

namespace lmtc {

struct EncoderConfig {
    int layers = 2;
    int heads = 4;
    int hidden_dim = 128;
    int ffn_dim = 512;
    int segment_len = 128;  // c: real tokens per segment
    int vocab_size = 0;
    double dropout = 0.1;

    // The positional table leaves room for CLS and SEP around the segment.
    int max_positions() const { return segment_len + 2; }

    void validate() const {
        if (layers < 1 || heads < 1 || hidden_dim < 1 || ffn_dim < 1)
            throw ConfigError("encoder dims must be positive");
        if (hidden_dim % heads != 0)
            throw ConfigError("hidden_dim must be divisible by heads");
        if (max_positions() < 8) throw ConfigError("max positions must be >= 8");
        if (vocab_size < 6) throw ConfigError("vocab_size must be >= 6");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    }

    nlohmann::ordered_json to_json() const {
        return {{"layers", layers},   {"heads", heads},
                {"hidden_dim", hidden_dim}, {"ffn_dim", ffn_dim},
                {"segment_len", segment_len}, {"vocab_size", vocab_size},
                {"dropout", dropout}};
    }
    static EncoderConfig from_json(const nlohmann::ordered_json& j) {
        EncoderConfig c;
        c.layers = j.at("layers").get<int>();
        c.heads = j.at("heads").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.ffn_dim = j.at("ffn_dim").get<int>();
        c.segment_len = j.at("segment_len").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.dropout = j.at("dropout").get<double>();
        return c;
    }
};

/// Post-norm transformer encoder (attention -> add&norm -> FFN -> add&norm)
/// with learned positions and an MLM output projection weight-tied to the
/// token embeddings.
template <typename T>
struct EncoderState {
    EncoderConfig config;
    Parameter<T> tok_emb;  // vocab x d
    Parameter<T> pos_emb;  // max_positions x d
    Parameter<T> emb_ln_gain, emb_ln_bias;  // layer norm over the embedding sum

    struct Layer {
        Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
        Parameter<T> ln1_gain, ln1_bias;
        Parameter<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
        Parameter<T> ln2_gain, ln2_bias;
    };
    std::vector<Layer> layers;
    Parameter<T> mlm_bias;  // 1 x vocab

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> ps = {&tok_emb, &pos_emb, &emb_ln_gain, &emb_ln_bias};
        for (auto& l : layers) {
            for (auto* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_gain,
                            &l.ln1_bias, &l.ffn_w1, &l.ffn_b1, &l.ffn_w2, &l.ffn_b2, &l.ln2_gain,
                            &l.ln2_bias})
                ps.push_back(p);
        }
        ps.push_back(&mlm_bias);
        return ps;
    }
};

namespace detail {

template <typename T>
Matrix<T> trunc_normal(int rows, int cols, Rng& rng, double sigma = 0.02) {
    Matrix<T> m(rows, cols);
    for (auto& x : m.v) x = static_cast<T>(rng.next_truncated_normal(sigma));
    return m;
}

}  // namespace detail

/// Truncated-normal init (sigma 0.02); biases zero, layer-norm gains one.
template <typename T>
EncoderState<T> init_encoder(const EncoderConfig& config, uint64_t seed) {
    config.validate();
    EncoderState<T> s;
    s.config = config;
    Rng rng = Rng::derive(seed, {0x656e63});
    const int d = config.hidden_dim, f = config.ffn_dim;
    s.tok_emb = Parameter<T>("encoder.tok_emb", detail::trunc_normal<T>(config.vocab_size, d, rng));
    s.pos_emb =
        Parameter<T>("encoder.pos_emb", detail::trunc_normal<T>(config.max_positions(), d, rng));
    s.emb_ln_gain = Parameter<T>("encoder.emb_ln_gain", Matrix<T>(1, d, T(1)), true);
    s.emb_ln_bias = Parameter<T>("encoder.emb_ln_bias", Matrix<T>(1, d), true);
    for (int li = 0; li < config.layers; ++li) {
        typename EncoderState<T>::Layer l;
        const std::string pre = "encoder.layer" + std::to_string(li) + ".";
        l.wq = Parameter<T>(pre + "wq", detail::trunc_normal<T>(d, d, rng));
        l.bq = Parameter<T>(pre + "bq", Matrix<T>(1, d), true);
        l.wk = Parameter<T>(pre + "wk", detail::trunc_normal<T>(d, d, rng));
        l.bk = Parameter<T>(pre + "bk", Matrix<T>(1, d), true);
        l.wv = Parameter<T>(pre + "wv", detail::trunc_normal<T>(d, d, rng));
        l.bv = Parameter<T>(pre + "bv", Matrix<T>(1, d), true);
        l.wo = Parameter<T>(pre + "wo", detail::trunc_normal<T>(d, d, rng));
        l.bo = Parameter<T>(pre + "bo", Matrix<T>(1, d), true);
        l.ln1_gain = Parameter<T>(pre + "ln1_gain", Matrix<T>(1, d, T(1)), true);
        l.ln1_bias = Parameter<T>(pre + "ln1_bias", Matrix<T>(1, d), true);
        l.ffn_w1 = Parameter<T>(pre + "ffn_w1", detail::trunc_normal<T>(d, f, rng));
        l.ffn_b1 = Parameter<T>(pre + "ffn_b1", Matrix<T>(1, f), true);
        l.ffn_w2 = Parameter<T>(pre + "ffn_w2", detail::trunc_normal<T>(f, d, rng));
        l.ffn_b2 = Parameter<T>(pre + "ffn_b2", Matrix<T>(1, d), true);
        l.ln2_gain = Parameter<T>(pre + "ln2_gain", Matrix<T>(1, d, T(1)), true);
        l.ln2_bias = Parameter<T>(pre + "ln2_bias", Matrix<T>(1, d), true);
        s.layers.push_back(std::move(l));
    }
    s.mlm_bias = Parameter<T>("encoder.mlm_bias", Matrix<T>(1, config.vocab_size), true);
    return s;
}

/// Per-token hidden states with tokens as rows (len x d). PAD positions are
/// masked out of every attention softmax. Dropout only runs when `train`.
template <typename T>
typename Tape<T>::Id encode_segment_rows(Tape<T>& tape, EncoderState<T>& state,
                                         const std::vector<int>& ids,
                                         const std::vector<uint8_t>& real, bool train = false,
                                         Rng* rng = nullptr) {
    const auto& cfg = state.config;
    const int len = static_cast<int>(ids.size());
    if (len == 0) throw ContractError("encode_segment: empty input");
    if (len > cfg.max_positions())
        throw LengthError("segment of " + std::to_string(len) + " tokens exceeds max positions " +
                          std::to_string(cfg.max_positions()) + "; callers must pre-segment");
    if (static_cast<int>(real.size()) != len)
        throw ShapeError("attention mask length != token count");
    const int d = cfg.hidden_dim, nh = cfg.heads, dh = d / nh;
    const double rate = train ? cfg.dropout : 0.0;
    if (rate > 0.0 && rng == nullptr) throw ContractError("dropout requires an Rng");

    auto x = tape.layer_norm(tape.add(tape.embedding_lookup(tape.leaf(state.tok_emb), ids),
                                      tape.row_slice(tape.leaf(state.pos_emb), 0, len)),
                             tape.leaf(state.emb_ln_gain), tape.leaf(state.emb_ln_bias));

    // Additive key mask: 0 for real positions, -1e9 for PAD.
    Matrix<T> mask_m(len, len);
    for (int i = 0; i < len; ++i)
        for (int j = 0; j < len; ++j)
            mask_m.at(i, j) = real[static_cast<size_t>(j)] ? T(0) : T(-1e9);
    const auto mask = tape.constant(std::move(mask_m));

    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
    for (auto& l : state.layers) {
        auto q = tape.add_row_broadcast(tape.matmul(x, tape.leaf(l.wq)), tape.leaf(l.bq));
        auto k = tape.add_row_broadcast(tape.matmul(x, tape.leaf(l.wk)), tape.leaf(l.bk));
        auto v = tape.add_row_broadcast(tape.matmul(x, tape.leaf(l.wv)), tape.leaf(l.bv));
        std::vector<typename Tape<T>::Id> head_outs;
        for (int h = 0; h < nh; ++h) {
            auto qh = tape.col_slice(q, h * dh, (h + 1) * dh);
            auto kh = tape.col_slice(k, h * dh, (h + 1) * dh);
            auto vh = tape.col_slice(v, h * dh, (h + 1) * dh);
            auto scores = tape.add(tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh),
                                   mask);
            head_outs.push_back(tape.matmul(tape.softmax_rows(scores), vh));
        }
        auto attn = tape.add_row_broadcast(tape.matmul(tape.hstack(head_outs), tape.leaf(l.wo)),
                                           tape.leaf(l.bo));
        if (rate > 0.0) attn = tape.dropout(attn, rate, *rng);
        x = tape.layer_norm(tape.add(x, attn), tape.leaf(l.ln1_gain), tape.leaf(l.ln1_bias));

        auto f = tape.gelu_op(
            tape.add_row_broadcast(tape.matmul(x, tape.leaf(l.ffn_w1)), tape.leaf(l.ffn_b1)));
        auto f2 = tape.add_row_broadcast(tape.matmul(f, tape.leaf(l.ffn_w2)), tape.leaf(l.ffn_b2));
        if (rate > 0.0) f2 = tape.dropout(f2, rate, *rng);
        x = tape.layer_norm(tape.add(x, f2), tape.leaf(l.ln2_gain), tape.leaf(l.ln2_bias));
    }
    return x;
}

/// Spec-facing orientation: one column per token (d x len).
template <typename T>
typename Tape<T>::Id encode_segment(Tape<T>& tape, EncoderState<T>& state,
                                    const std::vector<int>& ids, const std::vector<uint8_t>& real,
                                    bool train = false, Rng* rng = nullptr) {
    return tape.transpose(encode_segment_rows(tape, state, ids, real, train, rng));
}

// ---- masked language modeling --------------------------------------------

struct MlmExample {
    std::vector<int> ids;             // after masking
    std::vector<uint8_t> real;        // attention mask
    std::vector<int> targets;         // original ids
    std::vector<uint8_t> selected;    // positions contributing to the loss
    int n_selected = 0;
};

/// BERT-style dynamic masking: 15% of non-special positions are selected;
/// of those 80% become [MASK], 10% a random non-special token, 10% stay.
inline MlmExample make_mlm_example(const std::vector<int>& ids, const std::vector<uint8_t>& real,
                                   int vocab_size, Rng& rng) {
    MlmExample ex;
    ex.ids = ids;
    ex.real = real;
    ex.targets = ids;
    ex.selected.assign(ids.size(), 0);
    for (size_t p = 0; p < ids.size(); ++p) {
        if (!real[p] || ids[p] < 5) continue;  // specials and PAD are never masked
        if (!rng.next_bernoulli(0.15)) continue;
        ex.selected[p] = 1;
        ++ex.n_selected;
        const double u = rng.next_double();
        if (u < 0.8)
            ex.ids[p] = kMask;
        else if (u < 0.9)
            ex.ids[p] = 5 + static_cast<int>(rng.next_below(
                                static_cast<uint64_t>(vocab_size - 5)));
        // else: keep the original token
    }
    return ex;
}

/// Masked-token cross-entropy pooled over all selected positions in the
/// batch. Returns nothing when the batch has no maskable position (callers
/// skip the step with a warning).
template <typename T>
std::optional<typename Tape<T>::Id> mlm_batch_loss(Tape<T>& tape, EncoderState<T>& state,
                                                   const std::vector<MlmExample>& batch,
                                                   bool train = false, Rng* rng = nullptr) {
    int total = 0;
    for (const auto& ex : batch) total += ex.n_selected;
    if (total == 0) return std::nullopt;
    typename Tape<T>::Id loss = -1;
    for (const auto& ex : batch) {
        if (ex.n_selected == 0) continue;
        auto enc = encode_segment_rows(tape, state, ex.ids, ex.real, train, rng);
        auto logits = tape.add_row_broadcast(
            tape.matmul(enc, tape.transpose(tape.leaf(state.tok_emb))), tape.leaf(state.mlm_bias));
        auto lx = tape.softmax_xent_rows(logits, ex.targets, ex.selected);
        auto weighted = tape.scale(lx, static_cast<T>(ex.n_selected) / static_cast<T>(total));
        loss = (loss < 0) ? weighted : tape.add(loss, weighted);
    }
    return loss;
}

// ---- checkpointing ---------------------------------------------------------

template <typename T>
void save_encoder(const EncoderState<T>& state, const std::string& path,
                  const std::vector<const Parameter<T>*>& extra = {},
                  const nlohmann::ordered_json& extra_meta = nlohmann::ordered_json::object()) {
    nlohmann::ordered_json meta;
    meta["encoder"] = state.config.to_json();
    for (auto& [k, v] : extra_meta.items()) meta[k] = v;
    std::vector<const Parameter<T>*> params;
    for (auto* p : const_cast<EncoderState<T>&>(state).parameters()) params.push_back(p);
    for (auto* p : extra) params.push_back(p);
    save_checkpoint(path, meta, params);
}

/// Loads encoder weights; every config field must match the checkpoint.
template <typename T>
CheckpointReader load_encoder(EncoderState<T>& state, const std::string& path) {
    CheckpointReader r = read_checkpoint(path);
    const auto saved = EncoderConfig::from_json(r.meta.at("encoder"));
    const auto& cur = state.config;
    auto check = [&](const std::string& field, auto a, auto b) {
        if (a != b)
            throw IoError("checkpoint " + path + ": encoder." + field + " is " +
                          std::to_string(b) + ", expected " + std::to_string(a));
    };
    check("layers", cur.layers, saved.layers);
    check("heads", cur.heads, saved.heads);
    check("hidden_dim", cur.hidden_dim, saved.hidden_dim);
    check("ffn_dim", cur.ffn_dim, saved.ffn_dim);
    check("segment_len", cur.segment_len, saved.segment_len);
    check("vocab_size", cur.vocab_size, saved.vocab_size);
    for (auto* p : state.parameters()) r.load_into(*p);
    return r;
}

}  // namespace lmtc

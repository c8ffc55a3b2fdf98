#pragma once

#include <string>
#include <vector>

#include "lmtc/encoder.hpp"
#include "lmtc/segmenter.hpp"
#include "lmtc/tape.hpp"

namespace lmtc {

enum class HeadKind { kLaat, kCaml, kBertXml, kClsMean };

inline const char* head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::kLaat: return "laat";
        case HeadKind::kCaml: return "caml";
        case HeadKind::kBertXml: return "bertxml";
        case HeadKind::kClsMean: return "clsmean";
    }
    return "?";
}

inline HeadKind head_kind_from_name(const std::string& s) {
    if (s == "laat") return HeadKind::kLaat;
    if (s == "caml") return HeadKind::kCaml;
    if (s == "bertxml") return HeadKind::kBertXml;
    if (s == "clsmean") return HeadKind::kClsMean;
    throw ConfigError("unknown head kind \"" + s + "\"");
}

struct HeadConfig {
    HeadKind kind = HeadKind::kLaat;
    int num_labels = 0;
    int hidden_dim = 0;   // d of the encoder
    int attn_dim = 0;     // d_a; 0 means "same as hidden_dim"
    bool label_bias = true;       // bias inside the sigmoid argument
    bool attention_bias = false;  // biases on the V/W transforms
    int d_a() const { return attn_dim > 0 ? attn_dim : hidden_dim; }
};

/// Label-aware attention parameters: Z = tanh(VH), A = softmax(WZ),
/// D = H A^T, p_i = sigmoid(<L_i, D_i> + b_i).
template <typename T>
struct LaatHead {
    Parameter<T> v;       // d_a x d
    Parameter<T> vb;      // d_a x 1 (only used with attention_bias)
    Parameter<T> w;       // |Y| x d_a
    Parameter<T> wb;      // |Y| x 1 (only used with attention_bias)
    Parameter<T> out;     // |Y| x d  (per-label output vectors)
    Parameter<T> bias;    // |Y| x 1
};

/// CAML-style attention: A = softmax(U^T H), p_i = sigmoid(<beta_i, D_i> + b_i).
template <typename T>
struct CamlHead {
    Parameter<T> u;       // d x |Y| (label embeddings)
    Parameter<T> beta;    // |Y| x d
    Parameter<T> bias;    // |Y| x 1
};

/// Mean of per-segment CLS vectors through a single linear layer.
template <typename T>
struct ClsMeanHead {
    Parameter<T> w;       // |Y| x d
    Parameter<T> bias;    // |Y| x 1
};

template <typename T>
struct Head {
    HeadConfig config;
    LaatHead<T> laat;     // also used by the BERT-XML variant
    CamlHead<T> caml;
    ClsMeanHead<T> cls;

    std::vector<Parameter<T>*> parameters() {
        switch (config.kind) {
            case HeadKind::kLaat:
            case HeadKind::kBertXml: {
                std::vector<Parameter<T>*> ps = {&laat.v, &laat.w, &laat.out, &laat.bias};
                if (config.attention_bias) {
                    ps.push_back(&laat.vb);
                    ps.push_back(&laat.wb);
                }
                return ps;
            }
            case HeadKind::kCaml:
                return {&caml.u, &caml.beta, &caml.bias};
            case HeadKind::kClsMean:
                return {&cls.w, &cls.bias};
        }
        return {};
    }
};

/// Xavier-scale truncated normal for the weight matrices (uniform sigma-0.02
/// attention over hundreds of tokens cannot break symmetry at these widths);
/// label biases start at -2.0 so initial probabilities sit near the
/// sparse-label base rate.
template <typename T>
Head<T> init_head(const HeadConfig& config, uint64_t seed) {
    if (config.num_labels < 1 || config.hidden_dim < 1)
        throw ConfigError("head needs positive num_labels and hidden_dim");
    Head<T> h;
    h.config = config;
    Rng rng = Rng::derive(seed, {0x68656164});
    const int d = config.hidden_dim, da = config.d_a(), y = config.num_labels;
    auto xavier = [&](int rows, int cols) {
        return detail::trunc_normal<T>(rows, cols, rng, std::sqrt(2.0 / (rows + cols)));
    };
    h.laat.v = Parameter<T>("head.v", xavier(da, d));
    h.laat.vb = Parameter<T>("head.vb", Matrix<T>(da, 1), true);
    h.laat.w = Parameter<T>("head.w", xavier(y, da));
    h.laat.wb = Parameter<T>("head.wb", Matrix<T>(y, 1), true);
    h.laat.out = Parameter<T>("head.out", xavier(y, d));
    h.laat.bias = Parameter<T>("head.bias", Matrix<T>(y, 1, T(-2)), true);
    h.caml.u = Parameter<T>("head.u", xavier(d, y));
    h.caml.beta = Parameter<T>("head.beta", xavier(y, d));
    h.caml.bias = Parameter<T>("head.cbias", Matrix<T>(y, 1, T(-2)), true);
    h.cls.w = Parameter<T>("head.clsw", xavier(y, d));
    h.cls.bias = Parameter<T>("head.clsb", Matrix<T>(y, 1, T(-2)), true);
    return h;
}

template <typename T>
struct Prediction {
    typename Tape<T>::Id p = -1;          // |Y| x 1 probabilities
    typename Tape<T>::Id attention = -1;  // |Y| x n, when the head produces one
};

template <typename T>
Prediction<T> laat_forward(Tape<T>& tape, Head<T>& head, typename Tape<T>::Id h_doc) {
    const auto& H = tape.val(h_doc);
    if (H.rows != head.config.hidden_dim)
        throw ShapeError("laat_forward: H has " + std::to_string(H.rows) +
                         " rows, head expects " + std::to_string(head.config.hidden_dim));
    if (H.cols < 1) throw ContractError("laat_forward: H has no columns");
    auto z = tape.matmul(tape.leaf(head.laat.v), h_doc);
    if (head.config.attention_bias) z = tape.add_col_broadcast(z, tape.leaf(head.laat.vb));
    z = tape.tanh_op(z);
    auto s = tape.matmul(tape.leaf(head.laat.w), z);
    if (head.config.attention_bias) s = tape.add_col_broadcast(s, tape.leaf(head.laat.wb));
    auto attn = tape.softmax_rows(s);
    auto d = tape.matmul(h_doc, tape.transpose(attn));
    auto logits = tape.diag_mm(tape.leaf(head.laat.out), d);
    if (head.config.label_bias) logits = tape.add(logits, tape.leaf(head.laat.bias));
    return {tape.sigmoid_op(logits), attn};
}

template <typename T>
Prediction<T> caml_forward(Tape<T>& tape, Head<T>& head, typename Tape<T>::Id h_doc) {
    const auto& H = tape.val(h_doc);
    if (H.rows != head.config.hidden_dim)
        throw ShapeError("caml_forward: H has " + std::to_string(H.rows) +
                         " rows, head expects " + std::to_string(head.config.hidden_dim));
    auto attn = tape.softmax_rows(tape.matmul(tape.transpose(tape.leaf(head.caml.u)), h_doc));
    auto d = tape.matmul(h_doc, tape.transpose(attn));
    auto logits = tape.diag_mm(tape.leaf(head.caml.beta), d);
    if (head.config.label_bias) logits = tape.add(logits, tape.leaf(head.caml.bias));
    return {tape.sigmoid_op(logits), attn};
}

/// Label attention per segment, document probability = max over segments.
template <typename T>
Prediction<T> bertxml_forward(Tape<T>& tape, Head<T>& head,
                              const std::vector<typename Tape<T>::Id>& segment_hs) {
    if (segment_hs.empty()) throw ContractError("bertxml_forward: no segments");
    typename Tape<T>::Id p = -1;
    for (auto h : segment_hs) {
        auto seg_pred = laat_forward(tape, head, h);
        p = (p < 0) ? seg_pred.p : tape.elem_max(p, seg_pred.p);
    }
    return {p, -1};
}

/// Mean of per-segment CLS vectors -> linear layer -> sigmoid.
template <typename T>
Prediction<T> clsmean_forward(Tape<T>& tape, Head<T>& head,
                              const std::vector<typename Tape<T>::Id>& segment_cls) {
    if (segment_cls.empty()) throw ContractError("clsmean_forward: no segments");
    const int s = static_cast<int>(segment_cls.size());
    auto stacked = tape.vstack(segment_cls);  // s x d
    Matrix<T> avg(1, s, T(1) / static_cast<T>(s));
    auto mean = tape.matmul(tape.constant(std::move(avg)), stacked);  // 1 x d
    auto logits = tape.add(tape.matmul(tape.leaf(head.cls.w), tape.transpose(mean)),
                           tape.leaf(head.cls.bias));
    return {tape.sigmoid_op(logits), -1};
}

template <typename T>
Prediction<T> head_forward(Tape<T>& tape, Head<T>& head, const EncodedDocument<T>& doc) {
    switch (head.config.kind) {
        case HeadKind::kLaat: return laat_forward(tape, head, doc.h);
        case HeadKind::kCaml: return caml_forward(tape, head, doc.h);
        case HeadKind::kBertXml: return bertxml_forward(tape, head, doc.segment_h);
        case HeadKind::kClsMean: return clsmean_forward(tape, head, doc.segment_cls);
    }
    throw ContractError("unreachable head kind");
}

/// bit i set iff p_i >= t (boundary included).
template <typename T>
std::vector<uint8_t> decide(const Matrix<T>& probs, double threshold) {
    if (threshold < 0.0 || threshold > 1.0) throw ConfigError("threshold must be in [0,1]");
    std::vector<uint8_t> bits(probs.v.size());
    for (size_t i = 0; i < probs.v.size(); ++i)
        bits[i] = static_cast<double>(probs.v[i]) >= threshold ? 1 : 0;
    return bits;
}

}  // namespace lmtc

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lmtc/corpus.hpp"

using namespace lmtc;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

// Spearman rank correlation with midranks for ties (test-side oracle).
double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& x) {
        std::vector<size_t> idx(x.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return x[i] < x[j]; });
        std::vector<double> r(x.size());
        size_t i = 0;
        while (i < idx.size()) {
            size_t j = i;
            while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
            const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = mid;
            i = j + 1;
        }
        return r;
    };
    auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    return cov / std::sqrt(va * vb);
}

SyntheticSpec small_spec() {
    SyntheticSpec s;
    s.num_labels = 20;
    s.train_docs = 50;
    s.dev_docs = 10;
    s.test_docs = 10;
    s.doc_len_mean = 60;
    s.doc_len_min = 30;
    s.doc_len_max = 120;
    s.mean_labels_per_doc = 3.0;
    s.keywords_per_label = 2;
    s.seed = 42;
    return s;
}

}  // namespace

TEST(Generate, DegenerateSingleLabelNoNoise) {
    SyntheticSpec s;
    s.num_labels = 1;
    s.train_docs = 5;
    s.dev_docs = 1;
    s.test_docs = 1;
    s.doc_len_mean = 20;
    s.doc_len_min = 10;
    s.doc_len_max = 30;
    s.mean_labels_per_doc = 1.0;
    s.keywords_per_label = 1;
    s.noise_rate = 0.0;
    s.seed = 3;
    Corpus c = generate_synthetic(s);
    for (const auto& doc : c.train) {
        ASSERT_EQ(doc.labels, std::vector<int>{0});
        for (const auto& w : doc.words) EXPECT_EQ(w, "l0000k0");
    }
}

TEST(Generate, ByteIdenticalRerun) {
    SyntheticSpec s = small_spec();
    Corpus a = generate_synthetic(s);
    Corpus b = generate_synthetic(s);
    save_jsonl(a.train, a.labels, "gen_a.jsonl");
    save_jsonl(b.train, b.labels, "gen_b.jsonl");
    EXPECT_EQ(slurp("gen_a.jsonl"), slurp("gen_b.jsonl"));
    std::remove("gen_a.jsonl");
    std::remove("gen_b.jsonl");

    s.seed = 43;
    Corpus d = generate_synthetic(s);
    save_jsonl(d.train, d.labels, "gen_d.jsonl");
    save_jsonl(a.train, a.labels, "gen_a.jsonl");
    EXPECT_NE(slurp("gen_a.jsonl"), slurp("gen_d.jsonl"));
    std::remove("gen_a.jsonl");
    std::remove("gen_d.jsonl");
}

TEST(Generate, ZipfMarginalsSpearman) {
    SyntheticSpec s;
    s.num_labels = 200;
    s.zipf_exponent = 1.2;
    s.train_docs = 5000;
    s.dev_docs = 0;
    s.test_docs = 0;
    s.doc_len_mean = 40;  // short docs keep this test fast; labels are unaffected
    s.doc_len_min = 30;
    s.doc_len_max = 60;
    s.seed = 7;
    Corpus c = generate_synthetic(s);
    std::vector<double> empirical, target;
    for (int l = 0; l < s.num_labels; ++l) {
        empirical.push_back(static_cast<double>(c.labels.train_frequency[l]));
        target.push_back(std::pow(static_cast<double>(l + 1), -s.zipf_exponent));
    }
    EXPECT_GT(spearman(empirical, target), 0.95);
}

TEST(Generate, EveryLabelHasKeywordEvidence) {
    Corpus c = generate_synthetic(small_spec());
    auto check = [](const std::vector<Document>& docs, int k) {
        for (const auto& doc : docs)
            for (int l : doc.labels) {
                bool found = false;
                for (const auto& w : doc.words)
                    for (int j = 0; j < k && !found; ++j)
                        if (w == lmtc::detail::keyword_word(l, j)) found = true;
                ASSERT_TRUE(found) << doc.id << " label " << l;
            }
    };
    check(c.train, 2);
    check(c.dev, 2);
    check(c.test, 2);
}

TEST(Generate, ConfigErrors) {
    SyntheticSpec s = small_spec();
    s.mean_labels_per_doc = 100.0;  // > num_labels
    EXPECT_THROW(generate_synthetic(s), ConfigError);
    s = small_spec();
    s.zipf_exponent = 0.0;
    EXPECT_THROW(generate_synthetic(s), ConfigError);
}

TEST(LoadJsonl, WellFormed) {
    write_file("ok.jsonl",
               "{\"id\":\"d1\",\"text\":\"alpha beta\",\"labels\":[\"A\"]}\n"
               "{\"id\":\"d2\",\"text\":\"gamma\",\"labels\":[\"A\",\"B\"]}\n");
    LabelSpace ls;
    auto result = load_jsonl("ok.jsonl", ls, LoadMode::kTrain);
    ASSERT_EQ(result.docs.size(), 2u);
    EXPECT_EQ(ls.size(), 2);
    EXPECT_EQ(result.docs[0].words, (std::vector<std::string>{"alpha", "beta"}));
    EXPECT_EQ(result.docs[1].labels, (std::vector<int>{0, 1}));
    std::remove("ok.jsonl");
}

TEST(LoadJsonl, MissingFieldCitesLineAndField) {
    write_file("bad.jsonl", "{\"id\":\"d1\",\"text\":\"alpha\"}\n");
    LabelSpace ls;
    try {
        load_jsonl("bad.jsonl", ls, LoadMode::kTrain);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("labels"), std::string::npos) << msg;
    }
    std::remove("bad.jsonl");
}

TEST(LoadJsonl, MalformedLineNumber) {
    write_file("mal.jsonl", "{\"id\":\"d1\",\"text\":\"a\",\"labels\":[]}\nnot json\n");
    LabelSpace ls;
    try {
        load_jsonl("mal.jsonl", ls, LoadMode::kTrain);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    }
    std::remove("mal.jsonl");
}

TEST(LoadJsonl, DuplicateIdListed) {
    write_file("dup.jsonl",
               "{\"id\":\"same\",\"text\":\"a\",\"labels\":[]}\n"
               "{\"id\":\"same\",\"text\":\"b\",\"labels\":[]}\n");
    LabelSpace ls;
    try {
        load_jsonl("dup.jsonl", ls, LoadMode::kTrain);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("same"), std::string::npos) << e.what();
    }
    std::remove("dup.jsonl");
}

TEST(LoadJsonl, UnknownLabelStrictVsPermissive) {
    write_file("unk.jsonl", "{\"id\":\"d1\",\"text\":\"a\",\"labels\":[\"NEW\"]}\n");
    LabelSpace ls;
    ls.add("OLD");
    EXPECT_THROW(load_jsonl("unk.jsonl", ls, LoadMode::kStrict), IoError);
    auto result = load_jsonl("unk.jsonl", ls, LoadMode::kPermissive);
    EXPECT_EQ(result.dropped_unknown_labels, 1);
    EXPECT_TRUE(result.docs[0].labels.empty());
    std::remove("unk.jsonl");
}

TEST(FilterTopLabels, CountFixture) {
    // Train counts: a:5, b:3, c:1. K=2 keeps {a, b}.
    Corpus c;
    const int a = c.labels.add("a"), b = c.labels.add("b"), cc = c.labels.add("c");
    auto mk = [&](std::string id, std::vector<int> ls) {
        Document d;
        d.id = std::move(id);
        d.words = {"w"};
        d.labels = std::move(ls);
        return d;
    };
    for (int i = 0; i < 5; ++i) c.train.push_back(mk("a" + std::to_string(i), {a}));
    for (int i = 0; i < 3; ++i) c.train.push_back(mk("b" + std::to_string(i), {b}));
    c.train.push_back(mk("c0", {cc}));
    for (auto& d : c.train)
        for (int l : d.labels) ++c.labels.train_frequency[static_cast<size_t>(l)];
    c.dev.push_back(mk("dev0", {cc}));  // gold vanishes under K=2 but doc is kept

    Corpus f = filter_top_labels(c, 2);
    EXPECT_EQ(f.labels.size(), 2);
    EXPECT_GE(f.labels.id_of("a"), 0);
    EXPECT_GE(f.labels.id_of("b"), 0);
    EXPECT_EQ(f.labels.id_of("c"), -1);
    EXPECT_EQ(f.train.size(), 8u);  // the c-only train doc dropped
    ASSERT_EQ(f.dev.size(), 1u);
    EXPECT_TRUE(f.dev[0].labels.empty());
}

TEST(FilterTopLabels, IdentityAndIdempotentAndClosure) {
    Corpus c = generate_synthetic(small_spec());
    Corpus all = filter_top_labels(c, c.labels.size());
    EXPECT_EQ(all.labels.size(), c.labels.size());
    EXPECT_EQ(all.train.size(), c.train.size());

    Corpus f1 = filter_top_labels(c, 5);
    Corpus f2 = filter_top_labels(f1, 5);
    EXPECT_EQ(f1.labels.codes, f2.labels.codes);
    EXPECT_EQ(f1.train.size(), f2.train.size());
    for (const auto& d : f1.train) {
        EXPECT_FALSE(d.labels.empty());
        for (int l : d.labels) EXPECT_LT(l, 5);
    }
}

TEST(Stats, ExactValues) {
    Corpus c;
    c.labels.add("x");
    Document d1{"a", {"w", "w", "w"}, {0}};
    Document d2{"b", {"w"}, {0}};
    auto j = dataset_stats({d1, d2}, c.labels);
    EXPECT_EQ(j["doc_count"], 2);
    EXPECT_DOUBLE_EQ(j["words"]["mean"], 2.0);
    EXPECT_DOUBLE_EQ(j["words"]["median"], 2.0);
    EXPECT_EQ(j["words"]["max"], 3);
    EXPECT_DOUBLE_EQ(j["labels_per_doc_mean"], 1.0);
    EXPECT_THROW(dataset_stats({}, c.labels), ConfigError);
}

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "lmtc/matrix.hpp"
#include "lmtc/rng.hpp"
#include "lmtc/tape.hpp"

using lmtc::Matrix;
using lmtc::Parameter;
using lmtc::Rng;
using lmtc::Tape;

namespace {

Matrix<double> random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
    Matrix<double> m(r, c);
    for (auto& x : m.v) x = (rng.next_double() * 2.0 - 1.0) * scale;
    return m;
}

}  // namespace

TEST(Matmul, IdentityAndHandProduct) {
    Matrix<float> eye{{1.f, 0.f}, {0.f, 1.f}};
    Matrix<float> a{{1.f, 2.f}, {3.f, 4.f}};
    auto c = lmtc::matmul(eye, a);
    EXPECT_EQ(c.v, a.v);

    Matrix<float> row{{3.f, 4.f}};
    Matrix<float> col{{1.f, 2.f}};  // used as 1x2; transpose to get 2x1
    auto prod = lmtc::matmul(Matrix<float>{{1.f, 2.f}}, lmtc::transposed(row));
    ASSERT_EQ(prod.rows, 1);
    ASSERT_EQ(prod.cols, 1);
    EXPECT_FLOAT_EQ(prod.v[0], 11.f);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    Matrix<float> a(2, 3), b(4, 2);
    try {
        lmtc::matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const lmtc::ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
        EXPECT_NE(msg.find("4x2"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    Parameter<double> a("a", random_matrix(3, 4, rng));
    Parameter<double> b("b", random_matrix(4, 2, rng));
    auto f = [&](bool do_backward) {
        Tape<double> tape;
        auto c = tape.matmul(tape.leaf(a), tape.leaf(b));
        auto loss = tape.mean_all(tape.tanh_op(c));
        if (do_backward) {
            tape.backward(loss);
            tape.harvest_param_grads();
        }
        return tape.val(loss).v[0];
    };
    auto rep = gradcheck::check({&a, &b}, f);
    EXPECT_LT(rep.max_rel_err, 1e-5) << rep.worst;
}

TEST(SoftmaxRows, UniformAndStability) {
    Tape<float> tape;
    auto z = tape.constant(Matrix<float>(1, 4));
    auto y = tape.softmax_rows(z);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(tape.val(y).at(0, j), 0.25f, 1e-7f);

    Tape<float> tape2;
    auto big = tape2.constant(Matrix<float>{{1000.f, 0.f}});
    auto y2 = tape2.softmax_rows(big);
    EXPECT_NEAR(tape2.val(y2).at(0, 0), 1.0f, 1e-6f);
    EXPECT_NEAR(tape2.val(y2).at(0, 1), 0.0f, 1e-6f);
    EXPECT_TRUE(tape2.val(y2).all_finite());
}

TEST(SoftmaxRows, RowsSumToOne) {
    Rng rng(3);
    Tape<double> tape;
    Matrix<double> x = random_matrix(5, 7, rng, 1e4);  // includes large magnitudes
    auto y = tape.softmax_rows(tape.constant(x));
    for (int i = 0; i < 5; ++i) {
        double sum = 0;
        for (int j = 0; j < 7; ++j) {
            double p = tape.val(y).at(i, j);
            EXPECT_GE(p, 0.0);
            sum += p;
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Elementwise, KnownPoints) {
    Tape<float> tape;
    auto z = tape.constant(Matrix<float>(1, 1));
    EXPECT_FLOAT_EQ(tape.val(tape.tanh_op(z)).v[0], 0.f);
    EXPECT_FLOAT_EQ(tape.val(tape.sigmoid_op(z)).v[0], 0.5f);
    EXPECT_FLOAT_EQ(tape.val(tape.gelu_op(z)).v[0], 0.f);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
    Tape<float> tape;
    Parameter<float> gain("g", Matrix<float>(1, 4, 1.f));
    Parameter<float> bias("b", Matrix<float>(1, 4, 0.f));
    auto x = tape.constant(Matrix<float>(2, 4, 3.7f));
    auto y = tape.layer_norm(x, tape.leaf(gain), tape.leaf(bias));
    for (float v : tape.val(y).v) EXPECT_FLOAT_EQ(v, 0.f);
}

TEST(Composite, SigmoidTanhGradient) {
    Rng rng(11);
    Parameter<double> w("W", random_matrix(3, 3, rng));
    Parameter<double> x("x", random_matrix(3, 2, rng));
    auto f = [&](bool do_backward) {
        Tape<double> tape;
        auto y = tape.sigmoid_op(tape.tanh_op(tape.matmul(tape.leaf(w), tape.leaf(x))));
        auto loss = tape.mean_all(y);
        if (do_backward) {
            tape.backward(loss);
            tape.harvest_param_grads();
        }
        return tape.val(loss).v[0];
    };
    auto rep = gradcheck::check({&w, &x}, f);
    EXPECT_LT(rep.max_rel_err, 1e-5) << rep.worst;
}

TEST(Backward, RejectsNonScalar) {
    Tape<float> tape;
    auto x = tape.constant(Matrix<float>(2, 2, 1.f));
    EXPECT_THROW(tape.backward(x), lmtc::ContractError);
}

TEST(Backward, UnreachableParamGradStaysZero) {
    Parameter<double> used("used", Matrix<double>(1, 2, 0.5));
    Parameter<double> unused("unused", Matrix<double>(1, 2, 0.5));
    Tape<double> tape;
    auto loss = tape.mean_all(tape.leaf(used));
    tape.leaf(unused);  // on the tape but not connected to the loss
    tape.backward(loss);
    tape.harvest_param_grads();
    for (double g : unused.grad.v) EXPECT_EQ(g, 0.0);
    for (double g : used.grad.v) EXPECT_NE(g, 0.0);
}

TEST(EmbeddingLookup, IndexError) {
    Tape<float> tape;
    Parameter<float> table("emb", Matrix<float>(5, 3, 0.1f));
    EXPECT_THROW(tape.embedding_lookup(tape.leaf(table), {0, 5}), lmtc::IndexError);
}

// Every primitive's analytic gradient vs central differences over >= 20
// random instances, 64-bit, rel err floor 1e-8.
TEST(AllPrimitives, GradientProperty) {
    Rng rng(1234);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = rng.next_int(1, 4), k = rng.next_int(1, 4), n = rng.next_int(1, 4);
        Parameter<double> a("a", random_matrix(m, k, rng));
        Parameter<double> b("b", random_matrix(k, n, rng));
        Parameter<double> c("c", random_matrix(m, n, rng));
        Parameter<double> rowb("rowb", random_matrix(1, n, rng));
        Parameter<double> gain("gain", random_matrix(1, k, rng, 0.5));
        Parameter<double> bias("bias", random_matrix(1, k, rng, 0.5));
        Parameter<double> sq("sq", random_matrix(n, m, rng));
        std::vector<int> ids;
        for (int i = 0; i < n; ++i) ids.push_back(rng.next_int(0, m - 1));

        auto f = [&](bool do_backward) {
            Tape<double> tape;
            auto A = tape.leaf(a), B = tape.leaf(b), C = tape.leaf(c);
            auto mm = tape.matmul(A, B);                       // m x n
            auto t1 = tape.tanh_op(mm);
            auto s1 = tape.sigmoid_op(tape.add(t1, C));
            auto g1 = tape.gelu_op(tape.scale(s1, 0.7));
            auto r1 = tape.add_row_broadcast(g1, tape.leaf(rowb));
            auto sm = tape.softmax_rows(r1);
            auto emb = tape.embedding_lookup(C, ids);          // n x ... wait C is m x n
            auto ln = tape.layer_norm(tape.leaf(a), tape.leaf(gain), tape.leaf(bias));
            auto tr = tape.transpose(sm);                      // n x m
            auto mx = tape.elem_max(tr, tape.leaf(sq));        // n x m
            auto dg = tape.diag_mm(mm, tape.transpose(mm));    // m x 1
            auto slices = tape.vstack({tape.row_slice(mx, 0, 1), mx});
            auto h = tape.hstack({tape.col_slice(slices, 0, 1), slices});
            auto total = tape.add(tape.add(tape.mean_all(h), tape.mean_all(ln)),
                                  tape.add(tape.mean_all(dg), tape.mean_all(emb)));
            if (do_backward) {
                tape.backward(total);
                tape.harvest_param_grads();
            }
            return tape.val(total).v[0];
        };
        auto rep = gradcheck::check({&a, &b, &c, &rowb, &gain, &bias, &sq}, f);
        EXPECT_LT(rep.max_rel_err, 1e-5) << "trial " << trial << " worst " << rep.worst;
    }
}

TEST(DiagMm, MatchesFullProductDiagonal) {
    Rng rng(5);
    Matrix<double> a = random_matrix(4, 3, rng);
    Matrix<double> b = random_matrix(3, 4, rng);
    Tape<double> tape;
    auto d = tape.diag_mm(tape.constant(a), tape.constant(b));
    auto full = lmtc::matmul(a, b);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(tape.val(d).at(i, 0), full.at(i, i), 1e-12);
}

TEST(Bce, GradientMatchesFiniteDifferences) {
    Rng rng(9);
    Parameter<double> logits("z", random_matrix(5, 1, rng));
    Matrix<double> y(5, 1);
    for (auto& v : y.v) v = rng.next_bernoulli(0.4) ? 1.0 : 0.0;
    auto f = [&](bool do_backward) {
        Tape<double> tape;
        auto p = tape.sigmoid_op(tape.leaf(logits));
        auto loss = tape.bce(p, y);
        if (do_backward) {
            tape.backward(loss);
            tape.harvest_param_grads();
        }
        return tape.val(loss).v[0];
    };
    auto rep = gradcheck::check({&logits}, f);
    EXPECT_LT(rep.max_rel_err, 1e-5) << rep.worst;
}

TEST(SoftmaxXent, GradientAndUniformValue) {
    Rng rng(13);
    Parameter<double> logits("z", random_matrix(4, 6, rng));
    std::vector<int> targets = {1, 5, 0, 3};
    std::vector<uint8_t> selected = {1, 0, 1, 1};
    auto f = [&](bool do_backward) {
        Tape<double> tape;
        auto loss = tape.softmax_xent_rows(tape.leaf(logits), targets, selected);
        if (do_backward) {
            tape.backward(loss);
            tape.harvest_param_grads();
        }
        return tape.val(loss).v[0];
    };
    auto rep = gradcheck::check({&logits}, f);
    EXPECT_LT(rep.max_rel_err, 1e-5) << rep.worst;

    // uniform logits -> loss == ln(num_classes)
    Tape<double> tape;
    auto loss = tape.softmax_xent_rows(tape.constant(Matrix<double>(3, 8)), {0, 1, 2}, {1, 1, 1});
    EXPECT_NEAR(tape.val(loss).v[0], std::log(8.0), 1e-12);
}

TEST(Forward, ReplayDeterminism) {
    Rng rng(21);
    Matrix<float> a = random_matrix(6, 6, rng).cast<float>();
    auto run = [&]() {
        Tape<float> tape;
        auto x = tape.constant(a);
        auto y = tape.softmax_rows(tape.tanh_op(tape.matmul(x, x)));
        return tape.val(y).v;
    };
    EXPECT_EQ(run(), run());
}

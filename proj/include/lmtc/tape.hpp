#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lmtc/matrix.hpp"
#include "lmtc/rng.hpp"

namespace lmtc {

/// Numerically stable logistic function.
template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

/// Trainable weight: value plus an accumulated gradient of the same shape.
/// The gradient is zeroed by the optimizer at the start of each step.
template <typename T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    Matrix<T> grad;
    bool no_decay = false;  // biases and layer-norm gains skip weight decay

    Parameter() = default;
    Parameter(std::string n, Matrix<T> v, bool nd = false)
        : name(std::move(n)), value(std::move(v)), grad(value.rows, value.cols), no_decay(nd) {}

    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), T(0)); }
};

namespace detail {

// C += A * B^T   (A: m x k, B: n x k, C: m x n)
template <typename T>
void matmul_nt_acc(Matrix<T>& c, const Matrix<T>& a, const Matrix<T>& b) {
    for (int i = 0; i < a.rows; ++i) {
        const T* arow = a.row_ptr(i);
        T* crow = c.row_ptr(i);
        for (int j = 0; j < b.rows; ++j) {
            const T* brow = b.row_ptr(j);
            T acc = T(0);
            for (int p = 0; p < a.cols; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C += A^T * B   (A: m x k, B: m x n, C: k x n)
template <typename T>
void matmul_tn_acc(Matrix<T>& c, const Matrix<T>& a, const Matrix<T>& b) {
    for (int p = 0; p < a.rows; ++p) {
        const T* arow = a.row_ptr(p);
        const T* brow = b.row_ptr(p);
        for (int i = 0; i < a.cols; ++i) {
            const T aip = arow[i];
            if (aip == T(0)) continue;
            T* crow = c.row_ptr(i);
            for (int j = 0; j < b.cols; ++j) crow[j] += aip * brow[j];
        }
    }
}

}  // namespace detail

/// Reverse-mode tape over Matrix values. Execution order is recorded once
/// during the forward pass; backward() replays it in exact reverse order.
/// One tape serves one forward/backward pass and is then discarded.
template <typename T>
class Tape {
public:
    using Id = int32_t;

    // ---- graph construction -------------------------------------------

    /// Registers a parameter as a graph leaf. Repeated calls with the same
    /// parameter return the same node, so its gradient accumulates once.
    Id leaf(Parameter<T>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return it->second;
        Id id = new_node();
        nodes_[id].external = &p.value;
        nodes_[id].param = &p;
        param_nodes_.emplace(&p, id);
        return id;
    }

    /// A value that participates in the forward pass but receives no
    /// gradient of interest (masks, targets, fixed inputs).
    Id constant(Matrix<T> m) {
        Id id = new_node();
        nodes_[id].value = std::move(m);
        return id;
    }

    const Matrix<T>& val(Id id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }
    Matrix<T>& grad(Id id) { return nodes_[id].grad; }

    // ---- primitive operations ------------------------------------------

    Id matmul(Id a, Id b) {
        const Matrix<T>&A = val(a), &B = val(b);
        if (A.cols != B.rows)
            throw ShapeError("matmul shape mismatch: " + A.shape_str() + " * " + B.shape_str());
        Id out = push(lmtc::matmul(A, B), [this, a, b](Id o) {
            detail::matmul_nt_acc(grad(a), nodes_[o].grad, val(b));  // dA += dC * B^T
            detail::matmul_tn_acc(grad(b), val(a), nodes_[o].grad);  // dB += A^T * dC
        });
        return out;
    }

    Id transpose(Id a) {
        return push(transposed(val(a)), [this, a](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            Matrix<T>& da = grad(a);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) da.at(j, i) += g.at(i, j);
        });
    }

    Id add(Id a, Id b) {
        const Matrix<T>&A = val(a), &B = val(b);
        if (!A.same_shape(B))
            throw ShapeError("add shape mismatch: " + A.shape_str() + " + " + B.shape_str());
        Matrix<T> out = A;
        add_inplace(out, B);
        return push(std::move(out), [this, a, b](Id o) {
            add_inplace(grad(a), nodes_[o].grad);
            add_inplace(grad(b), nodes_[o].grad);
        });
    }

    /// out[i,j] = a[i,j] + bias[0,j]; bias broadcast over rows.
    Id add_row_broadcast(Id a, Id bias) {
        const Matrix<T>&A = val(a), &B = val(bias);
        if (B.rows != 1 || B.cols != A.cols)
            throw ShapeError("row-broadcast bias must be 1x" + std::to_string(A.cols) +
                             ", got " + B.shape_str());
        Matrix<T> out = A;
        for (int i = 0; i < out.rows; ++i) {
            T* row = out.row_ptr(i);
            for (int j = 0; j < out.cols; ++j) row[j] += B.v[j];
        }
        return push(std::move(out), [this, a, bias](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            add_inplace(grad(a), g);
            Matrix<T>& db = grad(bias);
            for (int i = 0; i < g.rows; ++i) {
                const T* row = g.row_ptr(i);
                for (int j = 0; j < g.cols; ++j) db.v[j] += row[j];
            }
        });
    }

    /// out[i,j] = a[i,j] + bias[i,0]; bias broadcast over columns.
    Id add_col_broadcast(Id a, Id bias) {
        const Matrix<T>&A = val(a), &B = val(bias);
        if (B.cols != 1 || B.rows != A.rows)
            throw ShapeError("col-broadcast bias must be " + std::to_string(A.rows) +
                             "x1, got " + B.shape_str());
        Matrix<T> out = A;
        for (int i = 0; i < out.rows; ++i) {
            T* row = out.row_ptr(i);
            const T b = B.v[static_cast<size_t>(i)];
            for (int j = 0; j < out.cols; ++j) row[j] += b;
        }
        return push(std::move(out), [this, a, bias](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            add_inplace(grad(a), g);
            Matrix<T>& db = grad(bias);
            for (int i = 0; i < g.rows; ++i) {
                const T* row = g.row_ptr(i);
                for (int j = 0; j < g.cols; ++j) db.v[static_cast<size_t>(i)] += row[j];
            }
        });
    }

    Id scale(Id a, T s) {
        Matrix<T> out = val(a);
        for (T& x : out.v) x *= s;
        return push(std::move(out), [this, a, s](Id o) {
            add_inplace(grad(a), nodes_[o].grad, s);
        });
    }

    Id tanh_op(Id a) {
        Matrix<T> out = val(a);
        for (T& x : out.v) x = std::tanh(x);
        return push(std::move(out), [this, a](Id o) {
            const Matrix<T>&g = nodes_[o].grad, &y = nodes_[o].value;
            Matrix<T>& da = grad(a);
            for (size_t i = 0; i < g.v.size(); ++i) da.v[i] += g.v[i] * (T(1) - y.v[i] * y.v[i]);
        });
    }

    Id sigmoid_op(Id a) {
        Matrix<T> out = val(a);
        for (T& x : out.v) x = sigmoid_scalar(x);
        return push(std::move(out), [this, a](Id o) {
            const Matrix<T>&g = nodes_[o].grad, &y = nodes_[o].value;
            Matrix<T>& da = grad(a);
            for (size_t i = 0; i < g.v.size(); ++i) da.v[i] += g.v[i] * y.v[i] * (T(1) - y.v[i]);
        });
    }

    /// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
    Id gelu_op(Id a) {
        const Matrix<T>& A = val(a);
        Matrix<T> out(A.rows, A.cols);
        for (size_t i = 0; i < A.v.size(); ++i) {
            const T x = A.v[i];
            out.v[i] = T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475)));
        }
        return push(std::move(out), [this, a](Id o) {
            const Matrix<T>&g = nodes_[o].grad, &x = val(a);
            Matrix<T>& da = grad(a);
            for (size_t i = 0; i < g.v.size(); ++i) {
                const T xi = x.v[i];
                const T cdf = T(0.5) * (T(1) + std::erf(xi * T(0.7071067811865475)));
                const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * xi * xi);
                da.v[i] += g.v[i] * (cdf + xi * pdf);
            }
        });
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    Id softmax_rows(Id a) {
        const Matrix<T>& A = val(a);
        Matrix<T> out(A.rows, A.cols);
        for (int i = 0; i < A.rows; ++i) {
            const T* row = A.row_ptr(i);
            T* orow = out.row_ptr(i);
            T mx = row[0];
            for (int j = 1; j < A.cols; ++j) mx = std::max(mx, row[j]);
            T sum = T(0);
            for (int j = 0; j < A.cols; ++j) {
                orow[j] = std::exp(row[j] - mx);
                sum += orow[j];
            }
            const T inv = T(1) / sum;
            for (int j = 0; j < A.cols; ++j) orow[j] *= inv;
        }
        return push(std::move(out), [this, a](Id o) {
            const Matrix<T>&g = nodes_[o].grad, &y = nodes_[o].value;
            Matrix<T>& da = grad(a);
            for (int i = 0; i < g.rows; ++i) {
                const T *grow = g.row_ptr(i), *yrow = y.row_ptr(i);
                T dot = T(0);
                for (int j = 0; j < g.cols; ++j) dot += grow[j] * yrow[j];
                T* darow = da.row_ptr(i);
                for (int j = 0; j < g.cols; ++j) darow[j] += yrow[j] * (grow[j] - dot);
            }
        });
    }

    /// Row-wise layer norm over the feature (column) dimension with learned
    /// gain/bias (1 x d each), eps = 1e-5. A zero-variance row normalizes to
    /// zeros because the variance is floored by eps.
    Id layer_norm(Id x, Id gain, Id bias) {
        const Matrix<T>& X = val(x);
        const Matrix<T>&G = val(gain), &B = val(bias);
        if (G.rows != 1 || G.cols != X.cols || B.rows != 1 || B.cols != X.cols)
            throw ShapeError("layer_norm gain/bias must be 1x" + std::to_string(X.cols));
        const T eps = T(1e-5);
        Matrix<T> out(X.rows, X.cols);
        Matrix<T> xhat(X.rows, X.cols);
        std::vector<T> inv_std(static_cast<size_t>(X.rows));
        const T invn = T(1) / T(X.cols);
        for (int i = 0; i < X.rows; ++i) {
            const T* row = X.row_ptr(i);
            T mean = T(0);
            for (int j = 0; j < X.cols; ++j) mean += row[j];
            mean *= invn;
            T var = T(0);
            for (int j = 0; j < X.cols; ++j) {
                const T d = row[j] - mean;
                var += d * d;
            }
            var *= invn;
            const T inv = T(1) / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(i)] = inv;
            T* xh = xhat.row_ptr(i);
            T* orow = out.row_ptr(i);
            for (int j = 0; j < X.cols; ++j) {
                xh[j] = (row[j] - mean) * inv;
                orow[j] = xh[j] * G.v[j] + B.v[j];
            }
        }
        Id out_id = push(std::move(out),
                         [this, x, gain, bias, xh = std::move(xhat),
                          istd = std::move(inv_std)](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            const Matrix<T>& G = val(gain);
            Matrix<T>& dx = grad(x);
            Matrix<T>& dg = grad(gain);
            Matrix<T>& db = grad(bias);
            const T invn = T(1) / T(g.cols);
            for (int i = 0; i < g.rows; ++i) {
                const T *grow = g.row_ptr(i), *xrow = xh.row_ptr(i);
                T sum_dxh = T(0), sum_dxh_xh = T(0);
                for (int j = 0; j < g.cols; ++j) {
                    const T dxh = grow[j] * G.v[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xrow[j];
                    dg.v[j] += grow[j] * xrow[j];
                    db.v[j] += grow[j];
                }
                T* dxrow = dx.row_ptr(i);
                const T inv = istd[static_cast<size_t>(i)];
                for (int j = 0; j < g.cols; ++j) {
                    const T dxh = grow[j] * G.v[j];
                    dxrow[j] += inv * (dxh - invn * sum_dxh - xrow[j] * invn * sum_dxh_xh);
                }
            }
        });
        return out_id;
    }

    /// out row i = table row ids[i]. Gradient scatters back into the table.
    Id embedding_lookup(Id table, std::vector<int> ids) {
        const Matrix<T>& Tab = val(table);
        Matrix<T> out(static_cast<int>(ids.size()), Tab.cols);
        for (size_t i = 0; i < ids.size(); ++i) {
            const int id = ids[i];
            if (id < 0 || id >= Tab.rows)
                throw IndexError("embedding_lookup: id " + std::to_string(id) +
                                 " out of range [0, " + std::to_string(Tab.rows) + ")");
            std::copy_n(Tab.row_ptr(id), Tab.cols, out.row_ptr(static_cast<int>(i)));
        }
        return push(std::move(out), [this, table, ids = std::move(ids)](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            Matrix<T>& dt = grad(table);
            for (size_t i = 0; i < ids.size(); ++i) {
                const T* grow = g.row_ptr(static_cast<int>(i));
                T* trow = dt.row_ptr(ids[i]);
                for (int j = 0; j < g.cols; ++j) trow[j] += grow[j];
            }
        });
    }

    Id row_slice(Id a, int r0, int r1) {
        const Matrix<T>& A = val(a);
        if (r0 < 0 || r1 > A.rows || r0 >= r1)
            throw ShapeError("row_slice [" + std::to_string(r0) + "," + std::to_string(r1) +
                             ") of " + A.shape_str());
        Matrix<T> out(r1 - r0, A.cols);
        std::copy_n(A.row_ptr(r0), static_cast<size_t>(r1 - r0) * A.cols, out.v.data());
        return push(std::move(out), [this, a, r0](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            Matrix<T>& da = grad(a);
            for (int i = 0; i < g.rows; ++i) {
                const T* grow = g.row_ptr(i);
                T* darow = da.row_ptr(r0 + i);
                for (int j = 0; j < g.cols; ++j) darow[j] += grow[j];
            }
        });
    }

    Id col_slice(Id a, int c0, int c1) {
        const Matrix<T>& A = val(a);
        if (c0 < 0 || c1 > A.cols || c0 >= c1)
            throw ShapeError("col_slice [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") of " + A.shape_str());
        Matrix<T> out(A.rows, c1 - c0);
        for (int i = 0; i < A.rows; ++i)
            std::copy_n(A.row_ptr(i) + c0, c1 - c0, out.row_ptr(i));
        return push(std::move(out), [this, a, c0](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            Matrix<T>& da = grad(a);
            for (int i = 0; i < g.rows; ++i) {
                const T* grow = g.row_ptr(i);
                T* darow = da.row_ptr(i) + c0;
                for (int j = 0; j < g.cols; ++j) darow[j] += grow[j];
            }
        });
    }

    /// Concatenate along rows (all inputs share the column count).
    Id vstack(const std::vector<Id>& parts) {
        if (parts.empty()) throw ContractError("vstack of zero parts");
        int rows = 0;
        const int cols = val(parts[0]).cols;
        for (Id p : parts) {
            if (val(p).cols != cols) throw ShapeError("vstack column mismatch");
            rows += val(p).rows;
        }
        Matrix<T> out(rows, cols);
        int r = 0;
        for (Id p : parts) {
            const Matrix<T>& P = val(p);
            std::copy_n(P.v.data(), P.v.size(), out.row_ptr(r));
            r += P.rows;
        }
        return push(std::move(out), [this, parts](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            int r = 0;
            for (Id p : parts) {
                Matrix<T>& dp = grad(p);
                for (int i = 0; i < dp.rows; ++i) {
                    const T* grow = g.row_ptr(r + i);
                    T* drow = dp.row_ptr(i);
                    for (int j = 0; j < g.cols; ++j) drow[j] += grow[j];
                }
                r += dp.rows;
            }
        });
    }

    /// Concatenate along columns (all inputs share the row count).
    Id hstack(const std::vector<Id>& parts) {
        if (parts.empty()) throw ContractError("hstack of zero parts");
        int cols = 0;
        const int rows = val(parts[0]).rows;
        for (Id p : parts) {
            if (val(p).rows != rows) throw ShapeError("hstack row mismatch");
            cols += val(p).cols;
        }
        Matrix<T> out(rows, cols);
        int c = 0;
        for (Id p : parts) {
            const Matrix<T>& P = val(p);
            for (int i = 0; i < rows; ++i)
                std::copy_n(P.row_ptr(i), P.cols, out.row_ptr(i) + c);
            c += P.cols;
        }
        return push(std::move(out), [this, parts](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            int c = 0;
            for (Id p : parts) {
                Matrix<T>& dp = grad(p);
                for (int i = 0; i < dp.rows; ++i) {
                    const T* grow = g.row_ptr(i) + c;
                    T* drow = dp.row_ptr(i);
                    for (int j = 0; j < dp.cols; ++j) drow[j] += grow[j];
                }
                c += dp.cols;
            }
        });
    }

    /// out[i,0] = <row i of a, column i of b>  (the diagonal of a*b without
    /// forming the full product; this is the per-label inner product).
    Id diag_mm(Id a, Id b) {
        const Matrix<T>&A = val(a), &B = val(b);
        if (A.cols != B.rows || A.rows != B.cols)
            throw ShapeError("diag_mm shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
        Matrix<T> out(A.rows, 1);
        for (int i = 0; i < A.rows; ++i) {
            const T* arow = A.row_ptr(i);
            T acc = T(0);
            for (int k = 0; k < A.cols; ++k) acc += arow[k] * B.at(k, i);
            out.v[static_cast<size_t>(i)] = acc;
        }
        return push(std::move(out), [this, a, b](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            const Matrix<T>&A = val(a), &B = val(b);
            Matrix<T>&da = grad(a), &db = grad(b);
            for (int i = 0; i < A.rows; ++i) {
                const T gi = g.v[static_cast<size_t>(i)];
                const T* arow = A.row_ptr(i);
                T* darow = da.row_ptr(i);
                for (int k = 0; k < A.cols; ++k) {
                    darow[k] += gi * B.at(k, i);
                    db.at(k, i) += gi * arow[k];
                }
            }
        });
    }

    /// Elementwise max; ties route the gradient to the first input.
    Id elem_max(Id a, Id b) {
        const Matrix<T>&A = val(a), &B = val(b);
        if (!A.same_shape(B))
            throw ShapeError("elem_max shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
        Matrix<T> out(A.rows, A.cols);
        for (size_t i = 0; i < A.v.size(); ++i) out.v[i] = std::max(A.v[i], B.v[i]);
        return push(std::move(out), [this, a, b](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            const Matrix<T>&A = val(a), &B = val(b);
            Matrix<T>&da = grad(a), &db = grad(b);
            for (size_t i = 0; i < g.v.size(); ++i) {
                if (A.v[i] >= B.v[i])
                    da.v[i] += g.v[i];
                else
                    db.v[i] += g.v[i];
            }
        });
    }

    Id mean_all(Id a) {
        const Matrix<T>& A = val(a);
        T sum = T(0);
        for (T x : A.v) sum += x;
        Matrix<T> out(1, 1);
        out.v[0] = sum / T(A.v.size());
        return push(std::move(out), [this, a](Id o) {
            const T g = nodes_[o].grad.v[0] / T(val(a).v.size());
            Matrix<T>& da = grad(a);
            for (T& x : da.v) x += g;
        });
    }

    /// Inverted-scale dropout; the mask is drawn here so a seeded Rng makes
    /// the whole step reproducible. rate == 0 is an identity pass-through.
    Id dropout(Id a, double rate, Rng& rng) {
        if (rate <= 0.0) return a;
        const Matrix<T>& A = val(a);
        Matrix<T> mask(A.rows, A.cols);
        const T keep_scale = T(1.0 / (1.0 - rate));
        for (size_t i = 0; i < mask.v.size(); ++i)
            mask.v[i] = rng.next_bernoulli(rate) ? T(0) : keep_scale;
        Matrix<T> out(A.rows, A.cols);
        for (size_t i = 0; i < A.v.size(); ++i) out.v[i] = A.v[i] * mask.v[i];
        return push(std::move(out), [this, a, m = std::move(mask)](Id o) {
            const Matrix<T>& g = nodes_[o].grad;
            Matrix<T>& da = grad(a);
            for (size_t i = 0; i < g.v.size(); ++i) da.v[i] += g.v[i] * m.v[i];
        });
    }

    /// Mean binary cross-entropy between predicted probabilities and 0/1
    /// targets, probabilities clamped to [1e-7, 1 - 1e-7] before the logs.
    Id bce(Id probs, const Matrix<T>& targets) {
        const Matrix<T>& P = val(probs);
        if (!P.same_shape(targets))
            throw ShapeError("bce target shape " + targets.shape_str() + " vs prediction " +
                             P.shape_str());
        const T lo = T(1e-7), hi = T(1) - T(1e-7);
        T sum = T(0);
        for (size_t i = 0; i < P.v.size(); ++i) {
            const T p = std::min(hi, std::max(lo, P.v[i]));
            const T y = targets.v[i];
            sum -= y * std::log(p) + (T(1) - y) * std::log(T(1) - p);
        }
        Matrix<T> out(1, 1);
        out.v[0] = sum / T(P.v.size());
        return push(std::move(out), [this, probs, targets](Id o) {
            const T g = nodes_[o].grad.v[0] / T(targets.v.size());
            const Matrix<T>& P = val(probs);
            Matrix<T>& dp = grad(probs);
            const T lo = T(1e-7), hi = T(1) - T(1e-7);
            for (size_t i = 0; i < P.v.size(); ++i) {
                const T p = P.v[i];
                if (p <= lo || p >= hi) continue;  // clamped region: flat
                dp.v[i] += g * (p - targets.v[i]) / (p * (T(1) - p));
            }
        });
    }

    /// Mean softmax cross-entropy over the selected rows of a logits matrix
    /// (row r scored against targets[r]). Rows with selected[r] == false are
    /// ignored. Precondition: at least one selected row.
    Id softmax_xent_rows(Id logits, std::vector<int> targets, std::vector<uint8_t> selected) {
        const Matrix<T>& L = val(logits);
        if (static_cast<int>(targets.size()) != L.rows ||
            static_cast<int>(selected.size()) != L.rows)
            throw ShapeError("softmax_xent_rows: target count != row count");
        int n_sel = 0;
        T sum = T(0);
        for (int r = 0; r < L.rows; ++r) {
            if (!selected[static_cast<size_t>(r)]) continue;
            ++n_sel;
            const T* row = L.row_ptr(r);
            T mx = row[0];
            for (int j = 1; j < L.cols; ++j) mx = std::max(mx, row[j]);
            T se = T(0);
            for (int j = 0; j < L.cols; ++j) se += std::exp(row[j] - mx);
            sum += std::log(se) + mx - row[targets[static_cast<size_t>(r)]];
        }
        if (n_sel == 0) throw ContractError("softmax_xent_rows: no selected rows");
        Matrix<T> out(1, 1);
        out.v[0] = sum / T(n_sel);
        return push(std::move(out),
                    [this, logits, targets = std::move(targets), selected = std::move(selected),
                     n_sel](Id o) {
            const T g = nodes_[o].grad.v[0] / T(n_sel);
            const Matrix<T>& L = val(logits);
            Matrix<T>& dl = grad(logits);
            for (int r = 0; r < L.rows; ++r) {
                if (!selected[static_cast<size_t>(r)]) continue;
                const T* row = L.row_ptr(r);
                T mx = row[0];
                for (int j = 1; j < L.cols; ++j) mx = std::max(mx, row[j]);
                T se = T(0);
                for (int j = 0; j < L.cols; ++j) se += std::exp(row[j] - mx);
                const T inv = T(1) / se;
                T* drow = dl.row_ptr(r);
                for (int j = 0; j < L.cols; ++j) drow[j] += g * std::exp(row[j] - mx) * inv;
                drow[targets[static_cast<size_t>(r)]] -= g;
            }
        });
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of every node reachable from `loss_id`, which
    /// must be a 1x1 scalar. Leaf gradients stay on the tape; call
    /// harvest_param_grads to fold them into the bound Parameters.
    void backward(Id loss_id) {
        const Matrix<T>& loss = val(loss_id);
        if (loss.rows != 1 || loss.cols != 1)
            throw ContractError("backward: loss must be a 1x1 scalar, got " + loss.shape_str());
        for (Node& n : nodes_) {
            const Matrix<T>& v = n.external ? *n.external : n.value;
            n.grad = Matrix<T>(v.rows, v.cols);
        }
        nodes_[loss_id].grad.v[0] = T(1);
        for (Id i = static_cast<Id>(nodes_.size()) - 1; i >= 0; --i)
            if (nodes_[i].backprop) nodes_[i].backprop(i);
    }

    /// Adds scale * (tape leaf gradient) into each bound Parameter's grad.
    void harvest_param_grads(T scale = T(1)) {
        for (auto& [param, id] : param_nodes_) {
            if (nodes_[id].grad.v.empty()) continue;
            add_inplace(param->grad, nodes_[id].grad, scale);
        }
    }

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Matrix<T> value;
        const Matrix<T>* external = nullptr;  // set for parameter leaves
        Matrix<T> grad;
        Parameter<T>* param = nullptr;
        std::function<void(Id)> backprop;
    };

    Id new_node() {
        nodes_.emplace_back();
        return static_cast<Id>(nodes_.size() - 1);
    }

    template <typename F>
    Id push(Matrix<T> value, F&& back) {
        Id id = new_node();
        nodes_[id].value = std::move(value);
        nodes_[id].backprop = std::forward<F>(back);
        return id;
    }

    std::vector<Node> nodes_;
    std::unordered_map<Parameter<T>*, Id> param_nodes_;
};

}  // namespace lmtc

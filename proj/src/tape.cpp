#include "mbgmn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace mbgmn::ad {

namespace {

enum class Broadcast { Same, Scalar, Column, Row };

Broadcast classify(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) return Broadcast::Same;
    if (b.size() == 1) return Broadcast::Scalar;
    if (b.shape().size() == 2 && b.cols() == 1 && b.rows() == a.rows() &&
        a.shape().size() == 2)
        return Broadcast::Column;
    if (b.last_dim() == a.cols() && b.size() == a.cols() && a.shape().size() == 2)
        return Broadcast::Row;
    throw std::invalid_argument("shapes not broadcast-compatible: " +
                                Tensor::shape_str(a.shape()) + " vs " +
                                Tensor::shape_str(b.shape()));
}

std::size_t bindex(Broadcast bc, std::size_t i, std::size_t cols) {
    switch (bc) {
        case Broadcast::Same: return i;
        case Broadcast::Scalar: return 0;
        case Broadcast::Column: return i / cols;
        case Broadcast::Row: return i % cols;
    }
    return 0;
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad,
               std::function<void(Tape&, const Tensor&)> backprop) {
    if (backward_done_)
        throw std::logic_error("tape already consumed by backward");
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(backprop)});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Var v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
        throw std::out_of_range("invalid tape node id");
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
    return const_cast<Tape*>(this)->node(v);
}

void Tape::accumulate(Var v, const Tensor& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::accumulate_at(Var v, std::size_t i, double g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
    n.grad[i] += g;
}

Var Tape::constant(Tensor value) { return push(std::move(value), false); }
Var Tape::leaf(Tensor value) { return push(std::move(value), true); }

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) {
        static thread_local Tensor zero;
        zero = Tensor(n.value.shape());
        return zero;
    }
    return n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Var Tape::matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.cols() != B.rows())
        throw std::invalid_argument("matmul dimension mismatch: " +
                                    Tensor::shape_str(A.shape()) + " vs " +
                                    Tensor::shape_str(B.shape()));
    const std::size_t m = A.rows(), n = A.cols(), p = B.cols();
    Tensor out({m, p});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = A.at(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < p; ++j) out.at(i, j) += aik * B.at(k, j);
        }
    bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, m, n, p](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(a);
        const Tensor& B = t.value(b);
        if (t.requires_grad(a)) {
            Tensor da({m, n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < p; ++j) {
                    const double gij = g.at(i, j);
                    for (std::size_t k = 0; k < n; ++k) da.at(i, k) += gij * B.at(k, j);
                }
            t.accumulate(a, da);
        }
        if (t.requires_grad(b)) {
            Tensor db({n, p});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t k = 0; k < n; ++k) {
                    const double aik = A.at(i, k);
                    if (aik == 0.0) continue;
                    for (std::size_t j = 0; j < p; ++j) db.at(k, j) += aik * g.at(i, j);
                }
            t.accumulate(b, db);
        }
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.cols() != B.cols())
        throw std::invalid_argument("matmul_nt dimension mismatch: " +
                                    Tensor::shape_str(A.shape()) + " vs " +
                                    Tensor::shape_str(B.shape()));
    const std::size_t m = A.rows(), n = A.cols(), p = B.rows();
    Tensor out({m, p});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            const double* ar = A.data() + i * n;
            const double* br = B.data() + j * n;
            for (std::size_t k = 0; k < n; ++k) acc += ar[k] * br[k];
            out.at(i, j) = acc;
        }
    bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, m, n, p](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(a);
        const Tensor& B = t.value(b);
        if (t.requires_grad(a)) {
            Tensor da({m, n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < p; ++j) {
                    const double gij = g.at(i, j);
                    if (gij == 0.0) continue;
                    for (std::size_t k = 0; k < n; ++k) da.at(i, k) += gij * B.at(j, k);
                }
            t.accumulate(a, da);
        }
        if (t.requires_grad(b)) {
            Tensor db({p, n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < p; ++j) {
                    const double gij = g.at(i, j);
                    if (gij == 0.0) continue;
                    for (std::size_t k = 0; k < n; ++k) db.at(j, k) += gij * A.at(i, k);
                }
            t.accumulate(b, db);
        }
    });
}

Var Tape::spmm(const SparseMatrix* s, Var b) {
    const Tensor& B = value(b);
    if (B.rows() != s->cols())
        throw std::invalid_argument("spmm dimension mismatch: sparse cols " +
                                    std::to_string(s->cols()) + " vs dense " +
                                    Tensor::shape_str(B.shape()));
    Tensor out;
    s->multiply(B, out);
    return push(std::move(out), requires_grad(b), [s, b](Tape& t, const Tensor& g) {
        if (!t.requires_grad(b)) return;
        // db = s^T * g, computed without materializing the transpose
        const std::size_t p = g.cols();
        Tensor db(t.value(b).shape());
        const auto& ro = s->row_offsets();
        const auto& ci = s->col_indices();
        const auto& vv = s->values();
        for (std::size_t r = 0; r < s->rows(); ++r) {
            const double* gr = g.data() + r * p;
            for (std::size_t e = ro[r]; e < ro[r + 1]; ++e) {
                double* dr = db.data() + ci[e] * p;
                const double w = vv[e];
                for (std::size_t c = 0; c < p; ++c) dr[c] += w * gr[c];
            }
        }
        t.accumulate(b, db);
    });
}

namespace {
template <typename Fwd>
Tensor broadcast_forward(const Tensor& A, const Tensor& B, Broadcast bc, Fwd fwd) {
    Tensor out(A.shape());
    const std::size_t cols = A.cols();
    for (std::size_t i = 0; i < A.size(); ++i)
        out[i] = fwd(A[i], B[bindex(bc, i, cols)]);
    return out;
}
}  // namespace

Var Tape::add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    Broadcast bc = classify(A, B);
    Tensor out = broadcast_forward(A, B, bc, [](double x, double y) { return x + y; });
    bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, bc](Tape& t, const Tensor& g) {
        if (t.requires_grad(a)) t.accumulate(a, g);
        if (t.requires_grad(b)) {
            const std::size_t cols = t.value(a).cols();
            for (std::size_t i = 0; i < g.size(); ++i)
                t.accumulate_at(b, bindex(bc, i, cols), g[i]);
        }
    });
}

Var Tape::sub(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    Broadcast bc = classify(A, B);
    Tensor out = broadcast_forward(A, B, bc, [](double x, double y) { return x - y; });
    bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, bc](Tape& t, const Tensor& g) {
        if (t.requires_grad(a)) t.accumulate(a, g);
        if (t.requires_grad(b)) {
            const std::size_t cols = t.value(a).cols();
            for (std::size_t i = 0; i < g.size(); ++i)
                t.accumulate_at(b, bindex(bc, i, cols), -g[i]);
        }
    });
}

Var Tape::mul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    Broadcast bc = classify(A, B);
    Tensor out = broadcast_forward(A, B, bc, [](double x, double y) { return x * y; });
    bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, bc](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(a);
        const Tensor& B = t.value(b);
        const std::size_t cols = A.cols();
        if (t.requires_grad(a)) {
            Tensor da(A.shape());
            for (std::size_t i = 0; i < g.size(); ++i)
                da[i] = g[i] * B[bindex(bc, i, cols)];
            t.accumulate(a, da);
        }
        if (t.requires_grad(b)) {
            for (std::size_t i = 0; i < g.size(); ++i)
                t.accumulate_at(b, bindex(bc, i, cols), g[i] * A[i]);
        }
    });
}

Var Tape::scale_shift(Var x, double mul, double shift) {
    const Tensor& X = value(x);
    Tensor out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = mul * X[i] + shift;
    return push(std::move(out), requires_grad(x), [x, mul](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        Tensor dx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = mul * g[i];
        t.accumulate(x, dx);
    });
}

Var Tape::leaky_relu(Var x, double slope) {
    const Tensor& X = value(x);
    Tensor out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i)
        out[i] = X[i] > 0.0 ? X[i] : slope * X[i];
    return push(std::move(out), requires_grad(x), [x, slope](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        const Tensor& X = t.value(x);
        Tensor dx(X.shape());
        for (std::size_t i = 0; i < X.size(); ++i)
            dx[i] = g[i] * (X[i] > 0.0 ? 1.0 : slope);
        t.accumulate(x, dx);
    });
}

Var Tape::concat_last(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat of zero parts");
    const Tensor& first = value(parts[0]);
    const std::size_t rank = first.shape().size();
    const std::size_t rows = rank == 2 ? first.rows() : 1;
    std::size_t total = 0;
    bool rg = false;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
        const Tensor& t = value(p);
        if (t.shape().size() != rank || (rank == 2 && t.rows() != rows))
            throw std::invalid_argument("concat operands disagree on leading shape");
        widths.push_back(t.last_dim());
        total += t.last_dim();
        rg = rg || requires_grad(p);
    }
    std::vector<std::size_t> shape = rank == 2
        ? std::vector<std::size_t>{rows, total}
        : std::vector<std::size_t>{total};
    Tensor out(shape);
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor& t = value(parts[pi]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[pi]; ++c)
                out[r * total + off + c] = t[r * widths[pi] + c];
        off += widths[pi];
    }
    std::vector<Var> owned(parts.begin(), parts.end());
    return push(std::move(out), rg,
                [owned = std::move(owned), widths, rows, total](Tape& t, const Tensor& g) {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < owned.size(); ++pi) {
            if (t.requires_grad(owned[pi])) {
                Tensor dp(t.value(owned[pi]).shape());
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < widths[pi]; ++c)
                        dp[r * widths[pi] + c] = g[r * total + off + c];
                t.accumulate(owned[pi], dp);
            }
            off += widths[pi];
        }
    });
}

Var Tape::concat_last(Var a, Var b) {
    Var parts[] = {a, b};
    return concat_last(std::span<const Var>(parts));
}

Var Tape::concat_last(Var a, Var b, Var c) {
    Var parts[] = {a, b, c};
    return concat_last(std::span<const Var>(parts));
}

Var Tape::slice_last(Var x, std::size_t lo, std::size_t hi) {
    const Tensor& X = value(x);
    const std::size_t last = X.last_dim();
    if (lo >= hi || hi > last)
        throw std::invalid_argument("slice [" + std::to_string(lo) + "," +
                                    std::to_string(hi) + ") out of range for last axis " +
                                    std::to_string(last));
    const std::size_t rank = X.shape().size();
    const std::size_t rows = rank == 2 ? X.rows() : 1;
    const std::size_t w = hi - lo;
    std::vector<std::size_t> shape = rank == 2
        ? std::vector<std::size_t>{rows, w}
        : std::vector<std::size_t>{w};
    Tensor out(shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c)
            out[r * w + c] = X[r * last + lo + c];
    return push(std::move(out), requires_grad(x),
                [x, lo, w, rows, last](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c)
                t.accumulate_at(x, r * last + lo + c, g[r * w + c]);
    });
}

Var Tape::sum_all(Var x) {
    const Tensor& X = value(x);
    double s = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) s += X[i];
    return push(Tensor({1}, {s}), requires_grad(x), [x](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        Tensor dx(t.value(x).shape(), g[0]);
        t.accumulate(x, dx);
    });
}

Var Tape::sum_axis(Var x, int axis) {
    const Tensor& X = value(x);
    if (X.shape().size() != 2) throw std::invalid_argument("sum_axis expects a 2-D tensor");
    const std::size_t n = X.rows(), m = X.cols();
    if (axis == 0) {
        Tensor out({1, m});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) out[c] += X.at(r, c);
        return push(std::move(out), requires_grad(x), [x, n, m](Tape& t, const Tensor& g) {
            if (!t.requires_grad(x)) return;
            Tensor dx({n, m});
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) dx.at(r, c) = g[c];
            t.accumulate(x, dx);
        });
    }
    if (axis == 1) {
        Tensor out({n, 1});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) out[r] += X.at(r, c);
        return push(std::move(out), requires_grad(x), [x, n, m](Tape& t, const Tensor& g) {
            if (!t.requires_grad(x)) return;
            Tensor dx({n, m});
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) dx.at(r, c) = g[r];
            t.accumulate(x, dx);
        });
    }
    throw std::invalid_argument("sum_axis axis must be 0 or 1");
}

Var Tape::softmax_last(Var x) {
    const Tensor& X = value(x);
    const std::size_t last = X.last_dim();
    if (last == 0) throw std::invalid_argument("softmax over empty axis");
    const std::size_t rows = X.size() / last;
    Tensor out(X.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = X.data() + r * last;
        double* o = out.data() + r * last;
        double mx = in[0];
        for (std::size_t c = 1; c < last; ++c) mx = std::max(mx, in[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < last; ++c) z += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < last; ++c) o[c] /= z;
    }
    Var outv = push(std::move(out), requires_grad(x), nullptr);
    node(outv).backprop = [x, outv, rows, last](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        const Tensor& Y = t.value(outv);
        Tensor dx(Y.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = Y.data() + r * last;
            const double* gr = g.data() + r * last;
            double dot = 0.0;
            for (std::size_t c = 0; c < last; ++c) dot += gr[c] * y[c];
            for (std::size_t c = 0; c < last; ++c)
                dx[r * last + c] = y[c] * (gr[c] - dot);
        }
        t.accumulate(x, dx);
    };
    return outv;
}

Var Tape::reshape(Var x, std::vector<std::size_t> shape) {
    const Tensor& X = value(x);
    if (Tensor::count(shape) != X.size())
        throw std::invalid_argument("reshape element count mismatch");
    Tensor out(shape, X.vec());
    return push(std::move(out), requires_grad(x), [x](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        Tensor dx(t.value(x).shape(), g.vec());
        t.accumulate(x, dx);
    });
}

Var Tape::tile_rows(Var x, std::size_t n) {
    const Tensor& X = value(x);
    const std::size_t m = X.size();
    Tensor out({n, m});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out.at(r, c) = X[c];
    return push(std::move(out), requires_grad(x), [x, n, m](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        Tensor dx(t.value(x).shape());
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) dx[c] += g.at(r, c);
        t.accumulate(x, dx);
    });
}

Var Tape::rowwise_matvec(Var mats, Var vecs, std::size_t r, std::size_t c) {
    const Tensor& M = value(mats);
    const Tensor& V = value(vecs);
    const std::size_t n = M.rows();
    if (M.cols() != r * c || V.rows() != n || V.cols() != c)
        throw std::invalid_argument("rowwise_matvec shape mismatch: mats " +
                                    Tensor::shape_str(M.shape()) + " vecs " +
                                    Tensor::shape_str(V.shape()));
    Tensor out({n, r});
    for (std::size_t i = 0; i < n; ++i) {
        const double* m = M.data() + i * r * c;
        const double* v = V.data() + i * c;
        double* o = out.data() + i * r;
        for (std::size_t a = 0; a < r; ++a) {
            double acc = 0.0;
            for (std::size_t b = 0; b < c; ++b) acc += m[a * c + b] * v[b];
            o[a] = acc;
        }
    }
    bool rg = requires_grad(mats) || requires_grad(vecs);
    return push(std::move(out), rg, [mats, vecs, n, r, c](Tape& t, const Tensor& g) {
        const Tensor& M = t.value(mats);
        const Tensor& V = t.value(vecs);
        if (t.requires_grad(mats)) {
            Tensor dm(M.shape());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t a = 0; a < r; ++a) {
                    const double ga = g[i * r + a];
                    if (ga == 0.0) continue;
                    for (std::size_t b = 0; b < c; ++b)
                        dm[i * r * c + a * c + b] = ga * V[i * c + b];
                }
            t.accumulate(mats, dm);
        }
        if (t.requires_grad(vecs)) {
            Tensor dv(V.shape());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t a = 0; a < r; ++a) {
                    const double ga = g[i * r + a];
                    if (ga == 0.0) continue;
                    for (std::size_t b = 0; b < c; ++b)
                        dv[i * c + b] += ga * M[i * r * c + a * c + b];
                }
            t.accumulate(vecs, dv);
        }
    });
}

Var Tape::rowwise_dot(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
        throw std::invalid_argument("rowwise_dot shape mismatch");
    const std::size_t n = A.rows(), m = A.cols();
    Tensor out({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += A.at(i, j) * B.at(i, j);
        out[i] = acc;
    }
    bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, n, m](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(a);
        const Tensor& B = t.value(b);
        if (t.requires_grad(a)) {
            Tensor da(A.shape());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) da.at(i, j) = g[i] * B.at(i, j);
            t.accumulate(a, da);
        }
        if (t.requires_grad(b)) {
            Tensor db(B.shape());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) db.at(i, j) = g[i] * A.at(i, j);
            t.accumulate(b, db);
        }
    });
}

Var Tape::gather_rows(Var x, std::vector<std::size_t> idx) {
    const Tensor& X = value(x);
    const std::size_t m = X.cols();
    Tensor out({idx.size(), m});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= X.rows())
            throw std::out_of_range("gather_rows index out of range");
        for (std::size_t c = 0; c < m; ++c) out.at(i, c) = X.at(idx[i], c);
    }
    return push(std::move(out), requires_grad(x),
                [x, idx = std::move(idx), m](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < m; ++c)
                t.accumulate_at(x, idx[i] * m + c, g.at(i, c));
    });
}

void Tape::backward(Var loss) {
    const Tensor& L = value(loss);
    if (L.size() != 1)
        throw std::invalid_argument("backward requires a scalar loss, got " +
                                    Tensor::shape_str(L.shape()));
    if (backward_done_) throw std::logic_error("backward already run on this tape");
    backward_done_ = true;
    node(loss).grad = Tensor(L.shape(), {1.0});
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad.size() == 0 || !n.backprop || !n.requires_grad) continue;
        n.backprop(*this, n.grad);
    }
    // leaves without incoming gradient read as zero via grad()
}

GradCheckReport finite_diff_check(const std::function<double(const Tensor&)>& f,
                                  Tensor params, const Tensor& analytic_grad,
                                  double step, double tol) {
    if (step <= 0.0) throw std::invalid_argument("finite difference step must be positive");
    GradCheckReport rep;
    rep.checked = params.size();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = params[i];
        params[i] = orig + step;
        const double fp = f(params);
        params[i] = orig - step;
        const double fm = f(params);
        params[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("non-finite function value during gradient check");
        const double numeric = (fp - fm) / (2.0 * step);
        const double analytic = analytic_grad[i];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
        const double rel = std::abs(numeric - analytic) / denom;
        if (rel > rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst_index = i;
        }
    }
    rep.pass = rep.max_rel_error < tol;
    return rep;
}

}  // namespace mbgmn::ad

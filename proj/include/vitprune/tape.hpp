#pragma once

#include <cstring>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "vitprune/tensor.hpp"

namespace vitprune {

namespace detail {

// C += A(m,k) * B(k,n), row-major, ikj order.
inline void mm_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            double av = ai[l];
            if (av == 0.0) continue;
            const double* bl = b + l * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// C += A(m,k) * B(n,k)^T
inline void mm_nt_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t l = 0; l < k; ++l) s += ai[l] * bj[l];
            ci[j] += s;
        }
    }
}

// C += A(k,m)^T * B(k,n)
inline void mm_tn_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t l = 0; l < k; ++l) {
        const double* al = a + l * m;
        const double* bl = b + l * n;
        for (std::size_t i = 0; i < m; ++i) {
            double av = al[i];
            if (av == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

} // namespace detail

class Tape;

// Handle to a node on a tape. Cheap to copy; only meaningful together with
// the tape that issued it.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape recording tensor-level operations. Each op appends one
// node holding the result tensor and a closure that routes the node's
// adjoint to its inputs. With recording disabled the same ops run as plain
// forward arithmetic (values are still chained through nodes).
class Tape {
public:
    using BackFn = std::function<void(Tape&, int)>;

    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    // Differentiable input.
    Var leaf(Tensor value, const char* label = "leaf") {
        return Var{this, push(label, std::move(value), recording_, nullptr)};
    }

    // Non-differentiable input; backward never flows into it.
    Var constant(Tensor value, const char* label = "const") {
        return Var{this, push(label, std::move(value), false, nullptr)};
    }

    const Tensor& val(int id) const { return nodes_[id].value; }
    const Tensor& val(Var v) const { return nodes_[v.id].value; }

    // Runs the reverse sweep from a scalar node. Adjoints from a previous
    // sweep on the same tape are discarded.
    void backward(Var loss) {
        require(loss.tape == this, ErrorKind::contract, "backward: var from another tape");
        require(val(loss).size() == 1, ErrorKind::contract,
                "backward: loss must be scalar, got shape " + val(loss).shape_str());
        adjoints_.assign(nodes_.size(), Tensor{});
        adjoints_[loss.id] = Tensor::full(val(loss).shape, 1.0);
        for (int i = loss.id; i >= 0; --i) {
            if (!adjoints_[i].data.empty() && nodes_[i].back)
                nodes_[i].back(*this, i);
        }
    }

    // Adjoint of a node after backward(); zeros if none reached it.
    Tensor grad_of(Var v) const {
        if (v.id < static_cast<int>(adjoints_.size()) && !adjoints_[v.id].data.empty())
            return adjoints_[v.id];
        return Tensor::zeros(val(v).shape);
    }

    // --- used by op implementations ---

    bool wants_grad(int id) const { return nodes_[id].needs_grad; }
    bool wants_grad(Var v) const { return nodes_[v.id].needs_grad; }

    // Adjoint buffer for accumulation, allocated as zeros on first touch.
    Tensor& grad_buf(int id) {
        Tensor& g = adjoints_[id];
        if (g.data.empty()) g = Tensor::zeros(nodes_[id].value.shape);
        return g;
    }

    const Tensor& adj(int id) const { return adjoints_[id]; }

    int make_node(const char* opname, Tensor value,
                  std::initializer_list<Var> inputs, BackFn back) {
        bool needs = false;
        for (const Var& v : inputs) {
            require(v.tape == this, ErrorKind::contract,
                    std::string(opname) + ": input var belongs to another tape");
            needs = needs || nodes_[v.id].needs_grad;
        }
        bool rec = recording_ && needs;
        return push(opname, std::move(value), needs, rec ? std::move(back) : BackFn{});
    }

    bool check_finite = true;

private:
    struct Node {
        const char* op;
        Tensor value;
        BackFn back;
        bool needs_grad;
    };

    int push(const char* opname, Tensor value, bool needs_grad, BackFn back) {
        if (check_finite && !value.all_finite())
            fail(ErrorKind::numeric,
                 std::string("non-finite values produced by op '") + opname + "'");
        nodes_.push_back(Node{opname, std::move(value), std::move(back), needs_grad});
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> adjoints_;
    bool recording_;
};

namespace op {

inline Var add(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    require(av.same_shape(bv), ErrorKind::contract,
            "add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
    int ai = a.id, bi = b.id;
    return Var{&t, t.make_node("add", std::move(out), {a, b},
        [ai, bi](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(ai)) {
                Tensor& g = t.grad_buf(ai);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i];
            }
            if (t.wants_grad(bi)) {
                Tensor& g = t.grad_buf(bi);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i];
            }
        })};
}

inline Var sub(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    require(av.same_shape(bv), ErrorKind::contract, "sub: shape mismatch");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
    int ai = a.id, bi = b.id;
    return Var{&t, t.make_node("sub", std::move(out), {a, b},
        [ai, bi](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(ai)) {
                Tensor& g = t.grad_buf(ai);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i];
            }
            if (t.wants_grad(bi)) {
                Tensor& g = t.grad_buf(bi);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] -= dy.data[i];
            }
        })};
}

inline Var mul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    require(av.same_shape(bv), ErrorKind::contract, "mul: shape mismatch");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
    int ai = a.id, bi = b.id;
    return Var{&t, t.make_node("mul", std::move(out), {a, b},
        [ai, bi](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(ai)) {
                Tensor& g = t.grad_buf(ai);
                const Tensor& bv = t.val(bi);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i] * bv.data[i];
            }
            if (t.wants_grad(bi)) {
                Tensor& g = t.grad_buf(bi);
                const Tensor& av = t.val(ai);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i] * av.data[i];
            }
        })};
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (double& v : out.data) v *= c;
    int ai = a.id;
    return Var{&t, t.make_node("scale", std::move(out), {a},
        [ai, c](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(ai)) {
                Tensor& g = t.grad_buf(ai);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += c * dy.data[i];
            }
        })};
}

// X(R,C) + v(C) broadcast over rows.
inline Var add_rowvec(Var x, Var v) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    const Tensor& vv = t.val(v);
    std::size_t C = xv.cols(), R = xv.rows();
    require(vv.size() == C, ErrorKind::contract, "add_rowvec: vector length mismatch");
    Tensor out = xv;
    for (std::size_t r = 0; r < R; ++r) {
        double* o = out.row(r);
        for (std::size_t c = 0; c < C; ++c) o[c] += vv.data[c];
    }
    int xi = x.id, vi = v.id;
    return Var{&t, t.make_node("add_rowvec", std::move(out), {x, v},
        [xi, vi, R, C](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(xi)) {
                Tensor& g = t.grad_buf(xi);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i];
            }
            if (t.wants_grad(vi)) {
                Tensor& g = t.grad_buf(vi);
                for (std::size_t r = 0; r < R; ++r) {
                    const double* d = dy.row(r);
                    for (std::size_t c = 0; c < C; ++c) g.data[c] += d[c];
                }
            }
        })};
}

// A(m,k) * B(k,n). Leading dims of A beyond the last fold into m, so a
// (B, n, k) activation times a (k, n') weight works directly.
inline Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    std::size_t m = av.rows(), k = av.cols();
    require(bv.rank() == 2 && bv.dim(0) == k, ErrorKind::contract,
            "matmul: inner dims " + av.shape_str() + " vs " + bv.shape_str());
    std::size_t n = bv.dim(1);
    std::vector<std::size_t> oshape(av.shape.begin(), av.shape.end());
    if (oshape.empty()) oshape.push_back(1);
    oshape.back() = n;
    Tensor out(std::move(oshape));
    detail::mm_acc(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    int ai = a.id, bi = b.id;
    return Var{&t, t.make_node("matmul", std::move(out), {a, b},
        [ai, bi, m, k, n](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(ai))
                detail::mm_nt_acc(dy.data.data(), t.val(bi).data.data(),
                                  t.grad_buf(ai).data.data(), m, n, k);
            if (t.wants_grad(bi))
                detail::mm_tn_acc(t.val(ai).data.data(), dy.data.data(),
                                  t.grad_buf(bi).data.data(), k, m, n);
        })};
}

// A(m,k) * x(k) -> (m)
inline Var matvec(Var a, Var x) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& xv = t.val(x);
    require(av.rank() == 2 && xv.size() == av.dim(1), ErrorKind::contract,
            "matvec: shape mismatch");
    std::size_t m = av.dim(0), k = av.dim(1);
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = av.row(i);
        double s = 0.0;
        for (std::size_t l = 0; l < k; ++l) s += ai[l] * xv.data[l];
        out.data[i] = s;
    }
    int aid = a.id, xid = x.id;
    return Var{&t, t.make_node("matvec", std::move(out), {a, x},
        [aid, xid, m, k](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(aid)) {
                Tensor& g = t.grad_buf(aid);
                const Tensor& xv = t.val(xid);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l)
                        g.data[i * k + l] += dy.data[i] * xv.data[l];
            }
            if (t.wants_grad(xid)) {
                Tensor& g = t.grad_buf(xid);
                const Tensor& av = t.val(aid);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* ai = av.row(i);
                    for (std::size_t l = 0; l < k; ++l) g.data[l] += dy.data[i] * ai[l];
                }
            }
        })};
}

inline Var sum(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    double s = 0.0;
    for (double v : xv.data) s += v;
    int xi = x.id;
    return Var{&t, t.make_node("sum", Tensor::scalar(s), {x},
        [xi](Tape& t, int self) {
            double d = t.adj(self).data[0];
            if (t.wants_grad(xi)) {
                Tensor& g = t.grad_buf(xi);
                for (double& v : g.data) v += d;
            }
        })};
}

// Row-wise layer normalization over the last dimension with learned scale
// and shift. Population variance; eps inside the square root.
inline Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-6) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    std::size_t R = xv.rows(), C = xv.cols();
    const Tensor& gv = t.val(gamma);
    const Tensor& bv = t.val(beta);
    require(gv.size() == C && bv.size() == C, ErrorKind::contract,
            "layernorm: scale/shift length mismatch");
    Tensor out(xv.shape);
    Tensor xn(xv.shape);                 // normalized pre-scale, kept for backward
    std::vector<double> inv(R);
    for (std::size_t r = 0; r < R; ++r) {
        const double* xr = xv.row(r);
        double mean = 0.0;
        for (std::size_t c = 0; c < C; ++c) mean += xr[c];
        mean /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            double d = xr[c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(C);
        double iv = 1.0 / std::sqrt(var + eps);
        inv[r] = iv;
        double* nr = xn.row(r);
        double* o = out.row(r);
        for (std::size_t c = 0; c < C; ++c) {
            nr[c] = (xr[c] - mean) * iv;
            o[c] = nr[c] * gv.data[c] + bv.data[c];
        }
    }
    int xi = x.id, gi = gamma.id, bi = beta.id;
    return Var{&t, t.make_node("layernorm", std::move(out), {x, gamma, beta},
        [xi, gi, bi, R, C, xn = std::move(xn), inv = std::move(inv)](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            const Tensor& gv = t.val(gi);
            if (t.wants_grad(gi)) {
                Tensor& g = t.grad_buf(gi);
                for (std::size_t r = 0; r < R; ++r) {
                    const double* d = dy.row(r);
                    const double* nr = xn.row(r);
                    for (std::size_t c = 0; c < C; ++c) g.data[c] += d[c] * nr[c];
                }
            }
            if (t.wants_grad(bi)) {
                Tensor& g = t.grad_buf(bi);
                for (std::size_t r = 0; r < R; ++r) {
                    const double* d = dy.row(r);
                    for (std::size_t c = 0; c < C; ++c) g.data[c] += d[c];
                }
            }
            if (t.wants_grad(xi)) {
                Tensor& g = t.grad_buf(xi);
                double Cd = static_cast<double>(C);
                for (std::size_t r = 0; r < R; ++r) {
                    const double* d = dy.row(r);
                    const double* nr = xn.row(r);
                    double* gr = g.row(r);
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                        double dn = d[c] * gv.data[c];
                        s1 += dn;
                        s2 += dn * nr[c];
                    }
                    s1 /= Cd;
                    s2 /= Cd;
                    for (std::size_t c = 0; c < C; ++c) {
                        double dn = d[c] * gv.data[c];
                        gr[c] += inv[r] * (dn - s1 - nr[c] * s2);
                    }
                }
            }
        })};
}

// Exact (erf-based) GELU.
inline Var gelu(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    Tensor out(xv.shape);
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        double v = xv.data[i];
        out.data[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    int xi = x.id;
    return Var{&t, t.make_node("gelu", std::move(out), {x},
        [xi](Tape& t, int self) {
            if (!t.wants_grad(xi)) return;
            const Tensor& dy = t.adj(self);
            const Tensor& xv = t.val(xi);
            Tensor& g = t.grad_buf(xi);
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (std::size_t i = 0; i < xv.size(); ++i) {
                double v = xv.data[i];
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                g.data[i] += dy.data[i] * (cdf + v * pdf);
            }
        })};
}

// (B*n, H*dk) -> (B*H*n, dk): regroup token-major rows into head-major blocks.
inline Var split_heads(Var x, std::size_t batch, std::size_t n, std::size_t heads) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    require(xv.rows() == batch * n && xv.cols() % heads == 0, ErrorKind::contract,
            "split_heads: shape mismatch");
    std::size_t dk = xv.cols() / heads;
    Tensor out({batch * heads * n, dk});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t tok = 0; tok < n; ++tok) {
            const double* src = xv.row(b * n + tok);
            for (std::size_t h = 0; h < heads; ++h)
                std::memcpy(out.row((b * heads + h) * n + tok), src + h * dk,
                            dk * sizeof(double));
        }
    int xi = x.id;
    return Var{&t, t.make_node("split_heads", std::move(out), {x},
        [xi, batch, n, heads, dk](Tape& t, int self) {
            if (!t.wants_grad(xi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(xi);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t tok = 0; tok < n; ++tok) {
                    double* dst = g.row(b * n + tok);
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double* src = dy.row((b * heads + h) * n + tok);
                        for (std::size_t c = 0; c < dk; ++c) dst[h * dk + c] += src[c];
                    }
                }
        })};
}

// (B*H*n, dk) -> (B*n, H*dk): inverse of split_heads (the concat before the
// output projection).
inline Var merge_heads(Var x, std::size_t batch, std::size_t n, std::size_t heads) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    require(xv.rows() == batch * heads * n, ErrorKind::contract,
            "merge_heads: shape mismatch");
    std::size_t dk = xv.cols();
    Tensor out({batch * n, heads * dk});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t tok = 0; tok < n; ++tok) {
            double* dst = out.row(b * n + tok);
            for (std::size_t h = 0; h < heads; ++h)
                std::memcpy(dst + h * dk, xv.row((b * heads + h) * n + tok),
                            dk * sizeof(double));
        }
    int xi = x.id;
    return Var{&t, t.make_node("merge_heads", std::move(out), {x},
        [xi, batch, n, heads, dk](Tape& t, int self) {
            if (!t.wants_grad(xi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(xi);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t tok = 0; tok < n; ++tok) {
                    const double* src = dy.row(b * n + tok);
                    for (std::size_t h = 0; h < heads; ++h) {
                        double* dst = g.row((b * heads + h) * n + tok);
                        for (std::size_t c = 0; c < dk; ++c) dst[c] += src[h * dk + c];
                    }
                }
        })};
}

// Fused scaled dot-product scores + row softmax over kept key columns.
// Q, K are (G*n, dk) with G independent blocks of n rows. keep (length n,
// shared across blocks) removes key columns from the softmax entirely; an
// empty keep means all columns participate. Masked columns get probability
// exactly zero, so no non-finite logits are ever materialized.
inline Var attention_probs(Var q, Var k, std::size_t groups, std::size_t n,
                           double scale, const std::vector<std::uint8_t>& keep) {
    Tape& t = *q.tape;
    const Tensor& qv = t.val(q);
    const Tensor& kv = t.val(k);
    require(qv.rows() == groups * n && qv.same_shape(kv), ErrorKind::contract,
            "attention_probs: shape mismatch");
    require(keep.empty() || keep.size() == n, ErrorKind::contract,
            "attention_probs: keep mask length mismatch");
    if (!keep.empty()) {
        bool any = false;
        for (auto b : keep) any = any || b;
        require(any, ErrorKind::contract, "attention_probs: every key masked");
    }
    std::size_t dk = qv.cols();
    Tensor out({groups * n, n});
    std::vector<double> srow(n);
    for (std::size_t g = 0; g < groups; ++g) {
        const double* qb = qv.row(g * n);
        const double* kb = kv.row(g * n);
        for (std::size_t i = 0; i < n; ++i) {
            const double* qi = qb + i * dk;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                if (!keep.empty() && !keep[j]) continue;
                const double* kj = kb + j * dk;
                double s = 0.0;
                for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
                s *= scale;
                srow[j] = s;
                if (s > mx) mx = s;
            }
            double* o = out.row(g * n + i);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (!keep.empty() && !keep[j]) {
                    o[j] = 0.0;
                    continue;
                }
                double e = std::exp(srow[j] - mx);
                o[j] = e;
                z += e;
            }
            double izn = 1.0 / z;
            for (std::size_t j = 0; j < n; ++j) o[j] *= izn;
        }
    }
    int qi = q.id, ki = k.id;
    return Var{&t, t.make_node("attention_probs", std::move(out), {q, k},
        [qi, ki, groups, n, dk, scale](Tape& t, int self) {
            bool wq = t.wants_grad(qi), wk = t.wants_grad(ki);
            if (!wq && !wk) return;
            const Tensor& dp = t.adj(self);
            const Tensor& p = t.val(self);
            const Tensor& qv = t.val(qi);
            const Tensor& kv = t.val(ki);
            Tensor ds({n, n});
            for (std::size_t g = 0; g < groups; ++g) {
                for (std::size_t i = 0; i < n; ++i) {
                    const double* pr = p.row(g * n + i);
                    const double* dr = dp.row(g * n + i);
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += dr[j] * pr[j];
                    double* dsr = ds.row(i);
                    for (std::size_t j = 0; j < n; ++j)
                        dsr[j] = scale * pr[j] * (dr[j] - s);
                }
                if (wq)
                    detail::mm_acc(ds.data.data(), kv.row(g * n),
                                   t.grad_buf(qi).row(g * n), n, n, dk);
                if (wk)
                    detail::mm_tn_acc(ds.data.data(), qv.row(g * n),
                                      t.grad_buf(ki).row(g * n), n, n, dk);
            }
        })};
}

// Y_g = P_g(n,n) * V_g(n,dk) per block.
inline Var attention_mix(Var p, Var v, std::size_t groups, std::size_t n) {
    Tape& t = *p.tape;
    const Tensor& pv = t.val(p);
    const Tensor& vv = t.val(v);
    require(pv.rows() == groups * n && pv.cols() == n, ErrorKind::contract,
            "attention_mix: probability shape mismatch");
    require(vv.rows() == groups * n, ErrorKind::contract,
            "attention_mix: value shape mismatch");
    std::size_t dk = vv.cols();
    Tensor out({groups * n, dk});
    for (std::size_t g = 0; g < groups; ++g)
        detail::mm_acc(pv.row(g * n), vv.row(g * n), out.row(g * n), n, n, dk);
    int pi = p.id, vi = v.id;
    return Var{&t, t.make_node("attention_mix", std::move(out), {p, v},
        [pi, vi, groups, n, dk](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(pi)) {
                Tensor& g = t.grad_buf(pi);
                const Tensor& vv = t.val(vi);
                for (std::size_t b = 0; b < groups; ++b)
                    detail::mm_nt_acc(dy.row(b * n), vv.row(b * n), g.row(b * n), n, dk, n);
            }
            if (t.wants_grad(vi)) {
                Tensor& g = t.grad_buf(vi);
                const Tensor& pv = t.val(pi);
                for (std::size_t b = 0; b < groups; ++b)
                    detail::mm_tn_acc(pv.row(b * n), dy.row(b * n), g.row(b * n), n, n, dk);
            }
        })};
}

// Per-head scalar gates: block (b,h) of X(B*H*n, dk) scaled by g[h].
inline Var scale_heads(Var x, Var g, std::size_t batch, std::size_t heads, std::size_t n) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    const Tensor& gv = t.val(g);
    require(xv.rows() == batch * heads * n, ErrorKind::contract,
            "scale_heads: shape mismatch");
    require(gv.size() == heads, ErrorKind::contract, "scale_heads: gate length mismatch");
    std::size_t dk = xv.cols();
    Tensor out(xv.shape);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            double f = gv.data[h];
            const double* src = xv.row((b * heads + h) * n);
            double* dst = out.row((b * heads + h) * n);
            for (std::size_t i = 0; i < n * dk; ++i) dst[i] = src[i] * f;
        }
    int xi = x.id, gi = g.id;
    return Var{&t, t.make_node("scale_heads", std::move(out), {x, g},
        [xi, gi, batch, heads, n, dk](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(xi)) {
                Tensor& gx = t.grad_buf(xi);
                const Tensor& gv = t.val(gi);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t h = 0; h < heads; ++h) {
                        double f = gv.data[h];
                        const double* src = dy.row((b * heads + h) * n);
                        double* dst = gx.row((b * heads + h) * n);
                        for (std::size_t i = 0; i < n * dk; ++i) dst[i] += src[i] * f;
                    }
            }
            if (t.wants_grad(gi)) {
                Tensor& gg = t.grad_buf(gi);
                const Tensor& xv = t.val(xi);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double* d = dy.row((b * heads + h) * n);
                        const double* x0 = xv.row((b * heads + h) * n);
                        double s = 0.0;
                        for (std::size_t i = 0; i < n * dk; ++i) s += d[i] * x0[i];
                        gg.data[h] += s;
                    }
            }
        })};
}

// Per-token scalar gates shared across the batch: row (b,tok) of X(B*n, d)
// scaled by g[tok].
inline Var row_scale(Var x, Var g, std::size_t batch, std::size_t n) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    const Tensor& gv = t.val(g);
    require(xv.rows() == batch * n, ErrorKind::contract, "row_scale: shape mismatch");
    require(gv.size() == n, ErrorKind::contract, "row_scale: gate length mismatch");
    std::size_t d = xv.cols();
    Tensor out(xv.shape);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t tok = 0; tok < n; ++tok) {
            double f = gv.data[tok];
            const double* src = xv.row(b * n + tok);
            double* dst = out.row(b * n + tok);
            for (std::size_t c = 0; c < d; ++c) dst[c] = src[c] * f;
        }
    int xi = x.id, gi = g.id;
    return Var{&t, t.make_node("row_scale", std::move(out), {x, g},
        [xi, gi, batch, n, d](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(xi)) {
                Tensor& gx = t.grad_buf(xi);
                const Tensor& gv = t.val(gi);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t tok = 0; tok < n; ++tok) {
                        double f = gv.data[tok];
                        const double* src = dy.row(b * n + tok);
                        double* dst = gx.row(b * n + tok);
                        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c] * f;
                    }
            }
            if (t.wants_grad(gi)) {
                Tensor& gg = t.grad_buf(gi);
                const Tensor& xv = t.val(xi);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t tok = 0; tok < n; ++tok) {
                        const double* d0 = dy.row(b * n + tok);
                        const double* x0 = xv.row(b * n + tok);
                        double s = 0.0;
                        for (std::size_t c = 0; c < d; ++c) s += d0[c] * x0[c];
                        gg.data[tok] += s;
                    }
            }
        })};
}

// Constant per-sample factors (stochastic depth): all rows of sample b
// scaled by f[b].
inline Var sample_scale(Var x, std::vector<double> f, std::size_t batch) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    require(f.size() == batch && xv.rows() % batch == 0, ErrorKind::contract,
            "sample_scale: shape mismatch");
    std::size_t per = xv.rows() / batch, d = xv.cols();
    Tensor out(xv.shape);
    for (std::size_t b = 0; b < batch; ++b) {
        double fb = f[b];
        const double* src = xv.row(b * per);
        double* dst = out.row(b * per);
        for (std::size_t i = 0; i < per * d; ++i) dst[i] = src[i] * fb;
    }
    int xi = x.id;
    return Var{&t, t.make_node("sample_scale", std::move(out), {x},
        [xi, f = std::move(f), batch, per, d](Tape& t, int self) {
            if (!t.wants_grad(xi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(xi);
            for (std::size_t b = 0; b < batch; ++b) {
                double fb = f[b];
                const double* src = dy.row(b * per);
                double* dst = g.row(b * per);
                for (std::size_t i = 0; i < per * d; ++i) dst[i] += src[i] * fb;
            }
        })};
}

// Copy of a fixed base matrix with one row replaced by the variable z.
// Gradient flows only into z.
inline Var set_row(Var z, const Tensor& base, std::size_t row) {
    Tape& t = *z.tape;
    const Tensor& zv = t.val(z);
    require(row < base.rows() && zv.size() == base.cols(), ErrorKind::contract,
            "set_row: index or width mismatch");
    Tensor out = base;
    std::memcpy(out.row(row), zv.data.data(), zv.size() * sizeof(double));
    int zi = z.id;
    std::size_t C = base.cols();
    return Var{&t, t.make_node("set_row", std::move(out), {z},
        [zi, row, C](Tape& t, int self) {
            if (!t.wants_grad(zi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(zi);
            const double* src = dy.row(row);
            for (std::size_t c = 0; c < C; ++c) g.data[c] += src[c];
        })};
}

// Concatenate fixed per-head outputs (each (n, dk)) along columns, with slot
// `slot` replaced by the variable z. Produces (n, H*dk).
inline Var concat_heads_with(Var z, const std::vector<Tensor>& heads, std::size_t slot) {
    Tape& t = *z.tape;
    const Tensor& zv = t.val(z);
    std::size_t H = heads.size();
    require(slot < H, ErrorKind::contract, "concat_heads_with: slot out of range");
    std::size_t n = heads[0].rows(), dk = heads[0].cols();
    require(zv.rows() == n && zv.cols() == dk, ErrorKind::contract,
            "concat_heads_with: z shape mismatch");
    Tensor out({n, H * dk});
    for (std::size_t i = 0; i < n; ++i) {
        double* dst = out.row(i);
        for (std::size_t h = 0; h < H; ++h) {
            const double* src = (h == slot) ? zv.row(i) : heads[h].row(i);
            std::memcpy(dst + h * dk, src, dk * sizeof(double));
        }
    }
    int zi = z.id;
    return Var{&t, t.make_node("concat_heads_with", std::move(out), {z},
        [zi, slot, n, dk](Tape& t, int self) {
            if (!t.wants_grad(zi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(zi);
            for (std::size_t i = 0; i < n; ++i) {
                const double* src = dy.row(i) + slot * dk;
                double* dst = g.row(i);
                for (std::size_t c = 0; c < dk; ++c) dst[c] += src[c];
            }
        })};
}

// Gather token rows idx (shared across the batch) from X(B*n, d).
inline Var select_tokens(Var x, std::vector<std::size_t> idx,
                         std::size_t batch, std::size_t n) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    require(xv.rows() == batch * n, ErrorKind::contract, "select_tokens: shape mismatch");
    for (std::size_t i : idx)
        require(i < n, ErrorKind::contract, "select_tokens: index out of range");
    std::size_t m = idx.size(), d = xv.cols();
    Tensor out({batch * m, d});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(out.row(b * m + i), xv.row(b * n + idx[i]), d * sizeof(double));
    int xi = x.id;
    return Var{&t, t.make_node("select_tokens", std::move(out), {x},
        [xi, idx = std::move(idx), batch, n, d](Tape& t, int self) {
            if (!t.wants_grad(xi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(xi);
            std::size_t m = idx.size();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < m; ++i) {
                    const double* src = dy.row(b * m + i);
                    double* dst = g.row(b * n + idx[i]);
                    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                }
        })};
}

// Scatter token rows of X(B*m, d) into a zero (B*n_full, d) tensor at idx.
inline Var scatter_tokens(Var x, std::vector<std::size_t> idx,
                          std::size_t batch, std::size_t n_full) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    std::size_t m = idx.size(), d = xv.cols();
    require(xv.rows() == batch * m, ErrorKind::contract, "scatter_tokens: shape mismatch");
    Tensor out({batch * n_full, d});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(out.row(b * n_full + idx[i]), xv.row(b * m + i),
                        d * sizeof(double));
    int xi = x.id;
    return Var{&t, t.make_node("scatter_tokens", std::move(out), {x},
        [xi, idx = std::move(idx), batch, n_full, d](Tape& t, int self) {
            if (!t.wants_grad(xi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(xi);
            std::size_t m = idx.size();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < m; ++i) {
                    const double* src = dy.row(b * n_full + idx[i]);
                    double* dst = g.row(b * m + i);
                    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                }
        })};
}

// Prepend a learned CLS row to each sample's projected patches:
// (B*(n-1), d) + cls(d) -> (B*n, d).
inline Var assemble_tokens(Var patches, Var cls, std::size_t batch) {
    Tape& t = *patches.tape;
    const Tensor& pv = t.val(patches);
    const Tensor& cv = t.val(cls);
    require(pv.rows() % batch == 0, ErrorKind::contract, "assemble_tokens: shape mismatch");
    std::size_t np = pv.rows() / batch, d = pv.cols();
    require(cv.size() == d, ErrorKind::contract, "assemble_tokens: cls width mismatch");
    std::size_t n = np + 1;
    Tensor out({batch * n, d});
    for (std::size_t b = 0; b < batch; ++b) {
        std::memcpy(out.row(b * n), cv.data.data(), d * sizeof(double));
        std::memcpy(out.row(b * n + 1), pv.row(b * np), np * d * sizeof(double));
    }
    int pi = patches.id, ci = cls.id;
    return Var{&t, t.make_node("assemble_tokens", std::move(out), {patches, cls},
        [pi, ci, batch, np, d](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            std::size_t n = np + 1;
            if (t.wants_grad(pi)) {
                Tensor& g = t.grad_buf(pi);
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* src = dy.row(b * n + 1);
                    double* dst = g.row(b * np);
                    for (std::size_t i = 0; i < np * d; ++i) dst[i] += src[i];
                }
            }
            if (t.wants_grad(ci)) {
                Tensor& g = t.grad_buf(ci);
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* src = dy.row(b * n);
                    for (std::size_t c = 0; c < d; ++c) g.data[c] += src[c];
                }
            }
        })};
}

// X(B*n, d) + pos(n, d) broadcast over the batch.
inline Var add_pos(Var x, Var pos, std::size_t batch) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    const Tensor& pv = t.val(pos);
    std::size_t n = pv.rows(), d = pv.cols();
    require(xv.rows() == batch * n && xv.cols() == d, ErrorKind::contract,
            "add_pos: shape mismatch");
    Tensor out = xv;
    for (std::size_t b = 0; b < batch; ++b) {
        double* dst = out.row(b * n);
        const double* src = pv.data.data();
        for (std::size_t i = 0; i < n * d; ++i) dst[i] += src[i];
    }
    int xi = x.id, pi = pos.id;
    return Var{&t, t.make_node("add_pos", std::move(out), {x, pos},
        [xi, pi, batch, n, d](Tape& t, int self) {
            const Tensor& dy = t.adj(self);
            if (t.wants_grad(xi)) {
                Tensor& g = t.grad_buf(xi);
                for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i];
            }
            if (t.wants_grad(pi)) {
                Tensor& g = t.grad_buf(pi);
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* src = dy.row(b * n);
                    for (std::size_t i = 0; i < n * d; ++i) g.data[i] += src[i];
                }
            }
        })};
}

// Gather columns idx from a rank-2 tensor.
inline Var select_cols(Var x, std::vector<std::size_t> idx) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    require(xv.rank() == 2, ErrorKind::contract, "select_cols: rank-2 input required");
    std::size_t R = xv.dim(0), C = xv.dim(1), m = idx.size();
    for (std::size_t i : idx)
        require(i < C, ErrorKind::contract, "select_cols: index out of range");
    Tensor out({R, m});
    for (std::size_t r = 0; r < R; ++r) {
        const double* src = xv.row(r);
        double* dst = out.row(r);
        for (std::size_t i = 0; i < m; ++i) dst[i] = src[idx[i]];
    }
    int xi = x.id;
    return Var{&t, t.make_node("select_cols", std::move(out), {x},
        [xi, idx = std::move(idx), R, C](Tape& t, int self) {
            if (!t.wants_grad(xi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(xi);
            std::size_t m = idx.size();
            for (std::size_t r = 0; r < R; ++r) {
                const double* src = dy.row(r);
                double* dst = g.row(r);
                for (std::size_t i = 0; i < m; ++i) dst[idx[i]] += src[i];
            }
            (void)C;
        })};
}

// Shape relabel; data order untouched.
inline Var reshape(Var x, std::vector<std::size_t> shape) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    require(Tensor::count(shape) == xv.size(), ErrorKind::contract,
            "reshape: element count mismatch");
    Tensor out(std::move(shape), xv.data);
    int xi = x.id;
    return Var{&t, t.make_node("reshape", std::move(out), {x},
        [xi](Tape& t, int self) {
            if (!t.wants_grad(xi)) return;
            const Tensor& dy = t.adj(self);
            Tensor& g = t.grad_buf(xi);
            for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i];
        })};
}

// Mean cross-entropy over the batch with label smoothing. Targets are
// q = smoothing/C + (1-smoothing) on the true class. Log-softmax is
// computed stably; returns a scalar.
inline Var cross_entropy(Var logits, std::vector<int> labels, double smoothing) {
    Tape& t = *logits.tape;
    const Tensor& lv = t.val(logits);
    std::size_t B = lv.rows(), C = lv.cols();
    require(labels.size() == B, ErrorKind::contract, "cross_entropy: label count mismatch");
    for (int y : labels)
        require(y >= 0 && static_cast<std::size_t>(y) < C, ErrorKind::data,
                "cross_entropy: label out of range");
    double total = 0.0;
    double unif = smoothing / static_cast<double>(C);
    for (std::size_t b = 0; b < B; ++b) {
        const double* x = lv.row(b);
        double mx = x[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(x[c] - mx);
        double lse = mx + std::log(z);
        double loss = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            double q = unif + ((static_cast<int>(c) == labels[b]) ? (1.0 - smoothing) : 0.0);
            if (q != 0.0) loss -= q * (x[c] - lse);
        }
        total += loss;
    }
    total /= static_cast<double>(B);
    int li = logits.id;
    return Var{&t, t.make_node("cross_entropy", Tensor::scalar(total), {logits},
        [li, labels = std::move(labels), B, C, unif, smoothing](Tape& t, int self) {
            if (!t.wants_grad(li)) return;
            double d = t.adj(self).data[0] / static_cast<double>(B);
            const Tensor& lv = t.val(li);
            Tensor& g = t.grad_buf(li);
            for (std::size_t b = 0; b < B; ++b) {
                const double* x = lv.row(b);
                double* gr = g.row(b);
                double mx = x[0];
                for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
                double z = 0.0;
                for (std::size_t c = 0; c < C; ++c) z += std::exp(x[c] - mx);
                for (std::size_t c = 0; c < C; ++c) {
                    double p = std::exp(x[c] - mx) / z;
                    double q = unif + ((static_cast<int>(c) == labels[b]) ? (1.0 - smoothing) : 0.0);
                    gr[c] += d * (p - q);
                }
            }
        })};
}

} // namespace op

// Gradient of a scalar-valued tape function with respect to every input.
// The function receives a fresh tape plus one leaf per input tensor and must
// return a scalar node; anything else is a contract violation.
using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline std::vector<Tensor> grad(const LossFn& f, const std::vector<Tensor>& at) {
    Tape t;
    std::vector<Var> leaves;
    leaves.reserve(at.size());
    for (const Tensor& x : at) leaves.push_back(t.leaf(x));
    Var loss = f(t, leaves);
    require(loss.tape == &t, ErrorKind::contract, "grad: loss built on another tape");
    require(t.val(loss).size() == 1, ErrorKind::contract,
            "grad: loss must be scalar, got shape " + t.val(loss).shape_str());
    t.backward(loss);
    std::vector<Tensor> out;
    out.reserve(leaves.size());
    for (Var v : leaves) out.push_back(t.grad_of(v));
    return out;
}

// Scalar function of a single tensor site.
using SiteFn = std::function<Var(Tape&, Var)>;

inline Tensor grad1(const SiteFn& f, const Tensor& z) {
    return grad([&f](Tape& t, const std::vector<Var>& xs) { return f(t, xs[0]); }, {z})[0];
}

// Hessian-vector product by symmetric differencing of first-order gradients:
//   (grad(z + h v) - grad(z - h v)) / (2h),
// h = cbrt(machine eps) * (1 + max|z|) / (1 + max|v|). Exact up to roundoff
// whenever the loss is quadratic in z. A zero direction returns a zero
// tensor of z's shape rather than erroring.
inline Tensor hvp(const SiteFn& f, const Tensor& z, const Tensor& v) {
    require(z.same_shape(v), ErrorKind::contract,
            "hvp: direction shape " + v.shape_str() + " != point shape " + z.shape_str());
    double vmax = v.max_abs();
    if (vmax == 0.0) return Tensor::zeros(z.shape);
    double h = std::cbrt(std::numeric_limits<double>::epsilon()) *
               (1.0 + z.max_abs()) / (1.0 + vmax);
    Tensor zp = z, zm = z;
    for (std::size_t i = 0; i < z.size(); ++i) {
        zp.data[i] += h * v.data[i];
        zm.data[i] -= h * v.data[i];
    }
    Tensor gp = grad1(f, zp);
    Tensor gm = grad1(f, zm);
    Tensor out(z.shape);
    double inv = 1.0 / (2.0 * h);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = (gp.data[i] - gm.data[i]) * inv;
    return out;
}

// Dense Hessian built column-by-column from hvp with basis directions, then
// symmetrized. Refuses sites wider than 512 entries.
inline Tensor hessian_oracle(const SiteFn& f, const Tensor& z) {
    std::size_t dim = z.size();
    require(dim <= 512, ErrorKind::contract,
            "hessian_oracle: site dimension " + std::to_string(dim) + " exceeds 512");
    Tensor H({dim, dim});
    Tensor e = Tensor::zeros(z.shape);
    for (std::size_t i = 0; i < dim; ++i) {
        e.data[i] = 1.0;
        Tensor col = hvp(f, z, e);
        e.data[i] = 0.0;
        for (std::size_t r = 0; r < dim; ++r) H.at(r, i) = col.data[r];
    }
    for (std::size_t r = 0; r < dim; ++r)
        for (std::size_t c = r + 1; c < dim; ++c) {
            double s = 0.5 * (H.at(r, c) + H.at(c, r));
            H.at(r, c) = s;
            H.at(c, r) = s;
        }
    return H;
}

} // namespace vitprune

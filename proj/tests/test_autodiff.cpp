#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "vitprune/tape.hpp"

using namespace vitprune;

namespace {

double loss_value(const LossFn& f, const std::vector<Tensor>& at) {
    Tape t(false);
    std::vector<Var> leaves;
    for (const Tensor& x : at) leaves.push_back(t.leaf(x));
    return t.val(f(t, leaves)).data[0];
}

// Central-difference gradient, the reference all backward passes are
// checked against. Only touches forward evaluations.
std::vector<Tensor> fd_grad(const LossFn& f, const std::vector<Tensor>& at) {
    std::vector<Tensor> out;
    for (std::size_t which = 0; which < at.size(); ++which) {
        Tensor g(at[which].shape);
        for (std::size_t i = 0; i < at[which].size(); ++i) {
            double h = 1e-5 * (1.0 + std::fabs(at[which].data[i]));
            std::vector<Tensor> up = at, dn = at;
            up[which].data[i] += h;
            dn[which].data[i] -= h;
            g.data[i] = (loss_value(f, up) - loss_value(f, dn)) / (2.0 * h);
        }
        out.push_back(std::move(g));
    }
    return out;
}

void check_grad(const LossFn& f, const std::vector<Tensor>& at, double tol = 2e-5) {
    auto ad = grad(f, at);
    auto fd = fd_grad(f, at);
    for (std::size_t k = 0; k < at.size(); ++k) {
        REQUIRE(ad[k].same_shape(fd[k]));
        for (std::size_t i = 0; i < ad[k].size(); ++i) {
            double scale = std::max({1.0, std::fabs(ad[k].data[i]), std::fabs(fd[k].data[i])});
            INFO("input " << k << " entry " << i << " ad=" << ad[k].data[i]
                          << " fd=" << fd[k].data[i]);
            REQUIRE(std::fabs(ad[k].data[i] - fd[k].data[i]) / scale < tol);
        }
    }
}

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double s = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = s * rng.normal();
    return t;
}

// Quadratic form q(z) = 0.5 z^T A z as a tape program.
SiteFn quadratic(const Tensor& A) {
    return [A](Tape& t, Var z) {
        Var Ac = t.constant(A);
        Var az = op::matvec(Ac, z);
        return op::scale(op::sum(op::mul(z, az)), 0.5);
    };
}

} // namespace

TEST_CASE("gradient of a 2-d quadratic form matches the hand value") {
    Tensor A({2, 2}, {2, 1, 1, 3});
    Tensor z = Tensor::vector1d({1, 1});
    Tensor g = grad1(quadratic(A), z);
    REQUIRE(g.data[0] == Catch::Approx(3.0).margin(1e-12));
    REQUIRE(g.data[1] == Catch::Approx(4.0).margin(1e-12));
}

TEST_CASE("hvp on the 2-d quadratic reproduces A v") {
    Tensor A({2, 2}, {2, 1, 1, 3});
    Tensor z = Tensor::vector1d({1, 1});
    Tensor v = Tensor::vector1d({1, 1});
    Tensor hv = hvp(quadratic(A), z, v);
    REQUIRE(rel_err(hv.data[0], 3.0) < 1e-6);
    REQUIRE(rel_err(hv.data[1], 4.0) < 1e-6);
}

TEST_CASE("hvp is exact to roundoff on random quadratics") {
    Rng rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        std::size_t dim = 2 + rng.uniform_int(31);
        Tensor A = random_tensor(rng, {dim, dim});
        // symmetrize so H = A exactly
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = i + 1; j < dim; ++j) {
                double s = 0.5 * (A.at(i, j) + A.at(j, i));
                A.at(i, j) = s;
                A.at(j, i) = s;
            }
        Tensor z = random_tensor(rng, {dim});
        Tensor v = random_tensor(rng, {dim});
        Tensor want({dim});
        for (std::size_t i = 0; i < dim; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < dim; ++j) s += A.at(i, j) * v.data[j];
            want.data[i] = s;
        }
        Tensor got = hvp(quadratic(A), z, v);
        REQUIRE(rel_err(got, want) < 1e-6);
    }
}

TEST_CASE("hvp is linear in the direction") {
    Rng rng(12);
    std::size_t dim = 16;
    Tensor A = random_tensor(rng, {dim, dim});
    Tensor z = random_tensor(rng, {dim});
    Tensor v = random_tensor(rng, {dim});
    Tensor w = random_tensor(rng, {dim});
    double a = 0.7, b = -1.3;
    Tensor mix(std::vector<std::size_t>{dim});
    for (std::size_t i = 0; i < dim; ++i) mix.data[i] = a * v.data[i] + b * w.data[i];
    SiteFn f = quadratic(A);
    Tensor hv = hvp(f, z, v), hw = hvp(f, z, w), hm = hvp(f, z, mix);
    Tensor want(std::vector<std::size_t>{dim});
    for (std::size_t i = 0; i < dim; ++i) want.data[i] = a * hv.data[i] + b * hw.data[i];
    REQUIRE(rel_err(hm, want) < 1e-5);
}

TEST_CASE("hvp with a zero direction returns zeros") {
    Tensor A({3, 3}, {2, 0, 0, 0, 2, 0, 0, 0, 2});
    Tensor z = Tensor::vector1d({1, 2, 3});
    Tensor v = Tensor::zeros({3});
    Tensor hv = hvp(quadratic(A), z, v);
    for (double x : hv.data) REQUIRE(x == 0.0);
}

TEST_CASE("hvp rejects mismatched direction shapes") {
    Tensor A({2, 2}, {1, 0, 0, 1});
    Tensor z = Tensor::vector1d({1, 1});
    Tensor v = Tensor::vector1d({1, 1, 1});
    REQUIRE_THROWS_AS(hvp(quadratic(A), z, v), Error);
}

TEST_CASE("hessian oracle recovers the symmetrized matrix of a quadratic") {
    Rng rng(13);
    std::size_t dim = 7;
    Tensor A = random_tensor(rng, {dim, dim});  // deliberately non-symmetric
    Tensor z = random_tensor(rng, {dim});
    Tensor H = hessian_oracle(quadratic(A), z);
    for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = 0; j < dim; ++j) {
            double want = 0.5 * (A.at(i, j) + A.at(j, i));
            REQUIRE(std::fabs(H.at(i, j) - want) < 1e-7);
            REQUIRE(H.at(i, j) == H.at(j, i));
        }
}

TEST_CASE("hessian oracle refuses sites wider than 512") {
    Tensor z = Tensor::zeros({513});
    auto f = [](Tape& t, Var z) { return op::sum(op::mul(z, z)); };
    REQUIRE_THROWS_AS(hessian_oracle(f, z), Error);
}

TEST_CASE("grad rejects non-scalar losses") {
    Tensor z = Tensor::vector1d({1, 2});
    auto f = [](Tape&, const std::vector<Var>& xs) { return xs[0]; };
    REQUIRE_THROWS_AS(grad(f, {z}), Error);
}

TEST_CASE("non-finite op results raise a numeric error naming the op") {
    Tensor z = Tensor::vector1d({1.0});
    auto f = [](Tape&, const std::vector<Var>& xs) {
        return op::sum(op::scale(xs[0], std::numeric_limits<double>::infinity()));
    };
    try {
        grad(f, {z});
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        REQUIRE(e.kind() == ErrorKind::numeric);
        REQUIRE(std::string(e.what()).find("scale") != std::string::npos);
    }
}

TEST_CASE("gradients are bitwise deterministic across repeated runs") {
    Rng rng(14);
    Tensor A = random_tensor(rng, {8, 8});
    Tensor z = random_tensor(rng, {8});
    SiteFn f = quadratic(A);
    Tensor g1 = grad1(f, z);
    Tensor g2 = grad1(f, z);
    REQUIRE(std::memcmp(g1.data.data(), g2.data.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("elementwise and broadcast ops match central differences") {
    Rng rng(21);
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {3, 4});
    Tensor v = random_tensor(rng, {4});
    Tensor r = random_tensor(rng, {3, 4});

    check_grad([&r](Tape& t, const std::vector<Var>& xs) {
        Var m = op::mul(op::add(xs[0], xs[1]), t.constant(r));
        return op::sum(op::sub(m, op::scale(xs[0], 0.3)));
    }, {a, b});

    check_grad([&r](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::add_rowvec(xs[0], xs[1]), t.constant(r)));
    }, {a, v});
}

TEST_CASE("matmul and matvec match central differences") {
    Rng rng(22);
    Tensor a = random_tensor(rng, {3, 5});
    Tensor b = random_tensor(rng, {5, 2});
    Tensor r = random_tensor(rng, {3, 2});
    check_grad([&r](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::matmul(xs[0], xs[1]), t.constant(r)));
    }, {a, b});

    Tensor x = random_tensor(rng, {5});
    Tensor rv = random_tensor(rng, {3});
    check_grad([&rv](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::matvec(xs[0], xs[1]), t.constant(rv)));
    }, {a, x});
}

TEST_CASE("layernorm and gelu match central differences") {
    Rng rng(23);
    Tensor x = random_tensor(rng, {4, 6});
    Tensor g = random_tensor(rng, {6}, 0.5);
    for (double& v : g.data) v += 1.0;
    Tensor b = random_tensor(rng, {6}, 0.2);
    Tensor r = random_tensor(rng, {4, 6});
    check_grad([&r](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::layernorm(xs[0], xs[1], xs[2]), t.constant(r)));
    }, {x, g, b}, 5e-5);

    check_grad([&r](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::gelu(xs[0]), t.constant(r)));
    }, {x});
}

TEST_CASE("attention ops match central differences, masked and unmasked") {
    Rng rng(24);
    std::size_t G = 2, n = 5, dk = 3;
    Tensor q = random_tensor(rng, {G * n, dk});
    Tensor k = random_tensor(rng, {G * n, dk});
    Tensor vv = random_tensor(rng, {G * n, dk});
    Tensor r = random_tensor(rng, {G * n, dk});
    double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    for (int masked = 0; masked < 2; ++masked) {
        std::vector<std::uint8_t> keep;
        if (masked) keep = {1, 0, 1, 1, 0};
        check_grad([&, keep](Tape& t, const std::vector<Var>& xs) {
            Var p = op::attention_probs(xs[0], xs[1], G, n, scale, keep);
            Var y = op::attention_mix(p, xs[2], G, n);
            return op::sum(op::mul(y, t.constant(r)));
        }, {q, k, vv}, 5e-5);
    }
}

TEST_CASE("masked attention rows sum to one over kept columns only") {
    Rng rng(25);
    std::size_t G = 2, n = 4, dk = 3;
    Tensor q = random_tensor(rng, {G * n, dk});
    Tensor k = random_tensor(rng, {G * n, dk});
    std::vector<std::uint8_t> keep = {1, 0, 1, 0};
    Tape t(false);
    Var p = op::attention_probs(t.leaf(q), t.leaf(k), G, n, 0.5, keep);
    const Tensor& pv = t.val(p);
    for (std::size_t row = 0; row < G * n; ++row) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!keep[j]) REQUIRE(pv.at(row, j) == 0.0);
            s += pv.at(row, j);
        }
        REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("attention with every key masked is rejected") {
    Tape t(false);
    Var q = t.leaf(Tensor::zeros({3, 2}));
    Var k = t.leaf(Tensor::zeros({3, 2}));
    std::vector<std::uint8_t> keep = {0, 0, 0};
    REQUIRE_THROWS_AS(op::attention_probs(q, k, 1, 3, 1.0, keep), Error);
}

TEST_CASE("head and token gating ops match central differences") {
    Rng rng(26);
    std::size_t B = 2, H = 3, n = 4, dk = 2, d = 5;
    Tensor x = random_tensor(rng, {B * H * n, dk});
    Tensor g = random_tensor(rng, {H}, 0.3);
    for (double& v : g.data) v = 0.5 + std::fabs(v);
    Tensor r = random_tensor(rng, {B * H * n, dk});
    check_grad([&](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::scale_heads(xs[0], xs[1], B, H, n), t.constant(r)));
    }, {x, g});

    Tensor xt = random_tensor(rng, {B * n, d});
    Tensor gt = random_tensor(rng, {n}, 0.3);
    Tensor rt = random_tensor(rng, {B * n, d});
    check_grad([&](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::row_scale(xs[0], xs[1], B, n), t.constant(rt)));
    }, {xt, gt});

    check_grad([&](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::sample_scale(xs[0], {0.0, 2.0}, B), t.constant(rt)));
    }, {xt});
}

TEST_CASE("split/merge heads round-trips and differentiates correctly") {
    Rng rng(27);
    std::size_t B = 2, H = 2, n = 3, d = 6;
    Tensor x = random_tensor(rng, {B * n, d});
    Tape t(false);
    Var s = op::split_heads(t.leaf(x), B, n, H);
    Var m = op::merge_heads(s, B, n, H);
    REQUIRE(rel_err(t.val(m), x) < 1e-15);

    Tensor r = random_tensor(rng, {B * H * n, d / H});
    check_grad([&](Tape& tt, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::split_heads(xs[0], B, n, H), tt.constant(r)));
    }, {x});
}

TEST_CASE("site injection ops route gradients to the injected slot only") {
    Rng rng(28);
    Tensor base = random_tensor(rng, {5, 4});
    Tensor z = random_tensor(rng, {4});
    Tensor r = random_tensor(rng, {5, 4});
    check_grad([&](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::set_row(xs[0], base, 2), t.constant(r)));
    }, {z});

    std::vector<Tensor> heads = {random_tensor(rng, {3, 2}), random_tensor(rng, {3, 2}),
                                 random_tensor(rng, {3, 2})};
    Tensor zh = random_tensor(rng, {3, 2});
    Tensor rh = random_tensor(rng, {3, 6});
    check_grad([&](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::concat_heads_with(xs[0], heads, 1), t.constant(rh)));
    }, {zh});

    // value check: untouched rows/slots come from the constants
    Tape t(false);
    Var out = op::set_row(t.leaf(z), base, 2);
    for (std::size_t c = 0; c < 4; ++c) {
        REQUIRE(t.val(out).at(2, c) == z.data[c]);
        REQUIRE(t.val(out).at(0, c) == base.at(0, c));
    }
}

TEST_CASE("token gather/scatter and embedding assembly differentiate correctly") {
    Rng rng(29);
    std::size_t B = 2, n = 5, d = 3;
    Tensor x = random_tensor(rng, {B * n, d});
    std::vector<std::size_t> idx = {0, 2, 4};
    Tensor r = random_tensor(rng, {B * idx.size(), d});
    check_grad([&](Tape& t, const std::vector<Var>& xs) {
        return op::sum(op::mul(op::select_tokens(xs[0], idx, B, n), t.constant(r)));
    }, {x});

    Tensor xs2 = random_tensor(rng, {B * idx.size(), d});
    Tensor r2 = random_tensor(rng, {B * n, d});
    check_grad([&](Tape& t, const std::vector<Var>& vars) {
        return op::sum(op::mul(op::scatter_tokens(vars[0], idx, B, n), t.constant(r2)));
    }, {xs2});

    Tensor patches = random_tensor(rng, {B * (n - 1), d});
    Tensor cls = random_tensor(rng, {d});
    Tensor pos = random_tensor(rng, {n, d});
    check_grad([&](Tape& t, const std::vector<Var>& vars) {
        Var tok = op::assemble_tokens(vars[0], vars[1], B);
        return op::sum(op::mul(op::add_pos(tok, vars[2], B), t.constant(r2)));
    }, {patches, cls, pos});
}

TEST_CASE("scatter then gather restores the original rows") {
    Rng rng(30);
    std::size_t B = 2, n = 6, d = 3;
    std::vector<std::size_t> idx = {1, 3, 4};
    Tensor x = random_tensor(rng, {B * idx.size(), d});
    Tape t(false);
    Var full = op::scatter_tokens(t.leaf(x), idx, B, n);
    Var back = op::select_tokens(full, idx, B, n);
    REQUIRE(rel_err(t.val(back), x) < 1e-15);
}

TEST_CASE("cross entropy: uniform logits give log C, huge margin gives zero") {
    std::size_t C = 8;
    Tape t(false);
    Tensor uniform = Tensor::zeros({2, C});
    std::vector<int> labels = {3, 5};
    Var l1 = op::cross_entropy(t.leaf(uniform), labels, 0.0);
    REQUIRE(t.val(l1).data[0] == Catch::Approx(std::log(double(C))).margin(1e-12));

    Tensor margin = Tensor::zeros({1, C});
    margin.at(0, 2) = 1000.0;
    Var l2 = op::cross_entropy(t.leaf(margin), {2}, 0.0);
    REQUIRE(t.val(l2).data[0] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("cross entropy with label smoothing matches central differences") {
    Rng rng(31);
    Tensor logits = random_tensor(rng, {3, 5});
    std::vector<int> labels = {0, 4, 2};
    for (double sm : {0.0, 0.1}) {
        check_grad([labels, sm](Tape&, const std::vector<Var>& xs) {
            return op::cross_entropy(xs[0], labels, sm);
        }, {logits}, 5e-6);
    }
}

TEST_CASE("gradients do not flow into constants") {
    Rng rng(32);
    Tensor a = random_tensor(rng, {3, 3});
    Tensor z = random_tensor(rng, {3});
    Tape t;
    Var ac = t.constant(a);
    Var zv = t.leaf(z);
    Var loss = op::sum(op::matvec(ac, zv));
    t.backward(loss);
    Tensor ga = t.grad_of(ac);
    for (double v : ga.data) REQUIRE(v == 0.0);
    REQUIRE(t.grad_of(zv).max_abs() > 0.0);
}

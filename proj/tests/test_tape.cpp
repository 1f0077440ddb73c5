#include <cmath>
#include <thread>
#include <vector>

#include "doctest.h"
#include "smedit/rng.hpp"
#include "smedit/tape.hpp"

using namespace smedit;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, real_t scl = 1) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) m.at(i, j) = scl * static_cast<real_t>(rng.normal());
    }
    return m;
}

}  // namespace

TEST_CASE("linear forward matches hand results") {
    Tape t;
    ValueId w = t.input(Matrix::identity(2));
    ValueId x = t.constant(Matrix::from_rows({{3, 4}}));
    ValueId y = t.linear(w, x, "l0");
    CHECK(t.value(y).at(0, 0) == doctest::Approx(3));
    CHECK(t.value(y).at(0, 1) == doctest::Approx(4));

    Tape t2;
    ValueId w2 = t2.input(Matrix::from_rows({{1, 2}, {3, 4}}));
    ValueId x2 = t2.constant(Matrix::from_rows({{1, 0}}));
    ValueId y2 = t2.linear(w2, x2, "l0");
    CHECK(t2.value(y2).at(0, 0) == doctest::Approx(1));
    CHECK(t2.value(y2).at(0, 1) == doctest::Approx(3));

    Tape t3;
    ValueId w3 = t3.input(Matrix(2, 2));
    ValueId x3 = t3.constant(Matrix::from_rows({{5, -7}}));
    ValueId y3 = t3.linear(w3, x3, "l0");
    CHECK(t3.value(y3).at(0, 0) == 0);
    CHECK(t3.value(y3).at(0, 1) == 0);

    Tape t4;
    ValueId w4 = t4.input(Matrix(2, 2));
    ValueId bad = t4.constant(Matrix::from_rows({{1, 2, 3}}));
    CHECK_THROWS_AS(t4.linear(w4, bad, "l0"), Error);
}

TEST_CASE("constant loss yields no gradients") {
    Tape t;
    ValueId w = t.input(Matrix::from_rows({{1, 2}, {3, 4}}));
    ValueId c = t.constant(Matrix::scalar(5));
    ValueId loss = t.reduce_sum(c);
    auto result = t.backward(loss);
    CHECK_FALSE(result.has_grad(w));
}

TEST_CASE("backward requires a scalar loss") {
    Tape t;
    ValueId w = t.input(Matrix::from_rows({{1, 2}, {3, 4}}));
    CHECK_THROWS_AS(t.backward(w), Error);
}

TEST_CASE("single linear layer gradient matches finite differences") {
    Rng rng(5);
    Matrix w0 = random_matrix(rng, 2, 2);
    Matrix x = random_matrix(rng, 3, 2);
    auto loss_at = [&](const Matrix& w) {
        Tape t;
        ValueId wid = t.input(w);
        ValueId xid = t.constant(x);
        ValueId out = t.linear(wid, xid, "l0");
        return t.value(t.squared_fro(out)).at(0, 0);
    };
    Tape t;
    ValueId wid = t.input(w0);
    ValueId xid = t.constant(x);
    ValueId out = t.linear(wid, xid, "l0");
    ValueId loss = t.squared_fro(out);
    auto result = t.backward(loss);
    Matrix fd = finite_diff_grad(loss_at, w0, 1e-6);
    CHECK(relative_frobenius_error(result.grad(wid), fd, 1e-30) < 1e-6);
}

TEST_CASE("two layer net: per-layer trace outer products reassemble weight gradients") {
    Rng rng(17);
    Matrix w1 = random_matrix(rng, 4, 3);
    Matrix w2 = random_matrix(rng, 2, 4);
    Matrix x = random_matrix(rng, 5, 3);
    Tape t;
    ValueId w1id = t.input(w1);
    ValueId w2id = t.input(w2);
    ValueId xid = t.constant(x);
    ValueId h = t.gelu(t.linear(w1id, xid, "l1"));
    ValueId out = t.linear(w2id, h, "l2");
    ValueId loss = t.squared_fro(out);
    auto result = t.backward(loss, /*collect_traces=*/true);
    REQUIRE(result.traces.size() == 2);
    for (const auto& trace : result.traces) {
        Matrix reassembled = matmul(trace.delta, trace.u, true, false);
        const Matrix& grad = trace.layer_id == "l1" ? result.grad(w1id) : result.grad(w2id);
        CHECK(relative_frobenius_error(reassembled, grad, 1e-30) < 1e-9);
    }
}

TEST_CASE("finite_diff_grad basics") {
    Matrix x = Matrix::from_rows({{1, 2}});
    Matrix ones = finite_diff_grad([](const Matrix& m) { return sum(m); }, x, 1e-5);
    CHECK(ones.at(0, 0) == doctest::Approx(1).epsilon(1e-8));
    CHECK(ones.at(0, 1) == doctest::Approx(1).epsilon(1e-8));

    Matrix gq = finite_diff_grad(
        [](const Matrix& m) { return real_t(0.5) * squared_frobenius(m); }, x, 1e-5);
    CHECK(std::abs(gq.at(0, 0) - 1) < 1e-8);
    CHECK(std::abs(gq.at(0, 1) - 2) < 1e-8);

    // softmax cross entropy on 3 logits vs analytic softmax - onehot
    Matrix logits = Matrix::from_rows({{0.3, -1.2, 0.7}});
    auto xent = [](const Matrix& z) {
        Tape t;
        ValueId zid = t.input(z);
        ValueId loss = t.softmax_cross_entropy(zid, {2}, {1});
        return t.value(loss).at(0, 0);
    };
    Matrix fd = finite_diff_grad(xent, logits, 1e-5);
    real_t denom = 0;
    for (int v = 0; v < 3; ++v) denom += std::exp(logits.at(0, v));
    for (int v = 0; v < 3; ++v) {
        const real_t analytic = std::exp(logits.at(0, v)) / denom - (v == 2 ? 1 : 0);
        CHECK(std::abs(fd.at(0, v) - analytic) < 1e-6);
    }

    CHECK_THROWS_AS(finite_diff_grad([](const Matrix&) { return real_t(0); }, x, 0), Error);
}

TEST_CASE("every op passes a finite-difference spot check") {
    Rng rng(23);
    const Matrix a0 = random_matrix(rng, 3, 4);
    const Matrix b0 = random_matrix(rng, 3, 4);
    const Matrix r0 = random_matrix(rng, 1, 4);
    const Matrix c0 = random_matrix(rng, 3, 1);
    const Matrix m0 = random_matrix(rng, 4, 5);

    auto fd_vs_analytic = [&](const std::function<ValueId(Tape&, ValueId)>& build,
                              const Matrix& point, real_t tol = 2e-6) {
        auto fn = [&](const Matrix& p) {
            Tape t;
            ValueId leaf = t.input(p);
            ValueId loss = build(t, leaf);
            return t.value(loss).at(0, 0);
        };
        Tape t;
        ValueId leaf = t.input(point);
        ValueId loss = build(t, leaf);
        auto result = t.backward(loss);
        Matrix fd = finite_diff_grad(fn, point, 1e-5);
        const real_t denom = std::max<real_t>(frobenius_norm(fd), real_t(1e-6));
        CHECK(frobenius_norm(sub(result.grad(leaf), fd)) / denom < tol);
    };

    SUBCASE("matmul all transpose combinations") {
        for (bool ta : {false, true}) {
            for (bool tb : {false, true}) {
                fd_vs_analytic(
                    [&](Tape& t, ValueId leaf) {
                        Matrix other = tb ? transpose(m0) : m0;
                        ValueId o = t.constant(other);
                        ValueId prod = ta ? t.matmul(leaf, o, true, tb) : t.matmul(leaf, o, false, tb);
                        return t.squared_fro(prod);
                    },
                    ta ? transpose(a0) : a0);
            }
        }
    }
    SUBCASE("add sub scale hadamard") {
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.add(leaf, t.constant(b0)));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.sub(t.constant(b0), leaf));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.scale(leaf, real_t(-2.5)));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.hadamard(leaf, t.constant(b0)));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.hadamard(t.constant(b0), leaf));
        }, a0);
    }
    SUBCASE("row broadcast ops") {
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.add_row(leaf, t.constant(r0)));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.add_row(t.constant(a0), leaf));
        }, r0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.mul_row(leaf, t.constant(r0)));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.mul_row(t.constant(a0), leaf));
        }, r0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.scale_rows(leaf, t.constant(c0)));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.scale_rows(t.constant(a0), leaf));
        }, c0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.row_sum(leaf));
        }, a0);
    }
    SUBCASE("gelu concat slice embed prefix_mean") {
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.gelu(leaf));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.concat_cols(leaf, t.constant(b0)));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.concat_cols(t.constant(b0), leaf));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.slice_cols(leaf, 1, 3));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.embed_rows(leaf, {2, 0, 2, 1}));
        }, random_matrix(rng, 3, 4));
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.prefix_mean(leaf, {2, 1}));
        }, a0);
    }
    SUBCASE("losses and scalars") {
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.softmax_cross_entropy(leaf, {1, 0, 3}, {1, 0, 1});
        }, a0);
        Matrix dist(3, 4);
        for (int i = 0; i < 3; ++i) {
            real_t total = 0;
            for (int j = 0; j < 4; ++j) {
                dist.at(i, j) = std::exp(static_cast<real_t>(rng.normal()));
                total += dist.at(i, j);
            }
            for (int j = 0; j < 4; ++j) dist.at(i, j) /= total;
        }
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.soft_cross_entropy(leaf, dist, {1, 1, 0});
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.reduce_sum(t.gelu(leaf));
        }, a0);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.exp_scalar(leaf));
        }, Matrix::scalar(real_t(0.3)));
    }
    SUBCASE("ridge solve: all three input paths") {
        const Matrix drows = random_matrix(rng, 4, 3);
        const Matrix urows = random_matrix(rng, 4, 2);
        const Matrix lam = Matrix::scalar(real_t(0.7));
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.ridge_solve(leaf, t.constant(urows), t.constant(lam)));
        }, drows, 5e-6);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(t.ridge_solve(t.constant(drows), leaf, t.constant(lam)));
        }, urows, 5e-6);
        fd_vs_analytic([&](Tape& t, ValueId leaf) {
            return t.squared_fro(
                t.ridge_solve(t.constant(drows), t.constant(urows), t.exp_scalar(leaf)));
        }, Matrix::scalar(real_t(-0.4)), 5e-6);
    }
}

TEST_CASE("backward is pure: two calls return bitwise-identical gradients") {
    Rng rng(31);
    Matrix w = random_matrix(rng, 6, 4);
    Matrix x = random_matrix(rng, 3, 4);
    Tape t;
    ValueId wid = t.input(w);
    ValueId xid = t.constant(x);
    ValueId out = t.gelu(t.linear(wid, xid, "l0"));
    ValueId loss = t.squared_fro(out);
    auto r1 = t.backward(loss, true);
    auto r2 = t.backward(loss, true);
    CHECK(bitwise_equal(r1.grad(wid), r2.grad(wid)));
    REQUIRE(r1.traces.size() == r2.traces.size());
    for (std::size_t i = 0; i < r1.traces.size(); ++i) {
        CHECK(bitwise_equal(r1.traces[i].u, r2.traces[i].u));
        CHECK(bitwise_equal(r1.traces[i].delta, r2.traces[i].delta));
    }
}

TEST_CASE("random small nets: analytic gradients match finite differences") {
    Rng rng(77);
    for (int trial = 0; trial < 6; ++trial) {
        const int d_in = 2 + rng.uniform_int(6);
        const int d_mid = 2 + rng.uniform_int(6);
        const int d_out = 2 + rng.uniform_int(4);
        const int rows = 1 + rng.uniform_int(3);
        Matrix w1 = random_matrix(rng, d_mid, d_in, real_t(0.7));
        Matrix w2 = random_matrix(rng, d_out, d_mid, real_t(0.7));
        Matrix x = random_matrix(rng, rows, d_in);
        std::vector<int> targets(static_cast<std::size_t>(rows));
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(rows), 1);
        for (auto& tgt : targets) tgt = rng.uniform_int(d_out);

        auto loss_of = [&](const Matrix& w1v, const Matrix& w2v) {
            Tape t;
            ValueId w1id = t.input(w1v);
            ValueId w2id = t.input(w2v);
            ValueId h = t.gelu(t.linear(w1id, t.constant(x), "a"));
            ValueId z = t.linear(w2id, h, "b");
            return t.softmax_cross_entropy(z, targets, mask);
        };

        Tape t;
        ValueId w1id = t.input(w1);
        ValueId w2id = t.input(w2);
        ValueId h = t.gelu(t.linear(w1id, t.constant(x), "a"));
        ValueId z = t.linear(w2id, h, "b");
        ValueId loss = t.softmax_cross_entropy(z, targets, mask);
        auto result = t.backward(loss);

        Matrix fd1 = finite_diff_grad(
            [&](const Matrix& p) {
                Tape tt;
                ValueId a = tt.input(p);
                ValueId b = tt.input(w2);
                ValueId hh = tt.gelu(tt.linear(a, tt.constant(x), "a"));
                ValueId zz = tt.linear(b, hh, "b");
                return tt.value(tt.softmax_cross_entropy(zz, targets, mask)).at(0, 0);
            },
            w1, 1e-5);
        (void)loss_of;
        const real_t denom1 = std::max<real_t>(frobenius_norm(fd1), real_t(1e-8));
        CHECK(frobenius_norm(sub(result.grad(w1id), fd1)) / denom1 < 1e-4);
    }
}

TEST_CASE("independent tapes can run in parallel threads") {
    auto work = [](std::uint64_t seed, Matrix* grad_out) {
        Rng rng(seed);
        Matrix w(8, 8);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) w.at(i, j) = static_cast<real_t>(rng.normal());
        Tape t;
        ValueId wid = t.input(w);
        ValueId x = t.constant(Matrix::identity(8));
        ValueId loss = t.squared_fro(t.gelu(t.linear(wid, x, "l")));
        *grad_out = t.backward(loss).grad(wid);
    };
    Matrix g1, g2, g1_again;
    std::thread t1(work, 100, &g1);
    std::thread t2(work, 200, &g2);
    t1.join();
    t2.join();
    work(100, &g1_again);
    CHECK(bitwise_equal(g1, g1_again));
    CHECK_FALSE(bitwise_equal(g1, g2));
}

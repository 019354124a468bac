// Tensor ops, the reverse-mode tape, Adam, and the finite-difference checker.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mmsn/autodiff.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/gradcheck.hpp"
#include "mmsn/linalg.hpp"
#include "mmsn/param_store.hpp"
#include "mmsn/rng.hpp"
#include "mmsn/tensor.hpp"

#if MMSN_HAVE_EIGEN
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#endif

using namespace mmsn;

namespace {

// Triple-loop product, written independently of matmul's tiling order.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    Tensor c(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

#if MMSN_HAVE_EIGEN
Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
    return m;
}
#endif

}  // namespace

TEST_CASE("tensor: matmul matches a triple-loop oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        int m = 1 + static_cast<int>(rng.uniform_int(6));
        int k = 1 + static_cast<int>(rng.uniform_int(6));
        int n = 1 + static_cast<int>(rng.uniform_int(6));
        Tensor a = Tensor::uniform(m, k, -2.0, 2.0, rng);
        Tensor b = Tensor::uniform(k, n, -2.0, 2.0, rng);
        Tensor ref = matmul_oracle(a, b);
        CHECK(max_abs_diff(matmul(a, b), ref) <= 1e-12);
        CHECK(max_abs_diff(matmul_tn(transpose(a), b), ref) <= 1e-12);
        CHECK(max_abs_diff(matmul_nt(a, transpose(b)), ref) <= 1e-12);
    }
}

TEST_CASE("tensor: shape mismatches throw ContractError") {
    Tensor a = Tensor::zeros(2, 3);
    Tensor b = Tensor::zeros(2, 3);
    CHECK_THROWS_AS(matmul(a, b), ContractError);
    CHECK_THROWS_AS(add(a, Tensor::zeros(3, 2)), ContractError);
    CHECK_THROWS_AS(hadamard(a, Tensor::zeros(2, 2)), ContractError);
    CHECK_THROWS_AS(dot(a, Tensor::zeros(2, 2)), ContractError);
}

TEST_CASE("tensor: transpose and kron structure") {
    Tensor a = Tensor::from_rows({{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}});
    Tensor at = transpose(a);
    REQUIRE(at.rows() == 3);
    REQUIRE(at.cols() == 2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) CHECK(at.at(j, i) == a.at(i, j));

    Tensor b = Tensor::from_rows({{0.0, 1.0}, {2.0, 0.0}});
    Tensor k = kron(a, b);
    REQUIRE(k.rows() == 4);
    REQUIRE(k.cols() == 6);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j) CHECK(k.at(i, j) == a.at(i / 2, j / 2) * b.at(i % 2, j % 2));
}

TEST_CASE("autodiff: softmax rows form a probability distribution") {
    Tape t;
    Var z = t.constant(Tensor::zeros(1, 3));
    Tensor uniform = t.val(softmax_rows(z));
    for (int j = 0; j < 3; ++j) CHECK(uniform.at(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Rng rng(5);
    Var x = t.constant(Tensor::uniform(6, 5, -30.0, 30.0, rng));
    Tensor p = t.val(softmax_rows(x));
    for (int i = 0; i < p.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < p.cols(); ++j) {
            CHECK(p.at(i, j) > 0.0);
            s += p.at(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }

    // large logits must not overflow
    Var big = t.constant(Tensor::from_rows({{1000.0, 999.0, -1000.0}}));
    Tensor pb = t.val(softmax_rows(big));
    CHECK(pb.is_finite());
    CHECK(pb.at(0, 0) > pb.at(0, 1));
}

TEST_CASE("autodiff: bce_with_logits matches closed forms") {
    Tape t;
    Var z0 = t.constant(Tensor::zeros(1, 1));
    CHECK(bce_with_logits(z0, Tensor::full(1, 1, 1.0)).scalar() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(bce_with_logits(z0, Tensor::zeros(1, 1)).scalar() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Var z20 = t.constant(Tensor::full(1, 1, 20.0));
    CHECK(bce_with_logits(z20, Tensor::full(1, 1, 1.0)).scalar() < 1e-8);
    CHECK(bce_with_logits(z20, Tensor::zeros(1, 1)).scalar() == doctest::Approx(20.0).epsilon(1e-6));

    // per-element oracle: mean of y*log(1+e^-z) + (1-y)*log(1+e^z)
    Rng rng(17);
    Tensor logits = Tensor::uniform(4, 3, -3.0, 3.0, rng);
    Tensor targets(4, 3);
    for (int i = 0; i < targets.size(); ++i) targets[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    double expected = 0.0;
    for (int i = 0; i < logits.size(); ++i) {
        double z = logits[i], y = targets[i];
        expected += y * std::log1p(std::exp(-z)) + (1.0 - y) * std::log1p(std::exp(z));
    }
    expected /= logits.size();
    Var z = t.constant(logits);
    CHECK(bce_with_logits(z, targets).scalar() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("autodiff: closed-form gradients") {
    SUBCASE("d/dw of w.w at (1,2) is (2,4)") {
        Tape t;
        Var w = t.leaf(Tensor::from_rows({{1.0, 2.0}}));
        Var zero = t.constant(Tensor::zeros(1, 2));
        t.backward(sum_sq_diff(w, zero));
        Tensor g = t.grad(w);
        CHECK(g.at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(g.at(0, 1) == doctest::Approx(4.0).epsilon(1e-12));
    }
    SUBCASE("sum of softmax is constant, so its gradient vanishes") {
        Tape t;
        Rng rng(3);
        Var x = t.leaf(Tensor::uniform(3, 4, -2.0, 2.0, rng));
        t.backward(sum_all(softmax_rows(x)));
        Tensor g = t.grad(x);
        for (int i = 0; i < g.size(); ++i) CHECK(std::abs(g[i]) <= 1e-12);
    }
    SUBCASE("matmul gradient against the ones cotangent") {
        // loss = sum(a b) => da = ones * b^T, db = a^T * ones
        Tape t;
        Rng rng(9);
        Tensor av = Tensor::uniform(3, 2, -1.0, 1.0, rng);
        Tensor bv = Tensor::uniform(2, 4, -1.0, 1.0, rng);
        Var a = t.leaf(av);
        Var b = t.leaf(bv);
        t.backward(sum_all(matmul(a, b)));
        Tensor ones_ab = Tensor::full(3, 4, 1.0);
        CHECK(max_abs_diff(t.grad(a), matmul_nt(ones_ab, bv)) <= 1e-12);
        CHECK(max_abs_diff(t.grad(b), matmul_tn(av, ones_ab)) <= 1e-12);
    }
}

TEST_CASE("autodiff: finite differences validate every primitive") {
    // Each subcase registers leaves in a store and builds a scalar loss that
    // routes through the op under test; the checker compares tape gradients
    // against central differences.
    Rng rng(21);
    auto run = [](ParamStore& store, const LossFn& f) {
        GradCheckReport r = finite_diff_check(store, f, 1e-5, 1e-4);
        INFO("worst param ", r.worst_param, " rel err ", r.max_rel_err);
        CHECK(r.passed);
        CHECK(r.n_checked > 0);
        return r;
    };

    SUBCASE("matmul + transpose + add + scale") {
        ParamStore s;
        s.add("a", Tensor::uniform(3, 2, -1.0, 1.0, rng));
        s.add("b", Tensor::uniform(3, 4, -1.0, 1.0, rng));
        run(s, [&](Tape& t) {
            Var a = t.param(s, "a");
            Var b = t.param(s, "b");
            Var c = matmul(transpose(a), b);           // 2x4
            return sum_sq_diff(2.5 * c, t.constant(Tensor::full(2, 4, 0.3)));
        });
    }
    SUBCASE("relu away from the kink") {
        ParamStore s;
        s.add("x", Tensor::uniform(4, 3, 0.2, 1.5, rng));
        run(s, [&](Tape& t) { return sum_all(relu(t.param(s, "x") - t.constant(Tensor::full(4, 3, 0.1)))); });
    }
    SUBCASE("sigmoid and softmax") {
        ParamStore s;
        s.add("x", Tensor::uniform(3, 4, -2.0, 2.0, rng));
        run(s, [&](Tape& t) {
            Var x = t.param(s, "x");
            return sum_sq_diff(softmax_rows(sigmoid(x)), t.constant(Tensor::full(3, 4, 0.25)));
        });
    }
    SUBCASE("bce_with_logits") {
        ParamStore s;
        s.add("z", Tensor::uniform(2, 4, -2.0, 2.0, rng));
        Tensor y(2, 4);
        for (int i = 0; i < y.size(); ++i) y[i] = (i % 3 == 0) ? 1.0 : 0.0;
        run(s, [&](Tape& t) { return bce_with_logits(t.param(s, "z"), y); });
    }
    SUBCASE("reductions: sum_rows, sum_all, mean_all") {
        ParamStore s;
        s.add("x", Tensor::uniform(4, 3, -1.0, 1.0, rng));
        run(s, [&](Tape& t) {
            Var x = t.param(s, "x");
            Var r = sum_rows(x);  // 1x3
            return add(sum_sq_diff(r, t.constant(Tensor::full(1, 3, 0.5))), mean_all(x));
        });
    }
    SUBCASE("concat_cols and concat_rows") {
        ParamStore s;
        s.add("a", Tensor::uniform(2, 2, -1.0, 1.0, rng));
        s.add("b", Tensor::uniform(2, 3, -1.0, 1.0, rng));
        s.add("c", Tensor::uniform(3, 5, -1.0, 1.0, rng));
        run(s, [&](Tape& t) {
            Var top = concat_cols(t.param(s, "a"), t.param(s, "b"));  // 2x5
            Var all = concat_rows({top, t.param(s, "c")});            // 5x5
            return sum_sq_diff(all, t.constant(Tensor::full(5, 5, 0.1)));
        });
    }
    SUBCASE("row_slice, gather_rows, scatter_add_rows") {
        ParamStore s;
        s.add("x", Tensor::uniform(5, 3, -1.0, 1.0, rng));
        run(s, [&](Tape& t) {
            Var x = t.param(s, "x");
            Var sl = row_slice(x, 1, 4);                       // 3x3
            Var gt = gather_rows(x, {4, 0, 0, 2});             // 4x3, duplicate row
            Var sc = scatter_add_rows(gt, {0, 1, 1, 2}, 3);    // 3x3, colliding rows
            return add(sum_sq_diff(sl, t.constant(Tensor::full(3, 3, 0.2))), sum_all(sc));
        });
    }
    SUBCASE("add_rowvec broadcast") {
        ParamStore s;
        s.add("x", Tensor::uniform(4, 3, -1.0, 1.0, rng));
        s.add("b", Tensor::uniform(1, 3, -1.0, 1.0, rng));
        run(s, [&](Tape& t) {
            return sum_sq_diff(add_rowvec(t.param(s, "x"), t.param(s, "b")),
                               t.constant(Tensor::zeros(4, 3)));
        });
    }
    SUBCASE("block_matmul with and without transposes") {
        ParamStore s;
        s.add("a", Tensor::uniform(6, 2, -1.0, 1.0, rng));  // two 3x2 blocks
        s.add("b", Tensor::uniform(6, 2, -1.0, 1.0, rng));
        run(s, [&](Tape& t) {
            Var a = t.param(s, "a");
            Var b = t.param(s, "b");
            Var nt = block_matmul(a, b, 3, 3, true, false);   // blocks: (2x3)(3x2) -> 4x2
            Var tt = block_matmul(a, b, 3, 3, false, true);   // blocks: (3x2)(2x3) -> 6x3
            return add(sum_sq_diff(nt, t.constant(Tensor::full(4, 2, 0.1))), sum_all(tt));
        });
    }
    SUBCASE("sym_invsqrt_blocks on SPD blocks away from the clamp") {
        ParamStore s;
        s.add("m", Tensor::uniform(4, 2, 0.3, 1.0, rng));  // two 2x2 blocks
        run(s, [&](Tape& t) {
            Var m = t.param(s, "m");
            // symmetrize inside the graph: S_k = M_k M_k^T + I
            Var spd = add(block_matmul(m, m, 2, 2, false, true),
                          t.constant(Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}, {0.0, 1.0}})));
            return sum_sq_diff(sym_invsqrt_blocks(spd, 2, 1e-8), t.constant(Tensor::zeros(4, 2)));
        });
    }
    SUBCASE("mean_of") {
        ParamStore s;
        s.add("a", Tensor::uniform(1, 1, -1.0, 1.0, rng));
        s.add("b", Tensor::uniform(1, 1, -1.0, 1.0, rng));
        run(s, [&](Tape& t) {
            Var a = sum_sq_diff(t.param(s, "a"), t.constant(Tensor::zeros(1, 1)));
            Var b = sum_sq_diff(t.param(s, "b"), t.constant(Tensor::full(1, 1, 2.0)));
            return mean_of({a, b, a});
        });
    }
    SUBCASE("two-layer relu network end to end") {
        ParamStore s;
        s.add("w1", Tensor::uniform(3, 4, -0.8, 0.8, rng));
        s.add("b1", Tensor::uniform(1, 4, -0.3, 0.3, rng));
        s.add("w2", Tensor::uniform(4, 2, -0.8, 0.8, rng));
        Tensor x = Tensor::uniform(5, 3, -1.0, 1.0, rng);
        Tensor y(5, 2);
        for (int i = 0; i < y.size(); ++i) y[i] = (i % 2 == 0) ? 1.0 : 0.0;
        run(s, [&](Tape& t) {
            Var h = relu(add_rowvec(matmul(t.constant(x), t.param(s, "w1")), t.param(s, "b1")));
            return bce_with_logits(matmul(h, t.param(s, "w2")), y);
        });
    }
}

TEST_CASE("autodiff: block_matmul forward equals per-block dense products") {
    Rng rng(31);
    Tensor a = Tensor::uniform(6, 3, -1.0, 1.0, rng);  // three 2x3 blocks
    Tensor b = Tensor::uniform(9, 4, -1.0, 1.0, rng);  // three 3x4 blocks
    Tape t;
    Tensor out = t.val(block_matmul(t.constant(a), t.constant(b), 2, 3, false, false));
    REQUIRE(out.rows() == 6);
    REQUIRE(out.cols() == 4);
    for (int blk = 0; blk < 3; ++blk) {
        Tensor ab(2, 3), bb(3, 4);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j) ab.at(i, j) = a.at(blk * 2 + i, j);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j) bb.at(i, j) = b.at(blk * 3 + i, j);
        Tensor ref = matmul_oracle(ab, bb);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 4; ++j)
                CHECK(out.at(blk * 2 + i, j) == doctest::Approx(ref.at(i, j)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(block_matmul(t.constant(a), t.constant(b), 4, 3, false, false), ContractError);
    CHECK_THROWS_AS(block_matmul(t.constant(a), t.constant(b), 3, 3, false, false), ContractError);
}

TEST_CASE("autodiff: sym_invsqrt_blocks inverts the square") {
    // For SPD S, (S^{-1/2})^2 S = I.
    Rng rng(41);
    Tensor m = Tensor::uniform(3, 3, -1.0, 1.0, rng);
    Tensor spd = add(matmul_nt(m, m), scale(Tensor::eye(3), 0.5));
    Tape t;
    Tensor r = t.val(sym_invsqrt_blocks(t.constant(spd), 3, 1e-8));
    Tensor should_be_eye = matmul(matmul(r, r), spd);
    CHECK(max_abs_diff(should_be_eye, Tensor::eye(3)) <= 1e-9);
}

TEST_CASE("autodiff: tape contract violations throw") {
    Tape t;
    Var x = t.leaf(Tensor::full(1, 1, 2.0));
    Var loss = sum_sq_diff(x, t.constant(Tensor::zeros(1, 1)));
    t.backward(loss);
    CHECK_THROWS_AS(t.backward(loss), ContractError);  // single-use tape
    t.reset();

    Var y = t.leaf(Tensor::full(2, 2, 1.0));
    CHECK_THROWS_AS(t.backward(y), ContractError);  // non-scalar loss

    Tape other;
    Var z = other.leaf(Tensor::full(1, 1, 1.0));
    CHECK_THROWS_AS(t.backward(z), ContractError);      // loss from another tape
    CHECK_THROWS_AS(add(y, z), ContractError);          // mixing tapes in an op
    CHECK_THROWS_AS((void)y.scalar(), ContractError);   // scalar() on a matrix
}

TEST_CASE("autodiff: non-finite results raise NumericError") {
    Tape t;
    double inf = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(t.constant(Tensor::full(1, 1, inf)), NumericError);
    CHECK_THROWS_AS(t.constant(Tensor::full(1, 1, std::nan(""))), NumericError);

    Var big = t.constant(Tensor::full(1, 1, 1e200));
    // 1e200 squared overflows to inf inside the op
    CHECK_THROWS_AS(sum_sq_diff(big, t.constant(Tensor::zeros(1, 1))), NumericError);
}

TEST_CASE("adam: first step, zero-grad identity, convergence") {
    SUBCASE("first update has magnitude ~lr in the gradient direction") {
        ParamStore s;
        s.add("w", Tensor::from_rows({{1.0, -2.0, 0.5}}));
        s.grad("w") = Tensor::from_rows({{0.3, -4.0, 1e-3}});
        Tensor before = s.value("w");
        s.adam_step(0.01);
        for (int i = 0; i < 3; ++i) {
            double delta = s.value("w")[i] - before[i];
            CHECK(std::abs(delta) <= 0.01 + 1e-12);
            CHECK(std::abs(delta) >= 0.0099);  // |g|/(|g|+eps) ~ 1
            CHECK(delta * s.grad("w")[i] < 0.0);  // moves against the gradient
        }
    }
    SUBCASE("zero gradients leave parameters bit-identical") {
        ParamStore s;
        Rng rng(7);
        s.add("w", Tensor::uniform(3, 3, -1.0, 1.0, rng));
        Tensor before = s.value("w");
        s.zero_grad();
        s.adam_step(0.5);
        for (int i = 0; i < before.size(); ++i) CHECK(s.value("w")[i] == before[i]);
    }
    SUBCASE("100 steps on (w-3)^2 match a scalar recurrence oracle") {
        ParamStore s;
        s.add("w", Tensor::zeros(1, 1));
        // independent scalar re-implementation of the same recurrence
        double w = 0.0, m = 0.0, v = 0.0;
        const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        for (int step = 1; step <= 100; ++step) {
            s.zero_grad();
            {
                Tape t;
                Var wv = t.param(s, "w");
                Var target = t.constant(Tensor::full(1, 1, 3.0));
                t.backward(sum_sq_diff(wv, target));
            }
            s.adam_step(lr);

            double g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            double mhat = m / (1.0 - std::pow(b1, step));
            double vhat = v / (1.0 - std::pow(b2, step));
            w -= lr * mhat / (std::sqrt(vhat) + eps);
            CHECK(s.value("w").at(0, 0) == doctest::Approx(w).epsilon(1e-12));
        }
        CHECK(std::abs(s.value("w").at(0, 0) - 3.0) < 0.5);
    }
    SUBCASE("non-positive learning rate is rejected") {
        ParamStore s;
        s.add("w", Tensor::zeros(1, 1));
        CHECK_THROWS_AS(s.adam_step(0.0), ConfigError);
        CHECK_THROWS_AS(s.adam_step(-0.1), ConfigError);
    }
    SUBCASE("buffers are never updated") {
        ParamStore s;
        s.add_buffer("frozen", Tensor::full(1, 2, 5.0));
        s.grad("frozen") = Tensor::full(1, 2, 100.0);
        s.adam_step(1.0);
        CHECK(s.value("frozen").at(0, 0) == 5.0);
        CHECK(s.value("frozen").at(0, 1) == 5.0);
    }
}

TEST_CASE("param store: registration and lookup contracts") {
    ParamStore s;
    s.add("w", Tensor::zeros(2, 2));
    CHECK_THROWS_AS(s.add("w", Tensor::zeros(1, 1)), ContractError);
    CHECK_THROWS_AS(s.add_buffer("w", Tensor::zeros(1, 1)), ContractError);
    CHECK_THROWS_AS(s.value("nope"), ContractError);
    s.add_buffer("meta", Tensor::full(1, 1, 3.0));
    CHECK(s.names().size() == 2);
    CHECK(s.names(/*trainable_only=*/true) == std::vector<std::string>{"w"});
}

TEST_CASE("param store: binary round trip and corrupt files") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mmsn_store_test";
    fs::create_directories(dir);
    fs::path file = dir / "params.bin";

    ParamStore s;
    Rng rng(13);
    s.add("alpha", Tensor::uniform(3, 4, -5.0, 5.0, rng));
    s.add_buffer("beta", Tensor::uniform(2, 2, -1.0, 1.0, rng));
    s.save(file);

    ParamStore loaded = ParamStore::load(file);
    CHECK(loaded.names() == s.names());
    CHECK(max_abs_diff(loaded.value("alpha"), s.value("alpha")) == 0.0);
    CHECK(max_abs_diff(loaded.value("beta"), s.value("beta")) == 0.0);
    CHECK(loaded.slot("alpha").trainable);
    CHECK_FALSE(loaded.slot("beta").trainable);

    // identical bytes on a second save
    s.save(dir / "params2.bin");
    std::ifstream f1(file, std::ios::binary), f2(dir / "params2.bin", std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(c1 == c2);

    {
        std::ofstream bad(dir / "bad_magic.bin", std::ios::binary);
        bad << "NOPE" << std::string(64, '\0');
    }
    CHECK_THROWS_AS(ParamStore::load(dir / "bad_magic.bin"), ParseError);
    {
        std::ofstream trunc(dir / "trunc.bin", std::ios::binary);
        trunc.write(c1.data(), static_cast<std::streamsize>(c1.size() / 2));
    }
    CHECK_THROWS_AS(ParamStore::load(dir / "trunc.bin"), ParseError);
    CHECK_THROWS_AS(ParamStore::load(dir / "missing.bin"), IoError);

    fs::remove_all(dir);
}

TEST_CASE("gradcheck: near-exact on a smooth quadratic, catches corrupted gradients") {
    SUBCASE("quadratic loss") {
        ParamStore s;
        Rng rng(19);
        s.add("x", Tensor::uniform(2, 3, -1.0, 1.0, rng));
        GradCheckReport r = finite_diff_check(
            s, [&](Tape& t) { return sum_sq_diff(t.param(s, "x"), t.constant(Tensor::full(2, 3, 0.7))); });
        CHECK(r.passed);
        CHECK(r.n_checked == 6);
        CHECK(r.max_rel_err < 1e-8);
    }
    SUBCASE("an op with a wrong backward fails the check") {
        // custom op: forward is identity, backward doubles the cotangent
        auto broken_identity = [](const Var& a) {
            Tape& t = *a.tape;
            int aid = a.id;
            return t.make(t.val(a), {aid}, t.needs(aid),
                          [aid](Tape& t, int self) {
                              t.accum(aid, mmsn::scale(t.out_grad(self), 2.0));
                          },
                          "broken_identity");
        };
        ParamStore s;
        s.add("x", Tensor::full(1, 2, 0.4));
        GradCheckReport r = finite_diff_check(s, [&](Tape& t) {
            return sum_sq_diff(broken_identity(t.param(s, "x")), t.constant(Tensor::zeros(1, 2)));
        });
        CHECK_FALSE(r.passed);
        CHECK(r.max_rel_err > 0.4);  // doubled gradient -> rel err ~1/2
    }
    SUBCASE("entry striding caps the work") {
        ParamStore s;
        Rng rng(23);
        s.add("x", Tensor::uniform(10, 10, -1.0, 1.0, rng));
        GradCheckReport r = finite_diff_check(
            s, [&](Tape& t) { return sum_sq_diff(t.param(s, "x"), t.constant(Tensor::zeros(10, 10))); },
            1e-5, 1e-4, /*max_entries_per_param=*/10);
        CHECK(r.passed);
        CHECK(r.n_checked <= 10);
        CHECK(r.n_checked > 0);
    }
    SUBCASE("non-positive step size is rejected") {
        ParamStore s;
        s.add("x", Tensor::zeros(1, 1));
        CHECK_THROWS_AS(
            finite_diff_check(s, [&](Tape& t) { return sum_all(t.param(s, "x")); }, 0.0), ContractError);
    }
}

#if MMSN_HAVE_EIGEN
TEST_CASE("linalg: eigenvalues, inverse sqrt, and solves agree with Eigen") {
    Rng rng(29);
    for (int trial = 0; trial < 10; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(5));
        Tensor m = Tensor::uniform(n, n, -2.0, 2.0, rng);
        Tensor sym = scale(add(m, transpose(m)), 0.5);

        std::vector<double> vals = sym_eigenvalues(sym);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(sym));
        REQUIRE(static_cast<int>(vals.size()) == n);
        for (int i = 0; i < n; ++i) CHECK(vals[i] == doctest::Approx(es.eigenvalues()(i)).epsilon(1e-9));
        for (int i = 1; i < n; ++i) CHECK(vals[i] >= vals[i - 1] - 1e-12);  // ascending

        Tensor spd = add(matmul_nt(m, m), scale(Tensor::eye(n), 0.1));
        Tensor inv_sqrt = sym_invsqrt(spd, 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(to_eigen(spd));
        Eigen::MatrixXd ref = es2.operatorInverseSqrt();
        CHECK(max_abs_diff(inv_sqrt, Tensor::zeros(n, n)) > 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                CHECK(inv_sqrt.at(i, j) == doctest::Approx(ref(i, j)).epsilon(1e-8));

        Tensor b = Tensor::uniform(n, 2, -1.0, 1.0, rng);
        Tensor x = spd_solve(spd, b);
        CHECK(max_abs_diff(matmul(spd, x), b) <= 1e-8);

        // least squares via explicit normal equations
        Tensor xd = Tensor::uniform(n + 4, n, -1.0, 1.0, rng);
        Tensor yd = Tensor::uniform(n + 4, 3, -1.0, 1.0, rng);
        Tensor w = least_squares(xd, yd, 1e-10);
        Tensor lhs = add(matmul_tn(xd, xd), scale(Tensor::eye(n), 1e-10));
        Tensor rhs = matmul_tn(xd, yd);
        CHECK(max_abs_diff(matmul(lhs, w), rhs) <= 1e-8);
    }
}
#endif

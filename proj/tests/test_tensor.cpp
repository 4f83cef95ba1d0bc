#include <catch2/catch_amalgamated.hpp>

#include "mext/autograd.hpp"
#include "mext/tensor.hpp"
#include "testutil.hpp"

using namespace mext;
using Catch::Approx;

namespace {

Tensor<double> rand_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

// FD check of d(sum of weighted outputs)/d(input) for a unary graph builder.
// A fixed random weighting turns the output into a scalar without hiding
// per-element errors the way plain sum would for softmax-like ops.
template <typename BuildFn>
void check_unary_grad(BuildFn build, Shape in_shape, uint64_t seed, double scale = 1.0,
                      double tol = 1e-7) {
    Rng rng(seed);
    Tensor<double> x = rand_tensor(in_shape, rng, scale);
    Shape out_shape;
    {
        GradTape<double> probe;
        out_shape = probe.val(build(probe, probe.leaf(x))).shape;
    }
    Tensor<double> w = rand_tensor(out_shape, rng);

    auto loss_value = [&](const Tensor<double>& xt) {
        GradTape<double> tape;
        Var in = tape.leaf(xt, true);
        Var out = build(tape, in);
        Var wv = tape.constant(Tensor<double>(tape.val(out).shape, w.data));
        return tape.val(tape.sum(tape.mul(out, wv))).data[0];
    };

    GradTape<double> tape;
    Var in = tape.leaf(x, true);
    Var out = build(tape, in);
    Var wv = tape.constant(Tensor<double>(tape.val(out).shape, w.data));
    Var loss = tape.sum(tape.mul(out, wv));
    tape.backward_into(loss);
    Tensor<double> analytic = tape.grad(in);

    const double h = 1e-6;
    for (int64_t i = 0; i < x.numel(); ++i) {
        Tensor<double> xp = x, xm = x;
        xp.data[size_t(i)] += h;
        xm.data[size_t(i)] -= h;
        const double fd = (loss_value(xp) - loss_value(xm)) / (2 * h);
        INFO("coord " << i);
        REQUIRE(testutil::rel_err(analytic.data[size_t(i)], fd) < tol);
    }
}

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
    GradTape<double> tape;
    Var a = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    Var b = tape.constant(Tensor<double>({2, 1}, {1, 1}));
    const Tensor<double>& c = tape.val(tape.matmul(a, b));
    REQUIRE(c.shape == Shape{2, 1});
    CHECK(c.data[0] == Approx(3.0));
    CHECK(c.data[1] == Approx(7.0));
}

TEST_CASE("matmul identity and annihilator") {
    Rng rng(3);
    Tensor<double> m = rand_tensor({4, 4}, rng);
    Tensor<double> eye({4, 4});
    for (int i = 0; i < 4; ++i) eye.data[size_t(i * 4 + i)] = 1.0;

    GradTape<double> tape;
    Var vm = tape.constant(m);
    Var vi = tape.constant(eye);
    Var vz = tape.constant(zeros<double>({4, 4}));
    CHECK(bitwise_equal(tape.val(tape.matmul(vi, vm)), m));
    const Tensor<double>& z = tape.val(tape.matmul(vz, vm));
    for (double v : z.data) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch raises a dimension error") {
    GradTape<float> tape;
    Var a = tape.constant(zeros<float>({2, 3}));
    Var b = tape.constant(zeros<float>({2, 3}));
    CHECK_THROWS_AS(tape.matmul(a, b), ShapeError);
}

TEST_CASE("softmax_rows examples") {
    GradTape<double> tape;
    Var x = tape.constant(
        Tensor<double>({3, 2}, {0.0, 0.0, 1000.0, 1000.0, std::log(2.0), 0.0}));
    const Tensor<double>& p = tape.val(tape.softmax_rows(x));
    CHECK(p.at(0, 0) == Approx(0.5));
    CHECK(p.at(0, 1) == Approx(0.5));
    CHECK(p.at(1, 0) == Approx(0.5));  // max-shift keeps huge logits finite
    CHECK(p.at(1, 1) == Approx(0.5));
    CHECK(p.at(2, 0) == Approx(2.0 / 3.0));
    CHECK(p.at(2, 1) == Approx(1.0 / 3.0));
}

TEST_CASE("softmax_rows: rows sum to one and shifting a row is a no-op") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> x = rand_tensor({5, 7}, rng, 3.0);
        Tensor<double> shifted = x;
        const double c = rng.normal() * 10.0;
        for (int64_t j = 0; j < 7; ++j) shifted.data[size_t(2 * 7 + j)] += c;

        GradTape<double> tape;
        const Tensor<double>& p = tape.val(tape.softmax_rows(tape.constant(x)));
        const Tensor<double>& ps = tape.val(tape.softmax_rows(tape.constant(shifted)));
        for (int64_t i = 0; i < 5; ++i) {
            double sum = 0;
            for (int64_t j = 0; j < 7; ++j) sum += p.at(i, j);
            CHECK(sum == Approx(1.0).margin(1e-6));
        }
        for (int64_t j = 0; j < 7; ++j) CHECK(ps.at(2, j) == Approx(p.at(2, j)).margin(1e-9));
    }
}

TEST_CASE("backward: sum gives all-ones, quadratic gives the weights back") {
    Rng rng(5);
    Tensor<double> w = rand_tensor({3, 4}, rng);

    GradTape<double> tape;
    Var vw = tape.param("w", w);
    auto grads = tape.backward(tape.sum(vw));
    for (double g : grads.at("w").data) CHECK(g == 1.0);

    GradTape<double> tape2;
    Var vw2 = tape2.param("w", w);
    auto grads2 = tape2.backward(tape2.scale(tape2.sum(tape2.mul(vw2, vw2)), 0.5));
    for (int64_t i = 0; i < w.numel(); ++i)
        CHECK(grads2.at("w").data[size_t(i)] == Approx(w.data[size_t(i)]).margin(1e-12));
}

TEST_CASE("backward requires a scalar loss") {
    GradTape<double> tape;
    Var w = tape.param("w", zeros<double>({2, 2}));
    CHECK_THROWS_AS(tape.backward(tape.mul(w, w)), ContractError);
}

TEST_CASE("backward: untouched params map to zero tensors") {
    GradTape<double> tape;
    Var a = tape.param("a", full<double>({3}, 2.0));
    tape.param("b", full<double>({2, 2}, 1.0));
    auto grads = tape.backward(tape.sum(a));
    REQUIRE(grads.count("b") == 1);
    CHECK(grads.at("b").shape == Shape{2, 2});
    for (double g : grads.at("b").data) CHECK(g == 0.0);
}

TEST_CASE("backward of a random 3-layer MLP matches finite differences") {
    // independent oracle: recompute the loss from scratch per perturbation
    Rng rng(21);
    const int64_t d0 = 6, d1 = 8, d2 = 5, d3 = 3;
    std::map<std::string, Tensor<double>> params;
    params["w1"] = rand_tensor({d0, d1}, rng, 0.5);
    params["b1"] = rand_tensor({d1}, rng, 0.1);
    params["w2"] = rand_tensor({d1, d2}, rng, 0.5);
    params["b2"] = rand_tensor({d2}, rng, 0.1);
    params["w3"] = rand_tensor({d2, d3}, rng, 0.5);
    params["b3"] = rand_tensor({d3}, rng, 0.1);
    const Tensor<double> x = rand_tensor({4, d0}, rng);
    const Tensor<double> target = rand_tensor({4, d3}, rng);

    auto forward = [&](const std::map<std::string, Tensor<double>>& p, GradTape<double>& tape,
                       std::map<std::string, Var>* vars) {
        auto reg = [&](const std::string& n) {
            Var v = tape.param(n, p.at(n));
            if (vars) (*vars)[n] = v;
            return v;
        };
        Var h1 = tape.gelu(tape.add_bias(tape.matmul(tape.constant(x), reg("w1")), reg("b1")));
        Var h2 = tape.gelu(tape.add_bias(tape.matmul(h1, reg("w2")), reg("b2")));
        Var out = tape.add_bias(tape.matmul(h2, reg("w3")), reg("b3"));
        Var diff = tape.add(out, tape.scale(tape.constant(target), -1.0));
        return tape.mean(tape.mul(diff, diff));
    };

    GradTape<double> tape;
    auto grads = tape.backward(forward(params, tape, nullptr));

    Rng pick(77);
    double max_rel = 0.0;
    for (auto& [name, tensor] : params) {
        for (int trial = 0; trial < 8; ++trial) {
            const int64_t i = int64_t(pick.below(uint64_t(tensor.numel())));
            auto loss_of = [&](const std::map<std::string, Tensor<double>>& p) {
                GradTape<double> t2;
                return t2.val(forward(p, t2, nullptr)).data[0];
            };
            const double h = 1e-5;
            auto pp = params, pm = params;
            pp[name].data[size_t(i)] += h;
            pm[name].data[size_t(i)] -= h;
            const double fd = (loss_of(pp) - loss_of(pm)) / (2 * h);
            max_rel = std::max(max_rel, testutil::rel_err(grads.at(name).data[size_t(i)], fd));
        }
    }
    CHECK(max_rel < 1e-5);
}

TEST_CASE("every differentiable op matches central differences") {
    SECTION("gelu") {
        check_unary_grad([](GradTape<double>& t, Var x) { return t.gelu(x); }, {3, 5}, 100);
    }
    SECTION("log") {
        // positive inputs
        check_unary_grad(
            [](GradTape<double>& t, Var x) {
                return t.log(t.softmax_rows(x));
            },
            {3, 4}, 101);
    }
    SECTION("softmax_rows") {
        check_unary_grad([](GradTape<double>& t, Var x) { return t.softmax_rows(x); }, {4, 6},
                         102);
    }
    SECTION("layernorm x") {
        check_unary_grad(
            [](GradTape<double>& t, Var x) {
                Var g = t.constant(full<double>({6}, 1.3));
                Var b = t.constant(full<double>({6}, -0.2));
                return t.layernorm(x, g, b, 1e-5);
            },
            {4, 6}, 103);
    }
    SECTION("layernorm gain and bias") {
        Rng rng(104);
        const Tensor<double> x = rand_tensor({5, 6}, rng);
        check_unary_grad(
            [&](GradTape<double>& t, Var gb) {
                Var g = t.gather_rows(gb, {0});
                Var b = t.gather_rows(gb, {1});
                return t.layernorm(t.constant(x), t.reshape(g, {6}), t.reshape(b, {6}), 1e-5);
            },
            {2, 6}, 105);
    }
    SECTION("transpose + reshape + scale") {
        check_unary_grad(
            [](GradTape<double>& t, Var x) {
                return t.scale(t.reshape(t.transpose(x), {2, 6}), 1.7);
            },
            {3, 4}, 106);
    }
    SECTION("mean") {
        check_unary_grad([](GradTape<double>& t, Var x) { return t.mean(x); }, {3, 3}, 107);
    }
    SECTION("add and mul both sides") {
        Rng rng(108);
        const Tensor<double> other = rand_tensor({3, 4}, rng);
        check_unary_grad(
            [&](GradTape<double>& t, Var x) {
                return t.mul(t.add(x, t.constant(other)), t.constant(other));
            },
            {3, 4}, 109);
        check_unary_grad(
            [&](GradTape<double>& t, Var x) { return t.mul(t.constant(other), x); }, {3, 4}, 110);
    }
    SECTION("add_bias bias side") {
        Rng rng(111);
        const Tensor<double> x = rand_tensor({5, 4}, rng);
        check_unary_grad(
            [&](GradTape<double>& t, Var b) {
                return t.add_bias(t.constant(x), t.reshape(b, {4}));
            },
            {1, 4}, 112);
    }
    SECTION("matmul both sides") {
        Rng rng(113);
        const Tensor<double> other = rand_tensor({4, 3}, rng);
        check_unary_grad(
            [&](GradTape<double>& t, Var a) { return t.matmul(a, t.constant(other)); }, {2, 4},
            114);
        const Tensor<double> left = rand_tensor({2, 4}, rng);
        check_unary_grad(
            [&](GradTape<double>& t, Var b) { return t.matmul(t.constant(left), b); }, {4, 3},
            115);
    }
    SECTION("embedding") {
        std::vector<int32_t> ids = {0, 2, 1, 2, 3};
        check_unary_grad(
            [&](GradTape<double>& t, Var table) { return t.embedding(table, ids); }, {4, 5}, 116);
    }
    SECTION("gather_rows") {
        check_unary_grad(
            [](GradTape<double>& t, Var x) {
                return t.gather_rows(x, {0, 2, 2, 3});
            },
            {4, 3}, 117);
    }
    SECTION("attention q/k/v") {
        const std::vector<int32_t> lengths = {4, 3};
        Rng rng(118);
        const Tensor<double> q = rand_tensor({8, 6}, rng);
        const Tensor<double> k = rand_tensor({8, 6}, rng);
        const Tensor<double> v = rand_tensor({8, 6}, rng);
        check_unary_grad(
            [&](GradTape<double>& t, Var x) {
                return t.attention(x, t.constant(k), t.constant(v), lengths, 4, 2);
            },
            {8, 6}, 119);
        check_unary_grad(
            [&](GradTape<double>& t, Var x) {
                return t.attention(t.constant(q), x, t.constant(v), lengths, 4, 2);
            },
            {8, 6}, 120);
        check_unary_grad(
            [&](GradTape<double>& t, Var x) {
                return t.attention(t.constant(q), t.constant(k), x, lengths, 4, 2);
            },
            {8, 6}, 121);
    }
    SECTION("cross_entropy") {
        Rng rng(122);
        const std::vector<int32_t> labels = {1, 0, 2};
        Tensor<double> x = rand_tensor({3, 3}, rng);
        GradTape<double> tape;
        Var in = tape.leaf(x, true);
        tape.backward_into(tape.cross_entropy(in, labels));
        Tensor<double> analytic = tape.grad(in);
        for (int64_t i = 0; i < x.numel(); ++i) {
            Tensor<double> xp = x, xm = x;
            const double h = 1e-6;
            xp.data[size_t(i)] += h;
            xm.data[size_t(i)] -= h;
            GradTape<double> t1, t2;
            const double fd = (t1.val(t1.cross_entropy(t1.leaf(xp), labels)).data[0] -
                               t2.val(t2.cross_entropy(t2.leaf(xm), labels)).data[0]) /
                              (2 * h);
            REQUIRE(testutil::rel_err(analytic.data[size_t(i)], fd) < 1e-7);
        }
    }
    SECTION("kld student side") {
        Rng rng(123);
        const Tensor<double> teacher = rand_tensor({3, 4}, rng);
        Tensor<double> x = rand_tensor({3, 4}, rng);
        GradTape<double> tape;
        Var in = tape.leaf(x, true);
        tape.backward_into(tape.kld(tape.constant(teacher), in, 3.0));
        Tensor<double> analytic = tape.grad(in);
        for (int64_t i = 0; i < x.numel(); ++i) {
            Tensor<double> xp = x, xm = x;
            const double h = 1e-6;
            xp.data[size_t(i)] += h;
            xm.data[size_t(i)] -= h;
            GradTape<double> t1, t2;
            const double fd =
                (t1.val(t1.kld(t1.constant(teacher), t1.leaf(xp), 3.0)).data[0] -
                 t2.val(t2.kld(t2.constant(teacher), t2.leaf(xm), 3.0)).data[0]) /
                (2 * h);
            REQUIRE(testutil::rel_err(analytic.data[size_t(i)], fd) < 1e-7);
        }
    }
}

TEST_CASE("backward is linear: grad of a sum equals the sum of grads") {
    Rng rng(31);
    Tensor<double> w = rand_tensor({4, 4}, rng);
    const Tensor<double> x = rand_tensor({3, 4}, rng);

    GradTape<double> tape;
    Var vw = tape.param("w", w);
    Var h = tape.gelu(tape.matmul(tape.constant(x), vw));
    Var l1 = tape.mean(h);
    Var l2 = tape.sum(tape.mul(h, h));
    Var l12 = tape.add(l1, l2);

    auto g1 = tape.backward(l1);
    auto g2 = tape.backward(l2);
    auto g12 = tape.backward(l12);
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double want = g1.at("w").data[size_t(i)] + g2.at("w").data[size_t(i)];
        CHECK(std::abs(g12.at("w").data[size_t(i)] - want) < 1e-6);
    }
}

TEST_CASE("gradients accumulate additively when a value is reused") {
    GradTape<double> tape;
    Var x = tape.param("x", full<double>({3}, 2.0));
    // loss = sum(x*x) + sum(x) -> d/dx = 2x + 1 = 5
    Var loss = tape.add(tape.sum(tape.mul(x, x)), tape.sum(x));
    auto g = tape.backward(loss);
    for (double v : g.at("x").data) CHECK(v == Approx(5.0));
}

TEST_CASE("ops keep values finite on random inputs") {
    Rng rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        GradTape<float> tape;
        Var x = tape.constant(Tensor<float>(
            {4, 8}, [&] {
                std::vector<float> v(32);
                for (auto& e : v) e = float(rng.normal() * 50.0);
                return v;
            }()));
        Var g = tape.constant(full<float>({8}, 1.0f));
        Var b = tape.constant(zeros<float>({8}));
        CHECK(tape.val(tape.softmax_rows(x)).all_finite());
        CHECK(tape.val(tape.layernorm(x, g, b, 1e-5f)).all_finite());
        CHECK(tape.val(tape.gelu(x)).all_finite());
    }
}

TEST_CASE("detach blocks gradient flow") {
    GradTape<double> tape;
    Var x = tape.param("x", full<double>({3}, 1.5));
    Var d = tape.detach(tape.mul(x, x));
    Var loss = tape.sum(tape.mul(d, x));  // d treated as constant
    auto g = tape.backward(loss);
    for (double v : g.at("x").data) CHECK(v == Approx(1.5 * 1.5));
}

TEST_CASE("tensor invariant: data length must match shape") {
    CHECK_THROWS_AS(Tensor<double>({2, 3}, {1.0, 2.0}), ShapeError);
}

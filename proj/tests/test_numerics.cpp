#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "motionkit/autograd.hpp"
#include "motionkit/kernels.hpp"
#include "test_util.hpp"

using namespace motionkit;
using testutil::random_tensor;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c({a.dim(0), b.dim(1)});
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        for (std::size_t j = 0; j < b.dim(1); ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < a.dim(1); ++p) s += a.at(i, p) * b.at(p, j);
            c.at(i, j) = s;
        }
    }
    return c;
}

// Single-head reference: softmax(q k^T / sqrt(d)) v with explicit loops.
Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    const std::size_t n = q.dim(0), width = q.dim(1), dh = width / heads;
    Tensor out({n, width});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> s(n);
            for (std::size_t j = 0; j < n; ++j) {
                double dot = 0.0;
                for (std::size_t e = 0; e < dh; ++e) dot += q.at(i, h * dh + e) * k.at(j, h * dh + e);
                s[j] = dot / std::sqrt(static_cast<double>(dh));
            }
            double mx = *std::max_element(s.begin(), s.end());
            double z = 0.0;
            for (auto& x : s) z += (x = std::exp(x - mx));
            for (std::size_t e = 0; e < dh; ++e) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += s[j] / z * v.at(j, h * dh + e);
                out.at(i, h * dh + e) = acc;
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("tensor: construction invariants") {
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>(3)), ShapeError);
    Tensor t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS(t.reshaped({4, 2}));
}

TEST_CASE("kernels: gemm vs naive triple loop") {
    std::mt19937_64 rng(1);
    auto a = random_tensor(rng, {2, 3});
    auto b = random_tensor(rng, {3, 2});
    Tape tape;
    auto c = ad::matmul(tape.constant(a), tape.constant(b)).value();
    CHECK(max_abs_diff(c, naive_matmul(a, b)) < 1e-12);

    auto big_a = random_tensor(rng, {67, 45});
    auto big_b = random_tensor(rng, {45, 33});
    CHECK(max_abs_diff(ad::matmul(tape.constant(big_a), tape.constant(big_b)).value(), naive_matmul(big_a, big_b)) < 1e-12);
}

TEST_CASE("kernels: serial and parallel variants are bit identical") {
    std::mt19937_64 rng(2);
    using kernels::Trans;
    for (auto ta : {Trans::None, Trans::Transpose}) {
        for (auto tb : {Trans::None, Trans::Transpose}) {
            const kernels::GemmDims d{37, 29, 41};
            auto a = random_tensor(rng, {ta == Trans::None ? d.n : d.k, ta == Trans::None ? d.k : d.n});
            auto b = random_tensor(rng, {tb == Trans::None ? d.k : d.m, tb == Trans::None ? d.m : d.k});
            Tensor c1({d.n, d.m}), c2({d.n, d.m});
            kernels::gemm_serial(a.data(), ta, b.data(), tb, c1.data(), d);
            kernels::gemm_parallel(a.data(), ta, b.data(), tb, c2.data(), d);
            CHECK(c1 == c2);
        }
    }
    const kernels::AttentionDims ad{9, 4, 6};
    auto q = random_tensor(rng, {9, 24}), k = random_tensor(rng, {9, 24}), v = random_tensor(rng, {9, 24});
    std::vector<double> p1(4 * 81), p2(4 * 81);
    Tensor o1({9, 24}), o2({9, 24});
    kernels::attention_forward_serial(q.data(), k.data(), v.data(), {}, p1, o1.data(), ad);
    kernels::attention_forward_parallel(q.data(), k.data(), v.data(), {}, p2, o2.data(), ad);
    CHECK(o1 == o2);
    CHECK(p1 == p2);
}

TEST_CASE("ops: forward semantics") {
    Tape tape;
    SUBCASE("softmax symmetry") {
        auto y = ad::softmax(tape.constant(Tensor({1, 2}, 0.0))).value();
        CHECK(y[0] == 0.5);
        CHECK(y[1] == 0.5);
    }
    SUBCASE("layer_norm of a constant vector is zero") {
        auto y = ad::layer_norm(tape.constant(Tensor({1, 5}, 3.25))).value();
        for (double v : y.data()) CHECK(v == 0.0);
    }
    SUBCASE("adaptive layer norm applies shift and scale") {
        auto x = tape.constant(Tensor::from_rows({{1.0, 3.0}}));
        auto y = ad::adaptive_layer_norm(x, tape.constant(Tensor({2}, 0.5)), tape.constant(Tensor({2}, 1.0)), 0.0).value();
        CHECK(y[0] == doctest::Approx(-2.0 + 0.5));
        CHECK(y[1] == doctest::Approx(2.0 + 0.5));
    }
    SUBCASE("shape mismatch messages carry both shapes") {
        auto a = tape.constant(Tensor({2, 3}));
        auto b = tape.constant(Tensor({2, 3}));
        CHECK_THROWS_WITH_AS(ad::matmul(a, b), doctest::Contains("(2, 3) x (2, 3)"), ShapeError);
        CHECK_THROWS_AS(ad::add(a, tape.constant(Tensor({3, 2}))), ShapeError);
    }
}

TEST_CASE("attention") {
    std::mt19937_64 rng(3);
    Tape tape;
    SUBCASE("single token returns v exactly") {
        auto q = random_tensor(rng, {1, 4}), k = random_tensor(rng, {1, 4}), v = random_tensor(rng, {1, 4});
        auto o = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), 2).value();
        CHECK(o == v);
    }
    SUBCASE("two identical keys split weight evenly") {
        auto q = random_tensor(rng, {2, 4});
        Tensor k = Tensor::from_rows({{0.3, -1.0, 2.0, 0.5}, {0.3, -1.0, 2.0, 0.5}});
        Tensor v = Tensor::from_rows({{1.0, 2.0, 3.0, 4.0}, {3.0, 6.0, 5.0, 0.0}});
        auto o = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), 1).value();
        CHECK(o.at(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
        CHECK(o.at(1, 3) == doctest::Approx(2.0).epsilon(1e-14));
    }
    SUBCASE("random 4-token case vs naive loop") {
        for (std::size_t heads : {1u, 2u}) {
            auto q = random_tensor(rng, {4, 8}), k = random_tensor(rng, {4, 8}), v = random_tensor(rng, {4, 8});
            auto o = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), heads).value();
            CHECK(max_abs_diff(o, naive_attention(q, k, v, heads)) < 1e-10);
        }
    }
    SUBCASE("uniform values are preserved whatever q and k") {
        for (int trial = 0; trial < 20; ++trial) {
            auto q = random_tensor(rng, {6, 8}, 3.0), k = random_tensor(rng, {6, 8}, 3.0);
            Tensor v({6, 8});
            auto row = random_tensor(rng, {8});
            for (std::size_t i = 0; i < 6; ++i) {
                for (std::size_t e = 0; e < 8; ++e) v.at(i, e) = row[e];
            }
            auto o = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), 2).value();
            CHECK(max_abs_diff(o, v) < 1e-12);
        }
    }
    SUBCASE("causal mask blocks future tokens") {
        auto q = random_tensor(rng, {3, 2}), k = random_tensor(rng, {3, 2}), v = random_tensor(rng, {3, 2});
        std::vector<std::uint8_t> mask{1, 0, 0, 1, 1, 0, 1, 1, 1};
        auto o = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), 1, mask).value();
        CHECK(o.at(0, 0) == doctest::Approx(v.at(0, 0)));
        CHECK(o.at(0, 1) == doctest::Approx(v.at(0, 1)));
        CHECK_THROWS(ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), 1, std::vector<std::uint8_t>(4, 1)));
    }
    SUBCASE("shape errors") {
        auto q = tape.constant(Tensor({3, 4})), k = tape.constant(Tensor({2, 4}));
        CHECK_THROWS_AS(ad::attention(q, k, q, 1), ShapeError);
        CHECK_THROWS_AS(ad::attention(q, q, q, 3), ShapeError);
    }
}

TEST_CASE("rope_apply") {
    std::mt19937_64 rng(4);
    SUBCASE("position 0 is the identity") {
        auto x = random_tensor(rng, {1, 8});
        std::vector<double> pos{0.0};
        CHECK(rope_apply(x, pos, 2) == x);
    }
    SUBCASE("pair norms are preserved") {
        for (int trial = 0; trial < 50; ++trial) {
            auto x = random_tensor(rng, {5, 12}, 4.0);
            std::vector<double> pos{0, 3, 17, 250, 1999};
            auto y = rope_apply(x, pos, 3);
            for (std::size_t r = 0; r < 5; ++r) {
                for (std::size_t p = 0; p < 6; ++p) {
                    const double a = std::hypot(x.at(r, 2 * p), x.at(r, 2 * p + 1));
                    const double b = std::hypot(y.at(r, 2 * p), y.at(r, 2 * p + 1));
                    CHECK(std::abs(a - b) < 1e-12);
                }
            }
        }
    }
    SUBCASE("dot products depend only on relative position") {
        for (int trial = 0; trial < 50; ++trial) {
            auto q = random_tensor(rng, {1, 16});
            auto k = random_tensor(rng, {1, 16});
            std::uniform_int_distribution<int> pd(0, 40);
            const double p1 = pd(rng), p2 = pd(rng);
            auto dot = [&](double a, double b) {
                std::vector<double> pa{a}, pb{b};
                auto rq = rope_apply(q, pa, 1), rk = rope_apply(k, pb, 1);
                double s = 0.0;
                for (std::size_t i = 0; i < 16; ++i) s += rq[i] * rk[i];
                return s;
            };
            CHECK(std::abs(dot(p1, p2) - dot(p1 + 5, p2 + 5)) < 1e-10);
        }
    }
    SUBCASE("odd head dim rejected") {
        std::vector<double> pos{0.0};
        CHECK_THROWS_AS(rope_apply(Tensor({1, 6}), pos, 2), ShapeError);
    }
}

TEST_CASE("backward: basic gradients and tape errors") {
    std::mt19937_64 rng(5);
    auto x0 = random_tensor(rng, {3, 4});
    SUBCASE("sum gives all ones") {
        Tape tape;
        auto x = tape.leaf(x0);
        tape.backward(ad::sum(x));
        const Tensor g = tape.grad(x);
        for (double v : g.data()) CHECK(v == 1.0);
    }
    SUBCASE("squared norm gives 2x") {
        Tape tape;
        auto x = tape.leaf(x0);
        tape.backward(ad::sum(ad::mul(x, x)));
        auto g = tape.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(2.0 * x0[i]).epsilon(1e-15));
    }
    SUBCASE("non-scalar loss") {
        Tape tape;
        auto x = tape.leaf(x0);
        CHECK_THROWS_AS(tape.backward(x), TapeError);
    }
    SUBCASE("second backward is an error") {
        Tape tape;
        auto x = tape.leaf(x0);
        auto loss = ad::sum(x);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), TapeError);
        CHECK_THROWS_AS(ad::sum(x), TapeError);
    }
}

TEST_CASE("backward: every op passes the finite-difference check") {
    std::mt19937_64 rng(6);
    using testutil::check_gradients;
    using V = std::vector<Var>;
    auto weighted = [&](Tape& t, Var y) {
        // random projection to a scalar so every output entry matters
        std::mt19937_64 wr(99);
        return ad::sum(ad::mul(y, t.constant(random_tensor(wr, y.shape()))));
    };
    struct Case {
        const char* name;
        std::vector<Shape> shapes;
        std::function<Var(Tape&, const V&)> fn;
    };
    std::vector<Case> cases{
        {"matmul", {{3, 4}, {4, 2}}, [&](Tape& t, const V& v) { return weighted(t, ad::matmul(v[0], v[1])); }},
        {"add/sub/mul", {{2, 3}, {2, 3}},
         [&](Tape& t, const V& v) { return weighted(t, ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1]))); }},
        {"add_row/mul_row", {{3, 4}, {4}, {1, 4}},
         [&](Tape& t, const V& v) { return weighted(t, ad::mul_row(ad::add_row(v[0], v[1]), v[2])); }},
        {"softmax", {{3, 5}}, [&](Tape& t, const V& v) { return weighted(t, ad::softmax(v[0])); }},
        {"layer_norm", {{3, 6}}, [&](Tape& t, const V& v) { return weighted(t, ad::layer_norm(v[0])); }},
        {"adaptive_layer_norm", {{4, 6}, {1, 6}, {1, 6}},
         [&](Tape& t, const V& v) { return weighted(t, ad::adaptive_layer_norm(v[0], v[1], v[2])); }},
        {"activations", {{2, 5}},
         [&](Tape& t, const V& v) {
             return weighted(t, ad::add(ad::add(ad::silu(v[0]), ad::gelu(v[0])),
                                        ad::add(ad::sigmoid(v[0]), ad::tanh(v[0]))));
         }},
        {"slices/concat", {{4, 6}},
         [&](Tape& t, const V& v) {
             std::vector<Var> parts{ad::slice_rows(v[0], 2, 4), ad::slice_rows(v[0], 0, 1)};
             return weighted(t, ad::slice_cols(ad::concat_rows(parts), 1, 5));
         }},
        {"attention", {{5, 8}, {5, 8}, {5, 8}},
         [&](Tape& t, const V& v) { return weighted(t, ad::attention(v[0], v[1], v[2], 2)); }},
        {"rope", {{4, 8}},
         [&](Tape& t, const V& v) {
             std::vector<double> pos{0, 1, 2, 7};
             return weighted(t, ad::rope(v[0], pos, 2));
         }},
        {"mse", {{3, 3}, {3, 3}}, [&](Tape&, const V& v) { return ad::mse(v[0], v[1]); }},
        {"reshape/mean", {{2, 6}}, [&](Tape& t, const V& v) { return ad::mean(ad::mul(ad::reshape(v[0], {3, 4}), t.constant(Tensor({3, 4}, 0.5)))); }},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        std::vector<Tensor> inputs;
        for (const auto& s : c.shapes) inputs.push_back(random_tensor(rng, s));
        auto r = check_gradients(c.fn, inputs);
        CHECK(r.max_rel_err < 1e-4);
    }
}

TEST_CASE("optimizer_step") {
    SUBCASE("zero gradient leaves params unchanged") {
        Tensor w = Tensor::from_rows({{1.0, -2.0}});
        Tensor before = w;
        AdamState st;
        std::vector<Tensor*> ps{&w};
        std::vector<Tensor> gs{Tensor({1, 2}, 0.0)};
        optimizer_step(ps, gs, st, 0.1);
        CHECK(w == before);
    }
    SUBCASE("one step on x^2 from 1 decreases x") {
        Tensor x({1}, 1.0);
        AdamState st;
        std::vector<Tensor*> ps{&x};
        std::vector<Tensor> gs{Tensor({1}, 2.0 * x[0])};
        optimizer_step(ps, gs, st, 0.1);
        CHECK(x[0] < 1.0);
    }
    SUBCASE("200 steps on a convex quadratic") {
        // f(w) = sum_i c_i (w_i - t_i)^2
        std::vector<double> c{1.0, 4.0, 0.5}, target{0.3, -1.2, 2.0};
        Tensor w({3}, 0.0);
        auto f = [&] {
            double s = 0.0;
            for (int i = 0; i < 3; ++i) s += c[i] * (w[i] - target[i]) * (w[i] - target[i]);
            return s;
        };
        const double initial = f();
        AdamState st;
        std::vector<Tensor*> ps{&w};
        for (int step = 0; step < 200; ++step) {
            Tensor g({3});
            for (int i = 0; i < 3; ++i) g[i] = 2.0 * c[i] * (w[i] - target[i]);
            std::vector<Tensor> gs{g};
            optimizer_step(ps, gs, st, 0.05);
        }
        CHECK(f() < 1e-3 * initial);
    }
    SUBCASE("NaN gradient is an explicit error and params are untouched") {
        Tensor w({2}, 1.0);
        AdamState st;
        std::vector<Tensor*> ps{&w};
        std::vector<Tensor> gs{Tensor(Shape{2}, std::vector<double>{0.1, std::nan("")})};
        CHECK_THROWS_AS(optimizer_step(ps, gs, st, 0.1), NumericError);
        CHECK(w[0] == 1.0);
    }
    SUBCASE("deterministic") {
        auto run = [] {
            Tensor w({4}, 0.25);
            AdamState st;
            std::vector<Tensor*> ps{&w};
            for (int s = 0; s < 10; ++s) {
                std::vector<Tensor> gs{Tensor(Shape{4}, std::vector<double>{0.1 * s, -0.2, 0.3, 1.0 / (s + 1)})};
                optimizer_step(ps, gs, st, 0.01);
            }
            return w;
        };
        CHECK(run() == run());
    }
}

TEST_CASE("PGT1 dump format") {
    std::mt19937_64 rng(8);
    auto t = random_tensor(rng, {2, 3, 4});
    auto bytes = encode_pgt(t);
    REQUIRE(bytes.size() == 4 + 1 + 1 + 3 * 4 + 24 * 8);
    CHECK(bytes[0] == 'P');
    CHECK(bytes[3] == '1');
    CHECK(bytes[4] == 0);
    CHECK(bytes[5] == 3);
    CHECK(bytes[6] == 2);  // little-endian u32 dim 0
    CHECK(bytes[7] == 0);
    CHECK(decode_pgt(bytes) == t);

    auto f32 = encode_pgt(t, DType::F32);
    CHECK(f32[4] == 1);
    CHECK(f32.size() == 4 + 1 + 1 + 12 + 24 * 4);
    CHECK(decode_pgt(f32) == t.round_to_f32());

    bytes.pop_back();
    CHECK_THROWS(decode_pgt(bytes));
    std::vector<std::uint8_t> junk{'X', 'G', 'T', '1', 0, 0};
    CHECK_THROWS(decode_pgt(junk));
}

#include "doctest.h"

#include <random>

#include "utrans/gradcheck.hpp"
#include "utrans/ops.hpp"

using namespace utrans;

namespace {

Tensor<double> T2(std::initializer_list<double> v, Shape s) {
    return Tensor<double>::from(s, std::vector<double>(v));
}

Tensor<double> rnd(Shape s, uint64_t seed) {
    std::mt19937_64 rng(seed);
    return gradcheck_detail::rand_tensor(s, rng);
}

// independent quadruple-loop convolution oracle
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                                const Tensor<double>& b, bool same) {
    int n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    int cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    int ph = same ? kh / 2 : 0, pw = same ? kw / 2 : 0;
    int ho = h + 2 * ph - kh + 1, wo = wd + 2 * pw - kw + 1;
    std::vector<double> out(static_cast<size_t>(n) * cout * ho * wo);
    for (int ni = 0; ni < n; ++ni)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double s = b.data()[co];
                    for (int ci = 0; ci < cin; ++ci)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                int iy = oy + i - ph, ix = ox + j - pw;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd)
                                    continue;
                                s += x.data()[((ni * cin + ci) * h + iy) * wd + ix] *
                                     w.data()[((co * cin + ci) * kh + i) * kw + j];
                            }
                    out[((static_cast<size_t>(ni) * cout + co) * ho + oy) * wo +
                        ox] = s;
                }
    return out;
}

}  // namespace

TEST_CASE("matmul basics") {
    Tensor<double> i2 = T2({1, 0, 0, 1}, Shape{2, 2});
    Tensor<double> m = T2({3, -1, 2, 7}, Shape{2, 2});
    Tensor<double> r = matmul(i2, m);
    for (int k = 0; k < 4; ++k) CHECK(r.value()[k] == m.value()[k]);

    Tensor<double> a = T2({1, 2, 3, 4}, Shape{2, 2});
    Tensor<double> b = T2({5, 6}, Shape{2, 1});
    Tensor<double> c = matmul(a, b);
    CHECK(c.value()[0] == doctest::Approx(17));
    CHECK(c.value()[1] == doctest::Approx(39));

    Tensor<double> e1(Shape{3, 0}), e2(Shape{0, 2});
    Tensor<double> z = matmul(e1, e2);
    REQUIRE(z.shape() == Shape{3, 2});
    for (auto v : z.value()) CHECK(v == 0.0);

    CHECK_THROWS_AS(matmul(T2({1}, Shape{1, 1}), T2({1, 1}, Shape{2, 1})),
                    ShapeError);
}

TEST_CASE("conv2d pinned examples") {
    // 1x1 identity kernel
    Tensor<double> x = rnd(Shape{1, 1, 4, 4}, 11);
    Tensor<double> w1 = T2({1}, Shape{1, 1, 1, 1});
    Tensor<double> b0(Shape{1});
    Tensor<double> y = conv2d(x, w1, b0, Padding::Same);
    for (long i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x.value()[i]);

    // all-ones 3x3 kernel over all-ones 3x3 input
    Tensor<double> ones9(Shape{1, 1, 3, 3}, 1.0);
    Tensor<double> k9(Shape{1, 1, 3, 3}, 1.0);
    Tensor<double> v = conv2d(ones9, k9, b0, Padding::Valid);
    REQUIRE(v.numel() == 1);
    CHECK(v.value()[0] == doctest::Approx(9));
    Tensor<double> s = conv2d(ones9, k9, b0, Padding::Same);
    CHECK(s.value()[0] == doctest::Approx(4));  // corner
    CHECK(s.value()[4] == doctest::Approx(9));  // center

    CHECK_THROWS_AS(conv2d(x, Tensor<double>(Shape{1, 1, 2, 2}), b0,
                           Padding::Same),
                    ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor<double>(Shape{1, 3, 3, 3}),
                           Tensor<double>(Shape{1}), Padding::Same),
                    ShapeError);
}

TEST_CASE("conv2d matches quadruple-loop oracle") {
    for (bool same : {true, false}) {
        Tensor<double> x = rnd(Shape{2, 3, 8, 8}, same ? 21 : 22);
        Tensor<double> w = rnd(Shape{4, 3, 3, 3}, same ? 31 : 32);
        Tensor<double> b = rnd(Shape{4}, same ? 41 : 42);
        Tensor<double> y =
            conv2d(x, w, b, same ? Padding::Same : Padding::Valid);
        std::vector<double> ref = conv_oracle(x, w, b, same);
        REQUIRE(static_cast<size_t>(y.numel()) == ref.size());
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("maxpool2d") {
    Tensor<double> x = T2({1, 2, 3, 4}, Shape{1, 1, 2, 2});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope sc(tape);
    Tensor<double> y = maxpool2d(x);
    REQUIRE(y.numel() == 1);
    CHECK(y.value()[0] == 4);
    tape.backward(sum_all(y));
    CHECK(x.grad()[0] == 0);
    CHECK(x.grad()[3] == 1);

    Tensor<double> c(Shape{1, 2, 4, 4}, 0.7);
    Tensor<double> cp = maxpool2d(c);
    for (auto v : cp.value()) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("upsample_nearest2") {
    Tensor<double> p = T2({1}, Shape{1, 1, 1, 1});
    Tensor<double> q = upsample_nearest2(p);
    for (auto v : q.value()) CHECK(v == 1.0);

    Tensor<double> x = T2({1, 2, 3, 4}, Shape{1, 1, 2, 2});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope sc(tape);
    Tensor<double> y = upsample_nearest2(x);
    std::vector<double> want = {1, 1, 2, 2, 1, 1, 2, 2,
                                3, 3, 4, 4, 3, 3, 4, 4};
    for (int i = 0; i < 16; ++i) CHECK(y.value()[i] == want[i]);
    tape.backward(sum_all(y));
    for (auto g : x.grad()) CHECK(g == 4.0);  // fan-in of ones
}

TEST_CASE("upsample_bilinear") {
    Tensor<double> x = rnd(Shape{1, 2, 3, 3}, 5);
    Tensor<double> same = upsample_bilinear(x, 3, 3);
    for (long i = 0; i < x.numel(); ++i)
        CHECK(same.value()[i] == doctest::Approx(x.value()[i]));

    Tensor<double> c(Shape{1, 1, 2, 2}, 0.3);
    Tensor<double> cu = upsample_bilinear(c, 5, 7);
    for (auto v : cu.value()) CHECK(v == doctest::Approx(0.3));

    // row [0,1] -> width 4, against the align_corners=false formula
    Tensor<double> row = T2({0, 1}, Shape{1, 1, 1, 2});
    Tensor<double> up = upsample_bilinear(row, 1, 4);
    for (int ox = 0; ox < 4; ++ox) {
        double sx = (ox + 0.5) * 2.0 / 4.0 - 0.5;
        double cl = std::clamp(sx, 0.0, 1.0);
        int i0 = static_cast<int>(std::floor(cl));
        int i1 = std::min(i0 + 1, 1);
        double w1 = cl - i0;
        double want = (1 - w1) * i0 + w1 * i1;  // values are 0 and 1
        CHECK(up.value()[ox] == doctest::Approx(want));
    }
}

TEST_CASE("softmax") {
    Tensor<double> x = T2({std::log(2.0), 0}, Shape{1, 2});
    Tensor<double> y = softmax(x, 1);
    CHECK(y.value()[0] == doctest::Approx(2.0 / 3));
    CHECK(y.value()[1] == doctest::Approx(1.0 / 3));

    Tensor<double> z = softmax(T2({0, 0}, Shape{1, 2}), 1);
    CHECK(z.value()[0] == doctest::Approx(0.5));

    Tensor<double> big = softmax(T2({1000, 0}, Shape{1, 2}), 1);
    CHECK(big.all_finite());
    CHECK(big.value()[0] == doctest::Approx(1.0));
    CHECK(big.value()[1] == doctest::Approx(0.0));

    CHECK_THROWS_AS(softmax(x, 2), ValueError);
}

TEST_CASE("elementwise") {
    CHECK(sigmoid(T2({0}, Shape{1})).value()[0] == doctest::Approx(0.5));
    CHECK(relu(T2({-3}, Shape{1})).value()[0] == 0.0);
    CHECK(relu(T2({3}, Shape{1})).value()[0] == 3.0);

    Tensor<double> s = rnd(Shape{2, 3}, 9);
    Tensor<double> ones(Shape{2, 3}, 1.0);
    Tensor<double> g = mul(s, ones);
    for (long i = 0; i < s.numel(); ++i) CHECK(g.value()[i] == s.value()[i]);

    CHECK_THROWS_AS(add(rnd(Shape{2, 3}, 1), rnd(Shape{3, 2}, 2)), ShapeError);
}

TEST_CASE("concat and seam round-trip") {
    Tensor<double> a = rnd(Shape{1, 2, 4, 4}, 3);
    Tensor<double> b = rnd(Shape{1, 3, 4, 4}, 4);
    Tensor<double> c = concat(a, b, 1);
    REQUIRE(c.shape() == Shape{1, 5, 4, 4});
    for (int i = 0; i < 2 * 16; ++i) CHECK(c.value()[i] == a.value()[i]);
    for (int i = 0; i < 3 * 16; ++i)
        CHECK(c.value()[2 * 16 + i] == b.value()[i]);

    Tensor<double> empty(Shape{1, 0, 4, 4});
    Tensor<double> same = concat(a, empty, 1);
    REQUIRE(same.shape() == a.shape());
    for (long i = 0; i < a.numel(); ++i) CHECK(same.value()[i] == a.value()[i]);
}

TEST_CASE("batchnorm semantics") {
    // per-channel mean 0 / var 1 passes through (biased variance)
    Tensor<double> x = Tensor<double>::from(
        Shape{2, 1, 1, 2}, {-1.0, 1.0, 1.0, -1.0});
    Tensor<double> g1(Shape{1}, 1.0), b0(Shape{1});
    Tensor<double> rm(Shape{1}), rv(Shape{1}, 1.0);
    Tensor<double> y = batchnorm(x, g1, b0, rm, rv, true);
    for (long i = 0; i < x.numel(); ++i)
        CHECK(y.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-4));

    // constant channel -> zeros
    Tensor<double> c(Shape{2, 1, 2, 2}, 3.25);
    Tensor<double> rm2(Shape{1}), rv2(Shape{1}, 1.0);
    Tensor<double> cn = batchnorm(c, g1, b0, rm2, rv2, true);
    for (auto v : cn.value()) CHECK(v == doctest::Approx(0.0));

    // eval mode: same pixel value -> same output regardless of batch content
    Tensor<double> rm3(Shape{1}, 0.2), rv3(Shape{1}, 2.0);
    Tensor<double> xa = Tensor<double>::from(Shape{1, 1, 1, 2}, {0.5, -3.0});
    Tensor<double> xb = Tensor<double>::from(Shape{1, 1, 1, 2}, {0.5, 9.0});
    CHECK(batchnorm(xa, g1, b0, rm3, rv3, false).value()[0] ==
          batchnorm(xb, g1, b0, rm3, rv3, false).value()[0]);

    // train mode needs a batch
    Tensor<double> one(Shape{1, 1, 1, 1}, 1.0);
    Tensor<double> rm4(Shape{1}), rv4(Shape{1}, 1.0);
    CHECK_THROWS_AS(batchnorm(one, g1, b0, rm4, rv4, true), ValueError);
}

TEST_CASE("tape basics") {
    Tensor<double> x = rnd(Shape{5}, 17);
    x.set_requires_grad(true);
    {
        Tape<double> tape;
        Tape<double>::Scope sc(tape);
        tape.backward(sum_all(x));
        for (auto g : x.grad()) CHECK(g == 1.0);
    }
    x.zero_grad();
    {
        Tape<double> tape;
        Tape<double>::Scope sc(tape);
        tape.backward(sum_all(mul(x, x)));
        for (long i = 0; i < x.numel(); ++i)
            CHECK(x.grad()[i] == doctest::Approx(2 * x.value()[i]));
    }
    x.zero_grad();
    {
        Tape<double> tape;
        Tape<double>::Scope sc(tape);
        tape.backward(add(sum_all(x), sum_all(x)));
        for (auto g : x.grad()) CHECK(g == 2.0);  // accumulation
    }
    {
        Tape<double> tape;
        Tape<double>::Scope sc(tape);
        CHECK_THROWS_AS(tape.backward(x), ValueError);  // non-scalar loss
    }
}

TEST_CASE("backward determinism") {
    auto run = [](uint64_t seed) {
        Tensor<double> x = rnd(Shape{2, 3, 8, 8}, seed);
        Tensor<double> w = rnd(Shape{4, 3, 3, 3}, seed + 1);
        Tensor<double> b = rnd(Shape{4}, seed + 2);
        for (auto* t : {&x, &w, &b}) t->set_requires_grad(true);
        Tape<double> tape;
        Tape<double>::Scope sc(tape);
        tape.backward(sum_all(relu(conv2d(x, w, b, Padding::Same))));
        std::vector<double> out(w.grad().begin(), w.grad().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        return out;
    };
    auto a = run(77), b = run(77);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("finite-difference spot checks") {
    for (const char* op : {"conv2d", "softmax", "maxpool2d"}) {
        CheckReport r = grad_check(op);
        INFO(op);
        CHECK(r.pass);
        CHECK(r.cases >= 3);
        CHECK(r.max_rel_err < 1e-4);
    }
}

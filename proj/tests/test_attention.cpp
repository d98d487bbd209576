#include "doctest.h"

#include <random>

#include "utrans/attention.hpp"

using namespace utrans;

namespace {

template <typename B>
void randomize(B& block, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-0.5, 0.5);
    block.visit("b", [&](const std::string&, Tensor<double>& t, InitKind,
                         bool) {
        for (auto& v : t.value()) v = d(rng);
    });
}

Tensor<double> rnd(Shape s, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    Tensor<double> t(s);
    for (auto& v : t.value()) v = d(rng);
    return t;
}

}  // namespace

TEST_CASE("positional encoding 2d") {
    int c = 16, h = 6, w = 5;
    Tensor<double> pe = positional_encoding_2d<double>(h, w, c);
    REQUIRE(pe.shape() == Shape{1, c, h, w});
    int q = c / 4;
    long hw = static_cast<long>(h) * w;
    // at (0,0): sin blocks 0, cos blocks 1
    for (int i = 0; i < q; ++i) {
        CHECK(pe.data()[(0 * q + i) * hw] == doctest::Approx(0.0));
        CHECK(pe.data()[(1 * q + i) * hw] == doctest::Approx(1.0));
        CHECK(pe.data()[(2 * q + i) * hw] == doctest::Approx(0.0));
        CHECK(pe.data()[(3 * q + i) * hw] == doctest::Approx(1.0));
    }
    for (auto v : pe.value()) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    // distinct positions get distinct codes
    double diff = 0;
    for (int ci = 0; ci < c; ++ci)
        diff = std::max(diff, std::fabs(pe.data()[ci * hw + 0 * w] -
                                        pe.data()[ci * hw + 1 * w]));
    CHECK(diff > 1e-3);

    CHECK_THROWS_AS(positional_encoding_2d<double>(4, 4, 6), ValueError);
}

TEST_CASE("sdpa pinned") {
    // single key: every attention row is exactly [1]
    Tensor<double> q1 = rnd(Shape{5, 3}, 1);
    Tensor<double> k1 = rnd(Shape{1, 3}, 2);
    Tensor<double> v1 = rnd(Shape{1, 4}, 3);
    auto [o1, a1] = scaled_dot_product_attention(q1, k1, v1);
    for (auto v : a1.value()) CHECK(v == doctest::Approx(1.0));
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 4; ++c)
            CHECK(o1.value()[r * 4 + c] == doctest::Approx(v1.value()[c]));

    // query orthogonal to every key -> uniform row
    Tensor<double> q0 = Tensor<double>::from(Shape{1, 3}, {0, 0, 1});
    Tensor<double> k0 =
        Tensor<double>::from(Shape{4, 3}, {1, 0, 0, 0, 1, 0, -1, 0, 0, 2, 3, 0});
    auto [o0, a0] = scaled_dot_product_attention(q0, k0, rnd(Shape{4, 2}, 4));
    for (auto v : a0.value()) CHECK(v == doctest::Approx(0.25));

    // Q=[[1,0]], K=V=I2, dk=2: logits [1/sqrt(2), 0]
    Tensor<double> q = Tensor<double>::from(Shape{1, 2}, {1, 0});
    Tensor<double> kv = Tensor<double>::from(Shape{2, 2}, {1, 0, 0, 1});
    auto [o, a] = scaled_dot_product_attention(q, kv, kv);
    CHECK(a.value()[0] == doctest::Approx(0.6698).epsilon(1e-4));
    CHECK(a.value()[1] == doctest::Approx(0.3302).epsilon(1e-4));
    CHECK(o.value()[0] == doctest::Approx(a.value()[0]));
    CHECK(o.value()[1] == doctest::Approx(a.value()[1]));

    CHECK_THROWS_AS(
        scaled_dot_product_attention(q, rnd(Shape{2, 3}, 5), kv),
        ShapeError);
}

TEST_CASE("mhsa") {
    // Wv = 0 makes the block a residual identity
    auto ident = MhsaBlock<double>::make(8, 1, true);
    randomize(ident, 10);
    for (auto& v : ident.proj.heads[0].wv.value()) v = 0;
    Tensor<double> x = rnd(Shape{2, 8, 4, 4}, 11);
    Tensor<double> y = ident.forward(x, nullptr);
    REQUIRE(y.shape() == x.shape());
    for (long i = 0; i < x.numel(); ++i)
        CHECK(y.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-12));

    // shape contract + row-stochastic 64x64 capture, heads=4 on (1,16,8,8)
    auto blk = MhsaBlock<double>::make(16, 4, true);
    randomize(blk, 12);
    Tensor<double> x2 = rnd(Shape{1, 16, 8, 8}, 13);
    std::vector<AttnMat> cap;
    Tensor<double> y2 = blk.forward(x2, &cap);
    CHECK(y2.shape() == Shape{1, 16, 8, 8});
    REQUIRE(cap.size() == 4);
    for (const auto& m : cap) {
        REQUIRE(m.rows == 64);
        REQUIRE(m.cols == 64);
        for (int r = 0; r < m.rows; ++r) {
            double s = 0;
            for (int c = 0; c < m.cols; ++c) {
                double w = m.w[r * m.cols + c];
                CHECK(w >= 0.0);
                s += w;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }

    CHECK_THROWS_AS(MhsaBlock<double>::make(8, 3, true), ValueError);
    CHECK_THROWS_AS(blk.forward(rnd(Shape{1, 8, 8, 8}, 14), nullptr),
                    ShapeError);
}

TEST_CASE("mhca") {
    int cs = 16, cy = 32;
    auto blk = MhcaBlock<double>::make(cs, cy, 2, true, 16);
    randomize(blk, 20);
    Tensor<double> s = rnd(Shape{1, cs, 8, 8}, 21);
    Tensor<double> y = rnd(Shape{1, cy, 4, 4}, 22);

    SUBCASE("zero embedding gives Z = 0.5 everywhere") {
        for (auto& v : blk.embed_w.value()) v = 0;
        for (auto& v : blk.embed_b.value()) v = 0;
        auto r = blk.forward(s, y, nullptr);
        for (auto v : r.z.value()) CHECK(v == doctest::Approx(0.5));
        REQUIRE(r.out.shape() == Shape{1, cs + cy, 8, 8});
        Tensor<double> yu = upsample_bilinear(y, 8, 8);
        long hw = 64;
        for (int c = 0; c < cs; ++c)
            for (long k = 0; k < hw; ++k)
                CHECK(r.out.value()[c * hw + k] ==
                      doctest::Approx(0.5 * s.value()[c * hw + k]));
        for (long i = 0; i < yu.numel(); ++i)
            CHECK(r.out.value()[cs * hw + i] == doctest::Approx(yu.value()[i]));
    }

    SUBCASE("Z strictly inside (0,1), output channels Cs+Cy") {
        std::vector<AttnMat> cap;
        std::vector<double> zmap;
        int zh = 0, zw = 0;
        auto r = blk.forward(s, y, &cap, &zmap, &zh, &zw);
        CHECK(r.out.shape() == Shape{1, cs + cy, 8, 8});
        REQUIRE(cap.size() == 2);  // one per head
        for (auto v : r.z.value()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
        CHECK(zh == 8);
        CHECK(zw == 8);
        CHECK(zmap.size() == 64);
    }

    SUBCASE("shape validation") {
        CHECK_THROWS_AS(blk.forward(s, rnd(Shape{1, cy, 8, 8}, 23), nullptr),
                        ShapeError);
        CHECK_THROWS_AS(blk.forward(s, rnd(Shape{1, 8, 4, 4}, 24), nullptr),
                        ShapeError);
    }
}

TEST_CASE("attention invariants on seeded instances") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        auto blk = MhsaBlock<double>::make(8, 2, seed % 2 == 0);
        randomize(blk, 100 + seed);
        Tensor<double> x = rnd(Shape{1, 8, 4, 4}, 200 + seed);
        std::vector<AttnMat> cap;
        blk.forward(x, &cap);
        REQUIRE(cap.size() == 2);
        for (const auto& m : cap)
            for (int r = 0; r < m.rows; ++r) {
                double s = 0;
                for (int c = 0; c < m.cols; ++c) s += m.w[r * m.cols + c];
                CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
            }
    }
}

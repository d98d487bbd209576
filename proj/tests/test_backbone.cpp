#include "doctest.h"

#include <map>
#include <random>
#include <set>

#include "utrans/backbone.hpp"

using namespace utrans;

namespace {

Tensor<float> rndf(Shape s, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    Tensor<float> t(s);
    for (auto& v : t.value()) v = d(rng);
    return t;
}

VariantConfig ut_config() {
    VariantConfig c;
    c.variant = Variant::UTransformer;
    c.mhca_levels = {1, 2, 3};
    return c;
}

}  // namespace

TEST_CASE("variant config validation") {
    VariantConfig c;
    c.variant = Variant::Unet;
    c.heads = 0;
    CHECK_NOTHROW(c.validate());

    c.mhca_levels = {1};
    CHECK_THROWS_AS(c.validate(), ValueError);  // unet cannot carry MHCA
    c.mhca_levels.clear();

    VariantConfig u = ut_config();
    CHECK_NOTHROW(u.validate());
    u.heads = 3;  // 3 does not divide 128
    CHECK_THROWS_AS(u.validate(), ValueError);
    u.heads = 4;
    u.mhca_levels = {4};  // depth is 3
    CHECK_THROWS_AS(u.validate(), ValueError);

    VariantConfig j = ut_config();
    VariantConfig back = VariantConfig::from_json(j.to_json());
    CHECK(back.hash() == j.hash());
    back.n_classes = 5;
    CHECK(back.hash() != j.hash());
}

TEST_CASE("parameter counts and channel plan") {
    auto conv = Conv2dLayer<float>::make(1, 16, 3);
    CHECK(conv.w.numel() + conv.b.numel() == 160);

    Model<float> m = build_model<float>(ut_config(), 1);
    std::map<std::string, Shape> shapes;
    for (auto& e : m.registry) shapes[e.name] = e.t.shape();
    CHECK(shapes.at("enc1.conv1.w") == Shape{16, 1, 3, 3});
    CHECK(shapes.at("enc2.conv1.w") == Shape{32, 16, 3, 3});
    CHECK(shapes.at("enc3.conv1.w") == Shape{64, 32, 3, 3});
    CHECK(shapes.at("bottleneck.conv1.w") == Shape{128, 64, 3, 3});
    CHECK(shapes.at("head.w") == Shape{4, 16, 1, 1});
    // MHCA at a deeper level carries more parameters
    VariantConfig deep = ut_config();
    deep.mhca_levels = {1};
    VariantConfig shallow = ut_config();
    shallow.mhca_levels = {3};
    CHECK(build_model<float>(deep, 1).parameter_count() >
          build_model<float>(shallow, 1).parameter_count());
}

TEST_CASE("unet degeneracy") {
    VariantConfig un;
    un.variant = Variant::Unet;
    un.heads = 0;
    VariantConfig ut;
    ut.variant = Variant::UTransformer;
    ut.heads = 0;
    ut.mhca_levels = {};

    Model<float> a = build_model<float>(un, 42);
    Model<float> b = build_model<float>(ut, 42);
    REQUIRE(a.registry.size() == b.registry.size());
    for (size_t i = 0; i < a.registry.size(); ++i) {
        CHECK(a.registry[i].name == b.registry[i].name);
        REQUIRE(a.registry[i].t.shape() == b.registry[i].t.shape());
        for (long k = 0; k < a.registry[i].t.numel(); ++k)
            CHECK(a.registry[i].t.value()[k] == b.registry[i].t.value()[k]);
    }
    Tensor<float> x = rndf(Shape{2, 1, 32, 32}, 7);
    Tensor<float> ya = a.forward(x, false);
    Tensor<float> yb = b.forward(x, false);
    REQUIRE(ya.shape() == yb.shape());
    for (long i = 0; i < ya.numel(); ++i)
        CHECK(ya.value()[i] == yb.value()[i]);  // bitwise
}

TEST_CASE("init determinism") {
    Model<float> a = build_model<float>(ut_config(), 9);
    Model<float> b = build_model<float>(ut_config(), 9);
    Model<float> c = build_model<float>(ut_config(), 10);
    bool differs = false;
    for (size_t i = 0; i < a.registry.size(); ++i)
        for (long k = 0; k < a.registry[i].t.numel(); ++k) {
            CHECK(a.registry[i].t.value()[k] == b.registry[i].t.value()[k]);
            differs |=
                a.registry[i].t.value()[k] != c.registry[i].t.value()[k];
        }
    CHECK(differs);
}

TEST_CASE("forward contract") {
    Model<float> m = build_model<float>(ut_config(), 3);
    Tensor<float> x = rndf(Shape{2, 1, 64, 64}, 4);
    Tensor<float> y = m.forward(x, false);
    REQUIRE(y.shape() == Shape{2, 4, 64, 64});
    CHECK(y.all_finite());
    // per-pixel class distribution is a proper distribution after softmax
    Tensor<float> p = softmax(y, 1);
    long hw = 64 * 64;
    for (long k = 0; k < 2 * hw; k += 997) {
        double s = 0;
        for (int c = 0; c < 4; ++c)
            s += p.value()[(k / hw) * 4 * hw + c * hw + k % hw];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
    // eval mode is deterministic
    Tensor<float> y2 = m.forward(x, false);
    for (long i = 0; i < y.numel(); ++i) CHECK(y.value()[i] == y2.value()[i]);

    CHECK_THROWS_AS(m.forward(rndf(Shape{1, 2, 64, 64}, 5), false), ShapeError);
    CHECK_THROWS_AS(m.forward(rndf(Shape{1, 1, 60, 60}, 6), false), ShapeError);
}

TEST_CASE("attention capture layout") {
    VariantConfig c = ut_config();
    c.heads = 2;
    Model<float> m = build_model<float>(c, 5);
    AttentionCapture cap;
    m.forward(rndf(Shape{1, 1, 32, 32}, 6), false, &cap);
    // 2 mhsa + 3 levels x (2 mhca + 1 z)
    REQUIRE(cap.records.size() == 11);
    int mhsa = 0, mhca = 0, z = 0;
    std::set<int> mhca_levels;
    for (const auto& r : cap.records) {
        if (r.kind == "mhsa") {
            ++mhsa;
            CHECK(r.level == 0);
            CHECK(r.rows == 16);  // 4x4 bottleneck at 32x32 input
            CHECK(r.cols == 16);
        } else if (r.kind == "mhca") {
            ++mhca;
            mhca_levels.insert(r.level);
            CHECK(r.rows == r.cols);
            // every attention row is a distribution
            for (int ri = 0; ri < r.rows; ++ri) {
                double s = 0;
                for (int ci = 0; ci < r.cols; ++ci) s += r.w[ri * r.cols + ci];
                CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
            }
        } else if (r.kind == "z") {
            ++z;
            CHECK(static_cast<int>(r.w.size()) == r.rows * r.cols);
            for (double v : r.w) {
                CHECK(v > 0.0);
                CHECK(v < 1.0);
            }
        }
    }
    CHECK(mhsa == 2);
    CHECK(mhca == 6);
    CHECK(z == 3);
    CHECK(mhca_levels == std::set<int>{1, 2, 3});
}

TEST_CASE("local gate") {
    // zero weights: alpha = sigmoid(0) = 0.5
    auto g = LocalGateBlock<float>::make(8, 16);
    Tensor<float> s = rndf(Shape{1, 8, 4, 4}, 8);
    Tensor<float> yup = rndf(Shape{1, 16, 4, 4}, 9);
    auto r0 = g.forward(s, yup);
    REQUIRE(r0.out.shape() == Shape{1, 24, 4, 4});
    for (auto v : r0.alpha.value()) CHECK(v == doctest::Approx(0.5));

    // random weights: alpha stays strictly inside (0,1)
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<float> d(-0.5f, 0.5f);
    g.visit("g", [&](const std::string&, Tensor<float>& t, InitKind, bool) {
        for (auto& v : t.value()) v = d(rng);
    });
    auto r1 = g.forward(s, yup);
    for (auto v : r1.alpha.value()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }

    // full local-gate variant runs and captures one alpha map per stage
    VariantConfig c;
    c.variant = Variant::LocalGate;
    c.heads = 0;
    Model<float> m = build_model<float>(c, 11);
    AttentionCapture cap;
    Tensor<float> y = m.forward(rndf(Shape{1, 1, 32, 32}, 12), false, &cap);
    CHECK(y.shape() == Shape{1, 4, 32, 32});
    int gates = 0;
    for (const auto& rec : cap.records) gates += rec.kind == "gate";
    CHECK(gates == 3);
}

TEST_CASE("gradients reach nearly all parameters") {
    VariantConfig c = ut_config();
    c.base_channels = 4;
    c.heads = 2;
    Model<float> m = build_model<float>(c, 13);
    Tensor<float> x = rndf(Shape{2, 1, 16, 16}, 14);
    std::vector<uint8_t> labels(2 * 16 * 16);
    std::mt19937_64 rng(15);
    for (auto& l : labels) l = static_cast<uint8_t>(rng() % 4);

    Tape<float> tape;
    Tape<float>::Scope sc(tape);
    m.zero_grad();
    tape.backward(cross_entropy(m.forward(x, true), labels));

    long total = 0, touched = 0;
    for (auto* e : m.params()) {
        ++total;
        bool any = false;
        if (e->t.has_grad())
            for (auto gv : e->t.grad()) any |= gv != 0.0f;
        touched += any;
    }
    CHECK(static_cast<double>(touched) / total >= 0.99);
}

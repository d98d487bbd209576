#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

#include "utrans/training.hpp"

using namespace utrans;
namespace fs = std::filesystem;

namespace {

// logits with +big on the labelled class
Tensor<float> onehot_logits(const std::vector<uint8_t>& labels, int n, int k,
                            int h, int w, float big) {
    Tensor<float> t(Shape{n, k, h, w});
    long hw = static_cast<long>(h) * w;
    for (int ni = 0; ni < n; ++ni)
        for (long p = 0; p < hw; ++p)
            t.data()[ni * k * hw + labels[ni * hw + p] * hw + p] = big;
    return t;
}

std::vector<SegmentationSample> toy_set(int n, int size, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    std::vector<SegmentationSample> out;
    for (int i = 0; i < n; ++i) {
        SegmentationSample s;
        s.h = s.w = size;
        s.id = "toy" + std::to_string(i);
        s.image.resize(static_cast<size_t>(size) * size);
        s.mask.resize(s.image.size());
        for (auto& v : s.image) v = d(rng);
        for (auto& m : s.mask) m = static_cast<uint8_t>(rng() % 4);
        out.push_back(std::move(s));
    }
    return out;
}

VariantConfig small_cfg() {
    VariantConfig c;
    c.variant = Variant::UTransformer;
    c.base_channels = 4;
    c.heads = 2;
    c.mhca_levels = {1};
    return c;
}

}  // namespace

TEST_CASE("cross entropy pinned values") {
    int n = 1, k = 4, h = 2, w = 2;
    std::vector<uint8_t> labels = {0, 1, 2, 3};
    Tensor<float> uniform(Shape{n, k, h, w}, 0.0f);
    CHECK(cross_entropy(uniform, labels).value()[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-6));

    Tensor<float> sat = onehot_logits(labels, n, k, h, w, 1000.0f);
    CHECK(cross_entropy(sat, labels).value()[0] == doctest::Approx(0.0));

    // permuting pixels together with their labels leaves the loss unchanged
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    Tensor<float> z(Shape{n, k, h, w});
    for (auto& v : z.value()) v = d(rng);
    double base = cross_entropy(z, labels).value()[0];
    std::vector<int> perm = {2, 0, 3, 1};
    Tensor<float> zp(Shape{n, k, h, w});
    std::vector<uint8_t> lp(4);
    for (int p = 0; p < 4; ++p) {
        lp[p] = labels[perm[p]];
        for (int c = 0; c < k; ++c)
            zp.data()[c * 4 + p] = z.data()[c * 4 + perm[p]];
    }
    CHECK(cross_entropy(zp, lp).value()[0] == doctest::Approx(base));

    CHECK_THROWS_AS(cross_entropy(uniform, {0, 1, 7, 3}), ValueError);
    CHECK_THROWS_AS(cross_entropy(uniform, {0, 1}), ShapeError);
}

TEST_CASE("dice loss") {
    int n = 1, k = 4, h = 4, w = 4;
    std::mt19937_64 rng(5);
    std::vector<uint8_t> labels(16);
    for (auto& l : labels) l = static_cast<uint8_t>(rng() % k);

    Tensor<float> sat = onehot_logits(labels, n, k, h, w, 1000.0f);
    CHECK(dice_loss(sat, labels).value()[0] == doctest::Approx(0.0).epsilon(1e-4));

    Tensor<float> z(Shape{n, k, h, w});
    std::uniform_real_distribution<float> d(-2.0f, 2.0f);
    for (auto& v : z.value()) v = d(rng);
    double l = dice_loss(z, labels).value()[0];
    CHECK(l >= 0.0);
    CHECK(l < 1.0);

    // all background, confidently predicted: absent classes are rescued
    // by the smoothing term
    std::vector<uint8_t> bg(16, 0);
    Tensor<float> satbg = onehot_logits(bg, n, k, h, w, 1000.0f);
    CHECK(dice_loss(satbg, bg).value()[0] == doctest::Approx(0.0).epsilon(1e-4));
}

TEST_CASE("adam closed form") {
    auto mk = [](double v) {
        ParamEntry<double> e;
        e.name = "p";
        e.t = Tensor<double>(Shape{1}, v, true);
        e.init = InitKind::Zero;
        e.is_state = false;
        return e;
    };
    ParamEntry<double> p = mk(0.0);
    std::vector<ParamEntry<double>*> ps = {&p};
    AdamState<double> st = AdamState<double>::init(ps);
    p.t.ensure_grad();
    p.t.grad()[0] = 1.0;
    adam_step(ps, st, 1e-4);
    // t=1: mhat = g, vhat = g^2 -> step = -lr * g/(|g|+eps)
    CHECK(p.t.value()[0] == doctest::Approx(-9.99999e-5).epsilon(1e-9));

    // zero gradient leaves the parameter untouched
    ParamEntry<double> q = mk(0.7);
    std::vector<ParamEntry<double>*> qs = {&q};
    AdamState<double> st2 = AdamState<double>::init(qs);
    q.t.ensure_grad();
    adam_step(qs, st2, 1e-2);
    CHECK(q.t.value()[0] == 0.7);

    // twin parameters with twin gradients evolve identically
    ParamEntry<double> a = mk(0.1), b = mk(0.1);
    std::vector<ParamEntry<double>*> ab = {&a, &b};
    AdamState<double> st3 = AdamState<double>::init(ab);
    for (int i = 0; i < 5; ++i) {
        a.t.ensure_grad();
        b.t.ensure_grad();
        a.t.grad()[0] = b.t.grad()[0] = 0.3 * (i + 1);
        adam_step(ab, st3, 1e-3);
        CHECK(a.t.value()[0] == b.t.value()[0]);
        a.t.zero_grad();
        b.t.zero_grad();
    }

    // missing gradient is an error
    ParamEntry<double> m = mk(0.0);
    std::vector<ParamEntry<double>*> ms = {&m};
    AdamState<double> st4 = AdamState<double>::init(ms);
    CHECK_THROWS_AS(adam_step(ms, st4, 1e-3), ValueError);
}

TEST_CASE("learning rate schedule") {
    TrainConfig cfg;
    cfg.lr0 = 1e-4;
    cfg.gamma = 0.96;
    cfg.decay_interval = 1000;
    CHECK(lr_at(0, cfg) == doctest::Approx(1e-4));
    CHECK(lr_at(1000, cfg) == doctest::Approx(9.6e-5));
    CHECK(lr_at(2000, cfg) == doctest::Approx(1e-4 * 0.96 * 0.96));
    double prev = lr_at(0, cfg);
    for (long s = 1; s < 5000; s += 137) {
        double cur = lr_at(s, cfg);
        CHECK(cur < prev + 1e-18);
        prev = cur;
    }
    TrainConfig bad = cfg;
    bad.batch = 1;
    CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("train loop determinism") {
    auto data = toy_set(8, 16, 11);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch = 4;
    tc.lr0 = 1e-3;
    tc.seed = 5;

    Model<float> m1 = build_model<float>(small_cfg(), 1);
    Model<float> m2 = build_model<float>(small_cfg(), 1);
    TrainResult r1 = train(m1, data, {}, tc);
    TrainResult r2 = train(m2, data, {}, tc);
    REQUIRE(r1.epochs.size() == 2);
    CHECK(r1.steps == 4);  // 8 images / batch 4 / epoch
    CHECK(r1.epochs[0].train_loss == r2.epochs[0].train_loss);
    for (size_t i = 0; i < m1.registry.size(); ++i)
        for (long k = 0; k < m1.registry[i].t.numel(); ++k)
            CHECK(m1.registry[i].t.value()[k] ==
                  m2.registry[i].t.value()[k]);  // bitwise

    CHECK_THROWS_AS(train(m1, {}, {}, tc), ValueError);
}

TEST_CASE("checkpoint round trip") {
    fs::path path = fs::temp_directory_path() / "utrans_test_ck.utfm";
    Model<float> m = build_model<float>(small_cfg(), 2);
    TrainConfig tc;
    tc.seed = 9;
    tc.lr0 = 5e-4;
    save_checkpoint(path, m, tc, 123);

    LoadedCheckpoint lc = load_checkpoint(path);
    CHECK(lc.step == 123);
    CHECK(lc.train_config.seed == 9);
    CHECK(lc.train_config.lr0 == 5e-4);
    CHECK(lc.model.cfg.hash() == m.cfg.hash());
    REQUIRE(lc.model.registry.size() == m.registry.size());
    for (size_t i = 0; i < m.registry.size(); ++i) {
        CHECK(lc.model.registry[i].name == m.registry[i].name);
        for (long k = 0; k < m.registry[i].t.numel(); ++k)
            CHECK(lc.model.registry[i].t.value()[k] ==
                  m.registry[i].t.value()[k]);
    }
    // identical logits after reload
    auto data = toy_set(1, 16, 3);
    std::vector<const SegmentationSample*> one = {&data[0]};
    Tensor<float> x = batch_images(one);
    Tensor<float> ya = m.forward(x, false);
    Tensor<float> yb = lc.model.forward(x, false);
    for (long i = 0; i < ya.numel(); ++i) CHECK(ya.value()[i] == yb.value()[i]);

    // expected-config mismatch
    VariantConfig other = small_cfg();
    other.n_classes = 5;
    CHECK_THROWS_AS(load_checkpoint(path, &other), CheckpointError);
    fs::remove(path);
}

TEST_CASE("checkpoint error paths") {
    fs::path dir = fs::temp_directory_path();
    auto write_bytes = [&](const std::string& name, const std::string& b) {
        fs::path p = dir / name;
        std::ofstream f(p, std::ios::binary);
        f.write(b.data(), static_cast<std::streamsize>(b.size()));
        return p;
    };
    auto msg = [](const fs::path& p) {
        try {
            load_checkpoint(p);
        } catch (const CheckpointError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(msg(write_bytes("bad_magic.utfm", "NOPE0123456789"))
              .find("bad magic") != std::string::npos);

    // real checkpoint, then corrupt it in distinct ways
    fs::path good = dir / "utrans_test_good.utfm";
    Model<float> m = build_model<float>(small_cfg(), 4);
    save_checkpoint(good, m, TrainConfig{}, 1);
    std::ifstream f(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
    f.close();

    std::string vb = bytes;
    vb[4] = 9;  // version field
    CHECK(msg(write_bytes("bad_version.utfm", vb)).find("version") !=
          std::string::npos);

    std::string th = bytes.substr(0, 40);  // cut inside the header
    CHECK(msg(write_bytes("trunc_header.utfm", th)).find("truncated header") !=
          std::string::npos);

    std::string tp = bytes.substr(0, bytes.size() - 64);
    CHECK(msg(write_bytes("trunc_payload.utfm", tp)).find("truncated payload") !=
          std::string::npos);

    // truncated payload must not hand back a partially filled model
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc_payload.utfm"),
                    CheckpointError);
    for (const char* n : {"bad_magic.utfm", "bad_version.utfm",
                          "trunc_header.utfm", "trunc_payload.utfm"})
        fs::remove(dir / n);
    fs::remove(good);
}

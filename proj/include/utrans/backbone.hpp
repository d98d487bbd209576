#pragma once

#include <optional>
#include <random>

#include <json.hpp>

#include "utrans/attention.hpp"

namespace utrans {

enum class Variant { Unet, LocalGate, Mhsa, Mhca, UTransformer };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Unet: return "unet";
        case Variant::LocalGate: return "local-gate";
        case Variant::Mhsa: return "mhsa";
        case Variant::Mhca: return "mhca";
        case Variant::UTransformer: return "u-transformer";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "unet") return Variant::Unet;
    if (s == "local-gate") return Variant::LocalGate;
    if (s == "mhsa") return Variant::Mhsa;
    if (s == "mhca") return Variant::Mhca;
    if (s == "u-transformer") return Variant::UTransformer;
    throw ValueError("unknown variant '" + s + "'");
}

// Declarative model description; every compared architecture is a config.
struct VariantConfig {
    Variant variant = Variant::UTransformer;
    int depth = 3;
    int base_channels = 16;
    int heads = 4;
    bool pe = true;
    std::vector<int> mhca_levels;  // 1 = deepest decoder stage .. depth = shallowest
    int pool_cap = 16;
    int n_classes = 4;

    bool has_mhsa() const {
        return (variant == Variant::Mhsa || variant == Variant::UTransformer) &&
               heads > 0;
    }
    bool mhca_at(int level) const {
        if (variant != Variant::Mhca && variant != Variant::UTransformer)
            return false;
        if (heads <= 0) return false;
        for (int l : mhca_levels)
            if (l == level) return true;
        return false;
    }

    void validate() const {
        if (depth < 1) throw ValueError("depth must be >= 1");
        if (base_channels < 1) throw ValueError("base_channels must be >= 1");
        if (heads < 0) throw ValueError("heads must be >= 0");
        if (pool_cap < 1) throw ValueError("pool_cap must be >= 1");
        if (n_classes < 2) throw ValueError("n_classes must be >= 2");
        for (int l : mhca_levels)
            if (l < 1 || l > depth)
                throw ValueError("mhca level " + std::to_string(l) +
                                 " outside 1.." + std::to_string(depth));
        bool wants_mhca =
            variant == Variant::Mhca || variant == Variant::UTransformer;
        if (!mhca_levels.empty() && !wants_mhca)
            throw ValueError("mhca_levels given for variant " +
                             variant_name(variant));
        if (pe && (base_channels << depth) % 4 != 0)
            throw ValueError("pe=on requires bottleneck channels divisible by 4");
        int cb = base_channels << depth;
        if (has_mhsa() && cb % heads != 0)
            throw ValueError("heads must divide bottleneck channels");
    }

    nlohmann::json to_json() const {
        return {{"variant", variant_name(variant)}, {"depth", depth},
                {"base_channels", base_channels},   {"heads", heads},
                {"pe", pe},                         {"mhca_levels", mhca_levels},
                {"pool_cap", pool_cap},             {"n_classes", n_classes}};
    }
    static VariantConfig from_json(const nlohmann::json& j) {
        VariantConfig c;
        c.variant = parse_variant(j.at("variant").get<std::string>());
        c.depth = j.at("depth").get<int>();
        c.base_channels = j.at("base_channels").get<int>();
        c.heads = j.at("heads").get<int>();
        c.pe = j.at("pe").get<bool>();
        c.mhca_levels = j.at("mhca_levels").get<std::vector<int>>();
        c.pool_cap = j.at("pool_cap").get<int>();
        c.n_classes = j.at("n_classes").get<int>();
        return c;
    }
    uint64_t hash() const {
        std::string s = to_json().dump();
        uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
        return h;
    }
};

// ----------------------------------------------------------------- layers

template <typename T>
struct Conv2dLayer {
    Tensor<T> w, b;
    static Conv2dLayer make(int cin, int cout, int k) {
        Conv2dLayer l;
        l.w = Tensor<T>(Shape{cout, cin, k, k}, T(0), true);
        l.b = Tensor<T>(Shape{cout}, T(0), true);
        return l;
    }
    Tensor<T> forward(const Tensor<T>& x) const {
        return conv2d(x, w, b, Padding::Same);
    }
    template <typename F>
    void visit(const std::string& p, F&& fn) {
        fn(p + ".w", w, InitKind::HeNormal, false);
        fn(p + ".b", b, InitKind::Zero, false);
    }
};

template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma, beta, rmean, rvar;
    static BatchNormLayer make(int c) {
        BatchNormLayer l;
        l.gamma = Tensor<T>(Shape{c}, T(1), true);
        l.beta = Tensor<T>(Shape{c}, T(0), true);
        l.rmean = Tensor<T>(Shape{c}, T(0));
        l.rvar = Tensor<T>(Shape{c}, T(1));
        return l;
    }
    Tensor<T> forward(const Tensor<T>& x, bool train) {
        return batchnorm(x, gamma, beta, rmean, rvar, train);
    }
    template <typename F>
    void visit(const std::string& p, F&& fn) {
        fn(p + ".gamma", gamma, InitKind::One, false);
        fn(p + ".beta", beta, InitKind::Zero, false);
        fn(p + ".running_mean", rmean, InitKind::Zero, true);
        fn(p + ".running_var", rvar, InitKind::One, true);
    }
};

// 2 x [conv3x3 -> batchnorm -> relu]
template <typename T>
struct ConvBlock {
    Conv2dLayer<T> c1, c2;
    BatchNormLayer<T> n1, n2;
    static ConvBlock make(int cin, int cout) {
        ConvBlock b;
        b.c1 = Conv2dLayer<T>::make(cin, cout, 3);
        b.n1 = BatchNormLayer<T>::make(cout);
        b.c2 = Conv2dLayer<T>::make(cout, cout, 3);
        b.n2 = BatchNormLayer<T>::make(cout);
        return b;
    }
    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> h = relu(n1.forward(c1.forward(x), train));
        return relu(n2.forward(c2.forward(h), train));
    }
    template <typename F>
    void visit(const std::string& p, F&& fn) {
        c1.visit(p + ".conv1", fn);
        n1.visit(p + ".bn1", fn);
        c2.visit(p + ".conv2", fn);
        n2.visit(p + ".bn2", fn);
    }
};

// Additive attention gate computed from local information only: 1x1 convs
// on S and up(Y), sum, relu, 1x1 conv to one channel, sigmoid.
template <typename T>
struct LocalGateBlock {
    Conv2dLayer<T> ws, wy, psi;
    static LocalGateBlock make(int cs, int cy) {
        LocalGateBlock g;
        g.ws = Conv2dLayer<T>::make(cs, cs, 1);
        g.wy = Conv2dLayer<T>::make(cy, cs, 1);
        g.psi = Conv2dLayer<T>::make(cs, 1, 1);
        return g;
    }
    struct Result {
        Tensor<T> out;
        Tensor<T> alpha;  // (N,1,H,W), entries in (0,1)
    };
    Result forward(const Tensor<T>& s, const Tensor<T>& yup) const {
        int cs = s.shape()[1];
        Tensor<T> a = sigmoid(
            psi.forward(relu(add(ws.forward(s), wy.forward(yup)))));
        Tensor<T> gated = mul(repeat_channels(a, cs), s);
        return {concat(gated, yup, 1), a};
    }
    template <typename F>
    void visit(const std::string& p, F&& fn) {
        ws.visit(p + ".ws", fn);
        wy.visit(p + ".wy", fn);
        psi.visit(p + ".psi", fn);
    }
};

// --------------------------------------------------------------- capture

struct AttentionCapture {
    struct Record {
        std::string kind;  // "mhsa" | "mhca" | "gate" | "z"
        int level = 0;     // 0 = bottleneck; 1..depth = decoder stages, deepest first
        int head = 0;
        int rows = 0, cols = 0;
        std::vector<double> w;   // attention rows or map data
        int grid_h = 0, grid_w = 0;  // key grid (attention) or map extent
    };
    std::vector<Record> records;
};

// ----------------------------------------------------------------- model

template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T> t;
    InitKind init;
    bool is_state;  // batchnorm running statistic
};

template <typename T>
struct Model {
    VariantConfig cfg;
    std::vector<ConvBlock<T>> enc;
    ConvBlock<T> bottleneck;
    std::optional<MhsaBlock<T>> mhsa;
    struct DecStage {
        std::optional<MhcaBlock<T>> mhca;
        std::optional<LocalGateBlock<T>> gate;
        ConvBlock<T> conv;
        int level = 0;
    };
    std::vector<DecStage> dec;  // deepest first
    Conv2dLayer<T> head;

    std::vector<ParamEntry<T>> registry;

    void collect() {
        registry.clear();
        auto fn = [this](const std::string& n, Tensor<T>& t, InitKind k,
                         bool st) {
            registry.push_back({n, t, k, st});
        };
        for (size_t i = 0; i < enc.size(); ++i)
            enc[i].visit("enc" + std::to_string(i + 1), fn);
        bottleneck.visit("bottleneck", fn);
        if (mhsa) mhsa->visit("bottleneck.mhsa", fn);
        for (size_t j = 0; j < dec.size(); ++j) {
            std::string p = "dec" + std::to_string(dec[j].level);
            if (dec[j].mhca) dec[j].mhca->visit(p + ".mhca", fn);
            if (dec[j].gate) dec[j].gate->visit(p + ".gate", fn);
            dec[j].conv.visit(p + ".conv", fn);
        }
        head.visit("head", fn);
    }

    std::vector<ParamEntry<T>*> params() {
        std::vector<ParamEntry<T>*> out;
        for (auto& e : registry)
            if (!e.is_state) out.push_back(&e);
        return out;
    }

    long parameter_count() {
        long n = 0;
        for (auto& e : registry)
            if (!e.is_state) n += e.t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : registry) e.t.zero_grad();
    }

    Tensor<T> forward(const Tensor<T>& x, bool train,
                      AttentionCapture* cap = nullptr) {
        if (x.shape().rank != 4 || x.shape()[1] != 1)
            throw ShapeError("model expects (N,1,H,W) input, got " +
                             x.shape().str());
        int h = x.shape()[2], w = x.shape()[3], div = 1 << cfg.depth;
        if (h % div != 0 || w % div != 0)
            throw ShapeError("spatial extents " + x.shape().str() +
                             " not divisible by 2^depth = " + std::to_string(div));
        std::vector<Tensor<T>> skips;
        Tensor<T> f = x;
        for (auto& blk : enc) {
            f = blk.forward(f, train);
            skips.push_back(f);
            f = maxpool2d(f);
        }
        f = bottleneck.forward(f, train);
        if (mhsa) {
            std::vector<AttnMat> mats;
            f = mhsa->forward(f, cap ? &mats : nullptr);
            if (cap) {
                int bh = f.shape()[2], bw = f.shape()[3];
                for (size_t hi = 0; hi < mats.size(); ++hi)
                    cap->records.push_back({"mhsa", 0, static_cast<int>(hi),
                                            mats[hi].rows, mats[hi].cols,
                                            std::move(mats[hi].w), bh, bw});
            }
        }
        for (auto& st : dec) {
            Tensor<T>& s = skips[skips.size() - st.level];
            Tensor<T> merged;
            if (st.mhca) {
                std::vector<AttnMat> mats;
                std::vector<double> zmap;
                int zh = 0, zw = 0;
                auto r = st.mhca->forward(s, f, cap ? &mats : nullptr,
                                          cap ? &zmap : nullptr, &zh, &zw);
                if (cap) {
                    int kg = static_cast<int>(std::lround(
                        std::sqrt(static_cast<double>(mats.empty() ? 1 : mats[0].cols))));
                    for (size_t hi = 0; hi < mats.size(); ++hi)
                        cap->records.push_back({"mhca", st.level,
                                                static_cast<int>(hi),
                                                mats[hi].rows, mats[hi].cols,
                                                std::move(mats[hi].w), kg, kg});
                    cap->records.push_back(
                        {"z", st.level, 0, zh, zw, std::move(zmap), zh, zw});
                }
                merged = r.out;
            } else if (st.gate) {
                auto r = st.gate->forward(s, upsample_nearest2(f));
                if (cap) {
                    int ah = r.alpha.shape()[2], aw = r.alpha.shape()[3];
                    std::vector<double> amap(r.alpha.value().begin(),
                                             r.alpha.value().begin() + ah * aw);
                    cap->records.push_back(
                        {"gate", st.level, 0, ah, aw, std::move(amap), ah, aw});
                }
                merged = r.out;
            } else {
                merged = concat(s, upsample_nearest2(f), 1);
            }
            f = st.conv.forward(merged, train);
        }
        return head.forward(f);
    }
};

template <typename T>
Model<T> build_model(const VariantConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    int cin = 1;
    for (int i = 0; i < cfg.depth; ++i) {
        int cout = cfg.base_channels << i;
        m.enc.push_back(ConvBlock<T>::make(cin, cout));
        cin = cout;
    }
    int cb = cfg.base_channels << cfg.depth;
    m.bottleneck = ConvBlock<T>::make(cin, cb);
    if (cfg.has_mhsa()) m.mhsa = MhsaBlock<T>::make(cb, cfg.heads, cfg.pe);
    int cy = cb;
    for (int j = 0; j < cfg.depth; ++j) {
        int level = j + 1;  // 1 = deepest
        int cs = cfg.base_channels << (cfg.depth - 1 - j);
        typename Model<T>::DecStage st;
        st.level = level;
        if (cfg.mhca_at(level))
            st.mhca = MhcaBlock<T>::make(cs, cy, cfg.heads, cfg.pe, cfg.pool_cap);
        else if (cfg.variant == Variant::LocalGate)
            st.gate = LocalGateBlock<T>::make(cs, cy);
        st.conv = ConvBlock<T>::make(cs + cy, cs);
        m.dec.push_back(std::move(st));
        cy = cs;
    }
    m.head = Conv2dLayer<T>::make(cfg.base_channels, cfg.n_classes, 1);
    m.collect();

    // deterministic init: single stream, registry order
    std::mt19937_64 rng(seed);
    for (auto& e : m.registry) {
        switch (e.init) {
            case InitKind::Zero:
                std::fill(e.t.value().begin(), e.t.value().end(), T(0));
                break;
            case InitKind::One:
                std::fill(e.t.value().begin(), e.t.value().end(), T(1));
                break;
            case InitKind::HeNormal: {
                const Shape& s = e.t.shape();
                double fan_in = double(s[1]) * s[2] * s[3];
                std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
                for (auto& v : e.t.value()) v = static_cast<T>(d(rng));
                break;
            }
            case InitKind::XavierUniform: {
                const Shape& s = e.t.shape();
                double lim = std::sqrt(6.0 / (s[0] + s[1]));
                std::uniform_real_distribution<double> d(-lim, lim);
                for (auto& v : e.t.value()) v = static_cast<T>(d(rng));
                break;
            }
        }
    }
    return m;
}

}  // namespace utrans

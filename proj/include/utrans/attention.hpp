#pragma once

#include <optional>
#include <utility>

#include "utrans/ops.hpp"

namespace utrans {

enum class InitKind { HeNormal, XavierUniform, Zero, One };

// Attention weights captured during a forward pass, for export and checks.
struct AttnMat {
    int rows = 0, cols = 0;
    std::vector<double> w;  // row-major, each row sums to 1
};

// Fixed sinusoidal grid. Quarter-channel blocks: sin/cos over the row
// index, then sin/cos over the column index, geometric frequencies.
template <typename T>
Tensor<T> positional_encoding_2d(int h, int w, int c) {
    if (c % 4 != 0)
        throw ValueError("positional encoding needs channels divisible by 4, got " +
                         std::to_string(c));
    int q = c / 4;
    Tensor<T> out(Shape{1, c, h, w});
    for (int i = 0; i < q; ++i) {
        double freq = std::pow(10000.0, -static_cast<double>(i) / q);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                long hw = static_cast<long>(h) * w;
                out.data()[(0 * q + i) * hw + y * w + x] = static_cast<T>(std::sin(y * freq));
                out.data()[(1 * q + i) * hw + y * w + x] = static_cast<T>(std::cos(y * freq));
                out.data()[(2 * q + i) * hw + y * w + x] = static_cast<T>(std::sin(x * freq));
                out.data()[(3 * q + i) * hw + y * w + x] = static_cast<T>(std::cos(x * freq));
            }
    }
    return out;
}

// PE tiled across the batch so it can be added without broadcasting.
template <typename T>
Tensor<T> tile_batch(const Tensor<T>& x, int n) {
    Shape s = x.shape();
    s[0] = n;
    Tensor<T> out(s);
    long block = x.numel();
    for (int i = 0; i < n; ++i)
        std::memcpy(out.data() + static_cast<size_t>(i) * block, x.data(),
                    sizeof(T) * block);
    return out;
}

// softmax(Q K^T / sqrt(dk)) V; also returns the attention matrix A.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> scaled_dot_product_attention(
    const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.shape().rank != 2 || k.shape().rank != 2 || v.shape().rank != 2)
        throw ShapeError("attention expects rank-2 Q/K/V");
    if (q.shape()[1] != k.shape()[1])
        throw ShapeError("attention d_k mismatch: Q " + q.shape().str() +
                         " vs K " + k.shape().str());
    if (k.shape()[0] != v.shape()[0])
        throw ShapeError("attention key/value row mismatch: K " +
                         k.shape().str() + " vs V " + v.shape().str());
    int dk = q.shape()[1];
    Tensor<T> logits =
        scale(matmul(q, transpose2d(k)), static_cast<T>(1.0 / std::sqrt(double(dk))));
    Tensor<T> a = softmax(logits, 1);
    Tensor<T> out = matmul(a, v);
    return {out, a};
}

template <typename T>
struct HeadProjection {
    Tensor<T> wq, wk, wv;
};

// Per-head Q/K/V embeddings plus the combining embedding W_o.
template <typename T>
struct MultiHeadProjection {
    std::vector<HeadProjection<T>> heads;
    Tensor<T> wo;  // (h*dk) x c_out
    int dk = 0;
    int c_query = 0, c_kv = 0, c_out = 0;

    static MultiHeadProjection make(int h, int dk, int c_query, int c_kv,
                                    int c_out) {
        if (h < 1 || dk < 1) throw ValueError("projection needs h >= 1, dk >= 1");
        MultiHeadProjection p;
        p.dk = dk;
        p.c_query = c_query;
        p.c_kv = c_kv;
        p.c_out = c_out;
        for (int i = 0; i < h; ++i)
            p.heads.push_back({Tensor<T>(Shape{c_query, dk}, T(0), true),
                               Tensor<T>(Shape{c_kv, dk}, T(0), true),
                               Tensor<T>(Shape{c_kv, dk}, T(0), true)});
        p.wo = Tensor<T>(Shape{h * dk, c_out}, T(0), true);
        return p;
    }
    int head_count() const { return static_cast<int>(heads.size()); }

    template <typename F>
    void visit(const std::string& prefix, F&& fn) {
        for (size_t i = 0; i < heads.size(); ++i) {
            std::string hp = prefix + ".head" + std::to_string(i);
            fn(hp + ".wq", heads[i].wq, InitKind::XavierUniform, false);
            fn(hp + ".wk", heads[i].wk, InitKind::XavierUniform, false);
            fn(hp + ".wv", heads[i].wv, InitKind::XavierUniform, false);
        }
        fn(prefix + ".wo", wo, InitKind::XavierUniform, false);
    }
};

namespace detail {
template <typename T>
inline AttnMat snapshot(const Tensor<T>& a) {
    AttnMat m;
    m.rows = a.shape()[0];
    m.cols = a.shape()[1];
    m.w.assign(a.value().begin(), a.value().end());
    return m;
}
}  // namespace detail

// Self-attention over the bottleneck map, with a residual connection.
template <typename T>
struct MhsaBlock {
    MultiHeadProjection<T> proj;
    bool pe = true;

    static MhsaBlock make(int c, int h, bool pe) {
        if (c % h != 0)
            throw ValueError("MHSA heads must divide channels: " +
                             std::to_string(h) + " vs " + std::to_string(c));
        MhsaBlock b;
        b.proj = MultiHeadProjection<T>::make(h, c / h, c, c, c);
        b.pe = pe;
        return b;
    }

    Tensor<T> forward(const Tensor<T>& x, std::vector<AttnMat>* capture) const {
        int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
        if (c != proj.c_query)
            throw ShapeError("MHSA channel mismatch: " + x.shape().str());
        Tensor<T> xin = x;
        if (pe) {
            Tensor<T> enc = positional_encoding_2d<T>(h, w, c);
            xin = add(x, tile_batch(enc, n));
        }
        Tensor<T> tok = tokens_from_map(xin);
        std::vector<Tensor<T>> outs;
        for (int ni = 0; ni < n; ++ni) {
            Tensor<T> xi = slice_batch(tok, ni);
            Tensor<T> headcat;
            for (int hi = 0; hi < proj.head_count(); ++hi) {
                auto& hp = proj.heads[hi];
                auto [oh, a] = scaled_dot_product_attention(
                    matmul(xi, hp.wq), matmul(xi, hp.wk), matmul(xi, hp.wv));
                if (capture && ni == 0) capture->push_back(detail::snapshot(a));
                headcat = hi == 0 ? oh : concat(headcat, oh, 1);
            }
            outs.push_back(matmul(headcat, proj.wo));
        }
        Tensor<T> o = map_from_tokens(stack_batch(outs), h, w);
        return add(x, o);
    }

    template <typename F>
    void visit(const std::string& prefix, F&& fn) {
        proj.visit(prefix, fn);
    }
};

// Cross-attention gating of a skip connection S driven by the deeper map Y.
// Queries come from upsampled Y, keys and values from S; the attention
// output becomes a sigmoid filter Z applied as Z (.) S, concatenated with
// the upsampled Y.
template <typename T>
struct MhcaBlock {
    MultiHeadProjection<T> proj;
    Tensor<T> embed_w, embed_b;  // post-attention channel embedding -> Cs
    bool pe = true;
    int pool_cap = 16;

    static MhcaBlock make(int cs, int cy, int h, bool pe, int pool_cap) {
        if (pool_cap < 1) throw ValueError("pool_cap must be >= 1");
        if (cs % h != 0)
            throw ValueError("MHCA heads must divide skip channels: " +
                             std::to_string(h) + " vs " + std::to_string(cs));
        MhcaBlock b;
        b.proj = MultiHeadProjection<T>::make(h, cs / h, cy, cs, cs);
        b.embed_w = Tensor<T>(Shape{cs, cs}, T(0), true);
        b.embed_b = Tensor<T>(Shape{cs}, T(0), true);
        b.pe = pe;
        b.pool_cap = pool_cap;
        return b;
    }

    struct Result {
        Tensor<T> out;  // concat(Z (.) S, up(Y))
        Tensor<T> z;    // filter at S resolution
    };

    Result forward(const Tensor<T>& s, const Tensor<T>& y,
                   std::vector<AttnMat>* capture,
                   std::vector<double>* z_map = nullptr,
                   int* z_map_h = nullptr, int* z_map_w = nullptr) const {
        int n = s.shape()[0], cs = s.shape()[1], hs = s.shape()[2], ws = s.shape()[3];
        int cy = y.shape()[1];
        if (y.shape()[0] != n || y.shape()[2] * 2 != hs || y.shape()[3] * 2 != ws)
            throw ShapeError("MHCA expects Y one level below S: S " +
                             s.shape().str() + " vs Y " + y.shape().str());
        if (cs != proj.c_kv || cy != proj.c_query)
            throw ShapeError("MHCA projection widths inconsistent with S " +
                             s.shape().str() + " / Y " + y.shape().str());

        Tensor<T> yu = upsample_bilinear(y, hs, ws);
        Tensor<T> s_in = s, y_in = yu;
        if (pe) {
            s_in = add(s, tile_batch(positional_encoding_2d<T>(hs, ws, cs), n));
            y_in = add(yu, tile_batch(positional_encoding_2d<T>(hs, ws, cy), n));
        }
        int p = 1;
        while (std::max(hs, ws) / p > pool_cap) p *= 2;
        if (hs % p != 0 || ws % p != 0)
            throw ShapeError("MHCA pooling factor does not divide " + s.shape().str());
        Tensor<T> sp = avgpool2d(s_in, p);
        Tensor<T> yp = avgpool2d(y_in, p);
        int hp = hs / p, wp = ws / p;

        Tensor<T> stok = tokens_from_map(sp);
        Tensor<T> ytok = tokens_from_map(yp);
        std::vector<Tensor<T>> ztoks;
        for (int ni = 0; ni < n; ++ni) {
            Tensor<T> si = slice_batch(stok, ni);
            Tensor<T> yi = slice_batch(ytok, ni);
            Tensor<T> headcat;
            for (int hi = 0; hi < proj.head_count(); ++hi) {
                auto& hd = proj.heads[hi];
                auto [oh, a] = scaled_dot_product_attention(
                    matmul(yi, hd.wq), matmul(si, hd.wk), matmul(si, hd.wv));
                if (capture && ni == 0) capture->push_back(detail::snapshot(a));
                headcat = hi == 0 ? oh : concat(headcat, oh, 1);
            }
            Tensor<T> o = matmul(headcat, proj.wo);
            o = add_rowvec(matmul(o, embed_w), embed_b);
            ztoks.push_back(sigmoid(o));
        }
        Tensor<T> zp = map_from_tokens(stack_batch(ztoks), hp, wp);
        Tensor<T> z = upsample_bilinear(zp, hs, ws);
        if (z_map) {
            // channel-mean filter for batch item 0
            long hw = static_cast<long>(hs) * ws;
            z_map->assign(hw, 0.0);
            for (int ci = 0; ci < cs; ++ci)
                for (long k = 0; k < hw; ++k)
                    (*z_map)[k] += static_cast<double>(z.data()[ci * hw + k]) / cs;
            if (z_map_h) *z_map_h = hs;
            if (z_map_w) *z_map_w = ws;
        }
        return {concat(mul(z, s), yu, 1), z};
    }

    template <typename F>
    void visit(const std::string& prefix, F&& fn) {
        proj.visit(prefix, fn);
        fn(prefix + ".embed_w", embed_w, InitKind::XavierUniform, false);
        fn(prefix + ".embed_b", embed_b, InitKind::Zero, false);
    }
};

}  // namespace utrans

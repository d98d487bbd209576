#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>

#include <cblas.h>

#include "utrans/tensor.hpp"

namespace utrans {

inline void gemm_raw(bool ta, bool tb, int m, int n, int k, float alpha,
                     const float* a, int lda, const float* b, int ldb,
                     float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}
inline void gemm_raw(bool ta, bool tb, int m, int n, int k, double alpha,
                     const double* a, int lda, const double* b, int ldb,
                     double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

enum class Padding { Same, Valid };

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().rank != 2 || b.shape().rank != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " +
                         a.shape().str() + " and " + b.shape().str());
    int n = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], m = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul inner extents disagree: " + a.shape().str() +
                         " vs " + b.shape().str());
    Tensor<T> out = Tensor<T>::uninit(Shape{n, m});
    if (k > 0 && n > 0 && m > 0)
        gemm_raw(false, false, n, m, k, T(1), a.data(), k, b.data(), m, T(0),
                 out.data(), m);
    else
        std::fill(out.value().begin(), out.value().end(), T(0));
    record_op<T>("matmul", {a, b}, out, [a, b, out, n, k, m]() {
        const T* go = out.impl()->g.data();
        if (a.requires_grad() && k > 0 && n > 0 && m > 0) {
            a.impl()->ensure_grad();
            gemm_raw(false, true, n, k, m, T(1), go, m, b.data(), m, T(1),
                     a.impl()->g.data(), k);
        }
        if (b.requires_grad() && k > 0 && n > 0 && m > 0) {
            b.impl()->ensure_grad();
            gemm_raw(true, false, k, m, n, T(1), a.data(), k, go, m, T(1),
                     b.impl()->g.data(), m);
        }
    });
    return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.shape().rank != 2)
        throw ShapeError("transpose2d expects rank-2, got " + a.shape().str());
    int n = a.shape()[0], m = a.shape()[1];
    Tensor<T> out = Tensor<T>::uninit(Shape{m, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.data()[j * n + i] = a.data()[i * m + j];
    record_op<T>("transpose2d", {a}, out, [a, out, n, m]() {
        if (!a.requires_grad()) return;
        a.impl()->ensure_grad();
        const T* go = out.impl()->g.data();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) a.impl()->g[i * m + j] += go[j * n + i];
    });
    return out;
}

// ---------------------------------------------------------------- conv2d

namespace detail {

template <typename T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int ph, int pw,
            int ho, int wo, T* col) {
    // col is (cin*kh*kw) x (ho*wo)
    for (int c = 0; c < cin; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                T* row = col + ((c * kh + i) * kw + j) * (ho * wo);
                int lo = std::max(0, pw - j), hi = std::min(wo, w + pw - j);
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy + i - ph;
                    if (iy < 0 || iy >= h || lo >= hi) {
                        std::fill(row + oy * wo, row + (oy + 1) * wo, T(0));
                        continue;
                    }
                    T* r = row + oy * wo;
                    std::fill(r, r + lo, T(0));
                    std::memcpy(r + lo, x + (c * h + iy) * w + lo + j - pw,
                                static_cast<size_t>(hi - lo) * sizeof(T));
                    std::fill(r + hi, r + wo, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* col, int cin, int h, int w, int kh, int kw, int ph,
                int pw, int ho, int wo, T* gx) {
    for (int c = 0; c < cin; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const T* row = col + ((c * kh + i) * kw + j) * (ho * wo);
                int lo = std::max(0, pw - j), hi = std::min(wo, w + pw - j);
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy + i - ph;
                    if (iy < 0 || iy >= h || lo >= hi) continue;
                    const T* r = row + oy * wo;
                    T* g = gx + (c * h + iy) * w + j - pw;
                    for (int ox = lo; ox < hi; ++ox) g[ox] += r[ox];
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 Padding pad) {
    if (x.shape().rank != 4 || w.shape().rank != 4)
        throw ShapeError("conv2d expects rank-4 input/kernel, got " +
                         x.shape().str() + " and " + w.shape().str());
    int n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    int cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != cin)
        throw ShapeError("conv2d channel mismatch: input " + x.shape().str() +
                         " vs kernel " + w.shape().str());
    if (kh % 2 == 0 || kw % 2 == 0)
        throw ShapeError("conv2d kernel extents must be odd, got " +
                         w.shape().str());
    if (b.shape().rank != 1 || b.shape()[0] != cout)
        throw ShapeError("conv2d bias must be (Cout), got " + b.shape().str());
    int ph = pad == Padding::Same ? kh / 2 : 0;
    int pw = pad == Padding::Same ? kw / 2 : 0;
    int ho = h + 2 * ph - kh + 1;
    int wo = wd + 2 * pw - kw + 1;
    if (ho < 1 || wo < 1)
        throw ShapeError("conv2d kernel " + w.shape().str() +
                         " larger than padded input " + x.shape().str());

    Tensor<T> out = Tensor<T>::uninit(Shape{n, cout, ho, wo});
    int kdim = cin * kh * kw, odim = ho * wo;
    bool keep_col = Tape<T>::active() &&
                    (x.requires_grad() || w.requires_grad() || b.requires_grad());
    // with a live tape the unfolded input is kept for the backward pass
    std::shared_ptr<T[]> cols(
        new T[static_cast<size_t>(keep_col ? n : 1) * kdim * odim]);
    for (int ni = 0; ni < n; ++ni) {
        T* col = cols.get() +
                 (keep_col ? static_cast<size_t>(ni) * kdim * odim : 0);
        detail::im2col(x.data() + static_cast<size_t>(ni) * cin * h * wd, cin, h,
                       wd, kh, kw, ph, pw, ho, wo, col);
        T* o = out.data() + static_cast<size_t>(ni) * cout * odim;
        gemm_raw(false, false, cout, odim, kdim, T(1), w.data(), kdim,
                 col, odim, T(0), o, odim);
        for (int c = 0; c < cout; ++c) {
            T bc = b.data()[c];
            for (int p = 0; p < odim; ++p) o[c * odim + p] += bc;
        }
    }

    record_op<T>("conv2d", {x, w, b}, out,
                 [x, w, b, out, cols, n, cin, h, wd, cout, kh, kw, ph, pw, ho,
                  wo]() {
        int kdim = cin * kh * kw, odim = ho * wo;
        std::unique_ptr<T[]> dcol;
        if (x.requires_grad())
            dcol.reset(new T[static_cast<size_t>(kdim) * odim]);
        if (x.requires_grad()) x.impl()->ensure_grad();
        if (w.requires_grad()) w.impl()->ensure_grad();
        if (b.requires_grad()) b.impl()->ensure_grad();
        for (int ni = 0; ni < n; ++ni) {
            const T* go = out.impl()->g.data() +
                          static_cast<size_t>(ni) * cout * odim;
            const T* col = cols.get() + static_cast<size_t>(ni) * kdim * odim;
            if (w.requires_grad())
                gemm_raw(false, true, cout, kdim, odim, T(1), go, odim,
                         col, odim, T(1), w.impl()->g.data(), kdim);
            if (b.requires_grad())
                for (int c = 0; c < cout; ++c) {
                    T s = 0;
                    for (int p = 0; p < odim; ++p) s += go[c * odim + p];
                    b.impl()->g[c] += s;
                }
            if (x.requires_grad()) {
                gemm_raw(true, false, kdim, odim, cout, T(1), w.data(), kdim,
                         go, odim, T(0), dcol.get(), odim);
                detail::col2im_acc(dcol.get(), cin, h, wd, kh, kw, ph, pw, ho,
                                   wo,
                                   x.impl()->g.data() +
                                       static_cast<size_t>(ni) * cin * h * wd);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------- pooling

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
    if (x.shape().rank != 4)
        throw ShapeError("maxpool2d expects rank-4, got " + x.shape().str());
    int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (h % 2 != 0 || w % 2 != 0)
        throw ShapeError("maxpool2d requires even spatial extents, got " +
                         x.shape().str());
    int ho = h / 2, wo = w / 2;
    Tensor<T> out = Tensor<T>::uninit(Shape{n, c, ho, wo});
    auto idx = std::make_shared<std::vector<int>>(out.numel());
    for (int nc = 0; nc < n * c; ++nc) {
        const T* xi = x.data() + static_cast<size_t>(nc) * h * w;
        T* o = out.data() + static_cast<size_t>(nc) * ho * wo;
        int* am = idx->data() + static_cast<size_t>(nc) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                int base = (2 * oy) * w + 2 * ox;
                // ties resolve to the first position in row-major order
                int cand[4] = {base, base + 1, base + w, base + w + 1};
                int best = cand[0];
                for (int t = 1; t < 4; ++t)
                    if (xi[cand[t]] > xi[best]) best = cand[t];
                o[oy * wo + ox] = xi[best];
                am[oy * wo + ox] = best;
            }
        }
    }
    record_op<T>("maxpool2d", {x}, out, [x, out, idx, n, c, h, w, ho, wo]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        for (int nc = 0; nc < n * c; ++nc) {
            const T* go = out.impl()->g.data() + static_cast<size_t>(nc) * ho * wo;
            const int* am = idx->data() + static_cast<size_t>(nc) * ho * wo;
            T* gx = x.impl()->g.data() + static_cast<size_t>(nc) * h * w;
            for (int p = 0; p < ho * wo; ++p) gx[am[p]] += go[p];
        }
    });
    return out;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int win) {
    if (x.shape().rank != 4)
        throw ShapeError("avgpool2d expects rank-4, got " + x.shape().str());
    if (win < 1) throw ValueError("avgpool2d window must be >= 1");
    if (win == 1) return x;
    int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (h % win != 0 || w % win != 0)
        throw ShapeError("avgpool2d window " + std::to_string(win) +
                         " does not divide " + x.shape().str());
    int ho = h / win, wo = w / win;
    T inv = T(1) / static_cast<T>(win * win);
    Tensor<T> out = Tensor<T>::uninit(Shape{n, c, ho, wo});
    for (int nc = 0; nc < n * c; ++nc) {
        const T* xi = x.data() + static_cast<size_t>(nc) * h * w;
        T* o = out.data() + static_cast<size_t>(nc) * ho * wo;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                T s = 0;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx)
                        s += xi[(oy * win + dy) * w + ox * win + dx];
                o[oy * wo + ox] = s * inv;
            }
    }
    record_op<T>("avgpool2d", {x}, out, [x, out, n, c, h, w, ho, wo, win, inv]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        for (int nc = 0; nc < n * c; ++nc) {
            const T* go = out.impl()->g.data() + static_cast<size_t>(nc) * ho * wo;
            T* gx = x.impl()->g.data() + static_cast<size_t>(nc) * h * w;
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    T g = go[oy * wo + ox] * inv;
                    for (int dy = 0; dy < win; ++dy)
                        for (int dx = 0; dx < win; ++dx)
                            gx[(oy * win + dy) * w + ox * win + dx] += g;
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------- upsampling

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
    if (x.shape().rank != 4)
        throw ShapeError("upsample_nearest2 expects rank-4, got " +
                         x.shape().str());
    int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    int ho = h * 2, wo = w * 2;
    Tensor<T> out = Tensor<T>::uninit(Shape{n, c, ho, wo});
    for (int nc = 0; nc < n * c; ++nc) {
        const T* xi = x.data() + static_cast<size_t>(nc) * h * w;
        T* o = out.data() + static_cast<size_t>(nc) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xcol = 0; xcol < wo; ++xcol)
                o[y * wo + xcol] = xi[(y / 2) * w + xcol / 2];
    }
    record_op<T>("upsample_nearest2", {x}, out, [x, out, n, c, h, w, ho, wo]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        for (int nc = 0; nc < n * c; ++nc) {
            const T* go = out.impl()->g.data() + static_cast<size_t>(nc) * ho * wo;
            T* gx = x.impl()->g.data() + static_cast<size_t>(nc) * h * w;
            for (int y = 0; y < ho; ++y)
                for (int xcol = 0; xcol < wo; ++xcol)
                    gx[(y / 2) * w + xcol / 2] += go[y * wo + xcol];
        }
    });
    return out;
}

namespace detail {
// align_corners = false source coordinate
inline void bilin_coeff(int out, int in, int i, int& i0, int& i1, double& w1) {
    double src = (i + 0.5) * (static_cast<double>(in) / out) - 0.5;
    if (src < 0) src = 0;
    if (src > in - 1) src = in - 1;
    i0 = static_cast<int>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    w1 = src - i0;
}
}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int oh, int ow) {
    if (x.shape().rank != 4)
        throw ShapeError("upsample_bilinear expects rank-4, got " +
                         x.shape().str());
    if (oh < 1 || ow < 1) throw ValueError("upsample_bilinear output size < 1");
    int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    Tensor<T> out = Tensor<T>::uninit(Shape{n, c, oh, ow});
    std::vector<int> y0(oh), y1(oh), x0(ow), x1(ow);
    std::vector<double> wy(oh), wx(ow);
    for (int i = 0; i < oh; ++i) detail::bilin_coeff(oh, h, i, y0[i], y1[i], wy[i]);
    for (int j = 0; j < ow; ++j) detail::bilin_coeff(ow, w, j, x0[j], x1[j], wx[j]);
    for (int nc = 0; nc < n * c; ++nc) {
        const T* xi = x.data() + static_cast<size_t>(nc) * h * w;
        T* o = out.data() + static_cast<size_t>(nc) * oh * ow;
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                double a = (1 - wy[i]) * (1 - wx[j]) * xi[y0[i] * w + x0[j]] +
                           (1 - wy[i]) * wx[j] * xi[y0[i] * w + x1[j]] +
                           wy[i] * (1 - wx[j]) * xi[y1[i] * w + x0[j]] +
                           wy[i] * wx[j] * xi[y1[i] * w + x1[j]];
                o[i * ow + j] = static_cast<T>(a);
            }
    }
    record_op<T>("upsample_bilinear", {x}, out,
                 [x, out, n, c, h, w, oh, ow, y0, y1, x0, x1, wy, wx]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        for (int nc = 0; nc < n * c; ++nc) {
            const T* go = out.impl()->g.data() + static_cast<size_t>(nc) * oh * ow;
            T* gx = x.impl()->g.data() + static_cast<size_t>(nc) * h * w;
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double g = go[i * ow + j];
                    gx[y0[i] * w + x0[j]] += static_cast<T>((1 - wy[i]) * (1 - wx[j]) * g);
                    gx[y0[i] * w + x1[j]] += static_cast<T>((1 - wy[i]) * wx[j] * g);
                    gx[y1[i] * w + x0[j]] += static_cast<T>(wy[i] * (1 - wx[j]) * g);
                    gx[y1[i] * w + x1[j]] += static_cast<T>(wy[i] * wx[j] * g);
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------- softmax

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    int rank = x.shape().rank;
    if (axis < 0 || axis >= rank)
        throw ValueError("softmax axis out of range for shape " +
                         x.shape().str());
    long outer = 1, inner = 1;
    int len = x.shape()[axis];
    for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (int i = axis + 1; i < rank; ++i) inner *= x.shape()[i];
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* xi = x.data();
    T* o = out.data();
    for (long u = 0; u < outer; ++u)
        for (long v = 0; v < inner; ++v) {
            const T* p = xi + u * len * inner + v;
            T* q = o + u * len * inner + v;
            T mx = p[0];
            for (int i = 1; i < len; ++i) mx = std::max(mx, p[i * inner]);
            T sum = 0;
            for (int i = 0; i < len; ++i) {
                T e = std::exp(p[i * inner] - mx);
                q[i * inner] = e;
                sum += e;
            }
            for (int i = 0; i < len; ++i) q[i * inner] /= sum;
        }
    record_op<T>("softmax", {x}, out, [x, out, outer, inner, len]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        const T* s = out.data();
        const T* go = out.impl()->g.data();
        T* gx = x.impl()->g.data();
        for (long u = 0; u < outer; ++u)
            for (long v = 0; v < inner; ++v) {
                size_t base = u * len * inner + v;
                T dot = 0;
                for (int i = 0; i < len; ++i)
                    dot += go[base + i * inner] * s[base + i * inner];
                for (int i = 0; i < len; ++i)
                    gx[base + i * inner] +=
                        s[base + i * inner] * (go[base + i * inner] - dot);
            }
    });
    return out;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* xd = x.data();
    T* od = out.data();
    for (long i = 0; i < x.numel(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
    record_op<T>("relu", {x}, out, [x, out]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        const T* xd = x.data();
        const T* go = out.impl()->g.data();
        T* gx = x.impl()->g.data();
        for (long i = 0; i < x.numel(); ++i)
            if (xd[i] > T(0)) gx[i] += go[i];
    });
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* xd = x.data();
    T* od = out.data();
    for (long i = 0; i < x.numel(); ++i)
        od[i] = T(1) / (T(1) + std::exp(-xd[i]));
    record_op<T>("sigmoid", {x}, out, [x, out]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        const T* od = out.data();
        const T* go = out.impl()->g.data();
        T* gx = x.impl()->g.data();
        for (long i = 0; i < x.numel(); ++i) {
            T y = od[i];
            gx[i] += go[i] * y * (T(1) - y);
        }
    });
    return out;
}

namespace detail {
// shapes equal, or one operand scalar (the only broadcast supported)
template <typename T>
inline void check_binary(const Tensor<T>& a, const Tensor<T>& b,
                         const char* op) {
    if (a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1) return;
    throw ShapeError(std::string(op) + " shape mismatch: " + a.shape().str() +
                     " vs " + b.shape().str());
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_binary(a, b, "add");
    const Tensor<T>& big = a.numel() >= b.numel() ? a : b;
    Tensor<T> out = Tensor<T>::uninit(big.shape());
    bool as = a.numel() == 1 && b.numel() > 1, bs = b.numel() == 1 && a.numel() > 1;
    const T* ad = a.data();
    const T* bd = b.data();
    T* od = out.data();
    for (long i = 0; i < out.numel(); ++i)
        od[i] = ad[as ? 0 : i] + bd[bs ? 0 : i];
    record_op<T>("add", {a, b}, out, [a, b, out, as, bs]() {
        const T* go = out.impl()->g.data();
        long n = out.numel();
        if (a.requires_grad()) {
            a.impl()->ensure_grad();
            T* ga = a.impl()->g.data();
            for (long i = 0; i < n; ++i) ga[as ? 0 : i] += go[i];
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            T* gb = b.impl()->g.data();
            for (long i = 0; i < n; ++i) gb[bs ? 0 : i] += go[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_binary(a, b, "mul");
    const Tensor<T>& big = a.numel() >= b.numel() ? a : b;
    Tensor<T> out = Tensor<T>::uninit(big.shape());
    bool as = a.numel() == 1 && b.numel() > 1, bs = b.numel() == 1 && a.numel() > 1;
    const T* ad = a.data();
    const T* bd = b.data();
    T* od = out.data();
    for (long i = 0; i < out.numel(); ++i)
        od[i] = ad[as ? 0 : i] * bd[bs ? 0 : i];
    record_op<T>("mul", {a, b}, out, [a, b, out, as, bs]() {
        const T* go = out.impl()->g.data();
        long n = out.numel();
        if (a.requires_grad()) {
            a.impl()->ensure_grad();
            T* ga = a.impl()->g.data();
            const T* bd = b.data();
            for (long i = 0; i < n; ++i) ga[as ? 0 : i] += go[i] * bd[bs ? 0 : i];
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            T* gb = b.impl()->g.data();
            const T* ad = a.data();
            for (long i = 0; i < n; ++i) gb[bs ? 0 : i] += go[i] * ad[as ? 0 : i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* ad = a.data();
    T* od = out.data();
    for (long i = 0; i < a.numel(); ++i) od[i] = ad[i] * c;
    record_op<T>("scale", {a}, out, [a, out, c]() {
        if (!a.requires_grad()) return;
        a.impl()->ensure_grad();
        const T* go = out.impl()->g.data();
        T* ga = a.impl()->g.data();
        for (long i = 0; i < a.numel(); ++i) ga[i] += go[i] * c;
    });
    return out;
}

// add a length-m row vector to every row of an (n,m) matrix
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.shape().rank != 2 || b.shape().rank != 1 ||
        b.shape()[0] != x.shape()[1])
        throw ShapeError("add_rowvec shape mismatch: " + x.shape().str() +
                         " vs " + b.shape().str());
    int n = x.shape()[0], m = x.shape()[1];
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* xd = x.data();
    const T* bd = b.data();
    T* od = out.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) od[i * m + j] = xd[i * m + j] + bd[j];
    record_op<T>("add_rowvec", {x, b}, out, [x, b, out, n, m]() {
        const T* go = out.impl()->g.data();
        if (x.requires_grad()) {
            x.impl()->ensure_grad();
            T* gx = x.impl()->g.data();
            for (long i = 0; i < x.numel(); ++i) gx[i] += go[i];
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            T* gb = b.impl()->g.data();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) gb[j] += go[i * m + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------- concat

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
    if (a.shape().rank != b.shape().rank)
        throw ShapeError("concat rank mismatch: " + a.shape().str() + " vs " +
                         b.shape().str());
    int rank = a.shape().rank;
    if (axis < 0 || axis >= rank) throw ValueError("concat axis out of range");
    for (int i = 0; i < rank; ++i)
        if (i != axis && a.shape()[i] != b.shape()[i])
            throw ShapeError("concat non-axis extents disagree: " +
                             a.shape().str() + " vs " + b.shape().str());
    Shape os = a.shape();
    os[axis] = a.shape()[axis] + b.shape()[axis];
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int i = axis + 1; i < rank; ++i) inner *= a.shape()[i];
    long la = a.shape()[axis] * inner, lb = b.shape()[axis] * inner;
    Tensor<T> out = Tensor<T>::uninit(os);
    for (long u = 0; u < outer; ++u) {
        std::memcpy(out.data() + u * (la + lb), a.data() + u * la,
                    sizeof(T) * la);
        std::memcpy(out.data() + u * (la + lb) + la, b.data() + u * lb,
                    sizeof(T) * lb);
    }
    record_op<T>("concat", {a, b}, out, [a, b, out, outer, la, lb]() {
        const T* go = out.impl()->g.data();
        if (a.requires_grad()) {
            a.impl()->ensure_grad();
            T* ga = a.impl()->g.data();
            for (long u = 0; u < outer; ++u)
                for (long i = 0; i < la; ++i)
                    ga[u * la + i] += go[u * (la + lb) + i];
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            T* gb = b.impl()->g.data();
            for (long u = 0; u < outer; ++u)
                for (long i = 0; i < lb; ++i)
                    gb[u * lb + i] += go[u * (la + lb) + la + i];
        }
    });
    return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out(Shape{1});
    T s = 0;
    const T* xd = x.data();
    for (long i = 0; i < x.numel(); ++i) s += xd[i];
    out.data()[0] = s;
    record_op<T>("sum_all", {x}, out, [x, out]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        T g = out.impl()->g[0];
        T* gx = x.impl()->g.data();
        for (long i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    return out;
}

// ---------------------------------------------------------------- reshapes

// (N,C,H,W) -> (N, H*W, C): one token per pixel
template <typename T>
Tensor<T> tokens_from_map(const Tensor<T>& x) {
    if (x.shape().rank != 4)
        throw ShapeError("tokens_from_map expects rank-4, got " +
                         x.shape().str());
    int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    int hw = h * w;
    Tensor<T> out = Tensor<T>::uninit(Shape{n, hw, c});
    const T* xd = x.data();
    T* od = out.data();
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci)
            for (int p = 0; p < hw; ++p)
                od[(static_cast<size_t>(ni) * hw + p) * c + ci] =
                    xd[(static_cast<size_t>(ni) * c + ci) * hw + p];
    record_op<T>("tokens_from_map", {x}, out, [x, out, n, c, hw]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        T* gx = x.impl()->g.data();
        const T* go = out.impl()->g.data();
        for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci)
                for (int p = 0; p < hw; ++p)
                    gx[(static_cast<size_t>(ni) * c + ci) * hw + p] +=
                        go[(static_cast<size_t>(ni) * hw + p) * c + ci];
    });
    return out;
}

// (N, H*W, C) -> (N,C,H,W)
template <typename T>
Tensor<T> map_from_tokens(const Tensor<T>& t, int h, int w) {
    if (t.shape().rank != 3)
        throw ShapeError("map_from_tokens expects rank-3, got " +
                         t.shape().str());
    int n = t.shape()[0], hw = t.shape()[1], c = t.shape()[2];
    if (hw != h * w)
        throw ShapeError("map_from_tokens token count " + std::to_string(hw) +
                         " != " + std::to_string(h) + "*" + std::to_string(w));
    Tensor<T> out = Tensor<T>::uninit(Shape{n, c, h, w});
    const T* td = t.data();
    T* od = out.data();
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci)
            for (int p = 0; p < hw; ++p)
                od[(static_cast<size_t>(ni) * c + ci) * hw + p] =
                    td[(static_cast<size_t>(ni) * hw + p) * c + ci];
    record_op<T>("map_from_tokens", {t}, out, [t, out, n, c, hw]() {
        if (!t.requires_grad()) return;
        t.impl()->ensure_grad();
        T* gt = t.impl()->g.data();
        const T* go = out.impl()->g.data();
        for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci)
                for (int p = 0; p < hw; ++p)
                    gt[(static_cast<size_t>(ni) * hw + p) * c + ci] +=
                        go[(static_cast<size_t>(ni) * c + ci) * hw + p];
    });
    return out;
}

// x[i, ...] as a rank-(r-1) tensor
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int i) {
    if (x.shape().rank < 2) throw ShapeError("slice_batch needs rank >= 2");
    if (i < 0 || i >= x.shape()[0]) throw ValueError("slice_batch index out of range");
    Shape os;
    os.rank = x.shape().rank - 1;
    for (int k = 0; k < os.rank; ++k) os[k] = x.shape()[k + 1];
    long block = os.numel();
    Tensor<T> out = Tensor<T>::uninit(os);
    std::memcpy(out.data(), x.data() + static_cast<size_t>(i) * block,
                sizeof(T) * block);
    record_op<T>("slice_batch", {x}, out, [x, out, i, block]() {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        T* gx = x.impl()->g.data() + static_cast<size_t>(i) * block;
        const T* go = out.impl()->g.data();
        for (long k = 0; k < block; ++k) gx[k] += go[k];
    });
    return out;
}

template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ValueError("stack_batch of nothing");
    Shape es = xs[0].shape();
    for (const auto& x : xs)
        if (x.shape() != es)
            throw ShapeError("stack_batch element shape mismatch");
    if (es.rank >= 4) throw ShapeError("stack_batch would exceed rank 4");
    Shape os;
    os.rank = es.rank + 1;
    os[0] = static_cast<int>(xs.size());
    for (int k = 0; k < es.rank; ++k) os[k + 1] = es[k];
    long block = es.numel();
    Tensor<T> out = Tensor<T>::uninit(os);
    for (size_t i = 0; i < xs.size(); ++i)
        std::memcpy(out.data() + i * block, xs[i].data(), sizeof(T) * block);
    record_op<T>("stack_batch", xs, out, [xs, out, block]() {
        for (size_t i = 0; i < xs.size(); ++i) {
            if (!xs[i].requires_grad()) continue;
            xs[i].impl()->ensure_grad();
            T* gx = xs[i].impl()->g.data();
            const T* go = out.impl()->g.data() + i * block;
            for (long k = 0; k < block; ++k) gx[k] += go[k];
        }
    });
    return out;
}

// tile a (N,1,H,W) map across C channels
template <typename T>
Tensor<T> repeat_channels(const Tensor<T>& a, int c) {
    if (a.shape().rank != 4 || a.shape()[1] != 1)
        throw ShapeError("repeat_channels expects (N,1,H,W), got " +
                         a.shape().str());
    int n = a.shape()[0], h = a.shape()[2], w = a.shape()[3];
    long hw = static_cast<long>(h) * w;
    Tensor<T> out = Tensor<T>::uninit(Shape{n, c, h, w});
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci)
            std::memcpy(out.data() + (static_cast<size_t>(ni) * c + ci) * hw,
                        a.data() + static_cast<size_t>(ni) * hw, sizeof(T) * hw);
    record_op<T>("repeat_channels", {a}, out, [a, out, n, c, hw]() {
        if (!a.requires_grad()) return;
        a.impl()->ensure_grad();
        for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci)
                for (long p = 0; p < hw; ++p)
                    a.impl()->g[static_cast<size_t>(ni) * hw + p] +=
                        out.impl()->g[(static_cast<size_t>(ni) * c + ci) * hw + p];
    });
    return out;
}

// ---------------------------------------------------------------- batchnorm

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, bool train,
                    double momentum = 0.9, double eps = 1e-5) {
    if (x.shape().rank != 4)
        throw ShapeError("batchnorm expects rank-4, got " + x.shape().str());
    int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        throw ShapeError("batchnorm parameter extent != channel count");
    if (train && n < 2)
        throw ValueError("batchnorm train mode requires batch >= 2");
    long hw = static_cast<long>(h) * w;
    long m = static_cast<long>(n) * hw;
    Tensor<T> out = Tensor<T>::uninit(x.shape());

    if (train) {
        auto xhat = std::make_shared<std::vector<T>>(x.numel());
        auto invstd = std::make_shared<std::vector<T>>(c);
        for (int ci = 0; ci < c; ++ci) {
            double mean = 0;
            for (int ni = 0; ni < n; ++ni) {
                const T* p = x.data() + (static_cast<size_t>(ni) * c + ci) * hw;
                for (long k = 0; k < hw; ++k) mean += p[k];
            }
            mean /= m;
            double var = 0;
            for (int ni = 0; ni < n; ++ni) {
                const T* p = x.data() + (static_cast<size_t>(ni) * c + ci) * hw;
                for (long k = 0; k < hw; ++k) {
                    double d = p[k] - mean;
                    var += d * d;
                }
            }
            var /= m;
            double is = 1.0 / std::sqrt(var + eps);
            (*invstd)[ci] = static_cast<T>(is);
            for (int ni = 0; ni < n; ++ni) {
                const T* p = x.data() + (static_cast<size_t>(ni) * c + ci) * hw;
                T* xh = xhat->data() + (static_cast<size_t>(ni) * c + ci) * hw;
                T* o = out.data() + (static_cast<size_t>(ni) * c + ci) * hw;
                for (long k = 0; k < hw; ++k) {
                    xh[k] = static_cast<T>((p[k] - mean) * is);
                    o[k] = gamma.data()[ci] * xh[k] + beta.data()[ci];
                }
            }
            running_mean.data()[ci] = static_cast<T>(
                momentum * running_mean.data()[ci] + (1 - momentum) * mean);
            running_var.data()[ci] = static_cast<T>(
                momentum * running_var.data()[ci] + (1 - momentum) * var);
        }
        record_op<T>("batchnorm", {x, gamma, beta}, out,
                     [x, gamma, beta, out, xhat, invstd, n, c, hw, m]() {
            const T* go = out.impl()->g.data();
            if (gamma.requires_grad()) gamma.impl()->ensure_grad();
            if (beta.requires_grad()) beta.impl()->ensure_grad();
            if (x.requires_grad()) x.impl()->ensure_grad();
            for (int ci = 0; ci < c; ++ci) {
                double dg = 0, db = 0;
                for (int ni = 0; ni < n; ++ni) {
                    const T* g = go + (static_cast<size_t>(ni) * c + ci) * hw;
                    const T* xh = xhat->data() + (static_cast<size_t>(ni) * c + ci) * hw;
                    for (long k = 0; k < hw; ++k) {
                        dg += g[k] * xh[k];
                        db += g[k];
                    }
                }
                if (gamma.requires_grad()) gamma.impl()->g[ci] += static_cast<T>(dg);
                if (beta.requires_grad()) beta.impl()->g[ci] += static_cast<T>(db);
                if (x.requires_grad()) {
                    double gi = gamma.data()[ci] * (*invstd)[ci];
                    for (int ni = 0; ni < n; ++ni) {
                        T* gx = x.impl()->g.data() + (static_cast<size_t>(ni) * c + ci) * hw;
                        const T* g = go + (static_cast<size_t>(ni) * c + ci) * hw;
                        const T* xh = xhat->data() + (static_cast<size_t>(ni) * c + ci) * hw;
                        for (long k = 0; k < hw; ++k)
                            gx[k] += static_cast<T>(
                                gi * (g[k] - db / m - xh[k] * dg / m));
                    }
                }
            }
        });
    } else {
        // eval mode depends only on running stats
        for (int ci = 0; ci < c; ++ci) {
            double is = 1.0 / std::sqrt(static_cast<double>(running_var.data()[ci]) + eps);
            double mean = running_mean.data()[ci];
            for (int ni = 0; ni < n; ++ni) {
                const T* p = x.data() + (static_cast<size_t>(ni) * c + ci) * hw;
                T* o = out.data() + (static_cast<size_t>(ni) * c + ci) * hw;
                for (long k = 0; k < hw; ++k)
                    o[k] = static_cast<T>(gamma.data()[ci] * (p[k] - mean) * is +
                                          beta.data()[ci]);
            }
        }
        Tensor<T> rm = running_mean, rv = running_var;
        record_op<T>("batchnorm_eval", {x, gamma, beta}, out,
                     [x, gamma, beta, out, rm, rv, n, c, hw, eps]() {
            const T* go = out.impl()->g.data();
            if (x.requires_grad()) x.impl()->ensure_grad();
            if (gamma.requires_grad()) gamma.impl()->ensure_grad();
            if (beta.requires_grad()) beta.impl()->ensure_grad();
            for (int ci = 0; ci < c; ++ci) {
                double is = 1.0 / std::sqrt(static_cast<double>(rv.data()[ci]) + eps);
                double mean = rm.data()[ci];
                double dg = 0, db = 0;
                for (int ni = 0; ni < n; ++ni) {
                    const T* g = go + (static_cast<size_t>(ni) * c + ci) * hw;
                    const T* p = x.data() + (static_cast<size_t>(ni) * c + ci) * hw;
                    T* gx = x.requires_grad()
                                ? x.impl()->g.data() + (static_cast<size_t>(ni) * c + ci) * hw
                                : nullptr;
                    for (long k = 0; k < hw; ++k) {
                        if (gx) gx[k] += static_cast<T>(g[k] * gamma.data()[ci] * is);
                        dg += g[k] * (p[k] - mean) * is;
                        db += g[k];
                    }
                }
                if (gamma.requires_grad()) gamma.impl()->g[ci] += static_cast<T>(dg);
                if (beta.requires_grad()) beta.impl()->g[ci] += static_cast<T>(db);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- losses

// mean over pixels of -log softmax(logits)[label]
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<uint8_t>& labels) {
    if (logits.shape().rank != 4)
        throw ShapeError("cross_entropy expects rank-4 logits, got " +
                         logits.shape().str());
    int n = logits.shape()[0], k = logits.shape()[1], h = logits.shape()[2],
        w = logits.shape()[3];
    long npix = static_cast<long>(n) * h * w;
    if (static_cast<long>(labels.size()) != npix)
        throw ShapeError("cross_entropy label count " +
                         std::to_string(labels.size()) + " != pixel count " +
                         std::to_string(npix));
    long hw = static_cast<long>(h) * w;
    auto probs = std::make_shared<std::vector<T>>(logits.numel());
    double loss = 0;
    for (int ni = 0; ni < n; ++ni)
        for (long p = 0; p < hw; ++p) {
            int lab = labels[ni * hw + p];
            if (lab >= k)
                throw ValueError("cross_entropy label " + std::to_string(lab) +
                                 " out of range for " + std::to_string(k) +
                                 " classes");
            const T* z = logits.data() + static_cast<size_t>(ni) * k * hw + p;
            T mx = z[0];
            for (int ci = 1; ci < k; ++ci) mx = std::max(mx, z[ci * hw]);
            double sum = 0;
            for (int ci = 0; ci < k; ++ci)
                sum += std::exp(static_cast<double>(z[ci * hw] - mx));
            double lse = mx + std::log(sum);
            for (int ci = 0; ci < k; ++ci)
                (*probs)[static_cast<size_t>(ni) * k * hw + ci * hw + p] =
                    static_cast<T>(std::exp(z[ci * hw] - lse));
            loss -= z[lab * hw] - lse;
        }
    Tensor<T> out(Shape{1});
    out.data()[0] = static_cast<T>(loss / npix);
    record_op<T>("cross_entropy", {logits}, out,
                 [logits, out, probs, labels, n, k, hw, npix]() {
        if (!logits.requires_grad()) return;
        logits.impl()->ensure_grad();
        T g = out.impl()->g[0];
        for (int ni = 0; ni < n; ++ni)
            for (long p = 0; p < hw; ++p) {
                int lab = labels[ni * hw + p];
                for (int ci = 0; ci < k; ++ci) {
                    size_t idx = static_cast<size_t>(ni) * k * hw + ci * hw + p;
                    T d = (*probs)[idx] - (ci == lab ? T(1) : T(0));
                    logits.impl()->g[idx] += g * d / static_cast<T>(npix);
                }
            }
    });
    return out;
}

// soft Dice: 1 - mean over classes of (2*sum(p*g)+s)/(sum(p)+sum(g)+s)
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const std::vector<uint8_t>& labels,
                    T smooth = T(1)) {
    if (logits.shape().rank != 4)
        throw ShapeError("dice_loss expects rank-4 logits, got " +
                         logits.shape().str());
    int n = logits.shape()[0], k = logits.shape()[1], h = logits.shape()[2],
        w = logits.shape()[3];
    long hw = static_cast<long>(h) * w;
    long npix = static_cast<long>(n) * hw;
    if (static_cast<long>(labels.size()) != npix)
        throw ShapeError("dice_loss label count mismatch");
    for (uint8_t lab : labels)
        if (lab >= k)
            throw ValueError("dice_loss label " + std::to_string(int(lab)) +
                             " out of range");
    auto probs = std::make_shared<std::vector<T>>(logits.numel());
    for (int ni = 0; ni < n; ++ni)
        for (long p = 0; p < hw; ++p) {
            const T* z = logits.data() + static_cast<size_t>(ni) * k * hw + p;
            T mx = z[0];
            for (int ci = 1; ci < k; ++ci) mx = std::max(mx, z[ci * hw]);
            double sum = 0;
            for (int ci = 0; ci < k; ++ci)
                sum += std::exp(static_cast<double>(z[ci * hw] - mx));
            for (int ci = 0; ci < k; ++ci)
                (*probs)[static_cast<size_t>(ni) * k * hw + ci * hw + p] =
                    static_cast<T>(std::exp(static_cast<double>(z[ci * hw] - mx)) / sum);
        }
    auto inter = std::make_shared<std::vector<double>>(k, 0.0);
    auto denom = std::make_shared<std::vector<double>>(k, 0.0);
    for (int ci = 0; ci < k; ++ci) {
        double a = 0, b = 0;
        for (int ni = 0; ni < n; ++ni)
            for (long p = 0; p < hw; ++p) {
                T pr = (*probs)[static_cast<size_t>(ni) * k * hw + ci * hw + p];
                bool gt = labels[ni * hw + p] == ci;
                a += gt ? pr : T(0);
                b += pr + (gt ? 1 : 0);
            }
        (*inter)[ci] = a;
        (*denom)[ci] = b;
    }
    double dice_sum = 0;
    for (int ci = 0; ci < k; ++ci)
        dice_sum += (2 * (*inter)[ci] + smooth) / ((*denom)[ci] + smooth);
    Tensor<T> out(Shape{1});
    out.data()[0] = static_cast<T>(1.0 - dice_sum / k);
    record_op<T>("dice_loss", {logits}, out,
                 [logits, out, probs, inter, denom, labels, n, k, hw, smooth]() {
        if (!logits.requires_grad()) return;
        logits.impl()->ensure_grad();
        T g = out.impl()->g[0];
        // dL/dp, then chain through the per-pixel softmax
        std::vector<double> dnum(k), dden(k);
        for (int ci = 0; ci < k; ++ci) {
            double d = (*denom)[ci] + smooth;
            dnum[ci] = 2.0 / d;
            dden[ci] = (2 * (*inter)[ci] + smooth) / (d * d);
        }
        for (int ni = 0; ni < n; ++ni)
            for (long p = 0; p < hw; ++p) {
                double dp[64];
                double dot = 0;
                for (int ci = 0; ci < k; ++ci) {
                    bool gt = labels[ni * hw + p] == ci;
                    double dL_ddice = -1.0 / k;
                    dp[ci] = dL_ddice * ((gt ? dnum[ci] : 0.0) - dden[ci]);
                    dot += dp[ci] *
                           (*probs)[static_cast<size_t>(ni) * k * hw + ci * hw + p];
                }
                for (int ci = 0; ci < k; ++ci) {
                    size_t idx = static_cast<size_t>(ni) * k * hw + ci * hw + p;
                    logits.impl()->g[idx] +=
                        g * static_cast<T>((*probs)[idx] * (dp[ci] - dot));
                }
            }
    });
    return out;
}

// per-pixel argmax over the class axis (not differentiable)
template <typename T>
std::vector<uint8_t> argmax_channel(const Tensor<T>& logits) {
    if (logits.shape().rank != 4)
        throw ShapeError("argmax_channel expects rank-4 logits");
    int n = logits.shape()[0], k = logits.shape()[1];
    long hw = static_cast<long>(logits.shape()[2]) * logits.shape()[3];
    std::vector<uint8_t> out(static_cast<size_t>(n) * hw);
    for (int ni = 0; ni < n; ++ni)
        for (long p = 0; p < hw; ++p) {
            const T* z = logits.data() + static_cast<size_t>(ni) * k * hw + p;
            int best = 0;
            for (int ci = 1; ci < k; ++ci)
                if (z[ci * hw] > z[best * hw]) best = ci;
            out[ni * hw + p] = static_cast<uint8_t>(best);
        }
    return out;
}

}  // namespace utrans

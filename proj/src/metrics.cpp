#include "utrans/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace fs = std::filesystem;

namespace utrans {

double dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
            int h, int w, int cls) {
    size_t n = static_cast<size_t>(h) * w;
    if (pred.size() != n || gt.size() != n)
        throw ShapeError("dice: mask sizes disagree with extent");
    long p = 0, g = 0, inter = 0;
    for (size_t i = 0; i < n; ++i) {
        bool ip = pred[i] == cls, ig = gt[i] == cls;
        p += ip;
        g += ig;
        inter += ip && ig;
    }
    if (p == 0 && g == 0) return 1.0;
    if (p == 0 || g == 0) return 0.0;
    return 2.0 * inter / (p + g);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher exact 1D squared distance transform
void dt1d(const std::vector<double>& f, std::vector<double>& d, int n) {
    std::vector<int> v(n);
    std::vector<double> z(n + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (f[v[0]] == kInf) {
            v[0] = q;
            continue;
        }
        double s;
        for (;;) {
            s = ((f[q] + q * (double)q) - (f[v[k]] + v[k] * (double)v[k])) /
                (2.0 * q - 2.0 * v[k]);
            if (s <= z[k]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        if (f[v[0]] == kInf) {
            d[q] = kInf;
            continue;
        }
        while (z[k + 1] < q) ++k;
        double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

// exact squared Euclidean distance to the nearest set pixel
std::vector<double> edt2(const std::vector<uint8_t>& mask, int h, int w,
                         int cls) {
    std::vector<double> d(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < d.size(); ++i)
        d[i] = mask[i] == cls ? 0.0 : kInf;
    std::vector<double> f(std::max(h, w)), out(std::max(h, w));
    for (int x = 0; x < w; ++x) {  // columns
        for (int y = 0; y < h; ++y) f[y] = d[static_cast<size_t>(y) * w + x];
        dt1d(f, out, h);
        for (int y = 0; y < h; ++y) d[static_cast<size_t>(y) * w + x] = out[y];
    }
    for (int y = 0; y < h; ++y) {  // rows
        for (int x = 0; x < w; ++x) f[x] = d[static_cast<size_t>(y) * w + x];
        dt1d(f, out, w);
        for (int x = 0; x < w; ++x) d[static_cast<size_t>(y) * w + x] = out[x];
    }
    return d;
}

double directed_hd(const std::vector<uint8_t>& a, const std::vector<double>& d2b,
                   int cls) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] == cls) m = std::max(m, d2b[i]);
    return std::sqrt(m);
}

}  // namespace

std::optional<double> hausdorff(const std::vector<uint8_t>& pred,
                                const std::vector<uint8_t>& gt, int h, int w,
                                int cls) {
    size_t n = static_cast<size_t>(h) * w;
    if (pred.size() != n || gt.size() != n)
        throw ShapeError("hausdorff: mask sizes disagree with extent");
    bool hp = false, hg = false;
    for (size_t i = 0; i < n; ++i) {
        hp = hp || pred[i] == cls;
        hg = hg || gt[i] == cls;
    }
    if (!hp || !hg) return std::nullopt;
    std::vector<double> d2g = edt2(gt, h, w, cls);
    std::vector<double> d2p = edt2(pred, h, w, cls);
    return std::max(directed_hd(pred, d2g, cls), directed_hd(gt, d2p, cls));
}

// ------------------------------------------------------------------ t-test

namespace {
double t_pdf(double x, int df) {
    double logp = std::lgamma((df + 1) / 2.0) - std::lgamma(df / 2.0) -
                  0.5 * std::log(df * M_PI) -
                  (df + 1) / 2.0 * std::log1p(x * x / df);
    return std::exp(logp);
}

double simpson(double a, double b, int df) {
    double m = (a + b) / 2;
    return (b - a) / 6.0 * (t_pdf(a, df) + 4 * t_pdf(m, df) + t_pdf(b, df));
}

double adaptive(double a, double b, double whole, double tol, int df, int depth) {
    double m = (a + b) / 2;
    double l = simpson(a, m, df), r = simpson(m, b, df);
    if (depth <= 0 || std::fabs(l + r - whole) < 15 * tol)
        return l + r + (l + r - whole) / 15.0;
    return adaptive(a, m, l, tol / 2, df, depth - 1) +
           adaptive(m, b, r, tol / 2, df, depth - 1);
}
}  // namespace

double student_t_two_sided_p(double t, int df) {
    double at = std::fabs(t);
    if (!std::isfinite(at)) return 0.0;
    double integral = adaptive(0.0, at, simpson(0.0, at, df), 1e-10, df, 40);
    double p = 1.0 - 2.0 * integral;
    return std::clamp(p, 0.0, 1.0);
}

TTestResult paired_t_test(const std::vector<double>& a,
                          const std::vector<double>& b) {
    if (a.size() != b.size())
        throw ValueError("paired_t_test requires equal lengths");
    int n = static_cast<int>(a.size());
    if (n < 2) throw ValueError("paired_t_test requires n >= 2");
    std::vector<double> d(n);
    double mean = 0;
    for (int i = 0; i < n; ++i) {
        d[i] = a[i] - b[i];
        mean += d[i];
    }
    mean /= n;
    double ss = 0;
    for (int i = 0; i < n; ++i) ss += (d[i] - mean) * (d[i] - mean);
    double sd = std::sqrt(ss / (n - 1));
    TTestResult r;
    r.df = n - 1;
    if (sd == 0) {
        r.degenerate = true;
        r.p = mean != 0 ? 0.0 : 1.0;
        r.t = mean == 0 ? 0.0
                        : std::copysign(std::numeric_limits<double>::infinity(),
                                        mean);
        return r;
    }
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.p = student_t_two_sided_p(r.t, r.df);
    return r;
}

// ------------------------------------------------------------------ report

MetricsReport MetricsReport::compute(
    const std::vector<std::pair<std::vector<uint8_t>, const SegmentationSample*>>&
        preds,
    int n_classes) {
    MetricsReport rep;
    for (const auto& [pred, s] : preds)
        for (int c = 0; c < n_classes; ++c) {
            ImageMetrics m;
            m.image_id = s->id;
            m.cls = c;
            m.dice = dice(pred, s->mask, s->h, s->w, c);
            m.hausdorff = hausdorff(pred, s->mask, s->h, s->w, c);
            rep.per_image.push_back(std::move(m));
        }
    rep.aggregate(n_classes);
    return rep;
}

void MetricsReport::aggregate(int n_classes) {
    per_class.assign(n_classes, {});
    std::vector<std::vector<double>> dices(n_classes), hds(n_classes);
    for (const auto& m : per_image) {
        dices[m.cls].push_back(m.dice);
        if (m.hausdorff) hds[m.cls].push_back(*m.hausdorff);
    }
    auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
        mean = sd = 0;
        if (v.empty()) return;
        for (double x : v) mean += x;
        mean /= v.size();
        if (v.size() < 2) return;
        double ss = 0;
        for (double x : v) ss += (x - mean) * (x - mean);
        sd = std::sqrt(ss / (v.size() - 1));
    };
    for (int c = 0; c < n_classes; ++c) {
        auto& a = per_class[c];
        a.cls = c;
        a.n = static_cast<int>(dices[c].size());
        a.hd_defined = static_cast<int>(hds[c].size());
        mean_std(dices[c], a.dice_mean, a.dice_std);
        mean_std(hds[c], a.hd_mean, a.hd_std);  // undefined HDs excluded
    }
}

void MetricsReport::write_csv(const fs::path& path) const {
    std::ofstream f(path);
    if (!f) throw ValueError("cannot open " + path.string() + " for writing");
    f << "image_id,class,dice,hausdorff,hd_defined\n";
    f.precision(17);
    for (const auto& m : per_image) {
        f << m.image_id << "," << m.cls << "," << m.dice << ",";
        if (m.hausdorff) f << *m.hausdorff;
        f << "," << (m.hausdorff ? 1 : 0) << "\n";
    }
}

MetricsReport MetricsReport::read_csv(const fs::path& path, int n_classes) {
    std::ifstream f(path);
    if (!f) throw ValueError("cannot open " + path.string());
    MetricsReport rep;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id, cls, dv, hv, hd;
        std::getline(ss, id, ',');
        std::getline(ss, cls, ',');
        std::getline(ss, dv, ',');
        std::getline(ss, hv, ',');
        std::getline(ss, hd, ',');
        ImageMetrics m;
        m.image_id = id;
        m.cls = std::stoi(cls);
        m.dice = std::stod(dv);
        if (!hv.empty()) m.hausdorff = std::stod(hv);
        rep.per_image.push_back(std::move(m));
    }
    rep.aggregate(n_classes);
    return rep;
}

// ------------------------------------------------------------------ export

namespace {
std::vector<uint8_t> normalize_and_resize(const std::vector<double>& grid,
                                          int gh, int gw, int oh, int ow) {
    double lo = grid[0], hi = grid[0];
    for (double v : grid) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::vector<uint8_t> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double v = grid[static_cast<size_t>(y * gh / oh) * gw + x * gw / ow];
            int q = hi > lo ? static_cast<int>(std::lround((v - lo) / (hi - lo) * 255.0))
                            : 128;  // constant map
            out[static_cast<size_t>(y) * ow + x] = static_cast<uint8_t>(q);
        }
    return out;
}
}  // namespace

ExportSummary export_attention(Model<float>& model, const SegmentationSample& s,
                               int query_row, int query_col,
                               const fs::path& out_dir) {
    if (query_row < 0 || query_row >= s.h || query_col < 0 || query_col >= s.w)
        throw ValueError("query pixel (" + std::to_string(query_row) + "," +
                         std::to_string(query_col) + ") outside image " +
                         std::to_string(s.h) + "x" + std::to_string(s.w));
    fs::create_directories(out_dir);

    Tensor<float> x(Shape{1, 1, s.h, s.w});
    std::copy(s.image.begin(), s.image.end(), x.data());
    AttentionCapture cap;
    model.forward(x, /*train=*/false, &cap);

    ExportSummary sum;
    sum.raw_csv = out_dir / "attn_raw.csv";
    std::ofstream csv(sum.raw_csv);
    csv << "kind,level,head,row,values...\n";
    csv.precision(10);

    for (const auto& rec : cap.records) {
        std::string name = "attn_" + rec.kind + "_L" + std::to_string(rec.level) +
                           "_H" + std::to_string(rec.head) + ".pgm";
        if (rec.kind == "mhsa" || rec.kind == "mhca") {
            // query pixel -> token cell by integer division
            int cr = query_row / (s.h / rec.grid_h);
            int cc = query_col / (s.w / rec.grid_w);
            int row = cr * rec.grid_w + cc;
            std::vector<double> grid(rec.w.begin() + static_cast<size_t>(row) * rec.cols,
                                     rec.w.begin() + static_cast<size_t>(row + 1) * rec.cols);
            save_pgm(out_dir / name,
                     normalize_and_resize(grid, rec.grid_h, rec.grid_w, s.h, s.w),
                     s.w, s.h);
            csv << rec.kind << "," << rec.level << "," << rec.head << "," << row;
            for (double v : grid) csv << "," << v;
            csv << "\n";
        } else {  // z / gate maps, exported without row extraction
            save_pgm(out_dir / name,
                     normalize_and_resize(rec.w, rec.grid_h, rec.grid_w, s.h, s.w),
                     s.w, s.h);
            csv << rec.kind << "," << rec.level << "," << rec.head << ",-";
            for (double v : rec.w) csv << "," << v;
            csv << "\n";
        }
        ++sum.heatmaps;
    }
    sum.records = static_cast<int>(cap.records.size());
    return sum;
}

}  // namespace utrans

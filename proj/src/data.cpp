#include "utrans/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "utrans/tensor.hpp"

namespace fs = std::filesystem;

namespace utrans {

nlohmann::json SyntheticConfig::to_json() const {
    return {{"size", size},
            {"n_images", n_images},
            {"disk_r", {disk_r_min, disk_r_max}},
            {"ellipse_ax", {ellipse_ax_min, ellipse_ax_max}},
            {"blob_r", {blob_r_min, blob_r_max}},
            {"blob_contrast", blob_contrast},
            {"noise_std", noise_std},
            {"n_classes", n_classes}};
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& j) {
    SyntheticConfig c;
    c.size = j.at("size").get<int>();
    c.n_images = j.at("n_images").get<int>();
    c.disk_r_min = j.at("disk_r")[0].get<float>();
    c.disk_r_max = j.at("disk_r")[1].get<float>();
    c.ellipse_ax_min = j.at("ellipse_ax")[0].get<float>();
    c.ellipse_ax_max = j.at("ellipse_ax")[1].get<float>();
    c.blob_r_min = j.at("blob_r")[0].get<float>();
    c.blob_r_max = j.at("blob_r")[1].get<float>();
    c.blob_contrast = j.at("blob_contrast").get<float>();
    c.noise_std = j.at("noise_std").get<float>();
    c.n_classes = j.at("n_classes").get<int>();
    return c;
}

namespace {

constexpr float kBackground = 0.25f;
constexpr float kDiskIntensity = 0.75f;
constexpr float kEllipseIntensity = 0.55f;
constexpr float kMargin = 2.0f;
constexpr int kMaxAttempts = 1000;

struct Placement {
    float disk_x, disk_y, disk_r;
    float ell_x, ell_y, ell_a, ell_b;
    float t_x, t_y, t_r;  // target blob
    float d_x, d_y, d_r;  // distractor blob
};

float uni(std::mt19937_64& rng, float lo, float hi) {
    return std::uniform_real_distribution<float>(lo, hi)(rng);
}

bool place(const SyntheticConfig& cfg, std::mt19937_64& rng, Placement& p) {
    float sz = static_cast<float>(cfg.size);
    p.disk_r = uni(rng, cfg.disk_r_min, cfg.disk_r_max);
    float m = p.disk_r + kMargin;
    if (2 * m >= sz) return false;
    p.disk_x = uni(rng, m, sz - 1 - m);
    p.disk_y = uni(rng, m, sz - 1 - m);

    bool ok = false;
    for (int a = 0; a < kMaxAttempts && !ok; ++a) {
        p.ell_a = uni(rng, cfg.ellipse_ax_min, cfg.ellipse_ax_max);
        p.ell_b = uni(rng, cfg.ellipse_ax_min, cfg.ellipse_ax_max);
        float em = std::max(p.ell_a, p.ell_b) + kMargin;
        if (2 * em >= sz) return false;
        p.ell_x = uni(rng, em, sz - 1 - em);
        p.ell_y = uni(rng, em, sz - 1 - em);
        float dx = p.ell_x - p.disk_x, dy = p.ell_y - p.disk_y;
        float dist = std::sqrt(dx * dx + dy * dy);
        ok = dist >= p.disk_r + std::max(p.ell_a, p.ell_b) + kMargin &&
             dist >= 4.0f;  // direction must be well defined
    }
    if (!ok) return false;

    float ux = p.ell_x - p.disk_x, uy = p.ell_y - p.disk_y;
    float un = std::sqrt(ux * ux + uy * uy);
    ux /= un;
    uy /= un;

    auto place_blob = [&](float sign, float& bx, float& by, float& br,
                          bool avoid_other, float ox, float oy, float orad) {
        for (int a = 0; a < kMaxAttempts; ++a) {
            br = uni(rng, cfg.blob_r_min, cfg.blob_r_max);
            float bm = br + kMargin;
            bx = uni(rng, bm, sz - 1 - bm);
            by = uni(rng, bm, sz - 1 - bm);
            float side = (bx - p.disk_x) * ux + (by - p.disk_y) * uy;
            if (sign * side < kMargin) continue;
            float ddx = bx - p.disk_x, ddy = by - p.disk_y;
            if (std::sqrt(ddx * ddx + ddy * ddy) < p.disk_r + br + kMargin)
                continue;
            float edx = bx - p.ell_x, edy = by - p.ell_y;
            if (std::sqrt(edx * edx + edy * edy) <
                std::max(p.ell_a, p.ell_b) + br + kMargin)
                continue;
            if (avoid_other) {
                float bdx = bx - ox, bdy = by - oy;
                if (std::sqrt(bdx * bdx + bdy * bdy) < orad + br + kMargin)
                    continue;
            }
            return true;
        }
        return false;
    };

    if (!place_blob(+1.0f, p.t_x, p.t_y, p.t_r, false, 0, 0, 0)) return false;
    if (!place_blob(-1.0f, p.d_x, p.d_y, p.d_r, true, p.t_x, p.t_y, p.t_r))
        return false;
    return true;
}

void render(const SyntheticConfig& cfg, const Placement& p,
            std::mt19937_64& rng, SegmentationSample& s) {
    int n = cfg.size;
    s.h = s.w = n;
    s.image.assign(static_cast<size_t>(n) * n, kBackground);
    s.mask.assign(static_cast<size_t>(n) * n, 0);
    float blob_v = kBackground + cfg.blob_contrast;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            size_t i = static_cast<size_t>(y) * n + x;
            float fx = static_cast<float>(x), fy = static_cast<float>(y);
            auto in_disk = [&](float cx, float cy, float r) {
                float dx = fx - cx, dy = fy - cy;
                return dx * dx + dy * dy <= r * r;
            };
            if (in_disk(p.disk_x, p.disk_y, p.disk_r)) {
                s.image[i] = kDiskIntensity;
                s.mask[i] = 1;
            } else {
                float ex = (fx - p.ell_x) / p.ell_a, ey = (fy - p.ell_y) / p.ell_b;
                if (ex * ex + ey * ey <= 1.0f) {
                    s.image[i] = kEllipseIntensity;
                    s.mask[i] = 2;
                } else if (in_disk(p.t_x, p.t_y, p.t_r)) {
                    s.image[i] = blob_v;
                    s.mask[i] = 3;  // target: ellipse-side blob
                } else if (in_disk(p.d_x, p.d_y, p.d_r)) {
                    s.image[i] = blob_v;  // distractor stays background class
                }
            }
        }
    std::normal_distribution<float> noise(0.0f, cfg.noise_std);
    for (auto& v : s.image)
        v = std::clamp(v + noise(rng), 0.0f, 1.0f);
}

}  // namespace

SegmentationSample generate_one(const SyntheticConfig& cfg, uint64_t seed,
                                int index, GenStats* stats) {
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::mt19937_64 rng(mix_seed(mix_seed(seed, index), attempt));
        Placement p;
        if (!place(cfg, rng, p)) {
            if (stats) stats->retried_images++;
            continue;
        }
        SegmentationSample s;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "img%05d", index);
        s.id = buf;
        render(cfg, p, rng, s);
        return s;
    }
    throw GenerationError("could not place shapes for image " +
                          std::to_string(index) + "; canvas too small");
}

std::vector<SegmentationSample> generate_synthetic(const SyntheticConfig& cfg,
                                                   uint64_t seed,
                                                   GenStats* stats) {
    std::vector<SegmentationSample> out;
    out.reserve(cfg.n_images);
    for (int i = 0; i < cfg.n_images; ++i)
        out.push_back(generate_one(cfg, seed, i, stats));
    return out;
}

// ------------------------------------------------------------------- PGM

void save_pgm(const fs::path& path, const std::vector<uint8_t>& data, int w,
              int h) {
    if (static_cast<long>(data.size()) != static_cast<long>(w) * h)
        throw PgmError("pgm payload size mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw PgmError("cannot open " + path.string() + " for writing");
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
    if (!f) throw PgmError("write failed for " + path.string());
}

namespace {
int read_pgm_int(std::istream& in, const std::string& what) {
    // skips whitespace and '#' comments
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    long v = -1;
    if (!(in >> v) || v < 0) throw PgmError("malformed " + what + " field");
    if (v > 1000000) throw PgmError("dimension overflow: " + what + " = " +
                                    std::to_string(v));
    return static_cast<int>(v);
}
}  // namespace

std::vector<uint8_t> load_pgm(const fs::path& path, int& w, int& h) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw PgmError("cannot open " + path.string());
    char magic[2] = {0, 0};
    f.read(magic, 2);
    if (magic[0] != 'P') throw PgmError("malformed magic in " + path.string());
    if (magic[1] != '5')
        throw PgmError("unsupported PGM format P" + std::string(1, magic[1]) +
                       " (only binary P5 is supported)");
    w = read_pgm_int(f, "width");
    h = read_pgm_int(f, "height");
    if (static_cast<long>(w) * h > 100000000L)
        throw PgmError("dimension overflow: " + std::to_string(w) + "x" +
                       std::to_string(h));
    int maxval = read_pgm_int(f, "maxval");
    if (maxval != 255) throw PgmError("unsupported maxval " + std::to_string(maxval));
    f.get();  // single whitespace after maxval
    std::vector<uint8_t> data(static_cast<size_t>(w) * h);
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size()));
    if (f.gcount() != static_cast<std::streamsize>(data.size()))
        throw PgmError("truncated payload in " + path.string());
    return data;
}

void save_sample(const fs::path& root, const SegmentationSample& s) {
    std::vector<uint8_t> img(s.image.size());
    for (size_t i = 0; i < s.image.size(); ++i)
        img[i] = static_cast<uint8_t>(std::lround(s.image[i] * 255.0f));
    save_pgm(root / "images" / (s.id + ".pgm"), img, s.w, s.h);
    save_pgm(root / "masks" / (s.id + ".pgm"), s.mask, s.w, s.h);
}

SegmentationSample load_sample(const fs::path& root, const std::string& id) {
    SegmentationSample s;
    s.id = id;
    int w = 0, h = 0;
    std::vector<uint8_t> img = load_pgm(root / "images" / (id + ".pgm"), w, h);
    s.w = w;
    s.h = h;
    s.image.resize(img.size());
    for (size_t i = 0; i < img.size(); ++i) s.image[i] = img[i] / 255.0f;
    int mw = 0, mh = 0;
    s.mask = load_pgm(root / "masks" / (id + ".pgm"), mw, mh);
    if (mw != w || mh != h)
        throw PgmError("image/mask extent mismatch for id " + id);
    return s;
}

void write_dataset(const fs::path& root,
                   const std::vector<SegmentationSample>& samples,
                   const SyntheticConfig& cfg, uint64_t seed) {
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& s : samples) {
        save_sample(root, s);
        ids.push_back(s.id);
    }
    nlohmann::json man = {{"ids", ids},
                          {"n_classes", cfg.n_classes},
                          {"config", cfg.to_json()},
                          {"seed", seed}};
    std::ofstream f(root / "manifest.json");
    f << man.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& root) {
    std::ifstream f(root / "manifest.json");
    if (!f) throw PgmError("missing manifest.json in " + root.string());
    nlohmann::json j;
    f >> j;
    DatasetManifest m;
    m.ids = j.at("ids").get<std::vector<std::string>>();
    m.n_classes = j.at("n_classes").get<int>();
    m.config = SyntheticConfig::from_json(j.at("config"));
    m.seed = j.at("seed").get<uint64_t>();
    return m;
}

FoldSplit kfold_split(const std::vector<std::string>& ids, int k,
                      uint64_t seed) {
    if (k < 2) throw ValueError("kfold requires k >= 2");
    if (static_cast<int>(ids.size()) < k)
        throw ValueError("kfold requires at least k ids");
    std::vector<std::string> shuffled = ids;
    std::mt19937_64 rng(seed);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    FoldSplit fs;
    fs.k = k;
    fs.seed = seed;
    int n = static_cast<int>(ids.size());
    int base = n / k, extra = n % k, pos = 0;
    for (int i = 0; i < k; ++i) {
        int len = base + (i < extra ? 1 : 0);
        fs.folds.emplace_back(shuffled.begin() + pos,
                              shuffled.begin() + pos + len);
        pos += len;
    }
    return fs;
}

}  // namespace utrans

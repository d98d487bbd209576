#include <CLI11.hpp>
#include <iostream>

#include "utrans/gradcheck.hpp"
#include "utrans/metrics.hpp"
#include "utrans/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace utrans;

namespace {

constexpr const char* kToolVersion = "utrans 1.0.0";

int threads_cap() {
    const char* env = std::getenv("UTRANS_THREADS");
    if (!env) return 1;
    int v = std::atoi(env);
    return v >= 1 ? v : 1;
}

void require_fresh(const fs::path& p, bool force) {
    if (!fs::exists(p)) return;
    if (force) return;
    throw ValueError("output " + p.string() +
                     " already exists; pass --force to overwrite");
}

void write_run_manifest(const fs::path& path, const std::string& cmd,
                        const json& flags, const json& artifacts) {
    json m = {{"tool", kToolVersion},
              {"command", cmd},
              {"flags", flags},
              {"artifacts", artifacts}};
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path);
    f << m.dump(2) << "\n";
    if (!f) throw ValueError("cannot write run manifest " + path.string());
}

std::vector<int> parse_levels(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

std::string levels_str(const std::vector<int>& v, char sep = ',') {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i)
        s += (i ? std::string(1, sep) : "") + std::to_string(v[i]);
    return s.empty() ? "-" : s;
}

bool parse_onoff(const std::string& s, const std::string& flag) {
    if (s == "on") return true;
    if (s == "off") return false;
    throw ValueError(flag + " must be 'on' or 'off', got '" + s + "'");
}

std::vector<SegmentationSample> load_ids(const fs::path& root,
                                         const std::vector<std::string>& ids) {
    std::vector<SegmentationSample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(load_sample(root, id));
    return out;
}

struct SplitSets {
    std::vector<SegmentationSample> train, test;
};

SplitSets load_fold(const fs::path& data, int folds, int fold) {
    DatasetManifest m = read_manifest(data);
    if (fold < 0 || fold >= folds)
        throw ValueError("fold " + std::to_string(fold) + " out of range for " +
                         std::to_string(folds) + " folds");
    FoldSplit split = kfold_split(m.ids, folds, m.seed);
    return {load_ids(data, split.train_ids(fold)),
            load_ids(data, split.test_ids(fold))};
}

// ---------------------------------------------------------------------- gen
struct GenArgs {
    std::string out;
    int count = 100, size = 64;
    uint64_t seed = 0;
    bool force = false;
};

int cmd_gen(const GenArgs& a) {
    if (a.size % 8 != 0)
        throw ValueError("--size " + std::to_string(a.size) +
                         " is not divisible by 8 (depth-3 downsampling)");
    if (a.count < 1) throw ValueError("--count must be >= 1");
    fs::path out(a.out);
    require_fresh(out, a.force);
    if (a.force) fs::remove_all(out);
    fs::create_directories(out);

    SyntheticConfig cfg;
    cfg.size = a.size;
    cfg.n_images = a.count;
    write_run_manifest(out / "run_manifest.json", "gen",
                       {{"out", a.out}, {"count", a.count}, {"size", a.size},
                        {"seed", a.seed}},
                       {{"dataset", a.out}});

    GenStats stats;
    auto samples = generate_synthetic(cfg, a.seed, &stats);
    write_dataset(out, samples, cfg, a.seed);
    std::cout << "wrote " << samples.size() << " samples to " << a.out
              << " (" << stats.retried_images << " image retries)\n";
    return 0;
}

// -------------------------------------------------------------------- train
struct TrainArgs {
    std::string data, variant, pe = "on", mhca_levels, loss = "ce", out;
    int heads = 4, epochs = 10, batch = 8, folds = 5, fold = 0;
    double lr = 1e-4, gamma = 0.96;
    int decay_interval = 1000;
    uint64_t seed = 0;
    bool force = false;
    bool heads_given = false, mhca_given = false;
};

VariantConfig variant_config_from(const TrainArgs& a) {
    VariantConfig v;
    v.variant = parse_variant(a.variant);
    v.pe = parse_onoff(a.pe, "--pe");
    bool wants_heads = v.variant == Variant::Mhsa || v.variant == Variant::Mhca ||
                       v.variant == Variant::UTransformer;
    if (!wants_heads && a.heads_given)
        std::cerr << "warning: --heads ignored for variant " << a.variant << "\n";
    if (wants_heads) v.heads = a.heads;
    bool wants_mhca = v.variant == Variant::Mhca || v.variant == Variant::UTransformer;
    if (!wants_mhca && a.mhca_given)
        throw ValueError("--mhca-levels is not valid with --variant " + a.variant);
    if (wants_mhca) {
        if (a.mhca_given)
            v.mhca_levels = parse_levels(a.mhca_levels);
        else {
            for (int l = 1; l <= v.depth; ++l) v.mhca_levels.push_back(l);
        }
        if (v.heads < 1 && !v.mhca_levels.empty())
            throw ValueError("MHCA levels require --heads >= 1");
    }
    v.validate();
    return v;
}

int cmd_train(const TrainArgs& a) {
    VariantConfig vcfg = variant_config_from(a);
    TrainConfig tcfg;
    tcfg.lr0 = a.lr;
    tcfg.gamma = a.gamma;
    tcfg.decay_interval = a.decay_interval;
    tcfg.epochs = a.epochs;
    tcfg.batch = a.batch;
    tcfg.seed = a.seed;
    tcfg.loss = parse_loss(a.loss);
    tcfg.folds = a.folds;
    tcfg.fold = a.fold;
    tcfg.validate();

    fs::path ckpt(a.out);
    require_fresh(ckpt, a.force);
    SplitSets sets = load_fold(a.data, a.folds, a.fold);

    write_run_manifest(
        fs::path(a.out + ".manifest.json"), "train",
        {{"data", a.data}, {"variant_config", vcfg.to_json()},
         {"train_config", tcfg.to_json()}},
        {{"checkpoint", a.out}, {"epoch_csv", a.out + ".csv"}});

    Model<float> model = build_model<float>(vcfg, a.seed);
    std::cout << variant_name(vcfg.variant) << ": "
              << model.parameter_count() << " parameters, train "
              << sets.train.size() << " / test " << sets.test.size() << "\n";
    TrainResult res = train(model, sets.train, sets.test, tcfg, a.out + ".csv");
    save_checkpoint(ckpt, model, tcfg, res.steps);
    if (!res.epochs.empty()) {
        const auto& last = res.epochs.back();
        std::cout << "final: loss " << last.train_loss << ", test dice "
                  << last.test_dice_mean << "\n";
    }
    return 0;
}

// --------------------------------------------------------------------- eval
struct EvalArgs {
    std::string ckpt, data, csv, on = "test";
    int fold = -1;
    bool force = false;
};

int cmd_eval(const EvalArgs& a) {
    if (a.on != "test" && a.on != "train")
        throw ValueError("--on must be 'train' or 'test'");
    LoadedCheckpoint lc = load_checkpoint(a.ckpt);  // before any output
    int fold = a.fold >= 0 ? a.fold : lc.train_config.fold;
    SplitSets sets = load_fold(a.data, lc.train_config.folds, fold);
    auto& set = a.on == "test" ? sets.test : sets.train;

    require_fresh(fs::path(a.csv), a.force);
    write_run_manifest(fs::path(a.csv + ".manifest.json"), "eval",
                       {{"ckpt", a.ckpt}, {"data", a.data}, {"fold", fold},
                        {"on", a.on}},
                       {{"csv", a.csv}});

    std::vector<std::pair<std::vector<uint8_t>, const SegmentationSample*>> preds;
    for (const auto& s : set) preds.emplace_back(predict_mask(lc.model, s), &s);
    int k = lc.model.cfg.n_classes;
    MetricsReport rep = MetricsReport::compute(preds, k);
    rep.write_csv(a.csv);
    for (const auto& c : rep.per_class)
        std::cout << "class " << c.cls << ": dice " << c.dice_mean << " +- "
                  << c.dice_std << ", hd " << c.hd_mean << " (" << c.hd_defined
                  << "/" << c.n << " defined)\n";
    return 0;
}

// ------------------------------------------------------------------- ablate
struct AblateArgs {
    std::string data, out, seeds = "0";
    std::vector<std::string> grid;
    int epochs = 5, batch = 8, folds = 5, fold = 0;
    double lr = 1e-3;
    bool force = false;
};

struct Cell {
    int heads = 4;
    bool pe = true;
    std::vector<int> mhca;
    bool mhca_all = true;  // default axis: all levels
    uint64_t seed = 0;
};

int cmd_ablate(const AblateArgs& a) {
    // axes default to a single value matching the full u-transformer
    std::vector<int> heads_axis = {4};
    std::vector<bool> pe_axis = {true};
    std::vector<std::vector<int>> mhca_axis;
    bool mhca_varied = false;
    for (const auto& g : a.grid) {
        auto eq = g.find('=');
        if (eq == std::string::npos)
            throw ValueError("--grid expects axis=v1,v2,... got '" + g + "'");
        std::string axis = g.substr(0, eq), vals = g.substr(eq + 1);
        if (axis == "heads") {
            heads_axis = parse_levels(vals);
            if (heads_axis.empty()) throw ValueError("empty heads axis");
        } else if (axis == "pe") {
            pe_axis.clear();
            std::stringstream ss(vals);
            std::string tok;
            while (std::getline(ss, tok, ','))
                pe_axis.push_back(parse_onoff(tok, "pe axis"));
        } else if (axis == "mhca-levels") {
            mhca_varied = true;
            std::stringstream ss(vals);
            std::string tok;
            while (std::getline(ss, tok, ';'))
                mhca_axis.push_back(parse_levels(tok));
        } else {
            throw ValueError("unknown grid axis '" + axis + "'");
        }
    }
    if (!mhca_varied) mhca_axis.push_back({});  // sentinel: all levels
    std::vector<uint64_t> seeds;
    for (int s : parse_levels(a.seeds)) seeds.push_back(static_cast<uint64_t>(s));
    if (seeds.empty()) throw ValueError("--seeds must list at least one seed");

    fs::path out(a.out);
    require_fresh(out, a.force);
    write_run_manifest(fs::path(a.out + ".manifest.json"), "ablate",
                       {{"data", a.data}, {"grid", a.grid}, {"seeds", a.seeds},
                        {"epochs", a.epochs}, {"batch", a.batch}, {"lr", a.lr},
                        {"folds", a.folds}, {"fold", a.fold},
                        {"threads", threads_cap()}},
                       {{"csv", a.out}});

    std::vector<Cell> cells;
    for (int h : heads_axis)
        for (bool pe : pe_axis)
            for (size_t mi = 0; mi < mhca_axis.size(); ++mi)
                for (uint64_t s : seeds) {
                    Cell c;
                    c.heads = h;
                    c.pe = pe;
                    c.mhca_all = !mhca_varied;
                    c.mhca = mhca_axis[mi];
                    c.seed = s;
                    cells.push_back(c);
                }
    std::sort(cells.begin(), cells.end(), [](const Cell& x, const Cell& y) {
        if (x.heads != y.heads) return x.heads < y.heads;
        if (x.pe != y.pe) return x.pe < y.pe;
        if (x.mhca != y.mhca) return x.mhca < y.mhca;
        return x.seed < y.seed;
    });

    SplitSets sets = load_fold(a.data, a.folds, a.fold);
    DatasetManifest dm = read_manifest(a.data);
    int k = dm.n_classes;

    std::ofstream csv(out);
    csv << "heads,pe,mhca_levels,seed";
    for (int c = 0; c < k; ++c) csv << ",dice_c" << c;
    csv << ",dice_mean\n";
    for (const auto& cell : cells) {
        VariantConfig v;
        v.variant = Variant::UTransformer;
        v.heads = cell.heads;
        v.pe = cell.pe;
        if (cell.heads > 0) {
            if (cell.mhca_all) {
                for (int l = 1; l <= v.depth; ++l) v.mhca_levels.push_back(l);
            } else {
                v.mhca_levels = cell.mhca;
            }
        }
        v.validate();
        TrainConfig t;
        t.lr0 = a.lr;
        t.epochs = a.epochs;
        t.batch = a.batch;
        t.seed = cell.seed;
        t.folds = a.folds;
        t.fold = a.fold;
        t.validate();
        Model<float> model = build_model<float>(v, cell.seed);
        train(model, sets.train, sets.test, t);
        std::vector<double> d(k, 0.0);
        for (const auto& s : sets.test) {
            std::vector<uint8_t> pred = predict_mask(model, s);
            for (int c = 0; c < k; ++c)
                d[c] += dice(pred, s.mask, s.h, s.w, c) / sets.test.size();
        }
        double mean = 0;
        // semicolon join keeps the levels column free of the CSV delimiter
        csv << cell.heads << "," << (cell.pe ? "on" : "off") << ","
            << levels_str(v.mhca_levels, ';') << "," << cell.seed;
        for (int c = 0; c < k; ++c) {
            csv << "," << d[c];
            mean += d[c] / k;
        }
        csv << "," << mean << "\n";
        csv.flush();
        std::cout << "cell heads=" << cell.heads << " pe="
                  << (cell.pe ? "on" : "off") << " mhca="
                  << levels_str(v.mhca_levels) << " seed=" << cell.seed
                  << " dice_mean=" << mean << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------- attention
struct AttnArgs {
    std::string ckpt, image, pixel, out;
    bool force = false;
};

int cmd_attention(const AttnArgs& a) {
    auto comma = a.pixel.find(',');
    if (comma == std::string::npos)
        throw ValueError("--pixel expects r,c got '" + a.pixel + "'");
    int r = std::stoi(a.pixel.substr(0, comma));
    int c = std::stoi(a.pixel.substr(comma + 1));

    LoadedCheckpoint lc = load_checkpoint(a.ckpt);
    SegmentationSample s;
    int w = 0, h = 0;
    std::vector<uint8_t> px = load_pgm(a.image, w, h);
    s.h = h;
    s.w = w;
    s.id = fs::path(a.image).stem().string();
    s.image.resize(px.size());
    for (size_t i = 0; i < px.size(); ++i) s.image[i] = px[i] / 255.0f;
    s.mask.assign(px.size(), 0);
    if (r < 0 || c < 0 || r >= h || c >= w)
        throw ValueError("--pixel " + a.pixel + " outside " +
                         std::to_string(h) + "x" + std::to_string(w) + " image");

    fs::path out(a.out);
    if (fs::exists(out) && !a.force && !fs::is_empty(out))
        throw ValueError("output " + a.out + " already exists; pass --force");
    fs::create_directories(out);
    write_run_manifest(out / "run_manifest.json", "attention",
                       {{"ckpt", a.ckpt}, {"image", a.image},
                        {"pixel", a.pixel}},
                       {{"dir", a.out}});
    ExportSummary sum = export_attention(lc.model, s, r, c, out);
    std::cout << sum.heatmaps << " heatmaps, " << sum.records
              << " attention records -> " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------- gradcheck/ttest
int cmd_gradcheck(const std::string& op) {
    std::vector<std::string> ops =
        op == "all" ? gradcheck_ops() : std::vector<std::string>{op};
    bool ok = true;
    std::printf("%-18s %8s %12s  %s\n", "op", "cases", "max_rel_err", "status");
    for (const auto& o : ops) {
        CheckReport r = grad_check(o);
        ok = ok && r.pass;
        std::printf("%-18s %8d %12.3e  %s\n", r.op.c_str(), r.cases,
                    r.max_rel_err, r.pass ? "ok" : "FAIL");
    }
    if (!ok) {
        std::cerr << "gradcheck failed\n";
        return 2;
    }
    return 0;
}

int cmd_ttest(const std::string& a_csv, const std::string& b_csv, int cls) {
    auto pick = [cls](const MetricsReport& r) {
        std::map<std::string, double> out;
        for (const auto& m : r.per_image)
            if (m.cls == cls) out[m.image_id] = m.dice;
        return out;
    };
    MetricsReport ra = MetricsReport::read_csv(a_csv, cls + 1);
    MetricsReport rb = MetricsReport::read_csv(b_csv, cls + 1);
    auto ma = pick(ra), mb = pick(rb);
    std::vector<double> va, vb;
    for (const auto& [id, d] : ma) {
        auto it = mb.find(id);
        if (it == mb.end()) continue;
        va.push_back(d);
        vb.push_back(it->second);
    }
    if (va.size() < 2)
        throw ValueError("need >= 2 paired rows for class " +
                         std::to_string(cls) + ", got " +
                         std::to_string(va.size()));
    TTestResult t = paired_t_test(va, vb);
    std::cout << "n " << va.size() << ", df " << t.df << ", t " << t.t
              << ", p " << t.p << (t.degenerate ? " (degenerate)" : "") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"U-shaped segmentation workbench"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    GenArgs g;
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    gen->add_option("--out", g.out, "output directory")->required();
    gen->add_option("--count", g.count, "number of images");
    gen->add_option("--size", g.size, "image side length");
    gen->add_option("--seed", g.seed, "rng seed");
    gen->add_flag("--force", g.force, "overwrite existing output");

    TrainArgs t;
    auto* tr = app.add_subcommand("train", "train one variant on one fold");
    tr->add_option("--data", t.data, "dataset directory")->required();
    tr->add_option("--variant", t.variant,
                   "unet|local-gate|mhsa|mhca|u-transformer")->required();
    auto* oh = tr->add_option("--heads", t.heads, "attention heads");
    tr->add_option("--pe", t.pe, "positional encoding on|off");
    auto* om = tr->add_option("--mhca-levels", t.mhca_levels,
                              "comma list of gated skip levels");
    tr->add_option("--epochs", t.epochs);
    tr->add_option("--batch", t.batch);
    tr->add_option("--lr", t.lr);
    tr->add_option("--gamma", t.gamma, "lr decay factor");
    tr->add_option("--decay-interval", t.decay_interval);
    tr->add_option("--folds", t.folds);
    tr->add_option("--fold", t.fold);
    tr->add_option("--seed", t.seed);
    tr->add_option("--loss", t.loss, "ce|ce+dice");
    tr->add_option("--out", t.out, "checkpoint path")->required();
    tr->add_flag("--force", t.force);

    EvalArgs e;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--ckpt", e.ckpt)->required();
    ev->add_option("--data", e.data)->required();
    ev->add_option("--fold", e.fold, "override checkpoint fold");
    ev->add_option("--on", e.on, "train|test split");
    ev->add_option("--csv", e.csv, "per-image metrics CSV")->required();
    ev->add_flag("--force", e.force);

    AblateArgs ab;
    auto* abc = app.add_subcommand("ablate", "train/eval a config grid");
    abc->add_option("--data", ab.data)->required();
    abc->add_option("--grid", ab.grid,
                    "axis=v1,v2,... (heads, pe, mhca-levels)")->required();
    abc->add_option("--seeds", ab.seeds, "comma list of seeds");
    abc->add_option("--epochs", ab.epochs);
    abc->add_option("--batch", ab.batch);
    abc->add_option("--lr", ab.lr);
    abc->add_option("--folds", ab.folds);
    abc->add_option("--fold", ab.fold);
    abc->add_option("--out", ab.out, "grid CSV path")->required();
    abc->add_flag("--force", ab.force);

    AttnArgs at;
    auto* atc = app.add_subcommand("attention", "export attention heatmaps");
    atc->add_option("--ckpt", at.ckpt)->required();
    atc->add_option("--image", at.image, "input PGM")->required();
    atc->add_option("--pixel", at.pixel, "query pixel r,c")->required();
    atc->add_option("--out", at.out, "output directory")->required();
    atc->add_flag("--force", at.force);

    std::string gop = "all";
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
    gc->add_option("--op", gop, "op name or 'all'");

    std::string ta, tb;
    int tcls = 3;
    auto* tt = app.add_subcommand("ttest", "paired t-test on two metric CSVs");
    tt->add_option("--a", ta)->required();
    tt->add_option("--b", tb)->required();
    tt->add_option("--cls", tcls, "class whose dice is compared");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& ex) {
        int rc = app.exit(ex);
        return rc == 0 ? 0 : 1;
    }

    try {
        t.heads_given = oh->count() > 0;
        t.mhca_given = om->count() > 0;
        if (gen->parsed()) return cmd_gen(g);
        if (tr->parsed()) return cmd_train(t);
        if (ev->parsed()) return cmd_eval(e);
        if (abc->parsed()) return cmd_ablate(ab);
        if (atc->parsed()) return cmd_attention(at);
        if (gc->parsed()) return cmd_gradcheck(gop);
        if (tt->parsed()) return cmd_ttest(ta, tb, tcls);
    } catch (const ValueError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    } catch (const ShapeError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    } catch (const std::exception& ex) {
        std::cerr << "failure: " << ex.what() << "\n";
        return 2;
    }
    return 0;
}

#include "utrans/training.hpp"

#include <malloc.h>

#include <fstream>
#include <random>

namespace {
// keep big activation buffers in the arena instead of mmap/munmap churn
const bool kMallocTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
}  // namespace

#include "utrans/metrics.hpp"

namespace fs = std::filesystem;

namespace utrans {

Tensor<float> batch_images(const std::vector<const SegmentationSample*>& ss) {
    int n = static_cast<int>(ss.size());
    int h = ss[0]->h, w = ss[0]->w;
    Tensor<float> t(Shape{n, 1, h, w});
    for (int i = 0; i < n; ++i)
        std::copy(ss[i]->image.begin(), ss[i]->image.end(),
                  t.data() + static_cast<size_t>(i) * h * w);
    return t;
}

std::vector<uint8_t> batch_labels(const std::vector<const SegmentationSample*>& ss) {
    std::vector<uint8_t> out;
    for (const auto* s : ss)
        out.insert(out.end(), s->mask.begin(), s->mask.end());
    return out;
}

double train_step(Model<float>& model, AdamState<float>& opt,
                  const Tensor<float>& batch,
                  const std::vector<uint8_t>& labels, LossKind loss_kind,
                  double lr) {
    Tape<float> tape;
    typename Tape<float>::Scope scope(tape);
    model.zero_grad();
    Tensor<float> logits = model.forward(batch, /*train=*/true);
    Tensor<float> loss = cross_entropy(logits, labels);
    if (loss_kind == LossKind::CeDice)
        loss = add(loss, scale(dice_loss(logits, labels), 0.5f));
    double lv = loss.value()[0];
    if (!std::isfinite(lv))
        throw DivergenceError("loss diverged (NaN/Inf) at lr " +
                              std::to_string(lr));
    tape.backward(loss);
    adam_step(model.params(), opt, lr);
    return lv;
}

std::vector<uint8_t> predict_mask(Model<float>& model,
                                  const SegmentationSample& s) {
    Tensor<float> x = batch_images({&s});
    Tensor<float> logits = model.forward(x, /*train=*/false);
    return argmax_channel(logits);
}

double pixel_accuracy(Model<float>& model,
                      const std::vector<SegmentationSample>& set) {
    long ok = 0, total = 0;
    for (const auto& s : set) {
        std::vector<uint8_t> pred = predict_mask(model, s);
        for (size_t i = 0; i < pred.size(); ++i) ok += pred[i] == s.mask[i];
        total += static_cast<long>(pred.size());
    }
    return total ? static_cast<double>(ok) / total : 0.0;
}

TrainResult train(Model<float>& model,
                  const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& test_set,
                  const TrainConfig& cfg, const std::string& csv_path) {
    cfg.validate();
    if (train_set.empty()) throw ValueError("empty train set");
    int k = model.cfg.n_classes;
    AdamState<float> opt = AdamState<float>::init(model.params());
    TrainResult res;

    std::ofstream csv;
    if (!csv_path.empty()) {
        csv.open(csv_path);
        csv << "epoch,step,lr,train_loss,test_dice_mean";
        for (int c = 0; c < k; ++c) csv << ",test_dice_c" << c;
        csv << "\n";
    }

    long step = 0;
    std::vector<int> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(mix_seed(cfg.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        int batches = 0;
        for (size_t pos = 0; pos < order.size(); pos += cfg.batch) {
            size_t end = std::min(pos + cfg.batch, order.size());
            if (end - pos < 2) break;  // batchnorm needs >= 2
            std::vector<const SegmentationSample*> bs;
            for (size_t i = pos; i < end; ++i) bs.push_back(&train_set[order[i]]);
            double lr = lr_at(step, cfg);
            loss_sum += train_step(model, opt, batch_images(bs),
                                   batch_labels(bs), cfg.loss, lr);
            ++batches;
            ++step;
        }

        EpochLog log;
        log.epoch = epoch;
        log.step = step;
        log.lr = lr_at(step, cfg);
        log.train_loss = batches ? loss_sum / batches : 0;
        log.test_dice_per_class.assign(k, 0.0);
        if (!test_set.empty()) {
            for (const auto& s : test_set) {
                std::vector<uint8_t> pred = predict_mask(model, s);
                for (int c = 0; c < k; ++c)
                    log.test_dice_per_class[c] +=
                        dice(pred, s.mask, s.h, s.w, c) / test_set.size();
            }
            for (int c = 0; c < k; ++c) log.test_dice_mean += log.test_dice_per_class[c] / k;
        }
        if (csv.is_open()) {
            csv << log.epoch << "," << log.step << "," << log.lr << ","
                << log.train_loss << "," << log.test_dice_mean;
            for (int c = 0; c < k; ++c) csv << "," << log.test_dice_per_class[c];
            csv << "\n";
            csv.flush();
        }
        res.epochs.push_back(std::move(log));
    }
    res.steps = step;
    return res;
}

// ---------------------------------------------------------------- checkpoint

namespace {
constexpr char kMagic[4] = {'U', 'T', 'F', 'M'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

void save_checkpoint(const fs::path& path, Model<float>& model,
                     const TrainConfig& tcfg, long step) {
    nlohmann::json manifest = nlohmann::json::array();
    for (auto& e : model.registry) {
        nlohmann::json dims = nlohmann::json::array();
        for (int i = 0; i < e.t.shape().rank; ++i) dims.push_back(e.t.shape()[i]);
        manifest.push_back(
            {{"name", e.name}, {"dtype", "f32"}, {"dims", dims}});
    }
    nlohmann::json header = {{"variant_config", model.cfg.to_json()},
                             {"train_config", tcfg.to_json()},
                             {"step", step},
                             {"config_hash", model.cfg.hash()},
                             {"manifest", manifest}};
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
    f.write(kMagic, 4);
    write_le<uint32_t>(f, kVersion);
    write_le<uint64_t>(f, hs.size());
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (auto& e : model.registry)
        f.write(reinterpret_cast<const char*>(e.t.data()),
                static_cast<std::streamsize>(e.t.numel() * sizeof(float)));
    if (!f) throw CheckpointError("write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const fs::path& path,
                                 const VariantConfig* expect) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError("bad magic in " + path.string());
    uint32_t version = read_le<uint32_t>(f);
    if (version != kVersion)
        throw CheckpointError("checkpoint version mismatch: " +
                              std::to_string(version));
    uint64_t hlen = read_le<uint64_t>(f);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (f.gcount() != static_cast<std::streamsize>(hlen))
        throw CheckpointError("truncated header in " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed header JSON: ") + e.what());
    }

    LoadedCheckpoint out;
    VariantConfig vcfg = VariantConfig::from_json(header.at("variant_config"));
    uint64_t stored_hash = header.at("config_hash").get<uint64_t>();
    if (stored_hash != vcfg.hash())
        throw CheckpointError("config-hash mismatch (corrupted header)");
    if (expect && expect->hash() != stored_hash)
        throw CheckpointError("config-hash mismatch: checkpoint config " +
                              vcfg.to_json().dump() + " differs from expected");
    out.train_config = TrainConfig::from_json(header.at("train_config"));
    out.step = header.at("step").get<long>();
    out.model = build_model<float>(vcfg, 0);

    const auto& manifest = header.at("manifest");
    if (manifest.size() != out.model.registry.size())
        throw CheckpointError("manifest entry count mismatch");
    for (size_t i = 0; i < out.model.registry.size(); ++i) {
        auto& e = out.model.registry[i];
        const auto& m = manifest[i];
        if (m.at("name").get<std::string>() != e.name)
            throw CheckpointError("manifest name mismatch at entry " +
                                  std::to_string(i));
        long n = 1;
        for (const auto& d : m.at("dims")) n *= d.get<long>();
        if (n != e.t.numel())
            throw CheckpointError("manifest/payload length mismatch for " + e.name);
        f.read(reinterpret_cast<char*>(e.t.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
        if (f.gcount() != static_cast<std::streamsize>(n * sizeof(float)))
            throw CheckpointError("manifest/payload length mismatch: truncated payload");
    }
    return out;
}

}  // namespace utrans

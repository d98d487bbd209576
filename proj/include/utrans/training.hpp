#pragma once

#include <map>

#include "utrans/backbone.hpp"
#include "utrans/data.hpp"

namespace utrans {

enum class LossKind { Ce, CeDice };

inline std::string loss_name(LossKind k) {
    return k == LossKind::Ce ? "ce" : "ce+dice";
}
inline LossKind parse_loss(const std::string& s) {
    if (s == "ce") return LossKind::Ce;
    if (s == "ce+dice") return LossKind::CeDice;
    throw ValueError("unknown loss '" + s + "'");
}

struct TrainConfig {
    double lr0 = 1e-4;
    double gamma = 0.96;          // exponential decay factor
    int decay_interval = 1000;    // steps per decay unit
    int epochs = 10;
    int batch = 8;
    uint64_t seed = 0;
    LossKind loss = LossKind::Ce;
    int folds = 5;
    int fold = 0;

    void validate() const {
        if (lr0 <= 0) throw ValueError("lr0 must be > 0");
        if (gamma <= 0 || gamma > 1) throw ValueError("gamma must be in (0,1]");
        if (batch < 2) throw ValueError("batch must be >= 2 (batchnorm)");
        if (decay_interval < 1) throw ValueError("decay interval must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"lr0", lr0},     {"gamma", gamma}, {"decay_interval", decay_interval},
                {"epochs", epochs}, {"batch", batch}, {"seed", seed},
                {"loss", loss_name(loss)}, {"folds", folds}, {"fold", fold}};
    }
    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.lr0 = j.at("lr0").get<double>();
        c.gamma = j.at("gamma").get<double>();
        c.decay_interval = j.at("decay_interval").get<int>();
        c.epochs = j.at("epochs").get<int>();
        c.batch = j.at("batch").get<int>();
        c.seed = j.at("seed").get<uint64_t>();
        c.loss = parse_loss(j.at("loss").get<std::string>());
        c.folds = j.at("folds").get<int>();
        c.fold = j.at("fold").get<int>();
        return c;
    }
};

// lr0 * gamma^(step/interval), real-valued exponent
inline double lr_at(long step, const TrainConfig& cfg) {
    return cfg.lr0 * std::pow(cfg.gamma, static_cast<double>(step) /
                                             cfg.decay_interval);
}

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    long t = 0;
    static constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    template <typename P>
    static AdamState init(const std::vector<P*>& params) {
        AdamState s;
        for (auto* p : params) {
            s.m.emplace_back(p->t.numel(), T(0));
            s.v.emplace_back(p->t.numel(), T(0));
        }
        return s;
    }
};

template <typename T, typename P>
void adam_step(const std::vector<P*>& params, AdamState<T>& state, double lr) {
    state.t += 1;
    double bc1 = 1.0 - std::pow(AdamState<T>::beta1, state.t);
    double bc2 = 1.0 - std::pow(AdamState<T>::beta2, state.t);
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = params[i]->t;
        if (!p.has_grad())
            throw ValueError("adam_step: missing gradient for " +
                             params[i]->name);
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (long k = 0; k < p.numel(); ++k) {
            double g = p.grad()[k];
            m[k] = static_cast<T>(AdamState<T>::beta1 * m[k] +
                                  (1 - AdamState<T>::beta1) * g);
            v[k] = static_cast<T>(AdamState<T>::beta2 * v[k] +
                                  (1 - AdamState<T>::beta2) * g * g);
            double mhat = m[k] / bc1, vhat = v[k] / bc2;
            p.value()[k] -= static_cast<T>(lr * mhat /
                                           (std::sqrt(vhat) + AdamState<T>::eps));
        }
    }
}

struct EpochLog {
    int epoch = 0;
    long step = 0;
    double lr = 0;
    double train_loss = 0;
    double test_dice_mean = 0;
    std::vector<double> test_dice_per_class;
};

struct TrainResult {
    long steps = 0;
    std::vector<EpochLog> epochs;
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& m) : std::runtime_error(m) {}
};

// One optimization step on a prepared batch; returns the loss value.
double train_step(Model<float>& model, AdamState<float>& opt,
                  const Tensor<float>& batch,
                  const std::vector<uint8_t>& labels, LossKind loss, double lr);

TrainResult train(Model<float>& model,
                  const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& test_set,
                  const TrainConfig& cfg, const std::string& csv_path = "");

// eval helpers
Tensor<float> batch_images(const std::vector<const SegmentationSample*>& ss);
std::vector<uint8_t> batch_labels(const std::vector<const SegmentationSample*>& ss);
std::vector<uint8_t> predict_mask(Model<float>& model, const SegmentationSample& s);
double pixel_accuracy(Model<float>& model,
                      const std::vector<SegmentationSample>& set);

// ---- checkpoint: "UTFM", u32 version, u64 header length, JSON header,
// then little-endian f32 payloads in manifest order ----
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};

void save_checkpoint(const std::filesystem::path& path, Model<float>& model,
                     const TrainConfig& tcfg, long step);

struct LoadedCheckpoint {
    Model<float> model;
    TrainConfig train_config;
    long step = 0;
};

// expect, when given, must hash-match the stored variant config
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const VariantConfig* expect = nullptr);

}  // namespace utrans

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace utrans {

struct SegmentationSample {
    int h = 0, w = 0;
    std::vector<float> image;   // grayscale in [0,1]
    std::vector<uint8_t> mask;  // labels in {0..n_classes-1}
    std::string id;
};

// Class layout: 0 background, 1 disk, 2 ellipse, 3 target blob. Two
// visually identical low-contrast blobs are placed on opposite sides of
// the line through the disk center perpendicular to the disk->ellipse
// direction; only the blob on the ellipse side is the target.
struct SyntheticConfig {
    int size = 64;
    int n_images = 100;
    float disk_r_min = 10, disk_r_max = 16;
    float ellipse_ax_min = 6, ellipse_ax_max = 12;
    float blob_r_min = 2, blob_r_max = 4;
    float blob_contrast = 0.08f;
    float noise_std = 0.05f;
    int n_classes = 4;

    nlohmann::json to_json() const;
    static SyntheticConfig from_json(const nlohmann::json& j);
};

struct GenStats {
    int retried_images = 0;  // images regenerated with a fresh sub-seed
};

struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& m) : std::runtime_error(m) {}
};

SegmentationSample generate_one(const SyntheticConfig& cfg, uint64_t seed,
                                int index, GenStats* stats = nullptr);
std::vector<SegmentationSample> generate_synthetic(const SyntheticConfig& cfg,
                                                   uint64_t seed,
                                                   GenStats* stats = nullptr);

// ---- PGM (binary P5, maxval 255) ----
struct PgmError : std::runtime_error {
    explicit PgmError(const std::string& m) : std::runtime_error(m) {}
};

void save_pgm(const std::filesystem::path& path, const std::vector<uint8_t>& data,
              int w, int h);
std::vector<uint8_t> load_pgm(const std::filesystem::path& path, int& w, int& h);

// image quantized by round(v*255); mask stored as raw label bytes
void save_sample(const std::filesystem::path& root, const SegmentationSample& s);
SegmentationSample load_sample(const std::filesystem::path& root,
                               const std::string& id);

// ---- dataset directory: images/, masks/, manifest.json ----
struct DatasetManifest {
    std::vector<std::string> ids;
    int n_classes = 4;
    SyntheticConfig config;
    uint64_t seed = 0;
};

void write_dataset(const std::filesystem::path& root,
                   const std::vector<SegmentationSample>& samples,
                   const SyntheticConfig& cfg, uint64_t seed);
DatasetManifest read_manifest(const std::filesystem::path& root);

// ---- cross-validation ----
struct FoldSplit {
    int k = 0;
    uint64_t seed = 0;
    std::vector<std::vector<std::string>> folds;  // disjoint, covering

    std::vector<std::string> test_ids(int fold) const { return folds.at(fold); }
    std::vector<std::string> train_ids(int fold) const {
        std::vector<std::string> out;
        for (int i = 0; i < k; ++i)
            if (i != fold) out.insert(out.end(), folds[i].begin(), folds[i].end());
        return out;
    }
};

FoldSplit kfold_split(const std::vector<std::string>& ids, int k, uint64_t seed);

}  // namespace utrans

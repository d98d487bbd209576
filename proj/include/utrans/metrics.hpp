#pragma once

#include <optional>

#include "utrans/backbone.hpp"
#include "utrans/data.hpp"

namespace utrans {

// 2|P n G| / (|P| + |G|); both empty -> 1, exactly one empty -> 0
double dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
            int h, int w, int cls);

// exact symmetric Hausdorff distance in pixels over class point sets;
// either set empty -> nullopt
std::optional<double> hausdorff(const std::vector<uint8_t>& pred,
                                const std::vector<uint8_t>& gt, int h, int w,
                                int cls);

struct TTestResult {
    double t = 0;
    double p = 1;
    int df = 0;
    bool degenerate = false;  // zero sample sd of the differences
};

TTestResult paired_t_test(const std::vector<double>& a,
                          const std::vector<double>& b);

// two-sided tail probability of Student's t, df degrees of freedom
double student_t_two_sided_p(double t, int df);

// ---- per-image metrics and aggregates ----
struct ImageMetrics {
    std::string image_id;
    int cls = 0;
    double dice = 0;
    std::optional<double> hausdorff;
};

struct ClassAggregate {
    int cls = 0;
    double dice_mean = 0, dice_std = 0;
    double hd_mean = 0, hd_std = 0;
    int hd_defined = 0;  // images where HD exists for this class
    int n = 0;
};

struct MetricsReport {
    std::vector<ImageMetrics> per_image;
    std::vector<ClassAggregate> per_class;

    static MetricsReport compute(
        const std::vector<std::pair<std::vector<uint8_t>, const SegmentationSample*>>&
            preds,
        int n_classes);
    void aggregate(int n_classes);

    // csv: image_id,class,dice,hausdorff,hd_defined
    void write_csv(const std::filesystem::path& path) const;
    static MetricsReport read_csv(const std::filesystem::path& path,
                                  int n_classes);
};

// ---- attention export (Fig-5-style heatmaps) ----
struct ExportSummary {
    int heatmaps = 0;
    int records = 0;
    std::filesystem::path raw_csv;
};

ExportSummary export_attention(Model<float>& model, const SegmentationSample& s,
                               int query_row, int query_col,
                               const std::filesystem::path& out_dir);

}  // namespace utrans

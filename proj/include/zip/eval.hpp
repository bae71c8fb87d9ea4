#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "zip/geometry.hpp"

namespace zip {

// One image's ground truth plus its scored proposals. Proposals are sorted
// internally by (score desc, position asc); callers may pass any order.
struct ImageEval {
    std::string image_id;
    std::vector<Box> gts;
    std::vector<Box> proposals;
    std::vector<double> scores;
};

struct RecallValue {
    double value = 1.0;
    bool empty_gts = false;  // warning flag for the zero-gt convention
};

struct SizeBucketAR {
    std::optional<double> small, medium, large;  // absent when the bucket is empty
};

struct MetricsReport {
    std::vector<double> iou_grid;                         // 0.50 .. 0.95
    std::vector<int> budgets;                             // proposal counts
    std::map<int, std::vector<double>> recall_vs_iou;     // topk -> curve over iou_grid
    std::map<double, std::vector<double>> recall_vs_count;  // iou -> curve over budgets
    std::map<int, double> ar_at;                          // budget -> AR
    SizeBucketAR size_ar;                                 // at 100 proposals
    bool empty_gts_warning = false;
};

// Fraction of ground-truth boxes whose best overlap within the top-k scored
// proposals reaches the threshold; matching is many-to-one, aggregated over
// the union of all gts. Zero gts overall yields 1.0 with the warning flag.
RecallValue recall_at(const std::vector<ImageEval>& images, double iou_thresh, int topk);

// Mean of recall_at over IoU 0.50..0.95 in steps of 0.05.
RecallValue average_recall(const std::vector<ImageEval>& images, int topk);

// Small (< 32^2), medium [32^2, 96^2) and large (>= 96^2) gt partitions,
// each evaluated at 100 proposals.
SizeBucketAR ar_by_size(const std::vector<ImageEval>& images);

MetricsReport build_report(const std::vector<ImageEval>& images, const std::vector<int>& budgets,
                           const std::vector<double>& recall_curve_ious);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
std::string report_to_csv(const MetricsReport& report);

}  // namespace zip

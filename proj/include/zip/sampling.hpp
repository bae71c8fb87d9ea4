#pragma once

#include <optional>
#include <vector>

#include "zip/anchors.hpp"
#include "zip/geometry.hpp"
#include "zip/rng.hpp"

namespace zip {

// Anchor class labels. IoU in the dead zones (0.25,0.35) and (0.55,0.6)
// leaves an anchor unlabeled and out of every batch.
enum AnchorLabel : int {
    kNegative = 0,
    kPositive = 1,
    kGray = 2,
};

struct LabeledAnchor {
    int anchor_index = -1;
    int level = 1;
    int label = kNegative;
    Offset target;              // defined only for positives
    std::optional<int> matched_gt;  // set for positives and grays
};

struct MiniBatch {
    std::vector<int> cls_rows;     // anchor indices fed to classification
    std::vector<int> cls_labels;   // 0/1/2 aligned with cls_rows
    std::vector<int> reg_rows;     // positive anchor indices (regression)
    std::vector<Offset> reg_targets;
    int positives = 0, negatives = 0, grays = 0;
};

// Three-way labels against the max-IoU ground truth: >= 0.6 positive,
// [0.35,0.55] gray, < 0.25 negative. Gt ties break toward the lower index.
// Anchors whose center falls outside the image are excluded entirely.
std::vector<LabeledAnchor> label_anchors(const AnchorGrid& grid, const std::vector<Box>& gts,
                                         int image_w, int image_h);

// Same thresholds applied to arbitrary boxes (the RoI recursion re-labels
// R(q-1) each stage); no center filtering.
std::vector<LabeledAnchor> label_boxes(const std::vector<Box>& boxes, const std::vector<Box>& gts);

// All positives up to the per-class cap, negatives at most twice the kept
// positives, grays at most half of (positives + negatives). Zero positives
// degrades to a negatives-only batch with no regression rows.
MiniBatch sample_batch(const std::vector<LabeledAnchor>& labeled, int batch_size,
                       int per_class_cap, Rng& rng);

}  // namespace zip

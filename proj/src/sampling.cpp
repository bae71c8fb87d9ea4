#include "zip/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace zip {

namespace {

// -1 = unlabeled (dead zone)
int label_for_iou(double v) {
    if (v >= 0.6) return kPositive;
    if (v >= 0.35 && v <= 0.55) return kGray;
    if (v < 0.25) return kNegative;
    return -1;
}

std::vector<LabeledAnchor> label_generic(const std::vector<Box>& boxes, const std::vector<Box>& gts,
                                         int level, const std::function<bool(const Box&)>& keep) {
    std::vector<LabeledAnchor> out;
    out.reserve(boxes.size());
    for (size_t a = 0; a < boxes.size(); ++a) {
        if (!keep(boxes[a])) continue;
        double best = 0.0;
        int best_gt = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            const double v = iou(boxes[a], gts[g]);
            if (v > best) {  // ties stay with the lower gt index
                best = v;
                best_gt = static_cast<int>(g);
            }
        }
        const int label = gts.empty() ? kNegative : label_for_iou(best);
        if (label < 0) continue;
        LabeledAnchor la;
        la.anchor_index = static_cast<int>(a);
        la.level = level;
        la.label = label;
        if (label == kPositive || label == kGray) la.matched_gt = best_gt;
        if (label == kPositive) la.target = encode_offset(boxes[a], gts[static_cast<size_t>(best_gt)]);
        out.push_back(la);
    }
    return out;
}

}  // namespace

std::vector<LabeledAnchor> label_anchors(const AnchorGrid& grid, const std::vector<Box>& gts,
                                         int image_w, int image_h) {
    const double w = static_cast<double>(image_w);
    const double h = static_cast<double>(image_h);
    return label_generic(grid.boxes, gts, grid.level, [w, h](const Box& b) {
        const double cx = b.cx(), cy = b.cy();
        return cx >= 0.0 && cx < w && cy >= 0.0 && cy < h;
    });
}

std::vector<LabeledAnchor> label_boxes(const std::vector<Box>& boxes, const std::vector<Box>& gts) {
    return label_generic(boxes, gts, 0, [](const Box&) { return true; });
}

MiniBatch sample_batch(const std::vector<LabeledAnchor>& labeled, int batch_size,
                       int per_class_cap, Rng& rng) {
    (void)batch_size;  // implied by 3 * per_class_cap; kept for config validation
    std::vector<int> pos, neg, gray;
    for (size_t i = 0; i < labeled.size(); ++i) {
        switch (labeled[i].label) {
            case kPositive: pos.push_back(static_cast<int>(i)); break;
            case kNegative: neg.push_back(static_cast<int>(i)); break;
            case kGray: gray.push_back(static_cast<int>(i)); break;
            default: throw std::logic_error("sample_batch: unlabeled anchor in input");
        }
    }

    auto draw = [&rng](std::vector<int>& from, int want) {
        if (want >= static_cast<int>(from.size())) return from;
        auto picks = rng.sample_indices(static_cast<int>(from.size()), want);
        std::vector<int> out;
        out.reserve(picks.size());
        for (int p : picks) out.push_back(from[static_cast<size_t>(p)]);
        return out;
    };

    MiniBatch batch;
    std::vector<int> chosen_pos = draw(pos, per_class_cap);
    std::vector<int> chosen_neg, chosen_gray;
    if (chosen_pos.empty()) {
        chosen_neg = draw(neg, per_class_cap);
    } else {
        const int want_neg = std::min(2 * static_cast<int>(chosen_pos.size()), per_class_cap);
        chosen_neg = draw(neg, want_neg);
        const int want_gray = std::min(
            static_cast<int>((chosen_pos.size() + chosen_neg.size() + 1) / 2), per_class_cap);
        chosen_gray = draw(gray, want_gray);
    }

    for (int i : chosen_pos) {
        batch.cls_rows.push_back(labeled[static_cast<size_t>(i)].anchor_index);
        batch.cls_labels.push_back(kPositive);
        batch.reg_rows.push_back(labeled[static_cast<size_t>(i)].anchor_index);
        batch.reg_targets.push_back(labeled[static_cast<size_t>(i)].target);
    }
    for (int i : chosen_neg) {
        batch.cls_rows.push_back(labeled[static_cast<size_t>(i)].anchor_index);
        batch.cls_labels.push_back(kNegative);
    }
    for (int i : chosen_gray) {
        batch.cls_rows.push_back(labeled[static_cast<size_t>(i)].anchor_index);
        batch.cls_labels.push_back(kGray);
    }
    batch.positives = static_cast<int>(chosen_pos.size());
    batch.negatives = static_cast<int>(chosen_neg.size());
    batch.grays = static_cast<int>(chosen_gray.size());
    return batch;
}

}  // namespace zip

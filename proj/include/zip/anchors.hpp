#pragma once

#include <vector>

#include "zip/geometry.hpp"
#include "zip/rng.hpp"

namespace zip {

// Candidate box shape: scale is sqrt(area) in pixels, ratio is width/height.
struct AnchorTemplate {
    double scale = 0;
    double ratio = 1.0;

    double width() const;
    double height() const;
};

// Templates of one level tiled over a feature map of the matching stride.
// Boxes are not clamped; off-image anchors get filtered at labeling time.
struct AnchorGrid {
    int level = 1;  // 1..3
    int stride = 8;
    int fh = 0, fw = 0;
    std::vector<AnchorTemplate> templates;
    std::vector<Box> boxes;  // (i*fw + j)*|templates| + t
};

// Cartesian product of scales and ratios; w = s*sqrt(r), h = s/sqrt(r) so
// every template has area s^2.
std::vector<AnchorTemplate> make_templates(const std::vector<double>& scales,
                                           const std::vector<double>& ratios);

// Scale clusters: (0,48) -> level 1, [48,192) -> level 2, [192,inf) -> level 3.
// The boundaries are the geometric midpoints between {16,32}, {64,128} and
// {256,512}, so the default template set splits 10/10/10.
std::vector<std::vector<AnchorTemplate>> cluster_by_level(const std::vector<AnchorTemplate>& templates);

int level_for_scale(double scale);

AnchorGrid generate_grid(int level, int fh, int fw, int stride,
                         const std::vector<AnchorTemplate>& templates);

// Width/height ratio quantiles {2,25,50,75,98}% of the ground-truth boxes;
// the nearest-rank index is round(p*(n-1)). Throws on an empty input.
std::vector<double> fit_ratio_stats(const std::vector<Box>& gt_boxes);

// Resize factor placing a randomly chosen (gt, level) pair inside that
// level's anchor scale range, clamped so the resized longer side stays in
// [64, max_train_side].
double choose_train_scale(const std::vector<Box>& gts, int image_w, int image_h,
                          const std::vector<double>& scales, Rng& rng, int max_train_side);

}  // namespace zip

#include "zip/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace zip {

double AnchorTemplate::width() const { return scale * std::sqrt(ratio); }
double AnchorTemplate::height() const { return scale / std::sqrt(ratio); }

std::vector<AnchorTemplate> make_templates(const std::vector<double>& scales,
                                           const std::vector<double>& ratios) {
    std::vector<AnchorTemplate> out;
    out.reserve(scales.size() * ratios.size());
    for (double s : scales) {
        if (s <= 0) throw std::invalid_argument("make_templates: scale must be positive");
        for (double r : ratios) {
            if (r <= 0) throw std::invalid_argument("make_templates: ratio must be positive");
            out.push_back(AnchorTemplate{s, r});
        }
    }
    return out;
}

int level_for_scale(double scale) {
    if (scale < 48.0) return 1;
    if (scale < 192.0) return 2;
    return 3;
}

std::vector<std::vector<AnchorTemplate>> cluster_by_level(
    const std::vector<AnchorTemplate>& templates) {
    std::vector<std::vector<AnchorTemplate>> clusters(3);
    for (const auto& t : templates)
        clusters[static_cast<size_t>(level_for_scale(t.scale) - 1)].push_back(t);
    return clusters;
}

AnchorGrid generate_grid(int level, int fh, int fw, int stride,
                         const std::vector<AnchorTemplate>& templates) {
    AnchorGrid grid;
    grid.level = level;
    grid.stride = stride;
    grid.fh = fh;
    grid.fw = fw;
    grid.templates = templates;
    grid.boxes.reserve(static_cast<size_t>(fh) * fw * templates.size());
    for (int i = 0; i < fh; ++i) {
        const double cy = (i + 0.5) * stride;
        for (int j = 0; j < fw; ++j) {
            const double cx = (j + 0.5) * stride;
            for (const auto& t : templates) {
                const double hw = 0.5 * t.width();
                const double hh = 0.5 * t.height();
                grid.boxes.push_back(Box{cx - hw, cy - hh, cx + hw, cy + hh});
            }
        }
    }
    return grid;
}

std::vector<double> fit_ratio_stats(const std::vector<Box>& gt_boxes) {
    if (gt_boxes.empty()) throw std::invalid_argument("fit_ratio_stats: empty annotation set");
    std::vector<double> ratios;
    ratios.reserve(gt_boxes.size());
    for (const auto& b : gt_boxes) ratios.push_back(b.width() / b.height());
    std::sort(ratios.begin(), ratios.end());
    const double n1 = static_cast<double>(ratios.size() - 1);
    std::vector<double> out;
    for (double p : {0.02, 0.25, 0.50, 0.75, 0.98}) {
        const auto idx = static_cast<size_t>(std::llround(p * n1));
        out.push_back(ratios[idx]);
    }
    return out;
}

double choose_train_scale(const std::vector<Box>& gts, int image_w, int image_h,
                          const std::vector<double>& scales, Rng& rng, int max_train_side) {
    const double longer = static_cast<double>(std::max(image_w, image_h));
    const double f_lo = 64.0 / longer;
    const double f_hi = static_cast<double>(max_train_side) / longer;
    if (gts.empty()) return std::clamp(1.0, f_lo, f_hi);

    std::vector<std::vector<double>> per_level(3);
    for (double s : scales) per_level[static_cast<size_t>(level_for_scale(s) - 1)].push_back(s);

    const Box& gt = gts[rng.uniform_int(gts.size())];
    // draw levels until one actually has templates (all do in the default config)
    int level = rng.uniform_index(3);
    for (int tries = 0; per_level[static_cast<size_t>(level)].empty() && tries < 16; ++tries)
        level = rng.uniform_index(3);
    const auto& ls = per_level[static_cast<size_t>(level)];
    if (ls.empty()) return std::clamp(1.0, f_lo, f_hi);
    const double smin = *std::min_element(ls.begin(), ls.end());
    const double smax = *std::max_element(ls.begin(), ls.end());
    const double target = rng.uniform(smin, smax);
    const double f = target / std::sqrt(gt.area());
    return std::clamp(f, f_lo, f_hi);
}

}  // namespace zip

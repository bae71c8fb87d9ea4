#include "zip/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace zip {

double offset_exp_clamp() { return std::log(1000.0 / 16.0); }

double iou(const Box& a, const Box& b) {
    const double ix1 = std::max(a.x1, b.x1);
    const double iy1 = std::max(a.y1, b.y1);
    const double ix2 = std::min(a.x2, b.x2);
    const double iy2 = std::min(a.y2, b.y2);
    const double iw = ix2 - ix1;
    const double ih = iy2 - iy1;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<std::vector<double>> iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b) {
    std::vector<std::vector<double>> m(a.size(), std::vector<double>(b.size(), 0.0));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < b.size(); ++j) m[i][j] = iou(a[i], b[j]);
    return m;
}

Offset encode_offset(const Box& anchor, const Box& gt) {
    const double aw = anchor.width();
    const double ah = anchor.height();
    Offset t;
    t.tx = (gt.cx() - anchor.cx()) / aw;
    t.ty = (gt.cy() - anchor.cy()) / ah;
    t.tw = std::log(gt.width() / aw);
    t.th = std::log(gt.height() / ah);
    return t;
}

Box decode_offset(const Offset& offset, const Box& anchor) {
    if (!std::isfinite(offset.tx) || !std::isfinite(offset.ty) || !std::isfinite(offset.tw) ||
        !std::isfinite(offset.th))
        throw std::invalid_argument("decode_offset: non-finite offset");
    const double aw = anchor.width();
    const double ah = anchor.height();
    const double cx = anchor.cx() + offset.tx * aw;
    const double cy = anchor.cy() + offset.ty * ah;
    const double w = aw * std::exp(std::min(offset.tw, offset_exp_clamp()));
    const double h = ah * std::exp(std::min(offset.th, offset_exp_clamp()));
    return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clamp_box(const Box& b, int width, int height) {
    const double w = static_cast<double>(width);
    const double h = static_cast<double>(height);
    Box c;
    c.x1 = std::clamp(b.x1, 0.0, w);
    c.y1 = std::clamp(b.y1, 0.0, h);
    c.x2 = std::clamp(b.x2, 0.0, w);
    c.y2 = std::clamp(b.y2, 0.0, h);
    if (c.x2 <= c.x1) {
        // 1-pixel box at the clipped x location.
        if (c.x1 >= w) c.x1 = w - 1.0;
        c.x2 = c.x1 + 1.0;
    }
    if (c.y2 <= c.y1) {
        if (c.y1 >= h) c.y1 = h - 1.0;
        c.y2 = c.y1 + 1.0;
    }
    return c;
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double threshold, int max_keep) {
    if (boxes.size() != scores.size())
        throw std::invalid_argument("nms: boxes and scores differ in length");
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&scores](int a, int b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        return a < b;
    });

    std::vector<int> kept;
    std::vector<char> suppressed(boxes.size(), 0);
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const int i = order[oi];
        if (suppressed[static_cast<size_t>(i)]) continue;
        kept.push_back(i);
        if (max_keep >= 0 && static_cast<int>(kept.size()) >= max_keep) break;
        const Box& bi = boxes[static_cast<size_t>(i)];
        for (size_t oj = oi + 1; oj < order.size(); ++oj) {
            const int j = order[oj];
            if (suppressed[static_cast<size_t>(j)]) continue;
            if (iou(bi, boxes[static_cast<size_t>(j)]) > threshold)
                suppressed[static_cast<size_t>(j)] = 1;
        }
    }
    return kept;
}

}  // namespace zip

#pragma once

// Independent reference implementations used as oracles. These are written
// against the op contracts, not the production code paths, and must stay
// free of zip/ops.hpp internals beyond the public types.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "zip/geometry.hpp"
#include "zip/rng.hpp"
#include "zip/tensor.hpp"

namespace oracle {

// Direct 6-loop cross-correlation.
inline zip::Tensor<double> conv2d_naive(const zip::Tensor<double>& x, const zip::Tensor<double>& w,
                                        const std::vector<double>& bias, int stride, int pad) {
    const int n_batch = x.extent(0), c_in = x.extent(1), h = x.extent(2), wd = x.extent(3);
    const int c_out = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    zip::Tensor<double> out({n_batch, c_out, oh, ow});
    for (int n = 0; n < n_batch; ++n)
        for (int co = 0; co < c_out; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(co)];
                    for (int ci = 0; ci < c_in; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += x.at4(n, ci, iy, ix) * w.at4(co, ci, ky, kx);
                            }
                    out.at4(n, co, oy, ox) = acc;
                }
    return out;
}

inline zip::Tensor<double> maxpool_naive(const zip::Tensor<double>& x, int kernel, int stride) {
    const int n_batch = x.extent(0), c = x.extent(1), h = x.extent(2), wd = x.extent(3);
    const int oh = (h - kernel) / stride + 1;
    const int ow = (wd - kernel) / stride + 1;
    zip::Tensor<double> out({n_batch, c, oh, ow});
    for (int n = 0; n < n_batch; ++n)
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double best = -std::numeric_limits<double>::infinity();
                    for (int ky = 0; ky < kernel; ++ky)
                        for (int kx = 0; kx < kernel; ++kx)
                            best = std::max(best, x.at4(n, ch, oy * stride + ky, ox * stride + kx));
                    out.at4(n, ch, oy, ox) = best;
                }
    return out;
}

// RoI max pooling against the written bin-quantization contract.
inline std::vector<double> roi_pool_naive(const zip::Tensor<double>& fm, const zip::Box& box,
                                          int gh, int gw, int stride) {
    const int c = fm.extent(1), fh = fm.extent(2), fw = fm.extent(3);
    const double fx1 = std::clamp(box.x1 / stride, 0.0, double(fw));
    const double fx2 = std::clamp(box.x2 / stride, 0.0, double(fw));
    const double fy1 = std::clamp(box.y1 / stride, 0.0, double(fh));
    const double fy2 = std::clamp(box.y2 / stride, 0.0, double(fh));
    std::vector<double> out(static_cast<size_t>(c) * gh * gw, 0.0);
    if (fx2 <= fx1 || fy2 <= fy1) return out;
    for (int ch = 0; ch < c; ++ch)
        for (int by = 0; by < gh; ++by)
            for (int bx = 0; bx < gw; ++bx) {
                int ys = std::clamp(int(std::floor(fy1 + by * (fy2 - fy1) / gh)), 0, fh);
                int ye = std::clamp(int(std::ceil(fy1 + (by + 1) * (fy2 - fy1) / gh)), 0, fh);
                int xs = std::clamp(int(std::floor(fx1 + bx * (fx2 - fx1) / gw)), 0, fw);
                int xe = std::clamp(int(std::ceil(fx1 + (bx + 1) * (fx2 - fx1) / gw)), 0, fw);
                if (ys >= ye) { ys = std::clamp(ys, 0, fh - 1); ye = ys + 1; }
                if (xs >= xe) { xs = std::clamp(xs, 0, fw - 1); xe = xs + 1; }
                double best = -std::numeric_limits<double>::infinity();
                for (int y = ys; y < ye; ++y)
                    for (int x = xs; x < xe; ++x) best = std::max(best, fm.at4(0, ch, y, x));
                out[static_cast<size_t>((ch * gh + by) * gw + bx)] = best;
            }
    return out;
}

// O(n^2) NMS written independently of the production greedy loop.
inline std::vector<int> nms_bruteforce(const std::vector<zip::Box>& boxes,
                                       const std::vector<double>& scores, double thresh) {
    const int n = static_cast<int>(boxes.size());
    std::vector<int> order(boxes.size());
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    });
    std::vector<int> kept;
    for (int idx : order) {
        bool ok = true;
        for (int k : kept) {
            const zip::Box& a = boxes[static_cast<size_t>(idx)];
            const zip::Box& b = boxes[static_cast<size_t>(k)];
            const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
            const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
            double v = 0.0;
            if (ix > 0 && iy > 0) {
                const double inter = ix * iy;
                v = inter / (a.area() + b.area() - inter);
            }
            if (v > thresh) {
                ok = false;
                break;
            }
        }
        if (ok) kept.push_back(idx);
    }
    return kept;
}

inline zip::TensorPtr<double> random_tensor(std::vector<int> shape, zip::Rng& rng,
                                            double lo = -1.0, double hi = 1.0) {
    auto t = zip::make_tensor<double>(std::move(shape));
    for (auto& v : t->values) v = rng.uniform(lo, hi);
    return t;
}

inline void randomize(zip::Parameter<double>& p, zip::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (auto& v : p.value.values) v = rng.uniform(lo, hi);
}

inline zip::Box random_box(zip::Rng& rng, double extent = 100.0) {
    const double x1 = rng.uniform(0.0, extent);
    const double y1 = rng.uniform(0.0, extent);
    const double w = rng.uniform(1.0, extent / 2);
    const double h = rng.uniform(1.0, extent / 2);
    return zip::Box{x1, y1, x1 + w, y1 + h};
}

}  // namespace oracle

#pragma once

#include <vector>

namespace zip {

// Axis-aligned rectangle, corner convention (x1,y1) top-left, real-valued
// edges; area = (x2-x1)*(y2-y1) with no +1 correction.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
};

// Center shift (tx,ty) in units of anchor size plus log scale factors (tw,th).
struct Offset {
    double tx = 0, ty = 0, tw = 0, th = 0;
};

// Largest decodable scale change; exponentials are clipped to this before
// exp so untrained regressors cannot overflow.
double offset_exp_clamp();

double iou(const Box& a, const Box& b);

// Row i, col j = iou(a[i], b[j]).
std::vector<std::vector<double>> iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b);

Offset encode_offset(const Box& anchor, const Box& gt);

// Inverse of encode_offset; throws std::invalid_argument on non-finite input.
Box decode_offset(const Offset& offset, const Box& anchor);

// Clip to [0,W]x[0,H]; degenerate results become a 1-pixel box at the
// clipped location.
Box clamp_box(const Box& b, int width, int height);

// Greedy NMS. Returns kept indices in descending score order; boxes with
// IoU strictly above the threshold against a kept box are suppressed.
// Score ties break toward the lower original index. max_keep < 0 keeps all;
// otherwise the scan stops once max_keep boxes are kept (the greedy order
// makes the truncated output exactly the head of the full output).
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double threshold, int max_keep = -1);

}  // namespace zip

#include "zip/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace zip {

namespace {

template <typename T>
void require_rank4(const Tensor<T>& t, const char* what) {
    if (t.rank() != 4)
        throw ShapeError(std::string(what) + " must be rank 4, got " + shape_str(t.shape));
}

template <typename T>
void maybe_check(const TensorPtr<T>& t, const char* what) {
    if (finite_checks_enabled()) assert_all_finite(*t, what);
}

}  // namespace

template <typename T>
TensorPtr<T> conv2d(Tape* tape, const TensorPtr<T>& input, Parameter<T>& weight,
                    Parameter<T>* bias, int stride, int padding) {
    const Tensor<T>& x = *input;
    const Tensor<T>& w = weight.value;
    require_rank4(x, "conv2d input");
    require_rank4(w, "conv2d weight");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative");
    const int n_batch = x.extent(0), c_in = x.extent(1), h = x.extent(2), wd = x.extent(3);
    const int c_out = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    if (w.extent(1) != c_in)
        throw ShapeError("conv2d: input shape " + shape_str(x.shape) +
                         " does not match weight shape " + shape_str(w.shape));
    if (bias && bias->value.numel() != c_out)
        throw ShapeError("conv2d: bias shape " + shape_str(bias->value.shape) +
                         " does not match weight shape " + shape_str(w.shape));
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (wd + 2 * padding - kw) / stride + 1;
    if (h + 2 * padding < kh || wd + 2 * padding < kw || oh < 1 || ow < 1)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape) + " does not fit input " +
                         shape_str(x.shape));

    auto out = make_tensor<T>({n_batch, c_out, oh, ow});
    const T* xv = x.values.data();
    const T* wv = w.values.data();
    T* ov = out->values.data();
    for (int n = 0; n < n_batch; ++n) {
        for (int co = 0; co < c_out; ++co) {
            const T b = bias ? bias->value.values[static_cast<size_t>(co)] : T(0);
            for (int oy = 0; oy < oh; ++oy) {
                const int iy0 = oy * stride - padding;
                for (int ox = 0; ox < ow; ++ox) {
                    const int ix0 = ox * stride - padding;
                    T acc = b;
                    for (int ci = 0; ci < c_in; ++ci) {
                        const int64_t xplane = (static_cast<int64_t>(n) * c_in + ci) * h;
                        const int64_t wplane = (static_cast<int64_t>(co) * c_in + ci) * kh;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= h) continue;
                            const T* xrow = xv + (xplane + iy) * wd;
                            const T* wrow = wv + (wplane + ky) * kw;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= wd) continue;
                                acc += xrow[ix] * wrow[kx];
                            }
                        }
                    }
                    ov[((static_cast<int64_t>(n) * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    maybe_check(out, "conv2d");

    if (tape) {
        input->ensure_grad();
        out->ensure_grad();
        Parameter<T>* wp = &weight;
        Parameter<T>* bp = bias;
        tape->record([input, out, wp, bp, stride, padding]() {
            const Tensor<T>& xi = *input;
            const Tensor<T>& wt = wp->value;
            const int n_batch = xi.extent(0), c_in = xi.extent(1), h = xi.extent(2), wd = xi.extent(3);
            const int c_out = wt.extent(0), kh = wt.extent(2), kw = wt.extent(3);
            const int oh = out->extent(2), ow = out->extent(3);
            const T* xv = xi.values.data();
            const T* wv = wt.values.data();
            const T* gv = out->grad.data();
            T* dx = input->grad.data();
            T* dw = wp->value.grad.data();
            for (int n = 0; n < n_batch; ++n) {
                for (int co = 0; co < c_out; ++co) {
                    T bacc = T(0);
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy0 = oy * stride - padding;
                        for (int ox = 0; ox < ow; ++ox) {
                            const T g = gv[((static_cast<int64_t>(n) * c_out + co) * oh + oy) * ow + ox];
                            if (g == T(0)) continue;
                            bacc += g;
                            const int ix0 = ox * stride - padding;
                            for (int ci = 0; ci < c_in; ++ci) {
                                const int64_t xplane = (static_cast<int64_t>(n) * c_in + ci) * h;
                                const int64_t wplane = (static_cast<int64_t>(co) * c_in + ci) * kh;
                                for (int ky = 0; ky < kh; ++ky) {
                                    const int iy = iy0 + ky;
                                    if (iy < 0 || iy >= h) continue;
                                    const int64_t xrow = (xplane + iy) * wd;
                                    const int64_t wrow = (wplane + ky) * kw;
                                    for (int kx = 0; kx < kw; ++kx) {
                                        const int ix = ix0 + kx;
                                        if (ix < 0 || ix >= wd) continue;
                                        dx[xrow + ix] += g * wv[wrow + kx];
                                        dw[wrow + kx] += g * xv[xrow + ix];
                                    }
                                }
                            }
                        }
                    }
                    if (bp) bp->value.grad[static_cast<size_t>(co)] += bacc;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> deconv2d(Tape* tape, const TensorPtr<T>& input, Parameter<T>& weight,
                      Parameter<T>* bias, int stride, int padding) {
    const Tensor<T>& x = *input;
    const Tensor<T>& w = weight.value;
    require_rank4(x, "deconv2d input");
    require_rank4(w, "deconv2d weight");
    if (stride < 1) throw std::invalid_argument("deconv2d: stride must be positive");
    if (padding < 0) throw std::invalid_argument("deconv2d: padding must be non-negative");
    const int n_batch = x.extent(0), c_in = x.extent(1), h = x.extent(2), wd = x.extent(3);
    const int c_out = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    if (w.extent(0) != c_in)
        throw ShapeError("deconv2d: input shape " + shape_str(x.shape) +
                         " does not match weight shape " + shape_str(w.shape));
    const int oh = (h - 1) * stride - 2 * padding + kh;
    const int ow = (wd - 1) * stride - 2 * padding + kw;
    if (oh < 1 || ow < 1)
        throw ShapeError("deconv2d: output would be empty for input " + shape_str(x.shape));

    auto out = make_tensor<T>({n_batch, c_out, oh, ow});
    T* ov = out->values.data();
    if (bias) {
        if (bias->value.numel() != c_out)
            throw ShapeError("deconv2d: bias shape " + shape_str(bias->value.shape) +
                             " does not match weight shape " + shape_str(w.shape));
        for (int n = 0; n < n_batch; ++n)
            for (int co = 0; co < c_out; ++co) {
                const T b = bias->value.values[static_cast<size_t>(co)];
                T* plane = ov + (static_cast<int64_t>(n) * c_out + co) * oh * ow;
                for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) plane[i] = b;
            }
    }
    const T* xv = x.values.data();
    const T* wv = w.values.data();
    for (int n = 0; n < n_batch; ++n) {
        for (int ci = 0; ci < c_in; ++ci) {
            for (int iy = 0; iy < h; ++iy) {
                for (int ix = 0; ix < wd; ++ix) {
                    const T v = xv[((static_cast<int64_t>(n) * c_in + ci) * h + iy) * wd + ix];
                    if (v == T(0)) continue;
                    for (int co = 0; co < c_out; ++co) {
                        const int64_t wplane = (static_cast<int64_t>(ci) * c_out + co) * kh;
                        const int64_t oplane = (static_cast<int64_t>(n) * c_out + co) * oh;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int oy = iy * stride - padding + ky;
                            if (oy < 0 || oy >= oh) continue;
                            T* orow = ov + (oplane + oy) * ow;
                            const T* wrow = wv + (wplane + ky) * kw;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ox = ix * stride - padding + kx;
                                if (ox < 0 || ox >= ow) continue;
                                orow[ox] += v * wrow[kx];
                            }
                        }
                    }
                }
            }
        }
    }
    maybe_check(out, "deconv2d");

    if (tape) {
        input->ensure_grad();
        out->ensure_grad();
        Parameter<T>* wp = &weight;
        Parameter<T>* bp = bias;
        tape->record([input, out, wp, bp, stride, padding]() {
            const Tensor<T>& xi = *input;
            const Tensor<T>& wt = wp->value;
            const int n_batch = xi.extent(0), c_in = xi.extent(1), h = xi.extent(2), wd = xi.extent(3);
            const int c_out = wt.extent(1), kh = wt.extent(2), kw = wt.extent(3);
            const int oh = out->extent(2), ow = out->extent(3);
            const T* xv = xi.values.data();
            const T* wv = wt.values.data();
            const T* gv = out->grad.data();
            T* dx = input->grad.data();
            T* dw = wp->value.grad.data();
            for (int n = 0; n < n_batch; ++n) {
                for (int ci = 0; ci < c_in; ++ci) {
                    for (int iy = 0; iy < h; ++iy) {
                        for (int ix = 0; ix < wd; ++ix) {
                            const int64_t xidx = ((static_cast<int64_t>(n) * c_in + ci) * h + iy) * wd + ix;
                            const T xval = xv[xidx];
                            T acc = T(0);
                            for (int co = 0; co < c_out; ++co) {
                                const int64_t wplane = (static_cast<int64_t>(ci) * c_out + co) * kh;
                                const int64_t gplane = (static_cast<int64_t>(n) * c_out + co) * oh;
                                for (int ky = 0; ky < kh; ++ky) {
                                    const int oy = iy * stride - padding + ky;
                                    if (oy < 0 || oy >= oh) continue;
                                    const T* grow = gv + (gplane + oy) * ow;
                                    const T* wrow = wv + (wplane + ky) * kw;
                                    T* dwrow = dw + (wplane + ky) * kw;
                                    for (int kx = 0; kx < kw; ++kx) {
                                        const int ox = ix * stride - padding + kx;
                                        if (ox < 0 || ox >= ow) continue;
                                        acc += grow[ox] * wrow[kx];
                                        dwrow[kx] += grow[ox] * xval;
                                    }
                                }
                            }
                            dx[xidx] += acc;
                        }
                    }
                }
            }
            if (bp) {
                for (int n = 0; n < n_batch; ++n)
                    for (int co = 0; co < c_out; ++co) {
                        const T* plane = gv + (static_cast<int64_t>(n) * c_out + co) * oh * ow;
                        T acc = T(0);
                        for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) acc += plane[i];
                        bp->value.grad[static_cast<size_t>(co)] += acc;
                    }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> maxpool2d(Tape* tape, const TensorPtr<T>& input, int kernel, int stride) {
    const Tensor<T>& x = *input;
    require_rank4(x, "maxpool2d input");
    const int n_batch = x.extent(0), c = x.extent(1), h = x.extent(2), wd = x.extent(3);
    if (kernel > h || kernel > wd)
        throw ShapeError("maxpool2d: kernel " + std::to_string(kernel) + " larger than map " +
                         shape_str(x.shape));
    const int oh = (h - kernel) / stride + 1;
    const int ow = (wd - kernel) / stride + 1;
    auto out = make_tensor<T>({n_batch, c, oh, ow});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out->numel()));
    const T* xv = x.values.data();
    T* ov = out->values.data();
    int64_t oi = 0;
    for (int n = 0; n < n_batch; ++n) {
        for (int ch = 0; ch < c; ++ch) {
            const int64_t plane = (static_cast<int64_t>(n) * c + ch) * h;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++oi) {
                    const int iy0 = oy * stride, ix0 = ox * stride;
                    T best = xv[(plane + iy0) * wd + ix0];
                    int64_t besti = (plane + iy0) * wd + ix0;
                    for (int ky = 0; ky < kernel; ++ky) {
                        const T* row = xv + (plane + iy0 + ky) * wd;
                        for (int kx = 0; kx < kernel; ++kx) {
                            // first occurrence wins on ties
                            if (row[ix0 + kx] > best) {
                                best = row[ix0 + kx];
                                besti = (plane + iy0 + ky) * wd + ix0 + kx;
                            }
                        }
                    }
                    ov[oi] = best;
                    (*argmax)[static_cast<size_t>(oi)] = besti;
                }
            }
        }
    }
    maybe_check(out, "maxpool2d");

    if (tape) {
        input->ensure_grad();
        out->ensure_grad();
        tape->record([input, out, argmax]() {
            T* dx = input->grad.data();
            const T* g = out->grad.data();
            const int64_t n = out->numel();
            for (int64_t i = 0; i < n; ++i) dx[(*argmax)[static_cast<size_t>(i)]] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> relu(Tape* tape, const TensorPtr<T>& input) {
    auto out = make_tensor<T>(input->shape);
    const int64_t n = input->numel();
    const T* xv = input->values.data();
    T* ov = out->values.data();
    for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
    if (tape) {
        input->ensure_grad();
        out->ensure_grad();
        tape->record([input, out]() {
            const int64_t n = input->numel();
            const T* xv = input->values.data();
            const T* g = out->grad.data();
            T* dx = input->grad.data();
            for (int64_t i = 0; i < n; ++i)
                if (xv[i] > T(0)) dx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> batchnorm2d(Tape* tape, const TensorPtr<T>& input, Parameter<T>& gamma,
                         Parameter<T>& beta, BatchNormState<T>& state, BNMode mode) {
    const Tensor<T>& x = *input;
    require_rank4(x, "batchnorm2d input");
    const int n_batch = x.extent(0), c = x.extent(1), h = x.extent(2), wd = x.extent(3);
    if (static_cast<int>(state.running_mean.size()) != c)
        throw ShapeError("batchnorm2d: state has " + std::to_string(state.running_mean.size()) +
                         " channels, input " + shape_str(x.shape));
    if (gamma.value.numel() != c || beta.value.numel() != c)
        throw ShapeError("batchnorm2d: gamma/beta do not match " + std::to_string(c) + " channels");
    if (mode == BNMode::eval && !state.initialized)
        throw std::runtime_error("batchnorm2d: eval mode with uninitialized running stats");

    const double eps = 1e-5;
    const int64_t m = static_cast<int64_t>(n_batch) * h * wd;
    const int64_t plane = static_cast<int64_t>(h) * wd;
    auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(c), 0.0);
    auto var = std::make_shared<std::vector<double>>(static_cast<size_t>(c), 0.0);
    const T* xv = x.values.data();

    if (mode == BNMode::train) {
        for (int ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int n = 0; n < n_batch; ++n) {
                const T* p = xv + ((static_cast<int64_t>(n) * c + ch) * plane);
                for (int64_t i = 0; i < plane; ++i) s += static_cast<double>(p[i]);
            }
            const double mu = s / static_cast<double>(m);
            double v = 0.0;
            for (int n = 0; n < n_batch; ++n) {
                const T* p = xv + ((static_cast<int64_t>(n) * c + ch) * plane);
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = static_cast<double>(p[i]) - mu;
                    v += d * d;
                }
            }
            (*mean)[static_cast<size_t>(ch)] = mu;
            (*var)[static_cast<size_t>(ch)] = v / static_cast<double>(m);
        }
        // first batch seeds the running stats, later ones blend at 0.9
        for (int ch = 0; ch < c; ++ch) {
            const size_t s = static_cast<size_t>(ch);
            if (!state.initialized) {
                state.running_mean[s] = static_cast<T>((*mean)[s]);
                state.running_var[s] = static_cast<T>((*var)[s]);
            } else {
                state.running_mean[s] =
                    static_cast<T>(0.9 * static_cast<double>(state.running_mean[s]) + 0.1 * (*mean)[s]);
                state.running_var[s] =
                    static_cast<T>(0.9 * static_cast<double>(state.running_var[s]) + 0.1 * (*var)[s]);
            }
        }
        state.initialized = true;
    } else {
        for (int ch = 0; ch < c; ++ch) {
            (*mean)[static_cast<size_t>(ch)] = static_cast<double>(state.running_mean[static_cast<size_t>(ch)]);
            (*var)[static_cast<size_t>(ch)] = static_cast<double>(state.running_var[static_cast<size_t>(ch)]);
        }
    }

    auto out = make_tensor<T>(x.shape);
    T* ov = out->values.data();
    for (int n = 0; n < n_batch; ++n) {
        for (int ch = 0; ch < c; ++ch) {
            const double inv = 1.0 / std::sqrt((*var)[static_cast<size_t>(ch)] + eps);
            const double g = static_cast<double>(gamma.value.values[static_cast<size_t>(ch)]);
            const double b = static_cast<double>(beta.value.values[static_cast<size_t>(ch)]);
            const double mu = (*mean)[static_cast<size_t>(ch)];
            const T* p = xv + ((static_cast<int64_t>(n) * c + ch) * plane);
            T* q = ov + ((static_cast<int64_t>(n) * c + ch) * plane);
            for (int64_t i = 0; i < plane; ++i)
                q[i] = static_cast<T>(g * ((static_cast<double>(p[i]) - mu) * inv) + b);
        }
    }
    maybe_check(out, "batchnorm2d");

    if (tape) {
        input->ensure_grad();
        out->ensure_grad();
        Parameter<T>* gp = &gamma;
        Parameter<T>* bp = &beta;
        tape->record([input, out, gp, bp, mean, var, mode, n_batch, c, plane, m, eps]() {
            const T* xv = input->values.data();
            const T* gv = out->grad.data();
            T* dx = input->grad.data();
            for (int ch = 0; ch < c; ++ch) {
                const size_t s = static_cast<size_t>(ch);
                const double mu = (*mean)[s];
                const double inv = 1.0 / std::sqrt((*var)[s] + eps);
                const double gam = static_cast<double>(gp->value.values[s]);
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int n = 0; n < n_batch; ++n) {
                    const int64_t base = (static_cast<int64_t>(n) * c + ch) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        const double dy = static_cast<double>(gv[base + i]);
                        sum_dy += dy;
                        sum_dy_xhat += dy * ((static_cast<double>(xv[base + i]) - mu) * inv);
                    }
                }
                gp->value.grad[s] += static_cast<T>(sum_dy_xhat);
                bp->value.grad[s] += static_cast<T>(sum_dy);
                const double mm = static_cast<double>(m);
                for (int n = 0; n < n_batch; ++n) {
                    const int64_t base = (static_cast<int64_t>(n) * c + ch) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        const double dy = static_cast<double>(gv[base + i]);
                        const double xhat = (static_cast<double>(xv[base + i]) - mu) * inv;
                        double d;
                        if (mode == BNMode::train) {
                            d = gam * inv * (dy - sum_dy / mm - xhat * (sum_dy_xhat / mm));
                        } else {
                            d = gam * inv * dy;  // running stats are constants
                        }
                        dx[base + i] += static_cast<T>(d);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> avgpool_global(Tape* tape, const TensorPtr<T>& input) {
    const Tensor<T>& x = *input;
    require_rank4(x, "avgpool_global input");
    const int n_batch = x.extent(0), c = x.extent(1);
    const int64_t plane = static_cast<int64_t>(x.extent(2)) * x.extent(3);
    auto out = make_tensor<T>({n_batch, c});
    const T* xv = x.values.data();
    T* ov = out->values.data();
    for (int n = 0; n < n_batch; ++n) {
        for (int ch = 0; ch < c; ++ch) {
            const T* p = xv + (static_cast<int64_t>(n) * c + ch) * plane;
            T acc = T(0);
            for (int64_t i = 0; i < plane; ++i) acc += p[i];
            ov[static_cast<int64_t>(n) * c + ch] = acc / static_cast<T>(plane);
        }
    }
    if (tape) {
        input->ensure_grad();
        out->ensure_grad();
        tape->record([input, out, plane]() {
            const int n_batch = out->extent(0), c = out->extent(1);
            const T* g = out->grad.data();
            T* dx = input->grad.data();
            for (int n = 0; n < n_batch; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    const T share = g[static_cast<int64_t>(n) * c + ch] / static_cast<T>(plane);
                    T* p = dx + (static_cast<int64_t>(n) * c + ch) * plane;
                    for (int64_t i = 0; i < plane; ++i) p[i] += share;
                }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> fc(Tape* tape, const TensorPtr<T>& input, Parameter<T>& weight, Parameter<T>* bias) {
    const Tensor<T>& x = *input;
    const Tensor<T>& w = weight.value;
    if (x.rank() < 2) throw ShapeError("fc: input must have a batch dimension, got " + shape_str(x.shape));
    if (w.rank() != 2) throw ShapeError("fc: weight must be rank 2, got " + shape_str(w.shape));
    const int n_batch = x.extent(0);
    const int64_t d = x.numel() / n_batch;
    const int o = w.extent(0);
    if (w.extent(1) != d)
        throw ShapeError("fc: input shape " + shape_str(x.shape) + " does not match weight shape " +
                         shape_str(w.shape));
    if (bias && bias->value.numel() != o)
        throw ShapeError("fc: bias shape " + shape_str(bias->value.shape) + " does not match " +
                         std::to_string(o) + " outputs");
    auto out = make_tensor<T>({n_batch, o});
    const T* xv = x.values.data();
    const T* wv = w.values.data();
    T* ov = out->values.data();
    for (int n = 0; n < n_batch; ++n) {
        const T* xr = xv + static_cast<int64_t>(n) * d;
        for (int oo = 0; oo < o; ++oo) {
            const T* wr = wv + static_cast<int64_t>(oo) * d;
            T acc = bias ? bias->value.values[static_cast<size_t>(oo)] : T(0);
            for (int64_t i = 0; i < d; ++i) acc += xr[i] * wr[i];
            ov[static_cast<int64_t>(n) * o + oo] = acc;
        }
    }
    maybe_check(out, "fc");
    if (tape) {
        input->ensure_grad();
        out->ensure_grad();
        Parameter<T>* wp = &weight;
        Parameter<T>* bp = bias;
        tape->record([input, out, wp, bp, d]() {
            const int n_batch = out->extent(0), o = out->extent(1);
            const T* xv = input->values.data();
            const T* wv = wp->value.values.data();
            const T* g = out->grad.data();
            T* dx = input->grad.data();
            T* dw = wp->value.grad.data();
            for (int n = 0; n < n_batch; ++n) {
                const T* xr = xv + static_cast<int64_t>(n) * d;
                T* dxr = dx + static_cast<int64_t>(n) * d;
                for (int oo = 0; oo < o; ++oo) {
                    const T gg = g[static_cast<int64_t>(n) * o + oo];
                    if (gg == T(0)) continue;
                    const T* wr = wv + static_cast<int64_t>(oo) * d;
                    T* dwr = dw + static_cast<int64_t>(oo) * d;
                    for (int64_t i = 0; i < d; ++i) {
                        dxr[i] += gg * wr[i];
                        dwr[i] += gg * xr[i];
                    }
                    if (bp) bp->value.grad[static_cast<size_t>(oo)] += gg;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> add(Tape* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (!a->same_shape(*b))
        throw ShapeError("add: shape " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->values[static_cast<size_t>(i)] = a->values[static_cast<size_t>(i)] + b->values[static_cast<size_t>(i)];
    if (tape) {
        a->ensure_grad();
        b->ensure_grad();
        out->ensure_grad();
        tape->record([a, b, out]() {
            const int64_t n = out->numel();
            for (int64_t i = 0; i < n; ++i) {
                const T g = out->grad[static_cast<size_t>(i)];
                a->grad[static_cast<size_t>(i)] += g;
                b->grad[static_cast<size_t>(i)] += g;
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> softmax_xent(Tape* tape, const TensorPtr<T>& logits, const std::vector<int>& labels,
                          int ignore_label) {
    const Tensor<T>& x = *logits;
    if (x.rank() != 2) throw ShapeError("softmax_xent: logits must be (rows, classes), got " + shape_str(x.shape));
    const int rows = x.extent(0), classes = x.extent(1);
    if (static_cast<int>(labels.size()) != rows)
        throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
    int count = 0;
    for (int r = 0; r < rows; ++r) {
        const int k = labels[static_cast<size_t>(r)];
        if (k == ignore_label) continue;
        if (k < 0 || k >= classes)
            throw std::out_of_range("softmax_xent: label " + std::to_string(k) + " out of range for " +
                                    std::to_string(classes) + " classes");
        ++count;
    }
    if (count == 0) throw std::runtime_error("softmax_xent: empty classification batch (all rows ignored)");

    double loss = 0.0;
    for (int r = 0; r < rows; ++r) {
        const int k = labels[static_cast<size_t>(r)];
        if (k == ignore_label) continue;
        const T* row = x.values.data() + static_cast<int64_t>(r) * classes;
        double mx = static_cast<double>(row[0]);
        for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
        double se = 0.0;
        for (int c = 0; c < classes; ++c) se += std::exp(static_cast<double>(row[c]) - mx);
        loss += mx + std::log(se) - static_cast<double>(row[k]);
    }
    auto out = make_tensor<T>({1}, {static_cast<T>(loss / count)});

    if (tape) {
        logits->ensure_grad();
        out->ensure_grad();
        auto labels_copy = std::make_shared<std::vector<int>>(labels);
        tape->record([logits, out, labels_copy, ignore_label, count]() {
            const int rows = logits->extent(0), classes = logits->extent(1);
            const T gscale = out->grad[0] / static_cast<T>(count);
            for (int r = 0; r < rows; ++r) {
                const int k = (*labels_copy)[static_cast<size_t>(r)];
                if (k == ignore_label) continue;
                const T* row = logits->values.data() + static_cast<int64_t>(r) * classes;
                T* drow = logits->grad.data() + static_cast<int64_t>(r) * classes;
                double mx = static_cast<double>(row[0]);
                for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
                double se = 0.0;
                for (int c = 0; c < classes; ++c) se += std::exp(static_cast<double>(row[c]) - mx);
                for (int c = 0; c < classes; ++c) {
                    const double p = std::exp(static_cast<double>(row[c]) - mx) / se;
                    drow[c] += gscale * static_cast<T>(p - (c == k ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> smooth_l1(Tape* tape, const TensorPtr<T>& pred, const Tensor<T>& target,
                       const std::vector<uint8_t>& row_mask) {
    const Tensor<T>& p = *pred;
    if (!p.same_shape(target))
        throw ShapeError("smooth_l1: pred " + shape_str(p.shape) + " vs target " + shape_str(target.shape));
    if (p.rank() != 2) throw ShapeError("smooth_l1: expected (rows, dims), got " + shape_str(p.shape));
    const int rows = p.extent(0), dims = p.extent(1);
    if (static_cast<int>(row_mask.size()) != rows)
        throw ShapeError("smooth_l1: mask length " + std::to_string(row_mask.size()) + " for " +
                         std::to_string(rows) + " rows");
    int count = 0;
    for (uint8_t f : row_mask) count += f ? 1 : 0;

    double loss = 0.0;
    if (count > 0) {
        for (int r = 0; r < rows; ++r) {
            if (!row_mask[static_cast<size_t>(r)]) continue;
            for (int d = 0; d < dims; ++d) {
                const double x = static_cast<double>(p.at2(r, d)) - static_cast<double>(target.at2(r, d));
                loss += std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
            }
        }
        loss /= count;
    }
    auto out = make_tensor<T>({1}, {static_cast<T>(loss)});

    if (tape && count > 0) {
        pred->ensure_grad();
        out->ensure_grad();
        auto tgt = std::make_shared<Tensor<T>>(target);
        auto mask = std::make_shared<std::vector<uint8_t>>(row_mask);
        tape->record([pred, out, tgt, mask, count]() {
            const int rows = pred->extent(0), dims = pred->extent(1);
            const T gscale = out->grad[0] / static_cast<T>(count);
            for (int r = 0; r < rows; ++r) {
                if (!(*mask)[static_cast<size_t>(r)]) continue;
                for (int d = 0; d < dims; ++d) {
                    const double x =
                        static_cast<double>(pred->at2(r, d)) - static_cast<double>(tgt->at2(r, d));
                    pred->grad[static_cast<size_t>(static_cast<int64_t>(r) * dims + d)] +=
                        gscale * static_cast<T>(std::clamp(x, -1.0, 1.0));
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> roi_pool(Tape* tape, const TensorPtr<T>& featmap, const std::vector<Roi>& rois,
                      int grid_h, int grid_w, int stride, RoiPoolStats* stats) {
    const Tensor<T>& fm = *featmap;
    require_rank4(fm, "roi_pool featmap");
    const int c = fm.extent(1), fh = fm.extent(2), fw = fm.extent(3);
    const int n_rois = static_cast<int>(rois.size());
    auto out = make_tensor<T>({n_rois, c, grid_h, grid_w});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out->numel()), -1);
    const T* xv = fm.values.data();
    T* ov = out->values.data();

    for (int r = 0; r < n_rois; ++r) {
        const Roi& roi = rois[static_cast<size_t>(r)];
        if (roi.batch < 0 || roi.batch >= fm.extent(0))
            throw std::out_of_range("roi_pool: batch index " + std::to_string(roi.batch));
        const double s = static_cast<double>(stride);
        double fx1 = std::clamp(roi.box.x1 / s, 0.0, static_cast<double>(fw));
        double fx2 = std::clamp(roi.box.x2 / s, 0.0, static_cast<double>(fw));
        double fy1 = std::clamp(roi.box.y1 / s, 0.0, static_cast<double>(fh));
        double fy2 = std::clamp(roi.box.y2 / s, 0.0, static_cast<double>(fh));
        if (fx2 <= fx1 || fy2 <= fy1) {
            if (stats) stats->degenerate_rois++;
            continue;  // zero output rows, nothing routed back
        }
        const double bh = (fy2 - fy1) / grid_h;
        const double bw = (fx2 - fx1) / grid_w;
        for (int ch = 0; ch < c; ++ch) {
            const int64_t plane = (static_cast<int64_t>(roi.batch) * c + ch) * fh;
            for (int by = 0; by < grid_h; ++by) {
                int ys = static_cast<int>(std::floor(fy1 + by * bh));
                int ye = static_cast<int>(std::ceil(fy1 + (by + 1) * bh));
                ys = std::clamp(ys, 0, fh);
                ye = std::clamp(ye, 0, fh);
                if (ys >= ye) {  // empty after quantization: nearest valid cell
                    ys = std::clamp(ys, 0, fh - 1);
                    ye = ys + 1;
                }
                for (int bx = 0; bx < grid_w; ++bx) {
                    int xs = static_cast<int>(std::floor(fx1 + bx * bw));
                    int xe = static_cast<int>(std::ceil(fx1 + (bx + 1) * bw));
                    xs = std::clamp(xs, 0, fw);
                    xe = std::clamp(xe, 0, fw);
                    if (xs >= xe) {
                        xs = std::clamp(xs, 0, fw - 1);
                        xe = xs + 1;
                    }
                    T best = xv[(plane + ys) * fw + xs];
                    int64_t besti = (plane + ys) * fw + xs;
                    for (int y = ys; y < ye; ++y) {
                        const T* row = xv + (plane + y) * fw;
                        for (int x = xs; x < xe; ++x) {
                            if (row[x] > best) {
                                best = row[x];
                                besti = (plane + y) * fw + x;
                            }
                        }
                    }
                    const int64_t oi =
                        ((static_cast<int64_t>(r) * c + ch) * grid_h + by) * grid_w + bx;
                    ov[oi] = best;
                    (*argmax)[static_cast<size_t>(oi)] = besti;
                }
            }
        }
    }
    maybe_check(out, "roi_pool");

    if (tape) {
        featmap->ensure_grad();
        out->ensure_grad();
        tape->record([featmap, out, argmax]() {
            T* dx = featmap->grad.data();
            const T* g = out->grad.data();
            const int64_t n = out->numel();
            for (int64_t i = 0; i < n; ++i) {
                const int64_t a = (*argmax)[static_cast<size_t>(i)];
                if (a >= 0) dx[a] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> gather_cells(Tape* tape, const TensorPtr<T>& head, const std::vector<int>& anchor_indices,
                          int channels, int templates) {
    const Tensor<T>& x = *head;
    require_rank4(x, "gather_cells head");
    if (x.extent(0) != 1)
        throw ShapeError("gather_cells: expected batch 1, got " + shape_str(x.shape));
    if (x.extent(1) != channels * templates)
        throw ShapeError("gather_cells: head " + shape_str(x.shape) + " does not hold " +
                         std::to_string(templates) + " x " + std::to_string(channels) + " channels");
    const int h = x.extent(2), w = x.extent(3);
    const int rows = static_cast<int>(anchor_indices.size());
    auto out = make_tensor<T>({rows, channels});
    for (int r = 0; r < rows; ++r) {
        const int a = anchor_indices[static_cast<size_t>(r)];
        const int cell = a / templates, t = a % templates;
        const int i = cell / w, j = cell % w;
        if (i < 0 || i >= h)
            throw std::out_of_range("gather_cells: anchor index " + std::to_string(a) + " out of grid");
        for (int c = 0; c < channels; ++c)
            out->at2(r, c) = x.at4(0, t * channels + c, i, j);
    }
    if (tape) {
        head->ensure_grad();
        out->ensure_grad();
        auto idx = std::make_shared<std::vector<int>>(anchor_indices);
        tape->record([head, out, idx, channels, templates]() {
            const int w = head->extent(3);
            const int rows = out->extent(0);
            for (int r = 0; r < rows; ++r) {
                const int a = (*idx)[static_cast<size_t>(r)];
                const int cell = a / templates, t = a % templates;
                const int i = cell / w, j = cell % w;
                for (int c = 0; c < channels; ++c) {
                    const int64_t hi =
                        ((static_cast<int64_t>(t * channels + c)) * head->extent(2) + i) * w + j;
                    head->grad[static_cast<size_t>(hi)] +=
                        out->grad[static_cast<size_t>(static_cast<int64_t>(r) * channels + c)];
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> row_scatter(Tape* tape,
                         const std::vector<std::pair<TensorPtr<T>, std::vector<int>>>& parts,
                         int total_rows) {
    if (parts.empty()) throw std::invalid_argument("row_scatter: no parts");
    std::vector<int> trailing(parts[0].first->shape.begin() + 1, parts[0].first->shape.end());
    int64_t row_size = 1;
    for (int e : trailing) row_size *= e;
    std::vector<int> out_shape;
    out_shape.push_back(total_rows);
    out_shape.insert(out_shape.end(), trailing.begin(), trailing.end());
    auto out = make_tensor<T>(out_shape);
    std::vector<char> seen(static_cast<size_t>(total_rows), 0);
    for (const auto& [part, dest] : parts) {
        std::vector<int> pt(part->shape.begin() + 1, part->shape.end());
        if (pt != trailing)
            throw ShapeError("row_scatter: part shape " + shape_str(part->shape) + " mismatches " +
                             shape_str(parts[0].first->shape));
        if (static_cast<int>(dest.size()) != part->extent(0))
            throw ShapeError("row_scatter: destination list does not match part rows");
        for (size_t r = 0; r < dest.size(); ++r) {
            const int d = dest[r];
            if (d < 0 || d >= total_rows || seen[static_cast<size_t>(d)])
                throw std::invalid_argument("row_scatter: bad or duplicate destination row " +
                                            std::to_string(d));
            seen[static_cast<size_t>(d)] = 1;
            std::copy_n(part->values.begin() + static_cast<int64_t>(r) * row_size, row_size,
                        out->values.begin() + static_cast<int64_t>(d) * row_size);
        }
    }
    for (char s : seen)
        if (!s) throw std::invalid_argument("row_scatter: not all destination rows covered");

    if (tape) {
        for (const auto& [part, dest] : parts) part->ensure_grad();
        out->ensure_grad();
        auto parts_copy = std::make_shared<std::vector<std::pair<TensorPtr<T>, std::vector<int>>>>(parts);
        tape->record([out, parts_copy, row_size]() {
            for (const auto& [part, dest] : *parts_copy) {
                for (size_t r = 0; r < dest.size(); ++r) {
                    const T* src = out->grad.data() + static_cast<int64_t>(dest[r]) * row_size;
                    T* dst = part->grad.data() + static_cast<int64_t>(r) * row_size;
                    for (int64_t i = 0; i < row_size; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sum_scalars(Tape* tape, const std::vector<TensorPtr<T>>& terms) {
    T total = T(0);
    for (const auto& t : terms) {
        if (t->numel() != 1)
            throw ShapeError("sum_scalars: term has shape " + shape_str(t->shape));
        total += t->values[0];
    }
    auto out = make_tensor<T>({1}, {total});
    if (tape) {
        for (const auto& t : terms) t->ensure_grad();
        out->ensure_grad();
        auto terms_copy = std::make_shared<std::vector<TensorPtr<T>>>(terms);
        tape->record([out, terms_copy]() {
            for (const auto& t : *terms_copy) t->grad[0] += out->grad[0];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> reduce_wsum(Tape* tape, const TensorPtr<T>& x, const std::vector<T>& weights) {
    const int64_t n = x->numel();
    if (!weights.empty() && static_cast<int64_t>(weights.size()) != n)
        throw ShapeError("reduce_wsum: " + std::to_string(weights.size()) + " weights for " +
                         shape_str(x->shape));
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i)
        acc += x->values[static_cast<size_t>(i)] * (weights.empty() ? T(1) : weights[static_cast<size_t>(i)]);
    auto out = make_tensor<T>({1}, {acc});
    if (tape) {
        x->ensure_grad();
        out->ensure_grad();
        auto w = std::make_shared<std::vector<T>>(weights);
        tape->record([x, out, w]() {
            const int64_t n = x->numel();
            const T g = out->grad[0];
            for (int64_t i = 0; i < n; ++i)
                x->grad[static_cast<size_t>(i)] += g * (w->empty() ? T(1) : (*w)[static_cast<size_t>(i)]);
        });
    }
    return out;
}

template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, double lr, double momentum,
              double weight_decay) {
    for (Parameter<T>* p : params) {
        const size_t n = p->value.values.size();
        const T mu = static_cast<T>(momentum);
        const T wd = static_cast<T>(p->weight_decay_enabled ? weight_decay : 0.0);
        const T step = static_cast<T>(lr);
        for (size_t i = 0; i < n; ++i) {
            const T v = mu * p->momentum[i] + p->value.grad[i] + wd * p->value.values[i];
            p->momentum[i] = v;
            p->value.values[i] -= step * v;
        }
        p->value.zero_grad();
    }
}

template <typename T>
double finite_diff_check(const std::function<TensorPtr<T>(Tape*)>& make_loss, Tensor<T>& wrt,
                         double epsilon) {
    wrt.ensure_grad();
    wrt.zero_grad();
    Tape tape;
    auto loss = make_loss(&tape);
    if (loss->numel() != 1)
        throw std::invalid_argument("finite_diff_check: loss must be scalar");
    loss->ensure_grad();
    loss->grad[0] = T(1);
    tape.backward();
    std::vector<double> analytic(wrt.grad.begin(), wrt.grad.end());

    double max_rel = 0.0;
    for (size_t i = 0; i < wrt.values.size(); ++i) {
        const T orig = wrt.values[i];
        wrt.values[i] = orig + static_cast<T>(epsilon);
        const double lp = static_cast<double>(make_loss(nullptr)->values[0]);
        wrt.values[i] = orig - static_cast<T>(epsilon);
        const double lm = static_cast<double>(make_loss(nullptr)->values[0]);
        wrt.values[i] = orig;
        const double numeric = (lp - lm) / (2.0 * epsilon);
        const double a = analytic[i];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

#define ZIP_INSTANTIATE_OPS(T)                                                                      \
    template TensorPtr<T> conv2d<T>(Tape*, const TensorPtr<T>&, Parameter<T>&, Parameter<T>*, int,  \
                                    int);                                                           \
    template TensorPtr<T> deconv2d<T>(Tape*, const TensorPtr<T>&, Parameter<T>&, Parameter<T>*,     \
                                      int, int);                                                    \
    template TensorPtr<T> maxpool2d<T>(Tape*, const TensorPtr<T>&, int, int);                       \
    template TensorPtr<T> relu<T>(Tape*, const TensorPtr<T>&);                                      \
    template TensorPtr<T> batchnorm2d<T>(Tape*, const TensorPtr<T>&, Parameter<T>&, Parameter<T>&,  \
                                         BatchNormState<T>&, BNMode);                               \
    template TensorPtr<T> avgpool_global<T>(Tape*, const TensorPtr<T>&);                            \
    template TensorPtr<T> fc<T>(Tape*, const TensorPtr<T>&, Parameter<T>&, Parameter<T>*);          \
    template TensorPtr<T> add<T>(Tape*, const TensorPtr<T>&, const TensorPtr<T>&);                  \
    template TensorPtr<T> softmax_xent<T>(Tape*, const TensorPtr<T>&, const std::vector<int>&, int); \
    template TensorPtr<T> smooth_l1<T>(Tape*, const TensorPtr<T>&, const Tensor<T>&,               \
                                       const std::vector<uint8_t>&);                                \
    template TensorPtr<T> roi_pool<T>(Tape*, const TensorPtr<T>&, const std::vector<Roi>&, int,     \
                                      int, int, RoiPoolStats*);                                     \
    template TensorPtr<T> gather_cells<T>(Tape*, const TensorPtr<T>&, const std::vector<int>&, int, \
                                          int);                                                     \
    template TensorPtr<T> row_scatter<T>(                                                           \
        Tape*, const std::vector<std::pair<TensorPtr<T>, std::vector<int>>>&, int);                 \
    template TensorPtr<T> sum_scalars<T>(Tape*, const std::vector<TensorPtr<T>>&);                  \
    template TensorPtr<T> reduce_wsum<T>(Tape*, const TensorPtr<T>&, const std::vector<T>&);        \
    template void sgd_step<T>(const std::vector<Parameter<T>*>&, double, double, double);           \
    template double finite_diff_check<T>(const std::function<TensorPtr<T>(Tape*)>&, Tensor<T>&,     \
                                         double);

ZIP_INSTANTIATE_OPS(float)
ZIP_INSTANTIATE_OPS(double)

#undef ZIP_INSTANTIATE_OPS

}  // namespace zip

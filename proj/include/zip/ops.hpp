#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "zip/geometry.hpp"
#include "zip/tensor.hpp"

namespace zip {

// Every op is forward + an explicit backward closure pushed onto the tape.
// Passing tape == nullptr runs forward only (inference). Gradients accumulate,
// so callers zero parameter grads between steps (sgd_step does).

template <typename T>
TensorPtr<T> conv2d(Tape* tape, const TensorPtr<T>& input, Parameter<T>& weight,
                    Parameter<T>* bias, int stride, int padding);

// Transposed convolution; weight layout (C_in, C_out, kh, kw). For matching
// configs it is the adjoint of conv2d under the inner product.
template <typename T>
TensorPtr<T> deconv2d(Tape* tape, const TensorPtr<T>& input, Parameter<T>& weight,
                      Parameter<T>* bias, int stride, int padding);

template <typename T>
TensorPtr<T> maxpool2d(Tape* tape, const TensorPtr<T>& input, int kernel, int stride);

template <typename T>
TensorPtr<T> relu(Tape* tape, const TensorPtr<T>& input);

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    bool initialized = false;

    explicit BatchNormState(int channels = 0)
        : running_mean(static_cast<size_t>(channels), T(0)),
          running_var(static_cast<size_t>(channels), T(1)) {}
};

enum class BNMode { train, eval };

// Train mode normalizes by batch statistics (eps 1e-5, biased variance) and
// updates running stats with retention 0.9; eval mode uses running stats and
// throws if they were never initialized.
template <typename T>
TensorPtr<T> batchnorm2d(Tape* tape, const TensorPtr<T>& input, Parameter<T>& gamma,
                         Parameter<T>& beta, BatchNormState<T>& state, BNMode mode);

// (N,C,H,W) -> (N,C) spatial mean.
template <typename T>
TensorPtr<T> avgpool_global(Tape* tape, const TensorPtr<T>& input);

// input (N,D) [higher ranks flattened past dim 0], weight (O,D), bias (O).
template <typename T>
TensorPtr<T> fc(Tape* tape, const TensorPtr<T>& input, Parameter<T>& weight, Parameter<T>* bias);

template <typename T>
TensorPtr<T> add(Tape* tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

// Mean negative log-softmax over rows whose label != ignore_label.
// Throws if every row is ignored.
template <typename T>
TensorPtr<T> softmax_xent(Tape* tape, const TensorPtr<T>& logits, const std::vector<int>& labels,
                          int ignore_label = -1);

// Huber loss summed over masked rows, divided by the masked-row count.
// Zero masked rows yields loss 0 with zero gradient.
template <typename T>
TensorPtr<T> smooth_l1(Tape* tape, const TensorPtr<T>& pred, const Tensor<T>& target,
                       const std::vector<uint8_t>& row_mask);

struct Roi {
    int batch = 0;
    Box box;  // image coordinates; stride maps to feature coordinates
};

struct RoiPoolStats {
    int64_t degenerate_rois = 0;  // fully outside the map even after clamping
};

// Max pool each RoI into a (grid_h, grid_w) bin grid; bins quantized by
// floor/ceil of the proportional division; empty bins take the nearest cell.
template <typename T>
TensorPtr<T> roi_pool(Tape* tape, const TensorPtr<T>& featmap, const std::vector<Roi>& rois,
                      int grid_h, int grid_w, int stride, RoiPoolStats* stats = nullptr);

// Rows (n, channels) extracted from a (1, templates*channels, H, W) head map;
// anchor_indices use the grid layout (cell*templates + t), cell = i*W + j.
template <typename T>
TensorPtr<T> gather_cells(Tape* tape, const TensorPtr<T>& head, const std::vector<int>& anchor_indices,
                          int channels, int templates);

// Reassemble per-level row blocks into one batch; each part carries the
// destination row index for each of its rows. Rows must cover 0..total-1.
template <typename T>
TensorPtr<T> row_scatter(Tape* tape,
                         const std::vector<std::pair<TensorPtr<T>, std::vector<int>>>& parts,
                         int total_rows);

// Sum of scalar (numel 1) tensors; empty input yields scalar 0.
template <typename T>
TensorPtr<T> sum_scalars(Tape* tape, const std::vector<TensorPtr<T>>& terms);

// Scalar dot(weights, flat(x)); empty weights means all ones. Mostly a test
// hook for collapsing op outputs into checkable scalars.
template <typename T>
TensorPtr<T> reduce_wsum(Tape* tape, const TensorPtr<T>& x, const std::vector<T>& weights = {});

// v <- mu*v + g + lambda*w ; w <- w - lr*v ; grads zeroed afterwards.
// weight_decay applies only to parameters with the decay flag set.
template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, double lr, double momentum,
              double weight_decay);

// Central-difference check of d(loss)/d(wrt): make_loss rebuilds the scalar
// loss on a fresh tape from the current contents of wrt. Returns the max over
// coordinates of |a-n| / max(1e-8, |a|+|n|).
template <typename T>
double finite_diff_check(const std::function<TensorPtr<T>(Tape*)>& make_loss, Tensor<T>& wrt,
                         double epsilon = 1e-5);

}  // namespace zip

#pragma once

#include <string>
#include <vector>

#include "zip/anchors.hpp"
#include "zip/checkpoint.hpp"
#include "zip/data.hpp"
#include "zip/ops.hpp"
#include "zip/rng.hpp"
#include "zip/sampling.hpp"
#include "zip/tensor.hpp"

namespace zip {

// Structural knobs of the network. Strides are fixed by the stage layout
// (8/16/32); channel widths, head/tower widths and anchor clusters vary.
struct NetConfig {
    std::vector<int> channels = {32, 64, 128};  // stage widths -> F1,F2,F3
    int head_channels = 64;
    int tower_channels = 64;
    int residual_blocks = 3;
    int roi_grid_h = 3, roi_grid_w = 3;
    std::vector<int> strides = {8, 16, 32};
    std::vector<std::vector<AnchorTemplate>> clusters;  // A^1..A^3
    bool use_zoomin = true;  // false forces the zoom-in merge branch to zero
    int num_classes = 3;     // negative / positive / gray
};

template <typename T>
struct ConvBN {
    Parameter<T> w;
    Parameter<T> gamma, beta;
    BatchNormState<T> bn;
};

template <typename T>
struct ConvBias {
    Parameter<T> w, b;
};

template <typename T>
struct ResBlock {
    ConvBN<T> a, b;
};

// F: zoom-out taps; H: zoom-in taps; G: merged maps (G[2] aliases F[2]);
// A: per-level 1x1-adapted maps feeding the shared RoI tower.
template <typename T>
struct Pyramid {
    TensorPtr<T> image;
    std::vector<TensorPtr<T>> F, H, G, A;
    int image_w = 0, image_h = 0;  // unpadded extents of the network input
};

template <typename T>
struct HeadOut {
    std::vector<TensorPtr<T>> cls;  // (1, |A^m|*classes, fh, fw)
    std::vector<TensorPtr<T>> reg;  // (1, |A^m|*4, fh, fw)
};

struct ScoredBox {
    Box box;
    double score = 0;  // positive-class probability
    int level = 1;
    int anchor_index = -1;
};

template <typename T>
struct RoiStepOut {
    TensorPtr<T> logits;   // (N, classes)
    TensorPtr<T> offsets;  // (N, 4)
    std::vector<Box> refined;
    std::vector<int> levels;  // assigned pooling level per box
};

struct StepStats {
    double total = 0;
    std::vector<double> first_branch;  // per level
    std::vector<double> roi_stage;     // per recursion stage (summed over levels)
    int positives = 0;
    int roi_boxes = 0;
};

struct TrainSettings {
    int q = 2;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 300;
    int per_class_cap = 100;
    int roi_batch = 36;
    int max_train_side = 320;
    double inner_nms = 0.7;
    bool dynamic_scale = true;
    bool gray_class = true;
    bool use_second_branch = true;
    bool update_weights = true;  // false leaves gradients in place (audits)
};

template <typename T>
class ZipNet {
public:
    ZipNet(const NetConfig& cfg, Rng& rng);
    // the registry points into this object
    ZipNet(const ZipNet&) = delete;
    ZipNet& operator=(const ZipNet&) = delete;

    const NetConfig& config() const { return cfg_; }

    // Zoom-out stages (stride 8/16/32), then the zoom-in deconvolution path
    // and the per-level merge; G3 is F3 untouched. Input extents must be
    // multiples of 32 and at least 32.
    Pyramid<T> forward_pyramid(Tape* tape, const TensorPtr<T>& image, BNMode mode,
                               int image_w = 0, int image_h = 0);

    // Mirrored upsampling path: H2 from deconv2x(F3), H1 from deconv2x(H2),
    // each followed by a conv block. Extents double at every step.
    std::pair<TensorPtr<T>, TensorPtr<T>> zoomin_forward(Tape* tape, const TensorPtr<T>& f3,
                                                         BNMode mode);

    HeadOut<T> forward_heads(Tape* tape, const Pyramid<T>& pyr);

    // One recursion stage: pool every box from its assigned level, run the
    // shared residual tower, emit class probabilities and offsets, and step
    // the boxes by the decoded offsets (boxes enter and leave as constants).
    // stats defaults to the net's own counter; concurrent readers pass their
    // own so eval-mode forwards stay free of shared writes.
    RoiStepOut<T> roi_branch_step(Tape* tape, const Pyramid<T>& pyr, const std::vector<Box>& boxes,
                                  BNMode mode, RoiPoolStats* stats = nullptr);

    std::vector<std::pair<std::string, Parameter<T>*>>& parameters() { return params_; }

    std::vector<CheckpointEntry> to_entries(bool include_momentum = true) const;
    void from_entries(const std::vector<CheckpointEntry>& entries);

    RoiPoolStats& roi_stats() { return roi_stats_; }

private:
    TensorPtr<T> conv_bn_relu(Tape* tape, const TensorPtr<T>& x, ConvBN<T>& layer, int stride,
                              BNMode mode);

    NetConfig cfg_;
    // zoom-out
    std::vector<ConvBN<T>> stem_;    // three stride-2 blocks -> F1
    std::vector<ConvBN<T>> stage2_;  // pool + blocks -> F2
    std::vector<ConvBN<T>> stage3_;  // pool + blocks -> F3
    // zoom-in
    Parameter<T> up2_w_, up1_w_;     // deconv weights (no bias)
    ConvBN<T> up2_block_, up1_block_;
    // merge (eq-style two-filter sum, one bias, relu)
    std::vector<ConvBias<T>> merge_f_;  // holds the bias
    std::vector<Parameter<T>> merge_h_w_;
    // heads
    std::vector<ConvBias<T>> head_shared_, head_cls_, head_reg_;
    // roi tower
    std::vector<ConvBias<T>> roi_adapter_;
    std::vector<ResBlock<T>> tower_;
    Parameter<T> fc_cls_w_, fc_cls_b_, fc_reg_w_, fc_reg_b_;

    std::vector<std::pair<std::string, Parameter<T>*>> params_;
    std::vector<std::pair<std::string, BatchNormState<T>*>> bn_states_;
    RoiPoolStats roi_stats_;
};

// Decode, score and filter every anchor of every level from raw head maps:
// per-level NMS at inner_nms, concatenate, keep top_n by score. Boxes are
// clamped to (img_w, img_h).
template <typename T>
std::vector<ScoredBox> first_branch_boxes(const NetConfig& cfg, const HeadOut<T>& heads, int img_w,
                                          int img_h, double inner_nms, int top_n);

// Q recursion stages with per-stage relabeling of the current boxes against
// the ground truth; returns the per-stage loss terms (empty when tape is
// null or no stage has labeled rows). trajectory, when given, receives the
// box list after every stage.
template <typename T>
std::vector<TensorPtr<T>> train_recursion(ZipNet<T>& net, Tape* tape, const Pyramid<T>& pyr,
                                          std::vector<Box> boxes, int q,
                                          const std::vector<Box>& gts, bool gray_class, BNMode mode,
                                          std::vector<std::vector<Box>>* trajectory = nullptr,
                                          std::vector<double>* stage_losses = nullptr);

// Full training step: dynamic rescale, pyramid + heads, per-level sampling
// and first-branch loss, RoI recursion losses, backward, SGD update.
template <typename T>
StepStats train_step(ZipNet<T>& net, const Image& image, const std::vector<Box>& gts,
                     const TrainSettings& settings, double lr, Rng& rng);

}  // namespace zip

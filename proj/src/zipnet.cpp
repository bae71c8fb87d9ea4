#include "zip/zipnet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace zip {

namespace {

template <typename T>
void he_init(Parameter<T>& p, int fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / fan_in);
    for (auto& v : p.value.values) v = static_cast<T>(rng.normal(0.0, std));
}

template <typename T>
void small_init(Parameter<T>& p, Rng& rng, double std = 0.01) {
    for (auto& v : p.value.values) v = static_cast<T>(rng.normal(0.0, std));
}

template <typename T>
ConvBN<T> make_conv_bn(int cin, int cout, int k, Rng& rng) {
    ConvBN<T> l;
    l.w = Parameter<T>({cout, cin, k, k});
    he_init(l.w, cin * k * k, rng);
    l.gamma = Parameter<T>({cout}, false);
    for (auto& v : l.gamma.value.values) v = T(1);
    l.beta = Parameter<T>({cout}, false);
    l.bn = BatchNormState<T>(cout);
    return l;
}

template <typename T>
ConvBias<T> make_conv_bias(int cin, int cout, int k, Rng& rng, bool he) {
    ConvBias<T> l;
    l.w = Parameter<T>({cout, cin, k, k});
    if (he)
        he_init(l.w, cin * k * k, rng);
    else
        small_init(l.w, rng);
    l.b = Parameter<T>({cout}, false);
    return l;
}

// stable softmax probability of class 1 over `classes` raw logits
template <typename T>
double positive_prob(const T* logits, int classes) {
    double mx = static_cast<double>(logits[0]);
    for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(logits[c]));
    double se = 0.0;
    for (int c = 0; c < classes; ++c) se += std::exp(static_cast<double>(logits[c]) - mx);
    return std::exp(static_cast<double>(logits[1]) - mx) / se;
}

}  // namespace

template <typename T>
ZipNet<T>::ZipNet(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.channels.size() != 3 || cfg_.strides != std::vector<int>{8, 16, 32})
        throw std::invalid_argument("ZipNet: expected 3 stages with strides 8/16/32");
    if (cfg_.clusters.size() != 3)
        throw std::invalid_argument("ZipNet: expected 3 anchor clusters");
    for (const auto& c : cfg_.clusters)
        if (c.empty()) throw std::invalid_argument("ZipNet: every anchor cluster needs templates");
    const int c1 = cfg_.channels[0], c2 = cfg_.channels[1], c3 = cfg_.channels[2];
    const int hw = cfg_.head_channels, tw = cfg_.tower_channels;

    stem_.push_back(make_conv_bn<T>(3, c1, 3, rng));
    stem_.push_back(make_conv_bn<T>(c1, c1, 3, rng));
    stem_.push_back(make_conv_bn<T>(c1, c1, 3, rng));
    stage2_.push_back(make_conv_bn<T>(c1, c2, 3, rng));
    stage2_.push_back(make_conv_bn<T>(c2, c2, 3, rng));
    stage3_.push_back(make_conv_bn<T>(c2, c3, 3, rng));
    stage3_.push_back(make_conv_bn<T>(c3, c3, 3, rng));

    // the zoom-in maps keep the width of the stage they come from (H2 from
    // F3, H1 from H2), so the deconvolved semantics are not squeezed through
    // the thin early-stage width before the merge
    const int h2 = c3, h1 = c2;
    up2_w_ = Parameter<T>({c3, h2, 2, 2});
    he_init(up2_w_, c3 * 4, rng);
    up2_block_ = make_conv_bn<T>(h2, h2, 3, rng);
    up1_w_ = Parameter<T>({h2, h1, 2, 2});
    he_init(up1_w_, h2 * 4, rng);
    up1_block_ = make_conv_bn<T>(h1, h1, 3, rng);

    const int hch[2] = {h1, h2};
    for (int m = 0; m < 2; ++m) {
        const int cm = cfg_.channels[static_cast<size_t>(m)];
        merge_f_.push_back(make_conv_bias<T>(cm, cm, 3, rng, true));
        Parameter<T> wh({cm, hch[m], 3, 3});
        he_init(wh, hch[m] * 9, rng);
        merge_h_w_.push_back(std::move(wh));
    }

    const int gch[3] = {c1, c2, c3};
    for (int m = 0; m < 3; ++m) {
        const int t_m = static_cast<int>(cfg_.clusters[static_cast<size_t>(m)].size());
        head_shared_.push_back(make_conv_bias<T>(gch[m], hw, 3, rng, true));
        head_cls_.push_back(make_conv_bias<T>(hw, cfg_.num_classes * t_m, 1, rng, false));
        head_reg_.push_back(make_conv_bias<T>(hw, 4 * t_m, 1, rng, false));
        roi_adapter_.push_back(make_conv_bias<T>(gch[m], tw, 1, rng, true));
    }

    for (int i = 0; i < cfg_.residual_blocks; ++i)
        tower_.push_back(ResBlock<T>{make_conv_bn<T>(tw, tw, 3, rng), make_conv_bn<T>(tw, tw, 3, rng)});

    fc_cls_w_ = Parameter<T>({cfg_.num_classes, tw});
    small_init(fc_cls_w_, rng);
    fc_cls_b_ = Parameter<T>({cfg_.num_classes}, false);
    fc_reg_w_ = Parameter<T>({4, tw});
    small_init(fc_reg_w_, rng);
    fc_reg_b_ = Parameter<T>({4}, false);

    // registry: construction above is final, so the addresses are stable
    auto reg_bn = [this](const std::string& name, ConvBN<T>& l) {
        params_.push_back({name + ".w", &l.w});
        params_.push_back({name + ".gamma", &l.gamma});
        params_.push_back({name + ".beta", &l.beta});
        bn_states_.push_back({name, &l.bn});
    };
    auto reg_cb = [this](const std::string& name, ConvBias<T>& l) {
        params_.push_back({name + ".w", &l.w});
        params_.push_back({name + ".b", &l.b});
    };
    for (size_t i = 0; i < stem_.size(); ++i) reg_bn("backbone.stem" + std::to_string(i + 1), stem_[i]);
    for (size_t i = 0; i < stage2_.size(); ++i)
        reg_bn("backbone.stage2." + std::to_string(i + 1), stage2_[i]);
    for (size_t i = 0; i < stage3_.size(); ++i)
        reg_bn("backbone.stage3." + std::to_string(i + 1), stage3_[i]);
    params_.push_back({"zoomin.up2.w", &up2_w_});
    reg_bn("zoomin.up2.block", up2_block_);
    params_.push_back({"zoomin.up1.w", &up1_w_});
    reg_bn("zoomin.up1.block", up1_block_);
    for (int m = 0; m < 2; ++m) {
        reg_cb("merge" + std::to_string(m + 1) + ".f", merge_f_[static_cast<size_t>(m)]);
        params_.push_back({"merge" + std::to_string(m + 1) + ".h.w", &merge_h_w_[static_cast<size_t>(m)]});
    }
    for (int m = 0; m < 3; ++m) {
        const std::string p = "head" + std::to_string(m + 1);
        reg_cb(p + ".shared", head_shared_[static_cast<size_t>(m)]);
        reg_cb(p + ".cls", head_cls_[static_cast<size_t>(m)]);
        reg_cb(p + ".reg", head_reg_[static_cast<size_t>(m)]);
        reg_cb("roi.adapter" + std::to_string(m + 1), roi_adapter_[static_cast<size_t>(m)]);
    }
    for (size_t i = 0; i < tower_.size(); ++i) {
        reg_bn("roi.block" + std::to_string(i + 1) + ".a", tower_[i].a);
        reg_bn("roi.block" + std::to_string(i + 1) + ".b", tower_[i].b);
    }
    params_.push_back({"roi.fc_cls.w", &fc_cls_w_});
    params_.push_back({"roi.fc_cls.b", &fc_cls_b_});
    params_.push_back({"roi.fc_reg.w", &fc_reg_w_});
    params_.push_back({"roi.fc_reg.b", &fc_reg_b_});
}

template <typename T>
TensorPtr<T> ZipNet<T>::conv_bn_relu(Tape* tape, const TensorPtr<T>& x, ConvBN<T>& layer,
                                     int stride, BNMode mode) {
    auto y = conv2d<T>(tape, x, layer.w, nullptr, stride, 1);
    y = batchnorm2d<T>(tape, y, layer.gamma, layer.beta, layer.bn, mode);
    return relu<T>(tape, y);
}

template <typename T>
Pyramid<T> ZipNet<T>::forward_pyramid(Tape* tape, const TensorPtr<T>& image, BNMode mode,
                                      int image_w, int image_h) {
    if (image->rank() != 4 || image->extent(1) != 3)
        throw ShapeError("forward_pyramid: expected (1,3,H,W) image, got " + shape_str(image->shape));
    const int h = image->extent(2), w = image->extent(3);
    if (h < 32 || w < 32)
        throw ShapeError("forward_pyramid: image " + shape_str(image->shape) + " smaller than 32x32");
    if (h % 32 != 0 || w % 32 != 0)
        throw ShapeError("forward_pyramid: extents must be multiples of 32, got " +
                         shape_str(image->shape));

    Pyramid<T> pyr;
    pyr.image = image;
    pyr.image_w = image_w > 0 ? image_w : w;
    pyr.image_h = image_h > 0 ? image_h : h;

    auto x = conv_bn_relu(tape, image, stem_[0], 2, mode);
    x = conv_bn_relu(tape, x, stem_[1], 2, mode);
    auto f1 = conv_bn_relu(tape, x, stem_[2], 2, mode);
    auto p2 = maxpool2d<T>(tape, f1, 2, 2);
    auto f2 = conv_bn_relu(tape, p2, stage2_[0], 1, mode);
    f2 = conv_bn_relu(tape, f2, stage2_[1], 1, mode);
    auto p3 = maxpool2d<T>(tape, f2, 2, 2);
    auto f3 = conv_bn_relu(tape, p3, stage3_[0], 1, mode);
    f3 = conv_bn_relu(tape, f3, stage3_[1], 1, mode);
    pyr.F = {f1, f2, f3};

    if (cfg_.use_zoomin) {
        auto [h1, h2] = zoomin_forward(tape, f3, mode);
        pyr.H = {h1, h2};
        auto g1 = relu<T>(tape, add<T>(tape, conv2d<T>(tape, f1, merge_f_[0].w, &merge_f_[0].b, 1, 1),
                                       conv2d<T>(tape, h1, merge_h_w_[0], nullptr, 1, 1)));
        auto g2 = relu<T>(tape, add<T>(tape, conv2d<T>(tape, f2, merge_f_[1].w, &merge_f_[1].b, 1, 1),
                                       conv2d<T>(tape, h2, merge_h_w_[1], nullptr, 1, 1)));
        pyr.G = {g1, g2, f3};
    } else {
        // zoom-out-only ablation: the H branch is identically zero
        auto g1 = relu<T>(tape, conv2d<T>(tape, f1, merge_f_[0].w, &merge_f_[0].b, 1, 1));
        auto g2 = relu<T>(tape, conv2d<T>(tape, f2, merge_f_[1].w, &merge_f_[1].b, 1, 1));
        pyr.G = {g1, g2, f3};
    }

    pyr.A.resize(3);
    for (int m = 0; m < 3; ++m)
        pyr.A[static_cast<size_t>(m)] =
            relu<T>(tape, conv2d<T>(tape, pyr.G[static_cast<size_t>(m)],
                                    roi_adapter_[static_cast<size_t>(m)].w,
                                    &roi_adapter_[static_cast<size_t>(m)].b, 1, 0));
    return pyr;
}

template <typename T>
std::pair<TensorPtr<T>, TensorPtr<T>> ZipNet<T>::zoomin_forward(Tape* tape, const TensorPtr<T>& f3,
                                                                BNMode mode) {
    auto d2 = deconv2d<T>(tape, f3, up2_w_, nullptr, 2, 0);
    auto h2 = conv_bn_relu(tape, d2, up2_block_, 1, mode);
    auto d1 = deconv2d<T>(tape, h2, up1_w_, nullptr, 2, 0);
    auto h1 = conv_bn_relu(tape, d1, up1_block_, 1, mode);
    return {h1, h2};
}

template <typename T>
HeadOut<T> ZipNet<T>::forward_heads(Tape* tape, const Pyramid<T>& pyr) {
    HeadOut<T> out;
    for (int m = 0; m < 3; ++m) {
        auto s = relu<T>(tape, conv2d<T>(tape, pyr.G[static_cast<size_t>(m)],
                                         head_shared_[static_cast<size_t>(m)].w,
                                         &head_shared_[static_cast<size_t>(m)].b, 1, 1));
        out.cls.push_back(conv2d<T>(tape, s, head_cls_[static_cast<size_t>(m)].w,
                                    &head_cls_[static_cast<size_t>(m)].b, 1, 0));
        out.reg.push_back(conv2d<T>(tape, s, head_reg_[static_cast<size_t>(m)].w,
                                    &head_reg_[static_cast<size_t>(m)].b, 1, 0));
    }
    return out;
}

template <typename T>
RoiStepOut<T> ZipNet<T>::roi_branch_step(Tape* tape, const Pyramid<T>& pyr,
                                         const std::vector<Box>& boxes, BNMode mode,
                                         RoiPoolStats* stats) {
    if (!stats) stats = &roi_stats_;
    RoiStepOut<T> out;
    const int n = static_cast<int>(boxes.size());
    if (n == 0) return out;
    out.levels.resize(boxes.size());
    std::vector<std::vector<int>> by_level(3);
    for (int i = 0; i < n; ++i) {
        const int lv = level_for_scale(std::sqrt(boxes[static_cast<size_t>(i)].area()));
        out.levels[static_cast<size_t>(i)] = lv;
        by_level[static_cast<size_t>(lv - 1)].push_back(i);
    }
    std::vector<std::pair<TensorPtr<T>, std::vector<int>>> parts;
    for (int m = 0; m < 3; ++m) {
        const auto& idx = by_level[static_cast<size_t>(m)];
        if (idx.empty()) continue;
        std::vector<Roi> rois;
        rois.reserve(idx.size());
        for (int i : idx) rois.push_back(Roi{0, boxes[static_cast<size_t>(i)]});
        auto pooled = roi_pool<T>(tape, pyr.A[static_cast<size_t>(m)], rois, cfg_.roi_grid_h,
                                  cfg_.roi_grid_w, cfg_.strides[static_cast<size_t>(m)], stats);
        parts.push_back({pooled, idx});
    }
    auto x = row_scatter<T>(tape, parts, n);
    for (auto& block : tower_) {
        auto y = conv_bn_relu(tape, x, block.a, 1, mode);
        y = conv2d<T>(tape, y, block.b.w, nullptr, 1, 1);
        y = batchnorm2d<T>(tape, y, block.b.gamma, block.b.beta, block.b.bn, mode);
        x = relu<T>(tape, add<T>(tape, y, x));
    }
    auto pooled = avgpool_global<T>(tape, x);
    out.logits = fc<T>(tape, pooled, fc_cls_w_, &fc_cls_b_);
    out.offsets = fc<T>(tape, pooled, fc_reg_w_, &fc_reg_b_);

    out.refined.reserve(boxes.size());
    for (int i = 0; i < n; ++i) {
        Offset t{static_cast<double>(out.offsets->at2(i, 0)), static_cast<double>(out.offsets->at2(i, 1)),
                 static_cast<double>(out.offsets->at2(i, 2)), static_cast<double>(out.offsets->at2(i, 3))};
        out.refined.push_back(clamp_box(decode_offset(t, boxes[static_cast<size_t>(i)]), pyr.image_w,
                                        pyr.image_h));
    }
    return out;
}

template <typename T>
std::vector<CheckpointEntry> ZipNet<T>::to_entries(bool include_momentum) const {
    std::vector<CheckpointEntry> entries;
    auto push = [&entries](const std::string& name, const std::vector<int>& shape, const auto& vals) {
        CheckpointEntry e;
        e.name = name;
        for (int ext : shape) e.extents.push_back(static_cast<uint32_t>(ext));
        e.values.assign(vals.begin(), vals.end());
        entries.push_back(std::move(e));
    };
    for (const auto& [name, p] : params_) {
        push(name, p->value.shape, p->value.values);
        if (include_momentum) push(name + ".momentum", p->value.shape, p->momentum);
    }
    for (const auto& [name, st] : bn_states_) {
        const std::vector<int> shape = {static_cast<int>(st->running_mean.size())};
        push(name + ".running_mean", shape, st->running_mean);
        push(name + ".running_var", shape, st->running_var);
        push(name + ".bn_initialized", {1}, std::vector<double>{st->initialized ? 1.0 : 0.0});
    }
    return entries;
}

template <typename T>
void ZipNet<T>::from_entries(const std::vector<CheckpointEntry>& entries) {
    auto find = [&entries](const std::string& name) -> const CheckpointEntry* {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    };
    auto fill = [](auto& dst, const CheckpointEntry& e, const std::string& what) {
        if (dst.size() != e.values.size())
            throw std::runtime_error("checkpoint: " + what + " holds " +
                                     std::to_string(e.values.size()) + " values, expected " +
                                     std::to_string(dst.size()));
        for (size_t i = 0; i < dst.size(); ++i)
            dst[i] = static_cast<typename std::decay_t<decltype(dst)>::value_type>(e.values[i]);
    };
    for (auto& [name, p] : params_) {
        const CheckpointEntry* e = find(name);
        if (!e) throw std::runtime_error("checkpoint: missing parameter " + name);
        fill(p->value.values, *e, name);
        if (const CheckpointEntry* m = find(name + ".momentum"))
            fill(p->momentum, *m, name + ".momentum");
        else
            std::fill(p->momentum.begin(), p->momentum.end(), T(0));
        p->value.zero_grad();
    }
    for (auto& [name, st] : bn_states_) {
        const CheckpointEntry* rm = find(name + ".running_mean");
        const CheckpointEntry* rv = find(name + ".running_var");
        const CheckpointEntry* fl = find(name + ".bn_initialized");
        if (!rm || !rv || !fl)
            throw std::runtime_error("checkpoint: missing batchnorm state for " + name);
        fill(st->running_mean, *rm, name + ".running_mean");
        fill(st->running_var, *rv, name + ".running_var");
        st->initialized = fl->values.at(0) != 0.0;
    }
}

template <typename T>
std::vector<ScoredBox> first_branch_boxes(const NetConfig& cfg, const HeadOut<T>& heads, int img_w,
                                          int img_h, double inner_nms, int top_n) {
    std::vector<ScoredBox> merged;
    for (int m = 0; m < 3; ++m) {
        const auto& cls = *heads.cls[static_cast<size_t>(m)];
        const auto& reg = *heads.reg[static_cast<size_t>(m)];
        const int fh = cls.extent(2), fw = cls.extent(3);
        const auto& templates = cfg.clusters[static_cast<size_t>(m)];
        const int t_count = static_cast<int>(templates.size());
        const int stride = cfg.strides[static_cast<size_t>(m)];
        const int classes = cfg.num_classes;

        std::vector<Box> boxes;
        std::vector<double> scores;
        boxes.reserve(static_cast<size_t>(fh) * fw * t_count);
        std::vector<T> logit_buf(static_cast<size_t>(classes));
        for (int i = 0; i < fh; ++i) {
            for (int j = 0; j < fw; ++j) {
                const double cy = (i + 0.5) * stride, cx = (j + 0.5) * stride;
                for (int t = 0; t < t_count; ++t) {
                    for (int c = 0; c < classes; ++c)
                        logit_buf[static_cast<size_t>(c)] = cls.at4(0, t * classes + c, i, j);
                    const double p1 = positive_prob(logit_buf.data(), classes);
                    const double hw = 0.5 * templates[static_cast<size_t>(t)].width();
                    const double hh = 0.5 * templates[static_cast<size_t>(t)].height();
                    const Box anchor{cx - hw, cy - hh, cx + hw, cy + hh};
                    const Offset off{static_cast<double>(reg.at4(0, t * 4 + 0, i, j)),
                                     static_cast<double>(reg.at4(0, t * 4 + 1, i, j)),
                                     static_cast<double>(reg.at4(0, t * 4 + 2, i, j)),
                                     static_cast<double>(reg.at4(0, t * 4 + 3, i, j))};
                    boxes.push_back(clamp_box(decode_offset(off, anchor), img_w, img_h));
                    scores.push_back(p1);
                }
            }
        }
        const auto kept = nms(boxes, scores, inner_nms, top_n);
        for (int k : kept) {
            ScoredBox sb;
            sb.box = boxes[static_cast<size_t>(k)];
            sb.score = scores[static_cast<size_t>(k)];
            sb.level = m + 1;
            sb.anchor_index = k;
            merged.push_back(sb);
        }
    }
    std::stable_sort(merged.begin(), merged.end(), [](const ScoredBox& a, const ScoredBox& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.level != b.level) return a.level < b.level;
        return a.anchor_index < b.anchor_index;
    });
    if (top_n >= 0 && static_cast<int>(merged.size()) > top_n) merged.resize(static_cast<size_t>(top_n));
    return merged;
}

template <typename T>
std::vector<TensorPtr<T>> train_recursion(ZipNet<T>& net, Tape* tape, const Pyramid<T>& pyr,
                                          std::vector<Box> boxes, int q,
                                          const std::vector<Box>& gts, bool gray_class, BNMode mode,
                                          std::vector<std::vector<Box>>* trajectory,
                                          std::vector<double>* stage_losses) {
    std::vector<TensorPtr<T>> terms;
    if (boxes.empty()) return terms;
    for (int stage = 0; stage < q; ++stage) {
        const int n = static_cast<int>(boxes.size());
        std::vector<int> labels(boxes.size(), -1);
        Tensor<T> targets({n, 4});
        std::vector<uint8_t> pos_mask(boxes.size(), 0);
        if (tape) {
            for (const auto& la : label_boxes(boxes, gts)) {
                if (la.label == kGray && !gray_class) continue;
                labels[static_cast<size_t>(la.anchor_index)] = la.label;
                if (la.label == kPositive) {
                    pos_mask[static_cast<size_t>(la.anchor_index)] = 1;
                    targets.at2(la.anchor_index, 0) = static_cast<T>(la.target.tx);
                    targets.at2(la.anchor_index, 1) = static_cast<T>(la.target.ty);
                    targets.at2(la.anchor_index, 2) = static_cast<T>(la.target.tw);
                    targets.at2(la.anchor_index, 3) = static_cast<T>(la.target.th);
                }
            }
        }

        auto step = net.roi_branch_step(tape, pyr, boxes, mode);
        double stage_value = 0.0;
        if (tape) {
            // the loss normalizes per level (the ignore mechanism restricts
            // each term to that level's rows)
            for (int m = 1; m <= 3; ++m) {
                std::vector<int> level_labels(boxes.size(), -1);
                std::vector<uint8_t> level_mask(boxes.size(), 0);
                int cls_rows = 0, reg_rows = 0;
                for (int i = 0; i < n; ++i) {
                    if (step.levels[static_cast<size_t>(i)] != m) continue;
                    level_labels[static_cast<size_t>(i)] = labels[static_cast<size_t>(i)];
                    if (labels[static_cast<size_t>(i)] >= 0) ++cls_rows;
                    if (pos_mask[static_cast<size_t>(i)]) {
                        level_mask[static_cast<size_t>(i)] = 1;
                        ++reg_rows;
                    }
                }
                if (cls_rows > 0) {
                    auto cls_term = softmax_xent<T>(tape, step.logits, level_labels, -1);
                    stage_value += static_cast<double>(cls_term->values[0]);
                    terms.push_back(cls_term);
                }
                if (reg_rows > 0) {
                    auto reg_term = smooth_l1<T>(tape, step.offsets, targets, level_mask);
                    stage_value += static_cast<double>(reg_term->values[0]);
                    terms.push_back(reg_term);
                }
            }
        }
        if (stage_losses) stage_losses->push_back(stage_value);
        boxes = step.refined;
        if (trajectory) trajectory->push_back(boxes);
    }
    return terms;
}

template <typename T>
StepStats train_step(ZipNet<T>& net, const Image& image, const std::vector<Box>& gts,
                     const TrainSettings& settings, double lr, Rng& rng) {
    const NetConfig& cfg = net.config();
    const int w0 = image.width, h0 = image.height;
    double factor;
    if (settings.dynamic_scale) {
        std::vector<double> scales;
        for (const auto& cluster : cfg.clusters)
            for (const auto& t : cluster) scales.push_back(t.scale);
        factor = choose_train_scale(gts, w0, h0, scales, rng, settings.max_train_side);
    } else {
        const double longer = static_cast<double>(std::max(w0, h0));
        factor = std::clamp(1.0, 64.0 / longer, settings.max_train_side / longer);
    }
    const int new_w = std::max(32, static_cast<int>(std::lround(w0 * factor)));
    const int new_h = std::max(32, static_cast<int>(std::lround(h0 * factor)));
    const double sx = static_cast<double>(new_w) / w0, sy = static_cast<double>(new_h) / h0;
    Image resized = (new_w == w0 && new_h == h0) ? image : resize_image(image, new_w, new_h);
    std::vector<Box> gts_s;
    gts_s.reserve(gts.size());
    for (const auto& g : gts) gts_s.push_back(Box{g.x1 * sx, g.y1 * sy, g.x2 * sx, g.y2 * sy});
    Image padded = pad_to_multiple(resized, 32);

    Tape tape;
    auto x = to_tensor<T>(padded);
    auto pyr = net.forward_pyramid(&tape, x, BNMode::train, new_w, new_h);
    auto heads = net.forward_heads(&tape, pyr);

    StepStats stats;
    std::vector<TensorPtr<T>> terms;
    for (int m = 0; m < 3; ++m) {
        const auto& cls_map = heads.cls[static_cast<size_t>(m)];
        const int t_m = static_cast<int>(cfg.clusters[static_cast<size_t>(m)].size());
        AnchorGrid grid = generate_grid(m + 1, cls_map->extent(2), cls_map->extent(3),
                                        cfg.strides[static_cast<size_t>(m)],
                                        cfg.clusters[static_cast<size_t>(m)]);
        auto labeled = label_anchors(grid, gts_s, new_w, new_h);
        if (!settings.gray_class)
            std::erase_if(labeled, [](const LabeledAnchor& la) { return la.label == kGray; });
        Rng level_rng = rng.fork(static_cast<uint64_t>(m) + 101);
        MiniBatch batch = sample_batch(labeled, settings.batch_size, settings.per_class_cap, level_rng);
        stats.positives += batch.positives;
        double level_value = 0.0;
        if (!batch.cls_rows.empty()) {
            auto rows = gather_cells<T>(&tape, cls_map, batch.cls_rows, cfg.num_classes, t_m);
            auto cls_term = softmax_xent<T>(&tape, rows, batch.cls_labels, -1);
            level_value += static_cast<double>(cls_term->values[0]);
            terms.push_back(cls_term);
        }
        if (!batch.reg_rows.empty()) {
            auto rows = gather_cells<T>(&tape, heads.reg[static_cast<size_t>(m)], batch.reg_rows, 4, t_m);
            const int nr = static_cast<int>(batch.reg_rows.size());
            Tensor<T> targets({nr, 4});
            for (int i = 0; i < nr; ++i) {
                targets.at2(i, 0) = static_cast<T>(batch.reg_targets[static_cast<size_t>(i)].tx);
                targets.at2(i, 1) = static_cast<T>(batch.reg_targets[static_cast<size_t>(i)].ty);
                targets.at2(i, 2) = static_cast<T>(batch.reg_targets[static_cast<size_t>(i)].tw);
                targets.at2(i, 3) = static_cast<T>(batch.reg_targets[static_cast<size_t>(i)].th);
            }
            auto reg_term =
                smooth_l1<T>(&tape, rows, targets, std::vector<uint8_t>(static_cast<size_t>(nr), 1));
            level_value += static_cast<double>(reg_term->values[0]);
            terms.push_back(reg_term);
        }
        stats.first_branch.push_back(level_value);
    }

    if (settings.use_second_branch) {
        auto scored = first_branch_boxes(cfg, heads, new_w, new_h, settings.inner_nms,
                                         settings.roi_batch);
        std::vector<Box> roi_boxes;
        roi_boxes.reserve(scored.size());
        for (const auto& sb : scored) roi_boxes.push_back(sb.box);
        stats.roi_boxes = static_cast<int>(roi_boxes.size());
        auto roi_terms = train_recursion(net, &tape, pyr, roi_boxes, settings.q, gts_s,
                                         settings.gray_class, BNMode::train, nullptr,
                                         &stats.roi_stage);
        terms.insert(terms.end(), roi_terms.begin(), roi_terms.end());
    }

    auto total = sum_scalars<T>(&tape, terms);
    stats.total = static_cast<double>(total->values[0]);
    total->ensure_grad();
    total->grad[0] = T(1);
    tape.backward();

    if (settings.update_weights) {
        std::vector<Parameter<T>*> ps;
        ps.reserve(net.parameters().size());
        for (auto& [name, p] : net.parameters()) ps.push_back(p);
        sgd_step<T>(ps, lr, settings.momentum, settings.weight_decay);
    }
    return stats;
}

template class ZipNet<float>;
template class ZipNet<double>;

#define ZIP_INSTANTIATE_NET_FNS(T)                                                                \
    template std::vector<ScoredBox> first_branch_boxes<T>(const NetConfig&, const HeadOut<T>&,    \
                                                          int, int, double, int);                 \
    template std::vector<TensorPtr<T>> train_recursion<T>(                                        \
        ZipNet<T>&, Tape*, const Pyramid<T>&, std::vector<Box>, int, const std::vector<Box>&,     \
        bool, BNMode, std::vector<std::vector<Box>>*, std::vector<double>*);                      \
    template StepStats train_step<T>(ZipNet<T>&, const Image&, const std::vector<Box>&,           \
                                     const TrainSettings&, double, Rng&);

ZIP_INSTANTIATE_NET_FNS(float)
ZIP_INSTANTIATE_NET_FNS(double)

#undef ZIP_INSTANTIATE_NET_FNS

}  // namespace zip

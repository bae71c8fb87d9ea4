#include "zip/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace zip {

void save_proposals_json(const std::string& path, const std::vector<ImageProposals>& all) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& ip : all) {
        nlohmann::json boxes = nlohmann::json::array();
        for (size_t i = 0; i < ip.boxes.size(); ++i) {
            const Box& b = ip.boxes[i];
            boxes.push_back({b.x1, b.y1, b.x2, b.y2, ip.scores[i]});
        }
        j.push_back({{"image_id", ip.image_id}, {"boxes", boxes}});
    }
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_proposals_json: cannot open " + path);
    os << j.dump(2) << "\n";
}

std::vector<ImageProposals> load_proposals_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_proposals_json: cannot open " + path);
    nlohmann::json j;
    is >> j;
    std::vector<ImageProposals> all;
    for (const auto& je : j) {
        ImageProposals ip;
        ip.image_id = je.at("image_id").get<std::string>();
        for (const auto& jb : je.at("boxes")) {
            if (jb.size() != 5)
                throw std::runtime_error("load_proposals_json: box row needs 5 values in image " +
                                         ip.image_id);
            ip.boxes.push_back(
                Box{jb[0].get<double>(), jb[1].get<double>(), jb[2].get<double>(), jb[3].get<double>()});
            ip.scores.push_back(jb[4].get<double>());
        }
        all.push_back(std::move(ip));
    }
    return all;
}

void save_proposals_csv(const std::string& path, const std::vector<ImageProposals>& all) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_proposals_csv: cannot open " + path);
    os << "image_id,x1,y1,x2,y2,score\n";
    os.precision(17);
    for (const auto& ip : all)
        for (size_t i = 0; i < ip.boxes.size(); ++i) {
            const Box& b = ip.boxes[i];
            os << ip.image_id << "," << b.x1 << "," << b.y1 << "," << b.x2 << "," << b.y2 << ","
               << ip.scores[i] << "\n";
        }
}

namespace {

// deterministic ordering: score desc, then scale, level, original position
template <typename P>
void sort_proposals(std::vector<P>& props) {
    std::stable_sort(props.begin(), props.end(), [](const P& a, const P& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.scale_tag != b.scale_tag) return a.scale_tag < b.scale_tag;
        return a.level < b.level;
    });
}

std::vector<Proposal> apply_nms(const std::vector<Proposal>& props, double thresh, int max_keep) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    boxes.reserve(props.size());
    for (const auto& p : props) {
        boxes.push_back(p.box);
        scores.push_back(p.score);
    }
    auto kept = nms(boxes, scores, thresh, max_keep);
    std::vector<Proposal> out;
    out.reserve(kept.size());
    for (int k : kept) out.push_back(props[static_cast<size_t>(k)]);
    return out;
}

}  // namespace

template <typename T>
typename ProposalEngine<T>::ScaleContext ProposalEngine<T>::make_context(const Image& image,
                                                                         int scale_index,
                                                                         bool with_heads) {
    const int target = settings_.scales[static_cast<size_t>(scale_index)];
    const double f = static_cast<double>(target) / std::max(image.width, image.height);
    ScaleContext ctx;
    ctx.scale_tag = scale_index;
    ctx.rw = std::max(32, static_cast<int>(std::lround(image.width * f)));
    ctx.rh = std::max(32, static_cast<int>(std::lround(image.height * f)));
    ctx.fx = static_cast<double>(ctx.rw) / image.width;
    ctx.fy = static_cast<double>(ctx.rh) / image.height;
    Image resized =
        (ctx.rw == image.width && ctx.rh == image.height) ? image : resize_image(image, ctx.rw, ctx.rh);
    Image padded = pad_to_multiple(resized, 32);
    auto x = to_tensor<T>(padded);
    ctx.pyr = net_.forward_pyramid(nullptr, x, BNMode::eval, ctx.rw, ctx.rh);
    if (with_heads) ctx.heads = net_.forward_heads(nullptr, ctx.pyr);
    return ctx;
}

template <typename T>
std::vector<Proposal> ProposalEngine<T>::first_branch_original_coords(const ScaleContext& ctx,
                                                                      int orig_w, int orig_h) {
    auto scored = first_branch_boxes(net_.config(), ctx.heads, ctx.rw, ctx.rh, settings_.inner_nms,
                                     settings_.first_branch_top_n);
    std::vector<Proposal> out;
    out.reserve(scored.size());
    for (const auto& sb : scored) {
        Proposal p;
        p.box = clamp_box(Box{sb.box.x1 / ctx.fx, sb.box.y1 / ctx.fy, sb.box.x2 / ctx.fx,
                              sb.box.y2 / ctx.fy},
                          orig_w, orig_h);
        p.score = sb.score;
        p.level = sb.level;
        p.scale_tag = ctx.scale_tag;
        out.push_back(p);
    }
    return out;
}

template <typename T>
std::vector<Proposal> ProposalEngine<T>::propose_single_scale(const Image& image, int scale_index) {
    ScaleContext ctx = make_context(image, scale_index, true);
    auto props = first_branch_original_coords(ctx, image.width, image.height);
    sort_proposals(props);
    return apply_nms(props, settings_.inner_nms, settings_.first_branch_top_n);
}

template <typename T>
std::vector<Proposal> ProposalEngine<T>::merge_scales(std::vector<std::vector<Proposal>> per_scale) {
    std::vector<Proposal> all;
    for (auto& ps : per_scale) all.insert(all.end(), ps.begin(), ps.end());
    sort_proposals(all);
    return apply_nms(all, settings_.inter_nms, settings_.first_branch_top_n);
}

template <typename T>
std::vector<Proposal> ProposalEngine<T>::propose_multiscale(const Image& image) {
    std::vector<std::vector<Proposal>> per_scale;
    for (size_t s = 0; s < settings_.scales.size(); ++s)
        per_scale.push_back(propose_single_scale(image, static_cast<int>(s)));
    return merge_scales(std::move(per_scale));
}

template <typename T>
std::vector<Proposal> ProposalEngine<T>::refine_with_contexts(
    const std::vector<ScaleContext*>& ctxs, const std::vector<Proposal>& merged, int orig_w,
    int orig_h, std::vector<std::vector<std::vector<Box>>>* traj) {
    if (merged.empty()) return {};
    const int n = static_cast<int>(merged.size());
    std::vector<double> sum_x1(merged.size(), 0), sum_y1(merged.size(), 0), sum_x2(merged.size(), 0),
        sum_y2(merged.size(), 0), sum_prob(merged.size(), 0);

    for (ScaleContext* ctx : ctxs) {
        std::vector<Box> boxes;
        boxes.reserve(merged.size());
        for (const auto& p : merged)
            boxes.push_back(clamp_box(Box{p.box.x1 * ctx->fx, p.box.y1 * ctx->fy, p.box.x2 * ctx->fx,
                                          p.box.y2 * ctx->fy},
                                      ctx->rw, ctx->rh));
        std::vector<std::vector<Box>> scale_traj;
        RoiStepOut<T> last;
        for (int stage = 0; stage < settings_.q; ++stage) {
            last = net_.roi_branch_step(nullptr, ctx->pyr, boxes, BNMode::eval, &roi_stats_);
            boxes = last.refined;
            scale_traj.push_back(boxes);
        }
        for (int i = 0; i < n; ++i) {
            const Box& b = boxes[static_cast<size_t>(i)];
            sum_x1[static_cast<size_t>(i)] += b.x1 / ctx->fx;
            sum_y1[static_cast<size_t>(i)] += b.y1 / ctx->fy;
            sum_x2[static_cast<size_t>(i)] += b.x2 / ctx->fx;
            sum_y2[static_cast<size_t>(i)] += b.y2 / ctx->fy;
            double mx = static_cast<double>(last.logits->at2(i, 0));
            const int classes = last.logits->extent(1);
            for (int c = 1; c < classes; ++c)
                mx = std::max(mx, static_cast<double>(last.logits->at2(i, c)));
            double se = 0.0;
            for (int c = 0; c < classes; ++c)
                se += std::exp(static_cast<double>(last.logits->at2(i, c)) - mx);
            sum_prob[static_cast<size_t>(i)] +=
                std::exp(static_cast<double>(last.logits->at2(i, 1)) - mx) / se;
        }
        if (traj) traj->push_back(std::move(scale_traj));
    }

    const double inv = 1.0 / static_cast<double>(ctxs.size());
    std::vector<Proposal> refined;
    refined.reserve(merged.size());
    for (int i = 0; i < n; ++i) {
        Proposal p = merged[static_cast<size_t>(i)];
        p.box = clamp_box(Box{sum_x1[static_cast<size_t>(i)] * inv, sum_y1[static_cast<size_t>(i)] * inv,
                              sum_x2[static_cast<size_t>(i)] * inv, sum_y2[static_cast<size_t>(i)] * inv},
                          orig_w, orig_h);
        p.score += sum_prob[static_cast<size_t>(i)] * inv;
        p.refined = true;
        refined.push_back(p);
    }
    sort_proposals(refined);
    return apply_nms(refined, settings_.final_nms, -1);
}

template <typename T>
std::vector<Proposal> ProposalEngine<T>::refine(
    const Image& image, const std::vector<Proposal>& merged,
    std::vector<std::vector<std::vector<Box>>>* trajectories) {
    std::vector<ScaleContext> ctxs;
    std::vector<ScaleContext*> ptrs;
    for (size_t s = 0; s < settings_.scales.size(); ++s)
        ctxs.push_back(make_context(image, static_cast<int>(s), false));
    for (auto& c : ctxs) ptrs.push_back(&c);
    return refine_with_contexts(ptrs, merged, image.width, image.height, trajectories);
}

template <typename T>
std::vector<Proposal> ProposalEngine<T>::propose(const Image& image) {
    std::vector<ScaleContext> ctxs;
    std::vector<std::vector<Proposal>> per_scale;
    for (size_t s = 0; s < settings_.scales.size(); ++s) {
        ctxs.push_back(make_context(image, static_cast<int>(s), true));
        auto props = first_branch_original_coords(ctxs.back(), image.width, image.height);
        sort_proposals(props);
        per_scale.push_back(apply_nms(props, settings_.inner_nms, settings_.first_branch_top_n));
    }
    auto merged = merge_scales(std::move(per_scale));
    std::vector<Proposal> out;
    if (settings_.use_second_branch) {
        std::vector<ScaleContext*> ptrs;
        for (auto& c : ctxs) ptrs.push_back(&c);
        out = refine_with_contexts(ptrs, merged, image.width, image.height, nullptr);
    } else {
        out = merged;
    }
    if (settings_.top_k >= 0 && static_cast<int>(out.size()) > settings_.top_k)
        out.resize(static_cast<size_t>(settings_.top_k));
    return out;
}

template class ProposalEngine<float>;
template class ProposalEngine<double>;

}  // namespace zip

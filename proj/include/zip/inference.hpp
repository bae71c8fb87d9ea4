#pragma once

#include <vector>

#include "zip/data.hpp"
#include "zip/geometry.hpp"
#include "zip/zipnet.hpp"

namespace zip {

struct Proposal {
    Box box;  // original-image coordinates
    double score = 0;
    int level = 1;
    int scale_tag = 0;  // index into the test scale list
    bool refined = false;
};

struct InferenceSettings {
    std::vector<int> scales = {192, 256, 320};
    double inner_nms = 0.7;
    double inter_nms = 0.5;
    double final_nms = 0.7;
    int first_branch_top_n = 2000;  // boxes kept per scale and after the inter-scale merge
    int q = 2;
    int top_k = 300;
    bool use_second_branch = true;
};

// Per-image proposal file: JSON array of {image_id, boxes: [[x1,y1,x2,y2,score],...]}
// sorted by score, plus a flat CSV form.
struct ImageProposals {
    std::string image_id;
    std::vector<Box> boxes;
    std::vector<double> scores;
};

void save_proposals_json(const std::string& path, const std::vector<ImageProposals>& all);
std::vector<ImageProposals> load_proposals_json(const std::string& path);
void save_proposals_csv(const std::string& path, const std::vector<ImageProposals>& all);

// Eval-mode prediction cascade. Stateless apart from a degenerate-RoI counter;
// one engine per thread, the network is shared read-only.
template <typename T>
class ProposalEngine {
public:
    ProposalEngine(ZipNet<T>& net, const InferenceSettings& settings)
        : net_(net), settings_(settings) {}

    // Resize so the longer side matches `scale`, run the first branch, map
    // boxes back to original coordinates, NMS across the concatenated levels.
    std::vector<Proposal> propose_single_scale(const Image& image, int scale);

    // Union of all scales, inter-scale NMS, top-N by score.
    std::vector<Proposal> propose_multiscale(const Image& image);

    // RoI recursion on every input box at every scale; boxes replaced by the
    // per-scale average of the stage-Q outputs, scores bumped by the mean
    // stage-Q positive probability, then the final NMS. trajectories, when
    // given, receives the per-scale box sequence (scale coordinates).
    std::vector<Proposal> refine(const Image& image, const std::vector<Proposal>& merged,
                                 std::vector<std::vector<std::vector<Box>>>* trajectories = nullptr);

    // propose_multiscale -> refine -> truncate to top_k.
    std::vector<Proposal> propose(const Image& image);

    const RoiPoolStats& roi_stats() const { return roi_stats_; }

private:
    struct ScaleContext {
        int scale_tag = 0;
        double fx = 1.0, fy = 1.0;  // original -> scale coordinate factors
        int rw = 0, rh = 0;         // resized (unpadded) extents
        Pyramid<T> pyr;
        HeadOut<T> heads;
    };

    ScaleContext make_context(const Image& image, int scale_index, bool with_heads);
    std::vector<Proposal> first_branch_original_coords(const ScaleContext& ctx, int orig_w,
                                                       int orig_h);
    std::vector<Proposal> merge_scales(std::vector<std::vector<Proposal>> per_scale);
    std::vector<Proposal> refine_with_contexts(const std::vector<ScaleContext*>& ctxs,
                                               const std::vector<Proposal>& merged, int orig_w,
                                               int orig_h,
                                               std::vector<std::vector<std::vector<Box>>>* traj);

    ZipNet<T>& net_;
    InferenceSettings settings_;
    RoiPoolStats roi_stats_;
};

}  // namespace zip

#include "zip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <tuple>

#include <json.hpp>

namespace zip {

namespace {

using nlohmann::json;

// per-gt running max of IoU over proposals in score order; recall at any
// budget is then a single lookup
struct PrefixMax {
    std::vector<std::vector<double>> per_gt;  // [gt][k-1] = best IoU among top-k
};

PrefixMax prefix_max(const ImageEval& img) {
    std::vector<int> order(img.proposals.size());
    std::iota(order.begin(), order.end(), 0);
    // score ties break on coordinates so the ranking is canonical under any
    // input permutation
    std::stable_sort(order.begin(), order.end(), [&img](int a, int b) {
        const double sa = img.scores[static_cast<size_t>(a)];
        const double sb = img.scores[static_cast<size_t>(b)];
        if (sa != sb) return sa > sb;
        const Box& ba = img.proposals[static_cast<size_t>(a)];
        const Box& bb = img.proposals[static_cast<size_t>(b)];
        return std::tie(ba.x1, ba.y1, ba.x2, ba.y2) < std::tie(bb.x1, bb.y1, bb.x2, bb.y2);
    });
    PrefixMax pm;
    pm.per_gt.resize(img.gts.size());
    for (size_t g = 0; g < img.gts.size(); ++g) {
        auto& row = pm.per_gt[g];
        row.resize(order.size());
        double best = 0.0;
        for (size_t k = 0; k < order.size(); ++k) {
            best = std::max(best, iou(img.gts[g], img.proposals[static_cast<size_t>(order[k])]));
            row[k] = best;
        }
    }
    return pm;
}

double recall_from_prefix(const std::vector<const std::vector<double>*>& gts, double iou_thresh,
                          int topk) {
    int64_t recalled = 0;
    for (const auto* row : gts) {
        if (row->empty()) continue;
        const size_t k = std::min<size_t>(static_cast<size_t>(topk), row->size());
        if (k > 0 && (*row)[k - 1] >= iou_thresh) ++recalled;
    }
    return gts.empty() ? 1.0 : static_cast<double>(recalled) / static_cast<double>(gts.size());
}

std::vector<double> iou_grid_points() {
    std::vector<double> grid;
    for (int i = 0; i < 10; ++i) grid.push_back(0.50 + 0.05 * i);
    return grid;
}

}  // namespace

RecallValue recall_at(const std::vector<ImageEval>& images, double iou_thresh, int topk) {
    std::vector<PrefixMax> pms;
    pms.reserve(images.size());
    for (const auto& img : images) pms.push_back(prefix_max(img));
    std::vector<const std::vector<double>*> rows;
    for (const auto& pm : pms)
        for (const auto& row : pm.per_gt) rows.push_back(&row);
    RecallValue rv;
    rv.empty_gts = rows.empty();
    rv.value = recall_from_prefix(rows, iou_thresh, topk);
    return rv;
}

RecallValue average_recall(const std::vector<ImageEval>& images, int topk) {
    RecallValue rv;
    double sum = 0.0;
    for (double t : iou_grid_points()) {
        auto r = recall_at(images, t, topk);
        rv.empty_gts = r.empty_gts;
        sum += r.value;
    }
    rv.value = sum / 10.0;
    return rv;
}

SizeBucketAR ar_by_size(const std::vector<ImageEval>& images) {
    // bucket the gts, keep each image's proposals
    auto bucket_of = [](const Box& b) {
        const double a = b.area();
        if (a < 32.0 * 32.0) return 0;
        if (a < 96.0 * 96.0) return 1;
        return 2;
    };
    SizeBucketAR out;
    for (int bucket = 0; bucket < 3; ++bucket) {
        std::vector<ImageEval> filtered;
        bool any = false;
        for (const auto& img : images) {
            ImageEval f;
            f.image_id = img.image_id;
            f.proposals = img.proposals;
            f.scores = img.scores;
            for (const auto& g : img.gts)
                if (bucket_of(g) == bucket) f.gts.push_back(g);
            any = any || !f.gts.empty();
            filtered.push_back(std::move(f));
        }
        if (!any) continue;  // absent, not zero
        const double v = average_recall(filtered, 100).value;
        if (bucket == 0) out.small = v;
        if (bucket == 1) out.medium = v;
        if (bucket == 2) out.large = v;
    }
    return out;
}

MetricsReport build_report(const std::vector<ImageEval>& images, const std::vector<int>& budgets,
                           const std::vector<double>& recall_curve_ious) {
    MetricsReport rep;
    rep.iou_grid = iou_grid_points();
    rep.budgets = budgets;

    std::vector<PrefixMax> pms;
    pms.reserve(images.size());
    for (const auto& img : images) pms.push_back(prefix_max(img));
    std::vector<const std::vector<double>*> rows;
    for (const auto& pm : pms)
        for (const auto& row : pm.per_gt) rows.push_back(&row);
    rep.empty_gts_warning = rows.empty();

    for (int k : budgets) {
        std::vector<double> curve;
        double sum = 0.0;
        for (double t : rep.iou_grid) {
            const double r = recall_from_prefix(rows, t, k);
            curve.push_back(r);
            sum += r;
        }
        rep.recall_vs_iou[k] = std::move(curve);
        rep.ar_at[k] = sum / 10.0;
    }
    for (double t : recall_curve_ious) {
        std::vector<double> curve;
        for (int k : budgets) curve.push_back(recall_from_prefix(rows, t, k));
        rep.recall_vs_count[t] = std::move(curve);
    }
    rep.size_ar = ar_by_size(images);
    return rep;
}

std::string report_to_json(const MetricsReport& rep) {
    json j;
    j["iou_grid"] = rep.iou_grid;
    j["budgets"] = rep.budgets;
    j["empty_gts_warning"] = rep.empty_gts_warning;
    json rvi = json::object();
    for (const auto& [k, curve] : rep.recall_vs_iou) rvi[std::to_string(k)] = curve;
    j["recall_vs_iou"] = rvi;
    json rvc = json::object();
    for (const auto& [t, curve] : rep.recall_vs_count) {
        std::ostringstream key;
        key << t;
        rvc[key.str()] = curve;
    }
    j["recall_vs_count"] = rvc;
    json ar = json::object();
    for (const auto& [k, v] : rep.ar_at) ar[std::to_string(k)] = v;
    j["ar_at"] = ar;
    json size = json::object();
    if (rep.size_ar.small) size["small"] = *rep.size_ar.small;
    if (rep.size_ar.medium) size["medium"] = *rep.size_ar.medium;
    if (rep.size_ar.large) size["large"] = *rep.size_ar.large;
    j["ar_by_size"] = size;
    return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
    json j = json::parse(text);
    MetricsReport rep;
    rep.iou_grid = j.at("iou_grid").get<std::vector<double>>();
    rep.budgets = j.at("budgets").get<std::vector<int>>();
    rep.empty_gts_warning = j.value("empty_gts_warning", false);
    for (const auto& [k, curve] : j.at("recall_vs_iou").items())
        rep.recall_vs_iou[std::stoi(k)] = curve.get<std::vector<double>>();
    for (const auto& [t, curve] : j.at("recall_vs_count").items())
        rep.recall_vs_count[std::stod(t)] = curve.get<std::vector<double>>();
    for (const auto& [k, v] : j.at("ar_at").items()) rep.ar_at[std::stoi(k)] = v.get<double>();
    const auto& size = j.at("ar_by_size");
    if (size.contains("small")) rep.size_ar.small = size["small"].get<double>();
    if (size.contains("medium")) rep.size_ar.medium = size["medium"].get<double>();
    if (size.contains("large")) rep.size_ar.large = size["large"].get<double>();
    return rep;
}

std::string report_to_csv(const MetricsReport& rep) {
    std::ostringstream os;
    os.precision(17);
    os << "metric,budget,value\n";
    for (const auto& [k, v] : rep.ar_at) os << "ar," << k << "," << v << "\n";
    for (const auto& [t, curve] : rep.recall_vs_count)
        for (size_t i = 0; i < curve.size(); ++i)
            os << "recall@" << t << "," << rep.budgets[i] << "," << curve[i] << "\n";
    if (rep.size_ar.small) os << "ar_small,100," << *rep.size_ar.small << "\n";
    if (rep.size_ar.medium) os << "ar_medium,100," << *rep.size_ar.medium << "\n";
    if (rep.size_ar.large) os << "ar_large,100," << *rep.size_ar.large << "\n";
    return os.str();
}

}  // namespace zip

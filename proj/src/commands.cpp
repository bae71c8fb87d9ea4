#include "zip/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

#include <json.hpp>

namespace zip {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double lr_at(const RunConfig& cfg, int iteration) {
    const int drops = iteration / cfg.lr_decay_interval;
    return cfg.lr * std::pow(cfg.lr_decay, drops);
}

// ---- grad suite ---------------------------------------------------------

// values separated enough that central differences never flip an argmax
void well_separated(Tensor<double>& t, Rng& rng) {
    for (auto& v : t.values) v = rng.uniform(-1.0, 1.0);
    bool ok = false;
    while (!ok) {
        ok = true;
        std::vector<double> sorted(t.values.begin(), t.values.end());
        std::sort(sorted.begin(), sorted.end());
        for (size_t i = 1; i < sorted.size(); ++i)
            if (sorted[i] - sorted[i - 1] < 1e-3) {
                ok = false;
                break;
            }
        if (!ok)
            for (auto& v : t.values) v = rng.uniform(-1.0, 1.0);
    }
}

std::vector<double> mix_for(int64_t n, Rng& rng) {
    std::vector<double> m(static_cast<size_t>(n));
    for (auto& v : m) v = rng.uniform(-1.0, 1.0);
    return m;
}

struct GradCase {
    std::string op;
    double err = 0;
};

double grad_case_conv2d(Rng& rng) {
    auto x = make_tensor<double>({1, 2, 5, 5});
    well_separated(*x, rng);
    Parameter<double> w({3, 2, 3, 3});
    Parameter<double> b({3});
    for (auto& v : w.value.values) v = rng.uniform(-1, 1);
    for (auto& v : b.value.values) v = rng.uniform(-1, 1);
    auto mix = mix_for(3 * 5 * 5, rng);
    auto loss = [&](Tape* t) { return reduce_wsum<double>(t, conv2d<double>(t, x, w, &b, 1, 1), mix); };
    double e = finite_diff_check<double>(loss, *x);
    e = std::max(e, finite_diff_check<double>(loss, w.value));
    return std::max(e, finite_diff_check<double>(loss, b.value));
}

double grad_case_deconv2d(Rng& rng) {
    auto x = make_tensor<double>({1, 2, 3, 3});
    well_separated(*x, rng);
    Parameter<double> w({2, 3, 2, 2});
    Parameter<double> b({3});
    for (auto& v : w.value.values) v = rng.uniform(-1, 1);
    for (auto& v : b.value.values) v = rng.uniform(-1, 1);
    auto mix = mix_for(3 * 6 * 6, rng);
    auto loss = [&](Tape* t) {
        return reduce_wsum<double>(t, deconv2d<double>(t, x, w, &b, 2, 0), mix);
    };
    double e = finite_diff_check<double>(loss, *x);
    e = std::max(e, finite_diff_check<double>(loss, w.value));
    return std::max(e, finite_diff_check<double>(loss, b.value));
}

double grad_case_maxpool(Rng& rng) {
    auto x = make_tensor<double>({1, 2, 6, 6});
    well_separated(*x, rng);
    auto mix = mix_for(2 * 3 * 3, rng);
    auto loss = [&](Tape* t) { return reduce_wsum<double>(t, maxpool2d<double>(t, x, 2, 2), mix); };
    return finite_diff_check<double>(loss, *x);
}

double grad_case_relu(Rng& rng) {
    auto x = make_tensor<double>({4, 5});
    well_separated(*x, rng);
    for (auto& v : x->values)
        if (std::abs(v) < 1e-3) v += 0.01;
    auto mix = mix_for(20, rng);
    auto loss = [&](Tape* t) { return reduce_wsum<double>(t, relu<double>(t, x), mix); };
    return finite_diff_check<double>(loss, *x);
}

double grad_case_batchnorm(Rng& rng) {
    auto x = make_tensor<double>({2, 2, 3, 3});
    for (auto& v : x->values) v = rng.uniform(-2, 2);
    Parameter<double> gamma({2});
    Parameter<double> beta({2});
    for (auto& v : gamma.value.values) v = rng.uniform(0.5, 1.5);
    for (auto& v : beta.value.values) v = rng.uniform(-0.5, 0.5);
    BatchNormState<double> state(2);
    auto mix = mix_for(36, rng);
    auto train_loss = [&](Tape* t) {
        return reduce_wsum<double>(t, batchnorm2d<double>(t, x, gamma, beta, state, BNMode::train), mix);
    };
    double e = finite_diff_check<double>(train_loss, *x);
    e = std::max(e, finite_diff_check<double>(train_loss, gamma.value));
    e = std::max(e, finite_diff_check<double>(train_loss, beta.value));
    auto eval_loss = [&](Tape* t) {
        return reduce_wsum<double>(t, batchnorm2d<double>(t, x, gamma, beta, state, BNMode::eval), mix);
    };
    e = std::max(e, finite_diff_check<double>(eval_loss, *x));
    return std::max(e, finite_diff_check<double>(eval_loss, gamma.value));
}

double grad_case_avgpool(Rng& rng) {
    auto x = make_tensor<double>({2, 3, 4, 4});
    for (auto& v : x->values) v = rng.uniform(-1, 1);
    auto mix = mix_for(6, rng);
    auto loss = [&](Tape* t) { return reduce_wsum<double>(t, avgpool_global<double>(t, x), mix); };
    return finite_diff_check<double>(loss, *x);
}

double grad_case_fc(Rng& rng) {
    auto x = make_tensor<double>({3, 4});
    for (auto& v : x->values) v = rng.uniform(-1, 1);
    Parameter<double> w({5, 4});
    Parameter<double> b({5});
    for (auto& v : w.value.values) v = rng.uniform(-1, 1);
    for (auto& v : b.value.values) v = rng.uniform(-1, 1);
    auto mix = mix_for(15, rng);
    auto loss = [&](Tape* t) { return reduce_wsum<double>(t, fc<double>(t, x, w, &b), mix); };
    double e = finite_diff_check<double>(loss, *x);
    e = std::max(e, finite_diff_check<double>(loss, w.value));
    return std::max(e, finite_diff_check<double>(loss, b.value));
}

double grad_case_softmax_xent(Rng& rng) {
    auto x = make_tensor<double>({6, 3});
    for (auto& v : x->values) v = rng.uniform(-2, 2);
    std::vector<int> labels;
    for (int i = 0; i < 6; ++i) labels.push_back(i == 2 ? -1 : rng.uniform_index(3));
    auto loss = [&](Tape* t) { return softmax_xent<double>(t, x, labels, -1); };
    return finite_diff_check<double>(loss, *x);
}

double grad_case_smooth_l1(Rng& rng) {
    auto x = make_tensor<double>({4, 4});
    Tensor<double> target({4, 4});
    for (auto& v : target.values) v = rng.uniform(-1.5, 1.5);
    for (size_t i = 0; i < x->values.size(); ++i) {
        x->values[i] = rng.uniform(-1.5, 1.5);
        const double d = std::abs(x->values[i] - target.values[i]);
        if (std::abs(d - 1.0) < 5e-3 || d < 5e-3) x->values[i] += 0.02;  // stay off both kinks
    }
    std::vector<uint8_t> mask = {1, 1, 0, 1};
    auto loss = [&](Tape* t) { return smooth_l1<double>(t, x, target, mask); };
    return finite_diff_check<double>(loss, *x);
}

double grad_case_roi_pool(Rng& rng) {
    auto fm = make_tensor<double>({1, 2, 6, 6});
    well_separated(*fm, rng);
    std::vector<Roi> rois = {{0, Box{rng.uniform(0, 8), rng.uniform(0, 8), rng.uniform(12, 24),
                                     rng.uniform(12, 24)}},
                             {0, Box{0, 0, 24, 24}}};
    auto mix = mix_for(2 * 2 * 2 * 2, rng);
    auto loss = [&](Tape* t) {
        return reduce_wsum<double>(t, roi_pool<double>(t, fm, rois, 2, 2, 4), mix);
    };
    return finite_diff_check<double>(loss, *fm);
}

double grad_case_add(Rng& rng) {
    auto a = make_tensor<double>({3, 3});
    auto b = make_tensor<double>({3, 3});
    for (auto& v : a->values) v = rng.uniform(-1, 1);
    for (auto& v : b->values) v = rng.uniform(-1, 1);
    auto mix = mix_for(9, rng);
    auto loss = [&](Tape* t) { return reduce_wsum<double>(t, add<double>(t, a, b), mix); };
    double e = finite_diff_check<double>(loss, *a);
    return std::max(e, finite_diff_check<double>(loss, *b));
}

double grad_case_gather_cells(Rng& rng) {
    auto head = make_tensor<double>({1, 6, 3, 3});  // 2 templates x 3 channels
    for (auto& v : head->values) v = rng.uniform(-1, 1);
    std::vector<int> anchors = {0, 5, 8, 13, 17};
    auto mix = mix_for(15, rng);
    auto loss = [&](Tape* t) {
        return reduce_wsum<double>(t, gather_cells<double>(t, head, anchors, 3, 2), mix);
    };
    return finite_diff_check<double>(loss, *head);
}

double grad_case_row_scatter(Rng& rng) {
    auto a = make_tensor<double>({2, 3});
    auto b = make_tensor<double>({2, 3});
    for (auto& v : a->values) v = rng.uniform(-1, 1);
    for (auto& v : b->values) v = rng.uniform(-1, 1);
    auto mix = mix_for(12, rng);
    auto loss = [&](Tape* t) {
        return reduce_wsum<double>(t, row_scatter<double>(t, {{a, {3, 1}}, {b, {0, 2}}}, 4), mix);
    };
    double e = finite_diff_check<double>(loss, *a);
    return std::max(e, finite_diff_check<double>(loss, *b));
}

double grad_case_sum_scalars(Rng& rng) {
    auto a = make_tensor<double>({1}, {rng.uniform(-1, 1)});
    auto b = make_tensor<double>({1}, {rng.uniform(-1, 1)});
    auto loss = [&](Tape* t) {
        return sum_scalars<double>(t, {reduce_wsum<double>(t, a), reduce_wsum<double>(t, b)});
    };
    double e = finite_diff_check<double>(loss, *a);
    return std::max(e, finite_diff_check<double>(loss, *b));
}

double grad_case_reduce_wsum(Rng& rng) {
    auto x = make_tensor<double>({7});
    for (auto& v : x->values) v = rng.uniform(-1, 1);
    auto mix = mix_for(7, rng);
    auto loss = [&](Tape* t) { return reduce_wsum<double>(t, x, mix); };
    return finite_diff_check<double>(loss, *x);
}

}  // namespace

std::vector<GradCheckResult> run_grad_suite(int seeds, uint64_t base_seed) {
    const std::vector<std::pair<std::string, double (*)(Rng&)>> cases = {
        {"conv2d", grad_case_conv2d},
        {"deconv2d", grad_case_deconv2d},
        {"maxpool2d", grad_case_maxpool},
        {"relu", grad_case_relu},
        {"batchnorm2d", grad_case_batchnorm},
        {"avgpool_global", grad_case_avgpool},
        {"fc", grad_case_fc},
        {"softmax_xent", grad_case_softmax_xent},
        {"smooth_l1", grad_case_smooth_l1},
        {"roi_pool", grad_case_roi_pool},
        {"add", grad_case_add},
        {"gather_cells", grad_case_gather_cells},
        {"row_scatter", grad_case_row_scatter},
        {"sum_scalars", grad_case_sum_scalars},
        {"reduce_wsum", grad_case_reduce_wsum},
    };
    std::vector<GradCheckResult> results;
    for (const auto& [name, fn] : cases) {
        GradCheckResult r;
        r.op = name;
        for (int s = 0; s < seeds; ++s) {
            Rng rng(base_seed + static_cast<uint64_t>(s) * 7919);
            r.max_rel_err = std::max(r.max_rel_err, fn(rng));
        }
        r.pass = r.max_rel_err < r.tolerance;
        results.push_back(r);
    }
    return results;
}

// ---- commands -----------------------------------------------------------

Image load_manifest_image(const std::string& manifest_path, const ImageEntry& entry) {
    fs::path p(entry.file);
    if (p.is_relative()) p = fs::path(manifest_path).parent_path() / p;
    return read_image(p.string());
}

std::vector<ImageEval> make_image_evals(const DatasetManifest& gts,
                                        const std::vector<ImageProposals>& proposals) {
    std::map<std::string, const ImageProposals*> by_id;
    for (const auto& ip : proposals) by_id[ip.image_id] = &ip;
    std::vector<ImageEval> evals;
    for (const auto& entry : gts.images) {
        auto it = by_id.find(entry.id);
        if (it == by_id.end())
            throw std::runtime_error("proposals are missing image id " + entry.id);
        ImageEval ev;
        ev.image_id = entry.id;
        ev.gts = entry.boxes;
        ev.proposals = it->second->boxes;
        ev.scores = it->second->scores;
        evals.push_back(std::move(ev));
    }
    return evals;
}

int cmd_gen_data(const RunConfig& cfg) {
    try {
        SizeMix mix{cfg.data_mix[0], cfg.data_mix[1], cfg.data_mix[2]};
        DatasetManifest manifest = gen_shapeworld(cfg.data_n, cfg.data_side, cfg.seed, mix, cfg.data_dir);
        save_annotations(manifest, (fs::path(cfg.data_dir) / "manifest.json").string());
        std::cout << "wrote " << manifest.images.size() << " images to " << cfg.data_dir << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "gen-data: " << e.what() << "\n";
        return kExitRuntime;
    }
}

namespace {

template <typename T>
int run_train(const RunConfig& cfg, const std::string& manifest_path, const std::string& out_dir,
              const std::string& resume_checkpoint) {
    DatasetManifest manifest = load_annotations(manifest_path);
    if (manifest.images.empty()) throw std::runtime_error("training manifest has no images");
    fs::create_directories(out_dir);

    Rng init_rng(cfg.seed);
    ZipNet<T> net(make_net_config(cfg), init_rng);
    TrainSettings settings = make_train_settings(cfg);

    int start_iter = 0;
    if (!resume_checkpoint.empty()) {
        net.from_entries(load_checkpoint(resume_checkpoint));
        std::ifstream side(resume_checkpoint + ".json");
        if (!side)
            throw std::runtime_error("resume: missing sidecar " + resume_checkpoint + ".json");
        json j;
        side >> j;
        start_iter = j.at("iteration").get<int>();
    }

    const fs::path loss_path = fs::path(out_dir) / "loss.csv";
    std::ofstream loss_csv(loss_path, start_iter > 0 ? std::ios::app : std::ios::trunc);
    if (!loss_csv) throw std::runtime_error("cannot open " + loss_path.string());
    if (start_iter == 0) {
        loss_csv << "iteration,lr,total";
        for (int m = 1; m <= 3; ++m) loss_csv << ",level" << m;
        for (int s = 1; s <= cfg.q; ++s) loss_csv << ",stage" << s;
        loss_csv << ",positives\n";
    }

    std::map<std::string, Image> image_cache;
    auto image_for = [&](const ImageEntry& entry) -> const Image& {
        auto it = image_cache.find(entry.id);
        if (it == image_cache.end())
            it = image_cache.emplace(entry.id, load_manifest_image(manifest_path, entry)).first;
        return it->second;
    };

    auto save = [&](int next_iteration) {
        const fs::path ckpt = fs::path(out_dir) / "checkpoint.zipt";
        save_checkpoint(ckpt.string(), net.to_entries());
        json side;
        side["config"] = json::parse(config_to_json_text(cfg));
        side["iteration"] = next_iteration;
        std::ofstream os(ckpt.string() + ".json");
        os << side.dump(2) << "\n";
    };

    Rng stream(cfg.seed);
    for (int it = start_iter; it < cfg.iterations; ++it) {
        Rng iter_rng = stream.fork(0x7261696e00000000ULL ^ static_cast<uint64_t>(it));
        const auto& entry =
            manifest.images[iter_rng.uniform_int(manifest.images.size())];
        const double lr = lr_at(cfg, it);
        StepStats stats = train_step<T>(net, image_for(entry), entry.boxes, settings, lr, iter_rng);

        loss_csv << it << "," << fmt_g17(lr) << "," << fmt_g17(stats.total);
        for (int m = 0; m < 3; ++m)
            loss_csv << ","
                     << fmt_g17(m < static_cast<int>(stats.first_branch.size())
                                    ? stats.first_branch[static_cast<size_t>(m)]
                                    : 0.0);
        for (int s = 0; s < cfg.q; ++s)
            loss_csv << ","
                     << fmt_g17(s < static_cast<int>(stats.roi_stage.size())
                                    ? stats.roi_stage[static_cast<size_t>(s)]
                                    : 0.0);
        loss_csv << "," << stats.positives << "\n";
        loss_csv.flush();

        if (cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0) save(it + 1);
    }
    save(cfg.iterations);
    return kExitOk;
}

template <typename T>
int run_propose(const RunConfig& cfg, const std::string& checkpoint_path,
                const std::string& manifest_path, const std::string& out_json,
                const std::string& out_csv) {
    DatasetManifest manifest = load_annotations(manifest_path);
    Rng init_rng(cfg.seed);
    ZipNet<T> net(make_net_config(cfg), init_rng);
    net.from_entries(load_checkpoint(checkpoint_path));
    InferenceSettings settings = make_inference_settings(cfg);

    std::vector<ImageProposals> results(manifest.images.size());
    std::atomic<size_t> next{0};
    const unsigned n_threads = std::max(1u, std::thread::hardware_concurrency());
    auto worker = [&]() {
        ProposalEngine<T> engine(net, settings);
        for (size_t i = next.fetch_add(1); i < manifest.images.size(); i = next.fetch_add(1)) {
            const auto& entry = manifest.images[i];
            Image img = load_manifest_image(manifest_path, entry);
            auto props = engine.propose(img);
            ImageProposals ip;
            ip.image_id = entry.id;
            for (const auto& p : props) {
                ip.boxes.push_back(p.box);
                ip.scores.push_back(p.score);
            }
            results[i] = std::move(ip);
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    save_proposals_json(out_json, results);
    if (!out_csv.empty()) save_proposals_csv(out_csv, results);
    return kExitOk;
}

}  // namespace

int cmd_train(const RunConfig& cfg, const std::string& manifest_path, const std::string& out_dir,
              const std::string& resume_checkpoint) {
    try {
        return cfg.precision == "f32"
                   ? run_train<float>(cfg, manifest_path, out_dir, resume_checkpoint)
                   : run_train<double>(cfg, manifest_path, out_dir, resume_checkpoint);
    } catch (const std::exception& e) {
        std::cerr << "train: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int cmd_propose(const RunConfig& cfg, const std::string& checkpoint_path,
                const std::string& manifest_path, const std::string& out_json,
                const std::string& out_csv) {
    try {
        return cfg.precision == "f32"
                   ? run_propose<float>(cfg, checkpoint_path, manifest_path, out_json, out_csv)
                   : run_propose<double>(cfg, checkpoint_path, manifest_path, out_json, out_csv);
    } catch (const std::exception& e) {
        std::cerr << "propose: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int cmd_eval(const RunConfig& cfg, const std::string& gts_manifest_path,
             const std::string& proposals_path, const std::string& out_json,
             const std::string& out_csv) {
    try {
        DatasetManifest manifest = load_annotations(gts_manifest_path);
        auto proposals = load_proposals_json(proposals_path);
        auto evals = make_image_evals(manifest, proposals);
        MetricsReport report = build_report(evals, cfg.budgets, cfg.recall_curve_ious);
        std::ofstream os(out_json);
        if (!os) throw std::runtime_error("cannot open " + out_json);
        os << report_to_json(report) << "\n";
        if (!out_csv.empty()) {
            std::ofstream cs(out_csv);
            if (!cs) throw std::runtime_error("cannot open " + out_csv);
            cs << report_to_csv(report);
        }
        if (report.empty_gts_warning)
            std::cerr << "eval: warning: no ground-truth boxes in the dataset\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "eval: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int cmd_anchor_stats(const RunConfig& cfg, const std::string& manifest_path,
                     const std::string& out_json) {
    try {
        DatasetManifest manifest = load_annotations(manifest_path);
        std::vector<Box> all_gts;
        for (const auto& e : manifest.images)
            all_gts.insert(all_gts.end(), e.boxes.begin(), e.boxes.end());

        json j;
        j["ratio_quantiles"] = fit_ratio_stats(all_gts);

        // sqrt-area histogram binned around the configured anchor scales
        json hist = json::object();
        std::map<std::string, int64_t> bins;
        for (double s : cfg.anchor_scales) bins[fmt_g17(s)] = 0;
        int64_t out_low = 0, out_high = 0;
        std::vector<double> sorted_scales = cfg.anchor_scales;
        std::sort(sorted_scales.begin(), sorted_scales.end());
        for (const auto& b : all_gts) {
            const double r = std::sqrt(b.area());
            if (r < sorted_scales.front() / std::sqrt(2.0)) {
                ++out_low;
                continue;
            }
            if (r >= sorted_scales.back() * std::sqrt(2.0)) {
                ++out_high;
                continue;
            }
            double best = sorted_scales.front();
            for (double s : sorted_scales)
                if (std::abs(std::log(r / s)) < std::abs(std::log(r / best))) best = s;
            ++bins[fmt_g17(best)];
        }
        for (const auto& [k, v] : bins) hist[k] = v;
        hist["out_low"] = out_low;
        hist["out_high"] = out_high;
        j["scale_histogram"] = hist;

        // positive-anchor coverage per level with native-size grids
        NetConfig nc = make_net_config(cfg);
        json counts = json::object();
        int64_t per_level[3] = {0, 0, 0};
        for (const auto& entry : manifest.images) {
            const int pad_w = (entry.width + 31) / 32 * 32;
            const int pad_h = (entry.height + 31) / 32 * 32;
            for (int m = 0; m < 3; ++m) {
                const int stride = nc.strides[static_cast<size_t>(m)];
                AnchorGrid grid = generate_grid(m + 1, pad_h / stride, pad_w / stride, stride,
                                                nc.clusters[static_cast<size_t>(m)]);
                for (const auto& la : label_anchors(grid, entry.boxes, entry.width, entry.height))
                    if (la.label == kPositive) ++per_level[m];
            }
        }
        for (int m = 0; m < 3; ++m) counts[std::to_string(m + 1)] = per_level[m];
        j["per_level_counts"] = counts;

        std::ofstream os(out_json);
        if (!os) throw std::runtime_error("cannot open " + out_json);
        os << j.dump(2) << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "anchor-stats: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int cmd_grad_check() {
    try {
        auto results = run_grad_suite();
        bool all_pass = true;
        for (const auto& r : results) {
            std::printf("%-16s max_rel_err %.3e  tol %.0e  %s\n", r.op.c_str(), r.max_rel_err,
                        r.tolerance, r.pass ? "PASS" : "FAIL");
            all_pass = all_pass && r.pass;
        }
        return all_pass ? kExitOk : kExitSelfCheck;
    } catch (const std::exception& e) {
        std::cerr << "grad-check: " << e.what() << "\n";
        return kExitSelfCheck;
    }
}

}  // namespace zip

#include "zip/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace zip {

namespace {

using nlohmann::json;

json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["precision"] = c.precision;
    j["anchors"] = {{"scales", c.anchor_scales}, {"ratios", c.anchor_ratios}, {"strides", c.strides}};
    j["net"] = {{"channels", c.channels},
                {"head_channels", c.head_channels},
                {"tower_channels", c.tower_channels},
                {"residual_blocks", c.residual_blocks},
                {"roi_grid", c.roi_grid}};
    j["train"] = {{"iterations", c.iterations},
                  {"lr", c.lr},
                  {"lr_decay", c.lr_decay},
                  {"lr_decay_interval", c.lr_decay_interval},
                  {"momentum", c.momentum},
                  {"weight_decay", c.weight_decay},
                  {"batch_size", c.batch_size},
                  {"per_class_cap", c.per_class_cap},
                  {"roi_batch", c.roi_batch},
                  {"q", c.q},
                  {"max_train_side", c.max_train_side},
                  {"dynamic_scale", c.dynamic_scale},
                  {"gray_class", c.gray_class},
                  {"use_zoomin", c.use_zoomin},
                  {"use_second_branch", c.use_second_branch},
                  {"checkpoint_interval", c.checkpoint_interval}};
    j["nms"] = {{"inner", c.nms_inner}, {"inter", c.nms_inter}, {"final", c.nms_final}};
    j["test"] = {{"scales", c.test_scales},
                 {"first_branch_top_n", c.first_branch_top_n},
                 {"top_k", c.top_k}};
    j["eval"] = {{"budgets", c.budgets}, {"recall_curve_ious", c.recall_curve_ious}};
    j["data"] = {{"n", c.data_n}, {"side", c.data_side}, {"mix", c.data_mix}, {"dir", c.data_dir}};
    return j;
}

RunConfig from_json(const json& j) {
    const json defaults = to_json(RunConfig{});
    // reject any key path that is not part of the schema
    const auto flat = j.flatten();
    const auto known = defaults.flatten();
    for (const auto& [path, value] : flat.items()) {
        (void)value;
        // array elements flatten to /field/0, /field/1 ...; compare the field path
        std::string p = path;
        while (!p.empty() && std::isdigit(static_cast<unsigned char>(p.back()))) {
            const auto slash = p.find_last_of('/');
            p = p.substr(0, slash);
        }
        bool ok = false;
        for (const auto& [kp, kv] : known.items()) {
            (void)kv;
            std::string k = kp;
            while (!k.empty() && std::isdigit(static_cast<unsigned char>(k.back()))) {
                const auto slash = k.find_last_of('/');
                k = k.substr(0, slash);
            }
            if (k == p) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError("unknown config key: " + path);
    }

    RunConfig c;
    auto get = [](const json& node, const char* key, auto& dst) {
        if (node.contains(key)) dst = node.at(key).template get<std::decay_t<decltype(dst)>>();
    };
    get(j, "seed", c.seed);
    get(j, "precision", c.precision);
    if (j.contains("anchors")) {
        get(j["anchors"], "scales", c.anchor_scales);
        get(j["anchors"], "ratios", c.anchor_ratios);
        get(j["anchors"], "strides", c.strides);
    }
    if (j.contains("net")) {
        get(j["net"], "channels", c.channels);
        get(j["net"], "head_channels", c.head_channels);
        get(j["net"], "tower_channels", c.tower_channels);
        get(j["net"], "residual_blocks", c.residual_blocks);
        get(j["net"], "roi_grid", c.roi_grid);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        get(t, "iterations", c.iterations);
        get(t, "lr", c.lr);
        get(t, "lr_decay", c.lr_decay);
        get(t, "lr_decay_interval", c.lr_decay_interval);
        get(t, "momentum", c.momentum);
        get(t, "weight_decay", c.weight_decay);
        get(t, "batch_size", c.batch_size);
        get(t, "per_class_cap", c.per_class_cap);
        get(t, "roi_batch", c.roi_batch);
        get(t, "q", c.q);
        get(t, "max_train_side", c.max_train_side);
        get(t, "dynamic_scale", c.dynamic_scale);
        get(t, "gray_class", c.gray_class);
        get(t, "use_zoomin", c.use_zoomin);
        get(t, "use_second_branch", c.use_second_branch);
        get(t, "checkpoint_interval", c.checkpoint_interval);
    }
    if (j.contains("nms")) {
        get(j["nms"], "inner", c.nms_inner);
        get(j["nms"], "inter", c.nms_inter);
        get(j["nms"], "final", c.nms_final);
    }
    if (j.contains("test")) {
        get(j["test"], "scales", c.test_scales);
        get(j["test"], "first_branch_top_n", c.first_branch_top_n);
        get(j["test"], "top_k", c.top_k);
    }
    if (j.contains("eval")) {
        get(j["eval"], "budgets", c.budgets);
        get(j["eval"], "recall_curve_ious", c.recall_curve_ious);
    }
    if (j.contains("data")) {
        get(j["data"], "n", c.data_n);
        get(j["data"], "side", c.data_side);
        get(j["data"], "mix", c.data_mix);
        get(j["data"], "dir", c.data_dir);
    }
    return c;
}

void validate(const RunConfig& c) {
    auto require = [](bool ok, const std::string& field, const std::string& why) {
        if (!ok) throw ConfigError("config field " + field + ": " + why);
    };
    require(c.precision == "f64" || c.precision == "f32", "precision", "must be f64 or f32");
    require(!c.anchor_scales.empty(), "anchors.scales", "must not be empty");
    for (double s : c.anchor_scales) require(s > 0, "anchors.scales", "must be positive");
    for (double r : c.anchor_ratios) require(r > 0, "anchors.ratios", "must be positive");
    require(c.strides == std::vector<int>{8, 16, 32}, "anchors.strides",
            "the stage layout fixes strides at [8,16,32]");
    require(c.channels.size() == 3, "net.channels", "expected 3 stage widths");
    for (int ch : c.channels) require(ch >= 1, "net.channels", "must be positive");
    require(c.head_channels >= 1, "net.head_channels", "must be positive");
    require(c.tower_channels >= 1, "net.tower_channels", "must be positive");
    require(c.residual_blocks >= 1, "net.residual_blocks", "must be positive");
    require(c.roi_grid.size() == 2 && c.roi_grid[0] >= 1 && c.roi_grid[1] >= 1, "net.roi_grid",
            "expected two positive extents");
    require(c.iterations >= 0, "train.iterations", "must be non-negative");
    require(c.lr > 0, "train.lr", "must be positive");
    require(c.lr_decay > 0 && c.lr_decay <= 1, "train.lr_decay", "must lie in (0,1]");
    require(c.lr_decay_interval >= 1, "train.lr_decay_interval", "must be positive");
    require(c.momentum >= 0 && c.momentum < 1, "train.momentum", "must lie in [0,1)");
    require(c.weight_decay >= 0, "train.weight_decay", "must be non-negative");
    require(c.batch_size >= 1, "train.batch_size", "must be positive");
    require(c.per_class_cap >= 1, "train.per_class_cap", "must be positive");
    require(c.batch_size >= c.per_class_cap, "train.batch_size",
            "must be at least the per-class cap");
    require(c.roi_batch >= 1, "train.roi_batch", "must be positive");
    require(c.q >= 1, "train.q", "must be at least 1");
    require(c.max_train_side >= 64, "train.max_train_side", "must be at least 64");
    for (auto [v, name] : {std::pair<double, const char*>{c.nms_inner, "nms.inner"},
                           {c.nms_inter, "nms.inter"},
                           {c.nms_final, "nms.final"}})
        require(v > 0 && v <= 1, name, "must lie in (0,1]");
    require(!c.test_scales.empty(), "test.scales", "must not be empty");
    for (int s : c.test_scales) require(s >= 32, "test.scales", "must be at least 32");
    require(c.first_branch_top_n >= 1, "test.first_branch_top_n", "must be positive");
    require(c.top_k >= 1, "test.top_k", "must be positive");
    require(!c.budgets.empty(), "eval.budgets", "must not be empty");
    for (int b : c.budgets) require(b >= 1, "eval.budgets", "must be positive");
    for (double t : c.recall_curve_ious)
        require(t > 0 && t <= 1, "eval.recall_curve_ious", "must lie in (0,1]");
    require(c.data_n >= 1, "data.n", "must be positive");
    require(c.data_side >= 64, "data.side", "must be at least 64");
    require(c.data_mix.size() == 3, "data.mix", "expected 3 weights");
    double mix_sum = 0;
    for (double m : c.data_mix) {
        require(m >= 0, "data.mix", "weights must be non-negative");
        mix_sum += m;
    }
    require(mix_sum > 0, "data.mix", "weights must sum above 0");

    // every anchor level must end up with at least one template
    auto clusters = cluster_by_level(make_templates(c.anchor_scales, c.anchor_ratios));
    for (size_t m = 0; m < clusters.size(); ++m)
        require(!clusters[m].empty(), "anchors.scales",
                "level " + std::to_string(m + 1) + " has no templates");
}

}  // namespace

RunConfig default_config() { return RunConfig{}; }

RunConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig c = from_json(j);
    validate(c);
    return c;
}

std::string config_to_json_text(const RunConfig& cfg) { return to_json(cfg).dump(2); }

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json j = to_json(RunConfig{});
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file " + path);
        std::stringstream buf;
        buf << is.rdbuf();
        try {
            j = json::parse(buf.str());
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("config parse error: ") + e.what());
        }
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + ov + "' is not of the form key.path=value");
        std::string key = ov.substr(0, eq);
        std::string value = ov.substr(eq + 1);
        std::replace(key.begin(), key.end(), '.', '/');
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (const json::parse_error&) {
            parsed = value;  // bare strings stay strings
        }
        j[json::json_pointer("/" + key)] = parsed;
    }
    RunConfig c = from_json(j);
    validate(c);
    return c;
}

NetConfig make_net_config(const RunConfig& cfg) {
    NetConfig nc;
    nc.channels = cfg.channels;
    nc.head_channels = cfg.head_channels;
    nc.tower_channels = cfg.tower_channels;
    nc.residual_blocks = cfg.residual_blocks;
    nc.roi_grid_h = cfg.roi_grid[0];
    nc.roi_grid_w = cfg.roi_grid[1];
    nc.strides = cfg.strides;
    nc.clusters = cluster_by_level(make_templates(cfg.anchor_scales, cfg.anchor_ratios));
    nc.use_zoomin = cfg.use_zoomin;
    return nc;
}

TrainSettings make_train_settings(const RunConfig& cfg) {
    TrainSettings ts;
    ts.q = cfg.q;
    ts.momentum = cfg.momentum;
    ts.weight_decay = cfg.weight_decay;
    ts.batch_size = cfg.batch_size;
    ts.per_class_cap = cfg.per_class_cap;
    ts.roi_batch = cfg.roi_batch;
    ts.max_train_side = cfg.max_train_side;
    ts.inner_nms = cfg.nms_inner;
    ts.dynamic_scale = cfg.dynamic_scale;
    ts.gray_class = cfg.gray_class;
    ts.use_second_branch = cfg.use_second_branch;
    return ts;
}

InferenceSettings make_inference_settings(const RunConfig& cfg) {
    InferenceSettings is;
    is.scales = cfg.test_scales;
    is.inner_nms = cfg.nms_inner;
    is.inter_nms = cfg.nms_inter;
    is.final_nms = cfg.nms_final;
    is.first_branch_top_n = cfg.first_branch_top_n;
    is.q = cfg.q;
    is.top_k = cfg.top_k;
    is.use_second_branch = cfg.use_second_branch;
    return is;
}

}  // namespace zip

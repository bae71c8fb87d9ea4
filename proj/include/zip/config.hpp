#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zip/inference.hpp"
#include "zip/zipnet.hpp"

namespace zip {

// Thrown for malformed configs; the message names the offending field.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RunConfig {
    uint64_t seed = 1;
    std::string precision = "f64";  // "f64" | "f32"

    // anchors
    std::vector<double> anchor_scales = {16, 32, 64, 128, 256, 512};
    std::vector<double> anchor_ratios = {0.15, 0.5, 1.0, 2.0, 6.7};
    std::vector<int> strides = {8, 16, 32};

    // net
    std::vector<int> channels = {32, 64, 128};
    int head_channels = 64;
    int tower_channels = 64;
    int residual_blocks = 3;
    std::vector<int> roi_grid = {3, 3};

    // train
    int iterations = 2000;
    double lr = 1e-4;
    double lr_decay = 0.5;
    int lr_decay_interval = 7000;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 300;
    int per_class_cap = 100;
    int roi_batch = 36;
    int q = 2;
    int max_train_side = 320;
    bool dynamic_scale = true;
    bool gray_class = true;
    bool use_zoomin = true;
    bool use_second_branch = true;
    int checkpoint_interval = 0;  // 0 = final checkpoint only

    // nms
    double nms_inner = 0.7;
    double nms_inter = 0.5;
    double nms_final = 0.7;

    // test
    std::vector<int> test_scales = {192, 256, 320};
    int first_branch_top_n = 2000;
    int top_k = 300;

    // eval
    std::vector<int> budgets = {10, 100, 300, 500, 1000};
    std::vector<double> recall_curve_ious = {0.5, 0.8};

    // data generation
    int data_n = 1000;
    int data_side = 192;
    std::vector<double> data_mix = {1.0, 1.0, 1.0};
    std::string data_dir = "data";
};

RunConfig default_config();

// Parses, rejects unknown keys, and range-checks every field.
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& cfg);

// Load from file, then apply dotted-key overrides like "train.q=3" or
// "nms.inner=0.6". An empty path yields the defaults.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

NetConfig make_net_config(const RunConfig& cfg);
TrainSettings make_train_settings(const RunConfig& cfg);
InferenceSettings make_inference_settings(const RunConfig& cfg);

}  // namespace zip

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "zip/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"zoom-out-and-in object proposal network"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_config_opts = [&](CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "JSON config file (defaults when omitted)");
        cmd->add_option("--set", overrides, "dotted-key override, e.g. --set train.q=3")
            ->take_all();
    };

    auto* gen = app.add_subcommand("gen-data", "generate a shape-world dataset");
    add_config_opts(gen);

    auto* train = app.add_subcommand("train", "train a model");
    add_config_opts(train);
    std::string train_manifest, train_out = "run", resume;
    train->add_option("--data", train_manifest, "training manifest JSON")->required();
    train->add_option("--out", train_out, "output directory (checkpoint + loss csv)");
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* propose = app.add_subcommand("propose", "emit proposals for a dataset");
    add_config_opts(propose);
    std::string prop_ckpt, prop_manifest, prop_out = "proposals.json", prop_csv;
    propose->add_option("--checkpoint", prop_ckpt, "trained checkpoint")->required();
    propose->add_option("--data", prop_manifest, "dataset manifest JSON")->required();
    propose->add_option("--out", prop_out, "output proposals JSON");
    propose->add_option("--csv", prop_csv, "also write the flat CSV form");

    auto* eval = app.add_subcommand("eval", "score proposals against ground truth");
    add_config_opts(eval);
    std::string eval_gts, eval_props, eval_out = "report.json", eval_csv;
    eval->add_option("--gts", eval_gts, "ground-truth manifest JSON")->required();
    eval->add_option("--proposals", eval_props, "proposals JSON")->required();
    eval->add_option("--out", eval_out, "metrics report JSON");
    eval->add_option("--csv", eval_csv, "also write the plot-ready CSV");

    auto* stats = app.add_subcommand("anchor-stats", "dataset ratio/scale statistics");
    add_config_opts(stats);
    std::string stats_manifest, stats_out = "anchor_stats.json";
    stats->add_option("--data", stats_manifest, "dataset manifest JSON")->required();
    stats->add_option("--out", stats_out, "output JSON");

    app.add_subcommand("grad-check", "finite-difference audit of every op");

    CLI11_PARSE(app, argc, argv);

    zip::RunConfig cfg;
    try {
        cfg = zip::load_config(config_path, overrides);
    } catch (const std::exception& e) {
        std::cerr << "config: " << e.what() << "\n";
        return zip::kExitUsage;
    }

    if (gen->parsed()) return zip::cmd_gen_data(cfg);
    if (train->parsed()) return zip::cmd_train(cfg, train_manifest, train_out, resume);
    if (propose->parsed()) return zip::cmd_propose(cfg, prop_ckpt, prop_manifest, prop_out, prop_csv);
    if (eval->parsed()) return zip::cmd_eval(cfg, eval_gts, eval_props, eval_out, eval_csv);
    if (stats->parsed()) return zip::cmd_anchor_stats(cfg, stats_manifest, stats_out);
    return zip::cmd_grad_check();
}

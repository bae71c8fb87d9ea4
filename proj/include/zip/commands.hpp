#pragma once

#include <string>
#include <vector>

#include "zip/config.hpp"
#include "zip/data.hpp"
#include "zip/eval.hpp"
#include "zip/inference.hpp"

namespace zip {

// Exit codes shared by every command.
enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitRuntime = 2,
    kExitSelfCheck = 3,
};

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0;
    double tolerance = 1e-4;
    bool pass = false;
};

// Finite-difference audit of every differentiable op, `seeds` random cases
// each; the result lists every op exactly once.
std::vector<GradCheckResult> run_grad_suite(int seeds = 5, uint64_t base_seed = 12345);

int cmd_gen_data(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg, const std::string& manifest_path, const std::string& out_dir,
              const std::string& resume_checkpoint = "");
int cmd_propose(const RunConfig& cfg, const std::string& checkpoint_path,
                const std::string& manifest_path, const std::string& out_json,
                const std::string& out_csv = "");
int cmd_eval(const RunConfig& cfg, const std::string& gts_manifest_path,
             const std::string& proposals_path, const std::string& out_json,
             const std::string& out_csv = "");
int cmd_anchor_stats(const RunConfig& cfg, const std::string& manifest_path,
                     const std::string& out_json);
int cmd_grad_check();

// Shared helpers (also used by the acceptance suite and the Python module).
std::vector<ImageEval> make_image_evals(const DatasetManifest& gts,
                                        const std::vector<ImageProposals>& proposals);
Image load_manifest_image(const std::string& manifest_path, const ImageEntry& entry);

}  // namespace zip

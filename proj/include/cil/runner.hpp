#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cil/config.hpp"
#include "cil/metrics.hpp"

namespace cil {

namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "CIL_OUTPUT_ROOT";
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kResolvedConfigFile = "config.resolved.cfg";
inline constexpr const char* kReportsFile = "reports.jsonl";
inline constexpr const char* kSummaryFile = "summary.csv";

const char* code_version() noexcept;

/// $CIL_OUTPUT_ROOT (or "runs") / <name>-seed<seed>.
fs::path default_output_dir(const RunConfig& cfg);

/// Loads data.path, or generates the synthetic dataset described by [data].
LabeledDataset materialize_dataset(const RunConfig& cfg);

/// FNV-1a over the dataset's CILD encoding, as 16 hex digits.
std::string dataset_fingerprint(const LabeledDataset& ds);

struct RunOutputs {
  fs::path dir;
  std::vector<StepReport> reports;
  std::string summary;
};

/// Runs the protocol and writes manifest.json, config.resolved.cfg,
/// reports.jsonl, summary.csv and checkpoints/step_XX.cilm under `out_dir`.
/// Reports and the summary are rewritten after every step, so a failed run
/// keeps the completed steps; the manifest then records the error and the
/// exception propagates.
RunOutputs run_experiment(const RunConfig& cfg, const fs::path& out_dir, std::ostream* log = nullptr);

/// Configuration stored in a manifest. When the manifest names a dataset,
/// its fingerprint must match the data found now.
RunConfig config_from_manifest(const fs::path& manifest_path);

struct SummaryRow {
  std::size_t step = 0, n_classes = 0;
  double top1 = 0.0, bias_rate = 0.0, eta = 0.0;
  /// Empty for the first row under the exclude-initial convention.
  std::string avg_so_far;
};

struct RunSummary {
  fs::path dir;
  std::string label;
  RunConfig config;
  std::vector<SummaryRow> rows;
  double average = 0.0;
};

/// Reads config.resolved.cfg and summary.csv from a run directory.
RunSummary load_run(const fs::path& dir);

/// Merged comparison.csv plus comparison.svg (accuracy per step, legend
/// labels carry the bracketed average). Throws ConfigError when the runs
/// do not share a protocol.
void compare_runs(const std::vector<fs::path>& run_dirs, const fs::path& out_dir);

/// Line chart of top-1 accuracy (%) against seen classes.
std::string accuracy_svg(const std::vector<RunSummary>& runs);

inline constexpr const char* kAblationAxes[] = {"stem", "bias_correction", "classifier_lr"};

struct AblationArm {
  std::string name;
  RunConfig config;
};

/// stem: patchify, conv. bias_correction: off, on. classifier_lr: 1x, 2x, 10x.
std::vector<AblationArm> ablation_arms(const RunConfig& base, const std::string& axis);

/// Runs every arm with the base seeds under out_root/<arm>, then writes
/// grid.csv and the comparison of all arms into out_root.
std::vector<RunSummary> run_ablation(const RunConfig& base, const std::string& axis, const fs::path& out_root,
                                     std::ostream* log = nullptr);

inline constexpr const char* kGridHeader =
    "axis,arm,stem,balanced_finetune,classifier_lr_multiplier,avg_inc_acc,final_top1,final_bias_rate,final_eta";

}  // namespace cil

// Command-line front end: run, compare, ablate, gen-data.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cil/config.hpp"
#include "cil/data.hpp"
#include "cil/error.hpp"
#include "cil/runner.hpp"

namespace {

using namespace cil;

int report_error(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  if (dynamic_cast<const ParseError*>(&e)) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 3;
  }
  if (dynamic_cast<const TrainingError*>(&e)) {
    std::cerr << "training aborted: " << e.what() << " (completed steps are kept)\n";
    return 4;
  }
  std::cerr << "error: " << e.what() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental learning with micro vision transformers"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_dir;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Run one protocol and write its artifacts");
  auto* cfg_opt = run->add_option("--config", config_path, "Configuration file")->check(CLI::ExistingFile);
  run->add_option("--manifest", manifest_path, "Replay the configuration recorded in a manifest")
      ->check(CLI::ExistingFile)
      ->excludes(cfg_opt);
  run->add_option("--out", out_dir, "Output directory (default: $CIL_OUTPUT_ROOT/<name>-seed<seed>)");
  run->add_option("--seed", seed, "Override run.seed");

  std::vector<std::string> compare_dirs;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "Merge run summaries into one table and chart");
  compare->add_option("dirs", compare_dirs, "Run directories")->required();
  compare->add_option("--out", compare_out, "Output directory")->required();

  std::string ablate_config, axis, ablate_out;
  auto* ablate = app.add_subcommand("ablate", "Run every arm of one ablation axis");
  ablate->add_option("--config", ablate_config, "Base configuration file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--axis", axis, "stem, bias_correction or classifier_lr")->required();
  ablate->add_option("--out", ablate_out, "Output directory (default: $CIL_OUTPUT_ROOT/<name>-<axis>)");

  SyntheticConfig synth;
  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic CILD dataset");
  gen->add_option("--classes", synth.num_classes, "Number of classes")->required()->check(CLI::Range(1, 65535));
  gen->add_option("--per-class", synth.per_class_train, "Training images per class")->required()->check(CLI::PositiveNumber);
  gen->add_option("--test-per-class", synth.per_class_test, "Test images per class")->check(CLI::PositiveNumber);
  gen->add_option("--image-size", synth.image_size, "Square image side")->check(CLI::PositiveNumber);
  gen->add_option("--channels", synth.channels, "Image channels")->check(CLI::PositiveNumber);
  gen->add_option("--difficulty", synth.difficulty, "Noise and shift scale")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", synth.seed, "Generator seed");
  gen->add_option("--out", data_out, "Output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      if (config_path.empty() && manifest_path.empty()) {
        std::cerr << "run: one of --config or --manifest is required\n";
        return 2;
      }
      RunConfig cfg = manifest_path.empty() ? load_config(config_path) : config_from_manifest(manifest_path);
      if (seed) cfg.seed = *seed;
      const fs::path dir = out_dir.empty() ? default_output_dir(cfg) : fs::path(out_dir);
      std::cout << "run " << cfg.name << " (seed " << cfg.seed << ") -> " << dir.string() << "\n";
      const RunOutputs res = run_experiment(cfg, dir, &std::cout);
      std::cout << res.summary;
    } else if (*compare) {
      std::vector<fs::path> dirs(compare_dirs.begin(), compare_dirs.end());
      compare_runs(dirs, compare_out);
      std::cout << "wrote " << (fs::path(compare_out) / "comparison.csv").string() << " and comparison.svg\n";
    } else if (*ablate) {
      const RunConfig base = load_config(ablate_config);
      const fs::path root = ablate_out.empty() ? default_output_dir(base).parent_path() / (base.name + "-" + axis)
                                               : fs::path(ablate_out);
      ablation_arms(base, axis);  // rejects an unknown axis before any training
      run_ablation(base, axis, root, &std::cout);
      std::cout << "wrote " << (root / "grid.csv").string() << "\n";
    } else if (*gen) {
      const LabeledDataset ds = generate_synthetic(synth);
      save_dataset(ds, data_out);
      std::cout << "wrote " << ds.images.size() << " images (" << synth.num_classes << " classes) to " << data_out
                << "\n";
    }
  } catch (const std::exception& e) {
    return report_error(e);
  }
  return 0;
}

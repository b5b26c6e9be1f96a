#include <fstream>
#include <limits>
#include <sstream>

#include "cil/checkpoint.hpp"
#include "cil/error.hpp"
#include "cil/runner.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cil;

namespace {

const char* kTinyConfig = R"(
[run]
preset = custom
name = tiny
seed = 3
[data]
classes = 4
per_class_train = 8
per_class_test = 4
[protocol]
total_classes = 4
initial_classes = 2
increment = 1
budget_policy = per_class
budget = 3
epochs_initial = 1
epochs_step = 1
[optim]
batch_size = 8
[cil]
epochs_finetune = 1
)";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "cil_runner_tests" / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("run writes every artifact") {
  const RunConfig cfg = parse_config(kTinyConfig);
  const fs::path dir = scratch("artifacts");
  const RunOutputs out = run_experiment(cfg, dir);
  REQUIRE(out.reports.size() == 3);
  for (const char* f : {kManifestFile, kResolvedConfigFile, kReportsFile, kSummaryFile}) CHECK(fs::exists(dir / f));
  CHECK(slurp(dir / kSummaryFile) == out.summary);
  CHECK(parse_config(slurp(dir / kResolvedConfigFile)) == cfg);

  const auto manifest = nlohmann::json::parse(slurp(dir / kManifestFile));
  CHECK(manifest["status"] == "complete");
  CHECK(manifest["seeds"]["run"] == 3);
  CHECK(manifest["code_version"] == code_version());
  CHECK(manifest["outputs"]["checkpoints"].size() == 3);
  CHECK_FALSE(manifest["finished_at"].is_null());

  std::istringstream lines(slurp(dir / kReportsFile));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) CHECK(step_report_from_json(line).step == ++n);
  CHECK(n == 3);

  const Checkpoint last = load_checkpoint(dir / "checkpoints" / "step_03.cilm");
  CHECK(last.step == 3);
  CHECK(last.model.num_classes() == 4);
  CHECK(last.store.total() == 12);
  CHECK(last.model.temperature() == doctest::Approx(out.reports.back().eta).epsilon(1e-15));
}

TEST_CASE("manifest replay reproduces the summary byte for byte") {
  const fs::path first = scratch("replay_a"), second = scratch("replay_b");
  run_experiment(parse_config(kTinyConfig), first);
  const RunConfig replayed = config_from_manifest(first / kManifestFile);
  run_experiment(replayed, second);
  CHECK(slurp(first / kSummaryFile) == slurp(second / kSummaryFile));
  CHECK(slurp(first / kResolvedConfigFile) == slurp(second / kResolvedConfigFile));
  CHECK(slurp(first / "checkpoints" / "step_03.cilm") == slurp(second / "checkpoints" / "step_03.cilm"));
}

TEST_CASE("manifest replay rejects a changed dataset file") {
  const fs::path dir = scratch("fingerprint");
  const fs::path data = dir / "data.cild";
  SyntheticConfig s;
  s.num_classes = 4;
  s.per_class_train = 8;
  s.per_class_test = 4;
  save_dataset(generate_synthetic(s), data);
  RunConfig cfg = parse_config(kTinyConfig);
  cfg.data.path = data.string();
  run_experiment(cfg, dir / "run");
  CHECK_NOTHROW(config_from_manifest(dir / "run" / kManifestFile));
  s.seed = 99;
  save_dataset(generate_synthetic(s), data);
  CHECK_THROWS_AS(config_from_manifest(dir / "run" / kManifestFile), ConfigError);
}

TEST_CASE("a runtime failure keeps the completed steps") {
  RunConfig cfg = parse_config(kTinyConfig);
  cfg.engine.lambda_fixed = std::numeric_limits<double>::infinity();
  const fs::path dir = scratch("failure");
  CHECK_THROWS_AS(run_experiment(cfg, dir), TrainingError);
  const auto manifest = nlohmann::json::parse(slurp(dir / kManifestFile));
  CHECK(manifest["status"] == "failed");
  CHECK(manifest["error"].get<std::string>().find("step 2") != std::string::npos);
  const std::string summary = slurp(dir / kSummaryFile);
  CHECK(summary.find("\n1,2,") != std::string::npos);
  CHECK(summary.find("\n2,") == std::string::npos);
  CHECK(fs::exists(dir / "checkpoints" / "step_01.cilm"));
}

TEST_CASE("compare") {
  const fs::path run = scratch("compare_run");
  run_experiment(parse_config(kTinyConfig), run);
  const fs::path out = scratch("compare_out");

  SUBCASE("a run against itself gives identical curves") {
    compare_runs({run, run}, out);
    std::istringstream csv(slurp(out / "comparison.csv"));
    std::string header, line;
    std::getline(csv, header);
    std::vector<std::string> rows;
    while (std::getline(csv, line)) rows.push_back(line.substr(line.find(',')));
    REQUIRE(rows.size() == 6);
    for (std::size_t i = 0; i < 3; ++i) CHECK(rows[i] == rows[i + 3]);
    const std::string svg = slurp(out / "comparison.svg");
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("<polyline") != std::string::npos);
    char avg[32];
    std::snprintf(avg, sizeof(avg), "[%.2f]", 100.0 * load_run(run).average);
    CHECK(svg.find(avg) != std::string::npos);
  }
  SUBCASE("protocol mismatch") {
    RunConfig other = parse_config(kTinyConfig);
    other.protocol.shuffle_seed = 5;
    const fs::path dir = scratch("compare_other");
    run_experiment(other, dir);
    CHECK_THROWS_AS(compare_runs({run, dir}, out), ConfigError);
  }
  SUBCASE("empty run directory") {
    const fs::path empty = scratch("compare_empty");
    fs::create_directories(empty);
    CHECK_THROWS_AS(compare_runs({empty}, out), ConfigError);
    CHECK_THROWS_AS(compare_runs({}, out), ConfigError);
  }
}

TEST_CASE("ablation arms") {
  const RunConfig base = parse_config(kTinyConfig);
  CHECK(ablation_arms(base, "stem").size() == 2);
  CHECK(ablation_arms(base, "bias_correction").size() == 2);
  const auto lr = ablation_arms(base, "classifier_lr");
  REQUIRE(lr.size() == 3);
  CHECK(lr[0].config.engine.classifier_lr_multiplier == 1.0);
  CHECK(lr[1].config.engine.classifier_lr_multiplier == 2.0);
  CHECK(lr[2].config.engine.classifier_lr_multiplier == 10.0);
  CHECK(lr[2].config.name == "tiny-classifier_lr-10x");
  CHECK(lr[0].config.seed == base.seed);
  CHECK_THROWS_AS(ablation_arms(base, "depth"), ConfigError);
}

TEST_CASE("ablation run emits one grid row per arm") {
  const fs::path root = scratch("ablate");
  const auto runs = run_ablation(parse_config(kTinyConfig), "stem", root);
  CHECK(runs.size() == 2);
  std::istringstream grid(slurp(root / "grid.csv"));
  std::string line;
  std::getline(grid, line);
  CHECK(line == kGridHeader);
  std::size_t rows = 0;
  while (std::getline(grid, line)) {
    ++rows;
    CHECK(line.rfind("stem,stem-", 0) == 0);
  }
  CHECK(rows == 2);
  CHECK(fs::exists(root / "comparison.svg"));
}

TEST_CASE("default output directory honours the environment") {
  RunConfig cfg = parse_config(kTinyConfig);
  setenv(kOutputRootEnv, "/tmp/cil_root", 1);
  CHECK(default_output_dir(cfg) == fs::path("/tmp/cil_root/tiny-seed3"));
  unsetenv(kOutputRootEnv);
  CHECK(default_output_dir(cfg) == fs::path("runs/tiny-seed3"));
}

#include "cil/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "cil/checkpoint.hpp"
#include "cil/engine.hpp"
#include "cil/error.hpp"
#include "cil/rng.hpp"
#include "json.hpp"

#ifndef CIL_VERSION
#define CIL_VERSION "unknown"
#endif

namespace cil {

using nlohmann::json;

const char* code_version() noexcept { return CIL_VERSION; }

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("run", "missing " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%02zu.cilm", step);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

fs::path default_output_dir(const RunConfig& cfg) {
  const char* root = std::getenv(kOutputRootEnv);
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return base / (cfg.name + "-seed" + std::to_string(cfg.seed));
}

LabeledDataset materialize_dataset(const RunConfig& cfg) {
  if (!cfg.data.path.empty()) return load_dataset(cfg.data.path);
  return generate_synthetic(cfg.data.synthetic);
}

std::string dataset_fingerprint(const LabeledDataset& ds) {
  const auto bytes = encode_dataset(ds);
  const std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunOutputs run_experiment(const RunConfig& cfg, const fs::path& out_dir, std::ostream* log) {
  cfg.validate();
  const LabeledDataset ds = materialize_dataset(cfg);
  fs::create_directories(out_dir / "checkpoints");
  const std::string resolved = to_config_text(cfg);
  write_text(out_dir / kResolvedConfigFile, resolved);

  json manifest;
  manifest["format"] = "cil-manifest/1";
  manifest["code_version"] = code_version();
  manifest["preset"] = to_string(cfg.preset);
  manifest["seeds"] = {{"run", cfg.seed},
                       {"shuffle", cfg.protocol.shuffle_seed},
                       {"data", cfg.data.path.empty() ? json(cfg.data.synthetic.seed) : json(nullptr)}};
  manifest["config"] = resolved;
  manifest["dataset"] = {{"source", cfg.data.path.empty() ? "synthetic" : cfg.data.path},
                         {"fingerprint", dataset_fingerprint(ds)}};
  manifest["started_at"] = utc_now();
  manifest["finished_at"] = nullptr;
  manifest["status"] = "running";
  manifest["outputs"] = {{"config", kResolvedConfigFile},
                         {"reports", kReportsFile},
                         {"summary", kSummaryFile},
                         {"checkpoints", json::array()}};
  const fs::path manifest_path = out_dir / kManifestFile;
  write_text(manifest_path, manifest.dump(2) + "\n");

  RunOutputs outputs;
  outputs.dir = out_dir;
  std::string jsonl;
  auto on_step = [&](const StepReport& r, const ModelState& model, const ExemplarStore& store) {
    outputs.reports.push_back(r);
    jsonl += to_jsonl(r) + "\n";
    write_text(out_dir / kReportsFile, jsonl);
    outputs.summary = summary_csv(outputs.reports, cfg.avg_includes_initial);
    write_text(out_dir / kSummaryFile, outputs.summary);
    const std::string name = checkpoint_name(r.step);
    save_checkpoint(Checkpoint{static_cast<std::uint32_t>(r.step), model, store,
                               static_cast<std::uint16_t>(ds.channels), static_cast<std::uint16_t>(ds.height),
                               static_cast<std::uint16_t>(ds.width)},
                    out_dir / "checkpoints" / name);
    manifest["outputs"]["checkpoints"].push_back("checkpoints/" + name);
    if (log) {
      *log << "step " << r.step << ": " << r.n_classes << " classes, top1 " << fixed6(r.top1) << ", bias "
           << fixed6(r.bias_rate) << ", eta " << fixed6(r.eta) << "\n"
           << std::flush;
    }
  };

  // An empty summary (header only) exists even if step 1 fails.
  write_text(out_dir / kReportsFile, "");
  write_text(out_dir / kSummaryFile, summary_csv({}, cfg.avg_includes_initial));
  try {
    run_protocol(ds, cfg.protocol, cfg.model, cfg.engine, cfg.seed, on_step);
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["finished_at"] = utc_now();
    write_text(manifest_path, manifest.dump(2) + "\n");
    throw;
  }
  manifest["status"] = "complete";
  manifest["finished_at"] = utc_now();
  write_text(manifest_path, manifest.dump(2) + "\n");
  return outputs;
}

RunConfig config_from_manifest(const fs::path& manifest_path) {
  json m;
  try {
    m = json::parse(read_text(manifest_path));
  } catch (const json::exception& e) {
    throw ConfigError("manifest", std::string("not a valid manifest: ") + e.what());
  }
  if (!m.contains("config") || !m["config"].is_string()) throw ConfigError("manifest.config", "missing");
  RunConfig cfg = parse_config(m["config"].get<std::string>());
  if (m.contains("dataset") && m["dataset"].contains("fingerprint")) {
    const std::string want = m["dataset"]["fingerprint"].get<std::string>();
    const std::string have = dataset_fingerprint(materialize_dataset(cfg));
    if (want != have) {
      throw ConfigError("manifest.dataset", "dataset fingerprint " + have + " differs from recorded " + want);
    }
  }
  return cfg;
}

RunSummary load_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("compare", dir.string() + " is not a run directory");
  if (!fs::exists(dir / kResolvedConfigFile) || !fs::exists(dir / kSummaryFile)) {
    throw ConfigError("compare", dir.string() + " holds no completed run (missing " + kResolvedConfigFile +
                                     " or " + kSummaryFile + ")");
  }
  RunSummary run;
  run.dir = dir;
  run.config = parse_config(read_text(dir / kResolvedConfigFile));
  run.label = run.config.name;
  std::istringstream in(read_text(dir / kSummaryFile));
  std::string line;
  std::getline(in, line);
  if (line != kSummaryHeader) throw ConfigError("compare", "unexpected summary header in " + dir.string());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != 6) throw ConfigError("compare", "malformed summary row in " + dir.string());
    SummaryRow row;
    row.step = std::stoul(cells[0]);
    row.n_classes = std::stoul(cells[1]);
    row.top1 = std::stod(cells[2]);
    row.bias_rate = std::stod(cells[3]);
    row.eta = std::stod(cells[4]);
    row.avg_so_far = cells[5];
    run.rows.push_back(row);
  }
  if (run.rows.empty()) throw ConfigError("compare", dir.string() + " has no completed steps");
  std::vector<double> acc;
  for (const auto& r : run.rows) acc.push_back(r.top1);
  run.average = average_incremental_accuracy(acc, run.config.avg_includes_initial || acc.size() < 2);
  return run;
}

namespace {

bool same_protocol(const ProtocolConfig& a, const ProtocolConfig& b) {
  return a.total_classes == b.total_classes && a.initial_classes == b.initial_classes &&
         a.increment == b.increment && a.shuffle_seed == b.shuffle_seed;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

std::string accuracy_svg(const std::vector<RunSummary>& runs) {
  const double w = 640, h = 400, left = 60, right = 200, top = 30, bottom = 50;
  const double pw = w - left - right, ph = h - top - bottom;
  std::size_t x_min = runs.front().rows.front().n_classes, x_max = x_min;
  for (const auto& r : runs)
    for (const auto& row : r.rows) {
      x_min = std::min(x_min, row.n_classes);
      x_max = std::max(x_max, row.n_classes);
    }
  const double span = x_max > x_min ? static_cast<double>(x_max - x_min) : 1.0;
  auto px = [&](std::size_t n) { return left + pw * (static_cast<double>(n - x_min) / span); };
  auto py = [&](double acc) { return top + ph * (1.0 - acc); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<!-- generated " << utc_now() << " -->\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 "
    << w << " " << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int tick = 0; tick <= 100; tick += 20) {
    const double y = py(tick / 100.0);
    s << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << left + pw << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/>\n"
      << "<text x=\"" << left - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << tick << "</text>\n";
  }
  std::vector<std::size_t> xs;
  for (const auto& row : runs.front().rows) xs.push_back(row.n_classes);
  for (auto n : xs) {
    s << "<line x1=\"" << px(n) << "\" y1=\"" << top + ph << "\" x2=\"" << px(n) << "\" y2=\"" << top + ph + 5
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << px(n) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << n << "</text>\n";
  }
  s << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n"
    << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">Number of classes</text>\n"
    << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << "Top-1 accuracy (%)</text>\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const char* color = palette[i % std::size(palette)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& row : runs[i].rows) s << px(row.n_classes) << "," << py(row.top1) << " ";
    s << "\"/>\n";
    for (const auto& row : runs[i].rows) {
      s << "<circle cx=\"" << px(row.n_classes) << "\" cy=\"" << py(row.top1) << "\" r=\"3\" fill=\"" << color
        << "\"/>\n";
    }
    const double ly = top + 14 + 18 * static_cast<double>(i);
    s << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\""
      << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
      << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\">" << runs[i].label << " ["
      << percent(runs[i].average) << "]</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

void compare_runs(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw ConfigError("compare", "no run directories given");
  std::vector<RunSummary> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));
  for (const auto& r : runs) {
    if (!same_protocol(r.config.protocol, runs.front().config.protocol)) {
      throw ConfigError("protocol", r.dir.string() + " uses a different protocol than " + runs.front().dir.string());
    }
  }
  // Disambiguate repeated labels by directory name.
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (std::size_t j = 0; j < runs.size(); ++j)
      if (i != j && runs[i].label == runs[j].label) {
        runs[i].label = runs[i].dir.filename().string();
        break;
      }

  std::string csv = "run,step,n_classes,top1,bias_rate,eta,avg_inc_acc_so_far,avg_inc_acc\n";
  for (const auto& r : runs) {
    for (const auto& row : r.rows) {
      csv += r.label + "," + std::to_string(row.step) + "," + std::to_string(row.n_classes) + "," +
             fixed6(row.top1) + "," + fixed6(row.bias_rate) + "," + fixed6(row.eta) + "," + row.avg_so_far + "," +
             fixed6(r.average) + "\n";
    }
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "comparison.csv", csv);
  write_text(out_dir / "comparison.svg", accuracy_svg(runs));
}

std::vector<AblationArm> ablation_arms(const RunConfig& base, const std::string& axis) {
  std::vector<AblationArm> arms;
  auto arm = [&](const std::string& suffix, auto&& edit) {
    AblationArm a{axis + "-" + suffix, base};
    edit(a.config);
    a.config.name = base.name + "-" + a.name;
    a.config.validate();
    arms.push_back(std::move(a));
  };
  if (axis == "stem") {
    arm("patchify", [](RunConfig& c) { c.model.stem = StemKind::patchify; });
    arm("conv", [](RunConfig& c) { c.model.stem = StemKind::conv; });
  } else if (axis == "bias_correction") {
    arm("off", [](RunConfig& c) { c.engine.balanced_finetune = false; });
    arm("on", [](RunConfig& c) { c.engine.balanced_finetune = true; });
  } else if (axis == "classifier_lr") {
    for (double m : {1.0, 2.0, 10.0}) {
      arm(std::to_string(static_cast<int>(m)) + "x", [m](RunConfig& c) { c.engine.classifier_lr_multiplier = m; });
    }
  } else {
    throw ConfigError("axis", "unknown ablation axis '" + axis + "' (expected stem, bias_correction or classifier_lr)");
  }
  return arms;
}

std::vector<RunSummary> run_ablation(const RunConfig& base, const std::string& axis, const fs::path& out_root,
                                     std::ostream* log) {
  const auto arms = ablation_arms(base, axis);
  std::vector<fs::path> dirs;
  std::vector<RunSummary> summaries;
  std::string grid = std::string(kGridHeader) + "\n";
  for (const auto& a : arms) {
    if (log) *log << "== " << a.name << "\n";
    const fs::path dir = out_root / a.name;
    run_experiment(a.config, dir, log);
    dirs.push_back(dir);
    RunSummary s = load_run(dir);
    const SummaryRow& last = s.rows.back();
    grid += axis + "," + a.name + "," + to_string(a.config.model.stem) + "," +
            (a.config.engine.balanced_finetune ? "true" : "false") + "," +
            fixed6(a.config.engine.classifier_lr_multiplier) + "," + fixed6(s.average) + "," + fixed6(last.top1) +
            "," + fixed6(last.bias_rate) + "," + fixed6(last.eta) + "\n";
    summaries.push_back(std::move(s));
  }
  write_text(out_root / "grid.csv", grid);
  compare_runs(dirs, out_root);
  return summaries;
}

}  // namespace cil

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cil/data.hpp"
#include "cil/engine.hpp"
#include "cil/model.hpp"

namespace cil {

/// Named default sets. `toy` and `paper` also enforce the per-step epoch
/// rule; `custom` accepts any epoch counts.
enum class Preset { toy, paper, custom };

const char* to_string(Preset preset) noexcept;
Preset parse_preset(const std::string& text);

struct DataSource {
  /// CILD file to load; empty means generate from `synthetic`.
  std::string path;
  SyntheticConfig synthetic;
};

/// Everything a run depends on. Produced by parse_config with every default
/// materialized.
struct RunConfig {
  Preset preset = Preset::toy;
  std::string name = "run";
  std::uint64_t seed = 1;
  bool avg_includes_initial = true;
  DataSource data;
  ProtocolConfig protocol;
  ModelSpec model;
  EngineConfig engine;

  /// Applies every module precondition; throws ConfigError naming the field.
  void validate() const;
  bool operator==(const RunConfig& other) const;
};

RunConfig preset_defaults(Preset preset);

/// Per-step epochs prescribed by a preset: the short schedule when the first
/// step holds exactly half of all classes, the long one otherwise.
std::size_t preset_step_epochs(Preset preset, std::size_t total_classes, std::size_t initial_classes);

/// Parses `[section]` / `key = value` text. `#` and `;` start comments.
/// Unknown sections or keys, duplicates and malformed values raise
/// ConfigError with a `section.key` field path. The result is validated.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Every key in a fixed order; parse_config(to_config_text(c)) == c.
std::string to_config_text(const RunConfig& cfg);

}  // namespace cil

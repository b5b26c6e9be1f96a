#include "cil/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "cil/error.hpp"

namespace cil {

const char* to_string(Preset preset) noexcept {
  switch (preset) {
    case Preset::toy: return "toy";
    case Preset::paper: return "paper";
    case Preset::custom: return "custom";
  }
  return "custom";
}

Preset parse_preset(const std::string& text) {
  if (text == "toy") return Preset::toy;
  if (text == "paper") return Preset::paper;
  if (text == "custom") return Preset::custom;
  throw ConfigError("run.preset", "expected toy, paper or custom, got '" + text + "'");
}

RunConfig preset_defaults(Preset preset) {
  RunConfig c;
  c.preset = preset;
  if (preset == Preset::paper) {
    // ImageNet-100 protocol 1 with the ViT-ti layout; expressible, not desk-runnable.
    c.data.synthetic.num_classes = 100;
    c.data.synthetic.per_class_train = 1300;
    c.data.synthetic.per_class_test = 50;
    c.data.synthetic.image_size = 224;
    c.protocol.total_classes = 100;
    c.protocol.initial_classes = 50;
    c.protocol.increment = 10;
    c.protocol.budget = BudgetPolicy::per_class(20);
    c.protocol.epochs_initial = 800;
    c.protocol.epochs_step = 50;
    c.model = ModelSpec::vit_tiny(StemKind::conv);
    c.engine.batch_size = 1024;
    c.engine.base_lr = 2.5e-4;
    c.engine.warmup_epochs = 5;
    return c;
  }
  // Toy scale: protocol 1 shape (half the classes first, then single-class
  // steps) with epoch counts divided by 25.
  c.protocol.total_classes = 10;
  c.protocol.initial_classes = 5;
  c.protocol.increment = 1;
  c.protocol.budget = BudgetPolicy::per_class(20);
  c.protocol.epochs_initial = 32;
  c.protocol.epochs_step = 2;
  c.model = ModelSpec::toy(StemKind::conv);
  return c;
}

std::size_t preset_step_epochs(Preset preset, std::size_t total_classes, std::size_t initial_classes) {
  const bool half = initial_classes * 2 == total_classes;
  switch (preset) {
    case Preset::paper: return half ? 50 : 200;
    case Preset::toy: return half ? 2 : 8;
    case Preset::custom: break;
  }
  throw ContractError("preset_step_epochs: custom preset has no epoch rule");
}

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text, const std::string& field) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(field, "expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& text, const std::string& field) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(field, "expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& text, const std::string& field) {
  if (text == "true" || text == "on" || text == "yes" || text == "1") return true;
  if (text == "false" || text == "off" || text == "no" || text == "0") return false;
  throw ConfigError(field, "expected true or false, got '" + text + "'");
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::vector<std::size_t> parse_list(const std::string& text, const std::string& field) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError(field, "empty list element");
    out.push_back(static_cast<std::size_t>(parse_u64(item.substr(b, e - b + 1), field)));
  }
  return out;
}

std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::string section, key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field size_field(std::string section, std::string key, T RunConfig::*group, std::size_t T::*member) {
  return {section, key, [=](const RunConfig& c) { return std::to_string(c.*group.*member); },
          [=](RunConfig& c, const std::string& v, const std::string& f) {
            c.*group.*member = static_cast<std::size_t>(parse_u64(v, f));
          }};
}

template <typename T>
Field double_field(std::string section, std::string key, T RunConfig::*group, double T::*member) {
  return {section, key, [=](const RunConfig& c) { return format_double(c.*group.*member); },
          [=](RunConfig& c, const std::string& v, const std::string& f) { c.*group.*member = parse_double(v, f); }};
}

template <typename T>
Field bool_field(std::string section, std::string key, T RunConfig::*group, bool T::*member) {
  return {section, key, [=](const RunConfig& c) { return format_bool(c.*group.*member); },
          [=](RunConfig& c, const std::string& v, const std::string& f) { c.*group.*member = parse_bool(v, f); }};
}

Field augment_double(std::string key, double AugmentConfig::*member) {
  return {"augment", key, [=](const RunConfig& c) { return format_double(c.engine.augment.*member); },
          [=](RunConfig& c, const std::string& v, const std::string& f) {
            c.engine.augment.*member = parse_double(v, f);
          }};
}

Field augment_bool(std::string key, bool AugmentConfig::*member) {
  return {"augment", key, [=](const RunConfig& c) { return format_bool(c.engine.augment.*member); },
          [=](RunConfig& c, const std::string& v, const std::string& f) {
            c.engine.augment.*member = parse_bool(v, f);
          }};
}

Field adam_double(std::string key, double AdamWConfig::*member) {
  return {"optim", key, [=](const RunConfig& c) { return format_double(c.engine.adam.*member); },
          [=](RunConfig& c, const std::string& v, const std::string& f) { c.engine.adam.*member = parse_double(v, f); }};
}

const std::vector<Field>& fields() {
  using P = ProtocolConfig;
  using M = ModelSpec;
  using E = EngineConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    // [run]
    t.push_back({"run", "preset", [](const RunConfig& c) { return std::string(to_string(c.preset)); },
                 [](RunConfig& c, const std::string& v, const std::string&) { c.preset = parse_preset(v); }});
    t.push_back({"run", "name", [](const RunConfig& c) { return c.name; },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   if (v.empty() || v.find_first_of("/\\") != std::string::npos) {
                     throw ConfigError(f, "must be a non-empty name without path separators");
                   }
                   c.name = v;
                 }});
    t.push_back({"run", "seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v, const std::string& f) { c.seed = parse_u64(v, f); }});
    t.push_back({"run", "avg_includes_initial", [](const RunConfig& c) { return format_bool(c.avg_includes_initial); },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   c.avg_includes_initial = parse_bool(v, f);
                 }});
    t.push_back(size_field("run", "eval_batch", &RunConfig::engine, &E::eval_batch));

    // [data]
    t.push_back({"data", "path", [](const RunConfig& c) { return c.data.path; },
                 [](RunConfig& c, const std::string& v, const std::string&) { c.data.path = v; }});
    auto synth_size = [](std::string key, std::size_t SyntheticConfig::*m) {
      return Field{"data", key, [=](const RunConfig& c) { return std::to_string(c.data.synthetic.*m); },
                   [=](RunConfig& c, const std::string& v, const std::string& f) {
                     c.data.synthetic.*m = static_cast<std::size_t>(parse_u64(v, f));
                   }};
    };
    t.push_back(synth_size("classes", &SyntheticConfig::num_classes));
    t.push_back(synth_size("per_class_train", &SyntheticConfig::per_class_train));
    t.push_back(synth_size("per_class_test", &SyntheticConfig::per_class_test));
    t.push_back(synth_size("image_size", &SyntheticConfig::image_size));
    t.push_back(synth_size("channels", &SyntheticConfig::channels));
    t.push_back({"data", "difficulty", [](const RunConfig& c) { return format_double(c.data.synthetic.difficulty); },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   c.data.synthetic.difficulty = parse_double(v, f);
                 }});
    t.push_back({"data", "seed", [](const RunConfig& c) { return std::to_string(c.data.synthetic.seed); },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   c.data.synthetic.seed = parse_u64(v, f);
                 }});

    // [protocol]
    t.push_back(size_field("protocol", "total_classes", &RunConfig::protocol, &P::total_classes));
    t.push_back(size_field("protocol", "initial_classes", &RunConfig::protocol, &P::initial_classes));
    t.push_back(size_field("protocol", "increment", &RunConfig::protocol, &P::increment));
    t.push_back({"protocol", "budget_policy",
                 [](const RunConfig& c) {
                   return std::string(c.protocol.budget.kind == BudgetPolicy::Kind::total ? "total" : "per_class");
                 },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   if (v == "total") c.protocol.budget.kind = BudgetPolicy::Kind::total;
                   else if (v == "per_class") c.protocol.budget.kind = BudgetPolicy::Kind::per_class;
                   else throw ConfigError(f, "expected per_class or total, got '" + v + "'");
                 }});
    t.push_back({"protocol", "budget", [](const RunConfig& c) { return std::to_string(c.protocol.budget.amount); },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   c.protocol.budget.amount = static_cast<std::size_t>(parse_u64(v, f));
                 }});
    t.push_back(size_field("protocol", "epochs_initial", &RunConfig::protocol, &P::epochs_initial));
    t.push_back(size_field("protocol", "epochs_step", &RunConfig::protocol, &P::epochs_step));
    t.push_back({"protocol", "shuffle_seed", [](const RunConfig& c) { return std::to_string(c.protocol.shuffle_seed); },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   c.protocol.shuffle_seed = parse_u64(v, f);
                 }});

    // [model]
    t.push_back({"model", "stem", [](const RunConfig& c) { return std::string(to_string(c.model.stem)); },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   try {
                     c.model.stem = parse_stem_kind(v);
                   } catch (const std::exception&) {
                     throw ConfigError(f, "expected patchify or conv, got '" + v + "'");
                   }
                 }});
    t.push_back(size_field("model", "image_size", &RunConfig::model, &M::image_size));
    t.push_back(size_field("model", "in_channels", &RunConfig::model, &M::in_channels));
    t.push_back(size_field("model", "patch_size", &RunConfig::model, &M::patch_size));
    t.push_back({"model", "stem_channels", [](const RunConfig& c) { return format_list(c.model.stem_channels); },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   c.model.stem_channels = parse_list(v, f);
                 }});
    t.push_back(size_field("model", "embed_dim", &RunConfig::model, &M::embed_dim));
    t.push_back(size_field("model", "num_blocks", &RunConfig::model, &M::num_blocks));
    t.push_back(size_field("model", "num_heads", &RunConfig::model, &M::num_heads));
    t.push_back(size_field("model", "mlp_ratio", &RunConfig::model, &M::mlp_ratio));
    t.push_back(double_field("model", "initial_temperature", &RunConfig::model, &M::initial_temperature));

    // [optim]
    t.push_back(size_field("optim", "batch_size", &RunConfig::engine, &E::batch_size));
    t.push_back(double_field("optim", "base_lr", &RunConfig::engine, &E::base_lr));
    t.push_back(double_field("optim", "classifier_lr_multiplier", &RunConfig::engine, &E::classifier_lr_multiplier));
    t.push_back(double_field("optim", "weight_decay", &RunConfig::engine, &E::weight_decay));
    t.push_back(size_field("optim", "warmup_epochs", &RunConfig::engine, &E::warmup_epochs));
    t.push_back(double_field("optim", "min_lr", &RunConfig::engine, &E::min_lr));
    t.push_back(adam_double("beta1", &AdamWConfig::beta1));
    t.push_back(adam_double("beta2", &AdamWConfig::beta2));
    t.push_back(adam_double("eps", &AdamWConfig::eps));
    t.push_back({"optim", "clip_norm",
                 [](const RunConfig& c) {
                   return c.engine.adam.clip_norm ? format_double(*c.engine.adam.clip_norm) : std::string("none");
                 },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   if (v == "none") c.engine.adam.clip_norm.reset();
                   else c.engine.adam.clip_norm = parse_double(v, f);
                 }});

    // [augment]
    t.push_back(augment_bool("enabled", &AugmentConfig::enabled));
    t.push_back(augment_bool("mixing", &AugmentConfig::mixing));
    t.push_back(augment_double("apply_prob", &AugmentConfig::apply_prob));
    t.push_back(augment_double("mixup_prob", &AugmentConfig::mixup_prob));
    t.push_back(augment_double("mixup_alpha", &AugmentConfig::mixup_alpha));
    t.push_back(augment_double("cutmix_alpha", &AugmentConfig::cutmix_alpha));
    t.push_back(augment_double("flip_prob", &AugmentConfig::flip_prob));
    t.push_back(augment_double("label_smoothing", &AugmentConfig::label_smoothing));

    // [cil]
    t.push_back(bool_field("cil", "distillation", &RunConfig::engine, &E::distillation));
    t.push_back(double_field("cil", "lambda_base", &RunConfig::engine, &E::lambda_base));
    t.push_back({"cil", "lambda",
                 [](const RunConfig& c) {
                   return c.engine.lambda_fixed ? format_double(*c.engine.lambda_fixed) : std::string("adaptive");
                 },
                 [](RunConfig& c, const std::string& v, const std::string& f) {
                   if (v == "adaptive") c.engine.lambda_fixed.reset();
                   else c.engine.lambda_fixed = parse_double(v, f);
                 }});
    t.push_back(bool_field("cil", "margin_ranking", &RunConfig::engine, &E::margin_ranking));
    t.push_back(double_field("cil", "margin", &RunConfig::engine, &E::margin));
    t.push_back(size_field("cil", "margin_negatives", &RunConfig::engine, &E::margin_negatives));
    t.push_back(double_field("cil", "margin_weight", &RunConfig::engine, &E::margin_weight));
    t.push_back(bool_field("cil", "balanced_finetune", &RunConfig::engine, &E::balanced_finetune));
    t.push_back(size_field("cil", "epochs_finetune", &RunConfig::engine, &E::epochs_finetune));
    t.push_back(double_field("cil", "finetune_lr_scale", &RunConfig::engine, &E::finetune_lr_scale));
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Entry {
  std::string value;
  std::size_t line;
};

}  // namespace

void RunConfig::validate() const {
  engine.validate();
  build_protocol(protocol);
  if (protocol.epochs_initial == 0) throw ConfigError("protocol.epochs_initial", "must be at least 1");
  if (protocol.budget.amount == 0) throw ConfigError("protocol.budget", "must be at least 1");
  ModelSpec spec = model;
  spec.num_classes = protocol.initial_classes;
  spec.validate();
  if (data.path.empty()) {
    const SyntheticConfig& s = data.synthetic;
    if (s.num_classes == 0 || s.per_class_train == 0 || s.per_class_test == 0 || s.image_size == 0 ||
        s.channels == 0) {
      throw ConfigError("data.classes", "synthetic counts must all be at least 1");
    }
    if (s.num_classes > 0xFFFF) throw ConfigError("data.classes", "at most 65535 classes");
    if (!(s.difficulty >= 0.0)) throw ConfigError("data.difficulty", "must be non-negative");
    if (protocol.total_classes > s.num_classes) {
      throw ConfigError("protocol.total_classes", "exceeds data.classes = " + std::to_string(s.num_classes));
    }
    if (model.image_size != s.image_size) {
      throw ConfigError("model.image_size", "must equal data.image_size = " + std::to_string(s.image_size));
    }
    if (model.in_channels != s.channels) {
      throw ConfigError("model.in_channels", "must equal data.channels = " + std::to_string(s.channels));
    }
  }
  if (preset != Preset::custom) {
    const std::size_t want = preset_step_epochs(preset, protocol.total_classes, protocol.initial_classes);
    if (protocol.epochs_step != want) {
      throw ConfigError("protocol.epochs_step",
                        "preset " + std::string(to_string(preset)) + " requires " + std::to_string(want) +
                            " epochs per incremental step for this protocol (got " +
                            std::to_string(protocol.epochs_step) + "); use preset = custom to override");
    }
  }
}

bool RunConfig::operator==(const RunConfig& other) const {
  return to_config_text(*this) == to_config_text(other);
}

RunConfig parse_config(const std::string& text) {
  std::map<std::string, std::map<std::string, Entry>> entries;
  std::set<std::string> known_sections;
  for (const auto& f : fields()) known_sections.insert(f.section);

  std::istringstream in(text);
  std::string raw, section;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!known_sections.count(section)) throw ConfigError(section, "unknown section (" + where + ")");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError(key, "key outside any section (" + where + ")");
    if (!entries[section].emplace(key, Entry{value, line_no}).second) {
      throw ConfigError(section + "." + key, "duplicate key (" + where + ")");
    }
  }

  Preset preset = Preset::toy;
  if (auto s = entries.find("run"); s != entries.end()) {
    if (auto k = s->second.find("preset"); k != s->second.end()) preset = parse_preset(k->second.value);
  }
  RunConfig cfg = preset_defaults(preset);

  std::set<std::string> consumed;
  for (const auto& f : fields()) {
    auto s = entries.find(f.section);
    if (s == entries.end()) continue;
    auto k = s->second.find(f.key);
    if (k == s->second.end()) continue;
    f.set(cfg, k->second.value, f.section + "." + f.key);
    consumed.insert(f.section + "." + f.key);
  }
  for (const auto& [sec, keys] : entries) {
    for (const auto& [key, entry] : keys) {
      const std::string path = sec + "." + key;
      if (!consumed.count(path)) {
        throw ConfigError(path, "unknown key (line " + std::to_string(entry.line) + ")");
      }
    }
  }
  // Presets derive the per-step epochs from the protocol unless given explicitly.
  if (cfg.preset != Preset::custom && !consumed.count("protocol.epochs_step")) {
    cfg.protocol.epochs_step =
        preset_step_epochs(cfg.preset, cfg.protocol.total_classes, cfg.protocol.initial_classes);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace cil

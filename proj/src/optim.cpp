#include "cil/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "cil/error.hpp"

namespace cil {

double scaled_base_lr(double base_lr, std::size_t batch_size, std::size_t reference_batch) {
  if (batch_size == 0) throw ConfigError("optim.batch_size", "must be at least 1");
  return base_lr * static_cast<double>(batch_size) / static_cast<double>(reference_batch);
}

bool exempt_from_decay(const std::string& name) noexcept {
  if (name == kTemperature) return true;
  // Any dotted segment naming a norm layer: "norm", "norm1", "bn0", ...
  std::size_t start = 0;
  while (start <= name.size()) {
    const std::size_t end = std::min(name.find('.', start), name.size());
    const std::string_view seg(name.data() + start, end - start);
    if (seg.rfind("norm", 0) == 0 || seg.rfind("bn", 0) == 0) return true;
    start = end + 1;
  }
  return false;
}

std::vector<ParamGroup> make_param_groups(const ModelState& state, double backbone_lr,
                                          double classifier_lr, double weight_decay,
                                          bool freeze_backbone) {
  ParamGroup bb{kBackboneGroup, {}, backbone_lr, weight_decay, freeze_backbone};
  ParamGroup bb0{kBackboneNoDecayGroup, {}, backbone_lr, 0.0, freeze_backbone};
  ParamGroup cl{kClassifierGroup, {}, classifier_lr, weight_decay, false};
  ParamGroup cl0{kClassifierNoDecayGroup, {}, classifier_lr, 0.0, false};
  for (const auto& [name, _] : state.params) {
    const bool head = ModelState::is_classifier(name);
    const bool exempt = exempt_from_decay(name);
    (head ? (exempt ? cl0 : cl) : (exempt ? bb0 : bb)).members.push_back(name);
  }
  return {bb, bb0, cl, cl0};
}

void check_partition(const std::vector<ParamGroup>& groups, const ModelState& state) {
  std::set<std::string> seen;
  for (const auto& g : groups)
    for (const auto& n : g.members) {
      if (!state.params.count(n)) throw ContractError("group '" + g.name + "' names unknown parameter '" + n + "'");
      if (!seen.insert(n).second) throw ContractError("parameter '" + n + "' is in two groups");
    }
  if (seen.size() != state.params.size()) throw ContractError("parameter groups do not cover the model");
}

void ScheduleConfig::validate() const {
  if (total_epochs == 0) throw ConfigError("optim.total_epochs", "must be at least 1");
  if (warmup_epochs >= total_epochs) {
    throw ConfigError("optim.warmup_epochs", "warmup (" + std::to_string(warmup_epochs) +
                                                 ") must be shorter than training (" +
                                                 std::to_string(total_epochs) + ")");
  }
  if (batch_size == 0) throw ConfigError("optim.batch_size", "must be at least 1");
  if (reference_batch == 0) throw ConfigError("optim.reference_batch", "must be at least 1");
  if (min_lr < 0.0) throw ConfigError("optim.min_lr", "must be non-negative");
}

double lr_at_epoch(const ScheduleConfig& cfg, const ParamGroup& group, std::size_t epoch) {
  cfg.validate();
  if (epoch >= cfg.total_epochs) {
    throw ContractError("epoch " + std::to_string(epoch) + " outside schedule of " +
                        std::to_string(cfg.total_epochs) + " epochs");
  }
  const double peak = scaled_base_lr(group.base_lr, cfg.batch_size, cfg.reference_batch);
  if (cfg.min_lr > peak) {
    throw ConfigError("optim.min_lr", "min_lr exceeds the peak learning rate of group '" +
                                          group.name + "'");
  }
  if (epoch < cfg.warmup_epochs) {
    return cfg.min_lr + (peak - cfg.min_lr) * static_cast<double>(epoch) /
                            static_cast<double>(cfg.warmup_epochs);
  }
  const std::size_t span = cfg.total_epochs - 1 - cfg.warmup_epochs;
  // A single post-warmup epoch trains at the peak.
  if (span == 0 || epoch == cfg.warmup_epochs) return peak;
  const double progress = static_cast<double>(epoch - cfg.warmup_epochs) / static_cast<double>(span);
  return cfg.min_lr + 0.5 * (peak - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
                double lr, double weight_decay, const AdamWConfig& cfg) {
  if (param.size() != grad.size()) throw DimensionError("adamw_step: gradient size mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw TrainingError("non-finite gradient at element " + std::to_string(i));
    }
  }
  if (moments.m.size() != param.size()) {
    moments.m.assign(param.size(), 0.0);
    moments.v.assign(param.size(), 0.0);
    moments.t = 0;
  }
  ++moments.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(moments.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(moments.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * grad[i];
    moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    param[i] -= lr * weight_decay * param[i];
    const double mhat = moments.m[i] / bc1;
    const double vhat = moments.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWConfig cfg)
    : groups_(std::move(groups)), cfg_(cfg) {}

const ParamGroup& AdamW::group(const std::string& name) const {
  for (const auto& g : groups_)
    if (g.name == name) return g;
  throw ContractError("unknown parameter group '" + name + "'");
}

void AdamW::step(ModelState& state, const std::map<std::string, double>& lr_by_group) {
  double sq = 0.0;
  for (const auto& g : groups_) {
    if (g.frozen) continue;
    for (const auto& name : g.members) {
      const Tensor& p = state.param(name);
      if (!p.has_grad()) continue;
      for (double v : p.grad()) {
        if (!std::isfinite(v)) throw TrainingError("non-finite gradient in parameter '" + name + "'");
        sq += v * v;
      }
    }
  }
  double scale = 1.0;
  if (cfg_.clip_norm && std::sqrt(sq) > *cfg_.clip_norm) scale = *cfg_.clip_norm / std::sqrt(sq);

  std::vector<double> scaled;
  for (const auto& g : groups_) {
    if (g.frozen) continue;
    auto it = lr_by_group.find(g.name);
    if (it == lr_by_group.end()) throw ContractError("no learning rate for group '" + g.name + "'");
    for (const auto& name : g.members) {
      Tensor& p = state.param(name);
      if (!p.has_grad()) continue;
      std::span<const double> grad = p.grad();
      if (scale != 1.0) {
        scaled.assign(grad.begin(), grad.end());
        for (double& v : scaled) v *= scale;
        grad = scaled;
      }
      adamw_step(p.data(), grad, moments_[name], it->second, g.weight_decay, cfg_);
    }
  }
  state.clamp_temperature();
}

}  // namespace cil

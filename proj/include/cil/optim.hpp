#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cil/model.hpp"

namespace cil {

inline constexpr std::size_t kReferenceBatch = 512;

/// base_lr * batch_size / reference_batch.
double scaled_base_lr(double base_lr, std::size_t batch_size,
                      std::size_t reference_batch = kReferenceBatch);

struct ParamGroup {
  std::string name;
  std::vector<std::string> members;
  /// Learning rate at the reference batch size, before scaling.
  double base_lr = 0.0;
  double weight_decay = 0.0;
  bool frozen = false;
};

inline constexpr const char* kBackboneGroup = "backbone";
inline constexpr const char* kBackboneNoDecayGroup = "backbone_no_decay";
inline constexpr const char* kClassifierGroup = "classifier";
inline constexpr const char* kClassifierNoDecayGroup = "classifier_no_decay";

/// Temperature and normalization gains/biases skip weight decay.
bool exempt_from_decay(const std::string& name) noexcept;

/// Backbone and classifier groups, each split by decay exemption. The
/// temperature lives in the classifier side.
std::vector<ParamGroup> make_param_groups(const ModelState& state, double backbone_lr,
                                          double classifier_lr, double weight_decay,
                                          bool freeze_backbone = false);

/// Throws ContractError unless the groups partition the model's parameter names.
void check_partition(const std::vector<ParamGroup>& groups, const ModelState& state);

struct ScheduleConfig {
  std::size_t warmup_epochs = 5;
  std::size_t total_epochs = 1;
  double min_lr = 1e-5;
  std::size_t batch_size = kReferenceBatch;
  std::size_t reference_batch = kReferenceBatch;

  void validate() const;
};

/// Linear warmup from min_lr to the scaled peak over warmup_epochs, then
/// cosine decay reaching min_lr at total_epochs - 1. Constant per epoch.
double lr_at_epoch(const ScheduleConfig& cfg, const ParamGroup& group, std::size_t epoch);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip across all updated parameters; off when empty.
  std::optional<double> clip_norm;
};

struct AdamMoments {
  std::vector<double> m, v;
  std::size_t t = 0;
};

/// One decoupled-decay Adam update: p -= lr*wd*p, then the bias-corrected
/// adaptive step. Throws TrainingError (and leaves `param` untouched) on a
/// non-finite gradient.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
                double lr, double weight_decay, const AdamWConfig& cfg);

class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, AdamWConfig cfg = {});

  /// Updates every non-frozen parameter holding a gradient, using
  /// `lr_by_group[group.name]`. All gradients are checked before any write, so
  /// a NaN aborts the whole step.
  void step(ModelState& state, const std::map<std::string, double>& lr_by_group);

  const std::vector<ParamGroup>& groups() const noexcept { return groups_; }
  const ParamGroup& group(const std::string& name) const;
  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  std::vector<ParamGroup> groups_;
  AdamWConfig cfg_;
  std::map<std::string, AdamMoments> moments_;
};

}  // namespace cil

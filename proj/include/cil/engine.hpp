#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cil/augment.hpp"
#include "cil/data.hpp"
#include "cil/memory.hpp"
#include "cil/metrics.hpp"
#include "cil/model.hpp"
#include "cil/optim.hpp"
#include "cil/tensor.hpp"

namespace cil {

struct EngineConfig {
  std::size_t batch_size = 32;
  /// Backbone learning rate at the 512-sample reference batch.
  double base_lr = 1.6e-2;
  double classifier_lr_multiplier = 10.0;
  double weight_decay = 0.24;
  std::size_t warmup_epochs = 1;
  double min_lr = 1e-5;
  AdamWConfig adam;
  AugmentConfig augment;

  bool distillation = true;
  double lambda_base = 3.0;
  /// Replaces the adaptive weight when set.
  std::optional<double> lambda_fixed;

  bool margin_ranking = false;
  double margin = 0.5;
  std::size_t margin_negatives = 2;
  double margin_weight = 1.0;

  bool balanced_finetune = true;
  std::size_t epochs_finetune = 20;
  double finetune_lr_scale = 0.1;

  std::size_t eval_batch = 100;

  /// Rejects margin ranking combined with label mixing, among others.
  void validate() const;
};

/// lambda_base * sqrt(n_old / n_new); zero without old classes.
double adaptive_lambda(double lambda_base, std::size_t n_old, std::size_t n_new);

/// Mean over rows of 1 - cos(f_old, f_new). Gradient reaches only f_new when
/// f_old is a constant.
Var distill_loss(Var f_old, Var f_new);

/// -sum(targets * log(p + 1e-12)) / b.
Var cross_entropy(Var probabilities, Var targets);

/// Normalized weight rows dotted with normalized features, no temperature: [b, n].
Var raw_cosine(const ParamBinding& params, Var features);

/// For each sample whose label is old (< n_old): sum over the `negatives`
/// highest-scoring new classes of max(0, margin - cos_y + cos_k); averaged
/// over those samples. Zero when the batch has no old samples.
Var margin_ranking_loss(Var cosine, std::span<const std::size_t> labels, std::size_t n_old,
                        double margin, std::size_t negatives);

/// Images with labels in class-position space.
struct TrainSet {
  std::vector<const Pixels*> images;
  std::vector<std::size_t> labels;
  std::size_t channels = 3, height = 16, width = 16;

  std::size_t size() const noexcept { return images.size(); }
  Tensor batch(std::span<const std::size_t> indices) const;
};

struct StageResult {
  std::vector<double> loss_trace;
  std::vector<double> eta_trace;
  /// Distillation term at the first iteration (0 when disabled).
  double distill_first_iteration = 0.0;
  bool old_model_unchanged = true;
};

/// Trains every parameter on `data` with augmentation. `old_model` (may be
/// null) supplies distillation targets; its batch norms see the same batch
/// statistics as the live model and it is never written.
StageResult run_stage1(ModelState& model, const ModelState* old_model, const TrainSet& data,
                       std::size_t epochs, double lambda, std::size_t n_old,
                       const EngineConfig& cfg, SplitMix64& rng);

/// Classifier-only training on frozen eval-mode features of `exemplars`, with
/// random flips and plain cross entropy. The backbone is untouched.
StageResult run_balanced_finetune(ModelState& model, const TrainSet& exemplars,
                                  const EngineConfig& cfg, SplitMix64& rng);

/// Herding order over eval-mode, L2-normalized features.
std::vector<std::size_t> herd(const ModelState& model, const TrainSet& candidates,
                              std::size_t budget);

using StepHook = std::function<void(const StepReport&, const ModelState&, const ExemplarStore&)>;

struct ProtocolResult {
  std::vector<StepReport> reports;
  ModelState model;
  ExemplarStore store;
};

/// Initial training, then per step: stage 1 with distillation, herding,
/// balanced finetune and evaluation on every seen class.
ProtocolResult run_protocol(const LabeledDataset& dataset, const ProtocolConfig& protocol,
                            const ModelSpec& spec, const EngineConfig& cfg, std::uint64_t seed,
                            const StepHook& on_step = {});

}  // namespace cil

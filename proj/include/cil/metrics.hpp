#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cil/model.hpp"
#include "cil/tensor.hpp"

namespace cil {

/// counts[true][predicted].
using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth,
                                 std::span<const std::size_t> predicted, std::size_t num_classes);

/// Fraction of old-class samples (rows < n_old) predicted as a new class
/// (columns >= n_old). Zero without old samples.
double old_to_new_bias_rate(const ConfusionMatrix& cm, std::size_t n_old);

/// Mean of per-step accuracies. With include_initial = false the first step
/// is dropped (requires at least two steps).
double average_incremental_accuracy(std::span<const double> step_accuracies,
                                    bool include_initial = true);

struct Evaluation {
  double top1 = 0.0;
  ConfusionMatrix confusion;
};

/// Argmax over the first `class_count` columns of each row.
std::vector<std::size_t> restricted_argmax(const Tensor& scores, std::size_t class_count);

Evaluation evaluate_predictions(std::span<const std::size_t> truth,
                                std::span<const std::size_t> predicted, std::size_t class_count);

/// Eval-mode forward in chunks of `batch`; predictions restricted to the first
/// `class_count` classes.
Evaluation evaluate(const ModelState& state, const Tensor& images,
                    std::span<const std::size_t> labels, std::size_t class_count,
                    std::size_t batch = 100);

struct StepReport {
  std::size_t step = 0;
  std::size_t n_classes = 0;
  std::size_t n_old = 0;
  double top1 = 0.0;
  ConfusionMatrix confusion;
  double bias_rate = 0.0;
  double eta = 0.0;
  /// Mean training loss per epoch, stage 1 then balanced finetune.
  std::vector<double> loss_trace;
  std::vector<double> finetune_loss_trace;
  /// Temperature after each stage-1 epoch.
  std::vector<double> eta_trace;
  /// Metrics measured after stage 1, before balanced finetuning.
  std::optional<double> top1_before_finetune;
  std::optional<double> bias_rate_before_finetune;
  std::size_t exemplar_count = 0;
  /// Distillation weight used in stage 1 and the term's value at its first iteration.
  double lambda = 0.0;
  double distill_first_iteration = 0.0;
  /// Contract checks: old-model hash constant within the step, backbone hash
  /// constant across balanced finetuning.
  bool old_model_unchanged = true;
  bool backbone_frozen_in_finetune = true;
  double wall_clock_seconds = 0.0;
};

/// One JSON object per line. Wall-clock time is the only non-deterministic field.
std::string to_jsonl(const StepReport& report);
StepReport step_report_from_json(const std::string& line);

inline constexpr const char* kSummaryHeader = "step,n_classes,top1,bias_rate,eta,avg_inc_acc_so_far";

/// Header plus one row per step. Fixed six-decimal formatting.
std::string summary_csv(const std::vector<StepReport>& reports, bool include_initial = true);

}  // namespace cil

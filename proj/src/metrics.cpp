#include "cil/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "cil/error.hpp"
#include "json.hpp"

namespace cil {

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth,
                                 std::span<const std::size_t> predicted, std::size_t num_classes) {
  if (truth.size() != predicted.size()) throw DimensionError("confusion_matrix: length mismatch");
  ConfusionMatrix cm(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) {
      throw DimensionError("confusion_matrix: label out of range at sample " + std::to_string(i));
    }
    ++cm[truth[i]][predicted[i]];
  }
  return cm;
}

double old_to_new_bias_rate(const ConfusionMatrix& cm, std::size_t n_old) {
  if (n_old > cm.size()) throw DimensionError("old_to_new_bias_rate: n_old exceeds class count");
  std::size_t moved = 0, total = 0;
  for (std::size_t i = 0; i < n_old; ++i) {
    for (std::size_t j = 0; j < cm[i].size(); ++j) {
      total += cm[i][j];
      if (j >= n_old) moved += cm[i][j];
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(moved) / static_cast<double>(total);
}

double average_incremental_accuracy(std::span<const double> step_accuracies, bool include_initial) {
  const std::size_t skip = include_initial ? 0 : 1;
  if (step_accuracies.size() <= skip) {
    throw ContractError(include_initial ? "average_incremental_accuracy: no steps"
                                        : "average_incremental_accuracy: no incremental steps");
  }
  const auto values = step_accuracies.subspan(skip);
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

std::vector<std::size_t> restricted_argmax(const Tensor& scores, std::size_t class_count) {
  if (scores.rank() != 2) throw DimensionError("restricted_argmax: scores must be [b, k]");
  const std::size_t b = scores.dim(0), k = scores.dim(1);
  if (class_count == 0 || class_count > k) {
    throw DimensionError("restricted_argmax: class_count must lie in [1, " + std::to_string(k) + "]");
  }
  std::vector<std::size_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < class_count; ++j)
      if (scores[i * k + j] > scores[i * k + best]) best = j;
    out[i] = best;
  }
  return out;
}

Evaluation evaluate_predictions(std::span<const std::size_t> truth,
                                std::span<const std::size_t> predicted, std::size_t class_count) {
  Evaluation ev;
  ev.confusion = confusion_matrix(truth, predicted, class_count);
  std::size_t diag = 0;
  for (std::size_t i = 0; i < class_count; ++i) diag += ev.confusion[i][i];
  ev.top1 = truth.empty() ? 0.0 : static_cast<double>(diag) / static_cast<double>(truth.size());
  return ev;
}

Evaluation evaluate(const ModelState& state, const Tensor& images,
                    std::span<const std::size_t> labels, std::size_t class_count,
                    std::size_t batch) {
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw DimensionError("evaluate: images must be [b, c, h, w] with one label each");
  }
  if (class_count > state.num_classes()) {
    throw ContractError("evaluate: model has fewer classes than the evaluated range");
  }
  const std::size_t n = images.dim(0);
  const std::size_t per = n ? images.size() / n : 0;
  std::vector<std::size_t> predicted;
  predicted.reserve(n);
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    Shape shape = images.shape();
    shape[0] = len;
    std::vector<double> chunk(images.storage().begin() + static_cast<std::ptrdiff_t>(start * per),
                              images.storage().begin() + static_cast<std::ptrdiff_t>((start + len) * per));
    const Tensor probs = predict_probabilities(state, extract_features(state, Tensor(shape, std::move(chunk))));
    const auto pred = restricted_argmax(probs, class_count);
    predicted.insert(predicted.end(), pred.begin(), pred.end());
  }
  return evaluate_predictions(labels, predicted, class_count);
}

namespace {

using nlohmann::json;

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<T>(j.get<T>());
}

}  // namespace

std::string to_jsonl(const StepReport& r) {
  json j;
  j["step"] = r.step;
  j["n_classes"] = r.n_classes;
  j["n_old"] = r.n_old;
  j["top1"] = r.top1;
  j["bias_rate"] = r.bias_rate;
  j["eta"] = r.eta;
  j["top1_before_finetune"] = optional_json(r.top1_before_finetune);
  j["bias_rate_before_finetune"] = optional_json(r.bias_rate_before_finetune);
  j["exemplar_count"] = r.exemplar_count;
  j["lambda"] = r.lambda;
  j["distill_first_iteration"] = r.distill_first_iteration;
  j["old_model_unchanged"] = r.old_model_unchanged;
  j["backbone_frozen_in_finetune"] = r.backbone_frozen_in_finetune;
  j["loss_trace"] = r.loss_trace;
  j["finetune_loss_trace"] = r.finetune_loss_trace;
  j["eta_trace"] = r.eta_trace;
  j["confusion_matrix"] = r.confusion;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j.dump();
}

StepReport step_report_from_json(const std::string& line) {
  const json j = json::parse(line);
  StepReport r;
  r.step = j.at("step").get<std::size_t>();
  r.n_classes = j.at("n_classes").get<std::size_t>();
  r.n_old = j.at("n_old").get<std::size_t>();
  r.top1 = j.at("top1").get<double>();
  r.bias_rate = j.at("bias_rate").get<double>();
  r.eta = j.at("eta").get<double>();
  r.top1_before_finetune = optional_from<double>(j.at("top1_before_finetune"));
  r.bias_rate_before_finetune = optional_from<double>(j.at("bias_rate_before_finetune"));
  r.exemplar_count = j.at("exemplar_count").get<std::size_t>();
  r.lambda = j.at("lambda").get<double>();
  r.distill_first_iteration = j.at("distill_first_iteration").get<double>();
  r.old_model_unchanged = j.at("old_model_unchanged").get<bool>();
  r.backbone_frozen_in_finetune = j.at("backbone_frozen_in_finetune").get<bool>();
  r.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  r.finetune_loss_trace = j.at("finetune_loss_trace").get<std::vector<double>>();
  r.eta_trace = j.at("eta_trace").get<std::vector<double>>();
  r.confusion = j.at("confusion_matrix").get<ConfusionMatrix>();
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  return r;
}

std::string summary_csv(const std::vector<StepReport>& reports, bool include_initial) {
  std::string out = std::string(kSummaryHeader) + "\n";
  std::vector<double> acc;
  char line[256];
  for (const auto& r : reports) {
    acc.push_back(r.top1);
    const bool defined = include_initial || acc.size() > 1;
    std::snprintf(line, sizeof(line), "%zu,%zu,%.6f,%.6f,%.6f,", r.step, r.n_classes, r.top1,
                  r.bias_rate, r.eta);
    out += line;
    // The exclude-initial convention has no average until the second step.
    if (defined) {
      std::snprintf(line, sizeof(line), "%.6f", average_incremental_accuracy(acc, include_initial));
      out += line;
    }
    out += "\n";
  }
  return out;
}

}  // namespace cil

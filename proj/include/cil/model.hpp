#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "cil/ops.hpp"
#include "cil/rng.hpp"
#include "cil/tensor.hpp"

namespace cil {

enum class StemKind { patchify, conv };

const char* to_string(StemKind kind) noexcept;
StemKind parse_stem_kind(const std::string& text);

/// Architecture hyperparameters of the micro ViT.
struct ModelSpec {
  std::size_t image_size = 16;
  std::size_t in_channels = 3;
  StemKind stem = StemKind::patchify;
  std::size_t patch_size = 4;
  /// One stride-2, 3x3 conv per entry; the last entry must equal embed_dim.
  std::vector<std::size_t> stem_channels = {16, 32};
  std::size_t embed_dim = 32;
  std::size_t num_blocks = 2;
  std::size_t num_heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 0;
  /// Starting value of the learnable cosine-classifier temperature.
  double initial_temperature = 10.0;

  std::size_t stem_depth() const noexcept { return stem_channels.size(); }
  /// Tokens produced by the stem, excluding the CLS token.
  std::size_t token_count() const;
  /// Throws ConfigError on any violated architecture invariant.
  void validate() const;

  /// 16x16x3 input, 32-dim embedding, 2 blocks, 2 heads, temperature starting at 1.
  static ModelSpec toy(StemKind stem);
  /// 224x224 ViT-ti layout (12 blocks, 3 heads, 192 dims, stem [24, 48, 96, 192]).
  static ModelSpec vit_tiny(StemKind stem);

  bool operator==(const ModelSpec&) const = default;
};

inline constexpr const char* kClassifierWeight = "head.weight";
inline constexpr const char* kTemperature = "head.eta";
inline constexpr double kMinTemperature = 1e-3;
inline constexpr double kNewRowStd = 0.02;

/// Learnable parameters plus batch-norm running buffers. Classifier rows are
/// stored unnormalized; normalization happens in the forward pass.
struct ModelState {
  ModelSpec spec;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;

  static ModelState init(const ModelSpec& spec, SplitMix64& rng);

  static bool is_classifier(const std::string& name) noexcept;
  std::vector<std::string> backbone_names() const;
  std::vector<std::string> classifier_names() const;

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;

  double temperature() const { return param(kTemperature).item(); }
  void clamp_temperature() noexcept;
  std::size_t num_classes() const { return param(kClassifierWeight).dim(0); }

  std::size_t parameter_count() const;
  void zero_grad();
};

/// FNV-1a over names and raw bytes of the selected tensors.
std::uint64_t hash_tensors(const ModelState& state, const std::vector<std::string>& names,
                           bool include_buffers = false);
std::uint64_t backbone_hash(const ModelState& state);
std::uint64_t full_hash(const ModelState& state);

enum class Mode { train, eval };

/// Which parameters a binding registers for gradients.
enum class Trainable { none, all, classifier };

/// Puts a ModelState's parameters on a tape.
class ParamBinding {
 public:
  ParamBinding(Tape& tape, ModelState& state, Trainable trainable);
  /// All parameters as constants.
  ParamBinding(Tape& tape, const ModelState& state);

  Var operator[](const std::string& name) const;
  const ModelState& state() const noexcept { return *state_; }
  Tape& tape() const noexcept { return *tape_; }

 private:
  Tape* tape_;
  const ModelState* state_;
  std::map<std::string, Var> vars_;
};

/// Batch statistics gathered by a train-mode pass, keyed by norm layer prefix.
using RunningStatUpdates = std::map<std::string, BatchStats>;

/// Moves the state's running buffers toward the observed batch statistics.
void apply_running_stats(ModelState& state, const RunningStatUpdates& updates,
                         double momentum = 0.1);

/// images [b, c, h, w] -> tokens [b, (h/p)^2, embed_dim], row-major patch order.
Var patchify_forward(const ParamBinding& params, Var images);

/// images [b, c, h, w] -> tokens [b, (h/2^depth)^2, embed_dim].
Var conv_stem_forward(const ParamBinding& params, Var images, Mode mode,
                      RunningStatUpdates* updates = nullptr);

/// CLS token after the final block and final norm: [b, embed_dim]. In train
/// mode any batch norm uses batch statistics (reported through `updates`).
Var forward_features(const ParamBinding& params, Var images, Mode mode,
                     RunningStatUpdates* updates = nullptr);

/// eta * <normalized theta_j, normalized f>, shape [b, num_classes].
Var cosine_scores(const ParamBinding& params, Var features);
/// Softmax over cosine_scores.
Var cosine_logits(const ParamBinding& params, Var features);

/// Eval-only convenience: features and probabilities as plain tensors.
Tensor extract_features(const ModelState& state, const Tensor& images);
Tensor predict_probabilities(const ModelState& state, const Tensor& features);

/// Appends `new_class_count` classifier rows drawn from N(0, 0.02^2); existing
/// rows and eta are preserved bit-for-bit.
void expand_classifier(ModelState& state, std::size_t new_class_count, SplitMix64& rng);

}  // namespace cil

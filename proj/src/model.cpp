#include "cil/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cil/error.hpp"

namespace cil {

const char* to_string(StemKind kind) noexcept {
  return kind == StemKind::conv ? "conv" : "patchify";
}

StemKind parse_stem_kind(const std::string& text) {
  if (text == "conv") return StemKind::conv;
  if (text == "patchify") return StemKind::patchify;
  throw ConfigError("model.stem", "expected 'patchify' or 'conv', got '" + text + "'");
}

std::size_t ModelSpec::token_count() const {
  if (stem == StemKind::patchify) {
    if (patch_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("model.patch_size", "image size " + std::to_string(image_size) +
                                                " is not divisible by patch size " +
                                                std::to_string(patch_size));
    }
    const std::size_t g = image_size / patch_size;
    return g * g;
  }
  std::size_t side = image_size;
  for (std::size_t i = 0; i < stem_depth(); ++i) {
    if (side < 2) {
      throw ConfigError("model.stem_channels",
                        "image of size " + std::to_string(image_size) + " is too small for " +
                            std::to_string(stem_depth()) + " stride-2 layers");
    }
    side = (side + 2 - 3) / 2 + 1;
  }
  return side * side;
}

void ModelSpec::validate() const {
  if (image_size == 0 || in_channels == 0) throw ConfigError("model.image_size", "must be positive");
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("model.num_heads", "embed_dim " + std::to_string(embed_dim) +
                                             " is not divisible by num_heads " +
                                             std::to_string(num_heads));
  }
  if (mlp_ratio == 0) throw ConfigError("model.mlp_ratio", "must be positive");
  if (!(initial_temperature >= kMinTemperature)) {
    throw ConfigError("model.initial_temperature", "must be at least " + std::to_string(kMinTemperature));
  }
  if (stem == StemKind::conv) {
    if (stem_channels.empty()) throw ConfigError("model.stem_channels", "conv stem needs at least one layer");
    if (stem_channels.back() != embed_dim) {
      throw ConfigError("model.stem_channels", "last stem channel count " +
                                                   std::to_string(stem_channels.back()) +
                                                   " must equal embed_dim " +
                                                   std::to_string(embed_dim));
    }
    if (image_size % (std::size_t{1} << stem_depth()) != 0) {
      throw ConfigError("model.stem_channels",
                        "image size " + std::to_string(image_size) + " does not halve cleanly " +
                            std::to_string(stem_depth()) + " times");
    }
  }
  (void)token_count();
}

ModelSpec ModelSpec::toy(StemKind stem) {
  ModelSpec s;
  s.stem = stem;
  // With at most a few dozen classes the cross-entropy optimum sits well
  // below 10; starting there only makes the temperature decay.
  s.initial_temperature = 1.0;
  return s;
}

ModelSpec ModelSpec::vit_tiny(StemKind stem) {
  ModelSpec s;
  s.image_size = 224;
  s.stem = stem;
  s.patch_size = 16;
  s.stem_channels = {24, 48, 96, 192};
  s.embed_dim = 192;
  s.num_blocks = 12;
  s.num_heads = 3;
  s.mlp_ratio = 4;
  return s;
}

namespace {

Tensor normal(Shape shape, double stddev, SplitMix64& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = stddev * rng.normal();
  return t;
}

// Linear weights are stored [in, out] so that y = x W + b.
Tensor xavier(std::size_t in, std::size_t out, SplitMix64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor t(Shape{in, out});
  for (auto& v : t.storage()) v = a * (2.0 * rng.uniform() - 1.0);
  return t;
}

std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

}  // namespace

ModelState ModelState::init(const ModelSpec& spec, SplitMix64& rng) {
  spec.validate();
  ModelState st;
  st.spec = spec;
  auto& p = st.params;
  const std::size_t d = spec.embed_dim;
  const std::size_t tokens = spec.token_count();

  if (spec.stem == StemKind::patchify) {
    const std::size_t in = spec.in_channels * spec.patch_size * spec.patch_size;
    p["stem.proj.weight"] = xavier(in, d, rng);
    p["stem.proj.bias"] = Tensor(Shape{d});
  } else {
    std::size_t cin = spec.in_channels;
    for (std::size_t i = 0; i < spec.stem_depth(); ++i) {
      const std::size_t cout = spec.stem_channels[i];
      const std::string conv = "stem.conv" + std::to_string(i);
      const std::string bn = "stem.bn" + std::to_string(i);
      // Kaiming normal, fan-out, for ReLU.
      p[conv + ".weight"] =
          normal(Shape{cout, cin, 3, 3}, std::sqrt(2.0 / static_cast<double>(cout * 9)), rng);
      p[bn + ".weight"] = Tensor(Shape{cout}, 1.0);
      p[bn + ".bias"] = Tensor(Shape{cout});
      st.buffers[bn + ".running_mean"] = Tensor(Shape{cout});
      st.buffers[bn + ".running_var"] = Tensor(Shape{cout}, 1.0);
      cin = cout;
    }
  }
  p["cls_token"] = normal(Shape{1, 1, d}, 0.02, rng);
  p["pos_embed"] = normal(Shape{tokens + 1, d}, 0.02, rng);

  const std::size_t hidden = d * spec.mlp_ratio;
  for (std::size_t b = 0; b < spec.num_blocks; ++b) {
    const std::string pre = block_prefix(b);
    p[pre + "norm1.weight"] = Tensor(Shape{d}, 1.0);
    p[pre + "norm1.bias"] = Tensor(Shape{d});
    for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.proj"}) {
      p[pre + proj + ".weight"] = xavier(d, d, rng);
      p[pre + proj + ".bias"] = Tensor(Shape{d});
    }
    p[pre + "norm2.weight"] = Tensor(Shape{d}, 1.0);
    p[pre + "norm2.bias"] = Tensor(Shape{d});
    p[pre + "mlp.fc1.weight"] = xavier(d, hidden, rng);
    p[pre + "mlp.fc1.bias"] = Tensor(Shape{hidden});
    p[pre + "mlp.fc2.weight"] = xavier(hidden, d, rng);
    p[pre + "mlp.fc2.bias"] = Tensor(Shape{d});
  }
  p["norm.weight"] = Tensor(Shape{d}, 1.0);
  p["norm.bias"] = Tensor(Shape{d});

  p[kClassifierWeight] = normal(Shape{spec.num_classes, d}, kNewRowStd, rng);
  p[kTemperature] = Tensor(Shape{1}, spec.initial_temperature);
  return st;
}

bool ModelState::is_classifier(const std::string& name) noexcept {
  return name.rfind("head.", 0) == 0;
}

std::vector<std::string> ModelState::backbone_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params)
    if (!is_classifier(name)) out.push_back(name);
  return out;
}

std::vector<std::string> ModelState::classifier_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params)
    if (is_classifier(name)) out.push_back(name);
  return out;
}

Tensor& ModelState::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ModelState::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

void ModelState::clamp_temperature() noexcept {
  auto it = params.find(kTemperature);
  if (it != params.end() && !(it->second[0] >= kMinTemperature)) it->second[0] = kMinTemperature;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

void ModelState::zero_grad() {
  for (auto& [_, t] : params) t.clear_grad();
}

std::uint64_t hash_tensors(const ModelState& state, const std::vector<std::string>& names,
                           bool include_buffers) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& name : names) {
    const Tensor& t = state.param(name);
    mix(name.data(), name.size());
    mix(t.storage().data(), t.size() * sizeof(double));
  }
  if (include_buffers) {
    for (const auto& [name, t] : state.buffers) {
      mix(name.data(), name.size());
      mix(t.storage().data(), t.size() * sizeof(double));
    }
  }
  return h;
}

std::uint64_t backbone_hash(const ModelState& state) {
  return hash_tensors(state, state.backbone_names(), true);
}

std::uint64_t full_hash(const ModelState& state) {
  std::vector<std::string> names;
  for (const auto& [name, _] : state.params) names.push_back(name);
  return hash_tensors(state, names, true);
}

ParamBinding::ParamBinding(Tape& tape, ModelState& state, Trainable trainable)
    : tape_(&tape), state_(&state) {
  for (auto& [name, t] : state.params) {
    const bool watch = trainable == Trainable::all ||
                       (trainable == Trainable::classifier && ModelState::is_classifier(name));
    vars_.emplace(name, watch ? tape.watch(t) : tape.constant(t));
  }
}

ParamBinding::ParamBinding(Tape& tape, const ModelState& state) : tape_(&tape), state_(&state) {
  for (const auto& [name, t] : state.params) vars_.emplace(name, tape.constant(t));
}

Var ParamBinding::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("parameter '" + name + "' is not bound");
  return it->second;
}

void apply_running_stats(ModelState& state, const RunningStatUpdates& updates, double momentum) {
  for (const auto& [prefix, stats] : updates) {
    update_running_stats(state.buffers.at(prefix + ".running_mean"),
                         state.buffers.at(prefix + ".running_var"), stats, momentum);
  }
}

namespace {

void check_images(const ModelSpec& spec, const Shape& s) {
  if (s.size() != 4 || s[1] != spec.in_channels || s[2] != spec.image_size ||
      s[3] != spec.image_size) {
    throw DimensionError("expected images [b," + std::to_string(spec.in_channels) + "," +
                         std::to_string(spec.image_size) + "," + std::to_string(spec.image_size) +
                         "], got " + to_string(s));
  }
}

Var linear(const ParamBinding& p, const std::string& name, Var x) {
  return add(matmul(x, p[name + ".weight"]), p[name + ".bias"]);
}

Var attention(const ParamBinding& p, const std::string& pre, Var x) {
  const ModelSpec& spec = p.state().spec;
  const std::size_t b = x.shape()[0], t = x.shape()[1], d = spec.embed_dim;
  const std::size_t heads = spec.num_heads, dh = d / heads;
  auto split_heads = [&](Var y) {
    return reshape(permute(reshape(y, {b, t, heads, dh}), {0, 2, 1, 3}), {b * heads, t, dh});
  };
  Var q = split_heads(linear(p, pre + "attn.q", x));
  Var k = split_heads(linear(p, pre + "attn.k", x));
  Var v = split_heads(linear(p, pre + "attn.v", x));
  Var scores = mul_scalar(bmm(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var mixed = bmm(softmax(scores, -1), v);
  Var merged = reshape(permute(reshape(mixed, {b, heads, t, dh}), {0, 2, 1, 3}), {b, t, d});
  return linear(p, pre + "attn.proj", merged);
}

Var block(const ParamBinding& p, std::size_t index, Var x) {
  const std::string pre = block_prefix(index);
  Var h = layer_norm(x, p[pre + "norm1.weight"], p[pre + "norm1.bias"]);
  x = add(x, attention(p, pre, h));
  h = layer_norm(x, p[pre + "norm2.weight"], p[pre + "norm2.bias"]);
  h = linear(p, pre + "mlp.fc2", gelu(linear(p, pre + "mlp.fc1", h)));
  return add(x, h);
}

}  // namespace

Var patchify_forward(const ParamBinding& p, Var images) {
  const ModelSpec& spec = p.state().spec;
  if (spec.stem != StemKind::patchify) throw ContractError("model has no patchify stem");
  check_images(spec, images.shape());
  (void)spec.token_count();
  const std::size_t b = images.shape()[0], c = spec.in_channels, ps = spec.patch_size;
  const std::size_t g = spec.image_size / ps;
  Var patches = reshape(permute(reshape(images, {b, c, g, ps, g, ps}), {0, 2, 4, 1, 3, 5}),
                        {b, g * g, c * ps * ps});
  return linear(p, "stem.proj", patches);
}

Var conv_stem_forward(const ParamBinding& p, Var images, Mode mode, RunningStatUpdates* updates) {
  const ModelSpec& spec = p.state().spec;
  if (spec.stem != StemKind::conv) throw ContractError("model has no conv stem");
  check_images(spec, images.shape());
  const std::size_t tokens = spec.token_count();
  const ModelState& st = p.state();
  Var x = images;
  for (std::size_t i = 0; i < spec.stem_depth(); ++i) {
    const std::string conv = "stem.conv" + std::to_string(i);
    const std::string bn = "stem.bn" + std::to_string(i);
    x = conv2d(x, p[conv + ".weight"], 2, 1);
    BatchStats stats;
    const bool train = mode == Mode::train;
    x = batch_norm(x, p[bn + ".weight"], p[bn + ".bias"], st.buffers.at(bn + ".running_mean"),
                   st.buffers.at(bn + ".running_var"),
                   train ? BatchNormMode::train : BatchNormMode::eval,
                   train && updates ? &stats : nullptr);
    if (train && updates) (*updates)[bn] = std::move(stats);
    x = relu(x);
  }
  const std::size_t b = images.shape()[0];
  return transpose(reshape(x, {b, spec.embed_dim, tokens}), 1, 2);
}

Var forward_features(const ParamBinding& p, Var images, Mode mode, RunningStatUpdates* updates) {
  const ModelSpec& spec = p.state().spec;
  check_images(spec, images.shape());
  Tape& tape = p.tape();
  const std::size_t b = images.shape()[0], d = spec.embed_dim;
  Var tokens = spec.stem == StemKind::patchify ? patchify_forward(p, images)
                                               : conv_stem_forward(p, images, mode, updates);
  Var cls = add(tape.constant(Tensor(Shape{b, 1, d})), p["cls_token"]);
  std::vector<Var> parts{cls, tokens};
  Var x = add(concat(parts, 1), p["pos_embed"]);
  for (std::size_t i = 0; i < spec.num_blocks; ++i) x = block(p, i, x);
  x = layer_norm(x, p["norm.weight"], p["norm.bias"]);
  return reshape(slice(x, 1, 0, 1), {b, d});
}

Var cosine_scores(const ParamBinding& p, Var features) {
  const Var weight = p[kClassifierWeight];
  if (features.shape().size() != 2 || features.shape()[1] != weight.shape()[1]) {
    throw DimensionError("cosine head expects features [b," + std::to_string(weight.shape()[1]) +
                         "], got " + to_string(features.shape()));
  }
  Var cos = matmul(l2_normalize(features), transpose(l2_normalize(weight), 0, 1));
  return mul(cos, p[kTemperature]);
}

Var cosine_logits(const ParamBinding& p, Var features) {
  return softmax(cosine_scores(p, features), -1);
}

Tensor extract_features(const ModelState& state, const Tensor& images) {
  Tape tape;
  ParamBinding p(tape, state);
  return forward_features(p, tape.constant(images), Mode::eval).value();
}

Tensor predict_probabilities(const ModelState& state, const Tensor& features) {
  Tape tape;
  ParamBinding p(tape, state);
  return cosine_logits(p, tape.constant(features)).value();
}

void expand_classifier(ModelState& state, std::size_t new_class_count, SplitMix64& rng) {
  if (new_class_count == 0) throw ContractError("expand_classifier needs at least one new class");
  Tensor& w = state.param(kClassifierWeight);
  const std::size_t old_rows = w.dim(0), d = w.dim(1);
  std::vector<double> values = w.storage();
  values.reserve((old_rows + new_class_count) * d);
  for (std::size_t i = 0; i < new_class_count * d; ++i) values.push_back(kNewRowStd * rng.normal());
  w = Tensor(Shape{old_rows + new_class_count, d}, std::move(values));
  state.spec.num_classes = old_rows + new_class_count;
}

}  // namespace cil

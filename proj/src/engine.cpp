#include "cil/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "cil/error.hpp"
#include "cil/ops.hpp"

namespace cil {

void EngineConfig::validate() const {
  if (batch_size == 0) throw ConfigError("optim.batch_size", "must be at least 1");
  if (!(base_lr >= 0.0)) throw ConfigError("optim.base_lr", "must be non-negative");
  if (!(classifier_lr_multiplier >= 0.0)) {
    throw ConfigError("optim.classifier_lr_multiplier", "must be non-negative");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay", "must be non-negative");
  if (!(min_lr >= 0.0)) throw ConfigError("optim.min_lr", "must be non-negative");
  augment.validate();
  if (distillation && !lambda_fixed && !(lambda_base > 0.0)) {
    throw ConfigError("cil.lambda_base", "must be positive");
  }
  if (lambda_fixed && !(*lambda_fixed >= 0.0)) throw ConfigError("cil.lambda", "must be non-negative");
  if (margin_ranking) {
    if (augment.enabled && augment.mixing) {
      throw ConfigError("cil.margin_ranking",
                        "needs hard labels and conflicts with augment.mixing (Mixup/CutMix); "
                        "disable one of them");
    }
    if (!(margin >= 0.0)) throw ConfigError("cil.margin", "must be non-negative");
    if (margin_negatives == 0) throw ConfigError("cil.margin_negatives", "must be at least 1");
  }
  if (!(finetune_lr_scale >= 0.0)) throw ConfigError("cil.finetune_lr_scale", "must be non-negative");
  if (eval_batch == 0) throw ConfigError("run.eval_batch", "must be at least 1");
}

double adaptive_lambda(double lambda_base, std::size_t n_old, std::size_t n_new) {
  if (n_new == 0) throw ContractError("adaptive_lambda: no new classes");
  if (n_old == 0) return 0.0;
  if (n_old == n_new) return lambda_base;
  return lambda_base * std::sqrt(static_cast<double>(n_old) / static_cast<double>(n_new));
}

Var distill_loss(Var f_old, Var f_new) {
  if (f_old.shape() != f_new.shape() || f_old.shape().size() != 2) {
    throw DimensionError("distill_loss: features must share shape [b, d]");
  }
  Var cos = sum(mul(l2_normalize(f_old, 1), l2_normalize(f_new, 1)), 1);
  return mean(add_scalar(neg(cos), 1.0));
}

Var cross_entropy(Var probabilities, Var targets) {
  if (probabilities.shape() != targets.shape() || probabilities.shape().size() != 2) {
    throw DimensionError("cross_entropy: probabilities and targets must share shape [b, k]");
  }
  const double b = static_cast<double>(probabilities.shape()[0]);
  return mul_scalar(sum(mul(targets, log(add_scalar(probabilities, 1e-12)))), -1.0 / b);
}

Var raw_cosine(const ParamBinding& params, Var features) {
  Var w = l2_normalize(params[kClassifierWeight], 1);
  return matmul(l2_normalize(features, 1), transpose(w, 0, 1));
}

Var margin_ranking_loss(Var cosine, std::span<const std::size_t> labels, std::size_t n_old,
                        double margin, std::size_t negatives) {
  Tape& tape = cosine.tape();
  if (cosine.shape().size() != 2 || cosine.shape()[0] != labels.size()) {
    throw DimensionError("margin_ranking_loss: cosine must be [b, n] with one label per row");
  }
  const std::size_t b = cosine.shape()[0], n = cosine.shape()[1];
  const Tensor& c = cosine.value();
  const std::size_t k = std::min(negatives, n > n_old ? n - n_old : 0);
  Tensor positive({b, n}, 0.0);
  std::vector<Tensor> negative(k, Tensor({b, n}, 0.0));
  Tensor active({b}, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= n) throw DimensionError("margin_ranking_loss: label out of range");
    if (labels[i] >= n_old || k == 0) continue;
    ++count;
    active[i] = 1.0;
    positive[i * n + labels[i]] = 1.0;
    std::vector<std::size_t> cand(n - n_old);
    std::iota(cand.begin(), cand.end(), n_old);
    std::stable_sort(cand.begin(), cand.end(),
                     [&](std::size_t a, std::size_t z) { return c[i * n + a] > c[i * n + z]; });
    for (std::size_t r = 0; r < k; ++r) negative[r][i * n + cand[r]] = 1.0;
  }
  if (count == 0) return tape.constant(Tensor::scalar(0.0));
  Var pos = sum(mul(cosine, tape.constant(positive)), 1);
  Var mask = tape.constant(active);
  Var total;
  for (std::size_t r = 0; r < k; ++r) {
    Var negv = sum(mul(cosine, tape.constant(negative[r])), 1);
    Var hinge = mul(relu(add_scalar(sub(negv, pos), margin)), mask);
    total = total.valid() ? add(total, sum(hinge)) : sum(hinge);
  }
  return mul_scalar(total, 1.0 / static_cast<double>(count));
}

Tensor TrainSet::batch(std::span<const std::size_t> indices) const {
  std::vector<const Pixels*> ptrs;
  ptrs.reserve(indices.size());
  for (auto i : indices) ptrs.push_back(images.at(i));
  return to_tensor(ptrs, channels, height, width);
}

namespace {

std::map<std::string, double> group_lrs(const std::vector<ParamGroup>& groups,
                                        const ScheduleConfig& sched, std::size_t epoch) {
  std::map<std::string, double> out;
  for (const auto& g : groups) out[g.name] = g.frozen ? 0.0 : lr_at_epoch(sched, g, epoch);
  return out;
}

ScheduleConfig schedule_for(const EngineConfig& cfg, std::size_t epochs, std::size_t warmup) {
  ScheduleConfig s;
  s.total_epochs = epochs;
  // Short stages keep at least one post-warmup epoch.
  s.warmup_epochs = std::min(warmup, epochs - 1);
  s.min_lr = cfg.min_lr;
  s.batch_size = cfg.batch_size;
  return s;
}

Tensor features_of(const ModelState& model, const TrainSet& set, std::size_t batch, bool flipped) {
  const std::size_t n = set.size();
  const std::size_t d = model.spec.embed_dim;
  Tensor out({n, d});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    idx.resize(len);
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = set.batch(idx);
    if (flipped) x = hflip(x);
    const Tensor f = extract_features(model, x);
    std::copy(f.storage().begin(), f.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

void check_finite(double loss, std::size_t epoch, std::size_t iteration) {
  if (!std::isfinite(loss)) {
    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", iteration " +
                        std::to_string(iteration));
  }
}

}  // namespace

StageResult run_stage1(ModelState& model, const ModelState* old_model, const TrainSet& data,
                       std::size_t epochs, double lambda, std::size_t n_old,
                       const EngineConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  StageResult res;
  if (epochs == 0) return res;
  if (data.size() == 0) throw ContractError("run_stage1: empty training set");
  const std::uint64_t old_hash = old_model ? full_hash(*old_model) : 0;
  const bool distill = old_model != nullptr && lambda > 0.0;
  const std::vector<ParamGroup> groups = make_param_groups(
      model, cfg.base_lr, cfg.base_lr * cfg.classifier_lr_multiplier, cfg.weight_decay);
  AdamW opt(groups, cfg.adam);
  const ScheduleConfig sched = schedule_for(cfg, epochs, cfg.warmup_epochs);
  const std::size_t classes = model.num_classes();

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> idx, labels;
  bool first = true;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto lrs = group_lrs(groups, sched, epoch);
    fisher_yates(order, rng);
    double total = 0.0;
    std::size_t iteration = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++iteration) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                 order.begin() + static_cast<std::ptrdiff_t>(start + len));
      labels.clear();
      for (auto i : idx) labels.push_back(data.labels[i]);
      const SoftBatch sb = augment(data.batch(idx), labels, classes, cfg.augment, rng);

      model.zero_grad();
      Tape tape;
      ParamBinding p(tape, model, Trainable::all);
      RunningStatUpdates updates;
      Var f = forward_features(p, tape.constant(sb.images), Mode::train, &updates);
      Var loss = cross_entropy(cosine_logits(p, f), tape.constant(sb.targets));
      if (distill) {
        Tensor f_old;
        {
          Tape old_tape;
          ParamBinding po(old_tape, *old_model);
          f_old = forward_features(po, old_tape.constant(sb.images), Mode::train).value();
        }
        Var dis = distill_loss(tape.constant(std::move(f_old)), f);
        if (first) res.distill_first_iteration = dis.value().item();
        loss = add(loss, mul_scalar(dis, lambda));
      }
      if (cfg.margin_ranking && n_old > 0) {
        Var mr = margin_ranking_loss(raw_cosine(p, f), labels, n_old, cfg.margin, cfg.margin_negatives);
        loss = add(loss, mul_scalar(mr, cfg.margin_weight));
      }
      const double value = loss.value().item();
      check_finite(value, epoch, iteration);
      tape.backward(loss);
      opt.step(model, lrs);
      apply_running_stats(model, updates);
      total += value * static_cast<double>(len);
      first = false;
    }
    res.loss_trace.push_back(total / static_cast<double>(order.size()));
    res.eta_trace.push_back(model.temperature());
  }
  model.zero_grad();
  res.old_model_unchanged = old_model == nullptr || full_hash(*old_model) == old_hash;
  return res;
}

StageResult run_balanced_finetune(ModelState& model, const TrainSet& exemplars,
                                  const EngineConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  StageResult res;
  const std::size_t epochs = cfg.epochs_finetune;
  if (epochs == 0 || exemplars.size() == 0) return res;
  const std::size_t d = model.spec.embed_dim;
  const Tensor plain = features_of(model, exemplars, cfg.eval_batch, false);
  const double flip_prob = cfg.augment.enabled ? cfg.augment.flip_prob : 0.0;
  const Tensor flipped = flip_prob > 0.0 ? features_of(model, exemplars, cfg.eval_batch, true) : plain;

  const double classifier_lr = cfg.base_lr * cfg.classifier_lr_multiplier * cfg.finetune_lr_scale;
  const std::vector<ParamGroup> groups =
      make_param_groups(model, cfg.base_lr, classifier_lr, cfg.weight_decay, /*freeze_backbone=*/true);
  AdamW opt(groups, cfg.adam);
  const ScheduleConfig sched = schedule_for(cfg, epochs, 0);
  const std::size_t classes = model.num_classes();

  std::vector<std::size_t> order(exemplars.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> labels;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto lrs = group_lrs(groups, sched, epoch);
    fisher_yates(order, rng);
    double total = 0.0;
    std::size_t iteration = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++iteration) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      Tensor feats({len, d});
      labels.clear();
      for (std::size_t r = 0; r < len; ++r) {
        const std::size_t i = order[start + r];
        const Tensor& src = rng.bernoulli(flip_prob) ? flipped : plain;
        std::copy_n(src.storage().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                    feats.storage().begin() + static_cast<std::ptrdiff_t>(r * d));
        labels.push_back(exemplars.labels[i]);
      }
      model.zero_grad();
      Tape tape;
      ParamBinding p(tape, model, Trainable::classifier);
      Var loss = cross_entropy(cosine_logits(p, tape.constant(std::move(feats))),
                               tape.constant(one_hot(labels, classes)));
      const double value = loss.value().item();
      check_finite(value, epoch, iteration);
      tape.backward(loss);
      opt.step(model, lrs);
      total += value * static_cast<double>(len);
    }
    res.loss_trace.push_back(total / static_cast<double>(order.size()));
    res.eta_trace.push_back(model.temperature());
  }
  model.zero_grad();
  return res;
}

std::vector<std::size_t> herd(const ModelState& model, const TrainSet& candidates,
                              std::size_t budget) {
  Tensor f = features_of(model, candidates, 100, false);
  const std::size_t n = f.dim(0), d = f.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += f[i * d + j] * f[i * d + j];
    const double norm = std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < d; ++j) f[i * d + j] /= norm;
  }
  return herding_select(f, budget);
}

ProtocolResult run_protocol(const LabeledDataset& dataset, const ProtocolConfig& protocol,
                            const ModelSpec& spec, const EngineConfig& cfg, std::uint64_t seed,
                            const StepHook& on_step) {
  cfg.validate();
  const StepPlan plan = build_protocol(protocol);
  if (protocol.total_classes > dataset.num_classes) {
    throw ConfigError("protocol.total_classes", "exceeds the dataset's " +
                                                    std::to_string(dataset.num_classes) + " classes");
  }
  if (spec.image_size != dataset.height || dataset.height != dataset.width) {
    throw ConfigError("model.image_size", "does not match the dataset's " +
                                              std::to_string(dataset.height) + "x" +
                                              std::to_string(dataset.width) + " images");
  }
  if (spec.in_channels != dataset.channels) {
    throw ConfigError("model.in_channels", "does not match the dataset");
  }

  std::vector<std::vector<std::uint32_t>> train_by_class(dataset.num_classes), test_by_class(dataset.num_classes);
  for (auto i : dataset.train) train_by_class[dataset.labels[i]].push_back(i);
  for (auto i : dataset.test) test_by_class[dataset.labels[i]].push_back(i);

  ModelSpec s = spec;
  s.num_classes = plan.steps.front().count;
  SplitMix64 init_rng = SplitMix64::stream(seed, "init");
  ProtocolResult result{{}, ModelState::init(s, init_rng), ExemplarStore(protocol.budget)};
  ModelState& model = result.model;
  ExemplarStore& store = result.store;

  auto empty_set = [&] {
    TrainSet t;
    t.channels = dataset.channels;
    t.height = dataset.height;
    t.width = dataset.width;
    return t;
  };

  for (std::size_t t = 0; t < plan.steps.size(); ++t) {
    const auto started = std::chrono::steady_clock::now();
    const StepRange range = plan.steps[t];
    const std::size_t n_old = range.first, n_seen = range.end();
    StepReport report;
    report.step = t + 1;
    report.n_classes = n_seen;
    report.n_old = n_old;
    try {
      TrainSet train = empty_set();
      for (std::size_t pos = 0; pos < n_old; ++pos) {
        for (const Pixels& px : store.exemplars(plan.order[pos])) {
          train.images.push_back(&px);
          train.labels.push_back(pos);
        }
      }
      for (std::size_t pos = range.first; pos < n_seen; ++pos) {
        for (auto i : train_by_class[plan.order[pos]]) {
          train.images.push_back(&dataset.images[i]);
          train.labels.push_back(pos);
        }
      }

      std::optional<ModelState> old;
      if (t > 0) {
        old = model;
        SplitMix64 expand_rng = SplitMix64::stream(seed, "expand." + std::to_string(t + 1));
        expand_classifier(model, range.count, expand_rng);
      }
      double lambda = 0.0;
      if (t > 0 && cfg.distillation) {
        lambda = cfg.lambda_fixed ? *cfg.lambda_fixed : adaptive_lambda(cfg.lambda_base, n_old, range.count);
      }
      report.lambda = lambda;
      const std::size_t epochs = t == 0 ? protocol.epochs_initial : protocol.epochs_step;
      SplitMix64 rng = SplitMix64::stream(seed, "train." + std::to_string(t + 1));
      const StageResult s1 = run_stage1(model, old ? &*old : nullptr, train, epochs, lambda, n_old, cfg, rng);
      report.loss_trace = s1.loss_trace;
      report.eta_trace = s1.eta_trace;
      report.distill_first_iteration = s1.distill_first_iteration;
      report.old_model_unchanged = s1.old_model_unchanged;
      old.reset();

      const std::size_t budget = per_class_budget(protocol.budget, n_seen);
      std::map<std::uint16_t, std::vector<Pixels>> herded;
      for (std::size_t pos = range.first; pos < n_seen; ++pos) {
        const std::uint16_t id = plan.order[pos];
        TrainSet cand = empty_set();
        for (auto i : train_by_class[id]) {
          cand.images.push_back(&dataset.images[i]);
          cand.labels.push_back(pos);
        }
        std::vector<Pixels>& list = herded[id];
        for (auto k : herd(model, cand, budget)) list.push_back(*cand.images[k]);
      }
      store.add_and_trim(std::move(herded), n_seen);
      report.exemplar_count = store.total();

      std::vector<std::uint32_t> test_idx;
      std::vector<std::size_t> test_labels;
      for (std::size_t pos = 0; pos < n_seen; ++pos) {
        for (auto i : test_by_class[plan.order[pos]]) {
          test_idx.push_back(i);
          test_labels.push_back(pos);
        }
      }
      const Tensor test_x = to_tensor(dataset, test_idx);

      if (t > 0 && cfg.balanced_finetune) {
        const Evaluation before = evaluate(model, test_x, test_labels, n_seen, cfg.eval_batch);
        report.top1_before_finetune = before.top1;
        report.bias_rate_before_finetune = old_to_new_bias_rate(before.confusion, n_old);
        if (protocol.budget.kind == BudgetPolicy::Kind::per_class && !store.balanced()) {
          throw ContractError("balanced finetune needs equal exemplar counts per class");
        }
        TrainSet ex = empty_set();
        for (std::size_t pos = 0; pos < n_seen; ++pos) {
          for (const Pixels& px : store.exemplars(plan.order[pos])) {
            ex.images.push_back(&px);
            ex.labels.push_back(pos);
          }
        }
        const std::uint64_t backbone = backbone_hash(model);
        SplitMix64 ft_rng = SplitMix64::stream(seed, "finetune." + std::to_string(t + 1));
        report.finetune_loss_trace = run_balanced_finetune(model, ex, cfg, ft_rng).loss_trace;
        report.backbone_frozen_in_finetune = backbone_hash(model) == backbone;
      }

      const Evaluation ev = evaluate(model, test_x, test_labels, n_seen, cfg.eval_batch);
      report.top1 = ev.top1;
      report.confusion = ev.confusion;
      report.bias_rate = old_to_new_bias_rate(ev.confusion, n_old);
      report.eta = model.temperature();
    } catch (const TrainingError& e) {
      throw TrainingError("step " + std::to_string(t + 1) + ": " + e.what());
    }
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.reports.push_back(report);
    if (on_step) on_step(result.reports.back(), model, store);
  }
  return result;
}

}  // namespace cil

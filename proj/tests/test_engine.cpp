#include <cmath>
#include <limits>
#include <set>

#include "cil/engine.hpp"
#include "cil/error.hpp"
#include "doctest.h"

using namespace cil;

namespace {

Tensor rows(std::size_t b, std::size_t d, std::vector<double> v) { return Tensor({b, d}, std::move(v)); }

double scalar_of(Var v) { return v.value().item(); }

bool same_values(const std::map<std::string, Tensor>& a, const std::map<std::string, Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second.shape() != t.shape() || it->second.storage() != t.storage()) return false;
  }
  return true;
}

LabeledDataset tiny_dataset(std::size_t classes = 4, std::size_t train = 8, std::size_t test = 4) {
  SyntheticConfig cfg;
  cfg.num_classes = classes;
  cfg.per_class_train = train;
  cfg.per_class_test = test;
  cfg.difficulty = 0.5;
  return generate_synthetic(cfg);
}

EngineConfig fast_config() {
  EngineConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs_finetune = 2;
  return cfg;
}

ProtocolConfig tiny_protocol(std::size_t total, std::size_t first, std::size_t inc) {
  ProtocolConfig p;
  p.total_classes = total;
  p.initial_classes = first;
  p.increment = inc;
  p.epochs_initial = 2;
  p.epochs_step = 1;
  p.budget = BudgetPolicy::per_class(3);
  return p;
}

// Two perfectly separable classes: bright images versus dark images.
struct Separable {
  std::vector<Pixels> pixels;
  TrainSet set;
};

Separable separable_set(std::size_t per_class) {
  Separable s;
  SplitMix64 rng(5);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      Pixels px(3 * 16 * 16);
      for (auto& v : px) v = static_cast<std::uint8_t>(c == 0 ? 200 + rng.below(40) : 15 + rng.below(40));
      s.pixels.push_back(std::move(px));
      s.set.labels.push_back(c);
    }
  }
  for (const auto& px : s.pixels) s.set.images.push_back(&px);
  return s;
}

double hard_label_loss(const ModelState& model, const TrainSet& set) {
  std::vector<std::size_t> idx(set.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Tensor probs = predict_probabilities(model, extract_features(model, set.batch(idx)));
  double loss = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) loss -= std::log(probs[i * 2 + set.labels[i]] + 1e-12);
  return loss / static_cast<double>(idx.size());
}

ModelState toy_model(StemKind stem, std::size_t classes, std::uint64_t seed = 3) {
  ModelSpec spec = ModelSpec::toy(stem);
  spec.num_classes = classes;
  SplitMix64 rng(seed);
  return ModelState::init(spec, rng);
}

}  // namespace

TEST_CASE("adaptive lambda") {
  CHECK(adaptive_lambda(3.0, 0, 10) == 0.0);
  CHECK(adaptive_lambda(3.0, 50, 10) == doctest::Approx(6.7082039).epsilon(1e-7));
  CHECK(adaptive_lambda(3.0, 7, 7) == 3.0);
  CHECK_THROWS_AS(adaptive_lambda(3.0, 5, 0), ContractError);
}

TEST_CASE("distillation loss examples") {
  Tape tape;
  Var a = tape.constant(rows(1, 2, {1, 0}));
  CHECK(scalar_of(distill_loss(a, tape.constant(rows(1, 2, {3, 0})))) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(scalar_of(distill_loss(a, tape.constant(rows(1, 2, {0, 2})))) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(scalar_of(distill_loss(a, tape.constant(rows(1, 2, {-1, 0})))) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK_THROWS_AS(distill_loss(a, tape.constant(rows(1, 3, {1, 0, 0}))), DimensionError);

  Tensor new_param = rows(2, 2, {1, 1, 1, -1});
  Tape grad_tape;
  Var old_f = grad_tape.constant(rows(2, 2, {1, 0, 0, 1}));
  Var new_f = grad_tape.watch(new_param);
  grad_tape.backward(distill_loss(old_f, new_f));
  CHECK_FALSE(old_f.requires_grad());
  REQUIRE(new_param.has_grad());
  double norm = 0.0;
  for (double g : new_param.grad()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("cross entropy of uniform predictions is ln K") {
  for (std::size_t k : {2u, 5u, 10u}) {
    Tape tape;
    Var p = tape.constant(Tensor({3, k}, 1.0 / static_cast<double>(k)));
    const std::vector<std::size_t> labels{0, 1, 1};
    Var y = tape.constant(one_hot(labels, k));
    CHECK(scalar_of(cross_entropy(p, y)) == doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-9));
  }
}

TEST_CASE("margin ranking loss") {
  std::vector<std::size_t> labels{0};
  SUBCASE("hinge arithmetic") {
    Tape tape;
    Var cos = tape.constant(rows(1, 3, {0.6, 0.1, 0.4}));
    CHECK(scalar_of(margin_ranking_loss(cos, labels, 2, 0.5, 1)) == doctest::Approx(0.3).epsilon(1e-12));
  }
  SUBCASE("satisfied margin") {
    Tape tape;
    Var cos = tape.constant(rows(1, 3, {0.9, 0.1, 0.2}));
    CHECK(scalar_of(margin_ranking_loss(cos, labels, 2, 0.5, 1)) == 0.0);
  }
  SUBCASE("only old-class samples count") {
    Tape tape;
    Var cos = tape.constant(rows(2, 4, {0.6, 0.0, 0.4, 0.3, 0.0, 0.0, 0.9, 0.9}));
    std::vector<std::size_t> l{0, 3};
    // Two negatives for the single old sample: (0.5 - 0.2) + (0.5 - 0.3).
    CHECK(scalar_of(margin_ranking_loss(cos, l, 2, 0.5, 2)) == doctest::Approx(0.5).epsilon(1e-12));
    std::vector<std::size_t> new_only{2, 3};
    CHECK(scalar_of(margin_ranking_loss(cos, new_only, 2, 0.5, 2)) == 0.0);
  }
  SUBCASE("mixing conflicts with margin ranking") {
    EngineConfig cfg;
    cfg.margin_ranking = true;
    try {
      cfg.validate();
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.field() == "cil.margin_ranking");
      CHECK(std::string(e.what()).find("augment.mixing") != std::string::npos);
    }
    cfg.augment.mixing = false;
    CHECK_NOTHROW(cfg.validate());
  }
}

TEST_CASE("stage 1 with zero learning rate leaves parameters bit-exact") {
  Separable data = separable_set(8);
  for (auto stem : {StemKind::patchify, StemKind::conv}) {
    ModelState model = toy_model(stem, 2);
    const auto before = model.params;
    EngineConfig cfg = fast_config();
    cfg.base_lr = 0.0;
    cfg.min_lr = 0.0;
    SplitMix64 rng(1);
    const StageResult res = run_stage1(model, nullptr, data.set, 3, 0.0, 0, cfg, rng);
    CHECK(same_values(model.params, before));
    CHECK(res.eta_trace.size() == 3);
    CHECK(res.loss_trace.size() == 3);
  }
}

TEST_CASE("one epoch on a separable set lowers the training loss") {
  Separable data = separable_set(32);
  ModelState model = toy_model(StemKind::patchify, 2);
  const double before = hard_label_loss(model, data.set);
  EngineConfig cfg = fast_config();
  cfg.base_lr = 0.1;
  cfg.augment = AugmentConfig::none();
  SplitMix64 rng(2);
  run_stage1(model, nullptr, data.set, 1, 0.0, 0, cfg, rng);
  CHECK(hard_label_loss(model, data.set) < before);
}

TEST_CASE("distillation against an identical model starts at zero") {
  Separable data = separable_set(8);
  for (auto stem : {StemKind::patchify, StemKind::conv}) {
    ModelState model = toy_model(stem, 2);
    const ModelState old = model;
    SplitMix64 rng(4);
    const StageResult res = run_stage1(model, &old, data.set, 1, 3.0, 1, fast_config(), rng);
    CHECK(std::abs(res.distill_first_iteration) <= 1e-9);
    CHECK(res.old_model_unchanged);
  }
}

TEST_CASE("non-finite loss aborts stage 1") {
  Separable data = separable_set(4);
  ModelState model = toy_model(StemKind::patchify, 2);
  model.params.at("norm.weight")[0] = std::numeric_limits<double>::quiet_NaN();
  SplitMix64 rng(1);
  CHECK_THROWS_AS(run_stage1(model, nullptr, data.set, 1, 0.0, 0, fast_config(), rng), TrainingError);
}

TEST_CASE("balanced finetune touches only the classifier") {
  Separable data = separable_set(6);
  ModelState model = toy_model(StemKind::conv, 2);
  const auto backbone = backbone_hash(model);
  const auto buffers = model.buffers;
  const auto head = model.param(kClassifierWeight).storage();
  EngineConfig cfg = fast_config();
  cfg.epochs_finetune = 3;
  SplitMix64 rng(8);
  const StageResult res = run_balanced_finetune(model, data.set, cfg, rng);
  CHECK(res.loss_trace.size() == 3);
  CHECK(backbone_hash(model) == backbone);
  CHECK(same_values(model.buffers, buffers));
  CHECK_FALSE(model.param(kClassifierWeight).storage() == head);
}

TEST_CASE("herd returns distinct candidates") {
  Separable data = separable_set(10);
  const ModelState model = toy_model(StemKind::patchify, 2);
  const auto picked = herd(model, data.set, 7);
  CHECK(picked.size() == 7);
  CHECK(std::set<std::size_t>(picked.begin(), picked.end()).size() == 7);
  CHECK(herd(model, data.set, 30).size() == 20);
}

TEST_CASE("protocol run contracts") {
  const LabeledDataset ds = tiny_dataset();
  const ProtocolConfig protocol = tiny_protocol(4, 2, 1);
  std::size_t hooked = 0;
  const ProtocolResult res = run_protocol(ds, protocol, ModelSpec::toy(StemKind::conv), fast_config(), 11,
                                          [&](const StepReport&, const ModelState&, const ExemplarStore&) { ++hooked; });
  REQUIRE(res.reports.size() == 3);
  CHECK(hooked == 3);
  for (std::size_t t = 0; t < 3; ++t) {
    const StepReport& r = res.reports[t];
    CHECK(r.step == t + 1);
    CHECK(r.n_classes == 2 + t);
    CHECK(r.confusion.size() == r.n_classes);
    std::size_t evaluated = 0;
    for (const auto& row : r.confusion)
      for (auto c : row) evaluated += c;
    CHECK(evaluated == 4 * r.n_classes);
    CHECK(r.old_model_unchanged);
    CHECK(r.backbone_frozen_in_finetune);
    CHECK(std::abs(r.distill_first_iteration) <= 1e-9);
    CHECK(r.exemplar_count == 3 * r.n_classes);
    CHECK(r.eta_trace.size() == (t == 0 ? 2u : 1u));
  }
  CHECK(res.reports[0].lambda == 0.0);
  CHECK(res.reports[0].distill_first_iteration == 0.0);
  CHECK_FALSE(res.reports[0].top1_before_finetune.has_value());
  CHECK(res.reports[1].lambda == doctest::Approx(3.0 * std::sqrt(2.0)));
  CHECK(res.reports[1].top1_before_finetune.has_value());
  CHECK(res.reports[2].finetune_loss_trace.size() == 2);
  CHECK(res.model.num_classes() == 4);
}

TEST_CASE("a single-step protocol is plain supervised training") {
  const LabeledDataset ds = tiny_dataset(3);
  ProtocolConfig protocol = tiny_protocol(3, 3, 1);
  const ProtocolResult res = run_protocol(ds, protocol, ModelSpec::toy(StemKind::patchify), fast_config(), 2);
  REQUIRE(res.reports.size() == 1);
  CHECK(res.reports[0].n_old == 0);
  CHECK(res.reports[0].bias_rate == 0.0);
  CHECK(res.reports[0].finetune_loss_trace.empty());
}

TEST_CASE("the finetune-off arm equals the pre-finetune metrics") {
  const LabeledDataset ds = tiny_dataset();
  const ProtocolConfig protocol = tiny_protocol(4, 2, 2);
  EngineConfig on = fast_config();
  EngineConfig off = on;
  off.balanced_finetune = false;
  const auto with = run_protocol(ds, protocol, ModelSpec::toy(StemKind::patchify), on, 5).reports;
  const auto without = run_protocol(ds, protocol, ModelSpec::toy(StemKind::patchify), off, 5).reports;
  REQUIRE(with.size() == 2);
  CHECK(with[0].top1 == without[0].top1);
  CHECK(*with[1].top1_before_finetune == without[1].top1);
  CHECK(*with[1].bias_rate_before_finetune == without[1].bias_rate);
  CHECK(with[1].loss_trace == without[1].loss_trace);
}

TEST_CASE("protocol runs are deterministic") {
  const LabeledDataset ds = tiny_dataset();
  const ProtocolConfig protocol = tiny_protocol(4, 2, 2);
  const auto a = run_protocol(ds, protocol, ModelSpec::toy(StemKind::patchify), fast_config(), 9);
  const auto b = run_protocol(ds, protocol, ModelSpec::toy(StemKind::patchify), fast_config(), 9);
  CHECK(summary_csv(a.reports) == summary_csv(b.reports));
  CHECK(full_hash(a.model) == full_hash(b.model));
  CHECK(a.store == b.store);
}

TEST_CASE("protocol preconditions") {
  const LabeledDataset ds = tiny_dataset();
  CHECK_THROWS_AS(run_protocol(ds, tiny_protocol(6, 2, 2), ModelSpec::toy(StemKind::patchify), fast_config(), 1),
                  ConfigError);
  ModelSpec wrong = ModelSpec::vit_tiny(StemKind::patchify);
  CHECK_THROWS_AS(run_protocol(ds, tiny_protocol(4, 2, 2), wrong, fast_config(), 1), ConfigError);
}

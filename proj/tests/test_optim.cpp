#include <algorithm>
#include <cmath>

#include "cil/error.hpp"
#include "cil/optim.hpp"
#include "doctest.h"

using namespace cil;

TEST_CASE("scaled_base_lr follows the linear batch rule") {
  CHECK(scaled_base_lr(2.5e-4, 1024) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(scaled_base_lr(2.5e-3, 512) == 2.5e-3);
  CHECK(scaled_base_lr(2.5e-4, 64) == doctest::Approx(3.125e-5).epsilon(1e-15));
  CHECK_THROWS_AS(scaled_base_lr(1e-3, 0), ConfigError);
}

TEST_CASE("warmup-cosine schedule boundaries") {
  ScheduleConfig cfg;
  cfg.warmup_epochs = 5;
  cfg.total_epochs = 25;
  cfg.min_lr = 1e-5;
  cfg.batch_size = 1024;
  ParamGroup g{"g", {}, 2.5e-4, 0.0, false};
  const double peak = 5e-4;

  CHECK(lr_at_epoch(cfg, g, 0) == doctest::Approx(cfg.min_lr).epsilon(1e-15));
  CHECK(lr_at_epoch(cfg, g, 5) == scaled_base_lr(2.5e-4, 1024));
  CHECK(std::abs(lr_at_epoch(cfg, g, 24) - cfg.min_lr) < 1e-12);
  // Decay spans epochs 5..24, midpoint 14.5; use an odd span for an integer midpoint.
  cfg.total_epochs = 26;
  CHECK(std::abs(lr_at_epoch(cfg, g, 15) - (peak + cfg.min_lr) / 2) < 1e-9);

  // Monotone warmup and monotone decay.
  for (std::size_t e = 1; e < 5; ++e) CHECK(lr_at_epoch(cfg, g, e) > lr_at_epoch(cfg, g, e - 1));
  for (std::size_t e = 6; e < 26; ++e) CHECK(lr_at_epoch(cfg, g, e) < lr_at_epoch(cfg, g, e - 1));

  CHECK(lr_at_epoch(cfg, g, 7) == lr_at_epoch(cfg, g, 7));
  CHECK_THROWS_AS(lr_at_epoch(cfg, g, 26), ContractError);
}

TEST_CASE("schedule config invariants") {
  ParamGroup g{"g", {}, 1e-3, 0.0, false};
  ScheduleConfig cfg;
  cfg.warmup_epochs = 3;
  cfg.total_epochs = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.total_epochs = 4;
  CHECK_NOTHROW(cfg.validate());
  cfg.min_lr = 1.0;
  CHECK_THROWS_AS(lr_at_epoch(cfg, g, 0), ConfigError);

  ScheduleConfig flat;
  flat.warmup_epochs = 0;
  flat.total_epochs = 1;
  flat.min_lr = 0.0;
  CHECK(lr_at_epoch(flat, g, 0) == 1e-3);
}

TEST_CASE("adamw_step examples") {
  AdamWConfig cfg;
  SUBCASE("zero grad without decay leaves parameters unchanged") {
    std::vector<double> p{0.3, -1.2, 4.0};
    const auto before = p;
    std::vector<double> g(3, 0.0);
    AdamMoments m;
    adamw_step(p, g, m, 0.01, 0.0, cfg);
    CHECK(p == before);
  }
  SUBCASE("zero grad with decay shrinks by 1 - lr*wd") {
    std::vector<double> p{0.3, -1.2, 4.0};
    const auto before = p;
    std::vector<double> g(3, 0.0);
    AdamMoments m;
    adamw_step(p, g, m, 0.01, 0.24, cfg);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(p[i] == doctest::Approx(before[i] * (1.0 - 0.0024)).epsilon(1e-14));
    }
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    std::vector<double> p{1.0, 1.0, 1.0, 1.0};
    std::vector<double> g{0.5, -3.0, 1e-3, -2e-2};
    AdamMoments m;
    adamw_step(p, g, m, 0.01, 0.0, cfg);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double sign = g[i] > 0 ? 1.0 : -1.0;
      CHECK(std::abs((p[i] - 1.0) - (-0.01 * sign)) < 1e-6);
    }
    CHECK(m.t == 1);
  }
  SUBCASE("non-finite gradient aborts without writing") {
    std::vector<double> p{1.0, 2.0};
    std::vector<double> g{0.1, std::nan("")};
    AdamMoments m;
    CHECK_THROWS_AS(adamw_step(p, g, m, 0.01, 0.24, cfg), TrainingError);
    CHECK(p == std::vector<double>{1.0, 2.0});
    CHECK(m.t == 0);
  }
}

namespace {

ModelState toy_state(std::uint64_t seed = 3) {
  SplitMix64 rng(seed);
  ModelSpec spec = ModelSpec::toy(StemKind::patchify);
  spec.num_classes = 4;
  return ModelState::init(spec, rng);
}

void fill_grads(ModelState& s, double value) {
  for (auto& [_, t] : s.params) {
    auto g = t.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = value * (1.0 + 0.1 * static_cast<double>(i % 7));
  }
}

std::map<std::string, double> lrs(double backbone, double classifier) {
  return {{kBackboneGroup, backbone},
          {kBackboneNoDecayGroup, backbone},
          {kClassifierGroup, classifier},
          {kClassifierNoDecayGroup, classifier}};
}

}  // namespace

TEST_CASE("parameter groups partition the model") {
  ModelState s = toy_state();
  auto groups = make_param_groups(s, 1e-3, 1e-2, 0.24);
  CHECK_NOTHROW(check_partition(groups, s));
  REQUIRE(groups.size() == 4);

  const auto& no_decay = groups[3].members;
  CHECK(std::find(no_decay.begin(), no_decay.end(), std::string(kTemperature)) != no_decay.end());
  CHECK(groups[2].members == std::vector<std::string>{kClassifierWeight});
  for (const auto& n : groups[1].members) CHECK(exempt_from_decay(n));
  for (const auto& n : groups[0].members) CHECK_FALSE(exempt_from_decay(n));
  CHECK(exempt_from_decay("blocks.1.norm2.bias"));
  CHECK(exempt_from_decay("stem.bn0.weight"));
  CHECK_FALSE(exempt_from_decay("blocks.0.attn.q.weight"));
  CHECK(groups[1].weight_decay == 0.0);
  CHECK(groups[3].weight_decay == 0.0);

  groups[0].members.push_back(groups[1].members.front());
  CHECK_THROWS_AS(check_partition(groups, s), ContractError);
  groups[0].members.pop_back();
  groups[1].members.pop_back();
  CHECK_THROWS_AS(check_partition(groups, s), ContractError);
}

TEST_CASE("frozen groups stay bit-identical") {
  ModelState s = toy_state();
  const auto backbone_before = backbone_hash(s);
  const auto full_before = full_hash(s);
  AdamW opt(make_param_groups(s, 1e-3, 1e-2, 0.24, /*freeze_backbone=*/true));
  for (int step = 0; step < 10; ++step) {
    fill_grads(s, 0.3);
    opt.step(s, lrs(1e-3, 1e-2));
  }
  CHECK(backbone_hash(s) == backbone_before);
  CHECK(full_hash(s) != full_before);
}

TEST_CASE("classifier update is ten times the backbone update") {
  ModelState s = toy_state();
  ModelState before = s;
  fill_grads(s, 0.25);
  std::vector<ParamGroup> groups = make_param_groups(s, 1e-3, 1e-2, 0.0);
  AdamW opt(groups);
  opt.step(s, lrs(1e-4, 1e-3));
  const double db = s.param("blocks.0.attn.q.weight")[0] - before.param("blocks.0.attn.q.weight")[0];
  const double dc = s.param(kClassifierWeight)[0] - before.param(kClassifierWeight)[0];
  CHECK(std::abs(dc / db - 10.0) < 1e-9);
}

TEST_CASE("AdamW aborts the whole step on a NaN gradient") {
  ModelState s = toy_state();
  fill_grads(s, 0.1);
  s.param(kClassifierWeight).grad()[2] = std::nan("");
  const auto before = full_hash(s);
  AdamW opt(make_param_groups(s, 1e-3, 1e-2, 0.24));
  try {
    opt.step(s, lrs(1e-3, 1e-2));
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find(kClassifierWeight) != std::string::npos);
  }
  CHECK(full_hash(s) == before);
}

TEST_CASE("temperature is clamped after each step") {
  ModelState s = toy_state();
  s.zero_grad();
  s.param(kTemperature)[0] = 2e-3;
  s.param(kTemperature).ensure_grad()[0] = 5.0;
  AdamW opt(make_param_groups(s, 0.0, 1.0, 0.0, true));
  opt.step(s, lrs(0.0, 1.0));
  CHECK(s.temperature() == kMinTemperature);
}

TEST_CASE("global norm clip bounds the first step") {
  ModelState s = toy_state();
  ModelState ref = s;
  fill_grads(s, 100.0);
  fill_grads(ref, 100.0);
  AdamWConfig clipped;
  clipped.clip_norm = 1.0;
  AdamW a(make_param_groups(s, 1e-3, 1e-3, 0.0), clipped);
  AdamW b(make_param_groups(ref, 1e-3, 1e-3, 0.0));
  a.step(s, lrs(1e-3, 1e-3));
  b.step(ref, lrs(1e-3, 1e-3));
  // Adam is scale invariant at t=1 apart from eps, so clipping barely moves the result.
  const double x = s.param(kClassifierWeight)[0];
  const double y = ref.param(kClassifierWeight)[0];
  CHECK(std::abs(x - y) < 1e-6);
}

#include <filesystem>
#include <set>

#include "cil/binio.hpp"
#include "cil/data.hpp"
#include "cil/error.hpp"
#include "doctest.h"

using namespace cil;

namespace {

LabeledDataset small_dataset() {
  SyntheticConfig cfg;
  cfg.num_classes = 3;
  cfg.per_class_train = 4;
  cfg.per_class_test = 2;
  cfg.image_size = 4;
  return generate_synthetic(cfg);
}

}  // namespace

TEST_CASE("class shuffle matches the reference SplitMix64 trace") {
  // Produced by tests/oracles/data_oracles.py.
  CHECK(shuffle_classes(10, 1993) == std::vector<std::uint16_t>{7, 5, 4, 3, 8, 0, 1, 9, 2, 6});
  const auto hundred = shuffle_classes(100, 1993);
  CHECK(std::vector<std::uint16_t>(hundred.begin(), hundred.begin() + 10) ==
        std::vector<std::uint16_t>{43, 63, 45, 97, 5, 59, 64, 32, 90, 53});
  CHECK(shuffle_classes(37, 5) == shuffle_classes(37, 5));
  std::set<std::uint16_t> ids(hundred.begin(), hundred.end());
  CHECK(ids.size() == 100);
  CHECK(*ids.rbegin() == 99);
  CHECK(shuffle_classes(1, 1993) == std::vector<std::uint16_t>{0});
}

TEST_CASE("protocol layouts") {
  auto steps = [](std::size_t total, std::size_t first, std::size_t inc) {
    ProtocolConfig cfg;
    cfg.total_classes = total;
    cfg.initial_classes = first;
    cfg.increment = inc;
    return build_protocol(cfg);
  };
  CHECK(steps(100, 50, 10).sizes() == std::vector<std::size_t>{50, 10, 10, 10, 10, 10});
  CHECK(steps(100, 10, 10).sizes().size() == 10);
  CHECK(steps(100, 5, 5).sizes().size() == 20);
  CHECK(steps(100, 50, 5).sizes().size() == 11);

  const StepPlan plan = steps(100, 50, 10);
  std::size_t next = 0;
  for (const auto& s : plan.steps) {
    CHECK(s.first == next);
    next = s.end();
  }
  CHECK(next == 100);
  CHECK(plan.seen_after(1) == 60);

  ProtocolConfig bad;
  bad.total_classes = 100;
  bad.initial_classes = 50;
  bad.increment = 7;
  try {
    build_protocol(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "protocol.increment");
  }
}

TEST_CASE("synthetic generator") {
  SyntheticConfig cfg;
  const LabeledDataset a = generate_synthetic(cfg);
  CHECK(a == generate_synthetic(cfg));
  CHECK_NOTHROW(a.validate());
  CHECK(a.images.size() == 10 * 84);
  CHECK(a.train.size() == 640);
  CHECK(a.test.size() == 200);
  CHECK(a.pixel_count() == 768);
  // Independent nearest-mean oracle (tests/oracles/data_oracles.py) on this exact dataset.
  CHECK(nearest_mean_accuracy(a) == doctest::Approx(0.85).epsilon(1e-12));

  cfg.difficulty = 0.0;
  const LabeledDataset clean = generate_synthetic(cfg);
  for (std::size_t i = 1; i < clean.images.size(); ++i) {
    if (clean.labels[i] == clean.labels[i - 1]) CHECK(clean.images[i] == clean.images[i - 1]);
  }
  CHECK(nearest_mean_accuracy(clean) == 1.0);

  cfg.difficulty = 1.0;
  CHECK(nearest_mean_accuracy(generate_synthetic(cfg)) == doctest::Approx(0.71).epsilon(1e-12));

  cfg.seed = 8;
  cfg.difficulty = 0.5;
  CHECK_FALSE(generate_synthetic(cfg) == a);
}

TEST_CASE("tensor conversion") {
  const LabeledDataset ds = small_dataset();
  std::vector<std::uint32_t> idx{0, 5};
  Tensor t = to_tensor(ds, idx);
  CHECK(t.shape() == Shape{2, 3, 4, 4});
  CHECK(t[0] == normalize_pixel(ds.images[0][0]));
  CHECK(t[48] == normalize_pixel(ds.images[5][0]));
  CHECK(normalize_pixel(0) == -2.0);
  CHECK(normalize_pixel(255) == 2.0);
}

TEST_CASE("CILD round trip and errors") {
  const LabeledDataset ds = small_dataset();
  const auto bytes = encode_dataset(ds);
  CHECK(bytes.size() == 18 + 18 * (2 + 48) + 4 + 4 * 12 + 4 + 4 * 6);
  CHECK(decode_dataset(bytes) == ds);

  const auto path = std::filesystem::temp_directory_path() / "cil_test_roundtrip.cild";
  save_dataset(ds, path);
  CHECK(load_dataset(path) == ds);
  std::filesystem::remove(path);

  SUBCASE("bad magic") {
    auto broken = bytes;
    broken[1] = 'X';
    try {
      decode_dataset(broken);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
      CHECK(e.offset() == 0);
    }
  }
  SUBCASE("truncation names the record") {
    auto broken = bytes;
    broken.resize(18 + 50 * 3 + 20);
    try {
      decode_dataset(broken);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      REQUIRE(e.record().has_value());
      CHECK(*e.record() == 3);
      CHECK(e.offset() == 18 + 50 * 3 + 2);
    }
  }
  SUBCASE("label out of range") {
    auto broken = bytes;
    broken[18 + 50 * 2] = 9;
    try {
      decode_dataset(broken);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(*e.record() == 2);
      CHECK(e.offset() == 18 + 50 * 2);
    }
  }
  SUBCASE("overlapping split") {
    auto broken = bytes;
    // First test index -> 0, which is also a training index.
    const std::size_t at = 18 + 18 * 50 + 4 + 4 * 12 + 4;
    broken[at] = 0;
    CHECK_THROWS_AS(decode_dataset(broken), ParseError);
  }
  SUBCASE("trailing bytes") {
    auto broken = bytes;
    broken.push_back(0);
    CHECK_THROWS_AS(decode_dataset(broken), ParseError);
  }
}

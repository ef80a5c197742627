#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "revbifpn/cost_model.hpp"

using namespace revbifpn;

namespace {

constexpr ComplexityMode kBaseline{Method::kSgdBaseline, Execution::kLayerSequential};
constexpr ComplexityMode kCheckpoint{Method::kCheckpointing, Execution::kLayerSequential};
constexpr ComplexityMode kReversible{Method::kReversible, Execution::kLayerSequential};

}  // namespace

TEST_CASE("activation memory laws") {
  CHECK(activation_memory_model(kBaseline, 16, 1.0) / activation_memory_model(kBaseline, 4, 1.0) == 4.0);
  CHECK(activation_memory_model(kCheckpoint, 16, 1.0) / activation_memory_model(kCheckpoint, 4, 1.0) == 2.0);
  CHECK(activation_memory_model(kReversible, 16, 3.0) == activation_memory_model(kReversible, 4, 3.0));
  CHECK(activation_memory_model(kReversible, 7, 3.0) == 3.0);

  const ComplexityMode pb{Method::kSgdBaseline, Execution::kPipelinedParallel};
  const ComplexityMode pc{Method::kCheckpointing, Execution::kPipelinedParallel};
  const ComplexityMode pr{Method::kReversible, Execution::kPipelinedParallel};
  CHECK(activation_memory_model(pb, 4, 1.0) == 16.0);
  CHECK(activation_memory_model(pc, 4, 1.0) == 8.0);
  CHECK(activation_memory_model(pr, 4, 1.0) == 4.0);
}

TEST_CASE("compute cost per method") {
  CHECK(compute_cost_model(Method::kSgdBaseline, 8) == ComputeCost{8, 16});
  CHECK(compute_cost_model(Method::kReversible, 8) == ComputeCost{16, 16});
  CHECK(compute_cost_model(Method::kCheckpointing, 8) == ComputeCost{16, 16});
  CHECK(compute_cost_model(Method::kReversible, 1) == ComputeCost{2, 2});
}

TEST_CASE("activation ratio") {
  const double r = activation_ratio(scale_row("S6").config(), scale_row("S1").config());
  CHECK(std::abs(r - 23.7) <= 0.1);
  // Independent arithmetic with the footnote's literal factors.
  CHECK(r == doctest::Approx((6.67 * 352.0 * 352.0 * 5.0) / (1.33 * 256.0 * 256.0 * 2.0)).epsilon(1e-12));
  const ScaleConfig a{1.0, 224, 2};
  CHECK(activation_ratio(a, a) == 1.0);
  CHECK(activation_ratio({1.0, 448, 2}, a) == 4.0);
}

TEST_CASE("scale table rows") {
  const auto& t = scale_table();
  REQUIRE(t.size() == 7);
  const char* labels[] = {"1", "1.3", "2", "2.7", "4", "5.3", "6.7"};
  const int depths[] = {2, 2, 2, 3, 4, 4, 5};
  const int res[] = {224, 256, 256, 288, 320, 352, 352};
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(t[i].name == "S" + std::to_string(i));
    CHECK(t[i].width_label() == labels[i]);
    CHECK(t[i].depth == depths[i]);
    CHECK(t[i].resolution == res[i]);
    CHECK(t[i].resolution % 32 == 0);
    validate_scale(t[i]);
  }
  CHECK(scale_row("S4").width_multiplier == 4.0);
  CHECK_THROWS_AS((void)scale_row("S9"), ConfigError);
  CHECK_THROWS_AS(validate_scale(ScaleRow{"bad", 1.0, 2, 230}), ConfigError);
  CHECK_THROWS_AS(validate_scale(ScaleRow{"bad", 1.0, 0, 224}), ConfigError);
}

TEST_CASE("scaled channels are multiples of 16") {
  const auto s2 = backbone_config(scale_row("S2")).scaled_channels();
  CHECK(s2 == std::array<int, 4>{96, 128, 160, 320});
  for (const auto& row : scale_table()) {
    const auto c = backbone_config(row);
    CHECK(c.height == row.resolution);
    CHECK(c.extra_depth == row.depth);
    for (int ch : c.scaled_channels()) CHECK(ch % 16 == 0);
  }
}

TEST_CASE("layer MAC and parameter counts") {
  Rng rng(1);
  Conv2d<float> conv(3, 4, 3, 1, 1, 1, false, rng);
  CHECK(conv.macs(Shape{1, 3, 8, 8}) == 6912);
  Conv2d<float> pw(24, 40, 1, 1, 0, 1, true, rng);
  CHECK(pw.param_count() == 24 * 40 + 40);
  Conv2d<float> wide(48, 80, 1, 1, 0, 1, false, rng);
  CHECK(pw.macs(Shape{1, 24, 8, 8}) == 24 * 40 * 64);
  // Doubling both channel counts quadruples the MACs.
  CHECK(wide.macs(Shape{1, 48, 8, 8}) == 4 * pw.macs(Shape{1, 24, 8, 8}));
  Dense<float> d(16, 10, rng);
  CHECK(d.macs(3) == 480);
  CHECK(d.param_count() == 170);
}

TEST_CASE("model breakdown is additive and follows the quadratic resolution law") {
  auto c = BackboneConfig::toy();
  Model<float> m(c, BackwardMode::kRecompute, 2);
  const auto items = cost_breakdown(m, 1);
  std::uint64_t blocks = 0, block_params = 0;
  const CostItem* head = nullptr;
  const CostItem* backbone_total = nullptr;
  const CostItem* head_total = nullptr;
  const CostItem* total = nullptr;
  for (const auto& it : items) {
    if (it.component.rfind("block", 0) == 0) {
      blocks += it.macs;
      block_params += it.params;
    }
    if (it.component == "head") head = &it;
    if (it.component == "backbone_total") backbone_total = &it;
    if (it.component == "head_total") head_total = &it;
    if (it.component == "total") total = &it;
  }
  REQUIRE(head != nullptr);
  REQUIRE(backbone_total != nullptr);
  REQUIRE(head_total != nullptr);
  REQUIRE(total != nullptr);
  CHECK(items.front().component == "block0.stem");
  CHECK(items.front().macs == 0);
  CHECK(items.front().params == 0);
  CHECK(blocks == backbone_total->macs);
  CHECK(block_params == backbone_total->params);
  CHECK(total->macs == backbone_total->macs + head_total->macs);
  CHECK(total->params == backbone_total->params + head_total->params);
  CHECK(mac_count(m, 1) == total->macs);
  CHECK(param_count(m) == total->params);
  CHECK(mac_count(m, 3) == 3 * mac_count(m, 1));

  // Conv MACs scale with the pixel count; squeeze-excite dense layers do not,
  // so backbone MACs are a * r^2 + b.
  auto at = [&](int r) {
    auto cr = c;
    cr.height = cr.width = r;
    Model<float> mr(cr, BackwardMode::kRecompute, 2);
    CHECK(param_count(mr) == param_count(m));
    return static_cast<std::int64_t>(mr.backbone_macs(1));
  };
  const std::int64_t f64 = at(64), f128 = at(128), f256 = at(256);
  CHECK(f64 == static_cast<std::int64_t>(m.backbone_macs(1)));
  CHECK(f256 - f128 == 4 * (f128 - f64));
  CHECK(f128 < 4 * f64);
}

#pragma once

// Analytic memory/compute models and MAC/parameter counting.
// MAC conventions: conv = out_elems * in_c_per_group * kh * kw, dense = in * out
// per sample, scale transform = one per element. Bilinear upsampling,
// elementwise ops, batch norm, activations and pooling count as 0 MACs.

#include <cstdint>
#include <string>
#include <vector>

#include "revbifpn/backbone.hpp"

namespace revbifpn {

enum class Method { kSgdBaseline, kCheckpointing, kReversible };
enum class Execution { kLayerSequential, kPipelinedParallel };

struct ComplexityMode {
  Method method = Method::kReversible;
  Execution execution = Execution::kLayerSequential;
};

std::string to_string(Method m);
std::string to_string(Execution e);

// unit_bytes * {D, sqrt(D), 1} (layer-sequential) or {D^2, D^1.5, D} (pipelined).
double activation_memory_model(ComplexityMode mode, int depth, double unit_bytes);

struct ComputeCost {
  int forward_units = 0;
  int backward_units = 0;
  friend bool operator==(const ComputeCost&, const ComputeCost&) = default;
};

// Baseline (D, 2D); checkpointing and reversible (2D, 2D). The recompute
// surcharge is attributed to the pass that re-executes forwards.
ComputeCost compute_cost_model(Method method, int depth);

struct ScaleConfig {
  double width_multiplier = 1.0;
  int resolution = 224;
  int depth = 2;
};

// (m_a / m_b) * (r_a / r_b)^2 * (d_a / d_b)
double activation_ratio(const ScaleConfig& a, const ScaleConfig& b);

struct ScaleRow {
  std::string name;
  double width_multiplier = 1.0;
  int depth = 2;
  int resolution = 224;

  [[nodiscard]] ScaleConfig config() const { return {width_multiplier, resolution, depth}; }
  // One decimal, as the table prints it.
  [[nodiscard]] std::string width_label() const;
};

const std::vector<ScaleRow>& scale_table();
// Throws ConfigError naming the name of the row that is not found.
const ScaleRow& scale_row(const std::string& name);
// Resolution a multiple of 32, d >= 1, m_w > 0, scaled S0 channels multiples of 16.
void validate_scale(const ScaleRow& row);
// S0 backbone scaled by the row.
BackboneConfig backbone_config(const ScaleRow& row);

struct CostItem {
  std::string component;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

// One item per tape block and one for the head, followed by backbone, head and
// overall totals.
template <typename T>
std::vector<CostItem> cost_breakdown(Model<T>& model, int batch = 1);

template <typename T>
std::uint64_t mac_count(Model<T>& model, int batch = 1);
template <typename T>
std::uint64_t param_count(Model<T>& model);

}  // namespace revbifpn

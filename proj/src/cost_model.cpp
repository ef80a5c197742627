#include "revbifpn/cost_model.hpp"

#include <cmath>
#include <cstdio>

namespace revbifpn {

std::string to_string(Method m) {
  switch (m) {
    case Method::kSgdBaseline: return "sgd_baseline";
    case Method::kCheckpointing: return "checkpointing";
    case Method::kReversible: return "reversible";
  }
  return "?";
}

std::string to_string(Execution e) {
  return e == Execution::kLayerSequential ? "layer_sequential" : "pipelined_parallel";
}

double activation_memory_model(ComplexityMode mode, int depth, double unit_bytes) {
  if (depth < 1) throw ConfigError("activation_memory_model: D must be >= 1");
  const double d = depth;
  double factor = 1.0;
  switch (mode.method) {
    case Method::kSgdBaseline: factor = d; break;
    case Method::kCheckpointing: factor = std::sqrt(d); break;
    case Method::kReversible: factor = 1.0; break;
  }
  // Pipelined execution keeps D micro-batches in flight.
  if (mode.execution == Execution::kPipelinedParallel) factor *= d;
  return unit_bytes * factor;
}

ComputeCost compute_cost_model(Method method, int depth) {
  if (depth < 1) throw ConfigError("compute_cost_model: D must be >= 1");
  if (method == Method::kSgdBaseline) return {depth, 2 * depth};
  return {2 * depth, 2 * depth};
}

double activation_ratio(const ScaleConfig& a, const ScaleConfig& b) {
  if (!(a.width_multiplier > 0) || !(b.width_multiplier > 0) || a.resolution <= 0 ||
      b.resolution <= 0 || a.depth <= 0 || b.depth <= 0) {
    throw ConfigError("activation_ratio: all fields must be positive");
  }
  const double r = static_cast<double>(a.resolution) / b.resolution;
  return (a.width_multiplier / b.width_multiplier) * r * r *
         (static_cast<double>(a.depth) / b.depth);
}

std::string ScaleRow::width_label() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", width_multiplier);
  std::string s = buf;
  if (s.size() > 2 && s.compare(s.size() - 2, 2, ".0") == 0) s.resize(s.size() - 2);
  return s;
}

const std::vector<ScaleRow>& scale_table() {
  // Thirds kept to two decimals so the S6/S1 activation ratio comes out as 23.7.
  static const std::vector<ScaleRow> rows{
      {"S0", 1.0, 2, 224},  {"S1", 1.33, 2, 256}, {"S2", 2.0, 2, 256},  {"S3", 2.67, 3, 288},
      {"S4", 4.0, 4, 320},  {"S5", 5.33, 4, 352}, {"S6", 6.67, 5, 352},
  };
  return rows;
}

const ScaleRow& scale_row(const std::string& name) {
  for (const auto& r : scale_table()) {
    if (r.name == name) return r;
  }
  throw ConfigError("unknown scale row '" + name + "' (expected S0..S6)");
}

void validate_scale(const ScaleRow& row) {
  if (row.resolution <= 0 || row.resolution % 32 != 0) {
    throw ConfigError(row.name + ": resolution " + std::to_string(row.resolution) +
                      " is not a multiple of 32");
  }
  if (row.depth < 1) throw ConfigError(row.name + ": depth must be >= 1");
  if (!(row.width_multiplier > 0)) throw ConfigError(row.name + ": width multiplier must be positive");
  for (int c : backbone_config(row).scaled_channels()) {
    if (c <= 0 || c % 16 != 0) {
      throw ConfigError(row.name + ": scaled channel count " + std::to_string(c) +
                        " is not a positive multiple of 16");
    }
  }
}

BackboneConfig backbone_config(const ScaleRow& row) {
  BackboneConfig c = BackboneConfig::s0();
  c.width_multiplier = row.width_multiplier;
  c.extra_depth = row.depth;
  c.height = row.resolution;
  c.width = row.resolution;
  return c;
}

template <typename T>
std::vector<CostItem> cost_breakdown(Model<T>& model, int batch) {
  const BackboneConfig& cfg = model.config();
  std::vector<Shape> shapes{Shape{batch, cfg.in_channels, cfg.height, cfg.width}};
  std::vector<CostItem> items;
  CostItem backbone{"backbone_total", 0, 0};
  Tape<T>& tape = model.tape();
  for (int i = 0; i < tape.size(); ++i) {
    auto& b = tape.block(i);
    CostItem it{"block" + std::to_string(i) + "." + b.kind(), b.macs(shapes), b.param_count()};
    shapes = b.output_shapes(shapes);
    backbone.macs += it.macs;
    backbone.params += it.params;
    items.push_back(std::move(it));
  }
  CostItem head{"head", model.head().macs(shapes), model.head().param_count()};
  items.push_back(head);
  items.push_back(backbone);
  items.push_back({"head_total", head.macs, head.params});
  items.push_back({"total", backbone.macs + head.macs, backbone.params + head.params});
  return items;
}

template <typename T>
std::uint64_t mac_count(Model<T>& model, int batch) {
  return cost_breakdown(model, batch).back().macs;
}

template <typename T>
std::uint64_t param_count(Model<T>& model) {
  return cost_breakdown(model, 1).back().params;
}

template std::vector<CostItem> cost_breakdown(Model<float>&, int);
template std::vector<CostItem> cost_breakdown(Model<double>&, int);
template std::uint64_t mac_count(Model<float>&, int);
template std::uint64_t mac_count(Model<double>&, int);
template std::uint64_t param_count(Model<float>&);
template std::uint64_t param_count(Model<double>&);

}  // namespace revbifpn

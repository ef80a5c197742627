#pragma once

// Experiment drivers behind the command-line tool. Every command writes CSV to
// a stream and returns an exit code; nothing here touches the filesystem except
// IniConfig::load.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "revbifpn/backbone.hpp"
#include "revbifpn/cost_model.hpp"

namespace revbifpn {

enum ExitCode : int {
  kExitOk = 0,
  kExitToleranceBreach = 1,
  kExitNumericFailure = 2,
  kExitUsage = 64,
};

// "key = value" files with [sections]. Lookups are "section.key".
class IniConfig {
 public:
  IniConfig() = default;
  static IniConfig load(const std::string& path);
  static IniConfig parse(const std::string& text);

  [[nodiscard]] bool has(const std::string& key) const;
  [[nodiscard]] std::string get(const std::string& key, const std::string& fallback) const;
  [[nodiscard]] int get_int(const std::string& key, int fallback) const;
  [[nodiscard]] double get_double(const std::string& key, double fallback) const;
  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated list.
  [[nodiscard]] std::vector<std::string> get_list(const std::string& key,
                                                  const std::vector<std::string>& fallback) const;
  [[nodiscard]] std::vector<int> get_int_list(const std::string& key,
                                              const std::vector<int>& fallback) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

std::vector<std::string> split_list(const std::string& s);
// "1..8" or "1,2,4" style integer ranges.
std::vector<int> parse_int_range(const std::string& s);

// Shortest round-trip decimal representation, so CSV bytes depend only on values.
std::string format_number(double v);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};
LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

// max |a - b| / max(max |b|, floor).
double rel_error(std::span<const double> a, std::span<const double> b, double floor = 0.0);

// Peak live activation bytes of one full training step (backbone + head).
template <typename T>
std::size_t measure_step_peak(const BackboneConfig& config, BackwardMode mode, std::uint64_t seed,
                              int batch);

struct VerifyInverseOptions {
  std::vector<std::string> components{"revblock", "silo2", "silo3", "silo4", "backbone"};
  std::vector<Precision> precisions{Precision::kDouble, Precision::kSingle};
  std::vector<int> depths{1, 2, 4, 8};  // stacked blocks per revblock/silo row
  std::vector<int> backbone_depths{1};  // extra depth d of the toy backbone
  int trials = 50;
  double jitter = 0.1;  // stddev of the noise added to every parameter
  int batch = 2;
  int size = 16;      // level-0 spatial size for revblock/silo stacks
  int channels = 8;   // per level for revblock/silo stacks
  int backbone_resolution = 64;
  double tol_double = 1e-11;
  double tol_single = 1e-5;
  bool fresh_init = false;  // skip the parameter noise
};

struct InverseRow {
  std::string component;
  Precision precision = Precision::kDouble;
  int depth = 1;
  double max_rel_err = 0.0;
  bool pass = true;
};

std::vector<InverseRow> run_verify_inverse(const VerifyInverseOptions& o, std::uint64_t seed);

struct GradCheckOptions {
  Precision precision = Precision::kDouble;
  int silos = 3;
  int levels = 3;
  int channels = 4;
  int size = 8;
  int batch = 2;
  double jitter = 0.1;
  int samples_per_param = 4;
  double fd_step = 1e-4;
  double tol_fd = 1e-4;
  double tol_modes = 1e-10;
  // Per-tensor errors are divided by max(max |g|, floor_fraction * max over all |g|),
  // so tensors whose gradient is analytically zero compare on the global scale.
  double floor_fraction = 1e-3;
};

struct GradRow {
  std::string param;
  double rel_err_fd = 0.0;
  double rel_err_modes = 0.0;
};

struct GradCheckResult {
  std::vector<GradRow> rows;
  double global_rel_err_modes = 0.0;
  double max_rel_err_fd = 0.0;
  bool pass = true;
};

GradCheckResult run_grad_check(const GradCheckOptions& o, std::uint64_t seed);

enum class SweepAxis { kDepth, kResolution };

struct MemSweepOptions {
  SweepAxis axis = SweepAxis::kDepth;
  std::vector<int> values{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<BackwardMode> modes{BackwardMode::kStored, BackwardMode::kRecompute};
  Precision precision = Precision::kDouble;
  int batch = 2;
  int depth = 2;         // fixed when sweeping resolution
  int resolution = 64;   // fixed when sweeping depth
};

struct SweepRow {
  int axis_value = 0;
  BackwardMode mode = BackwardMode::kStored;
  std::optional<std::size_t> peak_bytes;  // empty: point failed (out of memory)
};

std::vector<SweepRow> run_mem_sweep(const MemSweepOptions& o, std::uint64_t seed);

struct TrainToyOptions {
  Precision precision = Precision::kDouble;
  std::vector<BackwardMode> modes{BackwardMode::kRecompute};
  TrainOptions train;
  DatasetSpec data;
  int extra_depth = 1;
  int resolution = 32;
  double parity_tol_double = 1e-9;
  double parity_tol_single = 1e-3;
};

struct TrainToyResult {
  std::vector<TrainRecord> records;  // one per mode, in option order
  std::vector<double> parity;        // per step, when two modes ran
  bool parity_pass = true;
};

// Throws NumericError when a loss is not finite.
TrainToyResult run_train_toy(const TrainToyOptions& o, std::uint64_t seed);

struct CostOptions {
  std::string model = "toy";  // toy or S0..S6
  Precision precision = Precision::kSingle;
  int batch = 1;
};

std::vector<CostItem> run_cost(const CostOptions& o, std::uint64_t seed);
BackboneConfig model_config(const std::string& name);

// CSV writers; each returns the exit code of the command.
int write_verify_inverse(std::ostream& out, std::ostream& err, const std::vector<InverseRow>& rows);
int write_grad_check(std::ostream& out, std::ostream& err, const GradCheckResult& r);
int write_mem_sweep(std::ostream& out, const std::vector<SweepRow>& rows);
int write_train_toy(std::ostream& out, std::ostream& err, const TrainToyResult& r);
void write_cost(std::ostream& out, const std::vector<CostItem>& items);
void write_ratio(std::ostream& out, const std::string& a, const std::string& b);
void write_scale_table(std::ostream& out);

}  // namespace revbifpn

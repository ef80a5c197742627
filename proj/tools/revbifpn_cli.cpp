// revbifpn: experiment harness. See README.md for the command reference.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "revbifpn/harness.hpp"

namespace fs = std::filesystem;
using namespace revbifpn;

namespace {

constexpr const char* kOutDirEnv = "REVBIFPN_OUT_DIR";

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "INI config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "RNG seed")->required();
  cmd->add_option("--out", c.out, std::string("CSV output path (default: $") + kOutDirEnv +
                                      "/<command>.csv, else stdout)");
  cmd->add_flag("--force", c.force, "overwrite an existing output file");
}

IniConfig load_config(const Common& c) {
  return c.config.empty() ? IniConfig{} : IniConfig::load(c.config);
}

std::vector<Precision> parse_precisions(const std::vector<std::string>& v) {
  std::vector<Precision> out;
  for (const auto& s : v) out.push_back(parse_precision(s));
  return out;
}

std::vector<BackwardMode> parse_modes(const std::vector<std::string>& v) {
  std::vector<BackwardMode> out;
  for (const auto& s : v) out.push_back(parse_backward_mode(s));
  return out;
}

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Resolves the destination and refuses to clobber without --force.
std::string output_path(const Common& c, const std::string& command) {
  std::string path = c.out;
  if (path.empty()) {
    if (const char* dir = std::getenv(kOutDirEnv); dir != nullptr && *dir != '\0') {
      path = (fs::path(dir) / (command + ".csv")).string();
    }
  }
  if (!path.empty() && fs::exists(path) && !c.force) {
    throw UsageError("refusing to overwrite '" + path + "' (pass --force)");
  }
  return path;
}

void emit(const std::string& path, const std::string& csv) {
  if (path.empty()) {
    std::cout << csv;
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot write '" + path + "'");
  f << csv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RevBiFPN experiment harness: invertibility, gradient parity, memory sweeps, toy training and cost models"};
  app.require_subcommand(1);

  // verify-inverse
  Common vi_c;
  std::vector<std::string> vi_components, vi_precisions;
  std::string vi_depths;
  int vi_trials = 0;
  bool vi_fresh = false;
  auto* vi = app.add_subcommand("verify-inverse", "round-trip reconstruction error of reversible components");
  add_common(vi, vi_c);
  vi->add_option("--components", vi_components, "revblock, silo2, silo3, silo4, backbone")->delimiter(',');
  vi->add_option("--precision", vi_precisions, "double and/or single")->delimiter(',');
  vi->add_option("--depths", vi_depths, "stack depths, e.g. 1,2,4,8 or 1..8");
  vi->add_option("--trials", vi_trials, "random parameterizations per row");
  vi->add_flag("--fresh-init", vi_fresh, "keep the zero-initialized parameters");

  // grad-check
  Common gc_c;
  std::string gc_precision;
  auto* gc = app.add_subcommand("grad-check", "stored vs recompute vs finite-difference gradients");
  add_common(gc, gc_c);
  gc->add_option("--precision", gc_precision, "double or single");

  // mem-sweep
  Common ms_c;
  std::string ms_axis, ms_range, ms_precision;
  std::vector<std::string> ms_modes;
  int ms_batch = 0;
  auto* ms = app.add_subcommand("mem-sweep", "peak live activation bytes over depth or resolution");
  add_common(ms, ms_c);
  ms->add_option("--axis", ms_axis, "depth or resolution")->check(CLI::IsMember({"depth", "resolution"}));
  ms->add_option("--range", ms_range, "axis values, e.g. 1..8 or 64,128,256");
  ms->add_option("--modes", ms_modes, "stored and/or recompute")->delimiter(',');
  ms->add_option("--precision", ms_precision, "double or single");
  ms->add_option("--batch", ms_batch, "batch size");

  // train-toy
  Common tt_c;
  std::string tt_precision, tt_mode;
  int tt_steps = 0;
  double tt_lr = 0.0;
  bool tt_both = false;
  auto* tt = app.add_subcommand("train-toy", "SGD on the synthetic dataset");
  add_common(tt, tt_c);
  tt->add_option("--steps", tt_steps, "SGD steps");
  tt->add_option("--precision", tt_precision, "double or single");
  tt->add_option("--mode", tt_mode, "stored or recompute");
  tt->add_option("--lr", tt_lr, "learning rate");
  tt->add_flag("--both", tt_both, "run both modes and report per-step loss parity");

  // cost
  Common co_c;
  std::string co_model;
  std::vector<std::string> co_ratio;
  bool co_table = false;
  auto* co = app.add_subcommand("cost", "MAC/parameter counts, activation ratios and the scale table");
  add_common(co, co_c);
  co->add_option("--model", co_model, "toy or S0..S6");
  co->add_option("--ratio", co_ratio, "activation ratio of two scale rows, e.g. S6 S1")->expected(2);
  co->add_flag("--scale-table", co_table, "print the S0..S6 scale table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    (void)app.exit(e);
    return kExitUsage;
  }

  try {
    std::ostringstream csv;
    int code = kExitOk;
    std::string path;

    if (vi->parsed()) {
      const IniConfig ini = load_config(vi_c);
      const std::string s = "verify-inverse.";
      VerifyInverseOptions o;
      o.components = ini.get_list(s + "components", o.components);
      if (!vi_components.empty()) o.components = vi_components;
      if (ini.has(s + "precisions")) o.precisions = parse_precisions(ini.get_list(s + "precisions", {}));
      if (!vi_precisions.empty()) o.precisions = parse_precisions(vi_precisions);
      o.depths = ini.get_int_list(s + "depths", o.depths);
      if (!vi_depths.empty()) o.depths = parse_int_range(vi_depths);
      o.backbone_depths = ini.get_int_list(s + "backbone_depths", o.backbone_depths);
      o.trials = vi_trials > 0 ? vi_trials : ini.get_int(s + "trials", o.trials);
      o.jitter = ini.get_double(s + "jitter", o.jitter);
      o.batch = ini.get_int(s + "batch", o.batch);
      o.size = ini.get_int(s + "size", o.size);
      o.channels = ini.get_int(s + "channels", o.channels);
      o.backbone_resolution = ini.get_int(s + "backbone_resolution", o.backbone_resolution);
      o.tol_double = ini.get_double(s + "tol_double", o.tol_double);
      o.tol_single = ini.get_double(s + "tol_single", o.tol_single);
      o.fresh_init = vi_fresh || ini.get_bool(s + "fresh_init", false);
      path = output_path(vi_c, "verify-inverse");
      code = write_verify_inverse(csv, std::cerr, run_verify_inverse(o, vi_c.seed));
    } else if (gc->parsed()) {
      const IniConfig ini = load_config(gc_c);
      const std::string s = "grad-check.";
      GradCheckOptions o;
      o.precision = parse_precision(!gc_precision.empty() ? gc_precision : ini.get(s + "precision", "double"));
      if (o.precision == Precision::kSingle) {
        // Central differences in single precision need a wider step and budget.
        o.fd_step = 1e-2;
        o.tol_fd = 5e-2;
        o.tol_modes = 1e-4;
      }
      o.silos = ini.get_int(s + "silos", o.silos);
      o.levels = ini.get_int(s + "levels", o.levels);
      o.channels = ini.get_int(s + "channels", o.channels);
      o.size = ini.get_int(s + "size", o.size);
      o.batch = ini.get_int(s + "batch", o.batch);
      o.jitter = ini.get_double(s + "jitter", o.jitter);
      o.samples_per_param = ini.get_int(s + "samples_per_param", o.samples_per_param);
      o.fd_step = ini.get_double(s + "fd_step", o.fd_step);
      o.tol_fd = ini.get_double(s + "tol_fd", o.tol_fd);
      o.tol_modes = ini.get_double(s + "tol_modes", o.tol_modes);
      o.floor_fraction = ini.get_double(s + "floor_fraction", o.floor_fraction);
      path = output_path(gc_c, "grad-check");
      code = write_grad_check(csv, std::cerr, run_grad_check(o, gc_c.seed));
    } else if (ms->parsed()) {
      const IniConfig ini = load_config(ms_c);
      const std::string s = "mem-sweep.";
      MemSweepOptions o;
      const std::string axis = !ms_axis.empty() ? ms_axis : ini.get(s + "axis", "depth");
      if (axis == "depth") {
        o.axis = SweepAxis::kDepth;
      } else if (axis == "resolution") {
        o.axis = SweepAxis::kResolution;
        o.values = {64, 128, 256};
      } else {
        throw ConfigError("mem-sweep: axis must be depth or resolution, got '" + axis + "'");
      }
      o.values = ini.get_int_list(s + "range", o.values);
      if (!ms_range.empty()) o.values = parse_int_range(ms_range);
      if (ini.has(s + "modes")) o.modes = parse_modes(ini.get_list(s + "modes", {}));
      if (!ms_modes.empty()) o.modes = parse_modes(ms_modes);
      o.precision = parse_precision(!ms_precision.empty() ? ms_precision : ini.get(s + "precision", "double"));
      o.batch = ms_batch > 0 ? ms_batch : ini.get_int(s + "batch", o.batch);
      o.depth = ini.get_int(s + "depth", o.depth);
      o.resolution = ini.get_int(s + "resolution", o.resolution);
      path = output_path(ms_c, "mem-sweep");
      code = write_mem_sweep(csv, run_mem_sweep(o, ms_c.seed));
    } else if (tt->parsed()) {
      const IniConfig ini = load_config(tt_c);
      const std::string s = "train-toy.";
      TrainToyOptions o;
      o.precision = parse_precision(!tt_precision.empty() ? tt_precision : ini.get(s + "precision", "double"));
      const bool both = tt_both || ini.get_bool(s + "both", false);
      if (both) {
        o.modes = {BackwardMode::kStored, BackwardMode::kRecompute};
      } else {
        o.modes = {parse_backward_mode(!tt_mode.empty() ? tt_mode : ini.get(s + "mode", "recompute"))};
      }
      o.train.steps = tt_steps > 0 ? tt_steps : ini.get_int(s + "steps", o.train.steps);
      o.train.batch = ini.get_int(s + "batch", o.train.batch);
      o.train.learning_rate = tt_lr > 0 ? tt_lr : ini.get_double(s + "learning_rate", o.train.learning_rate);
      o.train.momentum = ini.get_double(s + "momentum", o.train.momentum);
      o.data.count = ini.get_int(s + "samples", o.data.count);
      o.data.classes = ini.get_int(s + "classes", o.data.classes);
      o.data.noise = ini.get_double(s + "noise", o.data.noise);
      o.extra_depth = ini.get_int(s + "depth", o.extra_depth);
      o.resolution = ini.get_int(s + "resolution", o.resolution);
      path = output_path(tt_c, "train-toy");
      code = write_train_toy(csv, std::cerr, run_train_toy(o, tt_c.seed));
    } else if (co->parsed()) {
      const IniConfig ini = load_config(co_c);
      const std::string s = "cost.";
      path = output_path(co_c, "cost");
      if (!co_ratio.empty()) {
        write_ratio(csv, co_ratio[0], co_ratio[1]);
      } else if (co_table || ini.get_bool(s + "scale_table", false)) {
        write_scale_table(csv);
      } else {
        CostOptions o;
        o.model = !co_model.empty() ? co_model : ini.get(s + "model", o.model);
        o.precision = parse_precision(ini.get(s + "precision", "single"));
        o.batch = ini.get_int(s + "batch", o.batch);
        write_cost(csv, run_cost(o, co_c.seed));
      }
    }
    emit(path, csv.str());
    return code;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumericFailure;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 70;
  }
}

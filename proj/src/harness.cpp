#include "revbifpn/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <new>
#include <ostream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace revbifpn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
FeaturePyramid<T> random_pyramid(const std::vector<Shape>& shapes, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  FeaturePyramid<T> p;
  for (const Shape& s : shapes) {
    Tensor<T> t(s);
    for (T& v : t.data()) v = static_cast<T>(normal(rng));
    p.levels.push_back(std::move(t));
  }
  return p;
}

std::vector<Shape> level_shapes(int levels, int channels, int batch, int size) {
  std::vector<Shape> s;
  for (int i = 0; i < levels; ++i) s.push_back({batch, channels, size >> i, size >> i});
  return s;
}

template <typename T>
FeaturePyramid<T> run_blocks(Tape<T>& tape, const FeaturePyramid<T>& x, std::uint64_t invocation) {
  const ForwardContext ctx{invocation, Phase::kForward, nullptr};
  FeaturePyramid<T> p = x;
  for (int i = 0; i < tape.size(); ++i) p = tape.block(i).forward(p, ctx, nullptr);
  return p;
}

// Tape and input shapes for one verify-inverse component.
template <typename T>
std::unique_ptr<Tape<T>> build_component(const std::string& component, int depth,
                                         const VerifyInverseOptions& o, Rng& rng,
                                         std::vector<Shape>& shapes) {
  auto tape = std::make_unique<Tape<T>>();
  if (component == "revblock") {
    const std::vector<int> ch{o.channels};
    for (int d = 0; d < depth; ++d) tape->push(std::make_unique<ResidualStage<T>>(ch, rng));
    shapes = level_shapes(1, o.channels, o.batch, o.size);
  } else if (component.rfind("silo", 0) == 0 && component.size() == 5 && component[4] >= '2' &&
             component[4] <= '4') {
    const int n = component[4] - '0';
    const std::vector<int> ch(static_cast<std::size_t>(n), o.channels);
    for (int d = 0; d < depth; ++d) tape->push(std::make_unique<Silo<T>>(SiloSpec{ch, false, {}}, rng));
    shapes = level_shapes(n, o.channels, o.batch, o.size);
  } else if (component == "backbone") {
    BackboneConfig cfg = BackboneConfig::toy();
    cfg.extra_depth = depth;
    cfg.height = cfg.width = o.backbone_resolution;
    tape = build_backbone<T>(cfg, BackwardMode::kStored, rng);
    shapes = {Shape{o.batch, cfg.in_channels, cfg.height, cfg.width}};
  } else {
    throw ConfigError("unknown component '" + component + "' (expected revblock, silo2..silo4, backbone)");
  }
  return tape;
}

template <typename T>
double round_trip_error(const std::string& component, int depth, const VerifyInverseOptions& o,
                        std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Shape> shapes;
  auto tape = build_component<T>(component, depth, o, rng, shapes);
  if (!o.fresh_init) {
    const auto params = tape->parameters();
    jitter_parameters<T>(params, rng, o.jitter);
  }
  const FeaturePyramid<T> x = random_pyramid<T>(shapes, rng);
  const FeaturePyramid<T> y = run_blocks(*tape, x, 1);
  const auto inputs = tape->reconstruct_inputs(y, 1);
  return max_rel_error(inputs.front(), x);
}

std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }
std::vector<double> to_double(std::span<const double> v) { return {v.begin(), v.end()}; }

template <typename T>
struct GradModel {
  std::unique_ptr<Tape<T>> tape;
  FeaturePyramid<T> input;
  FeaturePyramid<T> weights;
};

template <typename T>
GradModel<T> make_grad_model(const GradCheckOptions& o, BackwardMode mode, std::uint64_t seed) {
  GradModel<T> m;
  Rng rng(seed);
  m.tape = std::make_unique<Tape<T>>(mode);
  const std::vector<int> ch(static_cast<std::size_t>(o.levels), o.channels);
  for (int s = 0; s < o.silos; ++s) m.tape->push(std::make_unique<Silo<T>>(SiloSpec{ch, false, {}}, rng));
  const auto params = m.tape->parameters();
  jitter_parameters<T>(params, rng, o.jitter);
  const auto shapes = level_shapes(o.levels, o.channels, o.batch, o.size);
  m.input = random_pyramid<T>(shapes, rng);
  m.weights = random_pyramid<T>(m.tape->output_shapes(shapes), rng);
  return m;
}

// L = sum_l <w_l, y_l>, accumulated in double.
template <typename T>
double weighted_loss(GradModel<T>& m, const FeaturePyramid<T>& x) {
  const FeaturePyramid<T> y = run_blocks(*m.tape, x, 1);
  double l = 0.0;
  for (int i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y[i].numel(); ++j) l += static_cast<double>(y[i][j]) * m.weights[i][j];
  return l;
}

template <typename T>
GradCheckResult grad_check_impl(const GradCheckOptions& o, std::uint64_t seed) {
  GradModel<T> stored = make_grad_model<T>(o, BackwardMode::kStored, seed);
  GradModel<T> recompute = make_grad_model<T>(o, BackwardMode::kRecompute, seed);

  std::vector<FeaturePyramid<T>> grad_in;
  for (GradModel<T>* m : {&stored, &recompute}) {
    m->tape->zero_grad();
    (void)m->tape->forward(m->input, 1);
    grad_in.push_back(m->tape->backward(m->weights));
  }

  auto ps = stored.tape->parameters();
  auto pr = recompute.tape->parameters();
  double global_max = 0.0;
  double global_diff = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (std::size_t j = 0; j < ps[i].grad.size(); ++j) {
      global_max = std::max(global_max, std::abs(static_cast<double>(ps[i].grad[j])));
      global_diff = std::max(global_diff, std::abs(static_cast<double>(ps[i].grad[j]) - pr[i].grad[j]));
    }
  }
  const double floor = o.floor_fraction * global_max;

  GradCheckResult r;
  r.global_rel_err_modes = global_max > 0 ? global_diff / global_max : global_diff;
  Rng pick_rng(seed ^ 0x9e3779b97f4a7c15ULL);

  // Central differences on a sample of coordinates of `values`, compared
  // against `analytic`; `values` is perturbed in place and restored.
  auto fd_error = [&](std::span<T> values, std::span<const double> analytic, double scale,
                      const std::function<double()>& loss) {
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    const int samples = std::min<int>(o.samples_per_param, static_cast<int>(values.size()));
    double diff = 0.0;
    for (int s = 0; s < samples; ++s) {
      const std::size_t j = values.size() <= static_cast<std::size_t>(o.samples_per_param)
                                ? static_cast<std::size_t>(s)
                                : pick(pick_rng);
      const T saved = values[j];
      values[j] = static_cast<T>(saved + o.fd_step);
      const double up = loss();
      values[j] = static_cast<T>(saved - o.fd_step);
      const double down = loss();
      values[j] = saved;
      const double fd = (up - down) / (2.0 * o.fd_step);
      diff = std::max(diff, std::abs(fd - analytic[j]));
    }
    return diff / std::max(scale, floor);
  };
  auto stored_loss = [&] { return weighted_loss(stored, stored.input); };

  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto a = to_double(std::span<const T>(ps[i].grad));
    const auto b = to_double(std::span<const T>(pr[i].grad));
    double scale = 0.0;
    for (double v : a) scale = std::max(scale, std::abs(v));
    GradRow row;
    row.param = ps[i].name;
    row.rel_err_modes = rel_error(b, a, floor);
    row.rel_err_fd = fd_error(ps[i].value, a, scale, stored_loss);
    r.rows.push_back(row);
  }

  // Input gradient, on its own scale.
  std::vector<double> gs;
  std::vector<double> gr;
  for (int l = 0; l < grad_in[0].size(); ++l) {
    for (T v : grad_in[0][l].data()) gs.push_back(v);
    for (T v : grad_in[1][l].data()) gr.push_back(v);
  }
  double in_scale = 0.0;
  for (double v : gs) in_scale = std::max(in_scale, std::abs(v));
  GradRow in_row;
  in_row.param = "input";
  in_row.rel_err_modes = rel_error(gr, gs, 0.0);
  double in_diff = 0.0;
  for (int l = 0; l < stored.input.size(); ++l) {
    const std::size_t offset = [&] {
      std::size_t o2 = 0;
      for (int k = 0; k < l; ++k) o2 += stored.input[k].numel();
      return o2;
    }();
    const std::span<const double> an(gs.data() + offset, stored.input[l].numel());
    // fd_error normalizes by max(scale, floor); pass the global input scale.
    in_diff = std::max(in_diff, fd_error(stored.input[l].data(), an, in_scale, stored_loss));
  }
  in_row.rel_err_fd = in_diff;
  r.rows.push_back(in_row);

  const double fd_tol = o.tol_fd;
  for (const auto& row : r.rows) {
    r.max_rel_err_fd = std::max(r.max_rel_err_fd, row.rel_err_fd);
    if (!(row.rel_err_fd <= fd_tol) || !(row.rel_err_modes <= o.tol_modes)) r.pass = false;
  }
  if (!(r.global_rel_err_modes <= o.tol_modes)) r.pass = false;
  return r;
}

template <typename T>
TrainRecord train_one(const TrainToyOptions& o, BackwardMode mode, std::uint64_t seed) {
  BackboneConfig cfg = BackboneConfig::toy();
  cfg.extra_depth = o.extra_depth;
  cfg.height = cfg.width = o.resolution;
  cfg.num_classes = o.data.classes;
  cfg.in_channels = o.data.channels;
  DatasetSpec spec = o.data;
  spec.height = spec.width = o.resolution;
  const auto data = make_synthetic_dataset<T>(spec, seed);
  return train_toy<T>(cfg, data, mode, o.train, seed);
}

std::string csv_double(double v) { return format_number(v); }

}  // namespace

IniConfig IniConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

IniConfig IniConfig::parse(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  IniConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      c.entries_.emplace_back(section, trim(body.data()));
      continue;
    }
    for (const auto& [key, value] : body) c.entries_.emplace_back(section + "." + key, trim(value.data()));
  }
  return c;
}

bool IniConfig::has(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
}

std::string IniConfig::get(const std::string& key, const std::string& fallback) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return fallback;
}

int IniConfig::get_int(const std::string& key, int fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError("config: '" + key + "' is not an integer: " + v);
  return out;
}

double IniConfig::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError("config: '" + key + "' is not a number: " + v);
  return out;
}

bool IniConfig::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: '" + key + "' is not a boolean: " + v);
}

std::vector<std::string> IniConfig::get_list(const std::string& key,
                                             const std::vector<std::string>& fallback) const {
  return has(key) ? split_list(get(key, "")) : fallback;
}

std::vector<int> IniConfig::get_int_list(const std::string& key, const std::vector<int>& fallback) const {
  return has(key) ? parse_int_range(get(key, "")) : fallback;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> parse_int_range(const std::string& s) {
  auto to_int = [&](const std::string& t) {
    int v = 0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || p != t.data() + t.size()) throw ConfigError("bad integer '" + t + "' in '" + s + "'");
    return v;
  };
  std::vector<int> out;
  for (const std::string& item : split_list(s)) {
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(to_int(item));
      continue;
    }
    const int lo = to_int(trim(item.substr(0, dots)));
    const int hi = to_int(trim(item.substr(dots + 2)));
    if (hi < lo) throw ConfigError("empty range '" + item + "'");
    for (int v = lo; v <= hi; ++v) out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty integer list '" + s + "'");
  return out;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("fit_line: need >= 2 paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw ConfigError("fit_line: x values are all equal");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r_squared = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return f;
}

double rel_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw ConfigError("rel_error: size mismatch");
  double diff = 0.0;
  double ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    ref = std::max(ref, std::abs(b[i]));
  }
  const double denom = std::max(ref, floor);
  return denom > 0.0 ? diff / denom : diff;
}

template <typename T>
std::size_t measure_step_peak(const BackboneConfig& config, BackwardMode mode, std::uint64_t seed,
                              int batch) {
  Model<T> model(config, mode, seed);
  DatasetSpec spec;
  spec.count = batch;
  spec.classes = config.num_classes;
  spec.channels = config.in_channels;
  spec.height = config.height;
  spec.width = config.width;
  const auto data = make_synthetic_dataset<T>(spec, seed);
  auto [images, labels] = data.batch(0, batch);
  return model.loss_and_grad(images, labels, 1).peak_activation_bytes;
}

template std::size_t measure_step_peak<float>(const BackboneConfig&, BackwardMode, std::uint64_t, int);
template std::size_t measure_step_peak<double>(const BackboneConfig&, BackwardMode, std::uint64_t, int);

std::vector<InverseRow> run_verify_inverse(const VerifyInverseOptions& o, std::uint64_t seed) {
  if (o.trials < 1) throw ConfigError("verify-inverse: trials must be >= 1");
  std::vector<InverseRow> rows;
  for (const std::string& component : o.components) {
    for (Precision prec : o.precisions) {
      for (int depth : component == "backbone" ? o.backbone_depths : o.depths) {
        if (depth < 1) throw ConfigError("verify-inverse: depth must be >= 1");
        InverseRow row{component, prec, depth, 0.0, true};
        for (int t = 0; t < o.trials; ++t) {
          const std::uint64_t s = seed * 1000003ULL + static_cast<std::uint64_t>(t);
          const double e = prec == Precision::kDouble ? round_trip_error<double>(component, depth, o, s)
                                                      : round_trip_error<float>(component, depth, o, s);
          row.max_rel_err = std::max(row.max_rel_err, std::isnan(e) ? INFINITY : e);
        }
        row.pass = row.max_rel_err <= (prec == Precision::kDouble ? o.tol_double : o.tol_single);
        rows.push_back(row);
      }
    }
  }
  return rows;
}

GradCheckResult run_grad_check(const GradCheckOptions& o, std::uint64_t seed) {
  if (o.silos < 1 || o.levels < 1 || o.levels > 4) throw ConfigError("grad-check: need >= 1 silo and 1..4 levels");
  return o.precision == Precision::kDouble ? grad_check_impl<double>(o, seed)
                                           : grad_check_impl<float>(o, seed);
}

std::vector<SweepRow> run_mem_sweep(const MemSweepOptions& o, std::uint64_t seed) {
  std::vector<SweepRow> rows;
  for (int v : o.values) {
    BackboneConfig cfg = BackboneConfig::toy();
    cfg.extra_depth = o.axis == SweepAxis::kDepth ? v : o.depth;
    const int res = o.axis == SweepAxis::kResolution ? v : o.resolution;
    cfg.height = cfg.width = res;
    cfg.validate();
    for (BackwardMode mode : o.modes) {
      SweepRow row{v, mode, std::nullopt};
      try {
        row.peak_bytes = o.precision == Precision::kDouble
                             ? measure_step_peak<double>(cfg, mode, seed, o.batch)
                             : measure_step_peak<float>(cfg, mode, seed, o.batch);
      } catch (const std::bad_alloc&) {
        row.peak_bytes.reset();
      }
      rows.push_back(row);
    }
  }
  return rows;
}

TrainToyResult run_train_toy(const TrainToyOptions& o, std::uint64_t seed) {
  if (o.modes.empty()) throw ConfigError("train-toy: no modes");
  TrainToyResult r;
  for (BackwardMode mode : o.modes) {
    r.records.push_back(o.precision == Precision::kDouble ? train_one<double>(o, mode, seed)
                                                          : train_one<float>(o, mode, seed));
  }
  if (r.records.size() == 2) {
    const double tol = o.precision == Precision::kDouble ? o.parity_tol_double : o.parity_tol_single;
    const auto& a = r.records[0].steps;
    const auto& b = r.records[1].steps;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double p = std::abs(a[i].loss - b[i].loss) / std::max(std::abs(a[i].loss), 1e-300);
      r.parity.push_back(p);
      if (!(p <= tol)) r.parity_pass = false;
    }
  }
  return r;
}

BackboneConfig model_config(const std::string& name) {
  if (name == "toy") return BackboneConfig::toy();
  return backbone_config(scale_row(name));
}

std::vector<CostItem> run_cost(const CostOptions& o, std::uint64_t seed) {
  const BackboneConfig cfg = model_config(o.model);
  if (o.precision == Precision::kDouble) {
    Model<double> m(cfg, BackwardMode::kStored, seed);
    return cost_breakdown(m, o.batch);
  }
  Model<float> m(cfg, BackwardMode::kStored, seed);
  return cost_breakdown(m, o.batch);
}

int write_verify_inverse(std::ostream& out, std::ostream& err, const std::vector<InverseRow>& rows) {
  int code = kExitOk;
  out << "component,precision,depth,max_rel_reconstruction_err\n";
  for (const auto& r : rows) {
    const std::string line = r.component + "," + to_string(r.precision) + "," +
                             std::to_string(r.depth) + "," + csv_double(r.max_rel_err);
    out << line << "\n";
    if (!r.pass) {
      err << "tolerance breach: " << line << "\n";
      code = kExitToleranceBreach;
    }
  }
  return code;
}

int write_grad_check(std::ostream& out, std::ostream& err, const GradCheckResult& r) {
  out << "param,rel_err_fd,rel_err_modes\n";
  for (const auto& row : r.rows) {
    out << row.param << "," << csv_double(row.rel_err_fd) << "," << csv_double(row.rel_err_modes) << "\n";
  }
  if (!r.pass) {
    err << "tolerance breach: max rel_err_fd " << csv_double(r.max_rel_err_fd)
        << ", global rel_err_modes " << csv_double(r.global_rel_err_modes) << "\n";
    return kExitToleranceBreach;
  }
  return kExitOk;
}

int write_mem_sweep(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "axis_value,mode,peak_activation_bytes\n";
  for (const auto& r : rows) {
    out << r.axis_value << "," << to_string(r.mode) << ","
        << (r.peak_bytes ? std::to_string(*r.peak_bytes) : std::string("OOM")) << "\n";
  }
  return kExitOk;
}

int write_train_toy(std::ostream& out, std::ostream& err, const TrainToyResult& r) {
  const bool both = r.records.size() == 2;
  out << "step,mode,loss,peak_bytes,fwd_evals" << (both ? ",parity" : "") << "\n";
  const std::size_t steps = r.records.front().steps.size();
  for (std::size_t i = 0; i < steps; ++i) {
    for (const auto& rec : r.records) {
      const auto& s = rec.steps[i];
      out << s.step << "," << to_string(rec.mode) << "," << csv_double(s.loss) << ","
          << s.peak_activation_bytes << "," << (s.fwd_evals_forward + s.fwd_evals_backward);
      if (both) out << "," << csv_double(r.parity[i]);
      out << "\n";
    }
  }
  if (both && !r.parity_pass) {
    err << "tolerance breach: loss parity between modes exceeded the tolerance\n";
    return kExitToleranceBreach;
  }
  return kExitOk;
}

void write_cost(std::ostream& out, const std::vector<CostItem>& items) {
  out << "component,macs,params\n";
  for (const auto& it : items) out << it.component << "," << it.macs << "," << it.params << "\n";
}

void write_ratio(std::ostream& out, const std::string& a, const std::string& b) {
  const double r = activation_ratio(scale_row(a).config(), scale_row(b).config());
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", r);
  out << "a,b,activation_ratio\n" << a << "," << b << "," << buf << "\n";
}

void write_scale_table(std::ostream& out) {
  out << "name,m_w,d,resolution\n";
  for (const auto& r : scale_table()) {
    validate_scale(r);
    out << r.name << "," << r.width_label() << "," << r.depth << "," << r.resolution << "\n";
  }
}

}  // namespace revbifpn

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero
// when any criterion fails.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "revbifpn/cost_model.hpp"
#include "revbifpn/harness.hpp"

using namespace revbifpn;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// 1. Round-trip reconstruction over random parameterizations.
Outcome invertibility() {
  VerifyInverseOptions o;  // 50 trials; stacks of depth 1, 2, 4, 8; toy backbone
  const auto rows = run_verify_inverse(o, 1);
  double worst_d = 0, worst_s = 0;
  bool pass = true;
  for (const auto& r : rows) {
    pass = pass && r.pass;
    (r.precision == Precision::kDouble ? worst_d : worst_s) =
        std::max(r.precision == Precision::kDouble ? worst_d : worst_s, r.max_rel_err);
  }
  return {pass && worst_d <= 1e-11 && worst_s <= 1e-5,
          "max rel err double " + fmt(worst_d) + ", single " + fmt(worst_s) + " over " +
              std::to_string(rows.size()) + " rows"};
}

// 2. Stored vs recompute vs finite differences on a 3-silo model.
Outcome gradient_parity() {
  GradCheckOptions o;
  o.silos = 3;
  const auto r = run_grad_check(o, 2);
  return {r.global_rel_err_modes <= 1e-10 && r.max_rel_err_fd <= 1e-4,
          "modes " + fmt(r.global_rel_err_modes) + ", finite differences " + fmt(r.max_rel_err_fd)};
}

std::vector<double> peaks(const std::vector<SweepRow>& rows, BackwardMode m) {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.mode == m) out.push_back(r.peak_bytes ? static_cast<double>(*r.peak_bytes) : NAN);
  }
  return out;
}

// 3. Peak activations over depth.
Outcome memory_law() {
  MemSweepOptions o;
  o.values = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto rows = run_mem_sweep(o, 3);
  const auto stored = peaks(rows, BackwardMode::kStored);
  const auto recompute = peaks(rows, BackwardMode::kRecompute);
  const auto [lo, hi] = std::minmax_element(recompute.begin(), recompute.end());
  const double spread = (*hi - *lo) / *lo;
  std::vector<double> x(o.values.begin(), o.values.end());
  const auto fit = fit_line(x, stored);
  return {spread < 0.10 && fit.slope > 0.0 && fit.r_squared > 0.9,
          "recompute spread " + fmt(100 * spread) + "%, stored slope " + fmt(fit.slope) +
              " B/depth, R^2 " + fmt(fit.r_squared)};
}

// 4. Peak activations over resolution.
Outcome resolution_law() {
  MemSweepOptions o;
  o.axis = SweepAxis::kResolution;
  o.values = {64, 128, 256};
  const auto rows = run_mem_sweep(o, 4);
  const auto stored = peaks(rows, BackwardMode::kStored);
  const auto recompute = peaks(rows, BackwardMode::kRecompute);
  bool pass = true;
  double lo = 1e9, hi = 0;
  for (const auto* series : {&stored, &recompute}) {
    for (std::size_t i = 1; i < series->size(); ++i) {
      const double ratio = (*series)[i] / (*series)[i - 1];
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
      pass = pass && std::abs(ratio - 4.0) <= 0.6;
    }
  }
  for (std::size_t i = 0; i < stored.size(); ++i) pass = pass && recompute[i] < stored[i];
  return {pass, "doubling ratios in [" + fmt(lo) + ", " + fmt(hi) + "], recompute < stored at every resolution"};
}

// 5. Transform evaluations per phase.
Outcome compute_accounting() {
  bool pass = true;
  std::string detail;
  for (int d : {1, 2, 4, 8}) {
    auto c = BackboneConfig::toy();
    c.extra_depth = d;
    c.height = c.width = 32;
    Tensor<double> x(Shape{2, 1, 32, 32});
    Rng rng(5);
    std::normal_distribution<double> n;
    for (double& v : x.data()) v = n(rng);
    const std::vector<int> labels{0, 1};
    Model<double> stored(c, BackwardMode::kStored, 5);
    Model<double> recompute(c, BackwardMode::kRecompute, 5);
    const auto s = stored.loss_and_grad(x, labels, 1);
    const auto r = recompute.loss_and_grad(x, labels, 1);
    pass = pass && s.fwd_evals_backward == 0 && r.fwd_evals_backward == r.fwd_evals_forward &&
           s.fwd_evals_forward == r.fwd_evals_forward && s.fwd_evals_forward > 0;
    detail += (detail.empty() ? "" : "; ") + std::string("D=") + std::to_string(d) + " fwd " +
              std::to_string(r.fwd_evals_forward) + " bwd stored " + std::to_string(s.fwd_evals_backward) +
              " recompute " + std::to_string(r.fwd_evals_backward);
  }
  return {pass, detail};
}

// 6. Published constants.
Outcome constants() {
  const double ratio = activation_ratio(scale_row("S6").config(), scale_row("S1").config());
  bool pass = std::abs(ratio - 23.7) <= 0.1;

  const std::vector<std::tuple<std::string, std::string, int, int>> table{
      {"S0", "1", 2, 224},   {"S1", "1.3", 2, 256}, {"S2", "2", 2, 256},   {"S3", "2.7", 3, 288},
      {"S4", "4", 4, 320},   {"S5", "5.3", 4, 352}, {"S6", "6.7", 5, 352}};
  const auto& rows = scale_table();
  pass = pass && rows.size() == table.size();
  for (std::size_t i = 0; pass && i < rows.size(); ++i) {
    const auto& [name, mw, d, res] = table[i];
    pass = rows[i].name == name && rows[i].width_label() == mw && rows[i].depth == d && rows[i].resolution == res;
  }

  Rng rng(6);
  auto tape = build_backbone<float>(BackboneConfig::s0(), BackwardMode::kRecompute, rng);
  const std::vector<Shape> in{Shape{1, 3, 224, 224}};
  pass = pass && tape->block(0).output_shapes(in)[0] == Shape{1, 48, 56, 56};
  const auto out = tape->output_shapes(in);
  const std::vector<Shape> expect{{1, 48, 56, 56}, {1, 64, 28, 28}, {1, 80, 14, 14}, {1, 160, 7, 7}};
  pass = pass && out == expect;
  pass = pass && BackboneConfig::s0().scaled_channels() == std::array<int, 4>{48, 64, 80, 160};
  return {pass, "ratio " + fmt(ratio) + ", 7 scale rows, stem 3->48 at /4, S0 pyramid shapes"};
}

using Matrix = std::vector<std::vector<double>>;

double determinant(const Matrix& m) {
  const int n = static_cast<int>(m.size());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double det = 0.0;
  do {
    int inversions = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) inversions += perm[i] > perm[j];
    double term = inversions % 2 ? -1.0 : 1.0;
    for (int i = 0; i < n; ++i) term *= m[i][perm[i]];
    det += term;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return det;
}

template <typename T>
FeaturePyramid<T> random_pyramid(const std::vector<Shape>& shapes, Rng& rng) {
  std::normal_distribution<double> d;
  FeaturePyramid<T> p;
  for (const auto& s : shapes) {
    Tensor<T> t(s);
    for (T& v : t.data()) v = static_cast<T>(d(rng));
    p.levels.push_back(t);
  }
  return p;
}

// 7. Structural properties of the coupling.
Outcome structural() {
  const ForwardContext ctx{1, Phase::kForward, nullptr};
  Rng rng(7);
  bool identity = true;
  for (int n = 2; n <= 4; ++n) {
    std::vector<int> ch(static_cast<std::size_t>(n), 8);
    std::vector<Shape> shapes;
    for (int i = 0; i < n; ++i) shapes.push_back({2, 8, 16 >> i, 16 >> i});
    Silo<double> silo(SiloSpec{ch, false, {}}, rng);
    const auto x = random_pyramid<double>(shapes, rng);
    const auto y = silo.forward(x, ctx, nullptr);
    for (int i = 0; i < n; ++i) identity = identity && std::ranges::equal(y[i].data(), x[i].data());
  }

  // Scalar silo: every transform multiplies by a dyadic scalar, so all the
  // arithmetic below is exact. Columns of M (x -> y) come from unit inputs,
  // columns of L (x -> m) from the reconstructed intermediates, and U = M L^-1.
  const int n = 4;
  Silo<double>::TransformMap down, up;
  std::uniform_int_distribution<int> pick(-8, 8);
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i) {
      if (i == k) continue;
      auto& map = i < k ? down : up;
      map[{i, k}] = std::make_unique<ScaleTransform<double>>(pick(rng) / 4.0);
    }
  Silo<double> scalar(std::vector<int>(n, 1), false, std::move(down), std::move(up));
  Matrix lower(n, std::vector<double>(n)), full(n, std::vector<double>(n));
  for (int col = 0; col < n; ++col) {
    FeaturePyramid<double> e;
    for (int i = 0; i < n; ++i) e.levels.emplace_back(Shape{1, 1, 1, 1}, i == col ? 1.0 : 0.0);
    const auto y = scalar.forward(e, ctx, nullptr);
    const auto m = scalar.inverse_full(y, ctx).intermediate;
    for (int r = 0; r < n; ++r) {
      full[r][col] = y[r][0];
      lower[r][col] = m[r][0];
    }
  }
  // Solve U L = M row by row; L is unit lower triangular.
  Matrix upper(n, std::vector<double>(n));
  for (int r = 0; r < n; ++r)
    for (int c = n - 1; c >= 0; --c) {
      double v = full[r][c];
      for (int k = c + 1; k < n; ++k) v -= upper[r][k] * lower[k][c];
      upper[r][c] = v;
    }
  bool triangular = true;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      if (r == c) triangular = triangular && lower[r][c] == 1.0 && upper[r][c] == 1.0;
      if (c > r) triangular = triangular && lower[r][c] == 0.0;
      if (c < r) triangular = triangular && upper[r][c] == 0.0;
    }
  const double det = determinant(full);

  Rng rf(8);
  const std::vector<int> ch{4, 8, 8, 12};
  Silo<float> expand(SiloSpec{ch, true, {}}, rf);
  std::vector<ParamRef<float>> params;
  expand.collect(params, "e");
  jitter_parameters<float>(params, rf, 0.1);
  const auto x = random_pyramid<float>({{2, 4, 16, 16}, {2, 8, 8, 8}, {2, 8, 4, 4}}, rf);
  const auto y = expand.forward(x, ctx, nullptr);
  const auto t = expand.inverse_full(y, ctx);
  const double zero_level = max_abs(t.input[3]);
  const double round_trip = max_rel_error(expand.inverse(y, ctx, nullptr), x);

  return {identity && triangular && det == 1.0 && zero_level <= 1e-6 && round_trip <= 1e-6,
          std::string("fresh silo identity ") + (identity ? "exact" : "broken") + ", factors " +
              (triangular ? "unitriangular" : "not unitriangular") + ", det " + fmt(det) +
              ", injected level " + fmt(zero_level) + ", round trip " + fmt(round_trip)};
}

// 8. Training parity between modes and convergence.
Outcome training() {
  TrainToyOptions o;
  o.modes = {BackwardMode::kStored, BackwardMode::kRecompute};
  o.train.steps = 50;
  const auto d = run_train_toy(o, 9);
  const double parity_d = *std::max_element(d.parity.begin(), d.parity.end());
  o.precision = Precision::kSingle;
  const auto s = run_train_toy(o, 9);
  const double parity_s = *std::max_element(s.parity.begin(), s.parity.end());

  TrainToyOptions l;
  l.precision = Precision::kDouble;
  l.modes = {BackwardMode::kRecompute};
  l.train.steps = 200;
  const auto run = run_train_toy(l, 9);
  const double first = run.records[0].steps.front().loss;
  const double last = run.records[0].steps.back().loss;
  return {parity_d <= 1e-9 && parity_s <= 1e-3 && last <= 0.5 * first,
          "parity double " + fmt(parity_d) + ", single " + fmt(parity_s) + ", loss " + fmt(first) + " -> " +
              fmt(last) + " in 200 steps"};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 9. Every command produces identical bytes on a rerun.
Outcome determinism() {
  char tmpl[] = "/tmp/revbifpn_accept_XXXXXX";
  const char* dir = mkdtemp(tmpl);
  if (dir == nullptr) return {false, "cannot create a temporary directory"};
  const std::filesystem::path root(dir);
  const std::vector<std::pair<std::string, std::string>> commands{
      {"verify_inverse", "verify-inverse --trials 3 --depths 1,2"},
      {"grad_check", "grad-check"},
      {"mem_sweep", "mem-sweep --range 1..3"},
      {"train_toy", "train-toy --steps 5 --both"},
      {"cost", "cost --model toy"},
      {"cost_ratio", "cost --ratio S6 S1"},
      {"scale_table", "cost --scale-table"},
  };
  bool pass = true;
  std::string detail;
  for (const auto& [name, args] : commands) {
    std::string runs[2];
    for (int i = 0; i < 2; ++i) {
      const auto out = root / (name + std::to_string(i) + ".csv");
      const std::string cmd = std::string(REVBIFPN_CLI_PATH) + " " + args + " --seed 11 --out " + out.string();
      const int rc = std::system(cmd.c_str());
      runs[i] = slurp(out);
      if (rc != 0 || runs[i].empty()) {
        pass = false;
        detail += name + " failed to run; ";
      }
    }
    if (runs[0] != runs[1]) {
      pass = false;
      detail += name + " differs; ";
    }
  }
  std::filesystem::remove_all(root);
  return {pass, detail.empty() ? std::to_string(commands.size()) + " commands byte-identical across reruns" : detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"invertibility", invertibility},       {"gradient parity", gradient_parity},
      {"memory vs depth", memory_law},        {"memory vs resolution", resolution_law},
      {"compute accounting", compute_accounting}, {"constants", constants},
      {"structure", structural},              {"training parity", training},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failed += !r.pass;
    std::printf("%s criterion %zu: %s (%s)\n", r.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                r.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}

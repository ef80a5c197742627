#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "revbifpn/harness.hpp"

using namespace revbifpn;

namespace {

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

int line_count(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("ini parsing and typed lookups") {
  const auto c = IniConfig::parse(
      "; comment\n"
      "[train-toy]\n"
      "steps = 12\n"
      "learning_rate = 0.025\n"
      "both = true\n"
      "modes = stored, recompute\n"
      "depths = 1..3\n"
      "[cost]\n"
      "model = S2\n");
  CHECK(c.has("train-toy.steps"));
  CHECK_FALSE(c.has("steps"));
  CHECK(c.get_int("train-toy.steps", 0) == 12);
  CHECK(c.get_int("train-toy.batch", 7) == 7);
  CHECK(c.get_double("train-toy.learning_rate", 0.0) == 0.025);
  CHECK(c.get_bool("train-toy.both", false));
  CHECK(c.get_list("train-toy.modes", {}) == std::vector<std::string>{"stored", "recompute"});
  CHECK(c.get_int_list("train-toy.depths", {}) == std::vector<int>{1, 2, 3});
  CHECK(c.get("cost.model", "toy") == "S2");
  CHECK_THROWS_AS((void)c.get_int("train-toy.learning_rate", 0), ConfigError);
  CHECK_THROWS_AS((void)c.get_bool("cost.model", false), ConfigError);
  CHECK_THROWS_AS((void)IniConfig::parse("[a]\nbroken line\n"), ConfigError);
  CHECK_THROWS_AS((void)IniConfig::load("/nonexistent/config.ini"), ConfigError);
}

TEST_CASE("integer ranges and lists") {
  CHECK(parse_int_range("1..4") == std::vector<int>{1, 2, 3, 4});
  CHECK(parse_int_range("1,2,4,8") == std::vector<int>{1, 2, 4, 8});
  CHECK(parse_int_range("2, 5..6") == std::vector<int>{2, 5, 6});
  CHECK_THROWS_AS((void)parse_int_range("4..1"), ConfigError);
  CHECK_THROWS_AS((void)parse_int_range("x"), ConfigError);
  CHECK_THROWS_AS((void)parse_int_range(""), ConfigError);
  CHECK(split_list(" a, ,b ") == std::vector<std::string>{"a", "b"});
}

TEST_CASE("number formatting round trips") {
  CHECK(format_number(0.5) == "0.5");
  CHECK(format_number(1e-12) == "1e-12");
  CHECK(format_number(3.0) == "3");
  for (double v : {0.1, 1.0 / 3.0, 2.2250738585072014e-308, 123456.789}) {
    CHECK(std::stod(format_number(v)) == v);
  }
}

TEST_CASE("least-squares line") {
  const auto exact = fit_line({1, 2, 3, 4}, {3, 5, 7, 9});
  CHECK(exact.slope == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(exact.intercept == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(exact.r_squared == doctest::Approx(1.0).epsilon(1e-14));
  // Hand-computed: slope 0.65, intercept 0.15, SS_res 0.075, SS_tot 2.1875.
  const auto noisy = fit_line({0, 1, 2, 3}, {0, 1, 1.5, 2});
  CHECK(noisy.slope == doctest::Approx(0.65));
  CHECK(noisy.intercept == doctest::Approx(0.15));
  CHECK(noisy.r_squared == doctest::Approx(1.0 - 0.075 / 2.1875));
  CHECK_THROWS_AS((void)fit_line({1}, {1}), ConfigError);
  CHECK_THROWS_AS((void)fit_line({2, 2}, {1, 3}), ConfigError);
}

TEST_CASE("relative error with a floor") {
  const std::vector<double> a{1.0, 2.0, 3.0}, b{1.0, 2.5, 3.0};
  CHECK(rel_error(a, b) == doctest::Approx(0.5 / 3.0));
  const std::vector<double> z{0.0, 0.0}, tiny{1e-20, 0.0};
  CHECK(rel_error(tiny, z, 1.0) == 1e-20);
}

TEST_CASE("verify-inverse writer and exit code") {
  VerifyInverseOptions o;
  o.components = {"revblock", "silo2"};
  o.depths = {1, 2};
  o.trials = 2;
  const auto rows = run_verify_inverse(o, 3);
  CHECK(rows.size() == 8);
  std::ostringstream out, err;
  CHECK(write_verify_inverse(out, err, rows) == kExitOk);
  CHECK(first_line(out.str()) == "component,precision,depth,max_rel_reconstruction_err");
  CHECK(line_count(out.str()) == 9);
  CHECK(err.str().empty());

  auto bad = rows;
  bad[0].pass = false;
  std::ostringstream out2, err2;
  CHECK(write_verify_inverse(out2, err2, bad) == kExitToleranceBreach);
  CHECK(err2.str().find("tolerance breach") != std::string::npos);

  o.components = {"nope"};
  CHECK_THROWS_AS((void)run_verify_inverse(o, 3), ConfigError);
}

TEST_CASE("grad-check on a small stack") {
  GradCheckOptions o;
  o.silos = 2;
  o.samples_per_param = 2;
  const auto r = run_grad_check(o, 4);
  CHECK(r.pass);
  CHECK(r.global_rel_err_modes <= 1e-10);
  CHECK(r.max_rel_err_fd <= 1e-4);
  REQUIRE_FALSE(r.rows.empty());
  CHECK(r.rows.back().param == "input");
  std::ostringstream out, err;
  CHECK(write_grad_check(out, err, r) == kExitOk);
  CHECK(first_line(out.str()) == "param,rel_err_fd,rel_err_modes");
}

TEST_CASE("mem-sweep writer marks failed points") {
  std::vector<SweepRow> rows{{1, BackwardMode::kStored, 100}, {2, BackwardMode::kRecompute, std::nullopt}};
  std::ostringstream out;
  CHECK(write_mem_sweep(out, rows) == kExitOk);
  CHECK(out.str() == "axis_value,mode,peak_activation_bytes\n1,stored,100\n2,recompute,OOM\n");
}

TEST_CASE("mem-sweep is deterministic") {
  MemSweepOptions o;
  o.values = {1, 2};
  o.resolution = 32;
  const auto a = run_mem_sweep(o, 5);
  const auto b = run_mem_sweep(o, 5);
  REQUIRE(a.size() == 4);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].peak_bytes == b[i].peak_bytes);
}

TEST_CASE("train-toy with both modes reports parity") {
  TrainToyOptions o;
  o.modes = {BackwardMode::kStored, BackwardMode::kRecompute};
  o.train.steps = 3;
  o.data.height = o.data.width = 32;
  const auto r = run_train_toy(o, 6);
  REQUIRE(r.records.size() == 2);
  REQUIRE(r.parity.size() == 3);
  CHECK(r.parity_pass);
  std::ostringstream out, err;
  CHECK(write_train_toy(out, err, r) == kExitOk);
  CHECK(first_line(out.str()) == "step,mode,loss,peak_bytes,fwd_evals,parity");
  CHECK(line_count(out.str()) == 7);
}

TEST_CASE("cost writers") {
  std::ostringstream ratio;
  write_ratio(ratio, "S6", "S1");
  CHECK(ratio.str() == "a,b,activation_ratio\nS6,S1,23.7\n");
  std::ostringstream table;
  write_scale_table(table);
  CHECK(table.str() ==
        "name,m_w,d,resolution\nS0,1,2,224\nS1,1.3,2,256\nS2,2,2,256\nS3,2.7,3,288\n"
        "S4,4,4,320\nS5,5.3,4,352\nS6,6.7,5,352\n");
  CostOptions o;
  const auto items = run_cost(o, 7);
  std::ostringstream cost;
  write_cost(cost, items);
  CHECK(first_line(cost.str()) == "component,macs,params");
  CHECK(items.back().component == "total");
  CHECK_THROWS_AS((void)model_config("S7"), ConfigError);
  CHECK(model_config("S2").scaled_channels() == std::array<int, 4>{96, 128, 160, 320});
}

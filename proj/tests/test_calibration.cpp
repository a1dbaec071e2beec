#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "las/calibration.hpp"
#include "las/errors.hpp"
#include "las/random.hpp"

using namespace las;

namespace {

// Sorted-order linear interpolation, written independently of tensors.cpp.
double oracle_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

double exp_fn(double x) { return std::exp(x); }

}  // namespace

TEST_CASE("target registry") {
  for (const auto& name : known_targets()) CHECK(target_by_name(name).name == name);
  CHECK(target_by_name("gelu")(0.0) == 0.0);
  CHECK(target_by_name("invsqrt")(1.0 - kInvSqrtEpsilon) == doctest::Approx(1.0));
  try {
    target_by_name("tanhh");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("gelu") != std::string::npos);
  }
}

TEST_CASE("oat thresholds from uniform activations") {
  Rng rng(31);
  const Matrix x = random_uniform(1, 20000, -1.0, 1.0, rng);
  std::vector<double> mags;
  for (double v : x.data()) mags.push_back(std::abs(v));
  const auto th = select_oat_thresholds(x, 0.99);
  CHECK(th.theta_nor == oracle_quantile(mags, 0.99));
  CHECK(th.theta_out == *std::max_element(mags.begin(), mags.end()));
  CHECK(th.theta_nor == doctest::Approx(0.99).epsilon(0.01));
  CHECK(th.theta_out == doctest::Approx(1.0).epsilon(0.001));
  CHECK_FALSE(th.degenerate);
}

TEST_CASE("oat thresholds with injected outliers") {
  Rng rng(32);
  std::vector<double> v;
  for (int i = 0; i < 10000; ++i)
    v.push_back(i % 100 == 0 ? (i % 200 == 0 ? 20.0 : -20.0) : rng.uniform(-1.0, 1.0));
  const auto th = select_oat_thresholds(Matrix(1, v.size(), v), 0.99);
  std::vector<double> mags;
  for (double x : v) mags.push_back(std::abs(x));
  CHECK(th.theta_out == 20.0);
  CHECK(th.theta_nor == oracle_quantile(mags, 0.99));
  // The 0.99 quantile sits where the outliers begin, so it interpolates just above 1.
  CHECK(th.theta_nor == doctest::Approx(1.0).epsilon(0.25));
}

TEST_CASE("oat thresholds on degenerate activations") {
  const auto constant = select_oat_thresholds(Matrix(4, 4, 2.5), 0.99);
  CHECK(constant.degenerate);
  CHECK(constant.theta_out > constant.theta_nor);
  CHECK_FALSE(constant.warnings.empty());
  constant.config(5, 16).validate();

  const auto zero = select_oat_thresholds(Matrix(4, 4, 0.0), 0.99);
  CHECK(zero.theta_nor > 0.0);
  CHECK(zero.theta_out > zero.theta_nor);
  CHECK_THROWS_AS(select_oat_thresholds(Matrix(1, 1, 1.0), 1.0), ConfigError);
}

TEST_CASE("hierarchy of a single range spans the sample") {
  const std::vector<double> v{0.2, 0.9, 0.4};
  const auto h = select_hierarchy(v, 1);
  REQUIRE(h.boundaries.size() == 2);
  CHECK(h.boundaries[0] < 0.2);
  CHECK(h.boundaries[0] > 0.2 - 1e-6);
  CHECK(h.boundaries[1] > 0.9);
  CHECK(h.boundaries[1] < 0.9 + 1e-6);
}

TEST_CASE("hierarchy of a uniform sample has equal quarters") {
  Rng rng(33);
  std::vector<double> v;
  for (int i = 0; i < 20000; ++i) v.push_back(rng.uniform());
  const auto h = select_hierarchy(v, 4);
  REQUIRE(h.boundaries.size() == 5);
  for (int i = 1; i < 4; ++i) CHECK(h.boundaries[i] == doctest::Approx(oracle_quantile(v, i / 4.0)));
  const std::array<double, 5> ideal{0.0, 0.25, 0.5, 0.75, 1.0};
  for (int i = 0; i < 5; ++i) CHECK(std::abs(h.boundaries[i] - ideal[i]) < 0.02);
}

TEST_CASE("hierarchy widens its tail ranges on heavy-tailed data") {
  Rng rng(34);
  std::vector<double> v;
  for (int i = 0; i < 20000; ++i) v.push_back(std::exp(3.0 * rng.uniform()) - 1.0);
  const auto h = select_hierarchy(v, 8);
  REQUIRE(h.boundaries.size() == 9);
  const double first = h.boundaries[1] - h.boundaries[0];
  const double last = h.boundaries[8] - h.boundaries[7];
  CHECK(last > 5.0 * first);
}

TEST_CASE("hierarchy uniform mix caps tail width") {
  Rng rng(35);
  std::vector<double> v;
  for (int i = 0; i < 20000; ++i) v.push_back(std::exp(3.0 * rng.uniform()) - 1.0);
  const auto pure = select_hierarchy(v, 8);
  const auto mixed = select_hierarchy(v, 8, {0.0, 0.0, 0.5});
  const auto width = [](const Hierarchy& h, std::size_t i) { return h.boundaries[i + 1] - h.boundaries[i]; };
  CHECK(width(mixed, 7) < width(pure, 7));
  CHECK(mixed.boundaries.front() == pure.boundaries.front());
  CHECK(mixed.boundaries.back() == pure.boundaries.back());
}

TEST_CASE("hierarchy collapses duplicate quantiles with a warning") {
  std::vector<double> v(100, 1.0);
  v.push_back(2.0);
  const auto h = select_hierarchy(v, 4);
  CHECK(h.boundaries.size() < 5);
  for (std::size_t i = 1; i < h.boundaries.size(); ++i) CHECK(h.boundaries[i] > h.boundaries[i - 1]);
  REQUIRE_FALSE(h.warnings.empty());
  CHECK(h.warnings.front().find("collapsed") != std::string::npos);
}

TEST_CASE("hierarchy moves into the target domain") {
  Hierarchy h{{-0.5, 0.5, 2.0}, {}};
  fit_to_domain(h, target_by_name("reciprocal"), 0.1);
  CHECK(h.boundaries.front() == doctest::Approx(0.05));
  Hierarchy gone{{-0.5, 0.5}, {}};
  CHECK_THROWS_AS(fit_to_domain(gone, target_by_name("invsqrt"), -0.1), FitError);
}

TEST_CASE("fit_fs of the zero function") {
  const auto f = fit_fs([](double) { return 0.0; }, -1.0, 1.0, 8, 256, 1);
  for (double d : f.params.d) CHECK(d == 0.0);
  CHECK(f.max_abs_err == 0.0);
}

TEST_CASE("fit_fs of the identity on the unit interval") {
  // Pinned from validation-grid sweeps over these seeds: worst case 1.84 * 2^-8.
  constexpr double kRangeConstant = 2.0;
  for (std::uint64_t seed : {1, 2, 3, 7, 42, 99}) {
    const auto f = fit_fs([](double x) { return x; }, 0.0, 1.0, 8, 4096, seed);
    CHECK(f.max_abs_err <= kRangeConstant * std::ldexp(1.0, -8));
  }
}

TEST_CASE("fit_fs error is measured on the validation grid") {
  const auto f = fit_fs(gelu, -2.0, 2.0, 12, 128, 5);
  double worst = 0.0;
  for (int g = 0; g < 1280; ++g) {
    const double x = -2.0 + 4.0 * g / 1279.0;
    worst = std::max(worst, std::abs(f.eval(x) - gelu(x)));
  }
  CHECK(f.max_abs_err == worst);
}

TEST_CASE("fit_fs is reproducible") {
  const auto a = fit_fs(gelu, -5.0, 5.0, 16, 256, 77);
  const auto b = fit_fs(gelu, -5.0, 5.0, 16, 256, 77);
  CHECK(a.params == b.params);
  CHECK(a.max_abs_err == b.max_abs_err);
}

TEST_CASE("fit_fs preconditions and target failures") {
  CHECK_THROWS_AS(fit_fs(gelu, 0.0, 1.0, 8, 1, 1), ConfigError);
  CHECK_THROWS_AS(fit_fs(gelu, 1.0, 0.0, 8, 256, 1), ConfigError);
  CHECK_THROWS_AS(fit_fs(gelu, 0.0, 1.0, 0, 256, 1), ConfigError);
  try {
    fit_fs([](double x) { return std::log(x); }, -1.0, 1.0, 8, 256, 1);
    FAIL("expected FitError");
  } catch (const FitError& e) {
    CHECK(std::string(e.what()).find("x = ") != std::string::npos);
  }
}

TEST_CASE("fit_hg with one range equals fit_fs") {
  const auto hg = fit_hg_range(target_by_name("gelu"), -3.0, 3.0, 1, 16, 256, 9);
  const auto fs = fit_fs(gelu, -3.0, 3.0, 16, 256, 9);
  REQUIRE(hg.config.ranges() == 1);
  CHECK(hg.config.subneurons[0] == fs.params);
  CHECK(hg.report.per_subrange_max_abs_err[0] == fs.max_abs_err);
}

TEST_CASE("fit_hg exp ranges beat a single range") {
  const auto one = fit_hg_range(target_by_name("exp"), -4.0, 2.0, 1, 16, 256, 10);
  const auto four = fit_hg_range(target_by_name("exp"), -4.0, 2.0, 4, 16, 256, 10);
  for (double e : four.report.per_subrange_max_abs_err) CHECK(e < one.report.max_abs_err());
}

TEST_CASE("fit_hg invsqrt stays finite") {
  Rng rng(36);
  std::vector<double> v;
  for (int i = 0; i < 2000; ++i) v.push_back(rng.uniform(0.05, 4.0));
  const auto fit = fit_hg(target_by_name("invsqrt"), select_hierarchy(v, 4), 16, 256, 11);
  for (double e : fit.report.per_subrange_max_abs_err) {
    CHECK(std::isfinite(e));
    CHECK(e >= 0.0);
  }
  CHECK(std::isfinite(hg_eval(0.05, fit.config)));
}

TEST_CASE("fit_hg error is non-increasing in the range count") {
  for (const char* name : {"gelu", "exp"}) {
    const auto target = target_by_name(name);
    const double lo = std::string(name) == "gelu" ? -5.0 : -4.0;
    const double hi = std::string(name) == "gelu" ? 5.0 : 2.0;
    double prev = INFINITY;
    for (std::size_t n : {1, 2, 4, 8}) {
      const auto fit = fit_hg_range(target, lo, hi, n, 16, 256, 12);
      const double err = hg_max_abs_error(fit.config, target.fn, lo, hi, 20001);
      CHECK_MESSAGE(err <= prev, name << " N=" << n);
      prev = err;
    }
  }
}

TEST_CASE("every validation point lands in exactly one range") {
  const auto fit = fit_hg_range(target_by_name("exp"), -4.0, 2.0, 4, 8, 64, 13);
  for (int g = 0; g <= 1000; ++g) {
    const double x = -5.0 + 8.0 * g / 1000.0;
    const auto mask = fit.config.gate(x);
    CHECK(std::count(mask.begin(), mask.end(), 1) == 1);
  }
}

TEST_CASE("sup bound covers a dense sweep") {
  const auto fit = fit_hg_range(target_by_name("exp"), -4.0, 0.0, 4, 16, 256, 14);
  const double bound = fit.report.sup_bound(1.0);
  CHECK(bound >= fit.report.max_abs_err());
  CHECK(hg_max_abs_error(fit.config, exp_fn, -4.0, 0.0, 200003) <= bound);
}

TEST_CASE("calibration report json round trip") {
  const auto fit = fit_hg_range(target_by_name("silu"), -4.0, 4.0, 2, 8, 64, 15);
  const nlohmann::json j = fit.report;
  for (const char* key : {"target", "boundaries", "per_subrange_max_abs_err", "samples_per_range",
                          "seed", "fitted"})
    CHECK(j.contains(key));
  const auto back = j.get<CalibrationReport>();
  CHECK(back.fitted == fit.report.fitted);
  CHECK(back.per_subrange_max_abs_err == fit.report.per_subrange_max_abs_err);
  CHECK(nlohmann::json(back).dump() == j.dump());
}

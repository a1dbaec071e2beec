#include "las/calibration.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include <Eigen/Dense>

#include "las/errors.hpp"
#include "las/random.hpp"

namespace las {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double silu(double x) { return x / (1.0 + std::exp(-x)); }

const std::vector<std::string>& known_targets() {
  static const std::vector<std::string> names{"gelu",       "silu",   "exp",
                                              "reciprocal", "square", "invsqrt"};
  return names;
}

TargetFunction target_by_name(const std::string& name) {
  if (name == "gelu") return {name, gelu};
  if (name == "silu") return {name, silu};
  if (name == "exp") return {name, [](double x) { return std::exp(x); }};
  if (name == "reciprocal") return {name, [](double x) { return 1.0 / x; }, 0.0, true};
  if (name == "square") return {name, [](double x) { return x * x; }};
  if (name == "invsqrt") {
    return {name, [](double x) { return 1.0 / std::sqrt(x + kInvSqrtEpsilon); }, 0.0, false};
  }
  std::string list;
  for (const auto& n : known_targets()) list += (list.empty() ? "" : ", ") + n;
  throw ConfigError("unknown target '" + name + "' (known: " + list + ")");
}

// ---------------------------------------------------------------------------
// Threshold and hierarchy selection

OATThresholds select_oat_thresholds(const ActivationStats& magnitude_stats,
                                    double normal_quantile) {
  if (!(normal_quantile > 0.0 && normal_quantile < 1.0)) {
    throw ConfigError("normal_quantile must lie in (0, 1)");
  }
  OATThresholds out;
  out.theta_nor = magnitude_stats.percentile(normal_quantile);
  out.theta_out = magnitude_stats.max;
  if (!(out.theta_nor > 0.0)) {
    out.theta_nor = std::max(magnitude_stats.max, 1.0) * 1e-6;
    out.degenerate = true;
    out.warnings.push_back("all-zero activations; theta_nor floored");
  }
  if (!(out.theta_out > out.theta_nor)) {
    out.theta_out = out.theta_nor * (1.0 + 1e-6);
    out.degenerate = true;
    out.warnings.push_back("degenerate activations; theta_out set just above theta_nor");
  }
  return out;
}

OATThresholds select_oat_thresholds(const Matrix& activations, double normal_quantile) {
  const Matrix magnitudes = elementwise(activations, [](double v) { return std::abs(v); });
  const std::array<double, 1> q{normal_quantile};
  return select_oat_thresholds(stats(magnitudes, q), normal_quantile);
}

std::vector<double> hierarchy_quantiles(std::size_t ranges) {
  std::vector<double> q;
  for (std::size_t i = 1; i < ranges; ++i) q.push_back(static_cast<double>(i) / ranges);
  return q;
}

namespace {

// Boundaries from a monotone quantile function, collapsing near-duplicates.
Hierarchy boundaries_from(double lo, double hi, std::size_t ranges,
                          const std::function<double(double)>& quantile) {
  const double scale = std::max({std::abs(lo), std::abs(hi), 1.0});
  const double min_gap = std::max((hi - lo) * 1e-9, scale * 1e-12);
  Hierarchy h;
  h.boundaries.push_back(lo);
  for (double q : hierarchy_quantiles(ranges)) {
    const double b = quantile(q);
    if (b - h.boundaries.back() > min_gap && hi - b > min_gap) h.boundaries.push_back(b);
  }
  h.boundaries.push_back(hi);
  const std::size_t got = h.boundaries.size() - 1;
  if (got < ranges) {
    h.warnings.push_back("collapsed duplicate quantiles: N reduced from " + std::to_string(ranges) +
                         " to " + std::to_string(got));
  }
  return h;
}

std::pair<double, double> padded_span(double min, double max, const HierarchyOptions& o) {
  const double span = max - min;
  const double scale = std::max({std::abs(min), std::abs(max), 1.0});
  const double eps = std::max(span * 1e-9, scale * 1e-12);
  return {min - eps - o.margin_lo * span, max + eps + o.margin_hi * span};
}

void check_options(std::size_t ranges, const HierarchyOptions& o) {
  if (ranges < 1) throw ConfigError("select_hierarchy: need N >= 1");
  if (!(o.margin_lo >= 0.0 && o.margin_hi >= 0.0)) {
    throw ConfigError("select_hierarchy: margins must be >= 0");
  }
  if (!(o.uniform_mix >= 0.0 && o.uniform_mix <= 1.0)) {
    throw ConfigError("select_hierarchy: uniform_mix must lie in [0, 1]");
  }
}

}  // namespace

Hierarchy select_hierarchy(const ActivationStats& s, std::size_t ranges,
                           const HierarchyOptions& options) {
  check_options(ranges, options);
  const auto [lo, hi] = padded_span(s.min, s.max, options);
  return boundaries_from(lo, hi, ranges, [&](double q) { return s.percentile(q); });
}

Hierarchy select_hierarchy(std::span<const double> sample, std::size_t ranges,
                           const HierarchyOptions& options) {
  check_options(ranges, options);
  if (sample.empty()) throw EmptyInputError("select_hierarchy: empty sample");
  std::vector<double> sorted(sample.begin(), sample.end());
  for (double v : sorted) {
    if (!std::isfinite(v)) throw InputError("select_hierarchy: non-finite sample value");
  }
  std::sort(sorted.begin(), sorted.end());
  if (options.uniform_mix == 0.0) {
    const auto q = hierarchy_quantiles(ranges);
    return select_hierarchy(stats(sorted, q), ranges, options);
  }
  const auto [lo, hi] = padded_span(sorted.front(), sorted.back(), options);
  const double n = static_cast<double>(sorted.size());
  // Empirical CDF, linear between order statistics.
  auto cdf = [&](double x) {
    if (x <= sorted.front()) return 0.0;
    if (x >= sorted.back() || n < 2.0) return 1.0;
    const auto it = std::upper_bound(sorted.begin(), sorted.end(), x);
    const auto i = static_cast<std::size_t>(it - sorted.begin());
    const double a = sorted[i - 1];
    const double b = sorted[i];
    const double frac = b > a ? (x - a) / (b - a) : 1.0;
    return (static_cast<double>(i - 1) + frac) / (n - 1.0);
  };
  const double u = options.uniform_mix;
  auto mixed = [&](double x) { return (1.0 - u) * cdf(x) + u * (x - lo) / (hi - lo); };
  return boundaries_from(lo, hi, ranges, [&](double q) {
    double a = lo;
    double b = hi;
    for (int it = 0; it < 200; ++it) {
      const double m = 0.5 * (a + b);
      if (m <= a || m >= b) break;
      (mixed(m) < q ? a : b) = m;
    }
    return 0.5 * (a + b);
  });
}

void fit_to_domain(Hierarchy& h, const TargetFunction& target, double sample_min) {
  auto& b = h.boundaries;
  const bool inside =
      target.domain_open ? b.front() > target.domain_lo : b.front() >= target.domain_lo;
  if (inside) return;
  if (sample_min < target.domain_lo || (target.domain_open && sample_min <= target.domain_lo)) {
    throw FitError(target.name + ": calibration sample leaves the target's domain");
  }
  b.front() = target.domain_lo + 0.5 * (sample_min - target.domain_lo);
  while (b.size() > 2 && !(b[0] < b[1])) b.erase(b.begin() + 1);
}

// ---------------------------------------------------------------------------
// FS fitting
//
// Schedules are built in range-relative units: the membrane starts in
// [w, 2w]. Step 0 always fires (theta = h = w) and carries the constant term.
// The remaining steps form K binary "ladders", one per piece of the range,
// processed from the top piece down. Inputs in a higher piece fire every step
// of the lower ladders (a constant), so each piece gets its own slope and the
// pieces join continuously. An optional carry step per ladder returns higher
// pieces to their fractional remainder so a shared fine ladder can follow.
// d is solved by least squares for each candidate schedule; theta/h are then
// polished by coordinate descent on the training MSE.

namespace {

constexpr int kMaxFitSteps = 64;
constexpr std::size_t kMaxPieces = 7;

struct Schedule {
  std::vector<double> theta;
  std::vector<double> h;
};

struct Sample {
  double membrane;
  double target;
};

struct Evaluation {
  std::vector<double> d;
  double mse = std::numeric_limits<double>::infinity();
};

std::vector<double> piece_knots(const std::function<double(double)>& f, double lo, double hi,
                                std::size_t pieces, bool curvature) {
  const double w = hi - lo;
  std::vector<double> knots(pieces + 1);
  for (std::size_t k = 0; k <= pieces; ++k) knots[k] = w * static_cast<double>(k) / pieces;
  if (!curvature || pieces == 1) return knots;

  // Equidistribute sqrt|f''| (the classic optimal knot density for
  // piecewise-linear approximation).
  constexpr std::size_t n = 257;
  std::vector<double> y(n);
  const double dx = w / (n - 1);
  for (std::size_t i = 0; i < n; ++i) y[i] = f(lo + dx * i);
  std::vector<double> dens(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = i == 0 ? 0 : (i == n - 1 ? n - 3 : i - 1);
    const double f2 = (y[a] - 2.0 * y[a + 1] + y[a + 2]) / (dx * dx);
    dens[i] = std::abs(f2);
    peak = std::max(peak, dens[i]);
  }
  if (!(peak > 0.0) || !std::isfinite(peak)) return knots;
  std::vector<double> cum(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) dens[i] = std::sqrt(dens[i] + 1e-3 * peak);
  for (std::size_t i = 1; i < n; ++i) cum[i] = cum[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * dx;
  for (std::size_t k = 1; k < pieces; ++k) {
    const double target = cum.back() * static_cast<double>(k) / pieces;
    const auto it = std::lower_bound(cum.begin(), cum.end(), target);
    const auto i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - cum.begin(), 1));
    const double frac = (target - cum[i - 1]) / std::max(cum[i] - cum[i - 1], 1e-300);
    knots[k] = dx * (static_cast<double>(i - 1) + frac);
  }
  for (std::size_t k = 1; k <= pieces; ++k) {
    if (!(knots[k] > knots[k - 1])) return piece_knots(f, lo, hi, pieces, false);
  }
  return knots;
}

Schedule ladder_schedule(const std::vector<double>& knots, int bits, int fine_bits) {
  const std::size_t pieces = knots.size() - 1;
  const double w = knots.back();
  Schedule s;
  s.theta.push_back(w);
  s.h.push_back(w);
  double fine_span = 0.0;
  for (std::size_t kk = pieces; kk-- > 0;) {
    const double a = knots[kk];
    const double len = knots[kk + 1] - knots[kk];
    for (int i = 1; i <= bits; ++i) {
      s.theta.push_back(a + std::ldexp(len, -i));
      s.h.push_back(std::ldexp(len, -i));
    }
    if (kk + 1 < pieces && fine_bits > 0) {
      s.theta.push_back(a + std::ldexp(len, -bits));
      s.h.push_back(std::ldexp(len, -bits));
    }
    fine_span = std::max(fine_span, std::ldexp(len, -bits));
  }
  for (int i = 1; i <= fine_bits; ++i) {
    s.theta.push_back(std::ldexp(fine_span, -i));
    s.h.push_back(std::ldexp(fine_span, -i));
  }
  return s;
}

std::uint64_t spike_mask(double v, const Schedule& s) {
  std::uint64_t mask = 0;
  for (std::size_t t = 0; t < s.theta.size(); ++t) {
    if (v >= s.theta[t]) {
      mask |= std::uint64_t{1} << t;
      v -= s.h[t];
    }
  }
  return mask;
}

Evaluation evaluate(const Schedule& s, std::span<const Sample> samples) {
  const auto steps = static_cast<int>(s.theta.size());
  struct Group {
    std::size_t count = 0;
    double sum = 0.0;
  };
  std::unordered_map<std::uint64_t, Group> groups;
  groups.reserve(samples.size());
  std::vector<std::uint64_t> masks(samples.size());
  for (std::size_t m = 0; m < samples.size(); ++m) {
    masks[m] = spike_mask(samples[m].membrane, s);
    auto& g = groups[masks[m]];
    ++g.count;
    g.sum += samples[m].target;
  }

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(steps, steps);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(steps);
  std::array<int, kMaxFitSteps> on{};
  for (const auto& [mask, g] : groups) {
    int n = 0;
    for (std::uint64_t bits = mask; bits != 0; bits &= bits - 1) on[n++] = std::countr_zero(bits);
    for (int a = 0; a < n; ++a) {
      rhs(on[a]) += g.sum;
      for (int b = 0; b < n; ++b) gram(on[a], on[b]) += static_cast<double>(g.count);
    }
  }
  const double ridge = 1e-12 * std::max(gram.trace(), 1.0) / steps;
  gram.diagonal().array() += ridge;
  const Eigen::VectorXd sol = gram.ldlt().solve(rhs);

  Evaluation e;
  e.d.assign(sol.data(), sol.data() + steps);
  double sse = 0.0;
  for (std::size_t m = 0; m < samples.size(); ++m) {
    double pred = 0.0;
    for (std::uint64_t bits = masks[m]; bits != 0; bits &= bits - 1) pred += e.d[std::countr_zero(bits)];
    const double r = pred - samples[m].target;
    sse += r * r;
  }
  e.mse = sse / static_cast<double>(samples.size());
  if (!std::isfinite(e.mse)) e.mse = std::numeric_limits<double>::infinity();
  return e;
}

std::vector<Schedule> candidate_schedules(const std::function<double(double)>& f, double lo,
                                          double hi, int steps) {
  std::vector<Schedule> out;
  if (steps == 1) {
    out.push_back(ladder_schedule({0.0, hi - lo}, 0, 0));
    return out;
  }
  for (std::size_t pieces = 1; pieces <= kMaxPieces; ++pieces) {
    for (bool curvature : {false, true}) {
      if (pieces == 1 && curvature) continue;
      const auto knots = piece_knots(f, lo, hi, pieces, curvature);
      const int k = static_cast<int>(pieces);
      for (int bits = 1; bits < steps; ++bits) {
        int fine = steps - 1 - k * bits;
        if (fine > 0) fine -= k - 1;
        if (pieces == 1 && fine != 0) continue;
        if (fine < 0) continue;
        if (1 + k * bits + (fine > 0 ? k - 1 : 0) + fine != steps) continue;
        out.push_back(ladder_schedule(knots, bits, fine));
      }
    }
  }
  return out;
}

double checked_target(const std::function<double(double)>& f, double x, const char* where,
                      std::size_t index) {
  const double y = f(x);
  if (!std::isfinite(y)) {
    std::ostringstream os;
    os.precision(17);
    os << "fit_fs: target is non-finite at " << where << " " << index << " (x = " << x << ")";
    throw FitError(os.str());
  }
  return y;
}

}  // namespace

FsFit fit_fs(const std::function<double(double)>& target, double lo, double hi, int steps,
             std::size_t samples, std::uint64_t seed, const FitOptions& options) {
  if (!(std::isfinite(lo) && std::isfinite(hi) && lo < hi)) {
    throw ConfigError("fit_fs: need finite lo < hi");
  }
  if (steps < 1 || steps > kMaxFitSteps) throw ConfigError("fit_fs: T must be in [1, 64]");
  if (samples < 64) throw ConfigError("fit_fs: need at least 64 samples (M >= 64)");

  Rng rng(seed);
  std::vector<Sample> data(samples);
  for (std::size_t m = 0; m < samples; ++m) {
    const double x = rng.uniform(lo, hi);
    data[m] = {range_membrane(x, lo, hi), checked_target(target, x, "sample", m)};
  }
  // Curvature probing touches the closed range; surface bad endpoints early.
  checked_target(target, lo, "range endpoint", 0);
  checked_target(target, hi, "range endpoint", 1);

  Schedule best;
  Evaluation best_eval;
  for (auto& cand : candidate_schedules(target, lo, hi, steps)) {
    auto e = evaluate(cand, data);
    if (e.mse < best_eval.mse) {
      best_eval = std::move(e);
      best = std::move(cand);
    }
  }

  static constexpr std::array<double, 4> factors{0.98, 1.02, 0.995, 1.005};
  for (int sweep = 0; sweep < options.polish_sweeps; ++sweep) {
    for (std::size_t t = 1; t < best.theta.size(); ++t) {
      for (auto* param : {&best.theta, &best.h}) {
        for (double factor : factors) {
          const double old = (*param)[t];
          (*param)[t] = old * factor;
          auto e = evaluate(best, data);
          if (e.mse < best_eval.mse) {
            best_eval = std::move(e);
          } else {
            (*param)[t] = old;
          }
        }
      }
    }
  }

  FsFit fit;
  const double w = hi - lo;
  // Schedules live in units of the range width offset; the FS neuron sees the
  // range-relative membrane directly, so no rescaling is needed.
  (void)w;
  fit.params = FSParams{best.theta, best.h, best_eval.d};
  fit.params.validate();
  fit.lo = lo;
  fit.hi = hi;
  fit.train_mse = best_eval.mse;

  const std::size_t grid = std::max<std::size_t>(2, options.validation_factor * samples);
  double worst = 0.0;
  for (std::size_t g = 0; g < grid; ++g) {
    const double x = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid - 1);
    const double y = checked_target(target, x, "validation point", g);
    worst = std::max(worst, std::abs(fit.eval(x) - y));
  }
  fit.max_abs_err = worst;
  return fit;
}

double CalibrationReport::max_abs_err() const {
  double m = 0.0;
  for (double e : per_subrange_max_abs_err) m = std::max(m, e);
  return m;
}

double CalibrationReport::sup_bound(double lipschitz) const {
  const std::size_t grid = std::max<std::size_t>(2, validation_factor * samples_per_range);
  double m = 0.0;
  for (std::size_t i = 0; i < per_subrange_max_abs_err.size(); ++i) {
    const double spacing = (boundaries[i + 1] - boundaries[i]) / static_cast<double>(grid - 1);
    m = std::max(m, per_subrange_max_abs_err[i] + lipschitz * spacing);
  }
  return m;
}

HgFit fit_hg(const TargetFunction& target, const Hierarchy& hierarchy, int steps,
             std::size_t samples, std::uint64_t seed, const FitOptions& options) {
  const auto& b = hierarchy.boundaries;
  if (b.size() < 2) throw ConfigError("fit_hg: hierarchy needs at least one range");
  HgFit out;
  out.config.boundaries = b;
  out.report.target = target.name;
  out.report.boundaries = b;
  out.report.samples_per_range = samples;
  out.report.seed = seed;
  out.report.steps = steps;
  out.report.validation_factor = options.validation_factor;
  out.report.warnings = hierarchy.warnings;
  for (std::size_t i = 0; i + 1 < b.size(); ++i) {
    const std::uint64_t sub_seed = i == 0 ? seed : mix_seed(seed, i);
    FsFit fit;
    try {
      fit = fit_fs(target.fn, b[i], b[i + 1], steps, samples, sub_seed, options);
    } catch (const FitError& e) {
      throw FitError(target.name + " sub-range " + std::to_string(i) + ": " + e.what());
    }
    out.config.subneurons.push_back(std::move(fit.params));
    out.report.per_subrange_max_abs_err.push_back(fit.max_abs_err);
  }
  out.config.validate();
  out.report.fitted = out.config;
  return out;
}

HgFit fit_hg(const TargetFunction& target, const ActivationStats& stats, std::size_t ranges,
             int steps, std::size_t samples, std::uint64_t seed, const FitOptions& options) {
  return fit_hg(target, select_hierarchy(stats, ranges), steps, samples, seed, options);
}

HgFit fit_hg_range(const TargetFunction& target, double lo, double hi, std::size_t ranges,
                   int steps, std::size_t samples, std::uint64_t seed, const FitOptions& options) {
  if (!(lo < hi)) throw ConfigError("fit_hg_range: need lo < hi");
  if (ranges < 1) throw ConfigError("fit_hg_range: need N >= 1");
  Hierarchy h;
  for (std::size_t i = 0; i <= ranges; ++i) {
    h.boundaries.push_back(i == ranges ? hi : lo + (hi - lo) * static_cast<double>(i) / ranges);
  }
  return fit_hg(target, h, steps, samples, seed, options);
}

double hg_max_abs_error(const HGConfig& config, const std::function<double(double)>& target,
                        double lo, double hi, std::size_t points) {
  double worst = 0.0;
  for (std::size_t g = 0; g < points; ++g) {
    const double x =
        points == 1 ? lo : lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(points - 1);
    worst = std::max(worst, std::abs(hg_eval(x, config) - target(x)));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const FSParams& p) {
  j = nlohmann::json{{"T", p.steps()}, {"theta", p.theta}, {"h", p.h}, {"d", p.d}};
}

void from_json(const nlohmann::json& j, FSParams& p) {
  j.at("theta").get_to(p.theta);
  j.at("h").get_to(p.h);
  j.at("d").get_to(p.d);
  p.validate();
}

void to_json(nlohmann::json& j, const HGConfig& c) {
  j = nlohmann::json{{"boundaries", c.boundaries}, {"subneurons", c.subneurons}};
}

void from_json(const nlohmann::json& j, HGConfig& c) {
  j.at("boundaries").get_to(c.boundaries);
  j.at("subneurons").get_to(c.subneurons);
  c.validate();
}

void to_json(nlohmann::json& j, const OATConfig& c) {
  j = nlohmann::json{{"theta_nor", c.theta_nor},
                     {"theta_out", c.theta_out},
                     {"H", c.levels},
                     {"T", c.steps}};
}

void from_json(const nlohmann::json& j, OATConfig& c) {
  j.at("theta_nor").get_to(c.theta_nor);
  j.at("theta_out").get_to(c.theta_out);
  j.at("H").get_to(c.levels);
  j.at("T").get_to(c.steps);
  c.validate();
}

void to_json(nlohmann::json& j, const CalibrationReport& r) {
  j = nlohmann::json{{"target", r.target},
                     {"boundaries", r.boundaries},
                     {"per_subrange_max_abs_err", r.per_subrange_max_abs_err},
                     {"max_abs_err", r.max_abs_err()},
                     {"samples_per_range", r.samples_per_range},
                     {"seed", r.seed},
                     {"steps", r.steps},
                     {"validation_factor", r.validation_factor},
                     {"warnings", r.warnings},
                     {"fitted", r.fitted}};
}

void from_json(const nlohmann::json& j, CalibrationReport& r) {
  j.at("target").get_to(r.target);
  j.at("boundaries").get_to(r.boundaries);
  j.at("per_subrange_max_abs_err").get_to(r.per_subrange_max_abs_err);
  j.at("samples_per_range").get_to(r.samples_per_range);
  j.at("seed").get_to(r.seed);
  j.at("steps").get_to(r.steps);
  j.at("validation_factor").get_to(r.validation_factor);
  if (j.contains("warnings")) j.at("warnings").get_to(r.warnings);
  j.at("fitted").get_to(r.fitted);
}

}  // namespace las

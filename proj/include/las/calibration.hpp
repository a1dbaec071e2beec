#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "las/neurons.hpp"
#include "las/tensors.hpp"

namespace las {

/// A named scalar nonlinearity an HG neuron can be fitted to.
struct TargetFunction {
  std::string name;
  std::function<double(double)> fn;
  // Inputs must satisfy x >= domain_lo (x > domain_lo when domain_open).
  double domain_lo = -std::numeric_limits<double>::infinity();
  bool domain_open = false;

  double operator()(double x) const { return fn(x); }
};

// Epsilon inside the LayerNorm inverse square root, 1/sqrt(x + eps).
inline constexpr double kInvSqrtEpsilon = 1e-5;

double gelu(double x);
double silu(double x);

/// gelu, silu, exp, reciprocal, square, invsqrt.
const std::vector<std::string>& known_targets();
/// Throws ConfigError naming the known targets when `name` is not one of them.
TargetFunction target_by_name(const std::string& name);

struct OATThresholds {
  double theta_nor = 0.0;
  double theta_out = 0.0;
  bool degenerate = false;
  std::vector<std::string> warnings;

  OATConfig config(int levels, int steps) const { return {theta_nor, theta_out, levels, steps}; }
};

/// `magnitude_stats` must describe |activation| and carry `normal_quantile`.
/// theta_nor is that percentile, theta_out the largest magnitude.
OATThresholds select_oat_thresholds(const ActivationStats& magnitude_stats, double normal_quantile);
/// Convenience: computes magnitude statistics of `activations` first.
OATThresholds select_oat_thresholds(const Matrix& activations, double normal_quantile);

/// Quantiles i/N, i = 1..N-1, needed by select_hierarchy.
std::vector<double> hierarchy_quantiles(std::size_t ranges);

struct HierarchyOptions {
  // Extra room below the sample min / above the max, as a fraction of the span.
  double margin_lo = 0.0;
  double margin_hi = 0.0;
  // Weight of a uniform distribution over the padded span mixed into the
  // sample before taking equal-mass quantiles (sample overload only). 0 keeps
  // pure equal-mass ranges; larger values cap how wide tail ranges grow.
  double uniform_mix = 0.0;
};

struct Hierarchy {
  std::vector<double> boundaries;
  std::vector<std::string> warnings;
};

/// Equal-probability-mass sub-ranges; outer boundaries are the sample extremes
/// padded by a small epsilon (plus `margin`). Duplicate quantiles collapse and
/// reduce the range count with a warning.
Hierarchy select_hierarchy(const ActivationStats& stats, std::size_t ranges,
                           const HierarchyOptions& options = {});
Hierarchy select_hierarchy(std::span<const double> sample, std::size_t ranges,
                           const HierarchyOptions& options = {});
/// Raises the lower boundary into the target's domain, keeping half the gap
/// between the domain edge and `sample_min`.
void fit_to_domain(Hierarchy& h, const TargetFunction& target, double sample_min);

struct FitOptions {
  std::size_t validation_factor = 10;
  int polish_sweeps = 2;
};

struct FsFit {
  FSParams params;
  double lo = 0.0;
  double hi = 0.0;
  double max_abs_err = 0.0;  // over the validation grid
  double train_mse = 0.0;

  /// Decoded output for x, with x mapped to the range-relative membrane.
  double eval(double x) const { return fs_eval(range_membrane(x, lo, hi), params); }
};

/// Fits theta/h/d of one FS neuron so that decode(fs_encode(.)) tracks
/// `target` on [lo, hi]. Requires lo < hi, T >= 1 and samples >= 64.
FsFit fit_fs(const std::function<double(double)>& target, double lo, double hi, int steps,
             std::size_t samples, std::uint64_t seed, const FitOptions& options = {});

struct CalibrationReport {
  std::string target;
  std::vector<double> boundaries;
  std::vector<double> per_subrange_max_abs_err;
  std::size_t samples_per_range = 0;
  std::uint64_t seed = 0;
  int steps = 0;
  std::size_t validation_factor = 10;
  HGConfig fitted;
  std::vector<std::string> warnings;

  double max_abs_err() const;
  /// Upper bound on the error anywhere in the fitted span: the grid error plus
  /// `lipschitz` times the grid spacing (the decoded output is piecewise constant).
  double sup_bound(double lipschitz) const;
  friend bool operator==(const CalibrationReport&, const CalibrationReport&) = default;
};

struct HgFit {
  HGConfig config;
  CalibrationReport report;
};

HgFit fit_hg(const TargetFunction& target, const Hierarchy& hierarchy, int steps,
             std::size_t samples, std::uint64_t seed, const FitOptions& options = {});
HgFit fit_hg(const TargetFunction& target, const ActivationStats& stats, std::size_t ranges,
             int steps, std::size_t samples, std::uint64_t seed, const FitOptions& options = {});
/// Hierarchy over the uniform span [lo, hi] split into `ranges` equal parts.
HgFit fit_hg_range(const TargetFunction& target, double lo, double hi, std::size_t ranges,
                   int steps, std::size_t samples, std::uint64_t seed,
                   const FitOptions& options = {});

/// Measured max |hg_eval - target| over `points` evenly spaced inputs in [lo, hi].
double hg_max_abs_error(const HGConfig& config, const std::function<double(double)>& target,
                        double lo, double hi, std::size_t points);

void to_json(nlohmann::json& j, const FSParams& p);
void from_json(const nlohmann::json& j, FSParams& p);
void to_json(nlohmann::json& j, const HGConfig& c);
void from_json(const nlohmann::json& j, HGConfig& c);
void to_json(nlohmann::json& j, const OATConfig& c);
void from_json(const nlohmann::json& j, OATConfig& c);
void to_json(nlohmann::json& j, const CalibrationReport& r);
void from_json(const nlohmann::json& j, CalibrationReport& r);

}  // namespace las

#include "las/neurons.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "las/errors.hpp"

namespace las {

namespace {

// Comparisons against MT levels tolerate this much rounding (in units of
// tau / H) so values that sit exactly on the level grid re-encode to the
// same emissions.
constexpr double kLevelSnap = 1e-12;

void require_finite(double x, const char* who) {
  if (!std::isfinite(x)) throw InputError(std::string(who) + ": non-finite input");
}

template <typename Emit>
void run_fs(double x, const FSParams& p, Emit&& emit) {
  double v = x;
  for (std::size_t t = 0; t < p.theta.size(); ++t) {
    if (v >= p.theta[t]) {
      emit(t, p.d[t]);
      v -= p.h[t];
    }
  }
}

// The membrane is tracked in units of tau / H, where every level
// (H + k) * 2^-t is an exact dyadic and resets are exact subtractions.
template <typename Emit>
void run_mt(double x, const MTConfig& c, Emit&& emit) {
  const double levels = c.levels;
  double u = x / c.tau * levels;
  for (int t = 1; t <= c.steps; ++t) {
    const double scaled = std::ldexp(std::abs(u) + kLevelSnap, t);
    if (scaled < levels) continue;
    const double k = std::min(levels - 1.0, std::floor(scaled) - levels);
    const double sign = u < 0.0 ? -1.0 : 1.0;
    u -= sign * std::ldexp(levels + k, -t);
    emit(static_cast<std::size_t>(t - 1), sign * (levels + k) * c.threshold(t) / levels);
  }
}

}  // namespace

SpikeTrain::SpikeTrain(std::size_t steps, std::size_t width)
    : steps(steps), width(width), values(steps * width, 0.0), events(steps * width, 0) {}

std::size_t SpikeTrain::event_count() const noexcept {
  return static_cast<std::size_t>(std::count(events.begin(), events.end(), std::uint8_t{1}));
}

void FSParams::validate() const {
  if (theta.empty()) throw ConfigError("FSParams: T must be >= 1");
  if (h.size() != theta.size() || d.size() != theta.size()) {
    throw ConfigError("FSParams: theta/h/d lengths differ");
  }
  for (std::size_t t = 0; t < theta.size(); ++t) {
    if (!(theta[t] > 0.0) || !std::isfinite(theta[t])) {
      throw ConfigError("FSParams: theta[" + std::to_string(t) + "] must be finite and > 0");
    }
    if (!std::isfinite(h[t]) || !std::isfinite(d[t])) {
      throw ConfigError("FSParams: non-finite h/d at step " + std::to_string(t));
    }
  }
}

void MTConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("MTConfig: tau must be > 0");
  if (levels < 1) throw ConfigError("MTConfig: H must be >= 1");
  if (steps < 1) throw ConfigError("MTConfig: T must be >= 1");
}

double MTConfig::threshold(int t) const { return std::ldexp(tau, -t); }

double MTConfig::max_decodable() const {
  return (2.0 * levels - 1.0) / levels * tau * (1.0 - std::ldexp(1.0, -steps));
}

double MTConfig::quantization_bound() const { return threshold(steps) * (1.0 + 1e-9); }

FSParams MTConfig::binary_schedule() const {
  FSParams p;
  for (int t = 1; t <= steps; ++t) {
    p.theta.push_back(threshold(t));
    p.h.push_back(threshold(t));
    p.d.push_back(threshold(t));
  }
  return p;
}

void OATConfig::validate() const {
  if (!(theta_nor > 0.0) || !std::isfinite(theta_nor)) {
    throw ConfigError("OATConfig: theta_nor must be > 0");
  }
  if (!(theta_out > theta_nor) || !std::isfinite(theta_out)) {
    throw ConfigError("OATConfig: theta_out must exceed theta_nor");
  }
  normal_path().validate();
}

bool OATConfig::is_outlier(double x) const noexcept { return std::abs(x) >= theta_nor; }

std::size_t HGConfig::steps() const { return subneurons.empty() ? 0 : subneurons.front().steps(); }

void HGConfig::validate() const {
  if (subneurons.empty()) throw ConfigError("HGConfig: need at least one sub-neuron");
  if (boundaries.size() != subneurons.size() + 1) {
    throw ConfigError("HGConfig: expected " + std::to_string(subneurons.size() + 1) +
                      " boundaries, got " + std::to_string(boundaries.size()));
  }
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    if (!std::isfinite(boundaries[i])) throw ConfigError("HGConfig: non-finite boundary");
    if (i > 0 && !(boundaries[i] > boundaries[i - 1])) {
      throw ConfigError("HGConfig: boundaries must be strictly increasing");
    }
  }
  for (const auto& s : subneurons) {
    s.validate();
    if (s.steps() != steps()) throw ConfigError("HGConfig: sub-neurons disagree on T");
  }
}

std::size_t HGConfig::select(double x) const {
  const auto it = std::upper_bound(boundaries.begin(), boundaries.end(), x);
  const auto idx = static_cast<std::ptrdiff_t>(it - boundaries.begin()) - 1;
  return static_cast<std::size_t>(
      std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(ranges()) - 1));
}

std::vector<std::uint8_t> HGConfig::gate(double x) const {
  std::vector<std::uint8_t> mask(ranges(), 0);
  mask[select(x)] = 1;
  return mask;
}

double HGConfig::membrane(std::size_t i, double x) const {
  const double xc = std::clamp(x, boundaries.front(), boundaries.back());
  return range_membrane(xc, boundaries[i], boundaries[i + 1]);
}

SpikeTrain fs_encode(double x, const FSParams& p) {
  require_finite(x, "fs_encode");
  SpikeTrain s(p.steps(), 1);
  run_fs(x, p, [&](std::size_t t, double v) { s.emit(t, 0, v); });
  return s;
}

SpikeTrain mt_encode(double x, const MTConfig& c) {
  require_finite(x, "mt_encode");
  SpikeTrain s(static_cast<std::size_t>(c.steps), 1);
  s.multilevel = c.levels > 1;
  run_mt(x, c, [&](std::size_t t, double v) { s.emit(t, 0, v); });
  return s;
}

SpikeTrain oat_encode(const Matrix& x, const OATConfig& c) {
  SpikeTrain s(static_cast<std::size_t>(c.steps), x.size());
  s.multilevel = c.levels > 1;
  const MTConfig normal = c.normal_path();
  const MTConfig outlier = c.outlier_path();
  const auto values = x.data();
  for (std::size_t j = 0; j < values.size(); ++j) {
    require_finite(values[j], "oat_encode");
    const MTConfig& path = c.is_outlier(values[j]) ? outlier : normal;
    run_mt(values[j], path, [&](std::size_t t, double v) { s.emit(t, j, v); });
  }
  return s;
}

SpikeTrain hg_apply(const Matrix& x, const HGConfig& c) {
  SpikeTrain s(c.steps(), x.size());
  const auto values = x.data();
  for (std::size_t j = 0; j < values.size(); ++j) {
    require_finite(values[j], "hg_apply");
    const std::size_t i = c.select(values[j]);
    run_fs(c.membrane(i, values[j]), c.subneurons[i],
           [&](std::size_t t, double v) { s.emit(t, j, v); });
  }
  return s;
}

Matrix decode(const SpikeTrain& s) {
  Matrix out(1, s.width);
  for (std::size_t t = 0; t < s.steps; ++t)
    for (std::size_t j = 0; j < s.width; ++j) out(0, j) += s.values[t * s.width + j];
  return out;
}

double fs_eval(double x, const FSParams& p) {
  require_finite(x, "fs_eval");
  double sum = 0.0;
  run_fs(x, p, [&](std::size_t, double v) { sum += v; });
  return sum;
}

double mt_eval(double x, const MTConfig& c) {
  require_finite(x, "mt_eval");
  double sum = 0.0;
  run_mt(x, c, [&](std::size_t, double v) { sum += v; });
  return sum;
}

double hg_eval(double x, const HGConfig& c) {
  require_finite(x, "hg_eval");
  const std::size_t i = c.select(x);
  return fs_eval(c.membrane(i, x), c.subneurons[i]);
}

}  // namespace las

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "las/tensors.hpp"

namespace las {

/// Weighted spike output of `width` neurons over `steps` timesteps, stored
/// step-major. `values` holds the emitted weight (0 when silent) and `events`
/// the binary spike flag; arithmetic uses the former, SOP counting the latter.
struct SpikeTrain {
  std::size_t steps = 0;
  std::size_t width = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> events;
  // Set when events carry one of several emission levels (MT neurons).
  bool multilevel = false;

  SpikeTrain() = default;
  SpikeTrain(std::size_t steps, std::size_t width);

  double value(std::size_t t, std::size_t j) const { return values[t * width + j]; }
  bool fired(std::size_t t, std::size_t j) const { return events[t * width + j] != 0; }
  void emit(std::size_t t, std::size_t j, double v) {
    values[t * width + j] = v;
    events[t * width + j] = 1;
  }
  std::size_t event_count() const noexcept;

  friend bool operator==(const SpikeTrain&, const SpikeTrain&) = default;
};

/// Few-spikes neuron parameters: threshold, reset and output weight per step.
struct FSParams {
  std::vector<double> theta;
  std::vector<double> h;
  std::vector<double> d;

  std::size_t steps() const noexcept { return theta.size(); }
  void validate() const;

  friend bool operator==(const FSParams&, const FSParams&) = default;
};

/// Multi-threshold neuron: dyadic schedule tau * 2^-t with 2H signed levels.
struct MTConfig {
  double tau = 1.0;
  int levels = 1;  // H
  int steps = 16;  // T

  void validate() const;
  /// Base threshold at 1-based step t.
  double threshold(int t) const;
  /// Largest magnitude the train can emit in total.
  double max_decodable() const;
  /// Worst-case |decode - x| for |x| <= max_decodable().
  double quantization_bound() const;
  /// theta = h = d = tau * 2^-t, i.e. the H = 1 neuron written as an FS neuron.
  FSParams binary_schedule() const;
};

struct OATConfig {
  double theta_nor = 1.0;
  double theta_out = 2.0;
  int levels = 5;
  int steps = 16;

  void validate() const;
  MTConfig normal_path() const { return {theta_nor, levels, steps}; }
  MTConfig outlier_path() const { return {theta_out, levels, steps}; }
  bool is_outlier(double x) const noexcept;
  /// Worst-case |decode - x| over both paths (|x| <= outlier max_decodable()).
  double quantization_bound() const { return outlier_path().quantization_bound(); }

  friend bool operator==(const OATConfig&, const OATConfig&) = default;
};

/// Hierarchically gated neuron: sub-neuron i owns [boundaries[i], boundaries[i+1]).
/// Sub-neuron i sees the range-relative membrane x - lo_i + w_i, so its FS
/// thresholds stay positive regardless of where the range sits.
struct HGConfig {
  std::vector<double> boundaries;
  std::vector<FSParams> subneurons;

  std::size_t ranges() const noexcept { return subneurons.size(); }
  std::size_t steps() const;
  void validate() const;
  /// Active sub-neuron for x; values outside [lambda_0, lambda_N] clamp to the
  /// first or last range.
  std::size_t select(double x) const;
  /// Gate mask M_i for x (exactly one entry is 1).
  std::vector<std::uint8_t> gate(double x) const;
  /// Initial membrane handed to sub-neuron i for input x (after clamping).
  double membrane(std::size_t i, double x) const;

  friend bool operator==(const HGConfig&, const HGConfig&) = default;
};

/// Membrane an FS neuron fitted on [lo, hi) receives for input x.
inline double range_membrane(double x, double lo, double hi) { return x - lo + (hi - lo); }

SpikeTrain fs_encode(double x, const FSParams& p);
SpikeTrain mt_encode(double x, const MTConfig& c);
SpikeTrain oat_encode(const Matrix& x, const OATConfig& c);
SpikeTrain hg_apply(const Matrix& x, const HGConfig& c);

/// Sum of weighted spikes over time, shape 1 x width.
Matrix decode(const SpikeTrain& s);

// Scalar fast paths, identical arithmetic to the train-producing versions.
double fs_eval(double x, const FSParams& p);
double mt_eval(double x, const MTConfig& c);
double hg_eval(double x, const HGConfig& c);

}  // namespace las

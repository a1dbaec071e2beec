#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "las/calibration.hpp"
#include "las/energy.hpp"
#include "las/neurons.hpp"
#include "las/tensors.hpp"

namespace las {

enum class FfnKind { standard, gated };

struct Seeds {
  std::uint64_t weights = 1;
  std::uint64_t calibration = 2;
  std::uint64_t fit = 3;
  std::uint64_t input = 4;

  /// weights = s, calibration = s + 1, fit = s + 2, input = s + 3.
  static Seeds from_base(std::uint64_t s) { return {s, s + 1, s + 2, s + 3}; }
  friend bool operator==(const Seeds&, const Seeds&) = default;
};

/// Synthetic activation source: N(0, scale^2) entries, a fraction of which
/// are replaced by +-outlier_scale.
struct InputDistribution {
  double scale = 1.0;
  double outlier_fraction = 0.01;
  double outlier_scale = 8.0;
  std::size_t sequences = 16;

  friend bool operator==(const InputDistribution&, const InputDistribution&) = default;
};

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t seq_len = 8;
  std::size_t n_layers = 1;
  FfnKind ffn_kind = FfnKind::standard;
  bool causal = false;
  int T = 16;
  int H = 5;
  std::size_t N_per_nonlinearity = 32;
  std::size_t fit_samples = 1024;
  double normal_quantile = 0.99;
  // Extra hierarchy room beyond the calibration extremes, as a fraction of the span.
  double hierarchy_margin = 0.1;
  // Uniform share mixed into the equal-mass hierarchy quantiles.
  double hierarchy_uniform_mix = 0.5;
  Seeds seeds;
  InputDistribution calibration;

  std::size_t head_dim() const { return d_model / n_heads; }
  /// Throws ConfigError.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Named parameter tensors, e.g. "layer0.wq", "layer0.ln1_gamma".
class WeightSet {
 public:
  const Matrix& get(const std::string& name) const;
  void set(const std::string& name, Matrix m) { tensors_[name] = std::move(m); }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::map<std::string, Matrix>& tensors() const noexcept { return tensors_; }

  friend bool operator==(const WeightSet&, const WeightSet&) = default;

 private:
  std::map<std::string, Matrix> tensors_;
};

/// Expected name -> (rows, cols) for every tensor of `c`.
std::map<std::string, std::pair<std::size_t, std::size_t>> weight_shapes(const ModelConfig& c);
/// Throws ShapeError on a missing or mis-shaped tensor, InputError on non-finite entries.
void validate_weights(const ModelConfig& c, const WeightSet& w);
/// N(0, 1/fan_in) weights, zero biases, unit gamma, zero beta.
WeightSet random_weights(const ModelConfig& c, std::uint64_t seed);
/// `sequences` stacked seq_len x d_model inputs.
Matrix sample_inputs(const ModelConfig& c, const InputDistribution& dist, std::uint64_t seed);

/// Float-path instrumentation: activation values per site and FLOP charges.
struct ForwardProbe {
  std::function<void(const std::string& site, const Matrix& values)> record;
  EnergyLedger* flops = nullptr;
  // Output of every layer, one entry per layer (for the last sequence).
  std::vector<Matrix>* layer_outputs = nullptr;
};

/// Pre-LN encoder stack on stacked sequences (rows a multiple of seq_len).
Matrix float_forward(const ModelConfig& c, const WeightSet& w, const Matrix& x,
                     const ForwardProbe* probe = nullptr);

/// Neuron sites of one layer.
std::vector<std::string> oat_sites(const ModelConfig& c, std::size_t layer);
std::vector<std::string> hg_sites(const ModelConfig& c, std::size_t layer);
/// Target nonlinearity of an HG site ("layer0.ffn.act" -> "gelu").
std::string hg_target(const ModelConfig& c, const std::string& site);

struct ConvertedBlock {
  ModelConfig config;
  WeightSet weights;
  std::map<std::string, OATConfig> oat;
  std::map<std::string, HGConfig> hg;
  std::map<std::string, CalibrationReport> reports;
  std::vector<std::string> warnings;

  friend bool operator==(const ConvertedBlock&, const ConvertedBlock&) = default;
};

/// Calibrates every OAT site and fits every HG site on `calib_sample`.
ConvertedBlock convert(const ModelConfig& c, const WeightSet& w, const Matrix& calib_sample);

enum class Encoding {
  oat,        // normal/outlier routing
  single_mt,  // every site uses one MT neuron with tau = theta_out
};

struct SpikeOptions {
  int steps = 16;
  std::optional<int> levels;  // overrides H of every OAT site
  Encoding encoding = Encoding::oat;
  SopRule sop_rule = SopRule::per_event;
};

struct LayerDeviation {
  std::string layer;
  double rel_err = 0.0;
};

struct RunTrace {
  std::vector<LayerDeviation> layers;  // averaged over sequences
  std::vector<double> sequence_rel_err;
  double mean_rel_err = 0.0;
  EnergyLedger ledger;  // spike-path SOPs and float-path FLOPs
  std::size_t clamped = 0;
};

struct SpikeRun {
  Matrix output;
  Matrix reference;
  RunTrace trace;
};

/// Runs the spike-driven block; throws NumericError naming the layer and
/// step of the first non-finite value.
SpikeRun spike_forward(const ConvertedBlock& block, const Matrix& x, const SpikeOptions& options);

/// OAT config whose normal path is (to 1e-9) the outlier path.
OATConfig single_mt_equivalent(const OATConfig& c);

// Weight file: "LASW", u32 version, u32 count, then per tensor u32 name
// length, name, u32 rows, u32 cols, little-endian float64 payload.
inline constexpr std::uint32_t kWeightsVersion = 1;
std::vector<std::uint8_t> encode_weights(const WeightSet& w);
WeightSet decode_weights(const std::vector<std::uint8_t>& bytes);
void save_weights(const std::filesystem::path& path, const WeightSet& w);
WeightSet load_weights(const std::filesystem::path& path);

void save_config(const std::filesystem::path& path, const ModelConfig& c);
ModelConfig load_config(const std::filesystem::path& path);

/// JSON at `path` plus the weights next to it (same stem, .lasw).
void save_block(const std::filesystem::path& path, const ConvertedBlock& b);
ConvertedBlock load_block(const std::filesystem::path& path);
nlohmann::json block_json(const ConvertedBlock& b, const std::string& weights_file);

}  // namespace las

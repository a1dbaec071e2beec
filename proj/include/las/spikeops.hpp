#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "las/calibration.hpp"
#include "las/energy.hpp"
#include "las/neurons.hpp"
#include "las/tensors.hpp"

namespace las {

/// Matrix-valued spike train: one rows x cols matrix per step.
/// With `theta` empty the per-step matrices already hold weighted values;
/// otherwise step t carries spikes scaled by the scalar theta[t].
struct SpikeMatrixTrain {
  std::vector<Matrix> values;
  std::vector<double> theta;
  int levels = 1;  // H of the emitting neurons; 1 for binary or derived trains

  SpikeMatrixTrain() = default;
  SpikeMatrixTrain(std::size_t steps, std::size_t rows, std::size_t cols);

  std::size_t steps() const noexcept { return values.size(); }
  std::size_t rows() const noexcept { return values.empty() ? 0 : values.front().rows(); }
  std::size_t cols() const noexcept { return values.empty() ? 0 : values.front().cols(); }

  Matrix weighted(std::size_t t) const;
  /// Sum of weighted steps 0..t inclusive.
  Matrix prefix(std::size_t t) const;
  Matrix decode() const;
  std::size_t event_count(std::size_t t) const;
  std::size_t event_count() const;
  /// Throws ShapeError on ragged steps or a theta of the wrong length.
  void validate() const;

  /// Reshapes a width rows*cols SpikeTrain (row-major elements).
  static SpikeMatrixTrain from_spike_train(const SpikeTrain& s, std::size_t rows, std::size_t cols);
  /// x delivered at the first step, silent afterwards.
  static SpikeMatrixTrain impulse(const Matrix& x, std::size_t steps);
};

/// Appends silent steps up to `steps` (never truncates).
SpikeMatrixTrain pad_steps(const SpikeMatrixTrain& s, std::size_t steps);
/// Stepwise sum; the shorter train is padded.
SpikeMatrixTrain add_trains(const SpikeMatrixTrain& a, const SpikeMatrixTrain& b);
/// Adds a 1 x cols bias to every row at the first step.
SpikeMatrixTrain add_bias(const SpikeMatrixTrain& s, const Matrix& bias);
SpikeMatrixTrain scale_train(const SpikeMatrixTrain& s, double factor);

/// Per-call accounting shared by the spike operators.
struct SpikeContext {
  EnergyLedger* ledger = nullptr;
  // Inputs an HG neuron clamped into its fitted range.
  std::size_t clamped = 0;

  void charge(const std::string& site, std::uint64_t events, int levels) const;
};

/// Neuron sites: integrate the incoming train, then fire.
SpikeMatrixTrain oat_fire(const SpikeMatrixTrain& in, const OATConfig& c);
SpikeMatrixTrain mt_fire(const SpikeMatrixTrain& in, const MTConfig& c);
SpikeMatrixTrain hg_fire(const SpikeMatrixTrain& in, const HGConfig& c, SpikeContext* ctx = nullptr);

/// Left product W * theta(t) X(t) per step.
SpikeMatrixTrain saw_mul(const Matrix& w, const SpikeMatrixTrain& xs, SpikeContext* ctx = nullptr,
                         const std::string& site = "saw");
/// Right product theta(t) X(t) * W per step (row-vector layers).
SpikeMatrixTrain saw_mul(const SpikeMatrixTrain& xs, const Matrix& w, SpikeContext* ctx = nullptr,
                         const std::string& site = "saw");

struct Accumulators {
  Matrix s_q;
  Matrix s_k;
};

/// Stateful spike-activation/activation product. Each step adds
/// Q(t)K(t) + Q(t)S_k + S_q K(t) and then folds Q(t), K(t) into S_q, S_k,
/// so the running output equals the product of the running inputs.
class SaaMultiplier {
 public:
  SaaMultiplier(std::size_t rows, std::size_t inner, std::size_t cols);

  /// q and k are the weighted per-step inputs (k already transposed).
  Matrix step(const Matrix& q, const Matrix& k);
  const Accumulators& accumulators() const noexcept { return acc_; }
  /// Event-gated additions performed by the last step.
  std::uint64_t last_events() const noexcept { return last_events_; }

 private:
  Accumulators acc_;
  std::uint64_t last_events_ = 0;
};

/// Requires qs.steps() == ks.steps() (ProtocolError otherwise).
SpikeMatrixTrain saa_mul(const SpikeMatrixTrain& qs, const SpikeMatrixTrain& ks,
                         SpikeContext* ctx = nullptr, const std::string& site = "saa");

/// Elementwise analogue of saa_mul. `b` may have one column, broadcast across
/// the columns of `a`. Trains of different length are padded.
SpikeMatrixTrain spike_hadamard(const SpikeMatrixTrain& a, const SpikeMatrixTrain& b,
                                SpikeContext* ctx = nullptr, const std::string& site = "hadamard");

/// z(t) + M(t-1) - M(t), M(t) the row max of the prefix sum, M(0) = 0.
SpikeMatrixTrain softmax_offset(const SpikeMatrixTrain& zs);

struct SoftmaxConfigs {
  HGConfig exp;
  HGConfig reciprocal;
};

/// `mask`, when non-empty, is added to the logits at the first step.
SpikeMatrixTrain spike_softmax(const SpikeMatrixTrain& zs, const HGConfig& exp_cfg,
                               const HGConfig& inv_cfg, SpikeContext* ctx = nullptr,
                               const Matrix& mask = {}, const std::string& site = "softmax");

SpikeMatrixTrain spike_layernorm(const SpikeMatrixTrain& xs, const Matrix& gamma,
                                 const Matrix& beta, const HGConfig& invsqrt_cfg,
                                 const HGConfig& square_cfg, const OATConfig& oat,
                                 SpikeContext* ctx = nullptr, const std::string& site = "layernorm");

SpikeMatrixTrain spike_ffn(const SpikeMatrixTrain& xs, const Matrix& w1, const Matrix& b1,
                           const Matrix& w2, const Matrix& b2, const HGConfig& act_cfg,
                           const OATConfig& oat, SpikeContext* ctx = nullptr,
                           const std::string& site = "ffn");

struct GatedOat {
  OATConfig input;
  OATConfig up;
  OATConfig product;
};

SpikeMatrixTrain spike_gated_ffn(const SpikeMatrixTrain& xs, const Matrix& wg, const Matrix& bg,
                                 const Matrix& wu, const Matrix& bu, const Matrix& wd,
                                 const Matrix& bd, const HGConfig& act_cfg, const GatedOat& oat,
                                 SpikeContext* ctx = nullptr, const std::string& site = "ffn");

// Float references for the approximate layers.
Matrix float_softmax(const Matrix& z);
Matrix float_layernorm(const Matrix& x, const Matrix& gamma, const Matrix& beta);

/// Worst-case |spike - float| over softmax outputs for rows of width n, given
/// sup errors of the exp and reciprocal neurons (row sums inside the fitted
/// reciprocal range).
double softmax_error_bound(std::size_t n, double exp_err, double inv_err);

/// Worst case over rows of x for spike_layernorm, given the OAT quantization
/// bound q on centred inputs and the square/invsqrt sup errors.
double layernorm_error_bound(const Matrix& x, const Matrix& gamma, double q, double square_err,
                             double invsqrt_err);

/// Worst case for spike_ffn given the input quantization bound q, the
/// activation sup error and the activation's Lipschitz constant.
double ffn_error_bound(const Matrix& w1, const Matrix& w2, double q, double act_err,
                       double act_lipschitz);

/// Worst case for spike_gated_ffn on inputs x (float reference values are
/// needed for the product term). q_* are the OAT quantization bounds.
double gated_ffn_error_bound(const Matrix& x, const Matrix& wg, const Matrix& bg, const Matrix& wu,
                             const Matrix& bu, const Matrix& wd, const GatedOat& oat,
                             double act_err, double act_lipschitz);

}  // namespace las

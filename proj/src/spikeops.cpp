#include "las/spikeops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "las/errors.hpp"

namespace las {

namespace {

std::uint64_t nnz(const Matrix& m) {
  std::uint64_t n = 0;
  for (double v : m.data()) n += v != 0.0;
  return n;
}

std::vector<std::uint64_t> row_nnz(const Matrix& m) {
  std::vector<std::uint64_t> out(m.rows(), 0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (double v : m.row(r)) out[r] += v != 0.0;
  return out;
}

void require_steps(const SpikeMatrixTrain& s, const char* op) {
  if (s.steps() == 0) throw ShapeError(std::string(op) + ": train has no steps");
}

void charge(SpikeContext* ctx, const std::string& site, std::uint64_t events, int levels) {
  if (ctx != nullptr) ctx->charge(site, events, levels);
}

}  // namespace

SpikeMatrixTrain::SpikeMatrixTrain(std::size_t steps, std::size_t rows, std::size_t cols)
    : values(steps, Matrix(rows, cols)) {}

Matrix SpikeMatrixTrain::weighted(std::size_t t) const {
  return theta.empty() ? values[t] : scale(values[t], theta[t]);
}

Matrix SpikeMatrixTrain::prefix(std::size_t t) const {
  Matrix out(rows(), cols());
  for (std::size_t i = 0; i <= t && i < steps(); ++i) out = add(out, weighted(i));
  return out;
}

Matrix SpikeMatrixTrain::decode() const {
  if (values.empty()) return {};
  return prefix(steps() - 1);
}

std::size_t SpikeMatrixTrain::event_count(std::size_t t) const { return nnz(values[t]); }

std::size_t SpikeMatrixTrain::event_count() const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < steps(); ++t) n += event_count(t);
  return n;
}

void SpikeMatrixTrain::validate() const {
  for (const auto& m : values) {
    if (!m.same_shape(values.front())) throw ShapeError("SpikeMatrixTrain: ragged steps");
  }
  if (!theta.empty() && theta.size() != values.size()) {
    throw ShapeError("SpikeMatrixTrain: theta length differs from step count");
  }
}

SpikeMatrixTrain SpikeMatrixTrain::from_spike_train(const SpikeTrain& s, std::size_t rows,
                                                    std::size_t cols) {
  if (rows * cols != s.width) throw ShapeError("from_spike_train: width != rows * cols");
  SpikeMatrixTrain out(s.steps, rows, cols);
  for (std::size_t t = 0; t < s.steps; ++t) {
    auto dst = out.values[t].data();
    std::copy_n(s.values.begin() + static_cast<std::ptrdiff_t>(t * s.width), s.width, dst.begin());
  }
  return out;
}

SpikeMatrixTrain SpikeMatrixTrain::impulse(const Matrix& x, std::size_t steps) {
  if (steps == 0) throw ShapeError("impulse: need at least one step");
  SpikeMatrixTrain out(steps, x.rows(), x.cols());
  out.values[0] = x;
  return out;
}

SpikeMatrixTrain pad_steps(const SpikeMatrixTrain& s, std::size_t steps) {
  SpikeMatrixTrain out = s;
  if (steps <= s.steps()) return out;
  if (!out.theta.empty()) out.theta.resize(steps, 0.0);
  out.values.resize(steps, Matrix(s.rows(), s.cols()));
  return out;
}

SpikeMatrixTrain add_trains(const SpikeMatrixTrain& a, const SpikeMatrixTrain& b) {
  const std::size_t steps = std::max(a.steps(), b.steps());
  SpikeMatrixTrain out(steps, a.rows(), a.cols());
  const auto pa = pad_steps(a, steps);
  const auto pb = pad_steps(b, steps);
  for (std::size_t t = 0; t < steps; ++t) out.values[t] = add(pa.weighted(t), pb.weighted(t));
  return out;
}

SpikeMatrixTrain add_bias(const SpikeMatrixTrain& s, const Matrix& bias) {
  require_steps(s, "add_bias");
  SpikeMatrixTrain out = s;
  if (!out.theta.empty()) {
    for (std::size_t t = 0; t < out.steps(); ++t) out.values[t] = out.weighted(t);
    out.theta.clear();
  }
  out.values[0] = add_row_vector(out.values[0], bias);
  out.levels = 1;
  return out;
}

SpikeMatrixTrain scale_train(const SpikeMatrixTrain& s, double factor) {
  SpikeMatrixTrain out = s;
  if (!out.theta.empty()) {
    for (double& th : out.theta) th *= factor;
  } else {
    for (auto& m : out.values) m = scale(m, factor);
  }
  return out;
}

void SpikeContext::charge(const std::string& site, std::uint64_t events, int levels) const {
  if (ledger != nullptr) ledger->record_events(site, events, levels);
}

// ---------------------------------------------------------------------------
// Neuron sites

SpikeMatrixTrain oat_fire(const SpikeMatrixTrain& in, const OATConfig& c) {
  c.validate();
  const Matrix x = in.decode();
  auto out = SpikeMatrixTrain::from_spike_train(oat_encode(x, c), x.rows(), x.cols());
  out.levels = c.levels;
  return out;
}

SpikeMatrixTrain mt_fire(const SpikeMatrixTrain& in, const MTConfig& c) {
  c.validate();
  const Matrix x = in.decode();
  SpikeMatrixTrain out(static_cast<std::size_t>(c.steps), x.rows(), x.cols());
  out.levels = c.levels;
  const auto src = x.data();
  for (std::size_t j = 0; j < src.size(); ++j) {
    const SpikeTrain s = mt_encode(src[j], c);
    for (std::size_t t = 0; t < s.steps; ++t) out.values[t].data()[j] = s.values[t];
  }
  return out;
}

SpikeMatrixTrain hg_fire(const SpikeMatrixTrain& in, const HGConfig& c, SpikeContext* ctx) {
  c.validate();
  const Matrix x = in.decode();
  if (ctx != nullptr) {
    const double lo = c.boundaries.front();
    const double hi = c.boundaries.back();
    for (double v : x.data()) ctx->clamped += (v < lo || v > hi) ? 1 : 0;
  }
  return SpikeMatrixTrain::from_spike_train(hg_apply(x, c), x.rows(), x.cols());
}

// ---------------------------------------------------------------------------
// Products

SpikeMatrixTrain saw_mul(const Matrix& w, const SpikeMatrixTrain& xs, SpikeContext* ctx,
                         const std::string& site) {
  require_steps(xs, "saw_mul");
  if (w.cols() != xs.rows()) throw ShapeError("saw_mul: W.cols != X.rows");
  SpikeMatrixTrain out(xs.steps(), w.rows(), xs.cols());
  for (std::size_t t = 0; t < xs.steps(); ++t) {
    out.values[t] = matmul(w, xs.weighted(t));
    // Each event adds one column of W.
    charge(ctx, site, nnz(xs.values[t]) * w.rows(), xs.levels);
  }
  return out;
}

SpikeMatrixTrain saw_mul(const SpikeMatrixTrain& xs, const Matrix& w, SpikeContext* ctx,
                         const std::string& site) {
  require_steps(xs, "saw_mul");
  if (xs.cols() != w.rows()) throw ShapeError("saw_mul: X.cols != W.rows");
  SpikeMatrixTrain out(xs.steps(), xs.rows(), w.cols());
  for (std::size_t t = 0; t < xs.steps(); ++t) {
    out.values[t] = matmul(xs.weighted(t), w);
    // Each event adds one row of W.
    charge(ctx, site, nnz(xs.values[t]) * w.cols(), xs.levels);
  }
  return out;
}

SaaMultiplier::SaaMultiplier(std::size_t rows, std::size_t inner, std::size_t cols)
    : acc_{Matrix(rows, inner), Matrix(inner, cols)} {}

Matrix SaaMultiplier::step(const Matrix& q, const Matrix& k) {
  if (!q.same_shape(acc_.s_q) || !k.same_shape(acc_.s_k)) {
    throw ShapeError("SaaMultiplier: step shape differs from the accumulators");
  }
  Matrix a = add(add(matmul(q, k), matmul(q, acc_.s_k)), matmul(acc_.s_q, k));

  const auto k_rows = row_nnz(k);
  std::uint64_t events = 0;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < q.cols(); ++j) {
      if (q(i, j) != 0.0) events += k_rows[j] + k.cols();
    }
  }
  events += nnz(k) * q.rows();
  last_events_ = events;

  acc_.s_q = add(acc_.s_q, q);
  acc_.s_k = add(acc_.s_k, k);
  return a;
}

SpikeMatrixTrain saa_mul(const SpikeMatrixTrain& qs, const SpikeMatrixTrain& ks, SpikeContext* ctx,
                         const std::string& site) {
  require_steps(qs, "saa_mul");
  if (qs.steps() != ks.steps()) {
    throw ProtocolError("saa_mul: step counts differ (" + std::to_string(qs.steps()) + " vs " +
                        std::to_string(ks.steps()) + ")");
  }
  if (qs.cols() != ks.rows()) throw ShapeError("saa_mul: inner dimensions differ");
  SaaMultiplier saa(qs.rows(), qs.cols(), ks.cols());
  SpikeMatrixTrain out(qs.steps(), qs.rows(), ks.cols());
  for (std::size_t t = 0; t < qs.steps(); ++t) {
    out.values[t] = saa.step(qs.weighted(t), ks.weighted(t));
    charge(ctx, site, saa.last_events(), std::max(qs.levels, ks.levels));
  }
  return out;
}

SpikeMatrixTrain spike_hadamard(const SpikeMatrixTrain& a, const SpikeMatrixTrain& b,
                                SpikeContext* ctx, const std::string& site) {
  require_steps(a, "spike_hadamard");
  require_steps(b, "spike_hadamard");
  const bool broadcast = b.cols() == 1 && a.cols() != 1;
  if (a.rows() != b.rows() || (!broadcast && a.cols() != b.cols())) {
    throw ShapeError("spike_hadamard: shapes do not conform");
  }
  const std::size_t steps = std::max(a.steps(), b.steps());
  const auto pa = pad_steps(a, steps);
  const auto pb = pad_steps(b, steps);
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  Matrix sa(rows, cols);
  Matrix sb(rows, b.cols());
  SpikeMatrixTrain out(steps, rows, cols);
  for (std::size_t t = 0; t < steps; ++t) {
    const Matrix at = pa.weighted(t);
    const Matrix bt = pb.weighted(t);
    Matrix& o = out.values[t];
    std::uint64_t events = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t bc = broadcast ? 0 : c;
        const double x = at(r, c);
        const double y = bt(r, bc);
        o(r, c) = x * y + x * sb(r, bc) + sa(r, c) * y;
        events += (x != 0.0 ? 1 : 0) + (y != 0.0 ? 1 : 0);
      }
    }
    sa = add(sa, at);
    sb = add(sb, bt);
    charge(ctx, site, events, std::max(a.levels, b.levels));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax

SpikeMatrixTrain softmax_offset(const SpikeMatrixTrain& zs) {
  require_steps(zs, "softmax_offset");
  if (zs.cols() == 0) throw ShapeError("softmax_offset: empty rows");
  const std::size_t rows = zs.rows();
  Matrix prefix(rows, zs.cols());
  std::vector<double> prev(rows, 0.0);
  SpikeMatrixTrain out(zs.steps(), rows, zs.cols());
  for (std::size_t t = 0; t < zs.steps(); ++t) {
    const Matrix z = zs.weighted(t);
    prefix = add(prefix, z);
    const auto m = rowmax(prefix);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < zs.cols(); ++c) out.values[t](r, c) = z(r, c) + prev[r] - m[r];
      prev[r] = m[r];
    }
  }
  return out;
}

SpikeMatrixTrain spike_softmax(const SpikeMatrixTrain& zs, const HGConfig& exp_cfg,
                               const HGConfig& inv_cfg, SpikeContext* ctx, const Matrix& mask,
                               const std::string& site) {
  SpikeMatrixTrain logits = zs;
  if (!mask.empty()) {
    if (!mask.same_shape(Matrix(zs.rows(), zs.cols()))) throw ShapeError("spike_softmax: mask shape");
    logits = add_trains(zs, SpikeMatrixTrain::impulse(mask, 1));
  }
  const SpikeMatrixTrain shifted = softmax_offset(logits);
  const SpikeMatrixTrain e = hg_fire(shifted, exp_cfg, ctx);

  SpikeMatrixTrain sums(e.steps(), e.rows(), 1);
  for (std::size_t t = 0; t < e.steps(); ++t) {
    const auto s = rowsum(e.values[t]);
    for (std::size_t r = 0; r < e.rows(); ++r) sums.values[t](r, 0) = s[r];
    charge(ctx, site + ".rowsum", e.event_count(t), e.levels);
  }
  const SpikeMatrixTrain inv = hg_fire(sums, inv_cfg, ctx);
  return spike_hadamard(e, inv, ctx, site + ".normalize");
}

// ---------------------------------------------------------------------------
// LayerNorm and FFN

SpikeMatrixTrain spike_layernorm(const SpikeMatrixTrain& xs, const Matrix& gamma,
                                 const Matrix& beta, const HGConfig& invsqrt_cfg,
                                 const HGConfig& square_cfg, const OATConfig& oat,
                                 SpikeContext* ctx, const std::string& site) {
  require_steps(xs, "spike_layernorm");
  const std::size_t rows = xs.rows();
  const std::size_t cols = xs.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || !beta.same_shape(gamma)) {
    throw ShapeError("spike_layernorm: gamma/beta must be 1 x d");
  }
  const double inv_n = 1.0 / static_cast<double>(cols);

  // Mean removal is linear, so it is applied step by step.
  SpikeMatrixTrain centred(xs.steps(), rows, cols);
  for (std::size_t t = 0; t < xs.steps(); ++t) {
    const Matrix x = xs.weighted(t);
    const auto s = rowsum(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) centred.values[t](r, c) = x(r, c) - s[r] * inv_n;
    charge(ctx, site + ".centre", 2 * nnz(x), xs.levels);
  }
  const SpikeMatrixTrain cs = oat_fire(centred, oat);

  const SpikeMatrixTrain sq = hg_fire(cs, square_cfg, ctx);
  SpikeMatrixTrain var(sq.steps(), rows, 1);
  for (std::size_t t = 0; t < sq.steps(); ++t) {
    const auto s = rowsum(sq.values[t]);
    for (std::size_t r = 0; r < rows; ++r) var.values[t](r, 0) = s[r] * inv_n;
    charge(ctx, site + ".variance", sq.event_count(t), sq.levels);
  }
  const SpikeMatrixTrain inv = hg_fire(var, invsqrt_cfg, ctx);
  const SpikeMatrixTrain normed = spike_hadamard(cs, inv, ctx, site + ".scale");

  SpikeMatrixTrain out(normed.steps(), rows, cols);
  for (std::size_t t = 0; t < normed.steps(); ++t) {
    out.values[t] = hadamard(normed.values[t], vstack(std::vector<Matrix>(rows, gamma)));
    charge(ctx, site + ".affine", normed.event_count(t), normed.levels);
  }
  return add_bias(out, beta);
}

SpikeMatrixTrain spike_ffn(const SpikeMatrixTrain& xs, const Matrix& w1, const Matrix& b1,
                           const Matrix& w2, const Matrix& b2, const HGConfig& act_cfg,
                           const OATConfig& oat, SpikeContext* ctx, const std::string& site) {
  const SpikeMatrixTrain x = oat_fire(xs, oat);
  const SpikeMatrixTrain h = add_bias(saw_mul(x, w1, ctx, site + ".w1"), b1);
  const SpikeMatrixTrain a = hg_fire(h, act_cfg, ctx);
  return add_bias(saw_mul(a, w2, ctx, site + ".w2"), b2);
}

SpikeMatrixTrain spike_gated_ffn(const SpikeMatrixTrain& xs, const Matrix& wg, const Matrix& bg,
                                 const Matrix& wu, const Matrix& bu, const Matrix& wd,
                                 const Matrix& bd, const HGConfig& act_cfg, const GatedOat& oat,
                                 SpikeContext* ctx, const std::string& site) {
  const SpikeMatrixTrain x = oat_fire(xs, oat.input);
  const SpikeMatrixTrain g = hg_fire(add_bias(saw_mul(x, wg, ctx, site + ".wg"), bg), act_cfg, ctx);
  const SpikeMatrixTrain u = oat_fire(add_bias(saw_mul(x, wu, ctx, site + ".wu"), bu), oat.up);
  const SpikeMatrixTrain z = oat_fire(spike_hadamard(u, g, ctx, site + ".gate"), oat.product);
  return add_bias(saw_mul(z, wd, ctx, site + ".wd"), bd);
}

// ---------------------------------------------------------------------------
// References and bounds

Matrix float_softmax(const Matrix& z) {
  const auto m = rowmax(z);
  Matrix out(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < z.cols(); ++c) sum += out(r, c) = std::exp(z(r, c) - m[r]);
    for (std::size_t c = 0; c < z.cols(); ++c) out(r, c) /= sum;
  }
  return out;
}

Matrix float_layernorm(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
  if (gamma.cols() != x.cols() || !beta.same_shape(gamma)) throw ShapeError("float_layernorm");
  Matrix out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (double v : x.row(r)) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x.row(r)) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kInvSqrtEpsilon);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      out(r, c) = gamma(0, c) * (x(r, c) - mean) * inv + beta(0, c);
    }
  }
  return out;
}

double softmax_error_bound(std::size_t n, double exp_err, double inv_err) {
  const double nn = static_cast<double>(n);
  const double s_min = 1.0 - nn * exp_err;
  if (!(s_min > 0.0)) return std::numeric_limits<double>::infinity();
  return exp_err * (1.0 / s_min + inv_err) + inv_err + nn * exp_err / s_min;
}

double layernorm_error_bound(const Matrix& x, const Matrix& gamma, double q, double square_err,
                             double invsqrt_err) {
  const double n = static_cast<double>(x.cols());
  const double gmax = max_abs(gamma);
  double worst = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (double v : x.row(r)) mean += v;
    mean /= n;
    double var = 0.0;
    double cmax = 0.0;
    for (double v : x.row(r)) {
      var += (v - mean) * (v - mean);
      cmax = std::max(cmax, std::abs(v - mean));
    }
    var /= n;
    const double dv = square_err + q * (2.0 * cmax + q);
    const double v_lo = std::max(var - dv, 0.0) + kInvSqrtEpsilon;
    const double inv = 1.0 / std::sqrt(var + kInvSqrtEpsilon);
    const double dr = invsqrt_err + 0.5 * std::pow(v_lo, -1.5) * dv;
    worst = std::max(worst, gmax * (q * (inv + dr) + cmax * dr));
  }
  return worst;
}

namespace {

double max_col_l1(const Matrix& w) {
  double m = 0.0;
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) s += std::abs(w(r, c));
    m = std::max(m, s);
  }
  return m;
}

}  // namespace

double ffn_error_bound(const Matrix& w1, const Matrix& w2, double q, double act_err,
                       double act_lipschitz) {
  const double dh = q * max_col_l1(w1);
  return max_col_l1(w2) * (act_err + act_lipschitz * dh);
}

double gated_ffn_error_bound(const Matrix& x, const Matrix& wg, const Matrix& bg, const Matrix& wu,
                             const Matrix& bu, const Matrix& wd, const GatedOat& oat,
                             double act_err, double act_lipschitz) {
  const double q_in = oat.input.quantization_bound();
  const double eg = act_err + act_lipschitz * q_in * max_col_l1(wg);
  const double eu = q_in * max_col_l1(wu) + oat.up.quantization_bound();
  const double g_max = max_abs(elementwise(add_row_vector(matmul(x, wg), bg), silu));
  const double u_max = max_abs(add_row_vector(matmul(x, wu), bu));
  const double ez = eu * (g_max + eg) + u_max * eg + oat.product.quantization_bound();
  return max_col_l1(wd) * ez;
}

}  // namespace las

#include "las/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "las/errors.hpp"
#include "las/random.hpp"
#include "las/spikeops.hpp"

namespace las {

namespace {

constexpr double kMaskValue = -1e9;

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

void record(const ForwardProbe* p, const std::string& site, const Matrix& m) {
  if (p != nullptr && p->record) p->record(site, m);
}

void charge_flops(const ForwardProbe* p, const std::string& site, std::uint64_t n) {
  if (p != nullptr && p->flops != nullptr) p->flops->record_flop("float." + site, n);
}

std::uint64_t u64(std::size_t n) { return static_cast<std::uint64_t>(n); }

// FNV-1a: stable across platforms, unlike std::hash.
std::uint64_t site_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Matrix causal_mask(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = r + 1; c < n; ++c) m(r, c) = kMaskValue;
  return m;
}

void check_sequences(const ModelConfig& c, const Matrix& x) {
  if (x.empty() || x.cols() != c.d_model || x.rows() % c.seq_len != 0) {
    throw ShapeError("input must be k*" + std::to_string(c.seq_len) + " x " +
                     std::to_string(c.d_model) + ", got " + std::to_string(x.rows()) + " x " +
                     std::to_string(x.cols()));
  }
}

// ---------------------------------------------------------------------------
// Float path

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b, const ForwardProbe* p,
              const std::string& site) {
  if (p != nullptr && p->flops != nullptr) {
    record_matmul(*p->flops, "float." + site, x.rows(), x.cols(), w.cols());
  }
  charge_flops(p, site, u64(x.rows() * w.cols()) * flop_cost("add"));
  return add_row_vector(matmul(x, w), b);
}

Matrix float_ln(const Matrix& x, const Matrix& gamma, const Matrix& beta, const ForwardProbe* p,
                const std::string& site) {
  const std::size_t n = x.cols();
  Matrix centred(x.rows(), n);
  Matrix var(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (double v : x.row(r)) mean += v;
    mean /= static_cast<double>(n);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      centred(r, c) = x(r, c) - mean;
      s += centred(r, c) * centred(r, c);
    }
    var(r, 0) = s / static_cast<double>(n);
  }
  record(p, site + ".centre", centred);
  record(p, site + ".square", centred);
  record(p, site + ".invsqrt", var);
  // mean, centring, squares, scale, affine: 5 per element; one sqrt and divide per row.
  charge_flops(p, site, u64(x.rows()) * (u64(5 * n) * flop_cost("mac") + flop_cost("sqrt") +
                                         flop_cost("div")));
  return float_layernorm(x, gamma, beta);
}

Matrix float_attention(const ModelConfig& c, const WeightSet& w, const Matrix& a,
                       const std::string& pre, const ForwardProbe* p) {
  const std::size_t s = a.rows();
  const std::size_t dk = c.head_dim();
  record(p, pre + "attn.in", a);
  const Matrix q = linear(a, w.get(pre + "wq"), w.get(pre + "bq"), p, pre + "attn.wq");
  const Matrix k = linear(a, w.get(pre + "wk"), w.get(pre + "bk"), p, pre + "attn.wk");
  const Matrix v = linear(a, w.get(pre + "wv"), w.get(pre + "bv"), p, pre + "attn.wv");
  record(p, pre + "attn.q", q);
  record(p, pre + "attn.k", k);
  record(p, pre + "attn.v", v);
  const Matrix mask = c.causal ? causal_mask(s) : Matrix(s, s);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix concat(s, c.d_model);
  std::vector<double> shifted;
  Matrix sums(s, c.n_heads);
  std::vector<Matrix> probs;
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const Matrix qh = slice_cols(q, h * dk, dk);
    const Matrix kh = slice_cols(k, h * dk, dk);
    const Matrix vh = slice_cols(v, h * dk, dk);
    const Matrix z = add(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), mask);
    const auto m = rowmax(z);
    for (std::size_t r = 0; r < s; ++r) {
      double sum = 0.0;
      for (std::size_t col = 0; col < s; ++col) {
        if (mask(r, col) != 0.0) continue;
        shifted.push_back(z(r, col) - m[r]);
        sum += std::exp(z(r, col) - m[r]);
      }
      sums(r, h) = sum;
    }
    const Matrix pr = float_softmax(z);
    probs.push_back(pr);
    set_cols(concat, h * dk, matmul(pr, vh));
  }
  record(p, pre + "attn.exp", Matrix(1, shifted.size(), shifted));
  record(p, pre + "attn.reciprocal", sums);
  record(p, pre + "attn.probs", vstack(probs));
  record(p, pre + "attn.out", concat);
  const std::uint64_t scores = u64(c.n_heads * s * s);
  charge_flops(p, pre + "attn.scores", scores * u64(dk + 1) * flop_cost("mac"));
  charge_flops(p, pre + "attn.softmax",
               scores * (flop_cost("exp") + flop_cost("add") + flop_cost("mac")) +
                   u64(c.n_heads * s) * flop_cost("div"));
  charge_flops(p, pre + "attn.pv", scores * u64(dk) * flop_cost("mac"));
  return linear(concat, w.get(pre + "wo"), w.get(pre + "bo"), p, pre + "attn.wo");
}

Matrix float_ffn(const ModelConfig& c, const WeightSet& w, const Matrix& b, const std::string& pre,
                 const ForwardProbe* p) {
  record(p, pre + "ffn.in", b);
  if (c.ffn_kind == FfnKind::standard) {
    const Matrix hdn = linear(b, w.get(pre + "w1"), w.get(pre + "b1"), p, pre + "ffn.w1");
    record(p, pre + "ffn.act", hdn);
    charge_flops(p, pre + "ffn.act", u64(hdn.size()) * flop_cost("gelu"));
    return linear(elementwise(hdn, gelu), w.get(pre + "w2"), w.get(pre + "b2"), p, pre + "ffn.w2");
  }
  const Matrix g = linear(b, w.get(pre + "wg"), w.get(pre + "bg"), p, pre + "ffn.wg");
  const Matrix u = linear(b, w.get(pre + "wu"), w.get(pre + "bu"), p, pre + "ffn.wu");
  record(p, pre + "ffn.act", g);
  record(p, pre + "ffn.up", u);
  charge_flops(p, pre + "ffn.act", u64(g.size()) * flop_cost("silu"));
  charge_flops(p, pre + "ffn.gate", u64(g.size()) * flop_cost("mac"));
  const Matrix z = hadamard(u, elementwise(g, silu));
  record(p, pre + "ffn.product", z);
  return linear(z, w.get(pre + "wd"), w.get(pre + "bd"), p, pre + "ffn.wd");
}

Matrix float_sequence(const ModelConfig& c, const WeightSet& w, const Matrix& x,
                      const ForwardProbe* p, std::vector<Matrix>* layers) {
  Matrix h = x;
  record(p, layer_prefix(0) + "input", x);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = layer_prefix(l);
    const Matrix a = float_ln(h, w.get(pre + "ln1_gamma"), w.get(pre + "ln1_beta"), p, pre + "ln1");
    const Matrix h2 = add(h, float_attention(c, w, a, pre, p));
    const Matrix b = float_ln(h2, w.get(pre + "ln2_gamma"), w.get(pre + "ln2_beta"), p, pre + "ln2");
    h = add(h2, float_ffn(c, w, b, pre, p));
    charge_flops(p, pre + "residual", 2 * u64(h.size()) * flop_cost("add"));
    if (layers != nullptr) layers->push_back(h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Spike path

SpikeMatrixTrain slice_cols_train(const SpikeMatrixTrain& s, std::size_t begin, std::size_t count) {
  SpikeMatrixTrain out = s;
  for (auto& m : out.values) m = slice_cols(m, begin, count);
  return out;
}

SpikeMatrixTrain transpose_train(const SpikeMatrixTrain& s) {
  SpikeMatrixTrain out = s;
  for (auto& m : out.values) m = transpose(m);
  return out;
}

void guard(const SpikeMatrixTrain& s, const std::string& site) {
  for (std::size_t t = 0; t < s.steps(); ++t) {
    if (!all_finite(s.values[t])) {
      throw NumericError(site, t + 1,
                         "non-finite value on the spike path at " + site + ", step " +
                             std::to_string(t + 1));
    }
  }
}

struct SpikeSites {
  const ConvertedBlock& block;
  const SpikeOptions& options;

  OATConfig oat(const std::string& site) const {
    const auto it = block.oat.find(site);
    if (it == block.oat.end()) throw ConfigError("converted block lacks OAT site " + site);
    OATConfig c = it->second;
    c.steps = options.steps;
    if (options.levels) c.levels = *options.levels;
    if (options.encoding == Encoding::single_mt) c = single_mt_equivalent(c);
    c.validate();
    return c;
  }

  const HGConfig& hg(const std::string& site) const {
    const auto it = block.hg.find(site);
    if (it == block.hg.end()) throw ConfigError("converted block lacks HG site " + site);
    return it->second;
  }
};

SpikeMatrixTrain spike_attention(const SpikeSites& sites, const SpikeMatrixTrain& a,
                                 const std::string& pre, SpikeContext& ctx) {
  const ModelConfig& c = sites.block.config;
  const WeightSet& w = sites.block.weights;
  const std::size_t s = a.rows();
  const std::size_t dk = c.head_dim();

  const SpikeMatrixTrain in = oat_fire(a, sites.oat(pre + "attn.in"));
  auto project = [&](const char* wn, const char* bn, const std::string& site) {
    auto out = add_bias(saw_mul(in, w.get(pre + wn), &ctx, site), w.get(pre + bn));
    guard(out, site);
    return out;
  };
  const SpikeMatrixTrain q = oat_fire(project("wq", "bq", pre + "attn.wq"), sites.oat(pre + "attn.q"));
  const SpikeMatrixTrain k = oat_fire(project("wk", "bk", pre + "attn.wk"), sites.oat(pre + "attn.k"));
  const SpikeMatrixTrain v = oat_fire(project("wv", "bv", pre + "attn.wv"), sites.oat(pre + "attn.v"));
  const Matrix mask = c.causal ? causal_mask(s) : Matrix();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<SpikeMatrixTrain> heads;
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const SpikeMatrixTrain qh = scale_train(slice_cols_train(q, h * dk, dk), inv_sqrt_dk);
    const SpikeMatrixTrain kt = transpose_train(slice_cols_train(k, h * dk, dk));
    const SpikeMatrixTrain z = saa_mul(qh, kt, &ctx, pre + "attn.scores");
    guard(z, pre + "attn.scores");
    const SpikeMatrixTrain pr = spike_softmax(z, sites.hg(pre + "attn.exp"),
                                              sites.hg(pre + "attn.reciprocal"), &ctx, mask,
                                              pre + "attn.softmax");
    guard(pr, pre + "attn.softmax");
    const SpikeMatrixTrain ps = oat_fire(pr, sites.oat(pre + "attn.probs"));
    const SpikeMatrixTrain vh = slice_cols_train(v, h * dk, dk);
    const std::size_t steps = std::max(ps.steps(), vh.steps());
    heads.push_back(saa_mul(pad_steps(ps, steps), pad_steps(vh, steps), &ctx, pre + "attn.pv"));
  }
  std::size_t steps = 0;
  for (const auto& hd : heads) steps = std::max(steps, hd.steps());
  SpikeMatrixTrain concat(steps, s, c.d_model);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const SpikeMatrixTrain hd = pad_steps(heads[h], steps);
    for (std::size_t t = 0; t < steps; ++t) set_cols(concat.values[t], h * dk, hd.weighted(t));
  }
  guard(concat, pre + "attn.pv");
  const SpikeMatrixTrain os = oat_fire(concat, sites.oat(pre + "attn.out"));
  auto out = add_bias(saw_mul(os, w.get(pre + "wo"), &ctx, pre + "attn.wo"), w.get(pre + "bo"));
  guard(out, pre + "attn.wo");
  return out;
}

SpikeMatrixTrain spike_sequence(const SpikeSites& sites, const Matrix& x, SpikeContext& ctx,
                                std::vector<Matrix>& layers) {
  const ModelConfig& c = sites.block.config;
  const WeightSet& w = sites.block.weights;
  SpikeMatrixTrain h =
      oat_fire(SpikeMatrixTrain::impulse(x, 1), sites.oat(layer_prefix(0) + "input"));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = layer_prefix(l);
    const SpikeMatrixTrain a =
        spike_layernorm(h, w.get(pre + "ln1_gamma"), w.get(pre + "ln1_beta"),
                        sites.hg(pre + "ln1.invsqrt"), sites.hg(pre + "ln1.square"),
                        sites.oat(pre + "ln1.centre"), &ctx, pre + "ln1");
    guard(a, pre + "ln1");
    const SpikeMatrixTrain h2 = add_trains(h, spike_attention(sites, a, pre, ctx));
    const SpikeMatrixTrain b =
        spike_layernorm(h2, w.get(pre + "ln2_gamma"), w.get(pre + "ln2_beta"),
                        sites.hg(pre + "ln2.invsqrt"), sites.hg(pre + "ln2.square"),
                        sites.oat(pre + "ln2.centre"), &ctx, pre + "ln2");
    guard(b, pre + "ln2");
    SpikeMatrixTrain f;
    if (c.ffn_kind == FfnKind::standard) {
      f = spike_ffn(b, w.get(pre + "w1"), w.get(pre + "b1"), w.get(pre + "w2"), w.get(pre + "b2"),
                    sites.hg(pre + "ffn.act"), sites.oat(pre + "ffn.in"), &ctx, pre + "ffn");
    } else {
      const GatedOat oat{sites.oat(pre + "ffn.in"), sites.oat(pre + "ffn.up"),
                         sites.oat(pre + "ffn.product")};
      f = spike_gated_ffn(b, w.get(pre + "wg"), w.get(pre + "bg"), w.get(pre + "wu"),
                          w.get(pre + "bu"), w.get(pre + "wd"), w.get(pre + "bd"),
                          sites.hg(pre + "ffn.act"), oat, &ctx, pre + "ffn");
    }
    guard(f, pre + "ffn");
    h = add_trains(h2, f);
    layers.push_back(h.decode());
  }
  return h;
}

// ---------------------------------------------------------------------------
// Binary IO helpers

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("weights file truncated reading ") + what + ": expected " +
                        std::to_string(n) + " more bytes, found " +
                        std::to_string(bytes_.size() - pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(bits);
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << data;
  if (!out) throw InputError("failed writing " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_ff == 0 || seq_len == 0) {
    throw ConfigError("model dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (n_layers < 1 || n_layers > 4) throw ConfigError("n_layers must be in [1, 4]");
  if (T < 1 || H < 1) throw ConfigError("T and H must be >= 1");
  if (N_per_nonlinearity < 1) throw ConfigError("N_per_nonlinearity must be >= 1");
  if (fit_samples < 64) throw ConfigError("fit_samples must be >= 64");
  if (!(normal_quantile > 0.0 && normal_quantile < 1.0)) {
    throw ConfigError("normal_quantile must lie in (0, 1)");
  }
  if (!(hierarchy_margin >= 0.0)) throw ConfigError("hierarchy_margin must be >= 0");
  if (!(hierarchy_uniform_mix >= 0.0 && hierarchy_uniform_mix <= 1.0)) {
    throw ConfigError("hierarchy_uniform_mix must lie in [0, 1]");
  }
  if (calibration.sequences < 1) throw ConfigError("calibration.sequences must be >= 1");
  if (!(calibration.outlier_fraction >= 0.0 && calibration.outlier_fraction <= 1.0)) {
    throw ConfigError("calibration.outlier_fraction must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"d_model", c.d_model},
      {"n_heads", c.n_heads},
      {"d_ff", c.d_ff},
      {"seq_len", c.seq_len},
      {"n_layers", c.n_layers},
      {"ffn_kind", c.ffn_kind == FfnKind::standard ? "standard" : "gated"},
      {"causal", c.causal},
      {"T", c.T},
      {"H", c.H},
      {"N_per_nonlinearity", c.N_per_nonlinearity},
      {"fit_samples", c.fit_samples},
      {"normal_quantile", c.normal_quantile},
      {"hierarchy_margin", c.hierarchy_margin},
      {"hierarchy_uniform_mix", c.hierarchy_uniform_mix},
      {"seeds",
       {{"weights", c.seeds.weights},
        {"calibration", c.seeds.calibration},
        {"fit", c.seeds.fit},
        {"input", c.seeds.input}}},
      {"calibration",
       {{"scale", c.calibration.scale},
        {"outlier_fraction", c.calibration.outlier_fraction},
        {"outlier_scale", c.calibration.outlier_scale},
        {"sequences", c.calibration.sequences}}},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.n_layers = j.value("n_layers", d.n_layers);
  const std::string kind = j.value("ffn_kind", std::string("standard"));
  if (kind == "standard") {
    c.ffn_kind = FfnKind::standard;
  } else if (kind == "gated") {
    c.ffn_kind = FfnKind::gated;
  } else {
    throw ConfigError("ffn_kind must be 'standard' or 'gated', got '" + kind + "'");
  }
  c.causal = j.value("causal", d.causal);
  c.T = j.value("T", d.T);
  c.H = j.value("H", d.H);
  c.N_per_nonlinearity = j.value("N_per_nonlinearity", d.N_per_nonlinearity);
  c.fit_samples = j.value("fit_samples", d.fit_samples);
  c.normal_quantile = j.value("normal_quantile", d.normal_quantile);
  c.hierarchy_margin = j.value("hierarchy_margin", d.hierarchy_margin);
  c.hierarchy_uniform_mix = j.value("hierarchy_uniform_mix", d.hierarchy_uniform_mix);
  c.seeds = d.seeds;
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    c.seeds.weights = s.value("weights", d.seeds.weights);
    c.seeds.calibration = s.value("calibration", d.seeds.calibration);
    c.seeds.fit = s.value("fit", d.seeds.fit);
    c.seeds.input = s.value("input", d.seeds.input);
  }
  c.calibration = d.calibration;
  if (j.contains("calibration")) {
    const auto& s = j.at("calibration");
    c.calibration.scale = s.value("scale", d.calibration.scale);
    c.calibration.outlier_fraction = s.value("outlier_fraction", d.calibration.outlier_fraction);
    c.calibration.outlier_scale = s.value("outlier_scale", d.calibration.outlier_scale);
    c.calibration.sequences = s.value("sequences", d.calibration.sequences);
  }
  c.validate();
}

// ---------------------------------------------------------------------------
// Weights

const Matrix& WeightSet::get(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ShapeError("weight set lacks tensor " + name);
  return it->second;
}

std::map<std::string, std::pair<std::size_t, std::size_t>> weight_shapes(const ModelConfig& c) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> s;
  const std::size_t d = c.d_model;
  const std::size_t f = c.d_ff;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* n : {"wq", "wk", "wv", "wo"}) s[p + n] = {d, d};
    for (const char* n : {"bq", "bk", "bv", "bo"}) s[p + n] = {1, d};
    for (const char* n : {"ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"}) s[p + n] = {1, d};
    if (c.ffn_kind == FfnKind::standard) {
      s[p + "w1"] = {d, f};
      s[p + "b1"] = {1, f};
      s[p + "w2"] = {f, d};
      s[p + "b2"] = {1, d};
    } else {
      s[p + "wg"] = {d, f};
      s[p + "bg"] = {1, f};
      s[p + "wu"] = {d, f};
      s[p + "bu"] = {1, f};
      s[p + "wd"] = {f, d};
      s[p + "bd"] = {1, d};
    }
  }
  return s;
}

void validate_weights(const ModelConfig& c, const WeightSet& w) {
  for (const auto& [name, shape] : weight_shapes(c)) {
    const Matrix& m = w.get(name);
    if (m.rows() != shape.first || m.cols() != shape.second) {
      throw ShapeError(name + " must be " + std::to_string(shape.first) + " x " +
                       std::to_string(shape.second) + ", got " + std::to_string(m.rows()) +
                       " x " + std::to_string(m.cols()));
    }
    if (!all_finite(m)) throw InputError(name + " has non-finite entries");
  }
}

WeightSet random_weights(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  WeightSet w;
  for (const auto& [name, shape] : weight_shapes(c)) {
    const auto [rows, cols] = shape;
    if (name.ends_with("gamma")) {
      w.set(name, Matrix(rows, cols, 1.0));
    } else if (rows == 1) {
      w.set(name, Matrix(rows, cols, 0.0));
    } else {
      w.set(name, random_normal(rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)), rng));
    }
  }
  return w;
}

Matrix sample_inputs(const ModelConfig& c, const InputDistribution& dist, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(dist.sequences * c.seq_len, c.d_model);
  for (double& v : x.data()) {
    v = dist.scale * rng.normal();
    if (rng.uniform() < dist.outlier_fraction) {
      v = rng.uniform() < 0.5 ? -dist.outlier_scale : dist.outlier_scale;
    }
  }
  return x;
}

Matrix float_forward(const ModelConfig& c, const WeightSet& w, const Matrix& x,
                     const ForwardProbe* probe) {
  check_sequences(c, x);
  std::vector<Matrix> outputs;
  std::vector<std::vector<Matrix>> layers(c.n_layers);
  for (std::size_t s = 0; s < x.rows() / c.seq_len; ++s) {
    std::vector<Matrix> per_layer;
    outputs.push_back(float_sequence(c, w, slice_rows(x, s * c.seq_len, c.seq_len), probe,
                                     probe != nullptr && probe->layer_outputs ? &per_layer : nullptr));
    for (std::size_t l = 0; l < per_layer.size(); ++l) layers[l].push_back(per_layer[l]);
  }
  if (probe != nullptr && probe->layer_outputs != nullptr) {
    probe->layer_outputs->clear();
    for (const auto& l : layers) probe->layer_outputs->push_back(vstack(l));
  }
  return vstack(outputs);
}

// ---------------------------------------------------------------------------
// Conversion

std::vector<std::string> oat_sites(const ModelConfig& c, std::size_t layer) {
  const std::string p = layer_prefix(layer);
  std::vector<std::string> s;
  if (layer == 0) s.push_back(p + "input");
  for (const char* n : {"ln1.centre", "attn.in", "attn.q", "attn.k", "attn.v", "attn.probs",
                        "attn.out", "ln2.centre", "ffn.in"}) {
    s.push_back(p + n);
  }
  if (c.ffn_kind == FfnKind::gated) {
    s.push_back(p + "ffn.up");
    s.push_back(p + "ffn.product");
  }
  return s;
}

std::vector<std::string> hg_sites(const ModelConfig&, std::size_t layer) {
  const std::string p = layer_prefix(layer);
  std::vector<std::string> s;
  for (const char* n : {"ln1.square", "ln1.invsqrt", "attn.exp", "attn.reciprocal", "ln2.square",
                        "ln2.invsqrt", "ffn.act"}) {
    s.push_back(p + n);
  }
  return s;
}

std::string hg_target(const ModelConfig& c, const std::string& site) {
  if (site.ends_with(".square")) return "square";
  if (site.ends_with(".invsqrt")) return "invsqrt";
  if (site.ends_with(".exp")) return "exp";
  if (site.ends_with(".reciprocal")) return "reciprocal";
  if (site.ends_with(".act")) return c.ffn_kind == FfnKind::standard ? "gelu" : "silu";
  throw ConfigError("no nonlinearity at site " + site);
}

ConvertedBlock convert(const ModelConfig& c, const WeightSet& w, const Matrix& calib_sample) {
  c.validate();
  validate_weights(c, w);
  if (calib_sample.empty()) throw EmptyInputError("calibration sample is empty");

  std::map<std::string, std::vector<double>> seen;
  ForwardProbe probe;
  probe.record = [&](const std::string& site, const Matrix& m) {
    auto& v = seen[site];
    v.insert(v.end(), m.data().begin(), m.data().end());
  };
  float_forward(c, w, calib_sample, &probe);

  ConvertedBlock b;
  b.config = c;
  b.weights = w;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (const auto& site : oat_sites(c, l)) {
      const auto& v = seen.at(site);
      const auto th = select_oat_thresholds(Matrix(1, v.size(), v), c.normal_quantile);
      for (const auto& msg : th.warnings) b.warnings.push_back(site + ": " + msg);
      b.oat[site] = th.config(c.H, c.T);
    }
    for (const auto& site : hg_sites(c, l)) {
      const auto& v = seen.at(site);
      if (v.empty()) throw EmptyInputError("no calibration activations at " + site);
      const TargetFunction target = target_by_name(hg_target(c, site));
      HierarchyOptions opts{c.hierarchy_margin, c.hierarchy_margin, c.hierarchy_uniform_mix};
      // Shifted logits never exceed 0; row sums of exponentials lie in [1, seq_len].
      if (target.name == "exp") opts.margin_hi = 0.0;
      if (target.name == "reciprocal") opts.margin_lo = opts.margin_hi = 0.02;
      Hierarchy hier = select_hierarchy(v, c.N_per_nonlinearity, opts);
      fit_to_domain(hier, target, *std::min_element(v.begin(), v.end()));
      HgFit fit;
      try {
        fit = fit_hg(target, hier, c.T, c.fit_samples, mix_seed(c.seeds.fit, site_hash(site)));
      } catch (const FitError& e) {
        throw FitError(site + ": " + e.what());
      }
      for (const auto& msg : fit.report.warnings) b.warnings.push_back(site + ": " + msg);
      b.hg[site] = std::move(fit.config);
      b.reports[site] = std::move(fit.report);
    }
  }
  return b;
}

OATConfig single_mt_equivalent(const OATConfig& c) {
  OATConfig out = c;
  out.theta_nor = c.theta_out * (1.0 - 1e-9);
  return out;
}

SpikeRun spike_forward(const ConvertedBlock& block, const Matrix& x, const SpikeOptions& options) {
  const ModelConfig& c = block.config;
  if (options.steps < 1) throw ConfigError("spike_forward: T must be >= 1");
  check_sequences(c, x);

  SpikeRun run;
  run.trace.ledger = EnergyLedger(options.sop_rule);
  std::vector<Matrix> float_layers;
  ForwardProbe probe;
  probe.flops = &run.trace.ledger;
  probe.layer_outputs = &float_layers;
  run.reference = float_forward(c, block.weights, x, &probe);

  const SpikeSites sites{block, options};
  SpikeContext ctx{&run.trace.ledger, 0};
  const std::size_t n_seq = x.rows() / c.seq_len;
  std::vector<Matrix> outputs;
  std::vector<double> layer_err(c.n_layers, 0.0);
  for (std::size_t s = 0; s < n_seq; ++s) {
    std::vector<Matrix> layers;
    const Matrix out =
        spike_sequence(sites, slice_rows(x, s * c.seq_len, c.seq_len), ctx, layers).decode();
    const Matrix ref = slice_rows(run.reference, s * c.seq_len, c.seq_len);
    run.trace.sequence_rel_err.push_back(relative_error(out, ref));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      layer_err[l] += relative_error(layers[l], slice_rows(float_layers[l], s * c.seq_len, c.seq_len));
    }
    outputs.push_back(out);
  }
  run.output = vstack(outputs);
  double sum = 0.0;
  for (double e : run.trace.sequence_rel_err) sum += e;
  run.trace.mean_rel_err = sum / static_cast<double>(n_seq);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    run.trace.layers.push_back({"layer" + std::to_string(l), layer_err[l] / static_cast<double>(n_seq)});
  }
  run.trace.clamped = ctx.clamped;
  return run;
}

// ---------------------------------------------------------------------------
// IO

std::vector<std::uint8_t> encode_weights(const WeightSet& w) {
  std::vector<std::uint8_t> out{'L', 'A', 'S', 'W'};
  put_u32(out, kWeightsVersion);
  put_u32(out, static_cast<std::uint32_t>(w.tensors().size()));
  for (const auto& [name, m] : w.tensors()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (double v : m.data()) put_f64(out, v);
  }
  return out;
}

WeightSet decode_weights(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (magic != "LASW") throw FormatError("bad magic: expected 'LASW', found '" + magic + "'");
  const std::uint32_t version = r.u32("version");
  if (version != kWeightsVersion) {
    throw FormatError("unsupported version: expected " + std::to_string(kWeightsVersion) +
                      ", found " + std::to_string(version));
  }
  const std::uint32_t count = r.u32("tensor count");
  WeightSet w;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32("name length"), "name");
    const std::uint32_t rows = r.u32("rows");
    const std::uint32_t cols = r.u32("cols");
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    r.need(8 * n, "payload");
    std::vector<double> data(n);
    for (double& v : data) v = r.f64();
    Matrix m(rows, cols, std::move(data));
    if (!all_finite(m)) throw FormatError("tensor " + name + " has non-finite entries");
    w.set(name, std::move(m));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");
  return w;
}

void save_weights(const std::filesystem::path& path, const WeightSet& w) {
  const auto bytes = encode_weights(w);
  write_file(path, std::string(bytes.begin(), bytes.end()));
}

WeightSet load_weights(const std::filesystem::path& path) { return decode_weights(read_file(path)); }

void save_config(const std::filesystem::path& path, const ModelConfig& c) {
  write_file(path, nlohmann::json(c).dump(2) + "\n");
}

ModelConfig load_config(const std::filesystem::path& path) {
  try {
    return read_json(path).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

nlohmann::json block_json(const ConvertedBlock& b, const std::string& weights_file) {
  nlohmann::json oat = nlohmann::json::object();
  for (const auto& [site, cfg] : b.oat) oat[site] = cfg;
  nlohmann::json hg = nlohmann::json::object();
  for (const auto& [site, cfg] : b.hg) hg[site] = cfg;
  nlohmann::json reports = nlohmann::json::object();
  for (const auto& [site, r] : b.reports) reports[site] = r;
  return nlohmann::json{{"format", "las-block"},
                        {"version", 1},
                        {"config", b.config},
                        {"weights", weights_file},
                        {"oat", oat},
                        {"hg", hg},
                        {"reports", reports},
                        {"warnings", b.warnings}};
}

void save_block(const std::filesystem::path& path, const ConvertedBlock& b) {
  std::filesystem::path weights = path;
  weights.replace_extension(".lasw");
  save_weights(weights, b.weights);
  write_file(path, block_json(b, weights.filename().string()).dump(2) + "\n");
}

ConvertedBlock load_block(const std::filesystem::path& path) {
  const nlohmann::json j = read_json(path);
  try {
    if (j.value("format", std::string()) != "las-block") {
      throw FormatError(path.string() + ": expected format 'las-block', found '" +
                        j.value("format", std::string()) + "'");
    }
    if (j.value("version", 0) != 1) {
      throw FormatError(path.string() + ": expected version 1, found " +
                        std::to_string(j.value("version", 0)));
    }
    ConvertedBlock b;
    b.config = j.at("config").get<ModelConfig>();
    b.weights = load_weights(path.parent_path() / j.at("weights").get<std::string>());
    validate_weights(b.config, b.weights);
    for (const auto& [site, cfg] : j.at("oat").items()) b.oat[site] = cfg.get<OATConfig>();
    for (const auto& [site, cfg] : j.at("hg").items()) b.hg[site] = cfg.get<HGConfig>();
    for (const auto& [site, r] : j.at("reports").items()) {
      b.reports[site] = r.get<CalibrationReport>();
    }
    if (j.contains("warnings")) j.at("warnings").get_to(b.warnings);
    for (std::size_t l = 0; l < b.config.n_layers; ++l) {
      for (const auto& s : oat_sites(b.config, l)) {
        if (!b.oat.count(s)) throw FormatError(path.string() + ": missing OAT site " + s);
      }
      for (const auto& s : hg_sites(b.config, l)) {
        if (!b.hg.count(s)) throw FormatError(path.string() + ": missing HG site " + s);
      }
    }
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace las

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "las/errors.hpp"
#include "las/model.hpp"
#include "las/random.hpp"
#include "las/spikeops.hpp"

using namespace las;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(FfnKind kind = FfnKind::standard) {
  ModelConfig c;
  c.N_per_nonlinearity = 8;
  c.fit_samples = 256;
  c.ffn_kind = kind;
  return c;
}

struct Toy {
  ModelConfig config;
  WeightSet weights;
  ConvertedBlock block;
  Matrix input;
};

Toy make_toy(FfnKind kind) {
  Toy t;
  t.config = small_config(kind);
  t.weights = random_weights(t.config, t.config.seeds.weights);
  t.block = convert(t.config, t.weights,
                    sample_inputs(t.config, t.config.calibration, t.config.seeds.calibration));
  InputDistribution d = t.config.calibration;
  d.sequences = 2;
  t.input = sample_inputs(t.config, d, t.config.seeds.input);
  return t;
}

const Toy& toy() {
  static const Toy t = make_toy(FfnKind::standard);
  return t;
}

fs::path temp_dir() {
  const fs::path p = fs::temp_directory_path() / ("las_test_model_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Second, loop-level implementation of the pre-LN block (standard FFN).
using Rows = std::vector<std::vector<double>>;

Rows to_rows(const Matrix& m) {
  Rows r(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
  return r;
}

Rows affine(const Rows& x, const Matrix& w, const Matrix& b) {
  Rows out(x.size(), std::vector<double>(w.cols(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double s = b(0, j);
      for (std::size_t k = 0; k < w.rows(); ++k) s += x[i][k] * w(k, j);
      out[i][j] = s;
    }
  return out;
}

Rows norm(const Rows& x, const Matrix& g, const Matrix& b) {
  Rows out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mu = 0.0;
    for (double v : x[i]) mu += v / n;
    double var = 0.0;
    for (double v : x[i]) var += (v - mu) * (v - mu) / n;
    for (std::size_t j = 0; j < x[i].size(); ++j)
      out[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g(0, j) + b(0, j);
  }
  return out;
}

Rows oracle_block(const ModelConfig& c, const WeightSet& w, const Rows& x) {
  const std::string p = "layer0.";
  const std::size_t s = x.size();
  const std::size_t dk = c.d_model / c.n_heads;
  const Rows a = norm(x, w.get(p + "ln1_gamma"), w.get(p + "ln1_beta"));
  const Rows q = affine(a, w.get(p + "wq"), w.get(p + "bq"));
  const Rows k = affine(a, w.get(p + "wk"), w.get(p + "bk"));
  const Rows v = affine(a, w.get(p + "wv"), w.get(p + "bv"));
  Rows heads(s, std::vector<double>(c.d_model, 0.0));
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<double> score(s);
      double top = -INFINITY;
      for (std::size_t j = 0; j < s; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dk; ++d) dot += q[i][h * dk + d] * k[j][h * dk + d];
        score[j] = dot / std::sqrt(static_cast<double>(dk));
        top = std::max(top, score[j]);
      }
      double z = 0.0;
      for (double& sc : score) z += (sc = std::exp(sc - top));
      for (std::size_t j = 0; j < s; ++j)
        for (std::size_t d = 0; d < dk; ++d) heads[i][h * dk + d] += score[j] / z * v[j][h * dk + d];
    }
  }
  Rows h2 = affine(heads, w.get(p + "wo"), w.get(p + "bo"));
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < c.d_model; ++j) h2[i][j] += x[i][j];
  Rows hidden = affine(norm(h2, w.get(p + "ln2_gamma"), w.get(p + "ln2_beta")), w.get(p + "w1"),
                       w.get(p + "b1"));
  for (auto& row : hidden)
    for (double& u : row) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
  Rows out = affine(hidden, w.get(p + "w2"), w.get(p + "b2"));
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < c.d_model; ++j) out[i][j] += h2[i][j];
  return out;
}

WeightSet with_random_biases(const ModelConfig& c, std::uint64_t seed) {
  WeightSet w = random_weights(c, seed);
  Rng rng(seed + 100);
  for (const auto& [name, m] : w.tensors()) {
    if (m.rows() == 1) w.set(name, random_normal(1, m.cols(), 0.2, rng));
  }
  return w;
}

}  // namespace

TEST_CASE("config validation and json") {
  ModelConfig c;
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.n_layers = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(FfnKind::gated);
  c.seeds = Seeds::from_base(40);
  const nlohmann::json j = c;
  for (const char* key : {"d_model", "n_heads", "d_ff", "seq_len", "ffn_kind", "T", "H",
                          "N_per_nonlinearity", "seeds", "calibration"})
    CHECK(j.contains(key));
  CHECK(j.get<ModelConfig>() == c);
  nlohmann::json bad = j;
  bad["ffn_kind"] = "moe";
  CHECK_THROWS_AS(bad.get<ModelConfig>(), ConfigError);
}

TEST_CASE("weights are checked against the config") {
  const ModelConfig c;
  WeightSet w = random_weights(c, 1);
  validate_weights(c, w);
  for (const auto& [name, shape] : weight_shapes(c)) {
    CHECK(w.get(name).rows() == shape.first);
    CHECK(w.get(name).cols() == shape.second);
  }
  w.set("layer0.wq", Matrix(3, 3));
  CHECK_THROWS_AS(validate_weights(c, w), ShapeError);
  CHECK_THROWS_AS(w.get("layer0.nope"), ShapeError);
}

TEST_CASE("float forward with zero weights is the identity") {
  const ModelConfig c;
  WeightSet w = random_weights(c, 2);
  for (const auto& [name, m] : w.tensors())
    if (!name.ends_with("gamma")) w.set(name, Matrix(m.rows(), m.cols()));
  Rng rng(3);
  const Matrix x = random_normal(16, 32, 1.0, rng);
  CHECK(float_forward(c, w, x) == x);
}

TEST_CASE("float forward with a single position and head") {
  ModelConfig c;
  c.n_heads = 1;
  c.seq_len = 1;
  const WeightSet w = with_random_biases(c, 4);
  Rng rng(5);
  const Matrix x = random_normal(1, 32, 1.0, rng);
  const std::string p = "layer0.";
  const Matrix a = float_layernorm(x, w.get(p + "ln1_gamma"), w.get(p + "ln1_beta"));
  const Matrix v = add_row_vector(matmul(a, w.get(p + "wv")), w.get(p + "bv"));
  const Matrix h2 = add(x, add_row_vector(matmul(v, w.get(p + "wo")), w.get(p + "bo")));
  const Matrix b = float_layernorm(h2, w.get(p + "ln2_gamma"), w.get(p + "ln2_beta"));
  const Matrix f = add_row_vector(
      matmul(elementwise(add_row_vector(matmul(b, w.get(p + "w1")), w.get(p + "b1")), gelu),
             w.get(p + "w2")),
      w.get(p + "b2"));
  CHECK(max_abs_diff(float_forward(c, w, x), add(h2, f)) <= 1e-12);
}

TEST_CASE("float forward matches an independent implementation") {
  const ModelConfig c;
  for (std::uint64_t seed : {6, 7, 8}) {
    const WeightSet w = with_random_biases(c, seed);
    Rng rng(seed);
    const Matrix x = random_normal(8, 32, 1.0, rng);
    const Rows ref = oracle_block(c, w, to_rows(x));
    const Matrix got = float_forward(c, w, x);
    double worst = 0.0;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 32; ++j) worst = std::max(worst, std::abs(got(i, j) - ref[i][j]));
    CHECK(worst <= 1e-12);
  }
  CHECK_THROWS_AS(float_forward(c, random_weights(c, 1), Matrix(7, 32)), ShapeError);
}

TEST_CASE("conversion covers every neuron site") {
  const auto& t = toy();
  std::size_t oat = 0;
  std::size_t hg = 0;
  for (std::size_t l = 0; l < t.config.n_layers; ++l) {
    for (const auto& s : oat_sites(t.config, l)) {
      REQUIRE(t.block.oat.count(s) == 1);
      t.block.oat.at(s).validate();
      ++oat;
    }
    for (const auto& s : hg_sites(t.config, l)) {
      REQUIRE(t.block.hg.count(s) == 1);
      REQUIRE(t.block.reports.count(s) == 1);
      CHECK(t.block.reports.at(s).target == hg_target(t.config, s));
      ++hg;
    }
  }
  CHECK(t.block.oat.size() == oat);
  CHECK(t.block.hg.size() == hg);
  CHECK(t.block.reports.size() == hg);
}

TEST_CASE("conversion sees injected outliers") {
  ModelConfig c = small_config();
  c.calibration.outlier_fraction = 0.005;
  c.calibration.outlier_scale = 20.0;
  const WeightSet w = random_weights(c, 9);
  const ConvertedBlock b = convert(c, w, sample_inputs(c, c.calibration, 10));
  double widest = 0.0;
  for (const auto& [site, o] : b.oat) widest = std::max(widest, o.theta_out / o.theta_nor);
  CHECK(widest > 5.0);
}

TEST_CASE("conversion is deterministic") {
  const auto& t = toy();
  const ConvertedBlock again = convert(t.config, t.weights,
                                       sample_inputs(t.config, t.config.calibration, t.config.seeds.calibration));
  CHECK(again == t.block);
  CHECK(block_json(again, "w.lasw").dump() == block_json(t.block, "w.lasw").dump());
}

TEST_CASE("spike forward tracks the float block") {
  const auto& t = toy();
  SpikeOptions o;
  o.steps = 16;
  const SpikeRun r16 = spike_forward(t.block, t.input, o);
  CHECK(r16.reference == float_forward(t.config, t.weights, t.input));
  CHECK(r16.trace.mean_rel_err <= 1e-2);
  CHECK(r16.trace.sequence_rel_err.size() == 2);
  REQUIRE(r16.trace.layers.size() == 1);
  CHECK(r16.trace.layers[0].rel_err == doctest::Approx(r16.trace.mean_rel_err));
  CHECK(r16.trace.ledger.sops() > 0);
  CHECK(r16.trace.ledger.flops() > 0);

  o.steps = 1;
  CHECK(spike_forward(t.block, t.input, o).trace.mean_rel_err > r16.trace.mean_rel_err);
  o.steps = 0;
  CHECK_THROWS_AS(spike_forward(t.block, t.input, o), ConfigError);
}

TEST_CASE("spike forward of a zero input") {
  const auto& t = toy();
  SpikeOptions o;
  const SpikeRun r = spike_forward(t.block, Matrix(8, 32), o);
  CHECK(max_abs(r.output) <= 1e-2);
}

TEST_CASE("spike forward is deterministic") {
  const auto& t = toy();
  SpikeOptions o;
  const SpikeRun a = spike_forward(t.block, t.input, o);
  const SpikeRun b = spike_forward(t.block, t.input, o);
  CHECK(a.output == b.output);
  CHECK(a.trace.ledger == b.trace.ledger);
}

TEST_CASE("fewer input spikes cost fewer synaptic operations") {
  const auto& t = toy();
  Matrix half = t.input;
  for (std::size_t r = 0; r < half.rows(); ++r)
    for (std::size_t c = 0; c < half.cols(); c += 2) half(r, c) = 0.0;
  SpikeOptions o;
  const auto full_sops = spike_forward(t.block, t.input, o).trace.ledger.sops();
  const auto half_sops = spike_forward(t.block, half, o).trace.ledger.sops();
  CHECK(half_sops < full_sops);
}

TEST_CASE("single-mt encoding and level overrides") {
  const auto& t = toy();
  const OATConfig c{1.0, 5.0, 5, 16};
  const OATConfig s = single_mt_equivalent(c);
  CHECK(s.theta_out == c.theta_out);
  CHECK(s.theta_nor < s.theta_out);
  CHECK(s.theta_nor == doctest::Approx(c.theta_out).epsilon(1e-8));
  SpikeOptions o;
  o.levels = 1;
  o.sop_rule = SopRule::per_level_bits;
  const SpikeRun r = spike_forward(t.block, t.input, o);
  CHECK(r.trace.ledger.rule() == SopRule::per_level_bits);
  CHECK(std::isfinite(r.trace.mean_rel_err));
}

TEST_CASE("non-finite values on the spike path name their site") {
  const auto& t = toy();
  ConvertedBlock b = t.block;
  Matrix wq = b.weights.get("layer0.wq");
  wq(0, 0) = NAN;
  b.weights.set("layer0.wq", wq);
  try {
    spike_forward(b, t.input, SpikeOptions{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.layer().find("layer0") == 0);
    CHECK(e.step() >= 1);
  }
}

TEST_CASE("gated block converts and runs") {
  const Toy t = make_toy(FfnKind::gated);
  CHECK(t.block.oat.count("layer0.ffn.up") == 1);
  CHECK(t.block.oat.count("layer0.ffn.product") == 1);
  CHECK(t.block.reports.at("layer0.ffn.act").target == "silu");
  const SpikeRun r = spike_forward(t.block, t.input, SpikeOptions{});
  CHECK(r.trace.mean_rel_err <= 1e-2);
}

TEST_CASE("deeper stacks report one deviation per layer") {
  ModelConfig c = small_config();
  c.n_layers = 2;
  const WeightSet w = random_weights(c, 11);
  const ConvertedBlock b = convert(c, w, sample_inputs(c, c.calibration, 12));
  CHECK(b.hg.count("layer1.ffn.act") == 1);
  CHECK(b.oat.count("layer1.input") == 0);
  InputDistribution d = c.calibration;
  d.sequences = 1;
  const SpikeRun r = spike_forward(b, sample_inputs(c, d, 13), SpikeOptions{});
  REQUIRE(r.trace.layers.size() == 2);
  CHECK(r.trace.layers[1].layer == "layer1");
  CHECK(r.trace.mean_rel_err <= 2e-2);
}

TEST_CASE("weight files round trip byte for byte") {
  const fs::path dir = temp_dir();
  const auto& t = toy();
  save_weights(dir / "a.lasw", t.weights);
  const WeightSet back = load_weights(dir / "a.lasw");
  CHECK(back == t.weights);
  save_weights(dir / "b.lasw", back);
  CHECK(slurp(dir / "a.lasw") == slurp(dir / "b.lasw"));

  std::size_t expected = 12;
  for (const auto& [name, m] : t.weights.tensors()) expected += 4 + name.size() + 8 + 8 * m.size();
  CHECK(fs::file_size(dir / "a.lasw") == expected);
  fs::remove_all(dir);
}

TEST_CASE("corrupt weight files are rejected") {
  WeightSet w;
  w.set("x", Matrix::from_rows({{1, 2}, {3, 4}}));
  const auto bytes = encode_weights(w);
  for (std::size_t cut : {0ul, 3ul, 11ul, bytes.size() - 1}) {
    std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    CHECK_THROWS_AS(decode_weights(truncated), FormatError);
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    decode_weights(bad_magic);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("expected 'LASW'") != std::string::npos);
    CHECK(msg.find("found 'XASW'") != std::string::npos);
  }
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_weights(bad_version), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_weights(trailing), FormatError);
}

TEST_CASE("config and converted block files round trip") {
  const fs::path dir = temp_dir();
  const auto& t = toy();
  save_config(dir / "config.json", t.config);
  CHECK(load_config(dir / "config.json") == t.config);
  save_block(dir / "block.json", t.block);
  CHECK(fs::exists(dir / "block.lasw"));
  const ConvertedBlock back = load_block(dir / "block.json");
  CHECK(back == t.block);
  save_block(dir / "again.json", back);
  CHECK(slurp(dir / "again.lasw") == slurp(dir / "block.lasw"));

  std::ofstream(dir / "broken.json") << "{\"format\": \"other\"}";
  CHECK_THROWS_AS(load_block(dir / "broken.json"), FormatError);
  fs::remove_all(dir);
}

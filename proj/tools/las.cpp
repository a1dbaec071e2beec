// las: calibrate, convert, run and compare spike-driven transformer blocks.
//
// Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "las/calibration.hpp"
#include "las/energy.hpp"
#include "las/errors.hpp"
#include "las/model.hpp"
#include "las/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("LAS_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(raw, &used);
    if (used != std::string(raw).size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw las::InputError(std::string("LAS_SEED must be a non-negative integer, got '") + raw + "'");
  }
}

void apply_env_seed(las::ModelConfig& c) {
  if (const auto s = env_seed()) c.seeds = las::Seeds::from_base(*s);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw las::InputError("cannot write " + path.string());
  out << text;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw las::InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw las::FormatError(path.string() + ": " + e.what());
  }
}

las::Matrix load_input(const fs::path& path) {
  const las::WeightSet w = las::load_weights(path);
  if (!w.contains("input")) throw las::FormatError(path.string() + ": no tensor named 'input'");
  return w.get("input");
}

las::SpikeOptions spike_options(int steps, std::optional<int> levels, const std::string& encoding,
                                const std::string& sop_rule) {
  las::SpikeOptions o;
  o.steps = steps;
  o.levels = levels;
  o.encoding = encoding == "single-mt" ? las::Encoding::single_mt : las::Encoding::oat;
  o.sop_rule = sop_rule == "level-bits" ? las::SopRule::per_level_bits : las::SopRule::per_event;
  return o;
}

json run_report(const las::ConvertedBlock& block, const las::SpikeOptions& o,
                const las::SpikeRun& run) {
  json layers = json::array();
  for (const auto& l : run.trace.layers) layers.push_back({{"layer", l.layer}, {"rel_err", l.rel_err}});
  json digests = json::object();
  for (const auto& [site, r] : block.reports) {
    digests[site] = {{"target", r.target},
                     {"ranges", r.per_subrange_max_abs_err.size()},
                     {"max_abs_err", r.max_abs_err()},
                     {"seed", r.seed}};
  }
  return json{{"tool", "las"},
              {"tool_version", las::kVersion},
              {"config", block.config},
              {"seed", block.config.seeds.fit},
              {"steps", o.steps},
              {"levels", o.levels ? *o.levels : block.config.H},
              {"encoding", o.encoding == las::Encoding::oat ? "oat" : "single-mt"},
              {"output_rel_err", run.trace.mean_rel_err},
              {"sequence_rel_err", run.trace.sequence_rel_err},
              {"layers", layers},
              {"clamped_inputs", run.trace.clamped},
              {"energy", run.trace.ledger},
              {"calibration", digests},
              {"metadata", json::object()}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spike-driven transformer conversion toolkit"};
  app.set_version_flag("--version", std::string(las::kVersion));
  app.require_subcommand(1);

  // init
  auto* init = app.add_subcommand("init", "Write a default config, random weights and an input batch");
  std::string init_dir = ".";
  std::string ffn_kind = "standard";
  std::size_t layers = 1;
  std::optional<std::size_t> init_ranges;
  std::size_t input_sequences = 4;
  init->add_option("--out-dir", init_dir, "Output directory")->capture_default_str();
  init->add_option("--ffn", ffn_kind, "FFN kind")->check(CLI::IsMember({"standard", "gated"}))->capture_default_str();
  init->add_option("--layers", layers, "Encoder layers (1-4)")->capture_default_str();
  init->add_option("--ranges", init_ranges, "Sub-ranges per nonlinearity");
  init->add_option("--sequences", input_sequences, "Sequences in the input batch")->capture_default_str();

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Fit an HG neuron to a nonlinearity");
  std::string target;
  std::vector<double> range;
  std::size_t cal_ranges = 8;
  int cal_steps = 16;
  std::size_t cal_samples = 4096;
  std::optional<std::uint64_t> cal_seed;
  std::string cal_out;
  cal->add_option("--target", target, "gelu, silu, exp, reciprocal, square or invsqrt")->required();
  cal->add_option("--range", range, "lo,hi")->required()->delimiter(',')->expected(2);
  cal->add_option("--levels", cal_ranges, "Sub-ranges N")->capture_default_str();
  cal->add_option("--steps", cal_steps, "Timesteps T")->capture_default_str();
  cal->add_option("--samples", cal_samples, "Samples per sub-range M (>= 64)")->capture_default_str();
  cal->add_option("--seed", cal_seed, "RNG seed (default LAS_SEED + 2, else 0)");
  cal->add_option("--out", cal_out, "Report path")->required();

  // convert
  auto* conv = app.add_subcommand("convert", "Calibrate and fit every neuron site of a block");
  std::string conv_config, conv_weights, conv_dist, conv_out;
  conv->add_option("--config", conv_config, "Model config JSON")->required();
  conv->add_option("--weights", conv_weights, "Weights (.lasw)")->required();
  conv->add_option("--calib-dist", conv_dist, "Calibration distribution JSON (defaults to the config's)");
  conv->add_option("--out", conv_out, "Converted block JSON")->required();

  // run / compare / sweep share block, input and encoding flags
  std::string block_path, input_path, encoding = "oat", sop_rule = "per-event";
  std::optional<int> levels;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--block", block_path, "Converted block JSON")->required();
    sub->add_option("--input", input_path, "Input batch (.lasw with tensor 'input')")->required();
    sub->add_option("--levels", levels, "Override H of every OAT site");
    sub->add_option("--encoding", encoding, "oat or single-mt")->check(CLI::IsMember({"oat", "single-mt"}))->capture_default_str();
    sub->add_option("--sop-rule", sop_rule, "per-event or level-bits")->check(CLI::IsMember({"per-event", "level-bits"}))->capture_default_str();
  };
  int steps = 16;
  auto* run = app.add_subcommand("run", "Run the spike-driven block and write a report");
  add_common(run);
  std::string report_path;
  run->add_option("--steps", steps, "Timesteps T")->capture_default_str();
  run->add_option("--report", report_path, "Report JSON")->required();

  auto* cmp = app.add_subcommand("compare", "Print float-vs-spike deviation per layer");
  add_common(cmp);
  cmp->add_option("--steps", steps, "Timesteps T")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "Emit timestep,mean_rel_err,sops,ratio CSV");
  add_common(sweep);
  std::vector<int> steps_list{4, 8, 10, 13, 16};
  std::string sweep_out;
  sweep->add_option("--steps-list", steps_list, "Comma-separated timesteps")->delimiter(',')->capture_default_str();
  sweep->add_option("--out", sweep_out, "CSV path (default stdout)");

  auto* energy = app.add_subcommand("energy", "Print the energy ratio of a run report");
  std::string energy_report;
  energy->add_option("--report", energy_report, "Run report JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*init) {
      las::ModelConfig c;
      c.ffn_kind = ffn_kind == "gated" ? las::FfnKind::gated : las::FfnKind::standard;
      c.n_layers = layers;
      if (init_ranges) c.N_per_nonlinearity = *init_ranges;
      apply_env_seed(c);
      c.validate();
      const fs::path dir = init_dir;
      fs::create_directories(dir);
      las::save_config(dir / "config.json", c);
      las::save_weights(dir / "weights.lasw", las::random_weights(c, c.seeds.weights));
      las::InputDistribution dist = c.calibration;
      dist.sequences = input_sequences;
      las::WeightSet input;
      input.set("input", las::sample_inputs(c, dist, c.seeds.input));
      las::save_weights(dir / "input.lasw", input);
      std::cout << "wrote " << (dir / "config.json").string() << ", " << (dir / "weights.lasw").string()
                << ", " << (dir / "input.lasw").string() << "\n";
    } else if (*cal) {
      const las::TargetFunction fn = las::target_by_name(target);
      std::uint64_t seed = 0;
      if (cal_seed) {
        seed = *cal_seed;
      } else if (const auto s = env_seed()) {
        seed = las::Seeds::from_base(*s).fit;
      }
      const las::HgFit fit =
          las::fit_hg_range(fn, range[0], range[1], cal_ranges, cal_steps, cal_samples, seed);
      write_text(cal_out, json(fit.report).dump(2) + "\n");
      std::cout << target << ": N=" << fit.report.per_subrange_max_abs_err.size() << " T=" << cal_steps
                << " max_abs_err=" << std::setprecision(6) << fit.report.max_abs_err() << "\n";
    } else if (*conv) {
      las::ModelConfig c = las::load_config(conv_config);
      apply_env_seed(c);
      if (!conv_dist.empty()) {
        const json d = read_json_file(conv_dist);
        c.calibration.scale = d.value("scale", c.calibration.scale);
        c.calibration.outlier_fraction = d.value("outlier_fraction", c.calibration.outlier_fraction);
        c.calibration.outlier_scale = d.value("outlier_scale", c.calibration.outlier_scale);
        c.calibration.sequences = d.value("sequences", c.calibration.sequences);
        c.validate();
      }
      const las::WeightSet w = las::load_weights(conv_weights);
      const las::Matrix calib = las::sample_inputs(c, c.calibration, c.seeds.calibration);
      const las::ConvertedBlock b = las::convert(c, w, calib);
      las::save_block(conv_out, b);
      for (const auto& msg : b.warnings) std::cerr << "warning: " << msg << "\n";
      std::cout << "converted " << b.oat.size() << " OAT sites and " << b.hg.size() << " HG sites\n";
    } else if (*run || *cmp) {
      const las::ConvertedBlock b = las::load_block(block_path);
      const las::Matrix x = load_input(input_path);
      const auto o = spike_options(steps, levels, encoding, sop_rule);
      const las::SpikeRun r = las::spike_forward(b, x, o);
      if (*run) {
        write_text(report_path, run_report(b, o, r).dump(2) + "\n");
        std::cout << "T=" << steps << " mean_rel_err=" << std::setprecision(6) << r.trace.mean_rel_err
                  << "\n";
      } else {
        std::cout << std::left << std::setw(12) << "layer" << "rel_err\n";
        for (const auto& l : r.trace.layers) {
          std::cout << std::setw(12) << l.layer << std::setprecision(6) << l.rel_err << "\n";
        }
        std::cout << std::setw(12) << "output" << r.trace.mean_rel_err << "\n";
      }
    } else if (*sweep) {
      const las::ConvertedBlock b = las::load_block(block_path);
      const las::Matrix x = load_input(input_path);
      std::ostringstream csv;
      csv << "timestep,mean_rel_err,sops,ratio\n" << std::setprecision(10);
      for (int t : steps_list) {
        const las::SpikeRun r = las::spike_forward(b, x, spike_options(t, levels, encoding, sop_rule));
        csv << t << "," << r.trace.mean_rel_err << "," << r.trace.ledger.sops() << ","
            << las::energy_ratio(r.trace.ledger) << "\n";
      }
      if (sweep_out.empty()) {
        std::cout << csv.str();
      } else {
        write_text(sweep_out, csv.str());
      }
    } else if (*energy) {
      const json j = read_json_file(energy_report);
      if (!j.is_object() || !j.contains("energy")) {
        throw las::InputError(energy_report + ": report has no energy ledger");
      }
      const las::EnergyLedger ledger = las::ledger_from_json(j.at("energy"));
      const double ratio = las::energy_ratio(ledger);
      std::cout << "sops=" << ledger.sops() << " flops=" << ledger.flops() << " ratio="
                << std::setprecision(6) << ratio << "\n";
    }
  } catch (const las::NumericError& e) {
    std::cerr << "numeric failure in " << e.layer() << " at step " << e.step() << ": " << e.what() << "\n";
    return kExitNumeric;
  } catch (const las::FitError& e) {
    std::cerr << "fit failed: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const las::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "las/calibration.hpp"
#include "las/energy.hpp"
#include "las/errors.hpp"
#include "las/model.hpp"
#include "las/neurons.hpp"
#include "las/tensors.hpp"
#include "las/version.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

las::Matrix to_matrix(const Array& a) {
  if (a.ndim() == 1) {
    return las::Matrix(1, static_cast<std::size_t>(a.shape(0)),
                       std::vector<double>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() != 2) throw las::ShapeError("expected a 1-D or 2-D array");
  return las::Matrix(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                     std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const las::Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

// Round trips through the json module so dicts and strings both work.
nlohmann::json py_to_json(const py::object& o) {
  if (py::isinstance<py::str>(o)) return nlohmann::json::parse(o.cast<std::string>());
  auto dumps = py::module_::import("json").attr("dumps");
  return nlohmann::json::parse(dumps(o).cast<std::string>());
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

std::vector<double> train_values(const las::SpikeTrain& s) { return s.values; }

}  // namespace

PYBIND11_MODULE(las, m) {
  m.doc() = "Spike-driven transformer conversion toolkit";
  m.attr("__version__") = las::kVersion;

  auto error = py::register_exception<las::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<las::ShapeError>(m, "ShapeError", error);
  auto input = py::register_exception<las::InputError>(m, "InputError", error);
  py::register_exception<las::EmptyInputError>(m, "EmptyInputError", input);
  py::register_exception<las::ConfigError>(m, "ConfigError", error);
  py::register_exception<las::FitError>(m, "FitError", error);
  py::register_exception<las::ProtocolError>(m, "ProtocolError", error);
  py::register_exception<las::FormatError>(m, "FormatError", error);
  py::register_exception<las::UndefinedRatioError>(m, "UndefinedRatioError", error);
  py::register_exception<las::NumericError>(m, "NumericError", error);

  py::class_<las::FSParams>(m, "FSParams")
      .def(py::init<>())
      .def(py::init([](std::vector<double> theta, std::vector<double> h, std::vector<double> d) {
             las::FSParams p{std::move(theta), std::move(h), std::move(d)};
             p.validate();
             return p;
           }),
           py::arg("theta"), py::arg("h"), py::arg("d"))
      .def_readwrite("theta", &las::FSParams::theta)
      .def_readwrite("h", &las::FSParams::h)
      .def_readwrite("d", &las::FSParams::d)
      .def_property_readonly("steps", &las::FSParams::steps);

  py::class_<las::MTConfig>(m, "MTConfig")
      .def(py::init([](double tau, int levels, int steps) {
             las::MTConfig c{tau, levels, steps};
             c.validate();
             return c;
           }),
           py::arg("tau") = 1.0, py::arg("levels") = 1, py::arg("steps") = 16)
      .def_readwrite("tau", &las::MTConfig::tau)
      .def_readwrite("levels", &las::MTConfig::levels)
      .def_readwrite("steps", &las::MTConfig::steps)
      .def("threshold", &las::MTConfig::threshold)
      .def("max_decodable", &las::MTConfig::max_decodable)
      .def("quantization_bound", &las::MTConfig::quantization_bound)
      .def("binary_schedule", &las::MTConfig::binary_schedule);

  py::class_<las::OATConfig>(m, "OATConfig")
      .def(py::init([](double theta_nor, double theta_out, int levels, int steps) {
             las::OATConfig c{theta_nor, theta_out, levels, steps};
             c.validate();
             return c;
           }),
           py::arg("theta_nor") = 1.0, py::arg("theta_out") = 2.0, py::arg("levels") = 5,
           py::arg("steps") = 16)
      .def_readwrite("theta_nor", &las::OATConfig::theta_nor)
      .def_readwrite("theta_out", &las::OATConfig::theta_out)
      .def_readwrite("levels", &las::OATConfig::levels)
      .def_readwrite("steps", &las::OATConfig::steps)
      .def("is_outlier", &las::OATConfig::is_outlier)
      .def("quantization_bound", &las::OATConfig::quantization_bound);

  py::class_<las::HGConfig>(m, "HGConfig")
      .def_readonly("boundaries", &las::HGConfig::boundaries)
      .def_readonly("subneurons", &las::HGConfig::subneurons)
      .def_property_readonly("ranges", &las::HGConfig::ranges)
      .def("select", &las::HGConfig::select)
      .def("__call__", [](const las::HGConfig& c, double x) { return las::hg_eval(x, c); })
      .def("to_json", [](const las::HGConfig& c) { return json_to_py(nlohmann::json(c)); });

  m.def("fs_eval", &las::fs_eval, py::arg("x"), py::arg("params"));
  m.def("mt_eval", &las::mt_eval, py::arg("x"), py::arg("config"));
  m.def("hg_eval", &las::hg_eval, py::arg("x"), py::arg("config"));
  m.def("fs_encode", [](double x, const las::FSParams& p) { return train_values(las::fs_encode(x, p)); },
        py::arg("x"), py::arg("params"), "Per-step emitted values.");
  m.def("mt_encode", [](double x, const las::MTConfig& c) { return train_values(las::mt_encode(x, c)); },
        py::arg("x"), py::arg("config"), "Per-step emitted values.");
  m.def(
      "oat_roundtrip",
      [](const Array& x, const las::OATConfig& c) {
        auto mx = to_matrix(x);
        auto decoded = las::decode(las::oat_encode(mx, c));
        return to_array(las::Matrix(mx.rows(), mx.cols(), decoded.values()));
      },
      py::arg("x"), py::arg("config"), "Decoded OAT trains, same shape as x.");

  m.def("known_targets", &las::known_targets);
  m.def("gelu", &las::gelu);
  m.def("silu", &las::silu);

  py::class_<las::CalibrationReport>(m, "CalibrationReport")
      .def_readonly("target", &las::CalibrationReport::target)
      .def_readonly("boundaries", &las::CalibrationReport::boundaries)
      .def_readonly("per_subrange_max_abs_err", &las::CalibrationReport::per_subrange_max_abs_err)
      .def_readonly("seed", &las::CalibrationReport::seed)
      .def_readonly("steps", &las::CalibrationReport::steps)
      .def_readonly("warnings", &las::CalibrationReport::warnings)
      .def("max_abs_err", &las::CalibrationReport::max_abs_err)
      .def("sup_bound", &las::CalibrationReport::sup_bound, py::arg("lipschitz"))
      .def("to_json", [](const las::CalibrationReport& r) { return json_to_py(nlohmann::json(r)); });

  py::class_<las::HgFit>(m, "HgFit")
      .def_readonly("config", &las::HgFit::config)
      .def_readonly("report", &las::HgFit::report);

  m.def(
      "fit_hg_range",
      [](const std::string& target, double lo, double hi, std::size_t ranges, int steps,
         std::size_t samples, std::uint64_t seed) {
        py::gil_scoped_release release;
        return las::fit_hg_range(las::target_by_name(target), lo, hi, ranges, steps, samples, seed);
      },
      py::arg("target"), py::arg("lo"), py::arg("hi"), py::arg("ranges") = 8,
      py::arg("steps") = 16, py::arg("samples") = 1024, py::arg("seed") = 7);

  py::enum_<las::SopRule>(m, "SopRule")
      .value("per_event", las::SopRule::per_event)
      .value("per_level_bits", las::SopRule::per_level_bits);

  py::class_<las::EnergyLedger>(m, "EnergyLedger")
      .def(py::init<las::SopRule>(), py::arg("rule") = las::SopRule::per_event)
      .def("record_sop", &las::EnergyLedger::record_sop)
      .def("record_flop", &las::EnergyLedger::record_flop)
      .def("record_events", &las::EnergyLedger::record_events)
      .def("merge", &las::EnergyLedger::merge)
      .def_property_readonly("sops", &las::EnergyLedger::sops)
      .def_property_readonly("flops", &las::EnergyLedger::flops)
      .def("ratio", [](const las::EnergyLedger& l) { return las::energy_ratio(l); })
      .def("to_json", [](const las::EnergyLedger& l) { return json_to_py(nlohmann::json(l)); });

  m.def("energy_ratio", py::overload_cast<std::uint64_t, std::uint64_t>(&las::energy_ratio),
        py::arg("sops"), py::arg("flops"));
  m.def("flop_cost", &las::flop_cost, py::arg("kind"));
  m.def("sop_weight", &las::sop_weight, py::arg("rule"), py::arg("levels"));

  py::class_<las::ModelConfig>(m, "ModelConfig")
      .def(py::init([](const py::object& overrides) {
             las::ModelConfig c;
             if (!overrides.is_none()) {
               nlohmann::json j = c;
               j.merge_patch(py_to_json(overrides));
               c = j.get<las::ModelConfig>();
             }
             c.validate();
             return c;
           }),
           py::arg("overrides") = py::none())
      .def_readonly("d_model", &las::ModelConfig::d_model)
      .def_readonly("seq_len", &las::ModelConfig::seq_len)
      .def_readonly("T", &las::ModelConfig::T)
      .def_readonly("H", &las::ModelConfig::H)
      .def("to_json", [](const las::ModelConfig& c) { return json_to_py(nlohmann::json(c)); });

  py::class_<las::WeightSet>(m, "WeightSet")
      .def("names", [](const las::WeightSet& w) {
        std::vector<std::string> out;
        for (const auto& [name, _] : w.tensors()) out.push_back(name);
        return out;
      })
      .def("__getitem__", [](const las::WeightSet& w, const std::string& name) {
        auto it = w.tensors().find(name);
        if (it == w.tensors().end()) throw py::key_error(name);
        return to_array(it->second);
      });

  m.def("random_weights", &las::random_weights, py::arg("config"), py::arg("seed"));
  m.def(
      "sample_inputs",
      [](const las::ModelConfig& c, std::uint64_t seed) {
        return to_array(las::sample_inputs(c, c.calibration, seed));
      },
      py::arg("config"), py::arg("seed"));
  m.def(
      "float_forward",
      [](const las::ModelConfig& c, const las::WeightSet& w, const Array& x) {
        return to_array(las::float_forward(c, w, to_matrix(x)));
      },
      py::arg("config"), py::arg("weights"), py::arg("x"));

  py::class_<las::ConvertedBlock>(m, "ConvertedBlock")
      .def_readonly("config", &las::ConvertedBlock::config)
      .def_readonly("oat", &las::ConvertedBlock::oat)
      .def_readonly("hg", &las::ConvertedBlock::hg)
      .def_readonly("reports", &las::ConvertedBlock::reports)
      .def_readonly("warnings", &las::ConvertedBlock::warnings);

  m.def(
      "convert",
      [](const las::ModelConfig& c, const las::WeightSet& w, const Array& calib) {
        auto sample = to_matrix(calib);
        py::gil_scoped_release release;
        return las::convert(c, w, sample);
      },
      py::arg("config"), py::arg("weights"), py::arg("calib_sample"));

  py::class_<las::SpikeRun>(m, "SpikeRun")
      .def_property_readonly("output", [](const las::SpikeRun& r) { return to_array(r.output); })
      .def_property_readonly("reference", [](const las::SpikeRun& r) { return to_array(r.reference); })
      .def_property_readonly("mean_rel_err", [](const las::SpikeRun& r) { return r.trace.mean_rel_err; })
      .def_property_readonly("clamped", [](const las::SpikeRun& r) { return r.trace.clamped; })
      .def_property_readonly("ledger", [](const las::SpikeRun& r) { return r.trace.ledger; });

  m.def(
      "spike_forward",
      [](const las::ConvertedBlock& b, const Array& x, int steps, std::optional<int> levels,
         bool single_mt, las::SopRule rule) {
        las::SpikeOptions o;
        o.steps = steps;
        o.levels = levels;
        o.encoding = single_mt ? las::Encoding::single_mt : las::Encoding::oat;
        o.sop_rule = rule;
        auto mx = to_matrix(x);
        py::gil_scoped_release release;
        return las::spike_forward(b, mx, o);
      },
      py::arg("block"), py::arg("x"), py::arg("steps") = 16, py::arg("levels") = py::none(),
      py::arg("single_mt") = false, py::arg("sop_rule") = las::SopRule::per_event);
}

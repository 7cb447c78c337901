#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "ueforge/dataset.hpp"
#include "ueforge/diagnostics.hpp"
#include "ueforge/generation.hpp"
#include "ueforge/harness.hpp"
#include "ueforge/model.hpp"
#include "ueforge/runspec.hpp"
#include "ueforge/training.hpp"

namespace py = pybind11;
using namespace ueforge;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> v(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(v));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::memcpy(out.mutable_data(), t.data().data(), t.numel() * sizeof(double));
  return out;
}

Array dataset_images(const Dataset& d) {
  Array out({static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.channels),
             static_cast<py::ssize_t>(d.height), static_cast<py::ssize_t>(d.width)});
  std::memcpy(out.mutable_data(), d.images.data(), d.images.size() * sizeof(double));
  return out;
}

}  // namespace

PYBIND11_MODULE(_ueforge, m) {
  m.doc() = "Unlearnable-example generation, training paradigms and diagnostics";

  py::register_exception<Error>(m, "Error");

  py::class_<DataGenConfig>(m, "DataGenConfig")
      .def(py::init<>())
      .def_readwrite("seed", &DataGenConfig::seed)
      .def_readwrite("classes", &DataGenConfig::classes)
      .def_readwrite("n_train", &DataGenConfig::n_train)
      .def_readwrite("n_test", &DataGenConfig::n_test)
      .def_readwrite("image_size", &DataGenConfig::image_size)
      .def_readwrite("family", &DataGenConfig::family)
      .def_readwrite("noise_sigma", &DataGenConfig::noise_sigma);

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("images", &dataset_images)
      .def_property_readonly("labels", [](const Dataset& d) { return py::array_t<std::uint16_t>(d.labels.size(), d.labels.data()); })
      .def_readonly("classes", &Dataset::classes)
      .def_readonly("split", &Dataset::split)
      .def("__len__", &Dataset::size);

  py::class_<DataSplit>(m, "DataSplit").def_readonly("train", &DataSplit::train).def_readonly("test", &DataSplit::test);

  m.def("gen_data", &gen_data, py::arg("config"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("save_dataset", &save_dataset, py::arg("data"), py::arg("path"));

  py::class_<StagedNet>(m, "StagedNet")
      .def_static("load", &load_network, py::arg("path"), py::arg("height"), py::arg("width"))
      .def("logits", [](const StagedNet& n, const Array& x) { return to_array(n.logits(to_tensor(x))); })
      .def("taps", [](const StagedNet& n, const Array& x) {
        const auto r = n.forward(to_tensor(x), true);
        py::list out;
        for (const auto& t : r.taps->outputs) out.append(to_array(t));
        return out;
      });

  py::class_<PerturbationSet>(m, "PerturbationSet")
      .def_readonly("epsilon", &PerturbationSet::epsilon)
      .def("max_abs", &PerturbationSet::max_abs)
      .def("__len__", &PerturbationSet::size)
      .def_property_readonly("values", [](const PerturbationSet& p) {
        std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(p.size())};
        for (auto d : p.example_shape) shape.push_back(static_cast<py::ssize_t>(d));
        Array out(shape);
        std::memcpy(out.mutable_data(), p.values.data(), p.values.size() * sizeof(double));
        return out;
      });
  m.def("load_perturbations", &load_perturbations, py::arg("path"));

  auto d = m.def_submodule("diag", "Feature and spectral diagnostics");
  d.def("power_spectrum_2d", [](const Array& z) { return to_array(diag::power_spectrum_2d(to_tensor(z))); });
  d.def("radial_psd", [](const Array& z) { return diag::radial_psd(to_tensor(z)).power; });
  d.def("mean_radial_psd", [](const Array& z) { return diag::mean_radial_psd(to_tensor(z)).power; });
  d.def("relative_spectral_density", [](const Array& delta, const Array& clean) {
    return diag::relative_spectral_density(diag::mean_radial_psd(to_tensor(delta)), diag::mean_radial_psd(to_tensor(clean)));
  });
  d.def("cosine", [](const std::vector<double>& a, const std::vector<double>& b) {
    const auto r = diag::cosine(a, b);
    return py::make_tuple(r.value, r.degenerate);
  });
  d.def("cosine_similarity", [](const StagedNet& n, const Array& x, const Array& delta) {
    return diag::cosine_similarity(n, to_tensor(x), to_tensor(delta)).values;
  });
  d.def("ptr", [](const StagedNet& n, const Array& x, const Array& delta, std::size_t stage) {
    return diag::ptr(n, to_tensor(x), to_tensor(delta), stage).value;
  });

  m.def("spec_canonical", [](const std::string& text) { return spec_from_text(parse_spec_text(text)).canonical(); });
  m.def("run_id", [](const std::string& text) { return spec_from_text(parse_spec_text(text)).run_id(); });
  m.def("run", [](const std::string& text, const std::string& out_dir) {
    RunSpec spec = spec_from_text(parse_spec_text(text));
    if (!out_dir.empty()) spec.out_dir = out_dir;
    py::gil_scoped_release release;
    const auto r = run(spec);
    return py::make_tuple(r.run_id, r.report.accuracy, r.run_dir);
  }, py::arg("spec_text"), py::arg("out_dir") = "");
}

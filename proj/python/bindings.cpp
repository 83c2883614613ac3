#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cafpn/data.hpp"
#include "cafpn/error.hpp"
#include "cafpn/gradcheck.hpp"
#include "cafpn/introspection.hpp"
#include "cafpn/ops.hpp"
#include "cafpn/trainer.hpp"

namespace py = pybind11;
using namespace cafpn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_data(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor checked_input(const Model& m, const Array& x) {
  const auto s = m.spec().backbone.input_size;
  if (x.ndim() != 4 || x.shape(1) != 3 || x.shape(2) != s || x.shape(3) != s)
    throw ConfigError("expected an N x 3 x " + std::to_string(s) + " x " + std::to_string(s) + " array");
  return to_tensor(x);
}

py::dict records_to_dict(const std::vector<archive::NamedTensor>& records) {
  py::dict d;
  for (const auto& r : records) d[py::str(r.name)] = to_array(r.tensor);
  return d;
}

}  // namespace

PYBIND11_MODULE(_cafpn, m) {
  m.doc() = "Attention-fused feature pyramid classifiers";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& variant, int depth, std::int64_t classes, const std::string& upsampling,
                       std::uint64_t seed) {
             return Model(ModelSpec::standard(variant, depth, classes, parse_upsampling(upsampling)), seed);
           }),
           py::arg("variant") = "fpn-srr-ca", py::arg("depth") = 20, py::arg("classes") = 98,
           py::arg("upsampling") = "bilinear", py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& p) { return std::move(load_checkpoint(p).model); }, py::arg("path"))
      .def("forward",
           [](const Model& self, const Array& x) {
             autograd::NoGradGuard guard;
             return to_array(self.forward(checked_input(self, x)));
           })
      .def("trace",
           [](const Model& self, const Array& x) {
             autograd::NoGradGuard guard;
             auto t = introspect::trace_forward(self, checked_input(self, x));
             py::dict out;
             out["attention"] = records_to_dict(introspect::attention_records(t));
             out["features"] = records_to_dict(introspect::feature_records(t));
             return out;
           })
      .def("train_mode", [](Model& self) { self.set_mode(nn::Mode::Train); })
      .def("eval_mode", [](Model& self) { self.set_mode(nn::Mode::Eval); })
      .def("save", [](const Model& self, const std::filesystem::path& p) { self.save(p); })
      .def("state_dict", [](const Model& self) { return records_to_dict(self.checkpoint_records()); })
      .def_property_readonly("num_parameters", &Model::count_parameters)
      .def_property_readonly("input_size", [](const Model& self) { return self.spec().backbone.input_size; })
      .def_property_readonly("variant", [](const Model& self) { return variant_name(self.spec().pyramid.fusion); })
      .def_property_readonly("num_classes", [](const Model& self) { return self.spec().num_classes; });

  m.def("learning_rate", [](const std::string& preset, int epoch) {
    return train::learning_rate(train::preset(preset), epoch);
  });
  m.def("presets", &train::preset_names);
  m.def("val_count", &data::val_count);
  m.def("tile_grid", [](std::int64_t h, std::int64_t w, std::int64_t tile) {
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    for (const auto& r : data::tile_grid(h, w, tile)) out.emplace_back(r.y, r.x);
    return out;
  });
  m.def(
      "split",
      [](const std::filesystem::path& root, std::uint64_t seed) {
        auto man = data::ingest(root, {seed, false});
        std::vector<std::tuple<std::string, std::int64_t, std::string>> out;
        for (const auto& e : man.entries)
          out.emplace_back(e.path, e.label, e.split == data::Split::Train ? "train" : "val");
        return out;
      },
      py::arg("root"), py::arg("seed") = 0);
  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        gradcheck::Options opt;
        opt.seed = seed;
        std::vector<std::tuple<std::string, double, bool>> out;
        for (const auto& r : gradcheck::run_suite(opt)) out.emplace_back(r.name, r.max_rel_error, r.passed);
        return out;
      },
      py::arg("seed") = 0);
  m.def("set_num_threads", &ops::set_num_threads);
}

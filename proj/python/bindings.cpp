#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pointrnn/errors.hpp"
#include "pointrnn/training.hpp"

namespace py = pybind11;
using namespace pointrnn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<Tensor> to_frames(const std::vector<Array>& frames) {
  std::vector<Tensor> out;
  for (const Array& f : frames) out.push_back(to_tensor(f));
  return out;
}

std::vector<Array> to_arrays(const std::vector<Tensor>& frames) {
  std::vector<Array> out;
  for (const Tensor& f : frames) out.push_back(to_array(f));
  return out;
}

py::array_t<std::int64_t> table_indices(const NeighborTable& t) {
  py::array_t<std::int64_t> out({t.rows, t.k});
  std::copy(t.indices.begin(), t.indices.end(), out.mutable_data());
  return out;
}

CellKind cell_of(const std::string& s) {
  if (s == "rnn") return CellKind::rnn;
  if (s == "gru") return CellKind::gru;
  if (s == "lstm") return CellKind::lstm;
  throw ConfigError("unknown cell '" + s + "' (expected rnn, gru or lstm)");
}

ModelConfig preset(const std::string& name, const std::string& cell, std::size_t points) {
  if (name == "mnist-basic") return ModelConfig::mnist_basic(cell_of(cell), points);
  if (name == "mnist-advanced") return ModelConfig::mnist_advanced(cell_of(cell), points);
  if (name == "driving-advanced") return ModelConfig::driving_advanced(cell_of(cell), points);
  throw ConfigError("unknown preset '" + name + "'");
}

ImageSet images_from(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3) throw ContractError("images must be a (count, rows, cols) array");
  ImageSet s;
  s.count = a.shape(0);
  s.rows = a.shape(1);
  s.cols = a.shape(2);
  s.pixels.assign(a.data(), a.data() + a.size());
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point recurrent networks for moving point cloud prediction";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<SolverError>(m, "SolverError", base.ptr());

  m.def("chamfer", [](const Array& p, const Array& q) {
    return chamfer_value(to_tensor(p), to_tensor(q));
  }, py::arg("p"), py::arg("q"), "Chamfer distance between two n x 3 clouds.");

  m.def("emd", [](const Array& p, const Array& q, std::optional<double> epsilon) {
    const Assignment a = epsilon ? emd_approx_assignment(to_tensor(p), to_tensor(q), *epsilon)
                                 : emd_exact_assignment(to_tensor(p), to_tensor(q));
    return py::make_tuple(a.cost, a.mapping);
  }, py::arg("p"), py::arg("q"), py::arg("epsilon") = py::none(),
        "Earth mover's distance and matching. Exact unless epsilon selects the auction solver.");

  m.def("knn", [](const Array& query, const Array& reference, std::size_t k) {
    return table_indices(knn_query(to_tensor(query), to_tensor(reference), k));
  }, py::arg("query"), py::arg("reference"), py::arg("k"));

  m.def("ball_query", [](const Array& query, const Array& reference, double radius,
                         std::size_t k, std::uint64_t seed, bool first_k) {
    Rng rng(seed);
    BallQueryOptions opt;
    opt.sampling = first_k ? BallSampling::first_k : BallSampling::uniform;
    NeighborTable t = ball_query(to_tensor(query), to_tensor(reference), radius, k, rng, opt);
    py::array_t<bool> valid({t.rows, t.k});
    std::copy(t.valid.begin(), t.valid.end(), valid.mutable_data());
    return py::make_tuple(table_indices(t), valid);
  }, py::arg("query"), py::arg("reference"), py::arg("radius"), py::arg("k"),
        py::arg("seed") = 0, py::arg("first_k") = false,
        "Returns (indices, valid); padding entries are marked invalid.");

  m.def("farthest_point_sample", [](const Array& coords, std::size_t count, std::size_t start) {
    return farthest_point_sample(to_tensor(coords), count, start);
  }, py::arg("coords"), py::arg("count"), py::arg("start") = 0);

  m.def("load_mnist_images", [](const std::string& path) {
    ImageSet s = load_mnist_idx(path);
    py::array_t<std::uint8_t> out({s.count, s.rows, s.cols});
    std::copy(s.pixels.begin(), s.pixels.end(), out.mutable_data());
    return out;
  }, py::arg("path"));

  m.def("synthesize", [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& images,
                         std::uint64_t seed, std::size_t digits, std::size_t length,
                         std::size_t samples) {
    const ImageSet set = images_from(images);
    SynthConfig c;
    c.digits = digits;
    c.length = length;
    c.input_length = length / 2;
    c.samples = samples;
    Rng rng(seed);
    return to_arrays(coordinates_of(synthesize_sequence(set, c, rng).frames));
  }, py::arg("images"), py::arg("seed"), py::arg("digits") = 1, py::arg("length") = 20,
        py::arg("samples") = 0, "One moving-digit sequence as a list of n x 3 frames.");

  m.def("read_pcseq", [](const std::string& path) { return to_arrays(coordinates_of(read_pcseq(path))); },
        py::arg("path"));
  m.def("write_pcseq", [](const std::string& path, const std::vector<Array>& frames) {
    write_pcseq(path, sequence_from(to_frames(frames)));
  }, py::arg("path"), py::arg("frames"));

  m.def("preset", [](const std::string& name, const std::string& cell, std::size_t points) {
    return to_text(preset(name, cell, points));
  }, py::arg("name"), py::arg("cell") = "lstm", py::arg("points") = 128,
        "Config text of mnist-basic, mnist-advanced or driving-advanced.");

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& config_text, std::uint64_t seed) {
             return Model(parse_model_config(config_text), seed);
           }), py::arg("config"), py::arg("seed") = 0)
      .def_static("from_checkpoint", [](const std::string& path) {
        const Checkpoint c = load_checkpoint(path);
        auto model = std::make_unique<Model>(c.config, 0);
        load_parameters(*model, c);
        return model;
      }, py::arg("path"))
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("config", [](const Model& model) { return to_text(model.config()); })
      .def("predict", [](const Model& model, const std::vector<Array>& inputs,
                         std::size_t horizon, std::uint64_t seed) {
        const std::vector<Tensor> frames = to_frames(inputs);
        if (frames.empty()) throw ContractError("predict needs at least one input frame");
        Tape tape(false);
        Rng rng(seed);
        const EncoderState state = model.encode(tape, frames, rng);
        const Rollout r = model.predict(tape, state, tape.constant(frames.back()), horizon, rng);
        std::vector<Tensor> out;
        for (const Var& v : r.clouds) out.push_back(v.value());
        return to_arrays(out);
      }, py::arg("inputs"), py::arg("horizon"), py::arg("seed") = 0,
           "Encodes the input frames and returns `horizon` predicted frames.");
}

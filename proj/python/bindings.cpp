#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "gfbs/errors.hpp"
#include "gfbs/oracle.hpp"
#include "gfbs/pipeline.hpp"

namespace py = pybind11;
using namespace gfbs;

namespace {

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw ConfigError("dtype must be f32 or f64");
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  const auto v = t.to_vector();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a, DType dtype) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_values(shape, std::span<const double>(a.data(), static_cast<std::size_t>(a.size())), dtype);
}

py::list history_rows(const History& h) {
  py::list rows;
  for (const auto& r : h.rows) {
    py::dict d;
    d["epoch"] = r.epoch;
    d["split"] = r.split;
    d["loss"] = r.loss;
    d["metric"] = r.metric;
    rows.append(d);
  }
  return rows;
}

const Split& pick_split(const Dataset& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "test") return data.test;
  throw ConfigError("split must be 'train' or 'test'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Channel saliency scoring and structured pruning for Conv-BN networks";

  auto base = py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  (void)base;

  py::class_<Dataset>(m, "Dataset")
      .def_static("load", &load_dataset, py::arg("descriptor"),
                  "Preset name (shapes, shapes-small, denoise, denoise-small) or JSON descriptor path")
      .def_property_readonly("num_classes", [](const Dataset& d) { return d.num_classes; })
      .def_property_readonly("is_denoising", &Dataset::is_denoising)
      .def_property_readonly("train_size", [](const Dataset& d) { return d.train.size(); })
      .def_property_readonly("test_size", [](const Dataset& d) { return d.test.size(); })
      .def("images", [](const Dataset& d, const std::string& split) { return to_numpy(pick_split(d, split).images); },
           py::arg("split") = "train");

  py::class_<Network>(m, "Network")
      .def_static(
          "build",
          [](const std::string& spec, std::uint64_t seed, const std::string& dtype) {
            return Network::build(NetworkSpec::parse(spec), seed, parse_dtype(dtype));
          },
          py::arg("spec"), py::arg("seed") = 0, py::arg("dtype") = "f32")
      .def_static("load", [](const std::string& path) { return load_checkpoint(path); })
      .def("save", [](const Network& n, const std::string& path) { save_checkpoint(n, path); })
      .def("clone", &Network::clone)
      .def_property_readonly("spec", [](const Network& n) { return n.spec().to_text(); })
      .def_property_readonly("channels",
                             [](const Network& n) {
                               std::vector<std::int64_t> c;
                               for (const auto& l : n.layers()) c.push_back(l.channels);
                               return c;
                             })
      .def("flops", [](const Network& n) { return count_flops(n).total_flops; })
      .def("params", [](const Network& n) { return count_flops(n).total_params; })
      .def(
          "predict",
          [](Network& n, const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
            return to_numpy(predict(n, from_numpy(x, n.dtype())));
          },
          py::arg("inputs"), "Eval-mode forward on an [N, C, H, W] array");

  py::class_<SaliencyRecord>(m, "SaliencyRecord")
      .def_property_readonly("layer", [](const SaliencyRecord& r) { return r.channel.layer; })
      .def_property_readonly("channel", [](const SaliencyRecord& r) { return r.channel.channel; })
      .def_readonly("gamma", &SaliencyRecord::gamma)
      .def_readonly("grad_gamma", &SaliencyRecord::grad_gamma)
      .def_readonly("beta", &SaliencyRecord::beta)
      .def_readonly("gamma_n", &SaliencyRecord::gamma_n)
      .def_readonly("grad_gamma_n", &SaliencyRecord::grad_gamma_n)
      .def_readonly("beta_n", &SaliencyRecord::beta_n)
      .def_readonly("score", &SaliencyRecord::score)
      .def_readonly("group", &SaliencyRecord::group_id)
      .def_readonly("rank", &SaliencyRecord::rank)
      .def("__repr__", [](const SaliencyRecord& r) {
        return "<SaliencyRecord layer=" + std::to_string(r.channel.layer) + " channel=" +
               std::to_string(r.channel.channel) + " score=" + std::to_string(r.score) + ">";
      });

  m.def(
      "train",
      [](Network& net, const Dataset& data, const std::string& config_json) {
        auto cfg = config_json.empty() ? TrainConfig{} : TrainConfig::from_json(config_json);
        return history_rows(train(net, data, cfg));
      },
      py::arg("net"), py::arg("data"), py::arg("config") = "",
      "Trains in place; config is a JSON object with TrainConfig keys. Returns metric rows.");

  m.def(
      "evaluate",
      [](Network& net, const Dataset& data, const std::string& split) {
        const auto r = evaluate(net, pick_split(data, split), default_loss(data));
        return py::make_tuple(r.loss, r.metric);
      },
      py::arg("net"), py::arg("data"), py::arg("split") = "test", "Returns (loss, metric).");

  m.def(
      "saliency",
      [](Network& net, const Dataset& data, double lambda, const std::string& criterion, int batch_size,
         std::uint64_t seed, int num_batches) {
        PruneConfig cfg;
        cfg.lambda = lambda;
        cfg.criterion = parse_criterion(criterion);
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        cfg.num_batches = num_batches;
        return compute_saliency(net, data.train, default_loss(data), cfg);
      },
      py::arg("net"), py::arg("data"), py::arg("lam") = 0.05, py::arg("criterion") = "gfbs",
      py::arg("batch_size") = 64, py::arg("seed") = 0, py::arg("num_batches") = 1);

  m.def(
      "plan",
      [](const Network& net, const std::vector<SaliencyRecord>& records, double tau, int min_keep,
         std::optional<double> flops_target) {
        PruneConfig cfg;
        cfg.tau = tau;
        cfg.min_keep = min_keep;
        const auto plan = flops_target ? plan_for_flops_reduction(net, records, cfg, *flops_target)
                                       : plan_prune(net, records, cfg);
        return plan_to_json(plan);
      },
      py::arg("net"), py::arg("records"), py::arg("tau") = 0.5, py::arg("min_keep") = 4,
      py::arg("flops_target") = py::none(), "Returns the plan as JSON text.");

  m.def(
      "apply_prune",
      [](const Network& net, const std::string& plan_json) { return apply_prune(net, plan_from_json(plan_json)); },
      py::arg("net"), py::arg("plan"));

  m.def(
      "oracle",
      [](Network& net, const Dataset& data, int batch_size, std::uint64_t seed) {
        const auto batch = sample_batch(data.train, batch_size, seed, net.dtype());
        py::list out;
        for (const auto& r : oracle_delta_loss(net, batch, default_loss(data))) {
          out.append(py::make_tuple(r.channel.layer, r.channel.channel, r.group_id, r.delta_loss));
        }
        return out;
      },
      py::arg("net"), py::arg("data"), py::arg("batch_size") = 64, py::arg("seed") = 0,
      "Per coupling group: (layer, channel, group, |delta loss|).");

  m.def("spearman", [](const std::vector<double>& a, const std::vector<double>& b) { return spearman(a, b); });
  m.def("psnr", &psnr);
  m.attr("__version__") = build_id();
}

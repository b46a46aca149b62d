#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "hpmi/checkpoint_io.hpp"
#include "hpmi/defense.hpp"
#include "hpmi/harness.hpp"
#include "hpmi/malicious.hpp"
#include "hpmi/metrics.hpp"
#include "hpmi/model.hpp"
#include "hpmi/stats.hpp"
#include "hpmi/surgery.hpp"
#include "hpmi/trigger.hpp"

namespace py = pybind11;
using namespace hpmi;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  std::vector<int64_t> shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<size_t>(i)] = arr.shape(i);
  std::vector<double> data(arr.data(), arr.data() + arr.size());
  return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Dataset dataset_from_lists(const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& inputs,
                           const std::vector<int64_t>& labels) {
  Dataset d;
  for (const auto& arr : inputs) d.inputs.push_back(tensor_from_array(arr));
  d.labels = labels;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "HPMI transformer model-surgery laboratory";

  py::register_exception<ShapeError>(m, "ShapeError");
  py::register_exception<ContractError>(m, "ContractError");
  py::register_exception<ParseError>(m, "ParseError");

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("layers", &ModelConfig::layers)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("head_width", &ModelConfig::head_width)
      .def_readwrite("ffn_width", &ModelConfig::ffn_width)
      .def_readwrite("classes", &ModelConfig::classes)
      .def_readwrite("tokens", &ModelConfig::tokens)
      .def_readwrite("patch_dim", &ModelConfig::patch_dim)
      .def_readwrite("ln_epsilon", &ModelConfig::ln_epsilon)
      .def_property_readonly("model_width", &ModelConfig::model_width)
      .def("validate", &ModelConfig::validate);

  py::class_<TransformerCheckpoint>(m, "Checkpoint")
      .def_readonly("config", &TransformerCheckpoint::config)
      .def_readonly("segmented_head", &TransformerCheckpoint::segmented_head)
      .def("save", [](const TransformerCheckpoint& c, const std::string& path) { save_checkpoint(c, path); })
      .def("tensor", [](const TransformerCheckpoint& c, const std::string& name) {
        py::object out = py::none();
        for_each_tensor(c, [&](const char* n, const Tensor& t) {
          if (name == n) out = array_from_tensor(t);
        });
        if (out.is_none()) throw ContractError("no tensor named " + name);
        return out;
      })
      .def("tensor_names", [](const TransformerCheckpoint& c) {
        std::vector<std::string> names;
        for_each_tensor(c, [&](const char* n, const Tensor&) { names.emplace_back(n); });
        return names;
      });

  m.def("init_checkpoint", &init_checkpoint, py::arg("config"), py::arg("seed"));
  m.def("load_checkpoint", py::overload_cast<const std::string&>(&load_checkpoint), py::arg("path"));
  m.def("malicious_config_for", &malicious_config_for, py::arg("target"));

  m.def(
      "forward_logits",
      [](const TransformerCheckpoint& c, const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return array_from_tensor(forward_logits(c, tensor_from_array(x)));
      },
      py::arg("checkpoint"), py::arg("patches"));
  m.def(
      "predict",
      [](const TransformerCheckpoint& c, const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return predict(c, tensor_from_array(x));
      },
      py::arg("checkpoint"), py::arg("patches"));

  m.def(
      "train_classifier",
      [](const TransformerCheckpoint& start, const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& inputs,
         const std::vector<int64_t>& labels, int64_t epochs, double lr, int64_t batch_size, uint64_t seed) {
        TrainOptions opts;
        opts.epochs = epochs;
        opts.lr = lr;
        opts.batch_size = batch_size;
        opts.seed = seed;
        TrainResult r = train_classifier(start, dataset_from_lists(inputs, labels), opts);
        return py::make_tuple(std::move(r.checkpoint), r.accuracy_history);
      },
      py::arg("start"), py::arg("inputs"), py::arg("labels"), py::arg("epochs"), py::arg("lr"),
      py::arg("batch_size") = 32, py::arg("seed") = 0);

  py::class_<SurgeryPlan>(m, "SurgeryPlan")
      .def_readonly("head_index", &SurgeryPlan::head_index)
      .def_readonly("target_class", &SurgeryPlan::target_class)
      .def_readonly("offset", &SurgeryPlan::offset)
      .def_readonly("attn_lo", &SurgeryPlan::attn_lo)
      .def_readonly("attn_hi", &SurgeryPlan::attn_hi)
      .def_readonly("ffn_lo", &SurgeryPlan::ffn_lo)
      .def_readonly("ffn_hi", &SurgeryPlan::ffn_hi);
  m.def("make_surgery_plan", &make_surgery_plan, py::arg("config"), py::arg("head_index"), py::arg("target_class"),
        py::arg("offset"));

  m.def("prune_head", &prune_head, py::arg("checkpoint"), py::arg("head_index"));
  m.def(
      "scan_prune_targets",
      [](const TransformerCheckpoint& c, const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& inputs,
         const std::vector<int64_t>& labels) {
        const PruneScanReport r = scan_prune_targets(c, dataset_from_lists(inputs, labels));
        return py::dict(py::arg("baseline_accuracy") = r.baseline_accuracy,
                        py::arg("per_head_accuracy") = r.per_head_accuracy, py::arg("per_head_cad") = r.per_head_cad,
                        py::arg("selected_head") = r.selected_head);
      },
      py::arg("checkpoint"), py::arg("inputs"), py::arg("labels"));
  m.def("inject_head", &inject_head, py::arg("pruned"), py::arg("malicious"), py::arg("plan"),
        py::arg("signed_routing") = false);
  m.def("extract_head", &extract_head, py::arg("checkpoint"), py::arg("head_index"));
  m.def(
      "verify_theorem1",
      [](const TransformerCheckpoint& pruned, const TransformerCheckpoint& backdoored,
         const TransformerCheckpoint& malicious, int64_t target_class,
         const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& inputs, double tolerance) {
        std::vector<Tensor> xs;
        for (const auto& arr : inputs) xs.push_back(tensor_from_array(arr));
        const TheoremReport r = verify_theorem1(pruned, backdoored, malicious, target_class, xs, tolerance);
        return py::dict(py::arg("max_off_channel_dev") = r.max_off_channel_dev,
                        py::arg("max_on_channel_dev") = r.max_on_channel_dev, py::arg("n_inputs") = r.n_inputs,
                        py::arg("pass_") = r.pass);
      },
      py::arg("pruned"), py::arg("backdoored"), py::arg("malicious"), py::arg("target_class"), py::arg("inputs"),
      py::arg("tolerance") = 1e-9);
  m.def("check_static_isolation", [](const TransformerCheckpoint& c, int64_t head) {
    const IsolationReport r = check_static_isolation(c, head);
    return py::make_tuple(r.pass, r.max_abs_coupling);
  });

  py::class_<Trigger>(m, "Trigger")
      .def_property_readonly("mask", [](const Trigger& t) { return array_from_tensor(t.mask); })
      .def_property_readonly("pattern", [](const Trigger& t) { return array_from_tensor(t.pattern); });
  m.def("make_patch_trigger", &make_patch_trigger, py::arg("num_patches"), py::arg("patch_dim"), py::arg("seed"));
  m.def(
      "make_blend_trigger",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pattern, double alpha) {
        return make_blend_trigger(tensor_from_array(pattern), alpha);
      },
      py::arg("pattern"), py::arg("alpha") = 0.2);
  m.def(
      "apply_trigger",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, const Trigger& t) {
        return array_from_tensor(apply_trigger(tensor_from_array(x), t));
      },
      py::arg("x"), py::arg("trigger"));

  m.def("select_offset", &select_offset, py::arg("margins"), py::arg("tau"), py::arg("k"));
  m.def("standard_normal_quantile", &standard_normal_quantile, py::arg("p"));
  m.def("anomaly_index", &anomaly_index, py::arg("values"));
  m.def(
      "malicious_scalar",
      [](const TransformerCheckpoint& c, const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return malicious_scalar(c, tensor_from_array(x));
      },
      py::arg("malicious"), py::arg("patches"));

  m.def(
      "run_hpmi",
      [](const std::string& config_json) {
        const ExperimentConfig cfg = parse_experiment_config(nlohmann::json::parse(config_json));
        return run_hpmi(cfg).doc.dump(2);
      },
      py::arg("config_json"), "Run the full pipeline; returns the report as a JSON string.");
  m.def(
      "run_dp_baseline",
      [](const std::string& config_json) {
        const ExperimentConfig cfg = parse_experiment_config(nlohmann::json::parse(config_json));
        return run_dp_baseline(cfg).doc.dump(2);
      },
      py::arg("config_json"));
}

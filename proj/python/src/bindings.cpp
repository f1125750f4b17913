#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dsmil/data.hpp"
#include "dsmil/errors.hpp"
#include "dsmil/eval.hpp"
#include "dsmil/harness.hpp"
#include "dsmil/model.hpp"
#include "dsmil/snapshot.hpp"

namespace py = pybind11;
using namespace dsmil;

namespace {

std::string setting_text(const py::handle& value) {
  if (py::isinstance<py::bool_>(value)) return value.cast<bool>() ? "true" : "false";
  return py::str(value).cast<std::string>();
}

RunConfig make_config(const py::kwargs& settings) {
  RunConfig config;
  for (const auto& [key, value] : settings) apply_setting(config, key.cast<std::string>(), setting_text(value));
  config.validate();
  return config;
}

std::vector<double> tensor_values(const Tensor& t) { return t.values(); }

py::dict aggregates_dict(const std::map<std::string, MeanStd>& aggs) {
  py::dict out;
  for (const auto& [name, a] : aggs) out[py::str(name)] = py::make_tuple(a.mean, a.std, a.count);
  return out;
}

}  // namespace

PYBIND11_MODULE(_dsmil, m) {
  m.doc() = "Dual-stream multiple-instance learning toolkit";
  m.attr("__version__") = std::string(toolkit_version());

  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<DomainError>(m, "DomainError", base);
  py::register_exception<UsageError>(m, "UsageError", base);
  py::register_exception<DataError>(m, "DataError", base);
  py::register_exception<FormatError>(m, "FormatError", base);

  // Data

  py::class_<Bag>(m, "Bag")
      .def(py::init([](std::string bag_id, int label, std::vector<Instance> instances,
                       std::optional<std::vector<int>> instance_labels) {
             return Bag{std::move(bag_id), label, std::move(instances), std::move(instance_labels)};
           }),
           py::arg("bag_id"), py::arg("label"), py::arg("instances"), py::arg("instance_labels") = py::none())
      .def_readwrite("bag_id", &Bag::bag_id)
      .def_readwrite("label", &Bag::label)
      .def_readwrite("instances", &Bag::instances)
      .def_readwrite("instance_labels", &Bag::instance_labels)
      .def("__len__", &Bag::size)
      .def("__eq__", [](const Bag& a, const Bag& b) { return a == b; })
      .def("__repr__", [](const Bag& b) {
        return "Bag(" + b.bag_id + ", label=" + std::to_string(b.label) + ", size=" + std::to_string(b.size()) + ")";
      });

  py::class_<Dataset>(m, "Dataset")
      .def(py::init([](std::vector<Bag> bags, std::string name) {
             Dataset d;
             d.name = std::move(name);
             d.feature_dim = bags.empty() || bags[0].instances.empty() ? 0 : bags[0].instances[0].size();
             d.bags = std::move(bags);
             return d;
           }),
           py::arg("bags"), py::arg("name") = "")
      .def_readwrite("name", &Dataset::name)
      .def_readwrite("feature_dim", &Dataset::feature_dim)
      .def_readwrite("bags", &Dataset::bags)
      .def_readonly("notes", &Dataset::notes)
      .def("__len__", &Dataset::size)
      .def("positive_count", &Dataset::positive_count)
      .def("instance_count", &Dataset::instance_count)
      .def("validate", &Dataset::validate)
      .def("subset", [](const Dataset& d, const std::vector<std::size_t>& idx) { return d.subset(idx); });

  m.def("bag_label_from_instances", [](const std::vector<int>& labels) { return bag_label_from_instances(labels); },
        py::arg("instance_labels"));

  py::class_<CsvSchema>(m, "CsvSchema")
      .def(py::init<>())
      .def_readwrite("bag_id_column", &CsvSchema::bag_id_column)
      .def_readwrite("label_column", &CsvSchema::label_column)
      .def_readwrite("feature_first", &CsvSchema::feature_first)
      .def_readwrite("feature_last", &CsvSchema::feature_last)
      .def_readwrite("label_map", &CsvSchema::label_map)
      .def_readwrite("header", &CsvSchema::header)
      .def_readwrite("delimiter", &CsvSchema::delimiter);
  m.def("load_csv_schema", &load_csv_schema, py::arg("path"));
  m.def("parse_grouped_csv", &parse_grouped_csv, py::arg("path"), py::arg("schema") = CsvSchema{});

  m.def(
      "gen_synthetic_bags",
      [](std::size_t num_bags, std::size_t dim, double mean_size, double pos_instance_rate, std::uint64_t seed) {
        return gen_synthetic_bags({num_bags, dim, mean_size, pos_instance_rate, seed});
      },
      py::arg("num_bags") = 100, py::arg("dim") = 10, py::arg("mean_size") = 10.0,
      py::arg("pos_instance_rate") = 0.1, py::arg("seed") = 0);

  m.def("read_bags", &read_bags, py::arg("path"));
  m.def("write_bags", &write_bags, py::arg("dataset"), py::arg("path"));

  // Evaluation

  m.def("auc", [](const std::vector<double>& s, const std::vector<int>& y) { return auc(s, y); }, py::arg("scores"),
        py::arg("labels"));

  py::class_<ConfusionMetrics>(m, "ConfusionMetrics")
      .def_readonly("accuracy", &ConfusionMetrics::accuracy)
      .def_readonly("precision", &ConfusionMetrics::precision)
      .def_readonly("recall", &ConfusionMetrics::recall)
      .def_readonly("f_score", &ConfusionMetrics::f_score);
  m.def(
      "confusion_metrics",
      [](const std::vector<int>& p, const std::vector<int>& y) { return confusion_metrics(p, y); },
      py::arg("predictions"), py::arg("labels"));

  py::class_<FoldPlan>(m, "FoldPlan")
      .def_readonly("k", &FoldPlan::k)
      .def_readonly("seed", &FoldPlan::seed)
      .def_readonly("assignments", &FoldPlan::assignments)
      .def("test_indices", &FoldPlan::test_indices)
      .def("train_indices", &FoldPlan::train_indices)
      .def("fold_size", &FoldPlan::fold_size);
  m.def("kfold_split", &kfold_split, py::arg("num_bags"), py::arg("k"), py::arg("seed"));

  m.def(
      "aggregate",
      [](const std::vector<double>& v) {
        const MeanStd a = aggregate(v);
        return py::make_tuple(a.mean, a.std);
      },
      py::arg("values"), "Mean and sample standard deviation.");

  py::class_<FoldRecord>(m, "FoldRecord")
      .def_readonly("run", &FoldRecord::run)
      .def_readonly("fold", &FoldRecord::fold)
      .def_readonly("num_bags", &FoldRecord::num_bags)
      .def_readonly("accuracy", &FoldRecord::accuracy)
      .def_readonly("auc", &FoldRecord::auc)
      .def_readonly("precision", &FoldRecord::precision)
      .def_readonly("recall", &FoldRecord::recall)
      .def_readonly("f_score", &FoldRecord::f_score);

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("config", &EvalReport::config)
      .def_readonly("records", &EvalReport::records)
      .def("fold_aggregates", [](const EvalReport& r) { return aggregates_dict(r.fold_aggregates()); })
      .def("run_aggregates", [](const EvalReport& r) { return aggregates_dict(r.run_aggregates()); })
      .def("to_json", &serialize_report)
      .def_static("from_json", &parse_report, py::arg("text"));

  // Model

  py::class_<BagForwardResult>(m, "BagForward")
      .def_readonly("c_m", &BagForwardResult::c_m)
      .def_readonly("c_b", &BagForwardResult::c_b)
      .def_readonly("c_hat", &BagForwardResult::c_hat)
      .def_readonly("m_index", &BagForwardResult::m_index)
      .def_readonly("inner_products", &BagForwardResult::inner_products)
      .def_property_readonly("attention", [](const BagForwardResult& r) { return tensor_values(r.attention); })
      .def_property_readonly("instance_scores",
                             [](const BagForwardResult& r) { return tensor_values(r.instance_scores); })
      .def_property_readonly("bag_embedding", [](const BagForwardResult& r) { return tensor_values(r.bag_embedding); });

  py::class_<RunConfig>(m, "RunConfig", "Experiment settings; keyword names match the config-file keys.")
      .def(py::init(&make_config))
      .def(
          "set", [](RunConfig& c, const std::string& key, const py::object& value) {
            apply_setting(c, key, setting_text(value));
            c.validate();
          },
          py::arg("key"), py::arg("value"))
      .def("describe", &RunConfig::describe)
      .def_property_readonly("epochs", [](const RunConfig& c) { return c.epochs; })
      .def_property_readonly("lr", [](const RunConfig& c) { return c.lr; })
      .def_property_readonly("lambda_", [](const RunConfig& c) { return c.lambda; })
      .def_property_readonly("model", [](const RunConfig& c) { return c.model; })
      .def_property_readonly("seed", [](const RunConfig& c) { return c.seed; });

  py::class_<MilModel>(m, "Model")
      .def(py::init([](const RunConfig& config, std::size_t input_dim, std::uint64_t seed) {
             return make_model(config, input_dim, seed);
           }),
           py::arg("config"), py::arg("input_dim"), py::arg("seed") = 0)
      .def_property_readonly("kind", &MilModel::kind_name)
      .def_property_readonly("is_dsmil", &MilModel::is_dsmil)
      .def(
          "predict", [](const MilModel& model, const std::vector<Instance>& instances) { return model.predict(instances); },
          py::arg("instances"), "Bag logit.")
      .def(
          "forward",
          [](const MilModel& model, const std::vector<Instance>& instances) {
            if (!model.is_dsmil()) throw UsageError("forward: only the dual-stream model exposes stream outputs");
            return forward_bag(instances, model.dsmil());
          },
          py::arg("instances"))
      .def(
          "score_instance",
          [](const MilModel& model, const std::vector<double>& x) {
            if (!model.is_dsmil()) throw UsageError("score_instance: only the dual-stream model has W0");
            return score_instance(x, model.dsmil());
          },
          py::arg("instance"))
      .def(
          "train",
          [](MilModel& model, const Dataset& dataset, const RunConfig& config, std::uint64_t seed) {
            return train_model(dataset, model, config, seed).epoch_losses;
          },
          py::arg("dataset"), py::arg("config"), py::arg("seed") = 0, py::call_guard<py::gil_scoped_release>(),
          "Trains in place; returns the mean loss of each epoch.")
      .def("predict_logits", &predict_logits, py::arg("dataset"))
      .def(
          "evaluate", [](const MilModel& model, const Dataset& d) { return evaluate_model(model, d); },
          py::arg("dataset"))
      .def(
          "save", [](const MilModel& model, const std::filesystem::path& path, std::uint64_t seed) {
            save_snapshot(model, seed, path);
          },
          py::arg("path"), py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& path) { return load_snapshot(path); }, py::arg("path"));

  m.def("run_cross_validation", &run_cross_validation, py::arg("config"), py::arg("dataset"),
        py::call_guard<py::gil_scoped_release>());
}

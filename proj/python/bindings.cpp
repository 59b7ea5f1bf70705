#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "groundseg/train.hpp"

namespace py = pybind11;
using namespace groundseg;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

Mask to_mask(const py::array& a) {
  const auto arr = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>::ensure(a);
  if (!arr || arr.ndim() != 2) throw InvalidInput("mask must be a 2-d array");
  std::vector<std::uint8_t> d(arr.data(), arr.data() + arr.size());
  for (auto& v : d) v = v ? 1 : 0;
  return Mask(static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)), std::move(d));
}

py::dict split_summary(const DatasetSplits& s) {
  py::dict out;
  for (const char* name : {"train", "val", "test"}) {
    py::list patches;
    for (const auto& p : split_by_name(s, name)) {
      py::dict d;
      d["patch_id"] = p.patch_id;
      d["slide_id"] = p.slide_id;
      d["questions"] = p.qa.size();
      patches.append(d);
    }
    out[name] = patches;
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_groundseg, m) {
  m.doc() = "Grounded segmentation toy model: data, training, evaluation";

  py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);

  m.def("default_config", [] { return to_py(RunConfig{}.to_json()); });

  m.def(
      "generate_dataset",
      [](const std::filesystem::path& out, int slides, int patches_per_slide, std::uint64_t seed) {
        const auto splits = split_dataset(generate_dataset(slides, patches_per_slide, seed), {8, 1, 1}, seed);
        persist_dataset(splits, out);
        return split_summary(splits);
      },
      py::arg("out"), py::arg("slides"), py::arg("patches_per_slide"), py::arg("seed"),
      "Generates, splits 8:1:1 and writes a dataset; returns patch and slide ids per split.");

  m.def(
      "dataset_summary", [](const std::filesystem::path& dir) { return split_summary(load_dataset(dir)); },
      py::arg("dir"));

  m.def(
      "train",
      [](const py::object& config, const std::filesystem::path& out) {
        const auto cfg = RunConfig::from_json(from_py(config));
        TrainResult r = [&] {
          py::gil_scoped_release release;
          return train(cfg);
        }();
        save_checkpoint(r.checkpoint, out);
        save_train_log(r.log, out / "train_log.jsonl");
        py::list steps;
        for (const auto& s : r.log.steps) {
          py::dict d;
          d["step"] = s.step;
          d["mask"] = s.mask;
          d["txt"] = s.txt;
          d["con"] = s.con;
          d["total"] = s.total;
          steps.append(d);
        }
        return steps;
      },
      py::arg("config"), py::arg("out"),
      "Trains from a config dict (data_dir must be set), writes the checkpoint to `out`, returns per-step losses.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& ckpt, const std::string& split, const std::string& task,
         std::optional<std::filesystem::path> data_dir) {
        const auto report = [&] {
          py::gil_scoped_release release;
          const auto bundle = load_checkpoint(ckpt);
          return data_dir ? evaluate(bundle, load_dataset(*data_dir), split, parse_task(task))
                          : evaluate(bundle, split, parse_task(task));
        }();
        return to_py(report.to_json());
      },
      py::arg("ckpt"), py::arg("split"), py::arg("task"), py::arg("data_dir") = py::none());

  m.def(
      "checkpoint_arrays",
      [](const std::filesystem::path& dir) {
        const auto bundle = load_checkpoint(dir);
        py::dict out;
        for (const auto* p : bundle.model.parameters()) {
          std::vector<py::ssize_t> shape(p->value.shape.begin(), p->value.shape.end());
          py::array_t<float> a(shape);
          std::copy(p->value.data.begin(), p->value.data.end(), a.mutable_data());
          out[py::str(p->name)] = a;
        }
        return out;
      },
      py::arg("dir"));

  m.def("iou", [](const py::array& pred, const py::array& gt) { return iou(to_mask(pred), to_mask(gt)); });
  m.def("bleu4", &bleu4, py::arg("candidate"), py::arg("reference"));
  m.def("token_f1", &token_f1, py::arg("candidate"), py::arg("reference"));
  m.def("fragment_count", [](const py::array& mask) { return fragment_count(to_mask(mask)); });

  m.def("grad_check_fixtures", &grad_check_fixture_names);
  m.def(
      "grad_check",
      [](const std::string& name) {
        const auto r = [&] {
          py::gil_scoped_release release;
          return run_grad_check_fixture(name);
        }();
        py::dict d;
        d["fixture"] = r.fixture;
        d["max_rel_error"] = r.max_rel_error;
        d["checked"] = r.checked;
        d["finite"] = r.finite;
        d["tolerance"] = grad_check_tolerance(name);
        d["passed"] = r.finite && r.max_rel_error < grad_check_tolerance(name);
        return d;
      },
      py::arg("name"));
}

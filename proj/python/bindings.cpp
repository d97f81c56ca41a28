#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <utility>
#include <vector>

#include "questmf/data.hpp"
#include "questmf/errors.hpp"
#include "questmf/losses.hpp"
#include "questmf/metrics.hpp"
#include "questmf/model.hpp"
#include "questmf/training.hpp"

namespace py = pybind11;

namespace {

using namespace questmf;

py::dict triple_dict(const MetricTriple& t) {
  py::dict d;
  d["ccc"] = t.ccc;
  d["rmse"] = t.rmse;
  d["mae"] = t.mae;
  return d;
}

}  // namespace

PYBIND11_MODULE(questmf, m) {
  m.doc() = "Question-wise multimodal PHQ-8 severity scoring";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DataError>(m, "DataError");

  m.def(
      "oll_loss",
      [](const std::vector<double>& probs, int y, double alpha) {
        return oll_loss(probs, y, alpha);
      },
      py::arg("probs"), py::arg("y"), py::arg("alpha") = 1.0);

  m.def(
      "imboll_loss",
      [](const std::vector<double>& probs, int y, double alpha, double beta, double weight_y) {
        return imboll_loss(probs, y, alpha, beta, weight_y);
      },
      py::arg("probs"), py::arg("y"), py::arg("alpha") = 1.0, py::arg("beta") = 0.5,
      py::arg("weight_y") = 1.0);

  m.def("mse_loss", &mse_loss, py::arg("prediction"), py::arg("target"));

  m.def(
      "class_weights",
      [](const std::array<std::int64_t, kNumClasses>& counts) {
        const auto w = class_weights(counts);
        return std::vector<double>(w.begin(), w.end());
      },
      py::arg("counts"));

  m.def(
      "ccc",
      [](const std::vector<double>& x, const std::vector<double>& y) { return ccc(x, y); },
      py::arg("x"), py::arg("y"));
  m.def(
      "rmse",
      [](const std::vector<double>& x, const std::vector<double>& y) { return rmse(x, y); },
      py::arg("x"), py::arg("y"));
  m.def(
      "mae",
      [](const std::vector<double>& x, const std::vector<double>& y) { return mae(x, y); },
      py::arg("x"), py::arg("y"));

  m.def(
      "format_mean_std",
      [](double mean, double std, int decimals) {
        return format_mean_std(MeanStd{mean, std}, decimals);
      },
      py::arg("mean"), py::arg("std"), py::arg("decimals") = 3);

  m.def(
      "synth_write",
      [](const std::string& out_dir, std::size_t train_sessions, std::size_t val_sessions,
         std::size_t test_sessions, std::uint64_t seed, double noise, std::size_t min_turns,
         std::size_t max_turns, bool test_item_labels) {
        SynthConfig cfg;
        cfg.train_sessions = train_sessions;
        cfg.val_sessions = val_sessions;
        cfg.test_sessions = test_sessions;
        cfg.seed = seed;
        cfg.noise_scale = noise;
        cfg.min_turns = min_turns;
        cfg.max_turns = max_turns;
        cfg.test_item_labels = test_item_labels;
        synth_write(out_dir, cfg);
      },
      py::arg("out_dir"), py::arg("train_sessions") = 163, py::arg("val_sessions") = 56,
      py::arg("test_sessions") = 56, py::arg("seed") = 7, py::arg("noise") = 1.0,
      py::arg("min_turns") = 6, py::arg("max_turns") = 24,
      py::arg("test_item_labels") = false);

  m.def(
      "dataset_summary",
      [](const std::string& manifest) {
        const Dataset ds = load_dataset(manifest);
        py::dict d;
        d["sessions"] = ds.sessions.size();
        d["train"] = ds.split_sessions(Split::train).size();
        d["val"] = ds.split_sessions(Split::val).size();
        d["test"] = ds.split_sessions(Split::test).size();
        py::dict w;
        for (const auto& [mod, width] : ds.widths()) w[name(mod)] = width;
        d["widths"] = w;
        return d;
      },
      py::arg("manifest"));

  m.def(
      "train_run",
      [](const std::string& manifest, const std::string& config_json,
         const std::string& run_root) {
        const TrainConfig cfg = train_config_from_json(config_json);
        const Dataset ds = load_dataset(manifest);
        const RunResult rr = run_single_seed(ds, cfg, run_root);
        py::dict d;
        d["run_dir"] = rr.run_dir.string();
        d["val"] = triple_dict(rr.val.total);
        d["test"] = triple_dict(rr.test.total);
        return d;
      },
      py::arg("manifest"), py::arg("config_json"), py::arg("run_root"));

  m.def(
      "predict_totals",
      [](const std::string& run_dir, const std::string& manifest, const std::string& split) {
        LoadedModel lm = load_final_model(run_dir);
        const Dataset ds = load_dataset(manifest);
        const auto sp = split_from(split);
        if (!sp) throw ConfigError("unknown split: " + split);
        const auto sessions = ds.split_sessions(*sp);
        const std::vector<Modality>& mods = lm.model.nets[0].spec().modalities;
        std::vector<std::pair<std::string, double>> out;
        for (std::size_t start = 0; start < sessions.size(); start += lm.cfg.batch_size) {
          const std::size_t bsz = std::min(lm.cfg.batch_size, sessions.size() - start);
          std::vector<const Session*> chunk(
              sessions.begin() + static_cast<std::ptrdiff_t>(start),
              sessions.begin() + static_cast<std::ptrdiff_t>(start + bsz));
          PaddedBatch batch = build_padded_batch(chunk, mods, lm.cfg.max_turns);
          if (lm.model.framework == Framework::questmf) {
            for (const SessionPrediction& p : questmf_forward(lm.model, batch))
              out.emplace_back(p.id, p.total);
          } else {
            const std::vector<double> totals = total_forward(lm.model, batch);
            for (std::size_t i = 0; i < bsz; ++i) out.emplace_back(chunk[i]->id, totals[i]);
          }
        }
        return out;
      },
      py::arg("run_dir"), py::arg("manifest"), py::arg("split") = "test");
}

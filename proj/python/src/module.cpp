#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fpeft/commands.hpp"

namespace py = pybind11;
using namespace fpeft;

namespace {

CommandArgs make_args(const py::kwargs& kw) {
  CommandArgs a;
  for (const auto& [k, v] : kw) {
    const std::string key = py::str(k);
    if (v.is_none()) continue;
    if (key == "config") a.config = py::str(v);
    else if (key == "seed") a.seed = v.cast<std::uint64_t>();
    else if (key == "mode") a.mode = py::str(v);
    else if (key == "plugin") a.plugin = py::str(v);
    else if (key == "out") a.out = py::str(v);
    else if (key == "resume") a.resume = py::str(v);
    else if (key == "checkpoint") a.checkpoint = py::str(v);
    else if (key == "profile") a.profile = py::str(v);
    else if (key == "horizon") a.horizon = v.cast<int>();
    else throw ConfigError("unknown argument '" + key + "'");
  }
  return a;
}

// Commands return their JSON as text; the Python side decodes it.
std::string run(const std::string& name, const py::kwargs& kw) {
  const CommandArgs a = make_args(kw);
  nlohmann::json j;
  py::gil_scoped_release release;
  if (name == "gen-data") j = cmd_gen_data(a);
  else if (name == "pretrain") j = cmd_pretrain(a);
  else if (name == "finetune") j = cmd_finetune(a);
  else if (name == "eval") j = cmd_eval(a);
  else if (name == "params") j = cmd_params(a);
  else if (name == "ablate") j = cmd_ablate(a);
  else throw ConfigError("unknown command '" + name + "'");
  return j.dump();
}

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> points(const std::vector<Point2>& p) {
  py::array_t<float> a({static_cast<py::ssize_t>(p.size()), py::ssize_t{2}});
  auto m = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m(i, 0) = p[i].x;
    m(i, 1) = p[i].y;
  }
  return a;
}

py::array_t<bool> flags(const std::vector<std::uint8_t>& v) {
  py::array_t<bool> a(static_cast<py::ssize_t>(v.size()));
  auto m = a.mutable_unchecked<1>();
  for (std::size_t i = 0; i < v.size(); ++i) m(i) = v[i] != 0;
  return a;
}

py::list scenes_to_py(const std::vector<Scene>& scenes) {
  py::list out;
  for (const auto& s : scenes) {
    py::list agents, lanes;
    for (const auto& a : s.agents)
      agents.append(py::dict(py::arg("history") = points(a.history), py::arg("history_valid") = flags(a.history_valid),
                             py::arg("future") = points(a.future), py::arg("future_valid") = flags(a.future_valid),
                             py::arg("category") = a.category));
    for (const auto& l : s.lanes)
      lanes.append(py::dict(py::arg("points") = points(l.points), py::arg("point_valid") = flags(l.point_valid),
                            py::arg("category") = l.category));
    out.append(py::dict(py::arg("id") = s.id, py::arg("dataset_tag") = s.dataset_tag,
                        py::arg("sample_rate_hz") = s.sample_rate_hz, py::arg("agents") = agents,
                        py::arg("lanes") = lanes));
  }
  return out;
}

py::list predictions_to_py(const std::vector<ForecastOutput>& outs) {
  py::list out;
  for (const auto& o : outs) {
    py::array_t<float> traj({o.N, o.K, o.T, 2});
    std::copy(o.traj.begin(), o.traj.end(), traj.mutable_data());
    py::array_t<float> conf({o.N, o.K});
    std::copy(o.conf.begin(), o.conf.end(), conf.mutable_data());
    out.append(py::dict(py::arg("scene_id") = o.scene_id, py::arg("traj") = traj, py::arg("conf") = conf));
  }
  return out;
}

// traj [S, K, T, 2], conf [S, K], gt [S, T, 2]; every ground-truth step valid.
std::string metrics(F32 traj, F32 conf, F32 gt, int horizon, double miss_threshold) {
  if (traj.ndim() != 4 || traj.shape(3) != 2) throw ShapeError("traj must have shape [S, K, T, 2]");
  const auto S = traj.shape(0), K = traj.shape(1), T = traj.shape(2);
  if (conf.ndim() != 2 || conf.shape(0) != S || conf.shape(1) != K) throw ShapeError("conf must have shape [S, K]");
  if (gt.ndim() != 3 || gt.shape(0) != S || gt.shape(1) != T || gt.shape(2) != 2)
    throw ShapeError("gt must have shape [S, T, 2]");
  std::vector<ForecastOutput> outs(static_cast<std::size_t>(S));
  std::vector<Scene> scenes(static_cast<std::size_t>(S));
  for (py::ssize_t s = 0; s < S; ++s) {
    ForecastOutput& o = outs[static_cast<std::size_t>(s)];
    o.scene_id = static_cast<std::uint64_t>(s);
    o.N = 1;
    o.K = static_cast<int>(K);
    o.T = static_cast<int>(T);
    o.traj.assign(traj.data(s), traj.data(s) + K * T * 2);
    o.conf.assign(conf.data(s), conf.data(s) + K);
    Scene& sc = scenes[static_cast<std::size_t>(s)];
    sc.id = o.scene_id;
    AgentTrack a;
    for (py::ssize_t t = 0; t < T; ++t) a.future.push_back({*gt.data(s, t, 0), *gt.data(s, t, 1)});
    a.future_valid.assign(static_cast<std::size_t>(T), 1);
    sc.agents.push_back(std::move(a));
  }
  return nlohmann::json(compute_metrics(outs, scenes, horizon, miss_threshold)).dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "C++ core of forecast_peft";
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);

  m.def("run", &run, py::arg("command"), "Run a forecast-peft command; returns its JSON as text.");
  m.def("read_scenes", [](const std::string& path) { return scenes_to_py(read_scenes(path)); }, py::arg("path"));
  m.def("read_predictions", [](const std::string& path) { return predictions_to_py(read_predictions(path)); },
        py::arg("path"));
  m.def("metrics", &metrics, py::arg("traj"), py::arg("conf"), py::arg("gt"), py::arg("horizon") = 0,
        py::arg("miss_threshold") = 2.0);
  m.def("cosine_lr", &cosine_lr, py::arg("lr"), py::arg("t"), py::arg("total"));
}

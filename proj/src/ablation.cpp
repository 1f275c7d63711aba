#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "fpeft/harness.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

namespace {

std::string label(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

double metric_of(const AblationRow& r, const std::string& m) {
  if (m == "minADE") return r.metrics.min_ade;
  if (m == "minFDE") return r.metrics.min_fde;
  if (m == "MR") return r.metrics.miss_rate;
  if (m == "b-minFDE") return r.metrics.brier_min_fde;
  if (m == "trainable") return static_cast<double>(r.trainable);
  if (m == "final_loss") return r.final_loss;
  throw ConfigError("unknown ablation metric '" + m + "'");
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

}  // namespace

RunConfig ablation_cell(const RunConfig& cfg, const nlohmann::json& value) {
  RunConfig c = cfg;
  const std::string& axis = cfg.ablation.axis;
  auto as_int = [&] {
    if (!value.is_number_integer()) throw ConfigError("ablation axis " + axis + " needs integer values");
    return value.get<int>();
  };
  if (axis == "prompt_length") {
    c.peft.n_prompt = as_int();
  } else if (axis == "adapter_rank") {
    c.peft.adapter_rank = as_int();
  } else if (axis == "cep_depth") {
    c.peft.cep_depth = as_int();
  } else if (axis == "components") {
    if (!value.is_string()) throw ConfigError("ablation axis components needs string values");
    const std::string v = value.get<std::string>();
    bool cep = false, mcp = false, adapters = false;
    if (v != "none") {
      std::stringstream ss(v);
      std::string part;
      while (std::getline(ss, part, '+')) {
        if (part == "cep") cep = true;
        else if (part == "mcp") mcp = true;
        else if (part == "adapters") adapters = true;
        else throw ConfigError("unknown component '" + part + "' in '" + v + "'");
      }
    }
    if (!cep) c.peft.cep_depth = 0;
    c.peft.mcp = mcp;
    c.peft.adapter_msa = c.peft.adapter_ffn = adapters;
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  c.validate();
  return c;
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const ParameterStore& pretrained,
                                      std::span<const Scene> train_scenes, std::span<const Scene> val_scenes) {
  if (!cfg.ablation.values.is_array() || cfg.ablation.values.empty())
    throw ConfigError("ablation needs a non-empty array of values");
  std::vector<RunConfig> cells;
  for (const auto& v : cfg.ablation.values) cells.push_back(ablation_cell(cfg, v));
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    TrainState s = start_finetune(cells[i], pretrained);
    AblationRow row;
    row.value = cfg.ablation.values[i];
    row.trainable = count_parameters(s.params).trainable;
    train(cells[i], s, train_scenes);
    row.final_loss = s.epoch_loss.empty() ? 0.0 : s.epoch_loss.back();
    row.metrics = run_eval(s.params, cells[i], val_scenes, cells[i].eval_horizon).report;
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json ablation_json(const RunConfig& cfg, std::span<const AblationRow> rows) {
  nlohmann::json out = {{"axis", cfg.ablation.axis}, {"mode", to_string(cfg.train.mode)}, {"rows", nlohmann::json::array()}};
  for (const auto& r : rows)
    out["rows"].push_back({{"value", r.value}, {"trainable", r.trainable}, {"final_loss", r.final_loss}, {"metrics", r.metrics}});
  return out;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::string s = "value,trainable,final_loss,minADE,minFDE,MR,b-minFDE\n";
  for (const auto& r : rows) {
    s += label(r.value) + "," + std::to_string(r.trainable) + "," + num(r.final_loss) + "," + num(r.metrics.min_ade) +
         "," + num(r.metrics.min_fde) + "," + num(r.metrics.miss_rate) + "," + num(r.metrics.brier_min_fde) + "\n";
  }
  return s;
}

std::string ablation_svg(const std::string& axis, std::span<const AblationRow> rows, const std::string& metric) {
  const double W = 480, H = 320, L = 70, R = 20, T = 40, B = 50;
  std::vector<double> ys;
  for (const auto& r : rows) ys.push_back(metric_of(r, metric));
  double lo = ys.empty() ? 0 : *std::min_element(ys.begin(), ys.end());
  double hi = ys.empty() ? 1 : *std::max_element(ys.begin(), ys.end());
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  const std::size_t n = rows.size();
  auto px = [&](std::size_t i) { return n <= 1 ? L + (W - L - R) / 2 : L + (W - L - R) * static_cast<double>(i) / (n - 1); };
  auto py = [&](double v) { return T + (H - T - B) * (hi - v) / (hi - lo); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << xml_escape(metric) << " vs "
    << xml_escape(axis) << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    o << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i)
    o << "<text x=\"" << px(i) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << xml_escape(label(rows[i].value))
      << "</text>\n";
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xml_escape(axis) << "</text>\n";
  if (n > 0) {
    o << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < n; ++i) o << (i ? " " : "") << px(i) << "," << py(ys[i]);
    o << "\"/>\n";
    for (std::size_t i = 0; i < n; ++i)
      o << "<circle cx=\"" << px(i) << "\" cy=\"" << py(ys[i]) << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace fpeft

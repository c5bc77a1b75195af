#pragma once

// Text formats: 9-significant-digit floats, CSV tables, atomic file writes,
// and JSON checkpoints for MEC state and model parameters.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "demkit/adadem.hpp"
#include "demkit/bench.hpp"
#include "demkit/model.hpp"
#include "demkit/search.hpp"

namespace demkit {

using json = nlohmann::json;

inline std::string format_float(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

/// Rounds to the value that format_float prints, so JSON output carries at
/// most 9 significant digits.
inline double round9(double x) { return std::stod(format_float(x)); }

inline std::string join_floats(std::span<const double> xs, char sep = ';') {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) {
      out += sep;
    }
    out += format_float(xs[i]);
  }
  return out;
}

/// Writes to a sibling temp file then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    }
    f << content;
    if (!f) {
      throw std::runtime_error("failed writing " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string reward_curve_csv(const std::vector<RewardPoint>& curve) {
  std::string out = "m,p_max,reward\n";
  for (const auto& pt : curve) {
    out += format_float(pt.m) + ',' + format_float(pt.p_max) + ',' + format_float(pt.reward) + '\n';
  }
  return out;
}

inline constexpr const char* kMetricsHeader =
    "shift,kind,magnitude,level,samples,accuracy,macro_f1,marginal_entropy,kl_output_vs_label,"
    "avg_max_prob,per_class_f1,sorted_class_proportions";

inline std::string metrics_row(const std::string& shift, const std::string& kind,
                               const std::string& magnitude, const std::string& level,
                               const MetricsReport& r) {
  return shift + ',' + kind + ',' + magnitude + ',' + level + ',' + std::to_string(r.samples) +
         ',' + format_float(r.accuracy) + ',' + format_float(r.macro_f1) + ',' +
         format_float(r.marginal_entropy) + ',' + format_float(r.kl_output_vs_label) + ',' +
         format_float(r.avg_max_prob) + ',' + join_floats(r.per_class_f1.span()) + ',' +
         join_floats(r.sorted_class_proportions.span());
}

/// One row per shift (in stream order) followed by an `overall` row.
inline std::string metrics_csv(const std::vector<ShiftOutcome>& shifts, const MetricsReport& overall) {
  std::string out = std::string(kMetricsHeader) + '\n';
  for (std::size_t i = 0; i < shifts.size(); ++i) {
    const auto& s = shifts[i];
    out += metrics_row(std::to_string(i), shift_kind_name(s.shift.kind),
                       format_float(s.shift.magnitude), std::to_string(s.shift.level), s.report) +
           '\n';
  }
  out += metrics_row("overall", "all", "", "", overall) + '\n';
  return out;
}

inline std::string grid_csv(const std::vector<TrialResult>& table) {
  std::string out = "tau,alpha,valid,accuracy\n";
  for (const auto& r : table) {
    out += format_float(r.tau) + ',' + format_float(r.alpha) + ',' + (r.valid ? "1" : "0") + ',' +
           (r.accuracy ? format_float(*r.accuracy) : std::string()) + '\n';
  }
  return out;
}

inline std::string lr_sweep_csv(const LrSweepResult& res) {
  std::string out = "lr,accuracy\n";
  for (const auto& p : res.table) {
    out += format_float(p.lr) + ',' + format_float(p.accuracy) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON checkpoints
// ---------------------------------------------------------------------------

inline json to_json(const MecState& s) {
  return json{{"classes", s.classes()},
              {"momentum", s.momentum()},
              {"steps", s.steps()},
              {"table", std::vector<double>(s.table().flat().begin(), s.table().flat().end())}};
}

inline MecState mec_from_json(const json& j) {
  const auto c = j.at("classes").get<std::size_t>();
  auto table = j.at("table").get<std::vector<double>>();
  if (table.size() != c * c) {
    throw std::invalid_argument("MEC checkpoint table has wrong length");
  }
  return MecState(Matrix(c, c, std::move(table)), j.at("momentum").get<double>(),
                  j.at("steps").get<std::size_t>());
}

template <std::size_t Depth>
json to_json(const FeedForward<Depth>& m) {
  json layers = json::array();
  for (const auto& layer : m.layers) {
    layers.push_back(json{{"rows", layer.w.rows()},
                          {"cols", layer.w.cols()},
                          {"w", std::vector<double>(layer.w.flat().begin(), layer.w.flat().end())},
                          {"b", layer.b.values()}});
  }
  return json{{"kind", Depth == 1 ? "linear" : "mlp"}, {"layers", layers}};
}

template <std::size_t Depth>
FeedForward<Depth> model_from_json(const json& j) {
  const auto& layers = j.at("layers");
  if (layers.size() != Depth) {
    throw std::invalid_argument("model checkpoint has " + std::to_string(layers.size()) +
                                " layers, expected " + std::to_string(Depth));
  }
  FeedForward<Depth> m;
  for (std::size_t l = 0; l < Depth; ++l) {
    const auto rows = layers[l].at("rows").get<std::size_t>();
    const auto cols = layers[l].at("cols").get<std::size_t>();
    m.layers[l].w = Matrix(rows, cols, layers[l].at("w").get<std::vector<double>>());
    m.layers[l].b = Vector(layers[l].at("b").get<std::vector<double>>());
    if (m.layers[l].b.size() != rows) {
      throw std::invalid_argument("model checkpoint bias length mismatch");
    }
    if (l > 0 && cols != m.layers[l - 1].out()) {
      throw std::invalid_argument("model checkpoint layer widths do not chain");
    }
  }
  if (!m.all_finite()) {
    throw std::invalid_argument("model checkpoint contains non-finite parameters");
  }
  return m;
}

} // namespace demkit

#pragma once

// Experiment configuration: strict JSON parsing (unknown keys and wrong types
// are rejected before any computation) into plain structs with defaults.

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "demkit/adadem.hpp"
#include "demkit/bench.hpp"
#include "demkit/em_losses.hpp"
#include "demkit/model.hpp"
#include "demkit/search.hpp"

namespace demkit {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct MixtureConfig {
  std::size_t classes = 10;
  std::size_t dim = 2;
  double radius = 4.0;
  double sigma = 1.0;
  std::size_t source_samples = 5000;
  double source_rho = 1.0;
};

struct StreamConfig {
  ProtocolMode mode = ProtocolMode::single_domain;
  std::vector<ShiftSpec> shifts{ShiftSpec{ShiftKind::feature_noise, 0.9, 4}};
  std::size_t batches_per_shift = 100;
  std::size_t batch_size = 64;
  double label_rho = 1.0;
};

enum class ModelKind { linear, mlp };

struct ModelConfig {
  ModelKind kind = ModelKind::linear;
  std::size_t hidden = 32;
  std::size_t source_epochs = 20;
  double source_lr = 0.1;
  double source_momentum = 0.9;
  std::size_t source_batch_size = 64;
};

enum class LossName { em, dem, adadem };

struct LossConfig {
  LossName name = LossName::adadem;
  double tau = 1.0;
  double alpha = 1.0;
  AdaDemMode variant = AdaDemMode::full;
  NormKind norm = NormKind::l1;
  double pi = kDefaultMomentum;
  double mec_alpha = 1.0;
  DeltaSource delta_source = DeltaSource::cadf;
  Direction direction = Direction::minimize;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  MixtureConfig mixture;
  StreamConfig stream;
  ModelConfig model;
  SgdConfig optimizer{1e-3, 0.0, UpdateScope::all};
  LossConfig loss;
  GridSpec search;
  std::vector<double> lr_sweep = default_lr_grid();
  std::string output_dir = "out";
};

/// Shift magnitudes used when a config names a kind without a magnitude.
inline double default_shift_magnitude(ShiftKind k) {
  switch (k) {
  case ShiftKind::translate:
    return 1.0;
  case ShiftKind::rotate2d:
    return 0.2;
  case ShiftKind::feature_noise:
    return 0.9;
  case ShiftKind::feature_scale:
    return 0.2;
  }
  return 1.0;
}

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) {
    throw ConfigError(where + ": expected an object");
  }
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!ok.count(it.key())) {
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
  }
}

inline double get_number(const json& obj, const char* key, const std::string& where,
                         double fallback) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const auto& v = obj.at(key);
  if (!v.is_number()) {
    throw ConfigError(where + "." + key + ": expected a number");
  }
  return v.get<double>();
}

inline std::size_t get_count(const json& obj, const char* key, const std::string& where,
                             std::size_t fallback, std::size_t min_value) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const auto& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() < static_cast<long long>(min_value)) {
    throw ConfigError(where + "." + key + ": expected an integer >= " + std::to_string(min_value));
  }
  return v.get<std::size_t>();
}

inline std::string get_string(const json& obj, const char* key, const std::string& where,
                              const std::string& fallback) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const auto& v = obj.at(key);
  if (!v.is_string()) {
    throw ConfigError(where + "." + key + ": expected a string");
  }
  return v.get<std::string>();
}

template <class E>
E get_enum(const json& obj, const char* key, const std::string& where, E fallback,
           std::initializer_list<std::pair<const char*, E>> names) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const std::string s = get_string(obj, key, where, "");
  std::string options;
  for (const auto& [name, value] : names) {
    if (s == name) {
      return value;
    }
    options += options.empty() ? name : std::string("|") + name;
  }
  throw ConfigError(where + "." + key + ": '" + s + "' is not one of " + options);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) {
    throw ConfigError(msg);
  }
}

inline ShiftKind parse_shift_kind(const std::string& s, const std::string& where) {
  if (s == "translate") return ShiftKind::translate;
  if (s == "rotate2d") return ShiftKind::rotate2d;
  if (s == "feature_noise") return ShiftKind::feature_noise;
  if (s == "feature_scale") return ShiftKind::feature_scale;
  throw ConfigError(where + ": unknown shift kind '" + s + "'");
}

} // namespace detail

/// Parses and validates a config document. Throws ConfigError on any schema
/// violation. (tau, alpha) validity is not checked here: commands report it
/// separately with its own exit status.
inline ExperimentConfig parse_config(const nlohmann::json& root) {
  using detail::get_count;
  using detail::get_enum;
  using detail::get_number;
  using detail::get_string;
  using detail::require;
  detail::reject_unknown(root, "config",
                         {"seed", "mixture", "stream", "model", "optimizer", "loss", "search",
                          "lr_sweep", "output_dir"});
  ExperimentConfig cfg;
  if (root.contains("seed")) {
    const auto& s = root.at("seed");
    require(s.is_number_unsigned() || (s.is_number_integer() && s.get<long long>() >= 0),
            "config.seed: expected a nonnegative integer");
    cfg.seed = s.get<std::uint64_t>();
  }

  if (root.contains("mixture")) {
    const auto& m = root.at("mixture");
    const std::string w = "mixture";
    detail::reject_unknown(m, w, {"classes", "dim", "radius", "sigma", "source_samples", "source_rho"});
    cfg.mixture.classes = get_count(m, "classes", w, cfg.mixture.classes, 2);
    cfg.mixture.dim = get_count(m, "dim", w, cfg.mixture.dim, 2);
    cfg.mixture.radius = get_number(m, "radius", w, cfg.mixture.radius);
    cfg.mixture.sigma = get_number(m, "sigma", w, cfg.mixture.sigma);
    cfg.mixture.source_samples = get_count(m, "source_samples", w, cfg.mixture.source_samples, 1);
    cfg.mixture.source_rho = get_number(m, "source_rho", w, cfg.mixture.source_rho);
    require(cfg.mixture.radius > 0.0, "mixture.radius must be > 0");
    require(cfg.mixture.sigma > 0.0, "mixture.sigma must be > 0");
    require(cfg.mixture.source_rho >= 1.0, "mixture.source_rho must be >= 1");
  }

  if (root.contains("stream")) {
    const auto& s = root.at("stream");
    const std::string w = "stream";
    detail::reject_unknown(s, w, {"mode", "shifts", "batches_per_shift", "batch_size", "label_rho"});
    cfg.stream.mode = get_enum(s, "mode", w, cfg.stream.mode,
                               {{"single_domain", ProtocolMode::single_domain},
                                {"continual", ProtocolMode::continual}});
    if (s.contains("shifts")) {
      const auto& arr = s.at("shifts");
      require(arr.is_array() && !arr.empty(), "stream.shifts: expected a nonempty array");
      cfg.stream.shifts.clear();
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string sw = "stream.shifts[" + std::to_string(i) + "]";
        detail::reject_unknown(arr[i], sw, {"kind", "magnitude", "level"});
        require(arr[i].contains("kind"), sw + ".kind is required");
        ShiftSpec sp;
        sp.kind = detail::parse_shift_kind(get_string(arr[i], "kind", sw, ""), sw + ".kind");
        sp.magnitude = get_number(arr[i], "magnitude", sw, default_shift_magnitude(sp.kind));
        sp.level = static_cast<int>(get_count(arr[i], "level", sw, 3, 1));
        require(sp.level >= 1 && sp.level <= 5, sw + ".level must be in 1..5");
        require(sp.magnitude >= 0.0, sw + ".magnitude must be >= 0");
        cfg.stream.shifts.push_back(sp);
      }
    }
    cfg.stream.batches_per_shift = get_count(s, "batches_per_shift", w, cfg.stream.batches_per_shift, 1);
    cfg.stream.batch_size = get_count(s, "batch_size", w, cfg.stream.batch_size, 1);
    cfg.stream.label_rho = get_number(s, "label_rho", w, cfg.stream.label_rho);
    require(cfg.stream.label_rho >= 1.0, "stream.label_rho must be >= 1");
    require(cfg.stream.mode != ProtocolMode::continual || cfg.stream.shifts.size() >= 2,
            "stream: continual mode needs at least two shifts");
  }
  for (const auto& sp : cfg.stream.shifts) {
    require(sp.kind != ShiftKind::rotate2d || cfg.mixture.dim == 2,
            "stream: rotate2d shifts require mixture.dim == 2");
  }

  if (root.contains("model")) {
    const auto& m = root.at("model");
    const std::string w = "model";
    detail::reject_unknown(m, w, {"kind", "hidden", "source_epochs", "source_lr", "source_momentum",
                                  "source_batch_size"});
    cfg.model.kind = get_enum(m, "kind", w, cfg.model.kind,
                              {{"linear", ModelKind::linear}, {"mlp", ModelKind::mlp}});
    cfg.model.hidden = get_count(m, "hidden", w, cfg.model.hidden, 1);
    cfg.model.source_epochs = get_count(m, "source_epochs", w, cfg.model.source_epochs, 0);
    cfg.model.source_lr = get_number(m, "source_lr", w, cfg.model.source_lr);
    cfg.model.source_momentum = get_number(m, "source_momentum", w, cfg.model.source_momentum);
    cfg.model.source_batch_size = get_count(m, "source_batch_size", w, cfg.model.source_batch_size, 1);
    require(cfg.model.source_lr >= 0.0, "model.source_lr must be >= 0");
    require(cfg.model.source_momentum >= 0.0 && cfg.model.source_momentum < 1.0,
            "model.source_momentum must lie in [0, 1)");
  }

  if (root.contains("optimizer")) {
    const auto& o = root.at("optimizer");
    const std::string w = "optimizer";
    detail::reject_unknown(o, w, {"lr", "momentum", "scope"});
    cfg.optimizer.lr = get_number(o, "lr", w, cfg.optimizer.lr);
    cfg.optimizer.momentum = get_number(o, "momentum", w, cfg.optimizer.momentum);
    cfg.optimizer.scope = get_enum(o, "scope", w, cfg.optimizer.scope,
                                   {{"all", UpdateScope::all}, {"head", UpdateScope::head}});
    require(cfg.optimizer.lr >= 0.0, "optimizer.lr must be >= 0");
    require(cfg.optimizer.momentum >= 0.0 && cfg.optimizer.momentum < 1.0,
            "optimizer.momentum must lie in [0, 1)");
  }

  if (root.contains("loss")) {
    const auto& l = root.at("loss");
    const std::string w = "loss";
    detail::reject_unknown(l, w, {"name", "tau", "alpha", "variant", "norm", "pi", "mec_alpha",
                                  "delta_source", "direction"});
    cfg.loss.name = get_enum(l, "name", w, cfg.loss.name,
                             {{"em", LossName::em}, {"dem", LossName::dem}, {"adadem", LossName::adadem}});
    cfg.loss.tau = get_number(l, "tau", w, cfg.loss.tau);
    cfg.loss.alpha = get_number(l, "alpha", w, cfg.loss.alpha);
    cfg.loss.variant = get_enum(l, "variant", w, cfg.loss.variant,
                                {{"full", AdaDemMode::full},
                                 {"norm_only", AdaDemMode::norm_only},
                                 {"mec_only", AdaDemMode::mec_only}});
    cfg.loss.norm = get_enum(l, "norm", w, cfg.loss.norm,
                             {{"l1", NormKind::l1}, {"l2", NormKind::l2}, {"linf", NormKind::linf}});
    cfg.loss.pi = get_number(l, "pi", w, cfg.loss.pi);
    cfg.loss.mec_alpha = get_number(l, "mec_alpha", w, cfg.loss.mec_alpha);
    cfg.loss.delta_source = get_enum(l, "delta_source", w, cfg.loss.delta_source,
                                     {{"cadf", DeltaSource::cadf},
                                      {"full_entropy", DeltaSource::full_entropy}});
    cfg.loss.direction = get_enum(l, "direction", w, cfg.loss.direction,
                                  {{"minimize", Direction::minimize},
                                   {"maximize", Direction::maximize}});
    require(cfg.loss.pi > 0.0 && cfg.loss.pi <= 1.0, "loss.pi must lie in (0, 1]");
    require(cfg.loss.mec_alpha >= 0.0, "loss.mec_alpha must be >= 0");
  }

  if (root.contains("search")) {
    const auto& s = root.at("search");
    const std::string w = "search";
    detail::reject_unknown(s, w, {"tau_min", "tau_max", "alpha_min", "alpha_max", "step",
                                  "subset_fraction"});
    cfg.search.tau_min = get_number(s, "tau_min", w, cfg.search.tau_min);
    cfg.search.tau_max = get_number(s, "tau_max", w, cfg.search.tau_max);
    cfg.search.alpha_min = get_number(s, "alpha_min", w, cfg.search.alpha_min);
    cfg.search.alpha_max = get_number(s, "alpha_max", w, cfg.search.alpha_max);
    cfg.search.step = get_number(s, "step", w, cfg.search.step);
    cfg.search.subset_fraction = get_number(s, "subset_fraction", w, cfg.search.subset_fraction);
    try {
      cfg.search.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("search: ") + e.what());
    }
  }

  if (root.contains("lr_sweep")) {
    const auto& arr = root.at("lr_sweep");
    require(arr.is_array() && !arr.empty(), "lr_sweep: expected a nonempty array of numbers");
    cfg.lr_sweep.clear();
    for (const auto& v : arr) {
      require(v.is_number() && v.get<double>() >= 0.0, "lr_sweep: entries must be numbers >= 0");
      cfg.lr_sweep.push_back(v.get<double>());
    }
  }

  cfg.output_dir = get_string(root, "output_dir", "config", cfg.output_dir);
  require(!cfg.output_dir.empty(), "config.output_dir must be nonempty");
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(root);
}

} // namespace demkit

#pragma once

// The demkit command-line surface. run_cli returns the process exit code:
// 0 success, 2 invalid (tau, alpha), 3 numeric or check failure, 64 usage or
// config schema error.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "demkit/config.hpp"
#include "demkit/experiment.hpp"
#include "demkit/gradcheck.hpp"
#include "demkit/io.hpp"

namespace demkit {

enum ExitCode : int {
  kExitOk = 0,
  kExitInvalidHyperparameters = 2,
  kExitNumericFailure = 3,
  kExitUsage = 64,
};

namespace detail {

inline const char* loss_label(LossName n) {
  switch (n) {
  case LossName::em:
    return "em";
  case LossName::dem:
    return "dem";
  case LossName::adadem:
    return "adadem";
  }
  return "?";
}

inline ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return parse_config_text(text);
}

inline json report_json(const MetricsReport& r) {
  return json{{"samples", r.samples},
              {"accuracy", round9(r.accuracy)},
              {"macro_f1", round9(r.macro_f1)},
              {"marginal_entropy", round9(r.marginal_entropy)},
              {"kl_output_vs_label", round9(r.kl_output_vs_label)},
              {"avg_max_prob", round9(r.avg_max_prob)}};
}

inline int cmd_reward_curve(std::size_t classes, double tau, double alpha, double m_min,
                            double m_max, double m_step, const std::string& out_path,
                            std::ostream& out) {
  const DemConfig cfg{tau, alpha, Direction::minimize};
  require_valid(cfg);
  if (!(m_step > 0.0) || !(m_max >= m_min)) {
    throw std::invalid_argument("reward-curve needs --m-step > 0 and --m-max >= --m-min");
  }
  const auto curve = reward_curve(classes, cfg, linear_grid(m_min, m_max, m_step));
  write_file_atomic(out_path, reward_curve_csv(curve));
  out << "reward-curve: " << curve.size() << " points written to " << out_path << '\n';
  return kExitOk;
}

inline int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out, std::ostream& err) {
  const auto rows = run_gradcheck(opt);
  bool ok = true;
  for (const auto& r : rows) {
    out << r.loss << " max_rel_error=" << format_float(r.max_rel_error) << " trials=" << r.trials
        << (r.passed() ? " ok" : " FAIL") << '\n';
    if (!r.passed()) {
      ok = false;
      err << "gradcheck failed for " << r.loss << " at input [" << join_floats(r.worst_input, ',')
          << "]\n";
    }
  }
  return ok ? kExitOk : kExitNumericFailure;
}

inline int cmd_run(const ExperimentConfig& cfg, std::ostream& out) {
  const Prepared p = prepare(cfg);
  const LossPlugin plugin = make_plugin(cfg.loss, p.mixture.classes);
  const RunSummary res = run_prepared(p, plugin, cfg.optimizer);
  const double baseline = no_adapt_accuracy(p);

  const std::filesystem::path dir(cfg.output_dir);
  write_file_atomic(dir / "metrics.csv", metrics_csv(res.shifts, res.overall));
  json shifts = json::array();
  for (const auto& s : res.shifts) {
    json j = report_json(s.report);
    j["kind"] = shift_kind_name(s.shift.kind);
    j["level"] = s.shift.level;
    j["magnitude"] = round9(s.shift.magnitude);
    shifts.push_back(std::move(j));
  }
  const json summary{{"command", "run"},
                     {"loss", loss_label(cfg.loss.name)},
                     {"seed", cfg.seed},
                     {"lr", round9(cfg.optimizer.lr)},
                     {"no_adapt_accuracy", round9(baseline)},
                     {"overall", report_json(res.overall)},
                     {"shifts", shifts}};
  write_file_atomic(dir / "summary.json", summary.dump(2) + '\n');
  out << "run: loss=" << loss_label(cfg.loss.name) << " accuracy=" << format_float(res.overall.accuracy)
      << " no_adapt=" << format_float(baseline) << '\n';
  return kExitOk;
}

inline int cmd_grid_search(const ExperimentConfig& cfg, std::ostream& out) {
  const Prepared p = prepare(cfg);
  const DemSearchOutcome res = dem_grid_search(p, cfg);
  const std::filesystem::path dir(cfg.output_dir);
  write_file_atomic(dir / "grid.csv", grid_csv(res.grid.table));
  const json summary{{"command", "grid-search"},
                     {"seed", cfg.seed},
                     {"raw_points", res.grid.table.size()},
                     {"evaluated", res.grid.evaluated},
                     {"best_tau", round9(res.grid.best.tau)},
                     {"best_alpha", round9(res.grid.best.alpha)},
                     {"best_subset_accuracy", round9(*res.grid.best.accuracy)},
                     {"best_full_accuracy", round9(res.best_full_accuracy)},
                     {"classical_subset_accuracy", round9(res.classical_subset_accuracy)},
                     {"classical_full_accuracy", round9(res.classical_full_accuracy)}};
  write_file_atomic(dir / "grid_summary.json", summary.dump(2) + '\n');
  out << "grid-search: best tau=" << format_float(res.grid.best.tau)
      << " alpha=" << format_float(res.grid.best.alpha)
      << " subset_accuracy=" << format_float(*res.grid.best.accuracy) << '\n';
  return kExitOk;
}

inline int cmd_lr_sweep(const ExperimentConfig& cfg, std::ostream& out) {
  const Prepared p = prepare(cfg);
  const LrSweepResult res = run_lr_sweep(p, cfg);
  const std::filesystem::path dir(cfg.output_dir);
  write_file_atomic(dir / "lr_sweep.csv", lr_sweep_csv(res));
  const LrPoint* best = &res.table.front();
  for (const auto& pt : res.table) {
    if (pt.accuracy > best->accuracy) {
      best = &pt;
    }
  }
  const json summary{{"command", "lr-sweep"},
                     {"loss", loss_label(cfg.loss.name)},
                     {"seed", cfg.seed},
                     {"no_adapt_accuracy", round9(res.baseline)},
                     {"tolerance_count", res.tolerance_count},
                     {"best_lr", round9(best->lr)},
                     {"best_accuracy", round9(best->accuracy)}};
  write_file_atomic(dir / "lr_sweep_summary.json", summary.dump(2) + '\n');
  out << "lr-sweep: loss=" << loss_label(cfg.loss.name) << " tolerance_count=" << res.tolerance_count
      << "/" << res.table.size() << " best_lr=" << format_float(best->lr) << '\n';
  return kExitOk;
}

} // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"demkit: decoupled entropy minimization toolkit"};
  app.require_subcommand(1);

  std::size_t classes = 10;
  double tau = 1.0;
  double alpha = 1.0;
  double m_min = -5.0;
  double m_max = 30.0;
  double m_step = 0.05;
  std::string curve_out = "reward_curve.csv";
  auto* curve = app.add_subcommand("reward-curve", "Write the DEM reward curve along z = (m, 0, ..., 0)");
  curve->add_option("--c", classes, "Number of classes")->check(CLI::Range(2, 1 << 20));
  curve->add_option("--tau", tau, "Temperature");
  curve->add_option("--alpha", alpha, "GMC weight");
  curve->add_option("--m-min", m_min, "First logit margin");
  curve->add_option("--m-max", m_max, "Last logit margin");
  curve->add_option("--m-step", m_step, "Margin step");
  curve->add_option("--out", curve_out, "Output CSV path");

  GradcheckOptions gc;
  long long trials = 1000;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  grad->add_option("--seed", gc.seed, "Random seed");
  grad->add_option("--trials", trials, "Random inputs per check");
  grad->add_option("--corrupt", gc.corrupt)->group("");

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run one adaptation protocol");
  auto* grid = app.add_subcommand("grid-search", "Select DEM (tau, alpha) on a labeled subset");
  auto* sweep = app.add_subcommand("lr-sweep", "Learning-rate sensitivity sweep");
  for (auto* sub : {run, grid, sweep}) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*curve) {
      return detail::cmd_reward_curve(classes, tau, alpha, m_min, m_max, m_step, curve_out, out);
    }
    if (*grad) {
      if (trials < 1) {
        err << "gradcheck: --trials must be >= 1\n";
        return kExitUsage;
      }
      gc.trials = static_cast<std::size_t>(trials);
      return detail::cmd_gradcheck(gc, out, err);
    }
    const ExperimentConfig cfg = detail::load_config(config_path);
    if (*run) {
      return detail::cmd_run(cfg, out);
    }
    if (*grid) {
      return detail::cmd_grid_search(cfg, out);
    }
    return detail::cmd_lr_sweep(cfg, out);
  } catch (const InvalidHyperparameters& e) {
    err << "invalid hyperparameters: " << e.what() << '\n';
    return kExitInvalidHyperparameters;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumericFailure;
  }
}

} // namespace demkit

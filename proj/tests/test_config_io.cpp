#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "demkit/config.hpp"
#include "demkit/io.hpp"

using namespace demkit;
using nlohmann::json;

TEST(Config, EmptyObjectGivesDefaults) {
  const ExperimentConfig c = parse_config_text("{}");
  EXPECT_EQ(c.seed, 0u);
  EXPECT_EQ(c.mixture.classes, 10u);
  EXPECT_EQ(c.mixture.dim, 2u);
  EXPECT_EQ(c.stream.mode, ProtocolMode::single_domain);
  ASSERT_EQ(c.stream.shifts.size(), 1u);
  EXPECT_EQ(c.stream.shifts[0], (ShiftSpec{ShiftKind::feature_noise, 0.9, 4}));
  EXPECT_EQ(c.stream.batches_per_shift, 100u);
  EXPECT_EQ(c.stream.batch_size, 64u);
  EXPECT_EQ(c.optimizer.lr, 1e-3);
  EXPECT_EQ(c.optimizer.momentum, 0.0);
  EXPECT_EQ(c.loss.name, LossName::adadem);
  EXPECT_EQ(c.loss.pi, 0.1);
  EXPECT_EQ(c.search.step, 0.1);
  EXPECT_EQ(c.lr_sweep, default_lr_grid());
  EXPECT_EQ(c.output_dir, "out");
}

TEST(Config, FullDocumentParses) {
  const ExperimentConfig c = parse_config_text(R"({
    "seed": 7,
    "mixture": {"classes": 5, "dim": 2, "radius": 3, "sigma": 0.5, "source_samples": 100, "source_rho": 10},
    "stream": {"mode": "continual", "shifts": [{"kind": "translate", "level": 2},
               {"kind": "rotate2d", "magnitude": 0.3, "level": 5}],
               "batches_per_shift": 4, "batch_size": 8, "label_rho": 2},
    "model": {"kind": "mlp", "hidden": 8, "source_epochs": 2},
    "optimizer": {"lr": 0.01, "momentum": 0.5, "scope": "head"},
    "loss": {"name": "dem", "tau": 0.5, "alpha": 2, "variant": "norm_only", "norm": "l2",
             "pi": 0.5, "direction": "maximize"},
    "search": {"step": 0.5},
    "lr_sweep": [0.1, 0],
    "output_dir": "x/y"
  })");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.mixture.classes, 5u);
  EXPECT_EQ(c.mixture.source_rho, 10.0);
  EXPECT_EQ(c.stream.mode, ProtocolMode::continual);
  EXPECT_EQ(c.stream.shifts[0], (ShiftSpec{ShiftKind::translate, 1.0, 2}));
  EXPECT_EQ(c.stream.shifts[1], (ShiftSpec{ShiftKind::rotate2d, 0.3, 5}));
  EXPECT_EQ(c.model.kind, ModelKind::mlp);
  EXPECT_EQ(c.optimizer.scope, UpdateScope::head);
  EXPECT_EQ(c.loss.name, LossName::dem);
  EXPECT_EQ(c.loss.variant, AdaDemMode::norm_only);
  EXPECT_EQ(c.loss.norm, NormKind::l2);
  EXPECT_EQ(c.loss.direction, Direction::maximize);
  EXPECT_EQ(c.search.step, 0.5);
  EXPECT_EQ(c.lr_sweep, (std::vector<double>{0.1, 0.0}));
  EXPECT_EQ(c.output_dir, "x/y");
}

TEST(Config, ShiftDefaults) {
  const ExperimentConfig c = parse_config_text(R"({"stream": {"shifts": [{"kind": "feature_scale"}]}})");
  EXPECT_EQ(c.stream.shifts[0], (ShiftSpec{ShiftKind::feature_scale, 0.2, 3}));
  for (ShiftKind k : {ShiftKind::translate, ShiftKind::rotate2d, ShiftKind::feature_noise}) {
    EXPECT_GT(default_shift_magnitude(k), 0.0);
  }
}

TEST(Config, SchemaViolationsAreRejected) {
  const std::vector<std::string> bad{
      "[]",
      "not json",
      R"({"unknown": 1})",
      R"({"seed": -1})",
      R"({"seed": "3"})",
      R"({"mixture": {"classes": 1}})",
      R"({"mixture": {"clases": 3}})",
      R"({"mixture": {"sigma": 0}})",
      R"({"mixture": {"classes": 2.5}})",
      R"({"stream": {"mode": "sideways"}})",
      R"({"stream": {"mode": "continual"}})",
      R"({"stream": {"shifts": []}})",
      R"({"stream": {"shifts": [{"magnitude": 1}]}})",
      R"({"stream": {"shifts": [{"kind": "warp"}]}})",
      R"({"stream": {"shifts": [{"kind": "translate", "level": 6}]}})",
      R"({"stream": {"shifts": [{"kind": "translate", "magnitude": -1}]}})",
      R"({"mixture": {"dim": 3}, "stream": {"shifts": [{"kind": "rotate2d"}]}})",
      R"({"model": {"kind": "cnn"}})",
      R"({"optimizer": {"lr": -0.1}})",
      R"({"optimizer": {"momentum": 1.0}})",
      R"({"loss": {"name": "ce"}})",
      R"({"loss": {"tau": "one"}})",
      R"({"loss": {"pi": 0}})",
      R"({"loss": {"pi": 1.5}})",
      R"({"search": {"step": 0}})",
      R"({"search": {"subset_fraction": 2}})",
      R"({"lr_sweep": []})",
      R"({"lr_sweep": [-1]})",
      R"({"output_dir": ""})",
  };
  for (const auto& text : bad) {
    EXPECT_THROW(parse_config_text(text), ConfigError) << text;
  }
}

TEST(Config, HyperparameterValidityIsNotASchemaConcern) {
  // Out-of-range (tau, alpha) parses; it is rejected when the loss is built.
  const ExperimentConfig c = parse_config_text(R"({"loss": {"name": "dem", "tau": 2.1, "alpha": 1}})");
  EXPECT_EQ(c.loss.tau, 2.1);
}

TEST(FormatFloat, NineSignificantDigits) {
  EXPECT_EQ(format_float(0.1), "0.1");
  EXPECT_EQ(format_float(1.0 / 3.0), "0.333333333");
  EXPECT_EQ(format_float(123456789012.0), "1.23456789e+11");
  EXPECT_EQ(format_float(-2.5e-7), "-2.5e-07");
  EXPECT_EQ(format_float(0.0), "0");
  EXPECT_EQ(round9(1.0 / 3.0), 0.333333333);
  const std::vector<double> xs{0.5, 0.25};
  EXPECT_EQ(join_floats(xs), "0.5;0.25");
}

TEST(WriteFileAtomic, WritesAndReplaces) {
  const auto dir = std::filesystem::temp_directory_path() / "demkit_io_test";
  std::filesystem::remove_all(dir);
  const auto path = dir / "sub" / "a.txt";
  write_file_atomic(path, "first");
  EXPECT_EQ(read_file(path), "first");
  write_file_atomic(path, "second\n");
  EXPECT_EQ(read_file(path), "second\n");
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  EXPECT_THROW(read_file(dir / "missing"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Csv, Headers) {
  const std::string rc = reward_curve_csv({RewardPoint{0.0, 0.1, 0.0}});
  EXPECT_EQ(rc, "m,p_max,reward\n0,0.1,0\n");
  EXPECT_EQ(grid_csv({TrialResult{0.0, 0.5, false, std::nullopt}, TrialResult{1.0, 1.0, true, 0.75}}),
            "tau,alpha,valid,accuracy\n0,0.5,0,\n1,1,1,0.75\n");
  LrSweepResult lr;
  lr.table = {{1e-3, 0.5}};
  EXPECT_EQ(lr_sweep_csv(lr), "lr,accuracy\n0.001,0.5\n");

  const std::vector<Vector> preds{Vector{0.8, 0.2}, Vector{0.4, 0.6}};
  const std::vector<std::size_t> labels{0, 1};
  const MetricsReport r = metrics(preds, labels);
  const std::vector<ShiftOutcome> shifts{ShiftOutcome{ShiftSpec{ShiftKind::translate, 1.0, 3}, r, {}}};
  const std::string csv = metrics_csv(shifts, r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
  EXPECT_NE(csv.find("\n0,translate,1,3,2,1,1,"), std::string::npos);
  EXPECT_NE(csv.find("\noverall,all,,,2,"), std::string::npos);
}

TEST(JsonCheckpoint, MecRoundTrip) {
  MecState s(4, 0.3);
  const std::vector<Vector> probs{Vector{0.7, 0.1, 0.1, 0.1}, Vector{0.1, 0.2, 0.3, 0.4}};
  const std::vector<std::size_t> labels{0, 3};
  s.update(probs, labels);
  const MecState t = mec_from_json(json::parse(to_json(s).dump()));
  EXPECT_EQ(t.classes(), 4u);
  EXPECT_EQ(t.momentum(), 0.3);
  EXPECT_EQ(t.steps(), s.steps());
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(t.table().flat()[i], s.table().flat()[i]);
  json broken = to_json(s);
  broken["table"] = std::vector<double>{0.5, 0.5};
  EXPECT_THROW(mec_from_json(broken), std::invalid_argument);
}

TEST(JsonCheckpoint, ModelRoundTrip) {
  Rng rng(11);
  const Mlp m = make_mlp(3, 2, 5, rng);
  const Mlp back = model_from_json<2>(json::parse(to_json(m).dump()));
  EXPECT_EQ(parameter_distance(m, back), 0.0);
  const Matrix x(2, 2, std::vector<double>{0.3, -1.0, 2.0, 0.5});
  const Matrix a = forward(m, x);
  const Matrix b = forward(back, x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.flat()[i], b.flat()[i]);

  LinearSoftmax lin = make_linear(3, 2);
  lin.layers[0].w(1, 1) = 0.125;
  const LinearSoftmax lb = model_from_json<1>(to_json(lin));
  EXPECT_EQ(lb.layers[0].w(1, 1), 0.125);
  EXPECT_EQ(to_json(lin)["kind"], "linear");
  EXPECT_EQ(to_json(m)["kind"], "mlp");
  EXPECT_THROW(model_from_json<2>(to_json(lin)), std::invalid_argument);
  json nan = to_json(lin);
  nan["layers"][0]["b"][0] = nullptr;
  EXPECT_ANY_THROW(model_from_json<1>(nan));
}

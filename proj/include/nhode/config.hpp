#pragma once

#include "nhode/evaluation.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace nhode {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// One experiment end to end: system, observation scheme, model variant,
// solver and training settings, evaluation grid, output location. A value of
// zero means "use the system's default" where the comment says so.
struct ExperimentConfig {
  SystemSpec system;

  // [observation]
  int hidden_particle = 2;  // 1-based; 0 = fully observed
  bool use_encoder = false;
  int window = 10;  // K

  // [model]
  ModelKind model_kind = ModelKind::NhodePot;
  CoordMode coords = CoordMode::Abs;
  int width = 128;
  int depth = 0;  // 0 = system default
  int encoder_depth = 2;

  // [data]
  int n_traj = 0;       // 0 = system default
  double horizon = 0.0; // 0 = system default
  int steps = 0;        // 0 = system default

  // [solver] -- ground-truth generation
  double rtol = 0.0;      // 0 = system default
  double atol = 0.0;
  int max_steps = 0;
  double initial_step = 0.0;  // 0 = automatic

  // [train]
  TrainConfig train;

  // [eval]
  int eval_n_test = 10;
  double eval_horizon = 20.0;
  double eval_dt = 0.01;

  // [sweep]
  std::vector<double> sweep_eps{0.2, 0.4, 0.6, 0.8};
  int sweep_n_traj = 32;
  int sweep_steps = 301;
  double sweep_horizon = 3.0;
  int sweep_eval_trajectories = 16;
  int sweep_eval_steps = 500;
  double sweep_eval_dt = 0.002;

  // [identifiability]
  double ident_k2_tilde = 0.0;  // 0 = unchanged spring constant
  double ident_l2_tilde = 0.8;
  int ident_n_ic = 5;
  double ident_horizon = 1.0;
  int ident_steps = 101;
  double ident_rtol = 1e-9;

  // [output]
  std::string out_dir = "out";
  std::uint64_t seed = 0;

  // resolved values
  int resolved_depth() const { return depth > 0 ? depth : system.default_model_depth(); }
  int resolved_n_traj() const;
  double resolved_horizon() const { return horizon > 0 ? horizon : system.default_horizon(); }
  int resolved_steps() const { return steps > 0 ? steps : system.default_steps(); }
  SolverConfig data_solver() const;
  ObservationMask observation() const;
  void validate() const;
};

// Nested-section key=value text; '#' starts a comment. Unknown sections or
// keys are hard errors. serialize() emits the canonical form, and
// parse(serialize(c)) reproduces c exactly.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace nhode

#pragma once

#include "nhode/models.hpp"
#include "nhode/training.hpp"

#include <string>
#include <vector>

namespace nhode {

struct EvalConfig {
  int n_test = 10;
  double horizon = 20.0;
  double dt = 0.01;
  SolverMethod method = SolverMethod::Tsit5Fixed;  // prediction rollouts
  int substeps = 1;
  std::uint64_t seed = 0;
  // Ground truth is regenerated two decades tighter than these; defaults
  // come from the system when left at zero.
  double data_rtol = 0.0;
  double data_atol = 0.0;
  int threads = 1;
};

// Predicted states with components beyond this magnitude count as diverged;
// later error entries become +inf rather than aborting the run.
inline constexpr double kDivergenceLimit = 1e12;

struct MetricsRecord {
  std::vector<double> times;
  // one column per test trajectory
  Mat mse_observed;
  Mat mse_unobserved;
  Mat energy_error;           // |H_true(pred) - H_true(truth at t0)|
  Mat momentum_error;         // |P(pred) - P(pred at t0)|
  Mat angular_momentum_error; // |L(pred) - L(pred at t0)|

  Vec median_mse_observed, max_mse_observed;
  Vec median_mse_unobserved, max_mse_unobserved;
  Vec median_energy_error, max_energy_error;

  // per-trajectory time means over the short window and the full horizon
  double short_horizon = 0.0;
  Vec short_observed, short_unobserved, long_observed, long_unobserved;
};

double median(std::vector<double> v);

// Rolls the model out against freshly sampled ground truth (unseen seeds,
// same sampling domain) and computes all error series. With an encoder the
// hidden initial state is inferred from the first K+1 observed snapshots.
MetricsRecord evaluate(const DynamicsModel& model, const Encoder* encoder,
                       const SystemSpec& spec, const ObservationMask& scheme,
                       const EvalConfig& cfg);

void write_metrics_csvs(const std::string& dir, const MetricsRecord& rec);

// Summary scalars matching the table layout: median across test trajectories
// of the per-trajectory time means. `aggregate` rows across seeds are written
// by the caller.
struct SummaryRow {
  std::string method;
  double short_observed = 0.0, short_unobserved = 0.0;
  double long_observed = 0.0, long_unobserved = 0.0;
};
SummaryRow summarize(const MetricsRecord& rec, const std::string& method);
void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows);

// --- conservation audit ---

struct ConservationReport {
  bool has_hamiltonian = false;
  double learned_energy_drift = 0.0;  // max |H(x_t) - H(x_0)| along the rollout
  double momentum_drift = 0.0;
  double angular_momentum_drift = 0.0;
  // pointwise algebraic identities at sampled states
  double max_grad_flow_dot = 0.0;     // |grad H . f|          (Hamiltonian kinds)
  double max_momentum_bracket = 0.0;  // |sum_j dH/dq_j|       (rel kinds)
  double max_angular_bracket = 0.0;   // angular-momentum bracket (pot,rel)
};

ConservationReport conservation_audit(const DynamicsModel& model, const Vec& x0, double horizon,
                                      double dt, SolverMethod method = SolverMethod::Tsit5Fixed);

// --- Plummer softening sweep ---

struct EpsSweepConfig {
  std::vector<double> eps_values{0.2, 0.4, 0.6, 0.8};
  int n_traj = 64;          // training trajectories per epsilon
  int steps = 101;
  double horizon = 1.0;
  int eval_trajectories = 16;
  int eval_steps = 200;
  double eval_dt = 0.002;
  int width = 128;
  int depth = 4;
  ModelKind kind = ModelKind::NhodePot;
  CoordMode coords = CoordMode::Rel;
  TrainConfig train;
  std::uint64_t seed = 0;
};

struct EpsSweepRow {
  double eps;
  int trajectory;
  double mse;
};

struct EpsQuartiles {
  double eps;
  double min, q1, median, q3, max;
};

struct EpsSweepResult {
  std::vector<EpsSweepRow> rows;
  std::vector<EpsQuartiles> quartiles;
};

EpsSweepResult epsilon_sweep(const EpsSweepConfig& cfg);
void write_eps_sweep_csvs(const std::string& rows_path, const std::string& quartiles_path,
                          const EpsSweepResult& res);

// --- non-identifiability construction for the two-spring chain ---

// With the rest length of the inner spring changed to l2_tilde (and the same
// spring constant), shifting the hidden mass by a = l2_tilde - l2 leaves the
// observed dynamics untouched. Requires q2 - q1 to keep its sign along the
// trajectory; initial conditions violating that are skipped and counted.
struct IdentifiabilityResult {
  double shift = 0.0;  // a
  int attempted = 0;
  int completed = 0;
  int skipped = 0;
  double max_observed_deviation = 0.0;
  double max_hidden_shift_error = 0.0;      // max | |q2~ - q2| - |a| |
  double max_hidden_momentum_deviation = 0.0;
};

IdentifiabilityResult identifiability_demo(const SystemSpec& spec, double k2_tilde,
                                           double l2_tilde, int n_initial_conditions,
                                           double horizon, int steps, double rtol,
                                           std::uint64_t seed);

}  // namespace nhode

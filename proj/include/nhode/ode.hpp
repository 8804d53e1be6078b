#pragma once

#include "nhode/graph.hpp"

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace nhode {

using VectorField = std::function<Vec(double t, const Vec& x)>;

enum class SolverMethod { Rk4, Tsit5Fixed, Tsit5Adaptive };

struct SolverConfig {
  SolverMethod method = SolverMethod::Tsit5Adaptive;
  double rtol = 1e-6;
  double atol = 1e-8;
  double initial_step = 0.0;  // 0 = choose automatically
  int max_steps = 100000;     // accepted + rejected attempts
  int substeps = 1;           // fixed-step methods: steps per save interval

  void validate() const;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Vec> states;

  int size() const { return static_cast<int>(times.size()); }
  void validate() const;  // equal lengths, strictly increasing times
};

struct SolverError : std::runtime_error {
  explicit SolverError(const std::string& what) : std::runtime_error(what) {}
};

// Tsitouras 5(4) tableau. b-weights are row 7 of a; e = b - bhat is the
// embedded error estimator.
struct Tsit5Tableau {
  double c[7];
  double a[7][6];
  double b[7];
  double e[7];
};
const Tsit5Tableau& tsit5_tableau();

// One explicit step. Both steppers are pure functions of (f, x, t, h).
Vec step_rk4(const VectorField& f, const Vec& x, double t, double h);

struct Tsit5Step {
  Vec state;
  Vec error;  // embedded 4th-order estimate of the local error
};
Tsit5Step step_tsit5(const VectorField& f, const Vec& x, double t, double h);

// Integrate from t0 to t1 with the embedded pair and a PI step controller
// (gains 0.7/0.4 on the error ratio, safety 0.9, growth clamped to [0.2,10]).
Vec odesolve_adaptive(const VectorField& f, const Vec& x0, double t0, double t1,
                      const SolverConfig& cfg);

// States at exactly the save times; save_times[0] is the initial time and
// its state is x0. Fixed-step methods take cfg.substeps equal steps per
// interval; the adaptive method integrates each interval to tolerance.
Trajectory rollout(const VectorField& f, const Vec& x0, const std::vector<double>& save_times,
                   const SolverConfig& cfg);

}  // namespace nhode

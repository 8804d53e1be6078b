#include "nhode/ode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nhode {

void SolverConfig::validate() const {
  if (method == SolverMethod::Tsit5Adaptive && (!(rtol > 0) || !(atol > 0)))
    throw std::invalid_argument("solver: rtol and atol must be > 0 for adaptive stepping");
  if (method != SolverMethod::Tsit5Adaptive && substeps < 1)
    throw std::invalid_argument("solver: substeps must be >= 1");
  if (max_steps < 1) throw std::invalid_argument("solver: max_steps must be >= 1");
}

void Trajectory::validate() const {
  if (times.size() != states.size())
    throw std::invalid_argument("trajectory: times/states length mismatch");
  for (size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw std::invalid_argument("trajectory: times not strictly increasing");
}

const Tsit5Tableau& tsit5_tableau() {
  static const Tsit5Tableau t = [] {
    Tsit5Tableau tb{};
    const double c[7] = {0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0};
    const double a2[] = {0.161};
    const double a3[] = {-0.008480655492356989, 0.335480655492357};
    const double a4[] = {2.8971530571054935, -6.359448489975075, 4.3622954328695815};
    const double a5[] = {5.325864828439257, -11.748883564062828, 7.4955393428898365,
                         -0.09249506636175525};
    const double a6[] = {5.86145544294642, -12.92096931784711, 8.159367898576159,
                         -0.071584973281401, -0.028269050394068383};
    const double b[7] = {0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
                         -3.290069515436081, 2.324710524099774, 0.0};
    const double bhat[7] = {0.09824077787029123, 0.010816434459657, 0.4720087724042376,
                            1.5237195812770048, -3.872426680888636, 2.7827926300289607,
                            -1.0 / 66.0};
    for (int i = 0; i < 7; ++i) tb.c[i] = c[i];
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 6; ++j) tb.a[i][j] = 0.0;
    tb.a[1][0] = a2[0];
    for (int j = 0; j < 2; ++j) tb.a[2][j] = a3[j];
    for (int j = 0; j < 3; ++j) tb.a[3][j] = a4[j];
    for (int j = 0; j < 4; ++j) tb.a[4][j] = a5[j];
    for (int j = 0; j < 5; ++j) tb.a[5][j] = a6[j];
    for (int j = 0; j < 6; ++j) tb.a[6][j] = b[j];
    for (int i = 0; i < 7; ++i) {
      tb.b[i] = b[i];
      tb.e[i] = b[i] - bhat[i];
    }
    return tb;
  }();
  return t;
}

namespace {

void check_stage(const Vec& k, double t) {
  if (!all_finite(k))
    throw SolverError("non-finite stage value at t=" + std::to_string(t));
}

}  // namespace

Vec step_rk4(const VectorField& f, const Vec& x, double t, double h) {
  Vec k1 = f(t, x);
  check_stage(k1, t);
  Vec k2 = f(t + 0.5 * h, x + (0.5 * h) * k1);
  check_stage(k2, t);
  Vec k3 = f(t + 0.5 * h, x + (0.5 * h) * k2);
  check_stage(k3, t);
  Vec k4 = f(t + h, x + h * k3);
  check_stage(k4, t);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Tsit5Step step_tsit5(const VectorField& f, const Vec& x, double t, double h) {
  const Tsit5Tableau& tb = tsit5_tableau();
  Vec k[7];
  for (int s = 0; s < 7; ++s) {
    Vec xs = x;
    for (int j = 0; j < s; ++j)
      if (tb.a[s][j] != 0.0) xs += (h * tb.a[s][j]) * k[j];
    k[s] = f(t + tb.c[s] * h, xs);
    check_stage(k[s], t);
  }
  Tsit5Step out;
  out.state = x;
  out.error = Vec::Zero(x.size());
  for (int s = 0; s < 7; ++s) {
    if (tb.b[s] != 0.0) out.state += (h * tb.b[s]) * k[s];
    if (tb.e[s] != 0.0) out.error += (h * tb.e[s]) * k[s];
  }
  return out;
}

namespace {

double error_ratio(const Vec& err, const Vec& x0, const Vec& x1, double rtol, double atol) {
  double acc = 0.0;
  for (int i = 0; i < err.size(); ++i) {
    double sk = atol + rtol * std::max(std::abs(x0[i]), std::abs(x1[i]));
    double r = err[i] / sk;
    acc += r * r;
  }
  return std::sqrt(acc / static_cast<double>(err.size()));
}

// Hairer's starting-step heuristic for a 5th-order method.
double initial_step_guess(const VectorField& f, const Vec& x0, double t0, double t1,
                          double rtol, double atol) {
  Vec f0 = f(t0, x0);
  double d0 = 0.0, d1 = 0.0;
  for (int i = 0; i < x0.size(); ++i) {
    double sk = atol + rtol * std::abs(x0[i]);
    d0 += (x0[i] / sk) * (x0[i] / sk);
    d1 += (f0[i] / sk) * (f0[i] / sk);
  }
  d0 = std::sqrt(d0 / x0.size());
  d1 = std::sqrt(d1 / x0.size());
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h0 = std::min(h0, t1 - t0);

  Vec x1 = x0 + h0 * f0;
  Vec f1 = f(t0 + h0, x1);
  double d2 = 0.0;
  for (int i = 0; i < x0.size(); ++i) {
    double sk = atol + rtol * std::abs(x0[i]);
    double df = (f1[i] - f0[i]) / sk;
    d2 += df * df;
  }
  d2 = std::sqrt(d2 / x0.size()) / h0;

  double dm = std::max(d1, d2);
  double h1 = (dm <= 1e-15) ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 1.0 / 5.0);
  return std::min({100.0 * h0, h1, t1 - t0});
}

constexpr double kSafety = 0.9;
constexpr double kBetaP = 0.7 / 5.0;
constexpr double kBetaI = 0.4 / 5.0;
constexpr double kMinFactor = 0.2;
constexpr double kMaxFactor = 10.0;

}  // namespace

Vec odesolve_adaptive(const VectorField& f, const Vec& x0, double t0, double t1,
                      const SolverConfig& cfg) {
  cfg.validate();
  if (!(t1 > t0)) throw std::invalid_argument("odesolve: t1 must be > t0");

  double t = t0;
  Vec x = x0;
  double h = cfg.initial_step > 0 ? std::min(cfg.initial_step, t1 - t0)
                                  : initial_step_guess(f, x0, t0, t1, cfg.rtol, cfg.atol);
  double prev_ratio = 1.0;
  bool rejected = false;
  int attempts = 0;

  while (t < t1) {
    if (++attempts > cfg.max_steps)
      throw SolverError("adaptive solve exceeded max steps (" + std::to_string(cfg.max_steps) +
                        ")");
    if (h < 16.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(t), 1.0))
      throw SolverError("adaptive step underflow at t=" + std::to_string(t));
    bool clipped = t + h >= t1;
    double hs = clipped ? t1 - t : h;

    Tsit5Step s = step_tsit5(f, x, t, hs);
    double ratio = error_ratio(s.error, x, s.state, cfg.rtol, cfg.atol);

    if (ratio <= 1.0) {
      t = clipped ? t1 : t + hs;
      x = s.state;
      double grow = (ratio == 0.0)
                        ? kMaxFactor
                        : kSafety * std::pow(ratio, -kBetaP) * std::pow(prev_ratio, kBetaI);
      grow = std::clamp(grow, kMinFactor, kMaxFactor);
      if (rejected) grow = std::min(grow, 1.0);
      h = hs * grow;
      prev_ratio = std::max(ratio, 1e-10);
      rejected = false;
    } else {
      double shrink = std::clamp(kSafety * std::pow(ratio, -kBetaP), kMinFactor, 1.0);
      h = hs * shrink;
      rejected = true;
    }
  }
  return x;
}

Trajectory rollout(const VectorField& f, const Vec& x0, const std::vector<double>& save_times,
                   const SolverConfig& cfg) {
  cfg.validate();
  if (save_times.empty()) throw std::invalid_argument("rollout: empty save times");
  for (size_t i = 1; i < save_times.size(); ++i)
    if (!(save_times[i] > save_times[i - 1]))
      throw std::invalid_argument("rollout: save times not strictly increasing");

  Trajectory traj;
  traj.times = save_times;
  traj.states.reserve(save_times.size());
  traj.states.push_back(x0);

  Vec x = x0;
  for (size_t i = 0; i + 1 < save_times.size(); ++i) {
    double ta = save_times[i];
    double tb = save_times[i + 1];
    if (cfg.method == SolverMethod::Tsit5Adaptive) {
      x = odesolve_adaptive(f, x, ta, tb, cfg);
    } else {
      double h = (tb - ta) / cfg.substeps;
      for (int s = 0; s < cfg.substeps; ++s) {
        double t = ta + s * h;
        x = (cfg.method == SolverMethod::Rk4) ? step_rk4(f, x, t, h)
                                              : step_tsit5(f, x, t, h).state;
      }
    }
    traj.states.push_back(x);
  }
  return traj;
}

}  // namespace nhode

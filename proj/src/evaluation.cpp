#include "nhode/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

namespace nhode {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> uniform_grid(double horizon, double dt) {
  int steps = static_cast<int>(std::llround(horizon / dt)) + 1;
  std::vector<double> grid(steps);
  for (int i = 0; i < steps; ++i) grid[i] = i * dt;
  return grid;
}

// Fixed-step prediction rollout that records the divergence index instead of
// throwing; states after divergence repeat the last finite one.
struct GuardedRollout {
  std::vector<Vec> states;
  int diverged_at = -1;  // first bad save index, -1 if none
};

GuardedRollout guarded_rollout(const DynamicsModel& model, const Vec& x0,
                               const std::vector<double>& grid, SolverMethod method,
                               int substeps) {
  GuardedRollout out;
  out.states.reserve(grid.size());
  out.states.push_back(x0);
  Vec x = x0;
  VectorField f = field_fn(model);
  for (size_t i = 0; i + 1 < grid.size(); ++i) {
    if (out.diverged_at >= 0) {
      out.states.push_back(x);
      continue;
    }
    double h = (grid[i + 1] - grid[i]) / substeps;
    bool bad = false;
    for (int s = 0; s < substeps && !bad; ++s) {
      double t = grid[i] + s * h;
      Vec xn;
      try {
        xn = (method == SolverMethod::Rk4) ? step_rk4(f, x, t, h)
                                           : step_tsit5(f, x, t, h).state;
      } catch (const SolverError&) {
        bad = true;
        break;
      }
      if (!all_finite(xn) || xn.cwiseAbs().maxCoeff() > kDivergenceLimit) {
        bad = true;
        break;
      }
      x = xn;
    }
    if (bad) out.diverged_at = static_cast<int>(i) + 1;
    out.states.push_back(x);
  }
  return out;
}

double mse_over(const Vec& a, const Vec& b, const std::vector<int>& idx) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (int i : idx) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(idx.size());
}

double finite_or_inf(double v) { return std::isfinite(v) ? v : kInf; }

}  // namespace

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

MetricsRecord evaluate(const DynamicsModel& model, const Encoder* encoder,
                       const SystemSpec& spec, const ObservationMask& scheme,
                       const EvalConfig& cfg) {
  model.validate();
  spec.validate();
  scheme.validate();
  if (model.state_dim() != spec.state_dim())
    throw std::invalid_argument("evaluate: model/system dimension mismatch");
  if (encoder) encoder->validate(scheme);
  if (cfg.n_test < 1) throw std::invalid_argument("evaluate: n_test must be >= 1");

  const std::vector<double> grid = uniform_grid(cfg.horizon, cfg.dt);
  const int T = static_cast<int>(grid.size());
  const int K = cfg.n_test;

  MetricsRecord rec;
  rec.times = grid;
  rec.mse_observed.resize(T, K);
  rec.mse_unobserved.resize(T, K);
  rec.energy_error.resize(T, K);
  rec.momentum_error.resize(T, K);
  rec.angular_momentum_error.resize(T, K);
  rec.short_horizon = spec.default_horizon();
  rec.short_observed.resize(K);
  rec.short_unobserved.resize(K);
  rec.long_observed.resize(K);
  rec.long_unobserved.resize(K);

  SolverConfig truth_cfg;
  truth_cfg.method = SolverMethod::Tsit5Adaptive;
  // reference two decades tighter than the data-generation tolerances
  truth_cfg.rtol = 0.01 * (cfg.data_rtol > 0 ? cfg.data_rtol : spec.default_rtol());
  truth_cfg.atol = 0.01 * (cfg.data_atol > 0 ? cfg.data_atol : spec.default_atol());
  truth_cfg.max_steps = std::max(spec.default_max_steps() * 64, 1 << 22);

  VectorField truth_field = true_field_fn(spec);

  auto eval_one = [&](int t) {
    CounterRng rng(derive_seed(cfg.seed, "eval", static_cast<std::uint64_t>(t)));
    Vec x0 = sample_initial_condition(spec, rng);
    Trajectory truth = rollout(truth_field, x0, grid, truth_cfg);

    Vec pred0 = x0;
    if (encoder) {
      std::vector<Vec> window;
      for (int i = 0; i <= encoder->window; ++i)
        window.push_back(observe(truth.states[i], scheme));
      Vec hidden = encode_initial_hidden(*encoder, window);
      pred0 = assemble_state(observe(x0, scheme), hidden, scheme);
    }
    GuardedRollout pred = guarded_rollout(model, pred0, grid, cfg.method, cfg.substeps);

    const double h0 = true_hamiltonian(spec, truth.states[0]);
    const Vec p0 = total_linear_momentum(spec, pred.states[0]);
    const Eigen::Vector3d l0 = total_angular_momentum(spec, pred.states[0]);

    for (int i = 0; i < T; ++i) {
      bool dead = pred.diverged_at >= 0 && i >= pred.diverged_at;
      if (dead) {
        rec.mse_observed(i, t) = kInf;
        rec.mse_unobserved(i, t) = scheme.hidden.empty()
                                       ? std::numeric_limits<double>::quiet_NaN()
                                       : kInf;
        rec.energy_error(i, t) = kInf;
        rec.momentum_error(i, t) = kInf;
        rec.angular_momentum_error(i, t) = kInf;
        continue;
      }
      const Vec& xp = pred.states[i];
      const Vec& xt = truth.states[i];
      rec.mse_observed(i, t) = finite_or_inf(mse_over(xp, xt, scheme.observed));
      rec.mse_unobserved(i, t) = scheme.hidden.empty()
                                     ? std::numeric_limits<double>::quiet_NaN()
                                     : finite_or_inf(mse_over(xp, xt, scheme.hidden));
      rec.energy_error(i, t) = finite_or_inf(std::abs(true_hamiltonian(spec, xp) - h0));
      rec.momentum_error(i, t) = finite_or_inf((total_linear_momentum(spec, xp) - p0).norm());
      rec.angular_momentum_error(i, t) =
          finite_or_inf((total_angular_momentum(spec, xp) - l0).norm());
    }

    auto window_mean = [&](const Mat& series, double t_max) {
      double acc = 0.0;
      int count = 0;
      for (int i = 0; i < T; ++i) {
        if (grid[i] > t_max + 1e-12) break;
        acc += series(i, t);
        ++count;
      }
      return count ? acc / count : std::numeric_limits<double>::quiet_NaN();
    };
    rec.short_observed[t] = window_mean(rec.mse_observed, rec.short_horizon);
    rec.short_unobserved[t] = window_mean(rec.mse_unobserved, rec.short_horizon);
    rec.long_observed[t] = window_mean(rec.mse_observed, cfg.horizon);
    rec.long_unobserved[t] = window_mean(rec.mse_unobserved, cfg.horizon);
  };

  int nt = std::min(std::max(1, cfg.threads), K);
  if (nt == 1) {
    for (int t = 0; t < K; ++t) eval_one(t);
  } else {
    std::vector<std::thread> pool;
    int chunk = (K + nt - 1) / nt;
    for (int w = 0; w < nt; ++w)
      pool.emplace_back([&, w] {
        for (int t = w * chunk; t < std::min(K, (w + 1) * chunk); ++t) eval_one(t);
      });
    for (auto& th : pool) th.join();
  }

  auto aggregate = [&](const Mat& series, Vec& med, Vec& mx) {
    med.resize(T);
    mx.resize(T);
    std::vector<double> row(K);
    for (int i = 0; i < T; ++i) {
      for (int t = 0; t < K; ++t) row[t] = series(i, t);
      med[i] = median(row);
      mx[i] = *std::max_element(row.begin(), row.end());
    }
  };
  aggregate(rec.mse_observed, rec.median_mse_observed, rec.max_mse_observed);
  aggregate(rec.mse_unobserved, rec.median_mse_unobserved, rec.max_mse_unobserved);
  aggregate(rec.energy_error, rec.median_energy_error, rec.max_energy_error);
  return rec;
}

namespace {

void write_series_csv(const std::string& path, const std::vector<double>& times,
                      const Mat& series) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "time";
  for (int t = 0; t < series.cols(); ++t) out << ",traj" << t;
  out << "\n";
  char buf[64];
  for (int i = 0; i < series.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", times[i]);
    out << buf;
    for (int t = 0; t < series.cols(); ++t) {
      std::snprintf(buf, sizeof buf, "%.17g", series(i, t));
      out << ',' << buf;
    }
    out << "\n";
  }
}

}  // namespace

void write_metrics_csvs(const std::string& dir, const MetricsRecord& rec) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_series_csv(dir + "/mse_observed.csv", rec.times, rec.mse_observed);
  write_series_csv(dir + "/mse_unobserved.csv", rec.times, rec.mse_unobserved);
  write_series_csv(dir + "/energy_error.csv", rec.times, rec.energy_error);
  write_series_csv(dir + "/momentum_error.csv", rec.times, rec.momentum_error);
  write_series_csv(dir + "/angular_momentum_error.csv", rec.times, rec.angular_momentum_error);

  std::ofstream out(dir + "/aggregates.csv");
  if (!out) throw std::runtime_error("cannot open for writing: " + dir + "/aggregates.csv");
  out << "time,median_mse_observed,max_mse_observed,median_mse_unobserved,max_mse_unobserved,"
         "median_energy_error,max_energy_error\n";
  char buf[64];
  for (size_t i = 0; i < rec.times.size(); ++i) {
    auto put = [&](double v, char sep) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << sep << buf;
    };
    std::snprintf(buf, sizeof buf, "%.17g", rec.times[i]);
    out << buf;
    put(rec.median_mse_observed[i], ',');
    put(rec.max_mse_observed[i], ',');
    put(rec.median_mse_unobserved[i], ',');
    put(rec.max_mse_unobserved[i], ',');
    put(rec.median_energy_error[i], ',');
    put(rec.max_energy_error[i], ',');
    out << "\n";
  }
}

SummaryRow summarize(const MetricsRecord& rec, const std::string& method) {
  auto med = [](const Vec& v) {
    std::vector<double> tmp(v.data(), v.data() + v.size());
    return median(std::move(tmp));
  };
  SummaryRow row;
  row.method = method;
  row.short_observed = med(rec.short_observed);
  row.short_unobserved = med(rec.short_unobserved);
  row.long_observed = med(rec.long_observed);
  row.long_unobserved = med(rec.long_unobserved);
  return row;
}

void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "method,short_observed,short_unobserved,long_observed,long_unobserved\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.method;
    for (double v : {r.short_observed, r.short_unobserved, r.long_observed, r.long_unobserved}) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ',' << buf;
    }
    out << "\n";
  }
}

ConservationReport conservation_audit(const DynamicsModel& model, const Vec& x0, double horizon,
                                      double dt, SolverMethod method) {
  model.validate();
  ConservationReport rep;
  rep.has_hamiltonian = model.is_nhode() || model.kind == ModelKind::Oracle;

  const std::vector<double> grid = uniform_grid(horizon, dt);
  SolverConfig cfg;
  cfg.method = method == SolverMethod::Tsit5Adaptive ? SolverMethod::Tsit5Fixed : method;
  cfg.substeps = 1;
  Trajectory traj = rollout(field_fn(model), x0, grid, cfg);

  const int n = model.dof();
  const int d = model.dim;
  double h0 = rep.has_hamiltonian ? hamiltonian_value(model, x0) : 0.0;
  Vec p0 = traj.states[0].tail(n);
  Vec psum0 = Vec::Zero(d);
  for (int j = 0; j < model.particles; ++j) psum0 += p0.segment(j * d, d);

  auto angular = [&](const Vec& x) {
    Eigen::Vector3d l = Eigen::Vector3d::Zero();
    for (int j = 0; j < model.particles; ++j) {
      Eigen::Vector3d q3 = Eigen::Vector3d::Zero(), p3 = Eigen::Vector3d::Zero();
      q3.head(d) = x.segment(j * d, d);
      p3.head(d) = x.segment(n + j * d, d);
      l += q3.cross(p3);
    }
    return l;
  };
  Eigen::Vector3d l0 = angular(traj.states[0]);

  const bool rel = model.coords == CoordMode::Rel && model.kind != ModelKind::Oracle;
  const bool pot_rel = rel && model.kind == ModelKind::NhodePot;

  for (int i = 0; i < traj.size(); ++i) {
    const Vec& x = traj.states[i];
    if (rep.has_hamiltonian)
      rep.learned_energy_drift =
          std::max(rep.learned_energy_drift, std::abs(hamiltonian_value(model, x) - h0));
    Vec psum = Vec::Zero(d);
    for (int j = 0; j < model.particles; ++j) psum += x.segment(n + j * d, d);
    rep.momentum_drift = std::max(rep.momentum_drift, (psum - psum0).norm());
    rep.angular_momentum_drift = std::max(rep.angular_momentum_drift, (angular(x) - l0).norm());

    // pointwise identities, sampled sparsely along the rollout
    if (i % 100 != 0 && i != traj.size() - 1) continue;
    if (rep.has_hamiltonian) {
      Vec g = hamiltonian_gradient(model, x);
      Vec f = vector_field(model, x);
      rep.max_grad_flow_dot = std::max(rep.max_grad_flow_dot, std::abs(g.dot(f)));
      if (rel) {
        Vec qsum = Vec::Zero(d);
        for (int j = 0; j < model.particles; ++j) qsum += g.segment(j * d, d);
        rep.max_momentum_bracket = std::max(rep.max_momentum_bracket, qsum.norm());
      }
      if (pot_rel) {
        Eigen::Vector3d bracket = Eigen::Vector3d::Zero();
        for (int j = 0; j < model.particles; ++j) {
          Eigen::Vector3d q3 = Eigen::Vector3d::Zero(), gq3 = Eigen::Vector3d::Zero();
          Eigen::Vector3d p3 = Eigen::Vector3d::Zero(), gp3 = Eigen::Vector3d::Zero();
          q3.head(d) = x.segment(j * d, d);
          p3.head(d) = x.segment(n + j * d, d);
          gq3.head(d) = g.segment(j * d, d);
          gp3.head(d) = g.segment(n + j * d, d);
          bracket += q3.cross(-gq3) + gp3.cross(p3);
        }
        rep.max_angular_bracket = std::max(rep.max_angular_bracket, bracket.norm());
      }
    } else if (rel) {
      // NODE rel kinds have no gradient identity; momentum drift above is all
      // the audit reports for them.
    }
  }
  return rep;
}

EpsSweepResult epsilon_sweep(const EpsSweepConfig& cfg) {
  if (cfg.eps_values.empty()) throw std::invalid_argument("eps sweep: no epsilon values");
  EpsSweepResult res;

  for (double eps : cfg.eps_values) {
    SystemSpec spec = SystemSpec::tbp(eps);
    ObservationMask scheme = ObservationMask::hide_particle(spec.particles(), spec.dim(), 1);

    SolverConfig gen;
    gen.method = SolverMethod::Tsit5Adaptive;
    gen.rtol = spec.default_rtol();
    gen.atol = spec.default_atol();
    gen.max_steps = spec.default_max_steps();
    Dataset ds = generate_dataset(spec, cfg.n_traj, cfg.horizon, cfg.steps, gen, scheme,
                                  derive_seed(cfg.seed, "eps-data"), cfg.train.threads);

    CounterRng init(derive_seed(cfg.seed, "eps-init"));
    DynamicsModel model = make_model(cfg.kind, cfg.coords, spec.particles(), spec.dim(),
                                     spec.masses(), cfg.width, cfg.depth, init);
    TrainResult tr = train(model, nullptr, ds, cfg.train);

    // trajectory-wise full-state test error
    std::vector<double> grid(cfg.eval_steps + 1);
    for (int i = 0; i <= cfg.eval_steps; ++i) grid[i] = i * cfg.eval_dt;
    SolverConfig truth_cfg = gen;
    truth_cfg.rtol *= 0.01;
    truth_cfg.atol *= 0.01;
    truth_cfg.max_steps = std::max(gen.max_steps * 64, 1 << 22);

    std::vector<double> errors;
    std::vector<int> all_idx;
    for (int t = 0; t < cfg.eval_trajectories; ++t) {
      CounterRng rng(derive_seed(cfg.seed, "eps-eval", static_cast<std::uint64_t>(t)));
      Vec x0 = sample_initial_condition(spec, rng);
      Trajectory truth = rollout(true_field_fn(spec), x0, grid, truth_cfg);
      GuardedRollout pred = guarded_rollout(tr.model, x0, grid, SolverMethod::Tsit5Fixed, 1);
      double acc = 0.0;
      int count = 0;
      std::vector<int> all(spec.state_dim());
      for (int i = 0; i < spec.state_dim(); ++i) all[i] = i;
      for (size_t i = 0; i < grid.size(); ++i) {
        double m = (pred.diverged_at >= 0 && static_cast<int>(i) >= pred.diverged_at)
                       ? kInf
                       : mse_over(pred.states[i], truth.states[i], all);
        acc += m;
        ++count;
      }
      double mse = finite_or_inf(acc / count);
      errors.push_back(mse);
      res.rows.push_back({eps, t, mse});
    }

    std::sort(errors.begin(), errors.end());
    auto quantile = [&](double p) {
      double pos = p * (errors.size() - 1);
      size_t lo = static_cast<size_t>(pos);
      size_t hi = std::min(lo + 1, errors.size() - 1);
      double frac = pos - lo;
      return errors[lo] * (1.0 - frac) + errors[hi] * frac;
    };
    res.quartiles.push_back(
        {eps, errors.front(), quantile(0.25), quantile(0.5), quantile(0.75), errors.back()});
  }
  return res;
}

void write_eps_sweep_csvs(const std::string& rows_path, const std::string& quartiles_path,
                          const EpsSweepResult& res) {
  char buf[64];
  std::ofstream rows(rows_path);
  if (!rows) throw std::runtime_error("cannot open for writing: " + rows_path);
  rows << "eps,trajectory,mse\n";
  for (const auto& r : res.rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.eps);
    rows << buf << ',' << r.trajectory << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.mse);
    rows << buf << "\n";
  }
  std::ofstream q(quartiles_path);
  if (!q) throw std::runtime_error("cannot open for writing: " + quartiles_path);
  q << "eps,min,q1,median,q3,max\n";
  for (const auto& r : res.quartiles) {
    std::snprintf(buf, sizeof buf, "%.17g", r.eps);
    q << buf;
    for (double v : {r.min, r.q1, r.median, r.q3, r.max}) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      q << ',' << buf;
    }
    q << "\n";
  }
}

IdentifiabilityResult identifiability_demo(const SystemSpec& spec, double k2_tilde,
                                           double l2_tilde, int n_initial_conditions,
                                           double horizon, int steps, double rtol,
                                           std::uint64_t seed) {
  if (spec.kind != SystemKind::Dms)
    throw std::invalid_argument("identifiability: construction applies to the two-spring chain");
  if (!(k2_tilde > 0) || !(l2_tilde > 0))
    throw std::invalid_argument("identifiability: modified spring parameters must be positive");
  if (k2_tilde != spec.dms_k2)
    throw std::invalid_argument(
        "identifiability: a constant shift exists only for an unchanged spring constant");

  IdentifiabilityResult res;
  res.shift = l2_tilde - spec.dms_l2;

  SystemSpec shifted = spec;
  shifted.dms_l2 = l2_tilde;

  std::vector<double> grid(steps);
  double dt = horizon / (steps - 1);
  for (int i = 0; i < steps; ++i) grid[i] = i * dt;

  SolverConfig cfg;
  cfg.method = SolverMethod::Tsit5Adaptive;
  cfg.rtol = rtol;
  cfg.atol = rtol * 0.01;
  cfg.max_steps = 1 << 22;

  for (int ic = 0; ic < n_initial_conditions; ++ic) {
    ++res.attempted;
    CounterRng rng(derive_seed(seed, "ident", static_cast<std::uint64_t>(ic)));
    Vec x0 = sample_initial_condition(spec, rng);
    Vec x0s = x0;
    x0s[1] += res.shift;

    Trajectory base = rollout(true_field_fn(spec), x0, grid, cfg);
    Trajectory mod = rollout(true_field_fn(shifted), x0s, grid, cfg);

    bool branch_ok = true;
    for (int i = 0; i < steps && branch_ok; ++i) {
      branch_ok = (base.states[i][1] - base.states[i][0] > 0) &&
                  (mod.states[i][1] - mod.states[i][0] > 0);
    }
    if (!branch_ok) {
      ++res.skipped;
      continue;
    }
    ++res.completed;
    for (int i = 0; i < steps; ++i) {
      const Vec& a = base.states[i];
      const Vec& b = mod.states[i];
      res.max_observed_deviation = std::max(
          {res.max_observed_deviation, std::abs(a[0] - b[0]), std::abs(a[2] - b[2])});
      res.max_hidden_shift_error = std::max(
          res.max_hidden_shift_error, std::abs(std::abs(b[1] - a[1]) - std::abs(res.shift)));
      res.max_hidden_momentum_deviation =
          std::max(res.max_hidden_momentum_deviation, std::abs(a[3] - b[3]));
    }
  }
  return res;
}

}  // namespace nhode

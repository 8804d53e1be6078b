#include "nhode/config.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using namespace nhode;

namespace {

int resolved_threads(const ExperimentConfig& cfg) {
  if (cfg.train.threads > 0) return cfg.train.threads;
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  size_t dots = text.find("..");
  if (dots != std::string::npos) {
    std::uint64_t a = std::stoull(text.substr(0, dots));
    std::uint64_t b = std::stoull(text.substr(dots + 2));
    if (b < a) throw ConfigError("seeds: descending range");
    for (std::uint64_t s = a; s <= b; ++s) seeds.push_back(s);
    return seeds;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw ConfigError("seeds: empty list");
  return seeds;
}

struct CommonOpts {
  std::string config_path;
  std::string out;
  std::string seeds_text;
  std::string model_override, coords_override;
  int n_traj_override = -1;
  int epochs_override = -1;
  int substeps_override = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opt, bool with_overrides = true) {
  cmd->add_option("--config", opt.config_path, "experiment config file")->required();
  cmd->add_option("--out", opt.out, "output path or directory");
  cmd->add_option("--seed,--seeds", opt.seeds_text, "seed, list 0,1,2 or range 0..9");
  if (with_overrides) {
    cmd->add_option("--model", opt.model_override, "override model kind");
    cmd->add_option("--coords", opt.coords_override, "override coordinate mode");
    cmd->add_option("--n-traj", opt.n_traj_override, "override trajectory count");
    cmd->add_option("--epochs", opt.epochs_override, "override epoch count");
    cmd->add_option("--substeps", opt.substeps_override, "override rollout substeps");
  }
}

ExperimentConfig load_with_overrides(const CommonOpts& opt) {
  ExperimentConfig cfg = load_config_file(opt.config_path);
  if (!opt.model_override.empty()) cfg.model_kind = model_kind_from_string(opt.model_override);
  if (!opt.coords_override.empty()) cfg.coords = coord_mode_from_string(opt.coords_override);
  if (opt.n_traj_override >= 0) cfg.n_traj = opt.n_traj_override;
  if (opt.epochs_override >= 0) cfg.train.epochs = opt.epochs_override;
  if (opt.substeps_override >= 0) cfg.train.substeps = opt.substeps_override;
  if (!opt.out.empty()) cfg.out_dir = opt.out;
  cfg.validate();
  return cfg;
}

std::vector<std::uint64_t> seeds_or_config(const CommonOpts& opt, const ExperimentConfig& cfg) {
  if (!opt.seeds_text.empty()) return parse_seeds(opt.seeds_text);
  return {cfg.seed};
}

DynamicsModel init_model(const ExperimentConfig& cfg, std::uint64_t seed) {
  CounterRng rng(derive_seed(seed, "init"));
  return make_model(cfg.model_kind, cfg.coords, cfg.system.particles(), cfg.system.dim(),
                    cfg.system.masses(), cfg.width, cfg.resolved_depth(), rng);
}

Encoder init_encoder(const ExperimentConfig& cfg, std::uint64_t seed) {
  CounterRng rng(derive_seed(seed, "init-enc"));
  return make_encoder(cfg.observation(), cfg.window, cfg.width, cfg.encoder_depth, rng);
}

std::string dataset_path(const ExperimentConfig& cfg, const std::string& out) {
  if (!out.empty()) return out;
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir + "/dataset.bin";
}

int cmd_gen_data(const CommonOpts& opt) {
  ExperimentConfig cfg = load_config_file(opt.config_path);
  if (opt.n_traj_override >= 0) cfg.n_traj = opt.n_traj_override;
  cfg.validate();
  std::uint64_t seed = opt.seeds_text.empty() ? cfg.seed : parse_seeds(opt.seeds_text).front();

  Dataset ds = generate_dataset(cfg.system, cfg.resolved_n_traj(), cfg.resolved_horizon(),
                                cfg.resolved_steps(), cfg.data_solver(), cfg.observation(), seed,
                                resolved_threads(cfg));
  std::string path = dataset_path(cfg, opt.out);
  save_dataset(path, ds);
  std::printf("wrote %s: %zu trajectories, %d steps, dt=%.10g\n", path.c_str(),
              ds.trajectories.size(), ds.steps(), ds.dt);
  return 0;
}

void check_dataset_matches(const ExperimentConfig& cfg, const Dataset& ds) {
  if (ds.system.kind != cfg.system.kind)
    throw ConfigError("dataset was generated for a different system kind");
  if (ds.system.parameter_list() != cfg.system.parameter_list())
    throw ConfigError("dataset system parameters do not match the config");
  ObservationMask want = cfg.observation();
  if (ds.scheme.observed != want.observed)
    throw ConfigError("dataset observation scheme does not match the config");
}

int cmd_train(const CommonOpts& opt, const std::string& data_path) {
  ExperimentConfig cfg = load_with_overrides(opt);
  if (cfg.model_kind == ModelKind::Oracle)
    throw ConfigError("train: the oracle model has no parameters");
  std::string dpath = data_path.empty() ? cfg.out_dir + "/dataset.bin" : data_path;
  Dataset ds = load_dataset(dpath);
  check_dataset_matches(cfg, ds);
  std::uint64_t digest = file_digest(dpath);
  fs::create_directories(cfg.out_dir);

  for (std::uint64_t seed : seeds_or_config(opt, cfg)) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    tc.threads = resolved_threads(cfg);
    DynamicsModel model = init_model(cfg, seed);
    Encoder enc;
    const Encoder* encp = nullptr;
    if (cfg.use_encoder) {
      enc = init_encoder(cfg, seed);
      encp = &enc;
    }
    TrainResult res = train(model, encp, ds, tc);

    Checkpoint ck;
    ck.model = res.model;
    ck.encoder = res.encoder;
    ck.config_text = serialize_config(cfg);
    ck.dataset_digest = digest;
    ck.seed = seed;
    std::string base = cfg.out_dir + "/ckpt_seed" + std::to_string(seed);
    save_checkpoint(base + ".bin", ck);
    write_loss_history_csv(cfg.out_dir + "/loss_history_seed" + std::to_string(seed) + ".csv",
                           res.history);
    std::printf("seed %llu: train loss %.6e -> %.6e (%d epochs), checkpoint %s\n",
                static_cast<unsigned long long>(seed), res.history.front().train_loss,
                res.history.back().train_loss, tc.epochs, (base + ".bin").c_str());
  }
  return 0;
}

void check_checkpoint_matches(const ExperimentConfig& cfg, const Checkpoint& ck) {
  if (ck.model.kind != cfg.model_kind || ck.model.coords != cfg.coords)
    throw ConfigError("checkpoint model variant does not match the config");
  if (ck.model.particles != cfg.system.particles() || ck.model.dim != cfg.system.dim())
    throw ConfigError("checkpoint geometry does not match the config");
  if (static_cast<bool>(ck.encoder) != cfg.use_encoder)
    throw ConfigError("checkpoint encoder presence does not match the config");
}

void write_long_rollout_csv(const std::string& path, const ExperimentConfig& cfg,
                            const DynamicsModel& model, double horizon) {
  const double dt = cfg.eval_dt;
  int steps = static_cast<int>(std::llround(horizon / dt)) + 1;
  std::vector<double> grid(steps);
  for (int i = 0; i < steps; ++i) grid[i] = i * dt;
  CounterRng rng(derive_seed(cfg.seed, "eval", 0));
  Vec x0 = sample_initial_condition(cfg.system, rng);

  SolverConfig truth_cfg = cfg.data_solver();
  truth_cfg.max_steps = std::max(truth_cfg.max_steps * 64, 1 << 22);
  Trajectory truth = rollout(true_field_fn(cfg.system), x0, grid, truth_cfg);

  SolverConfig pred_cfg;
  pred_cfg.method = SolverMethod::Tsit5Fixed;
  Trajectory pred;
  pred.times = grid;
  pred.states.push_back(x0);
  Vec x = x0;
  VectorField f = field_fn(model);
  bool dead = false;
  for (int i = 0; i + 1 < steps; ++i) {
    if (!dead) {
      try {
        x = step_tsit5(f, x, grid[i], dt).state;
      } catch (const SolverError&) {
        dead = true;
      }
      if (!all_finite(x) || x.cwiseAbs().maxCoeff() > kDivergenceLimit) dead = true;
    }
    pred.states.push_back(x);
  }

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  const int sd = cfg.system.state_dim();
  out << "time";
  for (int c = 0; c < sd; ++c) out << ",pred" << c;
  for (int c = 0; c < sd; ++c) out << ",true" << c;
  out << "\n";
  char buf[64];
  for (int i = 0; i < steps; ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", grid[i]);
    out << buf;
    for (int c = 0; c < sd; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", pred.states[i][c]);
      out << ',' << buf;
    }
    for (int c = 0; c < sd; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", truth.states[i][c]);
      out << ',' << buf;
    }
    out << "\n";
  }
}

int cmd_evaluate(const CommonOpts& opt, std::vector<std::string> ckpt_paths, bool oracle,
                 double long_horizon) {
  ExperimentConfig cfg = load_with_overrides(opt);
  ObservationMask scheme = cfg.observation();

  EvalConfig ec;
  ec.n_test = cfg.eval_n_test;
  ec.horizon = cfg.eval_horizon;
  ec.dt = cfg.eval_dt;
  ec.seed = derive_seed(cfg.seed, "eval-root");
  ec.data_rtol = cfg.data_solver().rtol;
  ec.data_atol = cfg.data_solver().atol;
  ec.threads = resolved_threads(cfg);

  fs::create_directories(cfg.out_dir);
  std::vector<SummaryRow> rows;
  std::vector<MetricsRecord> records;

  if (oracle) {
    DynamicsModel model = make_oracle(cfg.system);
    MetricsRecord rec = evaluate(model, nullptr, cfg.system, scheme, ec);
    write_metrics_csvs(cfg.out_dir + "/oracle", rec);
    rows.push_back(summarize(rec, "oracle"));
    records.push_back(std::move(rec));
    if (long_horizon > 0)
      write_long_rollout_csv(cfg.out_dir + "/long_rollout.csv", cfg, model, long_horizon);
  } else {
    if (ckpt_paths.empty()) throw ConfigError("evaluate: no checkpoints given");
    for (const std::string& path : ckpt_paths) {
      Checkpoint ck = load_checkpoint(path);
      check_checkpoint_matches(cfg, ck);
      const Encoder* encp = ck.encoder ? &*ck.encoder : nullptr;
      MetricsRecord rec = evaluate(ck.model, encp, cfg.system, scheme, ec);
      std::string tag = "seed" + std::to_string(ck.seed);
      write_metrics_csvs(cfg.out_dir + "/" + tag, rec);
      rows.push_back(summarize(
          rec, to_string(ck.model.kind) + "," + to_string(ck.model.coords) + "," + tag));
      records.push_back(std::move(rec));
      if (long_horizon > 0 && &path == &ckpt_paths.front())
        write_long_rollout_csv(cfg.out_dir + "/long_rollout.csv", cfg, ck.model, long_horizon);
    }
  }

  if (records.size() > 1) {
    // both seed aggregations: mean of the per-seed medians and their median
    auto agg = [&](auto&& pick, const std::string& name) {
      std::vector<double> so, su, lo, lu;
      for (const auto& r : rows) {
        so.push_back(r.short_observed);
        su.push_back(r.short_unobserved);
        lo.push_back(r.long_observed);
        lu.push_back(r.long_unobserved);
      }
      SummaryRow row;
      row.method = name;
      row.short_observed = pick(so);
      row.short_unobserved = pick(su);
      row.long_observed = pick(lo);
      row.long_unobserved = pick(lu);
      return row;
    };
    auto mean = [](const std::vector<double>& v) {
      double acc = 0.0;
      for (double x : v) acc += x;
      return acc / v.size();
    };
    rows.push_back(agg(mean, "aggregate-mean-of-seeds"));
    rows.push_back(agg([](const std::vector<double>& v) { return median(v); },
                       "aggregate-median-of-seeds"));
  }
  write_summary_csv(cfg.out_dir + "/summary.csv", rows);
  std::printf("wrote metrics for %zu model(s) to %s\n", records.size(), cfg.out_dir.c_str());
  return 0;
}

int cmd_audit(const CommonOpts& opt, const std::string& ckpt_path, double horizon, double dt) {
  ExperimentConfig cfg = load_with_overrides(opt);
  DynamicsModel model;
  if (!ckpt_path.empty()) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    model = ck.model;
  } else if (cfg.model_kind == ModelKind::Oracle) {
    model = make_oracle(cfg.system);
  } else {
    model = init_model(cfg, cfg.seed);  // random parameters: the identities hold for any theta
  }

  CounterRng rng(derive_seed(cfg.seed, "audit"));
  Vec x0 = sample_initial_condition(cfg.system, rng);
  ConservationReport rep = conservation_audit(model, x0, horizon, dt);

  const bool rel = model.coords == CoordMode::Rel;
  const bool pot_rel = rel && model.kind == ModelKind::NhodePot;
  std::printf("audit of %s,%s over horizon %g, dt %g\n", to_string(model.kind).c_str(),
              to_string(model.coords).c_str(), horizon, dt);
  if (rep.has_hamiltonian) {
    std::printf("  learned-energy drift   %.3e (guaranteed)\n", rep.learned_energy_drift);
    std::printf("  grad(H).f identity     %.3e (guaranteed)\n", rep.max_grad_flow_dot);
  }
  std::printf("  linear momentum drift  %.3e (%s)\n", rep.momentum_drift,
              rel && model.is_nhode() ? "guaranteed" : "not guaranteed");
  if (rel && model.is_nhode())
    std::printf("  momentum bracket       %.3e (guaranteed)\n", rep.max_momentum_bracket);
  std::printf("  angular momentum drift %.3e (%s)\n", rep.angular_momentum_drift,
              pot_rel ? "guaranteed" : "not guaranteed");
  if (pot_rel) std::printf("  angular bracket        %.3e (guaranteed)\n", rep.max_angular_bracket);

  fs::create_directories(cfg.out_dir);
  std::ofstream out(cfg.out_dir + "/audit.csv");
  out << "metric,value\n";
  char buf[64];
  auto put = [&](const char* name, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << name << ',' << buf << "\n";
  };
  if (rep.has_hamiltonian) {
    put("learned_energy_drift", rep.learned_energy_drift);
    put("grad_flow_dot", rep.max_grad_flow_dot);
  }
  put("momentum_drift", rep.momentum_drift);
  put("angular_momentum_drift", rep.angular_momentum_drift);
  if (rel && model.is_nhode()) put("momentum_bracket", rep.max_momentum_bracket);
  if (pot_rel) put("angular_bracket", rep.max_angular_bracket);
  return 0;
}

int cmd_eps_sweep(const CommonOpts& opt) {
  ExperimentConfig cfg = load_with_overrides(opt);
  EpsSweepConfig sc;
  sc.eps_values = cfg.sweep_eps;
  sc.n_traj = cfg.sweep_n_traj;
  sc.steps = cfg.sweep_steps;
  sc.horizon = cfg.sweep_horizon;
  sc.eval_trajectories = cfg.sweep_eval_trajectories;
  sc.eval_steps = cfg.sweep_eval_steps;
  sc.eval_dt = cfg.sweep_eval_dt;
  sc.width = cfg.width;
  sc.depth = cfg.resolved_depth();
  sc.kind = cfg.model_kind == ModelKind::Oracle ? ModelKind::NhodePot : cfg.model_kind;
  sc.coords = cfg.coords;
  sc.train = cfg.train;
  sc.train.seed = cfg.seed;
  sc.train.threads = resolved_threads(cfg);
  sc.seed = cfg.seed;

  EpsSweepResult res = epsilon_sweep(sc);
  fs::create_directories(cfg.out_dir);
  write_eps_sweep_csvs(cfg.out_dir + "/eps_sweep_rows.csv",
                       cfg.out_dir + "/eps_sweep_quartiles.csv", res);
  for (const auto& q : res.quartiles)
    std::printf("eps %.3g: median mse %.6e (q1 %.3e, q3 %.3e)\n", q.eps, q.median, q.q1, q.q3);
  return 0;
}

int cmd_identifiability(const CommonOpts& opt) {
  ExperimentConfig cfg = load_with_overrides(opt);
  double k2t = cfg.ident_k2_tilde > 0 ? cfg.ident_k2_tilde : cfg.system.dms_k2;
  IdentifiabilityResult res =
      identifiability_demo(cfg.system, k2t, cfg.ident_l2_tilde, cfg.ident_n_ic,
                           cfg.ident_horizon, cfg.ident_steps, cfg.ident_rtol, cfg.seed);
  std::printf("hidden-mass shift a = %.10g\n", res.shift);
  std::printf("initial conditions: %d attempted, %d completed, %d skipped (branch change)\n",
              res.attempted, res.completed, res.skipped);
  std::printf("max observed deviation        %.3e\n", res.max_observed_deviation);
  std::printf("max |hidden shift - a|        %.3e\n", res.max_hidden_shift_error);
  std::printf("max hidden momentum deviation %.3e\n", res.max_hidden_momentum_deviation);

  fs::create_directories(cfg.out_dir);
  std::ofstream out(cfg.out_dir + "/identifiability.csv");
  out << "metric,value\n";
  char buf[64];
  auto put = [&](const char* name, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << name << ',' << buf << "\n";
  };
  put("shift", res.shift);
  put("attempted", res.attempted);
  put("completed", res.completed);
  put("skipped", res.skipped);
  put("max_observed_deviation", res.max_observed_deviation);
  put("max_hidden_shift_error", res.max_hidden_shift_error);
  put("max_hidden_momentum_deviation", res.max_hidden_momentum_deviation);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural Hamiltonian ODE experiments"};
  app.require_subcommand(1);

  CommonOpts gen_opt, train_opt, eval_opt, audit_opt, sweep_opt, ident_opt;
  std::string train_data, eval_ckpt_single, audit_ckpt;
  std::vector<std::string> eval_ckpts;
  bool eval_oracle = false;
  double long_horizon = 0.0;
  double audit_horizon = 1.0, audit_dt = 1e-3;

  auto* gen = app.add_subcommand("gen-data", "generate a ground-truth dataset");
  add_common(gen, gen_opt);

  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  add_common(tr, train_opt);
  tr->add_option("--data", train_data, "dataset file (default <out_dir>/dataset.bin)");

  auto* ev = app.add_subcommand("evaluate", "roll out checkpoints against fresh ground truth");
  add_common(ev, eval_opt);
  ev->add_option("--checkpoint", eval_ckpts, "checkpoint file(s)");
  ev->add_flag("--oracle", eval_oracle, "evaluate the exact field instead of a checkpoint");
  ev->add_option("--long-horizon", long_horizon, "also write a qualitative long rollout CSV");

  auto* au = app.add_subcommand("audit", "conservation audit of a model");
  add_common(au, audit_opt);
  au->add_option("--checkpoint", audit_ckpt, "checkpoint file (default: random init)");
  au->add_option("--horizon", audit_horizon, "audit rollout horizon");
  au->add_option("--dt", audit_dt, "audit rollout step");

  auto* sw = app.add_subcommand("eps-sweep", "Plummer softening sweep");
  add_common(sw, sweep_opt);

  auto* id = app.add_subcommand("identifiability", "hidden-state shift construction");
  add_common(id, ident_opt);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_opt);
    if (tr->parsed()) return cmd_train(train_opt, train_data);
    if (ev->parsed()) return cmd_evaluate(eval_opt, eval_ckpts, eval_oracle, long_horizon);
    if (au->parsed()) return cmd_audit(audit_opt, audit_ckpt, audit_horizon, audit_dt);
    if (sw->parsed()) return cmd_eps_sweep(sweep_opt);
    if (id->parsed()) return cmd_identifiability(ident_opt);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return 4;
  } catch (const SolverError& e) {
    std::fprintf(stderr, "solver failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

#include "nhode/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace nhode {

int ExperimentConfig::resolved_n_traj() const {
  if (n_traj > 0) return n_traj;
  return system.kind == SystemKind::Tbp ? 2000 : 4000;
}

SolverConfig ExperimentConfig::data_solver() const {
  SolverConfig s;
  s.method = SolverMethod::Tsit5Adaptive;
  s.rtol = rtol > 0 ? rtol : system.default_rtol();
  s.atol = atol > 0 ? atol : system.default_atol();
  s.max_steps = max_steps > 0 ? max_steps : system.default_max_steps();
  s.initial_step = initial_step;
  return s;
}

ObservationMask ExperimentConfig::observation() const {
  if (hidden_particle == 0) return ObservationMask::full(system.state_dim());
  return ObservationMask::hide_particle(system.particles(), system.dim(), hidden_particle);
}

void ExperimentConfig::validate() const {
  system.validate();
  if (hidden_particle < 0 || hidden_particle > system.particles())
    throw ConfigError("observation: hidden_particle out of range");
  if (use_encoder && hidden_particle == 0)
    throw ConfigError("observation: encoder requires a hidden particle");
  if (model_kind != ModelKind::Oracle && width < 1)
    throw ConfigError("model: width must be >= 1");
  if ((model_kind == ModelKind::NhodePot || model_kind == ModelKind::NodePhys) &&
      system.masses().minCoeff() <= 0)
    throw ConfigError("model: positive masses required");
  try {
    train.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (eval_n_test < 1 || !(eval_dt > 0) || !(eval_horizon > 0))
    throw ConfigError("eval: bad evaluation grid");
  if (resolved_steps() < 2) throw ConfigError("data: steps must be >= 2");
  if (!(resolved_horizon() > 0)) throw ConfigError("data: horizon must be > 0");
}

namespace {

using SectionMap = std::map<std::string, std::map<std::string, std::string>>;

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

SectionMap tokenize(const std::string& text) {
  SectionMap sections;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      sections.try_emplace(section);
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": key outside any section");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
    if (!sections[section].emplace(key, value).second)
      throw ConfigError("config: duplicate key '" + key + "' in [" + section + "]");
  }
  return sections;
}

double to_double(const std::string& section, const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw ConfigError("config: [" + section + "] " + key + ": not a number: " + v);
  }
}

int to_int(const std::string& section, const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return static_cast<int>(d);
  } catch (...) {
    throw ConfigError("config: [" + section + "] " + key + ": not an integer: " + v);
  }
}

std::uint64_t to_u64(const std::string& section, const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    std::uint64_t d = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw ConfigError("config: [" + section + "] " + key + ": not an unsigned integer: " + v);
  }
}

bool to_bool(const std::string& section, const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("config: [" + section + "] " + key + ": expected true or false");
}

std::vector<double> to_double_list(const std::string& section, const std::string& key,
                                   const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_double(section, key, item));
  }
  if (out.empty()) throw ConfigError("config: [" + section + "] " + key + ": empty list");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  SectionMap sections = tokenize(text);
  ExperimentConfig cfg;

  // system kind first; the remaining keys depend on it
  if (auto sit = sections.find("system"); sit != sections.end()) {
    auto kit = sit->second.find("kind");
    if (kit != sit->second.end()) cfg.system.kind = system_kind_from_string(kit->second);
  }

  for (const auto& [section, kv] : sections) {
    for (const auto& [key, value] : kv) {
      auto num = [&] { return to_double(section, key, value); };
      auto integer = [&] { return to_int(section, key, value); };
      bool known = true;

      if (section == "system") {
        SystemSpec& s = cfg.system;
        if (key == "kind") {
          // already applied
        } else if (s.kind == SystemKind::Dms) {
          if (key == "m1") s.dms_m1 = num();
          else if (key == "m2") s.dms_m2 = num();
          else if (key == "k1") s.dms_k1 = num();
          else if (key == "k2") s.dms_k2 = num();
          else if (key == "l1") s.dms_l1 = num();
          else if (key == "l2") s.dms_l2 = num();
          else known = false;
        } else if (s.kind == SystemKind::Nlms) {
          if (key == "m1") s.nlms_mass[0] = num();
          else if (key == "m2") s.nlms_mass[1] = num();
          else if (key == "m3") s.nlms_mass[2] = num();
          else if (key == "k12") s.nlms_k[0] = num();
          else if (key == "k13") s.nlms_k[1] = num();
          else if (key == "k23") s.nlms_k[2] = num();
          else if (key == "l12") s.nlms_rest[0] = num();
          else if (key == "l13") s.nlms_rest[1] = num();
          else if (key == "l23") s.nlms_rest[2] = num();
          else known = false;
        } else {
          if (key == "m1") s.tbp_mass[0] = num();
          else if (key == "m2") s.tbp_mass[1] = num();
          else if (key == "m3") s.tbp_mass[2] = num();
          else if (key == "g") s.tbp_g = num();
          else if (key == "softening") s.tbp_softening = num();
          else known = false;
        }
      } else if (section == "observation") {
        if (key == "hidden_particle") cfg.hidden_particle = integer();
        else if (key == "encoder") cfg.use_encoder = to_bool(section, key, value);
        else if (key == "window") cfg.window = integer();
        else known = false;
      } else if (section == "model") {
        if (key == "kind") cfg.model_kind = model_kind_from_string(value);
        else if (key == "coords") cfg.coords = coord_mode_from_string(value);
        else if (key == "width") cfg.width = integer();
        else if (key == "depth") cfg.depth = integer();
        else if (key == "encoder_depth") cfg.encoder_depth = integer();
        else known = false;
      } else if (section == "data") {
        if (key == "n_traj") cfg.n_traj = integer();
        else if (key == "horizon") cfg.horizon = num();
        else if (key == "steps") cfg.steps = integer();
        else known = false;
      } else if (section == "solver") {
        if (key == "rtol") cfg.rtol = num();
        else if (key == "atol") cfg.atol = num();
        else if (key == "max_steps") cfg.max_steps = integer();
        else if (key == "initial_step") cfg.initial_step = num();
        else known = false;
      } else if (section == "train") {
        TrainConfig& t = cfg.train;
        if (key == "lr") t.learning_rate = num();
        else if (key == "batch_size") t.batch_size = integer();
        else if (key == "epochs") t.epochs = integer();
        else if (key == "decay_rate") t.decay_rate = num();
        else if (key == "decay_every") t.decay_every = integer();
        else if (key == "train_fraction") t.train_fraction = num();
        else if (key == "method") {
          if (value == "rk4") t.method = SolverMethod::Rk4;
          else if (value == "tsit5") t.method = SolverMethod::Tsit5Fixed;
          else throw ConfigError("config: [train] method must be rk4 or tsit5");
        } else if (key == "substeps") t.substeps = integer();
        else if (key == "grad_clip") t.grad_clip = num();
        else if (key == "threads") t.threads = integer();
        else known = false;
      } else if (section == "eval") {
        if (key == "n_test") cfg.eval_n_test = integer();
        else if (key == "horizon") cfg.eval_horizon = num();
        else if (key == "dt") cfg.eval_dt = num();
        else known = false;
      } else if (section == "sweep") {
        if (key == "eps_values") cfg.sweep_eps = to_double_list(section, key, value);
        else if (key == "n_traj") cfg.sweep_n_traj = integer();
        else if (key == "steps") cfg.sweep_steps = integer();
        else if (key == "horizon") cfg.sweep_horizon = num();
        else if (key == "eval_trajectories") cfg.sweep_eval_trajectories = integer();
        else if (key == "eval_steps") cfg.sweep_eval_steps = integer();
        else if (key == "eval_dt") cfg.sweep_eval_dt = num();
        else known = false;
      } else if (section == "identifiability") {
        if (key == "k2_tilde") cfg.ident_k2_tilde = num();
        else if (key == "l2_tilde") cfg.ident_l2_tilde = num();
        else if (key == "n_ic") cfg.ident_n_ic = integer();
        else if (key == "horizon") cfg.ident_horizon = num();
        else if (key == "steps") cfg.ident_steps = integer();
        else if (key == "rtol") cfg.ident_rtol = num();
        else known = false;
      } else if (section == "output") {
        if (key == "dir") cfg.out_dir = value;
        else if (key == "seed") cfg.seed = to_u64(section, key, value);
        else known = false;
      } else {
        throw ConfigError("config: unknown section [" + section + "]");
      }

      if (!known)
        throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
    }
  }

  cfg.train.use_encoder = cfg.use_encoder;
  cfg.train.window = cfg.window;
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream o;
  o << "[system]\n";
  o << "kind = " << to_string(cfg.system.kind) << "\n";
  const SystemSpec& s = cfg.system;
  switch (s.kind) {
    case SystemKind::Dms:
      o << "m1 = " << fmt(s.dms_m1) << "\nm2 = " << fmt(s.dms_m2) << "\n";
      o << "k1 = " << fmt(s.dms_k1) << "\nk2 = " << fmt(s.dms_k2) << "\n";
      o << "l1 = " << fmt(s.dms_l1) << "\nl2 = " << fmt(s.dms_l2) << "\n";
      break;
    case SystemKind::Nlms:
      for (int i = 0; i < 3; ++i) o << "m" << i + 1 << " = " << fmt(s.nlms_mass[i]) << "\n";
      o << "k12 = " << fmt(s.nlms_k[0]) << "\nk13 = " << fmt(s.nlms_k[1]) << "\nk23 = "
        << fmt(s.nlms_k[2]) << "\n";
      o << "l12 = " << fmt(s.nlms_rest[0]) << "\nl13 = " << fmt(s.nlms_rest[1]) << "\nl23 = "
        << fmt(s.nlms_rest[2]) << "\n";
      break;
    case SystemKind::Tbp:
      for (int i = 0; i < 3; ++i) o << "m" << i + 1 << " = " << fmt(s.tbp_mass[i]) << "\n";
      o << "g = " << fmt(s.tbp_g) << "\nsoftening = " << fmt(s.tbp_softening) << "\n";
      break;
  }
  o << "\n[observation]\n";
  o << "hidden_particle = " << cfg.hidden_particle << "\n";
  o << "encoder = " << (cfg.use_encoder ? "true" : "false") << "\n";
  o << "window = " << cfg.window << "\n";
  o << "\n[model]\n";
  o << "kind = " << to_string(cfg.model_kind) << "\n";
  o << "coords = " << to_string(cfg.coords) << "\n";
  o << "width = " << cfg.width << "\n";
  o << "depth = " << cfg.depth << "\n";
  o << "encoder_depth = " << cfg.encoder_depth << "\n";
  o << "\n[data]\n";
  o << "n_traj = " << cfg.n_traj << "\n";
  o << "horizon = " << fmt(cfg.horizon) << "\n";
  o << "steps = " << cfg.steps << "\n";
  o << "\n[solver]\n";
  o << "rtol = " << fmt(cfg.rtol) << "\n";
  o << "atol = " << fmt(cfg.atol) << "\n";
  o << "max_steps = " << cfg.max_steps << "\n";
  o << "initial_step = " << fmt(cfg.initial_step) << "\n";
  o << "\n[train]\n";
  o << "lr = " << fmt(cfg.train.learning_rate) << "\n";
  o << "batch_size = " << cfg.train.batch_size << "\n";
  o << "epochs = " << cfg.train.epochs << "\n";
  o << "decay_rate = " << fmt(cfg.train.decay_rate) << "\n";
  o << "decay_every = " << cfg.train.decay_every << "\n";
  o << "train_fraction = " << fmt(cfg.train.train_fraction) << "\n";
  o << "method = " << (cfg.train.method == SolverMethod::Rk4 ? "rk4" : "tsit5") << "\n";
  o << "substeps = " << cfg.train.substeps << "\n";
  o << "grad_clip = " << fmt(cfg.train.grad_clip) << "\n";
  o << "threads = " << cfg.train.threads << "\n";
  o << "\n[eval]\n";
  o << "n_test = " << cfg.eval_n_test << "\n";
  o << "horizon = " << fmt(cfg.eval_horizon) << "\n";
  o << "dt = " << fmt(cfg.eval_dt) << "\n";
  o << "\n[sweep]\n";
  o << "eps_values = ";
  for (size_t i = 0; i < cfg.sweep_eps.size(); ++i)
    o << (i ? "," : "") << fmt(cfg.sweep_eps[i]);
  o << "\n";
  o << "n_traj = " << cfg.sweep_n_traj << "\n";
  o << "steps = " << cfg.sweep_steps << "\n";
  o << "horizon = " << fmt(cfg.sweep_horizon) << "\n";
  o << "eval_trajectories = " << cfg.sweep_eval_trajectories << "\n";
  o << "eval_steps = " << cfg.sweep_eval_steps << "\n";
  o << "eval_dt = " << fmt(cfg.sweep_eval_dt) << "\n";
  o << "\n[identifiability]\n";
  o << "k2_tilde = " << fmt(cfg.ident_k2_tilde) << "\n";
  o << "l2_tilde = " << fmt(cfg.ident_l2_tilde) << "\n";
  o << "n_ic = " << cfg.ident_n_ic << "\n";
  o << "horizon = " << fmt(cfg.ident_horizon) << "\n";
  o << "steps = " << cfg.ident_steps << "\n";
  o << "rtol = " << fmt(cfg.ident_rtol) << "\n";
  o << "\n[output]\n";
  o << "dir = " << cfg.out_dir << "\n";
  o << "seed = " << cfg.seed << "\n";
  return o.str();
}

}  // namespace nhode

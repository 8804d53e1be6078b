#include "nhode/systems.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace nhode {

std::string to_string(SystemKind k) {
  switch (k) {
    case SystemKind::Dms: return "dms";
    case SystemKind::Nlms: return "nlms";
    case SystemKind::Tbp: return "tbp";
  }
  return "?";
}

SystemKind system_kind_from_string(const std::string& s) {
  if (s == "dms") return SystemKind::Dms;
  if (s == "nlms") return SystemKind::Nlms;
  if (s == "tbp") return SystemKind::Tbp;
  throw std::invalid_argument("unknown system kind: " + s);
}

SystemSpec SystemSpec::dms() { return SystemSpec{}; }

SystemSpec SystemSpec::nlms() {
  SystemSpec s;
  s.kind = SystemKind::Nlms;
  return s;
}

SystemSpec SystemSpec::tbp(double softening) {
  SystemSpec s;
  s.kind = SystemKind::Tbp;
  s.tbp_softening = softening;
  return s;
}

int SystemSpec::particles() const { return kind == SystemKind::Dms ? 2 : 3; }

int SystemSpec::dim() const {
  switch (kind) {
    case SystemKind::Dms: return 1;
    case SystemKind::Nlms: return 2;
    case SystemKind::Tbp: return 3;
  }
  return 0;
}

Vec SystemSpec::masses() const {
  Vec m(particles());
  switch (kind) {
    case SystemKind::Dms:
      m << dms_m1, dms_m2;
      break;
    case SystemKind::Nlms:
      m << nlms_mass[0], nlms_mass[1], nlms_mass[2];
      break;
    case SystemKind::Tbp:
      m << tbp_mass[0], tbp_mass[1], tbp_mass[2];
      break;
  }
  return m;
}

double SystemSpec::default_horizon() const { return kind == SystemKind::Tbp ? 3.0 : 1.0; }
int SystemSpec::default_steps() const { return kind == SystemKind::Tbp ? 1001 : 101; }
double SystemSpec::default_rtol() const { return kind == SystemKind::Tbp ? 1e-5 : 1e-6; }
double SystemSpec::default_atol() const { return kind == SystemKind::Tbp ? 1e-6 : 1e-8; }
int SystemSpec::default_max_steps() const { return kind == SystemKind::Tbp ? 16384 : 100000; }
int SystemSpec::default_model_depth() const { return kind == SystemKind::Nlms ? 3 : 4; }

std::vector<double> SystemSpec::parameter_list() const {
  switch (kind) {
    case SystemKind::Dms:
      return {dms_m1, dms_m2, dms_k1, dms_k2, dms_l1, dms_l2};
    case SystemKind::Nlms:
      return {nlms_mass[0], nlms_mass[1], nlms_mass[2], nlms_k[0], nlms_k[1], nlms_k[2],
              nlms_rest[0], nlms_rest[1], nlms_rest[2]};
    case SystemKind::Tbp:
      return {tbp_mass[0], tbp_mass[1], tbp_mass[2], tbp_g, tbp_softening};
  }
  return {};
}

void SystemSpec::set_parameter_list(const std::vector<double>& v) {
  auto need = [&](size_t n) {
    if (v.size() != n) throw std::invalid_argument("system: wrong parameter count");
  };
  switch (kind) {
    case SystemKind::Dms:
      need(6);
      dms_m1 = v[0]; dms_m2 = v[1]; dms_k1 = v[2]; dms_k2 = v[3]; dms_l1 = v[4]; dms_l2 = v[5];
      break;
    case SystemKind::Nlms:
      need(9);
      for (int i = 0; i < 3; ++i) nlms_mass[i] = v[i];
      for (int i = 0; i < 3; ++i) nlms_k[i] = v[3 + i];
      for (int i = 0; i < 3; ++i) nlms_rest[i] = v[6 + i];
      break;
    case SystemKind::Tbp:
      need(5);
      for (int i = 0; i < 3; ++i) tbp_mass[i] = v[i];
      tbp_g = v[3];
      tbp_softening = v[4];
      break;
  }
  validate();
}

void SystemSpec::validate() const {
  for (double p : parameter_list())
    if (!(p > 0)) throw std::invalid_argument("system: parameters must be positive");
}

namespace {

inline double sgn(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

// nlms edge list, lexicographic.
constexpr int kEdges[3][2] = {{0, 1}, {0, 2}, {1, 2}};

void check_dim(const SystemSpec& spec, const Vec& x) {
  if (x.size() != spec.state_dim())
    throw std::invalid_argument("system: state dimension mismatch");
}

}  // namespace

double true_hamiltonian(const SystemSpec& spec, const Vec& x) {
  check_dim(spec, x);
  const int n = spec.dof();
  const int d = spec.dim();
  const Vec m = spec.masses();

  double kinetic = 0.0;
  for (int j = 0; j < spec.particles(); ++j)
    kinetic += x.segment(n + j * d, d).squaredNorm() / (2.0 * m[j]);

  double potential = 0.0;
  switch (spec.kind) {
    case SystemKind::Dms: {
      double e1 = std::abs(x[0]) - spec.dms_l1;
      double e2 = std::abs(x[1] - x[0]) - spec.dms_l2;
      potential = 0.5 * spec.dms_k1 * e1 * e1 + 0.5 * spec.dms_k2 * e2 * e2;
      break;
    }
    case SystemKind::Nlms: {
      for (int e = 0; e < 3; ++e) {
        const int i = kEdges[e][0], j = kEdges[e][1];
        double ext = (x.segment(j * d, d) - x.segment(i * d, d)).norm() - spec.nlms_rest[e];
        potential += 0.25 * spec.nlms_k[e] * ext * ext * ext * ext;
      }
      break;
    }
    case SystemKind::Tbp: {
      const double eps2 = spec.tbp_softening * spec.tbp_softening;
      for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) {
          double r2 = (x.segment(i * d, d) - x.segment(j * d, d)).squaredNorm();
          potential -= spec.tbp_g * m[i] * m[j] / std::sqrt(r2 + eps2);
        }
      break;
    }
  }
  return kinetic + potential;
}

Vec true_vector_field(const SystemSpec& spec, const Vec& x) {
  check_dim(spec, x);
  const int n = spec.dof();
  const int d = spec.dim();
  const Vec m = spec.masses();

  Vec dq(n);  // dH/dq
  switch (spec.kind) {
    case SystemKind::Dms: {
      double e1 = std::abs(x[0]) - spec.dms_l1;
      double e2 = std::abs(x[1] - x[0]) - spec.dms_l2;
      double s1 = sgn(x[0]);
      double s2 = sgn(x[1] - x[0]);
      dq[0] = spec.dms_k1 * e1 * s1 - spec.dms_k2 * e2 * s2;
      dq[1] = spec.dms_k2 * e2 * s2;
      break;
    }
    case SystemKind::Nlms: {
      dq.setZero();
      for (int e = 0; e < 3; ++e) {
        const int i = kEdges[e][0], j = kEdges[e][1];
        Vec w = x.segment(j * d, d) - x.segment(i * d, d);
        double r = w.norm();
        double ext = r - spec.nlms_rest[e];
        Vec u = (r > 0) ? Vec(w / r) : Vec(Vec::Zero(d));
        Vec g = spec.nlms_k[e] * ext * ext * ext * u;
        dq.segment(j * d, d) += g;
        dq.segment(i * d, d) -= g;
      }
      break;
    }
    case SystemKind::Tbp: {
      dq.setZero();
      const double eps2 = spec.tbp_softening * spec.tbp_softening;
      for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) {
          Vec w = x.segment(i * d, d) - x.segment(j * d, d);
          double denom = std::pow(w.squaredNorm() + eps2, 1.5);
          Vec g = spec.tbp_g * m[i] * m[j] / denom * w;
          dq.segment(i * d, d) += g;
          dq.segment(j * d, d) -= g;
        }
      break;
    }
  }

  Vec out(2 * n);
  for (int j = 0; j < spec.particles(); ++j)
    out.segment(j * d, d) = x.segment(n + j * d, d) / m[j];  // qdot = p/m
  out.segment(n, n) = -dq;                                   // pdot = -dH/dq
  return out;
}

VectorField true_field_fn(const SystemSpec& spec) {
  return [spec](double, const Vec& x) { return true_vector_field(spec, x); };
}

Vec total_linear_momentum(const SystemSpec& spec, const Vec& x) {
  check_dim(spec, x);
  const int n = spec.dof();
  const int d = spec.dim();
  Vec p = Vec::Zero(d);
  for (int j = 0; j < spec.particles(); ++j) p += x.segment(n + j * d, d);
  return p;
}

Eigen::Vector3d total_angular_momentum(const SystemSpec& spec, const Vec& x) {
  check_dim(spec, x);
  const int n = spec.dof();
  const int d = spec.dim();
  Eigen::Vector3d l = Eigen::Vector3d::Zero();
  for (int j = 0; j < spec.particles(); ++j) {
    Eigen::Vector3d q = Eigen::Vector3d::Zero(), p = Eigen::Vector3d::Zero();
    q.head(d) = x.segment(j * d, d);
    p.head(d) = x.segment(n + j * d, d);
    l += q.cross(p);
  }
  return l;
}

Vec sample_initial_condition(const SystemSpec& spec, CounterRng& rng) {
  const int n = spec.dof();
  const int d = spec.dim();
  const int np = spec.particles();
  const Vec m = spec.masses();
  Vec q(n), v(n);

  switch (spec.kind) {
    case SystemKind::Dms:
      q[0] = rng.uniform(0.2, 0.8);
      q[1] = rng.uniform(0.9, 1.4);
      v[0] = rng.uniform(-0.7, 0.7);
      v[1] = rng.uniform(-0.7, 0.7);
      break;
    case SystemKind::Nlms: {
      const double bounds[3][2][2] = {{{0.3, 0.7}, {1.0, 1.4}},
                                      {{0.1, 0.4}, {0.1, 0.5}},
                                      {{0.6, 0.9}, {0.1, 0.5}}};
      for (int j = 0; j < 3; ++j)
        for (int c = 0; c < 2; ++c) q[j * d + c] = rng.uniform(bounds[j][c][0], bounds[j][c][1]);
      for (int i = 0; i < n; ++i) v[i] = rng.uniform(-0.7, 0.7);
      // zero centre-of-mass momentum
      Vec pbar = Vec::Zero(d);
      double mtot = 0.0;
      for (int j = 0; j < np; ++j) {
        pbar += m[j] * v.segment(j * d, d);
        mtot += m[j];
      }
      for (int j = 0; j < np; ++j) v.segment(j * d, d) -= pbar / mtot;
      break;
    }
    case SystemKind::Tbp: {
      const double bounds[3][3][2] = {{{0.3, 0.7}, {1.0, 1.4}, {-0.1, 0.1}},
                                      {{0.1, 0.4}, {0.1, 0.5}, {-0.1, 0.1}},
                                      {{0.6, 0.9}, {0.1, 0.5}, {-0.1, 0.1}}};
      for (int j = 0; j < 3; ++j)
        for (int c = 0; c < 3; ++c) q[j * d + c] = rng.uniform(bounds[j][c][0], bounds[j][c][1]);
      for (int i = 0; i < n; ++i) v[i] = rng.uniform(-0.3, 0.3);
      double mtot = 0.0;
      Vec qbar = Vec::Zero(d), pbar = Vec::Zero(d);
      for (int j = 0; j < np; ++j) {
        qbar += m[j] * q.segment(j * d, d);
        pbar += m[j] * v.segment(j * d, d);
        mtot += m[j];
      }
      qbar /= mtot;
      for (int j = 0; j < np; ++j) {
        q.segment(j * d, d) -= qbar;
        v.segment(j * d, d) -= pbar / mtot;
      }
      break;
    }
  }

  Vec x(2 * n);
  x.head(n) = q;
  for (int j = 0; j < np; ++j) x.segment(n + j * d, d) = m[j] * v.segment(j * d, d);
  return x;
}

void ObservationMask::validate() const {
  std::vector<char> seen(state_dim, 0);
  for (int i : observed) {
    if (i < 0 || i >= state_dim || seen[i]) throw std::invalid_argument("observation: bad index set");
    seen[i] = 1;
  }
  for (int i : hidden) {
    if (i < 0 || i >= state_dim || seen[i]) throw std::invalid_argument("observation: bad index set");
    seen[i] = 1;
  }
  for (char c : seen)
    if (!c) throw std::invalid_argument("observation: sets do not cover the state");
}

ObservationMask ObservationMask::full(int state_dim) {
  ObservationMask s;
  s.state_dim = state_dim;
  for (int i = 0; i < state_dim; ++i) s.observed.push_back(i);
  return s;
}

ObservationMask ObservationMask::hide_particle(int particles, int dim, int particle) {
  if (particle < 1 || particle > particles)
    throw std::invalid_argument("observation: particle index out of range");
  const int n = particles * dim;
  ObservationMask s;
  s.state_dim = 2 * n;
  const int lo = (particle - 1) * dim;
  for (int i = 0; i < 2 * n; ++i) {
    int local = i % n;
    bool hid = local >= lo && local < lo + dim;
    (hid ? s.hidden : s.observed).push_back(i);
  }
  return s;
}

Dataset generate_dataset(const SystemSpec& spec, int n_traj, double horizon, int steps,
                         const SolverConfig& solver, const ObservationMask& scheme,
                         std::uint64_t seed, int threads) {
  spec.validate();
  if (steps < 2) throw std::invalid_argument("dataset: steps must be >= 2");
  if (n_traj < 1) throw std::invalid_argument("dataset: n_traj must be >= 1");

  Dataset ds;
  ds.system = spec;
  ds.scheme = scheme;
  ds.dt = horizon / (steps - 1);
  ds.seed = seed;
  ds.trajectories.resize(n_traj);

  std::vector<double> grid(steps);
  for (int i = 0; i < steps; ++i) grid[i] = i * ds.dt;

  VectorField f = true_field_fn(spec);
  std::string first_error;

  auto work = [&](int begin, int end, std::string* err) {
    for (int i = begin; i < end; ++i) {
      try {
        CounterRng rng(derive_seed(seed, "data", static_cast<std::uint64_t>(i)));
        Vec x0 = sample_initial_condition(spec, rng);
        ds.trajectories[i] = rollout(f, x0, grid, solver);
      } catch (const std::exception& e) {
        if (err->empty()) *err = "trajectory " + std::to_string(i) + ": " + e.what();
        return;
      }
    }
  };

  int nt = std::max(1, threads);
  if (nt == 1 || n_traj < 4) {
    work(0, n_traj, &first_error);
  } else {
    nt = std::min<int>(nt, n_traj);
    std::vector<std::thread> pool;
    std::vector<std::string> errs(nt);
    int chunk = (n_traj + nt - 1) / nt;
    for (int t = 0; t < nt; ++t)
      pool.emplace_back(work, t * chunk, std::min(n_traj, (t + 1) * chunk), &errs[t]);
    for (auto& th : pool) th.join();
    for (auto& e : errs)
      if (!e.empty() && first_error.empty()) first_error = e;
  }
  if (!first_error.empty()) throw SolverError("dataset generation failed at " + first_error);
  return ds;
}

namespace {

void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(out, b, 4);
}

void write_u64le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(out, b, 8);
}

void write_f64le(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64le(out, bits);
}

std::uint32_t read_u32le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("dataset: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("dataset: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64le(std::istream& in) {
  std::uint64_t bits = read_u64le(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

constexpr char kDatasetMagic[8] = {'N', 'H', 'D', 'S', '0', '0', '0', '1'};

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  if (ds.trajectories.empty()) throw std::invalid_argument("dataset: nothing to save");
  const int steps = ds.steps();
  const int sd = ds.system.state_dim();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  write_bytes(out, kDatasetMagic, 8);
  out.put(static_cast<char>(ds.system.kind));
  write_u32le(out, static_cast<std::uint32_t>(ds.system.particles()));
  write_u32le(out, static_cast<std::uint32_t>(ds.system.dim()));
  write_u32le(out, static_cast<std::uint32_t>(ds.trajectories.size()));
  write_u32le(out, static_cast<std::uint32_t>(steps));
  write_f64le(out, ds.dt);
  write_u64le(out, ds.seed);

  // observed-index bitmap, LSB-first
  const int nbytes = (sd + 7) / 8;
  std::vector<unsigned char> bitmap(nbytes, 0);
  for (int i : ds.scheme.observed) bitmap[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
  write_bytes(out, bitmap.data(), bitmap.size());

  std::vector<double> params = ds.system.parameter_list();
  write_u32le(out, static_cast<std::uint32_t>(params.size()));
  for (double p : params) write_f64le(out, p);

  for (const Trajectory& tr : ds.trajectories) {
    if (tr.size() != steps) throw std::invalid_argument("dataset: ragged trajectory lengths");
    for (const Vec& x : tr.states)
      for (int i = 0; i < sd; ++i) write_f64le(out, x[i]);
  }
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path);

  // human-readable sidecar
  std::ofstream side(path + ".txt");
  if (!side) throw std::runtime_error("cannot open for writing: " + path + ".txt");
  char buf[64];
  side << "format: NHDS0001\n";
  side << "system: " << to_string(ds.system.kind) << "\n";
  side << "particles: " << ds.system.particles() << "\n";
  side << "spatial_dim: " << ds.system.dim() << "\n";
  side << "n_traj: " << ds.trajectories.size() << "\n";
  side << "steps: " << steps << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", ds.dt);
  side << "dt: " << buf << "\n";
  side << "seed: " << ds.seed << "\n";
  side << "rng: " << kRngName << "\n";
  side << "observed_indices:";
  for (int i : ds.scheme.observed) side << ' ' << i;
  side << "\nhidden_indices:";
  for (int i : ds.scheme.hidden) side << ' ' << i;
  side << "\nparameters:";
  for (double p : params) {
    std::snprintf(buf, sizeof buf, "%.17g", p);
    side << ' ' << buf;
  }
  side << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kDatasetMagic, 8) != 0)
    throw std::runtime_error("dataset: bad magic in " + path);

  Dataset ds;
  int kind = in.get();
  if (kind < 0 || kind > 2) throw std::runtime_error("dataset: bad system kind");
  ds.system.kind = static_cast<SystemKind>(kind);
  std::uint32_t particles = read_u32le(in);
  std::uint32_t dim = read_u32le(in);
  std::uint32_t n_traj = read_u32le(in);
  std::uint32_t steps = read_u32le(in);
  ds.dt = read_f64le(in);
  ds.seed = read_u64le(in);
  if (particles != static_cast<std::uint32_t>(ds.system.particles()) ||
      dim != static_cast<std::uint32_t>(ds.system.dim()))
    throw std::runtime_error("dataset: geometry does not match system kind");
  const int sd = ds.system.state_dim();

  const int nbytes = (sd + 7) / 8;
  std::vector<unsigned char> bitmap(nbytes);
  in.read(reinterpret_cast<char*>(bitmap.data()), nbytes);
  if (!in) throw std::runtime_error("dataset: truncated bitmap");
  ds.scheme.state_dim = sd;
  for (int i = 0; i < sd; ++i) {
    bool obs = bitmap[i / 8] & (1u << (i % 8));
    (obs ? ds.scheme.observed : ds.scheme.hidden).push_back(i);
  }
  ds.scheme.validate();

  std::uint32_t nparams = read_u32le(in);
  std::vector<double> params(nparams);
  for (auto& p : params) p = read_f64le(in);
  ds.system.set_parameter_list(params);

  ds.trajectories.resize(n_traj);
  for (std::uint32_t t = 0; t < n_traj; ++t) {
    Trajectory& tr = ds.trajectories[t];
    tr.times.resize(steps);
    tr.states.resize(steps);
    for (std::uint32_t i = 0; i < steps; ++i) {
      tr.times[i] = i * ds.dt;
      Vec x(sd);
      for (int c = 0; c < sd; ++c) x[c] = read_f64le(in);
      tr.states[i] = std::move(x);
    }
  }
  return ds;
}

std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof buf);
    std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace nhode

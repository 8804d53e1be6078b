#pragma once

#include "nhode/ode.hpp"
#include "nhode/rng.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace nhode {

enum class SystemKind : std::uint8_t { Dms = 0, Nlms = 1, Tbp = 2 };

std::string to_string(SystemKind k);
SystemKind system_kind_from_string(const std::string& s);

// Closed-form benchmark systems. State layout is x = (q, p), particle-major
// within each block, so dim(x) = 2 * particles * dim.
struct SystemSpec {
  SystemKind kind = SystemKind::Dms;

  // dms: wall--mass--mass chain of two linear springs in 1D
  double dms_m1 = 1.0, dms_m2 = 1.2;
  double dms_k1 = 3.0, dms_k2 = 5.0;
  double dms_l1 = 0.4, dms_l2 = 0.6;

  // nlms: triangle of cubic-force springs in 2D; edges (1,2),(1,3),(2,3)
  std::array<double, 3> nlms_mass{1.0, 1.0, 1.0};
  std::array<double, 3> nlms_k{1.0, 1.0, 1.0};
  std::array<double, 3> nlms_rest{0.9, 0.9, 0.9};

  // tbp: equal-mass gravitational three-body problem in 3D
  std::array<double, 3> tbp_mass{1.0, 1.0, 1.0};
  double tbp_g = 1.0;
  double tbp_softening = 0.6;

  static SystemSpec dms();
  static SystemSpec nlms();
  static SystemSpec tbp(double softening = 0.6);

  int particles() const;
  int dim() const;
  int dof() const { return particles() * dim(); }
  int state_dim() const { return 2 * dof(); }
  Vec masses() const;  // one entry per particle

  // Default data-generation settings (horizon, grid, tolerances).
  double default_horizon() const;
  int default_steps() const;
  double default_rtol() const;
  double default_atol() const;
  int default_max_steps() const;
  int default_model_depth() const;

  std::vector<double> parameter_list() const;  // serialization order
  void set_parameter_list(const std::vector<double>& v);
  void validate() const;
};

double true_hamiltonian(const SystemSpec& spec, const Vec& x);
Vec true_vector_field(const SystemSpec& spec, const Vec& x);  // hand-coded gradient
VectorField true_field_fn(const SystemSpec& spec);

// Conserved quantities of the closed-form systems.
Vec total_linear_momentum(const SystemSpec& spec, const Vec& x);
Eigen::Vector3d total_angular_momentum(const SystemSpec& spec, const Vec& x);

// Positions and velocities from the per-system uniform bounds; momentum
// conversion p = m v applied. nlms and tbp are recentred as sampled data
// requires (zero net momentum; tbp also zero centre of mass).
Vec sample_initial_condition(const SystemSpec& spec, CounterRng& rng);

struct ObservationMask {
  int state_dim = 0;
  std::vector<int> observed;  // canonical (ascending) order
  std::vector<int> hidden;

  static ObservationMask full(int state_dim);
  // 1-based particle index; hides that particle's position and momentum.
  static ObservationMask hide_particle(int particles, int dim, int particle);
  void validate() const;
};

struct Dataset {
  SystemSpec system;
  ObservationMask scheme;
  double dt = 0.0;
  std::uint64_t seed = 0;
  std::vector<Trajectory> trajectories;

  int steps() const { return trajectories.empty() ? 0 : trajectories.front().size(); }
};

// n_traj trajectories on a uniform grid of `steps` points over [0,horizon],
// integrated adaptively at the configured tolerances. Deterministic per seed
// (per-trajectory RNG streams; generation may run in parallel).
Dataset generate_dataset(const SystemSpec& spec, int n_traj, double horizon, int steps,
                         const SolverConfig& solver, const ObservationMask& scheme,
                         std::uint64_t seed, int threads = 1);

// Binary dataset container ("NHDS0001") plus a plain-text sidecar at
// path + ".txt" mirroring the header.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

std::uint64_t file_digest(const std::string& path);  // FNV-1a over the bytes

}  // namespace nhode

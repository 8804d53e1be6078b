#pragma once

#include "nhode/mlp.hpp"
#include "nhode/systems.hpp"

#include <string>
#include <vector>

namespace nhode {

enum class ModelKind { NhodeTot, NhodePot, NodeVanilla, NodePhys, Oracle };
enum class CoordMode { Abs, Rel };

std::string to_string(ModelKind k);
std::string to_string(CoordMode c);
ModelKind model_kind_from_string(const std::string& s);
CoordMode coord_mode_from_string(const std::string& s);

// Lexicographic pair distances |q_j - q_k|, j < k.
Vec pairwise_distances(const Vec& q, int particles, int dim);

// A dynamics variant together with whatever it is allowed to know about the
// physical system (particle masses for the separable/physics-informed kinds,
// the full spec for the oracle).
struct DynamicsModel {
  ModelKind kind = ModelKind::NhodeTot;
  CoordMode coords = CoordMode::Abs;
  int particles = 0;
  int dim = 0;
  MlpParams net;       // unused by the oracle
  Vec masses;          // per particle; required by nhode-pot and node-phys
  SystemSpec oracle_spec;  // Oracle only

  int dof() const { return particles * dim; }
  int state_dim() const { return 2 * dof(); }
  int pair_count() const { return particles * (particles - 1) / 2; }
  bool is_nhode() const { return kind == ModelKind::NhodeTot || kind == ModelKind::NhodePot; }
  bool uses_masses() const { return kind == ModelKind::NhodePot || kind == ModelKind::NodePhys; }
  bool trainable() const { return kind != ModelKind::Oracle; }

  int network_input_dim() const;
  int network_output_dim() const;
  void validate() const;
};

DynamicsModel make_model(ModelKind kind, CoordMode coords, int particles, int dim,
                         const Vec& masses, int hidden_width, int depth, CounterRng& rng);
DynamicsModel make_oracle(const SystemSpec& spec);

// Learned total or separable energy; rejects the NODE baselines.
double hamiltonian_value(const DynamicsModel& m, const Vec& x);

// grad_x H for the Hamiltonian kinds, through the same coordinate-transform
// path the field uses, so vector_field == S * hamiltonian_gradient bit for bit.
Vec hamiltonian_gradient(const DynamicsModel& m, const Vec& x);

// f(x): Hamiltonian kinds return S grad H with the gradient taken in the
// original coordinates (distance transform included for rel variants).
Vec vector_field(const DynamicsModel& m, const Vec& x);
VectorField field_fn(const DynamicsModel& m);

// --- graph emission, used by rollout training ---

// Per-graph handles: parameter nodes plus the fixed constants a field
// evaluation needs. Emit once per graph, then emit_vector_field per stage.
struct ModelGraphRefs {
  MlpNodeIds net;
  int inv_mass = -1;  // 1/m per dof (pot/phys kinds)
  std::vector<int> q_index, p_index;
};

ModelGraphRefs emit_model_params(Graph& g, const DynamicsModel& m);
int emit_vector_field(Graph& g, const DynamicsModel& m, const ModelGraphRefs& refs, int x);

// --- observation ---

Vec observe(const Vec& x, const ObservationMask& scheme);
Vec assemble_state(const Vec& observed, const Vec& hidden, const ObservationMask& scheme);

// Maps a position in (observed ++ hidden) concatenation order back to the
// state index, i.e. assemble == gather(concat(obs, hid), perm).
std::vector<int> assemble_permutation(const ObservationMask& scheme);

// --- encoder for the hidden initial state ---

struct Encoder {
  MlpParams net;
  int window = 10;  // K: consumes snapshots at t_0..t_K

  void validate(const ObservationMask& scheme) const;
};

Encoder make_encoder(const ObservationMask& scheme, int window, int hidden_width, int depth,
                     CounterRng& rng);

// observed_window holds the K+1 observed snapshots in time order.
Vec encode_initial_hidden(const Encoder& enc, const std::vector<Vec>& observed_window);

}  // namespace nhode

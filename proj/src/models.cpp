#include "nhode/models.hpp"

#include <cmath>
#include <stdexcept>

namespace nhode {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::NhodeTot: return "nhode-tot";
    case ModelKind::NhodePot: return "nhode-pot";
    case ModelKind::NodeVanilla: return "node-vanilla";
    case ModelKind::NodePhys: return "node-phys";
    case ModelKind::Oracle: return "oracle";
  }
  return "?";
}

std::string to_string(CoordMode c) { return c == CoordMode::Abs ? "abs" : "rel"; }

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "nhode-tot") return ModelKind::NhodeTot;
  if (s == "nhode-pot") return ModelKind::NhodePot;
  if (s == "node-vanilla") return ModelKind::NodeVanilla;
  if (s == "node-phys") return ModelKind::NodePhys;
  if (s == "oracle") return ModelKind::Oracle;
  throw std::invalid_argument("unknown model kind: " + s);
}

CoordMode coord_mode_from_string(const std::string& s) {
  if (s == "abs") return CoordMode::Abs;
  if (s == "rel") return CoordMode::Rel;
  throw std::invalid_argument("unknown coordinate mode: " + s);
}

Vec pairwise_distances(const Vec& q, int particles, int dim) {
  if (q.size() != particles * dim)
    throw std::invalid_argument("pairwise_distances: dimension mismatch");
  Vec out(particles * (particles - 1) / 2);
  int m = 0;
  for (int j = 0; j < particles; ++j)
    for (int k = j + 1; k < particles; ++k, ++m)
      out[m] = (q.segment(j * dim, dim) - q.segment(k * dim, dim)).norm();
  return out;
}

int DynamicsModel::network_input_dim() const {
  const int n = dof();
  const int pairs = pair_count();
  switch (kind) {
    case ModelKind::NhodeTot:
    case ModelKind::NodeVanilla:
    case ModelKind::NodePhys:
      return coords == CoordMode::Abs ? 2 * n : pairs + n;
    case ModelKind::NhodePot:
      return coords == CoordMode::Abs ? n : pairs;
    case ModelKind::Oracle:
      return 0;
  }
  return 0;
}

int DynamicsModel::network_output_dim() const {
  switch (kind) {
    case ModelKind::NhodeTot:
    case ModelKind::NhodePot:
      return 1;
    case ModelKind::NodeVanilla:
      return state_dim();
    case ModelKind::NodePhys:
      return dof();
    case ModelKind::Oracle:
      return 0;
  }
  return 0;
}

void DynamicsModel::validate() const {
  if (particles < 1 || dim < 1) throw std::invalid_argument("model: bad geometry");
  if (kind == ModelKind::Oracle) {
    if (oracle_spec.state_dim() != state_dim())
      throw std::invalid_argument("model: oracle spec geometry mismatch");
    return;
  }
  net.validate();
  if (net.input_dim() != network_input_dim() || net.output_dim() != network_output_dim())
    throw std::invalid_argument("model: network shape does not match kind/coords");
  if (uses_masses()) {
    if (masses.size() != particles) throw std::invalid_argument("model: masses required");
    for (int i = 0; i < masses.size(); ++i)
      if (!(masses[i] > 0)) throw std::invalid_argument("model: masses must be positive");
  }
}

DynamicsModel make_model(ModelKind kind, CoordMode coords, int particles, int dim,
                         const Vec& masses, int hidden_width, int depth, CounterRng& rng) {
  DynamicsModel m;
  m.kind = kind;
  m.coords = coords;
  m.particles = particles;
  m.dim = dim;
  m.masses = masses;
  m.net = init_mlp(m.network_input_dim(), hidden_width, depth, m.network_output_dim(), rng);
  m.validate();
  return m;
}

DynamicsModel make_oracle(const SystemSpec& spec) {
  DynamicsModel m;
  m.kind = ModelKind::Oracle;
  m.coords = CoordMode::Abs;
  m.particles = spec.particles();
  m.dim = spec.dim();
  m.masses = spec.masses();
  m.oracle_spec = spec;
  m.validate();
  return m;
}

namespace {

Vec inv_mass_per_dof(const DynamicsModel& m) {
  Vec w(m.dof());
  for (int j = 0; j < m.particles; ++j)
    for (int c = 0; c < m.dim; ++c) w[j * m.dim + c] = 1.0 / m.masses[j];
  return w;
}

Vec network_input(const DynamicsModel& m, const Vec& q, const Vec& p) {
  switch (m.kind) {
    case ModelKind::NhodePot:
      return m.coords == CoordMode::Abs ? q : pairwise_distances(q, m.particles, m.dim);
    default: {
      if (m.coords == CoordMode::Abs) {
        Vec z(2 * m.dof());
        z << q, p;
        return z;
      }
      Vec d = pairwise_distances(q, m.particles, m.dim);
      Vec z(d.size() + p.size());
      z << d, p;
      return z;
    }
  }
}

// grad_z of a scalar MLP via the layer-Jacobian chain; h_l reuse the forward
// activations so the result matches emit_mlp_input_gradient bit for bit.
Vec mlp_input_gradient_plain(const MlpParams& p, const Vec& z) {
  const int L = p.layer_count();
  std::vector<Vec> hidden(L - 1);
  Vec h = z;
  for (int l = 0; l + 1 < L; ++l) {
    h = (p.weights[l] * h + p.biases[l]).array().tanh();
    hidden[l] = h;
  }
  Vec u = p.weights[L - 1].transpose().col(0);
  for (int l = L - 2; l >= 0; --l) {
    Vec d = (1.0 - hidden[l].array().square()) * u.array();
    u.noalias() = p.weights[l].transpose() * d;
  }
  return u;
}

// scatter of g through the distance-map Jacobian: sum_m g_m d r_m / d q
Vec pdist_vjp_plain(const Vec& q, const Vec& g, int particles, int dim) {
  Vec out = Vec::Zero(particles * dim);
  int m = 0;
  for (int j = 0; j < particles; ++j)
    for (int k = j + 1; k < particles; ++k, ++m) {
      Vec w = q.segment(j * dim, dim) - q.segment(k * dim, dim);
      double r = w.norm();
      if (r < kDistanceFloor) continue;
      w *= g[m] / r;
      out.segment(j * dim, dim) += w;
      out.segment(k * dim, dim) -= w;
    }
  return out;
}

}  // namespace

double hamiltonian_value(const DynamicsModel& m, const Vec& x) {
  if (x.size() != m.state_dim()) throw std::invalid_argument("model: state dimension mismatch");
  if (m.kind == ModelKind::Oracle) return true_hamiltonian(m.oracle_spec, x);
  if (!m.is_nhode())
    throw std::invalid_argument("model: " + to_string(m.kind) + " has no Hamiltonian");
  const int n = m.dof();
  Vec q = x.head(n), p = x.tail(n);
  double value = mlp_eval(m.net, network_input(m, q, p))[0];
  if (m.kind == ModelKind::NhodePot) {
    for (int j = 0; j < m.particles; ++j)
      value += p.segment(j * m.dim, m.dim).squaredNorm() / (2.0 * m.masses[j]);
  }
  return value;
}

Vec hamiltonian_gradient(const DynamicsModel& m, const Vec& x) {
  if (x.size() != m.state_dim()) throw std::invalid_argument("model: state dimension mismatch");
  const int n = m.dof();
  if (m.kind == ModelKind::Oracle) {
    Vec f = true_vector_field(m.oracle_spec, x);
    Vec g(2 * n);
    g.head(n) = -f.tail(n);  // dH/dq = -pdot
    g.tail(n) = f.head(n);   // dH/dp = qdot
    return g;
  }
  if (!m.is_nhode())
    throw std::invalid_argument("model: " + to_string(m.kind) + " has no Hamiltonian");
  Vec q = x.head(n), p = x.tail(n);
  Vec z = network_input(m, q, p);
  Vec gz = mlp_input_gradient_plain(m.net, z);

  Vec g(2 * n);
  if (m.kind == ModelKind::NhodeTot) {
    if (m.coords == CoordMode::Abs) {
      g = gz;
    } else {
      g.head(n) = pdist_vjp_plain(q, gz.head(m.pair_count()), m.particles, m.dim);
      g.tail(n) = gz.tail(n);
    }
  } else {  // NhodePot
    g.head(n) = (m.coords == CoordMode::Abs)
                    ? gz
                    : pdist_vjp_plain(q, gz, m.particles, m.dim);
    g.tail(n) = inv_mass_per_dof(m).cwiseProduct(p);
  }
  return g;
}

Vec vector_field(const DynamicsModel& m, const Vec& x) {
  if (x.size() != m.state_dim()) throw std::invalid_argument("model: state dimension mismatch");
  if (m.kind == ModelKind::Oracle) return true_vector_field(m.oracle_spec, x);
  const int n = m.dof();

  if (m.is_nhode()) {
    Vec g = hamiltonian_gradient(m, x);
    Vec out(2 * n);
    out.head(n) = g.tail(n);
    out.tail(n) = -g.head(n);
    return out;
  }

  Vec q = x.head(n), p = x.tail(n);
  Vec z = network_input(m, q, p);
  Vec out(2 * n);
  if (m.kind == ModelKind::NodeVanilla)
    out = mlp_eval(m.net, z);
  else  // NodePhys
    out << inv_mass_per_dof(m).cwiseProduct(p), mlp_eval(m.net, z);
  return out;
}

VectorField field_fn(const DynamicsModel& m) {
  return [m](double, const Vec& x) { return vector_field(m, x); };
}

ModelGraphRefs emit_model_params(Graph& g, const DynamicsModel& m) {
  m.validate();
  if (m.kind == ModelKind::Oracle)
    throw std::invalid_argument("model: oracle has no differentiable graph");
  ModelGraphRefs refs;
  refs.net = emit_mlp_params(g, m.net);
  if (m.uses_masses()) refs.inv_mass = g.input(inv_mass_per_dof(m));
  const int n = m.dof();
  for (int i = 0; i < n; ++i) refs.q_index.push_back(i);
  for (int i = 0; i < n; ++i) refs.p_index.push_back(n + i);
  return refs;
}

int emit_vector_field(Graph& g, const DynamicsModel& m, const ModelGraphRefs& refs, int x) {
  const int n = m.dof();
  const int pairs = m.pair_count();
  int q = g.gather(x, refs.q_index);
  int p = g.gather(x, refs.p_index);

  auto emit_input = [&]() -> int {
    if (m.kind == ModelKind::NhodePot)
      return m.coords == CoordMode::Abs ? q : g.pairwise_dist(q, m.particles, m.dim);
    if (m.coords == CoordMode::Abs) return x;
    return g.concat(g.pairwise_dist(q, m.particles, m.dim), p);
  };

  switch (m.kind) {
    case ModelKind::NhodeTot: {
      int gz = emit_mlp_input_gradient(g, refs.net, m.net, emit_input());
      int gq, gp;
      if (m.coords == CoordMode::Abs) {
        gq = g.gather(gz, refs.q_index);
        gp = g.gather(gz, refs.p_index);
      } else {
        std::vector<int> didx(pairs), pidx(n);
        for (int i = 0; i < pairs; ++i) didx[i] = i;
        for (int i = 0; i < n; ++i) pidx[i] = pairs + i;
        gq = g.pairwise_dist_vjp(q, g.gather(gz, didx), m.particles, m.dim);
        gp = g.gather(gz, pidx);
      }
      return g.concat(gp, g.negate(gq));
    }
    case ModelKind::NhodePot: {
      int gz = emit_mlp_input_gradient(g, refs.net, m.net, emit_input());
      int gq = (m.coords == CoordMode::Abs) ? gz
                                            : g.pairwise_dist_vjp(q, gz, m.particles, m.dim);
      return g.concat(g.mul(p, refs.inv_mass), g.negate(gq));
    }
    case ModelKind::NodeVanilla:
      return emit_mlp_forward(g, refs.net, emit_input());
    case ModelKind::NodePhys:
      return g.concat(g.mul(p, refs.inv_mass), emit_mlp_forward(g, refs.net, emit_input()));
    case ModelKind::Oracle:
      break;
  }
  throw std::invalid_argument("model: cannot emit field");
}

Vec observe(const Vec& x, const ObservationMask& scheme) {
  if (x.size() != scheme.state_dim) throw std::invalid_argument("observe: dimension mismatch");
  Vec out(scheme.observed.size());
  for (size_t i = 0; i < scheme.observed.size(); ++i) out[i] = x[scheme.observed[i]];
  return out;
}

Vec assemble_state(const Vec& observed, const Vec& hidden, const ObservationMask& scheme) {
  if (observed.size() != static_cast<int>(scheme.observed.size()) ||
      hidden.size() != static_cast<int>(scheme.hidden.size()))
    throw std::invalid_argument("assemble: dimension mismatch");
  Vec x(scheme.state_dim);
  for (size_t i = 0; i < scheme.observed.size(); ++i) x[scheme.observed[i]] = observed[i];
  for (size_t i = 0; i < scheme.hidden.size(); ++i) x[scheme.hidden[i]] = hidden[i];
  return x;
}

std::vector<int> assemble_permutation(const ObservationMask& scheme) {
  std::vector<int> perm(scheme.state_dim, -1);
  for (size_t i = 0; i < scheme.observed.size(); ++i)
    perm[scheme.observed[i]] = static_cast<int>(i);
  for (size_t i = 0; i < scheme.hidden.size(); ++i)
    perm[scheme.hidden[i]] = static_cast<int>(scheme.observed.size() + i);
  return perm;
}

void Encoder::validate(const ObservationMask& scheme) const {
  net.validate();
  if (window < 1) throw std::invalid_argument("encoder: window must be >= 1");
  const int in = (window + 1) * static_cast<int>(scheme.observed.size());
  if (net.input_dim() != in)
    throw std::invalid_argument("encoder: input width must cover K+1 observed snapshots");
  if (net.output_dim() != static_cast<int>(scheme.hidden.size()))
    throw std::invalid_argument("encoder: output width must match hidden component count");
}

Encoder make_encoder(const ObservationMask& scheme, int window, int hidden_width, int depth,
                     CounterRng& rng) {
  Encoder enc;
  enc.window = window;
  const int in = (window + 1) * static_cast<int>(scheme.observed.size());
  enc.net = init_mlp(in, hidden_width, depth, static_cast<int>(scheme.hidden.size()), rng);
  enc.validate(scheme);
  return enc;
}

Vec encode_initial_hidden(const Encoder& enc, const std::vector<Vec>& observed_window) {
  if (static_cast<int>(observed_window.size()) != enc.window + 1)
    throw std::invalid_argument("encoder: window length mismatch");
  const int per = static_cast<int>(observed_window.front().size());
  Vec z(static_cast<int>(observed_window.size()) * per);
  for (size_t i = 0; i < observed_window.size(); ++i) {
    if (observed_window[i].size() != per)
      throw std::invalid_argument("encoder: ragged window");
    z.segment(static_cast<int>(i) * per, per) = observed_window[i];
  }
  return mlp_eval(enc.net, z);
}

}  // namespace nhode

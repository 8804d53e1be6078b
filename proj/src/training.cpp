#include "nhode/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <thread>

namespace nhode {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("train: learning rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (!(decay_rate > 0) || decay_rate > 1.0)
    throw std::invalid_argument("train: decay rate must be in (0,1]");
  if (decay_every < 1) throw std::invalid_argument("train: decay interval must be >= 1");
  if (!(train_fraction > 0) || !(train_fraction < 1))
    throw std::invalid_argument("train: train fraction must be in (0,1)");
  if (substeps < 1) throw std::invalid_argument("train: substeps must be >= 1");
  if (method == SolverMethod::Tsit5Adaptive)
    throw std::invalid_argument("train: rollouts use fixed-step integration");
  if (window < 1) throw std::invalid_argument("train: encoder window must be >= 1");
}

AdamState AdamState::zeros(int n) {
  AdamState s;
  s.first = Vec::Zero(n);
  s.second = Vec::Zero(n);
  return s;
}

void adam_step(Vec& params, const Vec& grads, AdamState& st, double lr) {
  if (params.size() != grads.size() || params.size() != st.first.size())
    throw std::invalid_argument("adam: shape mismatch");
  st.step += 1;
  st.first = st.beta1 * st.first + (1.0 - st.beta1) * grads;
  st.second.array() = st.beta2 * st.second.array() + (1.0 - st.beta2) * grads.array().square();
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  params.array() -=
      lr * (st.first.array() / bc1) / ((st.second.array() / bc2).sqrt() + st.eps);
}

namespace {

// One fixed integration step, recorded in the graph.
int emit_fixed_step(Graph& g, const DynamicsModel& model, const ModelGraphRefs& refs, int x,
                    double h, SolverMethod method) {
  if (method == SolverMethod::Rk4) {
    int k1 = emit_vector_field(g, model, refs, x);
    int k2 = emit_vector_field(g, model, refs, g.add(x, g.scale(k1, 0.5 * h)));
    int k3 = emit_vector_field(g, model, refs, g.add(x, g.scale(k2, 0.5 * h)));
    int k4 = emit_vector_field(g, model, refs, g.add(x, g.scale(k3, h)));
    int acc = g.add(g.add(g.scale(k1, h / 6.0), g.scale(k2, h / 3.0)),
                    g.add(g.scale(k3, h / 3.0), g.scale(k4, h / 6.0)));
    return g.add(x, acc);
  }
  // Tsit5 with the step frozen: six stages, b7 = 0.
  const Tsit5Tableau& tb = tsit5_tableau();
  int k[6];
  for (int s = 0; s < 6; ++s) {
    int xs = x;
    for (int j = 0; j < s; ++j)
      if (tb.a[s][j] != 0.0) xs = g.add(xs, g.scale(k[j], h * tb.a[s][j]));
    k[s] = emit_vector_field(g, model, refs, xs);
  }
  int xn = x;
  for (int s = 0; s < 6; ++s)
    if (tb.b[s] != 0.0) xn = g.add(xn, g.scale(k[s], h * tb.b[s]));
  return xn;
}

struct TrajResult {
  double loss = 0.0;
  bool finite = false;
  Vec theta;
  Vec phi;
};

// Builds the whole unrolled trajectory (encoder, integration chain, loss)
// as one graph and runs a single reverse sweep. Only observed data entries
// are ever bound; with an encoder even the hidden t0 components stay out.
TrajResult trajectory_loss(Graph& g, const DynamicsModel& model, const Encoder* enc,
                           const ObservationMask& scheme, const Trajectory& tr,
                           const TrainConfig& cfg, bool want_grads) {
  g.reset();
  ModelGraphRefs refs = emit_model_params(g, model);
  MlpNodeIds enc_ids;
  if (enc) enc_ids = emit_mlp_params(g, enc->net);

  const int N = tr.size() - 1;
  const std::vector<int>& obs_idx = scheme.observed;
  const int n_obs = static_cast<int>(obs_idx.size());

  int x;
  if (enc) {
    Vec window(static_cast<int>(enc->window + 1) * n_obs);
    for (int i = 0; i <= enc->window; ++i)
      window.segment(i * n_obs, n_obs) = observe(tr.states[i], scheme);
    int hid = emit_mlp_forward(g, enc_ids, g.input(window));
    int obs0 = g.input(observe(tr.states[0], scheme));
    x = g.gather(g.concat(obs0, hid), assemble_permutation(scheme));
  } else {
    x = g.input(tr.states[0]);
  }

  int total = -1;
  auto add_term = [&](int xi, int i) {
    int pred = g.gather(xi, obs_idx);
    int data = g.input(observe(tr.states[i], scheme));
    int term = g.sum(g.square(g.sub(pred, data)));
    total = (total < 0) ? term : g.add(total, term);
  };
  add_term(x, 0);

  for (int i = 0; i < N; ++i) {
    double h = (tr.times[i + 1] - tr.times[i]) / cfg.substeps;
    for (int s = 0; s < cfg.substeps; ++s)
      x = emit_fixed_step(g, model, refs, x, h, cfg.method);
    add_term(x, i + 1);
  }

  int loss = g.scale(total, 1.0 / (static_cast<double>(N + 1) * n_obs));

  TrajResult out;
  out.loss = g.value(loss)(0, 0);
  out.finite = std::isfinite(out.loss);
  if (want_grads && out.finite) {
    g.backward_scalar(loss);
    out.theta = flatten_adjoints(g, refs.net);
    if (enc) out.phi = flatten_adjoints(g, enc_ids);
  }
  return out;
}

}  // namespace

LossGrads observed_loss(const DynamicsModel& model, const Encoder* encoder,
                        const ObservationMask& scheme, const Dataset& data,
                        const std::vector<int>& batch, const TrainConfig& cfg,
                        bool want_grads) {
  cfg.validate();
  model.validate();
  if (!model.trainable()) throw std::invalid_argument("observed_loss: oracle has no parameters");
  if (encoder) encoder->validate(scheme);
  if (batch.empty()) throw std::invalid_argument("observed_loss: empty batch");
  const int steps = data.steps();
  for (int i : batch) {
    if (i < 0 || i >= static_cast<int>(data.trajectories.size()))
      throw std::invalid_argument("observed_loss: trajectory index out of range");
    if (data.trajectories[i].size() != steps)
      throw std::invalid_argument("observed_loss: trajectories do not share the grid");
  }
  if (encoder && steps < encoder->window + 1)
    throw std::invalid_argument("observed_loss: trajectory shorter than encoder window");

  const int B = static_cast<int>(batch.size());
  std::vector<TrajResult> per(B);

  auto run = [&](Graph& g, int begin, int end) {
    for (int i = begin; i < end; ++i)
      per[i] = trajectory_loss(g, model, encoder, scheme, data.trajectories[batch[i]], cfg,
                               want_grads);
  };

  int nt = std::min(std::max(1, cfg.threads), B);
  if (nt == 1) {
    Graph g;
    run(g, 0, B);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::unique_ptr<Graph>> ws(nt);
    int chunk = (B + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
      ws[t] = std::make_unique<Graph>();
      pool.emplace_back(run, std::ref(*ws[t]), t * chunk, std::min(B, (t + 1) * chunk));
    }
    for (auto& th : pool) th.join();
  }

  LossGrads out;
  const int np = model.net.parameter_count();
  const int ne = encoder ? encoder->net.parameter_count() : 0;
  if (want_grads) {
    out.theta = Vec::Zero(np);
    out.phi = Vec::Zero(ne);
  }
  double acc = 0.0;
  for (int i = 0; i < B; ++i) {  // fixed reduction order
    acc += per[i].loss;
    if (!per[i].finite) out.finite = false;
    if (want_grads && per[i].finite) {
      out.theta += per[i].theta;
      if (encoder) out.phi += per[i].phi;
    }
  }
  out.loss = acc / B;
  if (want_grads) {
    out.theta /= B;
    out.phi /= B;
  }
  return out;
}

void split_indices(int n, double fraction, std::uint64_t seed, std::vector<int>& train,
                   std::vector<int>& val) {
  if (!(fraction > 0) || !(fraction < 1))
    throw std::invalid_argument("split: fraction must be in (0,1)");
  if (n < 2) throw std::invalid_argument("split: need at least two trajectories");
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  CounterRng rng(derive_seed(seed, "split"));
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[i], perm[j]);
  }
  int n_train = static_cast<int>(std::floor(fraction * n));
  n_train = std::clamp(n_train, 1, n - 1);
  train.assign(perm.begin(), perm.begin() + n_train);
  val.assign(perm.begin() + n_train, perm.end());
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double fraction,
                                          std::uint64_t seed) {
  std::vector<int> tr, va;
  split_indices(static_cast<int>(ds.trajectories.size()), fraction, seed, tr, va);
  Dataset a = ds, b = ds;
  a.trajectories.clear();
  b.trajectories.clear();
  for (int i : tr) a.trajectories.push_back(ds.trajectories[i]);
  for (int i : va) b.trajectories.push_back(ds.trajectories[i]);
  return {std::move(a), std::move(b)};
}

TrainResult train(const DynamicsModel& model0, const Encoder* encoder0, const Dataset& ds,
                  const TrainConfig& cfg) {
  cfg.validate();
  model0.validate();
  if (!model0.trainable()) throw std::invalid_argument("train: model has no parameters");
  const ObservationMask& scheme = ds.scheme;
  scheme.validate();
  if (cfg.use_encoder && !encoder0)
    throw std::invalid_argument("train: encoder required by configuration");
  const Encoder* enc = cfg.use_encoder ? encoder0 : nullptr;

  TrainResult res;
  res.model = model0;
  if (enc) res.encoder = *enc;

  std::vector<int> train_idx, val_idx;
  split_indices(static_cast<int>(ds.trajectories.size()), cfg.train_fraction, cfg.seed,
                train_idx, val_idx);

  Vec theta = flatten(res.model.net);
  AdamState st_theta = AdamState::zeros(static_cast<int>(theta.size()));
  Vec phi;
  AdamState st_phi;
  if (enc) {
    phi = flatten(res.encoder->net);
    st_phi = AdamState::zeros(static_cast<int>(phi.size()));
  }

  res.history.reserve(cfg.epochs);
  int nonfinite_streak = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        cfg.learning_rate * std::pow(cfg.decay_rate, static_cast<double>(epoch / cfg.decay_every));

    // fresh order each epoch, derived from (seed, epoch)
    std::vector<int> order = train_idx;
    CounterRng shuffle(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      int j = static_cast<int>(shuffle.next_u64() % static_cast<std::uint64_t>(i + 1));
      std::swap(order[i], order[j]);
    }

    LossHistoryRow row;
    row.epoch = epoch;
    row.lr = lr;
    double loss_sum = 0.0;
    int counted = 0;

    for (size_t off = 0; off < order.size(); off += cfg.batch_size) {
      std::vector<int> chunk(order.begin() + off,
                             order.begin() + std::min(order.size(), off + cfg.batch_size));
      const Encoder* enc_now = enc ? &*res.encoder : nullptr;
      LossGrads lg = observed_loss(res.model, enc_now, scheme, ds, chunk, cfg, true);
      if (!lg.finite) {
        ++row.nonfinite_batches;
        continue;  // keep parameters; a poisoned update would be unrecoverable
      }
      loss_sum += lg.loss * static_cast<double>(chunk.size());
      counted += static_cast<int>(chunk.size());

      if (cfg.grad_clip > 0) {
        double norm = std::sqrt(lg.theta.squaredNorm() + lg.phi.squaredNorm());
        if (norm > cfg.grad_clip) {
          double s = cfg.grad_clip / norm;
          lg.theta *= s;
          lg.phi *= s;
          ++row.clipped_batches;
        }
      }
      adam_step(theta, lg.theta, st_theta, lr);
      unflatten(theta, res.model.net);
      if (enc) {
        adam_step(phi, lg.phi, st_phi, lr);
        unflatten(phi, res.encoder->net);
      }
    }

    row.train_loss = counted > 0 ? loss_sum / counted
                                 : std::numeric_limits<double>::quiet_NaN();

    if (!val_idx.empty()) {
      const Encoder* enc_now = enc ? &*res.encoder : nullptr;
      row.val_loss = observed_loss(res.model, enc_now, scheme, ds, val_idx, cfg, false).loss;
    } else {
      row.val_loss = std::numeric_limits<double>::quiet_NaN();
    }
    res.history.push_back(row);

    nonfinite_streak = std::isfinite(row.train_loss) ? 0 : nonfinite_streak + 1;
    if (nonfinite_streak >= 3)
      throw TrainingDiverged("training loss non-finite for three consecutive epochs (epoch " +
                             std::to_string(epoch) + ")");
  }
  return res;
}

void write_loss_history_csv(const std::string& path, const std::vector<LossHistoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "epoch,lr,train_loss,val_loss,clipped_batches,nonfinite_batches\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%d,%d", r.epoch, r.lr, r.train_loss,
                  r.val_loss, r.clipped_batches, r.nonfinite_batches);
    out << buf << "\n";
  }
}

namespace {

constexpr char kCheckpointMagic[8] = {'N', 'H', 'C', 'K', '0', '0', '0', '1'};

void write_u32(std::ostream& o, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& o, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(o, bits);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("checkpoint: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in) {
  std::uint64_t bits = read_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  ck.model.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kCheckpointMagic, 8);
  write_u64(out, ck.dataset_digest);
  write_u64(out, ck.seed);
  out.put(static_cast<char>(ck.model.kind));
  out.put(static_cast<char>(ck.model.coords));
  write_u32(out, static_cast<std::uint32_t>(ck.model.particles));
  write_u32(out, static_cast<std::uint32_t>(ck.model.dim));
  write_u32(out, static_cast<std::uint32_t>(ck.model.masses.size()));
  for (int i = 0; i < ck.model.masses.size(); ++i) write_f64(out, ck.model.masses[i]);
  write_u32(out, static_cast<std::uint32_t>(ck.config_text.size()));
  out.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
  out.put(ck.encoder ? 1 : 0);
  if (ck.encoder) write_u32(out, static_cast<std::uint32_t>(ck.encoder->window));
  save_mlp(out, ck.model.net);
  if (ck.encoder) save_mlp(out, ck.encoder->net);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Checkpoint ck;
  ck.dataset_digest = read_u64(in);
  ck.seed = read_u64(in);
  int kind = in.get();
  int coords = in.get();
  if (kind < 0 || kind > 3 || coords < 0 || coords > 1)
    throw std::runtime_error("checkpoint: bad model tag");
  ck.model.kind = static_cast<ModelKind>(kind);
  ck.model.coords = static_cast<CoordMode>(coords);
  ck.model.particles = static_cast<int>(read_u32(in));
  ck.model.dim = static_cast<int>(read_u32(in));
  std::uint32_t nm = read_u32(in);
  ck.model.masses.resize(nm);
  for (std::uint32_t i = 0; i < nm; ++i) ck.model.masses[i] = read_f64(in);
  std::uint32_t clen = read_u32(in);
  ck.config_text.resize(clen);
  in.read(ck.config_text.data(), clen);
  int has_enc = in.get();
  int window = 0;
  if (has_enc) window = static_cast<int>(read_u32(in));
  ck.model.net = load_mlp(in);
  if (has_enc) {
    Encoder enc;
    enc.window = window;
    enc.net = load_mlp(in);
    ck.encoder = std::move(enc);
  }
  ck.model.validate();
  return ck;
}

}  // namespace nhode

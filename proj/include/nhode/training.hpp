#pragma once

#include "nhode/models.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace nhode {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;
  int epochs = 1200;
  double decay_rate = 0.95;
  int decay_every = 10;  // epochs
  double train_fraction = 0.85;
  SolverMethod method = SolverMethod::Rk4;  // fixed-step rollout integrator
  int substeps = 1;
  std::uint64_t seed = 0;
  bool use_encoder = false;
  int window = 10;  // K
  double grad_clip = 100.0;
  int threads = 1;

  void validate() const;
};

// Flat Adam moments over the concatenated parameter vector.
struct AdamState {
  Vec first;
  Vec second;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros(int n);
};

// Bias-corrected update; returns nothing, mutates params/state in place.
void adam_step(Vec& params, const Vec& grads, AdamState& state, double lr);

struct LossGrads {
  double loss = 0.0;
  bool finite = true;
  Vec theta;  // empty unless gradients were requested
  Vec phi;
};

// Rollout loss of Algorithm-style training: mean squared deviation over the
// observed scalar entries of every save point, averaged over the batch.
// Gradients flow through the unrolled fixed-step integration; hidden data
// channels are never read (the t0 full state is, when no encoder is used).
LossGrads observed_loss(const DynamicsModel& model, const Encoder* encoder,
                        const ObservationMask& scheme, const Dataset& data,
                        const std::vector<int>& batch, const TrainConfig& cfg,
                        bool want_grads = true);

// Deterministic permutation split; indices partition 0..n-1.
void split_indices(int n, double fraction, std::uint64_t seed, std::vector<int>& train,
                   std::vector<int>& val);
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double fraction,
                                          std::uint64_t seed);

struct LossHistoryRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  int clipped_batches = 0;
  int nonfinite_batches = 0;
};

struct TrainResult {
  DynamicsModel model;
  std::optional<Encoder> encoder;
  std::vector<LossHistoryRow> history;
};

struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

// Full loop: shuffled mini-batches, Adam on theta (and phi), exponential
// learning-rate decay keyed to epochs, per-epoch train/validation losses.
// Aborts after three consecutive epochs of non-finite training loss.
TrainResult train(const DynamicsModel& model, const Encoder* encoder, const Dataset& ds,
                  const TrainConfig& cfg);

void write_loss_history_csv(const std::string& path, const std::vector<LossHistoryRow>& rows);

// Checkpoint: model metadata + parameter containers, the originating config
// text, and the digest of the dataset file it was trained on.
struct Checkpoint {
  DynamicsModel model;
  std::optional<Encoder> encoder;
  std::string config_text;
  std::uint64_t dataset_digest = 0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace nhode

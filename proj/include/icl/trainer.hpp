#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "icl/circuits.hpp"
#include "icl/datagen.hpp"
#include "icl/gradients.hpp"
#include "icl/net.hpp"

namespace icl::trainer {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-6;
  int batch_size = 128;
  int64_t max_steps = 200000;
  int eval_every = 1000;
  int converge_window = 10;
  double converge_delta = 1e-4;
  Stage stage = Stage::UnimodalPretrain;
  bool f64_mode = false;  // double precision for gradient checks; training itself is f32
  int history_episodes = 512;  // per-mode episodes for the periodic history evaluation
  bool history_circuits = true;
};

void validate(const TrainConfig& cfg);

struct HistoryPoint {
  int64_t step = 0;
  double train_loss = 0.0;  // mean over the steps since the previous evaluation
  double iwl = 0.0;
  double icl = 0.0;
  double cla = 0.0;
  double ph1_1 = 0.0;  // first-layer offset-1 strength, max over heads
  double ind_2 = 0.0;  // second-layer induction strength, max over heads
};

struct TrainState {
  int64_t step = 0;
  net::ParamSet<float> params;
  std::vector<HistoryPoint> history;
};

enum class RunStatus { Converged, StepCap, Diverged };
std::string to_string(RunStatus s);

struct TrainOutcome {
  RunStatus status = RunStatus::StepCap;
  int64_t steps = 0;
  int64_t converged_step = -1;
  double final_loss = 0.0;
  std::string message;
};

// Called after every history evaluation; returning false stops the run.
using ProgressFn = std::function<bool(const HistoryPoint&)>;

// SGD on freshly generated batches until convergence, the step cap or
// divergence (a batch loss above 10 ln L, or any non-finite value).
// Convergence: the best interval-mean train loss fails to improve by more
// than converge_delta for converge_window consecutive evaluations.
TrainOutcome train(TrainState& state, const TrainConfig& cfg, const net::ModelConfig& model,
                   const datagen::Task& task, uint64_t seed, const ProgressFn& progress = {});

// Encoder pretraining: K2-way classification of raw secondary-modality items.
struct EncoderOutcome {
  TrainOutcome run;
  double train_accuracy = 0.0;
};
EncoderOutcome pretrain_encoder(TrainState& state, const TrainConfig& cfg, const net::ModelConfig& model,
                                const datagen::Task& task, uint64_t seed, const ProgressFn& progress = {});

// Fraction of fresh M2 items the encoder head classifies correctly.
double encoder_accuracy(const net::ParamSet<float>& params, const net::ModelConfig& model, const datagen::Task& task,
                        int n, uint64_t seed);

// Copies every tensor present in `from` whose name and shape match into `to`.
// Returns the number of tensors copied.
int transfer(const net::ParamSet<float>& from, net::ParamSet<float>& to);

}  // namespace icl::trainer

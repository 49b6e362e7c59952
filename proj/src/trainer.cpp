#include "icl/trainer.hpp"

#include <cmath>
#include <limits>

#include "icl/errors.hpp"
#include "icl/evalsuite.hpp"
#include "icl/rng.hpp"

namespace icl::trainer {

void validate(const TrainConfig& cfg) {
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("train.lr must be >= 0");
  if (cfg.weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (cfg.max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
  if (cfg.eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (cfg.converge_window < 1) throw ConfigError("train.converge_window must be >= 1");
  if (cfg.converge_delta < 0.0) throw ConfigError("train.converge_delta must be >= 0");
  if (cfg.history_episodes < 1) throw ConfigError("train.history_episodes must be >= 1");
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Converged: return "converged";
    case RunStatus::StepCap: return "step_cap";
    case RunStatus::Diverged: return "diverged";
  }
  return "?";
}

namespace {

// Shared loop: `step_loss(step)` performs one update and returns its loss,
// `snapshot(step, mean_loss)` builds the history point.
template <typename StepFn, typename SnapFn>
TrainOutcome run_loop(TrainState& state, const TrainConfig& cfg, double divergence, StepFn&& step_loss,
                      SnapFn&& snapshot, const ProgressFn& progress) {
  TrainOutcome out;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  double interval_sum = 0.0;
  int interval_n = 0;
  while (state.step < cfg.max_steps) {
    double loss;
    try {
      loss = step_loss(state.step);
    } catch (const NumericError& e) {
      out.status = RunStatus::Diverged;
      out.message = e.what();
      break;
    }
    ++state.step;
    if (!std::isfinite(loss) || loss > divergence) {
      out.status = RunStatus::Diverged;
      out.message = "loss " + std::to_string(loss) + " exceeds the divergence bound";
      out.final_loss = loss;
      break;
    }
    interval_sum += loss;
    ++interval_n;
    out.final_loss = loss;
    if (state.step % cfg.eval_every != 0 && state.step != cfg.max_steps) continue;

    const double mean = interval_sum / interval_n;
    interval_sum = 0.0;
    interval_n = 0;
    HistoryPoint hp = snapshot(state.step, mean);
    if (!state.history.empty() && state.history.back().step >= hp.step) throw ConfigError("history must increase");
    state.history.push_back(hp);
    if (progress && !progress(hp)) break;
    if (best - mean > cfg.converge_delta) {
      best = mean;
      stale = 0;
    } else if (++stale >= cfg.converge_window) {
      out.status = RunStatus::Converged;
      out.converged_step = state.step;
      break;
    }
  }
  out.steps = state.step;
  return out;
}

}  // namespace

TrainOutcome train(TrainState& state, const TrainConfig& cfg, const net::ModelConfig& model,
                   const datagen::Task& task, uint64_t seed, const ProgressFn& progress) {
  validate(cfg);
  net::validate(model);
  if (cfg.stage == Stage::EncoderPretrain) throw ConfigError("use pretrain_encoder for the encoder stage");
  if (is_multimodal(cfg.stage) != task.multimodal())
    throw ConfigError("stage " + to_string(cfg.stage) + " does not match the data modality");
  if (task.config().sequence_length() > model.max_T) throw ConfigError("episodes exceed model.max_T");
  const auto mask = trainable_mask(state.params, cfg.stage);
  const double divergence = 10.0 * std::log(static_cast<double>(model.n_labels));

  auto step_loss = [&](int64_t step) {
    const auto batch = datagen::build_batch(task, datagen::EvalMode::Train, cfg.batch_size, seed, streams::kTrainData,
                                            static_cast<uint64_t>(step) * cfg.batch_size);
    auto lg = loss_and_grads<float>(state.params, model, batch, mask);
    if (!std::isfinite(lg.loss) || lg.loss > divergence) return lg.loss;
    sgd_step(state.params, lg.grads, cfg.lr, cfg.weight_decay, mask);
    return lg.loss;
  };
  auto snapshot = [&](int64_t step, double mean) {
    HistoryPoint hp;
    hp.step = step;
    hp.train_loss = mean;
    const auto iwl = evalsuite::evaluate(state.params, model, task, datagen::EvalMode::IWL, cfg.history_episodes, seed);
    const auto nov =
        evalsuite::evaluate(state.params, model, task, datagen::EvalMode::ICLNovel, cfg.history_episodes, seed);
    const auto swp =
        evalsuite::evaluate(state.params, model, task, datagen::EvalMode::ICLSwap, cfg.history_episodes, seed);
    hp.iwl = iwl.accuracy;
    hp.icl = 0.5 * (nov.accuracy + swp.accuracy);
    hp.cla = nov.cla;
    if (cfg.history_circuits) {
      const auto m = circuits::probe(state.params, model, task, std::min(cfg.history_episodes, circuits::kProbeEpisodes));
      hp.ph1_1 = m.layers[0].max.ph1;
      hp.ind_2 = m.n_layers > 1 ? m.layers[1].max.ind : m.layers[0].max.ind;
    }
    return hp;
  };
  return run_loop(state, cfg, divergence, step_loss, snapshot, progress);
}

namespace {

void encoder_batch(const datagen::Task& task, int n, uint64_t seed, uint64_t index, Mat<float>& x,
                   std::vector<int>& y) {
  const auto& bank = task.bank2();
  x.resize(n, bank.D());
  y.resize(n);
  Rng rng(derive_seed(seed, index), streams::kEncoderData);
  for (int i = 0; i < n; ++i) {
    y[i] = task.sampler2()(rng);
    x.row(i) = datagen::sample_item(bank, y[i], task.config().m2.epsilon, rng);
  }
}

}  // namespace

double encoder_accuracy(const net::ParamSet<float>& params, const net::ModelConfig& model, const datagen::Task& task,
                        int n, uint64_t seed) {
  Mat<float> x;
  std::vector<int> y;
  encoder_batch(task, n, seed, std::numeric_limits<uint64_t>::max(), x, y);
  net::EncoderPass<float> pass(params, model);
  const auto& logits = pass.forward(x);
  int correct = 0;
  for (int i = 0; i < n; ++i)
    correct += evalsuite::argmax(logits.data() + i * logits.cols(), static_cast<int>(logits.cols())) == y[i];
  return static_cast<double>(correct) / n;
}

EncoderOutcome pretrain_encoder(TrainState& state, const TrainConfig& cfg, const net::ModelConfig& model,
                                const datagen::Task& task, uint64_t seed, const ProgressFn& progress) {
  validate(cfg);
  net::validate(model);
  if (cfg.stage != Stage::EncoderPretrain) throw ConfigError("pretrain_encoder requires the encoder_pretrain stage");
  if (!model.encoder || model.encoder_classes != task.bank2().K())
    throw ConfigError("encoder pretraining needs model.encoder with encoder_classes = K2");
  const auto mask = trainable_mask(state.params, cfg.stage);
  const double divergence = 10.0 * std::log(static_cast<double>(model.encoder_classes));
  Mat<float> x;
  std::vector<int> y;
  auto step_loss = [&](int64_t step) {
    encoder_batch(task, cfg.batch_size, seed, static_cast<uint64_t>(step), x, y);
    auto lg = encoder_loss_and_grads<float>(state.params, model, x, y, mask);
    if (!std::isfinite(lg.loss) || lg.loss > divergence) return lg.loss;
    sgd_step(state.params, lg.grads, cfg.lr, cfg.weight_decay, mask);
    return lg.loss;
  };
  auto snapshot = [&](int64_t step, double mean) {
    HistoryPoint hp;
    hp.step = step;
    hp.train_loss = mean;
    hp.icl = encoder_accuracy(state.params, model, task, cfg.history_episodes, seed);
    return hp;
  };
  EncoderOutcome out;
  out.run = run_loop(state, cfg, divergence, step_loss, snapshot, progress);
  out.train_accuracy = encoder_accuracy(state.params, model, task, 2048, seed);
  return out;
}

int transfer(const net::ParamSet<float>& from, net::ParamSet<float>& to) {
  int copied = 0;
  for (auto& t : to.tensors()) {
    if (!from.contains(t.name)) continue;
    const auto& src = from[t.name];
    if (src.rows() != t.value.rows() || src.cols() != t.value.cols())
      throw ConfigError("tensor '" + t.name + "' has a different shape in the source checkpoint");
    t.value = src;
    ++copied;
  }
  return copied;
}

}  // namespace icl::trainer

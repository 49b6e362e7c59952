#pragma once

#include <span>
#include <vector>

#include "icl/datagen.hpp"
#include "icl/net.hpp"

namespace icl::evalsuite {

struct EvalReport {
  datagen::EvalMode mode = datagen::EvalMode::ICLNovel;
  int n_episodes = 0;
  double accuracy = 0.0;
  double cla = 0.0;
};

// Index of the largest entry; the lowest index wins ties.
int argmax(const float* row, int n);

// Argmax prediction per episode, evaluated in fixed-size chunks.
std::vector<int> predict(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                         std::span<const datagen::Episode> episodes, const net::ForwardOptions& opts = {});

double accuracy(std::span<const datagen::Episode> episodes, std::span<const int> predictions);
// Fraction of episodes whose prediction is one of the labels shown in context.
double context_label_accuracy(std::span<const datagen::Episode> episodes, std::span<const int> predictions);
double context_label_accuracy(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                              std::span<const datagen::Episode> episodes);

// Episode stream used for evaluation under `mode`.
uint64_t eval_stream(datagen::EvalMode mode);

std::vector<datagen::Episode> eval_episodes(const datagen::Task& task, datagen::EvalMode mode, int n_episodes,
                                            uint64_t seed);

EvalReport evaluate(const net::ParamSet<float>& params, const net::ModelConfig& cfg, const datagen::Task& task,
                    datagen::EvalMode mode, int n_episodes, uint64_t seed, const net::ForwardOptions& opts = {});

struct SuiteResult {
  EvalReport iwl, novel, swap;
  double icl = 0.0;  // mean of the novel and swap accuracies
  double cla = 0.0;  // context-label accuracy on the novel episodes
};

SuiteResult evaluate_suite(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                           const datagen::Task& task, int n_episodes, uint64_t seed);

}  // namespace icl::evalsuite

#pragma once

#include <span>
#include <string>
#include <vector>

#include "icl/datagen.hpp"
#include "icl/net.hpp"

namespace icl::trainer {

enum class Stage {
  UnimodalPretrain,
  MultimodalProjectorOnly,
  MultimodalProjectorDecoder,
  MultimodalAll,
  EarlyFusion,
  EncoderPretrain,
};

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);
bool is_multimodal(Stage s);

// 1 for every tensor the stage updates, aligned with params.tensors().
template <typename T>
std::vector<char> trainable_mask(const net::ParamSet<T>& params, Stage stage);

template <typename T>
struct LossGrad {
  double loss = 0.0;
  net::ParamSet<T> grads;
};

// Mean softmax cross-entropy of the final-position logits against each
// episode's target label, with gradients for the trainable tensors (exact
// zeros elsewhere).
template <typename T>
LossGrad<T> loss_and_grads(const net::ParamSet<T>& params, const net::ModelConfig& cfg,
                           std::span<const datagen::Episode> batch, const std::vector<char>& trainable,
                           const net::ForwardOptions& opts = {});

// Same objective for encoder pretraining: rows of x2 classified into `classes`.
template <typename T>
LossGrad<T> encoder_loss_and_grads(const net::ParamSet<T>& params, const net::ModelConfig& cfg, const Mat<T>& x2,
                                   std::span<const int> classes, const std::vector<char>& trainable);

// Cross-entropy from logits; fills dlogits with (softmax - onehot) / n when non-null.
template <typename T>
double cross_entropy(const Mat<T>& logits, std::span<const int> targets, Mat<T>* dlogits);

// p <- p - lr * (g + weight_decay * p) on trainable tensors.
template <typename T>
void sgd_step(net::ParamSet<T>& params, const net::ParamSet<T>& grads, double lr, double weight_decay,
              const std::vector<char>& trainable);

struct TensorCheck {
  std::string name;
  int sampled = 0;
  bool frozen = false;
  double max_abs_error = 0.0;
  double relative_error = 0.0;  // ||analytic - numeric|| / (||analytic|| + ||numeric||) over sampled coords
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  std::vector<TensorCheck> tensors;
  std::vector<std::string> failing;
  bool passed() const { return failing.empty(); }
};

// Central finite differences in double precision on up to `samples` randomly
// chosen coordinates per tensor. Frozen tensors are compared against their
// zero analytic gradient and report error 0.
GradCheckReport grad_check(const net::ParamSet<double>& params, const net::ModelConfig& cfg,
                           std::span<const datagen::Episode> batch, const std::vector<char>& trainable,
                           double tolerance, int samples = 200, double step = 1e-5, uint64_t seed = 0);

}  // namespace icl::trainer

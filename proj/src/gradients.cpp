#include "icl/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "icl/errors.hpp"
#include "icl/rng.hpp"

namespace icl::trainer {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::UnimodalPretrain: return "unimodal_pretrain";
    case Stage::MultimodalProjectorOnly: return "multimodal_projector_only";
    case Stage::MultimodalProjectorDecoder: return "multimodal_projector_decoder";
    case Stage::MultimodalAll: return "multimodal_all";
    case Stage::EarlyFusion: return "early_fusion";
    case Stage::EncoderPretrain: return "encoder_pretrain";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::UnimodalPretrain, Stage::MultimodalProjectorOnly, Stage::MultimodalProjectorDecoder,
                   Stage::MultimodalAll, Stage::EarlyFusion, Stage::EncoderPretrain})
    if (to_string(st) == s) return st;
  throw ConfigError("unknown training stage '" + s + "'");
}

bool is_multimodal(Stage s) {
  return s == Stage::MultimodalProjectorOnly || s == Stage::MultimodalProjectorDecoder ||
         s == Stage::MultimodalAll || s == Stage::EarlyFusion;
}

template <typename T>
std::vector<char> trainable_mask(const net::ParamSet<T>& params, Stage stage) {
  std::vector<char> mask(params.size(), 0);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.tensors()[i].name;
    const bool dec = net::is_decoder_tensor(name);
    const bool proj = net::is_projector_tensor(name);
    const bool enc = net::is_encoder_tensor(name);
    const bool head = net::is_encoder_head_tensor(name);
    bool on = false;
    switch (stage) {
      case Stage::UnimodalPretrain: on = dec; break;
      case Stage::MultimodalProjectorOnly: on = proj; break;
      case Stage::MultimodalProjectorDecoder: on = proj || dec; break;
      case Stage::MultimodalAll:
      case Stage::EarlyFusion: on = proj || dec || enc; break;
      case Stage::EncoderPretrain: on = enc || head; break;
    }
    mask[i] = on ? 1 : 0;
  }
  return mask;
}

template <typename T>
double cross_entropy(const Mat<T>& logits, std::span<const int> targets, Mat<T>* dlogits) {
  const Eigen::Index n = logits.rows(), L = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != n) throw ConfigError("cross_entropy: target count");
  if (dlogits) dlogits->resize(n, L);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = targets[i];
    if (y < 0 || y >= L) throw IndexError("target label outside the classifier range");
    const double mx = static_cast<double>(logits.row(i).maxCoeff());
    double sum = 0.0;
    for (Eigen::Index j = 0; j < L; ++j) sum += std::exp(static_cast<double>(logits(i, j)) - mx);
    total += mx + std::log(sum) - static_cast<double>(logits(i, y));
    if (dlogits) {
      for (Eigen::Index j = 0; j < L; ++j)
        (*dlogits)(i, j) = static_cast<T>(std::exp(static_cast<double>(logits(i, j)) - mx) / sum / n);
      (*dlogits)(i, y) -= static_cast<T>(1.0 / n);
    }
  }
  const double loss = total / static_cast<double>(n);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");
  return loss;
}

template <typename T>
LossGrad<T> loss_and_grads(const net::ParamSet<T>& params, const net::ModelConfig& cfg,
                           std::span<const datagen::Episode> batch, const std::vector<char>& trainable,
                           const net::ForwardOptions& opts) {
  if (batch.empty()) throw ConfigError("loss_and_grads: empty batch");
  net::BatchPass<T> pass(params, cfg);
  const Mat<T>& logits = pass.forward(batch, opts);
  std::vector<int> targets(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) targets[i] = batch[i].target_label;
  Mat<T> dlogits;
  LossGrad<T> out;
  out.loss = cross_entropy<T>(logits, targets, &dlogits);
  out.grads = params.zeros_like();
  pass.backward(dlogits, out.grads, trainable);
  return out;
}

template <typename T>
LossGrad<T> encoder_loss_and_grads(const net::ParamSet<T>& params, const net::ModelConfig& cfg, const Mat<T>& x2,
                                   std::span<const int> classes, const std::vector<char>& trainable) {
  net::EncoderPass<T> pass(params, cfg);
  const Mat<T>& logits = pass.forward(x2);
  Mat<T> dlogits;
  LossGrad<T> out;
  out.loss = cross_entropy<T>(logits, classes, &dlogits);
  out.grads = params.zeros_like();
  pass.backward(dlogits, out.grads, trainable);
  return out;
}

template <typename T>
void sgd_step(net::ParamSet<T>& params, const net::ParamSet<T>& grads, double lr, double weight_decay,
              const std::vector<char>& trainable) {
  if (grads.size() != params.size() || trainable.size() != params.size())
    throw ConfigError("sgd_step: gradient store does not match parameters");
  const T step = static_cast<T>(lr);
  const T wd = static_cast<T>(weight_decay);
  for (size_t i = 0; i < params.size(); ++i) {
    if (!trainable[i]) continue;
    auto& p = params.tensors()[i].value;
    const auto& g = grads.tensors()[i].value;
    if (p.rows() != g.rows() || p.cols() != g.cols()) throw ConfigError("sgd_step: shape mismatch");
    if (wd != T(0))
      p -= step * (g + wd * p);
    else
      p -= step * g;
  }
}

GradCheckReport grad_check(const net::ParamSet<double>& params, const net::ModelConfig& cfg,
                           std::span<const datagen::Episode> batch, const std::vector<char>& trainable,
                           double tolerance, int samples, double step, uint64_t seed) {
  const auto analytic = loss_and_grads<double>(params, cfg, batch, trainable);
  std::vector<int> targets(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) targets[i] = batch[i].target_label;

  net::ParamSet<double> probe = params;
  auto eval_loss = [&]() {
    net::BatchPass<double> pass(probe, cfg);
    return cross_entropy<double>(pass.forward(batch), targets, nullptr);
  };

  Rng rng(seed, streams::kGradCheck);
  GradCheckReport report;
  report.tolerance = tolerance;
  for (size_t t = 0; t < params.size(); ++t) {
    const auto& tensor = params.tensors()[t];
    const auto& g = analytic.grads.tensors()[t].value;
    TensorCheck tc;
    tc.name = tensor.name;
    const Eigen::Index size = tensor.value.size();
    if (!trainable[t]) {
      tc.frozen = true;
      tc.sampled = 0;
      const double gmax = g.cwiseAbs().maxCoeff();
      tc.max_abs_error = gmax;
      tc.relative_error = gmax == 0.0 ? 0.0 : 1.0;
      report.tensors.push_back(tc);
      if (gmax != 0.0) report.failing.push_back(tc.name);
      continue;
    }
    std::vector<Eigen::Index> coords(size);
    std::iota(coords.begin(), coords.end(), 0);
    if (size > samples) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(samples);
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    double* p = probe.tensors()[t].value.data();
    for (Eigen::Index c : coords) {
      const double orig = p[c];
      p[c] = orig + step;
      const double up = eval_loss();
      p[c] = orig - step;
      const double down = eval_loss();
      p[c] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = g.data()[c];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      tc.max_abs_error = std::max(tc.max_abs_error, std::abs(a - numeric));
    }
    tc.sampled = static_cast<int>(coords.size());
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    tc.relative_error = denom == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
    report.max_relative_error = std::max(report.max_relative_error, tc.relative_error);
    if (tc.relative_error > tolerance) report.failing.push_back(tc.name);
    report.tensors.push_back(tc);
  }
  return report;
}

template std::vector<char> trainable_mask(const net::ParamSet<float>&, Stage);
template std::vector<char> trainable_mask(const net::ParamSet<double>&, Stage);
template double cross_entropy(const Mat<float>&, std::span<const int>, Mat<float>*);
template double cross_entropy(const Mat<double>&, std::span<const int>, Mat<double>*);
template LossGrad<float> loss_and_grads(const net::ParamSet<float>&, const net::ModelConfig&,
                                        std::span<const datagen::Episode>, const std::vector<char>&,
                                        const net::ForwardOptions&);
template LossGrad<double> loss_and_grads(const net::ParamSet<double>&, const net::ModelConfig&,
                                         std::span<const datagen::Episode>, const std::vector<char>&,
                                         const net::ForwardOptions&);
template LossGrad<float> encoder_loss_and_grads(const net::ParamSet<float>&, const net::ModelConfig&,
                                                const Mat<float>&, std::span<const int>, const std::vector<char>&);
template LossGrad<double> encoder_loss_and_grads(const net::ParamSet<double>&, const net::ModelConfig&,
                                                 const Mat<double>&, std::span<const int>,
                                                 const std::vector<char>&);
template void sgd_step(net::ParamSet<float>&, const net::ParamSet<float>&, double, double, const std::vector<char>&);
template void sgd_step(net::ParamSet<double>&, const net::ParamSet<double>&, double, double,
                       const std::vector<char>&);

}  // namespace icl::trainer

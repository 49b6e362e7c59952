#include "icl/evalsuite.hpp"

#include <algorithm>

#include "icl/errors.hpp"

namespace icl::evalsuite {

namespace {
constexpr size_t kChunk = 256;
}

int argmax(const float* row, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

std::vector<int> predict(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                         std::span<const datagen::Episode> episodes, const net::ForwardOptions& opts) {
  std::vector<int> out;
  out.reserve(episodes.size());
  net::BatchPass<float> pass(params, cfg);
  for (size_t start = 0; start < episodes.size(); start += kChunk) {
    const auto chunk = episodes.subspan(start, std::min(kChunk, episodes.size() - start));
    const Mat<float>& logits = pass.forward(chunk, opts);
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
      out.push_back(argmax(logits.data() + i * logits.cols(), static_cast<int>(logits.cols())));
  }
  return out;
}

double accuracy(std::span<const datagen::Episode> episodes, std::span<const int> predictions) {
  if (episodes.empty() || episodes.size() != predictions.size())
    throw ConfigError("accuracy: episodes and predictions must be nonempty and aligned");
  size_t hits = 0;
  for (size_t i = 0; i < episodes.size(); ++i) hits += predictions[i] == episodes[i].target_label;
  return static_cast<double>(hits) / static_cast<double>(episodes.size());
}

double context_label_accuracy(std::span<const datagen::Episode> episodes, std::span<const int> predictions) {
  if (episodes.empty() || episodes.size() != predictions.size())
    throw ConfigError("context_label_accuracy: episodes and predictions must be nonempty and aligned");
  size_t hits = 0;
  for (size_t i = 0; i < episodes.size(); ++i) {
    const auto& labels = episodes[i].label_ids;
    hits += std::find(labels.begin(), labels.end(), predictions[i]) != labels.end();
  }
  return static_cast<double>(hits) / static_cast<double>(episodes.size());
}

double context_label_accuracy(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                              std::span<const datagen::Episode> episodes) {
  const auto pred = predict(params, cfg, episodes);
  return context_label_accuracy(episodes, pred);
}

uint64_t eval_stream(datagen::EvalMode mode) { return (streams::kEval << 8) | static_cast<uint64_t>(mode); }

std::vector<datagen::Episode> eval_episodes(const datagen::Task& task, datagen::EvalMode mode, int n_episodes,
                                            uint64_t seed) {
  if (mode == datagen::EvalMode::Train) throw ConfigError("evaluation mode 'train' is training-only");
  if (n_episodes < 1) throw ConfigError("eval.n_episodes must be >= 1");
  return datagen::build_batch(task, mode, n_episodes, seed, eval_stream(mode), 0);
}

EvalReport evaluate(const net::ParamSet<float>& params, const net::ModelConfig& cfg, const datagen::Task& task,
                    datagen::EvalMode mode, int n_episodes, uint64_t seed, const net::ForwardOptions& opts) {
  const auto episodes = eval_episodes(task, mode, n_episodes, seed);
  if (mode == datagen::EvalMode::IWL)
    for (const auto& e : episodes)
      if (std::find(e.class_ids.begin(), e.class_ids.end(), e.query_class) != e.class_ids.end() ||
          (e.multimodal &&
           std::find(e.class_ids2.begin(), e.class_ids2.end(), e.query_class2) != e.class_ids2.end()))
        throw ConfigError("IWL episode contains its query class in context");
  const auto pred = predict(params, cfg, episodes, opts);
  EvalReport r;
  r.mode = mode;
  r.n_episodes = n_episodes;
  r.accuracy = accuracy(episodes, pred);
  r.cla = context_label_accuracy(episodes, pred);
  return r;
}

SuiteResult evaluate_suite(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                           const datagen::Task& task, int n_episodes, uint64_t seed) {
  SuiteResult s;
  s.iwl = evaluate(params, cfg, task, datagen::EvalMode::IWL, n_episodes, seed);
  s.novel = evaluate(params, cfg, task, datagen::EvalMode::ICLNovel, n_episodes, seed);
  s.swap = evaluate(params, cfg, task, datagen::EvalMode::ICLSwap, n_episodes, seed);
  s.icl = 0.5 * (s.novel.accuracy + s.swap.accuracy);
  s.cla = s.novel.cla;
  return s;
}

}  // namespace icl::evalsuite

#include "icl/studies.hpp"

#include "icl/analysis.hpp"
#include "icl/errors.hpp"
#include "icl/evalsuite.hpp"

namespace icl::studies {

namespace {

double accuracy_on(const net::ParamSet<float>& params, const net::ModelConfig& model,
                   std::span<const datagen::Episode> episodes, const net::ForwardOptions& opts) {
  const auto pred = evalsuite::predict(params, model, episodes, opts);
  return evalsuite::accuracy(episodes, pred);
}

}  // namespace

double icl_accuracy(const net::ParamSet<float>& params, const net::ModelConfig& model, const datagen::Task& task,
                    int n_episodes, uint64_t seed, const net::ForwardOptions& opts) {
  const auto novel = evalsuite::evaluate(params, model, task, datagen::EvalMode::ICLNovel, n_episodes, seed, opts);
  const auto swap = evalsuite::evaluate(params, model, task, datagen::EvalMode::ICLSwap, n_episodes, seed, opts);
  return 0.5 * (novel.accuracy + swap.accuracy);
}

KnockoutReport knockout_study(const net::ParamSet<float>& params, const net::ModelConfig& model,
                              const datagen::Task& task, int n_episodes, uint64_t seed, int probe_episodes,
                              uint64_t probe_seed) {
  if (model.n_layers < 2) throw ConfigError("knockout needs at least two layers");
  const auto probe = circuits::probe_episodes(task, probe_episodes, probe_seed);
  KnockoutReport r;
  std::tie(r.prev_token, r.induction) = circuits::identify_heads(params, model, probe);
  r.baseline = icl_accuracy(params, model, task, n_episodes, seed);
  net::ForwardOptions ko;
  ko.knockout = {r.induction.ref()};
  r.induction_knocked = icl_accuracy(params, model, task, n_episodes, seed, ko);
  ko.knockout = {r.prev_token.ref()};
  r.prev_token_knocked = icl_accuracy(params, model, task, n_episodes, seed, ko);
  ko.knockout = {r.prev_token.ref(), r.induction.ref()};
  r.both_knocked = icl_accuracy(params, model, task, n_episodes, seed, ko);
  return r;
}

ZeroingReport zeroing_study(const net::ParamSet<float>& params, const net::ModelConfig& model,
                            const datagen::Task& task, int n_episodes, uint64_t seed) {
  if (!task.multimodal()) throw ConfigError("modality zeroing needs a multimodal model");
  ZeroingReport r;
  r.chance = 1.0 / task.active_labels();
  for (auto mode : {datagen::EvalMode::ICLNovel, datagen::EvalMode::ICLSwap}) {
    const auto eps = evalsuite::eval_episodes(task, mode, n_episodes, seed);
    std::vector<datagen::Episode> z1, z2;
    z1.reserve(eps.size());
    z2.reserve(eps.size());
    for (const auto& e : eps) {
      z1.push_back(circuits::modality_zero(e, circuits::ZeroModality::M1));
      z2.push_back(circuits::modality_zero(e, circuits::ZeroModality::M2));
    }
    r.full += 0.5 * accuracy_on(params, model, eps, {});
    r.zero_m1 += 0.5 * accuracy_on(params, model, z1, {});
    r.zero_m2 += 0.5 * accuracy_on(params, model, z2, {});
  }
  return r;
}

AlignmentReport alignment_study(const net::ParamSet<float>& params, const net::ModelConfig& model,
                                const datagen::Task& task, int n_episodes, uint64_t seed, bool prototype) {
  if (!task.multimodal()) throw ConfigError("alignment needs a multimodal model");
  const auto eps = evalsuite::eval_episodes(task, datagen::EvalMode::ICLNovel, n_episodes, seed);
  net::BatchPass<float> pass(params, model);
  pass.forward(eps);
  const Mat<double> projected = pass.projected_m2().cast<double>();
  Mat<double> paired(projected.rows(), projected.cols());
  Eigen::Index row = 0;
  for (const auto& e : eps) {
    const auto pos = e.m2_positions();
    for (size_t i = 0; i < pos.size(); ++i, ++row) {
      if (prototype) {
        const int cls = static_cast<int>(i) < e.num_exemplars() ? e.class_ids[i] : e.query_class;
        paired.row(row) = task.bank1().mu.row(cls).cast<double>();
      } else {
        paired.row(row) = e.tokens.row(pos[i] - 1).cast<double>();
      }
    }
  }
  if (row != projected.rows()) throw ConfigError("alignment: projected rows do not match the episodes");
  AlignmentReport r;
  r.n_pairs = static_cast<int>(row);
  r.prototype = prototype;
  r.cka = analysis::cka_linear(projected, paired);
  r.paired_l2 = analysis::paired_l2(projected, paired);
  return r;
}

}  // namespace icl::studies

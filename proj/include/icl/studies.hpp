#pragma once

#include <cstdint>

#include "icl/circuits.hpp"
#include "icl/datagen.hpp"
#include "icl/net.hpp"

namespace icl::studies {

// Mean of ICL-Novel and ICL-Swap accuracy with the given forward options.
double icl_accuracy(const net::ParamSet<float>& params, const net::ModelConfig& model, const datagen::Task& task,
                    int n_episodes, uint64_t seed, const net::ForwardOptions& opts = {});

struct KnockoutReport {
  circuits::HeadId prev_token;
  circuits::HeadId induction;
  double baseline = 0.0;
  double induction_knocked = 0.0;
  double prev_token_knocked = 0.0;
  double both_knocked = 0.0;
};

// Heads are identified on the probe set, then ablated on fresh evaluation episodes.
KnockoutReport knockout_study(const net::ParamSet<float>& params, const net::ModelConfig& model,
                              const datagen::Task& task, int n_episodes, uint64_t seed, int probe_episodes,
                              uint64_t probe_seed);

struct ZeroingReport {
  double full = 0.0;
  double zero_m1 = 0.0;
  double zero_m2 = 0.0;
  double chance = 0.0;  // 1 / (labels usable in multimodal episodes)
};

ZeroingReport zeroing_study(const net::ParamSet<float>& params, const net::ModelConfig& model,
                            const datagen::Task& task, int n_episodes, uint64_t seed);

struct AlignmentReport {
  int n_pairs = 0;
  bool prototype = false;
  double cka = 0.0;
  double paired_l2 = 0.0;
};

// Projected secondary-modality features against their paired primary items
// (or, with `prototype`, the paired primary class prototypes).
AlignmentReport alignment_study(const net::ParamSet<float>& params, const net::ModelConfig& model,
                                const datagen::Task& task, int n_episodes, uint64_t seed, bool prototype);

}  // namespace icl::studies

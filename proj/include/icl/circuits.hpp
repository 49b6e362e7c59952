#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icl/datagen.hpp"
#include "icl/net.hpp"

namespace icl::circuits {

// Per-head values of one layer. Attention rows are read from the trace as
// Attn(i -> j) = trace.at(layer, head)(i, j).
std::vector<double> ph_strength(const net::AttentionTrace& trace, int layer, int offset);
// Mean attention from the final position onto the label positions of context
// exemplars sharing the query's class. Throws UndefinedMetric when there are none.
std::vector<double> ind_strength(const net::AttentionTrace& trace, int layer, const datagen::Episode& episode);
// Total attention from the final position onto all context label positions.
std::vector<double> tla(const net::AttentionTrace& trace, int layer, const datagen::Episode& episode);

struct HeadMetrics {
  double ph1 = 0.0;
  double ph2 = 0.0;
  double ind = 0.0;
  double tla = 0.0;
};

struct LayerAggregate {
  HeadMetrics max;
  HeadMetrics mean;
};

struct CircuitMetrics {
  int n_layers = 0;
  int n_heads = 0;
  int n_episodes = 0;
  int n_ind_defined = 0;  // episodes contributing to ind (nonempty matching set)
  std::vector<HeadMetrics> heads;  // layer * n_heads + head
  std::vector<LayerAggregate> layers;

  const HeadMetrics& at(int layer, int head) const { return heads.at(layer * n_heads + head); }
  bool ind_defined() const { return n_ind_defined > 0; }
};

// Per-episode metrics averaged over the batch; ind averages over episodes
// where it is defined.
CircuitMetrics measure(std::span<const net::AttentionTrace> traces, std::span<const datagen::Episode> episodes);

inline constexpr int kProbeEpisodes = 512;

std::vector<datagen::Episode> probe_episodes(const datagen::Task& task, int n, uint64_t seed);
std::vector<net::AttentionTrace> capture(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                                         std::span<const datagen::Episode> episodes);
// Metrics over the fixed ICL-Novel probe set.
CircuitMetrics probe(const net::ParamSet<float>& params, const net::ModelConfig& cfg, const datagen::Task& task,
                     int n = kProbeEpisodes, uint64_t seed = 0);

enum class HeadKind { PrevToken, Induction };
std::string to_string(HeadKind k);

struct HeadId {
  int layer = 0;  // 0-based
  int head = 0;   // 0-based
  HeadKind kind = HeadKind::PrevToken;
  net::HeadRef ref() const { return {layer, head}; }
};

// Previous-token head: argmax of ph1 over the first layer's heads. Induction
// head: argmax of ind over the second layer's heads. Lowest index wins ties.
std::pair<HeadId, HeadId> identify_heads(const CircuitMetrics& metrics);
std::pair<HeadId, HeadId> identify_heads(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                                         std::span<const datagen::Episode> probe_set);

std::vector<float> knockout_forward(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                                    const datagen::Episode& episode, const std::vector<HeadId>& heads);

enum class ZeroModality { M1, M2 };
ZeroModality zero_modality_from_string(const std::string& s);
// Replaces every token of one modality, query included, with zeros.
datagen::Episode modality_zero(const datagen::Episode& episode, ZeroModality which);

}  // namespace icl::circuits

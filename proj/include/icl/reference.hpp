#pragma once

#include <vector>

#include "icl/datagen.hpp"
#include "icl/net.hpp"

// Straight-loop, single-episode, double-precision decoder used to validate the
// batched kernels. Always evaluates the full sequence.
namespace icl::reference {

struct Output {
  std::vector<double> logits;
  net::AttentionTrace trace;
  std::vector<std::vector<double>> m2_rows;  // projected secondary tokens in sequence order
};

Output forward(const net::ParamSet<double>& params, const net::ModelConfig& cfg, const datagen::Episode& episode,
               const std::vector<net::HeadRef>& knockout = {});

}  // namespace icl::reference

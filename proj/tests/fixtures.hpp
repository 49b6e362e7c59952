#pragma once

#include "icl/datagen.hpp"
#include "icl/net.hpp"
#include "icl/rng.hpp"

namespace fixtures {

// Small unimodal task: T = 2N + 1 = 5.
inline icl::datagen::DataConfig tiny_unimodal(int d = 8) {
  icl::datagen::DataConfig c;
  c.seq = {2, 1, icl::datagen::Modality::Unimodal};
  c.L1 = 6;
  c.L2 = 3;
  c.m1 = {24, d, 0.1, 0.0, 0};
  c.m2 = {12, 5, 0.1, 0.0, 0};
  return c;
}

// Small multimodal task: T = 3N + 2 = 5.
inline icl::datagen::DataConfig tiny_multimodal(int d = 8) {
  auto c = tiny_unimodal(d);
  c.seq = {1, 1, icl::datagen::Modality::Multimodal};
  return c;
}

inline icl::net::ModelConfig tiny_model(const icl::datagen::DataConfig& data, icl::net::PosEncoding pe,
                                        int heads = 2) {
  icl::net::ModelConfig m;
  m.n_layers = 2;
  m.n_heads = heads;
  m.d_model = data.d_model();
  m.d_mlp = 12;
  m.pe = pe;
  m.n_labels = data.L1;
  m.max_T = data.sequence_length();
  m.zero_init_classifier = false;
  m.ape = icl::net::ApeKind::Learned;
  if (data.seq.mode == icl::datagen::Modality::Multimodal) m.m2_dim = data.m2.D;
  return m;
}

// Moves every tensor away from its structured initial value so that gains,
// the APE table and biases all carry non-trivial gradients.
template <typename T>
void jitter(icl::net::ParamSet<T>& p, uint64_t seed, double scale = 0.3) {
  icl::Rng rng(seed, 99);
  for (auto& t : p.tensors())
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] += static_cast<T>(scale * rng.normal());
}

}  // namespace fixtures

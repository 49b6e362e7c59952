#include "icl/circuits.hpp"

#include <algorithm>

#include "icl/errors.hpp"

namespace icl::circuits {

namespace {

void check_layer(const net::AttentionTrace& trace, int layer) {
  if (layer < 0 || layer >= trace.n_layers) throw IndexError("layer outside the trace");
}

std::vector<double> target_mass(const net::AttentionTrace& trace, int layer, std::span<const int> positions) {
  std::vector<double> out(trace.n_heads, 0.0);
  const int t = trace.T - 1;
  for (int h = 0; h < trace.n_heads; ++h) {
    const auto& A = trace.at(layer, h);
    for (int j : positions) out[h] += A(t, j);
  }
  return out;
}

HeadMetrics& add(HeadMetrics& a, const HeadMetrics& b) {
  a.ph1 += b.ph1;
  a.ph2 += b.ph2;
  a.ind += b.ind;
  a.tla += b.tla;
  return a;
}

}  // namespace

std::vector<double> ph_strength(const net::AttentionTrace& trace, int layer, int offset) {
  check_layer(trace, layer);
  if (offset < 1 || trace.T <= offset) throw ConfigError("ph_strength needs 1 <= offset < T");
  std::vector<double> out(trace.n_heads, 0.0);
  for (int h = 0; h < trace.n_heads; ++h) {
    const auto& A = trace.at(layer, h);
    double s = 0.0;
    for (int i = offset; i < trace.T; ++i) s += A(i, i - offset);
    out[h] = s / static_cast<double>(trace.T - offset);
  }
  return out;
}

std::vector<double> ind_strength(const net::AttentionTrace& trace, int layer, const datagen::Episode& episode) {
  check_layer(trace, layer);
  const auto P = episode.matching_label_positions();
  if (P.empty()) throw UndefinedMetric("induction strength is undefined without a matching context exemplar");
  auto out = target_mass(trace, layer, P);
  for (double& v : out) v /= static_cast<double>(P.size());
  return out;
}

std::vector<double> tla(const net::AttentionTrace& trace, int layer, const datagen::Episode& episode) {
  check_layer(trace, layer);
  return target_mass(trace, layer, episode.label_positions());
}

CircuitMetrics measure(std::span<const net::AttentionTrace> traces, std::span<const datagen::Episode> episodes) {
  if (traces.empty() || traces.size() != episodes.size())
    throw ConfigError("measure: traces and episodes must be nonempty and aligned");
  CircuitMetrics m;
  m.n_layers = traces[0].n_layers;
  m.n_heads = traces[0].n_heads;
  m.n_episodes = static_cast<int>(traces.size());
  const size_t nh = static_cast<size_t>(m.n_layers) * m.n_heads;
  m.heads.assign(nh, HeadMetrics{});
  std::vector<double> ind_sum(nh, 0.0);
  for (size_t e = 0; e < traces.size(); ++e) {
    const auto& tr = traces[e];
    const bool has_p = !episodes[e].matching_label_positions().empty();
    m.n_ind_defined += has_p;
    for (int l = 0; l < m.n_layers; ++l) {
      const auto p1 = ph_strength(tr, l, 1);
      const auto p2 = ph_strength(tr, l, 2);
      const auto tl = tla(tr, l, episodes[e]);
      std::vector<double> in;
      if (has_p) in = ind_strength(tr, l, episodes[e]);
      for (int h = 0; h < m.n_heads; ++h) {
        auto& hm = m.heads[l * m.n_heads + h];
        hm.ph1 += p1[h];
        hm.ph2 += p2[h];
        hm.tla += tl[h];
        if (has_p) ind_sum[l * m.n_heads + h] += in[h];
      }
    }
  }
  for (size_t i = 0; i < nh; ++i) {
    auto& hm = m.heads[i];
    hm.ph1 /= m.n_episodes;
    hm.ph2 /= m.n_episodes;
    hm.tla /= m.n_episodes;
    hm.ind = m.n_ind_defined > 0 ? ind_sum[i] / m.n_ind_defined : 0.0;
  }
  m.layers.resize(m.n_layers);
  for (int l = 0; l < m.n_layers; ++l) {
    auto& agg = m.layers[l];
    agg.max = m.at(l, 0);
    for (int h = 0; h < m.n_heads; ++h) {
      const auto& hm = m.at(l, h);
      add(agg.mean, hm);
      agg.max.ph1 = std::max(agg.max.ph1, hm.ph1);
      agg.max.ph2 = std::max(agg.max.ph2, hm.ph2);
      agg.max.ind = std::max(agg.max.ind, hm.ind);
      agg.max.tla = std::max(agg.max.tla, hm.tla);
    }
    agg.mean.ph1 /= m.n_heads;
    agg.mean.ph2 /= m.n_heads;
    agg.mean.ind /= m.n_heads;
    agg.mean.tla /= m.n_heads;
  }
  return m;
}

std::vector<datagen::Episode> probe_episodes(const datagen::Task& task, int n, uint64_t seed) {
  if (n < 1) throw ConfigError("probe set must be nonempty");
  return datagen::build_batch(task, datagen::EvalMode::ICLNovel, n, seed, streams::kProbe, 0);
}

std::vector<net::AttentionTrace> capture(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                                         std::span<const datagen::Episode> episodes) {
  std::vector<net::AttentionTrace> out;
  out.reserve(episodes.size());
  net::BatchPass<float> pass(params, cfg);
  constexpr size_t chunk = 128;
  for (size_t s = 0; s < episodes.size(); s += chunk) {
    pass.forward(episodes.subspan(s, std::min(chunk, episodes.size() - s)), net::ForwardOptions{true, false, {}});
    for (auto& t : pass.traces()) out.push_back(std::move(t));
  }
  return out;
}

CircuitMetrics probe(const net::ParamSet<float>& params, const net::ModelConfig& cfg, const datagen::Task& task,
                     int n, uint64_t seed) {
  const auto episodes = probe_episodes(task, n, seed);
  const auto traces = capture(params, cfg, episodes);
  return measure(traces, episodes);
}

std::string to_string(HeadKind k) { return k == HeadKind::PrevToken ? "prev_token" : "induction"; }

std::pair<HeadId, HeadId> identify_heads(const CircuitMetrics& m) {
  if (m.n_layers < 2) throw ConfigError("head identification needs at least two layers");
  HeadId prev{0, 0, HeadKind::PrevToken}, ind{1, 0, HeadKind::Induction};
  for (int h = 1; h < m.n_heads; ++h) {
    if (m.at(0, h).ph1 > m.at(0, prev.head).ph1) prev.head = h;
    if (m.at(1, h).ind > m.at(1, ind.head).ind) ind.head = h;
  }
  return {prev, ind};
}

std::pair<HeadId, HeadId> identify_heads(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                                         std::span<const datagen::Episode> probe_set) {
  if (probe_set.empty()) throw ConfigError("probe set must be nonempty");
  const auto traces = capture(params, cfg, probe_set);
  return identify_heads(measure(traces, probe_set));
}

std::vector<float> knockout_forward(const net::ParamSet<float>& params, const net::ModelConfig& cfg,
                                    const datagen::Episode& episode, const std::vector<HeadId>& heads) {
  net::ForwardOptions opts;
  for (const auto& h : heads) opts.knockout.push_back(h.ref());
  net::BatchPass<float> pass(params, cfg);
  const Mat<float>& logits = pass.forward(std::span<const datagen::Episode>(&episode, 1), opts);
  return std::vector<float>(logits.data(), logits.data() + logits.size());
}

ZeroModality zero_modality_from_string(const std::string& s) {
  if (s == "m1" || s == "M1") return ZeroModality::M1;
  if (s == "m2" || s == "M2") return ZeroModality::M2;
  throw ConfigError("unknown modality '" + s + "' (expected m1|m2)");
}

datagen::Episode modality_zero(const datagen::Episode& episode, ZeroModality which) {
  if (!episode.multimodal) throw ConfigError("modality zeroing needs a multimodal episode");
  datagen::Episode out = episode;
  if (which == ZeroModality::M2) {
    out.m2_zeroed = true;
    return out;
  }
  for (int t = 0; t < out.length(); ++t)
    if (out.roles[t] == datagen::Role::Item1 || out.roles[t] == datagen::Role::QueryItem1) out.tokens.row(t).setZero();
  return out;
}

}  // namespace icl::circuits

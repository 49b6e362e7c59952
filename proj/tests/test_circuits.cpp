#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "icl/circuits.hpp"
#include "icl/errors.hpp"
#include "icl/evalsuite.hpp"

using namespace icl;

namespace {

net::AttentionTrace uniform_trace(int layers, int heads, int T) {
  net::AttentionTrace tr;
  tr.n_layers = layers;
  tr.n_heads = heads;
  tr.T = T;
  for (int a = 0; a < layers * heads; ++a) {
    Mat<double> A = Mat<double>::Zero(T, T);
    for (int i = 0; i < T; ++i)
      for (int j = 0; j <= i; ++j) A(i, j) = 1.0 / (i + 1);
    tr.attn.push_back(A);
  }
  return tr;
}

net::AttentionTrace shifted_trace(int T, int offset) {
  auto tr = uniform_trace(1, 1, T);
  auto& A = tr.at(0, 0);
  A.setZero();
  for (int i = 0; i < T; ++i) A(i, std::max(0, i - offset)) = 1.0;
  return tr;
}

datagen::Episode unimodal_episode(int B, uint64_t seed = 1) {
  datagen::DataConfig d;
  d.seq = {8, B, datagen::Modality::Unimodal};
  d.m1.K = 256;
  datagen::Task task(d, seed);
  Rng rng(seed, 0);
  return datagen::build_episode(task, datagen::EvalMode::ICLNovel, rng);
}

double harmonic(int n) {
  double h = 0;
  for (int k = 1; k <= n; ++k) h += 1.0 / k;
  return h;
}

// Random row-stochastic causal trace.
net::AttentionTrace random_trace(int layers, int heads, int T, uint64_t seed) {
  auto tr = uniform_trace(layers, heads, T);
  Rng rng(seed, 0);
  for (auto& A : tr.attn)
    for (int i = 0; i < T; ++i) {
      double s = 0;
      for (int j = 0; j <= i; ++j) s += (A(i, j) = rng.uniform() + 1e-3);
      for (int j = 0; j <= i; ++j) A(i, j) /= s;
    }
  return tr;
}

}  // namespace

TEST_CASE("uniform causal attention closed forms") {
  const auto tr = uniform_trace(2, 1, 17);
  const auto ep = unimodal_episode(4);
  CHECK(std::abs(circuits::ph_strength(tr, 0, 1)[0] - (harmonic(17) - 1.0) / 16.0) < 1e-9);
  CHECK(std::abs(circuits::ph_strength(tr, 0, 2)[0] - (harmonic(17) - 1.5) / 15.0) < 1e-9);
  CHECK(std::abs(circuits::ind_strength(tr, 1, ep)[0] - 1.0 / 17.0) < 1e-9);
  CHECK(std::abs(circuits::tla(tr, 1, ep)[0] - 8.0 / 17.0) < 1e-9);
}

TEST_CASE("point-mass heads") {
  const auto prev = shifted_trace(17, 1);
  CHECK(circuits::ph_strength(prev, 0, 1)[0] == doctest::Approx(1.0));
  CHECK(circuits::ph_strength(prev, 0, 2)[0] == 0.0);

  auto ep = unimodal_episode(1);
  auto tr = uniform_trace(2, 1, 17);
  auto& A = tr.at(1, 0);
  A.row(16).setZero();
  const auto P = ep.matching_label_positions();
  REQUIRE(P.size() == 1);
  A(16, P[0]) = 1.0;
  CHECK(circuits::ind_strength(tr, 1, ep)[0] == 1.0);
  CHECK(circuits::tla(tr, 1, ep)[0] == 1.0);
}

TEST_CASE("matching set sizes follow burstiness") {
  CHECK(unimodal_episode(4).matching_label_positions().size() == 4);
  CHECK(unimodal_episode(2).matching_label_positions().size() == 2);
}

TEST_CASE("induction strength is undefined without a matching exemplar") {
  datagen::DataConfig d;
  d.seq = {8, 4, datagen::Modality::Unimodal};
  d.m1.K = 256;
  datagen::Task task(d, 2);
  Rng rng(2, 0);
  const auto ep = datagen::build_episode(task, datagen::EvalMode::IWL, rng);
  const auto tr = uniform_trace(2, 1, 17);
  CHECK_THROWS_AS(circuits::ind_strength(tr, 1, ep), UndefinedMetric);
  const auto m = circuits::measure(std::vector<net::AttentionTrace>{tr}, std::vector<datagen::Episode>{ep});
  CHECK_FALSE(m.ind_defined());
}

TEST_CASE("metrics stay in [0,1] and TLA bounds the matching-label mass") {
  for (uint64_t s = 0; s < 20; ++s) {
    const auto ep = unimodal_episode(s % 2 ? 2 : 4, s + 1);
    const auto tr = random_trace(2, 3, 17, s);
    for (int l = 0; l < 2; ++l) {
      const auto p1 = circuits::ph_strength(tr, l, 1);
      const auto in = circuits::ind_strength(tr, l, ep);
      const auto tl = circuits::tla(tr, l, ep);
      const double np = static_cast<double>(ep.matching_label_positions().size());
      for (int h = 0; h < 3; ++h) {
        for (double v : {p1[h], in[h], tl[h]}) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0 + 1e-12);
        }
        // The matching labels are a subset of all labels.
        CHECK(tl[h] + 1e-12 >= in[h] * np);
      }
    }
  }
}

TEST_CASE("batch metrics are the mean of per-episode metrics, aggregates are consistent") {
  std::vector<net::AttentionTrace> trs;
  std::vector<datagen::Episode> eps;
  for (uint64_t s = 0; s < 5; ++s) {
    trs.push_back(random_trace(2, 3, 17, 100 + s));
    eps.push_back(unimodal_episode(4, s + 7));
  }
  const auto m = circuits::measure(trs, eps);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 3; ++h) {
      double p = 0, in = 0;
      for (size_t e = 0; e < 5; ++e) {
        p += circuits::ph_strength(trs[e], l, 1)[h] / 5;
        in += circuits::ind_strength(trs[e], l, eps[e])[h] / 5;
      }
      CHECK(m.at(l, h).ph1 == doctest::Approx(p).epsilon(1e-12));
      CHECK(m.at(l, h).ind == doctest::Approx(in).epsilon(1e-12));
    }
  for (int l = 0; l < 2; ++l) {
    double mx = 0, mean = 0;
    for (int h = 0; h < 3; ++h) {
      mx = std::max(mx, m.at(l, h).tla);
      mean += m.at(l, h).tla / 3;
    }
    CHECK(m.layers[l].max.tla == mx);
    CHECK(m.layers[l].mean.tla == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("head identification on planted traces") {
  std::vector<net::AttentionTrace> trs;
  std::vector<datagen::Episode> eps;
  for (uint64_t s = 0; s < 3; ++s) {
    auto tr = uniform_trace(2, 4, 17);
    auto& A = tr.at(0, 2);
    A.setZero();
    A(0, 0) = 1.0;
    for (int i = 1; i < 17; ++i) A(i, i - 1) = 1.0;
    auto ep = unimodal_episode(4, s + 3);
    auto& I = tr.at(1, 3);
    I.row(16).setZero();
    for (int j : ep.matching_label_positions()) I(16, j) = 0.25;
    trs.push_back(tr);
    eps.push_back(ep);
  }
  const auto [prev, ind] = circuits::identify_heads(circuits::measure(trs, eps));
  CHECK(prev.layer == 0);
  CHECK(prev.head == 2);
  CHECK(ind.layer == 1);
  CHECK(ind.head == 3);
  // Ties go to the lowest index.
  const auto flat = uniform_trace(2, 4, 17);
  const auto [p2, i2] = circuits::identify_heads(
      circuits::measure(std::vector<net::AttentionTrace>{flat}, std::vector<datagen::Episode>{eps[0]}));
  CHECK(p2.head == 0);
  CHECK(i2.head == 0);
}

TEST_CASE("single-head model identifies heads (1,1) and (2,1)") {
  auto data = fixtures::tiny_unimodal(8);
  auto m = fixtures::tiny_model(data, net::PosEncoding::APE, 1);
  datagen::Task task(data, 1);
  const auto p = net::init_params(m, 1);
  const auto probe = circuits::probe_episodes(task, 16, 1);
  const auto [prev, ind] = circuits::identify_heads(p, m, probe);
  CHECK(prev.layer == 0);
  CHECK(prev.head == 0);
  CHECK(ind.layer == 1);
  CHECK(ind.head == 0);
}

TEST_CASE("empty knockout is the identity, invalid heads are rejected") {
  auto data = fixtures::tiny_multimodal(8);
  auto m = fixtures::tiny_model(data, net::PosEncoding::Hybrid, 2);
  datagen::Task task(data, 1);
  auto p = net::init_params(m, 1);
  fixtures::jitter(p, 1);
  Rng rng(1, 0);
  const auto ep = datagen::build_episode(task, datagen::EvalMode::Train, rng);
  const auto plain = net::forward(p, m, ep, false).logits;
  const auto ko = circuits::knockout_forward(p, m, ep, {});
  CHECK(std::memcmp(plain.data(), ko.data(), sizeof(float) * plain.size()) == 0);
  CHECK_THROWS_AS(circuits::knockout_forward(p, m, ep, {{2, 0, circuits::HeadKind::Induction}}), ConfigError);
  CHECK_THROWS_AS(circuits::knockout_forward(p, m, ep, {{0, 2, circuits::HeadKind::PrevToken}}), ConfigError);
  const auto ko2 = circuits::knockout_forward(p, m, ep, {{1, 1, circuits::HeadKind::Induction}});
  CHECK(ko2 != plain);
}

TEST_CASE("modality zeroing") {
  auto data = fixtures::tiny_multimodal(8);
  data.seq = {4, 2, datagen::Modality::Multimodal};
  datagen::Task task(data, 3);
  Rng rng(3, 0);
  const auto ep = datagen::build_episode(task, datagen::EvalMode::ICLNovel, rng);
  const auto z1 = circuits::modality_zero(ep, circuits::ZeroModality::M1);
  for (int t = 0; t < ep.length(); ++t) {
    const bool m1 = ep.roles[t] == datagen::Role::Item1 || ep.roles[t] == datagen::Role::QueryItem1;
    if (m1) CHECK(z1.tokens.row(t).cwiseAbs().maxCoeff() == 0.0f);
    else CHECK(z1.tokens.row(t) == ep.tokens.row(t));
  }
  CHECK(z1.label_ids == ep.label_ids);
  CHECK(z1.target_label == ep.target_label);

  const auto z2 = circuits::modality_zero(ep, circuits::ZeroModality::M2);
  CHECK(z2.m2_zeroed);
  auto m = fixtures::tiny_model(data, net::PosEncoding::APE, 1);
  m.pe = net::PosEncoding::RoPE;
  auto p = net::init_params(m, 1);
  fixtures::jitter(p, 1);
  net::BatchPass<float> pass(p, m);
  pass.forward(std::span<const datagen::Episode>(&z2, 1), net::ForwardOptions{true, false, {}});
  // With RoPE and no APE the zeroed secondary rows enter the decoder as exact zeros,
  // so the first layer's normalised input there is zero as well.
  CHECK(pass.projected_m2().rows() == ep.m2_items.rows());

  datagen::DataConfig uni = fixtures::tiny_unimodal(8);
  datagen::Task t1(uni, 1);
  const auto u = datagen::build_episode(t1, datagen::EvalMode::Train, rng);
  CHECK_THROWS_AS(circuits::modality_zero(u, circuits::ZeroModality::M2), ConfigError);
  CHECK_THROWS_AS(circuits::zero_modality_from_string("m3"), ConfigError);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  const float a[] = {0.f, 2.f, 2.f, 1.f};
  CHECK(evalsuite::argmax(a, 4) == 1);
  const float z[] = {0.f, 0.f, 0.f};
  CHECK(evalsuite::argmax(z, 3) == 0);
}

TEST_CASE("evaluation: training mode rejected, determinism, CLA bounds") {
  auto data = fixtures::tiny_unimodal(8);
  data.seq = {4, 2, datagen::Modality::Unimodal};
  auto m = fixtures::tiny_model(data, net::PosEncoding::APE, 1);
  datagen::Task task(data, 1);
  auto p = net::init_params(m, 1);
  fixtures::jitter(p, 4);
  CHECK_THROWS_AS(evalsuite::evaluate(p, m, task, datagen::EvalMode::Train, 10, 1), ConfigError);
  CHECK_THROWS_AS(evalsuite::evaluate(p, m, task, datagen::EvalMode::ICLNovel, 0, 1), ConfigError);
  const auto a = evalsuite::evaluate(p, m, task, datagen::EvalMode::ICLNovel, 300, 9);
  const auto b = evalsuite::evaluate(p, m, task, datagen::EvalMode::ICLNovel, 300, 9);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.cla >= a.accuracy);
  const auto s = evalsuite::evaluate_suite(p, m, task, 200, 3);
  CHECK(s.icl == doctest::Approx(0.5 * (s.novel.accuracy + s.swap.accuracy)));
}

TEST_CASE("untrained zero-classifier model is at chance") {
  datagen::DataConfig d;
  d.seq = {8, 4, datagen::Modality::Unimodal};
  d.m1.K = 1024;
  net::ModelConfig m;
  m.max_T = 17;
  datagen::Task task(d, 5);
  auto p = net::init_params(m, 5);
  // Break the all-zero tie with a small random classifier.
  Rng rng(5, 1);
  for (Eigen::Index i = 0; i < p[net::kClassifier].size(); ++i)
    p[net::kClassifier].data()[i] = static_cast<float>(0.01 * rng.normal());
  const int n = 10000;
  const auto r = evalsuite::evaluate(p, m, task, datagen::EvalMode::IWL, n, 5);
  const double L = 32.0;
  CHECK(std::abs(r.accuracy - 1.0 / L) < 3.0 * std::sqrt((1.0 / L) * (1.0 - 1.0 / L) / n));
}

#include <doctest.h>
#include <omp.h>

#include <cmath>

#include "fixtures.hpp"
#include "icl/errors.hpp"
#include "icl/reference.hpp"

using namespace icl;
using net::PosEncoding;

namespace {

struct Setup {
  datagen::DataConfig data;
  net::ModelConfig model;
  std::vector<datagen::Episode> batch;
  net::ParamSet<double> params;
};

Setup make(bool multimodal, PosEncoding pe, int heads, bool encoder = false, int d = 8) {
  Setup s;
  s.data = multimodal ? fixtures::tiny_multimodal(d) : fixtures::tiny_unimodal(d);
  if (multimodal) s.data.seq = {2, 1, datagen::Modality::Multimodal};
  else s.data.seq = {4, 2, datagen::Modality::Unimodal};
  s.model = fixtures::tiny_model(s.data, pe, heads);
  if (encoder) {
    s.model.encoder = true;
    s.model.encoder_layers = 2;
    s.model.encoder_width = 6;
  }
  datagen::Task task(s.data, 4);
  s.batch = datagen::build_batch(task, datagen::EvalMode::Train, 5, 4, streams::kTrainData, 0);
  s.params = net::init_params(s.model, 8).cast<double>();
  fixtures::jitter(s.params, 8);
  return s;
}

void compare(const Setup& s, const net::ForwardOptions& opts = {}) {
  net::BatchPass<double> pass(s.params, s.model);
  auto opts_capture = opts;
  opts_capture.capture = true;
  const Mat<double> logits = pass.forward(s.batch, opts_capture);
  const auto traces = pass.traces();
  for (size_t e = 0; e < s.batch.size(); ++e) {
    const auto ref = reference::forward(s.params, s.model, s.batch[e], opts.knockout);
    for (int j = 0; j < s.model.n_labels; ++j) CHECK(logits(e, j) == doctest::Approx(ref.logits[j]).epsilon(1e-10));
    for (size_t a = 0; a < ref.trace.attn.size(); ++a)
      CHECK((traces[e].attn[a] - ref.trace.attn[a]).cwiseAbs().maxCoeff() < 1e-12);
  }
  // The query-row-only path must agree with the full-sequence path.
  net::BatchPass<double> fast(s.params, s.model);
  const Mat<double>& lf = fast.forward(s.batch, opts);
  CHECK((lf - logits).cwiseAbs().maxCoeff() < 1e-12);
}

}  // namespace

TEST_CASE("batched forward matches the reference decoder") {
  for (PosEncoding pe : {PosEncoding::APE, PosEncoding::RoPE, PosEncoding::ALiBi, PosEncoding::Hybrid})
    for (int heads : {1, 2}) {
      CAPTURE(net::to_string(pe));
      CAPTURE(heads);
      compare(make(false, pe, heads));
      compare(make(true, pe, heads));
    }
}

TEST_CASE("batched forward matches the reference with an encoder, zeroing and knockout") {
  auto s = make(true, PosEncoding::RoPE, 2, true);
  compare(s);
  compare(s, net::ForwardOptions{false, false, {{0, 1}}});
  compare(s, net::ForwardOptions{false, false, {{1, 0}, {0, 0}}});
  for (auto& e : s.batch) e.m2_zeroed = true;
  compare(s);
}

TEST_CASE("float kernels track the double reference") {
  auto s = make(true, PosEncoding::Hybrid, 2);
  const auto pf = s.params.cast<float>();
  net::BatchPass<float> pass(pf, s.model);
  const Mat<float> lf = pass.forward(s.batch);
  for (size_t e = 0; e < s.batch.size(); ++e) {
    const auto ref = reference::forward(s.params, s.model, s.batch[e]);
    for (int j = 0; j < s.model.n_labels; ++j) CHECK(std::abs(lf(e, j) - ref.logits[j]) < 1e-4);
  }
}

TEST_CASE("forward and backward are bitwise identical across thread counts") {
  auto s = make(true, PosEncoding::RoPE, 2, true, 16);
  datagen::Task task(s.data, 4);
  s.batch = datagen::build_batch(task, datagen::EvalMode::Train, 37, 4, streams::kTrainData, 0);
  const auto pf = s.params.cast<float>();
  std::vector<char> all(pf.size(), 1);
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    net::BatchPass<float> pass(pf, s.model);
    Mat<float> lg = pass.forward(s.batch);
    auto g = pf.zeros_like();
    pass.backward(Mat<float>::Ones(lg.rows(), lg.cols()), g, all);
    return std::make_pair(lg, g);
  };
  const auto a = run(1);
  const auto b = run(4);
  omp_set_num_threads(1);
  CHECK(std::memcmp(a.first.data(), b.first.data(), sizeof(float) * a.first.size()) == 0);
  CHECK(a.second.bitwise_equal(b.second));
}

TEST_CASE("knocked-out heads have exactly zero attention") {
  auto s = make(false, PosEncoding::APE, 2);
  net::BatchPass<double> pass(s.params, s.model);
  pass.forward(s.batch, net::ForwardOptions{true, false, {{1, 1}}});
  for (const auto& tr : pass.traces()) {
    CHECK(tr.at(1, 1).cwiseAbs().maxCoeff() == 0.0);
    CHECK(tr.at(1, 0).sum() == doctest::Approx(tr.T));
  }
}

TEST_CASE("attention rows are causal distributions") {
  auto s = make(true, PosEncoding::ALiBi, 2);
  net::BatchPass<double> pass(s.params, s.model);
  pass.forward(s.batch, net::ForwardOptions{true, false, {}});
  for (const auto& tr : pass.traces())
    for (const auto& A : tr.attn)
      for (int i = 0; i < tr.T; ++i) {
        CHECK(A.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
        for (int j = i + 1; j < tr.T; ++j) CHECK(A(i, j) == 0.0);
        for (int j = 0; j <= i; ++j) CHECK(A(i, j) >= 0.0);
      }
}

TEST_CASE("rmsnorm of a constant vector") {
  Eigen::RowVectorXd x = Eigen::RowVectorXd::Constant(4, 3.0);
  Eigen::RowVectorXd g(4);
  g << 1, 2, 3, 4;
  const auto y = net::rmsnorm(x, g);
  const double r = 3.0 / std::sqrt(9.0 + 1e-6);
  for (int i = 0; i < 4; ++i) CHECK(y(i) == doctest::Approx(g(i) * r).epsilon(1e-15));
}

TEST_CASE("silu values") {
  CHECK(net::silu(0.0) == 0.0);
  CHECK(net::silu(1.0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(net::silu(-40.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("ALiBi slopes are geometric") {
  CHECK(net::alibi_slope(1, 1) == doctest::Approx(1.0 / 256.0));
  CHECK(net::alibi_slope(1, 8) == doctest::Approx(0.5));
  CHECK(net::alibi_slope(8, 8) == doctest::Approx(1.0 / 256.0));
  for (int h = 1; h < 4; ++h)
    CHECK(net::alibi_slope(h + 1, 4) / net::alibi_slope(h, 4) == doctest::Approx(std::pow(2.0, -2.0)));
}

TEST_CASE("ALiBi bias is -slope times distance") {
  Mat<double> q = Mat<double>::Ones(3, 2), k = Mat<double>::Ones(3, 2);
  std::vector<int> pos{0, 1, 2};
  auto ph = net::apply_position(PosEncoding::ALiBi, q, k, pos, 1, 2, 1e4, 3);
  REQUIRE(ph.bias);
  CHECK((*ph.bias)(2, 0) == doctest::Approx(-2.0 * net::alibi_slope(2, 2)));
  CHECK((*ph.bias)(1, 1) == 0.0);
}

TEST_CASE("RoPE makes scores depend only on relative position") {
  Rng rng(3, 0);
  Mat<double> q(1, 8), k(1, 8);
  for (int i = 0; i < 8; ++i) {
    q(0, i) = rng.normal();
    k(0, i) = rng.normal();
  }
  auto score = [&](int pq, int pk) {
    Mat<double> qq(2, 8), kk(2, 8);
    qq << q, q;
    kk << k, k;
    std::vector<int> pos{pq, pk};
    auto ph = net::apply_position(PosEncoding::RoPE, qq, kk, pos, 0, 1, 1e4, 32);
    return ph.q.row(0).dot(ph.k.row(1));
  };
  CHECK(score(5, 2) == doctest::Approx(score(13, 10)).epsilon(1e-12));
  CHECK(score(0, 0) == doctest::Approx(q.row(0).dot(k.row(0))).epsilon(1e-12));
  // Rotation preserves norms.
  std::vector<int> one{7};
  auto ph = net::apply_position(PosEncoding::RoPE, q, k, one, 0, 1, 1e4, 32);
  CHECK(ph.q.norm() == doctest::Approx(q.norm()).epsilon(1e-12));
  CHECK(net::rope_angle(3, 1, 8, 1e4) == doctest::Approx(3.0 * std::pow(1e4, -0.25)));
}

TEST_CASE("positions beyond max_T are rejected") {
  Mat<double> q = Mat<double>::Ones(1, 2);
  std::vector<int> pos{4};
  CHECK_THROWS_AS(net::apply_position(PosEncoding::RoPE, q, q, pos, 0, 1, 1e4, 4), IndexError);
  auto s = make(false, PosEncoding::APE, 1);
  s.model.max_T = s.batch[0].length() - 1;
  CHECK_THROWS_AS(net::BatchPass<double>(s.params, s.model).forward(s.batch), IndexError);
}

TEST_CASE("model config validation") {
  net::ModelConfig m;
  m.n_heads = 3;
  CHECK_THROWS_AS(net::validate(m), ConfigError);
  m = {};
  m.pe = PosEncoding::RoPE;
  m.d_model = 6;
  m.n_heads = 2;
  CHECK_THROWS_AS(net::validate(m), ConfigError);
  CHECK_THROWS_AS(net::pos_encoding_from_string("sinusoid"), ConfigError);
}

TEST_CASE("initialisation: zero classifier and APE, unit gains") {
  net::ModelConfig m;
  m.pe = PosEncoding::Hybrid;
  m.ape = net::ApeKind::Learned;
  auto p = net::init_params(m, 1);
  CHECK(p[net::kClassifier].cwiseAbs().maxCoeff() == 0.0f);
  CHECK(p[net::kApe].cwiseAbs().maxCoeff() == 0.0f);
  CHECK(p["layers.0.norm1"].minCoeff() == 1.0f);
  CHECK(net::init_params(m, 1).bitwise_equal(p));
  CHECK_FALSE(net::init_params(m, 2).bitwise_equal(p));
}

TEST_CASE("sinusoidal APE is a fixed unit-norm buffer") {
  net::ModelConfig m;
  m.pe = PosEncoding::APE;
  m.ape = net::ApeKind::Sinusoidal;
  auto p = net::init_params(m, 1);
  CHECK_FALSE(p.contains(net::kApe));
  REQUIRE(p.contains(net::kApeFixed));
  const auto& A = p[net::kApeFixed];
  for (int t = 0; t < m.max_T; ++t) CHECK(A.row(t).norm() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(A(0, 0) == 0.0f);
  CHECK(A(3, 0) == doctest::Approx(std::sqrt(2.0 / 64) * std::sin(3.0)).epsilon(1e-6));
  CHECK(net::is_buffer_tensor(net::kApeFixed));
  CHECK_FALSE(net::is_decoder_tensor(net::kApeFixed));
  CHECK(net::ape_kind_from_string("learned") == net::ApeKind::Learned);
  CHECK_THROWS_AS(net::ape_kind_from_string("rotary"), ConfigError);

  for (PosEncoding pe : {PosEncoding::APE, PosEncoding::Hybrid}) {
    auto s = make(false, pe, 2);
    s.model.ape = net::ApeKind::Sinusoidal;
    s.params = net::init_params(s.model, 8).cast<double>();
    fixtures::jitter(s.params, 8);
    compare(s);
  }
}

TEST_CASE("rmsnorm of [3, 4] with unit gain") {
  Eigen::RowVectorXd x(2), g(2);
  x << 3, 4;
  g << 1, 1;
  const auto y = net::rmsnorm(x, g);
  CHECK(y(0) == doctest::Approx(0.8485).epsilon(1e-4));
  CHECK(y(1) == doctest::Approx(1.1314).epsilon(1e-4));
  CHECK(y(0) == doctest::Approx(3.0 / std::sqrt(12.5 + 1e-6)).epsilon(1e-15));
}

TEST_CASE("hybrid with an all-zero APE table equals RoPE exactly") {
  auto s = make(false, PosEncoding::Hybrid, 2);
  s.params[net::kApe].setZero();
  auto rope_model = s.model;
  rope_model.pe = PosEncoding::RoPE;
  auto rope = net::init_params(rope_model, 1).cast<double>();
  for (auto& t : rope.tensors()) t.value = s.params[t.name];
  net::BatchPass<double> a(s.params, s.model), b(rope, rope_model);
  CHECK(a.forward(s.batch, {}) == b.forward(s.batch, {}));
}

TEST_CASE("single-class contexts: swapping exemplar bundles keeps the RoPE/ALiBi argmax") {
  datagen::DataConfig data = fixtures::tiny_unimodal(8);
  data.seq = {4, 4, datagen::Modality::Unimodal};
  data.m1.epsilon = 0.01;  // near-duplicate bundles: only their positions differ materially
  datagen::Task task(data, 2);
  const auto batch = datagen::build_batch(task, datagen::EvalMode::Train, 400, 2, streams::kTrainData, 0);
  std::vector<datagen::Episode> swapped = batch;
  Rng rng(2, 5);
  for (auto& ep : swapped) {
    const int i = static_cast<int>(rng.index(4));
    const int j = (i + 1 + static_cast<int>(rng.index(3))) % 4;
    for (int k = 0; k < 2; ++k) ep.tokens.row(2 * i + k).swap(ep.tokens.row(2 * j + k));
    std::swap(ep.class_ids[i], ep.class_ids[j]);
    std::swap(ep.label_ids[i], ep.label_ids[j]);
  }
  for (auto pe : {PosEncoding::APE, PosEncoding::RoPE, PosEncoding::ALiBi}) {
    CAPTURE(net::to_string(pe));
    auto m = fixtures::tiny_model(data, pe, 2);
    auto p = net::init_params(m, 4);
    fixtures::jitter(p, 4);
    net::BatchPass<float> a(p, m), b(p, m);
    const Mat<float> la = a.forward(batch, {});
    const Mat<float> lb = b.forward(swapped, {});
    int same = 0;
    for (Eigen::Index e = 0; e < la.rows(); ++e) {
      Eigen::Index ia, ib;
      la.row(e).maxCoeff(&ia);
      lb.row(e).maxCoeff(&ib);
      same += ia == ib;
    }
    if (pe == PosEncoding::APE)
      CHECK((la - lb).cwiseAbs().maxCoeff() > 1e-4f);
    else
      CHECK(same >= 0.99 * static_cast<double>(la.rows()));
  }
}

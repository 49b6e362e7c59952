#include "icl/reference.hpp"

#include <algorithm>
#include <cmath>

#include "icl/errors.hpp"

namespace icl::reference {

namespace {

using Rows = std::vector<std::vector<double>>;

Rows to_rows(const Mat<double>& m) {
  Rows r(m.rows(), std::vector<double>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
  return r;
}

std::vector<double> matvec(const std::vector<double>& x, const Mat<double>& w) {
  std::vector<double> y(w.cols(), 0.0);
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < w.rows(); ++i) s += x[i] * w(i, j);
    y[j] = s;
  }
  return y;
}

std::vector<double> rms(const std::vector<double>& x, const Mat<double>& gain) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double r = 1.0 / std::sqrt(ms + net::kRmsEps);
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] * gain(0, i) * r;
  return y;
}

void add_row(std::vector<double>& x, const Mat<double>& b) {
  for (size_t i = 0; i < x.size(); ++i) x[i] += b(0, i);
}

std::vector<double> silu_vec(std::vector<double> x) {
  for (double& v : x) v = net::silu(v);
  return x;
}

}  // namespace

Output forward(const net::ParamSet<double>& p, const net::ModelConfig& cfg, const datagen::Episode& ep,
               const std::vector<net::HeadRef>& knockout) {
  net::validate(cfg);
  const int T = ep.length(), d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head();
  if (T > cfg.max_T) throw IndexError("sequence longer than max_T");
  Rows x = to_rows(ep.tokens.cast<double>());
  Output out;

  if (ep.multimodal) {
    const auto pos = ep.m2_positions();
    for (size_t i = 0; i < pos.size(); ++i) {
      std::vector<double> f(ep.m2_items.cols());
      for (Eigen::Index j = 0; j < ep.m2_items.cols(); ++j) f[j] = ep.m2_items(i, j);
      if (cfg.encoder)
        for (int l = 0; l < cfg.encoder_layers; ++l) {
          f = matvec(f, p[net::encoder_tensor(l, "w")]);
          add_row(f, p[net::encoder_tensor(l, "b")]);
          f = silu_vec(f);
        }
      auto hdn = matvec(f, p["proj.w1"]);
      add_row(hdn, p["proj.b1"]);
      auto y = matvec(silu_vec(hdn), p["proj.w2"]);
      add_row(y, p["proj.b2"]);
      out.m2_rows.push_back(y);
      if (!ep.m2_zeroed) x[pos[i]] = y;
    }
  }
  if (net::uses_ape(cfg.pe))
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < d; ++j) x[t][j] += p[net::ape_tensor(cfg)](t, j);

  std::vector<int> positions(T);
  for (int t = 0; t < T; ++t) positions[t] = t;
  out.trace.n_layers = cfg.n_layers;
  out.trace.n_heads = H;
  out.trace.T = T;
  out.trace.attn.assign(static_cast<size_t>(cfg.n_layers) * H, Mat<double>::Zero(T, T));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto lt = [&](const char* w) -> const Mat<double>& { return p[net::layer_tensor(l, w)]; };
    Mat<double> q(T, d), k(T, d), v(T, d);
    for (int t = 0; t < T; ++t) {
      const auto h = rms(x[t], lt("norm1"));
      const auto qt = matvec(h, lt("wq")), kt = matvec(h, lt("wk")), vt = matvec(h, lt("wv"));
      for (int j = 0; j < d; ++j) {
        q(t, j) = qt[j];
        k(t, j) = kt[j];
        v(t, j) = vt[j];
      }
    }
    Rows o(T, std::vector<double>(d, 0.0));
    for (int h = 0; h < H; ++h) {
      const bool off = std::find(knockout.begin(), knockout.end(), net::HeadRef{l, h}) != knockout.end();
      if (off) continue;
      auto ph = net::apply_position(cfg.pe, q.middleCols(h * dh, dh), k.middleCols(h * dh, dh), positions, h, H,
                                    cfg.rope_base, cfg.max_T);
      Mat<double>& A = out.trace.at(l, h);
      for (int i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (int j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (int c = 0; c < dh; ++c) dot += ph.q(i, c) * ph.k(j, c);
          s[j] = dot / std::sqrt(static_cast<double>(dh)) + (ph.bias ? (*ph.bias)(i, j) : 0.0);
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (int j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
        for (int j = 0; j <= i; ++j) A(i, j) = std::exp(s[j] - mx) / z;
        for (int c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (int j = 0; j <= i; ++j) acc += A(i, j) * v(j, h * dh + c);
          o[i][h * dh + c] = acc;
        }
      }
    }
    for (int t = 0; t < T; ++t) {
      const auto att = matvec(o[t], lt("wo"));
      for (int j = 0; j < d; ++j) x[t][j] += att[j];
      const auto a = silu_vec(matvec(rms(x[t], lt("norm2")), lt("mlp_in")));
      const auto m = matvec(a, lt("mlp_out"));
      for (int j = 0; j < d; ++j) x[t][j] += m[j];
    }
  }
  out.logits = matvec(rms(x[T - 1], p[net::kFinalNorm]), p[net::kClassifier]);
  return out;
}

}  // namespace icl::reference

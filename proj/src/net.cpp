#include "icl/net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "icl/errors.hpp"
#include "icl/rng.hpp"

namespace icl::net {

std::string to_string(PosEncoding pe) {
  switch (pe) {
    case PosEncoding::APE: return "ape";
    case PosEncoding::RoPE: return "rope";
    case PosEncoding::ALiBi: return "alibi";
    case PosEncoding::Hybrid: return "hybrid";
  }
  return "?";
}

PosEncoding pos_encoding_from_string(const std::string& s) {
  if (s == "ape") return PosEncoding::APE;
  if (s == "rope") return PosEncoding::RoPE;
  if (s == "alibi") return PosEncoding::ALiBi;
  if (s == "hybrid") return PosEncoding::Hybrid;
  throw ConfigError("unknown positional encoding '" + s + "' (expected ape|rope|alibi|hybrid)");
}

std::string to_string(ApeKind k) { return k == ApeKind::Learned ? "learned" : "sinusoidal"; }

ApeKind ape_kind_from_string(const std::string& s) {
  if (s == "learned") return ApeKind::Learned;
  if (s == "sinusoidal") return ApeKind::Sinusoidal;
  throw ConfigError("unknown APE kind '" + s + "' (expected learned|sinusoidal)");
}

void validate(const ModelConfig& cfg) {
  if (cfg.n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
  if (cfg.n_heads < 1) throw ConfigError("model.n_heads must be >= 1");
  if (cfg.d_model < 1 || cfg.d_model % cfg.n_heads != 0)
    throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
  if (uses_rope(cfg.pe) && cfg.d_head() % 2 != 0) throw ConfigError("RoPE needs an even head width");
  if (cfg.d_mlp < 1) throw ConfigError("model.d_mlp must be >= 1");
  if (cfg.n_labels < 2) throw ConfigError("model.n_labels must be >= 2");
  if (cfg.max_T < 1) throw ConfigError("model.max_T must be >= 1");
  if (cfg.rope_base <= 0) throw ConfigError("model.rope_base must be > 0");
  if (cfg.encoder && cfg.m2_dim < 1) throw ConfigError("an encoder needs a secondary modality");
  if (cfg.encoder && (cfg.encoder_layers < 1 || cfg.encoder_width < 1))
    throw ConfigError("model.encoder_layers and model.encoder_width must be >= 1");
}

std::string layer_tensor(int layer, const char* what) {
  return "layers." + std::to_string(layer) + "." + what;
}

std::string encoder_tensor(int layer, const char* what) {
  return "enc." + std::to_string(layer) + "." + what;
}

bool is_projector_tensor(const std::string& name) { return name.rfind("proj.", 0) == 0; }
bool is_encoder_head_tensor(const std::string& name) { return name.rfind("enc.head.", 0) == 0; }
bool is_encoder_tensor(const std::string& name) {
  return name.rfind("enc.", 0) == 0 && !is_encoder_head_tensor(name);
}
bool is_buffer_tensor(const std::string& name) { return name == kApeFixed; }
bool is_decoder_tensor(const std::string& name) {
  return !is_projector_tensor(name) && name.rfind("enc.", 0) != 0 && !is_buffer_tensor(name);
}

ParamSet<float> init_params(const ModelConfig& cfg, uint64_t seed) {
  validate(cfg);
  Rng rng(seed, streams::kInit);
  ParamSet<float> p;
  auto gaussian = [&](Mat<float>& m) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(m.rows()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * sd);
  };
  const int d = cfg.d_model;
  if (uses_ape(cfg.pe)) {
    auto& ape = p.add(ape_tensor(cfg), cfg.max_T, d);
    if (cfg.ape == ApeKind::Sinusoidal) {
      const double amp = std::sqrt(2.0 / d);
      for (int pos = 0; pos < cfg.max_T; ++pos)
        for (int i = 0; 2 * i < d; ++i) {
          const double a = pos * std::pow(10000.0, -2.0 * i / d);
          ape(pos, 2 * i) = static_cast<float>(amp * std::sin(a));
          if (2 * i + 1 < d) ape(pos, 2 * i + 1) = static_cast<float>(amp * std::cos(a));
        }
    }
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    p.add(layer_tensor(l, "norm1"), 1, d, 1).setOnes();
    for (const char* w : {"wq", "wk", "wv", "wo"}) gaussian(p.add(layer_tensor(l, w), d, d));
    p.add(layer_tensor(l, "norm2"), 1, d, 1).setOnes();
    gaussian(p.add(layer_tensor(l, "mlp_in"), d, cfg.d_mlp));
    gaussian(p.add(layer_tensor(l, "mlp_out"), cfg.d_mlp, d));
  }
  p.add(kFinalNorm, 1, d, 1).setOnes();
  auto& cls = p.add(kClassifier, d, cfg.n_labels);
  if (!cfg.zero_init_classifier) gaussian(cls);

  if (cfg.m2_dim > 0) {
    gaussian(p.add("proj.w1", cfg.projector_in(), d));
    p.add("proj.b1", 1, d, 1);
    gaussian(p.add("proj.w2", d, d));
    p.add("proj.b2", 1, d, 1);
  }
  if (cfg.encoder) {
    int in = cfg.m2_dim;
    for (int l = 0; l < cfg.encoder_layers; ++l) {
      gaussian(p.add(encoder_tensor(l, "w"), in, cfg.encoder_width));
      p.add(encoder_tensor(l, "b"), 1, cfg.encoder_width, 1);
      in = cfg.encoder_width;
    }
    if (cfg.encoder_classes > 0) {
      gaussian(p.add("enc.head.w", cfg.encoder_width, cfg.encoder_classes));
      p.add("enc.head.b", 1, cfg.encoder_classes, 1);
    }
  }
  return p;
}

Eigen::RowVectorXd rmsnorm(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& gain) {
  if (x.size() != gain.size()) throw ConfigError("rmsnorm: dimension mismatch");
  const double ms = x.squaredNorm() / static_cast<double>(x.size());
  return x.cwiseProduct(gain) / std::sqrt(ms + kRmsEps);
}

double alibi_slope(int head, int n_heads) {
  return std::pow(2.0, -8.0 * static_cast<double>(head) / static_cast<double>(n_heads));
}

double rope_angle(int pos, int pair, int d_head, double base) {
  return static_cast<double>(pos) * std::pow(base, -2.0 * pair / static_cast<double>(d_head));
}

PositionedHead apply_position(PosEncoding pe, const Mat<double>& q, const Mat<double>& k,
                              std::span<const int> positions, int head, int n_heads, double rope_base,
                              int max_T) {
  if (q.rows() != static_cast<Eigen::Index>(positions.size()) || k.rows() != q.rows() || k.cols() != q.cols())
    throw ConfigError("apply_position: q, k and positions must agree");
  for (int p : positions)
    if (p < 0 || p >= max_T)
      throw IndexError("position " + std::to_string(p) + " outside [0, " + std::to_string(max_T) + ")");
  if (head < 0 || head >= n_heads) throw IndexError("head index out of range");
  PositionedHead out{q, k, std::nullopt};
  const int dh = static_cast<int>(q.cols());
  if (uses_rope(pe)) {
    if (dh % 2 != 0) throw ConfigError("RoPE needs an even head width");
    for (Eigen::Index r = 0; r < q.rows(); ++r) {
      for (int j = 0; j < dh / 2; ++j) {
        const double th = rope_angle(positions[r], j, dh, rope_base);
        const double c = std::cos(th), s = std::sin(th);
        for (Mat<double>* m : {&out.q, &out.k}) {
          const double x0 = (*m)(r, 2 * j), x1 = (*m)(r, 2 * j + 1);
          (*m)(r, 2 * j) = x0 * c - x1 * s;
          (*m)(r, 2 * j + 1) = x0 * s + x1 * c;
        }
      }
    }
  }
  if (pe == PosEncoding::ALiBi) {
    const double slope = alibi_slope(head + 1, n_heads);
    Mat<double> bias(q.rows(), k.rows());
    for (Eigen::Index i = 0; i < q.rows(); ++i)
      for (Eigen::Index j = 0; j < k.rows(); ++j) bias(i, j) = -slope * (positions[i] - positions[j]);
    out.bias = std::move(bias);
  }
  return out;
}

namespace {

template <typename T>
void rms_forward(const Mat<T>& x, const Mat<T>& gain, Mat<T>& y, std::vector<T>& r) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  y.resize(rows, d);
  r.resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const T ms = x.row(i).squaredNorm() / static_cast<T>(d);
    r[i] = T(1) / std::sqrt(ms + static_cast<T>(kRmsEps));
    y.row(i) = x.row(i).cwiseProduct(gain.row(0)) * r[i];
  }
}

// dx of y = rmsnorm(x) * gain; accumulates the gain gradient when dgain != nullptr.
template <typename T>
Mat<T> rms_backward(const Mat<T>& dy, const Mat<T>& x, const std::vector<T>& r, const Mat<T>& gain,
                    Mat<T>* dgain, bool need_dx) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  if (dgain) {
    for (Eigen::Index i = 0; i < rows; ++i) dgain->row(0) += dy.row(i).cwiseProduct(x.row(i)) * r[i];
  }
  Mat<T> dx;
  if (!need_dx) return dx;
  dx.resize(rows, d);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto gdy = dy.row(i).cwiseProduct(gain.row(0));
    const T dot = gdy.dot(x.row(i));
    dx.row(i) = gdy * r[i] - x.row(i) * (r[i] * r[i] * r[i] * dot / static_cast<T>(d));
  }
  return dx;
}

template <typename T>
void silu_forward(const Mat<T>& u, Mat<T>& a) {
  a = (u.array() / (T(1) + (-u.array()).exp())).matrix();
}

template <typename T>
Mat<T> silu_backward(const Mat<T>& da, const Mat<T>& u) {
  const auto s = (T(1) / (T(1) + (-u.array()).exp()));
  return (da.array() * s * (T(1) + u.array() * (T(1) - s))).matrix();
}

template <typename T>
Mat<T> gather_last(const Mat<T>& x, int n, int T_len) {
  Mat<T> out(n, x.cols());
  for (int e = 0; e < n; ++e) out.row(e) = x.row(static_cast<Eigen::Index>(e) * T_len + T_len - 1);
  return out;
}

template <typename T>
void scatter_add_last(Mat<T>& dst, const Mat<T>& src, int n, int T_len) {
  for (int e = 0; e < n; ++e) dst.row(static_cast<Eigen::Index>(e) * T_len + T_len - 1) += src.row(e);
}

template <typename T>
void add_bias(Mat<T>& m, const Mat<T>& b) {
  m.rowwise() += b.row(0);
}

template <typename T>
Mat<T>& grad_of(ParamSet<T>& grads, size_t i) {
  return grads.tensors()[i].value;
}

// Encoder stack with optional caches; returns features.
template <typename T>
Mat<T> encoder_forward(const ParamSet<T>& p, const ModelConfig& cfg, const Mat<T>& x,
                       std::vector<Mat<T>>* in_cache, std::vector<Mat<T>>* pre_cache) {
  Mat<T> e = x;
  if (in_cache) in_cache->assign(cfg.encoder_layers, Mat<T>());
  if (pre_cache) pre_cache->assign(cfg.encoder_layers, Mat<T>());
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    Mat<T> z = e * p[encoder_tensor(l, "w")];
    add_bias(z, p[encoder_tensor(l, "b")]);
    if (in_cache) (*in_cache)[l] = std::move(e);
    silu_forward(z, e);
    if (pre_cache) (*pre_cache)[l] = std::move(z);
  }
  return e;
}

// Backprop through the encoder stack. dfeat is consumed.
template <typename T>
void encoder_backward(const ParamSet<T>& p, const ModelConfig& cfg, Mat<T> dfeat, const std::vector<Mat<T>>& in,
                      const std::vector<Mat<T>>& pre, ParamSet<T>& grads, const std::vector<char>& trainable) {
  for (int l = cfg.encoder_layers - 1; l >= 0; --l) {
    const size_t wi = p.index_of(encoder_tensor(l, "w"));
    const size_t bi = p.index_of(encoder_tensor(l, "b"));
    Mat<T> dz = silu_backward(dfeat, pre[l]);
    if (trainable[wi]) grad_of(grads, wi).noalias() += in[l].transpose() * dz;
    if (trainable[bi]) grad_of(grads, bi).row(0) += dz.colwise().sum();
    if (l > 0) dfeat = dz * p.tensors()[wi].value.transpose();
  }
}

}  // namespace

template <typename T>
BatchPass<T>::BatchPass(const ParamSet<T>& params, const ModelConfig& cfg) : params_(params), cfg_(cfg) {
  validate(cfg_);
  refs_.resize(cfg_.n_layers);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    auto& r = refs_[l];
    r.norm1 = params_.index_of(layer_tensor(l, "norm1"));
    r.wq = params_.index_of(layer_tensor(l, "wq"));
    r.wk = params_.index_of(layer_tensor(l, "wk"));
    r.wv = params_.index_of(layer_tensor(l, "wv"));
    r.wo = params_.index_of(layer_tensor(l, "wo"));
    r.norm2 = params_.index_of(layer_tensor(l, "norm2"));
    r.w_in = params_.index_of(layer_tensor(l, "mlp_in"));
    r.w_out = params_.index_of(layer_tensor(l, "mlp_out"));
  }
  const int dh = cfg_.d_head();
  if (uses_rope(cfg_.pe)) {
    const int half = dh / 2;
    rope_cos_.resize(static_cast<size_t>(cfg_.max_T) * half);
    rope_sin_.resize(rope_cos_.size());
    for (int pos = 0; pos < cfg_.max_T; ++pos)
      for (int j = 0; j < half; ++j) {
        const double th = rope_angle(pos, j, dh, cfg_.rope_base);
        rope_cos_[pos * half + j] = static_cast<T>(std::cos(th));
        rope_sin_[pos * half + j] = static_cast<T>(std::sin(th));
      }
  }
  alibi_.assign(cfg_.n_heads, T(0));
  if (cfg_.pe == PosEncoding::ALiBi)
    for (int h = 0; h < cfg_.n_heads; ++h) alibi_[h] = static_cast<T>(alibi_slope(h + 1, cfg_.n_heads));
}

template <typename T>
void BatchPass<T>::rope_rows(Mat<T>& m, int nq, T sign) const {
  const int dh = cfg_.d_head(), half = dh / 2, H = cfg_.n_heads;
  const Eigen::Index rows = m.rows();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int pos = T_ - nq + static_cast<int>(r % nq);
    const T* c = rope_cos_.data() + static_cast<size_t>(pos) * half;
    const T* s = rope_sin_.data() + static_cast<size_t>(pos) * half;
    T* row = m.data() + r * m.cols();
    for (int h = 0; h < H; ++h) {
      T* x = row + h * dh;
      for (int j = 0; j < half; ++j) {
        const T x0 = x[2 * j], x1 = x[2 * j + 1], sn = sign * s[j];
        x[2 * j] = x0 * c[j] - x1 * sn;
        x[2 * j + 1] = x0 * sn + x1 * c[j];
      }
    }
  }
}

template <typename T>
void BatchPass<T>::embed(std::span<const datagen::Episode> episodes) {
  const int d = cfg_.d_model;
  Mat<T>& x0 = layers_[0].x_in;
  x0.resize(static_cast<Eigen::Index>(n_) * T_, d);
  for (int e = 0; e < n_; ++e) x0.block(static_cast<Eigen::Index>(e) * T_, 0, T_, d) = episodes[e].tokens.cast<T>();

  if (has_m2_) {
    auto& c = embed_;
    Eigen::Index m = 0;
    for (const auto& ep : episodes) m += ep.m2_items.rows();
    c.m2_in.resize(m, cfg_.m2_dim);
    c.dest_row.assign(m, -1);
    Eigen::Index row = 0;
    for (int e = 0; e < n_; ++e) {
      const auto& ep = episodes[e];
      const auto pos = ep.m2_positions();
      if (static_cast<Eigen::Index>(pos.size()) != ep.m2_items.rows())
        throw ConfigError("episode m2 rows do not match its roles");
      c.m2_in.middleRows(row, ep.m2_items.rows()) = ep.m2_items.cast<T>();
      for (size_t i = 0; i < pos.size(); ++i)
        c.dest_row[row + i] = ep.m2_zeroed ? -1 : e * T_ + pos[i];
      row += ep.m2_items.rows();
    }
    if (cfg_.encoder)
      c.features = encoder_forward(params_, cfg_, c.m2_in, &c.enc_in, &c.enc_pre);
    else
      c.features = c.m2_in;
    c.proj_pre = c.features * params_["proj.w1"];
    add_bias(c.proj_pre, params_["proj.b1"]);
    silu_forward(c.proj_pre, c.proj_hidden);
    c.projected = c.proj_hidden * params_["proj.w2"];
    add_bias(c.projected, params_["proj.b2"]);
    // Zeroed episodes keep their all-zero placeholder rows.
    for (Eigen::Index i = 0; i < m; ++i)
      if (c.dest_row[i] >= 0) x0.row(c.dest_row[i]) = c.projected.row(i);
  }

  if (uses_ape(cfg_.pe)) {
    const auto ape = params_[ape_tensor(cfg_)].topRows(T_);
    for (int e = 0; e < n_; ++e) x0.block(static_cast<Eigen::Index>(e) * T_, 0, T_, d) += ape;
  }
}

template <typename T>
const Mat<T>& BatchPass<T>::forward(std::span<const datagen::Episode> episodes, const ForwardOptions& opts) {
  if (episodes.empty()) throw ConfigError("forward: empty batch");
  n_ = static_cast<int>(episodes.size());
  T_ = episodes[0].length();
  has_m2_ = episodes[0].multimodal;
  for (const auto& ep : episodes) {
    if (ep.length() != T_ || ep.multimodal != has_m2_)
      throw ConfigError("forward: episodes in a batch must share length and modality");
    if (ep.tokens.cols() != cfg_.d_model)
      throw ConfigError("forward: token width " + std::to_string(ep.tokens.cols()) + " != d_model " +
                        std::to_string(cfg_.d_model));
  }
  if (T_ > cfg_.max_T)
    throw IndexError("sequence length " + std::to_string(T_) + " exceeds max_T " + std::to_string(cfg_.max_T));
  if (has_m2_ && cfg_.m2_dim == 0) throw ConfigError("multimodal episode but the model has no projector");
  if (has_m2_ && episodes[0].m2_items.cols() != cfg_.m2_dim)
    throw ConfigError("secondary item width does not match model.m2_dim");

  knocked_.assign(static_cast<size_t>(cfg_.n_layers) * cfg_.n_heads, 0);
  for (const auto& h : opts.knockout) {
    if (h.layer < 0 || h.layer >= cfg_.n_layers || h.head < 0 || h.head >= cfg_.n_heads)
      throw ConfigError("knockout head (" + std::to_string(h.layer + 1) + "," + std::to_string(h.head + 1) +
                        ") outside the model");
    knocked_[h.layer * cfg_.n_heads + h.head] = 1;
  }

  const bool full = opts.capture || opts.full_sequence;
  layers_.resize(cfg_.n_layers);
  embed(episodes);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const int nq = (l == cfg_.n_layers - 1 && !full) ? 1 : T_;
    Mat<T>& out = (l + 1 < cfg_.n_layers) ? layers_[l + 1].x_in : x_last_;
    layer_forward(l, nq, out);
  }
  xf_ = (x_last_.rows() == n_ && layers_.back().nq == 1) ? x_last_ : gather_last(x_last_, n_, T_);
  rms_forward(xf_, params_[kFinalNorm], hf_, rf_);
  logits_.noalias() = hf_ * params_[kClassifier];
  if (!logits_.allFinite()) throw NumericError("non-finite logits in forward pass");
  return logits_;
}

template <typename T>
void BatchPass<T>::layer_forward(int l, int nq, Mat<T>& out) {
  auto& c = layers_[l];
  const auto& r = refs_[l];
  const int d = cfg_.d_model, H = cfg_.n_heads, dh = cfg_.d_head();
  c.nq = nq;
  rms_forward(c.x_in, P(r.norm1), c.h1, c.r1);
  c.k.noalias() = c.h1 * P(r.wk);
  c.v.noalias() = c.h1 * P(r.wv);
  if (nq == T_) {
    c.q.noalias() = c.h1 * P(r.wq);
  } else {
    c.hq = gather_last(c.h1, n_, T_);
    c.q.noalias() = c.hq * P(r.wq);
  }
  if (uses_rope(cfg_.pe)) {
    rope_rows(c.q, nq, T(1));
    rope_rows(c.k, T_, T(1));
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  c.attn.assign(static_cast<size_t>(n_) * H * nq * T_, T(0));
  c.o.setZero(static_cast<Eigen::Index>(n_) * nq, d);
  const int T_len = T_;
#pragma omp parallel for schedule(static)
  for (int e = 0; e < n_; ++e) {
    for (int h = 0; h < H; ++h) {
      if (knocked_[l * H + h]) continue;  // probabilities stay zero, head output is zero
      Eigen::Map<Mat<T>> A(c.attn.data() + (static_cast<size_t>(e) * H + h) * nq * T_len, nq, T_len);
      const auto Q = c.q.block(static_cast<Eigen::Index>(e) * nq, h * dh, nq, dh);
      const auto K = c.k.block(static_cast<Eigen::Index>(e) * T_len, h * dh, T_len, dh);
      const auto V = c.v.block(static_cast<Eigen::Index>(e) * T_len, h * dh, T_len, dh);
      A.noalias() = Q * K.transpose();
      for (int i = 0; i < nq; ++i) {
        const int pos = T_len - nq + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= pos; ++j) {
          A(i, j) = A(i, j) * scale - alibi_[h] * static_cast<T>(pos - j);
          mx = std::max(mx, A(i, j));
        }
        T sum = 0;
        for (int j = 0; j <= pos; ++j) {
          A(i, j) = std::exp(A(i, j) - mx);
          sum += A(i, j);
        }
        const T inv = T(1) / sum;
        for (int j = 0; j <= pos; ++j) A(i, j) *= inv;
        for (int j = pos + 1; j < T_len; ++j) A(i, j) = T(0);
      }
      c.o.block(static_cast<Eigen::Index>(e) * nq, h * dh, nq, dh).noalias() = A * V;
    }
  }

  c.x_mid = (nq == T_) ? c.x_in : gather_last(c.x_in, n_, T_);
  c.x_mid.noalias() += c.o * P(r.wo);
  rms_forward(c.x_mid, P(r.norm2), c.h2, c.r2);
  c.u.noalias() = c.h2 * P(r.w_in);
  silu_forward(c.u, c.a);
  out = c.x_mid;
  out.noalias() += c.a * P(r.w_out);
}

template <typename T>
Mat<T> BatchPass<T>::layer_backward(int l, const Mat<T>& dout, bool need_dx, ParamSet<T>& grads,
                                    const std::vector<char>& trainable) {
  auto& c = layers_[l];
  const auto& r = refs_[l];
  const int d = cfg_.d_model, H = cfg_.n_heads, dh = cfg_.d_head(), nq = c.nq;

  // MLP sublayer
  if (trainable[r.w_out]) grad_of(grads, r.w_out).noalias() += c.a.transpose() * dout;
  Mat<T> da = dout * P(r.w_out).transpose();
  Mat<T> du = silu_backward(da, c.u);
  if (trainable[r.w_in]) grad_of(grads, r.w_in).noalias() += c.h2.transpose() * du;
  Mat<T> dh2 = du * P(r.w_in).transpose();
  Mat<T> dx_mid = dout + rms_backward(dh2, c.x_mid, c.r2, P(r.norm2),
                                      trainable[r.norm2] ? &grad_of(grads, r.norm2) : nullptr, true);

  // attention sublayer
  if (trainable[r.wo]) grad_of(grads, r.wo).noalias() += c.o.transpose() * dx_mid;
  Mat<T> d_o = dx_mid * P(r.wo).transpose();
  Mat<T> dq = Mat<T>::Zero(static_cast<Eigen::Index>(n_) * nq, d);
  Mat<T> dk = Mat<T>::Zero(static_cast<Eigen::Index>(n_) * T_, d);
  Mat<T> dv = Mat<T>::Zero(static_cast<Eigen::Index>(n_) * T_, d);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const int T_len = T_;
#pragma omp parallel for schedule(static)
  for (int e = 0; e < n_; ++e) {
    Mat<T> dA(nq, T_len);
    for (int h = 0; h < H; ++h) {
      if (knocked_[l * H + h]) continue;
      Eigen::Map<const Mat<T>> A(c.attn.data() + (static_cast<size_t>(e) * H + h) * nq * T_len, nq, T_len);
      const auto dO = d_o.block(static_cast<Eigen::Index>(e) * nq, h * dh, nq, dh);
      const auto Q = c.q.block(static_cast<Eigen::Index>(e) * nq, h * dh, nq, dh);
      const auto K = c.k.block(static_cast<Eigen::Index>(e) * T_len, h * dh, T_len, dh);
      const auto V = c.v.block(static_cast<Eigen::Index>(e) * T_len, h * dh, T_len, dh);
      dA.noalias() = dO * V.transpose();
      dv.block(static_cast<Eigen::Index>(e) * T_len, h * dh, T_len, dh).noalias() += A.transpose() * dO;
      for (int i = 0; i < nq; ++i) {
        const T dot = A.row(i).dot(dA.row(i));
        for (int j = 0; j < T_len; ++j) dA(i, j) = A(i, j) * (dA(i, j) - dot) * scale;
      }
      dq.block(static_cast<Eigen::Index>(e) * nq, h * dh, nq, dh).noalias() = dA * K;
      dk.block(static_cast<Eigen::Index>(e) * T_len, h * dh, T_len, dh).noalias() += dA.transpose() * Q;
    }
  }
  if (uses_rope(cfg_.pe)) {
    rope_rows(dq, nq, T(-1));
    rope_rows(dk, T_, T(-1));
  }
  const Mat<T>& hq = (nq == T_) ? c.h1 : c.hq;
  if (trainable[r.wq]) grad_of(grads, r.wq).noalias() += hq.transpose() * dq;
  if (trainable[r.wk]) grad_of(grads, r.wk).noalias() += c.h1.transpose() * dk;
  if (trainable[r.wv]) grad_of(grads, r.wv).noalias() += c.h1.transpose() * dv;

  if (!need_dx && !trainable[r.norm1]) return {};
  Mat<T> dh1 = dk * P(r.wk).transpose();
  dh1.noalias() += dv * P(r.wv).transpose();
  if (nq == T_)
    dh1.noalias() += dq * P(r.wq).transpose();
  else
    scatter_add_last(dh1, Mat<T>(dq * P(r.wq).transpose()), n_, T_);
  Mat<T> dx = rms_backward(dh1, c.x_in, c.r1, P(r.norm1),
                           trainable[r.norm1] ? &grad_of(grads, r.norm1) : nullptr, need_dx);
  if (!need_dx) return {};
  if (nq == T_)
    dx += dx_mid;
  else
    scatter_add_last(dx, dx_mid, n_, T_);
  return dx;
}

template <typename T>
bool BatchPass<T>::embed_needs_grad(const std::vector<char>& trainable) const {
  const auto& ts = params_.tensors();
  for (size_t i = 0; i < ts.size(); ++i) {
    if (!trainable[i]) continue;
    if (ts[i].name == kApe) return true;
    if (has_m2_ && (is_projector_tensor(ts[i].name) || is_encoder_tensor(ts[i].name))) return true;
  }
  return false;
}

template <typename T>
void BatchPass<T>::backward(const Mat<T>& dlogits, ParamSet<T>& grads, const std::vector<char>& trainable) {
  if (dlogits.rows() != n_ || dlogits.cols() != cfg_.n_labels) throw ConfigError("backward: dlogits shape");
  if (trainable.size() != params_.size() || grads.size() != params_.size())
    throw ConfigError("backward: gradient store does not match parameters");
  const size_t cls = params_.index_of(kClassifier);
  const size_t fnorm = params_.index_of(kFinalNorm);
  if (trainable[cls]) grad_of(grads, cls).noalias() += hf_.transpose() * dlogits;
  Mat<T> dhf = dlogits * P(cls).transpose();
  Mat<T> dxf = rms_backward(dhf, xf_, rf_, P(fnorm), trainable[fnorm] ? &grad_of(grads, fnorm) : nullptr, true);

  Mat<T> dout;
  if (layers_.back().nq == 1) {
    dout = std::move(dxf);
  } else {
    dout = Mat<T>::Zero(static_cast<Eigen::Index>(n_) * T_, cfg_.d_model);
    scatter_add_last(dout, dxf, n_, T_);
  }
  const bool embed_grad = embed_needs_grad(trainable);
  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const bool need_dx = l > 0 || embed_grad;
    dout = layer_backward(l, dout, need_dx, grads, trainable);
  }
  if (embed_grad) embed_backward(dout, grads, trainable);
}

template <typename T>
void BatchPass<T>::embed_backward(const Mat<T>& dx0, ParamSet<T>& grads, const std::vector<char>& trainable) {
  const int d = cfg_.d_model;
  if (uses_ape(cfg_.pe) && cfg_.ape == ApeKind::Learned) {
    const size_t ai = params_.index_of(kApe);
    if (trainable[ai]) {
      auto g = grad_of(grads, ai).topRows(T_);
      for (int e = 0; e < n_; ++e) g += dx0.block(static_cast<Eigen::Index>(e) * T_, 0, T_, d);
    }
  }
  if (!has_m2_) return;
  auto& c = embed_;
  const Eigen::Index m = c.m2_in.rows();
  Mat<T> dp = Mat<T>::Zero(m, d);
  for (Eigen::Index i = 0; i < m; ++i)
    if (c.dest_row[i] >= 0) dp.row(i) = dx0.row(c.dest_row[i]);

  const size_t w1 = params_.index_of("proj.w1"), b1 = params_.index_of("proj.b1");
  const size_t w2 = params_.index_of("proj.w2"), b2 = params_.index_of("proj.b2");
  if (trainable[w2]) grad_of(grads, w2).noalias() += c.proj_hidden.transpose() * dp;
  if (trainable[b2]) grad_of(grads, b2).row(0) += dp.colwise().sum();
  Mat<T> dz = silu_backward(Mat<T>(dp * P(w2).transpose()), c.proj_pre);
  if (trainable[w1]) grad_of(grads, w1).noalias() += c.features.transpose() * dz;
  if (trainable[b1]) grad_of(grads, b1).row(0) += dz.colwise().sum();

  if (!cfg_.encoder) return;
  bool enc_trainable = false;
  for (size_t i = 0; i < params_.size(); ++i)
    if (trainable[i] && is_encoder_tensor(params_.tensors()[i].name)) enc_trainable = true;
  if (!enc_trainable) return;
  encoder_backward(params_, cfg_, Mat<T>(dz * P(w1).transpose()), c.enc_in, c.enc_pre, grads, trainable);
}

template <typename T>
std::vector<AttentionTrace> BatchPass<T>::traces() const {
  const int H = cfg_.n_heads;
  std::vector<AttentionTrace> out(n_);
  for (int e = 0; e < n_; ++e) {
    auto& tr = out[e];
    tr.n_layers = cfg_.n_layers;
    tr.n_heads = H;
    tr.T = T_;
    tr.attn.resize(static_cast<size_t>(cfg_.n_layers) * H);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const auto& c = layers_[l];
      if (c.nq != T_) throw ConfigError("traces() needs a forward pass with capture");
      for (int h = 0; h < H; ++h) {
        Eigen::Map<const Mat<T>> A(c.attn.data() + (static_cast<size_t>(e) * H + h) * T_ * T_, T_, T_);
        tr.at(l, h) = A.template cast<double>();
      }
    }
  }
  return out;
}

template class BatchPass<float>;
template class BatchPass<double>;

ForwardResult forward(const ParamSet<float>& params, const ModelConfig& cfg, const datagen::Episode& episode,
                      bool capture) {
  BatchPass<float> pass(params, cfg);
  ForwardOptions opts;
  opts.capture = capture;
  const auto& logits = pass.forward(std::span<const datagen::Episode>(&episode, 1), opts);
  ForwardResult out;
  out.logits.assign(logits.data(), logits.data() + logits.size());
  if (capture) out.trace = pass.traces().front();
  return out;
}

Mat<float> encode_m2(const ParamSet<float>& params, const ModelConfig& cfg, const Mat<float>& x2) {
  if (!cfg.encoder) throw ConfigError("encode_m2: the model has no encoder");
  if (x2.cols() != cfg.m2_dim) throw ConfigError("encode_m2: input width does not match model.m2_dim");
  return encoder_forward<float>(params, cfg, x2, nullptr, nullptr);
}

Mat<float> project_m2(const ParamSet<float>& params, const ModelConfig& cfg, const Mat<float>& x2) {
  if (cfg.m2_dim == 0) throw ConfigError("project_m2: the model has no projector");
  if (x2.cols() != cfg.m2_dim) throw ConfigError("project_m2: input width does not match model.m2_dim");
  Mat<float> f = cfg.encoder ? encode_m2(params, cfg, x2) : x2;
  Mat<float> z = f * params["proj.w1"];
  add_bias(z, params["proj.b1"]);
  Mat<float> h;
  silu_forward(z, h);
  Mat<float> out = h * params["proj.w2"];
  add_bias(out, params["proj.b2"]);
  return out;
}

template <typename T>
EncoderPass<T>::EncoderPass(const ParamSet<T>& params, const ModelConfig& cfg) : params_(params), cfg_(cfg) {
  if (!cfg_.encoder || cfg_.encoder_classes < 1 || !params_.contains("enc.head.w"))
    throw ConfigError("encoder pretraining needs an encoder with a classification head");
}

template <typename T>
const Mat<T>& EncoderPass<T>::forward(const Mat<T>& x2) {
  features_ = encoder_forward(params_, cfg_, x2, &in_, &pre_);
  logits_.noalias() = features_ * params_["enc.head.w"];
  add_bias(logits_, params_["enc.head.b"]);
  if (!logits_.allFinite()) throw NumericError("non-finite encoder logits");
  return logits_;
}

template <typename T>
void EncoderPass<T>::backward(const Mat<T>& dlogits, ParamSet<T>& grads, const std::vector<char>& trainable) {
  const size_t hw = params_.index_of("enc.head.w"), hb = params_.index_of("enc.head.b");
  if (trainable[hw]) grad_of(grads, hw).noalias() += features_.transpose() * dlogits;
  if (trainable[hb]) grad_of(grads, hb).row(0) += dlogits.colwise().sum();
  encoder_backward(params_, cfg_, Mat<T>(dlogits * params_.tensors()[hw].value.transpose()), in_, pre_, grads,
                   trainable);
}

template class EncoderPass<float>;
template class EncoderPass<double>;

}  // namespace icl::net

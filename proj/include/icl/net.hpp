#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icl/datagen.hpp"
#include "icl/params.hpp"

namespace icl::net {

enum class PosEncoding { APE, RoPE, ALiBi, Hybrid };

std::string to_string(PosEncoding pe);
PosEncoding pos_encoding_from_string(const std::string& s);

// Learned: trainable table, zero-initialized. Sinusoidal: fixed unit-norm
// sin/cos rows stored as a frozen buffer.
enum class ApeKind { Learned, Sinusoidal };
std::string to_string(ApeKind k);
ApeKind ape_kind_from_string(const std::string& s);

inline bool uses_ape(PosEncoding pe) { return pe == PosEncoding::APE || pe == PosEncoding::Hybrid; }
inline bool uses_rope(PosEncoding pe) { return pe == PosEncoding::RoPE || pe == PosEncoding::Hybrid; }

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 1;
  int d_model = 64;
  int d_mlp = 256;
  PosEncoding pe = PosEncoding::APE;
  ApeKind ape = ApeKind::Sinusoidal;
  int n_labels = 32;
  int max_T = 26;
  double rope_base = 10000.0;
  bool zero_init_classifier = true;

  // Multimodal extension. m2_dim == 0 means no projector.
  int m2_dim = 0;
  bool encoder = false;
  int encoder_layers = 3;
  int encoder_width = 256;
  int encoder_classes = 0;  // classification head used only for encoder pretraining

  int d_head() const { return d_model / n_heads; }
  int projector_in() const { return encoder ? encoder_width : m2_dim; }
};

void validate(const ModelConfig& cfg);

// Tensor naming scheme.
std::string layer_tensor(int layer, const char* what);
inline constexpr const char* kApe = "ape";
inline constexpr const char* kApeFixed = "ape_fixed";
inline const char* ape_tensor(const ModelConfig& cfg) { return cfg.ape == ApeKind::Learned ? kApe : kApeFixed; }
inline constexpr const char* kFinalNorm = "final_norm";
inline constexpr const char* kClassifier = "classifier";
std::string encoder_tensor(int layer, const char* what);

// Fixed buffers are stored with the parameters but never trained.
bool is_buffer_tensor(const std::string& name);
bool is_decoder_tensor(const std::string& name);
bool is_projector_tensor(const std::string& name);
bool is_encoder_tensor(const std::string& name);
bool is_encoder_head_tensor(const std::string& name);

// Gaussian(0, 1/fan_in) projections, unit gains, zero biases; the APE table is
// zero (learned) or sinusoidal (fixed).
ParamSet<float> init_params(const ModelConfig& cfg, uint64_t seed);

// x * gain / sqrt(mean(x^2) + 1e-6)
inline constexpr double kRmsEps = 1e-6;
Eigen::RowVectorXd rmsnorm(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& gain);

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

// ALiBi slope of head h (1-based), 2^(-8h/H).
double alibi_slope(int head, int n_heads);

// RoPE angle for dimension pair j at position pos.
double rope_angle(int pos, int pair, int d_head, double base);

struct PositionedHead {
  Mat<double> q;
  Mat<double> k;
  std::optional<Mat<double>> bias;  // (rows of q) x (rows of k), pre-softmax additive
};

// Positional treatment of one head's query/key rows. `positions` gives the
// sequence position of each row (shared by q and k). APE is a no-op here since
// it is added to the token embeddings before the first layer. `head` is 0-based.
PositionedHead apply_position(PosEncoding pe, const Mat<double>& q, const Mat<double>& k,
                              std::span<const int> positions, int head, int n_heads, double rope_base,
                              int max_T);

// Post-softmax attention probabilities of one episode.
struct AttentionTrace {
  int n_layers = 0;
  int n_heads = 0;
  int T = 0;
  std::vector<Mat<double>> attn;  // index layer * n_heads + head, each T x T

  const Mat<double>& at(int layer, int head) const { return attn.at(layer * n_heads + head); }
  Mat<double>& at(int layer, int head) { return attn.at(layer * n_heads + head); }
};

struct HeadRef {
  int layer = 0;  // 0-based
  int head = 0;   // 0-based
  bool operator==(const HeadRef&) const = default;
};

struct ForwardOptions {
  bool capture = false;        // record attention traces (forces full-sequence evaluation)
  bool full_sequence = false;  // run every row through the last layer, not only the query row
  std::vector<HeadRef> knockout;
};

// Batched decoder pass over a set of episodes with the cached activations
// needed by backward(). Loss is read only at the final position, so by
// default the last layer evaluates only that row.
template <typename T>
class BatchPass {
 public:
  BatchPass(const ParamSet<T>& params, const ModelConfig& cfg);

  // Returns logits, one row per episode.
  const Mat<T>& forward(std::span<const datagen::Episode> episodes, const ForwardOptions& opts = {});

  // Accumulates parameter gradients of sum(dlogits .* logits) into `grads`
  // for tensors whose `trainable` flag is set. Others are left untouched.
  void backward(const Mat<T>& dlogits, ParamSet<T>& grads, const std::vector<char>& trainable);

  // Requires forward() with capture.
  std::vector<AttentionTrace> traces() const;

  const Mat<T>& logits() const { return logits_; }
  // Decoder input rows of the secondary-modality tokens after encoder/projector.
  const Mat<T>& projected_m2() const { return embed_.projected; }

 private:
  struct LayerRefs {
    size_t norm1, wq, wk, wv, wo, norm2, w_in, w_out;
  };
  struct LayerCache {
    int nq = 0;
    Mat<T> x_in, h1, hq, q, k, v, o, x_mid, h2, u, a;
    std::vector<T> r1, r2, attn;
  };
  struct EmbedCache {
    Mat<T> m2_in;
    std::vector<Mat<T>> enc_in, enc_pre;
    Mat<T> features, proj_pre, proj_hidden, projected;
    std::vector<int> dest_row;  // decoder input row per m2 row, -1 when zeroed
  };

  const Mat<T>& P(size_t i) const { return params_.tensors()[i].value; }
  void embed(std::span<const datagen::Episode> episodes);
  void layer_forward(int l, int nq, Mat<T>& out);
  Mat<T> layer_backward(int l, const Mat<T>& dout, bool need_dx, ParamSet<T>& grads,
                        const std::vector<char>& trainable);
  void embed_backward(const Mat<T>& dx0, ParamSet<T>& grads, const std::vector<char>& trainable);
  void rope_rows(Mat<T>& m, int nq, T sign) const;
  bool embed_needs_grad(const std::vector<char>& trainable) const;

  const ParamSet<T>& params_;
  ModelConfig cfg_;
  std::vector<LayerRefs> refs_;
  std::vector<T> rope_cos_, rope_sin_;  // max_T x d_head/2
  std::vector<T> alibi_;                // per head slope
  int n_ = 0, T_ = 0;
  bool has_m2_ = false;
  std::vector<char> knocked_;  // layers x heads
  EmbedCache embed_;
  std::vector<LayerCache> layers_;
  Mat<T> x_last_, xf_, hf_, logits_;
  std::vector<T> rf_;
};

extern template class BatchPass<float>;
extern template class BatchPass<double>;

// Single-episode convenience wrapper.
struct ForwardResult {
  std::vector<float> logits;
  std::optional<AttentionTrace> trace;
};
ForwardResult forward(const ParamSet<float>& params, const ModelConfig& cfg, const datagen::Episode& episode,
                      bool capture);

// Feed-forward encoder features for raw secondary-modality inputs (rows).
Mat<float> encode_m2(const ParamSet<float>& params, const ModelConfig& cfg, const Mat<float>& x2);
// Projector output (through the encoder when present) for raw inputs.
Mat<float> project_m2(const ParamSet<float>& params, const ModelConfig& cfg, const Mat<float>& x2);

// Encoder pretraining pass: encoder features -> classification head.
template <typename T>
class EncoderPass {
 public:
  EncoderPass(const ParamSet<T>& params, const ModelConfig& cfg);
  const Mat<T>& forward(const Mat<T>& x2);
  void backward(const Mat<T>& dlogits, ParamSet<T>& grads, const std::vector<char>& trainable);

 private:
  const ParamSet<T>& params_;
  ModelConfig cfg_;
  std::vector<Mat<T>> in_, pre_;
  Mat<T> features_, logits_;
};

extern template class EncoderPass<float>;
extern template class EncoderPass<double>;

}  // namespace icl::net

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icl/rng.hpp"

namespace icl {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Mat<float>;
using RowF = Eigen::RowVectorXf;

}  // namespace icl

namespace icl::datagen {

struct ModalitySpec {
  int K = 8192;
  int D = 64;
  double epsilon = 0.1;
  double alpha = 0.0;
  uint64_t seed = 0;
};

struct LabelSpace {
  int L = 0;
  MatF prototypes;  // L x d_model, rows ~ N(0, I/d_model)
};

struct ClassBank {
  MatF mu;                         // K x D
  std::vector<int> class_to_label; // K entries in [0, L)
  int num_labels = 0;

  int K() const { return static_cast<int>(mu.rows()); }
  int D() const { return static_cast<int>(mu.cols()); }
};

enum class Modality { Unimodal, Multimodal };

struct SequenceSpec {
  int N = 8;
  int B = 4;
  Modality mode = Modality::Unimodal;
};

enum class EvalMode { Train, IWL, ICLNovel, ICLSwap };

enum class Role : uint8_t { Item1, Item2, Label, QueryItem1, QueryItem2 };

std::string to_string(EvalMode m);
std::string to_string(Role r);
EvalMode eval_mode_from_string(const std::string& s);

struct Episode {
  MatF tokens;    // T x d_model; Item2/QueryItem2 rows stay zero until projected
  MatF m2_items;  // (N+1) x D2 raw secondary-modality items in sequence order; empty if unimodal
  std::vector<Role> roles;
  std::vector<int> class_ids;   // per exemplar, primary modality
  std::vector<int> class_ids2;  // per exemplar, secondary modality (multimodal only)
  std::vector<int> label_ids;   // per exemplar
  int query_class = -1;
  int query_class2 = -1;
  int target_label = -1;
  EvalMode mode = EvalMode::Train;
  bool multimodal = false;
  bool m2_zeroed = false;  // projected secondary tokens are replaced by zeros

  int length() const { return static_cast<int>(roles.size()); }
  int num_exemplars() const { return static_cast<int>(label_ids.size()); }
  // Position of exemplar i's label token.
  int label_position(int i) const { return multimodal ? 3 * i + 2 : 2 * i + 1; }
  std::vector<int> label_positions() const;
  // Positions of the secondary-modality tokens, in the row order of m2_items.
  std::vector<int> m2_positions() const;
  // Label positions of context exemplars sharing the query's class.
  std::vector<int> matching_label_positions() const;
};

LabelSpace sample_label_space(int L, int d_model, uint64_t seed);

// Prototypes ~ N(0, I/D); class k maps to label k mod L.
ClassBank sample_class_bank(const ModalitySpec& spec, const LabelSpace& labels);
ClassBank sample_class_bank(const ModalitySpec& spec, int num_labels);

// (mu_k + eps * eta) / sqrt(1 + eps^2), eta ~ N(0, I/D).
RowF sample_item(const ClassBank& bank, int k, double epsilon, Rng& rng);
RowF sample_item(const RowF& prototype, double epsilon, Rng& rng);

// w_k proportional to (k+1)^-alpha, normalized.
std::vector<double> zipf_weights(int K, double alpha);

// Inverse-CDF sampler over a fixed weight vector.
class WeightedSampler {
 public:
  WeightedSampler() = default;
  explicit WeightedSampler(const std::vector<double>& weights);
  int operator()(Rng& rng) const;
  int size() const { return static_cast<int>(cdf_.size()); }

 private:
  std::vector<double> cdf_;
};

struct ContextDraw {
  std::vector<int> classes;   // N entries, each distinct class repeated B times, shuffled
  std::vector<int> distinct;  // the N/B distinct classes in draw order
  int query_class = -1;       // uniform among `distinct`
};

ContextDraw build_context_classes(const SequenceSpec& seq, const WeightedSampler& sampler, Rng& rng);
ContextDraw build_context_classes(const SequenceSpec& seq, const std::vector<double>& weights, Rng& rng);

struct DataConfig {
  SequenceSpec seq;
  int L1 = 32;
  int L2 = 16;
  ModalitySpec m1{8192, 64, 0.1, 0.0, 0};
  ModalitySpec m2{256, 32, 0.1, 0.0, 0};

  int d_model() const { return m1.D; }
  int sequence_length() const {
    return seq.mode == Modality::Multimodal ? 3 * seq.N + 2 : 2 * seq.N + 1;
  }
};

// Everything sampled once per run: label prototypes, class banks and the
// Zipf samplers. Immutable after construction; safe to share across threads.
class Task {
 public:
  Task(const DataConfig& cfg, uint64_t seed);

  const DataConfig& config() const { return cfg_; }
  const LabelSpace& labels() const { return labels_; }
  const ClassBank& bank1() const { return bank1_; }
  const ClassBank& bank2() const { return bank2_; }
  bool multimodal() const { return cfg_.seq.mode == Modality::Multimodal; }
  // Labels usable in episodes: all L1 for unimodal, the first L2 for multimodal.
  int active_labels() const { return multimodal() ? cfg_.L2 : cfg_.L1; }

  const WeightedSampler& sampler1() const { return zipf1_; }
  const WeightedSampler& sampler2() const { return zipf2_; }
  const std::vector<double>& weights1() const { return w1_; }
  // Draws an M1 class carrying `label`, Zipf(alpha1)-weighted among those classes.
  int m1_class_for_label(int label, Rng& rng) const;

 private:
  DataConfig cfg_;
  LabelSpace labels_;
  ClassBank bank1_;
  ClassBank bank2_;
  std::vector<double> w1_;
  std::vector<double> w2_;
  WeightedSampler zipf1_;
  WeightedSampler zipf2_;
  std::vector<std::vector<int>> m1_by_label_;
  std::vector<WeightedSampler> m1_by_label_sampler_;
};

Episode build_episode(const SequenceSpec& seq, const Task& task, EvalMode mode, Rng& rng);
inline Episode build_episode(const Task& task, EvalMode mode, Rng& rng) {
  return build_episode(task.config().seq, task, mode, rng);
}

// Episode stream for training and evaluation: episode i of stream s is a pure
// function of (seed, s, i), independent of how a batch is split across workers.
std::vector<Episode> build_batch(const Task& task, EvalMode mode, int count, uint64_t seed,
                                 uint64_t stream, uint64_t first_index);

void validate(const DataConfig& cfg);

}  // namespace icl::datagen

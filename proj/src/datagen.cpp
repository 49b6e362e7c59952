#include "icl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "icl/errors.hpp"

namespace icl::datagen {

std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::Train: return "train";
    case EvalMode::IWL: return "iwl";
    case EvalMode::ICLNovel: return "icl_novel";
    case EvalMode::ICLSwap: return "icl_swap";
  }
  return "?";
}

std::string to_string(Role r) {
  switch (r) {
    case Role::Item1: return "item1";
    case Role::Item2: return "item2";
    case Role::Label: return "label";
    case Role::QueryItem1: return "query_item1";
    case Role::QueryItem2: return "query_item2";
  }
  return "?";
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "train") return EvalMode::Train;
  if (s == "iwl") return EvalMode::IWL;
  if (s == "icl_novel") return EvalMode::ICLNovel;
  if (s == "icl_swap") return EvalMode::ICLSwap;
  throw ConfigError("unknown eval mode '" + s + "'");
}

std::vector<int> Episode::label_positions() const {
  std::vector<int> out(label_ids.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = label_position(static_cast<int>(i));
  return out;
}

std::vector<int> Episode::m2_positions() const {
  std::vector<int> out;
  for (int t = 0; t < length(); ++t)
    if (roles[t] == Role::Item2 || roles[t] == Role::QueryItem2) out.push_back(t);
  return out;
}

std::vector<int> Episode::matching_label_positions() const {
  std::vector<int> out;
  for (int i = 0; i < num_exemplars(); ++i) {
    bool match = class_ids[i] == query_class;
    if (multimodal) match = match && class_ids2[i] == query_class2;
    if (match) out.push_back(label_position(i));
  }
  return out;
}

namespace {

MatF gaussian_rows(int rows, int cols, Rng& rng) {
  MatF m(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<float>(rng.normal() * scale);
  return m;
}

RowF gaussian_row(int cols, Rng& rng) {
  RowF v(cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  for (int j = 0; j < cols; ++j) v[j] = static_cast<float>(rng.normal() * scale);
  return v;
}

}  // namespace

LabelSpace sample_label_space(int L, int d_model, uint64_t seed) {
  if (L < 1 || d_model < 1) throw ConfigError("label space needs L >= 1 and d_model >= 1");
  Rng rng(seed, streams::kLabels);
  return LabelSpace{L, gaussian_rows(L, d_model, rng)};
}

ClassBank sample_class_bank(const ModalitySpec& spec, int num_labels) {
  if (spec.K < 1 || spec.D < 1) throw ConfigError("class bank needs K >= 1 and D >= 1");
  if (num_labels < 1 || spec.K < num_labels || spec.K % num_labels != 0)
    throw ConfigError("K=" + std::to_string(spec.K) + " is not a positive multiple of L=" +
                      std::to_string(num_labels));
  Rng rng(spec.seed);
  ClassBank bank;
  bank.mu = gaussian_rows(spec.K, spec.D, rng);
  bank.num_labels = num_labels;
  bank.class_to_label.resize(spec.K);
  for (int k = 0; k < spec.K; ++k) bank.class_to_label[k] = k % num_labels;
  return bank;
}

ClassBank sample_class_bank(const ModalitySpec& spec, const LabelSpace& labels) {
  return sample_class_bank(spec, labels.L);
}

RowF sample_item(const RowF& prototype, double epsilon, Rng& rng) {
  const RowF eta = gaussian_row(static_cast<int>(prototype.size()), rng);
  const float inv = static_cast<float>(1.0 / std::sqrt(1.0 + epsilon * epsilon));
  return (prototype + static_cast<float>(epsilon) * eta) * inv;
}

RowF sample_item(const ClassBank& bank, int k, double epsilon, Rng& rng) {
  if (k < 0 || k >= bank.K())
    throw IndexError("class index " + std::to_string(k) + " outside [0, " + std::to_string(bank.K()) + ")");
  return sample_item(RowF(bank.mu.row(k)), epsilon, rng);
}

std::vector<double> zipf_weights(int K, double alpha) {
  if (K < 1) throw ConfigError("zipf_weights needs K >= 1");
  std::vector<double> w(K);
  for (int k = 0; k < K; ++k) w[k] = std::pow(static_cast<double>(k + 1), -alpha);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return w;
}

WeightedSampler::WeightedSampler(const std::vector<double>& weights) : cdf_(weights.size()) {
  std::partial_sum(weights.begin(), weights.end(), cdf_.begin());
}

int WeightedSampler::operator()(Rng& rng) const {
  const double u = rng.uniform() * cdf_.back();
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  if (it == cdf_.end()) --it;
  return static_cast<int>(it - cdf_.begin());
}

ContextDraw build_context_classes(const SequenceSpec& seq, const WeightedSampler& sampler, Rng& rng) {
  if (seq.N < 1 || seq.B < 1 || seq.N % seq.B != 0)
    throw ConfigError("burstiness B=" + std::to_string(seq.B) + " must divide N=" + std::to_string(seq.N));
  const int n_distinct = seq.N / seq.B;
  if (n_distinct > sampler.size())
    throw ConfigError("N/B=" + std::to_string(n_distinct) + " distinct classes exceed K=" +
                      std::to_string(sampler.size()));
  ContextDraw draw;
  while (static_cast<int>(draw.distinct.size()) < n_distinct) {
    const int k = sampler(rng);
    if (std::find(draw.distinct.begin(), draw.distinct.end(), k) == draw.distinct.end())
      draw.distinct.push_back(k);
  }
  draw.classes.reserve(seq.N);
  for (int k : draw.distinct)
    for (int b = 0; b < seq.B; ++b) draw.classes.push_back(k);
  std::shuffle(draw.classes.begin(), draw.classes.end(), rng.engine());
  draw.query_class = draw.distinct[rng.index(draw.distinct.size())];
  return draw;
}

ContextDraw build_context_classes(const SequenceSpec& seq, const std::vector<double>& weights, Rng& rng) {
  return build_context_classes(seq, WeightedSampler(weights), rng);
}

void validate(const DataConfig& cfg) {
  const auto& s = cfg.seq;
  if (s.N < 1) throw ConfigError("data.N must be >= 1");
  if (s.B < 1 || s.N % s.B != 0)
    throw ConfigError("data.B=" + std::to_string(s.B) + " must divide data.N=" + std::to_string(s.N));
  if (cfg.L1 < 1) throw ConfigError("data.L1 must be >= 1");
  if (cfg.m1.K % cfg.L1 != 0 || cfg.m1.K < cfg.L1)
    throw ConfigError("data.m1.K must be a positive multiple of data.L1");
  if (cfg.m1.K < s.N / s.B) throw ConfigError("data.m1.K smaller than N/B");
  if (cfg.m1.epsilon < 0 || cfg.m2.epsilon < 0) throw ConfigError("epsilon must be >= 0");
  if (cfg.m1.alpha < 0 || cfg.m2.alpha < 0) throw ConfigError("alpha must be >= 0");
  if (s.mode == Modality::Multimodal) {
    if (cfg.L2 < 1 || cfg.L2 > cfg.L1) throw ConfigError("data.L2 must lie in [1, L1]");
    if (cfg.m2.K % cfg.L2 != 0 || cfg.m2.K < cfg.L2)
      throw ConfigError("data.m2.K must be a positive multiple of data.L2");
    if (cfg.m2.K < s.N / s.B) throw ConfigError("data.m2.K smaller than N/B");
    if (cfg.m2.D < 1) throw ConfigError("data.m2.D must be >= 1");
  }
}

Task::Task(const DataConfig& cfg, uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  cfg_.m1.seed = derive_seed(seed, streams::kBankM1);
  cfg_.m2.seed = derive_seed(seed, streams::kBankM2);
  labels_ = sample_label_space(cfg_.L1, cfg_.d_model(), seed);
  bank1_ = sample_class_bank(cfg_.m1, cfg_.L1);
  w1_ = zipf_weights(cfg_.m1.K, cfg_.m1.alpha);
  zipf1_ = WeightedSampler(w1_);
  if (multimodal()) {
    bank2_ = sample_class_bank(cfg_.m2, cfg_.L2);
    w2_ = zipf_weights(cfg_.m2.K, cfg_.m2.alpha);
    zipf2_ = WeightedSampler(w2_);
    m1_by_label_.resize(cfg_.L2);
    m1_by_label_sampler_.resize(cfg_.L2);
    for (int label = 0; label < cfg_.L2; ++label) {
      std::vector<double> w;
      for (int k = label; k < cfg_.m1.K; k += cfg_.L1) {
        m1_by_label_[label].push_back(k);
        w.push_back(w1_[k]);
      }
      m1_by_label_sampler_[label] = WeightedSampler(w);
    }
  }
}

int Task::m1_class_for_label(int label, Rng& rng) const {
  return m1_by_label_.at(label)[m1_by_label_sampler_.at(label)(rng)];
}

namespace {

// Random permutation of [0, n) that moves `fixed_label`; resampled until it does.
std::vector<int> moving_permutation(int n, int fixed_label, Rng& rng) {
  if (n < 2) throw ConfigError("label swap needs at least two labels");
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  do {
    std::shuffle(perm.begin(), perm.end(), rng.engine());
  } while (perm[fixed_label] == fixed_label);
  return perm;
}

std::vector<int> repeat_shuffled(int n_distinct, int B, Rng& rng) {
  std::vector<int> slots;
  for (int j = 0; j < n_distinct; ++j)
    for (int b = 0; b < B; ++b) slots.push_back(j);
  std::shuffle(slots.begin(), slots.end(), rng.engine());
  return slots;
}

Episode unimodal_episode(const SequenceSpec& seq, const Task& task, EvalMode mode, Rng& rng) {
  const auto& cfg = task.config();
  const auto& bank = task.bank1();
  const int N = seq.N;
  const int d = cfg.d_model();
  const double eps = cfg.m1.epsilon;

  Episode ep;
  ep.mode = mode;
  ep.multimodal = false;
  ep.tokens = MatF::Zero(2 * N + 1, d);
  ep.roles.resize(2 * N + 1);
  ep.class_ids.resize(N);
  ep.label_ids.resize(N);

  std::vector<RowF> context_items(N);
  RowF query_item;

  if (mode == EvalMode::ICLNovel) {
    const int n_distinct = N / seq.B;
    std::vector<RowF> protos(n_distinct);
    std::vector<int> labels(n_distinct);
    for (int j = 0; j < n_distinct; ++j) {
      protos[j] = gaussian_row(d, rng);
      labels[j] = static_cast<int>(rng.index(cfg.L1));
    }
    const auto slots = repeat_shuffled(n_distinct, seq.B, rng);
    const int q = static_cast<int>(rng.index(n_distinct));
    for (int i = 0; i < N; ++i) {
      ep.class_ids[i] = bank.K() + slots[i];
      ep.label_ids[i] = labels[slots[i]];
      context_items[i] = sample_item(protos[slots[i]], eps, rng);
    }
    ep.query_class = bank.K() + q;
    ep.target_label = labels[q];
    query_item = sample_item(protos[q], eps, rng);
  } else {
    const ContextDraw draw = build_context_classes(seq, task.sampler1(), rng);
    int query = draw.query_class;
    if (mode == EvalMode::IWL) {
      if (bank.K() <= N / seq.B) throw ConfigError("IWL episodes need K > N/B");
      do {
        query = task.sampler1()(rng);
      } while (std::find(draw.distinct.begin(), draw.distinct.end(), query) != draw.distinct.end());
    }
    std::vector<int> relabel(cfg.L1);
    std::iota(relabel.begin(), relabel.end(), 0);
    if (mode == EvalMode::ICLSwap) relabel = moving_permutation(cfg.L1, bank.class_to_label[query], rng);
    for (int i = 0; i < N; ++i) {
      const int k = draw.classes[i];
      ep.class_ids[i] = k;
      ep.label_ids[i] = relabel[bank.class_to_label[k]];
      context_items[i] = sample_item(bank, k, eps, rng);
    }
    ep.query_class = query;
    ep.target_label = relabel[bank.class_to_label[query]];
    query_item = sample_item(bank, query, eps, rng);
  }

  for (int i = 0; i < N; ++i) {
    ep.tokens.row(2 * i) = context_items[i];
    ep.tokens.row(2 * i + 1) = task.labels().prototypes.row(ep.label_ids[i]);
    ep.roles[2 * i] = Role::Item1;
    ep.roles[2 * i + 1] = Role::Label;
  }
  ep.tokens.row(2 * N) = query_item;
  ep.roles[2 * N] = Role::QueryItem1;
  return ep;
}

Episode multimodal_episode(const SequenceSpec& seq, const Task& task, EvalMode mode, Rng& rng) {
  const auto& cfg = task.config();
  const auto& bank1 = task.bank1();
  const auto& bank2 = task.bank2();
  const int N = seq.N;
  const int d = cfg.d_model();
  const int d2 = cfg.m2.D;
  const int n_distinct = N / seq.B;

  Episode ep;
  ep.mode = mode;
  ep.multimodal = true;
  ep.tokens = MatF::Zero(3 * N + 2, d);
  ep.m2_items = MatF::Zero(N + 1, d2);
  ep.roles.resize(3 * N + 2);
  ep.class_ids.resize(N);
  ep.class_ids2.resize(N);
  ep.label_ids.resize(N);

  // Per distinct context class: prototypes for both modalities and its label.
  std::vector<RowF> proto1(n_distinct), proto2(n_distinct);
  std::vector<int> cls1(n_distinct), cls2(n_distinct), label(n_distinct);
  std::vector<int> slots;
  int q = 0;
  RowF query_proto1, query_proto2;
  int query1 = -1, query2 = -1, target = -1;

  if (mode == EvalMode::ICLNovel) {
    for (int j = 0; j < n_distinct; ++j) {
      proto1[j] = gaussian_row(d, rng);
      proto2[j] = gaussian_row(d2, rng);
      label[j] = static_cast<int>(rng.index(cfg.L2));
      cls1[j] = bank1.K() + j;
      cls2[j] = bank2.K() + j;
    }
    slots = repeat_shuffled(n_distinct, seq.B, rng);
    q = static_cast<int>(rng.index(n_distinct));
    query_proto1 = proto1[q];
    query_proto2 = proto2[q];
    query1 = cls1[q];
    query2 = cls2[q];
    target = label[q];
  } else {
    const ContextDraw draw = build_context_classes(seq, task.sampler2(), rng);
    for (int j = 0; j < n_distinct; ++j) {
      cls2[j] = draw.distinct[j];
      label[j] = bank2.class_to_label[cls2[j]];
      cls1[j] = task.m1_class_for_label(label[j], rng);
      proto1[j] = bank1.mu.row(cls1[j]);
      proto2[j] = bank2.mu.row(cls2[j]);
    }
    slots.resize(N);
    for (int i = 0; i < N; ++i)
      slots[i] = static_cast<int>(std::find(draw.distinct.begin(), draw.distinct.end(), draw.classes[i]) -
                                  draw.distinct.begin());
    if (mode == EvalMode::IWL) {
      if (bank2.K() <= n_distinct) throw ConfigError("IWL episodes need K2 > N/B");
      // Neither modality's query class may appear in context.
      for (int attempt = 0;; ++attempt) {
        if (attempt == 100000) throw ConfigError("cannot draw an IWL query absent from the context");
        query2 = task.sampler2()(rng);
        if (std::find(draw.distinct.begin(), draw.distinct.end(), query2) != draw.distinct.end()) continue;
        target = bank2.class_to_label[query2];
        query1 = task.m1_class_for_label(target, rng);
        if (std::find(cls1.begin(), cls1.end(), query1) == cls1.end()) break;
      }
    } else {
      q = static_cast<int>(std::find(draw.distinct.begin(), draw.distinct.end(), draw.query_class) -
                           draw.distinct.begin());
      query1 = cls1[q];
      query2 = cls2[q];
      target = label[q];
    }
    query_proto1 = bank1.mu.row(query1);
    query_proto2 = bank2.mu.row(query2);
    if (mode == EvalMode::ICLSwap) {
      const auto perm = moving_permutation(cfg.L2, target, rng);
      for (int& l : label) l = perm[l];
      target = perm[target];
    }
  }

  for (int i = 0; i < N; ++i) {
    const int j = slots[i];
    ep.class_ids[i] = cls1[j];
    ep.class_ids2[i] = cls2[j];
    ep.label_ids[i] = label[j];
    ep.tokens.row(3 * i) = sample_item(proto1[j], cfg.m1.epsilon, rng);
    ep.m2_items.row(i) = sample_item(proto2[j], cfg.m2.epsilon, rng);
    ep.tokens.row(3 * i + 2) = task.labels().prototypes.row(label[j]);
    ep.roles[3 * i] = Role::Item1;
    ep.roles[3 * i + 1] = Role::Item2;
    ep.roles[3 * i + 2] = Role::Label;
  }
  ep.tokens.row(3 * N) = sample_item(query_proto1, cfg.m1.epsilon, rng);
  ep.m2_items.row(N) = sample_item(query_proto2, cfg.m2.epsilon, rng);
  ep.roles[3 * N] = Role::QueryItem1;
  ep.roles[3 * N + 1] = Role::QueryItem2;
  ep.query_class = query1;
  ep.query_class2 = query2;
  ep.target_label = target;
  return ep;
}

}  // namespace

Episode build_episode(const SequenceSpec& seq, const Task& task, EvalMode mode, Rng& rng) {
  if (seq.N < 1 || seq.B < 1 || seq.N % seq.B != 0)
    throw ConfigError("burstiness B must divide N");
  if (seq.mode != task.config().seq.mode) throw ConfigError("sequence mode differs from task mode");
  return seq.mode == Modality::Multimodal ? multimodal_episode(seq, task, mode, rng)
                                          : unimodal_episode(seq, task, mode, rng);
}

std::vector<Episode> build_batch(const Task& task, EvalMode mode, int count, uint64_t seed,
                                 uint64_t stream, uint64_t first_index) {
  std::vector<Episode> out(count);
  const uint64_t base = derive_seed(seed, stream);
  // Surface configuration errors before fanning out.
  if (count > 0) {
    Rng rng(base, first_index);
    out[0] = build_episode(task, mode, rng);
  }
#pragma omp parallel for schedule(static)
  for (int i = 1; i < count; ++i) {
    Rng rng(base, first_index + static_cast<uint64_t>(i));
    out[i] = build_episode(task, mode, rng);
  }
  return out;
}

}  // namespace icl::datagen

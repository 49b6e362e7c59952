#include "icl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "icl/errors.hpp"
#include "icl/rng.hpp"

namespace icl::analysis {

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw ConfigError("pearson needs two equal-length series of >= 2");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedMetric("correlation undefined for a constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double r2_score(std::span<const double> truth, std::span<const double> predicted) {
  if (truth.size() != predicted.size() || truth.empty()) throw ConfigError("r2: series must be aligned");
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0.0) throw UndefinedMetric("R^2 undefined for a constant target");
  return 1.0 - ss_res / ss_tot;
}

namespace {

struct BestSplit {
  int feature = -1;
  double threshold = 0.0;
  double score = 0.0;  // reduction in summed squared error
};

}  // namespace

void RegressionTree::fit(const Design& x, std::span<const double> y, std::span<const int> rows_in,
                         const ForestConfig& cfg, uint64_t seed) {
  if (rows_in.empty()) throw ConfigError("tree needs at least one sample");
  nodes_.clear();
  importance_.assign(x.cols(), 0.0);
  Rng rng(seed, 0);
  const int p = static_cast<int>(x.cols());
  const int n_try = std::clamp(static_cast<int>(std::lround(cfg.feature_subsample * p)), 1, p);
  const int min_leaf = std::max(1, cfg.min_samples_leaf);

  struct Work {
    int node;
    std::vector<int> rows;
  };
  std::vector<Work> stack;
  nodes_.push_back(Node{});
  stack.push_back({0, std::vector<int>(rows_in.begin(), rows_in.end())});
  std::vector<int> features(p);
  std::iota(features.begin(), features.end(), 0);

  while (!stack.empty()) {
    Work w = std::move(stack.back());
    stack.pop_back();
    const auto& rows = w.rows;
    double sum = 0, sq = 0;
    for (int r : rows) {
      sum += y[r];
      sq += y[r] * y[r];
    }
    const double n = static_cast<double>(rows.size());
    nodes_[w.node].value = sum / n;
    const int depth = nodes_[w.node].depth;
    const double sse = sq - sum * sum / n;
    const bool can_split = (cfg.max_depth < 0 || depth < cfg.max_depth) &&
                           static_cast<int>(rows.size()) >= 2 * min_leaf && sse > 1e-14 * std::max(1.0, sq);
    if (!can_split) continue;

    if (n_try < p) std::shuffle(features.begin(), features.end(), rng.engine());
    BestSplit best;
    std::vector<int> order(rows);
    for (int fi = 0; fi < n_try; ++fi) {
      const int f = features[fi];
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        return x(a, f) < x(b, f) || (x(a, f) == x(b, f) && a < b);
      });
      double ls = 0, lsq = 0;
      for (size_t i = 0; i + 1 < order.size(); ++i) {
        ls += y[order[i]];
        lsq += y[order[i]] * y[order[i]];
        const int nl = static_cast<int>(i + 1), nr = static_cast<int>(order.size()) - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        const double xa = x(order[i], f), xb = x(order[i + 1], f);
        if (xa == xb) continue;
        const double rs = sum - ls, rsq = sq - lsq;
        const double child = (lsq - ls * ls / nl) + (rsq - rs * rs / nr);
        const double gain = sse - child;
        if (gain > best.score + 1e-15) {
          best.score = gain;
          best.feature = f;
          best.threshold = 0.5 * (xa + xb);
        }
      }
    }
    if (best.feature < 0) continue;
    importance_[best.feature] += best.score;
    std::vector<int> left, right;
    for (int r : rows) (x(r, best.feature) <= best.threshold ? left : right).push_back(r);
    const int li = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{});
    nodes_.push_back(Node{});
    nodes_[li].depth = nodes_[li + 1].depth = depth + 1;
    nodes_[w.node].feature = best.feature;
    nodes_[w.node].threshold = best.threshold;
    nodes_[w.node].left = li;
    nodes_[w.node].right = li + 1;
    stack.push_back({li, std::move(left)});
    stack.push_back({li + 1, std::move(right)});
  }
}

double RegressionTree::predict(const double* row) const {
  int i = 0;
  while (nodes_[i].feature >= 0) i = row[nodes_[i].feature] <= nodes_[i].threshold ? nodes_[i].left : nodes_[i].right;
  return nodes_[i].value;
}

int RegressionTree::depth() const {
  int d = 0;
  for (const auto& n : nodes_) d = std::max(d, n.depth);
  return d;
}

int RegressionTree::leaves() const {
  return static_cast<int>(std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.feature < 0; }));
}

void RandomForest::fit(const Design& x, std::span<const double> y, const ForestConfig& cfg) {
  if (cfg.n_trees < 1) throw ConfigError("forest needs n_trees >= 1");
  if (x.rows() != static_cast<Eigen::Index>(y.size()) || x.rows() < 1 || x.cols() < 1)
    throw ConfigError("forest: design matrix and target disagree");
  trees_.assign(cfg.n_trees, RegressionTree{});
  const int n = static_cast<int>(x.rows());
#pragma omp parallel for schedule(dynamic)
  for (int t = 0; t < cfg.n_trees; ++t) {
    const uint64_t seed = derive_seed(cfg.seed, static_cast<uint64_t>(t));
    std::vector<int> rows(n);
    if (cfg.bootstrap) {
      Rng rng(seed, 1);
      for (int& r : rows) r = static_cast<int>(rng.index(n));
    } else {
      std::iota(rows.begin(), rows.end(), 0);
    }
    trees_[t].fit(x, y, rows, cfg, seed);
  }
}

double RandomForest::predict(const double* row) const {
  double s = 0.0;
  for (const auto& t : trees_) s += t.predict(row);
  return s / static_cast<double>(trees_.size());
}

std::vector<double> RandomForest::importance() const {
  std::vector<double> out;
  for (const auto& t : trees_) {
    const auto& imp = t.importance();
    if (out.empty()) out.assign(imp.size(), 0.0);
    double total = std::accumulate(imp.begin(), imp.end(), 0.0);
    if (total <= 0.0) continue;
    for (size_t f = 0; f < imp.size(); ++f) out[f] += imp[f] / total;
  }
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  if (total > 0.0)
    for (double& v : out) v /= total;
  return out;
}

std::vector<double> RandomForest::predict(const Design& x) const {
  std::vector<double> out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out[i] = predict(x.data() + i * x.cols());
  return out;
}

double forest_r2(const RandomForest& forest, const Design& x, std::span<const double> y) {
  return r2_score(y, forest.predict(x));
}

SplitScore forest_split_r2(const Design& x, std::span<const double> y, std::span<const std::string> keys,
                           const ForestConfig& cfg, int n_splits, double holdout) {
  const int n = static_cast<int>(x.rows());
  if (n < 10) throw ConfigError("forest analysis needs at least 10 records");
  if (static_cast<int>(keys.size()) != n || static_cast<int>(y.size()) != n)
    throw ConfigError("forest: keys, design and target must align");
  const int n_test = std::clamp(static_cast<int>(std::lround(holdout * n)), 1, n - 1);
  SplitScore out;
  for (int s = 0; s < n_splits; ++s) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const uint64_t salt = derive_seed(cfg.seed, 1000 + s);
    std::vector<uint64_t> h(n);
    for (int i = 0; i < n; ++i) h[i] = mix64(fnv1a(keys[i]) ^ salt);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return h[a] < h[b] || (h[a] == h[b] && a < b); });
    const int n_train = n - n_test;
    Design xtr(n_train, x.cols()), xte(n_test, x.cols());
    std::vector<double> ytr(n_train), yte(n_test);
    for (int i = 0; i < n; ++i) {
      if (i < n_train) {
        xtr.row(i) = x.row(idx[i]);
        ytr[i] = y[idx[i]];
      } else {
        xte.row(i - n_train) = x.row(idx[i]);
        yte[i - n_train] = y[idx[i]];
      }
    }
    RandomForest f;
    ForestConfig c = cfg;
    c.seed = derive_seed(cfg.seed, 2000 + s);
    f.fit(xtr, ytr, c);
    out.r2.push_back(forest_r2(f, xte, yte));
  }
  const double k = static_cast<double>(out.r2.size());
  out.r2_mean = std::accumulate(out.r2.begin(), out.r2.end(), 0.0) / k;
  double var = 0;
  for (double v : out.r2) var += (v - out.r2_mean) * (v - out.r2_mean);
  out.r2_std = out.r2.size() > 1 ? std::sqrt(var / (k - 1)) : 0.0;
  return out;
}

double cka_linear(const Mat<double>& x, const Mat<double>& y) {
  if (x.rows() != y.rows() || x.rows() < 2) throw ConfigError("cka needs two representations of >= 2 shared rows");
  const Mat<double> xc = x.rowwise() - x.colwise().mean();
  const Mat<double> yc = y.rowwise() - y.colwise().mean();
  const double num = (yc.transpose() * xc).squaredNorm();
  const double den = (xc.transpose() * xc).norm() * (yc.transpose() * yc).norm();
  if (den == 0.0) throw UndefinedMetric("CKA undefined for a constant representation");
  return num / den;
}

double paired_l2(const Mat<double>& a, const Mat<double>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0)
    throw ConfigError("paired_l2 needs equally shaped, nonempty sets");
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) s += (a.row(i) - b.row(i)).norm();
  return s / static_cast<double>(a.rows());
}

std::optional<double> complexity_threshold(std::span<const ComplexityCell> cells, double threshold) {
  if (cells.empty()) throw ConfigError("complexity threshold needs a nonempty grid");
  std::optional<double> best;
  for (const auto& c : cells)
    if (c.icl_mean >= threshold) {
      const double v = complexity(c.K, c.B);
      if (!best || v < *best) best = v;
    }
  return best;
}

}  // namespace icl::analysis

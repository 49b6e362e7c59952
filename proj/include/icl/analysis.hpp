#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icl/datagen.hpp"

namespace icl::analysis {

// Product-moment correlation. Throws UndefinedMetric for constant inputs.
double pearson(std::span<const double> xs, std::span<const double> ys);

// 1 - SS_res / SS_tot. Throws UndefinedMetric when the truth is constant.
double r2_score(std::span<const double> truth, std::span<const double> predicted);

struct ForestConfig {
  int n_trees = 100;
  int max_depth = -1;  // unbounded
  int min_samples_leaf = 2;
  double feature_subsample = 1.0 / 3.0;
  bool bootstrap = true;
  uint64_t seed = 0;
};

// Row-major design matrix: rows are samples, columns features.
using Design = Mat<double>;

class RegressionTree {
 public:
  void fit(const Design& x, std::span<const double> y, std::span<const int> rows, const ForestConfig& cfg,
           uint64_t seed);
  double predict(const double* row) const;
  int depth() const;
  int leaves() const;
  // Summed squared-error reduction per feature.
  const std::vector<double>& importance() const { return importance_; }

 private:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1, right = -1;
    double value = 0.0;
    int depth = 0;
  };
  std::vector<Node> nodes_;
  std::vector<double> importance_;
};

class RandomForest {
 public:
  void fit(const Design& x, std::span<const double> y, const ForestConfig& cfg);
  double predict(const double* row) const;
  std::vector<double> predict(const Design& x) const;
  const std::vector<RegressionTree>& trees() const { return trees_; }
  // Impurity importance averaged over trees and normalized to sum 1.
  std::vector<double> importance() const;

 private:
  std::vector<RegressionTree> trees_;
};

double forest_r2(const RandomForest& forest, const Design& x, std::span<const double> y);

struct SplitScore {
  double r2_mean = 0.0;
  double r2_std = 0.0;
  std::vector<double> r2;
};

// Repeated random train/validation splits over the sample keys (run ids).
// Each split sorts keys by a seeded hash and holds out the last fraction.
SplitScore forest_split_r2(const Design& x, std::span<const double> y, std::span<const std::string> keys,
                           const ForestConfig& cfg, int n_splits = 5, double holdout = 0.2);

// Linear CKA with internal column centering. Throws UndefinedMetric for a
// zero-norm denominator.
double cka_linear(const Mat<double>& x, const Mat<double>& y);

// Mean Euclidean distance between paired rows.
double paired_l2(const Mat<double>& a, const Mat<double>& b);

struct ComplexityCell {
  double K = 0.0;
  double B = 0.0;
  double icl_mean = 0.0;
  int n_seeds = 0;
};

inline double complexity(double K, double B) { return K * std::sqrt(B); }

// Smallest K * sqrt(B) among cells whose seed-mean ICL reaches `threshold`.
std::optional<double> complexity_threshold(std::span<const ComplexityCell> cells, double threshold = 0.95);

}  // namespace icl::analysis

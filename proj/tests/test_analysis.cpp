#include <doctest.h>

#include <cmath>
#include <random>

#include "icl/analysis.hpp"
#include "icl/errors.hpp"

using namespace icl;
using namespace icl::analysis;

namespace {

Mat<double> random_matrix(int rows, int cols, uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat<double> m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = n(g);
  return m;
}

Mat<double> random_orthogonal(int n, uint64_t seed) {
  const Mat<double> a = random_matrix(n, n, seed);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr{Eigen::MatrixXd(a)};
  const Eigen::MatrixXd q = qr.householderQ();
  return q;
}

}  // namespace

TEST_CASE("pearson closed forms") {
  const std::vector<double> x{1, 2, 3}, y{2, 4, 7};
  // Hand computation: sxy = 5, sxx = 2, syy = 114/9.
  CHECK(pearson(x, y) == doctest::Approx(5.0 / std::sqrt(2.0 * 114.0 / 9.0)).epsilon(1e-12));
  CHECK(pearson(x, y) == doctest::Approx(0.993399).epsilon(1e-6));
  CHECK(pearson(x, x) == doctest::Approx(1.0));
  const std::vector<double> neg{-1, -2, -3};
  CHECK(pearson(x, neg) == doctest::Approx(-1.0));
  const std::vector<double> flat{2, 2, 2};
  CHECK_THROWS_AS(pearson(x, flat), UndefinedMetric);
  CHECK_THROWS_AS(pearson(std::vector<double>{1}, std::vector<double>{1}), ConfigError);
}

TEST_CASE("pearson symmetry, bounds and affine invariance") {
  std::mt19937_64 g(3);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(20), b(20), a2(20);
    for (int i = 0; i < 20; ++i) {
      a[i] = n(g);
      b[i] = 0.5 * a[i] + n(g);
      a2[i] = 3.5 * a[i] - 7.0;
    }
    const double r = pearson(a, b);
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
    CHECK(pearson(b, a) == doctest::Approx(r).epsilon(1e-12));
    CHECK(pearson(a2, b) == doctest::Approx(r).epsilon(1e-10));
  }
}

TEST_CASE("r2 definitions") {
  const std::vector<double> y{1, 2, 3, 4};
  CHECK(r2_score(y, y) == doctest::Approx(1.0));
  const std::vector<double> mean(4, 2.5);
  CHECK(r2_score(y, mean) == doctest::Approx(0.0));
  CHECK_THROWS_AS(r2_score(mean, y), UndefinedMetric);
}

TEST_CASE("single unbootstrapped tree memorizes its training set") {
  const int n = 60;
  Design x = random_matrix(n, 3, 11);
  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) y[i] = std::sin(3 * x(i, 0)) + x(i, 1) * x(i, 2);
  ForestConfig cfg;
  cfg.n_trees = 1;
  cfg.bootstrap = false;
  cfg.min_samples_leaf = 1;
  cfg.feature_subsample = 1.0;
  RandomForest f;
  f.fit(x, y, cfg);
  CHECK(forest_r2(f, x, y) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f.trees()[0].leaves() == n);
}

TEST_CASE("training R2 is non-decreasing in depth") {
  const int n = 80;
  Design x = random_matrix(n, 4, 5);
  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) y[i] = x(i, 0) - 2 * x(i, 3) * x(i, 1);
  ForestConfig cfg;
  cfg.n_trees = 1;
  cfg.bootstrap = false;
  cfg.min_samples_leaf = 1;
  cfg.feature_subsample = 1.0;
  double prev = -1e9;
  for (int depth = 0; depth <= 12; ++depth) {
    cfg.max_depth = depth;
    RandomForest f;
    f.fit(x, y, cfg);
    const double r2 = forest_r2(f, x, y);
    CHECK(r2 >= prev - 1e-12);
    CHECK(f.trees()[0].depth() <= depth);
    prev = r2;
  }
}

TEST_CASE("forest is seed-deterministic, order-invariant and generalizes") {
  const int n = 200;
  Design x = random_matrix(n, 5, 21);
  std::vector<double> y(n);
  std::vector<std::string> keys(n);
  for (int i = 0; i < n; ++i) {
    y[i] = 2 * x(i, 0) + x(i, 1) * x(i, 1);
    keys[i] = "run" + std::to_string(i);
  }
  ForestConfig cfg;
  cfg.n_trees = 30;
  cfg.seed = 9;
  RandomForest a, b;
  a.fit(x, y, cfg);
  b.fit(x, y, cfg);
  CHECK(a.predict(x) == b.predict(x));

  const auto s1 = forest_split_r2(x, y, keys, cfg);
  // Reversing record order keeps the same splits, since they are keyed on run ids.
  Design xr = x.colwise().reverse();
  std::vector<double> yr(y.rbegin(), y.rend());
  std::vector<std::string> kr(keys.rbegin(), keys.rend());
  const auto s2 = forest_split_r2(xr, yr, kr, cfg);
  REQUIRE(s1.r2.size() == 5);
  for (size_t i = 0; i < s1.r2.size(); ++i) CHECK(s1.r2[i] == doctest::Approx(s2.r2[i]).epsilon(1e-12));
  CHECK(s1.r2_mean > 0.6);

  const auto imp = a.importance();
  REQUIRE(imp.size() == 5);
  CHECK(imp[0] + imp[1] > 0.8);
}

TEST_CASE("forest input validation") {
  Design x = random_matrix(5, 2, 1);
  std::vector<double> y(5, 1.0);
  std::vector<std::string> keys(5, "k");
  CHECK_THROWS_AS(forest_split_r2(x, y, keys, ForestConfig{}), ConfigError);
  ForestConfig bad;
  bad.n_trees = 0;
  RandomForest f;
  CHECK_THROWS_AS(f.fit(x, y, bad), ConfigError);
}

TEST_CASE("linear CKA invariances") {
  const Mat<double> x = random_matrix(40, 6, 2);
  const Mat<double> y = random_matrix(40, 4, 3);
  CHECK(std::abs(cka_linear(x, x) - 1.0) < 1e-9);
  const Mat<double> r = random_orthogonal(6, 4);
  CHECK(std::abs(cka_linear(x, x * r) - 1.0) < 1e-9);
  CHECK(std::abs(cka_linear(x, -3.7 * x) - 1.0) < 1e-9);
  const double base = cka_linear(x, y);
  CHECK(base >= 0.0);
  CHECK(base <= 1.0);
  CHECK(std::abs(cka_linear(x * r, 0.25 * y) - base) < 1e-9);
  CHECK(std::abs(cka_linear(y, x) - base) < 1e-9);
  // Column offsets are removed by centering.
  Mat<double> shifted = x;
  shifted.rowwise() += Eigen::RowVectorXd::Constant(6, 5.0);
  CHECK(std::abs(cka_linear(shifted, y) - base) < 1e-9);
  const Mat<double> flat = Mat<double>::Ones(40, 3);
  CHECK_THROWS_AS(cka_linear(x, flat), UndefinedMetric);
  CHECK_THROWS_AS(cka_linear(x, random_matrix(39, 2, 1)), ConfigError);
}

TEST_CASE("paired L2 distance") {
  const Mat<double> a = random_matrix(10, 4, 7);
  CHECK(paired_l2(a, a) == 0.0);
  Mat<double> b = a;
  b.col(2).array() += 1.0;
  CHECK(paired_l2(a, b) == doctest::Approx(1.0).epsilon(1e-12));
  Mat<double> c = a;
  c(3, 1) += 1e-12;
  CHECK(paired_l2(a, c) > 0.0);
  // Not rotation invariant.
  const Mat<double> r = random_orthogonal(4, 8);
  CHECK(paired_l2(a, a * r) > 0.1);
  CHECK_THROWS_AS(paired_l2(a, random_matrix(10, 3, 1)), ConfigError);
}

TEST_CASE("complexity threshold") {
  CHECK(complexity(2048, 4) == 4096.0);
  std::vector<ComplexityCell> grid{{256, 1, 1.0, 3}, {512, 4, 1.0, 3}, {128, 4, 1.0, 3}};
  CHECK(*complexity_threshold(grid) == 256.0);
  grid[0].icl_mean = 0.5;
  CHECK(*complexity_threshold(grid) == 256.0);  // 128 * sqrt(4)
  grid[2].icl_mean = 0.949;
  CHECK(*complexity_threshold(grid) == 1024.0);
  for (auto& c : grid) c.icl_mean = 0.1;
  CHECK_FALSE(complexity_threshold(grid).has_value());
  CHECK_THROWS_AS(complexity_threshold(std::span<const ComplexityCell>{}), ConfigError);

  // Adding qualifying cells never raises the minimum.
  std::mt19937_64 g(1);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<ComplexityCell> cells;
  std::optional<double> prev;
  for (int i = 0; i < 40; ++i) {
    cells.push_back({std::floor(u(g) * 4096) + 1, std::floor(u(g) * 8) + 1, u(g) < 0.5 ? 0.97 : 0.3, 3});
    const auto t = complexity_threshold(cells);
    if (prev) {
      REQUIRE(t.has_value());
      CHECK(*t <= *prev);
    }
    if (t) prev = t;
  }
}

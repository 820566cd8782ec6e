#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "safeft/importance.hpp"
#include "support/fixtures.hpp"

using namespace safeft;
using namespace safeft::testing;

namespace {

Tensor matrix(std::size_t n, std::size_t d, const std::vector<double>& v) {
  Tensor t(Shape{n, d});
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

Tensor gaussian(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Tensor t(Shape{n, d});
  for (double& v : t.data()) v = g(rng);
  return t;
}

/// Direct evaluation with Eigen on centered copies.
double cka_oracle(const Tensor& x, const Tensor& y) {
  using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  M a = Eigen::Map<const M>(x.data().data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols()));
  M b = Eigen::Map<const M>(y.data().data(), static_cast<Eigen::Index>(y.rows()), static_cast<Eigen::Index>(y.cols()));
  a.rowwise() -= a.colwise().mean();
  b.rowwise() -= b.colwise().mean();
  return (b.transpose() * a).squaredNorm() / ((a.transpose() * a).norm() * (b.transpose() * b).norm());
}

Tensor times(const Tensor& x, double c) {
  Tensor out = x;
  for (double& v : out.data()) v *= c;
  return out;
}

Tensor right_multiply(const Tensor& x, const Eigen::MatrixXd& q) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < x.cols(); ++k) s += x.at(i, k) * q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
      out.at(i, j) = s;
    }
  }
  return out;
}

}  // namespace

TEST(Cka, ThreeByTwoOracle) {
  const auto x = matrix(3, 2, {1, 0, 0, 1, -1, -1});
  const auto y = matrix(3, 2, {1, 1, 0, 1, -1, -2});
  const double expected = 0.95502301831800964152741221965071719036476932867668;
  EXPECT_NEAR(*cka(x, y), expected, 1e-14);
  EXPECT_NEAR(*importance_score(x, y), 0.044976981681990358472587780349282809635230671323317, 1e-14);
}

TEST(Cka, ReflexiveAndOrthogonal) {
  std::mt19937_64 rng(3);
  const auto x = gaussian(20, 5, rng);
  EXPECT_NEAR(*cka(x, x), 1.0, 1e-12);
  EXPECT_NEAR(*importance_score(x, x), 0.0, 1e-12);
  const auto a = matrix(4, 2, {1, 0, -1, 0, 0, 0, 0, 0});
  const auto b = matrix(4, 2, {0, 0, 0, 0, 1, 0, -1, 0});
  EXPECT_NEAR(*cka(a, b), 0.0, 1e-15);
  EXPECT_NEAR(*importance_score(a, b), 1.0, 1e-15);
}

TEST(Cka, DegenerateInputIsUndefined) {
  const auto c = matrix(3, 2, {2, 5, 2, 5, 2, 5});
  const auto x = matrix(3, 2, {1, 0, 0, 1, -1, -1});
  EXPECT_FALSE(cka(c, x).has_value());
  EXPECT_FALSE(importance_score(x, c).has_value());
  EXPECT_THROW(cka(x, matrix(3, 1, {1, 2, 3})), ShapeError);
  EXPECT_THROW(cka(matrix(1, 2, {1, 2}), matrix(1, 2, {1, 2})), ShapeError);
}

TEST(Cka, UncenteredVariantDiffersFromCentered) {
  const auto x = matrix(3, 2, {1, 0, 0, 1, 3, 3});
  const auto y = matrix(3, 2, {1, 1, 0, 1, -1, -2});
  EXPECT_NE(*cka(x, y, {.center = false}), *cka(x, y));
}

TEST(CkaProperties, HoldOnRandomPairs) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> rows(2, 40), cols(1, 8);
  for (int trial = 0; trial < 120; ++trial) {
    const auto n = rows(rng), d = cols(rng);
    const auto x = gaussian(n, d, rng);
    auto y = gaussian(n, d, rng);
    if (trial % 3 == 0) {
      for (std::size_t k = 0; k < y.numel(); ++k) y.data()[k] = 0.5 * y.data()[k] + x.data()[k];
    }
    const double v = *cka(x, y);
    EXPECT_NEAR(v, cka_oracle(x, y), 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0 + 1e-12);
    EXPECT_NEAR(*cka(x, x), 1.0, 1e-12);
    EXPECT_NEAR(*cka(y, x), v, 1e-12);
    for (double c : {1e-3, 7.0, 1e3}) EXPECT_NEAR(*cka(times(x, c), y), v, 1e-9);

    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::Random(
                                   static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)))
                                   .householderQ();
    EXPECT_NEAR(*cka(right_multiply(x, q), y), v, 1e-9);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor px(x.shape()), py(y.shape());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        px.at(i, j) = x.at(perm[i], j);
        py.at(i, j) = y.at(perm[i], j);
      }
    }
    EXPECT_NEAR(*cka(px, py), v, 1e-12);
  }
}

TEST(RelativeChange, FloorsPrevious) {
  EXPECT_DOUBLE_EQ(relative_change(0.5, 0.51), (0.51 - 0.5) / 0.5);
  EXPECT_DOUBLE_EQ(relative_change(0.0, 1e-9), 1e-9 / 1e-8);
}

TEST(EpochImportances, ZeroAdaptersScoreZero) {
  const auto m = Model::init(small_config(), 1);
  std::vector<Batch> probe{random_batch(m.config(), 8, 6, 2), random_batch(m.config(), 8, 6, 3)};
  const auto r = epoch_importances(m, probe, 0);
  ASSERT_EQ(r.scores.size(), 4u);
  for (const auto& s : r.scores) EXPECT_EQ(*s, 0.0);
  EXPECT_TRUE(r.relative_change.empty());
  EXPECT_THROW(epoch_importances(m, std::span<const Batch>{}, 0), std::invalid_argument);
}

TEST(EpochImportances, DeterministicAndOrderInvariant) {
  auto m = Model::init(small_config(), 4);
  perturb_adapters(m, 5);
  std::vector<Batch> probe;
  for (std::uint64_t s = 0; s < 4; ++s) probe.push_back(random_batch(m.config(), 6, 7, 10 + s));
  const auto a = epoch_importances(m, probe, 3);
  const auto b = epoch_importances(m, probe, 3);
  EXPECT_EQ(a.scores, b.scores);
  std::vector<Batch> reversed(probe.rbegin(), probe.rend());
  const auto c = epoch_importances(m, reversed, 3, &a);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_GT(*a.scores[i], 0.0);
    EXPECT_LE(*a.scores[i], 1.0);
    EXPECT_NEAR(*c.scores[i], *a.scores[i], 1e-12);
    EXPECT_NEAR(c.relative_change[i], std::abs(*c.scores[i] - *a.scores[i]) / *a.scores[i], 1e-15);
  }
}

TEST(EpochImportances, MatchesStackedOracle) {
  auto m = Model::init(small_config(), 6);
  perturb_adapters(m, 7);
  std::vector<Batch> probe{random_batch(m.config(), 5, 8, 1), random_batch(m.config(), 7, 8, 2)};
  std::vector<ForwardTrace> traces;
  for (const auto& b : probe) traces.push_back(m.dual_forward(b));
  const auto r = epoch_importances(m, probe, 0);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<Tensor> xs{traces[0].adapted[i], traces[1].adapted[i]};
    std::vector<Tensor> ys{traces[0].original[i], traces[1].original[i]};
    EXPECT_NEAR(*r.scores[i], 1.0 - cka_oracle(stack_rows(xs), stack_rows(ys)), 1e-12);
  }
}

TEST(Trajectory, FinalRowIsOneAndEpochZeroMatchesOracle) {
  const auto initial = Model::init(small_config(), 8);
  auto mid = initial.clone();
  perturb_adapters(mid, 9, 0.1);
  auto final_model = mid.clone();
  perturb_adapters(final_model, 10, 0.2);
  std::vector<Batch> probe{random_batch(initial.config(), 6, 6, 1), random_batch(initial.config(), 6, 6, 2)};
  const std::vector<EpochModel> cps{{0, &initial}, {1, &mid}, {2, &final_model}};
  const auto g = trajectory_similarity(cps, final_model, probe);
  ASSERT_EQ(g.epochs, (std::vector<int>{0, 1, 2}));
  for (double v : g.similarity[2]) EXPECT_NEAR(v, 1.0, 1e-12);

  std::vector<std::vector<Tensor>> orig(4), fin(4);
  for (const auto& b : probe) {
    const auto t0 = initial.dual_forward(b);
    const auto tf = final_model.layer_outputs(b);
    for (std::size_t i = 0; i < 4; ++i) {
      orig[i].push_back(t0.original[i]);
      fin[i].push_back(tf[i]);
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(g.similarity[0][i], cka_oracle(stack_rows(orig[i]), stack_rows(fin[i])), 1e-12);
  }

  auto other_cfg = small_config();
  other_cfg.d_model = 8;
  const auto other = Model::init(other_cfg, 1);
  const std::vector<EpochModel> bad{{0, &other}};
  EXPECT_THROW(trajectory_similarity(bad, final_model, probe), std::invalid_argument);
}

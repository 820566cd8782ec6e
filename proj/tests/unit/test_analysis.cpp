#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "safeft/analysis.hpp"
#include "support/fixtures.hpp"

using namespace safeft;
using namespace safeft::testing;

namespace {

std::vector<double> diag(std::vector<double> d) {
  const auto n = d.size();
  std::vector<double> a(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] = d[i];
  return a;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

std::vector<double> gaussian(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

class NonFiniteObjective final : public Objective {
 public:
  std::size_t dim() const override { return 2; }
  double loss(std::span<const double>) const override { return 0.0; }
  std::vector<double> gradient(std::span<const double>) const override {
    return {std::numeric_limits<double>::quiet_NaN(), 0.0};
  }
};

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 1;
  c.d_ff = 6;
  c.vocab_size = 6;
  c.max_seq = 4;
  c.lora_rank = 1;
  c.n_classes = 2;
  return c;
}

struct SmallNet {
  Model model;
  std::vector<Batch> batches;
  std::unique_ptr<ModelObjective> objective;
  std::vector<double> theta;
};

SmallNet small_net(const ModelConfig& c, std::uint64_t seed) {
  SmallNet s{Model::init(c, seed), {}, nullptr, {}};
  perturb_adapters(s.model, seed + 1, 0.5);
  for (double& w : s.model.mutable_value(param_names::head_weight).data()) w *= 20.0;
  s.batches = {random_batch(c, 6, c.max_seq, seed + 2), random_batch(c, 5, c.max_seq, seed + 3)};
  s.objective = std::make_unique<ModelObjective>(s.model, ModelObjective::adapter_and_head_names(s.model), s.batches);
  s.theta = s.objective->flatten();
  return s;
}

}  // namespace

TEST(Hvp, DiagonalQuadratic) {
  const QuadraticObjective q(diag({1, 2, 3}), 3);
  const std::vector<double> theta{0.3, -0.2, 0.7};
  const auto hv = hvp(q, theta, std::vector<double>{0, 1, 0});
  EXPECT_NEAR(hv[0], 0.0, 1e-6);
  EXPECT_NEAR(hv[1], 2.0, 1e-6);
  EXPECT_NEAR(hv[2], 0.0, 1e-6);
}

TEST(Hvp, LinearObjectiveIsZero) {
  const QuadraticObjective q(std::vector<double>(9, 0.0), 3, {1, -2, 5});
  const auto hv = hvp(q, std::vector<double>{4, 5, 6}, std::vector<double>{0.3, 1, -2});
  for (double x : hv) EXPECT_NEAR(x, 0.0, 1e-6);
}

TEST(Hvp, Rejections) {
  const QuadraticObjective q(diag({1, 2}), 2);
  EXPECT_THROW(hvp(q, std::vector<double>{0, 0}, std::vector<double>{0, 0}), std::invalid_argument);
  EXPECT_THROW(hvp(NonFiniteObjective{}, std::vector<double>{0, 0}, std::vector<double>{1, 0}), NumericError);
}

TEST(Hvp, SymmetricAndLinearOnSmallNet) {
  const auto net = small_net(tiny_config(), 3);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto u = gaussian(net.theta.size(), rng);
    const auto v = gaussian(net.theta.size(), rng);
    const auto hu = hvp(*net.objective, net.theta, u);
    const auto hv = hvp(*net.objective, net.theta, v);
    const double a = dot(hu, v), b = dot(u, hv);
    EXPECT_NEAR(a, b, 1e-4 * std::max(std::abs(a), std::abs(b)));

    const double alpha = 0.7, beta = -1.3;
    std::vector<double> w(u.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = alpha * u[i] + beta * v[i];
    const auto hw = hvp(*net.objective, net.theta, w);
    std::vector<double> combo(u.size()), diff(u.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      combo[i] = alpha * hu[i] + beta * hv[i];
      diff[i] = hw[i] - combo[i];
    }
    EXPECT_LT(norm(diff), 1e-4 * norm(combo));
  }
}

TEST(Spectrum, DiagonalQuadratic) {
  const QuadraticObjective q(diag({5, -3, 1}), 3);
  const auto s = top_k_eigs(q, std::vector<double>{0.1, 0.2, 0.3}, {.k = 3, .seed = 1});
  ASSERT_EQ(s.eigenvalues.size(), 3u);
  EXPECT_NEAR(s.eigenvalues[0], 5.0, 1e-4);
  EXPECT_NEAR(s.eigenvalues[1], -3.0, 1e-4);
  EXPECT_NEAR(s.eigenvalues[2], 1.0, 1e-4);
  EXPECT_TRUE(s.all_converged());
  for (double r : s.residuals) EXPECT_LT(r, 1e-4);
  EXPECT_LT(std::abs(dot(s.eigenvectors[0], s.eigenvectors[1])), 1e-6);
  EXPECT_THROW(top_k_eigs(q, std::vector<double>{0, 0, 0}, {.k = 0}), std::invalid_argument);
}

TEST(Spectrum, LargestOfPositiveDefinite) {
  const QuadraticObjective q(diag({0.5, 4.0, 2.0, 1.0}), 4);
  const auto s = top_k_eigs(q, std::vector<double>(4, 0.0), {.k = 1, .seed = 2});
  EXPECT_NEAR(s.eigenvalues[0], 4.0, 1e-4);
}

TEST(Spectrum, NonConvergenceIsFlagged) {
  const QuadraticObjective q(diag({1.0, -1.0, 0.5}), 3);
  const auto s = top_k_eigs(q, std::vector<double>(3, 0.0), {.k = 1, .tol = 1e-12, .max_iter = 3, .seed = 3});
  ASSERT_EQ(s.eigenvalues.size(), 1u);
  EXPECT_FALSE(s.converged[0]);
  EXPECT_FALSE(s.all_converged());
  EXPECT_EQ(s.iterations[0], 3);
}

TEST(Spectrum, MatchesDenseHessianOnSmallModel) {
  const auto net = small_net(tiny_config(), 7);
  const auto n = net.theta.size();
  ASSERT_LE(n, 50u);
  Eigen::MatrixXd h(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const double step = 1e-5;
  for (std::size_t j = 0; j < n; ++j) {
    auto up = net.theta, down = net.theta;
    up[j] += step;
    down[j] -= step;
    const auto gu = net.objective->gradient(up);
    const auto gd = net.objective->gradient(down);
    for (std::size_t i = 0; i < n; ++i) {
      h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (gu[i] - gd[i]) / (2 * step);
    }
  }
  const Eigen::MatrixXd sym = 0.5 * (h + h.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
  std::vector<double> dense(solver.eigenvalues().data(), solver.eigenvalues().data() + n);
  std::sort(dense.begin(), dense.end(), [](double a, double b) { return std::abs(a) > std::abs(b); });

  const auto s = top_k_eigs(*net.objective, net.theta, {.k = 5, .seed = 11});
  ASSERT_EQ(s.eigenvalues.size(), 5u);
  EXPECT_TRUE(s.all_converged());
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(s.eigenvalues[i], dense[i], 1e-4 * std::abs(dense[i])) << "eigenvalue " << i;
    if (i > 0) EXPECT_GE(std::abs(s.eigenvalues[i - 1]), std::abs(s.eigenvalues[i]));
  }
}

TEST(Landscape, GridInvariants) {
  const auto net = small_net(tiny_config(), 9);
  const LandscapeConfig cfg{.range = 1.0, .steps = 5, .seed = 3, .threads = 2};
  const auto g = landscape(*net.objective, net.theta, net.objective->blocks(), cfg);
  ASSERT_EQ(g.steps(), 5u);
  ASSERT_EQ(g.loss.size(), 25u);
  EXPECT_EQ(g.axis.front(), -1.0);
  EXPECT_EQ(g.axis[2], 0.0);
  EXPECT_EQ(g.axis.back(), 1.0);
  EXPECT_LT(std::abs(dot(g.d1, g.d2)), 1e-10);
  EXPECT_NEAR(norm(g.d1), 1.0, 1e-12);
  EXPECT_NEAR(norm(g.d2), 1.0, 1e-12);
  EXPECT_EQ(g.center(), net.objective->loss(net.theta));
  for (double v : g.loss) EXPECT_TRUE(std::isfinite(v));

  const auto again = landscape(*net.objective, net.theta, net.objective->blocks(), {.range = 1.0, .steps = 5, .seed = 3, .threads = 1});
  EXPECT_EQ(again.loss, g.loss);
  EXPECT_EQ(again.d1, g.d1);
  const auto other = landscape(*net.objective, net.theta, net.objective->blocks(), {.range = 1.0, .steps = 5, .seed = 4, .threads = 1});
  EXPECT_NE(other.d1, g.d1);

  const double probe = net.objective->loss([&] {
    auto t = net.theta;
    for (std::size_t k = 0; k < t.size(); ++k) t[k] += g.axis[4] * g.d1[k] + g.axis[1] * g.d2[k];
    return t;
  }());
  EXPECT_EQ(g.at(4, 1), probe);
  EXPECT_THROW(landscape(*net.objective, net.theta, net.objective->blocks(), {.steps = 4}), std::invalid_argument);
}

TEST(Penalty, Examples) {
  EXPECT_EQ(reg_penalty({{1, 2, 3}, {0, 0, 0}, {true, false, true}}), 4.0);
  EXPECT_EQ(reg_penalty({{1, 2, 3}, {1, 2, 3}, {false, false, false}}), 0.0);
  EXPECT_EQ(reg_penalty({{9, -2, 3}, {1, 2, 3}, {true, true, true}}), 0.0);
  EXPECT_THROW(reg_penalty({{1, 2}, {1}, {true, true}}), ShapeError);
}

TEST(ThreadCap, ReadsEnvironment) {
  ::setenv("SAFEFT_NUM_THREADS", "3", 1);
  EXPECT_EQ(thread_cap(), 3u);
  ::unsetenv("SAFEFT_NUM_THREADS");
  EXPECT_GE(thread_cap(), 1u);
}

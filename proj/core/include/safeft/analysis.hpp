#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "safeft/model.hpp"

namespace safeft {

/// Differentiable scalar function of a flat parameter vector.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t dim() const = 0;
  virtual double loss(std::span<const double> theta) const = 0;
  virtual std::vector<double> gradient(std::span<const double> theta) const = 0;
};

/// 0.5 theta^T A theta + b^T theta with a dense symmetric A.
class QuadraticObjective final : public Objective {
 public:
  QuadraticObjective(std::vector<double> a, std::size_t n, std::vector<double> b = {});
  std::size_t dim() const override { return n_; }
  double loss(std::span<const double> theta) const override;
  std::vector<double> gradient(std::span<const double> theta) const override;

 private:
  std::vector<double> a_;
  std::vector<double> b_;
  std::size_t n_;
};

/// Contiguous run of a flat vector that maps to one named parameter tensor.
struct ParameterBlock {
  std::string name;
  std::size_t offset;
  std::size_t size;
};

/// Evaluation-mode loss of a model over fixed batches, as a function of a
/// subset of its parameters. Every call works on a private copy of the model,
/// so concurrent evaluation is safe.
class ModelObjective final : public Objective {
 public:
  ModelObjective(const Model& model, std::vector<std::string> names, std::vector<Batch> batches);

  /// All adapter factors plus the head.
  static std::vector<std::string> adapter_and_head_names(const Model& model);

  std::size_t dim() const override { return dim_; }
  double loss(std::span<const double> theta) const override;
  std::vector<double> gradient(std::span<const double> theta) const override;

  std::vector<double> flatten() const;
  const std::vector<ParameterBlock>& blocks() const noexcept { return blocks_; }

 private:
  Model with_theta(std::span<const double> theta) const;

  Model model_;
  std::vector<std::string> names_;
  std::vector<Batch> batches_;
  std::vector<ParameterBlock> blocks_;
  std::size_t dim_ = 0;
};

/// Hessian-vector product by a central difference of gradients with
/// step 1e-4 * (1 + ||theta||) / ||v||.
std::vector<double> hvp(const Objective& objective, std::span<const double> theta, std::span<const double> v);

struct Spectrum {
  std::vector<double> eigenvalues;
  /// ||Hv - lambda v|| / |lambda| of each Ritz pair.
  std::vector<double> residuals;
  /// Power-iteration steps of the i-th deflation stage.
  std::vector<int> iterations;
  std::vector<bool> converged;
  std::vector<std::vector<double>> eigenvectors;

  bool all_converged() const;
};

struct PowerIterationConfig {
  int k = 5;
  double tol = 1e-4;
  int max_iter = 200;
  std::uint64_t seed = 0;
};

/// Top-k eigenpairs by magnitude via power iteration on the HVP with
/// deflation, refined by Rayleigh-Ritz over the collected basis.
/// Non-converged pairs are kept with their residuals and flagged.
Spectrum top_k_eigs(const Objective& objective, std::span<const double> theta, const PowerIterationConfig& config);

struct LandscapeGrid {
  std::vector<double> axis;
  /// loss[i * n + j] at theta + axis[i] d1 + axis[j] d2
  std::vector<double> loss;
  std::vector<double> d1;
  std::vector<double> d2;

  std::size_t steps() const noexcept { return axis.size(); }
  double at(std::size_t i, std::size_t j) const { return loss[i * axis.size() + j]; }
  double center() const { return at(axis.size() / 2, axis.size() / 2); }
};

struct LandscapeConfig {
  double range = 1.0;
  int steps = 11;
  std::uint64_t seed = 0;
  /// 0 picks the process-wide thread cap.
  unsigned threads = 0;
};

/// Two random directions, each block rescaled to its parameter block's norm,
/// orthonormalized, then swept on an odd n x n grid over [-range, range]^2.
LandscapeGrid landscape(const Objective& objective, std::span<const double> theta,
                        std::span<const ParameterBlock> blocks, const LandscapeConfig& config);

struct MaskedDelta {
  std::vector<double> theta;
  std::vector<double> theta0;
  /// 1 marks an active (trainable) coordinate.
  std::vector<bool> active;
};

/// ||(I - M)(theta - theta0)||^2.
double reg_penalty(const MaskedDelta& delta);

/// Thread cap from SAFEFT_NUM_THREADS, else hardware concurrency (>= 1).
unsigned thread_cap();

}  // namespace safeft

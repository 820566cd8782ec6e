#include "safeft/importance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "kernels.hpp"

namespace safeft {

namespace {

double frobenius_sq(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

Tensor centered(const Tensor& x, bool center) {
  Tensor out = x;
  if (!center) return out;
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += x[r * d + c];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] -= mean[c];
  }
  return out;
}

// ||A^T B||_F^2 for A (n x p), B (n x q).
double cross_frobenius_sq(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), p = a.cols(), q = b.cols();
  std::vector<double> prod(p * q);
  kernels::gemm(a.raw(), b.raw(), prod.data(), p, n, q, true, false);
  return frobenius_sq(prod);
}

}  // namespace

std::optional<double> cka(const Tensor& x, const Tensor& y, CkaOptions options) {
  if (x.rank() != 2 || y.rank() != 2 || x.shape() != y.shape()) {
    throw ShapeError("cka: activation shapes differ: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  }
  if (x.rows() < 2) throw ShapeError("cka: need at least two rows");
  if (!x.all_finite() || !y.all_finite()) throw NumericError("cka: non-finite activations");

  const Tensor xc = centered(x, options.center);
  const Tensor yc = centered(y, options.center);
  constexpr double rel_tol = 1e-12;
  const double xn = frobenius_sq(xc.data());
  const double yn = frobenius_sq(yc.data());
  if (xn <= rel_tol * rel_tol * frobenius_sq(x.data()) || xn == 0.0) return std::nullopt;
  if (yn <= rel_tol * rel_tol * frobenius_sq(y.data()) || yn == 0.0) return std::nullopt;

  const double xx = cross_frobenius_sq(xc, xc);
  const double yy = cross_frobenius_sq(yc, yc);
  const double yx = cross_frobenius_sq(yc, xc);
  if (!(xx > 0.0) || !(yy > 0.0)) return std::nullopt;
  // sqrt(s * s) == s exactly, so identical inputs score exactly 1.
  const double prod = xx * yy;
  const double denom = std::isfinite(prod) ? std::sqrt(prod) : std::sqrt(xx) * std::sqrt(yy);
  const double value = yx / denom;
  if (!std::isfinite(value)) return std::nullopt;
  return value;
}

std::optional<double> importance_score(const Tensor& adapted, const Tensor& original, CkaOptions options) {
  auto c = cka(adapted, original, options);
  if (!c) return std::nullopt;
  return std::clamp(1.0 - *c, 0.0, 1.0);
}

double relative_change(double previous, double current, double floor) {
  return std::abs(current - previous) / std::max(previous, floor);
}

Tensor stack_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack_rows: nothing to stack");
  const std::size_t d = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw ShapeError("stack_rows: column mismatch");
    rows += p.rows();
  }
  Tensor out(Shape{rows, d});
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(at));
    at += p.numel();
  }
  return out;
}

ImportanceRecord epoch_importances(const Model& model, std::span<const Batch> probe, int epoch,
                                   const ImportanceRecord* previous, CkaOptions options) {
  if (probe.empty()) throw std::invalid_argument("epoch_importances: empty probe set");
  const auto layers = static_cast<std::size_t>(model.n_layers());
  std::vector<std::vector<Tensor>> adapted(layers), original(layers);
  for (const auto& batch : probe) {
    auto trace = model.dual_forward(batch);
    for (std::size_t i = 0; i < layers; ++i) {
      adapted[i].push_back(std::move(trace.adapted[i]));
      original[i].push_back(std::move(trace.original[i]));
    }
  }
  ImportanceRecord record;
  record.epoch = epoch;
  for (std::size_t i = 0; i < layers; ++i) {
    record.scores.push_back(importance_score(stack_rows(adapted[i]), stack_rows(original[i]), options));
  }
  if (previous) {
    for (std::size_t i = 0; i < layers; ++i) {
      record.relative_change.push_back(relative_change(previous->effective(i), record.effective(i)));
    }
  }
  return record;
}

TrajectoryGrid trajectory_similarity(std::span<const EpochModel> checkpoints, const Model& final_model,
                                     std::span<const Batch> probe, CkaOptions options) {
  if (probe.empty()) throw std::invalid_argument("trajectory_similarity: empty probe set");
  const auto layers = static_cast<std::size_t>(final_model.n_layers());
  auto collect = [&](const Model& m) {
    std::vector<std::vector<Tensor>> parts(layers);
    for (const auto& batch : probe) {
      auto outs = m.layer_outputs(batch);
      for (std::size_t i = 0; i < layers; ++i) parts[i].push_back(std::move(outs[i]));
    }
    std::vector<Tensor> stacked;
    for (auto& p : parts) stacked.push_back(stack_rows(p));
    return stacked;
  };
  const auto reference = collect(final_model);
  TrajectoryGrid grid;
  for (const auto& cp : checkpoints) {
    if (!(cp.model->config() == final_model.config())) {
      throw std::invalid_argument("trajectory_similarity: checkpoint for epoch " + std::to_string(cp.epoch) +
                                  " has a different model config");
    }
    const auto acts = collect(*cp.model);
    std::vector<double> row;
    for (std::size_t i = 0; i < layers; ++i) {
      row.push_back(cka(acts[i], reference[i], options).value_or(std::numeric_limits<double>::quiet_NaN()));
    }
    grid.epochs.push_back(cp.epoch);
    grid.similarity.push_back(std::move(row));
  }
  return grid;
}

}  // namespace safeft

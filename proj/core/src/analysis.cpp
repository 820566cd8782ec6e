#include "safeft/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>

namespace safeft {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void scale_in_place(std::span<double> x, double s) {
  for (double& v : x) v *= s;
}

void project_out(std::span<double> v, const std::vector<std::vector<double>>& basis) {
  for (const auto& u : basis) axpy(-dot(u, v), u, v);
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

}  // namespace

QuadraticObjective::QuadraticObjective(std::vector<double> a, std::size_t n, std::vector<double> b)
    : a_(std::move(a)), b_(std::move(b)), n_(n) {
  if (a_.size() != n * n) throw ShapeError("quadratic: matrix size does not match dim");
  if (b_.empty()) b_.assign(n, 0.0);
  if (b_.size() != n) throw ShapeError("quadratic: linear term size does not match dim");
}

double QuadraticObjective::loss(std::span<const double> theta) const {
  const auto g = gradient(theta);
  double s = 0.0;
  for (std::size_t i = 0; i < n_; ++i) s += theta[i] * (0.5 * (g[i] - b_[i]) + b_[i]);
  return s;
}

std::vector<double> QuadraticObjective::gradient(std::span<const double> theta) const {
  if (theta.size() != n_) throw ShapeError("quadratic: theta has the wrong size");
  std::vector<double> g(b_);
  for (std::size_t i = 0; i < n_; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n_; ++j) s += a_[i * n_ + j] * theta[j];
    g[i] += s;
  }
  return g;
}

ModelObjective::ModelObjective(const Model& model, std::vector<std::string> names, std::vector<Batch> batches)
    : model_(model.clone()), names_(std::move(names)), batches_(std::move(batches)) {
  if (batches_.empty()) throw std::invalid_argument("model objective needs at least one batch");
  for (int i = 0; i < model_.n_layers(); ++i) model_.set_adapter(i, AdapterState{});
  for (const auto& name : names_) {
    const auto n = model_.parameter(name).value->numel();
    blocks_.push_back(ParameterBlock{name, dim_, n});
    dim_ += n;
  }
}

std::vector<std::string> ModelObjective::adapter_and_head_names(const Model& model) {
  std::vector<std::string> names;
  for (int i = 0; i < model.n_layers(); ++i) {
    for (auto& n : model.adapter_parameter_names(i)) names.push_back(std::move(n));
  }
  names.push_back(param_names::head_weight);
  names.push_back(param_names::head_bias);
  return names;
}

std::vector<double> ModelObjective::flatten() const {
  std::vector<double> out;
  out.reserve(dim_);
  for (const auto& b : blocks_) {
    const auto data = model_.parameter(b.name).value->data();
    out.insert(out.end(), data.begin(), data.end());
  }
  return out;
}

Model ModelObjective::with_theta(std::span<const double> theta) const {
  if (theta.size() != dim_) throw ShapeError("model objective: theta has the wrong size");
  Model m = model_.clone();
  for (const auto& b : blocks_) {
    auto data = m.mutable_value(b.name).data();
    std::copy_n(theta.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size, data.begin());
  }
  return m;
}

double ModelObjective::loss(std::span<const double> theta) const {
  return evaluate(with_theta(theta), batches_).loss;
}

std::vector<double> ModelObjective::gradient(std::span<const double> theta) const {
  const Model m = with_theta(theta);
  std::vector<double> g(dim_, 0.0);
  std::size_t examples = 0;
  ForwardOptions opts;
  opts.training = false;
  opts.cut_layer = 0;
  for (const auto& batch : batches_) {
    auto r = m.forward(batch, opts);
    const auto grads = r.tape.backward(r.loss);
    const double w = static_cast<double>(batch.size);
    for (const auto& b : blocks_) {
      const auto it = grads.find(b.name);
      if (it == grads.end()) throw std::logic_error("model objective: missing gradient for " + b.name);
      const auto data = it->second.data();
      for (std::size_t i = 0; i < b.size; ++i) g[b.offset + i] += w * data[i];
    }
    examples += batch.size;
  }
  scale_in_place(g, 1.0 / static_cast<double>(examples));
  return g;
}

std::vector<double> hvp(const Objective& objective, std::span<const double> theta, std::span<const double> v) {
  if (theta.size() != objective.dim() || v.size() != objective.dim()) throw ShapeError("hvp: dimension mismatch");
  const double vn = norm(v);
  if (!(vn > 0.0)) throw std::invalid_argument("hvp: direction must be nonzero");
  const double eps = 1e-4 * (1.0 + norm(theta)) / vn;
  std::vector<double> plus(theta.begin(), theta.end());
  std::vector<double> minus(theta.begin(), theta.end());
  axpy(eps, v, plus);
  axpy(-eps, v, minus);
  const auto gp = objective.gradient(plus);
  const auto gm = objective.gradient(minus);
  check_finite(gp, "hvp gradient");
  check_finite(gm, "hvp gradient");
  std::vector<double> out(gp.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps);
  return out;
}

bool Spectrum::all_converged() const {
  return std::all_of(converged.begin(), converged.end(), [](bool c) { return c; });
}

Spectrum top_k_eigs(const Objective& objective, std::span<const double> theta, const PowerIterationConfig& config) {
  if (config.k < 1) throw std::invalid_argument("top_k_eigs: k must be >= 1");
  if (config.max_iter < 1) throw std::invalid_argument("top_k_eigs: max_iter must be >= 1");
  const std::size_t n = objective.dim();
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(config.k), n);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Spectrum out;
  std::vector<std::vector<double>> basis;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> v(n);
    for (double& x : v) x = normal(rng);
    project_out(v, basis);
    project_out(v, basis);
    scale_in_place(v, 1.0 / norm(v));

    double lambda = 0.0, residual = INFINITY;
    int it = 0;
    bool ok = false;
    while (it < config.max_iter) {
      ++it;
      auto w = hvp(objective, theta, v);
      lambda = dot(v, w);
      std::vector<double> r(w);
      axpy(-lambda, v, r);
      residual = std::abs(lambda) > 0.0 ? norm(r) / std::abs(lambda) : INFINITY;
      if (residual < config.tol) {
        ok = true;
        break;
      }
      project_out(w, basis);
      const double wn = norm(w);
      if (!(wn > 0.0)) break;
      scale_in_place(w, 1.0 / wn);
      v = std::move(w);
    }
    out.iterations.push_back(it);
    out.converged.push_back(ok);
    basis.push_back(std::move(v));
  }

  // Rayleigh-Ritz over the deflation basis removes the leakage of each
  // accepted vector into the later ones.
  for (std::size_t j = 0; j < k; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) axpy(-dot(basis[i], basis[j]), basis[i], basis[j]);
    }
    scale_in_place(basis[j], 1.0 / norm(basis[j]));
  }
  std::vector<std::vector<double>> images;
  images.reserve(k);
  for (const auto& b : basis) images.push_back(hvp(objective, theta, b));
  const auto kk = static_cast<Eigen::Index>(k);
  Eigen::MatrixXd t(kk, kk);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      t(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          0.5 * (dot(basis[i], images[j]) + dot(basis[j], images[i]));
    }
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(t);
  for (std::size_t c = 0; c < k; ++c) {
    const double theta_c = solver.eigenvalues()(static_cast<Eigen::Index>(c));
    std::vector<double> y(n, 0.0), hy(n, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const double w = solver.eigenvectors()(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
      axpy(w, basis[j], y);
      axpy(w, images[j], hy);
    }
    axpy(-theta_c, y, hy);
    const double residual = std::abs(theta_c) > 0.0 ? norm(hy) / std::abs(theta_c) : INFINITY;
    out.eigenvalues.push_back(theta_c);
    out.residuals.push_back(residual);
    out.eigenvectors.push_back(std::move(y));
  }

  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(out.eigenvalues[a]) > std::abs(out.eigenvalues[b]);
  });
  Spectrum sorted;
  for (std::size_t rank = 0; rank < k; ++rank) {
    const auto i = order[rank];
    sorted.eigenvalues.push_back(out.eigenvalues[i]);
    sorted.residuals.push_back(out.residuals[i]);
    sorted.iterations.push_back(out.iterations[rank]);
    sorted.converged.push_back(out.residuals[i] < config.tol);
    sorted.eigenvectors.push_back(std::move(out.eigenvectors[i]));
  }
  return sorted;
}

unsigned thread_cap() {
  if (const char* env = std::getenv("SAFEFT_NUM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

LandscapeGrid landscape(const Objective& objective, std::span<const double> theta,
                        std::span<const ParameterBlock> blocks, const LandscapeConfig& config) {
  if (config.steps < 1 || config.steps % 2 == 0) throw std::invalid_argument("landscape: steps must be odd");
  if (!(config.range > 0.0)) throw std::invalid_argument("landscape: range must be positive");
  const std::size_t n = objective.dim();
  if (theta.size() != n) throw ShapeError("landscape: theta has the wrong size");

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&]() {
    std::vector<double> d(n);
    for (double& x : d) x = normal(rng);
    for (const auto& b : blocks) {
      auto db = std::span<double>(d).subspan(b.offset, b.size);
      const double pn = norm(theta.subspan(b.offset, b.size));
      const double dn = norm(db);
      if (dn > 0.0) scale_in_place(db, pn / dn);
    }
    // Blocks whose parameters are all zero leave nothing; fall back to the raw draw.
    if (!(norm(d) > 0.0)) {
      for (double& x : d) x = normal(rng);
    }
    return d;
  };

  LandscapeGrid grid;
  grid.d1 = draw();
  grid.d2 = draw();
  scale_in_place(grid.d1, 1.0 / norm(grid.d1));
  for (int pass = 0; pass < 2; ++pass) axpy(-dot(grid.d1, grid.d2), grid.d1, grid.d2);
  scale_in_place(grid.d2, 1.0 / norm(grid.d2));

  const auto steps = static_cast<std::size_t>(config.steps);
  const std::size_t mid = steps / 2;
  grid.axis.resize(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    grid.axis[i] = config.range * (static_cast<double>(i) - static_cast<double>(mid)) / static_cast<double>(mid ? mid : 1);
  }
  grid.axis[mid] = 0.0;
  grid.loss.assign(steps * steps, 0.0);

  auto eval_point = [&](std::size_t idx) {
    const std::size_t i = idx / steps, j = idx % steps;
    if (i == mid && j == mid) {
      grid.loss[idx] = objective.loss(theta);
      return;
    }
    std::vector<double> p(theta.begin(), theta.end());
    axpy(grid.axis[i], grid.d1, p);
    axpy(grid.axis[j], grid.d2, p);
    grid.loss[idx] = objective.loss(p);
  };

  const unsigned threads = std::min<unsigned>(config.threads ? config.threads : thread_cap(),
                                                static_cast<unsigned>(steps * steps));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    for (std::size_t idx = next++; idx < steps * steps; idx = next++) {
      try {
        eval_point(idx);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return grid;
}

double reg_penalty(const MaskedDelta& delta) {
  if (delta.theta.size() != delta.theta0.size() || delta.theta.size() != delta.active.size()) {
    throw ShapeError("reg_penalty: dimension mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < delta.theta.size(); ++i) {
    if (delta.active[i]) continue;
    const double d = delta.theta[i] - delta.theta0[i];
    s += d * d;
  }
  return s;
}

}  // namespace safeft

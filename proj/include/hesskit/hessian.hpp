#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hesskit/autodiff.hpp"
#include "hesskit/model.hpp"
#include "hesskit/parallel.hpp"
#include "hesskit/rng.hpp"

namespace hesskit {

// ---------------------------------------------------------------------------
// Exact blocks
// ---------------------------------------------------------------------------

struct BlockMeta {
  std::string subset;        // description of the restriction
  std::int64_t batch = 0;    // samples the loss was built over
  std::uint64_t seed = 0;    // model seed
  std::string reduction = "sum";  // "sum" (canonical) or "mean" (sum / batch)
  double wall_ms = 0.0;
  std::size_t engine_bytes = 0;  // per-evaluation engine footprint
};

/// Dense symmetric Hessian over a restricted coordinate set, with the map
/// back to (layer, flat offset) coordinates.
struct HessianBlock {
  Tensor H;  // [m, m]
  IndexMap index_map;
  BlockMeta meta;

  std::int64_t dim() const { return H.shape.empty() ? 0 : H.shape[0]; }

  std::vector<double> diagonal() const {
    const std::int64_t m = dim();
    std::vector<double> d(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) d[static_cast<std::size_t>(i)] = H.at(i, i);
    return d;
  }
};

/// Exact dense Hessian of f at u0. Columns are independent HVPs and are
/// computed in parallel; the result is identical for any thread count.
inline HessianBlock exact_block(const ScalarFunction& f, std::span<const double> u0,
                                IndexMap index_map = {}, const HessianOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  HessianBlock block;
  block.H = exact_hessian(f, u0, opts);
  block.index_map = std::move(index_map);
  const Graph g = record(f);
  block.meta.engine_bytes = Executor<Dual64>(g).buffer_bytes();
  block.meta.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return block;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Four-point mixed-partial finite difference:
///   H_ij ~ [f(u + h_i e_i + h_j e_j) - f(u + h_i e_i) - f(u + h_j e_j) + f(u)] / (h_i h_j).
/// Exactly symmetric by construction. Costs m(m+3)/2 + 1 evaluations; the
/// single-perturbation values are computed once and cached.
inline Tensor fd_hessian_steps(const ScalarFunction& f, std::span<const double> u0,
                               std::span<const double> steps) {
  const std::int64_t m = static_cast<std::int64_t>(f.dim);
  if (static_cast<std::int64_t>(u0.size()) != m || static_cast<std::int64_t>(steps.size()) != m)
    throw std::invalid_argument("fd_hessian: dimension mismatch");
  for (double h : steps)
    if (!(h > 0.0)) throw std::invalid_argument("fd_hessian: step must be positive");

  CompiledFunction cf(f);
  std::vector<double> w(u0.begin(), u0.end());
  const double f0 = cf.value(w);

  std::vector<double> single(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    w[static_cast<std::size_t>(i)] = u0[static_cast<std::size_t>(i)] + steps[static_cast<std::size_t>(i)];
    single[static_cast<std::size_t>(i)] = cf.value(w);
    w[static_cast<std::size_t>(i)] = u0[static_cast<std::size_t>(i)];
  }

  Tensor H = Tensor::zeros({m, m});
  for (std::int64_t i = 0; i < m; ++i) {
    const double hi = steps[static_cast<std::size_t>(i)];
    for (std::int64_t j = i; j < m; ++j) {
      const double hj = steps[static_cast<std::size_t>(j)];
      w[static_cast<std::size_t>(i)] += hi;
      w[static_cast<std::size_t>(j)] += hj;
      const double fij = cf.value(w);
      w[static_cast<std::size_t>(i)] = u0[static_cast<std::size_t>(i)];
      w[static_cast<std::size_t>(j)] = u0[static_cast<std::size_t>(j)];
      const double est = (fij - single[static_cast<std::size_t>(i)] -
                          single[static_cast<std::size_t>(j)] + f0) /
                         (hi * hj);
      H.at(i, j) = est;
      H.at(j, i) = est;
    }
  }
  return H;
}

/// Uniform-step variant (the formula as quoted, one h for all coordinates).
inline Tensor fd_hessian(const ScalarFunction& f, std::span<const double> u0, double h) {
  std::vector<double> steps(f.dim, h);
  return fd_hessian_steps(f, u0, steps);
}

/// Default per-coordinate step eps^(1/4) * (1 + |u0_i|), the standard
/// truncation/roundoff balance for second differences.
inline Tensor fd_hessian_auto(const ScalarFunction& f, std::span<const double> u0) {
  const double base = std::pow(std::numeric_limits<double>::epsilon(), 0.25);
  std::vector<double> steps(f.dim);
  for (std::size_t i = 0; i < f.dim; ++i) steps[i] = base * (1.0 + std::fabs(u0[i]));
  return fd_hessian_steps(f, u0, steps);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace detail {

inline double l2_norm(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc);
}

inline double l2_diff(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace detail

/// ||(est - truth) on slice||_2 / ||truth on slice||_2.
inline double partial_relative_l2_loss(std::span<const double> est, std::span<const double> truth,
                                       std::span<const std::int64_t> slice) {
  if (slice.empty()) throw std::invalid_argument("partial_relative_l2_loss: empty slice");
  double num = 0.0, den = 0.0;
  for (std::int64_t i : slice) {
    if (i < 0 || i >= static_cast<std::int64_t>(est.size()) ||
        i >= static_cast<std::int64_t>(truth.size()))
      throw std::invalid_argument("partial_relative_l2_loss: slice index out of range");
    const double d = est[static_cast<std::size_t>(i)] - truth[static_cast<std::size_t>(i)];
    num += d * d;
    den += truth[static_cast<std::size_t>(i)] * truth[static_cast<std::size_t>(i)];
  }
  if (den == 0.0) throw std::invalid_argument("partial_relative_l2_loss: zero-norm truth slice");
  return std::sqrt(num) / std::sqrt(den);
}

/// ||next - prev||_2 / ||next||_2.
inline double relative_l2_difference(std::span<const double> prev, std::span<const double> next) {
  if (prev.size() != next.size())
    throw std::invalid_argument("relative_l2_difference: length mismatch");
  const double den = detail::l2_norm(next);
  if (den == 0.0) throw std::invalid_argument("relative_l2_difference: zero-norm next");
  return detail::l2_diff(next, prev) / den;
}

/// ||H_b - H_ref|| / ||H_ref|| over flattened entries (Frobenius).
inline double relative_frobenius_loss(const Tensor& Hb, const Tensor& Href) {
  if (!same_shape(Hb.shape, Href.shape))
    throw std::invalid_argument("relative_frobenius_loss: shape mismatch");
  const double den = detail::l2_norm(Href.data);
  if (den == 0.0) throw std::invalid_argument("relative_frobenius_loss: zero-norm reference");
  return detail::l2_diff(Hb.data, Href.data) / den;
}

/// ||next - prev|| / ||next|| over flattened entries.
inline double relative_frobenius_difference(const Tensor& prev, const Tensor& next) {
  if (!same_shape(prev.shape, next.shape))
    throw std::invalid_argument("relative_frobenius_difference: shape mismatch");
  const double den = detail::l2_norm(next.data);
  if (den == 0.0) throw std::invalid_argument("relative_frobenius_difference: zero-norm next");
  return detail::l2_diff(next.data, prev.data) / den;
}

// ---------------------------------------------------------------------------
// Hutchinson diagonal estimation
// ---------------------------------------------------------------------------

enum class ProbeDistribution { rademacher, gaussian };

inline const char* probe_distribution_name(ProbeDistribution d) {
  return d == ProbeDistribution::rademacher ? "rademacher" : "gaussian";
}

/// Known diagonal entries used to score the estimate while it runs:
/// `indices` are coordinates of the estimated vector, `values` the exact
/// diagonal there.
struct TruthSlice {
  std::vector<std::int64_t> indices;
  std::vector<double> values;
};

/// Running Hutchinson mean over K probes plus per-iteration history.
struct DiagEstimate {
  std::vector<double> running_mean;       // (1/K) sum of v .* (H v)
  std::int64_t probes_done = 0;
  std::vector<double> rel_diff_history;   // entry k-1: ||mean_k - mean_{k-1}|| / ||mean_k||
  std::vector<double> rel_loss_history;   // vs truth slice; empty when no truth given
  std::uint64_t seed = 0;
};

struct HutchinsonOptions {
  int threads = 0;
  std::int64_t chunk = 256;  // probes evaluated in parallel per round
};

/// Probe k of a seeded sequence; each probe has its own substream, so any
/// prefix or parallel schedule sees the same vectors.
inline void fill_probe(std::span<double> v, ProbeDistribution dist, std::uint64_t seed,
                       std::int64_t probe_index) {
  Rng rng(substream_seed(seed, static_cast<std::uint64_t>(probe_index)));
  if (dist == ProbeDistribution::rademacher) {
    for (double& x : v) x = rng.rademacher();
  } else {
    for (double& x : v) x = rng.normal();
  }
}

/// Hutchinson's estimator driven by an arbitrary HVP oracle. `hvp_fn` must
/// be safe to call from several threads at once. Probe i draws from the
/// (seed, i) substream and the running mean is reduced in probe order, so
/// the result is bitwise reproducible for any thread count.
inline DiagEstimate hutchinson_diag_fn(
    const std::function<std::vector<double>(std::span<const double>)>& hvp_fn, std::int64_t m,
    std::int64_t K, ProbeDistribution dist, std::uint64_t seed, const TruthSlice* truth = nullptr,
    const HutchinsonOptions& opts = {}) {
  if (K < 1) throw std::invalid_argument("hutchinson_diag: K must be >= 1");
  if (truth && (truth->indices.size() != truth->values.size() || truth->indices.empty()))
    throw std::invalid_argument("hutchinson_diag: malformed truth slice");

  DiagEstimate est;
  est.seed = seed;
  est.running_mean.assign(static_cast<std::size_t>(m), 0.0);
  est.rel_diff_history.reserve(static_cast<std::size_t>(K));
  if (truth) est.rel_loss_history.reserve(static_cast<std::size_t>(K));

  std::vector<double> sum(static_cast<std::size_t>(m), 0.0);
  std::vector<double> prev_mean(static_cast<std::size_t>(m), 0.0);
  std::vector<double> mean(static_cast<std::size_t>(m), 0.0);

  const std::int64_t chunk = std::max<std::int64_t>(1, opts.chunk);
  std::vector<double> results;  // chunk x m, probe-major
  for (std::int64_t k0 = 0; k0 < K; k0 += chunk) {
    const std::int64_t count = std::min(chunk, K - k0);
    results.assign(static_cast<std::size_t>(count * m), 0.0);
    parallel_ranges(count, opts.threads, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<double> probe(static_cast<std::size_t>(m));
      for (std::int64_t r = lo; r < hi; ++r) {
        fill_probe(probe, dist, seed, k0 + r);
        const std::vector<double> hv = hvp_fn(probe);
        double* out = results.data() + r * m;
        for (std::int64_t i = 0; i < m; ++i)
          out[i] = probe[static_cast<std::size_t>(i)] * hv[static_cast<std::size_t>(i)];
      }
    });
    // Fixed-order reduction: probe k joins the mean as (1/k) * running sum.
    for (std::int64_t r = 0; r < count; ++r) {
      const double* contrib = results.data() + r * m;
      const std::int64_t k = k0 + r + 1;
      for (std::int64_t i = 0; i < m; ++i) sum[static_cast<std::size_t>(i)] += contrib[i];
      for (std::int64_t i = 0; i < m; ++i)
        mean[static_cast<std::size_t>(i)] = sum[static_cast<std::size_t>(i)] / static_cast<double>(k);
      est.rel_diff_history.push_back(relative_l2_difference(prev_mean, mean));
      if (truth) {
        double num = 0.0, den = 0.0;
        for (std::size_t s = 0; s < truth->indices.size(); ++s) {
          const double d = mean[static_cast<std::size_t>(truth->indices[s])] - truth->values[s];
          num += d * d;
          den += truth->values[s] * truth->values[s];
        }
        if (den == 0.0) throw std::invalid_argument("hutchinson_diag: zero-norm truth slice");
        est.rel_loss_history.push_back(std::sqrt(num) / std::sqrt(den));
      }
      std::swap(prev_mean, mean);
    }
  }
  est.running_mean = prev_mean;  // last written mean
  est.probes_done = K;
  return est;
}

/// Hutchinson's estimator for the Hessian diagonal of f at u0.
inline DiagEstimate hutchinson_diag(const ScalarFunction& f, std::span<const double> u0,
                                    std::int64_t K, ProbeDistribution dist, std::uint64_t seed,
                                    const TruthSlice* truth = nullptr,
                                    const HutchinsonOptions& opts = {}) {
  detail::check_dim(f, u0.size(), "hutchinson_diag");
  const Graph g = record(f);
  const std::vector<double> w(u0.begin(), u0.end());
  const auto hvp_fn = [&g, &w](std::span<const double> v) {
    Executor<Dual64> ex(g);
    std::vector<Dual64> scratch;
    std::vector<double> out(w.size());
    detail::hvp_into(ex, w, v, scratch, out.data(), 1);
    return out;
  };
  return hutchinson_diag_fn(hvp_fn, static_cast<std::int64_t>(f.dim), K, dist, seed, truth, opts);
}

}  // namespace hesskit

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "hesskit/errors.hpp"
#include "hesskit/executor.hpp"
#include "hesskit/graph.hpp"
#include "hesskit/parallel.hpp"

namespace hesskit {

/// A pure scalar-valued function of a flat parameter vector, given as a
/// recipe that records its computation onto a Graph. Evaluation, gradients,
/// Hessian-vector products and dense Hessians all replay the same record.
struct ScalarFunction {
  std::size_t dim = 0;
  std::function<NodeId(Graph&, NodeId)> build;
};

inline Graph record(const ScalarFunction& f) {
  Graph g;
  const NodeId in = g.input(static_cast<std::int64_t>(f.dim));
  g.set_output(f.build(g, in));
  return g;
}

namespace detail {

inline void check_dim(const ScalarFunction& f, std::size_t got, const char* who) {
  if (got != f.dim)
    throw std::invalid_argument(std::string(who) + ": vector has length " + std::to_string(got) +
                                ", function dimension is " + std::to_string(f.dim));
}

template <typename S>
void throw_if_nonfinite(const Executor<S>& ex, const char* who) {
  throw NumericalError(std::string(who) + ": non-finite value produced by " +
                       ex.find_nonfinite());
}

}  // namespace detail

/// Evaluates f(w).
inline double evaluate(const ScalarFunction& f, std::span<const double> w) {
  detail::check_dim(f, w.size(), "evaluate");
  const Graph g = record(f);
  Executor<double> ex(g);
  const double y = ex.run(w);
  if (!std::isfinite(y)) detail::throw_if_nonfinite(ex, "evaluate");
  return y;
}

/// Exact gradient by one reverse pass over the record.
inline std::vector<double> gradient(const ScalarFunction& f, std::span<const double> w) {
  detail::check_dim(f, w.size(), "gradient");
  const Graph g = record(f);
  Executor<double> ex(g);
  const double y = ex.run(w);
  if (!std::isfinite(y)) detail::throw_if_nonfinite(ex, "gradient");
  ex.backward();
  std::vector<double> out(ex.input_gradient().begin(), ex.input_gradient().end());
  for (double x : out)
    if (!std::isfinite(x)) detail::throw_if_nonfinite(ex, "gradient");
  return out;
}

namespace detail {

/// HVP on an existing dual executor; the tangent seed is v.
inline void hvp_into(Executor<Dual64>& ex, std::span<const double> w, std::span<const double> v,
                     std::vector<Dual64>& scratch, double* out, std::size_t stride) {
  scratch.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) scratch[i] = Dual64(w[i], v[i]);
  const Dual64 y = ex.run(scratch);
  if (!all_finite(y)) throw_if_nonfinite(ex, "hvp");
  ex.backward();
  const auto grad = ex.input_gradient();
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!all_finite(grad[i])) throw_if_nonfinite(ex, "hvp");
    out[i * stride] = grad[i].t;
  }
}

}  // namespace detail

/// One-shot HVP against an already recorded graph. Owns its executor, so it
/// may be called concurrently on the same (read-only) graph from any number
/// of threads.
inline std::vector<double> hvp_on_graph(const Graph& g, std::span<const double> w,
                                        std::span<const double> v) {
  Executor<Dual64> ex(g);
  std::vector<Dual64> scratch;
  std::vector<double> out(w.size());
  detail::hvp_into(ex, w, v, scratch, out.data(), 1);
  return out;
}

/// Hessian-vector product H(w)*v without materializing H: the gradient is
/// computed in dual arithmetic with tangent seed v, and the tangent of the
/// gradient is H*v.
inline std::vector<double> hvp(const ScalarFunction& f, std::span<const double> w,
                               std::span<const double> v) {
  detail::check_dim(f, w.size(), "hvp");
  detail::check_dim(f, v.size(), "hvp");
  const Graph g = record(f);
  return hvp_on_graph(g, w, v);
}

struct HessianOptions {
  std::size_t dense_cap = 4096;  // refuse dense Hessians above this dimension
  int threads = 0;               // 0: HESSKIT_THREADS env, then hardware
};

/// Dense d x d Hessian assembled column by column from HVPs against unit
/// vectors: d gradient-sized passes, so cost and memory grow with d^2 and
/// the dimension is capped. The raw result is returned; symmetry is a
/// property checked by tests, not enforced here.
inline Tensor exact_hessian(const ScalarFunction& f, std::span<const double> w,
                            const HessianOptions& opts = {}) {
  detail::check_dim(f, w.size(), "exact_hessian");
  const std::int64_t d = static_cast<std::int64_t>(f.dim);
  if (f.dim > opts.dense_cap)
    throw CapExceededError("exact_hessian: dimension " + std::to_string(d) +
                           " exceeds dense cap " + std::to_string(opts.dense_cap));
  const Graph g = record(f);
  Tensor H = Tensor::zeros({d, d});
  parallel_ranges(d, opts.threads, [&](std::int64_t lo, std::int64_t hi) {
    Executor<Dual64> ex(g);
    std::vector<Dual64> scratch;
    std::vector<double> unit(f.dim, 0.0);
    for (std::int64_t j = lo; j < hi; ++j) {
      unit[static_cast<std::size_t>(j)] = 1.0;
      // column j lands at H[i*d + j]
      detail::hvp_into(ex, w, unit, scratch, H.data.data() + j, static_cast<std::size_t>(d));
      unit[static_cast<std::size_t>(j)] = 0.0;
    }
  });
  return H;
}

/// Records a function once and reuses the buffers across evaluations.
class CompiledFunction {
 public:
  explicit CompiledFunction(const ScalarFunction& f)
      : dim_(f.dim), graph_(std::make_shared<Graph>(record(f))) {}

  std::size_t dim() const { return dim_; }
  const Graph& graph() const { return *graph_; }

  double value(std::span<const double> w) {
    if (!exec_) exec_.emplace(*graph_);
    const double y = exec_->run(w);
    if (!std::isfinite(y)) detail::throw_if_nonfinite(*exec_, "evaluate");
    return y;
  }

  std::vector<double> gradient(std::span<const double> w) {
    if (!exec_) exec_.emplace(*graph_);
    const double y = exec_->run(w);
    if (!std::isfinite(y)) detail::throw_if_nonfinite(*exec_, "gradient");
    exec_->backward();
    return {exec_->input_gradient().begin(), exec_->input_gradient().end()};
  }

  std::vector<double> hvp(std::span<const double> w, std::span<const double> v) {
    if (!dual_exec_) dual_exec_.emplace(*graph_);
    std::vector<double> out(dim_);
    detail::hvp_into(*dual_exec_, w, v, dual_scratch_, out.data(), 1);
    return out;
  }

  std::size_t engine_bytes() const {
    std::size_t b = 0;
    if (exec_) b += exec_->buffer_bytes();
    if (dual_exec_) b += dual_exec_->buffer_bytes();
    return b;
  }

 private:
  std::size_t dim_;
  std::shared_ptr<Graph> graph_;
  std::optional<Executor<double>> exec_;
  std::optional<Executor<Dual64>> dual_exec_;
  std::vector<Dual64> dual_scratch_;
};

}  // namespace hesskit

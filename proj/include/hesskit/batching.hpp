#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "hesskit/hessian.hpp"
#include "hesskit/model.hpp"

namespace hesskit {

/// How a batch is cut into chunks for accumulation. The additive loss makes
/// the full-batch Hessian the exact sum of per-chunk Hessians, so peak
/// engine memory follows micro_batch_size, never the full batch.
struct AccumulationPlan {
  std::int64_t micro_batch_size = 1;
  std::int64_t total_samples = 0;
  bool mean = false;  // divide the accumulated sum by total_samples

  void validate(const TokenBatch& X) const {
    if (total_samples != X.batch)
      throw std::invalid_argument("plan: total_samples does not match the batch");
    if (micro_batch_size < 1 || micro_batch_size > X.batch)
      throw std::invalid_argument("plan: micro_batch_size out of range");
  }

  std::vector<std::pair<std::int64_t, std::int64_t>> chunks() const {
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    for (std::int64_t b0 = 0; b0 < total_samples; b0 += micro_batch_size)
      out.push_back({b0, std::min(total_samples, b0 + micro_batch_size)});
    return out;
  }
};

/// Hessian of the additive loss over the whole batch, accumulated chunk by
/// chunk in a fixed order. Partition choice changes nothing but rounding:
/// any micro_batch_size agrees to ~1e-12 relative Frobenius.
inline HessianBlock accumulate_hessian(const SubsetSpec& spec, const ParamStore& params,
                                       const TokenBatch& X, const AccumulationPlan& plan,
                                       const HessianOptions& opts = {}) {
  plan.validate(X);
  const auto t0 = std::chrono::steady_clock::now();
  const IndexMap map = build_index_map(params, spec);
  const std::vector<double> u0 = restriction_point(params, map);
  const std::int64_t m = static_cast<std::int64_t>(map.size());

  HessianBlock total;
  total.H = Tensor::zeros({m, m});
  total.index_map = map;
  for (const auto& [b0, b1] : plan.chunks()) {
    auto [f, chunk_map] = restricted_loss(params, spec, X.rows(b0, b1));
    HessianBlock part = exact_block(f, u0, {}, opts);
    for (std::size_t i = 0; i < total.H.data.size(); ++i) total.H.data[i] += part.H.data[i];
    total.meta.engine_bytes = std::max(total.meta.engine_bytes, part.meta.engine_bytes);
  }
  if (plan.mean) {
    const double inv = 1.0 / static_cast<double>(plan.total_samples);
    for (double& x : total.H.data) x *= inv;
  }
  total.meta.subset = subset_to_string(spec);
  total.meta.batch = X.batch;
  total.meta.seed = params.config.seed;
  total.meta.reduction = plan.mean ? "mean" : "sum";
  total.meta.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return total;
}

/// Chunk-accumulated Hessian-vector product; same decomposition as
/// accumulate_hessian, one HVP per chunk.
inline std::vector<double> accumulate_hvp(const SubsetSpec& spec, const ParamStore& params,
                                          const TokenBatch& X, std::span<const double> v,
                                          const AccumulationPlan& plan) {
  plan.validate(X);
  const IndexMap map = build_index_map(params, spec);
  const std::vector<double> u0 = restriction_point(params, map);
  if (v.size() != map.size())
    throw std::invalid_argument("accumulate_hvp: vector length does not match subset dimension");
  std::vector<double> total(map.size(), 0.0);
  for (const auto& [b0, b1] : plan.chunks()) {
    auto [f, chunk_map] = restricted_loss(params, spec, X.rows(b0, b1));
    const std::vector<double> part = hvp(f, u0, v);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += part[i];
  }
  if (plan.mean)
    for (double& x : total) x /= static_cast<double>(plan.total_samples);
  return total;
}

/// HVP oracle over a chunked batch: records one graph per chunk up front,
/// then evaluates H*v at the restriction point as the fixed-order sum of
/// per-chunk HVPs. Calls are thread-safe (each owns its executors), so this
/// plugs directly into hutchinson_diag_fn while keeping engine memory at
/// micro-batch size.
class ChunkedHvp {
 public:
  ChunkedHvp(const SubsetSpec& spec, const ParamStore& params, const TokenBatch& X,
             const AccumulationPlan& plan) {
    plan.validate(X);
    const IndexMap map = build_index_map(params, spec);
    u0_ = restriction_point(params, map);
    for (const auto& [b0, b1] : plan.chunks())
      graphs_.push_back(record(restricted_loss(params, spec, X.rows(b0, b1)).first));
  }

  std::vector<double> operator()(std::span<const double> v) const {
    std::vector<double> total(u0_.size(), 0.0);
    for (const Graph& g : graphs_) {
      const std::vector<double> part = hvp_on_graph(g, u0_, v);
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += part[i];
    }
    return total;
  }

  const std::vector<double>& point() const { return u0_; }
  std::int64_t dim() const { return static_cast<std::int64_t>(u0_.size()); }

 private:
  std::vector<Graph> graphs_;
  std::vector<double> u0_;
};

struct BatchSweepRow {
  std::int64_t b = 0;
  double rel_loss = 0.0;                 // vs the largest-b reference
  std::optional<double> rel_diff;        // vs the previous row's Hessian
};

/// Mean-loss Hessians for increasing batch sizes, scored against the
/// largest requested batch. Per-sample blocks are computed once and folded
/// as prefix sums, which matches accumulate_hessian(micro=1) bit for bit.
inline std::vector<BatchSweepRow> batch_sweep(const SubsetSpec& spec, const ParamStore& params,
                                              const TokenBatch& corpus,
                                              std::span<const std::int64_t> b_values,
                                              const HessianOptions& opts = {}) {
  if (b_values.empty()) throw std::invalid_argument("batch_sweep: empty b list");
  for (std::size_t i = 0; i < b_values.size(); ++i) {
    if (b_values[i] < 1) throw std::invalid_argument("batch_sweep: b must be >= 1");
    if (i > 0 && b_values[i] <= b_values[i - 1])
      throw std::invalid_argument("batch_sweep: b values must be strictly ascending");
  }
  const std::int64_t b_max = b_values.back();
  if (b_max > corpus.batch)
    throw std::invalid_argument("batch_sweep: corpus holds " + std::to_string(corpus.batch) +
                                " samples, need " + std::to_string(b_max));

  const IndexMap map = build_index_map(params, spec);
  const std::vector<double> u0 = restriction_point(params, map);
  const std::int64_t m = static_cast<std::int64_t>(map.size());

  // Running sum over per-sample Hessians, snapshotted at each requested b.
  Tensor sum = Tensor::zeros({m, m});
  std::vector<Tensor> means;
  means.reserve(b_values.size());
  std::size_t next = 0;
  for (std::int64_t i = 0; i < b_max && next < b_values.size(); ++i) {
    auto [f, sample_map] = restricted_loss(params, spec, corpus.rows(i, i + 1));
    const Tensor Hi = exact_hessian(f, u0, opts);
    for (std::size_t p = 0; p < sum.data.size(); ++p) sum.data[p] += Hi.data[p];
    if (i + 1 == b_values[next]) {
      Tensor mean = sum;
      const double inv = 1.0 / static_cast<double>(i + 1);
      for (double& x : mean.data) x *= inv;
      means.push_back(std::move(mean));
      ++next;
    }
  }

  std::vector<BatchSweepRow> rows;
  rows.reserve(b_values.size());
  for (std::size_t i = 0; i < b_values.size(); ++i) {
    BatchSweepRow row;
    row.b = b_values[i];
    row.rel_loss = relative_frobenius_loss(means[i], means.back());
    if (i > 0) row.rel_diff = relative_frobenius_difference(means[i - 1], means[i]);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace hesskit

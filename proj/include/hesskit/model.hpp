#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "hesskit/autodiff.hpp"
#include "hesskit/rng.hpp"
#include "hesskit/tensor.hpp"

namespace hesskit {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class LayerKind : int { q_proj = 0, k_proj, v_proj, out_proj, fc1, fc2 };

inline constexpr int kKindsPerBlock = 6;

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::q_proj: return "q_proj";
    case LayerKind::k_proj: return "k_proj";
    case LayerKind::v_proj: return "v_proj";
    case LayerKind::out_proj: return "out_proj";
    case LayerKind::fc1: return "fc1";
    case LayerKind::fc2: return "fc2";
  }
  return "?";
}

inline std::optional<LayerKind> parse_layer_kind(const std::string& s) {
  for (int k = 0; k < kKindsPerBlock; ++k) {
    if (s == layer_kind_name(static_cast<LayerKind>(k))) return static_cast<LayerKind>(k);
  }
  return std::nullopt;
}

enum class Nonlinearity { gelu, relu };

/// Decoder-only toy transformer. Each block holds six weight matrices in a
/// fixed order (q_proj, k_proj, v_proj, out_proj, fc1, fc2); those matrices
/// are the differentiable parameters, everything else (embeddings, norms)
/// stays frozen.
struct ModelConfig {
  std::int64_t blocks = 2;
  std::int64_t n_heads = 2;
  std::int64_t d_model = 16;
  std::int64_t d_ffn = 64;
  std::int64_t vocab = 128;
  std::int64_t seq_len = 32;
  Nonlinearity nonlinearity = Nonlinearity::gelu;
  std::uint64_t seed = 0;

  std::int64_t layer_count() const { return blocks * kKindsPerBlock; }

  void validate() const {
    if (blocks < 1 || n_heads < 1 || d_model < 1 || d_ffn < 1 || vocab < 1)
      throw std::invalid_argument("config: all extents must be >= 1");
    if (seq_len < 2)
      throw std::invalid_argument("config: seq_len must be >= 2 for next-token loss");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("config: d_model must be divisible by n_heads");
  }
};

struct LayerShape {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t numel() const { return rows * cols; }
};

inline LayerShape layer_shape(const ModelConfig& c, LayerKind k) {
  switch (k) {
    case LayerKind::fc1: return {c.d_model, c.d_ffn};
    case LayerKind::fc2: return {c.d_ffn, c.d_model};
    default: return {c.d_model, c.d_model};
  }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Weight matrices in global layer order l = block * 6 + kind, plus frozen
/// embedding tables. Immutable after init; shared freely across threads.
struct ParamStore {
  ModelConfig config;
  std::vector<Tensor> layers;  // L = blocks * 6 matrices
  Tensor tok_embedding;        // [vocab, d_model]
  Tensor pos_embedding;        // [seq_len, d_model]
  Tensor unembedding;          // [d_model, vocab]

  std::int64_t layer_index(std::int64_t block, LayerKind kind) const {
    return block * kKindsPerBlock + static_cast<int>(kind);
  }

  const Tensor& layer(std::int64_t l) const { return layers.at(static_cast<std::size_t>(l)); }

  /// d = sum over layers of rows*cols; embeddings excluded.
  std::int64_t trainable_dimension() const {
    std::int64_t d = 0;
    for (const Tensor& w : layers) d += w.numel();
    return d;
  }

  /// Offset of layer l within the flat concatenation of all layers.
  std::int64_t layer_offset(std::int64_t l) const {
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < l; ++i) off += layers[static_cast<std::size_t>(i)].numel();
    return off;
  }
};

namespace detail {

inline Tensor random_matrix(std::int64_t rows, std::int64_t cols, std::uint64_t seed,
                            double stddev) {
  Tensor t = Tensor::zeros({rows, cols});
  Rng rng(seed);
  for (double& x : t.data) x = rng.normal() * stddev;
  return t;
}

}  // namespace detail

/// Deterministic pseudo-random initialization; each matrix draws from its own
/// substream of config.seed, so repeated calls are bitwise identical.
inline ParamStore init_params(const ModelConfig& config) {
  config.validate();
  ParamStore store;
  store.config = config;
  const std::int64_t L = config.layer_count();
  store.layers.reserve(static_cast<std::size_t>(L));
  for (std::int64_t l = 0; l < L; ++l) {
    const LayerShape s = layer_shape(config, static_cast<LayerKind>(l % kKindsPerBlock));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(s.rows));
    store.layers.push_back(
        detail::random_matrix(s.rows, s.cols, substream_seed(config.seed, static_cast<std::uint64_t>(l)), stddev));
  }
  store.tok_embedding = detail::random_matrix(config.vocab, config.d_model,
                                              substream_seed(config.seed, static_cast<std::uint64_t>(L)), 1.0);
  store.pos_embedding = detail::random_matrix(config.seq_len, config.d_model,
                                              substream_seed(config.seed, static_cast<std::uint64_t>(L + 1)), 1.0);
  store.unembedding =
      detail::random_matrix(config.d_model, config.vocab,
                            substream_seed(config.seed, static_cast<std::uint64_t>(L + 2)),
                            1.0 / std::sqrt(static_cast<double>(config.d_model)));
  return store;
}

// ---------------------------------------------------------------------------
// Reshape operators
// ---------------------------------------------------------------------------

/// Row-major flattening of a matrix into a vector; preserves the 2-norm.
inline Tensor reshape_to_vector(const Tensor& w) {
  if (!w.is_matrix()) throw std::invalid_argument("reshape_to_vector: expected a matrix");
  return Tensor({w.numel()}, w.data);
}

/// Inverse of reshape_to_vector for the given shape.
inline Tensor inverse_reshape(const Tensor& v, LayerShape shape) {
  if (v.shape.size() != 1) throw std::invalid_argument("inverse_reshape: expected a vector");
  if (v.numel() != shape.numel())
    throw std::invalid_argument("inverse_reshape: length does not match target shape");
  return Tensor({shape.rows, shape.cols}, v.data);
}

// ---------------------------------------------------------------------------
// Token batches
// ---------------------------------------------------------------------------

struct TokenBatch {
  std::int64_t batch = 0;
  std::int64_t seq = 0;
  std::vector<std::int32_t> ids;  // row-major batch x seq

  std::int32_t id(std::int64_t i, std::int64_t j) const {
    return ids[static_cast<std::size_t>(i * seq + j)];
  }

  /// Rows [b0, b1) as their own batch.
  TokenBatch rows(std::int64_t b0, std::int64_t b1) const {
    if (b0 < 0 || b1 > batch || b0 >= b1) throw std::invalid_argument("rows: bad range");
    TokenBatch out;
    out.batch = b1 - b0;
    out.seq = seq;
    out.ids.assign(ids.begin() + b0 * seq, ids.begin() + b1 * seq);
    return out;
  }
};

/// Seeded uniform token ids; the synthetic stand-in for a text corpus.
inline TokenBatch random_batch(const ModelConfig& config, std::int64_t batch,
                               std::uint64_t data_seed) {
  if (batch < 1) throw std::invalid_argument("random_batch: batch must be >= 1");
  TokenBatch out;
  out.batch = batch;
  out.seq = config.seq_len;
  out.ids.resize(static_cast<std::size_t>(batch * config.seq_len));
  Rng rng(substream_seed(data_seed, 0x746f6b656eull));  // "token" substream
  for (auto& t : out.ids) t = static_cast<std::int32_t>(rng.below(config.vocab));
  return out;
}

/// Corpus file format: one sample per line, space-separated integer token
/// ids. Lines are truncated to seq_len and padded with the pad id 0.
inline TokenBatch load_corpus(std::istream& in, const ModelConfig& config) {
  TokenBatch out;
  out.seq = config.seq_len;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<std::int32_t> row;
    long long tok = 0;
    while (ls >> tok) {
      if (tok < 0 || tok >= config.vocab)
        throw std::invalid_argument("corpus line " + std::to_string(lineno) + ": token " +
                                    std::to_string(tok) + " outside vocab [0," +
                                    std::to_string(config.vocab) + ")");
      row.push_back(static_cast<std::int32_t>(tok));
    }
    if (!ls.eof())
      throw std::invalid_argument("corpus line " + std::to_string(lineno) + ": not an integer");
    row.resize(static_cast<std::size_t>(config.seq_len), 0);
    out.ids.insert(out.ids.end(), row.begin(), row.begin() + config.seq_len);
    ++out.batch;
  }
  if (out.batch == 0) throw std::invalid_argument("corpus: no samples");
  return out;
}

inline TokenBatch load_corpus_file(const std::string& path, const ModelConfig& config) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("corpus: cannot open " + path);
  return load_corpus(f, config);
}

// ---------------------------------------------------------------------------
// Parameter subsets
// ---------------------------------------------------------------------------

/// The first t entries of one flattened layer.
struct SingleLayer {
  std::int64_t layer = 0;  // 0-based global index
  std::int64_t t = 1;
};
/// The first t entries of each of the six layers of one block.
struct SingleBlock {
  std::int64_t block = 0;
  std::int64_t t = 1;
};
/// The first t entries of one layer kind across every block.
struct OneKindAllBlocks {
  LayerKind kind = LayerKind::q_proj;
  std::int64_t t = 1;
};
/// The first t entries of every layer.
struct AllLayers {
  std::int64_t t = 1;
};

using SubsetSpec = std::variant<SingleLayer, SingleBlock, OneKindAllBlocks, AllLayers>;

/// One coordinate of a restricted vector: which layer, which row-major
/// offset inside that layer's flattened matrix.
struct Coord {
  std::int64_t layer = 0;
  std::int64_t offset = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
};

using IndexMap = std::vector<Coord>;

namespace detail {

inline void check_t(const ParamStore& store, std::int64_t layer, std::int64_t t) {
  const std::int64_t cap = store.layer(layer).numel();
  if (t < 1 || t > cap)
    throw std::invalid_argument("subset: t=" + std::to_string(t) + " out of range [1," +
                                std::to_string(cap) + "] for layer " + std::to_string(layer + 1));
}

inline void append_prefix(IndexMap& map, std::int64_t layer, std::int64_t t) {
  for (std::int64_t o = 0; o < t; ++o) map.push_back({layer, o});
}

}  // namespace detail

/// Coordinates selected by a subset spec, in block-major, then layer-kind,
/// then flat-offset order.
inline IndexMap build_index_map(const ParamStore& store, const SubsetSpec& spec) {
  const ModelConfig& c = store.config;
  IndexMap map;
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SingleLayer>) {
          if (s.layer < 0 || s.layer >= c.layer_count())
            throw std::invalid_argument("subset: layer index out of range");
          detail::check_t(store, s.layer, s.t);
          detail::append_prefix(map, s.layer, s.t);
        } else if constexpr (std::is_same_v<T, SingleBlock>) {
          if (s.block < 0 || s.block >= c.blocks)
            throw std::invalid_argument("subset: block index out of range");
          for (int k = 0; k < kKindsPerBlock; ++k) {
            const std::int64_t l = s.block * kKindsPerBlock + k;
            detail::check_t(store, l, s.t);
            detail::append_prefix(map, l, s.t);
          }
        } else if constexpr (std::is_same_v<T, OneKindAllBlocks>) {
          for (std::int64_t b = 0; b < c.blocks; ++b) {
            const std::int64_t l = b * kKindsPerBlock + static_cast<int>(s.kind);
            detail::check_t(store, l, s.t);
            detail::append_prefix(map, l, s.t);
          }
        } else {
          for (std::int64_t l = 0; l < c.layer_count(); ++l) {
            detail::check_t(store, l, s.t);
            detail::append_prefix(map, l, s.t);
          }
        }
      },
      spec);
  return map;
}

inline std::int64_t subset_dimension(const ParamStore& store, const SubsetSpec& spec) {
  return static_cast<std::int64_t>(build_index_map(store, spec).size());
}

/// Every coordinate of every layer; the unrestricted parameter vector.
inline IndexMap full_index_map(const ParamStore& store) {
  IndexMap map;
  for (std::int64_t l = 0; l < store.config.layer_count(); ++l)
    detail::append_prefix(map, l, store.layer(l).numel());
  return map;
}

/// Current parameter values at the map's coordinates (the point u0 at which
/// restricted derivatives are taken).
inline std::vector<double> restriction_point(const ParamStore& store, const IndexMap& map) {
  std::vector<double> u0;
  u0.reserve(map.size());
  for (const Coord& c : map)
    u0.push_back(store.layer(c.layer).data[static_cast<std::size_t>(c.offset)]);
  return u0;
}

/// Human-readable spec description (1-based indices, as on the CLI).
inline std::string subset_to_string(const SubsetSpec& spec) {
  return std::visit(
      [](const auto& s) -> std::string {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SingleLayer>)
          return "single-layer(layer=" + std::to_string(s.layer + 1) +
                 ",t=" + std::to_string(s.t) + ")";
        else if constexpr (std::is_same_v<T, SingleBlock>)
          return "block(block=" + std::to_string(s.block + 1) + ",t=" + std::to_string(s.t) + ")";
        else if constexpr (std::is_same_v<T, OneKindAllBlocks>)
          return std::string("kind-all-blocks(kind=") + layer_kind_name(s.kind) +
                 ",t=" + std::to_string(s.t) + ")";
        else
          return "all-layers(t=" + std::to_string(s.t) + ")";
      },
      spec);
}

// ---------------------------------------------------------------------------
// Forward pass and losses
// ---------------------------------------------------------------------------

namespace detail {

inline void check_tokens(const ModelConfig& config, const TokenBatch& X) {
  if (X.batch < 1) throw std::invalid_argument("batch must hold at least one sample");
  if (X.seq != config.seq_len)
    throw std::invalid_argument("batch seq length " + std::to_string(X.seq) +
                                " does not match config seq_len " +
                                std::to_string(config.seq_len));
  for (std::int32_t t : X.ids)
    if (t < 0 || t >= config.vocab)
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocab [0," +
                                  std::to_string(config.vocab) + ")");
}

struct LossRecord {
  NodeId loss = -1;                 // scalar: sum of per-sample cross-entropies
  std::vector<NodeId> logits;       // per-sample [seq, vocab]
  std::vector<NodeId> per_sample;   // per-sample scalar CE
};

/// Records the additive loss over the batch. When `map` is given, the
/// selected coordinates are read from the graph input (scattered into the
/// frozen matrices); otherwise the whole model is constant and the graph
/// input has length zero.
inline LossRecord record_additive_loss(Graph& g, const ParamStore& P, const TokenBatch& X,
                                       const IndexMap* map, NodeId input) {
  const ModelConfig& cfg = P.config;
  check_tokens(cfg, X);
  const std::int64_t L = cfg.layer_count();
  const std::int64_t s = cfg.seq_len;
  const std::int64_t d = cfg.d_model;
  const std::int64_t dh = d / cfg.n_heads;

  // Scatter positions per layer.
  std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> positions(
      static_cast<std::size_t>(L));
  if (map) {
    for (std::size_t i = 0; i < map->size(); ++i)
      positions[static_cast<std::size_t>((*map)[i].layer)].push_back(
          {(*map)[i].offset, static_cast<std::int64_t>(i)});
  }
  std::vector<NodeId> W(static_cast<std::size_t>(L));
  for (std::int64_t l = 0; l < L; ++l) {
    const auto& pos = positions[static_cast<std::size_t>(l)];
    W[static_cast<std::size_t>(l)] =
        pos.empty() ? g.constant(P.layer(l)) : g.scatter_into_const(P.layer(l), input, pos);
  }
  const NodeId U = g.constant(P.unembedding);

  LossRecord rec;
  for (std::int64_t i = 0; i < X.batch; ++i) {
    // Token + position embeddings are frozen, so the block input is constant.
    Tensor emb = Tensor::zeros({s, d});
    for (std::int64_t j = 0; j < s; ++j) {
      const std::int64_t tok = X.id(i, j);
      for (std::int64_t c = 0; c < d; ++c)
        emb.at(j, c) = P.tok_embedding.at(tok, c) + P.pos_embedding.at(j, c);
    }
    NodeId h = g.constant(std::move(emb));

    for (std::int64_t b = 0; b < cfg.blocks; ++b) {
      const auto wl = [&](LayerKind k) { return W[static_cast<std::size_t>(P.layer_index(b, k))]; };
      // attention
      const NodeId a = g.layer_norm(h);
      const NodeId q = g.matmul(a, wl(LayerKind::q_proj));
      const NodeId k = g.matmul(a, wl(LayerKind::k_proj));
      const NodeId v = g.matmul(a, wl(LayerKind::v_proj));
      NodeId heads = -1;
      for (std::int64_t hh = 0; hh < cfg.n_heads; ++hh) {
        const std::int64_t c0 = hh * dh, c1 = (hh + 1) * dh;
        const NodeId qh = g.slice_cols(q, c0, c1);
        const NodeId kh = g.slice_cols(k, c0, c1);
        const NodeId vh = g.slice_cols(v, c0, c1);
        const NodeId scores = g.scale(g.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        const NodeId probs = g.row_softmax(scores, /*causal=*/true);
        const NodeId oh = g.matmul(probs, vh);
        heads = (heads < 0) ? oh : g.concat_cols(heads, oh);
      }
      h = g.add(h, g.matmul(heads, wl(LayerKind::out_proj)));
      // feed-forward
      const NodeId a2 = g.layer_norm(h);
      const NodeId f1 = g.matmul(a2, wl(LayerKind::fc1));
      const NodeId act = cfg.nonlinearity == Nonlinearity::gelu ? g.gelu(f1) : g.relu(f1);
      h = g.add(h, g.matmul(act, wl(LayerKind::fc2)));
    }

    const NodeId logits = g.matmul(g.layer_norm(h), U);  // [s, vocab]
    rec.logits.push_back(logits);

    // Next-token cross-entropy, averaged over the s-1 predicted positions:
    // mean_j ( logsumexp(logits[j-1]) - logits[j-1, x_j] ).
    const NodeId lse = g.reshape(g.log_sum_exp_rows(logits), {1, s});
    const NodeId lse_used = g.slice_cols(lse, 0, s - 1);
    std::vector<std::pair<std::int64_t, std::int64_t>> targets;
    targets.reserve(static_cast<std::size_t>(s - 1));
    for (std::int64_t j = 1; j < s; ++j) targets.push_back({j - 1, X.id(i, j)});
    const NodeId picked = g.reshape(g.gather_pairs(logits, targets), {1, s - 1});
    const NodeId ce =
        g.scale(g.sum_all(g.sub(lse_used, picked)), 1.0 / static_cast<double>(s - 1));
    rec.per_sample.push_back(ce);
    rec.loss = (rec.loss < 0) ? ce : g.add(rec.loss, ce);
  }
  return rec;
}

}  // namespace detail

/// Logits for every sample and position, shape [batch, seq_len, vocab].
/// Causal: position j only sees tokens at positions <= j of its own sample.
inline Tensor forward_logits(const ParamStore& P, const TokenBatch& X) {
  Graph g;
  const NodeId input = g.input(0);
  const auto rec = detail::record_additive_loss(g, P, X, nullptr, input);
  g.set_output(rec.loss);
  Executor<double> ex(g);
  ex.run({});
  Tensor out = Tensor::zeros({X.batch, P.config.seq_len, P.config.vocab});
  const std::int64_t per = P.config.seq_len * P.config.vocab;
  for (std::int64_t i = 0; i < X.batch; ++i) {
    const auto& li = ex.value(rec.logits[static_cast<std::size_t>(i)]).data;
    std::copy(li.begin(), li.end(), out.data.begin() + i * per);
  }
  const std::string bad = ex.find_nonfinite();
  if (!bad.empty()) throw NumericalError("forward_logits: non-finite value produced by " + bad);
  return out;
}

/// Per-sample next-token cross-entropy from logits, c_i > 0 in the generic
/// case. Position j-1 predicts token X[i, j]; positions are averaged.
inline std::vector<double> cross_entropy_per_sample(const Tensor& logits, const TokenBatch& X) {
  if (logits.shape.size() != 3 || logits.shape[0] != X.batch || logits.shape[1] != X.seq)
    throw std::invalid_argument("cross_entropy_per_sample: logits shape mismatch");
  const std::int64_t s = X.seq, n = logits.shape[2];
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(X.batch));
  for (std::int64_t i = 0; i < X.batch; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 1; j < s; ++j) {
      const double* row = logits.data.data() + (i * s + j - 1) * n;
      double mx = row[0];
      for (std::int64_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
      double denom = 0.0;
      for (std::int64_t c = 0; c < n; ++c) denom += std::exp(row[c] - mx);
      acc += (mx + std::log(denom)) - row[X.id(i, j)];
    }
    out.push_back(acc / static_cast<double>(s - 1));
  }
  return out;
}

/// exp of the mean per-sample cross-entropy.
inline double perplexity(std::span<const double> c) {
  if (c.empty()) throw std::invalid_argument("perplexity: empty batch");
  double mean = 0.0;
  for (double x : c) mean += x;
  mean /= static_cast<double>(c.size());
  return std::exp(mean);
}

/// Sum (not mean) of per-sample cross-entropies, with no exponential. This
/// is the loss whose value, gradient and Hessian all decompose as sums over
/// samples, which is what makes micro-batch accumulation exact.
inline double additive_loss(const ParamStore& P, const TokenBatch& X) {
  Graph g;
  const NodeId input = g.input(0);
  const auto rec = detail::record_additive_loss(g, P, X, nullptr, input);
  g.set_output(rec.loss);
  Executor<double> ex(g);
  const double y = ex.run({});
  if (!std::isfinite(y))
    throw NumericalError("additive_loss: non-finite value produced by " + ex.find_nonfinite());
  return y;
}

/// The additive loss as a function of the restricted coordinates only: the
/// input vector is scattered into the frozen parameter matrices at the
/// IndexMap positions and everything else stays at its stored value.
/// Evaluating at restriction_point(store, map) reproduces additive_loss.
inline std::pair<ScalarFunction, IndexMap> restricted_loss(const ParamStore& P,
                                                           const SubsetSpec& spec,
                                                           const TokenBatch& X) {
  detail::check_tokens(P.config, X);
  IndexMap map = build_index_map(P, spec);
  ScalarFunction f;
  f.dim = map.size();
  f.build = [P, X, map](Graph& g, NodeId input) {
    return detail::record_additive_loss(g, P, X, &map, input).loss;
  };
  return {std::move(f), std::move(map)};
}

/// Restriction to an explicit coordinate set (used for the full-dimension
/// loss and for test probes).
inline ScalarFunction restricted_loss_for_map(const ParamStore& P, const IndexMap& map,
                                              const TokenBatch& X) {
  detail::check_tokens(P.config, X);
  ScalarFunction f;
  f.dim = map.size();
  f.build = [P, X, map](Graph& g, NodeId input) {
    return detail::record_additive_loss(g, P, X, &map, input).loss;
  };
  return f;
}

// ---------------------------------------------------------------------------
// Config file (flat key=value)
// ---------------------------------------------------------------------------

inline ModelConfig parse_model_config(std::istream& in) {
  ModelConfig cfg;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto notspace = line.find_first_not_of(" \t\r");
    if (notspace == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto as_int = [&](const std::string& v) {
      std::size_t used = 0;
      const long long x = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument("config: bad integer '" + v + "'");
      return static_cast<std::int64_t>(x);
    };
    if (key == "blocks") cfg.blocks = as_int(value);
    else if (key == "n_heads") cfg.n_heads = as_int(value);
    else if (key == "d_model") cfg.d_model = as_int(value);
    else if (key == "d_ffn") cfg.d_ffn = as_int(value);
    else if (key == "vocab") cfg.vocab = as_int(value);
    else if (key == "seq_len") cfg.seq_len = as_int(value);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(as_int(value));
    else if (key == "nonlinearity") {
      if (value == "gelu") cfg.nonlinearity = Nonlinearity::gelu;
      else if (value == "relu") cfg.nonlinearity = Nonlinearity::relu;
      else throw std::invalid_argument("config: nonlinearity must be gelu or relu");
    } else {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" +
                                  key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

inline ModelConfig parse_model_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  return parse_model_config(f);
}

}  // namespace hesskit

#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hesskit/dual.hpp"
#include "hesskit/graph.hpp"
#include "hesskit/tensor.hpp"

namespace hesskit {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename S>
void gemm_nn_acc(const S* A, const S* B, S* C, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const S a = A[i * k + p];
      const S* brow = B + p * n;
      S* crow = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * transpose(B[n,k])
template <typename S>
void gemm_nt_acc(const S* A, const S* B, S* C, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const S* arow = A + i * k;
    for (std::int64_t j = 0; j < n; ++j) {
      const S* brow = B + j * k;
      S acc{};
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      C[i * n + j] += acc;
    }
  }
}

// C[m,n] += transpose(A[k,m]) * B[k,n]
template <typename S>
void gemm_tn_acc(const S* A, const S* B, S* C, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t p = 0; p < k; ++p) {
    const S* arow = A + p * m;
    const S* brow = B + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const S a = arow[i];
      S* crow = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

template <typename S>
S gelu_value(S x) {
  using std::erf;
  return 0.5 * x * (1.0 + erf(x * std::numbers::sqrt2 * 0.5));
}

// d/dx gelu(x) = Phi(x) + x * phi(x), with Phi/phi the standard normal
// CDF/PDF. Written in S arithmetic so dual execution carries gelu''.
template <typename S>
S gelu_derivative(S x) {
  using std::erf;
  using std::exp;
  const S cdf = 0.5 * (1.0 + erf(x * std::numbers::sqrt2 * 0.5));
  const S pdf = exp(x * x * -0.5) * (0.5 * std::numbers::sqrt2 * std::numbers::inv_sqrtpi);
  return cdf + x * pdf;
}

}  // namespace detail

/// Replays a recorded Graph forwards and backwards over scalar type S.
/// S = double gives values and gradients; S = Dual<double> with a seeded
/// input tangent gives the directional derivative of the gradient, i.e. a
/// Hessian-vector product (forward-over-reverse).
///
/// One Executor services one evaluation at a time; spawn one per thread for
/// concurrent evaluations of a shared Graph.
template <typename S>
class Executor {
 public:
  explicit Executor(const Graph& g) : g_(&g) {
    const auto& nodes = g.nodes();
    val_.reserve(nodes.size());
    adj_.reserve(nodes.size());
    needs_grad_.resize(nodes.size(), false);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const Node& n = nodes[i];
      val_.push_back(TensorT<S>::zeros(n.shape));
      adj_.push_back(TensorT<S>::zeros(n.shape));
      bytes_ += static_cast<std::size_t>(2 * TensorT<S>::numel_of(n.shape)) * sizeof(S);
      // Nodes that do not depend on the input never route adjoints to it;
      // the reverse pass skips them.
      if (n.op == Op::kInput) {
        needs_grad_[i] = true;
      } else {
        if (n.a >= 0 && needs_grad_[static_cast<std::size_t>(n.a)]) needs_grad_[i] = true;
        if (n.b >= 0 && needs_grad_[static_cast<std::size_t>(n.b)]) needs_grad_[i] = true;
      }
    }
    // Constants never change between runs; convert them once.
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i].op == Op::kConst) load_constant(val_[i], nodes[i].const_id);
    }
  }

  S run(std::span<const S> input) {
    if (static_cast<std::int64_t>(input.size()) != g_->input_length())
      throw std::invalid_argument("executor: input has length " + std::to_string(input.size()) +
                                  ", graph expects " + std::to_string(g_->input_length()));
    const auto& nodes = g_->nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) forward_node(static_cast<NodeId>(i), input);
    return val_[static_cast<std::size_t>(g_->output_id())].data[0];
  }

  /// Reverse pass from the scalar output; call after run().
  void backward() {
    const auto& nodes = g_->nodes();
    for (auto& a : adj_) std::fill(a.data.begin(), a.data.end(), S{});
    adj_[static_cast<std::size_t>(g_->output_id())].data[0] = S(1.0);
    for (std::size_t i = nodes.size(); i-- > 0;) backward_node(static_cast<NodeId>(i));
  }

  std::span<const S> input_gradient() const {
    return adj_[static_cast<std::size_t>(g_->input_id())].data;
  }

  const TensorT<S>& value(NodeId id) const { return val_[static_cast<std::size_t>(id)]; }

  /// Bytes held in value + adjoint buffers; fixed at construction.
  std::size_t buffer_bytes() const { return bytes_; }

  /// Name and index of the first node holding a non-finite value, or "".
  std::string find_nonfinite() const {
    for (std::size_t i = 0; i < val_.size(); ++i) {
      for (const S& x : val_[i].data) {
        if (!all_finite(x))
          return std::string(op_name(g_->nodes()[i].op)) + " (node " + std::to_string(i) + ")";
      }
    }
    return "";
  }

 private:
  void load_constant(TensorT<S>& dst, std::int32_t const_id) {
    const Tensor& src = g_->constants()[static_cast<std::size_t>(const_id)];
    for (std::size_t j = 0; j < src.data.size(); ++j) dst.data[j] = S(src.data[j]);
  }

  void forward_node(NodeId id, std::span<const S> input) {
    const Node& n = g_->nodes()[static_cast<std::size_t>(id)];
    TensorT<S>& out = val_[static_cast<std::size_t>(id)];
    const auto in = [&](NodeId x) -> const TensorT<S>& {
      return val_[static_cast<std::size_t>(x)];
    };
    switch (n.op) {
      case Op::kInput:
        std::copy(input.begin(), input.end(), out.data.begin());
        break;
      case Op::kConst:
        break;  // preloaded
      case Op::kAdd: {
        const auto& a = in(n.a).data;
        const auto& b = in(n.b).data;
        for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = a[j] + b[j];
        break;
      }
      case Op::kSub: {
        const auto& a = in(n.a).data;
        const auto& b = in(n.b).data;
        for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = a[j] - b[j];
        break;
      }
      case Op::kMul: {
        const auto& a = in(n.a).data;
        const auto& b = in(n.b).data;
        for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = a[j] * b[j];
        break;
      }
      case Op::kScale: {
        const auto& a = in(n.a).data;
        for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = a[j] * n.scalar;
        break;
      }
      case Op::kMatMul: {
        const auto& A = in(n.a);
        const auto& B = in(n.b);
        std::fill(out.data.begin(), out.data.end(), S{});
        detail::gemm_nn_acc(A.data.data(), B.data.data(), out.data.data(), A.rows(), A.cols(),
                            B.cols());
        break;
      }
      case Op::kMatMulNT: {
        const auto& A = in(n.a);
        const auto& B = in(n.b);
        std::fill(out.data.begin(), out.data.end(), S{});
        detail::gemm_nt_acc(A.data.data(), B.data.data(), out.data.data(), A.rows(), A.cols(),
                            B.rows());
        break;
      }
      case Op::kRowSoftmax: {
        const auto& A = in(n.a);
        const bool causal = n.ints[0] != 0;
        const std::int64_t r = A.rows(), c = A.cols();
        using std::exp;
        for (std::int64_t i = 0; i < r; ++i) {
          const std::int64_t allowed = causal ? i + 1 : c;
          const S* xrow = A.data.data() + i * c;
          S* zrow = out.data.data() + i * c;
          double mx = primal(xrow[0]);
          for (std::int64_t j = 1; j < allowed; ++j) mx = std::max(mx, primal(xrow[j]));
          S denom{};
          for (std::int64_t j = 0; j < allowed; ++j) {
            zrow[j] = exp(xrow[j] - mx);
            denom += zrow[j];
          }
          for (std::int64_t j = 0; j < allowed; ++j) zrow[j] = zrow[j] / denom;
          for (std::int64_t j = allowed; j < c; ++j) zrow[j] = S{};
        }
        break;
      }
      case Op::kLayerNorm: {
        const auto& A = in(n.a);
        const std::int64_t r = A.rows(), c = A.cols();
        using std::sqrt;
        for (std::int64_t i = 0; i < r; ++i) {
          const S* xrow = A.data.data() + i * c;
          S* yrow = out.data.data() + i * c;
          S mean{};
          for (std::int64_t j = 0; j < c; ++j) mean += xrow[j];
          mean = mean * (1.0 / static_cast<double>(c));
          S var{};
          for (std::int64_t j = 0; j < c; ++j) {
            const S d = xrow[j] - mean;
            var += d * d;
          }
          var = var * (1.0 / static_cast<double>(c));
          const S inv = 1.0 / sqrt(var + n.scalar);
          for (std::int64_t j = 0; j < c; ++j) yrow[j] = (xrow[j] - mean) * inv;
        }
        break;
      }
      case Op::kGelu: {
        const auto& a = in(n.a).data;
        for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = detail::gelu_value(a[j]);
        break;
      }
      case Op::kRelu: {
        const auto& a = in(n.a).data;
        for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = primal(a[j]) > 0.0 ? a[j] : S{};
        break;
      }
      case Op::kGatherPairs: {
        const auto& A = in(n.a);
        const std::int64_t c = A.cols();
        for (std::size_t p = 0; p < n.ints.size() / 2; ++p)
          out.data[p] = A.data[static_cast<std::size_t>(n.ints[2 * p] * c + n.ints[2 * p + 1])];
        break;
      }
      case Op::kLogSumExpRows: {
        const auto& A = in(n.a);
        const std::int64_t r = A.rows(), c = A.cols();
        using std::exp;
        using std::log;
        for (std::int64_t i = 0; i < r; ++i) {
          const S* xrow = A.data.data() + i * c;
          double mx = primal(xrow[0]);
          for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, primal(xrow[j]));
          S acc{};
          for (std::int64_t j = 0; j < c; ++j) acc += exp(xrow[j] - mx);
          out.data[static_cast<std::size_t>(i)] = mx + log(acc);
        }
        break;
      }
      case Op::kSumAll: {
        S acc{};
        for (const S& x : in(n.a).data) acc += x;
        out.data[0] = acc;
        break;
      }
      case Op::kSliceCols: {
        const auto& A = in(n.a);
        const std::int64_t c = A.cols(), c0 = n.ints[0], w = n.ints[1] - n.ints[0];
        for (std::int64_t i = 0; i < A.rows(); ++i)
          for (std::int64_t j = 0; j < w; ++j) out.data[i * w + j] = A.data[i * c + c0 + j];
        break;
      }
      case Op::kConcatCols: {
        const auto& A = in(n.a);
        const auto& B = in(n.b);
        const std::int64_t ca = A.cols(), cb = B.cols(), c = ca + cb;
        for (std::int64_t i = 0; i < A.rows(); ++i) {
          for (std::int64_t j = 0; j < ca; ++j) out.data[i * c + j] = A.data[i * ca + j];
          for (std::int64_t j = 0; j < cb; ++j) out.data[i * c + ca + j] = B.data[i * cb + j];
        }
        break;
      }
      case Op::kScatterIntoConst: {
        load_constant(out, n.const_id);
        const auto& u = in(n.a).data;
        for (std::size_t p = 0; p < n.ints.size() / 2; ++p)
          out.data[static_cast<std::size_t>(n.ints[2 * p])] =
              u[static_cast<std::size_t>(n.ints[2 * p + 1])];
        break;
      }
      case Op::kReshape:
        out.data = in(n.a).data;
        break;
    }
  }

  void backward_node(NodeId id) {
    const Node& n = g_->nodes()[static_cast<std::size_t>(id)];
    if (n.op == Op::kInput || n.op == Op::kConst) return;
    if (!needs_grad_[static_cast<std::size_t>(id)]) return;
    const TensorT<S>& g = adj_[static_cast<std::size_t>(id)];
    const auto in = [&](NodeId x) -> const TensorT<S>& {
      return val_[static_cast<std::size_t>(x)];
    };
    const auto din = [&](NodeId x) -> TensorT<S>& { return adj_[static_cast<std::size_t>(x)]; };
    const auto needs = [&](NodeId x) { return needs_grad_[static_cast<std::size_t>(x)]; };
    switch (n.op) {
      case Op::kInput:
      case Op::kConst:
        break;
      case Op::kAdd: {
        auto& da = din(n.a).data;
        auto& db = din(n.b).data;
        const bool wa = needs(n.a), wb = needs(n.b);
        for (std::size_t j = 0; j < g.data.size(); ++j) {
          if (wa) da[j] += g.data[j];
          if (wb) db[j] += g.data[j];
        }
        break;
      }
      case Op::kSub: {
        auto& da = din(n.a).data;
        auto& db = din(n.b).data;
        const bool wa = needs(n.a), wb = needs(n.b);
        for (std::size_t j = 0; j < g.data.size(); ++j) {
          if (wa) da[j] += g.data[j];
          if (wb) db[j] -= g.data[j];
        }
        break;
      }
      case Op::kMul: {
        const auto& a = in(n.a).data;
        const auto& b = in(n.b).data;
        auto& da = din(n.a).data;
        auto& db = din(n.b).data;
        const bool wa = needs(n.a), wb = needs(n.b);
        for (std::size_t j = 0; j < g.data.size(); ++j) {
          if (wa) da[j] += g.data[j] * b[j];
          if (wb) db[j] += g.data[j] * a[j];
        }
        break;
      }
      case Op::kScale: {
        auto& da = din(n.a).data;
        for (std::size_t j = 0; j < g.data.size(); ++j) da[j] += g.data[j] * n.scalar;
        break;
      }
      case Op::kMatMul: {
        // z = A*B: dA += g*B^T, dB += A^T*g
        const auto& A = in(n.a);
        const auto& B = in(n.b);
        if (needs(n.a))
          detail::gemm_nt_acc(g.data.data(), B.data.data(), din(n.a).data.data(), A.rows(),
                              B.cols(), A.cols());
        if (needs(n.b))
          detail::gemm_tn_acc(A.data.data(), g.data.data(), din(n.b).data.data(), A.cols(),
                              A.rows(), B.cols());
        break;
      }
      case Op::kMatMulNT: {
        // z = A*B^T: dA += g*B, dB += g^T*A
        const auto& A = in(n.a);
        const auto& B = in(n.b);
        if (needs(n.a))
          detail::gemm_nn_acc(g.data.data(), B.data.data(), din(n.a).data.data(), A.rows(),
                              B.rows(), A.cols());
        if (needs(n.b))
          detail::gemm_tn_acc(g.data.data(), A.data.data(), din(n.b).data.data(), B.rows(),
                              A.rows(), A.cols());
        break;
      }
      case Op::kRowSoftmax: {
        // dx_j = z_j * (g_j - sum_k g_k z_k) over the allowed prefix.
        const auto& Z = val_[static_cast<std::size_t>(id)];
        const bool causal = n.ints[0] != 0;
        const std::int64_t r = Z.rows(), c = Z.cols();
        auto& da = din(n.a).data;
        for (std::int64_t i = 0; i < r; ++i) {
          const std::int64_t allowed = causal ? i + 1 : c;
          const S* zrow = Z.data.data() + i * c;
          const S* grow = g.data.data() + i * c;
          S dot{};
          for (std::int64_t j = 0; j < allowed; ++j) dot += grow[j] * zrow[j];
          for (std::int64_t j = 0; j < allowed; ++j)
            da[static_cast<std::size_t>(i * c + j)] += zrow[j] * (grow[j] - dot);
        }
        break;
      }
      case Op::kLayerNorm: {
        // dx = inv * (g - mean(g) - y * mean(g .* y)) per row.
        const auto& X = in(n.a);
        const auto& Y = val_[static_cast<std::size_t>(id)];
        const std::int64_t r = X.rows(), c = X.cols();
        const double invc = 1.0 / static_cast<double>(c);
        using std::sqrt;
        auto& da = din(n.a).data;
        for (std::int64_t i = 0; i < r; ++i) {
          const S* xrow = X.data.data() + i * c;
          const S* yrow = Y.data.data() + i * c;
          const S* grow = g.data.data() + i * c;
          S mean{};
          for (std::int64_t j = 0; j < c; ++j) mean += xrow[j];
          mean = mean * invc;
          S var{};
          for (std::int64_t j = 0; j < c; ++j) {
            const S d = xrow[j] - mean;
            var += d * d;
          }
          var = var * invc;
          const S inv = 1.0 / sqrt(var + n.scalar);
          S gmean{};
          S gymean{};
          for (std::int64_t j = 0; j < c; ++j) {
            gmean += grow[j];
            gymean += grow[j] * yrow[j];
          }
          gmean = gmean * invc;
          gymean = gymean * invc;
          for (std::int64_t j = 0; j < c; ++j)
            da[static_cast<std::size_t>(i * c + j)] += inv * (grow[j] - gmean - yrow[j] * gymean);
        }
        break;
      }
      case Op::kGelu: {
        const auto& a = in(n.a).data;
        auto& da = din(n.a).data;
        for (std::size_t j = 0; j < g.data.size(); ++j)
          da[j] += g.data[j] * detail::gelu_derivative(a[j]);
        break;
      }
      case Op::kRelu: {
        // Subgradient convention: derivative 0 at the kink.
        const auto& a = in(n.a).data;
        auto& da = din(n.a).data;
        for (std::size_t j = 0; j < g.data.size(); ++j)
          if (primal(a[j]) > 0.0) da[j] += g.data[j];
        break;
      }
      case Op::kGatherPairs: {
        const std::int64_t c = in(n.a).cols();
        auto& da = din(n.a).data;
        for (std::size_t p = 0; p < n.ints.size() / 2; ++p)
          da[static_cast<std::size_t>(n.ints[2 * p] * c + n.ints[2 * p + 1])] += g.data[p];
        break;
      }
      case Op::kLogSumExpRows: {
        // dx_rj = g_r * exp(x_rj - L_r); the output L is the log-normalizer.
        const auto& X = in(n.a);
        const auto& L = val_[static_cast<std::size_t>(id)];
        const std::int64_t r = X.rows(), c = X.cols();
        using std::exp;
        auto& da = din(n.a).data;
        for (std::int64_t i = 0; i < r; ++i) {
          const S* xrow = X.data.data() + i * c;
          const S gi = g.data[static_cast<std::size_t>(i)];
          const S Li = L.data[static_cast<std::size_t>(i)];
          for (std::int64_t j = 0; j < c; ++j)
            da[static_cast<std::size_t>(i * c + j)] += gi * exp(xrow[j] - Li);
        }
        break;
      }
      case Op::kSumAll: {
        auto& da = din(n.a).data;
        const S gi = g.data[0];
        for (auto& d : da) d += gi;
        break;
      }
      case Op::kSliceCols: {
        const std::int64_t c = in(n.a).cols(), c0 = n.ints[0], w = n.ints[1] - n.ints[0];
        auto& da = din(n.a).data;
        for (std::int64_t i = 0; i < in(n.a).rows(); ++i)
          for (std::int64_t j = 0; j < w; ++j)
            da[static_cast<std::size_t>(i * c + c0 + j)] += g.data[static_cast<std::size_t>(i * w + j)];
        break;
      }
      case Op::kConcatCols: {
        const std::int64_t ca = in(n.a).cols(), cb = in(n.b).cols(), c = ca + cb;
        auto& da = din(n.a).data;
        auto& db = din(n.b).data;
        const bool wa = needs(n.a), wb = needs(n.b);
        for (std::int64_t i = 0; i < in(n.a).rows(); ++i) {
          if (wa)
            for (std::int64_t j = 0; j < ca; ++j)
              da[static_cast<std::size_t>(i * ca + j)] +=
                  g.data[static_cast<std::size_t>(i * c + j)];
          if (wb)
            for (std::int64_t j = 0; j < cb; ++j)
              db[static_cast<std::size_t>(i * cb + j)] +=
                  g.data[static_cast<std::size_t>(i * c + ca + j)];
        }
        break;
      }
      case Op::kScatterIntoConst: {
        auto& du = din(n.a).data;
        for (std::size_t p = 0; p < n.ints.size() / 2; ++p)
          du[static_cast<std::size_t>(n.ints[2 * p + 1])] +=
              g.data[static_cast<std::size_t>(n.ints[2 * p])];
        break;
      }
      case Op::kReshape: {
        auto& da = din(n.a).data;
        for (std::size_t j = 0; j < g.data.size(); ++j) da[j] += g.data[j];
        break;
      }
    }
  }

  const Graph* g_;
  std::vector<TensorT<S>> val_;
  std::vector<TensorT<S>> adj_;
  std::vector<bool> needs_grad_;
  std::size_t bytes_ = 0;
};

}  // namespace hesskit

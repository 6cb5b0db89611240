#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hesskit {

/// Shape-carrying dense row-major array. The engine runs the same tensor
/// code on double and on Dual<double>.
template <typename S>
struct TensorT {
  std::vector<std::int64_t> shape;
  std::vector<S> data;

  TensorT() = default;
  TensorT(std::vector<std::int64_t> shp, std::vector<S> values)
      : shape(std::move(shp)), data(std::move(values)) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      throw std::invalid_argument("tensor: shape does not match data length");
  }

  static TensorT zeros(std::vector<std::int64_t> shp) {
    TensorT t;
    t.shape = std::move(shp);
    t.data.assign(static_cast<std::size_t>(numel_of(t.shape)), S{});
    return t;
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& shp) {
    std::int64_t n = 1;
    for (std::int64_t e : shp) {
      if (e < 0) throw std::invalid_argument("tensor: negative extent");
      n *= e;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool is_matrix() const { return shape.size() == 2; }
  std::int64_t rows() const { return shape.at(0); }
  std::int64_t cols() const { return shape.at(1); }

  S& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
  const S& at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * cols() + c)];
  }
};

using Tensor = TensorT<double>;

inline bool same_shape(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  return a == b;
}

inline std::string shape_to_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace hesskit

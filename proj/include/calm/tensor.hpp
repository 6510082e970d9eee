#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "calm/error.hpp"

namespace calm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

/// Dense row-major array of reals. Values are immutable after construction;
/// every op produces a fresh tensor and parameter updates swap whole tensors.
/// The identity `id()` keys gradient buffers on the tape.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor: data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    p_ = std::make_shared<const Payload>(
        Payload{std::move(shape), std::move(values), requires_grad, detail::next_tensor_id()});
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<S> v(shape_numel(shape), S(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    std::vector<S> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(1), requires_grad);
  }
  static Tensor scalar(S value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<S>{value}, requires_grad);
  }
  static Tensor identity(std::size_t n) {
    std::vector<S> v(n * n, S(0));
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = S(1);
    return Tensor(Shape{n, n}, std::move(v));
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t numel() const { return p_->values.size(); }
  std::size_t extent(std::size_t d) const { return p_->shape.at(d); }

  /// Leading extent;  1-D tensors count as a single row.
  std::size_t rows() const { return rank() == 2 ? extent(0) : 1; }
  /// Trailing extent (columns for 2-D, length for 1-D).
  std::size_t cols() const { return rank() == 2 ? extent(1) : numel(); }

  const std::vector<S>& values() const { return p_->values; }
  const S* data() const { return p_->values.data(); }

  S operator[](std::size_t i) const { return p_->values[i]; }
  S at(std::size_t i, std::size_t j) const { return p_->values[i * extent(1) + j]; }

  bool requires_grad() const { return p_->requires_grad; }
  std::uint64_t id() const { return p_->id; }

  /// Same values, new identity, different grad flag.
  Tensor with_requires_grad(bool rg) const { return Tensor(p_->shape, p_->values, rg); }

  bool all_finite() const {
    for (S v : p_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  struct Payload {
    Shape shape;
    std::vector<S> values;
    bool requires_grad;
    std::uint64_t id;
  };
  std::shared_ptr<const Payload> p_;
};

}  // namespace calm

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "calm/error.hpp"
#include "calm/tensor.hpp"

namespace calm {

/// Per-forward-pass record of executed primitives. Nodes are appended in
/// execution order, so replaying them back-to-front is reverse topological
/// order. The tape is discarded after backward; only first-order gradients
/// are supported.
template <typename S>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  /// Checked mode: every op output is scanned for NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  void record(const char* op, std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(backward)});
  }

  /// Gradient buffer for `t`, created zero-filled on first use.
  std::vector<S>& grad_buffer(const Tensor<S>& t) {
    auto it = grads_.find(t.id());
    if (it == grads_.end())
      it = grads_.emplace(t.id(), std::vector<S>(t.numel(), S(0))).first;
    return it->second;
  }

  /// Gradient of `t` if it participated in the backward pass.
  const std::vector<S>* grad(const Tensor<S>& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
  }
  std::vector<S>* find_grad(std::uint64_t id) {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
  }

  /// Runs every node's gradient rule exactly once, in reverse order.
  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    grad_buffer(loss)[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->fn();
      ++visited_;
    }
  }

  void throw_if_not_finite(const char* op, const Tensor<S>& t) const {
    if (check_finite_ && !t.all_finite())
      throw NonFiniteError(std::string("non-finite value produced by op '") + op + "'");
  }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t nodes_visited() const { return visited_; }

 private:
  struct Node {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, std::vector<S>> grads_;
  bool recording_ = true;
  bool check_finite_ = false;
  std::size_t visited_ = 0;
};

}  // namespace calm

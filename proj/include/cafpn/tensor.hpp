#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cafpn {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

// One recorded operation. `backward` reads the gradient of the output it
// belongs to and accumulates into the gradients of `inputs`.
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool graph_released = false;
  std::vector<double> grad;  // empty until first touched (non-leaves) or sized at creation (leaves)
  std::shared_ptr<Node> node;

  // Zero-filled gradient buffer, allocated on first use. Null when the
  // tensor does not take part in differentiation.
  std::vector<double>* grad_buffer();
};

}  // namespace detail

// Dense row-major tensor of doubles with optional reverse-mode gradient.
//
// Tensor is a handle: copies alias the same storage, the way parameters are
// shared between a module and the registry that names it. Values produced by
// operations are never modified afterwards; only leaves (parameters, running
// statistics, inputs) are written through `mutable_data`.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  // Gradient view; empty span if no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Fresh leaf with a copy of the values and no history.
  Tensor detach() const;

  // Reverse-mode sweep from this scalar. Every node reachable from here runs
  // exactly once, newest first; the graph is released afterwards.
  void backward() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor wrap_impl(std::shared_ptr<detail::TensorImpl>);

  std::shared_ptr<detail::TensorImpl> impl_;
};

Tensor wrap_impl(std::shared_ptr<detail::TensorImpl> impl);

namespace autograd {

bool grad_enabled();

// Disables graph recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// True when recording is on and at least one defined input requires grad.
bool needed(std::initializer_list<const Tensor*> inputs);

// Records `out` as produced by `op` from `inputs`.
void attach(Tensor& out, const char* op, std::initializer_list<const Tensor*> inputs,
            std::function<void(const detail::TensorImpl& out)> backward);
void attach(Tensor& out, const char* op, const std::vector<Tensor>& inputs,
            std::function<void(const detail::TensorImpl& out)> backward);

}  // namespace autograd

}  // namespace cafpn

#include "cafpn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#include "cafpn/error.hpp"

namespace cafpn {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) {
    n *= extent;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>* TensorImpl::grad_buffer() {
  if (!requires_grad) return nullptr;
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return &grad;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape) {
  for (auto extent : shape) {
    if (extent <= 0) {
      throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
  }
}

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data,
                                              bool requires_grad) {
  check_shape(shape);
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return impl;
}

}  // namespace

Tensor wrap_impl(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  std::vector<double> data(static_cast<std::size_t>(cafpn::numel(shape)), value);
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  check_shape(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(static_cast<std::size_t>(cafpn::numel(shape)));
  for (auto& v : data) v = dist(rng);
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  check_shape(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(static_cast<std::size_t>(cafpn::numel(shape)));
  for (auto& v : data) v = dist(rng);
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}

std::int64_t Tensor::numel() const { return cafpn::numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + to_string(s));
  std::int64_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[axis]) throw ShapeError("index out of range for " + to_string(s));
    offset = offset * s[axis] + i;
    ++axis;
  }
  return impl_->data[static_cast<std::size_t>(offset)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  shape();
  if (!is_leaf()) throw std::logic_error("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  if (flag && impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  if (!flag) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_ && impl_->node == nullptr; }

std::span<const double> Tensor::grad() const {
  shape();
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  shape();
  if (auto* g = impl_->grad_buffer()) return *g;
  return {};
}

void Tensor::zero_grad() {
  shape();
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(make_impl(shape(), impl_->data, false));
}

void Tensor::backward() const {
  const auto& s = shape();
  if (cafpn::numel(s) != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + to_string(s));
  }
  if (impl_->graph_released) throw std::logic_error("backward() called on a released graph");
  if (!impl_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Collect every recorded tensor reachable from the loss. Owning handles
  // keep intermediates alive while their nodes are released below.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<std::shared_ptr<detail::TensorImpl>> stack{impl_};
  while (!stack.empty()) {
    auto t = std::move(stack.back());
    stack.pop_back();
    if (!t->node || !seen.insert(t.get()).second) continue;
    for (const auto& in : t->node->inputs) {
      if (in->node && !seen.count(in.get())) stack.push_back(in);
    }
    order.push_back(std::move(t));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a->node->seq > b->node->seq;
  });

  impl_->grad_buffer()->at(0) += 1.0;
  for (const auto& t : order) {
    if (!t->grad.empty()) t->node->backward(*t);
  }
  for (const auto& t : order) {
    t->node.reset();
    t->graph_released = true;
  }
}

namespace autograd {

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_seq{1};
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool needed(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

void attach(Tensor& out, const char* op, const std::vector<Tensor>& inputs,
            std::function<void(const detail::TensorImpl& out)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) node->inputs.push_back(t.impl());
  }
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  out.impl()->grad.clear();
}

void attach(Tensor& out, const char* op, std::initializer_list<const Tensor*> inputs,
            std::function<void(const detail::TensorImpl& out)> backward) {
  std::vector<Tensor> list;
  for (const auto* t : inputs) {
    if (t) list.push_back(*t);
  }
  attach(out, op, list, std::move(backward));
}

}  // namespace autograd

}  // namespace cafpn

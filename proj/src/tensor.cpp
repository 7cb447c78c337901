#include "ueforge/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "ueforge/errors.hpp"

namespace ueforge {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }
Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_to_string(s));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range on axis " + std::to_string(axis));
    off = off * s[axis] + i;
    ++axis;
  }
  return impl_->data[off];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  shape();
  if (!impl_->is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw UsageError("tensor has no gradient");
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const { return Tensor(shape(), impl_->grad.empty() ? std::vector<double>(numel(), 0.0) : impl_->grad); }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_ && impl_->is_leaf(); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.inputs.reserve(inputs.size());
  for (auto& in : inputs) impl.inputs.push_back(in.impl());
  impl.backward = std::move(backward);
  return out;
}

Tape Tape::record(const Tensor& loss) {
  Tape tape;
  tape.root_ = loss.impl();
  if (!tape.root_) throw UsageError("backward on an undefined tensor");
  // Iterative post-order DFS; yields inputs before consumers.
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(tape.root_.get(), 0);
  seen.insert(tape.root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::run_backward() const {
  for (auto* node : nodes_) {
    if (!node->is_leaf()) node->grad.clear();
  }
  root_->grad_buffer().assign(root_->data.size(), 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->is_leaf() || !node->backward) continue;
    if (node->grad.empty()) continue;
    node->backward(*node);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.numel() != 1) throw UsageError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  if (!loss.requires_grad()) throw UsageError("backward on a tensor that is not on the tape");
  Tape::record(loss).run_backward();
}

void check_finite(const Tensor& t, const std::string& what) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(what + " produced a non-finite value");
  }
}

}  // namespace ueforge

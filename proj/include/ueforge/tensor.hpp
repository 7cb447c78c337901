#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ueforge {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct TensorImpl;

// Propagates the owning node's gradient into its inputs.
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  // Graph edges. Empty for leaves.
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty(); }
  // Allocates a zero gradient on first use.
  std::vector<double>& grad_buffer();
};

// Dense row-major array of doubles with optional participation in reverse-mode
// differentiation. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access. Only meaningful for leaves; mutating a tensor that is
  // an input to a recorded graph invalidates that graph's gradients.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  bool is_leaf() const;
  // New leaf with a copy of the data and no graph history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Process-wide switch (per thread) controlling whether operations record graph
// nodes. Evaluation and diagnostics run with recording disabled.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds an output tensor that records `inputs` as graph parents when any of
// them requires a gradient and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, BackwardFn backward);

// Topologically ordered view of the graph reaching a scalar loss.
class Tape {
 public:
  static Tape record(const Tensor& loss);

  // Nodes in topological order: every node appears after all of its inputs.
  const std::vector<TensorImpl*>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and visits each node once in reverse order.
  // Leaf gradients accumulate across calls; interior gradients are rebuilt.
  void run_backward() const;

 private:
  std::vector<TensorImpl*> nodes_;
  std::shared_ptr<TensorImpl> root_;
};

void backward(const Tensor& loss);

// Throws NumericError naming `what` when any entry is NaN or infinite.
void check_finite(const Tensor& t, const std::string& what);

}  // namespace ueforge

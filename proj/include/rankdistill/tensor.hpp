#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rankdistill {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// Dense row-major float64 array. Copies share the underlying node, so a
// Tensor behaves like a handle; use clone() for an independent copy.
//
// Every primitive op records its parents and a backward rule on the result
// node when any input requires grad (and no NoGradGuard is active).
// backward() orders the reachable nodes topologically (the tape) and runs
// each backward rule exactly once.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Mutable access for leaves only (parameter updates, initialisation).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  // Gradient accumulated by backward(); empty span when none was produced.
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  // Runs reverse-mode differentiation from this scalar.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  const detail::Node* node() const { return node_.get(); }

 private:
  friend struct TensorAccess;
  explicit Tensor(std::shared_ptr<detail::Node> node);
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread while in scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// ---- primitives ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
// x[m×n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
// Rows of table[v×h] selected by ids → [ids.size()×h].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
// Row i of a matrix as a [1×n] matrix.
Tensor row(const Tensor& x, std::size_t i);
// Single element as a scalar tensor.
Tensor element(const Tensor& x, std::size_t flat_index);

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// mean((a - b)^2) over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace rankdistill

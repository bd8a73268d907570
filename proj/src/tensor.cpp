#include "rankdistill/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace rankdistill {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
  static const NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool g_grad_enabled = true;

const NodePtr& node_of(const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("operation on undefined tensor");
  return TensorAccess::node(t);
}

const std::vector<double>& val(const Tensor& t) { return node_of(t)->value; }

// Builds the result node; records parents and the backward rule only when
// recording is on and some input needs a gradient.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const Tensor* in : inputs) n->parents.push_back(node_of(*in));
    n->backward_fn = std::move(backward);
  }
  return TensorAccess::wrap(std::move(n));
}

Tensor make_result_n(Shape shape, std::vector<double> value,
                     std::span<const Tensor> inputs,
                     std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const Tensor& in : inputs) n->parents.push_back(node_of(in));
    n->backward_fn = std::move(backward);
  }
  return TensorAccess::wrap(std::move(n));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " +
                                shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw std::invalid_argument(std::string(op) + ": needs a nonempty last axis");
  }
  return x.shape().back();
}

// c[m×n] += op(a) · op(b), row-major, op = optional transpose.
void gemm_acc(bool trans_a, bool trans_b, const double* a, const double* b, double* c,
              std::size_t m, std::size_t k, std::size_t n) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(trans_a ? m : k), b,
              static_cast<int>(trans_b ? k : n), 1.0, c, static_cast<int>(n));
}

std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
  return out;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---- Shape helpers ---------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() = default;
Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " holds " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_of(*this)->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for " +
                            shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this)->value.size(); }

std::span<const double> Tensor::data() const { return node_of(*this)->value; }

std::span<double> Tensor::mutable_data() {
  auto& n = node_of(*this);
  if (!n->parents.empty()) {
    throw std::logic_error("mutable_data: only leaf tensors may be written");
  }
  return n->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) +
                                " is not a single value");
  }
  return data()[0];
}

bool Tensor::requires_grad() const { return node_of(*this)->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  auto& n = node_of(*this);
  if (!n->parents.empty()) {
    throw std::logic_error("set_requires_grad: only leaf tensors may be toggled");
  }
  n->requires_grad = flag;
  if (!flag) n->grad.clear();
}

bool Tensor::is_leaf() const { return node_of(*this)->parents.empty(); }

std::span<const double> Tensor::grad() const { return node_of(*this)->grad; }

bool Tensor::has_grad() const { return !node_of(*this)->grad.empty(); }

void Tensor::zero_grad() {
  auto& g = node_of(*this)->grad;
  std::fill(g.begin(), g.end(), 0.0);
}

void Tensor::backward() const {
  const auto& root = node_of(*this);
  if (root->value.size() != 1 || !root->shape.empty()) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(root->shape));
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS: parents precede children in `tape`.
  std::vector<Node*> tape;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      tape.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : tape) {
    if (!n->parents.empty()) n->grad.assign(n->value.size(), 0.0);
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* n : tape) {
    if (!n->parents.empty()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

Tensor Tensor::detach() const {
  const auto& n = node_of(*this);
  return from(n->shape, n->value, false);
}

Tensor Tensor::clone() const {
  const auto& n = node_of(*this);
  return from(n->shape, n->value, n->requires_grad && n->parents.empty());
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

// Parents only get a gradient buffer when they require grad.
#define RD_PARENT_GRAD(self, i) \
  ((self).parents[i]->requires_grad ? &(self).parents[i]->grad_buffer() : nullptr)

// ---- primitives --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_acc(false, false, val(a).data(), val(b).data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const auto& dc = self.grad;
    if (auto* da = RD_PARENT_GRAD(self, 0)) {
      // dA = dC · Bᵀ
      gemm_acc(false, true, dc.data(), bv.data(), da->data(), m, n, k);
    }
    if (auto* db = RD_PARENT_GRAD(self, 1)) {
      // dB = Aᵀ · dC
      gemm_acc(true, false, av.data(), dc.data(), db->data(), k, m, n);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& av = val(a);
  const auto& bv = val(b);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      if (auto* g = RD_PARENT_GRAD(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& av = val(a);
  const auto& bv = val(b);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (auto* g = RD_PARENT_GRAD(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = RD_PARENT_GRAD(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& av = val(a);
  const auto& bv = val(b);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = RD_PARENT_GRAD(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = RD_PARENT_GRAD(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  const auto& xv = val(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return make_result(x.shape(), std::move(out), {&x}, [factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  const auto& xv = val(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + value;
  return make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) +
                                " does not match " + shape_str(x.shape()));
  }
  const auto& xv = val(x);
  const auto& bv = val(bias);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
  return make_result(x.shape(), std::move(out), {&x, &bias}, [m, n](Node& self) {
    if (auto* g = RD_PARENT_GRAD(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = RD_PARENT_GRAD(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  return make_result({n, m}, transposed(val(x).data(), m, n), {&x}, [m, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  return make_result(std::move(shape), val(x), {&x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t v = table.dim(0), h = table.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  const auto& tv = val(table);
  std::vector<double> out(idx.size() * h);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= v) {
      throw std::out_of_range("gather_rows: id " + std::to_string(idx[r]) +
                              " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(idx[r] * h), h,
                out.begin() + static_cast<std::ptrdiff_t>(r * h));
  }
  const std::size_t rows = idx.size();
  return make_result({rows, h}, std::move(out), {&table},
                     [idx = std::move(idx), h](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < h; ++j)
                           g[idx[r] * h + j] += self.grad[r * h + j];
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + count > n) {
    throw std::out_of_range("slice_cols: columns [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") exceed " +
                            shape_str(x.shape()));
  }
  const auto& xv = val(x);
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = xv[i * n + start + j];
  return make_result({m, count}, std::move(out), {&x}, [m, n, start, count](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j)
        g[i * n + start + j] += self.grad[i * count + j];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  for (const auto& p : parts) require_matrix(p, "concat_cols");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != m) {
      throw std::invalid_argument("concat_cols: row counts disagree, " +
                                  shape_str(parts[0].shape()) + " vs " +
                                  shape_str(p.shape()));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = val(parts[k]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j)
        out[i * total + offset + j] = pv[i * widths[k] + j];
    offset += widths[k];
  }
  return make_result_n({m, total}, std::move(out), parts,
                       [m, total, widths = std::move(widths)](Node& self) {
                         std::size_t offset = 0;
                         for (std::size_t k = 0; k < widths.size(); ++k) {
                           if (auto* g = RD_PARENT_GRAD(self, k)) {
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < widths[k]; ++j)
                                 (*g)[i * widths[k] + j] += self.grad[i * total + offset + j];
                           }
                           offset += widths[k];
                         }
                       });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("stack: no inputs");
  const Shape& inner = parts[0].shape();
  const std::size_t block = parts[0].numel();
  std::vector<double> out;
  out.reserve(block * parts.size());
  for (const auto& p : parts) {
    require_same_shape(parts[0], p, "stack");
    const auto& pv = val(p);
    out.insert(out.end(), pv.begin(), pv.end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return make_result_n(std::move(shape), std::move(out), parts, [block](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (auto* g = RD_PARENT_GRAD(self, k)) {
        for (std::size_t i = 0; i < block; ++i) (*g)[i] += self.grad[k * block + i];
      }
    }
  });
}

Tensor row(const Tensor& x, std::size_t i) {
  require_matrix(x, "row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (i >= m) {
    throw std::out_of_range("row: index " + std::to_string(i) + " outside " +
                            shape_str(x.shape()));
  }
  const auto& xv = val(x);
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(i * n),
                          xv.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return make_result({1, n}, std::move(out), {&x}, [i, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
  });
}

Tensor element(const Tensor& x, std::size_t flat_index) {
  if (flat_index >= x.numel()) {
    throw std::out_of_range("element: index " + std::to_string(flat_index) + " outside " +
                            shape_str(x.shape()));
  }
  return make_result({}, {val(x)[flat_index]}, {&x}, [flat_index](Node& self) {
    self.parents[0]->grad_buffer()[flat_index] += self.grad[0];
  });
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = last_dim(x, "softmax");
  const std::size_t rows = x.numel() / n;
  const auto& xv = val(x);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return make_result(x.shape(), std::move(out), {&x}, [rows, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[r * n + j] += y[r * n + j] * (self.grad[r * n + j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = last_dim(x, "log_softmax");
  const std::size_t rows = x.numel() / n;
  const auto& xv = val(x);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {&x}, [rows, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += self.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[r * n + j] += self.grad[r * n + j] - std::exp(y[r * n + j]) * total;
    }
  });
}

Tensor gelu(const Tensor& x) {
  const auto& xv = val(x);
  std::vector<double> out(xv.size());
  // tanh values kept for the backward pass
  std::vector<double> th(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    th[i] = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    out[i] = 0.5 * v * (1.0 + th[i]);
  }
  return make_result(x.shape(), std::move(out), {&x}, [th = std::move(th)](Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double t = th[i];
      const double d = 0.5 * (1.0 + t) +
                       0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor tanh(const Tensor& x) {
  const auto& xv = val(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  return make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

Tensor relu(const Tensor& x) {
  const auto& xv = val(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  // Subgradient 0 at the kink.
  return make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor log(const Tensor& x) {
  const auto& xv = val(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  return make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / xv[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t h = last_dim(x, "layer_norm");
  if (h < 2) throw std::invalid_argument("layer_norm: needs at least 2 features");
  if (gain.numel() != h || bias.numel() != h) {
    throw std::invalid_argument("layer_norm: gain/bias must have " + std::to_string(h) +
                                " entries");
  }
  const std::size_t rows = x.numel() / h;
  const auto& xv = val(x);
  const auto& gv = val(gain);
  const auto& bv = val(bias);
  std::vector<double> out(xv.size());
  // Normalised activations and inverse std are kept for the backward rule.
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * h;
    double mu = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += in[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < h; ++j) {
      const double xh = (in[j] - mu) * rs;
      (*xhat)[r * h + j] = xh;
      out[r * h + j] = gv[j] * xh + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gain, &bias},
                     [rows, h, xhat, rstd](Node& self) {
                       const auto& gv = self.parents[1]->value;
                       const auto& dy = self.grad;
                       if (auto* gx = RD_PARENT_GRAD(self, 0)) {
                         const double inv_h = 1.0 / static_cast<double>(h);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < h; ++j) {
                             const double d = dy[r * h + j] * gv[j];
                             m1 += d;
                             m2 += d * (*xhat)[r * h + j];
                           }
                           m1 *= inv_h;
                           m2 *= inv_h;
                           for (std::size_t j = 0; j < h; ++j) {
                             const double d = dy[r * h + j] * gv[j];
                             (*gx)[r * h + j] +=
                                 (*rstd)[r] * (d - m1 - (*xhat)[r * h + j] * m2);
                           }
                         }
                       }
                       if (auto* gg = RD_PARENT_GRAD(self, 1)) {
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < h; ++j)
                             (*gg)[j] += dy[r * h + j] * (*xhat)[r * h + j];
                       }
                       if (auto* gb = RD_PARENT_GRAD(self, 2)) {
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < h; ++j) (*gb)[j] += dy[r * h + j];
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : val(x)) total += v;
  return make_result({}, {total}, {&x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const auto& av = val(a);
  const auto& bv = val(b);
  if (av.empty()) throw std::invalid_argument("mse: empty tensors");
  const double inv_n = 1.0 / static_cast<double>(av.size());
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  return make_result({}, {total * inv_n}, {&a, &b}, [inv_n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const double s = 2.0 * inv_n * self.grad[0];
    if (auto* g = RD_PARENT_GRAD(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * (av[i] - bv[i]);
    }
    if (auto* g = RD_PARENT_GRAD(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= s * (av[i] - bv[i]);
    }
  });
}

#undef RD_PARENT_GRAD

}  // namespace rankdistill

#include "rrlm/tensor.hpp"

#include <sstream>

namespace rrlm {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape,
                                              std::vector<double> data,
                                              bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) fail(ErrorKind::Dimension, "tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (static_cast<int64_t>(data.size()) != numel(shape)) {
    fail(ErrorKind::Dimension, "data size " + std::to_string(data.size()) +
                                   " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

thread_local Tape* g_active_tape = nullptr;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<size_t>(n), value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_impl({1}, {value}, requires_grad));
}

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    fail(ErrorKind::Rank, "item() requires a scalar tensor, shape is " + shape_str(impl_->shape));
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (idx.size() != impl_->shape.size()) {
    fail(ErrorKind::Index, "index rank mismatch");
  }
  int64_t flat = 0;
  size_t k = 0;
  for (int i : idx) {
    int d = impl_->shape[k];
    if (i < 0 || i >= d) fail(ErrorKind::Index, "index out of bounds");
    flat = flat * d + i;
    ++k;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.size() != impl_->data.size()) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor::from_data(impl_->shape, impl_->data, false);
}

// make_op_output: construction path for op results. Marked non-leaf so the
// backward sweep only materializes grads on user-created tensors.
Tensor make_op_output(Shape shape, std::vector<double> data, bool requires_grad) {
  auto impl = make_impl(std::move(shape), std::move(data), requires_grad);
  impl->is_leaf = false;
  return Tensor(std::move(impl));
}

Tape::~Tape() = default;

Tape* Tape::active() { return g_active_tape; }

int Tape::node_id(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (impl->tape == this && impl->tape_node >= 0) return impl->tape_node;
  const int id = static_cast<int>(nodes_.size());
  impl->tape = this;
  impl->tape_node = id;
  nodes_.push_back(NodeRef{impl});
  return id;
}

void Tape::record(std::function<void(Tape&)> backward_fn) {
  ops_.push_back(std::move(backward_fn));
}

std::vector<double>& Tape::adjoint(int node) {
  auto& buf = adjoints_[static_cast<size_t>(node)];
  if (buf.empty()) {
    buf.assign(nodes_[static_cast<size_t>(node)].impl->data.size(), 0.0);
  }
  return buf;
}

bool Tape::has_adjoint(int node) const {
  return !adjoints_[static_cast<size_t>(node)].empty();
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    fail(ErrorKind::Rank, "backward requires a scalar loss, shape is " + shape_str(loss.shape()));
  }
  auto* impl = loss.impl();
  if (impl->tape != this || impl->tape_node < 0) {
    // Constant loss (never recorded): nothing to propagate.
    return;
  }
  adjoints_.assign(nodes_.size(), {});
  adjoint(impl->tape_node)[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    (*it)(*this);
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    auto& node = nodes_[i];
    if (!node.impl->requires_grad || !node.impl->is_leaf) continue;
    if (adjoints_[i].empty()) continue;
    auto& g = node.impl->grad;
    if (g.size() != node.impl->data.size()) g.assign(node.impl->data.size(), 0.0);
    const auto& adj = adjoints_[i];
    for (size_t j = 0; j < adj.size(); ++j) g[j] += adj[j];
  }
  adjoints_.clear();
}

TapeScope::TapeScope(Tape& tape) {
  prev_ = g_active_tape;
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = prev_; }

}  // namespace rrlm

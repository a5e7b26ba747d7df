#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rrlm/error.hpp"

namespace rrlm {

class Tape;

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool is_leaf = true;  // false for tensors produced by recorded ops
  std::vector<double> grad;  // lazily sized to data.size()

  // Registration on the currently active tape; re-registered whenever the
  // tensor enters a new tape (tapes are rebuilt every step).
  Tape* tape = nullptr;
  int tape_node = -1;
};

}  // namespace detail

// Dense row-major f64 tensor. Copies are shallow (shared storage); training
// code treats tensors built without requires_grad as immutable.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->is_leaf; }

  // Accumulated gradient; zeros until a backward pass reaches this leaf.
  std::span<const double> grad() const;
  void zero_grad();

  // Same values, requires_grad=false, fresh storage. Detached tensors never
  // touch a tape.
  Tensor detach() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_op_output(Shape shape, std::vector<double> data,
                               bool requires_grad);
};

// Reverse-mode gradient tape. Ops record themselves on the active tape when
// any input requires grad; recording order is execution order, which is a
// topological order by construction. One tape per thread, never shared.
class Tape {
 public:
  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Reverse sweep from a scalar loss. Adds into the .grad of every
  // requires_grad leaf reached; calling twice doubles those grads.
  void backward(const Tensor& loss);

  size_t node_count() const { return nodes_.size(); }

  static Tape* active();

  // Registers impl on this tape (idempotent) and returns its node id.
  int node_id(const std::shared_ptr<detail::TensorImpl>& impl);
  void record(std::function<void(Tape&)> backward_fn);

  // Adjoint buffer for a node, allocated on first touch.
  std::vector<double>& adjoint(int node);
  bool has_adjoint(int node) const;

 private:
  struct NodeRef {
    std::shared_ptr<detail::TensorImpl> impl;
  };
  std::vector<NodeRef> nodes_;
  std::vector<std::function<void(Tape&)>> ops_;
  std::vector<std::vector<double>> adjoints_;

  friend class TapeScope;
};

// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

enum class PoolMode { Max, Mean };

// ---- differentiable operations ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// 2-D matrix product [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
// [N,D] + [D] row-broadcast.
Tensor add_rowvec(const Tensor& x, const Tensor& v);

// Row gather from [V,D] by index list -> [n,D]; backward scatter-adds.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_cols(std::span<const Tensor> parts);
// n same-shape tensors -> one tensor with a new leading axis of length n.
Tensor stack(std::span<const Tensor> parts);
Tensor index_axis0(const Tensor& x, int i);
Tensor reshape(const Tensor& x, Shape new_shape);
// Appends zero rows to a [n,D] tensor until it has n_total rows.
Tensor pad_rows(const Tensor& x, int n_total);

Tensor sum(const Tensor& x);
Tensor gelu(const Tensor& x);

// Max-subtracted softmax along the given axis.
Tensor softmax(const Tensor& x, int axis);
// Row i of a [T,T] score matrix is normalized over columns 0..i; later
// columns are exactly zero, which is what makes the causality contract exact.
Tensor causal_softmax(const Tensor& scores);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Mean over non-ignored rows of -log softmax(logits)[target].
Tensor cross_entropy_logits(const Tensor& logits,
                            const std::vector<int>& targets,
                            std::optional<int> ignore_index = std::nullopt);

// [T,D] + mask(length T) -> [D]. Max mode routes gradient to the first
// argmax per dimension.
Tensor pool_time(const Tensor& x, const std::vector<uint8_t>& mask,
                 PoolMode mode);

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-8);
// All-pairs cosine matrix of the rows of [B,D] -> [B,B].
Tensor pairwise_cosine(const Tensor& reps, double eps = 1e-8);

}  // namespace rrlm

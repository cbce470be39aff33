#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hatkit/spectral.hpp"
#include "hatkit/tensor.hpp"

namespace hatkit {

// Reverse-mode tape. Ops evaluate eagerly, record their backward closure, and
// validate that every produced value is finite. Node ids are indices into the
// tape, which is already a topological order; backward walks it in reverse.
//
// Tensors handed to the tape are treated as immutable. One Graph serves one
// loss; after backward() the tape is consumed unless retain is requested.
template <class T>
class Graph {
 public:
  using Id = int32_t;

  Id leaf(Tensor<T> value);

  // Elementwise.
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id scale(Id a, T c);
  Id exp_(Id a);
  Id gelu(Id a);
  Id relu(Id a);

  // b's shape must be a trailing suffix of a's shape; b is broadcast across
  // the leading axes (bias vectors, positional tables).
  Id add_broadcast(Id a, Id b);

  // Structural.
  Id reshape(Id a, Shape shape);
  Id permute(Id a, const std::vector<int>& axes);
  Id narrow(Id a, int axis, int64_t start, int64_t length);
  Id concat(Id a, Id b, int axis);
  Id gather_rows(Id table, std::vector<int64_t> indices);  // embedding lookup

  // Batched matrix product over the trailing two axes. Leading axes must
  // match elementwise, or `b` may be rank-2 and is then shared across `a`'s
  // leading axes.
  Id matmul(Id a, Id b, bool trans_a = false, bool trans_b = false);

  // Reductions / normalizations.
  Id sum_all(Id a);
  Id mean_all(Id a);
  Id sum_axis(Id a, int axis);
  Id mean_axis(Id a, int axis);
  Id softmax(Id a, int axis);
  Id log_softmax(Id a, int axis);
  Id layer_norm(Id x, Id gamma, Id beta, double eps);

  // Per-(sample, channel) spatial normalization of an (N,C,H,W) tensor with
  // per-channel affine parameters.
  Id instance_norm(Id x, Id gamma, Id beta, double eps);

  // conv over (N,C,H,W) with kernel (OC,C,KH,KW), zero padding.
  Id conv2d(Id x, Id w, int stride, int pad);

  // Per-channel spectral filtering of an (N,C,H,W) tensor; the operator is
  // self-adjoint, so backward applies the same filter to the gradient.
  Id freq_filter(Id x, const spectral::FrequencyMask& mask);

  // Seeds d(loss)/d(loss) = 1 and accumulates into every reachable
  // requires_grad leaf. loss must be scalar (rank 0).
  void backward(Id loss, bool retain = false);

  const Tensor<T>& value(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  // Gradient of a node; throws if backward has not reached it.
  const Tensor<T>& grad(Id id) const;
  bool has_grad(Id id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }

  // (leaf id, gradient) for every requires_grad leaf, in creation order.
  std::vector<std::pair<Id, const Tensor<T>*>> leaf_gradients() const;

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until backward touches it
    bool needs_grad = false;
    bool is_leaf = false;
    const char* op = "";
    std::function<void(Graph&)> back;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;

  Id push(const char* op, Tensor<T> value, bool needs_grad, std::function<void(Graph&)> back);
  Tensor<T>& grad_buf(Id id);
  bool needs(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  const Tensor<T>& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
};

// Central-difference gradient check. `f` rebuilds the scalar loss from a
// fresh graph each call; coordinates are sampled when the input is large.
struct GradCheckReport {
  double max_rel_error = 0.0;
  int64_t checked = 0;
  int64_t worst_index = -1;
  bool pass = false;
  double tolerance = 0.0;
};

template <class T>
GradCheckReport grad_check(const std::function<typename Graph<T>::Id(Graph<T>&, typename Graph<T>::Id)>& f,
                           const Tensor<T>& x, double h, double tol,
                           int64_t max_coordinates = -1, uint64_t sample_seed = 0);

// Thread-count control for the parallel kernels (0 = hardware default).
void set_compute_threads(int n);
int compute_threads();

}  // namespace hatkit

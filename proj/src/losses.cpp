#include "hatkit/losses.hpp"

#include <cmath>

#include "hatkit/errors.hpp"

namespace hatkit::losses {

namespace {

template <class T>
void check_soft_labels(const Tensor<T>& y, const Shape& logits_shape) {
  if (y.rank() != 2 || y.shape != logits_shape)
    throw ShapeError("soft labels must match the logits shape " + shape_str(logits_shape));
  const int64_t n = y.shape[0], c = y.shape[1];
  for (int64_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double v = static_cast<double>(y.data[static_cast<size_t>(i * c + j)]);
      if (v < 0.0) throw ValueError("soft labels must be nonnegative");
      row += v;
    }
    if (std::fabs(row - 1.0) > 1e-4)
      throw ValueError("soft label row " + std::to_string(i) + " sums to " +
                       std::to_string(row) + ", expected 1");
  }
}

}  // namespace

template <class T>
typename Graph<T>::Id ce_loss(Graph<T>& g, typename Graph<T>::Id logits,
                              const Tensor<T>& soft_labels) {
  const Shape& ls = g.value(logits).shape;
  if (ls.size() != 2) throw ShapeError("ce_loss: logits must be (N, classes)");
  check_soft_labels(soft_labels, ls);
  const int64_t n = ls[0];
  auto lsm = g.log_softmax(logits, -1);
  auto y = g.leaf(soft_labels.with_grad(false));
  auto weighted = g.mul(lsm, y);
  return g.scale(g.sum_all(weighted), static_cast<T>(-1.0 / static_cast<double>(n)));
}

template <class T>
typename Graph<T>::Id ce_loss(Graph<T>& g, typename Graph<T>::Id logits,
                              const std::vector<int32_t>& labels) {
  const Shape& ls = g.value(logits).shape;
  if (ls.size() != 2) throw ShapeError("ce_loss: logits must be (N, classes)");
  if (static_cast<int64_t>(labels.size()) != ls[0])
    throw ShapeError("ce_loss: label count does not match the batch");
  Tensor<T> hot = Tensor<T>::zeros(ls);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= ls[1]) throw ValueError("ce_loss: label out of range");
    hot.data[i * static_cast<size_t>(ls[1]) + static_cast<size_t>(labels[i])] = T(1);
  }
  return ce_loss(g, logits, hot);
}

template <class T>
typename Graph<T>::Id symmetric_kl(Graph<T>& g, typename Graph<T>::Id logits_p,
                                   typename Graph<T>::Id logits_q) {
  const Shape& ps = g.value(logits_p).shape;
  if (ps.size() != 2 || g.value(logits_q).shape != ps)
    throw ShapeError("symmetric_kl: logits must be (N, classes) with matching shapes");
  const int64_t n = ps[0];
  auto lp = g.log_softmax(logits_p, -1);
  auto lq = g.log_softmax(logits_q, -1);
  auto p = g.exp_(lp);
  auto q = g.exp_(lq);
  auto diff = g.sub(lp, lq);  // log p - log q
  auto kl_pq = g.sum_all(g.mul(p, diff));
  auto kl_qp = g.sum_all(g.mul(q, g.scale(diff, T(-1))));
  return g.scale(g.add(kl_pq, kl_qp), static_cast<T>(0.5 / static_cast<double>(n)));
}

template <class T>
std::vector<int32_t> hard_decisions(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("hard_decisions: logits must be (N, classes)");
  const int64_t n = logits.shape[0], c = logits.shape[1];
  std::vector<int32_t> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const T* row = logits.data.data() + i * c;
    int32_t best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = static_cast<int32_t>(j);
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

template <class T>
typename Graph<T>::Id distill_loss(Graph<T>& g, typename Graph<T>::Id student_logits,
                                   const std::vector<int32_t>& labels,
                                   const Tensor<T>& teacher_logits) {
  const Shape& ls = g.value(student_logits).shape;
  if (teacher_logits.rank() != 2 || teacher_logits.shape[1] != ls[1])
    throw ShapeError("distill_loss: teacher class count does not match the student");
  if (teacher_logits.shape[0] != ls[0])
    throw ShapeError("distill_loss: teacher batch size does not match the student");
  std::vector<int32_t> yt = hard_decisions(teacher_logits);
  auto ce_label = ce_loss(g, student_logits, labels);
  auto ce_teacher = ce_loss(g, student_logits, yt);
  return g.scale(g.add(ce_label, ce_teacher), T(0.5));
}

template <class T>
typename Graph<T>::Id distill_loss(Graph<T>& g, typename Graph<T>::Id student_logits,
                                   const Tensor<T>& soft_labels, const Tensor<T>& teacher_logits) {
  const Shape& ls = g.value(student_logits).shape;
  if (teacher_logits.rank() != 2 || teacher_logits.shape[1] != ls[1])
    throw ShapeError("distill_loss: teacher class count does not match the student");
  if (teacher_logits.shape[0] != ls[0])
    throw ShapeError("distill_loss: teacher batch size does not match the student");
  std::vector<int32_t> yt = hard_decisions(teacher_logits);
  auto ce_label = ce_loss(g, student_logits, soft_labels);
  auto ce_teacher = ce_loss(g, student_logits, yt);
  return g.scale(g.add(ce_label, ce_teacher), T(0.5));
}

#define INSTANTIATE(T)                                                                       \
  template typename Graph<T>::Id ce_loss<T>(Graph<T>&, typename Graph<T>::Id,                \
                                            const Tensor<T>&);                              \
  template typename Graph<T>::Id ce_loss<T>(Graph<T>&, typename Graph<T>::Id,                \
                                            const std::vector<int32_t>&);                   \
  template typename Graph<T>::Id symmetric_kl<T>(Graph<T>&, typename Graph<T>::Id,           \
                                                 typename Graph<T>::Id);                    \
  template std::vector<int32_t> hard_decisions<T>(const Tensor<T>&);                        \
  template typename Graph<T>::Id distill_loss<T>(Graph<T>&, typename Graph<T>::Id,           \
                                                 const std::vector<int32_t>&,               \
                                                 const Tensor<T>&);                         \
  template typename Graph<T>::Id distill_loss<T>(Graph<T>&, typename Graph<T>::Id,           \
                                                 const Tensor<T>&, const Tensor<T>&);

INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace hatkit::losses

#pragma once

#include <vector>

#include "hatkit/graph.hpp"
#include "hatkit/tensor.hpp"

namespace hatkit::losses {

// Mean over the batch of -sum_c y_c * log softmax(logits)_c. Soft label rows
// must sum to 1 within 1e-4.
template <class T>
typename Graph<T>::Id ce_loss(Graph<T>& g, typename Graph<T>::Id logits,
                              const Tensor<T>& soft_labels);

template <class T>
typename Graph<T>::Id ce_loss(Graph<T>& g, typename Graph<T>::Id logits,
                              const std::vector<int32_t>& labels);

// Mean over the batch of (KL(p||q) + KL(q||p)) / 2 between the two softmax
// outputs; gradients flow through both logit branches.
template <class T>
typename Graph<T>::Id symmetric_kl(Graph<T>& g, typename Graph<T>::Id logits_p,
                                   typename Graph<T>::Id logits_q);

// Hard-decision distillation: (CE(student, y) + CE(student, argmax teacher))/2.
// Teacher ties break toward the lowest class index.
template <class T>
typename Graph<T>::Id distill_loss(Graph<T>& g, typename Graph<T>::Id student_logits,
                                   const std::vector<int32_t>& labels,
                                   const Tensor<T>& teacher_logits);

template <class T>
typename Graph<T>::Id distill_loss(Graph<T>& g, typename Graph<T>::Id student_logits,
                                   const Tensor<T>& soft_labels, const Tensor<T>& teacher_logits);

// argmax per row, ties toward the lowest index.
template <class T>
std::vector<int32_t> hard_decisions(const Tensor<T>& logits);

}  // namespace hatkit::losses

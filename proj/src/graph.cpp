#include "hatkit/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstring>
#include <memory>
#include <omp.h>

#include "gemm.hpp"

namespace hatkit {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

int normalize_axis(int axis, int rank, const char* who) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ValueError(std::string(who) + ": axis " + std::to_string(axis) +
                     " invalid for rank " + std::to_string(rank));
  return a;
}

struct AxisSplit {
  int64_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class T>
Tensor<T> permute_copy(const Tensor<T>& a, const std::vector<int>& axes) {
  int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw ValueError("permute: axis list length mismatch");
  Shape out_shape(static_cast<size_t>(r));
  std::vector<char> seen(static_cast<size_t>(r), 0);
  for (int i = 0; i < r; ++i) {
    int ax = axes[static_cast<size_t>(i)];
    if (ax < 0 || ax >= r || seen[static_cast<size_t>(ax)])
      throw ValueError("permute: invalid axis list");
    seen[static_cast<size_t>(ax)] = 1;
    out_shape[static_cast<size_t>(i)] = a.shape[static_cast<size_t>(ax)];
  }
  if (r == 0) return a;
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * a.shape[static_cast<size_t>(i + 1)];
  std::vector<int64_t> step(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    step[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];

  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const int64_t last_len = out_shape[static_cast<size_t>(r - 1)];
  const int64_t last_step = step[static_cast<size_t>(r - 1)];
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t src = 0;
  int64_t dst = 0;
  const int64_t total = out.numel();
  while (dst < total) {
    if (last_step == 1) {
      std::memcpy(out.data.data() + dst, a.data.data() + src,
                  static_cast<size_t>(last_len) * sizeof(T));
    } else {
      for (int64_t j = 0; j < last_len; ++j)
        out.data[static_cast<size_t>(dst + j)] = a.data[static_cast<size_t>(src + j * last_step)];
    }
    dst += last_len;
    int i = r - 2;
    for (; i >= 0; --i) {
      idx[static_cast<size_t>(i)]++;
      src += step[static_cast<size_t>(i)];
      if (idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
      src -= step[static_cast<size_t>(i)] * out_shape[static_cast<size_t>(i)];
    }
    if (i < 0) break;
  }
  return out;
}

std::vector<int> inverse_axes(const std::vector<int>& axes) {
  std::vector<int> inv(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
  return inv;
}

// im2col for one image: x (C,H,W) -> col (C*KH*KW, OH*OW).
template <class T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t oh, int64_t ow, T* col) {
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((ch * kh + ki) * kw + kj) * oh * ow;
        for (int64_t oi = 0; oi < oh; ++oi) {
          int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) {
            std::fill(dst, dst + ow, T(0));
            dst += ow;
            continue;
          }
          const T* src = x + (ch * h + ii) * w;
          for (int64_t oj = 0; oj < ow; ++oj) {
            int64_t jj = oj * stride + kj - pad;
            *dst++ = (jj < 0 || jj >= w) ? T(0) : src[jj];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, T* x) {
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((ch * kh + ki) * kw + kj) * oh * ow;
        for (int64_t oi = 0; oi < oh; ++oi) {
          int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) {
            src += ow;
            continue;
          }
          T* dst = x + (ch * h + ii) * w;
          for (int64_t oj = 0; oj < ow; ++oj) {
            int64_t jj = oj * stride + kj - pad;
            if (jj >= 0 && jj < w) dst[jj] += src[oj];
          }
          src += ow;
        }
      }
    }
  }
}

template <class T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  const int64_t n = static_cast<int64_t>(dst.size());
#pragma omp parallel for schedule(static) if (n > 131072)
  for (int64_t i = 0; i < n; ++i) dst[static_cast<size_t>(i)] += src[static_cast<size_t>(i)];
}

}  // namespace

void set_compute_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

int compute_threads() { return omp_get_max_threads(); }

template <class T>
typename Graph<T>::Id Graph<T>::push(const char* op, Tensor<T> value, bool needs_grad,
                                     std::function<void(Graph&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.op = op;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

template <class T>
Tensor<T>& Graph<T>::grad_buf(Id id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
  return n.grad;
}

template <class T>
const Tensor<T>& Graph<T>::grad(Id id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.data.empty())
    throw Error(std::string("gradient not available for node produced by ") + n.op);
  return n.grad;
}

template <class T>
std::vector<std::pair<typename Graph<T>::Id, const Tensor<T>*>> Graph<T>::leaf_gradients() const {
  std::vector<std::pair<Id, const Tensor<T>*>> out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.is_leaf && n.needs_grad && !n.grad.data.empty())
      out.emplace_back(static_cast<Id>(i), &n.grad);
  }
  return out;
}

template <class T>
typename Graph<T>::Id Graph<T>::leaf(Tensor<T> value) {
  check_finite(value, "leaf");
  bool rg = value.requires_grad;
  Id id = push("leaf", std::move(value), rg, nullptr);
  nodes_[static_cast<size_t>(id)].is_leaf = true;
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::add(Id a, Id b) {
  if (!same_shape(val(a).shape, val(b).shape))
    throw ShapeError("add: shape mismatch " + shape_str(val(a).shape) + " vs " +
                     shape_str(val(b).shape));
  Tensor<T> out = Tensor<T>::zeros(val(a).shape);
  const T* av = val(a).data.data();
  const T* bv = val(b).data.data();
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = av[i] + bv[i];
  check_finite(out, "add");
  Id id = push("add", std::move(out), needs(a) || needs(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, b](Graph& g) {
    const auto& gr = g.grad(id).data;
    if (g.needs(a)) accumulate(g.grad_buf(a).data, gr);
    if (g.needs(b)) accumulate(g.grad_buf(b).data, gr);
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::sub(Id a, Id b) {
  if (!same_shape(val(a).shape, val(b).shape)) throw ShapeError("sub: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(val(a).shape);
  const T* av = val(a).data.data();
  const T* bv = val(b).data.data();
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = av[i] - bv[i];
  check_finite(out, "sub");
  Id id = push("sub", std::move(out), needs(a) || needs(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, b](Graph& g) {
    const auto& gr = g.grad(id).data;
    if (g.needs(a)) accumulate(g.grad_buf(a).data, gr);
    if (g.needs(b)) {
      auto& db = g.grad_buf(b).data;
      const int64_t m = static_cast<int64_t>(gr.size());
#pragma omp parallel for schedule(static) if (m > 131072)
      for (int64_t i = 0; i < m; ++i) db[static_cast<size_t>(i)] -= gr[static_cast<size_t>(i)];
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::mul(Id a, Id b) {
  if (!same_shape(val(a).shape, val(b).shape)) throw ShapeError("mul: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(val(a).shape);
  const T* av = val(a).data.data();
  const T* bv = val(b).data.data();
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = av[i] * bv[i];
  check_finite(out, "mul");
  Id id = push("mul", std::move(out), needs(a) || needs(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, b](Graph& g) {
    const auto& gr = g.grad(id).data;
    const int64_t m = static_cast<int64_t>(gr.size());
    if (g.needs(a)) {
      auto& da = g.grad_buf(a).data;
      const T* bv2 = g.val(b).data.data();
#pragma omp parallel for schedule(static) if (m > 131072)
      for (int64_t i = 0; i < m; ++i) da[static_cast<size_t>(i)] += gr[static_cast<size_t>(i)] * bv2[i];
    }
    if (g.needs(b)) {
      auto& db = g.grad_buf(b).data;
      const T* av2 = g.val(a).data.data();
#pragma omp parallel for schedule(static) if (m > 131072)
      for (int64_t i = 0; i < m; ++i) db[static_cast<size_t>(i)] += gr[static_cast<size_t>(i)] * av2[i];
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::scale(Id a, T c) {
  Tensor<T> out = Tensor<T>::zeros(val(a).shape);
  const T* av = val(a).data.data();
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = av[i] * c;
  check_finite(out, "scale");
  Id id = push("scale", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, c](Graph& g) {
    if (!g.needs(a)) return;
    const auto& gr = g.grad(id).data;
    auto& da = g.grad_buf(a).data;
    const int64_t m = static_cast<int64_t>(gr.size());
#pragma omp parallel for schedule(static) if (m > 131072)
    for (int64_t i = 0; i < m; ++i) da[static_cast<size_t>(i)] += gr[static_cast<size_t>(i)] * c;
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::exp_(Id a) {
  Tensor<T> out = Tensor<T>::zeros(val(a).shape);
  const T* av = val(a).data.data();
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = std::exp(av[i]);
  check_finite(out, "exp");
  Id id = push("exp", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a](Graph& g) {
    if (!g.needs(a)) return;
    const auto& gr = g.grad(id).data;
    const T* y = g.val(id).data.data();
    auto& da = g.grad_buf(a).data;
    for (size_t i = 0; i < gr.size(); ++i) da[i] += gr[i] * y[i];
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::gelu(Id a) {
  Tensor<T> out = Tensor<T>::zeros(val(a).shape);
  const T* av = val(a).data.data();
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 32768)
  for (int64_t i = 0; i < n; ++i) {
    double x = static_cast<double>(av[i]);
    out.data[static_cast<size_t>(i)] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  check_finite(out, "gelu");
  Id id = push("gelu", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a](Graph& g) {
    if (!g.needs(a)) return;
    const auto& gr = g.grad(id).data;
    const T* xv = g.val(a).data.data();
    auto& da = g.grad_buf(a).data;
    const int64_t m = static_cast<int64_t>(gr.size());
#pragma omp parallel for schedule(static) if (m > 32768)
    for (int64_t i = 0; i < m; ++i) {
      double x = static_cast<double>(xv[i]);
      double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      da[static_cast<size_t>(i)] += gr[static_cast<size_t>(i)] * static_cast<T>(cdf + x * pdf);
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::relu(Id a) {
  Tensor<T> out = Tensor<T>::zeros(val(a).shape);
  const T* av = val(a).data.data();
  const int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = av[i] > T(0) ? av[i] : T(0);
  check_finite(out, "relu");
  Id id = push("relu", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a](Graph& g) {
    if (!g.needs(a)) return;
    const auto& gr = g.grad(id).data;
    const T* xv = g.val(a).data.data();
    auto& da = g.grad_buf(a).data;
    const int64_t m = static_cast<int64_t>(gr.size());
#pragma omp parallel for schedule(static) if (m > 131072)
    for (int64_t i = 0; i < m; ++i)
      if (xv[i] > T(0)) da[static_cast<size_t>(i)] += gr[static_cast<size_t>(i)];
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::add_broadcast(Id a, Id b) {
  const Shape& as = val(a).shape;
  const Shape& bs = val(b).shape;
  if (bs.size() > as.size() ||
      !std::equal(bs.begin(), bs.end(), as.end() - static_cast<int64_t>(bs.size())))
    throw ShapeError("add_broadcast: " + shape_str(bs) + " is not a trailing suffix of " +
                     shape_str(as));
  const int64_t bn = val(b).numel();
  const int64_t n = val(a).numel();
  Tensor<T> out = Tensor<T>::zeros(as);
  const T* av = val(a).data.data();
  const T* bv = val(b).data.data();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = av[i] + bv[i % bn];
  check_finite(out, "add_broadcast");
  Id id = push("add_broadcast", std::move(out), needs(a) || needs(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, b, bn](Graph& g) {
    const auto& gr = g.grad(id).data;
    if (g.needs(a)) accumulate(g.grad_buf(a).data, gr);
    if (g.needs(b)) {
      auto& db = g.grad_buf(b).data;
      for (size_t i = 0; i < gr.size(); ++i) db[i % static_cast<size_t>(bn)] += gr[i];
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::reshape(Id a, Shape shape) {
  if (shape_numel(shape) != val(a).numel())
    throw ShapeError("reshape: element count mismatch " + shape_str(val(a).shape) + " -> " +
                     shape_str(shape));
  Tensor<T> out(shape, val(a).data);
  Id id = push("reshape", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a](Graph& g) {
    if (!g.needs(a)) return;
    accumulate(g.grad_buf(a).data, g.grad(id).data);
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::permute(Id a, const std::vector<int>& axes) {
  Tensor<T> out = permute_copy(val(a), axes);
  Id id = push("permute", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, axes](Graph& g) {
    if (!g.needs(a)) return;
    Tensor<T> gt = permute_copy(g.grad(id), inverse_axes(axes));
    accumulate(g.grad_buf(a).data, gt.data);
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::narrow(Id a, int axis, int64_t start, int64_t length) {
  const Shape& as = val(a).shape;
  int ax = normalize_axis(axis, static_cast<int>(as.size()), "narrow");
  if (start < 0 || length <= 0 || start + length > as[static_cast<size_t>(ax)])
    throw ValueError("narrow: range out of bounds");
  AxisSplit sp = split_axis(as, ax);
  Shape os = as;
  os[static_cast<size_t>(ax)] = length;
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* av = val(a).data.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    std::memcpy(out.data.data() + o * length * sp.inner,
                av + (o * sp.len + start) * sp.inner,
                static_cast<size_t>(length * sp.inner) * sizeof(T));
  Id id = push("narrow", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, sp, start, length](Graph& g) {
    if (!g.needs(a)) return;
    const auto& gr = g.grad(id).data;
    auto& da = g.grad_buf(a).data;
    for (int64_t o = 0; o < sp.outer; ++o) {
      const T* src = gr.data() + o * length * sp.inner;
      T* dst = da.data() + (o * sp.len + start) * sp.inner;
      for (int64_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::concat(Id a, Id b, int axis) {
  const Shape& as = val(a).shape;
  const Shape& bs = val(b).shape;
  if (as.size() != bs.size()) throw ShapeError("concat: rank mismatch");
  int ax = normalize_axis(axis, static_cast<int>(as.size()), "concat");
  for (size_t i = 0; i < as.size(); ++i)
    if (static_cast<int>(i) != ax && as[i] != bs[i])
      throw ShapeError("concat: extent mismatch outside the concat axis");
  AxisSplit spa = split_axis(as, ax);
  AxisSplit spb = split_axis(bs, ax);
  Shape os = as;
  os[static_cast<size_t>(ax)] = spa.len + spb.len;
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* av = val(a).data.data();
  const T* bv = val(b).data.data();
  int64_t row_a = spa.len * spa.inner;
  int64_t row_b = spb.len * spb.inner;
  for (int64_t o = 0; o < spa.outer; ++o) {
    std::memcpy(out.data.data() + o * (row_a + row_b), av + o * row_a,
                static_cast<size_t>(row_a) * sizeof(T));
    std::memcpy(out.data.data() + o * (row_a + row_b) + row_a, bv + o * row_b,
                static_cast<size_t>(row_b) * sizeof(T));
  }
  Id id = push("concat", std::move(out), needs(a) || needs(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, b, spa, row_a, row_b](Graph& g) {
    const auto& gr = g.grad(id).data;
    if (g.needs(a)) {
      auto& da = g.grad_buf(a).data;
      for (int64_t o = 0; o < spa.outer; ++o) {
        const T* src = gr.data() + o * (row_a + row_b);
        T* dst = da.data() + o * row_a;
        for (int64_t i = 0; i < row_a; ++i) dst[i] += src[i];
      }
    }
    if (g.needs(b)) {
      auto& db = g.grad_buf(b).data;
      for (int64_t o = 0; o < spa.outer; ++o) {
        const T* src = gr.data() + o * (row_a + row_b) + row_a;
        T* dst = db.data() + o * row_b;
        for (int64_t i = 0; i < row_b; ++i) dst[i] += src[i];
      }
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::gather_rows(Id table, std::vector<int64_t> indices) {
  const Tensor<T>& tv = val(table);
  if (tv.rank() != 2) throw ShapeError("gather_rows: table must be rank 2");
  int64_t rows = tv.shape[0], width = tv.shape[1];
  for (int64_t ix : indices)
    if (ix < 0 || ix >= rows) throw ValueError("gather_rows: index out of range");
  Tensor<T> out = Tensor<T>::zeros({static_cast<int64_t>(indices.size()), width});
  for (size_t r = 0; r < indices.size(); ++r)
    std::memcpy(out.data.data() + static_cast<int64_t>(r) * width,
                tv.data.data() + indices[r] * width, static_cast<size_t>(width) * sizeof(T));
  Id id = push("gather_rows", std::move(out), needs(table), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, table, indices = std::move(indices), width](Graph& g) {
    if (!g.needs(table)) return;
    const auto& gr = g.grad(id).data;
    auto& dt = g.grad_buf(table).data;
    for (size_t r = 0; r < indices.size(); ++r) {
      const T* src = gr.data() + static_cast<int64_t>(r) * width;
      T* dst = dt.data() + indices[r] * width;
      for (int64_t i = 0; i < width; ++i) dst[i] += src[i];
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::matmul(Id a, Id b, bool trans_a, bool trans_b) {
  const Tensor<T>& A = val(a);
  const Tensor<T>& B = val(b);
  if (A.rank() < 2 || B.rank() < 2) throw ShapeError("matmul: operands must have rank >= 2");
  const int64_t am = A.shape[static_cast<size_t>(A.rank() - 2)];
  const int64_t an = A.shape[static_cast<size_t>(A.rank() - 1)];
  const int64_t bm = B.shape[static_cast<size_t>(B.rank() - 2)];
  const int64_t bn = B.shape[static_cast<size_t>(B.rank() - 1)];
  const int64_t m = trans_a ? an : am;
  const int64_t k = trans_a ? am : an;
  const int64_t kb = trans_b ? bn : bm;
  const int64_t n = trans_b ? bm : bn;
  if (k != kb)
    throw ShapeError("matmul: inner extents disagree, " + shape_str(A.shape) +
                     (trans_a ? "^T" : "") + " x " + shape_str(B.shape) + (trans_b ? "^T" : ""));
  const bool shared_b = (B.rank() == 2 && A.rank() > 2);
  if (!shared_b && A.rank() != B.rank())
    throw ShapeError("matmul: rank mismatch without a shared rank-2 rhs");
  Shape lead(A.shape.begin(), A.shape.end() - 2);
  if (!shared_b)
    for (size_t i = 0; i < lead.size(); ++i)
      if (B.shape[i] != lead[i]) throw ShapeError("matmul: leading extents disagree");
  const int64_t batch = shape_numel(lead);
  Shape os = lead;
  os.push_back(m);
  os.push_back(n);
  Tensor<T> out = Tensor<T>::zeros(os);
  const int64_t a_stride = am * an;
  const int64_t b_stride = shared_b ? 0 : bm * bn;
  const int64_t c_stride = m * n;
  const T* ap = A.data.data();
  const T* bp = B.data.data();
  T* cp = out.data.data();
  if (batch == 1) {
    detail::gemm_parallel(ap, bp, cp, m, k, n, trans_a, trans_b, false);
  } else {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < batch; ++i)
      detail::gemm_block(ap + i * a_stride, bp + i * b_stride, cp + i * c_stride, m, k, n,
                         trans_a, trans_b, false);
  }
  check_finite(out, "matmul");
  Id id = push("matmul", std::move(out), needs(a) || needs(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, b, trans_a, trans_b, m, k, n, batch, a_stride,
                                          b_stride, c_stride, shared_b](Graph& g) {
    const T* gp = g.grad(id).data.data();
    const T* ap2 = g.val(a).data.data();
    const T* bp2 = g.val(b).data.data();
    if (g.needs(a)) {
      T* da = g.grad_buf(a).data.data();
      if (batch == 1) {
        if (!trans_a) {
          if (!trans_b) detail::gemm_parallel(gp, bp2, da, m, n, k, false, true, true);
          else detail::gemm_parallel(gp, bp2, da, m, n, k, false, false, true);
        } else {
          if (!trans_b) detail::gemm_parallel(bp2, gp, da, k, n, m, false, true, true);
          else detail::gemm_parallel(bp2, gp, da, k, n, m, true, true, true);
        }
      } else {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < batch; ++i) {
          const T* gi = gp + i * c_stride;
          const T* bi = bp2 + i * b_stride;
          T* dai = da + i * a_stride;
          if (!trans_a) {
            if (!trans_b) detail::gemm_block(gi, bi, dai, m, n, k, false, true, true);
            else detail::gemm_block(gi, bi, dai, m, n, k, false, false, true);
          } else {
            if (!trans_b) detail::gemm_block(bi, gi, dai, k, n, m, false, true, true);
            else detail::gemm_block(bi, gi, dai, k, n, m, true, true, true);
          }
        }
      }
    }
    if (g.needs(b)) {
      T* db = g.grad_buf(b).data.data();
      if (batch == 1) {
        if (!trans_b) {
          if (!trans_a) detail::gemm_parallel(ap2, gp, db, k, m, n, true, false, true);
          else detail::gemm_parallel(ap2, gp, db, k, m, n, false, false, true);
        } else {
          if (!trans_a) detail::gemm_parallel(gp, ap2, db, n, m, k, true, false, true);
          else detail::gemm_parallel(gp, ap2, db, n, m, k, true, true, true);
        }
      } else if (shared_b && !trans_a) {
        // Flatten the batch into rows: a single deterministic product.
        if (!trans_b) detail::gemm_parallel(ap2, gp, db, k, batch * m, n, true, false, true);
        else detail::gemm_parallel(gp, ap2, db, n, batch * m, k, true, false, true);
      } else if (shared_b) {
        for (int64_t i = 0; i < batch; ++i) {
          const T* gi = gp + i * c_stride;
          const T* ai = ap2 + i * a_stride;
          if (!trans_b) detail::gemm_block(ai, gi, db, k, m, n, false, false, true);
          else detail::gemm_block(gi, ai, db, n, m, k, true, true, true);
        }
      } else {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < batch; ++i) {
          const T* gi = gp + i * c_stride;
          const T* ai = ap2 + i * a_stride;
          T* dbi = db + i * b_stride;
          if (!trans_b) {
            if (!trans_a) detail::gemm_block(ai, gi, dbi, k, m, n, true, false, true);
            else detail::gemm_block(ai, gi, dbi, k, m, n, false, false, true);
          } else {
            if (!trans_a) detail::gemm_block(gi, ai, dbi, n, m, k, true, false, true);
            else detail::gemm_block(gi, ai, dbi, n, m, k, true, true, true);
          }
        }
      }
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::sum_all(Id a) {
  double acc = 0.0;
  for (const T& v : val(a).data) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  check_finite(out, "sum_all");
  Id id = push("sum_all", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a](Graph& g) {
    if (!g.needs(a)) return;
    T gv = g.grad(id).data[0];
    auto& da = g.grad_buf(a).data;
    for (auto& v : da) v += gv;
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::mean_all(Id a) {
  Id s = sum_all(a);
  return scale(s, static_cast<T>(1.0 / static_cast<double>(val(a).numel())));
}

template <class T>
typename Graph<T>::Id Graph<T>::sum_axis(Id a, int axis) {
  const Shape& as = val(a).shape;
  int ax = normalize_axis(axis, static_cast<int>(as.size()), "sum_axis");
  AxisSplit sp = split_axis(as, ax);
  Shape os;
  for (size_t i = 0; i < as.size(); ++i)
    if (static_cast<int>(i) != ax) os.push_back(as[i]);
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* av = val(a).data.data();
#pragma omp parallel for schedule(static) if (sp.outer > 8)
  for (int64_t o = 0; o < sp.outer; ++o) {
    T* dst = out.data.data() + o * sp.inner;
    for (int64_t j = 0; j < sp.len; ++j) {
      const T* src = av + (o * sp.len + j) * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  check_finite(out, "sum_axis");
  Id id = push("sum_axis", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, sp](Graph& g) {
    if (!g.needs(a)) return;
    const auto& gr = g.grad(id).data;
    auto& da = g.grad_buf(a).data;
#pragma omp parallel for schedule(static) if (sp.outer > 8)
    for (int64_t o = 0; o < sp.outer; ++o) {
      const T* src = gr.data() + o * sp.inner;
      for (int64_t j = 0; j < sp.len; ++j) {
        T* dst = da.data() + (o * sp.len + j) * sp.inner;
        for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::mean_axis(Id a, int axis) {
  // copy the extent before sum_axis: pushing nodes may reallocate the tape
  const Shape as = val(a).shape;
  int ax = normalize_axis(axis, static_cast<int>(as.size()), "mean_axis");
  Id s = sum_axis(a, ax);
  return scale(s, static_cast<T>(1.0 / static_cast<double>(as[static_cast<size_t>(ax)])));
}

template <class T>
typename Graph<T>::Id Graph<T>::softmax(Id a, int axis) {
  const Shape& as = val(a).shape;
  int ax = normalize_axis(axis, static_cast<int>(as.size()), "softmax");
  AxisSplit sp = split_axis(as, ax);
  Tensor<T> out = Tensor<T>::zeros(as);
  const T* av = val(a).data.data();
  const int64_t rows = sp.outer * sp.inner;
#pragma omp parallel for schedule(static) if (rows > 16)
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t o = r / sp.inner;
    const int64_t i = r % sp.inner;
    const int64_t base = o * sp.len * sp.inner + i;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < sp.len; ++j)
      mx = std::max(mx, static_cast<double>(av[base + j * sp.inner]));
    double denom = 0.0;
    for (int64_t j = 0; j < sp.len; ++j)
      denom += std::exp(static_cast<double>(av[base + j * sp.inner]) - mx);
    for (int64_t j = 0; j < sp.len; ++j)
      out.data[static_cast<size_t>(base + j * sp.inner)] =
          static_cast<T>(std::exp(static_cast<double>(av[base + j * sp.inner]) - mx) / denom);
  }
  check_finite(out, "softmax");
  Id id = push("softmax", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, sp](Graph& g) {
    if (!g.needs(a)) return;
    const auto& gr = g.grad(id).data;
    const T* y = g.val(id).data.data();
    auto& da = g.grad_buf(a).data;
    const int64_t rows2 = sp.outer * sp.inner;
#pragma omp parallel for schedule(static) if (rows2 > 16)
    for (int64_t r = 0; r < rows2; ++r) {
      const int64_t o = r / sp.inner;
      const int64_t i = r % sp.inner;
      const int64_t base = o * sp.len * sp.inner + i;
      double dot = 0.0;
      for (int64_t j = 0; j < sp.len; ++j) {
        const int64_t ix = base + j * sp.inner;
        dot += static_cast<double>(gr[static_cast<size_t>(ix)]) * static_cast<double>(y[ix]);
      }
      for (int64_t j = 0; j < sp.len; ++j) {
        const int64_t ix = base + j * sp.inner;
        da[static_cast<size_t>(ix)] += static_cast<T>(
            static_cast<double>(y[ix]) * (static_cast<double>(gr[static_cast<size_t>(ix)]) - dot));
      }
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::log_softmax(Id a, int axis) {
  const Shape& as = val(a).shape;
  int ax = normalize_axis(axis, static_cast<int>(as.size()), "log_softmax");
  AxisSplit sp = split_axis(as, ax);
  Tensor<T> out = Tensor<T>::zeros(as);
  const T* av = val(a).data.data();
  const int64_t rows = sp.outer * sp.inner;
#pragma omp parallel for schedule(static) if (rows > 16)
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t o = r / sp.inner;
    const int64_t i = r % sp.inner;
    const int64_t base = o * sp.len * sp.inner + i;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < sp.len; ++j)
      mx = std::max(mx, static_cast<double>(av[base + j * sp.inner]));
    double denom = 0.0;
    for (int64_t j = 0; j < sp.len; ++j)
      denom += std::exp(static_cast<double>(av[base + j * sp.inner]) - mx);
    const double lse = mx + std::log(denom);
    for (int64_t j = 0; j < sp.len; ++j)
      out.data[static_cast<size_t>(base + j * sp.inner)] =
          static_cast<T>(static_cast<double>(av[base + j * sp.inner]) - lse);
  }
  check_finite(out, "log_softmax");
  Id id = push("log_softmax", std::move(out), needs(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, a, sp](Graph& g) {
    if (!g.needs(a)) return;
    const auto& gr = g.grad(id).data;
    const T* ls = g.val(id).data.data();
    auto& da = g.grad_buf(a).data;
    const int64_t rows2 = sp.outer * sp.inner;
#pragma omp parallel for schedule(static) if (rows2 > 16)
    for (int64_t r = 0; r < rows2; ++r) {
      const int64_t o = r / sp.inner;
      const int64_t i = r % sp.inner;
      const int64_t base = o * sp.len * sp.inner + i;
      double gsum = 0.0;
      for (int64_t j = 0; j < sp.len; ++j)
        gsum += static_cast<double>(gr[static_cast<size_t>(base + j * sp.inner)]);
      for (int64_t j = 0; j < sp.len; ++j) {
        const int64_t ix = base + j * sp.inner;
        da[static_cast<size_t>(ix)] +=
            static_cast<T>(static_cast<double>(gr[static_cast<size_t>(ix)]) -
                           std::exp(static_cast<double>(ls[ix])) * gsum);
      }
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::layer_norm(Id x, Id gamma, Id beta, double eps) {
  if (eps <= 0.0) throw ValueError("layer_norm: eps must be > 0");
  const Tensor<T>& xv = val(x);
  if (xv.rank() < 1) throw ShapeError("layer_norm: input must have rank >= 1");
  const int64_t d = xv.shape.back();
  const Tensor<T>& gv = val(gamma);
  const Tensor<T>& bv = val(beta);
  if (gv.rank() != 1 || gv.shape[0] != d || bv.rank() != 1 || bv.shape[0] != d)
    throw ShapeError("layer_norm: gamma/beta must be rank-1 of the feature width");
  const int64_t rows = xv.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* xp = xv.data.data();
  const T* gp = gv.data.data();
  const T* bp = bv.data.data();
#pragma omp parallel for schedule(static) if (rows > 16)
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += static_cast<double>(row[j]);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double c = static_cast<double>(row[j]) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    (*mean)[static_cast<size_t>(r)] = static_cast<T>(mu);
    (*inv_std)[static_cast<size_t>(r)] = static_cast<T>(is);
    T* orow = out.data.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      double xhat = (static_cast<double>(row[j]) - mu) * is;
      orow[j] = static_cast<T>(xhat * static_cast<double>(gp[j]) + static_cast<double>(bp[j]));
    }
  }
  check_finite(out, "layer_norm");
  bool ng = needs(x) || needs(gamma) || needs(beta);
  Id id = push("layer_norm", std::move(out), ng, nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, x, gamma, beta, d, rows, mean, inv_std](Graph& g) {
    const auto& gr = g.grad(id).data;
    const T* xp2 = g.val(x).data.data();
    const T* gp2 = g.val(gamma).data.data();
    if (g.needs(gamma) || g.needs(beta)) {
      // serial over rows, deterministic accumulation into the d-vectors
      std::vector<double> dgamma(static_cast<size_t>(d), 0.0);
      std::vector<double> dbeta(static_cast<size_t>(d), 0.0);
      for (int64_t r = 0; r < rows; ++r) {
        const double mu = static_cast<double>((*mean)[static_cast<size_t>(r)]);
        const double is = static_cast<double>((*inv_std)[static_cast<size_t>(r)]);
        const T* row = xp2 + r * d;
        const T* grow = gr.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
          double xhat = (static_cast<double>(row[j]) - mu) * is;
          dgamma[static_cast<size_t>(j)] += static_cast<double>(grow[j]) * xhat;
          dbeta[static_cast<size_t>(j)] += static_cast<double>(grow[j]);
        }
      }
      if (g.needs(gamma)) {
        auto& dg = g.grad_buf(gamma).data;
        for (int64_t j = 0; j < d; ++j) dg[static_cast<size_t>(j)] += static_cast<T>(dgamma[static_cast<size_t>(j)]);
      }
      if (g.needs(beta)) {
        auto& db = g.grad_buf(beta).data;
        for (int64_t j = 0; j < d; ++j) db[static_cast<size_t>(j)] += static_cast<T>(dbeta[static_cast<size_t>(j)]);
      }
    }
    if (g.needs(x)) {
      auto& dx = g.grad_buf(x).data;
#pragma omp parallel for schedule(static) if (rows > 16)
      for (int64_t r = 0; r < rows; ++r) {
        const double mu = static_cast<double>((*mean)[static_cast<size_t>(r)]);
        const double is = static_cast<double>((*inv_std)[static_cast<size_t>(r)]);
        const T* row = xp2 + r * d;
        const T* grow = gr.data() + r * d;
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          double gg = static_cast<double>(grow[j]) * static_cast<double>(gp2[j]);
          double xhat = (static_cast<double>(row[j]) - mu) * is;
          m1 += gg;
          m2 += gg * xhat;
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        T* dxr = dx.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
          double gg = static_cast<double>(grow[j]) * static_cast<double>(gp2[j]);
          double xhat = (static_cast<double>(row[j]) - mu) * is;
          dxr[j] += static_cast<T>((gg - m1 - xhat * m2) * is);
        }
      }
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::instance_norm(Id x, Id gamma, Id beta, double eps) {
  if (eps <= 0.0) throw ValueError("instance_norm: eps must be > 0");
  const Tensor<T>& xv = val(x);
  if (xv.rank() != 4) throw ShapeError("instance_norm: expected (N,C,H,W)");
  const int64_t n = xv.shape[0], c = xv.shape[1], plane = xv.shape[2] * xv.shape[3];
  const Tensor<T>& gv = val(gamma);
  const Tensor<T>& bv = val(beta);
  if (gv.rank() != 1 || gv.shape[0] != c || bv.rank() != 1 || bv.shape[0] != c)
    throw ShapeError("instance_norm: gamma/beta must be rank-1 of the channel count");
  const int64_t rows = n * c;
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* xp = xv.data.data();
  const T* gp = gv.data.data();
  const T* bp = bv.data.data();
#pragma omp parallel for schedule(static) if (rows > 4)
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * plane;
    const int64_t ch = r % c;
    double mu = 0.0;
    for (int64_t j = 0; j < plane; ++j) mu += static_cast<double>(row[j]);
    mu /= static_cast<double>(plane);
    double var = 0.0;
    for (int64_t j = 0; j < plane; ++j) {
      double d = static_cast<double>(row[j]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(plane);
    double is = 1.0 / std::sqrt(var + eps);
    (*mean)[static_cast<size_t>(r)] = static_cast<T>(mu);
    (*inv_std)[static_cast<size_t>(r)] = static_cast<T>(is);
    T* orow = out.data.data() + r * plane;
    for (int64_t j = 0; j < plane; ++j) {
      double xhat = (static_cast<double>(row[j]) - mu) * is;
      orow[j] = static_cast<T>(xhat * static_cast<double>(gp[ch]) + static_cast<double>(bp[ch]));
    }
  }
  check_finite(out, "instance_norm");
  bool ng = needs(x) || needs(gamma) || needs(beta);
  Id id = push("instance_norm", std::move(out), ng, nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, x, gamma, beta, c, plane, rows, mean,
                                          inv_std](Graph& g) {
    const auto& gr = g.grad(id).data;
    const T* xp2 = g.val(x).data.data();
    const T* gp2 = g.val(gamma).data.data();
    if (g.needs(gamma) || g.needs(beta)) {
      std::vector<double> dgamma(static_cast<size_t>(c), 0.0);
      std::vector<double> dbeta(static_cast<size_t>(c), 0.0);
      for (int64_t r = 0; r < rows; ++r) {
        const double mu = static_cast<double>((*mean)[static_cast<size_t>(r)]);
        const double is = static_cast<double>((*inv_std)[static_cast<size_t>(r)]);
        const int64_t ch = r % c;
        const T* row = xp2 + r * plane;
        const T* grow = gr.data() + r * plane;
        for (int64_t j = 0; j < plane; ++j) {
          double xhat = (static_cast<double>(row[j]) - mu) * is;
          dgamma[static_cast<size_t>(ch)] += static_cast<double>(grow[j]) * xhat;
          dbeta[static_cast<size_t>(ch)] += static_cast<double>(grow[j]);
        }
      }
      if (g.needs(gamma)) {
        auto& dg = g.grad_buf(gamma).data;
        for (int64_t ch = 0; ch < c; ++ch)
          dg[static_cast<size_t>(ch)] += static_cast<T>(dgamma[static_cast<size_t>(ch)]);
      }
      if (g.needs(beta)) {
        auto& db = g.grad_buf(beta).data;
        for (int64_t ch = 0; ch < c; ++ch)
          db[static_cast<size_t>(ch)] += static_cast<T>(dbeta[static_cast<size_t>(ch)]);
      }
    }
    if (g.needs(x)) {
      auto& dx = g.grad_buf(x).data;
#pragma omp parallel for schedule(static) if (rows > 4)
      for (int64_t r = 0; r < rows; ++r) {
        const double mu = static_cast<double>((*mean)[static_cast<size_t>(r)]);
        const double is = static_cast<double>((*inv_std)[static_cast<size_t>(r)]);
        const double gch = static_cast<double>(gp2[r % c]);
        const T* row = xp2 + r * plane;
        const T* grow = gr.data() + r * plane;
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < plane; ++j) {
          double gg = static_cast<double>(grow[j]) * gch;
          double xhat = (static_cast<double>(row[j]) - mu) * is;
          m1 += gg;
          m2 += gg * xhat;
        }
        m1 /= static_cast<double>(plane);
        m2 /= static_cast<double>(plane);
        T* dxr = dx.data() + r * plane;
        for (int64_t j = 0; j < plane; ++j) {
          double gg = static_cast<double>(grow[j]) * gch;
          double xhat = (static_cast<double>(row[j]) - mu) * is;
          dxr[j] += static_cast<T>((gg - m1 - xhat * m2) * is);
        }
      }
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::conv2d(Id x, Id w, int stride, int pad) {
  const Tensor<T>& xv = val(x);
  const Tensor<T>& wv = val(w);
  if (xv.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d: x and w must be rank 4");
  if (stride < 1 || pad < 0) throw ValueError("conv2d: invalid stride/pad");
  const int64_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], ww = xv.shape[3];
  const int64_t oc = wv.shape[0], kc = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3];
  if (kc != c) throw ShapeError("conv2d: channel mismatch");
  if (kh > h + 2 * pad || kw > ww + 2 * pad) throw ShapeError("conv2d: kernel larger than input");
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (ww + 2 * pad - kw) / stride + 1;
  const int64_t ck = c * kh * kw;
  Tensor<T> out = Tensor<T>::zeros({n, oc, oh, ow});
  const T* xp = xv.data.data();
  const T* wp = wv.data.data();
  T* op = out.data.data();
#pragma omp parallel
  {
    std::vector<T> col(static_cast<size_t>(ck * oh * ow));
#pragma omp for schedule(static)
    for (int64_t img = 0; img < n; ++img) {
      im2col(xp + img * c * h * ww, c, h, ww, kh, kw, stride, pad, oh, ow, col.data());
      detail::gemm_block(wp, col.data(), op + img * oc * oh * ow, oc, ck, oh * ow, false, false,
                         false);
    }
  }
  check_finite(out, "conv2d");
  Id id = push("conv2d", std::move(out), needs(x) || needs(w), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, x, w, stride, pad, n, c, h, ww, oc, kh, kw, oh, ow,
                                          ck](Graph& g) {
    const T* gp = g.grad(id).data.data();
    const T* xp2 = g.val(x).data.data();
    const T* wp2 = g.val(w).data.data();
    if (g.needs(w)) {
      // serial over images so the accumulation into dw stays ordered
      auto& dw = g.grad_buf(w).data;
      std::vector<T> col(static_cast<size_t>(ck * oh * ow));
      for (int64_t img = 0; img < n; ++img) {
        im2col(xp2 + img * c * h * ww, c, h, ww, kh, kw, stride, pad, oh, ow, col.data());
        detail::gemm_block(gp + img * oc * oh * ow, col.data(), dw.data(), oc, oh * ow, ck,
                           false, true, true);
      }
    }
    if (g.needs(x)) {
      auto& dx = g.grad_buf(x).data;
#pragma omp parallel
      {
        std::vector<T> dcol(static_cast<size_t>(ck * oh * ow));
#pragma omp for schedule(static)
        for (int64_t img = 0; img < n; ++img) {
          detail::gemm_block(wp2, gp + img * oc * oh * ow, dcol.data(), ck, oc, oh * ow, true,
                             false, false);
          col2im_add(dcol.data(), c, h, ww, kh, kw, stride, pad, oh, ow,
                     dx.data() + img * c * h * ww);
        }
      }
    }
  };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::freq_filter(Id x, const spectral::FrequencyMask& mask) {
  const Tensor<T>& xv = val(x);
  if (xv.rank() != 4) throw ShapeError("freq_filter: expected (N,C,H,W)");
  Tensor<T> out = xv;
  out.requires_grad = false;
  spectral::filter_image_inplace(out, mask);
  check_finite(out, "freq_filter");
  Id id = push("freq_filter", std::move(out), needs(x), nullptr);
  nodes_[static_cast<size_t>(id)].back = [id, x, mask](Graph& g) {
    if (!g.needs(x)) return;
    // The filter is self-adjoint (real symmetric mask), so the gradient is
    // filtered by the same mask.
    Tensor<T> gt = g.grad(id);
    spectral::filter_image_inplace(gt, mask);
    accumulate(g.grad_buf(x).data, gt.data);
  };
  return id;
}

template <class T>
void Graph<T>::backward(Id loss, bool retain) {
  if (consumed_) throw Error("backward on a consumed graph");
  const Tensor<T>& lv = val(loss);
  if (lv.rank() != 0 || lv.numel() != 1)
    throw ValueError("backward: seed must be a scalar (rank-0) tensor");
  grad_buf(loss).data[0] = T(1);
  for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad || n.grad.data.empty() || !n.back) continue;
    n.back(*this);
  }
  for (auto& n : nodes_) {
    if (n.is_leaf && n.needs_grad) {
      if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
      check_finite(n.grad, "backward");
    }
  }
  if (!retain) consumed_ = true;
}

template <class T>
GradCheckReport grad_check(const std::function<typename Graph<T>::Id(Graph<T>&, typename Graph<T>::Id)>& f,
                           const Tensor<T>& x, double h, double tol, int64_t max_coordinates,
                           uint64_t sample_seed) {
  if (h <= 0.0) throw ValueError("grad_check: step must be > 0");
  Tensor<T> xg = x.with_grad(true);
  Graph<T> g;
  auto in = g.leaf(xg);
  auto loss = f(g, in);
  g.backward(loss, /*retain=*/true);
  Tensor<T> ad = g.grad(in);

  std::vector<int64_t> coords;
  const int64_t n = x.numel();
  if (max_coordinates < 0 || max_coordinates >= n) {
    coords.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  } else {
    Rng rng(sample_seed);
    for (int64_t i = 0; i < max_coordinates; ++i)
      coords.push_back(static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n))));
  }

  GradCheckReport rep;
  rep.tolerance = tol;
  auto eval = [&](const Tensor<T>& probe) {
    Graph<T> gg;
    auto pin = gg.leaf(probe);
    auto l = f(gg, pin);
    double v = static_cast<double>(gg.value(l).data[0]);
    if (!(v - v == 0.0)) throw NumericError("grad_check: non-finite loss at probe point");
    return v;
  };
  for (int64_t ix : coords) {
    Tensor<T> xp = x;
    xp.requires_grad = false;
    T orig = xp.data[static_cast<size_t>(ix)];
    xp.data[static_cast<size_t>(ix)] = static_cast<T>(static_cast<double>(orig) + h);
    double fp = eval(xp);
    xp.data[static_cast<size_t>(ix)] = static_cast<T>(static_cast<double>(orig) - h);
    double fm = eval(xp);
    double fd = (fp - fm) / (2.0 * h);
    double adv = static_cast<double>(ad.data[static_cast<size_t>(ix)]);
    double denom = std::max({std::fabs(adv), std::fabs(fd), 1e-6});
    double rel = std::fabs(adv - fd) / denom;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = ix;
    }
    rep.checked++;
  }
  rep.pass = rep.max_rel_error < tol;
  return rep;
}

template class Graph<float>;
template class Graph<double>;

template GradCheckReport grad_check<float>(
    const std::function<typename Graph<float>::Id(Graph<float>&, typename Graph<float>::Id)>&,
    const Tensor<float>&, double, double, int64_t, uint64_t);
template GradCheckReport grad_check<double>(
    const std::function<typename Graph<double>::Id(Graph<double>&, typename Graph<double>::Id)>&,
    const Tensor<double>&, double, double, int64_t, uint64_t);

}  // namespace hatkit

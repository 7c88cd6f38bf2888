#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "common.hpp"

namespace trouspi {

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the computation graph. `value` is always populated;
/// `grad` is allocated lazily on leaves when backward() reaches them.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<NodePtr> parents;
  // Receives d(loss)/d(self) and scatters into per-parent buffers.
  // parent_grads[i] is null when parent i does not need a gradient.
  std::function<void(const std::vector<double>&, Node&,
                     const std::vector<std::vector<double>*>&)>
      backward;
};

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data) {
    if (shape_size(shape) != data.size())
      fail("tensor: shape ", shape_str(shape), " wants ", shape_size(shape),
           " values, got ", data.size());
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    std::vector<double> d(shape_size(shape), 0.0);
    return from(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, double v) {
    std::vector<double> d(shape_size(shape), v);
    return from(std::move(shape), std::move(d));
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  /// A trainable leaf: gradients accumulate here across backward passes.
  static Tensor leaf(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  const std::vector<double>& data() const { return node_->value; }

  /// Direct write access to the stored values. Only meaningful on leaves
  /// (parameters, running statistics); mutating an interior graph node
  /// would desynchronise cached backward state.
  std::vector<double>& mutable_data() { return node_->value; }

  double item() const {
    require(size() == 1, "item: tensor has ", size(), " elements");
    return node_->value[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    require(idx.size() == ndim(), "at: rank mismatch");
    auto st = detail::strides_of(node_->shape);
    std::size_t flat = 0, d = 0;
    for (auto i : idx) {
      require(i < node_->shape[d], "at: index out of range");
      flat += i * st[d++];
    }
    return node_->value[flat];
  }

  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<double>& grad() const {
    require(has_grad(), "grad: no gradient accumulated on this tensor");
    return node_->grad;
  }

  void zero_grad() { node_->grad.clear(); }

  detail::NodePtr node() const { return node_; }

  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(const std::vector<double>&, Node&,
                                         const std::vector<std::vector<double>*>&)>
                          backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  for (auto& p : parents) {
    n->parents.push_back(p.node());
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) n->backward = std::move(backward);
  return Tensor(std::move(n));
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Elementwise operations
// ----------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& x, Fwd fwd, Dfn dfn) {
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_op(
      x.shape(), std::move(out), {x},
      [dfn](const std::vector<double>& g, Node& self,
            const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        const auto& xv = self.parents[0]->value;
        const auto& yv = self.value;
        auto& dst = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * dfn(xv[i], yv[i]);
      });
}

template <typename Fwd, typename Da, typename Db>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db,
                 const char* name) {
  if (a.shape() != b.shape())
    fail(name, ": shape mismatch ", shape_str(a.shape()), " vs ",
         shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  return make_op(
      a.shape(), std::move(out), {a, b},
      [da, db](const std::vector<double>& g, Node& self,
               const std::vector<std::vector<double>*>& pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (pg[0]) {
          auto& dst = *pg[0];
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * da(av[i], bv[i]);
        }
        if (pg[1]) {
          auto& dst = *pg[1];
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * db(av[i], bv[i]);
        }
      });
}

}  // namespace detail

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; }, "add");
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; }, "sub");
}

inline Tensor operator*(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; }, "mul");
}

inline Tensor operator/(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); }, "div");
}

inline Tensor operator+(const Tensor& a, double s) {
  return detail::unary_op(
      a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}
inline Tensor operator+(double s, const Tensor& a) { return a + s; }

inline Tensor operator-(const Tensor& a, double s) { return a + (-s); }

inline Tensor operator-(double s, const Tensor& a) {
  return detail::unary_op(
      a, [s](double v) { return s - v; }, [](double, double) { return -1.0; });
}

inline Tensor operator*(const Tensor& a, double s) {
  return detail::unary_op(
      a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}
inline Tensor operator*(double s, const Tensor& a) { return a * s; }

inline Tensor operator/(const Tensor& a, double s) { return a * (1.0 / s); }

inline Tensor operator-(const Tensor& a) { return a * -1.0; }

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x,
      [](double v) {
        if (v >= 0) {
          double e = std::exp(-v);
          return 1.0 / (1.0 + e);
        }
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// max(slope*x, x) with 0 < slope < 1.
inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return detail::unary_op(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

/// Clamp to [lo, hi]; gradient is zero outside the open interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  require(lo <= hi, "clamp: lo > hi");
  return detail::unary_op(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ----------------------------------------------------------------------------
// Matrix multiply
// ----------------------------------------------------------------------------

namespace detail {

// C(n×m) += A(n×k) · B(k×m)
inline void mm_nn(const double* A, const double* B, double* C, std::size_t n,
                  std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = C + i * m;
    const double* arow = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      double a = arow[p];
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += a * brow[j];
    }
  }
}

// C(n×m) += A(k×n)ᵀ · B(k×m)
inline void mm_tn(const double* A, const double* B, double* C, std::size_t n,
                  std::size_t k, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = A + p * n;
    const double* brow = B + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      double a = arow[i];
      double* crow = C + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    fail("matmul: expects 2-D operands, got ", shape_str(a.shape()), " and ",
         shape_str(b.shape()));
  std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k)
    fail("matmul: inner dims differ, ", shape_str(a.shape()), " vs ",
         shape_str(b.shape()));
  std::vector<double> out(n * m, 0.0);
  detail::mm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
  return detail::make_op(
      {n, m}, std::move(out), {a, b},
      [n, k, m](const std::vector<double>& g, detail::Node& self,
                const std::vector<std::vector<double>*>& pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (pg[0]) {
          // dA = g·Bᵀ via a one-off transpose of B so the inner loop keeps
          // unit-stride independent updates instead of a serial dot product.
          std::vector<double> b_t(m * k);
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < m; ++j) b_t[j * k + p] = bv[p * m + j];
          detail::mm_nn(g.data(), b_t.data(), pg[0]->data(), n, m, k);
        }
        if (pg[1]) detail::mm_tn(av.data(), g.data(), pg[1]->data(), k, n, m);
      });
}

// ----------------------------------------------------------------------------
// Shape manipulation
// ----------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size())
    fail("reshape: ", shape_str(x.shape()), " has ", x.size(),
         " elements; target ", shape_str(shape), " wants ", shape_size(shape));
  return detail::make_op(std::move(shape), x.data(), {x},
                         [](const std::vector<double>& g, detail::Node&,
                            const std::vector<std::vector<double>*>& pg) {
                           if (!pg[0]) return;
                           auto& dst = *pg[0];
                           for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                         });
}

inline Tensor flatten(const Tensor& x) { return reshape(x, {x.size()}); }

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size())
    fail("concat: axis ", axis, " out of range for ", shape_str(s0));
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    require(p.ndim() == s0.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && p.shape()[d] != s0[d])
        fail("concat: shape mismatch ", shape_str(p.shape()), " vs ",
             shape_str(s0), " on axis ", d);
    total_axis += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total_axis;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<double> out(shape_size(out_shape));
  std::vector<std::size_t> axis_lens;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t alen = p.shape()[axis];
    axis_lens.push_back(alen);
    const auto& pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total_axis + off) * inner,
                  pv.data() + o * alen * inner, alen * inner * sizeof(double));
    off += alen;
  }
  return detail::make_op(
      std::move(out_shape), std::move(out), parts,
      [outer, inner, total_axis, axis_lens](
          const std::vector<double>& g, detail::Node&,
          const std::vector<std::vector<double>*>& pg) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < axis_lens.size(); ++p) {
          std::size_t alen = axis_lens[p];
          if (pg[p]) {
            auto& dst = *pg[p];
            for (std::size_t o = 0; o < outer; ++o) {
              const double* src = g.data() + (o * total_axis + off) * inner;
              double* d = dst.data() + o * alen * inner;
              for (std::size_t i = 0; i < alen * inner; ++i) d[i] += src[i];
            }
          }
          off += alen;
        }
      });
}

/// Rectangular sub-block: per-axis start offsets and extents.
inline Tensor slice(const Tensor& x, const std::vector<std::size_t>& starts,
                    const std::vector<std::size_t>& extents) {
  std::size_t nd = x.ndim();
  require(nd >= 1, "slice: cannot slice a scalar");
  require(starts.size() == nd && extents.size() == nd,
          "slice: starts/extents rank must match tensor rank ", nd);
  for (std::size_t d = 0; d < nd; ++d)
    require(starts[d] + extents[d] <= x.shape()[d] && extents[d] > 0,
            "slice: axis ", d, " range [", starts[d], ",", starts[d] + extents[d],
            ") exceeds extent ", x.shape()[d]);
  Shape out_shape(extents.begin(), extents.end());
  auto st = detail::strides_of(x.shape());

  std::size_t run = nd ? extents[nd - 1] : 1;
  std::size_t n_runs = 1;
  for (std::size_t d = 0; d + 1 < nd; ++d) n_runs *= extents[d];

  // Iterate the leading dims with an odometer; the last dim is a contiguous run.
  auto advance = [nd](std::vector<std::size_t>& idx,
                      const std::vector<std::size_t>& extents) {
    for (std::size_t d = nd - 1; d-- > 0;) {
      if (++idx[d] < extents[d]) return;
      idx[d] = 0;
    }
  };
  auto run_offset = [starts, st, nd](const std::vector<std::size_t>& idx) {
    std::size_t src = starts[nd - 1] * st[nd - 1];
    for (std::size_t d = 0; d + 1 < nd; ++d) src += (starts[d] + idx[d]) * st[d];
    return src;
  };

  std::vector<double> out(shape_size(out_shape));
  std::vector<std::size_t> idx(nd, 0);
  const auto& xv = x.data();
  for (std::size_t r = 0; r < n_runs; ++r) {
    std::memcpy(out.data() + r * run, xv.data() + run_offset(idx),
                run * sizeof(double));
    advance(idx, extents);
  }
  return detail::make_op(
      std::move(out_shape), std::move(out), {x},
      [extents, advance, run_offset, run, n_runs](
          const std::vector<double>& g, detail::Node&,
          const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        std::vector<std::size_t> idx(extents.size(), 0);
        for (std::size_t r = 0; r < n_runs; ++r) {
          std::size_t src = run_offset(idx);
          const double* gsrc = g.data() + r * run;
          for (std::size_t i = 0; i < run; ++i) dst[src + i] += gsrc[i];
          advance(idx, extents);
        }
      });
}

inline Tensor reverse(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim())
    fail("reverse: axis ", axis, " out of range for ", shape_str(x.shape()));
  std::size_t outer = 1, inner = 1, alen = x.shape()[axis];
  for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (std::size_t d = axis + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < alen; ++k)
      std::memcpy(out.data() + (o * alen + k) * inner,
                  xv.data() + (o * alen + (alen - 1 - k)) * inner,
                  inner * sizeof(double));
  return detail::make_op(
      x.shape(), std::move(out), {x},
      [outer, inner, alen](const std::vector<double>& g, detail::Node&,
                           const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < alen; ++k) {
            const double* src = g.data() + (o * alen + (alen - 1 - k)) * inner;
            double* d = dst.data() + (o * alen + k) * inner;
            for (std::size_t i = 0; i < inner; ++i) d[i] += src[i];
          }
      });
}

// ----------------------------------------------------------------------------
// Reductions
// ----------------------------------------------------------------------------

namespace detail {

struct AxisDecomp {
  std::size_t outer, alen, inner;
};

inline AxisDecomp axis_decomp(const Shape& s, std::size_t axis, const char* name) {
  if (axis >= s.size())
    fail(name, ": axis ", axis, " out of range for ", shape_str(s));
  AxisDecomp d{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) d.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) d.inner *= s[i];
  return d;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

}  // namespace detail

inline Tensor reduce_sum(const Tensor& x, std::size_t axis) {
  auto d = detail::axis_decomp(x.shape(), axis, "reduce_sum");
  std::vector<double> out(d.outer * d.inner, 0.0);
  const auto& xv = x.data();
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t k = 0; k < d.alen; ++k) {
      const double* src = xv.data() + (o * d.alen + k) * d.inner;
      double* dst = out.data() + o * d.inner;
      for (std::size_t i = 0; i < d.inner; ++i) dst[i] += src[i];
    }
  return detail::make_op(
      detail::drop_axis(x.shape(), axis), std::move(out), {x},
      [d](const std::vector<double>& g, detail::Node&,
          const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        for (std::size_t o = 0; o < d.outer; ++o)
          for (std::size_t k = 0; k < d.alen; ++k) {
            const double* src = g.data() + o * d.inner;
            double* dd = dst.data() + (o * d.alen + k) * d.inner;
            for (std::size_t i = 0; i < d.inner; ++i) dd[i] += src[i];
          }
      });
}

inline Tensor reduce_mean(const Tensor& x, std::size_t axis) {
  auto d = detail::axis_decomp(x.shape(), axis, "reduce_mean");
  return reduce_sum(x, axis) * (1.0 / static_cast<double>(d.alen));
}

/// Max along an axis; ties resolve to the lowest index.
inline Tensor reduce_max(const Tensor& x, std::size_t axis) {
  auto d = detail::axis_decomp(x.shape(), axis, "reduce_max");
  std::vector<double> out(d.outer * d.inner);
  std::vector<std::size_t> arg(d.outer * d.inner);
  const auto& xv = x.data();
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t i = 0; i < d.inner; ++i) {
      std::size_t best = 0;
      double bv = xv[(o * d.alen) * d.inner + i];
      for (std::size_t k = 1; k < d.alen; ++k) {
        double v = xv[(o * d.alen + k) * d.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[o * d.inner + i] = bv;
      arg[o * d.inner + i] = best;
    }
  return detail::make_op(
      detail::drop_axis(x.shape(), axis), std::move(out), {x},
      [d, arg](const std::vector<double>& g, detail::Node&,
               const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        for (std::size_t o = 0; o < d.outer; ++o)
          for (std::size_t i = 0; i < d.inner; ++i) {
            std::size_t k = arg[o * d.inner + i];
            dst[(o * d.alen + k) * d.inner + i] += g[o * d.inner + i];
          }
      });
}

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return detail::make_op({}, {acc}, {x},
                         [](const std::vector<double>& g, detail::Node&,
                            const std::vector<std::vector<double>*>& pg) {
                           if (!pg[0]) return;
                           auto& dst = *pg[0];
                           for (auto& v : dst) v += g[0];
                         });
}

inline Tensor mean_all(const Tensor& x) {
  return sum_all(x) * (1.0 / static_cast<double>(x.size()));
}

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  auto d = detail::axis_decomp(x.shape(), axis, "softmax");
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t i = 0; i < d.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < d.alen; ++k)
        mx = std::max(mx, xv[(o * d.alen + k) * d.inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < d.alen; ++k) {
        double e = std::exp(xv[(o * d.alen + k) * d.inner + i] - mx);
        out[(o * d.alen + k) * d.inner + i] = e;
        z += e;
      }
      for (std::size_t k = 0; k < d.alen; ++k)
        out[(o * d.alen + k) * d.inner + i] /= z;
    }
  return detail::make_op(
      x.shape(), std::move(out), {x},
      [d](const std::vector<double>& g, detail::Node& self,
          const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        const auto& s = self.value;
        for (std::size_t o = 0; o < d.outer; ++o)
          for (std::size_t i = 0; i < d.inner; ++i) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d.alen; ++k) {
              std::size_t f = (o * d.alen + k) * d.inner + i;
              dot += g[f] * s[f];
            }
            for (std::size_t k = 0; k < d.alen; ++k) {
              std::size_t f = (o * d.alen + k) * d.inner + i;
              dst[f] += s[f] * (g[f] - dot);
            }
          }
      });
}

// ----------------------------------------------------------------------------
// Broadcast helpers
// ----------------------------------------------------------------------------

/// x: (...)×F plus a length-F vector added to every row.
inline Tensor add_rowwise(const Tensor& x, const Tensor& b) {
  if (b.ndim() != 1 || x.ndim() < 1 || x.shape().back() != b.shape()[0])
    fail("add_rowwise: last dim of ", shape_str(x.shape()), " must match ",
         shape_str(b.shape()));
  std::size_t f = b.shape()[0];
  std::size_t rows = x.size() / f;
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  const auto& bv = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] = xv[r * f + j] + bv[j];
  return detail::make_op(
      x.shape(), std::move(out), {x, b},
      [rows, f](const std::vector<double>& g, detail::Node&,
                const std::vector<std::vector<double>*>& pg) {
        if (pg[0]) {
          auto& dst = *pg[0];
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        if (pg[1]) {
          auto& dst = *pg[1];
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < f; ++j) dst[j] += g[r * f + j];
        }
      });
}

/// x: B×T×F plus y: B×F broadcast across the T axis.
inline Tensor add_time_broadcast(const Tensor& x, const Tensor& y) {
  if (x.ndim() != 3 || y.ndim() != 2 || x.shape()[0] != y.shape()[0] ||
      x.shape()[2] != y.shape()[1])
    fail("add_time_broadcast: incompatible ", shape_str(x.shape()), " and ",
         shape_str(y.shape()));
  std::size_t B = x.shape()[0], T = x.shape()[1], F = x.shape()[2];
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  const auto& yv = y.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < F; ++j)
        out[(b * T + t) * F + j] = xv[(b * T + t) * F + j] + yv[b * F + j];
  return detail::make_op(
      x.shape(), std::move(out), {x, y},
      [B, T, F](const std::vector<double>& g, detail::Node&,
                const std::vector<std::vector<double>*>& pg) {
        if (pg[0]) {
          auto& dst = *pg[0];
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        if (pg[1]) {
          auto& dst = *pg[1];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t)
              for (std::size_t j = 0; j < F; ++j)
                dst[b * F + j] += g[(b * T + t) * F + j];
        }
      });
}

/// Per-row scale: X (R×F) times a length-R coefficient vector.
inline Tensor scale_rows(const Tensor& x, const Tensor& c) {
  if (x.ndim() != 2 || c.ndim() != 1 || x.shape()[0] != c.shape()[0])
    fail("scale_rows: incompatible ", shape_str(x.shape()), " and ",
         shape_str(c.shape()));
  std::size_t R = x.shape()[0], F = x.shape()[1];
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  const auto& cv = c.data();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < F; ++j) out[r * F + j] = xv[r * F + j] * cv[r];
  return detail::make_op(
      x.shape(), std::move(out), {x, c},
      [R, F](const std::vector<double>& g, detail::Node& self,
             const std::vector<std::vector<double>*>& pg) {
        const auto& xv = self.parents[0]->value;
        const auto& cv = self.parents[1]->value;
        if (pg[0]) {
          auto& dst = *pg[0];
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t j = 0; j < F; ++j) dst[r * F + j] += g[r * F + j] * cv[r];
        }
        if (pg[1]) {
          auto& dst = *pg[1];
          for (std::size_t r = 0; r < R; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < F; ++j) acc += g[r * F + j] * xv[r * F + j];
            dst[r] += acc;
          }
        }
      });
}

/// Attention-style pooling: X (B×T×F) with weights w (B×T) → B×F.
/// Also accepts unbatched X (T×F) with w (T) → F.
inline Tensor weighted_sum_rows(const Tensor& x, const Tensor& w) {
  bool batched = x.ndim() == 3;
  require(batched || x.ndim() == 2, "weighted_sum_rows: expects 2-D or 3-D input");
  std::size_t B = batched ? x.shape()[0] : 1;
  std::size_t T = x.shape()[batched ? 1 : 0];
  std::size_t F = x.shape()[batched ? 2 : 1];
  if (w.size() != B * T)
    fail("weighted_sum_rows: weights ", shape_str(w.shape()),
         " incompatible with ", shape_str(x.shape()));
  std::vector<double> out(B * F, 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      double c = wv[b * T + t];
      const double* src = xv.data() + (b * T + t) * F;
      double* dst = out.data() + b * F;
      for (std::size_t j = 0; j < F; ++j) dst[j] += c * src[j];
    }
  Shape out_shape = batched ? Shape{B, F} : Shape{F};
  return detail::make_op(
      std::move(out_shape), std::move(out), {x, w},
      [B, T, F](const std::vector<double>& g, detail::Node& self,
                const std::vector<std::vector<double>*>& pg) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        if (pg[0]) {
          auto& dst = *pg[0];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
              double c = wv[b * T + t];
              const double* gs = g.data() + b * F;
              double* dd = dst.data() + (b * T + t) * F;
              for (std::size_t j = 0; j < F; ++j) dd[j] += c * gs[j];
            }
        }
        if (pg[1]) {
          auto& dst = *pg[1];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
              const double* gs = g.data() + b * F;
              const double* xs = xv.data() + (b * T + t) * F;
              double acc = 0.0;
              for (std::size_t j = 0; j < F; ++j) acc += gs[j] * xs[j];
              dst[b * T + t] += acc;
            }
        }
      });
}

namespace detail {

struct ChannelLayout {
  std::size_t B, C, plane;
};

inline ChannelLayout channel_layout(const Shape& s, const char* name) {
  if (s.size() != 3 && s.size() != 4)
    fail(name, ": expects C×H×W or B×C×H×W, got ", shape_str(s));
  if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
  return {1, s[0], s[1] * s[2]};
}

}  // namespace detail

/// Per-channel scale of a feature map. `s` is C (shared across batch) or B×C.
inline Tensor scale_channels(const Tensor& x, const Tensor& s) {
  auto L = detail::channel_layout(x.shape(), "scale_channels");
  bool per_batch = s.ndim() == 2;
  bool shape_ok = per_batch ? s.shape()[0] == L.B && s.shape()[1] == L.C
                            : s.ndim() == 1 && s.shape()[0] == L.C;
  if (!shape_ok)
    fail("scale_channels: scale ", shape_str(s.shape()),
         " incompatible with input ", shape_str(x.shape()));
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  const auto& sv = s.data();
  for (std::size_t b = 0; b < L.B; ++b)
    for (std::size_t c = 0; c < L.C; ++c) {
      double f = sv[per_batch ? b * L.C + c : c];
      const double* src = xv.data() + (b * L.C + c) * L.plane;
      double* dst = out.data() + (b * L.C + c) * L.plane;
      for (std::size_t i = 0; i < L.plane; ++i) dst[i] = src[i] * f;
    }
  return detail::make_op(
      x.shape(), std::move(out), {x, s},
      [L, per_batch](const std::vector<double>& g, detail::Node& self,
                     const std::vector<std::vector<double>*>& pg) {
        const auto& xv = self.parents[0]->value;
        const auto& sv = self.parents[1]->value;
        for (std::size_t b = 0; b < L.B; ++b)
          for (std::size_t c = 0; c < L.C; ++c) {
            std::size_t base = (b * L.C + c) * L.plane;
            if (pg[0]) {
              double f = sv[per_batch ? b * L.C + c : c];
              auto& dst = *pg[0];
              for (std::size_t i = 0; i < L.plane; ++i)
                dst[base + i] += g[base + i] * f;
            }
            if (pg[1]) {
              double acc = 0.0;
              for (std::size_t i = 0; i < L.plane; ++i)
                acc += g[base + i] * xv[base + i];
              (*pg[1])[per_batch ? b * L.C + c : c] += acc;
            }
          }
      });
}

/// Per-channel bias of a feature map. `s` is C (shared across batch) or B×C.
inline Tensor add_channels(const Tensor& x, const Tensor& s) {
  auto L = detail::channel_layout(x.shape(), "add_channels");
  bool per_batch = s.ndim() == 2;
  bool shape_ok = per_batch ? s.shape()[0] == L.B && s.shape()[1] == L.C
                            : s.ndim() == 1 && s.shape()[0] == L.C;
  if (!shape_ok)
    fail("add_channels: bias ", shape_str(s.shape()),
         " incompatible with input ", shape_str(x.shape()));
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  const auto& sv = s.data();
  for (std::size_t b = 0; b < L.B; ++b)
    for (std::size_t c = 0; c < L.C; ++c) {
      double f = sv[per_batch ? b * L.C + c : c];
      std::size_t base = (b * L.C + c) * L.plane;
      for (std::size_t i = 0; i < L.plane; ++i) out[base + i] = xv[base + i] + f;
    }
  return detail::make_op(
      x.shape(), std::move(out), {x, s},
      [L, per_batch](const std::vector<double>& g, detail::Node&,
                     const std::vector<std::vector<double>*>& pg) {
        if (pg[0]) {
          auto& dst = *pg[0];
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        if (pg[1]) {
          auto& dst = *pg[1];
          for (std::size_t b = 0; b < L.B; ++b)
            for (std::size_t c = 0; c < L.C; ++c) {
              std::size_t base = (b * L.C + c) * L.plane;
              double acc = 0.0;
              for (std::size_t i = 0; i < L.plane; ++i) acc += g[base + i];
              dst[per_batch ? b * L.C + c : c] += acc;
            }
        }
      });
}

/// Spatial gate: x (B×C×H×W or C×H×W) scaled by s (B×H×W or H×W),
/// broadcast across channels.
inline Tensor scale_spatial(const Tensor& x, const Tensor& s) {
  auto L = detail::channel_layout(x.shape(), "scale_spatial");
  if (s.size() != L.B * L.plane)
    fail("scale_spatial: gate ", shape_str(s.shape()),
         " incompatible with input ", shape_str(x.shape()));
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  const auto& sv = s.data();
  for (std::size_t b = 0; b < L.B; ++b)
    for (std::size_t c = 0; c < L.C; ++c) {
      std::size_t base = (b * L.C + c) * L.plane;
      const double* gate = sv.data() + b * L.plane;
      for (std::size_t i = 0; i < L.plane; ++i) out[base + i] = xv[base + i] * gate[i];
    }
  return detail::make_op(
      x.shape(), std::move(out), {x, s},
      [L](const std::vector<double>& g, detail::Node& self,
          const std::vector<std::vector<double>*>& pg) {
        const auto& xv = self.parents[0]->value;
        const auto& sv = self.parents[1]->value;
        for (std::size_t b = 0; b < L.B; ++b) {
          const double* gate = sv.data() + b * L.plane;
          for (std::size_t c = 0; c < L.C; ++c) {
            std::size_t base = (b * L.C + c) * L.plane;
            if (pg[0]) {
              auto& dst = *pg[0];
              for (std::size_t i = 0; i < L.plane; ++i)
                dst[base + i] += g[base + i] * gate[i];
            }
            if (pg[1]) {
              auto& dst = *pg[1];
              for (std::size_t i = 0; i < L.plane; ++i)
                dst[b * L.plane + i] += g[base + i] * xv[base + i];
            }
          }
        }
      });
}

// ----------------------------------------------------------------------------
// Convolution and pooling
// ----------------------------------------------------------------------------

namespace detail {

/// Gather one sample's dilated convolution patches in tap-major layout:
/// x_s is C×H×W, patches_t is (C·kh·kw)×(H·W); row d = (c·kh+i)·kw+j holds
/// the input plane shifted by that tap's dilated offset, zero outside.
/// Each row is a pair of contiguous copies per image row, so it vectorizes.
inline void im2col_t(const double* x_s, double* patches_t, std::size_t C,
                     std::size_t H, std::size_t W, std::size_t kh,
                     std::size_t kw, std::size_t r1, std::size_t r2) {
  long ch = static_cast<long>(kh - 1) / 2, cw = static_cast<long>(kw - 1) / 2;
  std::size_t R = H * W;
  double* row = patches_t;
  for (std::size_t c = 0; c < C; ++c) {
    const double* iplane = x_s + c * R;
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j, row += R) {
        long di = (static_cast<long>(i) - ch) * static_cast<long>(r1);
        long dj = (static_cast<long>(j) - cw) * static_cast<long>(r2);
        std::fill(row, row + R, 0.0);
        if (static_cast<std::size_t>(std::labs(di)) >= H ||
            static_cast<std::size_t>(std::labs(dj)) >= W)
          continue;
        std::size_t m0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
        std::size_t m1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
        std::size_t q0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
        std::size_t q1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
        for (std::size_t m = m0; m < m1; ++m) {
          const double* src = iplane + (m + di) * W + dj + q0;
          std::copy(src, src + (q1 - q0), row + m * W + q0);
        }
      }
  }
}

/// Scatter-add tap-major patch gradients back onto the input gradient:
/// the exact adjoint of im2col_t (out-of-bounds taps are dropped).
inline void col2im_t_add(const double* dpatches_t, double* dx_s, std::size_t C,
                         std::size_t H, std::size_t W, std::size_t kh,
                         std::size_t kw, std::size_t r1, std::size_t r2) {
  long ch = static_cast<long>(kh - 1) / 2, cw = static_cast<long>(kw - 1) / 2;
  std::size_t R = H * W;
  const double* row = dpatches_t;
  for (std::size_t c = 0; c < C; ++c) {
    double* dplane = dx_s + c * R;
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j, row += R) {
        long di = (static_cast<long>(i) - ch) * static_cast<long>(r1);
        long dj = (static_cast<long>(j) - cw) * static_cast<long>(r2);
        if (static_cast<std::size_t>(std::labs(di)) >= H ||
            static_cast<std::size_t>(std::labs(dj)) >= W)
          continue;
        std::size_t m0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
        std::size_t m1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
        std::size_t q0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
        std::size_t q1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
        for (std::size_t m = m0; m < m1; ++m) {
          double* dst = dplane + (m + di) * W + dj + q0;
          const double* src = row + m * W + q0;
          for (std::size_t q = 0; q < q1 - q0; ++q) dst[q] += src[q];
        }
      }
  }
}

}  // namespace detail

/// 2-D cross-correlation with independent dilation rates per axis, stride 1,
/// zero padding chosen so output spatial size equals input spatial size.
/// x: B×C×H×W (or C×H×W), w: K×C×kh×kw with odd kh, kw; bias b: K.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t r1, std::size_t r2) {
  require(w.ndim() == 4, "conv2d: weight must be K×C×kh×kw, got ",
          shape_str(w.shape()));
  require(r1 >= 1 && r2 >= 1, "conv2d: dilation rates must be >= 1");
  bool batched = x.ndim() == 4;
  require(batched || x.ndim() == 3, "conv2d: input must be B×C×H×W or C×H×W, got ",
          shape_str(x.shape()));
  std::size_t B = batched ? x.shape()[0] : 1;
  std::size_t C = x.shape()[batched ? 1 : 0];
  std::size_t H = x.shape()[batched ? 2 : 1];
  std::size_t W = x.shape()[batched ? 3 : 2];
  std::size_t K = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  require(w.shape()[1] == C, "conv2d: weight expects ", w.shape()[1],
          " input channels, input has ", C);
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got ",
          kh, "x", kw);
  require(b.ndim() == 1 && b.shape()[0] == K, "conv2d: bias must have shape [",
          K, "], got ", shape_str(b.shape()));

  // Lowered formulation: per sample, gather dilated patches in tap-major
  // (C·kh·kw)×(H·W) layout, matching the flattened weight row layout, so the
  // convolution becomes one dense matrix product with unit-stride updates.
  std::size_t D = C * kh * kw, R = H * W;
  std::vector<double> out(B * K * R);
  std::vector<double> patches_t(D * R);
  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  for (std::size_t n = 0; n < B; ++n) {
    detail::im2col_t(xv.data() + n * C * R, patches_t.data(), C, H, W, kh, kw,
                     r1, r2);
    double* oblock = out.data() + n * K * R;  // K×R
    for (std::size_t k = 0; k < K; ++k)
      std::fill(oblock + k * R, oblock + (k + 1) * R, bv[k]);
    detail::mm_nn(wv.data(), patches_t.data(), oblock, K, D, R);
  }

  Shape out_shape = batched ? Shape{B, K, H, W} : Shape{K, H, W};
  return detail::make_op(
      std::move(out_shape), std::move(out), {x, w, b},
      [B, C, H, W, K, kh, kw, r1, r2, D, R](
          const std::vector<double>& g, detail::Node& self,
          const std::vector<std::vector<double>*>& pg) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        std::vector<double> patches_t((pg[0] || pg[1]) ? D * R : 0);
        std::vector<double> dpatches_t(pg[0] ? D * R : 0);
        std::vector<double> g_t(pg[1] ? R * K : 0);
        std::vector<double> dw_t(pg[1] ? D * K : 0, 0.0);
        for (std::size_t n = 0; n < B; ++n) {
          const double* gblock = g.data() + n * K * R;  // K×R
          if (pg[2])
            for (std::size_t k = 0; k < K; ++k) {
              const double* grow = gblock + k * R;
              double acc = 0.0;
              for (std::size_t i = 0; i < R; ++i) acc += grow[i];
              (*pg[2])[k] += acc;
            }
          if (pg[0] || pg[1])
            detail::im2col_t(xv.data() + n * C * R, patches_t.data(), C, H, W,
                             kh, kw, r1, r2);
          if (pg[1]) {
            for (std::size_t k = 0; k < K; ++k)
              for (std::size_t r = 0; r < R; ++r)
                g_t[r * K + k] = gblock[k * R + r];
            detail::mm_nn(patches_t.data(), g_t.data(), dw_t.data(), D, R, K);
          }
          if (pg[0]) {
            std::fill(dpatches_t.begin(), dpatches_t.end(), 0.0);
            detail::mm_tn(wv.data(), gblock, dpatches_t.data(), D, K, R);
            detail::col2im_t_add(dpatches_t.data(),
                                 pg[0]->data() + n * C * R, C, H, W, kh, kw,
                                 r1, r2);
          }
        }
        if (pg[1])
          for (std::size_t d = 0; d < D; ++d)
            for (std::size_t k = 0; k < K; ++k)
              (*pg[1])[k * D + d] += dw_t[d * K + k];
      });
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Ties resolve to the lowest flat index.
inline Tensor max_pool2d(const Tensor& x, std::size_t window = 2,
                         std::size_t stride = 2) {
  require(window >= 1 && stride >= 1, "max_pool2d: window/stride must be >= 1");
  bool batched = x.ndim() == 4;
  require(batched || x.ndim() == 3, "max_pool2d: input must be B×C×H×W or C×H×W, got ",
          shape_str(x.shape()));
  std::size_t B = batched ? x.shape()[0] : 1;
  std::size_t C = x.shape()[batched ? 1 : 0];
  std::size_t H = x.shape()[batched ? 2 : 1];
  std::size_t W = x.shape()[batched ? 3 : 2];
  require(H >= window && W >= window, "max_pool2d: input ", H, "x", W,
          " smaller than window ", window);
  std::size_t Ho = (H - window) / stride + 1;
  std::size_t Wo = (W - window) / stride + 1;

  std::vector<double> out(B * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  const auto& xv = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* plane = xv.data() + bc * H * W;
    for (std::size_t m = 0; m < Ho; ++m)
      for (std::size_t q = 0; q < Wo; ++q) {
        std::size_t base_r = m * stride, base_c = q * stride;
        std::size_t best = base_r * W + base_c;
        double bv = plane[best];
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            std::size_t f = (base_r + i) * W + base_c + j;
            if (plane[f] > bv) {
              bv = plane[f];
              best = f;
            }
          }
        out[bc * Ho * Wo + m * Wo + q] = bv;
        arg[bc * Ho * Wo + m * Wo + q] = bc * H * W + best;
      }
  }
  Shape out_shape = batched ? Shape{B, C, Ho, Wo} : Shape{C, Ho, Wo};
  return detail::make_op(
      std::move(out_shape), std::move(out), {x},
      [arg](const std::vector<double>& g, detail::Node&,
            const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) dst[arg[i]] += g[i];
      });
}

// ----------------------------------------------------------------------------
// Batch normalisation (fused op over batch + spatial axes, per channel)
// ----------------------------------------------------------------------------

struct BatchNormResult {
  Tensor y;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased (divide by N)
};

/// Training-mode batch norm on B×C×H×W (or C×H×W) input: statistics are the
/// current batch's, computed per channel over batch and spatial axes.
inline BatchNormResult batch_norm_train(const Tensor& x, const Tensor& gamma,
                                        const Tensor& beta, double eps) {
  auto L = detail::channel_layout(x.shape(), "batch_norm");
  require(gamma.ndim() == 1 && gamma.shape()[0] == L.C &&
              beta.ndim() == 1 && beta.shape()[0] == L.C,
          "batch_norm: gamma/beta must have shape [", L.C, "]");
  std::size_t N = L.B * L.plane;
  const auto& xv = x.data();
  std::vector<double> mean(L.C, 0.0), var(L.C, 0.0), inv_std(L.C);
  for (std::size_t b = 0; b < L.B; ++b)
    for (std::size_t c = 0; c < L.C; ++c) {
      const double* src = xv.data() + (b * L.C + c) * L.plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < L.plane; ++i) acc += src[i];
      mean[c] += acc;
    }
  for (std::size_t c = 0; c < L.C; ++c) mean[c] /= static_cast<double>(N);
  for (std::size_t b = 0; b < L.B; ++b)
    for (std::size_t c = 0; c < L.C; ++c) {
      const double* src = xv.data() + (b * L.C + c) * L.plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < L.plane; ++i) {
        double d = src[i] - mean[c];
        acc += d * d;
      }
      var[c] += acc;
    }
  for (std::size_t c = 0; c < L.C; ++c) {
    var[c] /= static_cast<double>(N);
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }

  std::vector<double> xhat(x.size()), out(x.size());
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (std::size_t b = 0; b < L.B; ++b)
    for (std::size_t c = 0; c < L.C; ++c) {
      std::size_t base = (b * L.C + c) * L.plane;
      for (std::size_t i = 0; i < L.plane; ++i) {
        double h = (xv[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = gv[c] * h + bv[c];
      }
    }

  Tensor y = detail::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [L, N, inv_std, xhat](const std::vector<double>& g, detail::Node& self,
                            const std::vector<std::vector<double>*>& pg) {
        const auto& gv = self.parents[1]->value;
        for (std::size_t c = 0; c < L.C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < L.B; ++b) {
            std::size_t base = (b * L.C + c) * L.plane;
            for (std::size_t i = 0; i < L.plane; ++i) {
              sum_g += g[base + i];
              sum_gx += g[base + i] * xhat[base + i];
            }
          }
          if (pg[1]) (*pg[1])[c] += sum_gx;
          if (pg[2]) (*pg[2])[c] += sum_g;
          if (pg[0]) {
            double scale = gv[c] * inv_std[c] / static_cast<double>(N);
            auto& dst = *pg[0];
            for (std::size_t b = 0; b < L.B; ++b) {
              std::size_t base = (b * L.C + c) * L.plane;
              for (std::size_t i = 0; i < L.plane; ++i)
                dst[base + i] += scale * (static_cast<double>(N) * g[base + i] -
                                          sum_g - xhat[base + i] * sum_gx);
            }
          }
        }
      });
  return {std::move(y), std::move(mean), std::move(var)};
}

/// Inference-mode batch norm: a per-channel affine transform built from the
/// stored running statistics. Gradients still flow through x, gamma, beta.
inline Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma,
                              const Tensor& beta,
                              const std::vector<double>& running_mean,
                              const std::vector<double>& running_var, double eps) {
  auto L = detail::channel_layout(x.shape(), "batch_norm");
  require(running_mean.size() == L.C && running_var.size() == L.C,
          "batch_norm: running stats must have length ", L.C);
  std::vector<double> inv_std(L.C), neg_mean(L.C);
  for (std::size_t c = 0; c < L.C; ++c) {
    inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    neg_mean[c] = -running_mean[c];
  }
  Tensor scale = gamma * Tensor::from({L.C}, inv_std);
  Tensor centered = add_channels(x, Tensor::from({L.C}, neg_mean));
  return add_channels(scale_channels(centered, scale), beta);
}

// ----------------------------------------------------------------------------
// Dropout
// ----------------------------------------------------------------------------

/// Apply a precomputed dropout mask (entries are 0 or 1/(1-rate)).
inline Tensor dropout_mask_apply(const Tensor& x, std::vector<double> mask) {
  require(mask.size() == x.size(), "dropout: mask size mismatch");
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return detail::make_op(
      x.shape(), std::move(out), {x},
      [mask = std::move(mask)](const std::vector<double>& g, detail::Node&,
                               const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * mask[i];
      });
}

inline std::vector<double> make_dropout_mask(std::size_t n, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1), got ", rate);
  std::vector<double> mask(n);
  double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < n; ++i) mask[i] = rng.uniform() < rate ? 0.0 : keep;
  return mask;
}

/// Inverted dropout: zero each element with probability `rate`, scale the
/// survivors by 1/(1-rate). The mask is drawn once at graph build time, so
/// repeated backward passes through the same graph are consistent.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate == 0.0) return x;
  return dropout_mask_apply(x, make_dropout_mask(x.size(), rate, rng));
}

// ----------------------------------------------------------------------------
// Backward pass
// ----------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Gradients accumulate (add) into the
/// `grad` buffer of every reachable leaf with requires_grad set; interior
/// buffers are local to this call.
inline void backward(const Tensor& loss) {
  require(loss.defined(), "backward: undefined tensor");
  require(loss.size() == 1, "backward: loss must be scalar, got shape ",
          shape_str(loss.shape()));
  detail::Node* root = loss.node().get();
  if (!root->requires_grad) return;  // nothing trainable upstream

  // Iterative post-order DFS over nodes that require grad.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended && next >= node->parents.size()) {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<detail::Node*, std::vector<double>> bufs;
  bufs[root] = {1.0};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    auto found = bufs.find(node);
    if (found == bufs.end()) continue;
    if (node->is_leaf || !node->backward) {
      if (node->is_leaf && node->requires_grad) {
        if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
        const auto& b = found->second;
        for (std::size_t i = 0; i < b.size(); ++i) node->grad[i] += b[i];
      }
      continue;
    }
    std::vector<std::vector<double>*> pgs(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      detail::Node* p = node->parents[i].get();
      if (!p->requires_grad) continue;
      auto [slot, inserted] = bufs.try_emplace(p);
      if (inserted) slot->second.assign(p->value.size(), 0.0);
      pgs[i] = &slot->second;
    }
    node->backward(found->second, *node, pgs);
    bufs.erase(found);  // free as we go
  }
}

// ----------------------------------------------------------------------------
// Gradient checking
// ----------------------------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_err;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::vector<GradCheckEntry> per_parameter;
};

/// Compare reverse-mode gradients of a scalar function against central finite
/// differences. `f` must rebuild its graph on every call, reading the current
/// values of the given leaves; any stochastic op inside must use a frozen mask.
/// Relative error: |a - n| / max(|a|, |n|, 1e-4).
inline GradCheckReport gradient_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double step = 1e-5) {
  require(step > 0, "gradient_check: step must be positive");
  for (auto& [name, p] : params) {
    require(p.defined() && p.is_leaf() && p.requires_grad(),
            "gradient_check: parameter '", name, "' must be a trainable leaf");
    const_cast<Tensor&>(p).zero_grad();
  }
  Tensor loss = f();
  require(std::isfinite(loss.item()), "gradient_check: non-finite loss");
  backward(loss);

  GradCheckReport report;
  for (auto& [name, p] : params) {
    Tensor t = p;
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) analytic = t.grad();
    double worst = 0.0;
    auto& vals = t.mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double save = vals[i];
      vals[i] = save + step;
      double lp = f().item();
      vals[i] = save - step;
      double lm = f().item();
      vals[i] = save;
      require(std::isfinite(lp) && std::isfinite(lm),
              "gradient_check: non-finite loss while perturbing '", name, "'");
      double numeric = (lp - lm) / (2.0 * step);
      double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-4});
      double rel = std::fabs(analytic[i] - numeric) / denom;
      require(std::isfinite(rel), "gradient_check: non-finite relative error in '",
              name, "'");
      worst = std::max(worst, rel);
    }
    report.per_parameter.push_back({name, worst});
    report.max_relative_error = std::max(report.max_relative_error, worst);
  }
  return report;
}

}  // namespace trouspi

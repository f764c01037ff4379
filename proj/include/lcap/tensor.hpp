#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lcap/error.hpp"
#include "lcap/rng.hpp"

namespace lcap {

using Shape = std::vector<std::int64_t>;

inline std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank) {
  const std::int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

namespace detail {

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<ImplPtr> parents;
  std::function<void(const TensorImpl&)> backward_fn;
  const char* op = "leaf";

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// When set, ops compute values but record no graph (cheap repeated forwards,
// e.g. finite differences and greedy decoding).
inline thread_local bool g_no_grad = false;

}  // namespace detail

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::g_no_grad) { detail::g_no_grad = true; }
  ~NoGradGuard() { detail::g_no_grad = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor of doubles with a reverse-mode gradient record.
// Copying a Tensor copies the handle, not the storage.
class Tensor {
 public:
  Tensor() : impl_(nullptr) {}
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor from_data(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeError("from_data: shape " + shape_to_string(shape) + " expects " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(impl);
  }

  static Tensor full(Shape shape, double value) {
    auto impl = std::make_shared<detail::TensorImpl>();
    const std::int64_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<std::size_t>(n), value);
    return Tensor(impl);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return from_data({}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    const std::int64_t n = shape_numel(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& x : d) x = rng.normal() * stddev;
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    const std::int64_t n = shape_numel(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& x : d) x = rng.uniform(lo, hi);
    return from_data(std::move(shape), std::move(d));
  }

  // Glorot/Xavier uniform for 2-D weight matrices [fan_in, fan_out].
  static Tensor xavier(Shape shape, Rng& rng) {
    if (shape.size() != 2) throw ShapeError("xavier init expects a 2-D shape");
    const double a = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    return rand_uniform(std::move(shape), rng, -a, a);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t numel() const { return impl_->numel(); }
  std::int64_t dim(std::int64_t axis) const {
    return impl_->shape[static_cast<std::size_t>(normalize_axis(axis, rank()))];
  }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<double>& grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
    }
    return impl_->data[0];
  }

  // Test/debug convenience: value at a multi-index.
  double at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != rank()) {
      throw ShapeError("at(): index rank mismatch");
    }
    std::int64_t off = 0;
    std::int64_t stride = 1;
    auto it = idx.end();
    for (std::int64_t d = rank() - 1; d >= 0; --d) {
      --it;
      off += *it * stride;
      stride *= impl_->shape[static_cast<std::size_t>(d)];
    }
    return impl_->data[static_cast<std::size_t>(off)];
  }

  bool all_finite() const {
    for (double v : impl_->data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  detail::ImplPtr impl() const { return impl_; }

  // Reverse-mode backprop from a scalar. Visits each reachable node exactly
  // once in reverse topological order; repeated calls accumulate.
  void backward() const;

 private:
  detail::ImplPtr impl_;
};

namespace detail {

inline ImplPtr make_node(Shape shape, std::vector<Tensor> parents, const char* op) {
  auto impl = std::make_shared<TensorImpl>();
  const std::int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.resize(static_cast<std::size_t>(n));
  impl->op = op;
  if (!g_no_grad) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
      impl->requires_grad = true;
      impl->parents.reserve(parents.size());
      for (auto& p : parents) impl->parents.push_back(p.impl());
    }
  }
  return impl;
}

// Row-major strides; broadcast dims (size 1 against a larger output dim) get
// stride 0 so the same element is reused.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::int64_t r_out = static_cast<std::int64_t>(out.size());
  const std::int64_t r_in = static_cast<std::int64_t>(in.size());
  std::vector<std::int64_t> strides(static_cast<std::size_t>(r_out), 0);
  std::int64_t s = 1;
  for (std::int64_t d = r_in - 1; d >= 0; --d) {
    const std::int64_t od = d + (r_out - r_in);
    if (in[static_cast<std::size_t>(d)] == out[static_cast<std::size_t>(od)]) {
      strides[static_cast<std::size_t>(od)] = s;
    } else if (in[static_cast<std::size_t>(d)] == 1) {
      strides[static_cast<std::size_t>(od)] = 0;
    } else {
      throw ShapeError("cannot broadcast " + shape_to_string(in) + " to " +
                       shape_to_string(out));
    }
    s *= in[static_cast<std::size_t>(d)];
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db || da == 1 || db == 1) {
      out[i] = std::max(da, db);
    } else {
      throw ShapeError(std::string(op) + ": shapes " + shape_to_string(a) + " and " +
                       shape_to_string(b) + " are not broadcastable");
    }
  }
  return out;
}

// Odometer walk over `out_shape`, invoking fn(out_linear, a_offset, b_offset).
template <typename Fn>
inline void for_each_broadcast2(const Shape& out_shape, const std::vector<std::int64_t>& sa,
                                const std::vector<std::int64_t>& sb, Fn&& fn) {
  const std::int64_t n = shape_numel(out_shape);
  const std::int64_t r = static_cast<std::int64_t>(out_shape.size());
  if (r == 0) {
    if (n > 0) fn(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t lin = 0; lin < n; ++lin) {
    fn(lin, oa, ob);
    for (std::int64_t d = r - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      oa += sa[du];
      ob += sb[du];
      if (idx[du] < out_shape[du]) break;
      oa -= sa[du] * out_shape[du];
      ob -= sb[du] * out_shape[du];
      idx[du] = 0;
    }
  }
}

// Same walk with the last axis hoisted into a tight inner loop; the inner
// strides are 0 or 1, so fn_inner sees contiguous runs.
template <typename Fn>
inline void for_each_broadcast2_rows(const Shape& out_shape, const std::vector<std::int64_t>& sa,
                                     const std::vector<std::int64_t>& sb, Fn&& fn_inner) {
  const std::int64_t r = static_cast<std::int64_t>(out_shape.size());
  if (r == 0) {
    fn_inner(0, 0, 0, 1, 0, 0);
    return;
  }
  const std::int64_t inner = out_shape[static_cast<std::size_t>(r - 1)];
  const std::int64_t ia = sa[static_cast<std::size_t>(r - 1)];
  const std::int64_t ib = sb[static_cast<std::size_t>(r - 1)];
  Shape outer_shape(out_shape.begin(), out_shape.end() - 1);
  std::vector<std::int64_t> oa(sa.begin(), sa.end() - 1);
  std::vector<std::int64_t> ob(sb.begin(), sb.end() - 1);
  // outer strides count elements of the respective inputs, which already
  // include the inner extent, so they can be used directly
  const std::int64_t outer_n = shape_numel(outer_shape);
  const std::int64_t ro = r - 1;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(ro), 0);
  std::int64_t off_a = 0, off_b = 0;
  for (std::int64_t lin = 0; lin < outer_n; ++lin) {
    fn_inner(lin * inner, off_a, off_b, inner, ia, ib);
    for (std::int64_t d = ro - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      off_a += oa[du];
      off_b += ob[du];
      if (idx[du] < outer_shape[du]) break;
      off_a -= oa[du] * outer_shape[du];
      off_b -= ob[du] * outer_shape[du];
      idx[du] = 0;
    }
  }
}

template <typename FwdFn, typename BwdFn>
inline Tensor binary_broadcast_op(const Tensor& a, const Tensor& b, const char* name,
                                  FwdFn fwd, BwdFn make_backward) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto node = make_node(out_shape, {a, b}, name);
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = node->data;
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i], bd[i]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast2_rows(
        out_shape, sa, sb,
        [&](std::int64_t o, std::int64_t base_a, std::int64_t base_b, std::int64_t inner,
            std::int64_t ia, std::int64_t ib) {
          double* out_row = od.data() + o;
          const double* a_row = ad.data() + base_a;
          const double* b_row = bd.data() + base_b;
          if (ia == 1 && ib == 1) {
            for (std::int64_t k = 0; k < inner; ++k) out_row[k] = fwd(a_row[k], b_row[k]);
          } else if (ia == 1 && ib == 0) {
            const double bv = *b_row;
            for (std::int64_t k = 0; k < inner; ++k) out_row[k] = fwd(a_row[k], bv);
          } else if (ia == 0 && ib == 1) {
            const double av = *a_row;
            for (std::int64_t k = 0; k < inner; ++k) out_row[k] = fwd(av, b_row[k]);
          } else {
            for (std::int64_t k = 0; k < inner; ++k) out_row[k] = fwd(*a_row, *b_row);
          }
        });
  }
  if (node->requires_grad) node->backward_fn = make_backward(a, b, Tensor(node));
  return Tensor(node);
}

// Shared backward skeleton for elementwise binary ops: local partials are
// computed per element and accumulated into (possibly broadcast) parents.
template <typename DaFn, typename DbFn>
inline std::function<void(const TensorImpl&)> broadcast_binary_backward(const Tensor& a,
                                                                        const Tensor& b,
                                                                        DaFn da_fn, DbFn db_fn) {
  return [a, b, da_fn, db_fn](const TensorImpl& self) {
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    if (need_a) a.impl()->ensure_grad();
    if (need_b) b.impl()->ensure_grad();
    const auto& g = self.grad;
    const auto& ad = a.data();
    const auto& bd = b.data();
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (need_a) a.impl()->grad[i] += da_fn(ad[i], bd[i]) * g[i];
        if (need_b) b.impl()->grad[i] += db_fn(ad[i], bd[i]) * g[i];
      }
      return;
    }
    const auto sa = broadcast_strides(a.shape(), self.shape);
    const auto sb = broadcast_strides(b.shape(), self.shape);
    double* ga = need_a ? a.impl()->grad.data() : nullptr;
    double* gb = need_b ? b.impl()->grad.data() : nullptr;
    for_each_broadcast2_rows(
        self.shape, sa, sb,
        [&](std::int64_t o, std::int64_t base_a, std::int64_t base_b, std::int64_t inner,
            std::int64_t ia, std::int64_t ib) {
          const double* g_row = g.data() + o;
          for (std::int64_t k = 0; k < inner; ++k) {
            const double gv = g_row[k];
            const std::size_t idx_a = static_cast<std::size_t>(base_a + k * ia);
            const std::size_t idx_b = static_cast<std::size_t>(base_b + k * ib);
            const double av = ad[idx_a];
            const double bv = bd[idx_b];
            if (need_a) ga[idx_a] += da_fn(av, bv) * gv;
            if (need_b) gb[idx_b] += db_fn(av, bv) * gv;
          }
        });
  };
}

template <typename FwdFn, typename GradFn>
inline Tensor unary_op(const Tensor& a, const char* name, FwdFn fwd, GradFn grad_fn) {
  auto node = make_node(a.shape(), {a}, name);
  const auto& ad = a.data();
  auto& od = node->data;
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i]);
  if (node->requires_grad) {
    // self.data carries the op's output, so the closure must not capture the
    // node itself (that would be an ownership cycle and leak whole graphs)
    node->backward_fn = [a, grad_fn](const TensorImpl& self) {
      a.impl()->ensure_grad();
      auto& ga = a.impl()->grad;
      const auto& ad2 = a.data();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += grad_fn(ad2[i], self.data[i]) * self.grad[i];
      }
    };
  }
  return Tensor(node);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](const Tensor& pa, const Tensor& pb, const Tensor&) {
        return detail::broadcast_binary_backward(
            pa, pb, [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](const Tensor& pa, const Tensor& pb, const Tensor&) {
        return detail::broadcast_binary_backward(
            pa, pb, [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](const Tensor& pa, const Tensor& pb, const Tensor&) {
        return detail::broadcast_binary_backward(
            pa, pb, [](double, double y) { return y; }, [](double x, double) { return x; });
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](const Tensor& pa, const Tensor& pb, const Tensor&) {
        return detail::broadcast_binary_backward(
            pa, pb, [](double, double y) { return 1.0 / y; },
            [](double x, double y) { return -x / (y * y); });
      });
}

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  return detail::unary_op(
      a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return mul_scalar(a, 1.0 / s); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, "sigmoid", [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

// log(sigmoid(x)), stable for large |x|; gradient is sigmoid(-x).
inline Tensor log_sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, "log_sigmoid",
      [](double x) { return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x)); },
      [](double x, double) { return stable_sigmoid(-x); });
}

// max(x, c); acts as identity (gradient 1) wherever x >= c.
inline Tensor clamp_min(const Tensor& a, double c) {
  return detail::unary_op(
      a, "clamp_min", [c](double x) { return x > c ? x : c; },
      [c](double x, double) { return x >= c ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                     shape_to_string(new_shape));
  }
  auto node = detail::make_node(new_shape, {a}, "reshape");
  node->data = a.data();
  if (node->requires_grad) {
    node->backward_fn = [a](const detail::TensorImpl& self) {
      a.impl()->ensure_grad();
      auto& ga = a.impl()->grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    };
  }
  return Tensor(node);
}

// Insert a size-1 axis at `axis` (negative counts from the back, -1 appends
// before the last... i.e. python-style insertion point in [-rank-1, rank]).
inline Tensor unsqueeze(const Tensor& a, std::int64_t axis) {
  const std::int64_t r = a.rank();
  std::int64_t pos = axis < 0 ? axis + r + 1 : axis;
  if (pos < 0 || pos > r) throw ShapeError("unsqueeze: bad axis");
  Shape s = a.shape();
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(pos), 1);
  return reshape(a, std::move(s));
}

inline Tensor transpose(const Tensor& a, std::int64_t axis0, std::int64_t axis1) {
  const std::int64_t r = a.rank();
  const std::int64_t d0 = normalize_axis(axis0, r);
  const std::int64_t d1 = normalize_axis(axis1, r);
  Shape out_shape = a.shape();
  std::swap(out_shape[static_cast<std::size_t>(d0)], out_shape[static_cast<std::size_t>(d1)]);
  auto node = detail::make_node(out_shape, {a}, "transpose");

  // Source strides permuted into output order.
  std::vector<std::int64_t> src_strides(static_cast<std::size_t>(r), 1);
  for (std::int64_t d = r - 2; d >= 0; --d) {
    src_strides[static_cast<std::size_t>(d)] =
        src_strides[static_cast<std::size_t>(d + 1)] * a.shape()[static_cast<std::size_t>(d + 1)];
  }
  std::swap(src_strides[static_cast<std::size_t>(d0)], src_strides[static_cast<std::size_t>(d1)]);

  const auto& ad = a.data();
  auto& od = node->data;
  std::vector<std::int64_t> zero(static_cast<std::size_t>(r), 0);
  detail::for_each_broadcast2(out_shape, src_strides, zero,
                              [&](std::int64_t o, std::int64_t ia, std::int64_t) {
                                od[static_cast<std::size_t>(o)] = ad[static_cast<std::size_t>(ia)];
                              });
  if (node->requires_grad) {
    node->backward_fn = [a, out_shape, src_strides, zero](const detail::TensorImpl& self) {
      a.impl()->ensure_grad();
      auto& ga = a.impl()->grad;
      detail::for_each_broadcast2(out_shape, src_strides, zero,
                                  [&](std::int64_t o, std::int64_t ia, std::int64_t) {
                                    ga[static_cast<std::size_t>(ia)] +=
                                        self.grad[static_cast<std::size_t>(o)];
                                  });
    };
  }
  return Tensor(node);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::int64_t r = parts[0].rank();
  const std::int64_t ax = normalize_axis(axis, r);
  Shape out_shape = parts[0].shape();
  std::int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (std::int64_t d = 0; d < r; ++d) {
      if (d != ax && p.shape()[static_cast<std::size_t>(d)] != out_shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: shape mismatch " + shape_to_string(p.shape()) + " vs " +
                         shape_to_string(out_shape) + " on non-concat axis");
      }
    }
    axis_total += p.shape()[static_cast<std::size_t>(ax)];
  }
  out_shape[static_cast<std::size_t>(ax)] = axis_total;

  auto node = detail::make_node(out_shape, parts, "concat");
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < ax; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (std::int64_t d = ax + 1; d < r; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

  auto& od = node->data;
  const std::int64_t out_row = axis_total * inner;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t len = p.shape()[static_cast<std::size_t>(ax)] * inner;
    const auto& pd = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(pd.begin() + o * len, pd.begin() + (o + 1) * len,
                od.begin() + o * out_row + offset);
    }
    offset += len;
  }
  if (node->requires_grad) {
    auto parts_copy = parts;
    node->backward_fn = [parts_copy, outer, inner, out_row, ax](const detail::TensorImpl& self) {
      std::int64_t off = 0;
      for (const auto& p : parts_copy) {
        const std::int64_t len = p.shape()[static_cast<std::size_t>(ax)] * inner;
        if (p.requires_grad()) {
          p.impl()->ensure_grad();
          auto& pg = p.impl()->grad;
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + o * out_row + off;
            double* dst = pg.data() + o * len;
            for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
        off += len;
      }
    };
  }
  return Tensor(node);
}

inline Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t start, std::int64_t len) {
  const std::int64_t r = a.rank();
  const std::int64_t ax = normalize_axis(axis, r);
  const std::int64_t dim = a.shape()[static_cast<std::size_t>(ax)];
  if (start < 0 || len < 0 || start + len > dim) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for axis size " +
                     std::to_string(dim));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] = len;
  auto node = detail::make_node(out_shape, {a}, "slice");

  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < ax; ++d) outer *= a.shape()[static_cast<std::size_t>(d)];
  for (std::int64_t d = ax + 1; d < r; ++d) inner *= a.shape()[static_cast<std::size_t>(d)];
  const std::int64_t in_row = dim * inner;
  const std::int64_t out_len = len * inner;
  const auto& ad = a.data();
  auto& od = node->data;
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(ad.begin() + o * in_row + start * inner,
              ad.begin() + o * in_row + start * inner + out_len, od.begin() + o * out_len);
  }
  if (node->requires_grad) {
    node->backward_fn = [a, outer, inner, in_row, out_len, start](const detail::TensorImpl& self) {
      a.impl()->ensure_grad();
      auto& ga = a.impl()->grad;
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = self.grad.data() + o * out_len;
        double* dst = ga.data() + o * in_row + start * inner;
        for (std::int64_t i = 0; i < out_len; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a, std::int64_t axis, bool keepdims = false) {
  const std::int64_t r = a.rank();
  const std::int64_t ax = normalize_axis(axis, r);
  const std::int64_t n = a.shape()[static_cast<std::size_t>(ax)];
  Shape out_shape;
  for (std::int64_t d = 0; d < r; ++d) {
    if (d == ax) {
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.shape()[static_cast<std::size_t>(d)]);
    }
  }
  auto node = detail::make_node(out_shape, {a}, "sum");
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < ax; ++d) outer *= a.shape()[static_cast<std::size_t>(d)];
  for (std::int64_t d = ax + 1; d < r; ++d) inner *= a.shape()[static_cast<std::size_t>(d)];
  const auto& ad = a.data();
  auto& od = node->data;
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      const double* base = ad.data() + (o * n) * inner + i;
      for (std::int64_t k = 0; k < n; ++k) acc += base[k * inner];
      od[static_cast<std::size_t>(o * inner + i)] = acc;
    }
  }
  if (node->requires_grad) {
    node->backward_fn = [a, outer, inner, n](const detail::TensorImpl& self) {
      a.impl()->ensure_grad();
      auto& ga = a.impl()->grad;
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const double gv = self.grad[static_cast<std::size_t>(o * inner + i)];
          double* base = ga.data() + (o * n) * inner + i;
          for (std::int64_t k = 0; k < n; ++k) base[k * inner] += gv;
        }
      }
    };
  }
  return Tensor(node);
}

inline Tensor sum_all(const Tensor& a) {
  auto node = detail::make_node({}, {a}, "sum_all");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  node->data[0] = acc;
  if (node->requires_grad) {
    node->backward_fn = [a](const detail::TensorImpl& self) {
      a.impl()->ensure_grad();
      auto& ga = a.impl()->grad;
      const double gv = self.grad[0];
      for (auto& g : ga) g += gv;
    };
  }
  return Tensor(node);
}

inline Tensor mean_all(const Tensor& a) { return sum_all(a) * (1.0 / static_cast<double>(a.numel())); }

inline Tensor mean(const Tensor& a, std::int64_t axis, bool keepdims = false) {
  const std::int64_t n = a.shape()[static_cast<std::size_t>(normalize_axis(axis, a.rank()))];
  return sum(a, axis, keepdims) * (1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Softmax family (max-subtraction stabilized)
// ---------------------------------------------------------------------------

namespace detail {

template <typename LaneFn>
inline void for_each_lane(const Shape& shape, std::int64_t ax, LaneFn&& fn) {
  const std::int64_t r = static_cast<std::int64_t>(shape.size());
  const std::int64_t n = shape[static_cast<std::size_t>(ax)];
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < ax; ++d) outer *= shape[static_cast<std::size_t>(d)];
  for (std::int64_t d = ax + 1; d < r; ++d) inner *= shape[static_cast<std::size_t>(d)];
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      fn(o * n * inner + i, inner, n);
    }
  }
}

}  // namespace detail

inline Tensor softmax(const Tensor& a, std::int64_t axis) {
  if (!a.all_finite()) throw NumericError("softmax: non-finite input");
  const std::int64_t ax = normalize_axis(axis, a.rank());
  auto node = detail::make_node(a.shape(), {a}, "softmax");
  const auto& ad = a.data();
  auto& od = node->data;
  detail::for_each_lane(a.shape(), ax, [&](std::int64_t base, std::int64_t stride, std::int64_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t k = 0; k < n; ++k) mx = std::max(mx, ad[static_cast<std::size_t>(base + k * stride)]);
    double denom = 0.0;
    for (std::int64_t k = 0; k < n; ++k) {
      const double e = std::exp(ad[static_cast<std::size_t>(base + k * stride)] - mx);
      od[static_cast<std::size_t>(base + k * stride)] = e;
      denom += e;
    }
    for (std::int64_t k = 0; k < n; ++k) od[static_cast<std::size_t>(base + k * stride)] /= denom;
  });
  if (node->requires_grad) {
    node->backward_fn = [a, ax](const detail::TensorImpl& self) {
      a.impl()->ensure_grad();
      auto& ga = a.impl()->grad;
      const auto& y = self.data;
      const auto& g = self.grad;
      detail::for_each_lane(a.shape(), ax,
                            [&](std::int64_t base, std::int64_t stride, std::int64_t n) {
                              double dot = 0.0;
                              for (std::int64_t k = 0; k < n; ++k) {
                                const auto idx = static_cast<std::size_t>(base + k * stride);
                                dot += g[idx] * y[idx];
                              }
                              for (std::int64_t k = 0; k < n; ++k) {
                                const auto idx = static_cast<std::size_t>(base + k * stride);
                                ga[idx] += y[idx] * (g[idx] - dot);
                              }
                            });
    };
  }
  return Tensor(node);
}

inline Tensor log_softmax(const Tensor& a, std::int64_t axis) {
  if (!a.all_finite()) throw NumericError("log_softmax: non-finite input");
  const std::int64_t ax = normalize_axis(axis, a.rank());
  auto node = detail::make_node(a.shape(), {a}, "log_softmax");
  const auto& ad = a.data();
  auto& od = node->data;
  detail::for_each_lane(a.shape(), ax, [&](std::int64_t base, std::int64_t stride, std::int64_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t k = 0; k < n; ++k) mx = std::max(mx, ad[static_cast<std::size_t>(base + k * stride)]);
    double denom = 0.0;
    for (std::int64_t k = 0; k < n; ++k) denom += std::exp(ad[static_cast<std::size_t>(base + k * stride)] - mx);
    const double lse = mx + std::log(denom);
    for (std::int64_t k = 0; k < n; ++k) {
      const auto idx = static_cast<std::size_t>(base + k * stride);
      od[idx] = ad[idx] - lse;
    }
  });
  if (node->requires_grad) {
    node->backward_fn = [a, ax](const detail::TensorImpl& self) {
      a.impl()->ensure_grad();
      auto& ga = a.impl()->grad;
      const auto& y = self.data;
      const auto& g = self.grad;
      detail::for_each_lane(a.shape(), ax,
                            [&](std::int64_t base, std::int64_t stride, std::int64_t n) {
                              double gsum = 0.0;
                              for (std::int64_t k = 0; k < n; ++k) {
                                gsum += g[static_cast<std::size_t>(base + k * stride)];
                              }
                              for (std::int64_t k = 0; k < n; ++k) {
                                const auto idx = static_cast<std::size_t>(base + k * stride);
                                ga[idx] += g[idx] - std::exp(y[idx]) * gsum;
                              }
                            });
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Fused layer normalization over the last axis:
//   y = (x - mean) / sqrt(var + eps) * gamma + beta
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const std::int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " entries");
  }
  const std::int64_t rows = x.numel() / d;
  auto node = detail::make_node(x.shape(), {x, gamma, beta}, "layer_norm");
  // normalized activations and inverse stddevs are reused by the backward
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows * d));
  auto inv_s = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  auto& od = node->data;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double m = 0;
    for (std::int64_t k = 0; k < d; ++k) m += row[k];
    m /= static_cast<double>(d);
    double var = 0;
    for (std::int64_t k = 0; k < d; ++k) {
      const double c = row[k] - m;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_s)[static_cast<std::size_t>(r)] = is;
    double* xh = xhat->data() + r * d;
    double* out = od.data() + r * d;
    for (std::int64_t k = 0; k < d; ++k) {
      xh[k] = (row[k] - m) * is;
      out[k] = xh[k] * gd[k] + bd[k];
    }
  }
  if (node->requires_grad) {
    node->backward_fn = [x, gamma, beta, xhat, inv_s, rows, d](const detail::TensorImpl& self) {
      const bool need_x = x.requires_grad();
      const bool need_g = gamma.requires_grad();
      const bool need_b = beta.requires_grad();
      if (need_x) x.impl()->ensure_grad();
      if (need_g) gamma.impl()->ensure_grad();
      if (need_b) beta.impl()->ensure_grad();
      const auto& g = self.grad;
      const auto& gd = gamma.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* g_row = g.data() + r * d;
        const double* xh = xhat->data() + r * d;
        if (need_g || need_b) {
          double* gg = gamma.impl()->grad.data();
          double* gb = beta.impl()->grad.data();
          for (std::int64_t k = 0; k < d; ++k) {
            if (need_g) gg[k] += g_row[k] * xh[k];
            if (need_b) gb[k] += g_row[k];
          }
        }
        if (need_x) {
          // dxhat = g * gamma; dx = inv_s * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
          double mean_dxh = 0, mean_dxh_xh = 0;
          for (std::int64_t k = 0; k < d; ++k) {
            const double dxh = g_row[k] * gd[k];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[k];
          }
          mean_dxh /= static_cast<double>(d);
          mean_dxh_xh /= static_cast<double>(d);
          const double is = (*inv_s)[static_cast<std::size_t>(r)];
          double* gx = x.impl()->grad.data() + r * d;
          for (std::int64_t k = 0; k < d; ++k) {
            const double dxh = g_row[k] * gd[k];
            gx[k] += is * (dxh - mean_dxh - xh[k] * mean_dxh_xh);
          }
        }
      }
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Matrix multiplication: last two axes, leading axes must match exactly or be
// absent on one side (shared operand).
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()));
  }
  const std::int64_t M = a.shape()[a.shape().size() - 2];
  const std::int64_t K = a.shape()[a.shape().size() - 1];
  const std::int64_t Kb = b.shape()[b.shape().size() - 2];
  const std::int64_t N = b.shape()[b.shape().size() - 1];
  if (K != Kb) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape lead;
  if (lead_a == lead_b) {
    lead = lead_a;
  } else if (lead_a.empty()) {
    lead = lead_b;
  } else if (lead_b.empty()) {
    lead = lead_a;
  } else {
    throw ShapeError("matmul: batch dimensions disagree: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  Shape out_shape = lead;
  out_shape.push_back(M);
  out_shape.push_back(N);

  const std::int64_t batches = shape_numel(lead);
  const bool a_batched = !lead_a.empty() || lead.empty();
  const bool b_batched = !lead_b.empty() || lead.empty();

  auto node = detail::make_node(out_shape, {a, b}, "matmul");
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = node->data;
  const std::int64_t a_bs = M * K, b_bs = K * N, o_bs = M * N;
  for (std::int64_t bi = 0; bi < batches; ++bi) {
    const double* A = ad.data() + (a_batched ? bi * a_bs : 0);
    const double* B = bd.data() + (b_batched ? bi * b_bs : 0);
    double* C = od.data() + bi * o_bs;
    std::fill(C, C + o_bs, 0.0);
    for (std::int64_t i = 0; i < M; ++i) {
      double* __restrict Crow = C + i * N;
      for (std::int64_t k = 0; k < K; ++k) {
        const double av = A[i * K + k];
        const double* __restrict Brow = B + k * N;
        for (std::int64_t j = 0; j < N; ++j) Crow[j] += av * Brow[j];
      }
    }
  }

  if (node->requires_grad) {
    node->backward_fn = [a, b, batches, a_batched, b_batched, M, K, N, a_bs, b_bs,
                         o_bs](const detail::TensorImpl& self) {
      const auto& ad2 = a.data();
      const auto& bd2 = b.data();
      const auto& g = self.grad;
      if (a.requires_grad()) {
        a.impl()->ensure_grad();
        auto& ga = a.impl()->grad;
        for (std::int64_t bi = 0; bi < batches; ++bi) {
          const double* G = g.data() + bi * o_bs;
          const double* B = bd2.data() + (b_batched ? bi * b_bs : 0);
          double* dA = ga.data() + (a_batched ? bi * a_bs : 0);
          // dA = G * B^T
          for (std::int64_t i = 0; i < M; ++i) {
            const double* __restrict Grow = G + i * N;
            for (std::int64_t k = 0; k < K; ++k) {
              const double* __restrict Brow = B + k * N;
              double acc = 0.0;
              for (std::int64_t j = 0; j < N; ++j) acc += Grow[j] * Brow[j];
              dA[i * K + k] += acc;
            }
          }
        }
      }
      if (b.requires_grad()) {
        b.impl()->ensure_grad();
        auto& gb = b.impl()->grad;
        for (std::int64_t bi = 0; bi < batches; ++bi) {
          const double* G = g.data() + bi * o_bs;
          const double* A = ad2.data() + (a_batched ? bi * a_bs : 0);
          double* dB = gb.data() + (b_batched ? bi * b_bs : 0);
          // dB = A^T * G
          for (std::int64_t i = 0; i < M; ++i) {
            const double* __restrict Grow = G + i * N;
            for (std::int64_t k = 0; k < K; ++k) {
              const double av = A[i * K + k];
              double* __restrict Brow = dB + k * N;
              for (std::int64_t j = 0; j < N; ++j) Brow[j] += av * Grow[j];
            }
          }
        }
      }
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Integer matrices (token ids, masks) and the ops that consume them
// ---------------------------------------------------------------------------

struct IntMatrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::int64_t> values;

  IntMatrix() = default;
  IntMatrix(std::int64_t r, std::int64_t c, std::int64_t fill = 0)
      : rows(r), cols(c), values(static_cast<std::size_t>(r * c), fill) {}

  std::int64_t& at(std::int64_t r, std::int64_t c) {
    return values[static_cast<std::size_t>(r * cols + c)];
  }
  std::int64_t at(std::int64_t r, std::int64_t c) const {
    return values[static_cast<std::size_t>(r * cols + c)];
  }
};

// Row lookup: table [V, d], ids [B, J] -> [B, J, d].
inline Tensor embedding(const Tensor& table, const IntMatrix& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D");
  const std::int64_t V = table.shape()[0];
  const std::int64_t d = table.shape()[1];
  for (auto id : ids.values) {
    if (id < 0 || id >= V) {
      throw ContractError("embedding: token id " + std::to_string(id) +
                          " outside vocabulary of size " + std::to_string(V));
    }
  }
  auto node = detail::make_node({ids.rows, ids.cols, d}, {table}, "embedding");
  const auto& td = table.data();
  auto& od = node->data;
  for (std::size_t i = 0; i < ids.values.size(); ++i) {
    const double* src = td.data() + ids.values[i] * d;
    std::copy(src, src + d, od.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  if (node->requires_grad) {
    auto ids_copy = ids;
    node->backward_fn = [table, ids_copy, d](const detail::TensorImpl& self) {
      table.impl()->ensure_grad();
      auto& gt = table.impl()->grad;
      for (std::size_t i = 0; i < ids_copy.values.size(); ++i) {
        const double* src = self.grad.data() + static_cast<std::ptrdiff_t>(i) * d;
        double* dst = gt.data() + ids_copy.values[i] * d;
        for (std::int64_t k = 0; k < d; ++k) dst[k] += src[k];
      }
    };
  }
  return Tensor(node);
}

// Pick one entry along the last axis per leading position:
// x [B, J, V], ids [B, J] -> [B, J].
inline Tensor gather_index(const Tensor& x, const IntMatrix& ids) {
  if (x.rank() != 3 || x.shape()[0] != ids.rows || x.shape()[1] != ids.cols) {
    throw ShapeError("gather_index: incompatible shapes " + shape_to_string(x.shape()) + " vs ids [" +
                     std::to_string(ids.rows) + "," + std::to_string(ids.cols) + "]");
  }
  const std::int64_t V = x.shape()[2];
  auto node = detail::make_node({ids.rows, ids.cols}, {x}, "gather_index");
  const auto& xd = x.data();
  auto& od = node->data;
  for (std::size_t i = 0; i < ids.values.size(); ++i) {
    const std::int64_t id = ids.values[i];
    if (id < 0 || id >= V) throw ContractError("gather_index: index out of range");
    od[i] = xd[i * static_cast<std::size_t>(V) + static_cast<std::size_t>(id)];
  }
  if (node->requires_grad) {
    auto ids_copy = ids;
    node->backward_fn = [x, ids_copy, V](const detail::TensorImpl& self) {
      x.impl()->ensure_grad();
      auto& gx = x.impl()->grad;
      for (std::size_t i = 0; i < ids_copy.values.size(); ++i) {
        gx[i * static_cast<std::size_t>(V) + static_cast<std::size_t>(ids_copy.values[i])] +=
            self.grad[i];
      }
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

inline void Tensor::backward() const {
  if (!defined()) throw ContractError("backward: undefined tensor");
  if (numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_to_string(shape()));
  }
  // Iterative post-order DFS over nodes that require grad.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  struct Frame {
    detail::TensorImpl* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  if (impl_->requires_grad) {
    stack.push_back({impl_.get(), 0});
    seen.insert(impl_.get());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      detail::TensorImpl* p = f.node->parents[f.next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  // Interior node grads are transient per call; only leaves accumulate
  // across repeated backward() invocations.
  for (auto* node : order) {
    if (node->backward_fn) node->grad.assign(node->data.size(), 0.0);
  }
  impl_->ensure_grad();
  impl_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

namespace detail {

// Test hook: build a custom unary node with explicit forward/backward rules.
// Used by the suites to probe visit counts and to construct deliberately
// corrupted gradients for negative controls.
inline Tensor make_unary_custom(const Tensor& a, const char* name,
                                std::function<double(double)> fwd,
                                std::function<double(double, double)> grad_fn) {
  return unary_op(a, name, [fwd](double x) { return fwd(x); },
                  [grad_fn](double x, double y) { return grad_fn(x, y); });
}

}  // namespace detail

}  // namespace lcap

#pragma once

// Dense double-precision tensors (rank 0, 1 and 2) with a reverse-mode tape.
//
// Every op whose inputs require gradients appends a record to the calling
// thread's Tape. backward() walks the records in reverse recording order, so
// each node is visited once and only after all of its consumers. A tape may be
// consumed by backward() once; reset() clears it for the next step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "d3gzsl/error.hpp"
#include "d3gzsl/rng.hpp"

namespace d3gzsl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Worker threads for the matmul kernel; D3_THREADS caps it (default 1).
// Output rows are partitioned between workers, so results do not depend on
// the thread count.
inline std::size_t kernel_threads() {
  static const std::size_t n = [] {
    const char* env = std::getenv("D3_THREADS");
    if (env == nullptr) return std::size_t{1};
    long v = std::strtol(env, nullptr, 10);
    return v < 1 ? std::size_t{1} : static_cast<std::size_t>(v);
  }();
  return n;
}

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  // Position on the recording tape; unset for leaves.
  const Tape* tape = nullptr;
  std::uint64_t generation = 0;
  std::size_t index = 0;
};

using ImplPtr = std::shared_ptr<TensorImpl>;

inline std::vector<double>& grad_of(TensorImpl& t) {
  if (!t.grad) t.grad.emplace(t.data.size(), 0.0);
  return *t.grad;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data) {
    if (shape.size() > 2) throw ShapeError("only rank 0-2 tensors are supported, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, double value) {
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return from_data({}, {v}); }

  static Tensor vector(std::initializer_list<double> v) { return from_data({v.size()}, std::vector<double>(v)); }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return from_data({rows.size(), cols}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::vector<double> d(shape_numel(shape));
    for (auto& v : d) v = stddev * rng.normal();
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<double> d(shape_numel(shape));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return from_data(std::move(shape), std::move(d));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  // Rank-2 view: scalars are 1x1, vectors are rows.
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape().back(); }

  std::span<const double> data() const { return impl_->data; }
  std::vector<double> to_vector() const { return impl_->data; }

  // In-place access for optimizer updates of leaf parameters.
  std::span<double> mutable_data() { return impl_->data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t r, std::size_t c) const { return impl_->data.at(r * cols() + c); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (impl_->tape != nullptr) throw StateError("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = on;
    if (!on) impl_->grad.reset();
    return *this;
  }

  bool has_grad() const { return impl_->grad.has_value(); }
  std::span<const double> grad() const {
    if (!impl_->grad) throw StateError("tensor has no gradient");
    return *impl_->grad;
  }
  Tensor grad_tensor() const { return from_data(shape(), std::vector<double>(grad().begin(), grad().end())); }
  void zero_grad() { impl_->grad.reset(); }

  // Copy that does not participate in the tape.
  Tensor detach() const { return from_data(shape(), impl_->data); }

  Tensor clone() const {
    Tensor t = detach();
    t.impl_->requires_grad = impl_->requires_grad && impl_->tape == nullptr;
    return t;
  }

  bool same_as(const Tensor& o) const { return impl_ == o.impl_; }
  const detail::ImplPtr& impl() const { return impl_; }

 private:
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}
  friend class Tape;

  detail::ImplPtr impl_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  void record(const Tensor& out, BackwardFn fn) {
    auto& impl = *out.impl();
    impl.requires_grad = true;
    impl.tape = this;
    impl.generation = generation_;
    impl.index = records_.size();
    records_.push_back({out.impl(), std::move(fn)});
  }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ShapeError("backward() needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
    if (consumed_) throw StateError("backward() called twice on the same tape without reset()");
    auto& impl = *loss.impl();
    if (!impl.requires_grad) throw StateError("loss does not require grad");
    if (impl.tape == nullptr) {
      detail::grad_of(impl)[0] += 1.0;
      consumed_ = true;
      return;
    }
    if (impl.tape != this || impl.generation != generation_)
      throw StateError("loss was not recorded on the active tape");
    impl.grad.emplace(1, 1.0);
    for (std::size_t i = impl.index + 1; i-- > 0;) {
      auto& rec = records_[i];
      if (rec.output->grad) rec.backward(*rec.output->grad);
    }
    consumed_ = true;
  }

  void reset() {
    records_.clear();
    ++generation_;
    consumed_ = false;
  }

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Record {
    detail::ImplPtr output;
    BackwardFn backward;
  };
  std::vector<Record> records_;
  std::uint64_t generation_ = 1;
  bool consumed_ = false;
};

// The calling thread's tape.
inline Tape& tape() {
  thread_local Tape t;
  return t;
}

inline void backward(const Tensor& loss) { tape().backward(loss); }

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode_flag()) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline bool tracking(const std::vector<Tensor>& inputs) {
  if (!grad_mode_flag()) return false;
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

struct Dims2 {
  std::size_t r, c;
};

inline Dims2 dims2(const Tensor& t) { return {t.rows(), t.cols()}; }

template <class Fwd, class Da, class Db>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* op, Fwd f, Da dfa, Db dfb) {
  if (a.rank() > 2 || b.rank() > 2) throw ShapeError(std::string(op) + ": rank > 2");
  auto da = dims2(a), db = dims2(b);
  auto fit = [](std::size_t x, std::size_t y) { return x == y || x == 1 || y == 1; };
  if (!fit(da.r, db.r) || !fit(da.c, db.c))
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  const std::size_t R = std::max(da.r, db.r), C = std::max(da.c, db.c);
  Shape out_shape;
  const std::size_t rank = std::max(a.rank(), b.rank());
  if (rank == 2) out_shape = {R, C};
  else if (rank == 1) out_shape = {C};

  auto ia = [=](std::size_t i, std::size_t j) { return (da.r == 1 ? 0 : i) * da.c + (da.c == 1 ? 0 : j); };
  auto ib = [=](std::size_t i, std::size_t j) { return (db.r == 1 ? 0 : i) * db.c + (db.c == 1 ? 0 : j); };

  const auto& xa = a.data();
  const auto& xb = b.data();
  std::vector<double> out(R * C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] = f(xa[ia(i, j)], xb[ib(i, j)]);
  Tensor y = Tensor::from_data(out_shape, std::move(out));

  if (tracking({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl();
    tape().record(y, [pa, pb, R, C, ia, ib, dfa, dfb](std::span<const double> g) {
      const auto& va = pa->data;
      const auto& vb = pb->data;
      if (pa->requires_grad) {
        auto& ga = grad_of(*pa);
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) ga[ia(i, j)] += g[i * C + j] * dfa(va[ia(i, j)], vb[ib(i, j)]);
      }
      if (pb->requires_grad) {
        auto& gb = grad_of(*pb);
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) gb[ib(i, j)] += g[i * C + j] * dfb(va[ia(i, j)], vb[ib(i, j)]);
      }
    });
  }
  return y;
}

// Elementwise op whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd f, Deriv df) {
  std::vector<double> out(x.numel());
  const auto& in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  if (tracking({&x})) {
    ImplPtr px = x.impl();
    const TensorImpl* py = y.impl().get();
    tape().record(y, [px, py, df](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto& gx = grad_of(*px);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(px->data[i], py->data[i]);
    });
  }
  return y;
}

inline double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

inline double stable_softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

inline void matmul_kernel(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  auto rows = [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        double aip = a[i * k + p];
        if (aip == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  };
  std::size_t threads = std::min(kernel_threads(), m);
  if (threads <= 1 || m * k * n < (1u << 18)) {
    rows(0, m);
    return;
  }
  std::vector<std::thread> pool;
  std::size_t chunk = (m + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    std::size_t r0 = t * chunk, r1 = std::min(m, r0 + chunk);
    if (r0 < r1) pool.emplace_back(rows, r0, r1);
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (row/column vector and scalar broadcasting)

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator+(double c, const Tensor& x) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator-(double c, const Tensor& x) { return add_scalar(scale(x, -1.0), c); }

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, detail::stable_softplus, [](double v, double) { return detail::stable_sigmoid(v); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return detail::unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

// Identity in the forward pass; multiplies the incoming gradient by `factor`.
inline Tensor scale_gradient(const Tensor& x, double factor) {
  return detail::unary(x, [](double v) { return v; }, [factor](double, double) { return factor; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (detail::tracking({&x})) {
    auto px = x.impl();
    tape().record(y, [px](std::span<const double> g) {
      if (!px->requires_grad) return;
      for (auto& v : detail::grad_of(*px)) v += g[0];
    });
  }
  return y;
}

inline Tensor reduce_mean(const Tensor& x) { return scale(reduce_sum(x), 1.0 / static_cast<double>(x.numel())); }

// Sum along an axis of a matrix, keeping the reduced dimension:
// axis 0 -> [1, cols], axis 1 -> [rows, 1].
inline Tensor reduce_sum(const Tensor& x, int axis) {
  detail::require_rank2(x, "reduce_sum(axis)");
  if (axis != 0 && axis != 1) throw ParameterError("axis must be 0 or 1");
  const std::size_t R = x.rows(), C = x.cols();
  const auto& in = x.data();
  std::vector<double> out(axis == 0 ? C : R, 0.0);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[axis == 0 ? j : i] += in[i * C + j];
  Tensor y = Tensor::from_data(axis == 0 ? Shape{1, C} : Shape{R, 1}, std::move(out));
  if (detail::tracking({&x})) {
    auto px = x.impl();
    tape().record(y, [px, R, C, axis](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto& gx = detail::grad_of(*px);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) gx[i * C + j] += g[axis == 0 ? j : i];
    });
  }
  return y;
}

inline Tensor reduce_mean(const Tensor& x, int axis) {
  detail::require_rank2(x, "reduce_mean(axis)");
  return scale(reduce_sum(x, axis), 1.0 / static_cast<double>(axis == 0 ? x.rows() : x.cols()));
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::matmul_kernel(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor y = Tensor::from_data({m, n}, std::move(out));
  if (detail::tracking({&a, &b})) {
    auto pa = a.impl(), pb = b.impl();
    tape().record(y, [pa, pb, m, k, n](std::span<const double> g) {
      if (pa->requires_grad) {
        // dA = G * B^T
        auto& ga = detail::grad_of(*pa);
        const auto& vb = pb->data;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * vb[p * n + j];
            ga[i * k + p] += s;
          }
      }
      if (pb->requires_grad) {
        // dB = A^T * G
        auto& gb = detail::grad_of(*pb);
        const auto& va = pa->data;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double aip = va[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
          }
      }
    });
  }
  return y;
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank2(x, "transpose");
  const std::size_t R = x.rows(), C = x.cols();
  const auto& in = x.data();
  std::vector<double> out(R * C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[j * R + i] = in[i * C + j];
  Tensor y = Tensor::from_data({C, R}, std::move(out));
  if (detail::tracking({&x})) {
    auto px = x.impl();
    tape().record(y, [px, R, C](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto& gx = detail::grad_of(*px);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) gx[i * C + j] += g[j * R + i];
    });
  }
  return y;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor y = Tensor::from_data(std::move(shape), x.to_vector());
  if (detail::tracking({&x})) {
    auto px = x.impl();
    tape().record(y, [px](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto& gx = detail::grad_of(*px);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t C = parts.front().cols();
  std::size_t R = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != C) throw ShapeError("concat_rows: column counts differ: " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
    R += p.rows();
  }
  std::vector<double> out;
  out.reserve(R * C);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor y = Tensor::from_data({R, C}, std::move(out));
  if (detail::tracking(parts)) {
    std::vector<detail::ImplPtr> ps;
    for (const auto& p : parts) ps.push_back(p.impl());
    tape().record(y, [ps](std::span<const double> g) {
      std::size_t off = 0;
      for (const auto& p : ps) {
        if (p->requires_grad) {
          auto& gp = detail::grad_of(*p);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p->data.size();
      }
    });
  }
  return y;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t R = parts.front().rows();
  std::size_t C = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != R) throw ShapeError("concat_cols: row counts differ: " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
    C += p.cols();
  }
  std::vector<double> out(R * C);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * C + off + j] = p.data()[i * pc + j];
    off += pc;
  }
  Tensor y = Tensor::from_data({R, C}, std::move(out));
  if (detail::tracking(parts)) {
    std::vector<detail::ImplPtr> ps;
    for (const auto& p : parts) ps.push_back(p.impl());
    tape().record(y, [ps, R, C](std::span<const double> g) {
      std::size_t off = 0;
      for (const auto& p : ps) {
        const std::size_t pc = p->shape[1];
        if (p->requires_grad) {
          auto& gp = detail::grad_of(*p);
          for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * C + off + j];
        }
        off += pc;
      }
    });
  }
  return y;
}

// Gather columns `index` (in order) of a matrix.
inline Tensor select_columns(const Tensor& x, std::vector<std::size_t> index) {
  detail::require_rank2(x, "select_columns");
  const std::size_t R = x.rows(), C = x.cols(), K = index.size();
  for (auto c : index)
    if (c >= C) throw ShapeError("select_columns: column " + std::to_string(c) + " out of range for " + shape_str(x.shape()));
  std::vector<double> out(R * K);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < K; ++j) out[i * K + j] = x.data()[i * C + index[j]];
  Tensor y = Tensor::from_data({R, K}, std::move(out));
  if (detail::tracking({&x})) {
    auto px = x.impl();
    tape().record(y, [px, index = std::move(index), R, C, K](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto& gx = detail::grad_of(*px);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < K; ++j) gx[i * C + index[j]] += g[i * K + j];
    });
  }
  return y;
}

inline Tensor slice_columns(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank2(x, "slice_columns");
  if (begin > end || end > x.cols())
    throw ShapeError("slice_columns: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " + shape_str(x.shape()));
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t j = begin; j < end; ++j) idx[j - begin] = j;
  return select_columns(x, std::move(idx));
}

// Gather rows `index` (in order, repeats allowed) of a matrix.
inline Tensor select_rows(const Tensor& x, std::vector<std::size_t> index) {
  detail::require_rank2(x, "select_rows");
  const std::size_t R = x.rows(), C = x.cols(), K = index.size();
  for (auto r : index)
    if (r >= R) throw ShapeError("select_rows: row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
  std::vector<double> out(K * C);
  for (std::size_t i = 0; i < K; ++i)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(index[i] * C), C, out.begin() + static_cast<std::ptrdiff_t>(i * C));
  Tensor y = Tensor::from_data({K, C}, std::move(out));
  if (detail::tracking({&x})) {
    auto px = x.impl();
    tape().record(y, [px, index = std::move(index), C](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto& gx = detail::grad_of(*px);
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t j = 0; j < C; ++j) gx[index[i] * C + j] += g[i * C + j];
    });
  }
  return y;
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank2(x, "slice_rows");
  if (begin > end || end > x.rows())
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " + shape_str(x.shape()));
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
  return select_rows(x, std::move(idx));
}

// out[i] = x[i, index[i]]; result has shape [rows].
inline Tensor pick(const Tensor& x, const std::vector<std::size_t>& index) {
  detail::require_rank2(x, "pick");
  const std::size_t R = x.rows(), C = x.cols();
  if (index.size() != R) throw ShapeError("pick: need one index per row of " + shape_str(x.shape()));
  std::vector<double> out(R);
  for (std::size_t i = 0; i < R; ++i) {
    if (index[i] >= C) throw ShapeError("pick: column " + std::to_string(index[i]) + " out of range for " + shape_str(x.shape()));
    out[i] = x.data()[i * C + index[i]];
  }
  Tensor y = Tensor::from_data({R}, std::move(out));
  if (detail::tracking({&x})) {
    auto px = x.impl();
    tape().record(y, [px, index, C](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto& gx = detail::grad_of(*px);
      for (std::size_t i = 0; i < index.size(); ++i) gx[i * C + index[i]] += g[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

inline Tensor softmax_rows(const Tensor& v, double temperature = 1.0) {
  detail::require_rank2(v, "softmax_rows");
  if (!(temperature > 0.0)) throw ParameterError("softmax_rows: temperature must be > 0, got " + std::to_string(temperature));
  const std::size_t R = v.rows(), C = v.cols();
  const auto& in = v.data();
  std::vector<double> out(R * C);
  for (std::size_t i = 0; i < R; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, in[i * C + j] / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += out[i * C + j] = std::exp(in[i * C + j] / temperature - mx);
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] /= s;
  }
  Tensor y = Tensor::from_data({R, C}, std::move(out));
  if (detail::tracking({&v})) {
    auto pv = v.impl();
    const detail::TensorImpl* py = y.impl().get();
    tape().record(y, [pv, py, R, C, temperature](std::span<const double> g) {
      if (!pv->requires_grad) return;
      auto& gv = detail::grad_of(*pv);
      const auto& p = py->data;
      for (std::size_t i = 0; i < R; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < C; ++j) dot += g[i * C + j] * p[i * C + j];
        for (std::size_t j = 0; j < C; ++j) gv[i * C + j] += p[i * C + j] * (g[i * C + j] - dot) / temperature;
      }
    });
  }
  return y;
}

inline Tensor log_softmax_rows(const Tensor& v, double temperature = 1.0) {
  detail::require_rank2(v, "log_softmax_rows");
  if (!(temperature > 0.0)) throw ParameterError("log_softmax_rows: temperature must be > 0, got " + std::to_string(temperature));
  const std::size_t R = v.rows(), C = v.cols();
  const auto& in = v.data();
  std::vector<double> out(R * C);
  for (std::size_t i = 0; i < R; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, in[i * C + j] / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += std::exp(in[i * C + j] / temperature - mx);
    double lse = mx + std::log(s);
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] = in[i * C + j] / temperature - lse;
  }
  Tensor y = Tensor::from_data({R, C}, std::move(out));
  if (detail::tracking({&v})) {
    auto pv = v.impl();
    const detail::TensorImpl* py = y.impl().get();
    tape().record(y, [pv, py, R, C, temperature](std::span<const double> g) {
      if (!pv->requires_grad) return;
      auto& gv = detail::grad_of(*pv);
      const auto& lp = py->data;
      for (std::size_t i = 0; i < R; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < C; ++j) gs += g[i * C + j];
        for (std::size_t j = 0; j < C; ++j) gv[i * C + j] += (g[i * C + j] - std::exp(lp[i * C + j]) * gs) / temperature;
      }
    });
  }
  return y;
}

// log sum_j exp(v_ij), shape [rows, 1].
inline Tensor logsumexp_rows(const Tensor& v) {
  detail::require_rank2(v, "logsumexp_rows");
  const std::size_t R = v.rows(), C = v.cols();
  const auto& in = v.data();
  std::vector<double> out(R);
  for (std::size_t i = 0; i < R; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, in[i * C + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += std::exp(in[i * C + j] - mx);
    out[i] = mx + std::log(s);
  }
  Tensor y = Tensor::from_data({R, 1}, std::move(out));
  if (detail::tracking({&v})) {
    auto pv = v.impl();
    const detail::TensorImpl* py = y.impl().get();
    tape().record(y, [pv, py, R, C](std::span<const double> g) {
      if (!pv->requires_grad) return;
      auto& gv = detail::grad_of(*pv);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) gv[i * C + j] += g[i] * std::exp(pv->data[i * C + j] - py->data[i]);
    });
  }
  return y;
}

// Row maximum, shape [rows, 1]; the gradient goes to the first maximal entry.
inline Tensor max_rows(const Tensor& v) {
  detail::require_rank2(v, "max_rows");
  const std::size_t R = v.rows(), C = v.cols();
  if (C == 0) throw ShapeError("max_rows: empty rows");
  std::vector<double> out(R);
  std::vector<std::size_t> arg(R, 0);
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 1; j < C; ++j)
      if (v.data()[i * C + j] > v.data()[i * C + arg[i]]) arg[i] = j;
    out[i] = v.data()[i * C + arg[i]];
  }
  Tensor y = Tensor::from_data({R, 1}, std::move(out));
  if (detail::tracking({&v})) {
    auto pv = v.impl();
    tape().record(y, [pv, arg, C](std::span<const double> g) {
      if (!pv->requires_grad) return;
      auto& gv = detail::grad_of(*pv);
      for (std::size_t i = 0; i < arg.size(); ++i) gv[i * C + arg[i]] += g[i];
    });
  }
  return y;
}

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kDegenerateNorm = 1e-9;

// Rows scaled to unit Euclidean norm, computed as x / sqrt(|x|^2 + 1e-12).
// Rows with norm below 1e-9 are rejected.
inline Tensor l2_normalize_rows(const Tensor& x) {
  detail::require_rank2(x, "l2_normalize_rows");
  const std::size_t R = x.rows(), C = x.cols();
  const auto& in = x.data();
  std::vector<double> norms(R), out(R * C);
  for (std::size_t i = 0; i < R; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += in[i * C + j] * in[i * C + j];
    if (std::sqrt(s) < kDegenerateNorm)
      throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) + " has near-zero norm");
    norms[i] = std::sqrt(s + kNormEpsilon);
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] = in[i * C + j] / norms[i];
  }
  Tensor y = Tensor::from_data({R, C}, std::move(out));
  if (detail::tracking({&x})) {
    auto px = x.impl();
    tape().record(y, [px, norms = std::move(norms), R, C](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto& gx = detail::grad_of(*px);
      const auto& in = px->data;
      for (std::size_t i = 0; i < R; ++i) {
        double gdotx = 0.0;
        for (std::size_t j = 0; j < C; ++j) gdotx += g[i * C + j] * in[i * C + j];
        const double n = norms[i], n3 = n * n * n;
        for (std::size_t j = 0; j < C; ++j) gx[i * C + j] += g[i * C + j] / n - in[i * C + j] * gdotx / n3;
      }
    });
  }
  return y;
}

// out[i][j] = cos(p_i, q_j).
inline Tensor cosine_similarity_matrix(const Tensor& p, const Tensor& q) {
  detail::require_rank2(p, "cosine_similarity_matrix");
  detail::require_rank2(q, "cosine_similarity_matrix");
  if (p.cols() != q.cols())
    throw ShapeError("cosine_similarity_matrix: " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  return matmul(l2_normalize_rows(p), transpose(l2_normalize_rows(q)));
}

// Row argmax with ties resolved to the lowest column.
inline std::vector<std::size_t> argmax_rows(const Tensor& v) {
  detail::require_rank2(v, "argmax_rows");
  const std::size_t R = v.rows(), C = v.cols();
  std::vector<std::size_t> out(R, 0);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 1; j < C; ++j)
      if (v.data()[i * C + j] > v.data()[i * C + out[i]]) out[i] = j;
  return out;
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace d3gzsl

#include "pairmeas/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace pairmeas {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace {

void check_shape_valid(const Shape& s) {
  for (auto d : s)
    if (d <= 0) throw TensorError("non-positive dimension in shape " + shape_str(s));
}

template <typename T>
void debug_check_finite(const TensorNode<T>& n, const char* op) {
#ifndef NDEBUG
  for (T v : n.value) {
    if (!std::isfinite(static_cast<double>(v)))
      throw TensorError(std::string("non-finite value produced by ") + op);
  }
#else
  (void)n;
  (void)op;
#endif
}

struct ConvGeom {
  std::int64_t out_h, out_w, pad_h, pad_w;
};

ConvGeom conv_geometry(std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
                       int stride, Pad pad) {
  ConvGeom g{};
  if (pad == Pad::same_zero) {
    g.out_h = (H + stride - 1) / stride;
    g.out_w = (W + stride - 1) / stride;
    g.pad_h = std::max<std::int64_t>((g.out_h - 1) * stride + kh - H, 0) / 2;
    g.pad_w = std::max<std::int64_t>((g.out_w - 1) * stride + kw - W, 0) / 2;
  } else {
    if (kh > H || kw > W)
      throw TensorError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                        " larger than input " + std::to_string(H) + "x" + std::to_string(W));
    g.out_h = (H - kh) / stride + 1;
    g.out_w = (W - kw) / stride + 1;
    g.pad_h = g.pad_w = 0;
  }
  return g;
}

// right-aligned numpy broadcasting
Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw TensorError("shapes not broadcast-compatible: " + shape_str(a) + " vs " +
                        shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// strides of `shape` expanded to `out` rank, 0 where broadcast
std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::int64_t> st(out.size(), 0);
  std::int64_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    std::size_t oi = i + out.size() - shape.size();
    st[oi] = shape[i] == 1 ? 0 : acc;
    acc *= shape[i];
  }
  for (std::size_t i = 0; i < out.size() - shape.size(); ++i) st[i] = 0;
  // re-mark broadcast dims (where out > shape dim of 1 already handled)
  for (std::size_t i = out.size() - shape.size(); i < out.size(); ++i) {
    if (shape[i - (out.size() - shape.size())] == 1 && out[i] != 1) st[i] = 0;
  }
  return st;
}

// odometer loop over `out` applying f(flat_out, off_a, off_b)
template <typename F>
void broadcast_iterate(const Shape& out, const std::vector<std::int64_t>& sa,
                       const std::vector<std::int64_t>& sb, F&& f) {
  std::int64_t n = shape_numel(out);
  std::size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t flat = 0; flat < n; ++flat) {
    f(flat, oa, ob);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

// ---------------- Tensor ----------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  check_shape_valid(shape);
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<std::size_t>(shape_numel(n->shape)), T(0));
  n->requires_grad = requires_grad;
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.n_->value.begin(), t.n_->value.end(), fill);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  check_shape_valid(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw TensorError("value count " + std::to_string(values.size()) +
                      " does not match shape " + shape_str(shape));
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v) {
  return from({}, {v});
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, T stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.n_->value) v = static_cast<T>(rng.normal()) * stddev;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::rand_uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.n_->value) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  const auto& n = node();
  if (n.grad.empty()) throw TensorError("tensor has no gradient");
  return n.grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  ensure_grad();
  return node().grad;
}

template <typename T>
void Tensor<T>::ensure_grad() {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& n = node();
  std::fill(n.grad.begin(), n.grad.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (!is_scalar()) throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
  return node().value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> idx) const {
  const auto& n = node();
  if (idx.size() != n.shape.size()) throw TensorError("index rank mismatch");
  std::int64_t off = 0, stride = 1;
  std::size_t i = n.shape.size();
  std::vector<std::int64_t> ix(idx);
  while (i-- > 0) {
    if (ix[i] < 0 || ix[i] >= n.shape[i]) throw TensorError("index out of range");
    off += ix[i] * stride;
    stride *= n.shape[i];
  }
  return n.value[static_cast<std::size_t>(off)];
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return Tensor::from(shape(), std::vector<T>(node().value), requires_grad);
}

// ---------------- Tape ----------------

namespace {
template <typename T>
Tape<T>*& active_tape_slot() {
  static thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace

template <typename T>
Tape<T>::Tape() {
  prev_ = active_tape_slot<T>();
  active_tape_slot<T>() = this;
}

template <typename T>
Tape<T>::~Tape() {
  active_tape_slot<T>() = prev_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape_slot<T>();
}

template <typename T>
void Tape<T>::record(std::function<void()> backward_fn) {
  ops_.push_back(std::move(backward_fn));
}

template <typename T>
void Tape<T>::replay_backward() {
  for (std::size_t i = ops_.size(); i-- > 0;) ops_[i]();
}

namespace {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (auto* t : inputs)
    if (t && t->requires_grad()) return true;
  return false;
}

template <typename T>
void record_op(Tensor<T>& out, std::function<void()> bw) {
  out.set_requires_grad(true);
  Tape<T>::active()->record(std::move(bw));
}

}  // namespace

// ---------------- elementwise ----------------

namespace {

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> binary_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* name, FwdFn fwd,
                           BwdFn bwd) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* po = out.mutable_values().data();
  if (a.shape() == b.shape()) {
    std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    broadcast_iterate(os, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      po[o] = fwd(pa[ia], pb[ib]);
    });
  }
  debug_check_finite(out.node(), name);
  if (should_record<T>({&a, &b})) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    auto on = out.node_ptr();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    Shape osc = os;
    record_op(out, [an, bn, on, ga, gb, osc, bwd]() {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      if (ga && an->grad.empty()) an->grad.assign(an->value.size(), T(0));
      if (gb && bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
      if (an->shape == bn->shape) {
        std::int64_t n = static_cast<std::int64_t>(on->value.size());
        for (std::int64_t i = 0; i < n; ++i) {
          T da, db;
          bwd(an->value[i], bn->value[i], g[i], da, db);
          if (ga) an->grad[i] += da;
          if (gb) bn->grad[i] += db;
        }
      } else {
        auto sa = broadcast_strides(an->shape, osc);
        auto sb = broadcast_strides(bn->shape, osc);
        broadcast_iterate(osc, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
          T da, db;
          bwd(an->value[ia], bn->value[ib], g[o], da, db);
          if (ga) an->grad[ia] += da;
          if (gb) bn->grad[ib] += db;
        });
      }
    });
  }
  return out;
}

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(const Tensor<T>& a, const char* name, FwdFn fwd, BwdFn bwd) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.values().data();
  T* po = out.mutable_values().data();
  std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  debug_check_finite(out.node(), name);
  if (should_record<T>({&a})) {
    auto an = a.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [an, on, bwd]() {
      if (on->grad.empty()) return;
      if (an->grad.empty()) an->grad.assign(an->value.size(), T(0));
      std::int64_t n2 = static_cast<std::int64_t>(an->value.size());
      for (std::int64_t i = 0; i < n2; ++i)
        an->grad[i] += bwd(an->value[i], on->grad[i]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = g;
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = -g;
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g * y;
        db = g * x;
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return unary_op(
      a, "scale", [c](T x) { return x * c; }, [c](T, T g) { return g * c; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  // subgradient 0 at 0
  return unary_op(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T g) { return x > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(
      a, "square", [](T x) { return x * x; }, [](T x, T g) { return g * T(2) * x; });
}

template <typename T>
Tensor<T> abs_t(const Tensor<T>& a) {
  // subgradient 0 at 0
  return unary_op(
      a, "abs", [](T x) { return x < T(0) ? -x : x; },
      [](T x, T g) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

template <typename T>
Tensor<T> elementwise(EwKind kind, const Tensor<T>& a, const Tensor<T>* b) {
  switch (kind) {
    case EwKind::add:
    case EwKind::sub:
    case EwKind::mul:
      if (!b) throw TensorError("elementwise: binary kind needs two operands");
      if (kind == EwKind::add) return add(a, *b);
      if (kind == EwKind::sub) return sub(a, *b);
      return mul(a, *b);
    case EwKind::relu:
      return relu(a);
    case EwKind::square:
      return square(a);
    case EwKind::abs:
      return abs_t(a);
  }
  throw TensorError("elementwise: unknown kind");
}

// ---------------- matmul ----------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw TensorError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw TensorError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros({m, n});
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* po = out.mutable_values().data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t l = 0; l < k; ++l) {
      T av = pa[i * k + l];
      const T* brow = pb + l * n;
      T* orow = po + i * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  debug_check_finite(out.node(), "matmul");
  if (should_record<T>({&a, &b})) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    auto on = out.node_ptr();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    record_op(out, [an, bn, on, ga, gb, m, k, n]() {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      if (ga) {
        if (an->grad.empty()) an->grad.assign(an->value.size(), T(0));
        // dA = G B^T
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t l = 0; l < k; ++l) {
            T acc = 0;
            const T* gr = g + i * n;
            const T* br = bn->value.data() + l * n;
            for (std::int64_t j = 0; j < n; ++j) acc += gr[j] * br[j];
            an->grad[i * k + l] += acc;
          }
      }
      if (gb) {
        if (bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
        // dB = A^T G
        for (std::int64_t l = 0; l < k; ++l)
          for (std::int64_t i = 0; i < m; ++i) {
            T av = an->value[i * k + l];
            const T* gr = g + i * n;
            T* dr = bn->grad.data() + l * n;
            for (std::int64_t j = 0; j < n; ++j) dr[j] += av * gr[j];
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw TensorError("transpose2d expects rank-2 tensor");
  std::int64_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({n, m});
  const T* pa = a.values().data();
  T* po = out.mutable_values().data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  if (should_record<T>({&a})) {
    auto an = a.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [an, on, m, n]() {
      if (on->grad.empty()) return;
      if (an->grad.empty()) an->grad.assign(an->value.size(), T(0));
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
    });
  }
  return out;
}

// ---------------- conv2d ----------------

namespace {

struct ConvShapes {
  std::int64_t B, CI, H, W, CO, KH, KW, OH, OW, PH, PW;
  bool batched;
};

template <typename T>
ConvShapes conv_check(const Tensor<T>& x, const Tensor<T>& k, int stride, Pad pad,
                      const char* who) {
  if (stride < 1) throw TensorError(std::string(who) + ": stride must be >= 1");
  if (x.rank() != 3 && x.rank() != 4)
    throw TensorError(std::string(who) + ": input must be [C,H,W] or [B,C,H,W], got " +
                      shape_str(x.shape()));
  if (k.rank() != 4)
    throw TensorError(std::string(who) + ": kernel must be rank 4, got " +
                      shape_str(k.shape()));
  ConvShapes s{};
  s.batched = x.rank() == 4;
  s.B = s.batched ? x.dim(0) : 1;
  s.CI = x.dim(s.batched ? 1 : 0);
  s.H = x.dim(s.batched ? 2 : 1);
  s.W = x.dim(s.batched ? 3 : 2);
  s.CO = k.dim(0);
  s.KH = k.dim(2);
  s.KW = k.dim(3);
  auto g = conv_geometry(s.H, s.W, s.KH, s.KW, stride, pad);
  s.OH = g.out_h;
  s.OW = g.out_w;
  s.PH = g.pad_h;
  s.PW = g.pad_w;
  return s;
}

// The layers this library builds are channel-heavy with small spatial extent,
// so all three conv kernels contract over a contiguous [CI*KH*KW] axis via an
// im2col scratch rather than looping tiny image rows.

template <typename T>
T simd_dot(const T* a, const T* b, std::int64_t n) {
  T acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) acc[u] += a[i + u] * b[i + u];
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy(T a, const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
std::vector<T>& conv_scratch(std::size_t n) {
  static thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// col[oh*OW+ow, (ci*KH+kh)*KW+kw] = x[ci, oh*stride+kh-PH, ow*stride+kw-PW] or 0
template <typename T>
void im2col(const T* xc, T* col, const ConvShapes& s, int stride) {
  const std::int64_t K = s.CI * s.KH * s.KW;
  for (std::int64_t oh = 0; oh < s.OH; ++oh)
    for (std::int64_t ow = 0; ow < s.OW; ++ow) {
      T* row = col + (oh * s.OW + ow) * K;
      const std::int64_t iw0 = ow * stride - s.PW;
      for (std::int64_t ci = 0; ci < s.CI; ++ci) {
        const T* xci = xc + ci * s.H * s.W;
        for (std::int64_t kh = 0; kh < s.KH; ++kh) {
          const std::int64_t ih = oh * stride + kh - s.PH;
          T* dst = row + (ci * s.KH + kh) * s.KW;
          if (ih < 0 || ih >= s.H) {
            for (std::int64_t kw = 0; kw < s.KW; ++kw) dst[kw] = T(0);
            continue;
          }
          const T* xrow = xci + ih * s.W;
          for (std::int64_t kw = 0; kw < s.KW; ++kw) {
            const std::int64_t iw = iw0 + kw;
            dst[kw] = (iw >= 0 && iw < s.W) ? xrow[iw] : T(0);
          }
        }
      }
    }
}

// the additive inverse of im2col's gather: out-of-range taps are dropped
template <typename T>
void col2im_add(const T* col, T* xc, const ConvShapes& s, int stride) {
  const std::int64_t K = s.CI * s.KH * s.KW;
  for (std::int64_t oh = 0; oh < s.OH; ++oh)
    for (std::int64_t ow = 0; ow < s.OW; ++ow) {
      const T* row = col + (oh * s.OW + ow) * K;
      const std::int64_t iw0 = ow * stride - s.PW;
      for (std::int64_t ci = 0; ci < s.CI; ++ci) {
        T* xci = xc + ci * s.H * s.W;
        for (std::int64_t kh = 0; kh < s.KH; ++kh) {
          const std::int64_t ih = oh * stride + kh - s.PH;
          if (ih < 0 || ih >= s.H) continue;
          const T* src = row + (ci * s.KH + kh) * s.KW;
          T* xrow = xci + ih * s.W;
          for (std::int64_t kw = 0; kw < s.KW; ++kw) {
            const std::int64_t iw = iw0 + kw;
            if (iw >= 0 && iw < s.W) xrow[iw] += src[kw];
          }
        }
      }
    }
}

// out[b,co,oh,ow] += sum_{ci,kh,kw} x[b,ci,oh*s+kh-ph, ow*s+kw-pw] * k[co,ci,kh,kw]
template <typename T>
void conv_forward_kernel(const T* x, const T* k, T* out, const ConvShapes& s, int stride) {
  const std::int64_t K = s.CI * s.KH * s.KW, N = s.OH * s.OW;
  T* col = conv_scratch<T>(static_cast<std::size_t>(N * K)).data();
  for (std::int64_t b = 0; b < s.B; ++b) {
    im2col(x + b * s.CI * s.H * s.W, col, s, stride);
    for (std::int64_t co = 0; co < s.CO; ++co) {
      T* orow = out + (b * s.CO + co) * N;
      const T* krow = k + co * K;
      for (std::int64_t pix = 0; pix < N; ++pix)
        orow[pix] += simd_dot(krow, col + pix * K, K);
    }
  }
}

// gin[b,ci,ih,iw] += sum_{co,kh,kw} gout[b,co,oh,ow] * k[co,ci,kh,kw]
template <typename T>
void conv_backward_input_kernel(const T* gout, const T* k, T* gin, const ConvShapes& s,
                                int stride) {
  const std::int64_t K = s.CI * s.KH * s.KW, N = s.OH * s.OW;
  std::vector<T> colg(static_cast<std::size_t>(N * K));
  for (std::int64_t b = 0; b < s.B; ++b) {
    std::fill(colg.begin(), colg.end(), T(0));
    for (std::int64_t co = 0; co < s.CO; ++co) {
      const T* grow = gout + (b * s.CO + co) * N;
      const T* krow = k + co * K;
      for (std::int64_t pix = 0; pix < N; ++pix)
        if (grow[pix] != T(0)) axpy(grow[pix], krow, colg.data() + pix * K, K);
    }
    col2im_add(colg.data(), gin + b * s.CI * s.H * s.W, s, stride);
  }
}

// gk[co,ci,kh,kw] += sum_{b,oh,ow} gout[b,co,oh,ow] * x[b,ci,ih,iw]
template <typename T>
void conv_backward_kernel_kernel(const T* gout, const T* x, T* gk, const ConvShapes& s,
                                 int stride) {
  const std::int64_t K = s.CI * s.KH * s.KW, N = s.OH * s.OW;
  T* col = conv_scratch<T>(static_cast<std::size_t>(N * K)).data();
  for (std::int64_t b = 0; b < s.B; ++b) {
    im2col(x + b * s.CI * s.H * s.W, col, s, stride);
    for (std::int64_t co = 0; co < s.CO; ++co) {
      const T* grow = gout + (b * s.CO + co) * N;
      T* krow = gk + co * K;
      for (std::int64_t pix = 0; pix < N; ++pix)
        if (grow[pix] != T(0)) axpy(grow[pix], col + pix * K, krow, K);
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, Pad pad) {
  ConvShapes s = conv_check(x, k, stride, pad, "conv2d");
  if (k.dim(1) != s.CI)
    throw TensorError("conv2d: kernel expects " + std::to_string(k.dim(1)) +
                      " input channels, input has " + std::to_string(s.CI));
  Shape os = s.batched ? Shape{s.B, s.CO, s.OH, s.OW} : Shape{s.CO, s.OH, s.OW};
  Tensor<T> out = Tensor<T>::zeros(os);
  conv_forward_kernel(x.values().data(), k.values().data(), out.mutable_values().data(), s,
                      stride);
  debug_check_finite(out.node(), "conv2d");
  if (should_record<T>({&x, &k})) {
    auto xn = x.node_ptr();
    auto kn = k.node_ptr();
    auto on = out.node_ptr();
    bool gx = x.requires_grad(), gk = k.requires_grad();
    record_op(out, [xn, kn, on, gx, gk, s, stride]() {
      if (on->grad.empty()) return;
      if (gx) {
        if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
        conv_backward_input_kernel(on->grad.data(), kn->value.data(), xn->grad.data(), s,
                                   stride);
      }
      if (gk) {
        if (kn->grad.empty()) kn->grad.assign(kn->value.size(), T(0));
        conv_backward_kernel_kernel(on->grad.data(), xn->value.data(), kn->grad.data(), s,
                                    stride);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& k, int stride, Pad pad,
                           std::int64_t out_h, std::int64_t out_w) {
  // x plays the role of the conv output; `out` the conv input
  if (x.rank() != 3 && x.rank() != 4)
    throw TensorError("conv2d_transpose: input must be [A,H,W] or [B,A,H,W]");
  if (k.rank() != 4) throw TensorError("conv2d_transpose: kernel must be rank 4");
  bool batched = x.rank() == 4;
  std::int64_t B = batched ? x.dim(0) : 1;
  std::int64_t A = x.dim(batched ? 1 : 0);
  std::int64_t H = x.dim(batched ? 2 : 1);
  std::int64_t W = x.dim(batched ? 3 : 2);
  if (k.dim(0) != A)
    throw TensorError("conv2d_transpose: kernel dim 0 (" + std::to_string(k.dim(0)) +
                      ") must match input channels (" + std::to_string(A) + ")");
  std::int64_t CB = k.dim(1), KH = k.dim(2), KW = k.dim(3);
  if (out_h < 0) out_h = pad == Pad::same_zero ? H * stride : (H - 1) * stride + KH;
  if (out_w < 0) out_w = pad == Pad::same_zero ? W * stride : (W - 1) * stride + KW;
  auto g = conv_geometry(out_h, out_w, KH, KW, stride, pad);
  if (g.out_h != H || g.out_w != W)
    throw TensorError("conv2d_transpose: target size " + std::to_string(out_h) + "x" +
                      std::to_string(out_w) + " is not consistent with input " +
                      std::to_string(H) + "x" + std::to_string(W) + " under this geometry");

  // reuse the conv kernels with roles swapped: the transpose output is the
  // conv input side
  ConvShapes s{};
  s.B = B;
  s.CI = CB;
  s.H = out_h;
  s.W = out_w;
  s.CO = A;
  s.KH = KH;
  s.KW = KW;
  s.OH = H;
  s.OW = W;
  s.PH = g.pad_h;
  s.PW = g.pad_w;
  s.batched = batched;

  Shape os = batched ? Shape{B, CB, out_h, out_w} : Shape{CB, out_h, out_w};
  Tensor<T> out = Tensor<T>::zeros(os);
  // forward of transpose == backward-input of conv (x acts as gout)
  conv_backward_input_kernel(x.values().data(), k.values().data(),
                             out.mutable_values().data(), s, stride);
  debug_check_finite(out.node(), "conv2d_transpose");
  if (should_record<T>({&x, &k})) {
    auto xn = x.node_ptr();
    auto kn = k.node_ptr();
    auto on = out.node_ptr();
    bool gx = x.requires_grad(), gk = k.requires_grad();
    record_op(out, [xn, kn, on, gx, gk, s, stride]() {
      if (on->grad.empty()) return;
      if (gx) {
        if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
        // adjoint of scatter is the plain conv gather
        conv_forward_kernel(on->grad.data(), kn->value.data(), xn->grad.data(), s, stride);
      }
      if (gk) {
        if (kn->grad.empty()) kn->grad.assign(kn->value.size(), T(0));
        conv_backward_kernel_kernel(xn->value.data(), on->grad.data(), kn->grad.data(), s,
                                    stride);
      }
    });
  }
  return out;
}

// ---------------- spatial softmax ----------------

template <typename T>
Tensor<T> spatial_softmax(const Tensor<T>& x) {
  if (x.rank() != 2) throw TensorError("spatial_softmax expects [kh,kw]");
  std::int64_t n = x.numel();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.values().data();
  T* po = out.mutable_values().data();
  T mx = px[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, px[i]);
  T s = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    po[i] = std::exp(px[i] - mx);
    s += po[i];
  }
  for (std::int64_t i = 0; i < n; ++i) po[i] /= s;
  debug_check_finite(out.node(), "spatial_softmax");
  if (should_record<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [xn, on, n]() {
      if (on->grad.empty()) return;
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      const T* sv = on->value.data();
      const T* g = on->grad.data();
      T dot = 0;
      for (std::int64_t i = 0; i < n; ++i) dot += g[i] * sv[i];
      for (std::int64_t i = 0; i < n; ++i) xn->grad[i] += sv[i] * (g[i] - dot);
    });
  }
  return out;
}

// ---------------- shape ops ----------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw TensorError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                      shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::vector<T>(x.values().begin(),
                                                                   x.values().end()));
  if (should_record<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [xn, on]() {
      if (on->grad.empty()) return;
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw TensorError("concat: no parts");
  const Shape& s0 = parts[0].shape();
  int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw TensorError("concat: bad axis");
  Shape os = s0;
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Shape& sp = parts[p].shape();
    if (static_cast<int>(sp.size()) != r) throw TensorError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && sp[d] != s0[d])
        throw TensorError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(sp));
    os[axis] += sp[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < r; ++d) inner *= s0[d];
  Tensor<T> out = Tensor<T>::zeros(os);
  T* po = out.mutable_values().data();
  std::int64_t oa = os[axis];
  std::int64_t off_axis = 0;
  bool rec = false;
  for (const auto& p : parts)
    if (p.requires_grad()) rec = true;
  rec = rec && Tape<T>::active() != nullptr;
  struct Piece {
    std::shared_ptr<TensorNode<T>> node;
    std::int64_t axis_off, axis_len;
    bool needs;
  };
  std::vector<Piece> pieces;
  for (const auto& p : parts) {
    std::int64_t pa = p.dim(axis);
    const T* pp = p.values().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(po + (o * oa + off_axis) * inner, pp + o * pa * inner,
                  static_cast<std::size_t>(pa * inner) * sizeof(T));
    if (rec) pieces.push_back({p.node_ptr(), off_axis, pa, p.requires_grad()});
    off_axis += pa;
  }
  if (rec) {
    auto on = out.node_ptr();
    record_op(out, [on, pieces, outer, inner, oa]() {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      for (const auto& pc : pieces) {
        if (!pc.needs) continue;
        if (pc.node->grad.empty()) pc.node->grad.assign(pc.node->value.size(), T(0));
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* gsrc = g + (o * oa + pc.axis_off) * inner;
          T* gdst = pc.node->grad.data() + o * pc.axis_len * inner;
          for (std::int64_t i = 0; i < pc.axis_len * inner; ++i) gdst[i] += gsrc[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len) {
  int r = x.rank();
  if (axis < 0 || axis >= r) throw TensorError("narrow: bad axis");
  if (start < 0 || len <= 0 || start + len > x.dim(axis))
    throw TensorError("narrow: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") outside dim " +
                      std::to_string(x.dim(axis)));
  Shape os = x.shape();
  os[axis] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
  std::int64_t xa = x.dim(axis);
  Tensor<T> out = Tensor<T>::zeros(os);
  T* po = out.mutable_values().data();
  const T* px = x.values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(po + o * len * inner, px + (o * xa + start) * inner,
                static_cast<std::size_t>(len * inner) * sizeof(T));
  if (should_record<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [xn, on, outer, inner, xa, start, len]() {
      if (on->grad.empty()) return;
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      const T* g = on->grad.data();
      for (std::int64_t o = 0; o < outer; ++o) {
        T* gdst = xn->grad.data() + (o * xa + start) * inner;
        const T* gsrc = g + o * len * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) gdst[i] += gsrc[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::int64_t>& rows) {
  if (x.rank() < 1) throw TensorError("take_rows: rank-0 input");
  std::int64_t n = x.dim(0);
  std::int64_t inner = x.numel() / n;
  for (auto r : rows)
    if (r < 0 || r >= n) throw TensorError("take_rows: row index out of range");
  Shape os = x.shape();
  os[0] = static_cast<std::int64_t>(rows.size());
  if (rows.empty()) throw TensorError("take_rows: empty selection");
  Tensor<T> out = Tensor<T>::zeros(os);
  T* po = out.mutable_values().data();
  const T* px = x.values().data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::memcpy(po + static_cast<std::int64_t>(i) * inner, px + rows[i] * inner,
                static_cast<std::size_t>(inner) * sizeof(T));
  if (should_record<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    auto rws = rows;
    record_op(out, [xn, on, rws, inner]() {
      if (on->grad.empty()) return;
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      const T* g = on->grad.data();
      for (std::size_t i = 0; i < rws.size(); ++i) {
        T* gdst = xn->grad.data() + rws[i] * inner;
        const T* gsrc = g + static_cast<std::int64_t>(i) * inner;
        for (std::int64_t j = 0; j < inner; ++j) gdst[j] += gsrc[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pad_wrap(const Tensor<T>& x, int ph, int pw) {
  if (x.rank() < 2) throw TensorError("pad_wrap: need at least 2 dims");
  int r = x.rank();
  std::int64_t H = x.dim(r - 2), W = x.dim(r - 1);
  if (ph < 0 || pw < 0 || ph >= H || pw >= W)
    throw TensorError("pad_wrap: pad must be in [0, dim)");
  Shape os = x.shape();
  os[r - 2] = H + 2 * ph;
  os[r - 1] = W + 2 * pw;
  std::int64_t planes = x.numel() / (H * W);
  std::int64_t OH = H + 2 * ph, OW = W + 2 * pw;
  Tensor<T> out = Tensor<T>::zeros(os);
  T* po = out.mutable_values().data();
  const T* px = x.values().data();
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t i = 0; i < OH; ++i) {
      std::int64_t si = ((i - ph) % H + H) % H;
      for (std::int64_t j = 0; j < OW; ++j) {
        std::int64_t sj = ((j - pw) % W + W) % W;
        po[(p * OH + i) * OW + j] = px[(p * H + si) * W + sj];
      }
    }
  if (should_record<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [xn, on, planes, H, W, OH, OW, ph, pw]() {
      if (on->grad.empty()) return;
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      const T* g = on->grad.data();
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < OH; ++i) {
          std::int64_t si = ((i - ph) % H + H) % H;
          for (std::int64_t j = 0; j < OW; ++j) {
            std::int64_t sj = ((j - pw) % W + W) % W;
            xn->grad[(p * H + si) * W + sj] += g[(p * OH + i) * OW + j];
          }
        }
    });
  }
  return out;
}

// ---------------- patch ops ----------------

namespace {
void patch_check(std::int64_t H, std::int64_t W, int oy, int ox, int gh, int gw, int p,
                 const char* who) {
  if (p <= 0 || gh <= 0 || gw <= 0) throw TensorError(std::string(who) + ": bad grid");
  if (oy < 0 || ox < 0 || oy + static_cast<std::int64_t>(gh) * p > H ||
      ox + static_cast<std::int64_t>(gw) * p > W)
    throw TensorError(std::string(who) + ": grid exceeds canvas " + std::to_string(H) + "x" +
                      std::to_string(W));
}
}  // namespace

template <typename T>
Tensor<T> patch_gather(const Tensor<T>& canvas, int oy, int ox, int gh, int gw, int p) {
  if (canvas.rank() != 2) throw TensorError("patch_gather expects [H,W] canvas");
  std::int64_t H = canvas.dim(0), W = canvas.dim(1);
  patch_check(H, W, oy, ox, gh, gw, p, "patch_gather");
  Tensor<T> out = Tensor<T>::zeros({static_cast<std::int64_t>(gh) * gw, p, p});
  T* po = out.mutable_values().data();
  const T* pc = canvas.values().data();
  for (int gi = 0; gi < gh; ++gi)
    for (int gj = 0; gj < gw; ++gj) {
      T* patch = po + (static_cast<std::int64_t>(gi) * gw + gj) * p * p;
      for (int r = 0; r < p; ++r)
        std::memcpy(patch + static_cast<std::int64_t>(r) * p,
                    pc + (oy + static_cast<std::int64_t>(gi) * p + r) * W + ox +
                        static_cast<std::int64_t>(gj) * p,
                    static_cast<std::size_t>(p) * sizeof(T));
    }
  if (should_record<T>({&canvas})) {
    auto cn = canvas.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [cn, on, W, oy, ox, gh, gw, p]() {
      if (on->grad.empty()) return;
      if (cn->grad.empty()) cn->grad.assign(cn->value.size(), T(0));
      const T* g = on->grad.data();
      for (int gi = 0; gi < gh; ++gi)
        for (int gj = 0; gj < gw; ++gj) {
          const T* patch = g + (static_cast<std::int64_t>(gi) * gw + gj) * p * p;
          for (int r = 0; r < p; ++r) {
            T* dst = cn->grad.data() +
                     (oy + static_cast<std::int64_t>(gi) * p + r) * W + ox +
                     static_cast<std::int64_t>(gj) * p;
            for (int c = 0; c < p; ++c) dst[c] += patch[static_cast<std::int64_t>(r) * p + c];
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> patch_scatter(const Tensor<T>& patches, std::int64_t H, std::int64_t W, int oy,
                        int ox, int gh, int gw, int p) {
  if (patches.rank() != 3 || patches.dim(1) != p || patches.dim(2) != p ||
      patches.dim(0) != static_cast<std::int64_t>(gh) * gw)
    throw TensorError("patch_scatter expects [" + std::to_string(gh * gw) + "," +
                      std::to_string(p) + "," + std::to_string(p) + "], got " +
                      shape_str(patches.shape()));
  patch_check(H, W, oy, ox, gh, gw, p, "patch_scatter");
  Tensor<T> out = Tensor<T>::zeros({H, W});
  T* po = out.mutable_values().data();
  const T* pp = patches.values().data();
  for (int gi = 0; gi < gh; ++gi)
    for (int gj = 0; gj < gw; ++gj) {
      const T* patch = pp + (static_cast<std::int64_t>(gi) * gw + gj) * p * p;
      for (int r = 0; r < p; ++r)
        std::memcpy(po + (oy + static_cast<std::int64_t>(gi) * p + r) * W + ox +
                        static_cast<std::int64_t>(gj) * p,
                    patch + static_cast<std::int64_t>(r) * p,
                    static_cast<std::size_t>(p) * sizeof(T));
    }
  if (should_record<T>({&patches})) {
    auto pn = patches.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [pn, on, W, oy, ox, gh, gw, p]() {
      if (on->grad.empty()) return;
      if (pn->grad.empty()) pn->grad.assign(pn->value.size(), T(0));
      const T* g = on->grad.data();
      for (int gi = 0; gi < gh; ++gi)
        for (int gj = 0; gj < gw; ++gj) {
          T* patch = pn->grad.data() + (static_cast<std::int64_t>(gi) * gw + gj) * p * p;
          for (int r = 0; r < p; ++r) {
            const T* src = g + (oy + static_cast<std::int64_t>(gi) * p + r) * W + ox +
                           static_cast<std::int64_t>(gj) * p;
            for (int c = 0; c < p; ++c) patch[static_cast<std::int64_t>(r) * p + c] += src[c];
          }
        }
    });
  }
  return out;
}

// ---------------- reductions ----------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (should_record<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [xn, on]() {
      if (on->grad.empty()) return;
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      T g = on->grad[0];
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  std::int64_t n = x.numel();
  T acc = 0;
  for (T v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (should_record<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    record_op(out, [xn, on, n]() {
      if (on->grad.empty()) return;
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), T(0));
      T g = on->grad[0] / static_cast<T>(n);
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return out;
}

// ---------------- autodiff control ----------------

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>::from(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.is_scalar())
    throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw TensorError("backward: no active tape");
  auto node = loss.node_ptr();
  if (node->grad.empty()) node->grad.assign(1, T(0));
  node->grad[0] += T(1);
  tape->replay_backward();
}

template <typename T>
Tensor<T> flip180(const Tensor<T>& k) {
  if (k.rank() != 2) throw TensorError("flip180 expects [kh,kw]");
  std::int64_t h = k.dim(0), w = k.dim(1);
  Tensor<T> out = Tensor<T>::zeros(k.shape());
  const T* pk = k.values().data();
  T* po = out.mutable_values().data();
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) po[(h - 1 - i) * w + (w - 1 - j)] = pk[i * w + j];
  return out;
}

// ---------------- instantiations ----------------

#define PAIRMEAS_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                  \
  template class Tape<T>;                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> square(const Tensor<T>&);                                               \
  template Tensor<T> abs_t(const Tensor<T>&);                                                \
  template Tensor<T> elementwise(EwKind, const Tensor<T>&, const Tensor<T>*);                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose2d(const Tensor<T>&);                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, Pad);                   \
  template Tensor<T> conv2d_transpose(const Tensor<T>&, const Tensor<T>&, int, Pad,          \
                                      std::int64_t, std::int64_t);                           \
  template Tensor<T> spatial_softmax(const Tensor<T>&);                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                             \
  template Tensor<T> narrow(const Tensor<T>&, int, std::int64_t, std::int64_t);              \
  template Tensor<T> take_rows(const Tensor<T>&, const std::vector<std::int64_t>&);          \
  template Tensor<T> pad_wrap(const Tensor<T>&, int, int);                                   \
  template Tensor<T> patch_gather(const Tensor<T>&, int, int, int, int, int);                \
  template Tensor<T> patch_scatter(const Tensor<T>&, std::int64_t, std::int64_t, int, int,   \
                                   int, int, int);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                        \
  template void backward(const Tensor<T>&);                                                  \
  template Tensor<T> flip180(const Tensor<T>&);

PAIRMEAS_INSTANTIATE(float)
PAIRMEAS_INSTANTIATE(double)

#undef PAIRMEAS_INSTANTIATE

}  // namespace pairmeas

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pairmeas/rng.hpp"

namespace pairmeas {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily, same length as value
  bool requires_grad = false;
};

// Value-semantics handle to a dense tensor. Copies share the node; all
// documented operations build fresh nodes, so a tensor's contents never
// change after creation except through mutable_values() (optimizer updates,
// which happen outside any tape).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T v);
  // i.i.d. N(0, stddev^2)
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false);
  // i.i.d. U(lo, hi)
  static Tensor rand_uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int rank() const { return static_cast<int>(node().shape.size()); }
  std::int64_t dim(int i) const { return node().shape.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node().value.size()); }
  bool is_scalar() const { return numel() == 1; }

  std::span<const T> values() const { return node().value; }
  // direct write access; callers must not mutate tensors that participate in
  // an active tape
  std::span<T> mutable_values() { return node().value; }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node().requires_grad = b;
    return *this;
  }

  bool has_grad() const { return n_ && !n_->grad.empty(); }
  std::span<const T> grad() const;
  std::span<T> grad_mut();
  void ensure_grad();
  void zero_grad();

  T item() const;

  T at(std::initializer_list<std::int64_t> idx) const;

  // deep copy of values into a new detached node
  Tensor clone(bool requires_grad = false) const;

  std::shared_ptr<TensorNode<T>>& node_ptr() { return n_; }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return n_; }
  TensorNode<T>& node() {
    if (!n_) throw TensorError("use of undefined tensor");
    return *n_;
  }
  const TensorNode<T>& node() const {
    if (!n_) throw TensorError("use of undefined tensor");
    return *n_;
  }

  bool same_node(const Tensor& other) const { return n_ == other.n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Recording tape for reverse-mode differentiation. One tape is active per
// thread at a time; operations whose output requires grad push a backward
// closure, and backward() replays them in reverse recording order.
template <typename T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  void record(std::function<void()> backward_fn);
  void replay_backward();
  std::size_t size() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
  Tape* prev_ = nullptr;
};

enum class Pad { same_zero, valid };
enum class EwKind { add, sub, mul, relu, square, abs };

// ---- elementwise ----
// binary kinds broadcast numpy-style on right-aligned shapes
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T c);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> abs_t(const Tensor<T>& a);
template <typename T>
Tensor<T> elementwise(EwKind kind, const Tensor<T>& a, const Tensor<T>* b = nullptr);

// ---- linear algebra ----
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose2d(const Tensor<T>& a);

// ---- convolution ----
// Cross-correlation convention (no kernel flip). x is [C_in,H,W] or
// [B,C_in,H,W]; k is [C_out,C_in,kh,kw]. same_zero pads TF-style
// (out = ceil(in/stride), extra pad goes after); valid takes only full
// windows.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, Pad pad);

// Exact adjoint of conv2d with the same kernel/stride/padding: maps the
// conv output geometry back to an input of spatial size (out_h, out_w).
// x is [A,H,W] or [B,A,H,W]; k is [A,C_out,kh,kw]. Defaults: same_zero
// gives H*stride, valid gives (H-1)*stride + kh.
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& k, int stride, Pad pad,
                           std::int64_t out_h = -1, std::int64_t out_w = -1);

// softmax over all spatial positions of a [kh,kw] map, max-stabilized
template <typename T> Tensor<T> spatial_softmax(const Tensor<T>& x);

// ---- shape ops ----
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len);
template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::int64_t>& rows);
// wrap-around (periodic) padding of the two trailing spatial dims
template <typename T> Tensor<T> pad_wrap(const Tensor<T>& x, int ph, int pw);

// ---- patch grid ops (exact adjoints of each other) ----
// gather: canvas [H,W] -> [gh*gw, p, p], patches tile from (oy,ox)
template <typename T>
Tensor<T> patch_gather(const Tensor<T>& canvas, int oy, int ox, int gh, int gw, int p);
// scatter: patches [n,p,p] -> canvas [H,W]; zero outside the tiled region
template <typename T>
Tensor<T> patch_scatter(const Tensor<T>& patches, std::int64_t H, std::int64_t W, int oy,
                        int ox, int gh, int gw, int p);

// ---- reductions ----
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// ---- autodiff control ----
// detached copy of the value: downstream ops see a constant, so no gradient
// ever flows through this edge
template <typename T> Tensor<T> stop_gradient(const Tensor<T>& x);

// seeds d(loss)/d(loss) = 1 and replays the active tape
template <typename T> void backward(const Tensor<T>& loss);

// non-recorded value helpers
template <typename T> Tensor<T> flip180(const Tensor<T>& k);

}  // namespace pairmeas

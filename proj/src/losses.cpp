#include "pairmeas/losses.hpp"

#include <algorithm>
#include <string>

namespace pairmeas {

namespace {

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int margin) {
  if (margin == 0) return x;
  if (margin < 0) throw TensorError("crop margin must be nonnegative");
  int hr = x.rank() - 2, wr = x.rank() - 1;
  std::int64_t H = x.dim(hr), W = x.dim(wr);
  if (2 * margin >= H || 2 * margin >= W)
    throw TensorError("crop margin " + std::to_string(margin) + " leaves no pixels");
  return narrow(narrow(x, hr, margin, H - 2 * margin), wr, margin, W - 2 * margin);
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

// half-open range of partition-b grid indices whose patches lie fully inside
// the region tiled by partition a (1-D; rows and columns independently)
struct GridRange {
  std::int64_t lo = 0, hi = 0;
  bool empty() const { return lo >= hi; }
};

GridRange covered_range(std::int64_t off_a, std::int64_t n_a, std::int64_t off_b,
                        std::int64_t n_b, std::int64_t p) {
  GridRange r;
  r.lo = std::max<std::int64_t>(0, ceil_div(off_a - off_b, p));
  r.hi = std::min<std::int64_t>(n_b, floor_div(off_a + n_a * p - off_b, p));
  return r;
}

template <typename T>
void check_patch_grid(const Tensor<T>& f, const CompressivePatchOp<T>& op, std::int64_t H,
                      std::int64_t W, const char* who) {
  std::int64_t n = static_cast<std::int64_t>(op.grid_h(H)) * op.grid_w(W);
  std::int64_t p = op.patch_size();
  if (f.rank() != 3 || f.dim(0) != n || f.dim(1) != p || f.dim(2) != p)
    throw TensorError(std::string(who) + ": predicted patches " + shape_str(f.shape()) +
                      " do not match an " + std::to_string(n) + " patch grid of size " +
                      std::to_string(p));
}

// predictions of partition a assembled into a canvas, re-measured by
// partition b, compared against b's own measurements; element mean
template <typename T>
Tensor<T> cs_cross_term(const Tensor<T>& fa, const CompressivePatchOp<T>& a,
                        const CompressivePatchOp<T>& b, const Tensor<T>& yb, std::int64_t H,
                        std::int64_t W, Norm norm, bool& empty) {
  int p = a.patch_size();
  if (b.patch_size() != p) throw TensorError("swap: partitions disagree on patch size");
  int gh_a = a.grid_h(H), gw_a = a.grid_w(W);
  check_patch_grid(fa, a, H, W, "swap");
  GridRange gi = covered_range(a.dy(), gh_a, b.dy(), b.grid_h(H), p);
  GridRange gj = covered_range(a.dx(), gw_a, b.dx(), b.grid_w(W), p);
  if (gi.empty() || gj.empty()) {
    empty = true;
    return Tensor<T>();
  }
  empty = false;
  Tensor<T> canvas = patch_scatter(fa, H, W, a.dy(), a.dx(), gh_a, gw_a, p);
  Tensor<T> gathered =
      patch_gather(canvas, static_cast<int>(b.dy() + gi.lo * p),
                   static_cast<int>(b.dx() + gj.lo * p), static_cast<int>(gi.hi - gi.lo),
                   static_cast<int>(gj.hi - gj.lo), p);
  std::vector<std::int64_t> rows;
  rows.reserve(static_cast<std::size_t>((gi.hi - gi.lo) * (gj.hi - gj.lo)));
  for (std::int64_t i = gi.lo; i < gi.hi; ++i)
    for (std::int64_t j = gj.lo; j < gj.hi; ++j) rows.push_back(i * b.grid_w(W) + j);
  return rho_mean(sub(b.measure_patches(gathered), take_rows(yb, rows)), norm);
}

template <typename T>
void check_batch(std::size_t n, std::size_t m, const char* who) {
  if (n == 0) throw TensorError(std::string(who) + ": empty batch");
  if (n != m) throw TensorError(std::string(who) + ": batch sides differ in length");
}

template <typename T>
const CompressivePatchOp<T>& cs_of(const MeasurementOp<T>& op, const char* who) {
  if (op.kind() != MeasurementOp<T>::Kind::compressive)
    throw TensorError(std::string(who) + ": record carries no compressive operator");
  return op.cs();
}

template <typename T>
Tensor<T> blur_residual_mean(const Tensor<T>& f, const Tensor<T>& k, const Tensor<T>& y,
                             Norm norm, Boundary boundary, int crop) {
  if (f.rank() != 2 || y.rank() != 2)
    throw TensorError("blur loss expects [H,W] predictions and measurements");
  return rho_mean(crop2d(sub(blur_with_kernel(f, k, boundary), y), crop), norm);
}

}  // namespace

template <typename T>
Tensor<T> rho_mean(const Tensor<T>& residual, Norm norm) {
  return norm == Norm::l2 ? mean(square(residual)) : mean(abs_t(residual));
}

template <typename T>
Tensor<T> swap_loss_cs(const std::vector<Tensor<T>>& f1, const std::vector<Tensor<T>>& f2,
                       const std::vector<MeasurementPair<T>>& pairs, std::int64_t H,
                       std::int64_t W, Norm norm) {
  check_batch<T>(f1.size(), pairs.size(), "swap");
  check_batch<T>(f2.size(), pairs.size(), "swap");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t t = 0; t < pairs.size(); ++t) {
    const auto& a = cs_of(pairs[t].theta1, "swap");
    const auto& b = cs_of(pairs[t].theta2, "swap");
    bool empty = false;
    Tensor<T> fwd = cs_cross_term(f1[t], a, b, pairs[t].y2, H, W, norm, empty);
    if (!empty) total = add(total, fwd);
    Tensor<T> rev = cs_cross_term(f2[t], b, a, pairs[t].y1, H, W, norm, empty);
    if (!empty) total = add(total, rev);
  }
  return scale(total, T(1) / static_cast<T>(pairs.size()));
}

template <typename T>
Tensor<T> self_loss_cs(const std::vector<Tensor<T>>& f1, const std::vector<Tensor<T>>& f2,
                       const std::vector<MeasurementPair<T>>& pairs, Norm norm) {
  check_batch<T>(f1.size(), pairs.size(), "self");
  check_batch<T>(f2.size(), pairs.size(), "self");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t t = 0; t < pairs.size(); ++t) {
    const auto& a = cs_of(pairs[t].theta1, "self");
    const auto& b = cs_of(pairs[t].theta2, "self");
    total = add(total, rho_mean(sub(a.measure_patches(f1[t]), pairs[t].y1), norm));
    total = add(total, rho_mean(sub(b.measure_patches(f2[t]), pairs[t].y2), norm));
  }
  return scale(total, T(1) / static_cast<T>(pairs.size()));
}

template <typename T>
Tensor<T> swap_loss_blur(const std::vector<Tensor<T>>& f1, const std::vector<Tensor<T>>& f2,
                         const std::vector<Tensor<T>>& k1, const std::vector<Tensor<T>>& k2,
                         const std::vector<Tensor<T>>& y1, const std::vector<Tensor<T>>& y2,
                         Norm norm, Boundary boundary, int crop_margin) {
  check_batch<T>(f1.size(), y1.size(), "swap");
  check_batch<T>(f2.size(), y2.size(), "swap");
  check_batch<T>(k1.size(), f1.size(), "swap");
  check_batch<T>(k2.size(), f1.size(), "swap");
  check_batch<T>(f2.size(), f1.size(), "swap");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t t = 0; t < f1.size(); ++t) {
    total = add(total, blur_residual_mean(f1[t], k2[t], y2[t], norm, boundary, crop_margin));
    total = add(total, blur_residual_mean(f2[t], k1[t], y1[t], norm, boundary, crop_margin));
  }
  return scale(total, T(1) / static_cast<T>(f1.size()));
}

template <typename T>
Tensor<T> self_loss_blur(const std::vector<Tensor<T>>& f1, const std::vector<Tensor<T>>& f2,
                         const std::vector<Tensor<T>>& k1, const std::vector<Tensor<T>>& k2,
                         const std::vector<Tensor<T>>& y1, const std::vector<Tensor<T>>& y2,
                         Norm norm, Boundary boundary, int crop_margin) {
  check_batch<T>(f1.size(), y1.size(), "self");
  check_batch<T>(f2.size(), y2.size(), "self");
  check_batch<T>(k1.size(), f1.size(), "self");
  check_batch<T>(k2.size(), f1.size(), "self");
  check_batch<T>(f2.size(), f1.size(), "self");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t t = 0; t < f1.size(); ++t) {
    total = add(total, blur_residual_mean(f1[t], k1[t], y1[t], norm, boundary, crop_margin));
    total = add(total, blur_residual_mean(f2[t], k2[t], y2[t], norm, boundary, crop_margin));
  }
  return scale(total, T(1) / static_cast<T>(f1.size()));
}

template <typename T>
std::vector<Tensor<T>> pair_kernels(const std::vector<MeasurementPair<T>>& pairs, int which) {
  if (which != 1 && which != 2) throw TensorError("pair_kernels: which must be 1 or 2");
  std::vector<Tensor<T>> out;
  out.reserve(pairs.size());
  for (const auto& pr : pairs) {
    const MeasurementOp<T>& op = which == 1 ? pr.theta1 : pr.theta2;
    if (op.kind() != MeasurementOp<T>::Kind::convolution)
      throw TensorError("pair_kernels: record carries no convolution operator");
    out.push_back(op.conv().kernel().clone());
  }
  return out;
}

template <typename T>
Tensor<T> proxy_param_loss(const std::vector<Tensor<T>>& estimates,
                           const std::vector<Tensor<T>>& targets, Norm norm) {
  check_batch<T>(estimates.size(), targets.size(), "proxy-param");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t t = 0; t < estimates.size(); ++t)
    total = add(total, rho_mean(sub(estimates[t], targets[t]), norm));
  return scale(total, T(1) / static_cast<T>(estimates.size()));
}

template <typename T>
Tensor<T> proxy_image_loss(const std::vector<Tensor<T>>& estimates,
                           const std::vector<Tensor<T>>& targets, Norm norm) {
  check_batch<T>(estimates.size(), targets.size(), "proxy-image");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t t = 0; t < estimates.size(); ++t)
    total = add(total, rho_mean(sub(estimates[t], targets[t]), norm));
  return scale(total, T(1) / static_cast<T>(estimates.size()));
}

template <typename T>
Tensor<T> combined_objective(const Tensor<T>& swap, const Tensor<T>& self,
                             const Tensor<T>& proxy_param, const Tensor<T>& proxy_image,
                             const LossWeights& w) {
  if (w.gamma < 0 || w.alpha < 0 || w.beta < 0)
    throw TensorError("loss weights must be nonnegative");
  if (!swap.defined() || !swap.is_scalar()) throw TensorError("combined: swap term required");
  auto need = [](const Tensor<T>& part, double weight, const char* name) {
    if (weight != 0.0 && !part.defined())
      throw TensorError(std::string("combined: ") + name + " weighted but undefined");
    if (part.defined() && !part.is_scalar())
      throw TensorError(std::string("combined: ") + name + " must be scalar");
  };
  need(self, w.gamma, "self");
  need(proxy_param, w.alpha, "proxy-param");
  need(proxy_image, w.beta, "proxy-image");
  Tensor<T> out = swap;
  if (w.gamma != 0.0) out = add(out, scale(self, static_cast<T>(w.gamma)));
  if (w.alpha != 0.0) out = add(out, scale(proxy_param, static_cast<T>(w.alpha)));
  if (w.beta != 0.0) out = add(out, scale(proxy_image, static_cast<T>(w.beta)));
  return out;
}

#define PAIRMEAS_LOSS_INSTANTIATE(T)                                                            \
  template Tensor<T> rho_mean(const Tensor<T>&, Norm);                                         \
  template Tensor<T> swap_loss_cs(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&, \
                                  const std::vector<MeasurementPair<T>>&, std::int64_t,        \
                                  std::int64_t, Norm);                                         \
  template Tensor<T> self_loss_cs(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&, \
                                  const std::vector<MeasurementPair<T>>&, Norm);               \
  template Tensor<T> swap_loss_blur(const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&, Norm, Boundary, int);       \
  template Tensor<T> self_loss_blur(const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&,                             \
                                    const std::vector<Tensor<T>>&, Norm, Boundary, int);       \
  template std::vector<Tensor<T>> pair_kernels(const std::vector<MeasurementPair<T>>&, int);   \
  template Tensor<T> proxy_param_loss(const std::vector<Tensor<T>>&,                           \
                                      const std::vector<Tensor<T>>&, Norm);                    \
  template Tensor<T> proxy_image_loss(const std::vector<Tensor<T>>&,                           \
                                      const std::vector<Tensor<T>>&, Norm);                    \
  template Tensor<T> combined_objective(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                        const Tensor<T>&, const LossWeights&);

PAIRMEAS_LOSS_INSTANTIATE(float)
PAIRMEAS_LOSS_INSTANTIATE(double)

#undef PAIRMEAS_LOSS_INSTANTIATE

}  // namespace pairmeas

#pragma once

#include <cstdint>
#include <vector>

#include "pairmeas/measurement.hpp"
#include "pairmeas/tensor.hpp"

namespace pairmeas {

// Residual penalty. Every term reduces by mean over residual elements, so
// values stay comparable across batch sizes and measurement counts.
enum class Norm { l2, l1 };

struct LossWeights {
  double gamma = 0.0;  // self-measurement term
  double alpha = 0.0;  // parameter-proxy term
  double beta = 0.0;   // image-proxy term
};

// mean over all elements of rho(residual); L1 takes subgradient 0 at 0
template <typename T>
Tensor<T> rho_mean(const Tensor<T>& residual, Norm norm);

// Cross-measurement consistency for patch records. f1[t] and f2[t] hold the
// predicted patches [n,p,p] of record t's two partitions. Partition-1
// predictions are assembled into an [H,W] canvas, every partition-2 patch the
// canvas fully covers is re-measured with theta2 and compared against the
// matching rows of y2, then the roles swap. Each direction is an element
// mean, directions add, records average. A direction with no covered patches
// contributes zero.
template <typename T>
Tensor<T> swap_loss_cs(const std::vector<Tensor<T>>& f1, const std::vector<Tensor<T>>& f2,
                       const std::vector<MeasurementPair<T>>& pairs, std::int64_t H,
                       std::int64_t W, Norm norm);

// Own-measurement consistency: re-measure each partition's predictions with
// its own operator against its own measurements.
template <typename T>
Tensor<T> self_loss_cs(const std::vector<Tensor<T>>& f1, const std::vector<Tensor<T>>& f2,
                       const std::vector<MeasurementPair<T>>& pairs, Norm norm);

// Blur records: f_i[t] is a predicted image [H,W], k_i[t] a kernel [kh,kw]
// (a constant tensor for known operators or a detached estimate), y_i[t] the
// observation. Residuals are cropped crop_margin pixels on every side so
// zero-padding artifacts stay out of the objective.
template <typename T>
Tensor<T> swap_loss_blur(const std::vector<Tensor<T>>& f1, const std::vector<Tensor<T>>& f2,
                         const std::vector<Tensor<T>>& k1, const std::vector<Tensor<T>>& k2,
                         const std::vector<Tensor<T>>& y1, const std::vector<Tensor<T>>& y2,
                         Norm norm, Boundary boundary, int crop_margin);

template <typename T>
Tensor<T> self_loss_blur(const std::vector<Tensor<T>>& f1, const std::vector<Tensor<T>>& f2,
                         const std::vector<Tensor<T>>& k1, const std::vector<Tensor<T>>& k2,
                         const std::vector<Tensor<T>>& y1, const std::vector<Tensor<T>>& y2,
                         Norm norm, Boundary boundary, int crop_margin);

// kernels of the records' true operators, as constant tensors (which is 1 or 2)
template <typename T>
std::vector<Tensor<T>> pair_kernels(const std::vector<MeasurementPair<T>>& pairs, int which);

// Proxy supervision against synthetic targets, matched by index. Mean over
// the provided draws of the per-draw element mean.
template <typename T>
Tensor<T> proxy_param_loss(const std::vector<Tensor<T>>& estimates,
                           const std::vector<Tensor<T>>& targets, Norm norm);

template <typename T>
Tensor<T> proxy_image_loss(const std::vector<Tensor<T>>& estimates,
                           const std::vector<Tensor<T>>& targets, Norm norm);

// swap + gamma*self + alpha*proxy_param + beta*proxy_image. A part may be
// left undefined only when its weight is zero; zero-weight parts are not
// recorded on the tape at all.
template <typename T>
Tensor<T> combined_objective(const Tensor<T>& swap, const Tensor<T>& self,
                             const Tensor<T>& proxy_param, const Tensor<T>& proxy_image,
                             const LossWeights& w);

}  // namespace pairmeas

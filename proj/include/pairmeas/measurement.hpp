#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <vector>

#include "pairmeas/rng.hpp"
#include "pairmeas/tensor.hpp"

namespace pairmeas {

enum class Boundary { zero, circular };

template <typename T>
struct GaussianNoise {
  T sigma = T(0);
  GaussianNoise() = default;
  explicit GaussianNoise(T s);
};

// Per-patch orthonormal projection. phi is [m, p*p] with orthonormal rows
// (checked at construction); the op tiles an image with non-overlapping p x p
// patches starting at offset (dy, dx) and projects each patch.
template <typename T>
class CompressivePatchOp {
 public:
  CompressivePatchOp(Tensor<T> phi, int patch_size, int dy, int dx);

  const Tensor<T>& phi() const { return phi_; }
  int patch_size() const { return p_; }
  int dy() const { return dy_; }
  int dx() const { return dx_; }
  std::int64_t m() const { return phi_.dim(0); }

  int grid_h(std::int64_t H) const { return static_cast<int>((H - dy_) / p_); }
  int grid_w(std::int64_t W) const { return static_cast<int>((W - dx_) / p_); }

  // [H,W] canvas -> [grid_h*grid_w, m]
  Tensor<T> measure_image(const Tensor<T>& canvas) const;
  // [n,p,p] -> [n,m]
  Tensor<T> measure_patches(const Tensor<T>& patches) const;
  // [n,m] -> [n,p,p], the exact adjoint of measure_patches
  Tensor<T> adjoint_patches(const Tensor<T>& y) const;
  // [grid_h*grid_w, m] -> [H,W] canvas (zero outside the tiled region)
  Tensor<T> adjoint_image(const Tensor<T>& y, std::int64_t H, std::int64_t W) const;

 private:
  Tensor<T> phi_;    // [m, p*p]
  Tensor<T> phi_t_;  // [p*p, m], cached transpose
  int p_, dy_, dx_;
};

// True convolution (kernel is flipped relative to the cross-correlation the
// tensor core computes). Kernel entries are nonnegative and sum to 1.
template <typename T>
class ConvolutionOp {
 public:
  explicit ConvolutionOp(Tensor<T> kernel, Boundary boundary = Boundary::zero);

  const Tensor<T>& kernel() const { return kernel_; }
  Boundary boundary() const { return boundary_; }

  // [H,W] or [B,1,H,W] -> same shape
  Tensor<T> apply(const Tensor<T>& img) const;
  // exact adjoint of apply
  Tensor<T> adjoint(const Tensor<T>& y) const;

 private:
  Tensor<T> kernel_;   // [kh,kw]
  Tensor<T> corr_k_;   // [1,1,kh,kw] flipped: convolution via cross-correlation
  Tensor<T> plain_k_;  // [1,1,kh,kw] unflipped, used by the circular adjoint
  Boundary boundary_;
};

// Tagged handle so datasets and distributions can carry either operator kind.
template <typename T>
class MeasurementOp {
 public:
  enum class Kind { none, compressive, convolution };

  MeasurementOp() = default;
  MeasurementOp(CompressivePatchOp<T> op);
  MeasurementOp(ConvolutionOp<T> op);

  Kind kind() const { return kind_; }
  bool defined() const { return kind_ != Kind::none; }
  const CompressivePatchOp<T>& cs() const;
  const ConvolutionOp<T>& conv() const;

  // descriptor equality: same kind, same matrix/kernel values, same offsets
  bool equals(const MeasurementOp& other) const;

 private:
  Kind kind_ = Kind::none;
  std::shared_ptr<const CompressivePatchOp<T>> cs_;
  std::shared_ptr<const ConvolutionOp<T>> conv_;
};

template <typename T>
struct MeasurementPair {
  Tensor<T> y1, y2;
  MeasurementOp<T> theta1, theta2;  // undefined in blind datasets
  Tensor<T> x_eval;                 // undefined unless evaluation was requested
  std::uint64_t record_seed = 0;
};

// Distribution over measurement operators.
template <typename T>
class ParamDistribution {
 public:
  enum class Kind { cs_shifted, cs_fresh, motion_kernels, fixed_op };

  // fixed phi, patch grid offset drawn uniformly from [0,p)^2
  static ParamDistribution cs_shifted(Tensor<T> phi, int patch_size);
  // fresh orthonormal m x (p*p) projection per draw, offset (0,0)
  static ParamDistribution cs_fresh(int m, int patch_size);
  // random-walk motion kernels of size ksize x ksize (odd), walk length
  // drawn from {0..max_walk}
  static ParamDistribution motion_kernels(int ksize, int max_walk, Boundary boundary);
  // degenerate distribution used by rank-deficiency diagnostics
  static ParamDistribution fixed_op(MeasurementOp<T> op);

  Kind kind() const { return kind_; }
  MeasurementOp<T> sample(Rng& rng) const;

  // exact support enumeration (cs_shifted offsets, or the single fixed op)
  bool enumerable() const;
  std::vector<MeasurementOp<T>> enumerate() const;

  int patch_size() const { return p_; }
  int measurements_per_patch() const { return m_; }
  int kernel_size() const { return ksize_; }
  Boundary boundary() const { return boundary_; }

 private:
  Kind kind_ = Kind::fixed_op;
  Tensor<T> phi_;
  int p_ = 0, m_ = 0;
  int ksize_ = 0, max_walk_ = 0;
  Boundary boundary_ = Boundary::zero;
  MeasurementOp<T> fixed_;
};

// y = theta(x) + sigma * N(0, I), noise stream seeded independently of the
// operator draw
template <typename T>
Tensor<T> measure(const MeasurementOp<T>& theta, const Tensor<T>& x,
                  const GaussianNoise<T>& noise, std::uint64_t seed);

// theta^T y in the input geometry the estimator consumes: per-patch p x p
// blocks for compressive ops, the full image for convolutions
template <typename T>
Tensor<T> adjoint_input(const MeasurementOp<T>& theta, const Tensor<T>& y);

// two distinct patch-grid offsets, uniform over [0,p)^2
std::pair<std::pair<int, int>, std::pair<int, int>> shifted_partitions(std::int64_t H,
                                                                       std::int64_t W, int p,
                                                                       std::uint64_t seed);

// connected random-walk kernel, nonnegative, sums to 1, fits ksize x ksize
template <typename T>
Tensor<T> sample_motion_kernel(int ksize, int max_walk, Rng& rng);
template <typename T>
ConvolutionOp<T> sample_motion_kernel(const ParamDistribution<T>& dist, std::uint64_t seed);

// orthonormal-row matrix [m, n] from a seeded Gaussian QR
template <typename T>
Tensor<T> orthonormal_rows(int m, int n, Rng& rng);

// Differentiable counterpart of ConvolutionOp::apply for a kernel that may
// itself be on the tape (estimated kernels). Same true-convolution and
// boundary semantics.
template <typename T>
Tensor<T> blur_with_kernel(const Tensor<T>& img, const Tensor<T>& kernel, Boundary boundary);

struct PairDatasetOptions {
  bool keep_eval = true;
  bool blind = false;  // drop operator handles from the records
  // global index of images[0]; record seeds derive from first_record + i, so
  // building a dataset in slices reproduces the single-call output exactly
  std::int64_t first_record = 0;
};

template <typename T>
std::vector<MeasurementPair<T>> build_pair_dataset(const std::vector<Tensor<T>>& images,
                                                   const ParamDistribution<T>& dist,
                                                   const GaussianNoise<T>& noise,
                                                   std::uint64_t master_seed,
                                                   const PairDatasetOptions& opt = {});

// dense matrix of theta over an H x W canvas, rows are measurements
template <typename T>
Eigen::MatrixXd materialize(const MeasurementOp<T>& theta, std::int64_t H, std::int64_t W);

// Q = E[theta^T theta] over the distribution: exact enumeration when the
// support is finite, a diagonal closed form for fresh random projections, a
// circulant closed form for circular-boundary kernels, Monte-Carlo
// otherwise. N = H*W must stay <= 4096.
template <typename T>
Eigen::MatrixXd gram_expectation(const ParamDistribution<T>& dist, int n_samples,
                                 std::int64_t H, std::int64_t W, std::uint64_t seed);

struct QRankReport {
  std::vector<double> eigenvalues;  // descending
  int rank = 0;
  bool full_rank = false;
  double rel_threshold = 0;
  int null_dim = 0;
};

QRankReport q_rank_report(const Eigen::MatrixXd& Q, double rel_threshold = 1e-8);

struct SpectrumReport {
  std::int64_t H = 0, W = 0;
  std::vector<std::vector<double>> per_kernel;  // |DFT| maps, row-major
  std::vector<double> average;
  double avg_min = 0, avg_max = 0;
};

// kernels zero-padded to (H,W) (defaults to the largest kernel present)
template <typename T>
SpectrumReport kernel_spectrum(const std::vector<Tensor<T>>& kernels, std::int64_t H = -1,
                               std::int64_t W = -1);

}  // namespace pairmeas

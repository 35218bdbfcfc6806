#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "pairmeas/measurement.hpp"
#include "pairmeas/rng.hpp"
#include "pairmeas/tensor.hpp"

namespace pairmeas {

struct TheoryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Gaussian pixel model x = mean + root * g with g ~ N(0, I). The root is
// lower-triangular and banded, so covariance() = root * root^T is exact and
// neighbouring pixels are correlated.
struct BandedGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd root;

  // random banded root, rows rescaled so every pixel has variance
  // pixel_std^2 (a zero pixel_std collapses to a point mass at the mean)
  static BandedGaussian make(int n, int bandwidth, double pixel_std, double mean_value,
                             std::uint64_t seed);

  Eigen::MatrixXd covariance() const;
  Eigen::VectorXd sample(Rng& rng) const;
  int dim() const { return static_cast<int>(mean.size()); }
};

// E[x^T Q x] = tr(Q Sigma) + mu^T Q mu
double quadratic_form_expectation(const Eigen::MatrixXd& q, const Eigen::VectorXd& mu,
                                  const Eigen::MatrixXd& sigma);

// block-constant random canvas on cell x cell tiles, values uniform in [0,1]
template <typename T>
Tensor<T> piecewise_constant_image(std::int64_t H, std::int64_t W, int cell, Rng& rng);

// Everything below treats estimators as linear maps f(y) = W theta^T y on
// the flattened H x W canvas, mirroring the back-projected input the trained
// networks consume. W is N x N with N = H * W.

struct IdentityReport {
  double lhs = 0;      // MC mean of the paired swap integrand
  double rhs = 0;      // 2 sigma^2 + (2/M) MC mean of delta^T Q delta
  double rel_err = 0;  // |lhs - rhs| / max(|rhs|, 1e-300)
  double lhs_se = 0;   // standard error of the lhs mean
  double noise_floor = 0;  // 2 sigma^2
  double quad_term = 0;    // rhs - noise_floor
  int n_samples = 0;
  std::int64_t measurement_count = 0;  // M, identical for every draw
};

// Monte-Carlo check that the expected swap loss splits into the noise floor
// plus a Q-weighted quadratic in the estimation error. Every operator in the
// distribution must produce the same number of measurement elements, since
// the element-mean loss normalizes by that count. lhs and rhs share the
// sample stream, so rel_err measures the identity rather than two
// independent estimates.
IdentityReport mc_swap_identity(const Eigen::MatrixXd& estimator,
                                const ParamDistribution<double>& dist,
                                const GaussianNoise<double>& noise, const BandedGaussian& px,
                                std::int64_t H, std::int64_t W, int n_samples,
                                std::uint64_t seed);

struct LinearOracleConfig {
  int n_train = 10000;
  int n_eval = 2000;
  int q_samples = 100000;  // only consulted when Q has no closed form
  double rank_rel_threshold = 1e-8;
  bool allow_deficient = false;  // rank-deficient Q refuses unless set
  double cg_tol = 1e-10;         // relative residual target for the swap solve
  int cg_max_iters = 0;          // 0 picks a cap from the problem size
};

struct LinearOracleReport {
  Eigen::MatrixXd w_swap;  // minimizes the empirical swap loss
  Eigen::MatrixXd w_sup;   // minimizes the empirical supervised L2 loss
  Eigen::MatrixXd q;
  QRankReport q_report;
  double param_rel_dist = 0;  // ||w_swap - w_sup||_F / ||w_sup||_F
  double psnr_sup = 0, psnr_swap = 0, psnr_gap = 0;
  // disagreement split across the eigenspaces of Q
  double range_rel_err = 0;   // ||P_R (w_swap - w_sup)||_F / ||P_R w_sup||_F
  double null_rel_err = 0;    // same ratio on the null space (0 when full rank)
  double null_norm_sup = 0;   // ||P_N w_sup||_F
  double null_norm_swap = 0;  // ||P_N w_swap||_F
  int cg_iterations = 0;
  double cg_residual = 0;  // achieved relative residual of the swap solve
};

// Fits both estimators on one sampled population of paired measurements by
// normal equations (the swap system is solved matrix-free by conjugate
// gradients from zero, which leaves directions the loss never constrains at
// exactly zero) and compares them on fresh samples. Refuses rank-deficient
// distributions unless allow_deficient is set, naming the null dimension.
LinearOracleReport linear_oracle(const ParamDistribution<double>& dist,
                                 const GaussianNoise<double>& noise, const BandedGaussian& px,
                                 std::int64_t H, std::int64_t W, const LinearOracleConfig& cfg,
                                 std::uint64_t seed);

}  // namespace pairmeas

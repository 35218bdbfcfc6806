#include "pairmeas/theory.hpp"

#include <cmath>
#include <string>

#include "pairmeas/training.hpp"

namespace pairmeas {

namespace {

Tensor<double> canvas_of(const Eigen::VectorXd& v, std::int64_t H, std::int64_t W) {
  return Tensor<double>::from({H, W}, std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::VectorXd flat(const Tensor<double>& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.values().data(),
                                           static_cast<Eigen::Index>(t.numel()));
}

std::int64_t measurement_count(const MeasurementOp<double>& op, std::int64_t H,
                               std::int64_t W) {
  if (op.kind() == MeasurementOp<double>::Kind::compressive) {
    const auto& cs = op.cs();
    return static_cast<std::int64_t>(cs.grid_h(H)) * cs.grid_w(W) * cs.m();
  }
  return H * W;
}

Eigen::VectorXd apply_op(const MeasurementOp<double>& op, const Eigen::VectorXd& x,
                         std::int64_t H, std::int64_t W) {
  if (op.kind() == MeasurementOp<double>::Kind::compressive)
    return flat(op.cs().measure_image(canvas_of(x, H, W)));
  return flat(op.conv().apply(canvas_of(x, H, W)));
}

Eigen::VectorXd apply_adjoint(const MeasurementOp<double>& op, const Eigen::VectorXd& y,
                              std::int64_t H, std::int64_t W) {
  if (op.kind() == MeasurementOp<double>::Kind::compressive) {
    const auto& cs = op.cs();
    std::int64_t n = static_cast<std::int64_t>(cs.grid_h(H)) * cs.grid_w(W);
    Tensor<double> yt =
        Tensor<double>::from({n, cs.m()}, std::vector<double>(y.data(), y.data() + y.size()));
    return flat(cs.adjoint_image(yt, H, W));
  }
  return flat(op.conv().adjoint(canvas_of(y, H, W)));
}

Eigen::VectorXd gaussian_vec(Eigen::Index n, Rng& rng) {
  Eigen::VectorXd g(n);
  for (Eigen::Index i = 0; i < n; ++i) g[i] = rng.normal();
  return g;
}

// the element-mean loss divides by the measurement count, so the identity is
// only well formed when every draw produces the same count
std::int64_t fixed_measurement_count(const ParamDistribution<double>& dist, std::int64_t H,
                                     std::int64_t W, std::uint64_t seed) {
  std::int64_t count = -1;
  if (dist.enumerable()) {
    for (const auto& op : dist.enumerate()) {
      std::int64_t c = measurement_count(op, H, W);
      if (count >= 0 && c != count)
        throw TheoryError("measurement counts vary across the operator support (" +
                          std::to_string(count) + " vs " + std::to_string(c) +
                          "); the element-mean identity needs a fixed count");
      count = c;
    }
  } else {
    // fresh projections and kernel families have a fixed count by shape
    Rng probe = Rng(seed).derive("count-probe");
    count = measurement_count(dist.sample(probe), H, W);
  }
  if (count <= 0) throw TheoryError("operators produce no measurements on this canvas");
  return count;
}

void check_pixel_model(const BandedGaussian& px, std::int64_t H, std::int64_t W,
                       const char* who) {
  if (H < 1 || W < 1) throw TheoryError(std::string(who) + ": canvas must be nonempty");
  if (px.dim() != H * W)
    throw TheoryError(std::string(who) + ": pixel model covers " + std::to_string(px.dim()) +
                      " pixels but the canvas has " + std::to_string(H * W));
}

Eigen::MatrixXd spd_pinv(const Eigen::MatrixXd& s, double rel_threshold) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  if (es.info() != Eigen::Success) throw TheoryError("eigendecomposition failed");
  const Eigen::VectorXd& ev = es.eigenvalues();
  double cut = rel_threshold * std::max(ev.maxCoeff(), 0.0);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (ev[i] > cut && ev[i] > 0.0) inv[i] = 1.0 / ev[i];
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

BandedGaussian BandedGaussian::make(int n, int bandwidth, double pixel_std, double mean_value,
                                    std::uint64_t seed) {
  if (n < 1) throw TheoryError("pixel model needs a positive dimension");
  if (bandwidth < 0) throw TheoryError("bandwidth must be nonnegative");
  if (pixel_std < 0) throw TheoryError("pixel deviation must be nonnegative");
  BandedGaussian g;
  g.mean = Eigen::VectorXd::Constant(n, mean_value);
  g.root = Eigen::MatrixXd::Zero(n, n);
  Rng rng = Rng(seed).derive("banded-root");
  for (int i = 0; i < n; ++i) {
    g.root(i, i) = 1.0;
    for (int k = 1; k <= bandwidth && k <= i; ++k)
      g.root(i, i - k) = std::pow(0.6, k) * rng.uniform(-1.0, 1.0);
    // unit diagonal keeps the row norm >= 1, so the rescale is always finite
    g.root.row(i) *= pixel_std / g.root.row(i).norm();
  }
  return g;
}

Eigen::MatrixXd BandedGaussian::covariance() const { return root * root.transpose(); }

Eigen::VectorXd BandedGaussian::sample(Rng& rng) const {
  return mean + root * gaussian_vec(mean.size(), rng);
}

double quadratic_form_expectation(const Eigen::MatrixXd& q, const Eigen::VectorXd& mu,
                                  const Eigen::MatrixXd& sigma) {
  if (q.rows() != q.cols()) throw TheoryError("quadratic form needs a square matrix");
  if (sigma.rows() != q.rows() || sigma.cols() != q.cols() || mu.size() != q.rows())
    throw TheoryError("quadratic form dimension mismatch");
  return (q * sigma).trace() + mu.dot(q * mu);
}

template <typename T>
Tensor<T> piecewise_constant_image(std::int64_t H, std::int64_t W, int cell, Rng& rng) {
  if (H < 1 || W < 1) throw TheoryError("canvas must be nonempty");
  if (cell < 1) throw TheoryError("cell size must be positive");
  std::vector<T> vals(static_cast<std::size_t>(H * W));
  for (std::int64_t ci = 0; ci < H; ci += cell)
    for (std::int64_t cj = 0; cj < W; cj += cell) {
      T v = static_cast<T>(rng.uniform());
      for (std::int64_t i = ci; i < std::min<std::int64_t>(ci + cell, H); ++i)
        for (std::int64_t j = cj; j < std::min<std::int64_t>(cj + cell, W); ++j)
          vals[static_cast<std::size_t>(i * W + j)] = v;
    }
  return Tensor<T>::from({H, W}, std::move(vals));
}

IdentityReport mc_swap_identity(const Eigen::MatrixXd& estimator,
                                const ParamDistribution<double>& dist,
                                const GaussianNoise<double>& noise, const BandedGaussian& px,
                                std::int64_t H, std::int64_t W, int n_samples,
                                std::uint64_t seed) {
  check_pixel_model(px, H, W, "swap identity");
  std::int64_t N = H * W;
  if (estimator.rows() != N || estimator.cols() != N)
    throw TheoryError("estimator must be " + std::to_string(N) + " x " + std::to_string(N));
  if (n_samples < 1) throw TheoryError("need at least one sample");
  std::int64_t M = fixed_measurement_count(dist, H, W, seed);
  Eigen::MatrixXd Q = gram_expectation(dist, std::max(n_samples, 100000), H, W,
                                       Rng(seed).derive("identity-gram").next_u64());

  double lhs_sum = 0, lhs_sq = 0, quad_sum = 0;
  const double m = static_cast<double>(M);
  for (int i = 0; i < n_samples; ++i) {
    Rng rng = Rng(seed).derive("identity").derive(static_cast<std::uint64_t>(i));
    Eigen::VectorXd x = px.sample(rng);
    MeasurementOp<double> op1 = dist.sample(rng);
    MeasurementOp<double> op2 = dist.sample(rng);
    Eigen::VectorXd y1 = apply_op(op1, x, H, W) + noise.sigma * gaussian_vec(M, rng);
    Eigen::VectorXd y2 = apply_op(op2, x, H, W) + noise.sigma * gaussian_vec(M, rng);
    Eigen::VectorXd f1 = estimator * apply_adjoint(op1, y1, H, W);
    Eigen::VectorXd f2 = estimator * apply_adjoint(op2, y2, H, W);
    double lhs_i = (apply_op(op2, f1, H, W) - y2).squaredNorm() / m +
                   (apply_op(op1, f2, H, W) - y1).squaredNorm() / m;
    Eigen::VectorXd d1 = f1 - x, d2 = f2 - x;
    lhs_sum += lhs_i;
    lhs_sq += lhs_i * lhs_i;
    quad_sum += (d1.dot(Q * d1) + d2.dot(Q * d2)) / m;
  }

  IdentityReport rep;
  rep.n_samples = n_samples;
  rep.measurement_count = M;
  rep.noise_floor = 2.0 * noise.sigma * noise.sigma;
  rep.lhs = lhs_sum / n_samples;
  rep.quad_term = quad_sum / n_samples;
  rep.rhs = rep.noise_floor + rep.quad_term;
  rep.rel_err = std::abs(rep.lhs - rep.rhs) / std::max(std::abs(rep.rhs), 1e-300);
  if (n_samples > 1) {
    double var = (lhs_sq - lhs_sum * lhs_sum / n_samples) / (n_samples - 1);
    rep.lhs_se = std::sqrt(std::max(var, 0.0) / n_samples);
  }
  return rep;
}

namespace {

struct OracleSample {
  Eigen::VectorXd x, z1, z2;
  MeasurementOp<double> op1, op2;
};

OracleSample draw_sample(const ParamDistribution<double>& dist,
                         const GaussianNoise<double>& noise, const BandedGaussian& px,
                         std::int64_t H, std::int64_t W, Rng rng) {
  OracleSample s;
  s.x = px.sample(rng);
  s.op1 = dist.sample(rng);
  s.op2 = dist.sample(rng);
  Eigen::VectorXd y1 = apply_op(s.op1, s.x, H, W) +
                       noise.sigma * gaussian_vec(measurement_count(s.op1, H, W), rng);
  Eigen::VectorXd y2 = apply_op(s.op2, s.x, H, W) +
                       noise.sigma * gaussian_vec(measurement_count(s.op2, H, W), rng);
  s.z1 = apply_adjoint(s.op1, y1, H, W);
  s.z2 = apply_adjoint(s.op2, y2, H, W);
  return s;
}

}  // namespace

LinearOracleReport linear_oracle(const ParamDistribution<double>& dist,
                                 const GaussianNoise<double>& noise, const BandedGaussian& px,
                                 std::int64_t H, std::int64_t W, const LinearOracleConfig& cfg,
                                 std::uint64_t seed) {
  check_pixel_model(px, H, W, "linear oracle");
  std::int64_t N = H * W;
  if (N > 256) throw TheoryError("linear oracle is capped at 256 pixels");
  if (cfg.n_train < 1 || cfg.n_eval < 1) throw TheoryError("need training and eval samples");

  LinearOracleReport rep;
  rep.q = gram_expectation(dist, cfg.q_samples, H, W, Rng(seed).derive("oracle-gram").next_u64());
  rep.q_report = q_rank_report(rep.q, cfg.rank_rel_threshold);
  if (!rep.q_report.full_rank && !cfg.allow_deficient)
    throw TheoryError(
        "operator gram expectation is rank deficient: rank " +
        std::to_string(rep.q_report.rank) + " of " + std::to_string(N) + " with a " +
        std::to_string(rep.q_report.null_dim) +
        "-dimensional null space; estimators only agree on the measured subspace, set "
        "allow_deficient to compare there");

  std::vector<OracleSample> pop;
  pop.reserve(static_cast<std::size_t>(cfg.n_train));
  Eigen::MatrixXd szz = Eigen::MatrixXd::Zero(N, N);
  Eigen::MatrixXd sxz = Eigen::MatrixXd::Zero(N, N);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(N, N);
  for (int i = 0; i < cfg.n_train; ++i) {
    OracleSample s = draw_sample(dist, noise, px, H, W,
                                 Rng(seed).derive("oracle-train").derive(static_cast<std::uint64_t>(i)));
    szz.noalias() += s.z1 * s.z1.transpose() + s.z2 * s.z2.transpose();
    sxz.noalias() += s.x * s.z1.transpose() + s.x * s.z2.transpose();
    b.noalias() += s.z2 * s.z1.transpose() + s.z1 * s.z2.transpose();
    pop.push_back(std::move(s));
  }
  rep.w_sup = sxz * spd_pinv(szz, 1e-12);

  // swap normal equations, solved matrix-free: the system applies each
  // sampled operator's gram to W through the operator itself, so memory
  // stays linear in the population
  auto apply_system = [&](const Eigen::MatrixXd& w) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(N, N);
    for (const OracleSample& s : pop) {
      Eigen::VectorXd u1 = w * s.z1;
      Eigen::VectorXd u2 = w * s.z2;
      out.noalias() +=
          apply_adjoint(s.op2, apply_op(s.op2, u1, H, W), H, W) * s.z1.transpose();
      out.noalias() +=
          apply_adjoint(s.op1, apply_op(s.op1, u2, H, W), H, W) * s.z2.transpose();
    }
    return out;
  };

  int cap = cfg.cg_max_iters > 0 ? cfg.cg_max_iters : static_cast<int>(4 * N * N + 200);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(N, N);
  Eigen::MatrixXd r = b;
  Eigen::MatrixXd p = r;
  double rs = r.squaredNorm();
  const double rs0 = std::max(rs, 1e-300);
  int it = 0;
  while (it < cap && std::sqrt(rs / rs0) > cfg.cg_tol) {
    Eigen::MatrixXd lp = apply_system(p);
    double plp = (p.array() * lp.array()).sum();
    if (plp <= 0) throw TheoryError("swap system lost positive definiteness");
    double alpha = rs / plp;
    w.noalias() += alpha * p;
    r.noalias() -= alpha * lp;
    double rs_next = r.squaredNorm();
    p = r + (rs_next / rs) * p;
    rs = rs_next;
    ++it;
  }
  // a singular but consistent system can stall a few decades above the
  // target once roundoff dominates; only a residual far from it is a failure
  if (std::sqrt(rs / rs0) > cfg.cg_tol * 1e4)
    throw TheoryError("swap normal equations did not converge in " + std::to_string(cap) +
                      " iterations");
  rep.w_swap = w;
  rep.cg_iterations = it;
  rep.cg_residual = std::sqrt(rs / rs0);

  double mse_sup = 0, mse_swap = 0, psnr_sup = 0, psnr_swap = 0;
  for (int i = 0; i < cfg.n_eval; ++i) {
    OracleSample s = draw_sample(dist, noise, px, H, W,
                                 Rng(seed).derive("oracle-eval").derive(static_cast<std::uint64_t>(i)));
    mse_sup = (rep.w_sup * s.z1 - s.x).squaredNorm() / static_cast<double>(N);
    mse_swap = (rep.w_swap * s.z1 - s.x).squaredNorm() / static_cast<double>(N);
    psnr_sup += psnr_from_mse(mse_sup);
    psnr_swap += psnr_from_mse(mse_swap);
  }
  rep.psnr_sup = psnr_sup / cfg.n_eval;
  rep.psnr_swap = psnr_swap / cfg.n_eval;
  rep.psnr_gap = std::abs(rep.psnr_sup - rep.psnr_swap);
  rep.param_rel_dist =
      (rep.w_swap - rep.w_sup).norm() / std::max(rep.w_sup.norm(), 1e-300);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((rep.q + rep.q.transpose()) / 2.0);
  if (es.info() != Eigen::Success) throw TheoryError("eigendecomposition failed");
  double cut = rep.q_report.rel_threshold * std::max(es.eigenvalues().maxCoeff(), 0.0);
  Eigen::MatrixXd vr = Eigen::MatrixXd::Zero(N, 0);
  Eigen::MatrixXd vn = Eigen::MatrixXd::Zero(N, 0);
  for (Eigen::Index k = 0; k < N; ++k) {
    Eigen::MatrixXd& side = es.eigenvalues()[k] > cut ? vr : vn;
    side.conservativeResize(N, side.cols() + 1);
    side.col(side.cols() - 1) = es.eigenvectors().col(k);
  }
  Eigen::MatrixXd diff = rep.w_swap - rep.w_sup;
  if (vr.cols() > 0) {
    Eigen::MatrixXd pr = vr * vr.transpose();
    rep.range_rel_err = (pr * diff).norm() / std::max((pr * rep.w_sup).norm(), 1e-300);
  }
  if (vn.cols() > 0) {
    Eigen::MatrixXd pn = vn * vn.transpose();
    rep.null_norm_sup = (pn * rep.w_sup).norm();
    rep.null_norm_swap = (pn * rep.w_swap).norm();
    rep.null_rel_err = (pn * diff).norm() / std::max(rep.null_norm_sup, 1e-300);
  }
  return rep;
}

template Tensor<float> piecewise_constant_image(std::int64_t, std::int64_t, int, Rng&);
template Tensor<double> piecewise_constant_image(std::int64_t, std::int64_t, int, Rng&);

}  // namespace pairmeas

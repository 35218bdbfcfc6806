#include "pairmeas/measurement.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace pairmeas {

template <typename T>
GaussianNoise<T>::GaussianNoise(T s) : sigma(s) {
  if (!(s >= T(0))) throw TensorError("noise sigma must be >= 0");
}

// ---------------- CompressivePatchOp ----------------

template <typename T>
CompressivePatchOp<T>::CompressivePatchOp(Tensor<T> phi, int patch_size, int dy, int dx)
    : phi_(std::move(phi)), p_(patch_size), dy_(dy), dx_(dx) {
  if (p_ <= 0) throw TensorError("patch size must be positive");
  if (dy_ < 0 || dy_ >= p_ || dx_ < 0 || dx_ >= p_)
    throw TensorError("partition offset must lie in [0, p)^2");
  if (phi_.rank() != 2 || phi_.dim(1) != static_cast<std::int64_t>(p_) * p_)
    throw TensorError("phi must be [m, p*p], got " + shape_str(phi_.shape()));
  std::int64_t mm = phi_.dim(0), nn = phi_.dim(1);
  if (mm > nn) throw TensorError("phi has more rows than columns");
  // orthonormal rows, validated in double regardless of T
  const auto v = phi_.values();
  for (std::int64_t i = 0; i < mm; ++i)
    for (std::int64_t j = i; j < mm; ++j) {
      double acc = 0;
      for (std::int64_t k = 0; k < nn; ++k)
        acc += static_cast<double>(v[i * nn + k]) * static_cast<double>(v[j * nn + k]);
      double want = i == j ? 1.0 : 0.0;
      if (std::abs(acc - want) > 1e-6)
        throw TensorError("phi rows are not orthonormal (deviation " +
                          std::to_string(std::abs(acc - want)) + ")");
    }
  phi_t_ = transpose2d(phi_);
}

template <typename T>
Tensor<T> CompressivePatchOp<T>::measure_image(const Tensor<T>& canvas) const {
  if (canvas.rank() != 2) throw TensorError("measure_image expects [H,W]");
  std::int64_t H = canvas.dim(0), W = canvas.dim(1);
  int gh = grid_h(H), gw = grid_w(W);
  if (gh < 1 || gw < 1)
    throw TensorError("canvas " + shape_str(canvas.shape()) +
                      " too small for patch grid at offset (" + std::to_string(dy_) + "," +
                      std::to_string(dx_) + ")");
  return measure_patches(patch_gather(canvas, dy_, dx_, gh, gw, p_));
}

template <typename T>
Tensor<T> CompressivePatchOp<T>::measure_patches(const Tensor<T>& patches) const {
  if (patches.rank() != 3 || patches.dim(1) != p_ || patches.dim(2) != p_)
    throw TensorError("expected [n," + std::to_string(p_) + "," + std::to_string(p_) +
                      "] patches, got " + shape_str(patches.shape()));
  std::int64_t n = patches.dim(0);
  return matmul(reshape(patches, {n, static_cast<std::int64_t>(p_) * p_}), phi_t_);
}

template <typename T>
Tensor<T> CompressivePatchOp<T>::adjoint_patches(const Tensor<T>& y) const {
  if (y.rank() != 2 || y.dim(1) != m())
    throw TensorError("expected [n," + std::to_string(m()) + "] measurements, got " +
                      shape_str(y.shape()));
  return reshape(matmul(y, phi_), {y.dim(0), static_cast<std::int64_t>(p_), p_});
}

template <typename T>
Tensor<T> CompressivePatchOp<T>::adjoint_image(const Tensor<T>& y, std::int64_t H,
                                               std::int64_t W) const {
  int gh = grid_h(H), gw = grid_w(W);
  if (y.rank() != 2 || y.dim(0) != static_cast<std::int64_t>(gh) * gw)
    throw TensorError("measurement count does not match the patch grid");
  return patch_scatter(adjoint_patches(y), H, W, dy_, dx_, gh, gw, p_);
}

// ---------------- ConvolutionOp ----------------

template <typename T>
ConvolutionOp<T>::ConvolutionOp(Tensor<T> kernel, Boundary boundary)
    : kernel_(std::move(kernel)), boundary_(boundary) {
  if (kernel_.rank() != 2) throw TensorError("kernel must be [kh,kw]");
  double s = 0;
  for (T v : kernel_.values()) {
    if (v < T(-1e-9)) throw TensorError("kernel entries must be nonnegative");
    s += static_cast<double>(v);
  }
  if (std::abs(s - 1.0) > 1e-6)
    throw TensorError("kernel must sum to 1, got " + std::to_string(s));
  if (boundary_ == Boundary::circular &&
      (kernel_.dim(0) % 2 == 0 || kernel_.dim(1) % 2 == 0))
    throw TensorError("circular boundary requires odd kernel dimensions");
  std::int64_t kh = kernel_.dim(0), kw = kernel_.dim(1);
  corr_k_ = reshape(flip180(kernel_), {1, 1, kh, kw});
  plain_k_ = reshape(kernel_.clone(), {1, 1, kh, kw});
}

namespace {

template <typename T>
Tensor<T> as_conv_input(const Tensor<T>& img, bool& was_2d) {
  was_2d = img.rank() == 2;
  if (was_2d) return reshape(img, {1, img.dim(0), img.dim(1)});
  if (img.rank() == 4 && img.dim(1) == 1) return img;
  throw TensorError("blur expects [H,W] or [B,1,H,W], got " + shape_str(img.shape()));
}

template <typename T>
Tensor<T> from_conv_output(const Tensor<T>& out, bool was_2d) {
  if (!was_2d) return out;
  return reshape(out, {out.dim(out.rank() - 2), out.dim(out.rank() - 1)});
}

}  // namespace

template <typename T>
Tensor<T> ConvolutionOp<T>::apply(const Tensor<T>& img) const {
  bool was_2d = false;
  Tensor<T> x = as_conv_input(img, was_2d);
  if (boundary_ == Boundary::zero)
    return from_conv_output(conv2d(x, corr_k_, 1, Pad::same_zero), was_2d);
  int rh = static_cast<int>(kernel_.dim(0) / 2), rw = static_cast<int>(kernel_.dim(1) / 2);
  return from_conv_output(conv2d(pad_wrap(x, rh, rw), corr_k_, 1, Pad::valid), was_2d);
}

template <typename T>
Tensor<T> ConvolutionOp<T>::adjoint(const Tensor<T>& y) const {
  bool was_2d = false;
  Tensor<T> x = as_conv_input(y, was_2d);
  std::int64_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  if (boundary_ == Boundary::zero)
    return from_conv_output(conv2d_transpose(x, corr_k_, 1, Pad::same_zero, H, W), was_2d);
  int rh = static_cast<int>(kernel_.dim(0) / 2), rw = static_cast<int>(kernel_.dim(1) / 2);
  return from_conv_output(conv2d(pad_wrap(x, rh, rw), plain_k_, 1, Pad::valid), was_2d);
}

// ---------------- MeasurementOp ----------------

template <typename T>
MeasurementOp<T>::MeasurementOp(CompressivePatchOp<T> op)
    : kind_(Kind::compressive),
      cs_(std::make_shared<const CompressivePatchOp<T>>(std::move(op))) {}

template <typename T>
MeasurementOp<T>::MeasurementOp(ConvolutionOp<T> op)
    : kind_(Kind::convolution), conv_(std::make_shared<const ConvolutionOp<T>>(std::move(op))) {}

template <typename T>
const CompressivePatchOp<T>& MeasurementOp<T>::cs() const {
  if (kind_ != Kind::compressive) throw TensorError("operator is not a patch projection");
  return *cs_;
}

template <typename T>
const ConvolutionOp<T>& MeasurementOp<T>::conv() const {
  if (kind_ != Kind::convolution) throw TensorError("operator is not a convolution");
  return *conv_;
}

namespace {
template <typename T>
bool values_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  if (a.same_node(b)) return true;
  auto va = a.values();
  auto vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i)
    if (va[i] != vb[i]) return false;
  return true;
}
}  // namespace

template <typename T>
bool MeasurementOp<T>::equals(const MeasurementOp& other) const {
  if (kind_ != other.kind_) return false;
  switch (kind_) {
    case Kind::none:
      return true;
    case Kind::compressive:
      return cs_->patch_size() == other.cs_->patch_size() && cs_->dy() == other.cs_->dy() &&
             cs_->dx() == other.cs_->dx() && values_equal(cs_->phi(), other.cs_->phi());
    case Kind::convolution:
      return conv_->boundary() == other.conv_->boundary() &&
             values_equal(conv_->kernel(), other.conv_->kernel());
  }
  return false;
}

// ---------------- ParamDistribution ----------------

template <typename T>
ParamDistribution<T> ParamDistribution<T>::cs_shifted(Tensor<T> phi, int patch_size) {
  ParamDistribution d;
  d.kind_ = Kind::cs_shifted;
  // constructor below revalidates phi
  CompressivePatchOp<T> probe(phi, patch_size, 0, 0);
  d.phi_ = std::move(phi);
  d.p_ = patch_size;
  d.m_ = static_cast<int>(probe.m());
  return d;
}

template <typename T>
ParamDistribution<T> ParamDistribution<T>::cs_fresh(int m, int patch_size) {
  if (m <= 0 || patch_size <= 0 || m > patch_size * patch_size)
    throw TensorError("need 0 < m <= p*p");
  ParamDistribution d;
  d.kind_ = Kind::cs_fresh;
  d.m_ = m;
  d.p_ = patch_size;
  return d;
}

template <typename T>
ParamDistribution<T> ParamDistribution<T>::motion_kernels(int ksize, int max_walk,
                                                          Boundary boundary) {
  if (ksize < 1 || ksize % 2 == 0) throw TensorError("kernel size must be odd and >= 1");
  if (max_walk < 0) throw TensorError("max walk length must be >= 0");
  ParamDistribution d;
  d.kind_ = Kind::motion_kernels;
  d.ksize_ = ksize;
  d.max_walk_ = max_walk;
  d.boundary_ = boundary;
  return d;
}

template <typename T>
ParamDistribution<T> ParamDistribution<T>::fixed_op(MeasurementOp<T> op) {
  if (!op.defined()) throw TensorError("fixed distribution needs a defined operator");
  ParamDistribution d;
  d.kind_ = Kind::fixed_op;
  d.fixed_ = std::move(op);
  return d;
}

template <typename T>
MeasurementOp<T> ParamDistribution<T>::sample(Rng& rng) const {
  switch (kind_) {
    case Kind::cs_shifted: {
      int dy = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p_)));
      int dx = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p_)));
      return MeasurementOp<T>(CompressivePatchOp<T>(phi_, p_, dy, dx));
    }
    case Kind::cs_fresh:
      return MeasurementOp<T>(
          CompressivePatchOp<T>(orthonormal_rows<T>(m_, p_ * p_, rng), p_, 0, 0));
    case Kind::motion_kernels:
      return MeasurementOp<T>(
          ConvolutionOp<T>(sample_motion_kernel<T>(ksize_, max_walk_, rng), boundary_));
    case Kind::fixed_op:
      return fixed_;
  }
  throw TensorError("unknown distribution kind");
}

template <typename T>
bool ParamDistribution<T>::enumerable() const {
  return kind_ == Kind::cs_shifted || kind_ == Kind::fixed_op;
}

template <typename T>
std::vector<MeasurementOp<T>> ParamDistribution<T>::enumerate() const {
  std::vector<MeasurementOp<T>> ops;
  if (kind_ == Kind::fixed_op) {
    ops.push_back(fixed_);
    return ops;
  }
  if (kind_ != Kind::cs_shifted) throw TensorError("distribution support is not enumerable");
  for (int dy = 0; dy < p_; ++dy)
    for (int dx = 0; dx < p_; ++dx)
      ops.push_back(MeasurementOp<T>(CompressivePatchOp<T>(phi_, p_, dy, dx)));
  return ops;
}

// ---------------- free operations ----------------

template <typename T>
Tensor<T> measure(const MeasurementOp<T>& theta, const Tensor<T>& x,
                  const GaussianNoise<T>& noise, std::uint64_t seed) {
  Tensor<T> y;
  switch (theta.kind()) {
    case MeasurementOp<T>::Kind::compressive:
      y = theta.cs().measure_image(x);
      break;
    case MeasurementOp<T>::Kind::convolution:
      y = theta.conv().apply(x);
      break;
    default:
      throw TensorError("measure: undefined operator");
  }
  if (noise.sigma > T(0)) {
    Rng rng = Rng(seed).derive("measurement-noise");
    auto v = y.mutable_values();
    for (auto& e : v) e += static_cast<T>(rng.normal(0.0, static_cast<double>(noise.sigma)));
  }
  return y;
}

template <typename T>
Tensor<T> adjoint_input(const MeasurementOp<T>& theta, const Tensor<T>& y) {
  switch (theta.kind()) {
    case MeasurementOp<T>::Kind::compressive:
      return theta.cs().adjoint_patches(y);
    case MeasurementOp<T>::Kind::convolution:
      return theta.conv().adjoint(y);
    default:
      throw TensorError("adjoint_input: undefined operator");
  }
}

std::pair<std::pair<int, int>, std::pair<int, int>> shifted_partitions(std::int64_t H,
                                                                       std::int64_t W, int p,
                                                                       std::uint64_t seed) {
  if (p < 1) throw TensorError("patch size must be >= 1");
  if (H < 2 * p || W < 2 * p)
    throw TensorError("image " + std::to_string(H) + "x" + std::to_string(W) +
                      " too small for two shifted partitions of patch " + std::to_string(p));
  Rng rng = Rng(seed).derive("partition-offsets");
  auto draw = [&rng, p] {
    return std::pair<int, int>{static_cast<int>(rng.uniform_int(p)),
                               static_cast<int>(rng.uniform_int(p))};
  };
  auto o1 = draw();
  auto o2 = draw();
  while (o2 == o1) o2 = draw();
  return {o1, o2};
}

template <typename T>
Tensor<T> sample_motion_kernel(int ksize, int max_walk, Rng& rng) {
  if (ksize < 1 || ksize % 2 == 0) throw TensorError("kernel size must be odd");
  const int k = ksize;
  std::vector<double> grid(static_cast<std::size_t>(k) * k, 0.0);
  auto splat = [&](double cy, double cx, double w) {
    int iy = static_cast<int>(std::floor(cy));
    int ix = static_cast<int>(std::floor(cx));
    double ay = cy - iy, ax = cx - ix;
    auto put = [&](int y, int x, double ww) {
      if (y >= 0 && y < k && x >= 0 && x < k) grid[static_cast<std::size_t>(y) * k + x] += ww;
    };
    put(iy, ix, w * (1 - ay) * (1 - ax));
    put(iy, ix + 1, w * (1 - ay) * ax);
    put(iy + 1, ix, w * ay * (1 - ax));
    put(iy + 1, ix + 1, w * ay * ax);
  };
  auto reflect = [k](double v) {
    double hi = k - 1.0;
    while (v < 0 || v > hi) {
      if (v < 0) v = -v;
      if (v > hi) v = 2 * hi - v;
    }
    return v;
  };

  double cy = (k - 1) / 2.0, cx = (k - 1) / 2.0;
  splat(cy, cx, 1.0);
  std::uint64_t len = rng.uniform_int(static_cast<std::uint64_t>(max_walk) + 1);
  double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::uint64_t s = 0; s < len; ++s) {
    angle += rng.uniform(-0.9, 0.9);
    double seg = rng.uniform(0.25, 0.9);
    int nsub = static_cast<int>(std::ceil(seg / 0.25));
    double sub = seg / nsub;
    for (int t = 0; t < nsub; ++t) {
      cy = reflect(cy + sub * std::sin(angle));
      cx = reflect(cx + sub * std::cos(angle));
      splat(cy, cx, sub);
    }
  }
  double total = 0;
  for (double v : grid) total += v;
  std::vector<T> out(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) out[i] = static_cast<T>(grid[i] / total);
  return Tensor<T>::from({k, k}, std::move(out));
}

template <typename T>
ConvolutionOp<T> sample_motion_kernel(const ParamDistribution<T>& dist, std::uint64_t seed) {
  if (dist.kind() != ParamDistribution<T>::Kind::motion_kernels)
    throw TensorError("distribution does not produce kernels");
  Rng rng = Rng(seed).derive("kernel-sample");
  return dist.sample(rng).conv();
}

template <typename T>
Tensor<T> orthonormal_rows(int m, int n, Rng& rng) {
  if (m < 1 || m > n) throw TensorError("need 1 <= m <= n for orthonormal rows");
  Eigen::MatrixXd a(n, m);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < n; ++i) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, m);
  Eigen::MatrixXd r = qr.matrixQR().topRows(m).template triangularView<Eigen::Upper>();
  // fix signs so the factorization (hence the sampled op) is unique
  for (int j = 0; j < m; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  std::vector<T> vals(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) vals[static_cast<std::size_t>(i) * n + j] = static_cast<T>(q(j, i));
  return Tensor<T>::from({m, n}, std::move(vals));
}

template <typename T>
Tensor<T> blur_with_kernel(const Tensor<T>& img, const Tensor<T>& kernel, Boundary boundary) {
  if (kernel.rank() != 2) throw TensorError("blur kernel must be [kh,kw]");
  std::int64_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (boundary == Boundary::circular && (kh % 2 == 0 || kw % 2 == 0))
    throw TensorError("circular boundary requires odd kernel dimensions");
  // flip as a recorded gather so kernel gradients survive
  std::vector<std::int64_t> rev(static_cast<std::size_t>(kh * kw));
  for (std::int64_t i = 0; i < kh * kw; ++i) rev[static_cast<std::size_t>(i)] = kh * kw - 1 - i;
  Tensor<T> k = reshape(take_rows(reshape(kernel, {kh * kw}), rev), {1, 1, kh, kw});
  bool was_2d = false;
  Tensor<T> x = as_conv_input(img, was_2d);
  if (boundary == Boundary::zero)
    return from_conv_output(conv2d(x, k, 1, Pad::same_zero), was_2d);
  return from_conv_output(
      conv2d(pad_wrap(x, static_cast<int>(kh / 2), static_cast<int>(kw / 2)), k, 1, Pad::valid),
      was_2d);
}

template <typename T>
std::vector<MeasurementPair<T>> build_pair_dataset(const std::vector<Tensor<T>>& images,
                                                   const ParamDistribution<T>& dist,
                                                   const GaussianNoise<T>& noise,
                                                   std::uint64_t master_seed,
                                                   const PairDatasetOptions& opt) {
  if (images.empty()) throw TensorError("no images to measure");
  std::vector<MeasurementPair<T>> out;
  out.reserve(images.size());
  Rng base = Rng(master_seed).derive("pair-dataset");
  for (std::size_t i = 0; i < images.size(); ++i) {
    Rng rec = base.derive(static_cast<std::uint64_t>(opt.first_record) +
                          static_cast<std::uint64_t>(i));
    Rng op_rng = rec.derive("operators");
    MeasurementOp<T> t1 = dist.sample(op_rng);
    MeasurementOp<T> t2 = dist.sample(op_rng);
    int guard = 0;
    while (t2.equals(t1)) {
      if (++guard > 64)
        throw TensorError("distribution cannot produce two distinct parameters");
      t2 = dist.sample(op_rng);
    }
    Rng seed_rng = rec.derive("noise-seeds");
    std::uint64_t s1 = seed_rng.next_u64();
    std::uint64_t s2 = seed_rng.next_u64();
    MeasurementPair<T> pair;
    pair.y1 = measure(t1, images[i], noise, s1);
    pair.y2 = measure(t2, images[i], noise, s2);
    pair.record_seed = s1;
    if (!opt.blind) {
      pair.theta1 = t1;
      pair.theta2 = t2;
    }
    if (opt.keep_eval) pair.x_eval = images[i].clone();
    out.push_back(std::move(pair));
  }
  return out;
}

// ---------------- Q diagnostics ----------------

namespace {
constexpr std::int64_t kMaxMaterializeDim = 4096;
}

template <typename T>
Eigen::MatrixXd materialize(const MeasurementOp<T>& theta, std::int64_t H, std::int64_t W) {
  std::int64_t N = H * W;
  if (N > kMaxMaterializeDim)
    throw TensorError("cannot materialize operator over " + std::to_string(N) +
                      " pixels (limit " + std::to_string(kMaxMaterializeDim) + ")");
  GaussianNoise<T> noiseless;
  Eigen::MatrixXd M;
  for (std::int64_t j = 0; j < N; ++j) {
    Tensor<T> delta = Tensor<T>::zeros({H, W});
    delta.mutable_values()[static_cast<std::size_t>(j)] = T(1);
    Tensor<T> col = measure(theta, delta, noiseless, 0);
    if (j == 0) M.resize(static_cast<Eigen::Index>(col.numel()), N);
    auto v = col.values();
    for (std::int64_t r = 0; r < col.numel(); ++r)
      M(r, j) = static_cast<double>(v[static_cast<std::size_t>(r)]);
  }
  return M;
}

namespace {

// autocorrelation of a kernel, support (2k-1)^2, acc[dy+k-1][dx+k-1]
template <typename T>
void accumulate_autocorr(const Tensor<T>& kernel, std::vector<double>& acc) {
  std::int64_t kh = kernel.dim(0), kw = kernel.dim(1);
  auto v = kernel.values();
  std::int64_t ah = 2 * kh - 1, aw = 2 * kw - 1;
  for (std::int64_t dy = -(kh - 1); dy <= kh - 1; ++dy)
    for (std::int64_t dx = -(kw - 1); dx <= kw - 1; ++dx) {
      double s = 0;
      for (std::int64_t y = std::max<std::int64_t>(0, -dy); y < std::min(kh, kh - dy); ++y)
        for (std::int64_t x = std::max<std::int64_t>(0, -dx); x < std::min(kw, kw - dx); ++x)
          s += static_cast<double>(v[y * kw + x]) *
               static_cast<double>(v[(y + dy) * kw + (x + dx)]);
      acc[static_cast<std::size_t>((dy + kh - 1) * aw + (dx + kw - 1))] += s;
    }
  (void)ah;
}

Eigen::MatrixXd circulant_from_autocorr(const std::vector<double>& acc, std::int64_t k,
                                        std::int64_t H, std::int64_t W) {
  std::int64_t aw = 2 * k - 1;
  Eigen::MatrixXd Q(H * W, H * W);
  Q.setZero();
  auto wrap_centered = [](std::int64_t d, std::int64_t n) {
    d %= n;
    if (d < 0) d += n;
    if (d > n / 2) d -= n;
    return d;
  };
  for (std::int64_t ar = 0; ar < H; ++ar)
    for (std::int64_t ac = 0; ac < W; ++ac)
      for (std::int64_t br = 0; br < H; ++br)
        for (std::int64_t bc = 0; bc < W; ++bc) {
          std::int64_t dy = wrap_centered(br - ar, H);
          std::int64_t dx = wrap_centered(bc - ac, W);
          if (std::abs(dy) > k - 1 || std::abs(dx) > k - 1) continue;
          Q(ar * W + ac, br * W + bc) =
              acc[static_cast<std::size_t>((dy + k - 1) * aw + (dx + k - 1))];
        }
  return Q;
}

}  // namespace

template <typename T>
Eigen::MatrixXd gram_expectation(const ParamDistribution<T>& dist, int n_samples,
                                 std::int64_t H, std::int64_t W, std::uint64_t seed) {
  std::int64_t N = H * W;
  if (N > kMaxMaterializeDim)
    throw TensorError("gram matrix over " + std::to_string(N) + " pixels exceeds the " +
                      std::to_string(kMaxMaterializeDim) + " limit");
  if (dist.enumerable()) {
    auto ops = dist.enumerate();
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(N, N);
    for (const auto& op : ops) {
      Eigen::MatrixXd M = materialize(op, H, W);
      Q.noalias() += M.transpose() * M;
    }
    return Q / static_cast<double>(ops.size());
  }
  if (dist.kind() == ParamDistribution<T>::Kind::cs_fresh) {
    // phi^T phi projects onto a uniformly random m-dimensional row space, so
    // its expectation is (m / p^2) I on every covered pixel; border pixels
    // outside the offset-(0,0) patch grid are never measured
    std::int64_t p = dist.patch_size();
    double w = static_cast<double>(dist.measurements_per_patch()) / static_cast<double>(p * p);
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(N, N);
    std::int64_t rows = (H / p) * p, cols = (W / p) * p;
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cols; ++c) Q(r * W + c, r * W + c) = w;
    return Q;
  }
  if (n_samples < 1) throw TensorError("need at least one sample");
  Rng rng = Rng(seed).derive("gram-expectation");
  if (dist.kind() == ParamDistribution<T>::Kind::motion_kernels &&
      dist.boundary() == Boundary::circular && H >= 2 * dist.kernel_size() - 1 &&
      W >= 2 * dist.kernel_size() - 1) {
    // theta^T theta of a circular convolution is itself circulant, with
    // kernel equal to the blur kernel's autocorrelation; averaging kernels
    // commutes with building the matrix
    std::int64_t k = dist.kernel_size();
    std::vector<double> acc(static_cast<std::size_t>((2 * k - 1) * (2 * k - 1)), 0.0);
    for (int i = 0; i < n_samples; ++i) {
      MeasurementOp<T> op = dist.sample(rng);
      accumulate_autocorr(op.conv().kernel(), acc);
    }
    for (auto& v : acc) v /= n_samples;
    return circulant_from_autocorr(acc, k, H, W);
  }
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(N, N);
  for (int i = 0; i < n_samples; ++i) {
    Eigen::MatrixXd M = materialize(dist.sample(rng), H, W);
    Q.noalias() += M.transpose() * M;
  }
  return Q / static_cast<double>(n_samples);
}

QRankReport q_rank_report(const Eigen::MatrixXd& Q, double rel_threshold) {
  if (Q.rows() != Q.cols()) throw TensorError("gram matrix must be square");
  double scale = Q.cwiseAbs().maxCoeff();
  double asym = (Q - Q.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * std::max(scale, 1.0))
    throw TensorError("gram matrix is not symmetric (deviation " + std::to_string(asym) + ")");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((Q + Q.transpose()) / 2.0);
  if (es.info() != Eigen::Success) throw TensorError("eigendecomposition failed");
  QRankReport rep;
  rep.rel_threshold = rel_threshold;
  Eigen::VectorXd ev = es.eigenvalues();
  rep.eigenvalues.assign(ev.data(), ev.data() + ev.size());
  std::sort(rep.eigenvalues.begin(), rep.eigenvalues.end(), std::greater<double>());
  double lmax = rep.eigenvalues.empty() ? 0.0 : std::max(rep.eigenvalues.front(), 0.0);
  double cut = rel_threshold * lmax;
  rep.rank = static_cast<int>(
      std::count_if(rep.eigenvalues.begin(), rep.eigenvalues.end(),
                    [cut](double l) { return l > cut && l > 0.0; }));
  rep.full_rank = rep.rank == static_cast<int>(Q.rows());
  rep.null_dim = static_cast<int>(Q.rows()) - rep.rank;
  return rep;
}

// ---------------- spectra ----------------

template <typename T>
SpectrumReport kernel_spectrum(const std::vector<Tensor<T>>& kernels, std::int64_t H,
                               std::int64_t W) {
  if (kernels.empty()) throw TensorError("no kernels to analyze");
  std::int64_t kh_max = 0, kw_max = 0;
  for (const auto& k : kernels) {
    if (k.rank() != 2) throw TensorError("kernels must be [kh,kw]");
    kh_max = std::max(kh_max, k.dim(0));
    kw_max = std::max(kw_max, k.dim(1));
  }
  if (H < 0) H = kh_max;
  if (W < 0) W = kw_max;
  if (kh_max > H || kw_max > W)
    throw TensorError("kernel exceeds the requested spectrum size");

  SpectrumReport rep;
  rep.H = H;
  rep.W = W;
  rep.average.assign(static_cast<std::size_t>(H * W), 0.0);

  // row-column DFT with precomputed twiddles
  std::vector<double> cw(static_cast<std::size_t>(W) * W), sw(cw.size());
  std::vector<double> ch(static_cast<std::size_t>(H) * H), sh(ch.size());
  for (std::int64_t v = 0; v < W; ++v)
    for (std::int64_t x = 0; x < W; ++x) {
      double ang = -2.0 * std::numbers::pi * static_cast<double>(v * x) / W;
      cw[static_cast<std::size_t>(v * W + x)] = std::cos(ang);
      sw[static_cast<std::size_t>(v * W + x)] = std::sin(ang);
    }
  for (std::int64_t u = 0; u < H; ++u)
    for (std::int64_t y = 0; y < H; ++y) {
      double ang = -2.0 * std::numbers::pi * static_cast<double>(u * y) / H;
      ch[static_cast<std::size_t>(u * H + y)] = std::cos(ang);
      sh[static_cast<std::size_t>(u * H + y)] = std::sin(ang);
    }

  std::vector<double> re_rows(static_cast<std::size_t>(H * W)), im_rows(re_rows.size());
  for (const auto& k : kernels) {
    std::int64_t kh = k.dim(0), kw = k.dim(1);
    auto kv = k.values();
    // rows: x -> v
    std::fill(re_rows.begin(), re_rows.end(), 0.0);
    std::fill(im_rows.begin(), im_rows.end(), 0.0);
    for (std::int64_t y = 0; y < kh; ++y)
      for (std::int64_t v = 0; v < W; ++v) {
        double re = 0, im = 0;
        for (std::int64_t x = 0; x < kw; ++x) {
          double f = static_cast<double>(kv[y * kw + x]);
          re += f * cw[static_cast<std::size_t>(v * W + x)];
          im += f * sw[static_cast<std::size_t>(v * W + x)];
        }
        re_rows[static_cast<std::size_t>(y * W + v)] = re;
        im_rows[static_cast<std::size_t>(y * W + v)] = im;
      }
    // columns: y -> u
    std::vector<double> mag(static_cast<std::size_t>(H * W));
    for (std::int64_t v = 0; v < W; ++v)
      for (std::int64_t u = 0; u < H; ++u) {
        double re = 0, im = 0;
        for (std::int64_t y = 0; y < kh; ++y) {
          double c = ch[static_cast<std::size_t>(u * H + y)];
          double s = sh[static_cast<std::size_t>(u * H + y)];
          double rr = re_rows[static_cast<std::size_t>(y * W + v)];
          double ii = im_rows[static_cast<std::size_t>(y * W + v)];
          re += rr * c - ii * s;
          im += rr * s + ii * c;
        }
        mag[static_cast<std::size_t>(u * W + v)] = std::sqrt(re * re + im * im);
      }
    for (std::size_t i = 0; i < mag.size(); ++i) rep.average[i] += mag[i];
    rep.per_kernel.push_back(std::move(mag));
  }
  for (auto& v : rep.average) v /= static_cast<double>(kernels.size());
  rep.avg_min = *std::min_element(rep.average.begin(), rep.average.end());
  rep.avg_max = *std::max_element(rep.average.begin(), rep.average.end());
  return rep;
}

// ---------------- instantiations ----------------

#define PAIRMEAS_MEAS_INSTANTIATE(T)                                                         \
  template struct GaussianNoise<T>;                                                          \
  template class CompressivePatchOp<T>;                                                      \
  template class ConvolutionOp<T>;                                                           \
  template class MeasurementOp<T>;                                                           \
  template class ParamDistribution<T>;                                                       \
  template Tensor<T> measure(const MeasurementOp<T>&, const Tensor<T>&,                      \
                             const GaussianNoise<T>&, std::uint64_t);                        \
  template Tensor<T> adjoint_input(const MeasurementOp<T>&, const Tensor<T>&);               \
  template Tensor<T> sample_motion_kernel<T>(int, int, Rng&);                                \
  template ConvolutionOp<T> sample_motion_kernel(const ParamDistribution<T>&,                \
                                                 std::uint64_t);                             \
  template Tensor<T> orthonormal_rows<T>(int, int, Rng&);                                    \
  template std::vector<MeasurementPair<T>> build_pair_dataset(                               \
      const std::vector<Tensor<T>>&, const ParamDistribution<T>&, const GaussianNoise<T>&,   \
      std::uint64_t, const PairDatasetOptions&);                                             \
  template Eigen::MatrixXd materialize(const MeasurementOp<T>&, std::int64_t, std::int64_t); \
  template Eigen::MatrixXd gram_expectation(const ParamDistribution<T>&, int, std::int64_t,  \
                                            std::int64_t, std::uint64_t);                    \
  template SpectrumReport kernel_spectrum(const std::vector<Tensor<T>>&, std::int64_t,       \
                                          std::int64_t);                                     \
  template Tensor<T> blur_with_kernel(const Tensor<T>&, const Tensor<T>&, Boundary);

PAIRMEAS_MEAS_INSTANTIATE(float)
PAIRMEAS_MEAS_INSTANTIATE(double)

#undef PAIRMEAS_MEAS_INSTANTIATE

}  // namespace pairmeas

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "pairmeas/losses.hpp"
#include "pairmeas/measurement.hpp"

using namespace pairmeas;

namespace {

using Vec = std::vector<Tensor<double>>;

Tensor<double> delta_kernel(int k) {
  auto t = Tensor<double>::zeros({k, k});
  t.mutable_values()[static_cast<std::size_t>(k / 2) * k + k / 2] = 1.0;
  return t;
}

Tensor<double> uniform_kernel(int k) {
  return Tensor<double>::full({k, k}, 1.0 / (k * k));
}

// true patches of each record's evaluation image, the zero-loss predictor
Vec true_patches(const std::vector<MeasurementPair<double>>& pairs, int which, std::int64_t H,
                 std::int64_t W) {
  Vec out;
  for (const auto& pr : pairs) {
    const auto& op = (which == 1 ? pr.theta1 : pr.theta2).cs();
    out.push_back(
        patch_gather(pr.x_eval, op.dy(), op.dx(), op.grid_h(H), op.grid_w(W), op.patch_size()));
  }
  return out;
}

double mean_sq(const Tensor<double>& t) {
  double s = 0;
  for (double v : t.values()) s += v * v;
  return s / static_cast<double>(t.numel());
}

}  // namespace

TEST_CASE("rho reduces by element mean") {
  auto r = Tensor<double>::from({4}, {1.0, -2.0, 3.0, 0.0});
  CHECK(rho_mean(r, Norm::l2).item() == doctest::Approx(3.5));
  CHECK(rho_mean(r, Norm::l1).item() == doctest::Approx(1.5));
  auto z = Tensor<double>::zeros({3, 3});
  CHECK(rho_mean(z, Norm::l2).item() == 0.0);
  CHECK(rho_mean(z, Norm::l1).item() == 0.0);
  Rng rng(7);
  auto nz = Tensor<double>::randn({5, 5}, rng);
  CHECK(rho_mean(nz, Norm::l2).item() > 0.0);
  CHECK(rho_mean(nz, Norm::l1).item() > 0.0);
}

TEST_CASE("l1 penalty has zero gradient at a zero residual") {
  auto r = Tensor<double>::zeros({4});
  r.set_requires_grad(true);
  Tape<double> tape;
  auto l = rho_mean(r, Norm::l1);
  backward(l);
  REQUIRE(r.has_grad());
  for (double g : r.grad()) CHECK(g == 0.0);
}

TEST_CASE("exact patch predictions at zero noise give exactly zero loss") {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    int p = 3 + static_cast<int>(rng.uniform_int(3));  // 3..5
    std::int64_t H = p * (2 + static_cast<std::int64_t>(rng.uniform_int(2))) +
                     static_cast<std::int64_t>(rng.uniform_int(p));
    std::int64_t W = p * (2 + static_cast<std::int64_t>(rng.uniform_int(2))) +
                     static_cast<std::int64_t>(rng.uniform_int(p));
    int m = 1 + static_cast<int>(rng.uniform_int(p * p));
    Rng prng = rng.derive("phi");
    auto dist = ParamDistribution<double>::cs_shifted(orthonormal_rows<double>(m, p * p, prng), p);
    std::vector<Tensor<double>> imgs = {Tensor<double>::randn({H, W}, rng)};
    auto pairs = build_pair_dataset(imgs, dist, GaussianNoise<double>{0.0}, rng.next_u64(), {});
    auto f1 = true_patches(pairs, 1, H, W);
    auto f2 = true_patches(pairs, 2, H, W);
    CHECK(swap_loss_cs(f1, f2, pairs, H, W, Norm::l2).item() == 0.0);
    CHECK(self_loss_cs(f1, f2, pairs, Norm::l2).item() == 0.0);
    CHECK(swap_loss_cs(f1, f2, pairs, H, W, Norm::l1).item() == 0.0);
  }
}

TEST_CASE("exact image predictions at zero noise give exactly zero blur loss") {
  Rng rng(13);
  for (int trial = 0; trial < 25; ++trial) {
    Boundary b = trial % 2 == 0 ? Boundary::zero : Boundary::circular;
    auto dist = ParamDistribution<double>::motion_kernels(5, 6, b);
    std::int64_t H = 11 + static_cast<std::int64_t>(rng.uniform_int(6));
    std::vector<Tensor<double>> imgs = {Tensor<double>::randn({H, H}, rng)};
    auto pairs = build_pair_dataset(imgs, dist, GaussianNoise<double>{0.0}, rng.next_u64(), {});
    Vec f = {pairs[0].x_eval.clone()};
    auto k1 = pair_kernels(pairs, 1);
    auto k2 = pair_kernels(pairs, 2);
    Vec y1 = {pairs[0].y1}, y2 = {pairs[0].y2};
    int crop = trial % 3 == 0 ? 0 : 2;
    CHECK(swap_loss_blur(f, f, k1, k2, y1, y2, Norm::l2, b, crop).item() == 0.0);
    CHECK(self_loss_blur(f, f, k1, k2, y1, y2, Norm::l2, b, crop).item() == 0.0);
  }
}

TEST_CASE("zero predictor reduces the swap loss to measurement energy") {
  Rng rng(17);
  int p = 4, m = 5;
  std::vector<Tensor<double>> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(Tensor<double>::randn({p, p}, rng));
  auto dist = ParamDistribution<double>::cs_fresh(m, p);
  auto pairs = build_pair_dataset(imgs, dist, GaussianNoise<double>{0.0}, 99, {});
  Vec f1, f2;
  for (std::size_t t = 0; t < pairs.size(); ++t) {
    f1.push_back(Tensor<double>::zeros({1, p, p}));
    f2.push_back(Tensor<double>::zeros({1, p, p}));
  }
  double expect = 0;
  for (const auto& pr : pairs) expect += mean_sq(pr.y2) + mean_sq(pr.y1);
  expect /= static_cast<double>(pairs.size());
  CHECK(swap_loss_cs(f1, f2, pairs, p, p, Norm::l2).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("swap loss matches its expectation identity under fresh projections") {
  // fresh m-row orthonormal projections of an n-pixel patch satisfy
  // E[theta^T theta] = (m/n) I, so the cross-measurement expectation has the
  // closed form 2 sigma^2 + (2/m) E[delta^T Q delta] under element-mean rho
  Rng rng(23);
  const int p = 4, n = p * p, m = 4, draws = 20000;
  const double sigma = 0.1;
  auto dist = ParamDistribution<double>::cs_fresh(m, p);
  // fixed linear estimator f(y) = W theta^T y, kept away from the identity
  auto w = Tensor<double>::zeros({n, n});
  {
    Rng wr(5);
    auto g = Tensor<double>::randn({n, n}, wr);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        w.mutable_values()[static_cast<std::size_t>(i) * n + j] =
            (i == j ? 0.8 : 0.0) + 0.1 * g.values()[static_cast<std::size_t>(i) * n + j];
  }
  GaussianNoise<double> noise{sigma};
  double lhs = 0, quad = 0;
  for (int d = 0; d < draws; ++d) {
    auto x = Tensor<double>::randn({p, p}, rng);
    std::vector<Tensor<double>> img = {x};
    auto pairs = build_pair_dataset(img, dist, noise, rng.next_u64(), {});
    const auto& pr = pairs[0];
    auto fof = [&](const Tensor<double>& y, const MeasurementOp<double>& th) {
      auto z = reshape(th.cs().adjoint_patches(y), {n, 1});
      return reshape(matmul(w, z), {1, p, p});
    };
    Vec f1 = {fof(pr.y1, pr.theta1)};
    Vec f2 = {fof(pr.y2, pr.theta2)};
    lhs += swap_loss_cs(f1, f2, pairs, p, p, Norm::l2).item();
    for (int side = 0; side < 2; ++side) {
      const auto& f = side == 0 ? f1[0] : f2[0];
      double q = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        double dlt = f.values()[static_cast<std::size_t>(i)] -
                     x.values()[static_cast<std::size_t>(i)];
        q += dlt * dlt;
      }
      quad += (static_cast<double>(m) / n) * q;
    }
  }
  lhs /= draws;
  // quad sums delta'Q delta over both directions of every draw
  double rhs = 2 * sigma * sigma + quad / (draws * static_cast<double>(m));
  double rel = std::abs(lhs - rhs) / rhs;
  INFO("lhs=", lhs, " rhs=", rhs, " rel=", rel);
  CHECK(rel < 0.025);
}

TEST_CASE("row-orthonormal projections make the adjoint a self-consistent predictor") {
  // theta theta^T = I for orthonormal rows, so f = theta^T y reproduces y
  Rng rng(29);
  int p = 4, m = 6;
  std::vector<Tensor<double>> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(Tensor<double>::randn({p, p}, rng));
  auto dist = ParamDistribution<double>::cs_fresh(m, p);
  auto pairs = build_pair_dataset(imgs, dist, GaussianNoise<double>{0.05}, 1234, {});
  Vec f1, f2;
  for (const auto& pr : pairs) {
    f1.push_back(pr.theta1.cs().adjoint_patches(pr.y1));
    f2.push_back(pr.theta2.cs().adjoint_patches(pr.y2));
  }
  CHECK(self_loss_cs(f1, f2, pairs, Norm::l2).item() < 1e-24);
}

TEST_CASE("parameter proxy penalty on a uniform estimate of a delta kernel") {
  Vec est = {uniform_kernel(3)};
  Vec tgt = {delta_kernel(3)};
  CHECK(proxy_param_loss(est, tgt, Norm::l1).item() == doctest::Approx(16.0 / 81.0));
}

TEST_CASE("image proxy penalty between constant images") {
  Vec est = {Tensor<double>::zeros({2, 2})};
  Vec tgt = {Tensor<double>::full({2, 2}, 1.0)};
  CHECK(proxy_image_loss(est, tgt, Norm::l1).item() == doctest::Approx(1.0));
  CHECK(proxy_image_loss(est, tgt, Norm::l2).item() == doctest::Approx(1.0));
}

TEST_CASE("losses are invariant to record order") {
  Rng rng(31);
  std::int64_t H = 8;
  int p = 4, m = 7;
  std::vector<Tensor<double>> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(Tensor<double>::randn({H, H}, rng));
  Rng prng = rng.derive("phi");
  auto dist = ParamDistribution<double>::cs_shifted(orthonormal_rows<double>(m, p * p, prng), p);
  auto pairs = build_pair_dataset(imgs, dist, GaussianNoise<double>{0.02}, 4321, {});
  Vec f1, f2;
  for (const auto& pr : pairs) {
    const auto& a = pr.theta1.cs();
    const auto& b = pr.theta2.cs();
    f1.push_back(Tensor<double>::randn(
        {static_cast<std::int64_t>(a.grid_h(H)) * a.grid_w(H), p, p}, rng));
    f2.push_back(Tensor<double>::randn(
        {static_cast<std::int64_t>(b.grid_h(H)) * b.grid_w(H), p, p}, rng));
  }
  double sw = swap_loss_cs(f1, f2, pairs, H, H, Norm::l2).item();
  double se = self_loss_cs(f1, f2, pairs, Norm::l1).item();
  auto rev = [](auto v) {
    std::reverse(v.begin(), v.end());
    return v;
  };
  auto rpairs = pairs;
  std::reverse(rpairs.begin(), rpairs.end());
  CHECK(swap_loss_cs(rev(f1), rev(f2), rpairs, H, H, Norm::l2).item() ==
        doctest::Approx(sw).epsilon(1e-12));
  CHECK(self_loss_cs(rev(f1), rev(f2), rpairs, Norm::l1).item() ==
        doctest::Approx(se).epsilon(1e-12));
}

TEST_CASE("losses are nonnegative on random inputs") {
  Rng rng(37);
  Vec est = {Tensor<double>::randn({3, 3}, rng)}, tgt = {Tensor<double>::randn({3, 3}, rng)};
  CHECK(proxy_param_loss(est, tgt, Norm::l2).item() >= 0.0);
  CHECK(proxy_param_loss(est, tgt, Norm::l1).item() >= 0.0);
  Vec f = {Tensor<double>::randn({9, 9}, rng)};
  Vec k = {uniform_kernel(3)};
  Vec y = {Tensor<double>::randn({9, 9}, rng)};
  CHECK(swap_loss_blur(f, f, k, k, y, y, Norm::l2, Boundary::zero, 1).item() >= 0.0);
  CHECK(self_loss_blur(f, f, k, k, y, y, Norm::l1, Boundary::zero, 1).item() >= 0.0);
}

TEST_CASE("combined objective weights its parts") {
  auto s = [](double v) { return Tensor<double>::scalar(v); };
  Tensor<double> none;
  CHECK(combined_objective(s(2.0), s(3.0), none, none, {0.05, 0.0, 0.0}).item() ==
        doctest::Approx(2.15));
  CHECK(combined_objective(s(2.0), s(3.0), s(5.0), s(7.0), {1.0, 1.0, 1.0}).item() ==
        doctest::Approx(17.0));
  CHECK(combined_objective(s(0.0), s(0.0), s(0.0), s(0.0), {1.0, 1.0, 1.0}).item() == 0.0);
  CHECK(combined_objective(s(2.0), s(3.0), s(99.0), none, {1.0, 0.0, 0.0}).item() ==
        doctest::Approx(5.0));
  CHECK_THROWS_AS(combined_objective(s(1.0), none, none, none, {0.1, 0.0, 0.0}), TensorError);
  CHECK_THROWS_AS(combined_objective(s(1.0), s(1.0), none, none, {-0.1, 0.0, 0.0}), TensorError);
  CHECK_THROWS_AS(combined_objective(none, none, none, none, {0.0, 0.0, 0.0}), TensorError);
  CHECK_THROWS_AS(
      combined_objective(s(1.0), Tensor<double>::zeros({2}), none, none, {1.0, 0.0, 0.0}),
      TensorError);
}

TEST_CASE("detached kernel estimates leave the estimator untouched by swap and self") {
  Rng rng(41);
  auto logits = Tensor<double>::randn({3, 3}, rng);
  logits.set_requires_grad(true);
  auto f1 = Tensor<double>::randn({8, 8}, rng);
  auto f2 = Tensor<double>::randn({8, 8}, rng);
  f1.set_requires_grad(true);
  f2.set_requires_grad(true);
  Vec y1 = {Tensor<double>::randn({8, 8}, rng)}, y2 = {Tensor<double>::randn({8, 8}, rng)};
  {
    Tape<double> tape;
    auto khat = spatial_softmax(logits);
    auto kstop = stop_gradient(khat);
    Vec ks = {kstop};
    auto sw = swap_loss_blur({f1}, {f2}, ks, ks, y1, y2, Norm::l2, Boundary::zero, 1);
    auto se = self_loss_blur({f1}, {f2}, ks, ks, y1, y2, Norm::l2, Boundary::zero, 1);
    Tensor<double> none;
    backward(combined_objective(sw, se, none, none, {0.05, 0.0, 0.0}));
    CHECK_FALSE(logits.has_grad());
    CHECK(f1.has_grad());
    CHECK(f2.has_grad());
  }
}

TEST_CASE("estimator gradient comes from the parameter proxy alone") {
  Rng rng(43);
  auto logits = Tensor<double>::randn({3, 3}, rng);
  auto target = delta_kernel(3);
  auto f1 = Tensor<double>::randn({8, 8}, rng);
  auto f2 = Tensor<double>::randn({8, 8}, rng);
  Vec y1 = {Tensor<double>::randn({8, 8}, rng)}, y2 = {Tensor<double>::randn({8, 8}, rng)};

  auto full = logits.clone();
  full.set_requires_grad(true);
  {
    Tape<double> tape;
    auto khat = spatial_softmax(full);
    Vec ks = {stop_gradient(khat)};
    auto sw = swap_loss_blur({f1}, {f2}, ks, ks, y1, y2, Norm::l2, Boundary::zero, 1);
    auto se = self_loss_blur({f1}, {f2}, ks, ks, y1, y2, Norm::l2, Boundary::zero, 1);
    auto pp = proxy_param_loss(Vec{khat}, Vec{target}, Norm::l2);
    Tensor<double> none;
    backward(combined_objective(sw, se, pp, none, {0.05, 0.7, 0.0}));
  }
  auto alone = logits.clone();
  alone.set_requires_grad(true);
  {
    Tape<double> tape;
    auto khat = spatial_softmax(alone);
    backward(scale(proxy_param_loss(Vec{khat}, Vec{target}, Norm::l2), 0.7));
  }
  REQUIRE(full.has_grad());
  REQUIRE(alone.has_grad());
  for (std::int64_t i = 0; i < full.numel(); ++i)
    CHECK(full.grad()[static_cast<std::size_t>(i)] == alone.grad()[static_cast<std::size_t>(i)]);
}

TEST_CASE("swap compares only fully covered patches") {
  // partition a tiles [3,7)^2 of an 8x8 canvas, partition b tiles all of it:
  // b's predictions fully cover a's single patch but not the reverse
  Rng rng(47);
  int p = 4;
  std::int64_t H = 8;
  Rng prng = rng.derive("phi");
  auto phi = orthonormal_rows<double>(5, p * p, prng);
  CompressivePatchOp<double> a(phi, p, 3, 3), b(phi, p, 0, 0);
  auto x = Tensor<double>::randn({H, H}, rng);
  MeasurementPair<double> pr;
  pr.theta1 = MeasurementOp<double>(a);
  pr.theta2 = MeasurementOp<double>(b);
  pr.y1 = a.measure_image(x);
  pr.y2 = b.measure_image(x);
  pr.x_eval = x.clone();
  std::vector<MeasurementPair<double>> pairs = {pr};

  auto garbage = Tensor<double>::randn({1, p, p}, rng);
  auto f2_true = patch_gather(x, 0, 0, 2, 2, p);
  std::vector<MeasurementPair<double>> ps = pairs;
  CHECK(swap_loss_cs({garbage}, {f2_true.clone()}, ps, H, H, Norm::l2).item() == 0.0);

  // shifting b's predictions by a constant leaks through only via a's patch
  auto ones = Tensor<double>::full({4, p, p}, 1.0);
  auto f2_off = add(f2_true, ones);
  auto inner = patch_gather(add(x, Tensor<double>::full({H, H}, 1.0)), 3, 3, 1, 1, p);
  double expect = rho_mean(sub(a.measure_patches(inner), pr.y1), Norm::l2).item();
  CHECK(swap_loss_cs({garbage}, {f2_off}, ps, H, H, Norm::l2).item() ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("corrupting an uncovered measurement row leaves the swap loss alone") {
  Rng rng(53);
  int p = 4;
  std::int64_t H = 12, W = 12;
  Rng prng = rng.derive("phi");
  auto phi = orthonormal_rows<double>(6, p * p, prng);
  CompressivePatchOp<double> a(phi, p, 0, 0), b(phi, p, 2, 1);
  auto x = Tensor<double>::randn({H, W}, rng);
  MeasurementPair<double> pr;
  pr.theta1 = MeasurementOp<double>(a);
  pr.theta2 = MeasurementOp<double>(b);
  pr.y1 = a.measure_image(x);
  pr.y2 = b.measure_image(x);
  std::vector<MeasurementPair<double>> pairs = {pr};
  Vec f1 = {Tensor<double>::randn({9, p, p}, rng)};
  Vec f2 = {Tensor<double>::randn({4, p, p}, rng)};
  double base = swap_loss_cs(f1, f2, pairs, H, W, Norm::l2).item();

  // only the (1,1) patch of partition a fits inside partition b's tiling, so
  // rows other than 1*3+1 = 4 of y1 never enter the loss
  auto corrupt_row = [&](int row) {
    auto mod = pairs;
    mod[0].y1 = pairs[0].y1.clone();
    for (int j = 0; j < 6; ++j)
      mod[0].y1.mutable_values()[static_cast<std::size_t>(row) * 6 + j] += 100.0;
    return swap_loss_cs(f1, f2, mod, H, W, Norm::l2).item();
  };
  CHECK(corrupt_row(0) == base);
  CHECK(corrupt_row(8) == base);
  CHECK(corrupt_row(4) > base + 1.0);
}

TEST_CASE("blur swap crops boundary pixels out of the objective") {
  // delta kernels turn the blur into the identity, so the residual is f - y
  Vec f = {Tensor<double>::zeros({4, 4})};
  Vec k = {delta_kernel(3)};
  auto y = Tensor<double>::full({4, 4}, 1e6);
  for (int i = 1; i < 3; ++i)
    for (int j = 1; j < 3; ++j) y.mutable_values()[static_cast<std::size_t>(i) * 4 + j] = 1.0;
  Vec ys = {y};
  CHECK(swap_loss_blur(f, f, k, k, ys, ys, Norm::l1, Boundary::zero, 1).item() ==
        doctest::Approx(2.0));
  CHECK(self_loss_blur(f, f, k, k, ys, ys, Norm::l1, Boundary::zero, 1).item() ==
        doctest::Approx(2.0));
}

TEST_CASE("record kernels extract in order") {
  Rng rng(59);
  auto dist = ParamDistribution<double>::motion_kernels(5, 6, Boundary::zero);
  std::vector<Tensor<double>> imgs = {Tensor<double>::randn({12, 12}, rng),
                                      Tensor<double>::randn({12, 12}, rng)};
  auto pairs = build_pair_dataset(imgs, dist, GaussianNoise<double>{0.01}, 777, {});
  auto k1 = pair_kernels(pairs, 1);
  auto k2 = pair_kernels(pairs, 2);
  REQUIRE(k1.size() == 2);
  for (std::size_t t = 0; t < pairs.size(); ++t) {
    const auto& a = pairs[t].theta1.conv().kernel();
    const auto& c = pairs[t].theta2.conv().kernel();
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      CHECK(k1[t].values()[static_cast<std::size_t>(i)] ==
            a.values()[static_cast<std::size_t>(i)]);
      CHECK(k2[t].values()[static_cast<std::size_t>(i)] ==
            c.values()[static_cast<std::size_t>(i)]);
    }
  }
  CHECK_THROWS_AS(pair_kernels(pairs, 3), TensorError);
}

TEST_CASE("assembled patch loss graph passes finite differences") {
  Rng rng(61);
  std::int64_t H = 8;
  int p = 4, m = 5;
  Rng prng = rng.derive("phi");
  auto dist = ParamDistribution<double>::cs_shifted(orthonormal_rows<double>(m, p * p, prng), p);
  std::vector<Tensor<double>> imgs = {Tensor<double>::randn({H, H}, rng)};
  auto pairs = build_pair_dataset(imgs, dist, GaussianNoise<double>{0.05}, 2718, {});
  const auto& a = pairs[0].theta1.cs();
  const auto& b = pairs[0].theta2.cs();
  std::vector<Tensor<double>> inputs = {
      Tensor<double>::randn({static_cast<std::int64_t>(a.grid_h(H)) * a.grid_w(H), p, p}, rng),
      Tensor<double>::randn({static_cast<std::int64_t>(b.grid_h(H)) * b.grid_w(H), p, p}, rng)};
  auto res = gradcheck_detail::check_gradients(
      inputs, [&](std::vector<Tensor<double>>& v) {
        auto sw = swap_loss_cs({v[0]}, {v[1]}, pairs, H, H, Norm::l2);
        auto se = self_loss_cs({v[0]}, {v[1]}, pairs, Norm::l2);
        Tensor<double> none;
        return combined_objective(sw, se, none, none, {0.3, 0.0, 0.0});
      });
  INFO(res.where, " worst=", res.worst);
  CHECK(res.ok);
}

TEST_CASE("blur loss graph passes finite differences through images and kernels") {
  Rng rng(67);
  for (Boundary bd : {Boundary::zero, Boundary::circular}) {
    std::vector<Tensor<double>> inputs = {
        Tensor<double>::randn({6, 6}, rng), Tensor<double>::randn({6, 6}, rng),
        Tensor<double>::randn({3, 3}, rng), Tensor<double>::randn({3, 3}, rng)};
    Vec y1 = {Tensor<double>::randn({6, 6}, rng)}, y2 = {Tensor<double>::randn({6, 6}, rng)};
    auto res = gradcheck_detail::check_gradients(
        inputs, [&](std::vector<Tensor<double>>& v) {
          Vec k1 = {spatial_softmax(v[2])}, k2 = {spatial_softmax(v[3])};
          auto sw = swap_loss_blur({v[0]}, {v[1]}, k1, k2, y1, y2, Norm::l2, bd, 1);
          auto se = self_loss_blur({v[0]}, {v[1]}, k1, k2, y1, y2, Norm::l2, bd, 1);
          Tensor<double> none;
          return combined_objective(sw, se, none, none, {0.5, 0.0, 0.0});
        });
    INFO(res.where, " worst=", res.worst);
    CHECK(res.ok);
  }
}

TEST_CASE("proxy losses reject mismatched batches") {
  Vec one = {Tensor<double>::zeros({2, 2})};
  Vec two = {Tensor<double>::zeros({2, 2}), Tensor<double>::zeros({2, 2})};
  CHECK_THROWS_AS(proxy_param_loss(one, two, Norm::l2), TensorError);
  CHECK_THROWS_AS(proxy_image_loss(Vec{}, Vec{}, Norm::l2), TensorError);
}

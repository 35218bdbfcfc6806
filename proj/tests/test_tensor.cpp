#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "pairmeas/tensor.hpp"

using namespace pairmeas;

namespace {
double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
}  // namespace

TEST_CASE("shape helpers") {
  CHECK(shape_numel({}) == 1);
  CHECK(shape_numel({2, 3, 4}) == 24);
  CHECK(shape_str({2, 3}) == "[2x3]");
  CHECK_THROWS_AS(Tensor<double>::zeros({2, 0}), TensorError);
}

TEST_CASE("construction and element access") {
  auto t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 6.0);
  CHECK(t.at({0, 1}) == 2.0);
  CHECK_THROWS_AS(t.at({2, 0}), TensorError);
  CHECK_THROWS_AS((Tensor<double>::from({2, 2}, {1, 2, 3})), TensorError);
  auto s = Tensor<double>::scalar(7.5);
  CHECK(s.is_scalar());
  CHECK(s.item() == 7.5);
  CHECK_THROWS_AS(t.item(), TensorError);

  auto c = t.clone();
  CHECK_FALSE(c.same_node(t));
  c.mutable_values()[0] = 99;
  CHECK(t.at({0, 0}) == 1.0);
}

TEST_CASE("matmul against hand result") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  auto c = matmul(a, b);
  CHECK(c.at({0, 0}) == 19.0);
  CHECK(c.at({0, 1}) == 22.0);
  CHECK(c.at({1, 0}) == 43.0);
  CHECK(c.at({1, 1}) == 50.0);
  auto bad = Tensor<double>::zeros({3, 2});
  CHECK_THROWS_AS(matmul(a, bad), TensorError);
}

TEST_CASE("elementwise broadcasting values") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2}, {10, 20});
  auto c = add(a, b);
  CHECK(c.at({0, 0}) == 11.0);
  CHECK(c.at({0, 1}) == 22.0);
  CHECK(c.at({1, 0}) == 13.0);
  CHECK(c.at({1, 1}) == 24.0);
  auto bad = Tensor<double>::zeros({3});
  CHECK_THROWS_AS(add(a, bad), TensorError);
}

TEST_CASE("broadcast gradient reduces over expanded axes") {
  auto a = Tensor<double>::zeros({2, 3}, true);
  auto b = Tensor<double>::zeros({3}, true);
  Tape<double> tape;
  auto loss = sum(add(a, b));
  backward(loss);
  for (double g : a.grad()) CHECK(g == 1.0);
  for (double g : b.grad()) CHECK(g == 2.0);
}

TEST_CASE("spatial softmax values") {
  auto x = Tensor<double>::from({1, 2}, {10.0, 0.0});
  auto s = spatial_softmax(x);
  CHECK(s.at({0, 0}) == doctest::Approx(0.9999546021312976).epsilon(1e-12));
  CHECK(s.at({0, 1}) == doctest::Approx(4.5397868702434395e-05).epsilon(1e-12));

  auto z = Tensor<double>::zeros({3, 3});
  auto sz = spatial_softmax(z);
  for (double v : sz.values()) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
  double tot = 0;
  for (double v : sz.values()) tot += v;
  CHECK(tot == doctest::Approx(1.0).epsilon(1e-15));

  // stays finite under large logits
  auto big = Tensor<double>::from({1, 2}, {1000.0, 999.0});
  auto sb = spatial_softmax(big);
  CHECK(std::isfinite(sb.at({0, 0})));
  CHECK(sb.at({0, 0}) > 0.7);
}

TEST_CASE("conv2d delta kernel is identity under same padding") {
  Rng rng(42);
  auto x = Tensor<double>::randn({1, 5, 5}, rng);
  auto k = Tensor<double>::zeros({1, 1, 3, 3});
  k.mutable_values()[4] = 1.0;  // center tap
  auto y = conv2d(x, k, 1, Pad::same_zero);
  REQUIRE(y.shape() == Shape{1, 5, 5});
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-15));
}

TEST_CASE("conv2d valid windows sum with a uniform kernel") {
  auto x = Tensor<double>::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto k = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  auto y = conv2d(x, k, 1, Pad::valid);
  REQUIRE(y.shape() == Shape{1, 2, 2});
  CHECK(y.at({0, 0, 0}) == 12.0);
  CHECK(y.at({0, 0, 1}) == 16.0);
  CHECK(y.at({0, 1, 0}) == 24.0);
  CHECK(y.at({0, 1, 1}) == 28.0);
}

TEST_CASE("same padding puts the extra row after") {
  // 4x4 input, 3x3 kernel, stride 2: pad total 1, so only the bottom-right
  // output window reaches the last input row/column
  auto x = Tensor<double>::zeros({1, 4, 4});
  x.mutable_values()[15] = 1.0;  // (3,3)
  auto k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, k, 2, Pad::same_zero);
  REQUIRE(y.shape() == Shape{1, 2, 2});
  CHECK(y.at({0, 0, 0}) == 0.0);
  CHECK(y.at({0, 0, 1}) == 0.0);
  CHECK(y.at({0, 1, 0}) == 0.0);
  CHECK(y.at({0, 1, 1}) == 1.0);
}

TEST_CASE("conv shape contracts for encoder and decoder strides") {
  Rng rng(7);
  auto x = Tensor<double>::randn({2, 3, 8, 8}, rng);
  auto k = Tensor<double>::randn({5, 3, 3, 3}, rng, 0.1);
  CHECK(conv2d(x, k, 2, Pad::same_zero).shape() == Shape{2, 5, 4, 4});
  CHECK(conv2d(x, k, 1, Pad::same_zero).shape() == Shape{2, 5, 8, 8});

  auto up = Tensor<double>::randn({5, 3, 3, 3}, rng, 0.1);
  auto h = Tensor<double>::randn({2, 5, 4, 4}, rng);
  CHECK(conv2d_transpose(h, up, 2, Pad::same_zero).shape() == Shape{2, 3, 8, 8});

  // valid transpose growth: 1x1 -> 3x3 -> 5x5 with 3x3 kernels
  auto seed1 = Tensor<double>::randn({4, 1, 1}, rng);
  auto g1 = Tensor<double>::randn({4, 4, 3, 3}, rng, 0.1);
  auto t1 = conv2d_transpose(seed1, g1, 1, Pad::valid);
  CHECK(t1.shape() == Shape{4, 3, 3});
  auto g2 = Tensor<double>::randn({4, 1, 3, 3}, rng, 0.1);
  auto t2 = conv2d_transpose(t1, g2, 1, Pad::valid);
  CHECK(t2.shape() == Shape{1, 5, 5});

  // 5x5 in one hop
  auto g3 = Tensor<double>::randn({4, 1, 5, 5}, rng, 0.1);
  CHECK(conv2d_transpose(seed1, g3, 1, Pad::valid).shape() == Shape{1, 5, 5});
}

TEST_CASE("conv2d_transpose is the exact adjoint of conv2d") {
  Rng rng(123);
  for (int stride : {1, 2})
    for (Pad pad : {Pad::same_zero, Pad::valid}) {
      auto x = Tensor<double>::randn({2, 3, 6, 6}, rng);
      auto k = Tensor<double>::randn({4, 3, 3, 3}, rng);
      auto ax = conv2d(x, k, stride, pad);
      auto y = Tensor<double>::randn(ax.shape(), rng);
      auto aty = conv2d_transpose(y, k, stride, pad, 6, 6);
      REQUIRE(aty.shape() == x.shape());
      double lhs = dot(ax.values(), y.values());
      double rhs = dot(x.values(), aty.values());
      CHECK(std::abs(lhs - rhs) <= 1e-6 * std::max({1.0, std::abs(lhs), std::abs(rhs)}));
    }
}

TEST_CASE("patch gather and scatter are exact adjoints") {
  Rng rng(5);
  auto canvas = Tensor<double>::randn({10, 9}, rng);
  auto patches = Tensor<double>::randn({6, 3, 3}, rng);
  // grid 2x3 of 3x3 patches at offset (1,0)
  auto g = patch_gather(canvas, 1, 0, 2, 3, 3);
  auto s = patch_scatter(patches, 10, 9, 1, 0, 2, 3, 3);
  double lhs = dot(g.values(), patches.values());
  double rhs = dot(canvas.values(), s.values());
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  CHECK_THROWS_AS(patch_gather(canvas, 8, 0, 2, 3, 3), TensorError);
}

TEST_CASE("patch scatter then gather round-trips") {
  Rng rng(6);
  auto patches = Tensor<double>::randn({4, 2, 2}, rng);
  auto canvas = patch_scatter(patches, 6, 6, 1, 1, 2, 2, 2);
  auto back = patch_gather(canvas, 1, 1, 2, 2, 2);
  for (std::int64_t i = 0; i < patches.numel(); ++i)
    CHECK(back.values()[i] == patches.values()[i]);
  // region outside the grid stays zero
  CHECK(canvas.at({0, 0}) == 0.0);
  CHECK(canvas.at({5, 5}) == 0.0);
}

TEST_CASE("pad_wrap is periodic") {
  auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto p = pad_wrap(x, 1, 1);
  REQUIRE(p.shape() == Shape{4, 4});
  // row -1 is row 1, col -1 is col 1
  CHECK(p.at({0, 0}) == 4.0);
  CHECK(p.at({0, 1}) == 3.0);
  CHECK(p.at({1, 1}) == 1.0);
  CHECK(p.at({3, 3}) == 1.0);
  CHECK(p.at({3, 0}) == 2.0);
}

TEST_CASE("concat narrow take_rows values") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 1}, {5, 6});
  auto c = concat(std::vector<Tensor<double>>{a, b}, 1);
  REQUIRE(c.shape() == Shape{2, 3});
  CHECK(c.at({0, 2}) == 5.0);
  CHECK(c.at({1, 0}) == 3.0);

  auto n = narrow(c, 1, 1, 2);
  CHECK(n.at({0, 0}) == 2.0);
  CHECK(n.at({1, 1}) == 6.0);

  auto t = take_rows(c, {1, 1, 0});
  REQUIRE(t.shape() == Shape{3, 3});
  CHECK(t.at({0, 0}) == 3.0);
  CHECK(t.at({2, 0}) == 1.0);
}

TEST_CASE("stop_gradient blocks exactly") {
  Rng rng(9);
  auto x = Tensor<double>::randn({4, 4}, rng, 1.0, true);

  SUBCASE("pure stopped branch leaves no gradient") {
    Tape<double> tape;
    auto loss = sum(square(stop_gradient(x)));
    CHECK_FALSE(loss.requires_grad());
    backward(loss);
    CHECK_FALSE(x.has_grad());
  }

  SUBCASE("mixed product gets only the live factor, bitwise") {
    Tape<double> tape;
    auto loss = sum(mul(stop_gradient(x), x));
    backward(loss);
    REQUIRE(x.has_grad());
    auto g = x.grad();
    auto v = x.values();
    // d/dx [sg(x) * x] = sg(x): identical bits, no doubled term
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == v[i]);
  }

  SUBCASE("stopped value equals input bitwise") {
    auto s = stop_gradient(x);
    auto v = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(s.values()[i] == v[i]);
  }
}

TEST_CASE("ops outside a tape do not record") {
  auto x = Tensor<double>::zeros({2, 2}, true);
  auto y = square(x);
  CHECK_FALSE(y.requires_grad());
  {
    Tape<double> tape;
    auto z = square(x);
    CHECK(z.requires_grad());
    CHECK(tape.size() == 1);
  }
  CHECK(Tape<double>::active() == nullptr);
}

TEST_CASE("backward requires a scalar and an active tape") {
  auto x = Tensor<double>::zeros({2, 2}, true);
  CHECK_THROWS_AS(backward(x), TensorError);
  auto s = Tensor<double>::scalar(1.0);
  CHECK_THROWS_AS(backward(s), TensorError);  // no tape
}

TEST_CASE("gradient accumulates across two uses of one tensor") {
  auto x = Tensor<double>::from({2}, {3.0, -2.0}, true);
  Tape<double> tape;
  auto loss = add(sum(square(x)), sum(scale(x, 4.0)));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2 * 3.0 + 4.0));
  CHECK(x.grad()[1] == doctest::Approx(2 * -2.0 + 4.0));
}

TEST_CASE("identical seeds give identical bits") {
  auto run = [] {
    Rng rng(1234);
    auto x = Tensor<float>::randn({1, 2, 6, 6}, rng);
    auto k = Tensor<float>::randn({3, 2, 3, 3}, rng, 0.5f);
    return conv2d(x, k, 2, Pad::same_zero);
  };
  auto a = run();
  auto b = run();
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("finite difference sweep over every operation") {
  double worst = gradcheck_detail::op_gradcheck_sweep(3);
  CHECK(worst <= 1e-3);
  MESSAGE("worst relative error: ", worst);
}

TEST_CASE("flip180 reverses both axes") {
  auto k = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto f = flip180(k);
  CHECK(f.at({0, 0}) == 6.0);
  CHECK(f.at({0, 2}) == 4.0);
  CHECK(f.at({1, 0}) == 3.0);
  CHECK(f.at({1, 2}) == 1.0);
}

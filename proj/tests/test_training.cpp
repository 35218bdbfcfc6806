#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pairmeas/training.hpp"

using namespace pairmeas;
using D = double;

namespace {

std::vector<std::vector<double>> snapshot(const std::vector<Tensor<D>*>& params) {
  std::vector<std::vector<double>> out;
  for (auto* t : params) out.emplace_back(t->values().begin(), t->values().end());
  return out;
}

bool identical(const std::vector<std::vector<double>>& a,
               const std::vector<Tensor<D>*>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i]->values();
    for (std::size_t j = 0; j < v.size(); ++j)
      if (v[j] != a[i][j]) return false;
  }
  return true;
}

// block-constant images on a 4x4 cell grid, values uniform in [0,1]
std::vector<Tensor<D>> block_images(int n, std::int64_t H, std::int64_t W, std::uint64_t seed) {
  Rng root = Rng(seed).derive("block-images");
  std::vector<Tensor<D>> out;
  for (int t = 0; t < n; ++t) {
    Rng rng = root.derive(static_cast<std::uint64_t>(t));
    std::int64_t bh = (H + 3) / 4, bw = (W + 3) / 4;
    std::vector<double> cells(16);
    for (auto& c : cells) c = rng.uniform();
    std::vector<double> px(static_cast<std::size_t>(H * W));
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        px[static_cast<std::size_t>(i * W + j)] = cells[static_cast<std::size_t>(
            std::min<std::int64_t>(i / bh, 3) * 4 + std::min<std::int64_t>(j / bw, 3))];
    out.push_back(Tensor<D>::from({H, W}, std::move(px)));
  }
  return out;
}

PairedData<D> cs_data(int n_train, int n_val, std::int64_t side, int m, int p,
                      double sigma, std::uint64_t seed) {
  PairedData<D> d;
  d.H = side;
  d.W = side;
  Rng rng = Rng(seed).derive("phi");
  d.dist = ParamDistribution<D>::cs_shifted(orthonormal_rows<D>(m, p * p, rng), p);
  d.noise = GaussianNoise<D>(sigma);
  d.latent = block_images(n_train, side, side, seed + 1);
  std::vector<Tensor<D>> val_latent = block_images(n_val, side, side, seed + 2);
  d.train = build_pair_dataset(d.latent, d.dist, d.noise, seed + 3);
  d.val = build_pair_dataset(val_latent, d.dist, d.noise, seed + 4);
  return d;
}

PairedData<D> blur_data(int n_train, int n_val, std::int64_t side, int ksize, double sigma,
                        bool blind, std::uint64_t seed) {
  PairedData<D> d;
  d.H = side;
  d.W = side;
  d.dist = ParamDistribution<D>::motion_kernels(ksize, 2 * ksize, Boundary::circular);
  d.noise = GaussianNoise<D>(sigma);
  d.latent = block_images(n_train, side, side, seed + 1);
  std::vector<Tensor<D>> val_latent = block_images(n_val, side, side, seed + 2);
  PairDatasetOptions opt;
  opt.blind = blind;
  d.train = build_pair_dataset(d.latent, d.dist, d.noise, seed + 3, opt);
  d.val = build_pair_dataset(val_latent, d.dist, d.noise, seed + 4, opt);
  return d;
}

DeblurModelConfig tiny_blur_cfg() {
  DeblurModelConfig cfg;
  cfg.image = 16;
  cfg.widths = {4, 4, 8, 8};
  cfg.ksize = 3;
  return cfg;
}

CsModelConfig tiny_cs_cfg() {
  CsModelConfig cfg;
  cfg.patch = 8;
  cfg.widths = {8, 8, 16};
  return cfg;
}

}  // namespace

TEST_CASE("adam first step moves by lr times the gradient sign") {
  const double lr = 1e-3;
  Tensor<D> w = Tensor<D>::from({4}, {1.0, -2.0, 3.0, 0.25}, true);
  w.ensure_grad();
  auto g = w.grad_mut();
  g[0] = 0.5;
  g[1] = -2.0;
  g[2] = 10.0;
  g[3] = -0.02;
  std::vector<Tensor<D>*> params{&w};
  AdamState<D> st = make_adam_state(params);
  std::vector<double> before(w.values().begin(), w.values().end());
  adam_step(params, st, lr);
  const double sign[4] = {1, -1, 1, -1};
  for (int i = 0; i < 4; ++i) {
    double delta = w.values()[i] - before[i];
    CHECK(std::abs(delta - (-lr * sign[i])) <= 1e-6 * lr);
  }
  CHECK(st.step == 1);
}

TEST_CASE("adam leaves parameters alone when gradients are zero") {
  Tensor<D> a = Tensor<D>::from({3}, {0.5, -1.5, 2.5}, true);
  Tensor<D> b = Tensor<D>::from({2}, {7.0, -7.0}, true);
  a.ensure_grad();  // explicit zero buffer
  std::vector<Tensor<D>*> params{&a, &b};  // b has no buffer at all
  AdamState<D> st = make_adam_state(params);
  auto before = snapshot(params);
  adam_step(params, st, 1e-3);
  adam_step(params, st, 1e-3);
  CHECK(identical(before, params));
}

TEST_CASE("adam is bitwise deterministic") {
  auto run = [&]() {
    Rng rng(77);
    Tensor<D> w = Tensor<D>::randn({5, 3}, rng, 1.0, true);
    std::vector<Tensor<D>*> params{&w};
    AdamState<D> st = make_adam_state(params);
    for (int s = 0; s < 25; ++s) {
      w.zero_grad();
      w.ensure_grad();
      auto g = w.grad_mut();
      Rng gs = Rng(1000 + s);
      for (auto& v : g) v = gs.uniform(-1.0, 1.0);
      adam_step(params, st, 1e-3);
    }
    return std::vector<double>(w.values().begin(), w.values().end());
  };
  auto r1 = run();
  auto r2 = run();
  CHECK(r1 == r2);
}

TEST_CASE("adam rejects a mismatched state") {
  Tensor<D> w = Tensor<D>::from({2}, {1.0, 2.0}, true);
  Tensor<D> u = Tensor<D>::from({3}, {1.0, 2.0, 3.0}, true);
  std::vector<Tensor<D>*> pw{&w};
  AdamState<D> st = make_adam_state(pw);
  std::vector<Tensor<D>*> pu{&u};
  CHECK_THROWS_AS(adam_step(pu, st, 1e-3), TrainError);
  std::vector<Tensor<D>*> two{&w, &u};
  CHECK_THROWS_AS(adam_step(two, st, 1e-3), TrainError);
}

TEST_CASE("proxy batch isolates the network that made the predictions") {
  ParamDistribution<D> dist = ParamDistribution<D>::motion_kernels(3, 4, Boundary::circular);
  GaussianNoise<D> noise(0.01);
  Tensor<D> w = Tensor<D>::from({1}, {2.0}, true);
  Rng img_rng(5);
  Tape<D> tape;
  // prediction depends on w through a recorded op
  Tensor<D> img = Tensor<D>::rand_uniform({8, 8}, img_rng, 0.0, 1.0);
  Tensor<D> pred = mul(img, reshape(w, {1, 1}));
  auto batch = make_proxy_batch(std::vector<Tensor<D>>{pred}, dist, noise, 99);
  REQUIRE(batch.size() == 1);
  // y_plus is a pure value: a loss on it sends nothing back to w
  Tensor<D> loss = rho_mean(batch[0].y_plus, Norm::l2);
  CHECK_FALSE(loss.requires_grad());
  CHECK_FALSE(w.has_grad());
  // reproducible from the stored fields
  Tensor<D> again = measure(batch[0].theta_plus, batch[0].x_plus, noise, batch[0].eps_seed);
  auto a = again.values();
  auto b = batch[0].y_plus.values();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("proxy draws differ between steps") {
  ParamDistribution<D> dist = ParamDistribution<D>::motion_kernels(3, 4, Boundary::circular);
  GaussianNoise<D> noise(0.0);
  Tensor<D> pred = Tensor<D>::full({8, 8}, 0.5);
  auto b1 = make_proxy_batch(std::vector<Tensor<D>>{pred}, dist, noise, 1);
  auto b2 = make_proxy_batch(std::vector<Tensor<D>>{pred}, dist, noise, 2);
  auto k1 = b1[0].theta_plus.conv().kernel().values();
  auto k2 = b2[0].theta_plus.conv().kernel().values();
  bool same = true;
  for (std::size_t i = 0; i < k1.size(); ++i) same = same && k1[i] == k2[i];
  CHECK_FALSE(same);
}

TEST_CASE("psnr formula oracles") {
  CHECK(psnr_from_mse(0.0) == doctest::Approx(99.0));
  CHECK(psnr_from_mse(0.01) == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(psnr_from_mse(0.25) == doctest::Approx(6.020599913279624).epsilon(1e-9));
  CHECK(psnr_from_mse(1e-30) == doctest::Approx(99.0));
}

TEST_CASE("plateau scheduler drops twice then stops") {
  PlateauScheduler s{1e-3, 3, 2};
  // improvements keep the rate
  CHECK_FALSE(s.observe(10.0));
  CHECK_FALSE(s.observe(9.0));
  CHECK_FALSE(s.observe(8.0));
  CHECK(s.lr == doctest::Approx(1e-3));
  // sub-0.1% improvements count as stalls
  CHECK_FALSE(s.observe(7.9995));
  CHECK_FALSE(s.observe(7.9994));
  CHECK(s.observe(7.9993));  // third stall: first drop
  CHECK(s.lr == doctest::Approx(1e-3 / std::sqrt(10.0)));
  CHECK(s.drops == 1);
  // a real improvement resets the stall counter
  CHECK_FALSE(s.observe(6.0));
  CHECK_FALSE(s.observe(6.0));
  CHECK_FALSE(s.observe(6.0));
  CHECK(s.observe(6.0));  // second drop
  CHECK(s.drops == 2);
  CHECK_FALSE(s.stopped);
  CHECK_FALSE(s.observe(6.0));
  CHECK_FALSE(s.observe(6.0));
  CHECK_FALSE(s.observe(6.0));  // plateau after the last drop
  CHECK(s.stopped);
}

TEST_CASE("plateau threshold boundary is 0.1% relative") {
  PlateauScheduler s{1.0, 1, 1};
  CHECK_FALSE(s.observe(100.0));
  // exactly 0.1% better: counts as improvement, no drop
  CHECK_FALSE(s.observe(100.0 * (1.0 - 1e-3)));
  // a hair less than 0.1% better: stall, and patience=1 drops at once
  CHECK(s.observe(100.0 * (1.0 - 1e-3) * (1.0 - 0.5e-3)));
  CHECK(s.drops == 1);
}

TEST_CASE("patch assembly reproduces ground truth from true patches") {
  auto imgs = block_images(1, 16, 16, 42);
  Rng rng = Rng(7).derive("phi");
  ParamDistribution<D> dist =
      ParamDistribution<D>::cs_shifted(orthonormal_rows<D>(16, 16, rng), 4);
  GaussianNoise<D> noise(0.0);
  auto recs = build_pair_dataset(imgs, dist, noise, 11);
  REQUIRE(recs.size() == 1);
  const auto& rec = recs[0];
  auto true_patches = [&](const MeasurementOp<D>& op) {
    const auto& c = op.cs();
    return patch_gather(rec.x_eval, c.dy(), c.dx(), c.grid_h(16), c.grid_w(16), 4);
  };
  Tensor<D> img = assemble_cs(true_patches(rec.theta1), true_patches(rec.theta2), rec, 16, 16);
  // covered pixels match exactly; uncovered ones hold the midpoint fill
  auto count_cover = [&](const MeasurementOp<D>& op, std::vector<int>& cnt) {
    const auto& c = op.cs();
    for (int gi = 0; gi < c.grid_h(16); ++gi)
      for (int gj = 0; gj < c.grid_w(16); ++gj)
        for (int py = 0; py < 4; ++py)
          for (int px = 0; px < 4; ++px)
            ++cnt[static_cast<std::size_t>((c.dy() + gi * 4 + py) * 16 + c.dx() + gj * 4 + px)];
  };
  std::vector<int> cnt(256, 0);
  count_cover(rec.theta1, cnt);
  count_cover(rec.theta2, cnt);
  auto got = img.values();
  auto want = rec.x_eval.values();
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (cnt[i] > 0)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    else
      CHECK(got[i] == 0.5);
  }
}

TEST_CASE("supervised training drives the loss down at desk scale") {
  PairedData<D> d = cs_data(64, 8, 16, 16, 8, 0.0, 303);
  CsEstimator<D> model(tiny_cs_cfg(), 1);
  TrainConfig cfg;
  cfg.regime = Regime::supervised;
  cfg.batch_size = 8;
  cfg.max_epochs = 10;
  cfg.plateau_patience = 20;  // keep the LR fixed for the whole run
  cfg.seed = 5;
  TrainResult r = train(cfg, d, model);
  REQUIRE(r.history.size() == 10);
  double first3 = 0, last3 = 0;
  for (int i = 0; i < 3; ++i) first3 += r.history[static_cast<std::size_t>(i)].train_loss;
  for (int i = 7; i < 10; ++i) last3 += r.history[static_cast<std::size_t>(i)].train_loss;
  CHECK(last3 / 3 < first3 / 3);
  CHECK(r.history.front().train_loss > r.history.back().train_loss);
  for (const auto& e : r.history) {
    CHECK(std::isfinite(e.train_loss));
    CHECK(std::isfinite(e.val_loss));
    CHECK(e.lr == doctest::Approx(1e-3));
    // supervised epochs carry no unsupervised terms
    CHECK(std::isnan(e.swap));
    CHECK(std::isnan(e.self));
  }
  // validation records carry ground truth, so PSNR is logged
  CHECK(std::isfinite(r.history.back().val_psnr));
  CHECK(r.history.back().val_psnr > 0);
}

TEST_CASE("unsupervised training is deterministic and keeps pairs frozen") {
  PairedData<D> d = cs_data(12, 6, 16, 16, 8, 0.02, 404);
  std::uint64_t h0 = dataset_hash(d.train);
  auto run = [&]() {
    CsEstimator<D> model(tiny_cs_cfg(), 9);
    TrainConfig cfg;
    cfg.regime = Regime::unsup_nonblind;
    cfg.weights.gamma = 0.05;
    cfg.batch_size = 4;
    cfg.max_epochs = 3;
    cfg.seed = 21;
    TrainResult r = train(cfg, d, model);
    return std::make_pair(snapshot(model.params()), r);
  };
  auto [p1, r1] = run();
  auto [p2, r2] = run();
  CHECK(p1 == p2);
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
    CHECK(r1.history[i].val_loss == r2.history[i].val_loss);
    CHECK(std::isfinite(r1.history[i].swap));
    CHECK(std::isfinite(r1.history[i].self));
  }
  CHECK(r1.pair_hash_start == h0);
  CHECK(r1.pair_hash_end == h0);
  CHECK(dataset_hash(d.train) == h0);
}

TEST_CASE("dataset hash is order and value sensitive") {
  PairedData<D> d = cs_data(4, 2, 16, 16, 8, 0.0, 500);
  std::uint64_t h = dataset_hash(d.train);
  auto swapped = d.train;
  std::swap(swapped[0], swapped[1]);
  CHECK(dataset_hash(swapped) != h);
  auto tweaked = d.train;
  tweaked[2].y1 = tweaked[2].y1.clone();
  tweaked[2].y1.mutable_values()[0] += 1e-9;
  CHECK(dataset_hash(tweaked) != h);
}

TEST_CASE("regime and dataset must agree") {
  PairedData<D> cs = cs_data(4, 2, 16, 16, 8, 0.0, 600);
  CsEstimator<D> cs_model(tiny_cs_cfg(), 2);
  TrainConfig cfg;

  cfg.regime = Regime::unsup_blind;
  CHECK_THROWS_WITH_AS(train(cfg, cs, cs_model),
                       doctest::Contains("patch estimators have none"), TrainError);

  cfg.regime = Regime::supervised;
  cfg.weights = {};
  PairedData<D> no_latent = cs;
  no_latent.latent.clear();
  CHECK_THROWS_WITH_AS(train(cfg, no_latent, cs_model), doctest::Contains("latent"),
                       TrainError);

  cfg.regime = Regime::unsup_nonblind;
  cfg.weights.alpha = 1.0;
  CHECK_THROWS_AS(train(cfg, cs, cs_model), TrainError);
  cfg.weights = {};

  // blind regime rejects datasets that still carry operators
  PairedData<D> known = blur_data(4, 2, 16, 3, 0.01, false, 601);
  DeblurEstimator<D> blur_model(tiny_blur_cfg(), 3);
  cfg.regime = Regime::unsup_blind;
  cfg.weights = {1.0, 1.0, 1.0};
  CHECK_THROWS_WITH_AS(train(cfg, known, blur_model), doctest::Contains("must not see"),
                       TrainError);

  // and the non-blind regime rejects stripped datasets
  PairedData<D> stripped = blur_data(4, 2, 16, 3, 0.01, true, 602);
  cfg.regime = Regime::unsup_nonblind;
  cfg.weights = {1.0, 0.0, 1.0};
  CHECK_THROWS_WITH_AS(train(cfg, stripped, blur_model),
                       doctest::Contains("needs convolution operators"), TrainError);

  // supervised refuses unsupervised weights
  cfg.regime = Regime::supervised;
  cfg.weights.gamma = 0.1;
  CHECK_THROWS_AS(train(cfg, cs, cs_model), TrainError);
}

TEST_CASE("non-blind deblurring never touches the kernel head") {
  PairedData<D> d = blur_data(8, 4, 16, 3, 0.01, false, 700);
  DeblurEstimator<D> model(tiny_blur_cfg(), 4);
  std::vector<Tensor<D>*> head = model.kernel_head_params();
  auto before = snapshot(head);
  TrainConfig cfg;
  cfg.regime = Regime::unsup_nonblind;
  cfg.weights.gamma = 1.0;
  cfg.weights.beta = 1.0;  // image proxy active, parameter proxy forbidden
  cfg.batch_size = 4;
  cfg.max_epochs = 2;
  cfg.seed = 8;
  TrainResult r = train(cfg, d, model);
  CHECK(identical(before, head));
  for (const auto& e : r.history) {
    CHECK(std::isfinite(e.swap));
    CHECK(std::isfinite(e.self));
    CHECK(std::isfinite(e.proxy_image));
    CHECK(std::isnan(e.proxy_param));
  }
}

TEST_CASE("blind training passes per-step isolation checks") {
  PairedData<D> d = blur_data(8, 4, 16, 3, 0.01, true, 800);
  DeblurEstimator<D> model(tiny_blur_cfg(), 5);
  TrainConfig cfg;
  cfg.regime = Regime::unsup_blind;
  cfg.weights = {1.0, 1.0, 1.0};
  cfg.batch_size = 4;
  cfg.max_epochs = 2;
  cfg.seed = 13;
  cfg.check_isolation = true;
  TrainResult r = train(cfg, d, model);
  REQUIRE(r.history.size() == 2);
  for (const auto& e : r.history) {
    CHECK(std::isfinite(e.swap));
    CHECK(std::isfinite(e.self));
    CHECK(std::isfinite(e.proxy_param));
    CHECK(std::isfinite(e.proxy_image));
    CHECK(std::isfinite(e.val_loss));
  }
  // the head moved: the parameter proxy is really training it
  CHECK(r.pair_hash_start == r.pair_hash_end);
}

TEST_CASE("proxy warmup keeps proxy terms out of early steps") {
  PairedData<D> d = blur_data(8, 4, 16, 3, 0.01, true, 900);
  DeblurEstimator<D> model(tiny_blur_cfg(), 6);
  std::vector<Tensor<D>*> head = model.kernel_head_params();
  auto before = snapshot(head);
  TrainConfig cfg;
  cfg.regime = Regime::unsup_blind;
  cfg.weights = {1.0, 1.0, 1.0};
  cfg.batch_size = 4;
  cfg.max_epochs = 1;       // 2 steps per epoch
  cfg.proxy_warmup = 1000;  // never reached
  cfg.seed = 14;
  TrainResult r = train(cfg, d, model);
  // with proxies held off, nothing trains the head
  CHECK(identical(before, head));
  CHECK(std::isnan(r.history[0].proxy_param));
  CHECK(std::isnan(r.history[0].proxy_image));
}

TEST_CASE("training aborts on poisoned data with a batch diagnostic") {
  PairedData<D> d = cs_data(6, 3, 16, 16, 8, 0.0, 1000);
  d.train[3].y1 = d.train[3].y1.clone();
  d.train[3].y1.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  CsEstimator<D> model(tiny_cs_cfg(), 7);
  TrainConfig cfg;
  cfg.regime = Regime::unsup_nonblind;
  cfg.weights.gamma = 0.05;
  cfg.batch_size = 3;
  cfg.max_epochs = 1;
  cfg.seed = 3;
  try {
    train(cfg, d, model);
    FAIL("expected a TrainError");
  } catch (const TrainError& e) {
    std::string msg = e.what();
    CHECK(msg.find("records [") != std::string::npos);
    CHECK(msg.find("seeds [") != std::string::npos);
    CHECK(msg.find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("eval interval skips validation on off epochs") {
  PairedData<D> d = cs_data(8, 4, 16, 16, 8, 0.0, 1100);
  CsEstimator<D> model(tiny_cs_cfg(), 11);
  TrainConfig cfg;
  cfg.regime = Regime::unsup_nonblind;
  cfg.weights.gamma = 0.05;
  cfg.batch_size = 4;
  cfg.max_epochs = 4;
  cfg.eval_interval = 2;
  cfg.seed = 15;
  TrainResult r = train(cfg, d, model);
  REQUIRE(r.history.size() == 4);
  CHECK(std::isnan(r.history[0].val_loss));
  CHECK(std::isfinite(r.history[1].val_loss));
  CHECK(std::isnan(r.history[2].val_loss));
  CHECK(std::isfinite(r.history[3].val_loss));
}

TEST_CASE("evaluation demands ground truth") {
  PairedData<D> d = blur_data(2, 2, 16, 3, 0.0, false, 1200);
  DeblurEstimator<D> model(tiny_blur_cfg(), 12);
  auto no_eval = d.val;
  for (auto& r : no_eval) r.x_eval = Tensor<D>{};
  CHECK_THROWS_WITH_AS(evaluate(model, no_eval), doctest::Contains("ground-truth"), TrainError);
  double v = evaluate(model, d.val);
  CHECK(std::isfinite(v));
  CHECK(v <= 99.0);
}

TEST_CASE("regime names round-trip and reject junk") {
  CHECK(parse_regime("supervised") == Regime::supervised);
  CHECK(parse_regime("unsup-nonblind") == Regime::unsup_nonblind);
  CHECK(parse_regime("unsup-blind") == Regime::unsup_blind);
  CHECK(regime_name(Regime::unsup_blind) == "unsup-blind");
  CHECK_THROWS_AS(parse_regime("blind"), TrainError);
}

TEST_CASE("a run resumed from its carry matches the uninterrupted run exactly") {
  PairedData<D> data = cs_data(12, 4, 16, 16, 8, 0.05, 31);
  TrainConfig cfg;
  cfg.regime = Regime::unsup_nonblind;
  cfg.weights.gamma = 0.05;
  cfg.batch_size = 4;
  cfg.max_epochs = 4;
  cfg.plateau_patience = 20;
  cfg.seed = 21;

  CsEstimator<D> whole(tiny_cs_cfg(), 909);
  TrainResult ra = train(cfg, data, whole);
  REQUIRE(ra.history.size() == 4);

  CsEstimator<D> split(tiny_cs_cfg(), 909);
  TrainConfig first = cfg;
  first.max_epochs = 2;
  TrainCarry<D> carry;
  TrainResult rb1 = train(first, data, split, &carry);
  REQUIRE(rb1.history.size() == 2);
  CHECK(carry.epochs_done == 2);
  CHECK(carry.adam.step == 2 * 3);  // 12 records, batch 4
  TrainResult rb2 = train(cfg, data, split, &carry);
  CHECK(carry.epochs_done == 4);
  REQUIRE(rb2.history.size() == 2);
  CHECK(rb2.history[0].epoch == 3);
  CHECK(rb2.history[1].epoch == 4);

  CHECK(ra.history[0].train_loss == rb1.history[0].train_loss);
  CHECK(ra.history[2].train_loss == rb2.history[0].train_loss);
  CHECK(ra.history[3].train_loss == rb2.history[1].train_loss);
  CHECK(ra.history[3].val_loss == rb2.history[1].val_loss);

  auto pa = whole.params();
  auto pb = split.params();
  CHECK(identical(snapshot(pa), pb));
}

TEST_CASE("the per-epoch callback sees each history record as it lands") {
  PairedData<D> data = cs_data(8, 4, 16, 16, 8, 0.05, 33);
  TrainConfig cfg;
  cfg.regime = Regime::unsup_nonblind;
  cfg.weights.gamma = 0.05;
  cfg.batch_size = 4;
  cfg.max_epochs = 3;
  cfg.plateau_patience = 20;
  cfg.seed = 9;
  CsEstimator<D> model(tiny_cs_cfg(), 5);
  std::vector<int> epochs;
  std::vector<double> losses;
  TrainResult res = train(cfg, data, model, nullptr, [&](const EpochRecord& r) {
    epochs.push_back(r.epoch);
    losses.push_back(r.train_loss);
  });
  REQUIRE(res.history.size() == 3);
  REQUIRE(epochs.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(epochs[i] == res.history[i].epoch);
    CHECK(losses[i] == res.history[i].train_loss);
  }
}

TEST_CASE("a carry that is already finished refuses or no-ops cleanly") {
  PairedData<D> data = cs_data(8, 4, 16, 16, 8, 0.05, 35);
  TrainConfig cfg;
  cfg.regime = Regime::unsup_nonblind;
  cfg.weights.gamma = 0.05;
  cfg.batch_size = 4;
  cfg.max_epochs = 2;
  cfg.plateau_patience = 20;
  cfg.seed = 11;
  CsEstimator<D> model(tiny_cs_cfg(), 3);
  TrainCarry<D> carry;
  train(cfg, data, model, &carry);
  REQUIRE(carry.epochs_done == 2);

  // equal to the budget: nothing left to run, carry intact
  TrainResult noop = train(cfg, data, model, &carry);
  CHECK(noop.history.empty());
  CHECK(carry.epochs_done == 2);

  // past the budget: refuse rather than run backwards
  TrainConfig shorter = cfg;
  shorter.max_epochs = 1;
  CHECK_THROWS_AS(train(shorter, data, model, &carry), TrainError);

  // a carry flagged as stopped resumes into an immediate early stop
  TrainConfig more = cfg;
  more.max_epochs = 4;
  carry.stopped = true;
  auto before = snapshot(model.params());
  TrainResult res = train(more, data, model, &carry);
  CHECK(res.history.empty());
  CHECK(res.early_stopped);
  auto now = model.params();
  CHECK(identical(before, now));
}

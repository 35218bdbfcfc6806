#include "pairmeas/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace pairmeas {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::vector<std::int64_t> shuffled_indices(std::int64_t n, Rng rng) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i) {
    auto j = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

template <typename T>
bool grad_all_zero(const Tensor<T>& p) {
  if (!p.has_grad()) return true;
  for (T v : p.grad())
    if (v != T(0)) return false;
  return true;
}

template <typename T>
void zero_all_grads(const std::vector<Tensor<T>*>& params) {
  for (Tensor<T>* p : params) p->zero_grad();
}

// one optimizer step's term values; NaN marks a term that was not active
struct StepTerms {
  double total = 0;
  double swap = kNan, self = kNan, proxy_param = kNan, proxy_image = kNan;
};

void validate_config(const TrainConfig& cfg) {
  if (!(cfg.lr > 0)) throw TrainError("learning rate must be positive");
  if (cfg.batch_size < 1) throw TrainError("batch_size must be at least 1");
  if (cfg.max_epochs < 1) throw TrainError("max_epochs must be at least 1");
  if (cfg.lr_drops < 0) throw TrainError("lr_drops must be nonnegative");
  if (cfg.plateau_patience < 1) throw TrainError("plateau_patience must be at least 1");
  if (cfg.eval_interval < 1) throw TrainError("eval_interval must be at least 1");
  if (cfg.proxy_warmup < 0) throw TrainError("proxy_warmup must be nonnegative");
  if (cfg.weights.gamma < 0 || cfg.weights.alpha < 0 || cfg.weights.beta < 0)
    throw TrainError("loss weights must be nonnegative");
  if (cfg.regime == Regime::supervised &&
      (cfg.weights.gamma != 0 || cfg.weights.alpha != 0 || cfg.weights.beta != 0))
    throw TrainError("the supervised regime takes no unsupervised loss weights");
  if (cfg.regime == Regime::unsup_nonblind && cfg.weights.alpha != 0)
    throw TrainError("the parameter proxy needs estimated operators; alpha requires the blind regime");
  if (cfg.check_isolation && !cfg.stopgrad_kernel)
    throw TrainError("isolation checks assume detached kernel estimates");
}

template <typename T>
std::string batch_diagnostic(std::span<const std::int64_t> idx,
                             const std::vector<MeasurementPair<T>>& batch, std::int64_t step) {
  std::ostringstream os;
  os << "step " << step << ", records [";
  for (std::size_t i = 0; i < idx.size(); ++i) os << (i ? "," : "") << idx[i];
  os << "], seeds [";
  for (std::size_t i = 0; i < batch.size(); ++i) os << (i ? "," : "") << batch[i].record_seed;
  os << "]: ";
  return os.str();
}

// Shared epoch driver: shuffling, optimizer stepping, per-term averaging,
// validation cadence, plateau schedule. step_fn must leave gradients of one
// backward pass in the parameters and throw TrainError on anything
// non-finite; validate returns (val loss, val PSNR or NaN).
template <typename T>
TrainResult drive(const TrainConfig& cfg, std::int64_t n_records,
                  const std::vector<Tensor<T>*>& params, TrainCarry<T>* carry,
                  const std::function<void(const EpochRecord&)>& on_epoch,
                  const std::function<void(int)>& epoch_begin,
                  const std::function<StepTerms(std::span<const std::int64_t>, std::int64_t)>&
                      step_fn,
                  const std::function<std::pair<double, double>()>& validate) {
  if (n_records < 1) throw TrainError("no training records");
  const bool resume = carry && carry->epochs_done > 0;
  if (resume && carry->epochs_done > cfg.max_epochs)
    throw TrainError("carry is already past max_epochs");
  AdamState<T> opt = resume ? std::move(carry->adam) : make_adam_state(params);
  if (resume && opt.m.size() != params.size())
    throw TrainError("carried optimizer state does not match the parameter list");
  PlateauScheduler sched{cfg.lr, cfg.plateau_patience, cfg.lr_drops};
  int start_epoch = 0;
  if (resume) {
    start_epoch = carry->epochs_done;
    sched.lr = carry->lr;
    sched.best = carry->best_val;
    sched.stall = carry->stall;
    sched.drops = carry->drops_taken;
    sched.stopped = carry->stopped;
  }
  TrainResult out;
  out.early_stopped = sched.stopped;
  Rng shuffle_root = Rng(cfg.seed).derive("epoch-shuffle");
  const std::int64_t steps_per_epoch = (n_records + cfg.batch_size - 1) / cfg.batch_size;
  std::int64_t gstep = steps_per_epoch * start_epoch;
  int completed = start_epoch;
  for (int epoch = start_epoch + 1; epoch <= cfg.max_epochs && !sched.stopped; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    epoch_begin(epoch);
    std::vector<std::int64_t> order =
        shuffled_indices(n_records, shuffle_root.derive(static_cast<std::uint64_t>(epoch)));
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sched.lr;
    double sums[5] = {};  // total, swap, self, proxy_param, proxy_image
    std::int64_t cnts[5] = {};
    for (std::int64_t at = 0; at < n_records; at += cfg.batch_size) {
      std::int64_t len = std::min<std::int64_t>(cfg.batch_size, n_records - at);
      std::span<const std::int64_t> batch(order.data() + at, static_cast<std::size_t>(len));
      zero_all_grads(params);
      StepTerms st;
      try {
        st = step_fn(batch, gstep);
      } catch (const TrainError& e) {
        throw TrainError("epoch " + std::to_string(epoch) + ", " + e.what());
      }
      adam_step(params, opt, sched.lr);
      ++gstep;
      const double vals[5] = {st.total, st.swap, st.self, st.proxy_param, st.proxy_image};
      for (int k = 0; k < 5; ++k)
        if (!std::isnan(vals[k])) {
          sums[k] += vals[k] * static_cast<double>(len);
          cnts[k] += len;
        }
    }
    rec.train_loss = sums[0] / static_cast<double>(cnts[0]);
    rec.swap = cnts[1] ? sums[1] / static_cast<double>(cnts[1]) : kNan;
    rec.self = cnts[2] ? sums[2] / static_cast<double>(cnts[2]) : kNan;
    rec.proxy_param = cnts[3] ? sums[3] / static_cast<double>(cnts[3]) : kNan;
    rec.proxy_image = cnts[4] ? sums[4] / static_cast<double>(cnts[4]) : kNan;
    if (epoch % cfg.eval_interval == 0) {
      auto [vloss, vpsnr] = validate();
      if (!std::isfinite(vloss))
        throw TrainError("non-finite validation loss at epoch " + std::to_string(epoch));
      rec.val_loss = vloss;
      rec.val_psnr = vpsnr;
      sched.observe(vloss);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.history.push_back(rec);
    completed = epoch;
    if (on_epoch) on_epoch(rec);
    if (sched.stopped) {
      out.early_stopped = true;
      break;
    }
  }
  out.final_lr = sched.lr;
  out.lr_drops_taken = sched.drops;
  if (carry) {
    carry->adam = std::move(opt);
    carry->epochs_done = completed;
    carry->lr = sched.lr;
    carry->best_val = sched.best;
    carry->stall = sched.stall;
    carry->drops_taken = sched.drops;
    carry->stopped = sched.stopped;
  }
  return out;
}

template <typename T>
double mse_values(const Tensor<T>& a, const Tensor<T>& b) {
  auto va = a.values();
  auto vb = b.values();
  if (va.size() != vb.size()) throw TrainError("prediction/ground-truth size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    double d = static_cast<double>(va[i]) - static_cast<double>(vb[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(va.size());
}

template <typename T>
const CompressivePatchOp<T>& cs_op(const MeasurementOp<T>& op, const char* who) {
  if (op.kind() != MeasurementOp<T>::Kind::compressive)
    throw TrainError(std::string(who) + " needs compressive operators");
  return op.cs();
}

}  // namespace

Regime parse_regime(std::string_view name) {
  if (name == "supervised") return Regime::supervised;
  if (name == "unsup-nonblind") return Regime::unsup_nonblind;
  if (name == "unsup-blind") return Regime::unsup_blind;
  throw TrainError("unknown regime '" + std::string(name) +
                   "' (expected supervised, unsup-nonblind, or unsup-blind)");
}

std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::supervised: return "supervised";
    case Regime::unsup_nonblind: return "unsup-nonblind";
    case Regime::unsup_blind: return "unsup-blind";
  }
  throw TrainError("invalid regime value");
}

bool PlateauScheduler::observe(double val) {
  if (val <= best * (1.0 - 1e-3)) {
    best = val;
    stall = 0;
    return false;
  }
  if (++stall < patience) return false;
  stall = 0;
  if (drops < max_drops) {
    ++drops;
    lr /= std::sqrt(10.0);
    return true;
  }
  stopped = true;
  return false;
}

double psnr_from_mse(double mse) {
  if (!(mse > 0)) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

template <typename T>
AdamState<T> make_adam_state(const std::vector<Tensor<T>*>& params, AdamConfig cfg) {
  AdamState<T> st;
  st.cfg = cfg;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const Tensor<T>* p : params) {
    st.m.emplace_back(static_cast<std::size_t>(p->numel()), T(0));
    st.v.emplace_back(static_cast<std::size_t>(p->numel()), T(0));
  }
  return st;
}

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& st, double lr) {
  if (params.size() != st.m.size())
    throw TrainError("optimizer state was built for a different parameter list");
  if (!(lr > 0)) throw TrainError("learning rate must be positive");
  ++st.step;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.size() != static_cast<std::size_t>(p.numel()))
      throw TrainError("optimizer moment shape mismatch at parameter " + std::to_string(i));
    std::span<T> val = p.mutable_values();
    std::span<const T> g = p.has_grad() ? p.grad() : std::span<const T>{};
    for (std::size_t j = 0; j < m.size(); ++j) {
      double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      val[j] -= static_cast<T>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + st.cfg.eps));
    }
  }
}

template <typename T>
std::vector<ProxySample<T>> make_proxy_batch(const std::vector<Tensor<T>>& predictions,
                                             const ParamDistribution<T>& dist,
                                             const GaussianNoise<T>& noise, std::uint64_t seed) {
  std::vector<ProxySample<T>> out;
  out.reserve(predictions.size());
  Rng root(seed);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    ProxySample<T> s;
    s.x_plus = stop_gradient(predictions[i]);
    Rng draw = root.derive(static_cast<std::uint64_t>(i)).derive("theta-plus");
    s.theta_plus = dist.sample(draw);
    Rng eps = root.derive(static_cast<std::uint64_t>(i)).derive("eps-plus");
    s.eps_seed = eps.next_u64();
    s.y_plus = measure(s.theta_plus, s.x_plus, noise, s.eps_seed);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
Tensor<T> assemble_cs(const Tensor<T>& pred1, const Tensor<T>& pred2,
                      const MeasurementPair<T>& rec, std::int64_t H, std::int64_t W) {
  std::vector<double> acc(static_cast<std::size_t>(H * W), 0.0);
  std::vector<int> cnt(static_cast<std::size_t>(H * W), 0);
  auto put = [&](const Tensor<T>& pred, const CompressivePatchOp<T>& op) {
    const int p = op.patch_size();
    const int gh = op.grid_h(H), gw = op.grid_w(W);
    if (pred.rank() != 3 || pred.dim(0) != static_cast<std::int64_t>(gh) * gw ||
        pred.dim(1) != p || pred.dim(2) != p)
      throw TrainError("patch predictions do not match the operator's grid");
    auto v = pred.values();
    std::size_t at = 0;
    for (int gi = 0; gi < gh; ++gi)
      for (int gj = 0; gj < gw; ++gj)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px, ++at) {
            std::size_t pix = static_cast<std::size_t>((op.dy() + gi * p + py) * W + op.dx() +
                                                       gj * p + px);
            acc[pix] += static_cast<double>(v[at]);
            ++cnt[pix];
          }
  };
  put(pred1, cs_op(rec.theta1, "patch assembly"));
  put(pred2, cs_op(rec.theta2, "patch assembly"));
  Tensor<T> out = Tensor<T>::zeros({H, W});
  std::span<T> ov = out.mutable_values();
  for (std::size_t i = 0; i < acc.size(); ++i)
    // 0.5 is the midpoint of the image range: the least-bad constant for
    // border pixels no partition tiled
    ov[i] = cnt[i] ? static_cast<T>(acc[i] / cnt[i]) : static_cast<T>(0.5);
  return out;
}

template <typename T>
double evaluate(const CsEstimator<T>& model, const std::vector<MeasurementPair<T>>& eval_set) {
  if (eval_set.empty()) throw TrainError("empty evaluation set");
  const int p = model.config().patch;
  double acc = 0;
  for (const MeasurementPair<T>& rec : eval_set) {
    if (!rec.x_eval.defined()) throw TrainError("evaluation requires ground-truth images");
    const std::int64_t H = rec.x_eval.dim(0), W = rec.x_eval.dim(1);
    auto predict = [&](const MeasurementOp<T>& theta, const Tensor<T>& y) {
      Tensor<T> in = adjoint_input(theta, y);
      const std::int64_t n = in.dim(0);
      Tensor<T> f = model.forward(reshape(in, {n, 1, p, p}));
      return reshape(f, {n, p, p});
    };
    Tensor<T> img = assemble_cs(predict(rec.theta1, rec.y1), predict(rec.theta2, rec.y2), rec,
                                H, W);
    acc += psnr_from_mse(mse_values(img, rec.x_eval));
  }
  return acc / static_cast<double>(eval_set.size());
}

template <typename T>
double evaluate(const DeblurEstimator<T>& model, const std::vector<MeasurementPair<T>>& eval_set) {
  if (eval_set.empty()) throw TrainError("empty evaluation set");
  double acc = 0;
  for (const MeasurementPair<T>& rec : eval_set) {
    if (!rec.x_eval.defined()) throw TrainError("evaluation requires ground-truth images");
    const std::int64_t H = rec.x_eval.dim(0), W = rec.x_eval.dim(1);
    Tensor<T> pred = model.forward(reshape(rec.y1, {1, 1, H, W}), false).image;
    acc += psnr_from_mse(mse_values(reshape(pred, {H, W}), rec.x_eval));
  }
  return acc / static_cast<double>(eval_set.size());
}

template <typename T>
std::uint64_t dataset_hash(const std::vector<MeasurementPair<T>>& pairs) {
  std::uint64_t h = 1469598103934665603ULL;
  auto bytes = [&h](const void* d, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(d);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  auto pod = [&bytes](auto v) { bytes(&v, sizeof v); };
  auto tensor = [&](const Tensor<T>& t) {
    if (!t.defined()) {
      pod(std::int32_t(-1));
      return;
    }
    pod(std::int32_t(t.rank()));
    for (int d = 0; d < t.rank(); ++d) pod(t.dim(d));
    auto v = t.values();
    bytes(v.data(), v.size() * sizeof(T));
  };
  auto op = [&](const MeasurementOp<T>& theta) {
    pod(static_cast<std::int32_t>(theta.kind()));
    if (theta.kind() == MeasurementOp<T>::Kind::compressive) {
      tensor(theta.cs().phi());
      pod(std::int32_t(theta.cs().dy()));
      pod(std::int32_t(theta.cs().dx()));
    } else if (theta.kind() == MeasurementOp<T>::Kind::convolution) {
      tensor(theta.conv().kernel());
      pod(static_cast<std::int32_t>(theta.conv().boundary()));
    }
  };
  for (const MeasurementPair<T>& rec : pairs) {
    tensor(rec.y1);
    tensor(rec.y2);
    op(rec.theta1);
    op(rec.theta2);
  }
  return h;
}

namespace {

template <typename T>
StepTerms finish_step(const Tensor<T>& total, const Tensor<T>& sw, const Tensor<T>& se,
                      const Tensor<T>& pt, const Tensor<T>& px,
                      std::span<const std::int64_t> idx,
                      const std::vector<MeasurementPair<T>>& batch, std::int64_t step) {
  StepTerms t;
  t.total = static_cast<double>(total.item());
  if (sw.defined()) t.swap = static_cast<double>(sw.item());
  if (se.defined()) t.self = static_cast<double>(se.item());
  if (pt.defined()) t.proxy_param = static_cast<double>(pt.item());
  if (px.defined()) t.proxy_image = static_cast<double>(px.item());
  for (double v : {t.total, t.swap, t.self, t.proxy_param, t.proxy_image})
    if (!std::isnan(v) && !std::isfinite(v))
      throw TrainError(batch_diagnostic(idx, batch, step) + "non-finite loss (total=" +
                       std::to_string(t.total) + ", swap=" + std::to_string(t.swap) +
                       ", self=" + std::to_string(t.self) + ", proxy_param=" +
                       std::to_string(t.proxy_param) + ", proxy_image=" +
                       std::to_string(t.proxy_image) + ")");
  backward(total);
  return t;
}

template <typename T>
std::vector<MeasurementPair<T>> pick(const std::vector<MeasurementPair<T>>& all,
                                     std::span<const std::int64_t> idx) {
  std::vector<MeasurementPair<T>> out;
  out.reserve(idx.size());
  for (std::int64_t i : idx) out.push_back(all[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<std::int64_t> iota_n(std::int64_t n) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

template <typename T>
TrainResult train(const TrainConfig& cfg, const PairedData<T>& data, CsEstimator<T>& model,
                  TrainCarry<T>* carry, const std::function<void(const EpochRecord&)>& on_epoch) {
  validate_config(cfg);
  if (cfg.regime == Regime::unsup_blind)
    throw TrainError("blind training needs a parameter head; patch estimators have none");
  if (cfg.weights.beta != 0)
    throw TrainError("the image proxy is implemented for blur estimators only");
  if (data.H <= 0 || data.W <= 0) throw TrainError("dataset geometry H, W must be set");
  const std::int64_t H = data.H, W = data.W;
  const int p = model.config().patch;
  const bool supervised = cfg.regime == Regime::supervised;

  auto check_records = [&](const std::vector<MeasurementPair<T>>& recs, bool need_eval,
                           const char* who) {
    for (const MeasurementPair<T>& r : recs) {
      cs_op(r.theta1, who);
      cs_op(r.theta2, who);
      if (need_eval && !r.x_eval.defined())
        throw TrainError(std::string(who) + " records need ground-truth images");
    }
  };
  if (data.val.empty()) throw TrainError("validation records are required");
  check_records(data.val, supervised, "validation");
  if (supervised) {
    if (data.latent.empty()) throw TrainError("the supervised regime needs latent images");
  } else {
    if (data.train.empty()) throw TrainError("unsupervised regimes need frozen training pairs");
    check_records(data.train, false, "training");
  }

  std::vector<Tensor<T>*> params = model.params();

  // one forward over every patch of every record in the batch
  auto forward_split = [&](const std::vector<MeasurementPair<T>>& batch, bool both,
                           std::vector<Tensor<T>>& f1, std::vector<Tensor<T>>& f2) {
    std::vector<Tensor<T>> parts;
    std::vector<std::int64_t> n1(batch.size()), n2(batch.size());
    parts.reserve(batch.size() * (both ? 2 : 1));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor<T> in = adjoint_input(batch[i].theta1, batch[i].y1);
      n1[i] = in.dim(0);
      parts.push_back(reshape(in, {n1[i], 1, p, p}));
    }
    if (both)
      for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor<T> in = adjoint_input(batch[i].theta2, batch[i].y2);
        n2[i] = in.dim(0);
        parts.push_back(reshape(in, {n2[i], 1, p, p}));
      }
    Tensor<T> F = model.forward(concat(parts, 0));
    std::int64_t off = 0;
    f1.resize(batch.size());
    f2.clear();
    f2.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      f1[i] = reshape(narrow(F, 0, off, n1[i]), {n1[i], p, p});
      off += n1[i];
    }
    if (both)
      for (std::size_t i = 0; i < batch.size(); ++i) {
        f2[i] = reshape(narrow(F, 0, off, n2[i]), {n2[i], p, p});
        off += n2[i];
      }
  };

  auto supervised_loss = [&](const std::vector<MeasurementPair<T>>& batch) {
    std::vector<Tensor<T>> f1, f2;
    forward_split(batch, false, f1, f2);
    Tensor<T> total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const CompressivePatchOp<T>& op = batch[i].theta1.cs();
      Tensor<T> target = patch_gather(batch[i].x_eval, op.dy(), op.dx(), op.grid_h(H),
                                      op.grid_w(W), p);
      Tensor<T> li = rho_mean(sub(f1[i], target), cfg.rho);
      total = i == 0 ? li : add(total, li);
    }
    return scale(total, static_cast<T>(1.0 / static_cast<double>(batch.size())));
  };

  auto unsup_losses = [&](const std::vector<MeasurementPair<T>>& batch, Tensor<T>& sw,
                          Tensor<T>& se) {
    std::vector<Tensor<T>> f1, f2;
    forward_split(batch, true, f1, f2);
    sw = swap_loss_cs(f1, f2, batch, H, W, cfg.rho);
    if (cfg.weights.gamma > 0) se = self_loss_cs(f1, f2, batch, cfg.rho);
  };

  // the supervised baseline redraws operators and noise over the latent
  // images every epoch; unsupervised pairs stay frozen
  std::vector<MeasurementPair<T>> regen;
  Rng sup_root = Rng(cfg.seed).derive("supervised-epochs");
  auto epoch_begin = [&](int epoch) {
    if (!supervised) return;
    Rng e = sup_root.derive(static_cast<std::uint64_t>(epoch));
    regen = build_pair_dataset(data.latent, data.dist, data.noise, e.next_u64(),
                               PairDatasetOptions{true, false});
  };

  auto step_fn = [&](std::span<const std::int64_t> idx, std::int64_t step) -> StepTerms {
    const std::vector<MeasurementPair<T>>& source = supervised ? regen : data.train;
    std::vector<MeasurementPair<T>> batch = pick(source, idx);
    try {
      Tape<T> tape;
      if (supervised) {
        Tensor<T> total = supervised_loss(batch);
        return finish_step(total, Tensor<T>{}, Tensor<T>{}, Tensor<T>{}, Tensor<T>{}, idx,
                           batch, step);
      }
      Tensor<T> sw, se;
      unsup_losses(batch, sw, se);
      Tensor<T> total = combined_objective(sw, se, Tensor<T>{}, Tensor<T>{},
                                           LossWeights{cfg.weights.gamma, 0, 0});
      return finish_step(total, sw, se, Tensor<T>{}, Tensor<T>{}, idx, batch, step);
    } catch (const TensorError& e) {
      throw TrainError(batch_diagnostic(idx, batch, step) + e.what());
    }
  };

  const bool val_has_eval = std::all_of(data.val.begin(), data.val.end(),
                                        [](const MeasurementPair<T>& r) {
                                          return r.x_eval.defined();
                                        });
  auto validate = [&]() -> std::pair<double, double> {
    // value-only: no tape is active, so nothing is recorded
    double num = 0;
    std::int64_t den = 0;
    std::vector<std::int64_t> order = iota_n(static_cast<std::int64_t>(data.val.size()));
    for (std::size_t at = 0; at < data.val.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                              data.val.size() - at);
      std::vector<MeasurementPair<T>> batch(data.val.begin() + static_cast<std::ptrdiff_t>(at),
                                            data.val.begin() +
                                                static_cast<std::ptrdiff_t>(at + len));
      Tensor<T> loss;
      if (supervised) {
        loss = supervised_loss(batch);
      } else {
        Tensor<T> sw, se;
        unsup_losses(batch, sw, se);
        loss = combined_objective(sw, se, Tensor<T>{}, Tensor<T>{},
                                  LossWeights{cfg.weights.gamma, 0, 0});
      }
      num += static_cast<double>(loss.item()) * static_cast<double>(len);
      den += static_cast<std::int64_t>(len);
    }
    double vpsnr = val_has_eval ? evaluate(model, data.val) : kNan;
    return {num / static_cast<double>(den), vpsnr};
  };

  TrainResult out;
  if (!supervised) out.pair_hash_start = dataset_hash(data.train);
  std::int64_t n_records = supervised ? static_cast<std::int64_t>(data.latent.size())
                                      : static_cast<std::int64_t>(data.train.size());
  TrainResult driven = drive<T>(cfg, n_records, params, carry, on_epoch, epoch_begin, step_fn, validate);
  driven.pair_hash_start = out.pair_hash_start;
  if (!supervised) {
    driven.pair_hash_end = dataset_hash(data.train);
    if (driven.pair_hash_end != driven.pair_hash_start)
      throw TrainError("frozen training pairs changed during training");
  }
  return driven;
}

template <typename T>
TrainResult train(const TrainConfig& cfg, const PairedData<T>& data, DeblurEstimator<T>& model,
                  TrainCarry<T>* carry, const std::function<void(const EpochRecord&)>& on_epoch) {
  validate_config(cfg);
  if (data.H <= 0 || data.W <= 0) throw TrainError("dataset geometry H, W must be set");
  const std::int64_t H = data.H, W = data.W;
  if (model.config().image != H || model.config().image != W)
    throw TrainError("estimator image size does not match the dataset");
  const bool supervised = cfg.regime == Regime::supervised;
  const bool blind = cfg.regime == Regime::unsup_blind;
  if (blind && !model.config().kernel_head)
    throw TrainError("blind training needs an estimator with a kernel head");
  const Boundary bnd = data.dist.boundary();
  const int crop = bnd == Boundary::zero ? data.dist.kernel_size() / 2 : 0;

  auto check_records = [&](const std::vector<MeasurementPair<T>>& recs, bool need_eval,
                           const char* who) {
    for (const MeasurementPair<T>& r : recs) {
      if (blind) {
        if (r.theta1.defined() || r.theta2.defined())
          throw TrainError(std::string(who) +
                           " records carry operators; the blind regime must not see them");
      } else {
        if (r.theta1.kind() != MeasurementOp<T>::Kind::convolution ||
            r.theta2.kind() != MeasurementOp<T>::Kind::convolution)
          throw TrainError(std::string(who) + " needs convolution operators");
      }
      if (need_eval && !r.x_eval.defined())
        throw TrainError(std::string(who) + " records need ground-truth images");
    }
  };
  if (data.val.empty()) throw TrainError("validation records are required");
  check_records(data.val, supervised, "validation");
  if (supervised) {
    if (data.latent.empty()) throw TrainError("the supervised regime needs latent images");
  } else {
    if (data.train.empty()) throw TrainError("unsupervised regimes need frozen training pairs");
    check_records(data.train, false, "training");
  }

  std::vector<Tensor<T>*> params = model.params();
  std::unordered_set<const Tensor<T>*> head;
  if (model.config().kernel_head)
    for (Tensor<T>* h : model.kernel_head_params()) head.insert(h);

  auto as_batch = [&](const std::vector<Tensor<T>>& imgs) {
    std::vector<Tensor<T>> parts;
    parts.reserve(imgs.size());
    for (const Tensor<T>& im : imgs) parts.push_back(reshape(im, {1, 1, H, W}));
    return concat(parts, 0);
  };
  auto split_images = [&](const Tensor<T>& stacked, std::size_t n, std::size_t from) {
    std::vector<Tensor<T>> out(n);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = reshape(narrow(stacked, 0, static_cast<std::int64_t>(from + i), 1), {H, W});
    return out;
  };

  auto supervised_loss = [&](const std::vector<MeasurementPair<T>>& batch) {
    std::vector<Tensor<T>> y1s;
    for (const auto& r : batch) y1s.push_back(r.y1);
    Tensor<T> F = model.forward(as_batch(y1s), false).image;
    std::vector<Tensor<T>> f1 = split_images(F, batch.size(), 0);
    Tensor<T> total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor<T> li = rho_mean(sub(f1[i], batch[i].x_eval), cfg.rho);
      total = i == 0 ? li : add(total, li);
    }
    return scale(total, static_cast<T>(1.0 / static_cast<double>(batch.size())));
  };

  // swap/self for one batch; kernels are true operators (non-blind) or
  // detached estimates (blind, unless the failure-mode flag clears that)
  auto unsup_losses = [&](const std::vector<MeasurementPair<T>>& batch, Tensor<T>& sw,
                          Tensor<T>& se, std::vector<Tensor<T>>& f1) {
    std::vector<Tensor<T>> ys;
    ys.reserve(batch.size() * 2);
    for (const auto& r : batch) ys.push_back(r.y1);
    for (const auto& r : batch) ys.push_back(r.y2);
    DeblurOut<T> o = model.forward(as_batch(ys), blind);
    f1 = split_images(o.image, batch.size(), 0);
    std::vector<Tensor<T>> f2 = split_images(o.image, batch.size(), batch.size());
    std::vector<Tensor<T>> k1, k2;
    if (blind) {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor<T> a = o.kernels[i];
        Tensor<T> b = o.kernels[batch.size() + i];
        k1.push_back(cfg.stopgrad_kernel ? stop_gradient(a) : a);
        k2.push_back(cfg.stopgrad_kernel ? stop_gradient(b) : b);
      }
    } else {
      k1 = pair_kernels(batch, 1);
      k2 = pair_kernels(batch, 2);
    }
    std::vector<Tensor<T>> y1s, y2s;
    for (const auto& r : batch) y1s.push_back(r.y1);
    for (const auto& r : batch) y2s.push_back(r.y2);
    sw = swap_loss_blur(f1, f2, k1, k2, y1s, y2s, cfg.rho, bnd, crop);
    if (cfg.weights.gamma > 0) se = self_loss_blur(f1, f2, k1, k2, y1s, y2s, cfg.rho, bnd, crop);
  };

  // proxies re-measure detached direction-1 predictions under fresh draws
  auto proxy_losses = [&](const std::vector<Tensor<T>>& f1, std::uint64_t seed, Tensor<T>& pt,
                          Tensor<T>& px) {
    std::vector<ProxySample<T>> samples = make_proxy_batch(f1, data.dist, data.noise, seed);
    std::vector<Tensor<T>> yps;
    for (const auto& s : samples) yps.push_back(s.y_plus);
    Tensor<T> Yp = as_batch(yps);
    if (cfg.weights.beta > 0) {
      Tensor<T> Fp = model.forward(Yp, false).image;
      std::vector<Tensor<T>> est = split_images(Fp, samples.size(), 0);
      std::vector<Tensor<T>> targets;
      for (const auto& s : samples) targets.push_back(s.x_plus);
      px = proxy_image_loss(est, targets, cfg.rho);
    }
    if (cfg.weights.alpha > 0) {
      std::vector<Tensor<T>> khat = model.forward_kernels_headonly(Yp);
      std::vector<Tensor<T>> targets;
      for (const auto& s : samples) targets.push_back(s.theta_plus.conv().kernel());
      pt = proxy_param_loss(khat, targets, cfg.rho);
    }
  };

  std::vector<MeasurementPair<T>> regen;
  Rng sup_root = Rng(cfg.seed).derive("supervised-epochs");
  auto epoch_begin = [&](int epoch) {
    if (!supervised) return;
    Rng e = sup_root.derive(static_cast<std::uint64_t>(epoch));
    regen = build_pair_dataset(data.latent, data.dist, data.noise, e.next_u64(),
                               PairDatasetOptions{true, false});
  };

  Rng proxy_root = Rng(cfg.seed).derive("proxy-steps");
  auto step_seed_at = [&](std::int64_t step) {
    Rng r = proxy_root.derive(static_cast<std::uint64_t>(step));
    return r.next_u64();
  };

  auto step_fn = [&](std::span<const std::int64_t> idx, std::int64_t step) -> StepTerms {
    const std::vector<MeasurementPair<T>>& source = supervised ? regen : data.train;
    std::vector<MeasurementPair<T>> batch = pick(source, idx);
    const bool proxies_on = (cfg.weights.alpha > 0 || cfg.weights.beta > 0) &&
                            step >= cfg.proxy_warmup;
    const std::uint64_t pseed = step_seed_at(step);
    try {
      if (cfg.check_isolation && blind) {
        // contract: swap/self never reach the kernel head, and the parameter
        // proxy never reaches the image network; each gets its own graph
        {
          Tape<T> probe;
          Tensor<T> sw, se;
          std::vector<Tensor<T>> f1;
          unsup_losses(batch, sw, se, f1);
          Tensor<T> part = combined_objective(sw, se, Tensor<T>{}, Tensor<T>{},
                                              LossWeights{cfg.weights.gamma, 0, 0});
          backward(part);
        }
        for (const Tensor<T>* h : head)
          if (!grad_all_zero(*h))
            throw TrainError(batch_diagnostic(idx, batch, step) +
                             "swap/self gradient reached the kernel head");
        zero_all_grads(params);
        if (proxies_on && cfg.weights.alpha > 0) {
          {
            Tape<T> probe;
            Tensor<T> sw, se;
            std::vector<Tensor<T>> f1;
            unsup_losses(batch, sw, se, f1);
            Tensor<T> pt, px;
            proxy_losses(f1, pseed, pt, px);
            backward(scale(pt, static_cast<T>(cfg.weights.alpha)));
          }
          for (const Tensor<T>* q : params)
            if (!head.count(q) && !grad_all_zero(*q))
              throw TrainError(batch_diagnostic(idx, batch, step) +
                               "parameter-proxy gradient reached the image network");
          zero_all_grads(params);
        }
      }
      Tape<T> tape;
      if (supervised) {
        Tensor<T> total = supervised_loss(batch);
        return finish_step(total, Tensor<T>{}, Tensor<T>{}, Tensor<T>{}, Tensor<T>{}, idx,
                           batch, step);
      }
      Tensor<T> sw, se, pt, px;
      std::vector<Tensor<T>> f1;
      unsup_losses(batch, sw, se, f1);
      LossWeights eff = cfg.weights;
      if (!proxies_on) eff.alpha = eff.beta = 0;
      if (proxies_on) proxy_losses(f1, pseed, pt, px);
      Tensor<T> total = combined_objective(sw, se, pt, px, eff);
      return finish_step(total, sw, se, pt, px, idx, batch, step);
    } catch (const TensorError& e) {
      throw TrainError(batch_diagnostic(idx, batch, step) + e.what());
    }
  };

  const bool val_has_eval = std::all_of(data.val.begin(), data.val.end(),
                                        [](const MeasurementPair<T>& r) {
                                          return r.x_eval.defined();
                                        });
  // fixed draw stream so every validation pass prices the proxies identically
  Rng val_root = Rng(cfg.seed).derive("validation-proxy");
  auto validate = [&]() -> std::pair<double, double> {
    double num = 0;
    std::int64_t den = 0;
    std::int64_t vb = 0;
    for (std::size_t at = 0; at < data.val.size();
         at += static_cast<std::size_t>(cfg.batch_size), ++vb) {
      std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                              data.val.size() - at);
      std::vector<MeasurementPair<T>> batch(data.val.begin() + static_cast<std::ptrdiff_t>(at),
                                            data.val.begin() +
                                                static_cast<std::ptrdiff_t>(at + len));
      Tensor<T> loss;
      if (supervised) {
        loss = supervised_loss(batch);
      } else {
        Tensor<T> sw, se, pt, px;
        std::vector<Tensor<T>> f1;
        unsup_losses(batch, sw, se, f1);
        if (cfg.weights.alpha > 0 || cfg.weights.beta > 0) {
          Rng r = val_root.derive(static_cast<std::uint64_t>(vb));
          proxy_losses(f1, r.next_u64(), pt, px);
        }
        loss = combined_objective(sw, se, pt, px, cfg.weights);
      }
      num += static_cast<double>(loss.item()) * static_cast<double>(len);
      den += static_cast<std::int64_t>(len);
    }
    double vpsnr = val_has_eval ? evaluate(model, data.val) : kNan;
    return {num / static_cast<double>(den), vpsnr};
  };

  TrainResult out;
  if (!supervised) out.pair_hash_start = dataset_hash(data.train);
  std::int64_t n_records = supervised ? static_cast<std::int64_t>(data.latent.size())
                                      : static_cast<std::int64_t>(data.train.size());
  TrainResult driven = drive<T>(cfg, n_records, params, carry, on_epoch, epoch_begin, step_fn, validate);
  driven.pair_hash_start = out.pair_hash_start;
  if (!supervised) {
    driven.pair_hash_end = dataset_hash(data.train);
    if (driven.pair_hash_end != driven.pair_hash_start)
      throw TrainError("frozen training pairs changed during training");
  }
  return driven;
}

#define PAIRMEAS_TRAIN_INSTANTIATE(T)                                                          \
  template AdamState<T> make_adam_state(const std::vector<Tensor<T>*>&, AdamConfig);           \
  template void adam_step(const std::vector<Tensor<T>*>&, AdamState<T>&, double);              \
  template std::vector<ProxySample<T>> make_proxy_batch(const std::vector<Tensor<T>>&,         \
                                                        const ParamDistribution<T>&,           \
                                                        const GaussianNoise<T>&,               \
                                                        std::uint64_t);                        \
  template Tensor<T> assemble_cs(const Tensor<T>&, const Tensor<T>&,                           \
                                 const MeasurementPair<T>&, std::int64_t, std::int64_t);       \
  template double evaluate(const CsEstimator<T>&, const std::vector<MeasurementPair<T>>&);     \
  template double evaluate(const DeblurEstimator<T>&, const std::vector<MeasurementPair<T>>&); \
  template std::uint64_t dataset_hash(const std::vector<MeasurementPair<T>>&);                 \
  template TrainResult train(const TrainConfig&, const PairedData<T>&, CsEstimator<T>&,        \
                             TrainCarry<T>*, const std::function<void(const EpochRecord&)>&);  \
  template TrainResult train(const TrainConfig&, const PairedData<T>&, DeblurEstimator<T>&,    \
                             TrainCarry<T>*, const std::function<void(const EpochRecord&)>&);

PAIRMEAS_TRAIN_INSTANTIATE(float)
PAIRMEAS_TRAIN_INSTANTIATE(double)

#undef PAIRMEAS_TRAIN_INSTANTIATE

}  // namespace pairmeas

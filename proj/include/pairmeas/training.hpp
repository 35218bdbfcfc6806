#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pairmeas/losses.hpp"
#include "pairmeas/measurement.hpp"
#include "pairmeas/models.hpp"
#include "pairmeas/tensor.hpp"

namespace pairmeas {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// supervised: fresh operator and noise draws over ground-truth images every
// epoch. unsup_nonblind: frozen measurement pairs with known operators.
// unsup_blind: frozen pairs, operators estimated from each observation.
enum class Regime { supervised, unsup_nonblind, unsup_blind };

// accepts "supervised", "unsup-nonblind", "unsup-blind"
Regime parse_regime(std::string_view name);
std::string_view regime_name(Regime r);

struct TrainConfig {
  Regime regime = Regime::unsup_nonblind;
  LossWeights weights;
  Norm rho = Norm::l2;
  double lr = 1e-3;
  int lr_drops = 2;          // each drop divides lr by sqrt(10)
  int plateau_patience = 5;  // validation passes without a >=0.1% improvement
  int batch_size = 8;        // records per optimizer step
  int max_epochs = 50;
  std::uint64_t seed = 0;
  int eval_interval = 1;  // epochs between validation passes
  int proxy_warmup = 0;   // optimizer steps before proxy terms switch on
  bool stopgrad_kernel = true;   // detach estimated kernels inside swap/self
  bool check_isolation = false;  // re-derive the gradient-isolation contracts
                                 // every step via separate backward passes
                                 // (roughly triples step cost)
};

// Loss terms are per-epoch means over the steps where the term was active;
// inactive terms and skipped validations hold NaN.
struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double swap = std::numeric_limits<double>::quiet_NaN();
  double self = std::numeric_limits<double>::quiet_NaN();
  double proxy_param = std::numeric_limits<double>::quiet_NaN();
  double proxy_image = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_psnr = std::numeric_limits<double>::quiet_NaN();
  double lr = 0;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double final_lr = 0;
  int lr_drops_taken = 0;
  bool early_stopped = false;
  // hashes of the frozen training pairs before the first and after the last
  // epoch; zero in the supervised regime where pairs are redrawn
  std::uint64_t pair_hash_start = 0, pair_hash_end = 0;
};

// Drops the learning rate by sqrt(10) once the best validation value has not
// improved by at least 0.1% (relative) for `patience` consecutive
// observations, at most `max_drops` times; one further full plateau sets
// `stopped`.
struct PlateauScheduler {
  double lr = 1e-3;
  int patience = 5;
  int max_drops = 2;

  double best = std::numeric_limits<double>::infinity();
  int stall = 0;
  int drops = 0;
  bool stopped = false;

  // returns true when this observation dropped the rate
  bool observe(double val);
};

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig cfg;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // one moment pair per parameter tensor
};

template <typename T>
AdamState<T> make_adam_state(const std::vector<Tensor<T>*>& params, AdamConfig cfg = {});

// Bias-corrected Adam update in place; a parameter without a gradient buffer
// counts as zero gradient. Moment arithmetic runs in double for both
// instantiations so updates are deterministic and order-independent.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& st, double lr);

// One synthetic supervised sample: the estimator's own prediction, detached,
// re-measured under a freshly drawn operator and noise.
template <typename T>
struct ProxySample {
  Tensor<T> x_plus;             // gradient-isolated prediction
  MeasurementOp<T> theta_plus;  // fresh draw, never one of the frozen pairs
  std::uint64_t eps_seed = 0;
  Tensor<T> y_plus;  // = measure(theta_plus, x_plus, noise, eps_seed)
};

// Fresh draws every call: pass a distinct seed per optimizer step. x_plus is
// detached here, so no downstream loss can reach the network that produced
// the predictions.
template <typename T>
std::vector<ProxySample<T>> make_proxy_batch(const std::vector<Tensor<T>>& predictions,
                                             const ParamDistribution<T>& dist,
                                             const GaussianNoise<T>& noise, std::uint64_t seed);

// Everything a training run consumes. `latent` feeds the supervised regime,
// which redraws operators and noise per epoch; `train`/`val` are the frozen
// records the unsupervised regimes see. `val` drives plateau detection in
// every regime.
template <typename T>
struct PairedData {
  std::vector<Tensor<T>> latent;
  std::vector<MeasurementPair<T>> train, val;
  ParamDistribution<T> dist;
  GaussianNoise<T> noise;
  std::int64_t H = 0, W = 0;
};

// Optimizer and scheduler state at an epoch boundary. A run handed a carry
// with epochs_done > 0 resumes at epoch epochs_done + 1 and reproduces the
// uninterrupted run bit for bit: shuffle order and proxy streams derive from
// the epoch and global step, which both continue. A fresh carry (or none)
// starts from scratch; on return the carry holds the state after the last
// completed epoch.
template <typename T>
struct TrainCarry {
  AdamState<T> adam;
  int epochs_done = 0;
  double lr = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int stall = 0;
  int drops_taken = 0;
  bool stopped = false;
};

template <typename T>
TrainResult train(const TrainConfig& cfg, const PairedData<T>& data, CsEstimator<T>& model,
                  TrainCarry<T>* carry = nullptr,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});
template <typename T>
TrainResult train(const TrainConfig& cfg, const PairedData<T>& data, DeblurEstimator<T>& model,
                  TrainCarry<T>* carry = nullptr,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// 10*log10(1/mse) for [0,1]-range images, capped at 99 dB
double psnr_from_mse(double mse);

// Coverage-averaged [H,W] image from the two partitions' predicted patches
// [n,p,p]; pixels neither partition tiles take the midpoint 0.5. Value-level:
// nothing is recorded on the tape.
template <typename T>
Tensor<T> assemble_cs(const Tensor<T>& pred1, const Tensor<T>& pred2,
                      const MeasurementPair<T>& rec, std::int64_t H, std::int64_t W);

// Mean PSNR against x_eval over the set; records must carry ground truth.
// Patch records are assembled to full images first.
template <typename T>
double evaluate(const CsEstimator<T>& model, const std::vector<MeasurementPair<T>>& eval_set);
template <typename T>
double evaluate(const DeblurEstimator<T>& model, const std::vector<MeasurementPair<T>>& eval_set);

// Order-sensitive FNV-1a over every measurement tensor in the set: y1, y2,
// and the operators' defining values (projection matrix and offsets, or
// kernel and boundary). Ground-truth images are excluded.
template <typename T>
std::uint64_t dataset_hash(const std::vector<MeasurementPair<T>>& pairs);

}  // namespace pairmeas

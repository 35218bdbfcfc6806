// command-line driver: dataset generation, training, evaluation, operator
// diagnostics and the analytic checks, glued together by key=value configs

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "pairmeas/io.hpp"
#include "pairmeas/losses.hpp"
#include "pairmeas/measurement.hpp"
#include "pairmeas/models.hpp"
#include "pairmeas/tensor.hpp"
#include "pairmeas/theory.hpp"
#include "pairmeas/training.hpp"

namespace fs = std::filesystem;
using namespace pairmeas;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string regime;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
};

void add_common_flags(CLI::App* sub, Flags& fl, bool with_regime = false) {
  sub->add_option("--config", fl.config, "configuration file");
  sub->add_option("--out", fl.out, "output directory, overrides run.out");
  sub->add_option("--threads", fl.threads, "worker threads, overrides run.threads")
      ->check(CLI::Range(1, 256));
  sub->add_option_function<std::uint64_t>(
         "--seed", [&fl](const std::uint64_t& s) { fl.seed = s; fl.seed_set = true; },
         "master seed, overrides run.seed");
  if (with_regime) sub->add_option("--regime", fl.regime, "overrides train.regime");
}

Config load_config(const Flags& fl, bool required = true) {
  if (required && fl.config.empty()) throw IoError("--config is required for this command");
  Config cfg = fl.config.empty() ? Config() : Config::parse_file(fl.config);
  if (fl.seed_set) cfg.set("run.seed", std::to_string(fl.seed));
  if (!fl.out.empty()) cfg.set("run.out", fl.out);
  if (fl.threads > 0) cfg.set("run.threads", std::to_string(fl.threads));
  if (!fl.regime.empty()) cfg.set("train.regime", fl.regime);
  return cfg;
}

std::string ensure_out(const Config& cfg) {
  std::string out = cfg.get("run.out");
  fs::create_directories(out);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("short write to " + path);
}

// every run leaves the config it actually used next to its outputs
void write_resolved(const Config& cfg, const std::string& out) {
  write_text(out + "/resolved.cfg", cfg.serialize());
}

const std::set<std::string> kRunKeys = {"run.seed", "run.out", "run.threads"};

std::set<std::string> with_run(std::set<std::string> keys) {
  keys.insert(kRunKeys.begin(), kRunKeys.end());
  return keys;
}

// family keys shared by gen-data ("data."), analyze-q ("q.") and
// verify-theory ("theory.")
std::set<std::string> family_keys(const std::string& p) {
  return {p + "kind",     p + "image", p + "patch",    p + "m",       p + "ratio",
          p + "ksize",    p + "max_walk", p + "boundary", p + "fixed", p + "sigma"};
}

struct Family {
  ParamDistribution<double> dist;
  std::string kind;
  std::int64_t side = 0;
  int max_walk = 0;
  double sigma = 0;
  bool fixed = false;
};

Family make_family(const Config& cfg, const std::string& p, std::uint64_t seed) {
  Family fam;
  fam.kind = cfg.get(p + "kind");
  fam.side = cfg.get_int(p + "image");
  if (fam.side < 2 || fam.side > 512) throw IoError(p + "image must be in [2, 512]");
  fam.sigma = cfg.get_double(p + "sigma", 0.0);
  if (fam.sigma < 0) throw IoError(p + "sigma must be nonnegative");
  if (fam.kind == "cs-shifted" || fam.kind == "cs-fresh") {
    int patch = static_cast<int>(cfg.get_int(p + "patch"));
    if (patch < 1 || patch > fam.side) throw IoError(p + "patch must be in [1, image]");
    int m;
    if (cfg.has(p + "m")) {
      if (cfg.has(p + "ratio")) throw IoError("set one of " + p + "m or " + p + "ratio");
      m = static_cast<int>(cfg.get_int(p + "m"));
    } else {
      double ratio = cfg.get_double(p + "ratio");
      if (!(ratio > 0 && ratio <= 1)) throw IoError(p + "ratio must be in (0, 1]");
      m = static_cast<int>(std::llround(ratio * patch * patch));
    }
    if (m < 1 || m > patch * patch)
      throw IoError("measurement count " + std::to_string(m) + " is outside [1, patch^2]");
    if (fam.kind == "cs-shifted") {
      Rng rng = Rng(seed).derive("family-phi");
      fam.dist = ParamDistribution<double>::cs_shifted(
          orthonormal_rows<double>(m, patch * patch, rng), patch);
    } else {
      fam.dist = ParamDistribution<double>::cs_fresh(m, patch);
    }
  } else if (fam.kind == "motion") {
    int ksize = static_cast<int>(cfg.get_int(p + "ksize"));
    fam.max_walk = static_cast<int>(cfg.get_int(p + "max_walk"));
    std::string bnd = cfg.get(p + "boundary", "circular");
    if (bnd != "circular" && bnd != "zero") throw IoError(p + "boundary must be circular or zero");
    fam.dist = ParamDistribution<double>::motion_kernels(
        ksize, fam.max_walk, bnd == "circular" ? Boundary::circular : Boundary::zero);
  } else {
    throw IoError(p + "kind must be cs-shifted, cs-fresh or motion");
  }
  if (cfg.get_bool(p + "fixed", false)) {
    // degenerate family: a single draw, reused for every record
    fam.fixed = true;
    Rng rng = Rng(seed).derive("fixed-draw");
    fam.dist = ParamDistribution<double>::fixed_op(fam.dist.sample(rng));
  }
  return fam;
}

double mse_of(const Tensor<double>& a, const Tensor<double>& b) {
  auto va = a.values();
  auto vb = b.values();
  if (va.size() != vb.size()) throw TrainError("prediction/ground-truth size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    double d = va[i] - vb[i];
    acc += d * d;
  }
  return acc / static_cast<double>(va.size());
}

Tensor<double> reconstruct_cs(const CsEstimator<double>& model, const MeasurementPair<double>& rec,
                              std::int64_t H, std::int64_t W) {
  const std::int64_t p = model.config().patch;
  auto predict = [&](const MeasurementOp<double>& theta, const Tensor<double>& y) {
    Tensor<double> in = adjoint_input(theta, y);
    const std::int64_t n = in.dim(0);
    Tensor<double> f = model.forward(reshape(in, {n, 1, p, p}));
    return reshape(f, {n, p, p});
  };
  return assemble_cs(predict(rec.theta1, rec.y1), predict(rec.theta2, rec.y2), rec, H, W);
}

Tensor<double> reconstruct_deblur(const DeblurEstimator<double>& model, const Tensor<double>& y) {
  const std::int64_t H = y.dim(0), W = y.dim(1);
  Tensor<double> out = model.forward(reshape(y.clone(), {1, 1, H, W}), false).image;
  return reshape(out, {H, W});
}

// ---------------- gen-data ----------------

std::vector<Tensor<double>> source_images(const Config& cfg, std::int64_t records,
                                          std::int64_t side, std::uint64_t seed) {
  std::string source = cfg.get("data.source", "synthetic");
  std::vector<Tensor<double>> images;
  images.reserve(static_cast<std::size_t>(records));
  if (source == "synthetic") {
    std::int64_t cell = cfg.get_int("data.cell", 4);
    Rng root = Rng(seed).derive("images");
    for (std::int64_t i = 0; i < records; ++i) {
      Rng rng = root.derive(static_cast<std::uint64_t>(i));
      images.push_back(piecewise_constant_image<double>(side, side, cell, rng));
    }
    return images;
  }
  if (!fs::is_directory(source)) throw IoError("data.source is neither 'synthetic' nor a directory");
  std::vector<std::string> files;
  for (const auto& ent : fs::directory_iterator(source)) {
    std::string ext = ent.path().extension().string();
    if (ent.is_regular_file() && (ext == ".pgm" || ext == ".ppm"))
      files.push_back(ent.path().string());
  }
  std::sort(files.begin(), files.end());
  if (static_cast<std::int64_t>(files.size()) < records)
    throw IoError("image source holds " + std::to_string(files.size()) + " images, need " +
                  std::to_string(records));
  for (std::int64_t i = 0; i < records; ++i) {
    Tensor<double> img = read_image(files[static_cast<std::size_t>(i)]);
    std::int64_t H = img.dim(0), W = img.dim(1);
    if (H < side || W < side)
      throw IoError(files[static_cast<std::size_t>(i)] + " is smaller than the canvas");
    // center crop
    std::int64_t r0 = (H - side) / 2, c0 = (W - side) / 2;
    std::vector<double> vals(static_cast<std::size_t>(side * side));
    auto v = img.values();
    for (std::int64_t r = 0; r < side; ++r)
      for (std::int64_t c = 0; c < side; ++c)
        vals[static_cast<std::size_t>(r * side + c)] =
            v[static_cast<std::size_t>((r0 + r) * W + (c0 + c))];
    images.push_back(Tensor<double>::from({side, side}, std::move(vals)));
  }
  return images;
}

int cmd_gen_data(const Config& cfg) {
  auto allowed = with_run(family_keys("data."));
  allowed.insert({"data.records", "data.source", "data.cell", "data.blind", "data.eval"});
  reject_unknown_keys(cfg, allowed);
  std::string out = ensure_out(cfg);
  std::uint64_t seed = cfg.get_u64("run.seed", 1);
  int threads = static_cast<int>(cfg.get_int("run.threads", 1));
  if (threads < 1 || threads > 256) throw IoError("run.threads must be in [1, 256]");
  std::int64_t records = cfg.get_int("data.records");
  if (records < 1 || records > 1000000) throw IoError("data.records must be in [1, 1e6]");

  Family fam = make_family(cfg, "data.", seed);
  DatasetInfo info;
  info.height = info.width = fam.side;
  info.sigma = fam.sigma;
  info.seed = seed;
  info.max_walk = fam.max_walk;
  info.blind = cfg.get_bool("data.blind", false);
  info.has_eval = cfg.get_bool("data.eval", true);

  std::vector<Tensor<double>> images = source_images(cfg, records, fam.side, seed);
  GaussianNoise<double> noise(fam.sigma);

  // record seeds derive from the global index, so slicing across workers
  // reproduces the single-threaded dataset byte for byte
  std::vector<MeasurementPair<double>> recs(static_cast<std::size_t>(records));
  auto build_range = [&](std::int64_t lo, std::int64_t hi) {
    std::vector<Tensor<double>> slice(images.begin() + lo, images.begin() + hi);
    PairDatasetOptions opt;
    opt.keep_eval = info.has_eval;
    opt.first_record = lo;
    std::vector<MeasurementPair<double>> part =
        build_pair_dataset<double>(slice, fam.dist, noise, seed, opt);
    for (std::int64_t k = lo; k < hi; ++k)
      recs[static_cast<std::size_t>(k)] = std::move(part[static_cast<std::size_t>(k - lo)]);
  };
  if (threads == 1 || records < 2 * threads) {
    build_range(0, records);
  } else {
    std::int64_t chunk = (records + threads - 1) / threads;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      std::int64_t lo = t * chunk, hi = std::min<std::int64_t>(records, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&, lo, hi, t] {
        try {
          build_range(lo, hi);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (std::thread& th : pool) th.join();
    for (const std::exception_ptr& e : errors)
      if (e) std::rethrow_exception(e);
  }

  DatasetInfo stored = write_dataset(out, info, fam.dist, recs);
  write_resolved(cfg, out);
  char hex[24];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(stored.content_hash));
  std::cout << "wrote " << stored.records << " " << stored.kind << " records to " << out
            << " (hash " << hex << (stored.blind ? ", operators sealed" : "") << ")\n";
  return 0;
}

// ---------------- train ----------------

int cmd_train(const Config& cfg) {
  reject_unknown_keys(
      cfg, with_run({"train.dataset", "train.regime", "train.val_fraction", "train.val_records",
                     "train.gamma", "train.alpha", "train.beta", "train.rho", "train.lr",
                     "train.lr_drops", "train.patience", "train.batch", "train.epochs",
                     "train.eval_interval", "train.proxy_warmup", "train.stopgrad_kernel",
                     "train.check_isolation", "train.resume", "model.widths",
                     "model.kernel_head"}));
  std::string out = ensure_out(cfg);
  std::uint64_t seed = cfg.get_u64("run.seed", 1);

  std::string regime_name = cfg.get("train.regime");
  if (regime_name != "supervised" && regime_name != "unsup-nonblind" &&
      regime_name != "unsup-blind")
    throw IoError("train.regime must be supervised, unsup-nonblind or unsup-blind");
  TrainConfig tc;
  tc.regime = parse_regime(regime_name);
  const bool supervised = tc.regime == Regime::supervised;

  // the loader only ever touches ground truth for the supervised regime
  Dataset ds = read_dataset(cfg.get("train.dataset"), supervised);
  if (ds.info.blind != (tc.regime == Regime::unsup_blind))
    throw IoError(std::string("dataset is ") + (ds.info.blind ? "blind" : "non-blind") +
                  " but the regime is " + regime_name);

  std::int64_t n = ds.info.records;
  std::int64_t vrec;
  if (cfg.has("train.val_records")) {
    vrec = cfg.get_int("train.val_records");
  } else {
    double vf = cfg.get_double("train.val_fraction", 0.1);
    if (!(vf > 0 && vf < 1)) throw IoError("train.val_fraction must be in (0, 1)");
    vrec = std::max<std::int64_t>(1, std::llround(vf * static_cast<double>(n)));
  }
  if (vrec < 1 || vrec >= n) throw IoError("validation split leaves no training records");

  PairedData<double> data;
  data.H = ds.info.height;
  data.W = ds.info.width;
  data.dist = ds.dist;
  data.noise = ds.noise;
  data.train.assign(ds.records.begin(), ds.records.end() - vrec);
  data.val.assign(ds.records.end() - vrec, ds.records.end());
  if (supervised)
    for (const MeasurementPair<double>& rec : data.train) data.latent.push_back(rec.x_eval.clone());

  tc.weights.gamma = cfg.get_double("train.gamma", 0.0);
  tc.weights.alpha = cfg.get_double("train.alpha", 0.0);
  tc.weights.beta = cfg.get_double("train.beta", 0.0);
  std::string rho = cfg.get("train.rho", "l2");
  if (rho != "l2" && rho != "l1") throw IoError("train.rho must be l2 or l1");
  tc.rho = rho == "l2" ? Norm::l2 : Norm::l1;
  tc.lr = cfg.get_double("train.lr", tc.lr);
  tc.lr_drops = static_cast<int>(cfg.get_int("train.lr_drops", tc.lr_drops));
  tc.plateau_patience = static_cast<int>(cfg.get_int("train.patience", tc.plateau_patience));
  tc.batch_size = static_cast<int>(cfg.get_int("train.batch", tc.batch_size));
  tc.max_epochs = static_cast<int>(cfg.get_int("train.epochs", tc.max_epochs));
  tc.eval_interval = static_cast<int>(cfg.get_int("train.eval_interval", tc.eval_interval));
  tc.proxy_warmup = static_cast<int>(cfg.get_int("train.proxy_warmup", tc.proxy_warmup));
  tc.stopgrad_kernel = cfg.get_bool("train.stopgrad_kernel", tc.stopgrad_kernel);
  tc.check_isolation = cfg.get_bool("train.check_isolation", tc.check_isolation);
  tc.seed = seed;

  const bool is_cs = ds.info.kind != "motion";
  std::string resume = cfg.get("train.resume", "");

  auto run = [&](auto& model) {
    TrainCarry<double> carry;
    if (!resume.empty()) carry = extract_carry(read_container(resume), model.named_params());
    double best = std::numeric_limits<double>::infinity();
    auto on_epoch = [&](const EpochRecord& r) {
      if (!std::isnan(r.val_loss) && r.val_loss < best) {
        best = r.val_loss;
        write_container(out + "/best.ckpt", pack_model(model));
      }
      std::cout << "epoch " << r.epoch << ": train " << r.train_loss << ", val " << r.val_loss
                << (std::isnan(r.val_psnr) ? "" : ", psnr " + std::to_string(r.val_psnr))
                << ", lr " << r.lr << ", " << r.seconds << "s\n";
    };
    TrainResult res = train(tc, data, model, &carry, on_epoch);
    std::vector<NamedTensor> final_entries = pack_model(model);
    append_carry(final_entries, carry, model.named_params());
    write_container(out + "/final.ckpt", final_entries);
    if (best == std::numeric_limits<double>::infinity())
      write_container(out + "/best.ckpt", pack_model(model));
    write_metrics_csv(out + "/metrics.csv", res.history);
    std::cout << "finished after epoch " << carry.epochs_done << " (lr " << res.final_lr << ", "
              << res.lr_drops_taken << " drops" << (res.early_stopped ? ", stopped early" : "")
              << ")\n";
    if (!supervised) {
      char h1[24], h2[24];
      std::snprintf(h1, sizeof h1, "%016llx",
                    static_cast<unsigned long long>(res.pair_hash_start));
      std::snprintf(h2, sizeof h2, "%016llx", static_cast<unsigned long long>(res.pair_hash_end));
      std::cout << "frozen pairs " << h1 << " -> " << h2 << "\n";
    }
  };

  if (is_cs) {
    CsModelConfig mc;
    mc.patch = ds.info.patch;
    if (cfg.has("model.widths")) {
      std::vector<int> w = cfg.get_int_list("model.widths");
      if (w.size() != mc.widths.size()) throw IoError("model.widths needs 3 entries");
      std::copy(w.begin(), w.end(), mc.widths.begin());
    }
    if (!resume.empty()) {
      CsEstimator<double> model = unpack_cs_model<double>(read_container(resume));
      if (model.config().patch != ds.info.patch)
        throw IoError("checkpoint patch size does not match the dataset");
      run(model);
    } else {
      CsEstimator<double> model(mc, Rng(seed).derive("model-init").next_u64());
      run(model);
    }
  } else {
    DeblurModelConfig mc;
    if (ds.info.height != ds.info.width) throw IoError("deblur estimators need square canvases");
    mc.image = static_cast<int>(ds.info.height);
    mc.ksize = ds.info.ksize;
    mc.kernel_head = cfg.get_bool("model.kernel_head", true);
    if (cfg.has("model.widths")) {
      std::vector<int> w = cfg.get_int_list("model.widths");
      if (w.size() != mc.widths.size()) throw IoError("model.widths needs 4 entries");
      std::copy(w.begin(), w.end(), mc.widths.begin());
    }
    if (!resume.empty()) {
      DeblurEstimator<double> model = unpack_deblur_model<double>(read_container(resume));
      if (model.config().image != mc.image || model.config().ksize != mc.ksize)
        throw IoError("checkpoint geometry does not match the dataset");
      run(model);
    } else {
      DeblurEstimator<double> model(mc, Rng(seed).derive("model-init").next_u64());
      run(model);
    }
  }
  write_resolved(cfg, out);
  return 0;
}

// ---------------- eval ----------------

int cmd_eval(const Config& cfg) {
  reject_unknown_keys(cfg, with_run({"eval.checkpoint", "eval.dataset", "eval.limit",
                                     "eval.write_images"}));
  std::string out = ensure_out(cfg);
  std::vector<NamedTensor> entries = read_container(cfg.get("eval.checkpoint"));
  Dataset ds = read_dataset(cfg.get("eval.dataset"), true);
  std::int64_t limit = cfg.get_int("eval.limit", 0);
  std::int64_t count = limit > 0 ? std::min(limit, ds.info.records) : ds.info.records;
  bool write_images = cfg.get_bool("eval.write_images", true);

  ModelKind kind = container_kind(entries);
  if ((kind == ModelKind::cs) != (ds.info.kind != "motion"))
    throw IoError("checkpoint model kind does not match the dataset");
  if (kind == ModelKind::cs && ds.info.blind)
    throw IoError("compressive reconstruction needs the per-record operators; this dataset is blind");

  std::optional<CsEstimator<double>> cs_model;
  std::optional<DeblurEstimator<double>> db_model;
  if (kind == ModelKind::cs) {
    cs_model.emplace(unpack_cs_model<double>(entries));
    if (cs_model->config().patch != ds.info.patch)
      throw IoError("checkpoint patch size does not match the dataset");
  } else {
    db_model.emplace(unpack_deblur_model<double>(entries));
    if (db_model->config().image != ds.info.height || ds.info.height != ds.info.width)
      throw IoError("checkpoint image size does not match the dataset");
  }

  std::ostringstream csv;
  csv << "record,psnr\n";
  double acc = 0;
  for (std::int64_t k = 0; k < count; ++k) {
    const MeasurementPair<double>& rec = ds.records[static_cast<std::size_t>(k)];
    Tensor<double> img = kind == ModelKind::cs
                             ? reconstruct_cs(*cs_model, rec, ds.info.height, ds.info.width)
                             : reconstruct_deblur(*db_model, reshape(rec.y1.clone(),
                                                                     {ds.info.height,
                                                                      ds.info.width}));
    double psnr = psnr_from_mse(mse_of(img, rec.x_eval));
    acc += psnr;
    char row[64];
    std::snprintf(row, sizeof row, "%lld,%.4f\n", static_cast<long long>(k), psnr);
    csv << row;
    if (write_images) {
      char name[48];
      std::snprintf(name, sizeof name, "/recon_%04lld.pgm", static_cast<long long>(k));
      write_pgm(out + name, img);
    }
  }
  double mean = acc / static_cast<double>(count);
  char tail[48];
  std::snprintf(tail, sizeof tail, "mean,%.4f\n", mean);
  csv << tail;
  write_text(out + "/psnr.csv", csv.str());
  write_resolved(cfg, out);
  std::cout << "evaluated " << count << " records: mean PSNR " << mean << " dB\n";
  return 0;
}

// ---------------- analyze-q ----------------

int cmd_analyze_q(const Config& cfg) {
  auto allowed = with_run(family_keys("q."));
  allowed.insert({"q.samples", "q.threshold"});
  reject_unknown_keys(cfg, allowed);
  std::string out = ensure_out(cfg);
  std::uint64_t seed = cfg.get_u64("run.seed", 1);
  int samples = static_cast<int>(cfg.get_int("q.samples", 1000));
  double threshold = cfg.get_double("q.threshold", 1e-8);
  Family fam = make_family(cfg, "q.", seed);
  const std::int64_t N = fam.side * fam.side;
  if (N > 4096) throw IoError("the gram matrix analysis is capped at 64x64 canvases");

  Eigen::MatrixXd Q = gram_expectation(fam.dist, samples, fam.side, fam.side,
                                       Rng(seed).derive("q-gram").next_u64());
  QRankReport rep = q_rank_report(Q, threshold);

  std::ostringstream eig;
  eig << "index,eigenvalue\n";
  for (std::size_t i = 0; i < rep.eigenvalues.size(); ++i)
    eig << i << "," << rep.eigenvalues[i] << "\n";
  write_text(out + "/q_eigenvalues.csv", eig.str());

  std::ostringstream txt;
  txt << "family = " << fam.kind << "\n"
      << "dimension = " << N << "\n"
      << "rank = " << rep.rank << "\n"
      << "null_dim = " << rep.null_dim << "\n"
      << "full_rank = " << (rep.full_rank ? 1 : 0) << "\n"
      << "rel_threshold = " << rep.rel_threshold << "\n"
      << "eig_max = " << rep.eigenvalues.front() << "\n"
      << "eig_min = " << rep.eigenvalues.back() << "\n";
  write_text(out + "/q_report.txt", txt.str());

  if (fam.kind == "motion" && !fam.fixed) {
    std::vector<Tensor<double>> kernels;
    kernels.reserve(static_cast<std::size_t>(samples));
    Rng root = Rng(seed).derive("spectrum-kernels");
    for (int i = 0; i < samples; ++i)
      kernels.push_back(
          sample_motion_kernel(fam.dist, root.derive(static_cast<std::uint64_t>(i)).next_u64())
              .kernel()
              .clone());
    SpectrumReport sp = kernel_spectrum(kernels, fam.side, fam.side);
    std::ostringstream sc;
    sc << "u,v,average\n";
    for (std::int64_t u = 0; u < sp.H; ++u)
      for (std::int64_t v = 0; v < sp.W; ++v)
        sc << u << "," << v << "," << sp.average[static_cast<std::size_t>(u * sp.W + v)] << "\n";
    write_text(out + "/kernel_spectrum.csv", sc.str());
    std::cout << "kernel spectrum over " << samples << " draws: min " << sp.avg_min << ", max "
              << sp.avg_max << (sp.avg_min > 0 ? " (everywhere positive)" : " (has zeros)")
              << "\n";
  }

  if (rep.full_rank)
    std::cout << "Q is full rank (" << rep.rank << " of " << N << ")\n";
  else
    std::cout << "Q is rank deficient: rank " << rep.rank << " of " << N << ", null dimension "
              << rep.null_dim << "\n";
  write_resolved(cfg, out);
  return 0;
}

// ---------------- verify-theory ----------------

int cmd_verify_theory(const Config& cfg) {
  auto allowed = with_run(family_keys("theory."));
  allowed.insert({"theory.samples", "theory.estimator", "theory.pixel_std", "theory.pixel_mean",
                  "theory.bandwidth", "theory.train_records", "theory.eval_records",
                  "theory.q_samples", "theory.allow_deficient"});
  reject_unknown_keys(cfg, allowed);
  std::string out = ensure_out(cfg);
  std::uint64_t seed = cfg.get_u64("run.seed", 1);
  int samples = static_cast<int>(cfg.get_int("theory.samples", 100000));
  std::string estimator = cfg.get("theory.estimator", "zero");
  if (estimator != "zero" && estimator != "trained")
    throw IoError("theory.estimator must be zero or trained");

  Family fam = make_family(cfg, "theory.", seed);
  const std::int64_t N = fam.side * fam.side;
  GaussianNoise<double> noise(fam.sigma);
  BandedGaussian px = BandedGaussian::make(
      N, static_cast<int>(cfg.get_int("theory.bandwidth", 3)),
      cfg.get_double("theory.pixel_std", 0.25), cfg.get_double("theory.pixel_mean", 0.5),
      Rng(seed).derive("pixels").next_u64());

  Eigen::MatrixXd W;
  LinearOracleReport orep;
  bool have_oracle = false;
  if (estimator == "zero") {
    W = Eigen::MatrixXd::Zero(N, N);
  } else {
    LinearOracleConfig oc;
    oc.n_train = static_cast<int>(cfg.get_int("theory.train_records", oc.n_train));
    oc.n_eval = static_cast<int>(cfg.get_int("theory.eval_records", oc.n_eval));
    oc.q_samples = static_cast<int>(cfg.get_int("theory.q_samples", oc.q_samples));
    oc.allow_deficient = cfg.get_bool("theory.allow_deficient", false);
    try {
      orep = linear_oracle(fam.dist, noise, px, fam.side, fam.side, oc,
                           Rng(seed).derive("oracle").next_u64());
    } catch (const TheoryError& e) {
      // the measured subspace does not determine the estimator; saying so is
      // the correct analytical outcome, not a failure
      std::string msg = e.what();
      if (msg.find("allow_deficient") == std::string::npos) throw;
      std::cout << "refused: " << msg << "\n";
      write_text(out + "/identity.csv", "refused\n");
      write_resolved(cfg, out);
      return 0;
    }
    have_oracle = true;
    W = orep.w_swap;
  }

  IdentityReport rep = mc_swap_identity(W, fam.dist, noise, px, fam.side, fam.side, samples,
                                        Rng(seed).derive("identity").next_u64());

  std::ostringstream csv;
  csv << "lhs,rhs,rel_err,lhs_se,noise_floor,quad_term,n_samples,measurement_count\n";
  csv << rep.lhs << "," << rep.rhs << "," << rep.rel_err << "," << rep.lhs_se << ","
      << rep.noise_floor << "," << rep.quad_term << "," << rep.n_samples << ","
      << rep.measurement_count << "\n";
  write_text(out + "/identity.csv", csv.str());

  std::cout << "swap-loss identity over " << rep.n_samples << " draws:\n"
            << "  lhs " << rep.lhs << " vs rhs " << rep.rhs << " (rel err " << rep.rel_err
            << ", mc se " << rep.lhs_se << ")\n"
            << "  noise floor " << rep.noise_floor << ", quadratic term " << rep.quad_term
            << "\n";
  if (rep.rel_err < 0.01)
    std::cout << "  agreement within 1%\n";
  else
    std::cout << "  DISAGREEMENT above 1%\n";

  if (have_oracle) {
    std::ostringstream oc;
    oc << "psnr_sup,psnr_swap,psnr_gap,param_rel_dist,range_rel_err,null_rel_err,cg_iterations,"
          "cg_residual\n"
       << orep.psnr_sup << "," << orep.psnr_swap << "," << orep.psnr_gap << ","
       << orep.param_rel_dist << "," << orep.range_rel_err << "," << orep.null_rel_err << ","
       << orep.cg_iterations << "," << orep.cg_residual << "\n";
    write_text(out + "/oracle.csv", oc.str());
    std::cout << "linear estimators: supervised " << orep.psnr_sup << " dB, swap-trained "
              << orep.psnr_swap << " dB (gap " << orep.psnr_gap << " dB)\n"
              << "  parameter distance " << orep.param_rel_dist << ", trained-loss floor gap "
              << rep.lhs - rep.noise_floor << "\n";
    if (orep.q_report.full_rank) {
      std::cout << "  Q full rank: the two estimators agree\n";
    } else {
      std::cout << "  Q rank deficient (null dimension " << orep.q_report.null_dim
                << "): range agreement " << orep.range_rel_err << ", null disagreement "
                << orep.null_rel_err << "\n";
    }
  }
  write_resolved(cfg, out);
  return 0;
}

// ---------------- reconstruct ----------------

int cmd_reconstruct(const Config& cfg, const std::string& input) {
  auto allowed = with_run(family_keys("data."));
  allowed.insert("reconstruct.checkpoint");
  reject_unknown_keys(cfg, allowed);
  std::string out = ensure_out(cfg);
  std::uint64_t seed = cfg.get_u64("run.seed", 1);
  std::vector<NamedTensor> entries = read_container(cfg.get("reconstruct.checkpoint"));
  Tensor<double> img = read_image(input);
  std::string target = out + "/reconstruction.pgm";

  if (container_kind(entries) == ModelKind::deblur) {
    DeblurEstimator<double> model = unpack_deblur_model<double>(entries);
    if (img.dim(0) != model.config().image || img.dim(1) != model.config().image)
      throw IoError("input image does not match the estimator size");
    write_pgm(target, reconstruct_deblur(model, img));
  } else {
    // the input is a clean image; it is measured under a fresh draw of the
    // configured family, then reconstructed from those measurements alone
    CsEstimator<double> model = unpack_cs_model<double>(entries);
    Family fam = make_family(cfg, "data.", seed);
    if (fam.kind == "motion") throw IoError("a patch estimator needs a compressive family");
    if (fam.dist.patch_size() != model.config().patch)
      throw IoError("family patch size does not match the estimator");
    if (img.dim(0) != fam.side || img.dim(1) != fam.side)
      throw IoError("input image does not match data.image");
    GaussianNoise<double> noise(fam.sigma);
    PairDatasetOptions opt;
    opt.keep_eval = false;
    std::vector<MeasurementPair<double>> recs =
        build_pair_dataset<double>({img}, fam.dist, noise, seed, opt);
    write_pgm(target, reconstruct_cs(model, recs[0], fam.side, fam.side));
  }
  write_resolved(cfg, out);
  std::cout << "wrote " << target << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"paired-measurement image estimation toolkit"};
  app.require_subcommand(1);

  Flags fl_gen, fl_train, fl_eval, fl_q, fl_theory, fl_rec;
  std::string rec_input;

  CLI::App* gen = app.add_subcommand("gen-data", "materialize a paired-measurement dataset");
  add_common_flags(gen, fl_gen);
  CLI::App* tr = app.add_subcommand("train", "train an estimator on a dataset");
  add_common_flags(tr, fl_train, true);
  CLI::App* ev = app.add_subcommand("eval", "PSNR report and reconstructions for a checkpoint");
  add_common_flags(ev, fl_eval);
  CLI::App* q = app.add_subcommand("analyze-q", "operator-family gram spectrum and rank verdict");
  add_common_flags(q, fl_q);
  CLI::App* th = app.add_subcommand("verify-theory", "Monte-Carlo check of the swap-loss identity");
  add_common_flags(th, fl_theory);
  CLI::App* rec = app.add_subcommand("reconstruct", "single image in, reconstruction out");
  add_common_flags(rec, fl_rec);
  rec->add_option("input", rec_input, "PGM or PPM image")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(load_config(fl_gen));
    if (tr->parsed()) return cmd_train(load_config(fl_train));
    if (ev->parsed()) return cmd_eval(load_config(fl_eval));
    if (q->parsed()) return cmd_analyze_q(load_config(fl_q));
    if (th->parsed()) return cmd_verify_theory(load_config(fl_theory));
    if (rec->parsed()) return cmd_reconstruct(load_config(fl_rec), rec_input);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

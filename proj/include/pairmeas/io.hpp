#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pairmeas/measurement.hpp"
#include "pairmeas/models.hpp"
#include "pairmeas/tensor.hpp"
#include "pairmeas/training.hpp"

namespace pairmeas {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed = 0);

// ---------------- flat key=value configuration ----------------
//
// Lines are `key = value`; a `[section]` header prefixes following keys as
// `section.key`. `#` starts a comment line. Duplicate keys are an error so a
// stale setting can never shadow a live one.
class Config {
 public:
  Config() = default;
  static Config parse(std::string_view text, const std::string& origin = "config");
  static Config parse_file(const std::string& path);

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;
  std::string get(const std::string& key, std::string fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key) const;

  // command-line overrides; replaces any file value
  void set(const std::string& key, std::string value);
  const std::map<std::string, std::string>& items() const { return kv_; }

  // round-trippable text, keys regrouped into sections
  std::string serialize() const;

 private:
  std::map<std::string, std::string> kv_;
};

// every key must appear in `allowed`, otherwise IoError names the offenders
void reject_unknown_keys(const Config& cfg, const std::set<std::string>& allowed);

// ---------------- named-tensor container ----------------
//
// Layout: magic "UIM1", version u32, tensor count u32; per tensor a u16
// name length + UTF-8 name, ndim u32, dims u32[], float32 little-endian
// values; a CRC32 of everything before it closes the file.

struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> dims;
  std::vector<float> values;
};

void write_container(const std::string& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_container(const std::string& path);

// ---------------- model checkpoints ----------------
//
// A checkpoint is a container holding the parameters plus the geometry
// needed to rebuild the estimator, so loading needs no side channel.
// Values are stored as float32; training in double resumes from the
// rounded state.

enum class ModelKind { cs, deblur };

ModelKind container_kind(const std::vector<NamedTensor>& entries);

template <typename T>
std::vector<NamedTensor> pack_model(CsEstimator<T>& model);
template <typename T>
std::vector<NamedTensor> pack_model(DeblurEstimator<T>& model);

template <typename T>
CsEstimator<T> unpack_cs_model(const std::vector<NamedTensor>& entries);
template <typename T>
DeblurEstimator<T> unpack_deblur_model(const std::vector<NamedTensor>& entries);

// optimizer/scheduler state rides along under carry.* names so an
// interrupted run can continue its step count
template <typename T>
void append_carry(std::vector<NamedTensor>& entries, const TrainCarry<T>& carry,
                  const std::vector<std::pair<std::string, Tensor<T>*>>& params);
bool has_carry(const std::vector<NamedTensor>& entries);
template <typename T>
TrainCarry<T> extract_carry(const std::vector<NamedTensor>& entries,
                            const std::vector<std::pair<std::string, Tensor<T>*>>& params);

template <typename T>
void save_model(const std::string& path, CsEstimator<T>& model);
template <typename T>
void save_model(const std::string& path, DeblurEstimator<T>& model);

// ---------------- images ----------------

// [H,W] values clamped to [0,1], scaled to 8-bit binary PGM
void write_pgm(const std::string& path, const Tensor<double>& img);
// binary PGM (P5) or PPM (P6, averaged to gray), maxval 255 only; [0,1] output
Tensor<double> read_image(const std::string& path);

// ---------------- paired-measurement datasets ----------------
//
// A dataset directory holds manifest.txt (family, geometry, content hash),
// dataset.bin (measurements and, unless blind, operator descriptors),
// eval.bin (ground-truth images, read only when explicitly requested) and,
// for blind datasets, operators.bin: the operator draws sealed away from
// training, kept for post-hoc analysis.

struct DatasetInfo {
  std::string kind;  // cs-shifted | cs-fresh | motion
  std::int64_t records = 0;
  std::int64_t height = 0, width = 0;
  int patch = 0, m = 0;          // compressive families
  int ksize = 0, max_walk = 0;   // kernel family
  std::string boundary = "zero"; // kernel family
  double sigma = 0;
  std::uint64_t seed = 0;
  bool blind = false;
  bool has_eval = false;
  std::uint64_t content_hash = 0;  // dataset_hash of the records as stored
};

struct Dataset {
  DatasetInfo info;
  ParamDistribution<double> dist;
  GaussianNoise<double> noise;
  std::vector<MeasurementPair<double>> records;
};

// writes all files and returns the info with content_hash filled in from the
// stored (float32-rounded) records
DatasetInfo write_dataset(const std::string& dir, const DatasetInfo& info,
                          const ParamDistribution<double>& dist,
                          const std::vector<MeasurementPair<double>>& records);

DatasetInfo read_dataset_info(const std::string& dir);
// with_eval gates every access to ground-truth pixels; the hash in the
// manifest is verified against the loaded records either way
Dataset read_dataset(const std::string& dir, bool with_eval);
// blind datasets only: the sealed per-record draws, (theta1, theta2) pairs
std::vector<std::pair<MeasurementOp<double>, MeasurementOp<double>>> read_sealed_operators(
    const std::string& dir);

// ---------------- run records ----------------

// epoch,train_loss,swap,self,proxy_param,proxy_image,val_loss,val_psnr,lr,
// seconds; inactive terms stay empty
void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& history);

}  // namespace pairmeas

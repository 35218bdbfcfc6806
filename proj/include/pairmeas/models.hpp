#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pairmeas/measurement.hpp"
#include "pairmeas/rng.hpp"
#include "pairmeas/tensor.hpp"

namespace pairmeas {

enum class LayerKind { conv, tconv };

// One convolution or transpose convolution with bias. Weight layout is
// [co,ci,k,k] for conv and [ci,co,k,k] for tconv.
template <typename T>
struct ConvLayer {
  std::string name;
  LayerKind kind = LayerKind::conv;
  Tensor<T> w, b;
  int stride = 1;
  Pad pad = Pad::same_zero;
  bool relu = true;
  std::int64_t out_h = -1, out_w = -1;  // tconv target size (-1 = stride default)
};

// fan-in-scaled uniform init: U(+-sqrt(6/fan_in)), variance 2/fan_in
template <typename T>
ConvLayer<T> make_conv_layer(std::string name, int ci, int co, int k, int stride, Pad pad,
                             bool relu, Rng& rng);
template <typename T>
ConvLayer<T> make_tconv_layer(std::string name, int ci, int co, int k, int stride, Pad pad,
                              bool relu, Rng& rng, std::int64_t out_h = -1,
                              std::int64_t out_w = -1);

template <typename T>
void zero_params(ConvLayer<T>& layer);

template <typename T>
Tensor<T> apply_layer(const ConvLayer<T>& l, const Tensor<T>& x);

// Three-level encoder-decoder with skip connections operating on p x p
// patches, p divisible by 8. Downsampling by stride-2 convs, upsampling by
// transpose convs, skips by channel concatenation.
template <typename T>
class PatchUNet {
 public:
  PatchUNet() = default;
  PatchUNet(std::string prefix, int in_ch, int patch, std::array<int, 3> widths, Rng& rng);

  // [N,in_ch,p,p] -> [N,1,p,p]
  Tensor<T> forward(const Tensor<T>& x) const;

  void collect(std::vector<std::pair<std::string, Tensor<T>*>>& out);
  int patch() const { return patch_; }
  int in_ch() const { return in_ch_; }

 private:
  int in_ch_ = 1, patch_ = 8;
  ConvLayer<T> conv1_, conv2_, conv3_, conv4_;
  ConvLayer<T> up1_, up2_, up3_, end1_, end2_;
};

struct CsModelConfig {
  int patch = 8;
  std::array<int, 3> widths = {16, 32, 64};
};

// Patch estimator: two stacked encoder-decoders, the second consuming the
// input alongside the first's output, their outputs summed.
template <typename T>
class CsEstimator {
 public:
  CsEstimator(const CsModelConfig& cfg, std::uint64_t seed);

  // [N,1,p,p] back-projected measurements -> [N,1,p,p] patch estimates
  Tensor<T> forward(const Tensor<T>& x) const;

  const PatchUNet<T>& unet1() const { return unet1_; }
  const PatchUNet<T>& unet2() const { return unet2_; }
  const CsModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor<T>*>> named_params();
  std::vector<Tensor<T>*> params();
  std::int64_t param_count();

 private:
  CsModelConfig cfg_;
  PatchUNet<T> unet1_, unet2_;
};

struct DeblurModelConfig {
  int image = 32;  // divisible by 16
  std::array<int, 4> widths = {16, 32, 64, 64};
  int ksize = 5;
  bool kernel_head = true;
};

template <typename T>
struct DeblurOut {
  Tensor<T> image;                 // [B,1,H,W]
  std::vector<Tensor<T>> kernels;  // per-sample [k,k], simplex via spatial softmax
};

// Image estimator for blurry observations: four-level encoder-decoder, plus
// an optional kernel-decoder path from the shared bottleneck whose head
// starts at zero so a fresh estimator emits the uniform kernel.
template <typename T>
class DeblurEstimator {
 public:
  DeblurEstimator(const DeblurModelConfig& cfg, std::uint64_t seed);

  // [B,1,H,W] -> image estimate and, on request, per-sample kernel estimates
  DeblurOut<T> forward(const Tensor<T>& y, bool want_kernels) const;

  // single observation [H,W] -> validated operator around the detached kernel
  ConvolutionOp<T> estimate_kernel_op(const Tensor<T>& y, Boundary boundary) const;

  // kernel estimates with the shared encoder features treated as constants:
  // gradients reach the kernel decoder alone, so a loss on these kernels
  // trains the parameter head without disturbing the image path
  std::vector<Tensor<T>> forward_kernels_headonly(const Tensor<T>& y) const;

  const DeblurModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor<T>*>> named_params();
  std::vector<Tensor<T>*> params();
  std::int64_t param_count();
  // kernel-decoder parameters only, the ones the parameter proxy trains
  std::vector<Tensor<T>*> kernel_head_params();

 private:
  std::vector<Tensor<T>> decode_kernels(const Tensor<T>& c3, const Tensor<T>& c4) const;

  DeblurModelConfig cfg_;
  ConvLayer<T> conv1_, conv2_, conv3_, conv4_;
  ConvLayer<T> up1_, up2_, up3_, out_;
  ConvLayer<T> kup1_, kup2_, kout_;
};

}  // namespace pairmeas

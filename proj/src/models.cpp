#include "pairmeas/models.hpp"

#include <cmath>

namespace pairmeas {

namespace {

template <typename T>
Tensor<T> he_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::size_t n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<T> v(n);
  for (auto& e : v) e = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
ConvLayer<T> finish_layer(ConvLayer<T> l, Rng& rng, int ci, int co, int k) {
  Rng lr = rng.derive(l.name);
  Shape ws = l.kind == LayerKind::conv ? Shape{co, ci, k, k} : Shape{ci, co, k, k};
  l.w = he_uniform<T>(std::move(ws), static_cast<std::int64_t>(ci) * k * k, lr);
  l.b = Tensor<T>::zeros({co});
  l.w.set_requires_grad(true);
  l.b.set_requires_grad(true);
  return l;
}

template <typename T>
void collect_layer(ConvLayer<T>& l, std::vector<std::pair<std::string, Tensor<T>*>>& out) {
  out.emplace_back(l.name + "/w", &l.w);
  out.emplace_back(l.name + "/b", &l.b);
}

}  // namespace

template <typename T>
ConvLayer<T> make_conv_layer(std::string name, int ci, int co, int k, int stride, Pad pad,
                             bool relu, Rng& rng) {
  ConvLayer<T> l;
  l.name = std::move(name);
  l.kind = LayerKind::conv;
  l.stride = stride;
  l.pad = pad;
  l.relu = relu;
  return finish_layer(std::move(l), rng, ci, co, k);
}

template <typename T>
ConvLayer<T> make_tconv_layer(std::string name, int ci, int co, int k, int stride, Pad pad,
                              bool relu, Rng& rng, std::int64_t out_h, std::int64_t out_w) {
  ConvLayer<T> l;
  l.name = std::move(name);
  l.kind = LayerKind::tconv;
  l.stride = stride;
  l.pad = pad;
  l.relu = relu;
  l.out_h = out_h;
  l.out_w = out_w;
  return finish_layer(std::move(l), rng, ci, co, k);
}

template <typename T>
void zero_params(ConvLayer<T>& layer) {
  for (auto& v : layer.w.mutable_values()) v = T(0);
  for (auto& v : layer.b.mutable_values()) v = T(0);
}

template <typename T>
Tensor<T> apply_layer(const ConvLayer<T>& l, const Tensor<T>& x) {
  Tensor<T> z = l.kind == LayerKind::conv
                    ? conv2d(x, l.w, l.stride, l.pad)
                    : conv2d_transpose(x, l.w, l.stride, l.pad, l.out_h, l.out_w);
  std::int64_t co = l.b.dim(0);
  z = add(z, reshape(l.b, {1, co, 1, 1}));
  return l.relu ? relu(z) : z;
}

// ---------------- PatchUNet ----------------

template <typename T>
PatchUNet<T>::PatchUNet(std::string prefix, int in_ch, int patch, std::array<int, 3> widths,
                        Rng& rng)
    : in_ch_(in_ch), patch_(patch) {
  if (patch < 8 || patch % 8 != 0)
    throw TensorError("patch size must be a positive multiple of 8");
  int w0 = widths[0], w1 = widths[1], w2 = widths[2];
  auto P = [&](const char* n) { return prefix + n; };
  conv1_ = make_conv_layer<T>(P("conv1"), in_ch, w0, 3, 1, Pad::same_zero, true, rng);
  conv2_ = make_conv_layer<T>(P("conv2"), w0, w1, 4, 2, Pad::same_zero, true, rng);
  conv3_ = make_conv_layer<T>(P("conv3"), w1, w2, 4, 2, Pad::same_zero, true, rng);
  conv4_ = make_conv_layer<T>(P("conv4"), w2, w2, 4, 2, Pad::same_zero, true, rng);
  up1_ = make_tconv_layer<T>(P("up1"), w2, w2, 4, 2, Pad::same_zero, true, rng);
  up2_ = make_tconv_layer<T>(P("up2"), w2 + w2, w1, 4, 2, Pad::same_zero, true, rng);
  up3_ = make_tconv_layer<T>(P("up3"), w1 + w1, w0, 4, 2, Pad::same_zero, true, rng);
  end1_ = make_conv_layer<T>(P("end1"), w0 + w0, w0, 3, 1, Pad::same_zero, true, rng);
  end2_ = make_conv_layer<T>(P("end2"), w0, 1, 1, 1, Pad::same_zero, false, rng);
}

template <typename T>
Tensor<T> PatchUNet<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != in_ch_ || x.dim(2) != patch_ || x.dim(3) != patch_)
    throw TensorError("patch net expects [N," + std::to_string(in_ch_) + "," +
                      std::to_string(patch_) + "," + std::to_string(patch_) + "], got " +
                      shape_str(x.shape()));
  using V = std::vector<Tensor<T>>;
  Tensor<T> c1 = apply_layer(conv1_, x);
  Tensor<T> c2 = apply_layer(conv2_, c1);
  Tensor<T> c3 = apply_layer(conv3_, c2);
  Tensor<T> c4 = apply_layer(conv4_, c3);
  Tensor<T> u1 = apply_layer(up1_, c4);
  Tensor<T> u2 = apply_layer(up2_, concat(V{c3, u1}, 1));
  Tensor<T> u3 = apply_layer(up3_, concat(V{c2, u2}, 1));
  Tensor<T> h = apply_layer(end1_, concat(V{c1, u3}, 1));
  return apply_layer(end2_, h);
}

template <typename T>
void PatchUNet<T>::collect(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
  for (ConvLayer<T>* l : {&conv1_, &conv2_, &conv3_, &conv4_, &up1_, &up2_, &up3_, &end1_, &end2_})
    collect_layer(*l, out);
}

// ---------------- CsEstimator ----------------

template <typename T>
CsEstimator<T>::CsEstimator(const CsModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng rng(seed);
  unet1_ = PatchUNet<T>("unet1/", 1, cfg.patch, cfg.widths, rng);
  unet2_ = PatchUNet<T>("unet2/", 2, cfg.patch, cfg.widths, rng);
}

template <typename T>
Tensor<T> CsEstimator<T>::forward(const Tensor<T>& x) const {
  Tensor<T> u1 = unet1_.forward(x);
  Tensor<T> u2 = unet2_.forward(concat(std::vector<Tensor<T>>{x, u1}, 1));
  return add(u1, u2);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> CsEstimator<T>::named_params() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  unet1_.collect(out);
  unet2_.collect(out);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> CsEstimator<T>::params() {
  std::vector<Tensor<T>*> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

template <typename T>
std::int64_t CsEstimator<T>::param_count() {
  std::int64_t n = 0;
  for (auto* t : params()) n += t->numel();
  return n;
}

// ---------------- DeblurEstimator ----------------

template <typename T>
DeblurEstimator<T>::DeblurEstimator(const DeblurModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.image < 16 || cfg.image % 16 != 0)
    throw TensorError("image size must be a positive multiple of 16");
  int w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2], w3 = cfg.widths[3];
  Rng rng(seed);
  conv1_ = make_conv_layer<T>("conv1", 1, w0, 4, 2, Pad::same_zero, true, rng);
  conv2_ = make_conv_layer<T>("conv2", w0, w1, 4, 2, Pad::same_zero, true, rng);
  conv3_ = make_conv_layer<T>("conv3", w1, w2, 4, 2, Pad::same_zero, true, rng);
  conv4_ = make_conv_layer<T>("conv4", w2, w3, 4, 2, Pad::same_zero, true, rng);
  up1_ = make_tconv_layer<T>("up1", w3, w3, 4, 2, Pad::same_zero, true, rng);
  up2_ = make_tconv_layer<T>("up2", w2 + w3, w1, 4, 2, Pad::same_zero, true, rng);
  up3_ = make_tconv_layer<T>("up3", w1 + w1, w0, 4, 2, Pad::same_zero, true, rng);
  out_ = make_tconv_layer<T>("out", w0 + w0, 1, 4, 2, Pad::same_zero, false, rng);
  if (cfg.kernel_head) {
    // bottleneck is (image/16)^2; one skip-fed upsample then valid growth
    std::int64_t grown = cfg.image / 8;
    int kk = static_cast<int>(cfg.ksize - grown + 1);
    if (kk < 1)
      throw TensorError("kernel size " + std::to_string(cfg.ksize) +
                        " too small for this image size");
    kup1_ = make_tconv_layer<T>("kup1", w3, w2, 4, 2, Pad::same_zero, true, rng);
    kup2_ = make_tconv_layer<T>("kup2", w2 + w2, 32, kk, 1, Pad::valid, true, rng);
    kout_ = make_conv_layer<T>("kout", 32, 1, 1, 1, Pad::same_zero, false, rng);
    // zero head: a fresh estimator emits zero logits, hence a uniform kernel
    zero_params(kout_);
  }
}

template <typename T>
DeblurOut<T> DeblurEstimator<T>::forward(const Tensor<T>& y, bool want_kernels) const {
  std::int64_t s = cfg_.image;
  if (y.rank() != 4 || y.dim(1) != 1 || y.dim(2) != s || y.dim(3) != s)
    throw TensorError("blur net expects [B,1," + std::to_string(s) + "," + std::to_string(s) +
                      "], got " + shape_str(y.shape()));
  if (want_kernels && !cfg_.kernel_head)
    throw TensorError("this estimator was built without a kernel head");
  using V = std::vector<Tensor<T>>;
  Tensor<T> c1 = apply_layer(conv1_, y);
  Tensor<T> c2 = apply_layer(conv2_, c1);
  Tensor<T> c3 = apply_layer(conv3_, c2);
  Tensor<T> c4 = apply_layer(conv4_, c3);
  Tensor<T> u1 = apply_layer(up1_, c4);
  Tensor<T> u2 = apply_layer(up2_, concat(V{c3, u1}, 1));
  Tensor<T> u3 = apply_layer(up3_, concat(V{c2, u2}, 1));
  DeblurOut<T> out;
  out.image = apply_layer(out_, concat(V{c1, u3}, 1));
  if (want_kernels) out.kernels = decode_kernels(c3, c4);
  return out;
}

template <typename T>
std::vector<Tensor<T>> DeblurEstimator<T>::decode_kernels(const Tensor<T>& c3,
                                                          const Tensor<T>& c4) const {
  using V = std::vector<Tensor<T>>;
  Tensor<T> k1 = apply_layer(kup1_, c4);
  Tensor<T> k2 = apply_layer(kup2_, concat(V{c3, k1}, 1));
  Tensor<T> logits = apply_layer(kout_, k2);  // [B,1,ksize,ksize]
  std::int64_t ks = logits.dim(2);
  std::vector<Tensor<T>> kernels;
  for (std::int64_t bi = 0; bi < logits.dim(0); ++bi) {
    Tensor<T> one = reshape(narrow(logits, 0, bi, 1), {ks, ks});
    kernels.push_back(spatial_softmax(one));
  }
  return kernels;
}

template <typename T>
std::vector<Tensor<T>> DeblurEstimator<T>::forward_kernels_headonly(const Tensor<T>& y) const {
  std::int64_t s = cfg_.image;
  if (y.rank() != 4 || y.dim(1) != 1 || y.dim(2) != s || y.dim(3) != s)
    throw TensorError("blur net expects [B,1," + std::to_string(s) + "," + std::to_string(s) +
                      "], got " + shape_str(y.shape()));
  if (!cfg_.kernel_head) throw TensorError("this estimator was built without a kernel head");
  Tensor<T> c1 = apply_layer(conv1_, y);
  Tensor<T> c2 = apply_layer(conv2_, c1);
  Tensor<T> c3 = apply_layer(conv3_, c2);
  Tensor<T> c4 = apply_layer(conv4_, c3);
  return decode_kernels(stop_gradient(c3), stop_gradient(c4));
}

template <typename T>
ConvolutionOp<T> DeblurEstimator<T>::estimate_kernel_op(const Tensor<T>& y,
                                                        Boundary boundary) const {
  if (y.rank() != 2) throw TensorError("estimate_kernel_op expects a single [H,W] observation");
  auto got = forward(reshape(y, {1, 1, y.dim(0), y.dim(1)}), true);
  return ConvolutionOp<T>(stop_gradient(got.kernels[0]), boundary);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> DeblurEstimator<T>::named_params() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (ConvLayer<T>* l : {&conv1_, &conv2_, &conv3_, &conv4_, &up1_, &up2_, &up3_, &out_})
    collect_layer(*l, out);
  if (cfg_.kernel_head)
    for (ConvLayer<T>* l : {&kup1_, &kup2_, &kout_}) collect_layer(*l, out);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> DeblurEstimator<T>::params() {
  std::vector<Tensor<T>*> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> DeblurEstimator<T>::kernel_head_params() {
  if (!cfg_.kernel_head) return {};
  return {&kup1_.w, &kup1_.b, &kup2_.w, &kup2_.b, &kout_.w, &kout_.b};
}

template <typename T>
std::int64_t DeblurEstimator<T>::param_count() {
  std::int64_t n = 0;
  for (auto* t : params()) n += t->numel();
  return n;
}

#define PAIRMEAS_MODEL_INSTANTIATE(T)                                                       \
  template struct ConvLayer<T>;                                                             \
  template ConvLayer<T> make_conv_layer(std::string, int, int, int, int, Pad, bool, Rng&);  \
  template ConvLayer<T> make_tconv_layer(std::string, int, int, int, int, Pad, bool, Rng&,  \
                                         std::int64_t, std::int64_t);                       \
  template void zero_params(ConvLayer<T>&);                                                 \
  template Tensor<T> apply_layer(const ConvLayer<T>&, const Tensor<T>&);                    \
  template class PatchUNet<T>;                                                              \
  template class CsEstimator<T>;                                                            \
  template class DeblurEstimator<T>;

PAIRMEAS_MODEL_INSTANTIATE(float)
PAIRMEAS_MODEL_INSTANTIATE(double)

#undef PAIRMEAS_MODEL_INSTANTIATE

}  // namespace pairmeas

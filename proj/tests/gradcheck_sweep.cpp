#include "gradcheck.hpp"

#include <stdexcept>

namespace gradcheck_detail {

using namespace pairmeas;
using Vec = std::vector<Tensor<double>>;

namespace {

// inputs for relu/abs get pushed away from the kink so central differences
// stay one-sided-free
void apply_kink_margin(Tensor<double>& t, double margin = 0.05) {
  for (auto& v : t.mutable_values()) {
    if (v >= 0 && v < margin) v += margin;
    if (v < 0 && v > -margin) v -= margin;
  }
}

struct Case {
  const char* name;
  Vec inputs;
  std::function<Tensor<double>(Vec&)> f;
};

std::vector<Case> build_cases(Rng& rng) {
  std::vector<Case> cs;
  auto rt = [&](Shape s) { return Tensor<double>::randn(std::move(s), rng); };

  {
    Vec in{rt({3, 4}), rt({3, 4})};
    cs.push_back({"add", in, [](Vec& v) { return mean(square(add(v[0], v[1]))); }});
  }
  {
    Vec in{rt({2, 3, 4}), rt({4})};
    cs.push_back({"add_broadcast", in, [](Vec& v) { return mean(square(add(v[0], v[1]))); }});
  }
  {
    Vec in{rt({2, 3, 2, 2}), rt({3, 1, 1})};
    cs.push_back(
        {"add_channel_bias", in, [](Vec& v) { return mean(square(add(v[0], v[1]))); }});
  }
  {
    Vec in{rt({3, 4}), rt({3, 4})};
    cs.push_back({"sub", in, [](Vec& v) { return mean(square(sub(v[0], v[1]))); }});
  }
  {
    Vec in{rt({3, 4}), rt({1, 4})};
    cs.push_back({"mul_broadcast", in, [](Vec& v) { return mean(square(mul(v[0], v[1]))); }});
  }
  {
    Vec in{rt({5, 3})};
    cs.push_back({"scale", in, [](Vec& v) { return mean(square(scale(v[0], -1.7))); }});
  }
  {
    Vec in{rt({4, 5})};
    apply_kink_margin(in[0]);
    cs.push_back({"relu", in, [](Vec& v) { return mean(square(relu(v[0]))); }});
  }
  {
    Vec in{rt({4, 5})};
    cs.push_back({"square", in, [](Vec& v) { return mean(square(v[0])); }});
  }
  {
    Vec in{rt({4, 5})};
    apply_kink_margin(in[0]);
    cs.push_back({"abs", in, [](Vec& v) { return mean(abs_t(v[0])); }});
  }
  {
    Vec in{rt({3, 4}), rt({4, 2})};
    cs.push_back({"matmul", in, [](Vec& v) { return mean(square(matmul(v[0], v[1]))); }});
  }
  {
    Vec in{rt({3, 5})};
    cs.push_back(
        {"transpose2d", in, [](Vec& v) { return mean(square(transpose2d(v[0]))); }});
  }
  {
    Vec in{rt({2, 5, 5}), rt({3, 2, 3, 3})};
    cs.push_back({"conv2d_same_s1", in, [](Vec& v) {
                    return mean(square(conv2d(v[0], v[1], 1, Pad::same_zero)));
                  }});
  }
  {
    Vec in{rt({1, 2, 6, 6}), rt({2, 2, 3, 3})};
    cs.push_back({"conv2d_same_s2", in, [](Vec& v) {
                    return mean(square(conv2d(v[0], v[1], 2, Pad::same_zero)));
                  }});
  }
  {
    Vec in{rt({2, 1, 5, 5}), rt({2, 1, 3, 3})};
    cs.push_back({"conv2d_valid_s1", in, [](Vec& v) {
                    return mean(square(conv2d(v[0], v[1], 1, Pad::valid)));
                  }});
  }
  {
    Vec in{rt({1, 2, 3, 3}), rt({2, 3, 3, 3})};
    cs.push_back({"convT_same_s2", in, [](Vec& v) {
                    return mean(square(conv2d_transpose(v[0], v[1], 2, Pad::same_zero)));
                  }});
  }
  {
    Vec in{rt({2, 1, 1}), rt({2, 1, 3, 3})};
    cs.push_back({"convT_valid_s1", in, [](Vec& v) {
                    return mean(square(conv2d_transpose(v[0], v[1], 1, Pad::valid)));
                  }});
  }
  {
    Vec in{rt({3, 4})};
    cs.push_back(
        {"spatial_softmax", in, [](Vec& v) { return mean(square(spatial_softmax(v[0]))); }});
  }
  {
    Vec in{rt({2, 3, 4})};
    cs.push_back(
        {"reshape", in, [](Vec& v) { return mean(square(reshape(v[0], {6, 4}))); }});
  }
  {
    Vec in{rt({2, 2, 3}), rt({2, 1, 3})};
    cs.push_back({"concat_axis1", in, [](Vec& v) {
                    return mean(square(concat(Vec{v[0], v[1]}, 1)));
                  }});
  }
  {
    Vec in{rt({4, 5})};
    cs.push_back(
        {"narrow", in, [](Vec& v) { return mean(square(narrow(v[0], 1, 1, 3))); }});
  }
  {
    Vec in{rt({5, 3})};
    cs.push_back({"take_rows", in, [](Vec& v) {
                    return mean(square(take_rows(v[0], {4, 0, 2, 2})));
                  }});
  }
  {
    Vec in{rt({2, 4, 4})};
    cs.push_back(
        {"pad_wrap", in, [](Vec& v) { return mean(square(pad_wrap(v[0], 2, 1))); }});
  }
  {
    Vec in{rt({8, 8})};
    cs.push_back({"patch_gather", in, [](Vec& v) {
                    return mean(square(patch_gather(v[0], 1, 0, 2, 2, 3)));
                  }});
  }
  {
    Vec in{rt({4, 3, 3})};
    cs.push_back({"patch_scatter", in, [](Vec& v) {
                    return mean(square(patch_scatter(v[0], 8, 7, 1, 0, 2, 2, 3)));
                  }});
  }
  {
    Vec in{rt({3, 4})};
    cs.push_back({"sum", in, [](Vec& v) { return sum(square(v[0])); }});
  }
  {
    Vec in{rt({3, 4})};
    cs.push_back({"mean", in, [](Vec& v) { return mean(square(v[0])); }});
  }
  {
    // composite chain: conv -> bias -> relu -> strided conv -> mean, the
    // end-to-end contract
    Vec in{rt({1, 2, 6, 6}), rt({3, 2, 3, 3}), rt({3, 1, 1}), rt({2, 3, 3, 3})};
    apply_kink_margin(in[0], 0.01);
    cs.push_back({"composite_chain", in, [](Vec& v) {
                    auto h = relu(add(conv2d(v[0], v[1], 1, Pad::same_zero), v[2]));
                    auto o = conv2d(h, v[3], 2, Pad::same_zero);
                    return mean(square(o));
                  }});
  }
  return cs;
}

}  // namespace

double op_gradcheck_sweep(int nseeds, double rel_tol) {
  double worst = 0.0;
  for (int seed = 1; seed <= nseeds; ++seed) {
    Rng rng(0x9e3779b97f4a7c15ull ^ static_cast<std::uint64_t>(seed));
    auto cases = build_cases(rng);
    for (auto& c : cases) {
      double tol = std::string_view(c.name) == "composite_chain" ? 1e-3 : rel_tol;
      auto r = check_gradients(c.inputs, c.f, tol);
      if (r.worst > worst) worst = r.worst;
      if (!r.ok)
        throw std::runtime_error("gradcheck failed: " + std::string(c.name) + " seed " +
                                 std::to_string(seed) + " rel " + std::to_string(r.worst) +
                                 " at " + r.where);
    }
  }
  return worst;
}

}  // namespace gradcheck_detail

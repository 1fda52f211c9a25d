#include "melius/verify.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace melius {

namespace {

template <typename Rng>
Index pick(Rng& rng, std::initializer_list<Index> options) {
  std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
  return options.begin()[d(rng)];
}

template <typename Rng>
Tensor<float> random_pm1(const Shape& s, Rng& rng) {
  Tensor<float> t(s);
  std::bernoulli_distribution coin(0.5);
  for (Index i = 0; i < t.size(); ++i) t[i] = coin(rng) ? 1.0f : -1.0f;
  return t;
}

void note_failure(PropertyResult& r, const std::string& what) {
  if (r.failures++ == 0) r.first_failure = what;
}

std::string describe(const ConvParams& p, const Shape& in) {
  return "input " + to_string(in) + " out " + std::to_string(p.out_channels) + " kernel " +
         std::to_string(p.kernel_h) + "x" + std::to_string(p.kernel_w) + " stride " + std::to_string(p.stride_h) +
         "x" + std::to_string(p.stride_w) + " pad " + std::to_string(p.pad_h) + "x" + std::to_string(p.pad_w) +
         " groups " + std::to_string(p.groups);
}

}  // namespace

ConvParams random_conv_params(std::uint64_t seed, Index* height, Index* width, Index* batch) {
  std::mt19937_64 rng(seed);
  ConvParams p;
  p.groups = pick(rng, {1, 2, 4});
  p.in_channels = p.groups * pick(rng, {1, 2, 7, 31, 63, 64, 65, 100, 128, 129});
  p.out_channels = p.groups * pick(rng, {1, 2, 3, 5});
  p.kernel_h = pick(rng, {1, 2, 3, 5});
  p.kernel_w = pick(rng, {1, 2, 3, 5});
  p.stride_h = pick(rng, {1, 2});
  p.stride_w = pick(rng, {1, 2});
  p.pad_h = std::uniform_int_distribution<Index>(0, p.kernel_h / 2)(rng);
  p.pad_w = std::uniform_int_distribution<Index>(0, p.kernel_w / 2)(rng);
  *height = p.kernel_h + std::uniform_int_distribution<Index>(0, 6)(rng);
  *width = p.kernel_w + std::uniform_int_distribution<Index>(0, 6)(rng);
  *batch = pick(rng, {1, 2});
  return p;
}

PropertyResult verify_xnor_conv(int trials, std::uint64_t seed) {
  PropertyResult r{"xnor-conv exactness", 0, 0, {}};
  std::mt19937_64 rng(seed);
  for (int t = 0; t < trials; ++t) {
    Index h = 0, w = 0, n = 0;
    const ConvParams p = random_conv_params(rng(), &h, &w, &n);
    const Shape in{n, p.in_channels, h, w};
    const Tensor<float> x = random_pm1(in, rng);
    const Tensor<float> wt = random_pm1(p.weight_shape(), rng);
    const Tensor<float> ref = conv2d_reference(x, wt, p);
    const Tensor<float> fast = conv2d_xnor<float>(pack_bits(x), pack_bits(wt), p);
    ++r.cases;
    if (!bitwise_equal(ref, fast)) note_failure(r, describe(p, in));
  }
  return r;
}

PropertyResult verify_sign(int trials, std::uint64_t seed) {
  PropertyResult r{"sign forward", 0, 0, {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 2.0f);
  Tensor<float> x(Shape{1, 1, 1, trials + 4});
  x[0] = 0.0f;
  x[1] = -0.0f;
  x[2] = std::numeric_limits<float>::denorm_min();
  x[3] = -std::numeric_limits<float>::denorm_min();
  for (Index i = 4; i < x.size(); ++i) x[i] = normal(rng);
  const BitTensor packed = sign_forward(x);
  const Tensor<float> dense = sign_values(x);
  for (Index i = 0; i < x.size(); ++i) {
    const bool positive = !(x[i] < 0.0f);
    ++r.cases;
    if (packed.bit(0, 0, 0, i) != positive || dense[i] != (positive ? 1.0f : -1.0f)) {
      note_failure(r, "x = " + std::to_string(x[i]));
    }
  }
  return r;
}

PropertyResult verify_ste(int trials, std::uint64_t seed) {
  PropertyResult r{"straight-through estimator", 0, 0, {}};
  std::mt19937_64 rng(seed);
  const float clip = float(kDefaultClip);
  std::uniform_real_distribution<float> uniform(-3.0f, 3.0f);
  std::normal_distribution<float> grad(0.0f, 1.0f);
  Tensor<float> x(Shape{1, 1, 1, trials + 6});
  GradTensor<float> up(x.shape());
  const float specials[] = {clip, -clip, std::nextafter(clip, 2.0f), -std::nextafter(clip, 2.0f), 0.0f,
                            std::nextafter(clip, 0.0f)};
  for (Index i = 0; i < x.size(); ++i) {
    x[i] = i < 6 ? specials[i] : uniform(rng);
    up[i] = grad(rng);
  }
  const GradTensor<float> g = ste_backward(x, up, clip);
  for (Index i = 0; i < x.size(); ++i) {
    const float expected = std::fabs(x[i]) <= clip ? up[i] : 0.0f;
    ++r.cases;
    if (g[i] != expected) note_failure(r, "x = " + std::to_string(x[i]));
  }
  return r;
}

std::vector<PropertyResult> run_property_suite(int trials, std::uint64_t seed) {
  return {verify_xnor_conv(trials, seed), verify_sign(trials * 100, seed + 1), verify_ste(trials * 100, seed + 2)};
}

}  // namespace melius

#pragma once

// Independent oracles and fixtures shared by the unit and acceptance tests.
// Nothing here calls into the kernels it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "melius/graph.hpp"
#include "melius/train.hpp"

namespace melius::testing {

template <typename Scalar, typename Rng>
Tensor<Scalar> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(d(rng));
  return t;
}

template <typename Scalar, typename Rng>
Tensor<Scalar> random_signs(const Shape& s, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  Tensor<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = coin(rng) ? Scalar(1) : Scalar(-1);
  return t;
}

// Direct six-loop cross-correlation with zero padding.
template <typename Scalar>
Tensor<Scalar> naive_conv(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvParams& p) {
  const Shape& s = x.shape();
  const Index oh = (s.h + 2 * p.pad_h - p.kernel_h) / p.stride_h + 1;
  const Index ow = (s.w + 2 * p.pad_w - p.kernel_w) / p.stride_w + 1;
  const Index cg = p.in_channels / p.groups;
  const Index og = p.out_channels / p.groups;
  Tensor<Scalar> y(Shape{s.n, p.out_channels, oh, ow});
  for (Index n = 0; n < s.n; ++n)
    for (Index o = 0; o < p.out_channels; ++o)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          double acc = 0;
          const Index g = o / og;
          for (Index c = 0; c < cg; ++c)
            for (Index ki = 0; ki < p.kernel_h; ++ki)
              for (Index kj = 0; kj < p.kernel_w; ++kj) {
                const Index iy = oy * p.stride_h - p.pad_h + ki;
                const Index ix = ox * p.stride_w - p.pad_w + kj;
                if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                acc += double(x(n, g * cg + c, iy, ix)) * double(w(o, c, ki, kj));
              }
          y(n, o, oy, ox) = static_cast<Scalar>(acc);
        }
  return y;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Central difference of f at every entry of t.
template <typename Scalar>
std::vector<double> central_differences(Tensor<Scalar>& t, const std::function<double()>& f, double h = 1e-3) {
  std::vector<double> out(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) {
    const Scalar keep = t[i];
    t[i] = keep + Scalar(h);
    const double up = f();
    t[i] = keep - Scalar(h);
    const double down = f();
    t[i] = keep;
    out[static_cast<std::size_t>(i)] = (up - down) / (2 * h);
  }
  return out;
}

struct GradCheckReport {
  std::int64_t checked = 0;
  std::int64_t failures = 0;
  double worst = 0;
  std::string worst_name;
};

// Compares every 32-bit parameter gradient of `g` (binary latents excluded)
// with central differences of the surrogate training loss.
inline GradCheckReport check_parameter_gradients(ModelGraph<double>& g, const Tensor<double>& x,
                                                 const std::vector<int>& labels, double tolerance = 1e-2,
                                                 double h = 1e-5) {
  auto loss = [&] {
    const Tensor<double> logits =
        forward(g, x, ForwardOptions{Mode::kTraining, Binarization::kSurrogate});
    return double(cross_entropy_loss(logits, labels).loss);
  };
  const Gradients<double> grads = loss_gradients(g, x, labels, Binarization::kSurrogate);
  GradCheckReport r;
  for (const ParamInfo& info : g.topology.parameters()) {
    if (info.role != ParamRole::kFloat) continue;
    Tensor<double>& t = g.parameters.at(info.name);
    const std::vector<double> fd = central_differences(t, loss, h);
    const Tensor<double>& a = grads.parameters.at(info.name);
    for (Index i = 0; i < t.size(); ++i) {
      const double e = relative_error(a[i], fd[static_cast<std::size_t>(i)]);
      ++r.checked;
      if (e > tolerance) ++r.failures;
      if (e > r.worst) {
        r.worst = e;
        r.worst_name = info.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

// Tiny MeliusNet: growth 16, one dense + improvement pair per stage, no stem pool.
inline ArchConfig tiny_arch(Index size = 16, Index classes = 4, Index channels = 3) {
  ArchConfig cfg;
  cfg.name = "tiny";
  cfg.block_counts = {1, 1, 1, 1};
  cfg.growth = 16;
  cfg.stem_pool = false;
  cfg.num_classes = classes;
  cfg.input_channels = channels;
  cfg.input_height = size;
  cfg.input_width = size;
  return cfg;
}

// Two classes told apart by which half of the image is bright; hflip-invariant.
inline Dataset separable_dataset(Index count, Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.3f);
  Dataset d;
  d.images = Tensor<float>(Shape{count, 1, size, size});
  d.mean = {0.0f};
  d.stddev = {1.0f};
  for (Index n = 0; n < count; ++n) {
    const int label = static_cast<int>(n % 2);
    d.labels.push_back(label);
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        const bool top = y < size / 2;
        d.images(n, 0, y, x) = ((top == (label == 0)) ? 1.0f : -1.0f) + noise(rng);
      }
  }
  return d;
}

// Replays a sign history: flips[i] counts changes of sign(history[t][i]) between consecutive t.
inline std::vector<std::uint32_t> replay_flips(const std::vector<std::vector<float>>& history) {
  std::vector<std::uint32_t> counts(history.empty() ? 0 : history.front().size(), 0);
  for (std::size_t t = 1; t < history.size(); ++t)
    for (std::size_t i = 0; i < counts.size(); ++i) {
      const bool before = !(history[t - 1][i] < 0.0f);
      const bool after = !(history[t][i] < 0.0f);
      counts[i] += before != after;
    }
  return counts;
}

}  // namespace melius::testing

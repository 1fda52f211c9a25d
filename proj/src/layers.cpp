#include "melius/layers.hpp"

#include <cmath>
#include <limits>

#include "melius/conv.hpp"

namespace melius {

namespace {

template <typename Scalar>
void check_bn(const Shape& x, const BatchNormState<Scalar>& s) {
  if (s.gamma.size() != x.c || s.beta.size() != x.c || s.running_mean.size() != x.c ||
      s.running_var.size() != x.c) {
    throw ContractViolation("batchnorm: state has " + std::to_string(s.gamma.size()) +
                            " channels, input " + to_string(x));
  }
}

// Per-channel batch mean and biased variance. Values are shifted by the first
// sample of each channel before summation, so a constant channel yields its
// value and a variance of exactly zero.
template <typename Scalar>
void batch_moments(const Tensor<Scalar>& x, Vector<Scalar>& mean, Vector<Scalar>& var) {
  const Shape& s = x.shape();
  const Scalar count = Scalar(s.n * s.plane());
  mean.setZero(s.c);
  var.setZero(s.c);
  for (Index c = 0; c < s.c; ++c) {
    const Scalar shift = x(0, c, 0, 0);
    Scalar sum = 0;
    Scalar sum_sq = 0;
    for (Index n = 0; n < s.n; ++n) {
      const auto d = x.channels(n, c, 1).array() - shift;
      sum += d.sum();
      sum_sq += d.square().sum();
    }
    const Scalar m = sum / count;
    mean[c] = shift + m;
    var[c] = std::max(Scalar(0), sum_sq / count - m * m);
  }
}

template <typename Scalar>
Tensor<Scalar> normalize(const Tensor<Scalar>& x, const Vector<Scalar>& mean, const Vector<Scalar>& var,
                         const BatchNormState<Scalar>& s) {
  const Shape& sh = x.shape();
  Tensor<Scalar> y(sh);
  for (Index c = 0; c < sh.c; ++c) {
    const Scalar inv_std = Scalar(1) / std::sqrt(var[c] + s.epsilon);
    const Scalar scale = s.gamma[c] * inv_std;
    for (Index n = 0; n < sh.n; ++n) {
      y.channels(n, c, 1).array() = (x.channels(n, c, 1).array() - mean[c]) * scale + s.beta[c];
    }
  }
  return y;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> batchnorm_forward(const Tensor<Scalar>& x, BatchNormState<Scalar>& s, bool training) {
  check_bn(x.shape(), s);
  if (!training) return normalize(x, s.running_mean, s.running_var, s);
  if (x.shape().n * x.shape().plane() == 0) {
    throw InvalidInput("batchnorm: empty batch in training mode");
  }
  Vector<Scalar> mean, var;
  batch_moments(x, mean, var);
  s.running_mean = s.momentum * s.running_mean + (Scalar(1) - s.momentum) * mean;
  s.running_var = s.momentum * s.running_var + (Scalar(1) - s.momentum) * var;
  return normalize(x, mean, var, s);
}

template <typename Scalar>
Tensor<Scalar> batchnorm_forward(const Tensor<Scalar>& x, const BatchNormState<Scalar>& s) {
  check_bn(x.shape(), s);
  return normalize(x, s.running_mean, s.running_var, s);
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const Tensor<Scalar>& x, const GradTensor<Scalar>& upstream,
                                          const BatchNormState<Scalar>& s) {
  check_bn(x.shape(), s);
  require_same_shape(x, upstream, "batchnorm_backward");
  const Shape& sh = x.shape();
  if (sh.n * sh.plane() == 0) throw InvalidInput("batchnorm: empty batch in training mode");
  Vector<Scalar> mean, var;
  batch_moments(x, mean, var);
  const Scalar count = Scalar(sh.n * sh.plane());

  BatchNormGrads<Scalar> g{GradTensor<Scalar>(sh), Vector<Scalar>::Zero(sh.c), Vector<Scalar>::Zero(sh.c)};
  for (Index c = 0; c < sh.c; ++c) {
    const Scalar inv_std = Scalar(1) / std::sqrt(var[c] + s.epsilon);
    Scalar dbeta = 0;
    Scalar dgamma = 0;
    for (Index n = 0; n < sh.n; ++n) {
      const auto dy = upstream.channels(n, c, 1).array();
      dbeta += dy.sum();
      dgamma += (dy * (x.channels(n, c, 1).array() - mean[c]) * inv_std).sum();
    }
    g.beta[c] = dbeta;
    g.gamma[c] = dgamma;
    const Scalar k = s.gamma[c] * inv_std / count;
    for (Index n = 0; n < sh.n; ++n) {
      const auto xhat = (x.channels(n, c, 1).array() - mean[c]) * inv_std;
      g.input.channels(n, c, 1).array() =
          k * (count * upstream.channels(n, c, 1).array() - dbeta - xhat * dgamma);
    }
  }
  return g;
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward_inference(const Tensor<Scalar>& x,
                                                    const GradTensor<Scalar>& upstream,
                                                    const BatchNormState<Scalar>& s) {
  check_bn(x.shape(), s);
  require_same_shape(x, upstream, "batchnorm_backward_inference");
  const Shape& sh = x.shape();
  BatchNormGrads<Scalar> g{GradTensor<Scalar>(sh), Vector<Scalar>::Zero(sh.c), Vector<Scalar>::Zero(sh.c)};
  for (Index c = 0; c < sh.c; ++c) {
    const Scalar inv_std = Scalar(1) / std::sqrt(s.running_var[c] + s.epsilon);
    for (Index n = 0; n < sh.n; ++n) {
      const auto dy = upstream.channels(n, c, 1).array();
      g.beta[c] += dy.sum();
      g.gamma[c] += (dy * (x.channels(n, c, 1).array() - s.running_mean[c]) * inv_std).sum();
      g.input.channels(n, c, 1).array() = dy * (s.gamma[c] * inv_std);
    }
  }
  return g;
}

Shape pool_output_shape(const Shape& in, const PoolParams& p) {
  if (p.kernel < 1 || p.stride < 1 || p.padding < 0) {
    throw ContractViolation("maxpool: invalid kernel/stride/padding");
  }
  const Index oh = conv_output_extent(in.h, p.kernel, p.stride, p.padding);
  const Index ow = conv_output_extent(in.w, p.kernel, p.stride, p.padding);
  if (oh <= 0 || ow <= 0) {
    throw ContractViolation("maxpool: window " + std::to_string(p.kernel) +
                            " larger than padded input " + to_string(in));
  }
  return {in.n, in.c, oh, ow};
}

namespace {

// Calls visit(n, c, oy, ox, argmax_offset) for every output element.
template <typename Scalar, typename Visit>
void for_each_window_max(const Tensor<Scalar>& x, const PoolParams& p, const Shape& out, Visit visit) {
  const Shape& s = x.shape();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index oy = 0; oy < out.h; ++oy)
        for (Index ox = 0; ox < out.w; ++ox) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          Index best_at = -1;
          for (Index ki = 0; ki < p.kernel; ++ki) {
            const Index iy = oy * p.stride - p.padding + ki;
            if (iy < 0 || iy >= s.h) continue;
            for (Index kj = 0; kj < p.kernel; ++kj) {
              const Index ix = ox * p.stride - p.padding + kj;
              if (ix < 0 || ix >= s.w) continue;
              const Index at = x.offset(n, c, iy, ix);
              if (best_at < 0 || x[at] > best) {
                best = x[at];
                best_at = at;
              }
            }
          }
          visit(n, c, oy, ox, best_at);
        }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& x, const PoolParams& p) {
  const Shape out_shape = pool_output_shape(x.shape(), p);
  Tensor<Scalar> y(out_shape);
  for_each_window_max(x, p, out_shape, [&](Index n, Index c, Index oy, Index ox, Index at) {
    y(n, c, oy, ox) = at < 0 ? -std::numeric_limits<Scalar>::infinity() : x[at];
  });
  return y;
}

template <typename Scalar>
GradTensor<Scalar> maxpool2d_backward(const Tensor<Scalar>& x, const GradTensor<Scalar>& upstream,
                                      const PoolParams& p) {
  const Shape out_shape = pool_output_shape(x.shape(), p);
  if (upstream.shape() != out_shape) {
    throw ContractViolation("maxpool backward: upstream shape " + to_string(upstream.shape()));
  }
  GradTensor<Scalar> dx(x.shape());
  for_each_window_max(x, p, out_shape, [&](Index n, Index c, Index oy, Index ox, Index at) {
    if (at >= 0) dx[at] += upstream(n, c, oy, ox);
  });
  return dx;
}

template <typename Scalar>
Tensor<Scalar> global_avgpool(const Tensor<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.plane() == 0) throw ContractViolation("global_avgpool: empty spatial extent");
  Tensor<Scalar> y(Shape{s.n, s.c, 1, 1});
  for (Index n = 0; n < s.n; ++n) y.channels(n, 0, s.c).col(0) = x.image(n).rowwise().mean();
  return y;
}

template <typename Scalar>
GradTensor<Scalar> global_avgpool_backward(const GradTensor<Scalar>& upstream, const Shape& input_shape) {
  if (upstream.shape() != Shape{input_shape.n, input_shape.c, 1, 1}) {
    throw ContractViolation("global_avgpool backward: upstream shape " + to_string(upstream.shape()));
  }
  GradTensor<Scalar> dx(input_shape);
  const Scalar inv = Scalar(1) / Scalar(input_shape.plane());
  for (Index n = 0; n < input_shape.n; ++n)
    for (Index c = 0; c < input_shape.c; ++c) dx.channels(n, c, 1).setConstant(upstream(n, c, 0, 0) * inv);
  return dx;
}

template <typename Scalar>
Tensor<Scalar> channel_shuffle(const Tensor<Scalar>& x, Index groups) {
  const Shape& s = x.shape();
  if (groups < 1 || s.c % groups != 0) {
    throw InvalidInput("channel_shuffle: " + std::to_string(s.c) + " channels not divisible by " +
                       std::to_string(groups) + " groups");
  }
  const Index per_group = s.c / groups;
  Tensor<Scalar> y(s);
  for (Index n = 0; n < s.n; ++n)
    for (Index g = 0; g < groups; ++g)
      for (Index r = 0; r < per_group; ++r)
        y.channels(n, r * groups + g, 1) = x.channels(n, g * per_group + r, 1);
  return y;
}

template <typename Scalar>
Tensor<Scalar> channel_unshuffle(const Tensor<Scalar>& x, Index groups) {
  if (groups < 1 || x.shape().c % groups != 0) {
    throw InvalidInput("channel_unshuffle: " + std::to_string(x.shape().c) +
                       " channels not divisible by " + std::to_string(groups) + " groups");
  }
  return channel_shuffle(x, x.shape().c / groups);
}

namespace {

template <typename Scalar>
void check_fc(const Shape& x, const Shape& w) {
  if (x.h != 1 || x.w != 1) throw ContractViolation("fully_connected: input must be N x C x 1 x 1, got " + to_string(x));
  if (w.c != x.c || w.h != 1 || w.w != 1) {
    throw ContractViolation("fully_connected: weight " + to_string(w) + " does not match input " + to_string(x));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  check_fc<Scalar>(x.shape(), w.shape());
  const Index k = w.shape().n;
  if (b.size() != k) throw ContractViolation("fully_connected: bias has " + std::to_string(b.size()) + " values");
  const Index n = x.shape().n;
  const Index c = x.shape().c;
  Tensor<Scalar> y(Shape{n, k, 1, 1});
  Eigen::Map<const RowMatrix<Scalar>> xm(x.data(), n, c);
  Eigen::Map<const RowMatrix<Scalar>> wm(w.data(), k, c);
  Eigen::Map<RowMatrix<Scalar>> ym(y.data(), n, k);
  ym.noalias() = xm * wm.transpose();
  ym.rowwise() += b.values().transpose();
  return y;
}

template <typename Scalar>
FullyConnectedGrads<Scalar> fully_connected_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                                     const GradTensor<Scalar>& upstream) {
  check_fc<Scalar>(x.shape(), w.shape());
  const Index n = x.shape().n;
  const Index c = x.shape().c;
  const Index k = w.shape().n;
  if (upstream.shape() != Shape{n, k, 1, 1}) {
    throw ContractViolation("fully_connected backward: upstream shape " + to_string(upstream.shape()));
  }
  FullyConnectedGrads<Scalar> g{GradTensor<Scalar>(x.shape()), GradTensor<Scalar>(w.shape()),
                                GradTensor<Scalar>(Shape{1, k, 1, 1})};
  Eigen::Map<const RowMatrix<Scalar>> xm(x.data(), n, c);
  Eigen::Map<const RowMatrix<Scalar>> wm(w.data(), k, c);
  Eigen::Map<const RowMatrix<Scalar>> dy(upstream.data(), n, k);
  Eigen::Map<RowMatrix<Scalar>>(g.input.data(), n, c).noalias() = dy * wm;
  Eigen::Map<RowMatrix<Scalar>>(g.weight.data(), k, c).noalias() = dy.transpose() * xm;
  g.bias.values() = dy.colwise().sum().transpose();
  return g;
}

#define MELIUS_INSTANTIATE_LAYERS(S)                                                                   \
  template Tensor<S> batchnorm_forward<S>(const Tensor<S>&, BatchNormState<S>&, bool);                \
  template Tensor<S> batchnorm_forward<S>(const Tensor<S>&, const BatchNormState<S>&);                \
  template BatchNormGrads<S> batchnorm_backward<S>(const Tensor<S>&, const GradTensor<S>&,            \
                                                   const BatchNormState<S>&);                         \
  template BatchNormGrads<S> batchnorm_backward_inference<S>(const Tensor<S>&, const GradTensor<S>&,  \
                                                             const BatchNormState<S>&);               \
  template Tensor<S> maxpool2d<S>(const Tensor<S>&, const PoolParams&);                               \
  template GradTensor<S> maxpool2d_backward<S>(const Tensor<S>&, const GradTensor<S>&, const PoolParams&); \
  template Tensor<S> global_avgpool<S>(const Tensor<S>&);                                             \
  template GradTensor<S> global_avgpool_backward<S>(const GradTensor<S>&, const Shape&);              \
  template Tensor<S> channel_shuffle<S>(const Tensor<S>&, Index);                                     \
  template Tensor<S> channel_unshuffle<S>(const Tensor<S>&, Index);                                   \
  template Tensor<S> fully_connected<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);        \
  template FullyConnectedGrads<S> fully_connected_backward<S>(const Tensor<S>&, const Tensor<S>&,     \
                                                              const GradTensor<S>&);

MELIUS_INSTANTIATE_LAYERS(float)
MELIUS_INSTANTIATE_LAYERS(double)

}  // namespace melius

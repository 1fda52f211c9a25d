#pragma once

#include "melius/tensor.hpp"

namespace melius {

/// Per-channel batch normalization parameters and running statistics.
template <typename Scalar>
struct BatchNormState {
  Vector<Scalar> gamma;
  Vector<Scalar> beta;
  Vector<Scalar> running_mean;
  Vector<Scalar> running_var;
  Scalar epsilon = Scalar(1e-5);
  // running <- momentum * running + (1 - momentum) * batch
  Scalar momentum = Scalar(0.9);

  static BatchNormState identity(Index channels) {
    BatchNormState s;
    s.gamma = Vector<Scalar>::Ones(channels);
    s.beta = Vector<Scalar>::Zero(channels);
    s.running_mean = Vector<Scalar>::Zero(channels);
    s.running_var = Vector<Scalar>::Ones(channels);
    return s;
  }

  Index channels() const { return gamma.size(); }
};

/// Training mode normalizes with batch statistics and folds them into the
/// running statistics; inference mode uses the running statistics.
template <typename Scalar>
Tensor<Scalar> batchnorm_forward(const Tensor<Scalar>& x, BatchNormState<Scalar>& s, bool training);

/// Inference-only overload; leaves `s` untouched.
template <typename Scalar>
Tensor<Scalar> batchnorm_forward(const Tensor<Scalar>& x, const BatchNormState<Scalar>& s);

template <typename Scalar>
struct BatchNormGrads {
  GradTensor<Scalar> input;
  Vector<Scalar> gamma;
  Vector<Scalar> beta;
};

/// Gradients of the training-mode (batch statistics) forward pass.
template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const Tensor<Scalar>& x, const GradTensor<Scalar>& upstream,
                                          const BatchNormState<Scalar>& s);

/// Gradients of the inference-mode forward pass (running statistics are constants).
template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward_inference(const Tensor<Scalar>& x,
                                                    const GradTensor<Scalar>& upstream,
                                                    const BatchNormState<Scalar>& s);

struct PoolParams {
  Index kernel = 2;
  Index stride = 2;
  Index padding = 0;

  friend bool operator==(const PoolParams&, const PoolParams&) = default;
};

Shape pool_output_shape(const Shape& in, const PoolParams& p);

/// Window maximum; padded taps never win.
template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& x, const PoolParams& p);

/// Routes each upstream value to the first maximal tap of its window.
template <typename Scalar>
GradTensor<Scalar> maxpool2d_backward(const Tensor<Scalar>& x, const GradTensor<Scalar>& upstream,
                                      const PoolParams& p);

template <typename Scalar>
Tensor<Scalar> global_avgpool(const Tensor<Scalar>& x);

template <typename Scalar>
GradTensor<Scalar> global_avgpool_backward(const GradTensor<Scalar>& upstream, const Shape& input_shape);

/// Output channel r * groups + g receives input channel g * (C / groups) + r.
template <typename Scalar>
Tensor<Scalar> channel_shuffle(const Tensor<Scalar>& x, Index groups);

/// Inverse permutation of channel_shuffle(x, groups).
template <typename Scalar>
Tensor<Scalar> channel_unshuffle(const Tensor<Scalar>& x, Index groups);

/// y[n, k] = b[k] + sum_c w[k, c] x[n, c]. x is N x C x 1 x 1, w is K x C x 1 x 1,
/// b is 1 x K x 1 x 1; the result is N x K x 1 x 1.
template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b);

template <typename Scalar>
struct FullyConnectedGrads {
  GradTensor<Scalar> input;
  GradTensor<Scalar> weight;
  GradTensor<Scalar> bias;
};

template <typename Scalar>
FullyConnectedGrads<Scalar> fully_connected_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                                     const GradTensor<Scalar>& upstream);

}  // namespace melius

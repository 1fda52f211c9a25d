#pragma once

#include "melius/bit_tensor.hpp"
#include "melius/tensor.hpp"

namespace melius {

/// Geometry of a (possibly grouped) 2-D convolution. Weights are laid out as
/// out_channels x (in_channels / groups) x kernel_h x kernel_w.
struct ConvParams {
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel_h = 1;
  Index kernel_w = 1;
  Index stride_h = 1;
  Index stride_w = 1;
  Index pad_h = 0;
  Index pad_w = 0;
  Index groups = 1;

  static ConvParams square(Index in, Index out, Index kernel, Index stride = 1, Index pad = 0,
                           Index groups = 1) {
    return {in, out, kernel, kernel, stride, stride, pad, pad, groups};
  }

  Index in_per_group() const { return in_channels / groups; }
  Index out_per_group() const { return out_channels / groups; }
  Shape weight_shape() const { return {out_channels, in_per_group(), kernel_h, kernel_w}; }
  Index weight_count() const { return out_channels * in_per_group() * kernel_h * kernel_w; }

  /// Throws InvalidConfig on non-positive extents or indivisible group counts.
  void validate() const;

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

/// floor((in + 2 pad - kernel) / stride) + 1; zero or negative when the window does not fit.
inline Index conv_output_extent(Index in, Index kernel, Index stride, Index pad) {
  const Index span = in + 2 * pad - kernel;
  return span < 0 ? 0 : span / stride + 1;
}

/// Output shape of a convolution over `in`; ContractViolation on mismatch.
Shape conv_output_shape(const Shape& in, const ConvParams& p);

/// Zero-padded cross-correlation (no kernel flip), computed via im2col + GEMM.
template <typename Scalar>
Tensor<Scalar> conv2d_reference(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                const ConvParams& p);

/// dL/dx for conv2d_reference given dL/dy.
template <typename Scalar>
GradTensor<Scalar> conv2d_backward_input(const GradTensor<Scalar>& dy, const Tensor<Scalar>& w,
                                         const ConvParams& p, const Shape& input_shape);

/// dL/dw for conv2d_reference given dL/dy.
template <typename Scalar>
GradTensor<Scalar> conv2d_backward_weight(const Tensor<Scalar>& x, const GradTensor<Scalar>& dy,
                                          const ConvParams& p);

/// Binary convolution by xnor/popcount over packed channel words.
///
/// Each output is (valid taps * C/g) - 2 * popcount(x ^ w) summed over the
/// taps that fall inside the input; padded taps contribute nothing, which is
/// exactly the zero-padded +-1 convolution.
template <typename Scalar = float>
Tensor<Scalar> conv2d_xnor(const BitTensor& x, const BitTensor& w, const ConvParams& p);

}  // namespace melius

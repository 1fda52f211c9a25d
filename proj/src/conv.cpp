#include "melius/conv.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <vector>

namespace melius {

void ConvParams::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw InvalidConfig("conv: channel counts must be positive");
  if (kernel_h < 1 || kernel_w < 1) throw InvalidConfig("conv: kernel extents must be >= 1");
  if (stride_h < 1 || stride_w < 1) throw InvalidConfig("conv: strides must be >= 1");
  if (pad_h < 0 || pad_w < 0) throw InvalidConfig("conv: padding must be >= 0");
  if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw InvalidConfig("conv: channels " + std::to_string(in_channels) + " -> " +
                        std::to_string(out_channels) + " not divisible by " +
                        std::to_string(groups) + " groups");
  }
}

Shape conv_output_shape(const Shape& in, const ConvParams& p) {
  p.validate();
  if (in.c != p.in_channels) {
    throw ContractViolation("conv: input has " + std::to_string(in.c) + " channels, expected " +
                            std::to_string(p.in_channels));
  }
  const Index oh = conv_output_extent(in.h, p.kernel_h, p.stride_h, p.pad_h);
  const Index ow = conv_output_extent(in.w, p.kernel_w, p.stride_w, p.pad_w);
  if (oh <= 0 || ow <= 0) {
    throw ContractViolation("conv: kernel larger than padded input " + to_string(in));
  }
  return {in.n, p.out_channels, oh, ow};
}

namespace {

void check_weight(const Shape& w, const ConvParams& p) {
  if (w != p.weight_shape()) {
    throw ContractViolation("conv: weight shape " + to_string(w) + ", expected " +
                            to_string(p.weight_shape()));
  }
}

bool is_pointwise(const ConvParams& p) {
  return p.kernel_h == 1 && p.kernel_w == 1 && p.stride_h == 1 && p.stride_w == 1 &&
         p.pad_h == 0 && p.pad_w == 0;
}

// Output columns [lo, hi) of kernel column kj read inside the input row.
inline void valid_columns(Index kj, const ConvParams& p, Index width, Index ow, Index& lo, Index& hi) {
  const Index first = p.pad_w - kj;
  lo = first <= 0 ? 0 : (first + p.stride_w - 1) / p.stride_w;
  const Index last = width - 1 + p.pad_w - kj;
  hi = last < 0 ? 0 : std::min(ow, last / p.stride_w + 1);
  lo = std::min(lo, hi);
}

// Unfolds channels [c0, c0 + cg) of image n into a (cg*kh*kw) x (oh*ow) matrix.
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, Index n, Index c0, const ConvParams& p, Index oh, Index ow,
            RowMatrix<Scalar>& col) {
  const Shape& s = x.shape();
  const Index cg = p.in_per_group();
  col.resize(cg * p.kernel_h * p.kernel_w, oh * ow);
  Index row = 0;
  for (Index c = 0; c < cg; ++c) {
    const Scalar* plane = x.data() + x.offset(n, c0 + c, 0, 0);
    for (Index ki = 0; ki < p.kernel_h; ++ki)
      for (Index kj = 0; kj < p.kernel_w; ++kj, ++row) {
        Scalar* dst = col.row(row).data();
        Index lo = 0, hi = 0;
        valid_columns(kj, p, s.w, ow, lo, hi);
        for (Index oy = 0; oy < oh; ++oy, dst += ow) {
          const Index iy = oy * p.stride_h - p.pad_h + ki;
          if (iy < 0 || iy >= s.h) {
            std::fill(dst, dst + ow, Scalar(0));
            continue;
          }
          std::fill(dst, dst + lo, Scalar(0));
          std::fill(dst + hi, dst + ow, Scalar(0));
          const Scalar* src = plane + iy * s.w - p.pad_w + kj;
          if (p.stride_w == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) dst[ox] = src[ox * p.stride_w];
          }
        }
      }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& col, Index n, Index c0, const ConvParams& p, Index oh,
                Index ow, Tensor<Scalar>& dx) {
  const Shape& s = dx.shape();
  const Index cg = p.in_per_group();
  Index row = 0;
  for (Index c = 0; c < cg; ++c) {
    Scalar* plane = dx.data() + dx.offset(n, c0 + c, 0, 0);
    for (Index ki = 0; ki < p.kernel_h; ++ki)
      for (Index kj = 0; kj < p.kernel_w; ++kj, ++row) {
        const Scalar* src = col.row(row).data();
        Index lo = 0, hi = 0;
        valid_columns(kj, p, s.w, ow, lo, hi);
        for (Index oy = 0; oy < oh; ++oy, src += ow) {
          const Index iy = oy * p.stride_h - p.pad_h + ki;
          if (iy < 0 || iy >= s.h) continue;
          Scalar* dst = plane + iy * s.w - p.pad_w + kj;
          for (Index ox = lo; ox < hi; ++ox) dst[ox * p.stride_w] += src[ox];
        }
      }
  }
}

template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> group_weights(const Tensor<Scalar>& w, const ConvParams& p,
                                                  Index g) {
  const Index rows = p.out_per_group();
  const Index cols = p.in_per_group() * p.kernel_h * p.kernel_w;
  return {w.data() + g * rows * cols, rows, cols};
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d_reference(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                const ConvParams& p) {
  const Shape out_shape = conv_output_shape(x.shape(), p);
  check_weight(w.shape(), p);
  Tensor<Scalar> y(out_shape);
  const Index cg = p.in_per_group();
  const Index og = p.out_per_group();
  RowMatrix<Scalar> col;
  for (Index n = 0; n < out_shape.n; ++n)
    for (Index g = 0; g < p.groups; ++g) {
      auto out = y.channels(n, g * og, og);
      if (is_pointwise(p)) {
        out.noalias() = group_weights(w, p, g) * x.channels(n, g * cg, cg);
      } else {
        im2col(x, n, g * cg, p, out_shape.h, out_shape.w, col);
        out.noalias() = group_weights(w, p, g) * col;
      }
    }
  return y;
}

template <typename Scalar>
GradTensor<Scalar> conv2d_backward_input(const GradTensor<Scalar>& dy, const Tensor<Scalar>& w,
                                         const ConvParams& p, const Shape& input_shape) {
  const Shape out_shape = conv_output_shape(input_shape, p);
  check_weight(w.shape(), p);
  if (dy.shape() != out_shape) {
    throw ContractViolation("conv backward: upstream shape " + to_string(dy.shape()) +
                            ", expected " + to_string(out_shape));
  }
  GradTensor<Scalar> dx(input_shape);
  const Index cg = p.in_per_group();
  const Index og = p.out_per_group();
  RowMatrix<Scalar> col;
  for (Index n = 0; n < input_shape.n; ++n)
    for (Index g = 0; g < p.groups; ++g) {
      if (is_pointwise(p)) {
        dx.channels(n, g * cg, cg).noalias() =
            group_weights(w, p, g).transpose() * dy.channels(n, g * og, og);
      } else {
        col.noalias() = group_weights(w, p, g).transpose() * dy.channels(n, g * og, og);
        col2im_add(col, n, g * cg, p, out_shape.h, out_shape.w, dx);
      }
    }
  return dx;
}

template <typename Scalar>
GradTensor<Scalar> conv2d_backward_weight(const Tensor<Scalar>& x, const GradTensor<Scalar>& dy,
                                          const ConvParams& p) {
  const Shape out_shape = conv_output_shape(x.shape(), p);
  if (dy.shape() != out_shape) {
    throw ContractViolation("conv backward: upstream shape " + to_string(dy.shape()) +
                            ", expected " + to_string(out_shape));
  }
  GradTensor<Scalar> dw(p.weight_shape());
  const Index cg = p.in_per_group();
  const Index og = p.out_per_group();
  const Index cols = cg * p.kernel_h * p.kernel_w;
  RowMatrix<Scalar> col;
  for (Index n = 0; n < out_shape.n; ++n)
    for (Index g = 0; g < p.groups; ++g) {
      Eigen::Map<RowMatrix<Scalar>> dw_g(dw.data() + g * og * cols, og, cols);
      if (is_pointwise(p)) {
        dw_g.noalias() += dy.channels(n, g * og, og) * x.channels(n, g * cg, cg).transpose();
      } else {
        im2col(x, n, g * cg, p, out_shape.h, out_shape.w, col);
        dw_g.noalias() += dy.channels(n, g * og, og) * col.transpose();
      }
    }
  return dw;
}

template <typename Scalar>
Tensor<Scalar> conv2d_xnor(const BitTensor& x, const BitTensor& w, const ConvParams& p) {
  const Shape out_shape = conv_output_shape(x.shape(), p);
  if (w.shape() != p.weight_shape()) {
    throw ContractViolation("conv2d_xnor: weight shape " + to_string(w.shape()) + ", expected " +
                            to_string(p.weight_shape()));
  }
  const Shape& s = x.shape();
  const Index cg = p.in_per_group();
  const Index og = p.out_per_group();
  Tensor<Scalar> y(out_shape);

  const Index taps_max = p.kernel_h * p.kernel_w;
  std::vector<const std::uint64_t*> xruns(static_cast<std::size_t>(taps_max));
  std::vector<Index> tap_ids(static_cast<std::size_t>(taps_max));
  const Index wstride = taps_max * w.words_per_run();
  for (Index g = 0; g < p.groups; ++g) {
    const BitTensor xs = p.groups == 1 ? BitTensor{} : slice_channels(x, g * cg, (g + 1) * cg);
    const BitTensor& xg = p.groups == 1 ? x : xs;
    const Index words = xg.words_per_run();
    for (Index n = 0; n < s.n; ++n)
      for (Index oy = 0; oy < out_shape.h; ++oy)
        for (Index ox = 0; ox < out_shape.w; ++ox) {
          // Input runs under the window; padded taps are skipped.
          Index taps = 0;
          for (Index ki = 0; ki < p.kernel_h; ++ki) {
            const Index iy = oy * p.stride_h - p.pad_h + ki;
            if (iy < 0 || iy >= s.h) continue;
            for (Index kj = 0; kj < p.kernel_w; ++kj) {
              const Index ix = ox * p.stride_w - p.pad_w + kj;
              if (ix < 0 || ix >= s.w) continue;
              xruns[static_cast<std::size_t>(taps)] = xg.run(n, iy, ix);
              tap_ids[static_cast<std::size_t>(taps++)] = (ki * p.kernel_w + kj) * words;
            }
          }
          const std::uint64_t* wg = w.words().data() + g * og * wstride;
          for (Index o = 0; o < og; ++o, wg += wstride) {
            std::int64_t mismatches = 0;
            for (Index t = 0; t < taps; ++t) {
              const std::uint64_t* xr = xruns[static_cast<std::size_t>(t)];
              const std::uint64_t* wr = wg + tap_ids[static_cast<std::size_t>(t)];
              for (Index k = 0; k < words; ++k) mismatches += std::popcount(xr[k] ^ wr[k]);
            }
            y(n, g * og + o, oy, ox) = static_cast<Scalar>(taps * cg - 2 * mismatches);
          }
        }
  }
  return y;
}

#define MELIUS_INSTANTIATE_CONV(S)                                                              \
  template Tensor<S> conv2d_reference<S>(const Tensor<S>&, const Tensor<S>&, const ConvParams&); \
  template GradTensor<S> conv2d_backward_input<S>(const GradTensor<S>&, const Tensor<S>&,       \
                                                  const ConvParams&, const Shape&);             \
  template GradTensor<S> conv2d_backward_weight<S>(const Tensor<S>&, const GradTensor<S>&,      \
                                                   const ConvParams&);                          \
  template Tensor<S> conv2d_xnor<S>(const BitTensor&, const BitTensor&, const ConvParams&);

MELIUS_INSTANTIATE_CONV(float)
MELIUS_INSTANTIATE_CONV(double)

}  // namespace melius

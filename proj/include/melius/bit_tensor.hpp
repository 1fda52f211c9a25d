#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "melius/tensor.hpp"

namespace melius {

inline constexpr double kDefaultClip = 1.3;

/// {-1,+1} tensor packed along channels into 64-bit words.
///
/// For every (n, h, w) position the C channel bits occupy words_per_run()
/// consecutive words, least-significant bit first. A set bit encodes +1, a
/// clear bit -1. Bits past channel C in the last word of a run are always 0,
/// so xor/popcount reductions over whole words stay exact.
class BitTensor {
 public:
  BitTensor() = default;
  explicit BitTensor(Shape shape);

  const Shape& shape() const { return shape_; }
  Index words_per_run() const { return (shape_.c + 63) / 64; }
  Index pad_bits() const { return words_per_run() * 64 - shape_.c; }
  Index run_index(Index n, Index h, Index w) const { return (n * shape_.h + h) * shape_.w + w; }

  std::vector<std::uint64_t>& words() { return words_; }
  const std::vector<std::uint64_t>& words() const { return words_; }

  std::uint64_t* run(Index n, Index h, Index w) {
    return words_.data() + run_index(n, h, w) * words_per_run();
  }
  const std::uint64_t* run(Index n, Index h, Index w) const {
    return words_.data() + run_index(n, h, w) * words_per_run();
  }

  bool bit(Index n, Index c, Index h, Index w) const {
    return (run(n, h, w)[c / 64] >> (c % 64)) & 1u;
  }
  void set_bit(Index n, Index c, Index h, Index w, bool positive);

  /// Mask of the valid bits in word `k` of a channel run.
  std::uint64_t valid_mask(Index k) const;

  /// Total popcount over pad regions; zero for every well-formed tensor.
  Index pad_popcount() const;

  friend bool operator==(const BitTensor&, const BitTensor&) = default;

 private:
  Shape shape_{};
  std::vector<std::uint64_t> words_;
};

/// Channels [c0, c1) as a freshly packed tensor.
BitTensor slice_channels(const BitTensor& x, Index c0, Index c1);

/// Packs a tensor whose entries are exactly -1 or +1.
template <typename Scalar>
BitTensor pack_bits(const Tensor<Scalar>& x) {
  BitTensor out(x.shape());
  const Shape& s = x.shape();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < s.h; ++h)
        for (Index w = 0; w < s.w; ++w) {
          const Scalar v = x(n, c, h, w);
          if (v == Scalar(1)) {
            out.set_bit(n, c, h, w, true);
          } else if (v != Scalar(-1)) {
            throw InvalidInput("pack_bits: value " + std::to_string(double(v)) +
                               " at flat index " + std::to_string(x.offset(n, c, h, w)) +
                               " is not -1 or +1");
          }
        }
  return out;
}

template <typename Scalar>
Tensor<Scalar> unpack_bits(const BitTensor& b) {
  Tensor<Scalar> out(b.shape());
  const Shape& s = b.shape();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < s.h; ++h)
        for (Index w = 0; w < s.w; ++w) out(n, c, h, w) = b.bit(n, c, h, w) ? Scalar(1) : Scalar(-1);
  return out;
}

/// sign(x) = +1 if x >= 0, -1 otherwise, packed.
template <typename Scalar>
BitTensor sign_forward(const Tensor<Scalar>& x) {
  BitTensor out(x.shape());
  const Shape& s = x.shape();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < s.h; ++h)
        for (Index w = 0; w < s.w; ++w)
          if (x(n, c, h, w) >= Scalar(0)) out.set_bit(n, c, h, w, true);
  return out;
}

/// Dense +-1 values of sign(x), without packing.
template <typename Scalar>
Tensor<Scalar> sign_values(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.values() = x.values().unaryExpr([](Scalar v) { return v >= Scalar(0) ? Scalar(1) : Scalar(-1); });
  return out;
}

/// Straight-through estimator: passes `upstream` where |x| <= t_clip, zero elsewhere.
template <typename Scalar>
GradTensor<Scalar> ste_backward(const Tensor<Scalar>& x, const GradTensor<Scalar>& upstream,
                                Scalar t_clip = Scalar(kDefaultClip)) {
  require_same_shape(x, upstream, "ste_backward");
  if (!(t_clip > Scalar(0))) throw ContractViolation("ste_backward: t_clip must be positive");
  GradTensor<Scalar> out(x.shape());
  out.values() = (x.values().array().abs() <= t_clip).select(upstream.values(), Scalar(0));
  return out;
}

}  // namespace melius

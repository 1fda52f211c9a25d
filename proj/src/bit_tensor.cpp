#include "melius/bit_tensor.hpp"

namespace melius {

BitTensor::BitTensor(Shape shape) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ContractViolation("negative tensor extent " + to_string(shape));
  }
  words_.assign(static_cast<std::size_t>(shape.n * shape.h * shape.w * words_per_run()), 0);
}

void BitTensor::set_bit(Index n, Index c, Index h, Index w, bool positive) {
  std::uint64_t& word = run(n, h, w)[c / 64];
  const std::uint64_t bit = std::uint64_t{1} << (c % 64);
  word = positive ? (word | bit) : (word & ~bit);
}

std::uint64_t BitTensor::valid_mask(Index k) const {
  const Index remaining = shape_.c - k * 64;
  if (remaining >= 64) return ~std::uint64_t{0};
  if (remaining <= 0) return 0;
  return (std::uint64_t{1} << remaining) - 1;
}

Index BitTensor::pad_popcount() const {
  const Index per_run = words_per_run();
  if (per_run == 0 || pad_bits() == 0) return 0;
  const std::uint64_t pad_mask = ~valid_mask(per_run - 1);
  Index total = 0;
  for (std::size_t r = per_run - 1; r < words_.size(); r += per_run) {
    total += std::popcount(words_[r] & pad_mask);
  }
  return total;
}

BitTensor slice_channels(const BitTensor& x, Index c0, Index c1) {
  const Shape& s = x.shape();
  if (c0 < 0 || c1 > s.c || c0 > c1) {
    throw ContractViolation("slice_channels: range [" + std::to_string(c0) + ", " +
                            std::to_string(c1) + ") outside " + std::to_string(s.c) + " channels");
  }
  BitTensor out(Shape{s.n, c1 - c0, s.h, s.w});
  if (c0 % 64 == 0) {
    // Word-aligned: copy whole words and clear the tail.
    const Index words = out.words_per_run();
    const std::uint64_t tail = out.valid_mask(words - 1);
    for (Index n = 0; n < s.n; ++n)
      for (Index h = 0; h < s.h; ++h)
        for (Index w = 0; w < s.w; ++w) {
          const std::uint64_t* src = x.run(n, h, w) + c0 / 64;
          std::uint64_t* dst = out.run(n, h, w);
          for (Index k = 0; k < words; ++k) dst[k] = src[k];
          if (words > 0) dst[words - 1] &= tail;
        }
    return out;
  }
  for (Index n = 0; n < s.n; ++n)
    for (Index h = 0; h < s.h; ++h)
      for (Index w = 0; w < s.w; ++w)
        for (Index c = c0; c < c1; ++c)
          if (x.bit(n, c, h, w)) out.set_bit(n, c - c0, h, w, true);
  return out;
}

}  // namespace melius

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "melius/conv.hpp"

namespace melius {

struct PropertyResult {
  std::string name;
  std::int64_t cases = 0;
  std::int64_t failures = 0;
  std::string first_failure;

  bool ok() const { return failures == 0; }
};

/// A random conv geometry from the kernel sweep: kernels 1-5, strides 1-2,
/// padding 0 to kernel/2, groups 1/2/4, per-group channels crossing 64-bit words.
ConvParams random_conv_params(std::uint64_t seed, Index* height, Index* width, Index* batch);

/// conv2d_xnor against conv2d_reference on random +-1 tensors, compared bitwise.
PropertyResult verify_xnor_conv(int trials, std::uint64_t seed);
/// ste_backward and sign_forward against elementwise definitions, including x = 0 and |x| = t_clip.
PropertyResult verify_ste(int trials, std::uint64_t seed);
PropertyResult verify_sign(int trials, std::uint64_t seed);

std::vector<PropertyResult> run_property_suite(int trials, std::uint64_t seed);

}  // namespace melius

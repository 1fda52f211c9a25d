#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "melius/graph.hpp"
#include "melius/train.hpp"

namespace melius {

// MNBW weight files. All integers little-endian.
//
//   "MNBW" | u16 version | u32 tensor_count
//   per tensor: u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | payload
//
// dtype 0 stores 32-bit floats. dtype 1 stores sign bits of a 4-d conv weight
// (out, in/groups, kh, kw): one row per output channel of kh*kw runs of
// ceil((in/groups)/64) u64 words, LSB first, bit 1 = +1, pad bits 0.
inline constexpr std::uint16_t kWeightFormatVersion = 1;

enum class WeightDtype : std::uint8_t { kFloat32 = 0, kPacked = 1 };

struct WeightFile {
  // Packed tensors are expanded to +-1 floats.
  std::map<std::string, Tensor<float>> tensors;
  std::set<std::string> packed;
};

struct ExportOptions {
  // BatchNorm running statistics; needed to run inference from the file.
  bool include_buffers = false;
};

/// Tensors as they are written: binary-conv latents replaced by sign(latent).
std::map<std::string, Tensor<float>> exported_tensors(const ModelGraph<float>& g, const ExportOptions& opt = {});

std::vector<std::uint8_t> encode_weights(const ModelGraph<float>& g, const ExportOptions& opt = {});
/// ParseError (with byte offset) on bad magic, version, dtype or truncation.
WeightFile decode_weights(const std::vector<std::uint8_t>& bytes);

void export_weights(const ModelGraph<float>& g, const std::filesystem::path& path, const ExportOptions& opt = {});
WeightFile import_weights(const std::filesystem::path& path);

/// Copies every tensor of `file` into `g`. ContractViolation on unknown names,
/// shape mismatches or missing parameters.
void load_weights(ModelGraph<float>& g, const WeightFile& file);

struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;
};

/// Reads an IDX image file (u8, N x H x W or N x C x H x W) and its IDX label
/// file, either possibly gzip-compressed. Pixels are scaled to [0, 1] and then
/// normalized per channel with `stats`, or with the file's own statistics when
/// none are given.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         const std::optional<Normalization>& stats = std::nullopt);

/// `<dir>/<split>-images-idx3-ubyte[.gz]` with the matching labels file.
Dataset load_idx_split(const std::filesystem::path& dir, const std::string& split,
                       const std::optional<Normalization>& stats = std::nullopt);

/// Plain `key = value` lines; `#` starts a comment. Keys: preset (applied
/// first), name, blocks, growth, reductions, downsample_groups, stem,
/// stem_pool, num_classes, input, block_style.
ArchConfig parse_arch_config(const std::string& text, const std::string& source = "config");

/// A preset name, or a path to a config file.
ArchConfig load_arch(const std::string& preset_or_path);

/// "CxHxW" -> {1, C, H, W}; InvalidConfig when malformed.
Shape parse_shape(const std::string& text);

}  // namespace melius

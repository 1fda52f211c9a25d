#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "melius/graph.hpp"

namespace melius {

/// Operation and parameter count of one layer for a single input image.
///
/// Convolutions count one operation per multiply-accumulate; binary convs land
/// in `bops`, 32-bit convs and the classifier in `flops`. BatchNorm, pooling,
/// sign, shuffle, concat and slice-add are free.
struct LayerCost {
  int id = 0;
  std::string name;
  LayerKind kind = LayerKind::kSign;
  Shape output{};
  std::uint64_t bops = 0;
  std::uint64_t flops = 0;
  std::uint64_t binary_bits = 0;
  // 32-bit values: conv/FC weights, FC bias, BatchNorm gamma and beta.
  std::uint64_t fp_params = 0;
};

struct CostTotals {
  std::uint64_t bops = 0;
  std::uint64_t flops = 0;
  double ops = 0;  // bops / 64 + flops
  std::uint64_t binary_bits = 0;
  std::uint64_t fp_params = 0;
  std::uint64_t size_bytes = 0;  // ceil(binary_bits / 8) + 4 * fp_params
  double size_mb = 0;            // size_bytes / 2^20
};

struct CostReport {
  std::string name;
  Shape input{};
  std::vector<LayerCost> layers;
  CostTotals totals;
};

/// Cost of `layer` given the shapes of its inputs (in LayerSpec::inputs order).
LayerCost layer_cost(const LayerSpec& layer, std::span<const Shape> input_shapes);

/// Aggregates layer_cost over a shape-propagation pass with batch size 1.
CostReport model_cost(const LayerGraph& graph, Shape input, std::string name = "");

CostReport model_cost(const ArchConfig& cfg);

/// One CostReport per configuration, all evaluated at `input` (c, h, w).
std::vector<CostReport> compare_archs(std::span<const ArchConfig> cfgs, Shape input);

/// Aligned-text report; per-layer rows first when `per_layer` is set.
std::string format_table(const CostReport& report, bool per_layer = false);

/// Side-by-side totals with ratios relative to the first report.
std::string format_comparison(std::span<const CostReport> reports);

/// JSON document with totals in raw units and in the table's scaled units.
std::string to_json(const CostReport& report, bool per_layer = false, int indent = 2);

}  // namespace melius

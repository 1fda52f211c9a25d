#include "melius/cost.hpp"

#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

namespace melius {

LayerCost layer_cost(const LayerSpec& layer, std::span<const Shape> input_shapes) {
  if (input_shapes.size() != layer.inputs.size()) {
    throw ContractViolation("layer_cost '" + layer.name + "': " + std::to_string(input_shapes.size()) +
                            " input shapes for " + std::to_string(layer.inputs.size()) + " inputs");
  }
  LayerCost row;
  row.name = layer.name;
  row.kind = layer.kind;
  const Shape& in = input_shapes.front();
  row.output = in;
  switch (layer.kind) {
    case LayerKind::kBinaryConv:
    case LayerKind::kFpConv: {
      const auto& p = std::get<ConvParams>(layer.params);
      row.output = conv_output_shape(in, p);
      const auto weights = static_cast<std::uint64_t>(p.weight_count());
      const auto macs = weights * static_cast<std::uint64_t>(row.output.plane());
      if (layer.kind == LayerKind::kBinaryConv) {
        row.bops = macs;
        row.binary_bits = weights;
      } else {
        row.flops = macs;
        row.fp_params = weights;
      }
      break;
    }
    case LayerKind::kBatchNorm:
      row.fp_params = 2 * static_cast<std::uint64_t>(std::get<BatchNormParams>(layer.params).channels);
      break;
    case LayerKind::kMaxPool:
      row.output = pool_output_shape(in, std::get<PoolParams>(layer.params));
      break;
    case LayerKind::kGlobalAvgPool:
      row.output = {in.n, in.c, 1, 1};
      break;
    case LayerKind::kConcat:
      row.output.c = 0;
      for (const Shape& s : input_shapes) row.output.c += s.c;
      break;
    case LayerKind::kFullyConnected: {
      const auto& p = std::get<FullyConnectedParams>(layer.params);
      row.output = {in.n, p.out_features, 1, 1};
      row.flops = static_cast<std::uint64_t>(p.in_features * p.out_features);
      row.fp_params = static_cast<std::uint64_t>(p.in_features * p.out_features + p.out_features);
      break;
    }
    default:
      break;
  }
  return row;
}

CostReport model_cost(const LayerGraph& graph, Shape input, std::string name) {
  input.n = 1;
  const std::vector<Shape> shapes = infer_shapes(graph, input);
  CostReport report;
  report.name = std::move(name);
  report.input = input;
  for (int i = 0; i < graph.size(); ++i) {
    const LayerSpec& l = graph.layer(i);
    std::vector<Shape> ins;
    for (int id : l.inputs) ins.push_back(id == kGraphInput ? input : shapes[static_cast<std::size_t>(id)]);
    LayerCost row = layer_cost(l, ins);
    row.id = i;
    report.totals.bops += row.bops;
    report.totals.flops += row.flops;
    report.totals.binary_bits += row.binary_bits;
    report.totals.fp_params += row.fp_params;
    report.layers.push_back(std::move(row));
  }
  CostTotals& t = report.totals;
  t.ops = static_cast<double>(t.bops) / 64.0 + static_cast<double>(t.flops);
  t.size_bytes = (t.binary_bits + 7) / 8 + 4 * t.fp_params;
  t.size_mb = static_cast<double>(t.size_bytes) / double(1 << 20);
  return report;
}

CostReport model_cost(const ArchConfig& cfg) {
  return model_cost(build_topology(cfg), cfg.input_shape(), cfg.name);
}

std::vector<CostReport> compare_archs(std::span<const ArchConfig> cfgs, Shape input) {
  std::vector<CostReport> out;
  for (ArchConfig cfg : cfgs) {
    cfg.input_channels = input.c;
    cfg.input_height = input.h;
    cfg.input_width = input.w;
    out.push_back(model_cost(cfg));
  }
  return out;
}

namespace {

std::string fmt(const char* pattern, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

}  // namespace

std::string format_table(const CostReport& r, bool per_layer) {
  std::ostringstream os;
  if (per_layer) {
    os << fmt("%-40s %-16s %-16s %14s %14s %12s %10s\n", "layer", "kind", "output", "BOPs", "FLOPs", "binary bits",
              "fp params");
    for (const LayerCost& l : r.layers) {
      const std::string out = to_string(Shape{1, l.output.c, l.output.h, l.output.w}).substr(2);
      os << fmt("%-40s %-16s %-16s %14llu %14llu %12llu %10llu\n", l.name.c_str(),
                std::string(kind_name(l.kind)).c_str(), out.c_str(), (unsigned long long)l.bops,
                (unsigned long long)l.flops, (unsigned long long)l.binary_bits, (unsigned long long)l.fp_params);
    }
    os << "\n";
  }
  const CostTotals& t = r.totals;
  const std::string input = std::to_string(r.input.c) + "x" + std::to_string(r.input.h) + "x" + std::to_string(r.input.w);
  os << fmt("%-14s %-12s %12s %12s %12s %10s\n", "model", "input", "BOPs(1e9)", "FLOPs(1e8)", "OPs(1e8)", "Size(MB)");
  os << fmt("%-14s %-12s %12.3f %12.3f %12.3f %10.2f\n", r.name.c_str(), input.c_str(), double(t.bops) / 1e9,
            double(t.flops) / 1e8, t.ops / 1e8, t.size_mb);
  os << fmt("raw: bops=%llu flops=%llu ops=%.1f size_bytes=%llu binary_bits=%llu fp_params=%llu\n",
            (unsigned long long)t.bops, (unsigned long long)t.flops, t.ops, (unsigned long long)t.size_bytes,
            (unsigned long long)t.binary_bits, (unsigned long long)t.fp_params);
  return os.str();
}

std::string format_comparison(std::span<const CostReport> reports) {
  std::ostringstream os;
  os << fmt("%-24s %12s %12s %12s %10s %10s\n", "model", "BOPs(1e9)", "FLOPs(1e8)", "OPs(1e8)", "Size(MB)", "OPs ratio");
  const double base = reports.empty() ? 1.0 : reports.front().totals.ops;
  for (const CostReport& r : reports) {
    const CostTotals& t = r.totals;
    os << fmt("%-24s %12.3f %12.3f %12.3f %10.2f %10.3f\n", r.name.c_str(), double(t.bops) / 1e9,
              double(t.flops) / 1e8, t.ops / 1e8, t.size_mb, t.ops / base);
  }
  return os.str();
}

std::string to_json(const CostReport& r, bool per_layer, int indent) {
  nlohmann::ordered_json j;
  j["name"] = r.name;
  j["input"] = {r.input.c, r.input.h, r.input.w};
  const CostTotals& t = r.totals;
  j["totals"] = {{"bops", t.bops},
                 {"flops", t.flops},
                 {"ops", t.ops},
                 {"binary_bits", t.binary_bits},
                 {"fp_params", t.fp_params},
                 {"size_bytes", t.size_bytes},
                 {"size_mb", t.size_mb}};
  j["table"] = {{"bops_1e9", double(t.bops) / 1e9},
                {"flops_1e8", double(t.flops) / 1e8},
                {"ops_1e8", t.ops / 1e8},
                {"size_mb", t.size_mb}};
  if (per_layer) {
    j["layers"] = nlohmann::ordered_json::array();
    for (const LayerCost& l : r.layers) {
      j["layers"].push_back({{"id", l.id},
                             {"name", l.name},
                             {"kind", std::string(kind_name(l.kind))},
                             {"output", {l.output.c, l.output.h, l.output.w}},
                             {"bops", l.bops},
                             {"flops", l.flops},
                             {"binary_bits", l.binary_bits},
                             {"fp_params", l.fp_params}});
    }
  }
  return j.dump(indent);
}

}  // namespace melius

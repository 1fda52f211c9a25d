#include "melius/graph.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace melius {

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kBinaryConv: return "binary-conv";
    case LayerKind::kFpConv: return "fp-conv";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kSign: return "sign";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kGlobalAvgPool: return "avgpool-global";
    case LayerKind::kChannelShuffle: return "channel-shuffle";
    case LayerKind::kConcat: return "concat";
    case LayerKind::kSliceAdd: return "slice-add";
    case LayerKind::kFullyConnected: return "fully-connected";
  }
  return "unknown";
}

std::string_view stem_name(StemKind stem) {
  return stem == StemKind::kGrouped ? "grouped" : "conv7x7";
}

std::string_view block_style_name(BlockStyle style) {
  switch (style) {
    case BlockStyle::kMelius: return "melius";
    case BlockStyle::kNaiveResidual: return "naive-residual";
    case BlockStyle::kDenseOnly: return "dense-only";
  }
  return "unknown";
}

Index LayerGraph::channels(int id) const {
  if (id == kGraphInput) return input_channels_;
  return layer(id).channels;
}

std::optional<int> LayerGraph::find(std::string_view name) const {
  for (int i = 0; i < size(); ++i)
    if (layers_[static_cast<std::size_t>(i)].name == name) return i;
  return std::nullopt;
}

namespace {

[[noreturn]] void bad_layer(const LayerSpec& l, const std::string& msg) {
  throw InvalidConfig("layer '" + l.name + "' (" + std::string(kind_name(l.kind)) + "): " + msg);
}

template <typename T>
const T& params_as(const LayerSpec& l) {
  const T* p = std::get_if<T>(&l.params);
  if (p == nullptr) bad_layer(l, "missing or wrong parameter record");
  return *p;
}

}  // namespace

int LayerGraph::add(LayerSpec l) {
  if (l.name.empty()) bad_layer(l, "empty name");
  if (find(l.name)) bad_layer(l, "duplicate name");
  for (int in : l.inputs) {
    if (in != kGraphInput && (in < 0 || in >= size())) {
      bad_layer(l, "input id " + std::to_string(in) + " does not precede the layer");
    }
  }
  auto expect_inputs = [&](std::size_t count) {
    if (l.inputs.size() != count) {
      bad_layer(l, "expects " + std::to_string(count) + " input(s), got " + std::to_string(l.inputs.size()));
    }
  };
  switch (l.kind) {
    case LayerKind::kBinaryConv:
    case LayerKind::kFpConv: {
      expect_inputs(1);
      const auto& p = params_as<ConvParams>(l);
      try {
        p.validate();
      } catch (const InvalidConfig& e) {
        bad_layer(l, e.what());
      }
      if (p.in_channels != channels(l.inputs[0])) {
        bad_layer(l, "expects " + std::to_string(p.in_channels) + " input channels, got " +
                         std::to_string(channels(l.inputs[0])));
      }
      l.channels = p.out_channels;
      break;
    }
    case LayerKind::kBatchNorm: {
      expect_inputs(1);
      const auto& p = params_as<BatchNormParams>(l);
      if (p.channels != channels(l.inputs[0])) {
        bad_layer(l, "has " + std::to_string(p.channels) + " channels, input has " +
                         std::to_string(channels(l.inputs[0])));
      }
      l.channels = p.channels;
      break;
    }
    case LayerKind::kMaxPool:
      expect_inputs(1);
      params_as<PoolParams>(l);
      l.channels = channels(l.inputs[0]);
      break;
    case LayerKind::kSign:
    case LayerKind::kGlobalAvgPool:
      expect_inputs(1);
      l.channels = channels(l.inputs[0]);
      break;
    case LayerKind::kChannelShuffle: {
      expect_inputs(1);
      const auto& p = params_as<ShuffleParams>(l);
      const Index c = channels(l.inputs[0]);
      if (p.groups < 1 || c % p.groups != 0) {
        bad_layer(l, std::to_string(c) + " channels not divisible by " + std::to_string(p.groups));
      }
      l.channels = c;
      break;
    }
    case LayerKind::kConcat: {
      if (l.inputs.size() < 2) bad_layer(l, "needs at least two inputs");
      l.channels = 0;
      for (int in : l.inputs) l.channels += channels(in);
      break;
    }
    case LayerKind::kSliceAdd: {
      expect_inputs(2);
      const Index base = channels(l.inputs[0]);
      const Index addend = channels(l.inputs[1]);
      if (addend > base) {
        bad_layer(l, "addend has " + std::to_string(addend) + " channels, base only " + std::to_string(base));
      }
      l.channels = base;
      break;
    }
    case LayerKind::kFullyConnected: {
      expect_inputs(1);
      const auto& p = params_as<FullyConnectedParams>(l);
      if (p.in_features != channels(l.inputs[0]) || p.out_features < 1) {
        bad_layer(l, "expects " + std::to_string(p.in_features) + " features, input has " +
                         std::to_string(channels(l.inputs[0])));
      }
      l.channels = p.out_features;
      break;
    }
  }
  layers_.push_back(std::move(l));
  return size() - 1;
}

std::vector<ParamInfo> LayerGraph::parameters() const {
  std::vector<ParamInfo> out;
  for (int i = 0; i < size(); ++i) {
    const LayerSpec& l = layer(i);
    switch (l.kind) {
      case LayerKind::kBinaryConv:
        out.push_back({l.name + ".weight", std::get<ConvParams>(l.params).weight_shape(), ParamRole::kBinaryLatent, i});
        break;
      case LayerKind::kFpConv:
        out.push_back({l.name + ".weight", std::get<ConvParams>(l.params).weight_shape(), ParamRole::kFloat, i});
        break;
      case LayerKind::kBatchNorm: {
        const Shape s{1, l.channels, 1, 1};
        out.push_back({l.name + ".gamma", s, ParamRole::kFloat, i});
        out.push_back({l.name + ".beta", s, ParamRole::kFloat, i});
        out.push_back({l.name + ".running_mean", s, ParamRole::kBuffer, i});
        out.push_back({l.name + ".running_var", s, ParamRole::kBuffer, i});
        break;
      }
      case LayerKind::kFullyConnected: {
        const auto& p = std::get<FullyConnectedParams>(l.params);
        out.push_back({l.name + ".weight", {p.out_features, p.in_features, 1, 1}, ParamRole::kFloat, i});
        out.push_back({l.name + ".bias", {1, p.out_features, 1, 1}, ParamRole::kFloat, i});
        break;
      }
      default:
        break;
    }
  }
  return out;
}

std::vector<Shape> infer_shapes(const LayerGraph& graph, const Shape& input) {
  if (input.c != graph.input_channels()) {
    throw ContractViolation("graph input has " + std::to_string(input.c) + " channels, expected " +
                            std::to_string(graph.input_channels()));
  }
  std::vector<Shape> shapes;
  shapes.reserve(static_cast<std::size_t>(graph.size()));
  auto shape_of = [&](int id) { return id == kGraphInput ? input : shapes[static_cast<std::size_t>(id)]; };
  for (const LayerSpec& l : graph.layers()) {
    try {
      const Shape in = shape_of(l.inputs.front());
      Shape out = in;
      switch (l.kind) {
        case LayerKind::kBinaryConv:
        case LayerKind::kFpConv:
          out = conv_output_shape(in, std::get<ConvParams>(l.params));
          break;
        case LayerKind::kMaxPool:
          out = pool_output_shape(in, std::get<PoolParams>(l.params));
          break;
        case LayerKind::kGlobalAvgPool:
          if (in.plane() == 0) throw ContractViolation("empty spatial extent");
          out = {in.n, in.c, 1, 1};
          break;
        case LayerKind::kConcat:
          out.c = 0;
          for (int id : l.inputs) {
            const Shape s = shape_of(id);
            if (s.n != in.n || s.h != in.h || s.w != in.w) {
              throw ContractViolation("concat of " + to_string(in) + " and " + to_string(s));
            }
            out.c += s.c;
          }
          break;
        case LayerKind::kSliceAdd: {
          const Shape s = shape_of(l.inputs[1]);
          if (s.n != in.n || s.h != in.h || s.w != in.w || s.c > in.c) {
            throw ContractViolation("slice-add of " + to_string(s) + " onto " + to_string(in));
          }
          break;
        }
        case LayerKind::kFullyConnected:
          if (in.h != 1 || in.w != 1) throw ContractViolation("needs 1x1 spatial input, got " + to_string(in));
          out = {in.n, l.channels, 1, 1};
          break;
        default:
          break;
      }
      shapes.push_back(out);
    } catch (const ContractViolation& e) {
      throw ContractViolation("layer '" + l.name + "': " + e.what());
    }
  }
  return shapes;
}

namespace {

int add_binary_unit(LayerGraph& g, int input, Index c_out, const std::string& prefix) {
  const Index c = g.channels(input);
  const int bn = g.add({prefix + ".bn", LayerKind::kBatchNorm, BatchNormParams{c}, {input}});
  const int sign = g.add({prefix + ".sign", LayerKind::kSign, {}, {bn}});
  return g.add({prefix + ".conv", LayerKind::kBinaryConv, ConvParams::square(c, c_out, 3, 1, 1), {sign}});
}

int add_fp_conv_bn(LayerGraph& g, int input, ConvParams p, const std::string& conv_name,
                   const std::string& bn_name) {
  const int conv = g.add({conv_name, LayerKind::kFpConv, p, {input}});
  return g.add({bn_name, LayerKind::kBatchNorm, BatchNormParams{p.out_channels}, {conv}});
}

}  // namespace

int add_dense_block(LayerGraph& g, int input, Index growth, const std::string& prefix) {
  if (g.channels(input) <= 0) throw InvalidConfig(prefix + ": dense block needs a non-empty input");
  if (growth <= 0) throw InvalidConfig(prefix + ": growth must be positive");
  const int conv = add_binary_unit(g, input, growth, prefix);
  return g.add({prefix + ".concat", LayerKind::kConcat, {}, {input, conv}});
}

int add_improvement_block(LayerGraph& g, int input, Index growth, const std::string& prefix) {
  const Index c = g.channels(input);
  if (c <= growth) {
    throw InvalidConfig(prefix + ": improvement block needs more than " + std::to_string(growth) +
                        " input channels, got " + std::to_string(c));
  }
  const int conv = add_binary_unit(g, input, growth, prefix);
  return g.add({prefix + ".add", LayerKind::kSliceAdd, {}, {input, conv}});
}

int add_residual_block(LayerGraph& g, int input, const std::string& prefix) {
  const int conv = add_binary_unit(g, input, g.channels(input), prefix);
  return g.add({prefix + ".add", LayerKind::kSliceAdd, {}, {input, conv}});
}

int add_transition(LayerGraph& g, int input, Index c_out, Index groups, const std::string& prefix) {
  const Index c_in = g.channels(input);
  if (c_out <= 0 || c_out >= c_in) {
    throw InvalidConfig(prefix + ": transition must reduce channels, got " + std::to_string(c_in) + " -> " +
                        std::to_string(c_out));
  }
  if (groups < 1 || c_in % groups != 0 || c_out % groups != 0) {
    throw InvalidConfig(prefix + ": channels " + std::to_string(c_in) + " -> " + std::to_string(c_out) +
                        " not divisible by " + std::to_string(groups) + " groups");
  }
  int x = g.add({prefix + ".pool", LayerKind::kMaxPool, PoolParams{2, 2, 0}, {input}});
  if (groups > 1) x = g.add({prefix + ".shuffle", LayerKind::kChannelShuffle, ShuffleParams{groups}, {x}});
  return add_fp_conv_bn(g, x, ConvParams::square(c_in, c_out, 1, 1, 0, groups), prefix + ".conv", prefix + ".bn");
}

int add_grouped_stem(LayerGraph& g, int input, bool pool, const std::string& prefix) {
  const Index c_img = g.channels(input);
  int x = add_fp_conv_bn(g, input, ConvParams::square(c_img, 32, 3, 2, 1), prefix + ".conv1", prefix + ".bn1");
  x = add_fp_conv_bn(g, x, ConvParams::square(32, 32, 3, 1, 1, 4), prefix + ".conv2", prefix + ".bn2");
  x = add_fp_conv_bn(g, x, ConvParams::square(32, 64, 3, 1, 1, 8), prefix + ".conv3", prefix + ".bn3");
  if (pool) x = g.add({prefix + ".pool", LayerKind::kMaxPool, PoolParams{3, 2, 1}, {x}});
  return x;
}

int add_stem_7x7(LayerGraph& g, int input, bool pool, const std::string& prefix) {
  int x = add_fp_conv_bn(g, input, ConvParams::square(g.channels(input), 64, 7, 2, 3), prefix + ".conv1",
                         prefix + ".bn1");
  if (pool) x = g.add({prefix + ".pool", LayerKind::kMaxPool, PoolParams{3, 2, 1}, {x}});
  return x;
}

int add_classifier(LayerGraph& g, int input, Index num_classes, const std::string& prefix) {
  const Index c = g.channels(input);
  int x = g.add({prefix + ".bn", LayerKind::kBatchNorm, BatchNormParams{c}, {input}});
  x = g.add({prefix + ".pool", LayerKind::kGlobalAvgPool, {}, {x}});
  return g.add({prefix + ".fc", LayerKind::kFullyConnected, FullyConnectedParams{c, num_classes}, {x}});
}

LayerGraph build_dense_block(Index c_in, Index growth) {
  LayerGraph g(c_in);
  add_dense_block(g, kGraphInput, growth, "dense");
  return g;
}

LayerGraph build_improvement_block(Index c_in, Index growth) {
  LayerGraph g(c_in);
  add_improvement_block(g, kGraphInput, growth, "improve");
  return g;
}

LayerGraph build_transition(Index c_in, Index c_out, Index groups) {
  LayerGraph g(c_in);
  add_transition(g, kGraphInput, c_out, groups, "transition");
  return g;
}

LayerGraph build_grouped_stem(Index c_img) {
  LayerGraph g(c_img);
  add_grouped_stem(g, kGraphInput, true);
  return g;
}

LayerGraph build_stem_7x7(Index c_img) {
  LayerGraph g(c_img);
  add_stem_7x7(g, kGraphInput, true);
  return g;
}

void ArchConfig::validate() const {
  for (Index b : block_counts)
    if (b < 0) throw InvalidConfig(name + ": negative block count");
  if (growth <= 0) throw InvalidConfig(name + ": growth must be positive");
  for (const Fraction& f : reductions)
    if (f.num <= 0 || f.den <= 0 || f.num >= f.den) {
      throw InvalidConfig(name + ": reduction " + std::to_string(f.num) + "/" + std::to_string(f.den) +
                          " must lie in (0, 1)");
    }
  if (downsample_groups < 1) throw InvalidConfig(name + ": downsample_groups must be >= 1");
  if (num_classes < 1) throw InvalidConfig(name + ": num_classes must be >= 1");
  if (input_channels < 1 || input_height < 1 || input_width < 1) throw InvalidConfig(name + ": empty input shape");
}

namespace {

ArchConfig make_preset(std::string name, std::array<Index, 4> blocks, std::array<Fraction, 3> reductions,
                       Index groups) {
  ArchConfig c;
  c.name = std::move(name);
  c.block_counts = blocks;
  c.reductions = reductions;
  c.downsample_groups = groups;
  return c;
}

const std::vector<ArchConfig>& preset_table() {
  static const std::vector<ArchConfig> table = {
      make_preset("meliusnet22", {4, 5, 4, 4}, {{{160, 320}, {224, 480}, {256, 480}}}, 1),
      make_preset("meliusnet29", {4, 6, 8, 6}, {{{128, 320}, {192, 512}, {256, 704}}}, 1),
      make_preset("meliusnet42", {5, 8, 14, 10}, {{{160, 384}, {256, 672}, {416, 1152}}}, 1),
      make_preset("meliusnet59", {6, 12, 24, 12}, {{{192, 448}, {320, 960}, {544, 1856}}}, 1),
      make_preset("meliusnetA", {4, 5, 5, 6}, {{{160, 320}, {256, 480}, {288, 576}}}, 4),
      make_preset("meliusnetB", {4, 6, 8, 6}, {{{160, 320}, {224, 544}, {320, 736}}}, 2),
      // Ten stage-3 blocks grow 192 channels to 832; the commonly quoted 224/704
      // third transition cannot follow (3,5,10,6). 288/832 reproduces the
      // published operation counts and size.
      make_preset("meliusnetC", {3, 5, 10, 6}, {{{128, 256}, {192, 448}, {288, 832}}}, 4),
  };
  return table;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

ArchConfig preset(std::string_view name) {
  for (const ArchConfig& c : preset_table())
    if (lower(c.name) == lower(name)) return c;
  throw InvalidConfig("unknown preset '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const ArchConfig& c : preset_table()) names.push_back(c.name);
  return names;
}

LayerGraph build_topology(const ArchConfig& cfg) {
  cfg.validate();
  LayerGraph g(cfg.input_channels);
  int x = cfg.stem == StemKind::kGrouped ? add_grouped_stem(g, kGraphInput, cfg.stem_pool)
                                         : add_stem_7x7(g, kGraphInput, cfg.stem_pool);
  for (int stage = 0; stage < 4; ++stage) {
    const std::string sp = "stage" + std::to_string(stage + 1);
    for (Index b = 0; b < cfg.block_counts[static_cast<std::size_t>(stage)]; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b + 1);
      x = add_dense_block(g, x, cfg.growth, bp + ".dense");
      if (cfg.block_style == BlockStyle::kMelius) {
        x = add_improvement_block(g, x, cfg.growth, bp + ".improve");
      } else if (cfg.block_style == BlockStyle::kNaiveResidual) {
        x = add_residual_block(g, x, bp + ".residual");
      }
    }
    if (stage == 3) break;
    const Fraction f = cfg.reductions[static_cast<std::size_t>(stage)];
    const Index c = g.channels(x);
    if ((c * f.num) % f.den != 0) {
      throw InvalidConfig(cfg.name + ": transition " + std::to_string(stage + 1) + " maps " + std::to_string(c) +
                          " channels by " + std::to_string(f.num) + "/" + std::to_string(f.den) +
                          " to a non-integer count");
    }
    x = add_transition(g, x, c * f.num / f.den, cfg.downsample_groups, "transition" + std::to_string(stage + 1));
  }
  add_classifier(g, x, cfg.num_classes);
  return g;
}

}  // namespace melius

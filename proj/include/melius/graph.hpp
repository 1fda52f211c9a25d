#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "melius/conv.hpp"
#include "melius/layers.hpp"

namespace melius {

enum class LayerKind {
  kBinaryConv,
  kFpConv,
  kBatchNorm,
  kSign,
  kMaxPool,
  kGlobalAvgPool,
  kChannelShuffle,
  kConcat,
  kSliceAdd,
  kFullyConnected,
};

std::string_view kind_name(LayerKind kind);

struct BatchNormParams {
  Index channels = 0;
  double epsilon = 1e-5;
  double momentum = 0.9;
};

struct ShuffleParams {
  Index groups = 1;
};

struct FullyConnectedParams {
  Index in_features = 0;
  Index out_features = 0;
};

using LayerParams =
    std::variant<std::monostate, ConvParams, BatchNormParams, PoolParams, ShuffleParams, FullyConnectedParams>;

/// Id used in LayerSpec::inputs to refer to the graph input.
inline constexpr int kGraphInput = -1;

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kSign;
  LayerParams params;
  std::vector<int> inputs;
  // Output channel count; filled in by LayerGraph::add.
  Index channels = 0;
};

enum class ParamRole { kFloat, kBinaryLatent, kBuffer };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamRole role = ParamRole::kFloat;
  int layer = 0;
};

/// Directed acyclic layer graph. Layers are stored in topological order: every
/// input id refers to an earlier layer or to kGraphInput. The last layer is the
/// graph output.
class LayerGraph {
 public:
  explicit LayerGraph(Index input_channels = 0) : input_channels_(input_channels) {}

  /// Appends a layer after checking its inputs and channel arithmetic; returns its id.
  /// Throws InvalidConfig when the layer cannot consume its inputs.
  int add(LayerSpec layer);

  Index input_channels() const { return input_channels_; }
  Index channels(int id) const;
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(int id) const { return layers_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(layers_.size()); }
  int output() const { return layers_.empty() ? kGraphInput : size() - 1; }
  std::optional<int> find(std::string_view name) const;

  /// Every tensor the layers reference, in layer order.
  std::vector<ParamInfo> parameters() const;

 private:
  Index input_channels_;
  std::vector<LayerSpec> layers_;
};

/// Output shape of every layer for the given input; ContractViolation names the
/// first layer whose inputs do not fit.
std::vector<Shape> infer_shapes(const LayerGraph& graph, const Shape& input);

// Block builders append to `g` and return the id of the block output.

/// BatchNorm -> sign -> binary 3x3 conv (C -> growth) -> concat onto the input.
int add_dense_block(LayerGraph& g, int input, Index growth, const std::string& prefix);
/// BatchNorm -> sign -> binary 3x3 conv (C -> growth) added onto the last `growth` channels.
int add_improvement_block(LayerGraph& g, int input, Index growth, const std::string& prefix);
/// BatchNorm -> sign -> binary 3x3 conv (C -> C) added onto the whole feature map.
int add_residual_block(LayerGraph& g, int input, const std::string& prefix);
/// MaxPool 2x2/2 -> [shuffle if groups > 1] -> 32-bit 1x1 conv (groups) -> BatchNorm.
int add_transition(LayerGraph& g, int input, Index c_out, Index groups, const std::string& prefix);
/// Three 3x3 convs (32 s2, 32 g4, 64 g8) each with BatchNorm, then optionally MaxPool 3x3/2 pad 1.
int add_grouped_stem(LayerGraph& g, int input, bool pool, const std::string& prefix = "stem");
/// 7x7/2 conv to 64 channels with BatchNorm, then optionally MaxPool 3x3/2 pad 1.
int add_stem_7x7(LayerGraph& g, int input, bool pool, const std::string& prefix = "stem");
/// BatchNorm -> global average pool -> fully connected.
int add_classifier(LayerGraph& g, int input, Index num_classes, const std::string& prefix = "head");

// Standalone subgraphs over an input with `c_in` channels.
LayerGraph build_dense_block(Index c_in, Index growth);
LayerGraph build_improvement_block(Index c_in, Index growth);
LayerGraph build_transition(Index c_in, Index c_out, Index groups);
LayerGraph build_grouped_stem(Index c_img);
LayerGraph build_stem_7x7(Index c_img);

struct Fraction {
  Index num = 1;
  Index den = 2;
  friend bool operator==(const Fraction&, const Fraction&) = default;
};

enum class StemKind { kGrouped, kConv7x7 };
enum class BlockStyle { kMelius, kNaiveResidual, kDenseOnly };

std::string_view stem_name(StemKind stem);
std::string_view block_style_name(BlockStyle style);

struct ArchConfig {
  std::string name = "custom";
  std::array<Index, 4> block_counts{4, 5, 4, 4};
  Index growth = 64;
  // Transition t maps C channels to C * num / den channels.
  std::array<Fraction, 3> reductions{};
  Index downsample_groups = 1;
  StemKind stem = StemKind::kGrouped;
  bool stem_pool = true;
  Index num_classes = 1000;
  Index input_channels = 3;
  Index input_height = 224;
  Index input_width = 224;
  BlockStyle block_style = BlockStyle::kMelius;

  Shape input_shape(Index batch = 1) const { return {batch, input_channels, input_height, input_width}; }
  void validate() const;
};

/// Table presets: meliusnet22, 29, 42, 59, A, B, C (case-insensitive).
ArchConfig preset(std::string_view name);
std::vector<std::string> preset_names();

/// Stem -> 4 stages of blocks with 3 transitions -> classifier.
LayerGraph build_topology(const ArchConfig& cfg);

/// Layer graph plus the tensors it references. Binary-conv weights are kept as
/// 32-bit latents and binarized on every forward pass.
template <typename Scalar>
struct ModelGraph {
  LayerGraph topology;
  std::map<std::string, Tensor<Scalar>> parameters;
  std::map<std::string, Tensor<Scalar>> buffers;
  std::optional<ArchConfig> config;
  Scalar t_clip = Scalar(kDefaultClip);

  template <typename To>
  ModelGraph<To> cast() const {
    ModelGraph<To> out;
    out.topology = topology;
    out.config = config;
    out.t_clip = static_cast<To>(t_clip);
    for (const auto& [k, v] : parameters) out.parameters.emplace(k, v.template cast<To>());
    for (const auto& [k, v] : buffers) out.buffers.emplace(k, v.template cast<To>());
    return out;
  }
};

/// Allocates and initializes every tensor of `topology`: conv and FC weights
/// Glorot-uniform over the per-group fan average, biases and BatchNorm beta 0,
/// gamma 1, running mean 0, running variance 1.
template <typename Scalar>
ModelGraph<Scalar> instantiate(LayerGraph topology, std::uint64_t seed);

template <typename Scalar>
ModelGraph<Scalar> build_model(const ArchConfig& cfg, std::uint64_t seed = 0);

/// ContractViolation if any referenced tensor is missing or misshapen.
template <typename Scalar>
void validate(const ModelGraph<Scalar>& g);

enum class Mode { kInference, kTraining };

/// kExact evaluates sign layers and binary weights with sign(); kSurrogate
/// replaces both with clamp(x, -t_clip, t_clip), whose derivative is exactly the
/// straight-through mask used by backward().
enum class Binarization { kExact, kSurrogate };

struct ForwardOptions {
  Mode mode = Mode::kInference;
  Binarization binarization = Binarization::kExact;
};

template <typename Scalar>
struct ForwardCache {
  Tensor<Scalar> input;
  std::vector<Tensor<Scalar>> outputs;
  // Effective (binarized or clamped) weights for binary-conv layers, empty otherwise.
  std::vector<Tensor<Scalar>> weights;
  ForwardOptions options;

  bool empty() const { return outputs.empty(); }
};

/// Inference with running statistics and exact binarization.
template <typename Scalar>
Tensor<Scalar> forward(const ModelGraph<Scalar>& g, const Tensor<Scalar>& x);

/// Training mode updates BatchNorm running statistics in `g`. When `cache` is
/// given it receives every intermediate needed by backward().
template <typename Scalar>
Tensor<Scalar> forward(ModelGraph<Scalar>& g, const Tensor<Scalar>& x, const ForwardOptions& options,
                       ForwardCache<Scalar>* cache = nullptr);

template <typename Scalar>
struct Gradients {
  std::map<std::string, GradTensor<Scalar>> parameters;
  GradTensor<Scalar> input;
};

/// Backpropagates `grad_output` (dL/d output) through a cached forward pass.
/// Sign layers and binary-weight binarization use the straight-through mask
/// 1{|x| <= t_clip}; binary-conv weight gradients are w.r.t. the latents.
template <typename Scalar>
Gradients<Scalar> backward(const ModelGraph<Scalar>& g, const ForwardCache<Scalar>& cache,
                           const GradTensor<Scalar>& grad_output);

/// Copies the tensors of `from` whose names also exist in `to`.
template <typename Scalar>
void copy_shared_tensors(const ModelGraph<Scalar>& from, ModelGraph<Scalar>& to);

}  // namespace melius

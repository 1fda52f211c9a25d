#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "melius/graph.hpp"

namespace melius {

template <typename Scalar>
struct LossResult {
  Scalar loss = 0;
  GradTensor<Scalar> grad;  // dL/dlogits
};

/// Mean softmax cross-entropy over the batch. `logits` is N x K x 1 x 1.
template <typename Scalar>
LossResult<Scalar> cross_entropy_loss(const Tensor<Scalar>& logits, std::span<const int> labels);

/// Training-mode forward, cross-entropy and backward in one call. Uses the
/// graph's t_clip for every straight-through mask.
template <typename Scalar>
Gradients<Scalar> loss_gradients(ModelGraph<Scalar>& g, const Tensor<Scalar>& x, std::span<const int> labels,
                                 Binarization binarization = Binarization::kExact, Scalar* loss = nullptr);

enum class OptimizerKind { kAdam, kSgdMomentum };

struct TrainConfig {
  int epochs = 120;
  double base_lr = 0.002;
  int warmup_epochs = 5;
  double t_clip = kDefaultClip;
  int batch_size = 64;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double sgd_momentum = 0.9;
  // Augmentation: random horizontal flip (p = 1/2) and zero-pad-and-crop.
  bool hflip = true;
  int crop_padding = 4;
  // Flip counts restart at every epoch when set, otherwise accumulate.
  bool reset_flips_per_epoch = true;

  void validate() const;
};

/// Learning rate at training progress t in [0, 1]: linear warmup from 0 over
/// warmup_epochs / epochs, then half-cosine decay from base_lr to 0 over the rest.
double lr_schedule(double t, const TrainConfig& cfg);

using ParameterMap = std::map<std::string, Tensor<float>>;

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;
  std::int64_t step = 0;
  ParameterMap first_moment;   // Adam m, or SGD velocity
  ParameterMap second_moment;  // Adam v
};

/// Bias-corrected Adam update of every parameter that has a gradient.
void adam_step(ParameterMap& params, const std::map<std::string, GradTensor<float>>& grads, OptimizerState& state,
               double lr);

/// Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v.
void sgd_step(ParameterMap& params, const std::map<std::string, GradTensor<float>>& grads, OptimizerState& state,
              double lr);

struct FlipSummary {
  std::string layer;
  std::int64_t weights = 0;
  double zero_flip_fraction = 0;
  // Nearest-rank percentiles of the per-weight flip counts.
  std::int64_t p50 = 0, p75 = 0, p90 = 0, p95 = 0, p99 = 0, max = 0;
};

/// Counts sign changes of binary-conv latent weights between optimizer steps.
class FlipCounter {
 public:
  struct Layer {
    std::string name;
    std::vector<std::uint8_t> signs;  // 1 for +1 (latent >= 0)
    std::vector<std::uint32_t> epoch_counts;
    std::vector<std::uint32_t> total_counts;
  };

  FlipCounter() = default;
  explicit FlipCounter(bool reset_per_epoch) : reset_per_epoch_(reset_per_epoch) {}

  /// Records the current signs of every binary latent as the baseline.
  void track(const ModelGraph<float>& g);
  /// Compares every tracked latent against its stored sign and counts flips.
  void record(const ModelGraph<float>& g);
  void start_epoch();

  const std::vector<Layer>& layers() const { return layers_; }
  const Layer& layer(const std::string& name) const;
  std::int64_t epoch() const { return epoch_; }

  std::vector<FlipSummary> summarize() const;
  /// All tracked weights pooled into one summary named "all".
  FlipSummary summarize_all() const;

 private:
  friend void count_weight_flips(FlipCounter& counter, const std::string& layer, std::span<const float> latents);
  Layer& find_or_add(const std::string& name, std::span<const float> latents);

  bool reset_per_epoch_ = true;
  std::int64_t epoch_ = 0;
  std::vector<Layer> layers_;
};

/// Increments the count of every weight of `layer` whose sign(latent) differs
/// from the stored sign, then stores the new signs. The first call for a layer
/// only records the baseline.
void count_weight_flips(FlipCounter& counter, const std::string& layer, std::span<const float> latents);

FlipSummary summarize_counts(const std::string& name, std::span<const std::uint32_t> counts);

/// Images (N x C x H x W, normalized) with integer labels.
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::vector<float> mean;    // per-channel statistics used for normalization
  std::vector<float> stddev;

  Index size() const { return static_cast<Index>(labels.size()); }
  Shape image_shape() const { return {1, images.shape().c, images.shape().h, images.shape().w}; }
  int num_classes() const;
};

/// Gathers `indices` into one batch tensor, optionally augmented.
Tensor<float> make_batch(const Dataset& data, std::span<const Index> indices, const TrainConfig* augment,
                         std::mt19937_64* rng);

struct TrainState {
  OptimizerState optimizer;
  std::mt19937_64 rng;
  std::int64_t step = 0;
  int epoch = 0;
  std::optional<FlipCounter> flips;
  // Called after every optimizer step with the updated graph.
  std::function<void(const ModelGraph<float>&)> after_step;

  /// Seeds the RNG and the optimizer kind from `cfg`; enables flip tracking on request.
  static TrainState create(const ModelGraph<float>& g, const TrainConfig& cfg, bool track_flips);
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0;
  double top1 = 0;  // training accuracy over the epoch's batches
  double lr = 0;    // learning rate of the final step
  std::optional<FlipSummary> flips;
};

/// One pass over `data` in a seed-determined order.
EpochMetrics train_epoch(ModelGraph<float>& g, const Dataset& data, const TrainConfig& cfg, TrainState& state);

// CSV logs. Epoch rows: epoch,loss,top1,lr,test_top1 followed by the pooled
// flip summary columns; flip rows: epoch,layer,weights,zero_flip_fraction,p50,
// p75,p90,p95,p99,max.
inline constexpr const char* kEpochCsvHeader =
    "epoch,loss,top1,lr,test_top1,flip_zero_fraction,flip_p50,flip_p75,flip_p90,flip_p95,flip_p99,flip_max";
inline constexpr const char* kFlipCsvHeader = "epoch,layer,weights,zero_flip_fraction,p50,p75,p90,p95,p99,max";

/// `test_top1` < 0 and missing flip summaries are written as empty fields.
std::string epoch_csv_row(const EpochMetrics& m, double test_top1 = -1);
std::string flip_csv_row(int epoch, const FlipSummary& s);
/// One human-readable line per epoch for the log stream.
std::string format_epoch(const EpochMetrics& m, double test_top1 = -1);

/// Top-1 accuracy of inference-mode predictions.
double evaluate(const ModelGraph<float>& g, const Dataset& data, Index batch_size = 256);

/// Predicted class per sample.
std::vector<int> predict(const ModelGraph<float>& g, const Tensor<float>& images, Index batch_size = 256);

}  // namespace melius

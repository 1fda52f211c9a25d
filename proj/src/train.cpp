#include "melius/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

namespace melius {

template <typename Scalar>
LossResult<Scalar> cross_entropy_loss(const Tensor<Scalar>& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.h != 1 || s.w != 1) throw ContractViolation("cross_entropy_loss: logits must be N x K x 1 x 1");
  if (static_cast<Index>(labels.size()) != s.n) {
    throw ContractViolation("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(s.n) + " rows");
  }
  if (s.n == 0) throw InvalidInput("cross_entropy_loss: empty batch");
  LossResult<Scalar> r{Scalar(0), GradTensor<Scalar>(s)};
  Eigen::Map<const RowMatrix<Scalar>> z(logits.data(), s.n, s.c);
  Eigen::Map<RowMatrix<Scalar>> dz(r.grad.data(), s.n, s.c);
  const Scalar inv_n = Scalar(1) / Scalar(s.n);
  for (Index i = 0; i < s.n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= s.c) {
      throw InvalidInput("cross_entropy_loss: label " + std::to_string(label) + " outside [0, " +
                         std::to_string(s.c) + ")");
    }
    const Scalar m = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - m).exp();
    const Scalar sum = e.sum();
    r.loss += (std::log(sum) - (z(i, label) - m)) * inv_n;
    dz.row(i) = e / sum * inv_n;
    dz(i, label) -= inv_n;
  }
  return r;
}

template <typename Scalar>
Gradients<Scalar> loss_gradients(ModelGraph<Scalar>& g, const Tensor<Scalar>& x, std::span<const int> labels,
                                 Binarization binarization, Scalar* loss) {
  ForwardCache<Scalar> cache;
  const Tensor<Scalar> logits = forward(g, x, ForwardOptions{Mode::kTraining, binarization}, &cache);
  LossResult<Scalar> l = cross_entropy_loss(logits, labels);
  if (loss) *loss = l.loss;
  return backward(g, cache, l.grad);
}

template LossResult<float> cross_entropy_loss<float>(const Tensor<float>&, std::span<const int>);
template LossResult<double> cross_entropy_loss<double>(const Tensor<double>&, std::span<const int>);
template Gradients<float> loss_gradients<float>(ModelGraph<float>&, const Tensor<float>&, std::span<const int>,
                                                Binarization, float*);
template Gradients<double> loss_gradients<double>(ModelGraph<double>&, const Tensor<double>&, std::span<const int>,
                                                  Binarization, double*);

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidConfig("train: epochs must be >= 1");
  if (!(base_lr > 0)) throw InvalidConfig("train: base learning rate must be positive");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) throw InvalidConfig("train: warmup_epochs must be < epochs");
  if (!(t_clip > 0)) throw InvalidConfig("train: t_clip must be positive");
  if (batch_size < 1) throw InvalidConfig("train: batch size must be >= 1");
  if (crop_padding < 0) throw InvalidConfig("train: crop padding must be >= 0");
}

double lr_schedule(double t, const TrainConfig& cfg) {
  t = std::clamp(t, 0.0, 1.0);
  const double warmup = double(cfg.warmup_epochs) / double(cfg.epochs);
  if (warmup > 0 && t < warmup) return cfg.base_lr * t / warmup;
  const double progress = warmup < 1 ? (t - warmup) / (1 - warmup) : 1.0;
  return cfg.base_lr * (1 + std::cos(std::numbers::pi * progress)) / 2;
}

void adam_step(ParameterMap& params, const std::map<std::string, GradTensor<float>>& grads, OptimizerState& state,
               double lr) {
  ++state.step;
  const double c1 = 1 - std::pow(state.beta1, double(state.step));
  const double c2 = 1 - std::pow(state.beta2, double(state.step));
  const float b1 = float(state.beta1);
  const float b2 = float(state.beta2);
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractViolation("adam_step: gradient for unknown parameter '" + name + "'");
    Tensor<float>& p = it->second;
    require_same_shape(p, g, "adam_step");
    auto& m = state.first_moment.try_emplace(name, p.shape()).first->second;
    auto& v = state.second_moment.try_emplace(name, p.shape()).first->second;
    m.values() = b1 * m.values() + (1 - b1) * g.values();
    v.values() = b2 * v.values() + (1 - b2) * g.values().cwiseAbs2();
    const auto m_hat = m.values().array() / float(c1);
    const auto v_hat = v.values().array() / float(c2);
    p.values().array() -= float(lr) * m_hat / (v_hat.sqrt() + float(state.epsilon));
  }
}

void sgd_step(ParameterMap& params, const std::map<std::string, GradTensor<float>>& grads, OptimizerState& state,
              double lr) {
  ++state.step;
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractViolation("sgd_step: gradient for unknown parameter '" + name + "'");
    Tensor<float>& p = it->second;
    require_same_shape(p, g, "sgd_step");
    auto& vel = state.first_moment.try_emplace(name, p.shape()).first->second;
    vel.values() = float(state.momentum) * vel.values() + g.values();
    p.values() -= float(lr) * vel.values();
  }
}

FlipCounter::Layer& FlipCounter::find_or_add(const std::string& name, std::span<const float> latents) {
  for (Layer& l : layers_)
    if (l.name == name) return l;
  Layer l;
  l.name = name;
  l.signs.resize(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) l.signs[i] = latents[i] >= 0.0f;
  l.epoch_counts.assign(latents.size(), 0);
  l.total_counts.assign(latents.size(), 0);
  layers_.push_back(std::move(l));
  return layers_.back();
}

void count_weight_flips(FlipCounter& counter, const std::string& layer, std::span<const float> latents) {
  const std::size_t before = counter.layers_.size();
  FlipCounter::Layer& l = counter.find_or_add(layer, latents);
  if (counter.layers_.size() != before) return;
  if (l.signs.size() != latents.size()) {
    throw ContractViolation("count_weight_flips: layer '" + layer + "' has " + std::to_string(l.signs.size()) +
                            " weights, got " + std::to_string(latents.size()));
  }
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const std::uint8_t sign = latents[i] >= 0.0f;
    if (sign != l.signs[i]) {
      ++l.epoch_counts[i];
      ++l.total_counts[i];
      l.signs[i] = sign;
    }
  }
}

void FlipCounter::track(const ModelGraph<float>& g) {
  for (const ParamInfo& info : g.topology.parameters())
    if (info.role == ParamRole::kBinaryLatent) count_weight_flips(*this, info.name, g.parameters.at(info.name).span());
}

void FlipCounter::record(const ModelGraph<float>& g) {
  for (const Layer& l : layers_) {
    auto it = g.parameters.find(l.name);
    if (it == g.parameters.end()) throw ContractViolation("FlipCounter: graph lost tensor '" + l.name + "'");
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string name = layers_[i].name;
    count_weight_flips(*this, name, g.parameters.at(name).span());
  }
}

void FlipCounter::start_epoch() {
  ++epoch_;
  if (!reset_per_epoch_) return;
  for (Layer& l : layers_) std::fill(l.epoch_counts.begin(), l.epoch_counts.end(), 0u);
}

const FlipCounter::Layer& FlipCounter::layer(const std::string& name) const {
  for (const Layer& l : layers_)
    if (l.name == name) return l;
  throw ContractViolation("FlipCounter: untracked layer '" + name + "'");
}

FlipSummary summarize_counts(const std::string& name, std::span<const std::uint32_t> counts) {
  FlipSummary s;
  s.layer = name;
  s.weights = static_cast<std::int64_t>(counts.size());
  if (counts.empty()) return s;
  std::vector<std::uint32_t> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end());
  auto rank = [&](double p) {
    const auto k = static_cast<std::size_t>(std::ceil(p / 100.0 * double(sorted.size())));
    return static_cast<std::int64_t>(sorted[std::max<std::size_t>(k, 1) - 1]);
  };
  s.zero_flip_fraction =
      double(std::count(sorted.begin(), sorted.end(), 0u)) / double(sorted.size());
  s.p50 = rank(50);
  s.p75 = rank(75);
  s.p90 = rank(90);
  s.p95 = rank(95);
  s.p99 = rank(99);
  s.max = sorted.back();
  return s;
}

std::vector<FlipSummary> FlipCounter::summarize() const {
  std::vector<FlipSummary> out;
  for (const Layer& l : layers_) out.push_back(summarize_counts(l.name, l.epoch_counts));
  return out;
}

FlipSummary FlipCounter::summarize_all() const {
  std::vector<std::uint32_t> all;
  for (const Layer& l : layers_) all.insert(all.end(), l.epoch_counts.begin(), l.epoch_counts.end());
  return summarize_counts("all", all);
}

int Dataset::num_classes() const {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

Tensor<float> make_batch(const Dataset& data, std::span<const Index> indices, const TrainConfig* augment,
                         std::mt19937_64* rng) {
  const Shape s = data.image_shape();
  Tensor<float> batch(Shape{static_cast<Index>(indices.size()), s.c, s.h, s.w});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Index src = indices[b];
    if (src < 0 || src >= data.size()) throw ContractViolation("make_batch: index out of range");
    const auto image = data.images.image(src);
    auto dst = batch.image(static_cast<Index>(b));
    if (augment == nullptr || rng == nullptr) {
      dst = image;
      continue;
    }
    const Index pad = augment->crop_padding;
    Index dy = 0;
    Index dx = 0;
    if (pad > 0) {
      std::uniform_int_distribution<Index> offset(-pad, pad);
      dy = offset(*rng);
      dx = offset(*rng);
    }
    const bool flip = augment->hflip && std::bernoulli_distribution(0.5)(*rng);
    for (Index c = 0; c < s.c; ++c)
      for (Index y = 0; y < s.h; ++y)
        for (Index x = 0; x < s.w; ++x) {
          const Index sy = y + dy;
          const Index sx = (flip ? s.w - 1 - x : x) + dx;
          dst(c, y * s.w + x) = (sy >= 0 && sy < s.h && sx >= 0 && sx < s.w) ? image(c, sy * s.w + sx) : 0.0f;
        }
  }
  return batch;
}

TrainState TrainState::create(const ModelGraph<float>& g, const TrainConfig& cfg, bool track_flips) {
  TrainState s;
  s.rng.seed(cfg.seed);
  s.optimizer.kind = cfg.optimizer;
  s.optimizer.momentum = cfg.sgd_momentum;
  if (track_flips) {
    s.flips.emplace(cfg.reset_flips_per_epoch);
    s.flips->track(g);
  }
  return s;
}

EpochMetrics train_epoch(ModelGraph<float>& g, const Dataset& data, const TrainConfig& cfg, TrainState& state) {
  cfg.validate();
  if (data.size() == 0) throw InvalidInput("train_epoch: empty dataset");
  g.t_clip = float(cfg.t_clip);
  const Index n = data.size();
  const Index batch = cfg.batch_size;
  const std::int64_t steps_per_epoch = (n + batch - 1) / batch;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), state.rng);
  if (state.flips) state.flips->start_epoch();

  EpochMetrics m;
  double loss_sum = 0;
  Index correct = 0;
  for (Index start = 0; start < n; start += batch) {
    const Index count = std::min(batch, n - start);
    std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(count));
    const Tensor<float> x = make_batch(data, idx, &cfg, &state.rng);
    std::vector<int> labels;
    for (Index i : idx) labels.push_back(data.labels[static_cast<std::size_t>(i)]);

    ForwardCache<float> cache;
    const Tensor<float> logits = forward(g, x, ForwardOptions{Mode::kTraining, Binarization::kExact}, &cache);
    const LossResult<float> loss = cross_entropy_loss(logits, labels);
    const Gradients<float> grads = backward(g, cache, loss.grad);

    m.lr = lr_schedule(double(state.step) / double(total_steps), cfg);
    if (cfg.optimizer == OptimizerKind::kAdam) {
      adam_step(g.parameters, grads.parameters, state.optimizer, m.lr);
    } else {
      sgd_step(g.parameters, grads.parameters, state.optimizer, m.lr);
    }
    ++state.step;
    if (state.flips) state.flips->record(g);
    if (state.after_step) state.after_step(g);

    loss_sum += double(loss.loss) * double(count);
    Eigen::Map<const RowMatrix<float>> z(logits.data(), count, logits.shape().c);
    for (Index i = 0; i < count; ++i) {
      Index best = 0;
      z.row(i).maxCoeff(&best);
      correct += best == labels[static_cast<std::size_t>(i)];
    }
  }
  m.epoch = ++state.epoch;
  m.loss = loss_sum / double(n);
  m.top1 = double(correct) / double(n);
  if (state.flips) m.flips = state.flips->summarize_all();
  return m;
}

std::vector<int> predict(const ModelGraph<float>& g, const Tensor<float>& images, Index batch_size) {
  const Shape s = images.shape();
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(s.n));
  for (Index start = 0; start < s.n; start += batch_size) {
    const Index count = std::min(batch_size, s.n - start);
    Tensor<float> x(Shape{count, s.c, s.h, s.w});
    x.values() = images.values().segment(start * s.c * s.plane(), count * s.c * s.plane());
    const Tensor<float> logits = forward(g, x);
    Eigen::Map<const RowMatrix<float>> z(logits.data(), count, logits.shape().c);
    for (Index i = 0; i < count; ++i) {
      Index best = 0;
      z.row(i).maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

namespace {

std::string flip_fields(const FlipSummary& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.6f,%lld,%lld,%lld,%lld,%lld,%lld", s.zero_flip_fraction, (long long)s.p50,
                (long long)s.p75, (long long)s.p90, (long long)s.p95, (long long)s.p99, (long long)s.max);
  return buf;
}

}  // namespace

std::string epoch_csv_row(const EpochMetrics& m, double test_top1) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.8g,", m.epoch, m.loss, m.top1, m.lr);
  std::string row = buf;
  if (test_top1 >= 0) {
    std::snprintf(buf, sizeof buf, "%.6f", test_top1);
    row += buf;
  }
  row += ",";
  row += m.flips ? flip_fields(*m.flips) : std::string(",,,,,,");
  return row;
}

std::string flip_csv_row(int epoch, const FlipSummary& s) {
  return std::to_string(epoch) + "," + s.layer + "," + std::to_string(s.weights) + "," + flip_fields(s);
}

std::string format_epoch(const EpochMetrics& m, double test_top1) {
  char buf[256];
  int n = std::snprintf(buf, sizeof buf, "epoch %d loss %.4f top1 %.4f lr %.6g", m.epoch, m.loss, m.top1, m.lr);
  if (test_top1 >= 0) n += std::snprintf(buf + n, sizeof buf - std::size_t(n), " test_top1 %.4f", test_top1);
  if (m.flips) {
    std::snprintf(buf + n, sizeof buf - std::size_t(n), " flips zero %.4f p50 %lld p90 %lld p99 %lld max %lld",
                  m.flips->zero_flip_fraction, (long long)m.flips->p50, (long long)m.flips->p90,
                  (long long)m.flips->p99, (long long)m.flips->max);
  }
  return buf;
}

double evaluate(const ModelGraph<float>& g, const Dataset& data, Index batch_size) {
  if (data.size() == 0) throw InvalidInput("evaluate: empty dataset");
  const std::vector<int> pred = predict(g, data.images, batch_size);
  Index correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return double(correct) / double(data.size());
}

}  // namespace melius

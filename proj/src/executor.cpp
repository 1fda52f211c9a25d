#include <cmath>
#include <random>

#include "melius/graph.hpp"

namespace melius {

namespace {

template <typename Scalar>
const Tensor<Scalar>& lookup(const std::map<std::string, Tensor<Scalar>>& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw ContractViolation("missing tensor '" + name + "'");
  return it->second;
}

template <typename Scalar>
BatchNormState<Scalar> bn_state(const ModelGraph<Scalar>& g, const LayerSpec& l) {
  const auto& p = std::get<BatchNormParams>(l.params);
  BatchNormState<Scalar> s;
  s.gamma = lookup(g.parameters, l.name + ".gamma").values();
  s.beta = lookup(g.parameters, l.name + ".beta").values();
  s.running_mean = lookup(g.buffers, l.name + ".running_mean").values();
  s.running_var = lookup(g.buffers, l.name + ".running_var").values();
  s.epsilon = static_cast<Scalar>(p.epsilon);
  s.momentum = static_cast<Scalar>(p.momentum);
  return s;
}

template <typename Scalar>
Tensor<Scalar> clamp_values(const Tensor<Scalar>& x, Scalar t) {
  Tensor<Scalar> out(x.shape());
  out.values() = x.values().cwiseMax(-t).cwiseMin(t);
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& parts) {
  Shape s = parts.front()->shape();
  s.c = 0;
  for (const auto* p : parts) s.c += p->shape().c;
  Tensor<Scalar> out(s);
  for (Index n = 0; n < s.n; ++n) {
    Index offset = 0;
    for (const auto* p : parts) {
      out.channels(n, offset, p->shape().c) = p->image(n);
      offset += p->shape().c;
    }
  }
  return out;
}

// Forward evaluation shared by the inference and training entry points.
// `mutable_graph` is non-null only in training mode (running statistics).
template <typename Scalar>
Tensor<Scalar> run_forward(const ModelGraph<Scalar>& g, ModelGraph<Scalar>* mutable_graph, const Tensor<Scalar>& x,
                           const ForwardOptions& opt, ForwardCache<Scalar>* cache) {
  const LayerGraph& topo = g.topology;
  if (x.shape().c != topo.input_channels()) {
    throw ContractViolation("forward: input " + to_string(x.shape()) + " does not have " +
                            std::to_string(topo.input_channels()) + " channels");
  }
  if (!x.all_finite()) throw ContractViolation("forward: input contains non-finite values");
  if (topo.size() == 0) return x;

  const bool training = opt.mode == Mode::kTraining;
  const bool exact = opt.binarization == Binarization::kExact;
  const std::size_t count = static_cast<std::size_t>(topo.size());

  // Last consumer of every layer output, so inference can release tensors early.
  std::vector<int> last_use(count, -1);
  for (int i = 0; i < topo.size(); ++i)
    for (int in : topo.layer(i).inputs)
      if (in != kGraphInput) last_use[static_cast<std::size_t>(in)] = i;

  std::vector<Tensor<Scalar>> outputs(count);
  std::vector<Tensor<Scalar>> weights(cache ? count : 0);
  auto value = [&](int id) -> const Tensor<Scalar>& {
    return id == kGraphInput ? x : outputs[static_cast<std::size_t>(id)];
  };

  for (int i = 0; i < topo.size(); ++i) {
    const LayerSpec& l = topo.layer(i);
    const Tensor<Scalar>& in = value(l.inputs.front());
    Tensor<Scalar> out;
    try {
      switch (l.kind) {
        case LayerKind::kBinaryConv: {
          const auto& p = std::get<ConvParams>(l.params);
          const Tensor<Scalar>& latent = lookup(g.parameters, l.name + ".weight");
          if (exact) {
            out = conv2d_xnor<Scalar>(sign_forward(in), sign_forward(latent), p);
            if (cache) weights[static_cast<std::size_t>(i)] = sign_values(latent);
          } else {
            Tensor<Scalar> w = clamp_values(latent, g.t_clip);
            out = conv2d_reference(in, w, p);
            if (cache) weights[static_cast<std::size_t>(i)] = std::move(w);
          }
          break;
        }
        case LayerKind::kFpConv:
          out = conv2d_reference(in, lookup(g.parameters, l.name + ".weight"), std::get<ConvParams>(l.params));
          break;
        case LayerKind::kBatchNorm: {
          BatchNormState<Scalar> s = bn_state(g, l);
          if (training) {
            out = batchnorm_forward(in, s, true);
            mutable_graph->buffers[l.name + ".running_mean"].values() = s.running_mean;
            mutable_graph->buffers[l.name + ".running_var"].values() = s.running_var;
          } else {
            out = batchnorm_forward(in, std::as_const(s));
          }
          break;
        }
        case LayerKind::kSign:
          out = exact ? sign_values(in) : clamp_values(in, g.t_clip);
          break;
        case LayerKind::kMaxPool:
          out = maxpool2d(in, std::get<PoolParams>(l.params));
          break;
        case LayerKind::kGlobalAvgPool:
          out = global_avgpool(in);
          break;
        case LayerKind::kChannelShuffle:
          out = channel_shuffle(in, std::get<ShuffleParams>(l.params).groups);
          break;
        case LayerKind::kConcat: {
          std::vector<const Tensor<Scalar>*> parts;
          for (int id : l.inputs) {
            const Tensor<Scalar>& t = value(id);
            if (t.shape().n != in.shape().n || t.shape().h != in.shape().h || t.shape().w != in.shape().w) {
              throw ContractViolation("concat of " + to_string(in.shape()) + " and " + to_string(t.shape()));
            }
            parts.push_back(&t);
          }
          out = concat_channels(parts);
          break;
        }
        case LayerKind::kSliceAdd: {
          const Tensor<Scalar>& add = value(l.inputs[1]);
          const Shape& bs = in.shape();
          const Shape& as = add.shape();
          if (as.n != bs.n || as.h != bs.h || as.w != bs.w || as.c > bs.c) {
            throw ContractViolation("slice-add of " + to_string(as) + " onto " + to_string(bs));
          }
          out = in;
          for (Index n = 0; n < bs.n; ++n) out.channels(n, bs.c - as.c, as.c) += add.image(n);
          break;
        }
        case LayerKind::kFullyConnected:
          out = fully_connected(in, lookup(g.parameters, l.name + ".weight"), lookup(g.parameters, l.name + ".bias"));
          break;
      }
    } catch (const ContractViolation& e) {
      throw ContractViolation("layer '" + l.name + "': " + e.what());
    }
    outputs[static_cast<std::size_t>(i)] = std::move(out);
    if (!cache) {
      for (int id : l.inputs)
        if (id != kGraphInput && last_use[static_cast<std::size_t>(id)] == i) outputs[static_cast<std::size_t>(id)] = {};
    }
  }

  Tensor<Scalar> result = outputs.back();
  if (cache) {
    cache->input = x;
    cache->outputs = std::move(outputs);
    cache->weights = std::move(weights);
    cache->options = opt;
  }
  return result;
}

}  // namespace

template <typename Scalar>
ModelGraph<Scalar> instantiate(LayerGraph topology, std::uint64_t seed) {
  ModelGraph<Scalar> g;
  g.topology = std::move(topology);
  std::mt19937_64 rng(seed);
  for (const ParamInfo& info : g.topology.parameters()) {
    const LayerSpec& l = g.topology.layer(info.layer);
    Tensor<Scalar> t(info.shape);
    const std::string suffix = info.name.substr(l.name.size() + 1);
    if (suffix == "weight") {
      double fan_in = 0;
      double fan_out = 0;
      if (const auto* p = std::get_if<ConvParams>(&l.params)) {
        const double taps = double(p->kernel_h * p->kernel_w);
        fan_in = double(p->in_per_group()) * taps;
        fan_out = double(p->out_per_group()) * taps;
      } else {
        const auto& fc = std::get<FullyConnectedParams>(l.params);
        fan_in = double(fc.in_features);
        fan_out = double(fc.out_features);
      }
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Index k = 0; k < t.size(); ++k) t[k] = static_cast<Scalar>(dist(rng));
    } else if (suffix == "gamma" || suffix == "running_var") {
      t.values().setOnes();
    }
    (info.role == ParamRole::kBuffer ? g.buffers : g.parameters).emplace(info.name, std::move(t));
  }
  return g;
}

template <typename Scalar>
ModelGraph<Scalar> build_model(const ArchConfig& cfg, std::uint64_t seed) {
  ModelGraph<Scalar> g = instantiate<Scalar>(build_topology(cfg), seed);
  g.config = cfg;
  return g;
}

template <typename Scalar>
void validate(const ModelGraph<Scalar>& g) {
  for (const ParamInfo& info : g.topology.parameters()) {
    const auto& m = info.role == ParamRole::kBuffer ? g.buffers : g.parameters;
    const Tensor<Scalar>& t = lookup(m, info.name);
    if (t.shape() != info.shape) {
      throw ContractViolation("tensor '" + info.name + "' has shape " + to_string(t.shape()) + ", expected " +
                              to_string(info.shape));
    }
  }
}

template <typename Scalar>
Tensor<Scalar> forward(const ModelGraph<Scalar>& g, const Tensor<Scalar>& x) {
  return run_forward<Scalar>(g, nullptr, x, ForwardOptions{}, nullptr);
}

template <typename Scalar>
Tensor<Scalar> forward(ModelGraph<Scalar>& g, const Tensor<Scalar>& x, const ForwardOptions& options,
                       ForwardCache<Scalar>* cache) {
  return run_forward<Scalar>(g, options.mode == Mode::kTraining ? &g : nullptr, x, options, cache);
}

template <typename Scalar>
Gradients<Scalar> backward(const ModelGraph<Scalar>& g, const ForwardCache<Scalar>& cache,
                           const GradTensor<Scalar>& grad_output) {
  const LayerGraph& topo = g.topology;
  if (cache.empty() || cache.outputs.size() != static_cast<std::size_t>(topo.size()) ||
      cache.weights.size() != cache.outputs.size()) {
    throw ContractViolation("backward: no forward cache for this graph");
  }
  if (grad_output.shape() != cache.outputs.back().shape()) {
    throw ContractViolation("backward: output gradient " + to_string(grad_output.shape()) + ", expected " +
                            to_string(cache.outputs.back().shape()));
  }
  const bool training = cache.options.mode == Mode::kTraining;
  const bool exact = cache.options.binarization == Binarization::kExact;

  Gradients<Scalar> result;
  for (const ParamInfo& info : topo.parameters())
    if (info.role != ParamRole::kBuffer) result.parameters.emplace(info.name, GradTensor<Scalar>(info.shape));
  result.input = GradTensor<Scalar>(cache.input.shape());

  std::vector<GradTensor<Scalar>> grads(cache.outputs.size());
  grads.back() = grad_output;
  auto value = [&](int id) -> const Tensor<Scalar>& {
    return id == kGraphInput ? cache.input : cache.outputs[static_cast<std::size_t>(id)];
  };
  auto accumulate = [&](int id, GradTensor<Scalar> gt) {
    GradTensor<Scalar>& slot = id == kGraphInput ? result.input : grads[static_cast<std::size_t>(id)];
    if (slot.empty()) {
      slot = std::move(gt);
    } else {
      slot.values() += gt.values();
    }
  };
  auto add_param = [&](const std::string& name, const Vector<Scalar>& v) { result.parameters.at(name).values() += v; };

  for (int i = topo.size() - 1; i >= 0; --i) {
    GradTensor<Scalar> dy = std::move(grads[static_cast<std::size_t>(i)]);
    if (dy.empty()) continue;
    const LayerSpec& l = topo.layer(i);
    const Tensor<Scalar>& in = value(l.inputs.front());
    try {
      switch (l.kind) {
        case LayerKind::kBinaryConv: {
          const auto& p = std::get<ConvParams>(l.params);
          const Tensor<Scalar>& w_eff = cache.weights[static_cast<std::size_t>(i)];
          const Tensor<Scalar>& latent = lookup(g.parameters, l.name + ".weight");
          GradTensor<Scalar> dw = exact ? conv2d_backward_weight(sign_values(in), dy, p) : conv2d_backward_weight(in, dy, p);
          add_param(l.name + ".weight", ste_backward(latent, dw, g.t_clip).values());
          accumulate(l.inputs[0], conv2d_backward_input(dy, w_eff, p, in.shape()));
          break;
        }
        case LayerKind::kFpConv: {
          const auto& p = std::get<ConvParams>(l.params);
          const Tensor<Scalar>& w = lookup(g.parameters, l.name + ".weight");
          add_param(l.name + ".weight", conv2d_backward_weight(in, dy, p).values());
          accumulate(l.inputs[0], conv2d_backward_input(dy, w, p, in.shape()));
          break;
        }
        case LayerKind::kBatchNorm: {
          const BatchNormState<Scalar> s = bn_state(g, l);
          BatchNormGrads<Scalar> bg = training ? batchnorm_backward(in, dy, s) : batchnorm_backward_inference(in, dy, s);
          add_param(l.name + ".gamma", bg.gamma);
          add_param(l.name + ".beta", bg.beta);
          accumulate(l.inputs[0], std::move(bg.input));
          break;
        }
        case LayerKind::kSign:
          accumulate(l.inputs[0], ste_backward(in, dy, g.t_clip));
          break;
        case LayerKind::kMaxPool:
          accumulate(l.inputs[0], maxpool2d_backward(in, dy, std::get<PoolParams>(l.params)));
          break;
        case LayerKind::kGlobalAvgPool:
          accumulate(l.inputs[0], global_avgpool_backward(dy, in.shape()));
          break;
        case LayerKind::kChannelShuffle:
          accumulate(l.inputs[0], channel_unshuffle(dy, std::get<ShuffleParams>(l.params).groups));
          break;
        case LayerKind::kConcat: {
          Index offset = 0;
          for (int id : l.inputs) {
            Shape s = value(id).shape();
            GradTensor<Scalar> part(s);
            for (Index n = 0; n < s.n; ++n) part.image(n) = dy.channels(n, offset, s.c);
            offset += s.c;
            accumulate(id, std::move(part));
          }
          break;
        }
        case LayerKind::kSliceAdd: {
          const Shape as = value(l.inputs[1]).shape();
          GradTensor<Scalar> part(as);
          for (Index n = 0; n < as.n; ++n) part.image(n) = dy.channels(n, dy.shape().c - as.c, as.c);
          accumulate(l.inputs[0], std::move(dy));
          accumulate(l.inputs[1], std::move(part));
          break;
        }
        case LayerKind::kFullyConnected: {
          FullyConnectedGrads<Scalar> fg = fully_connected_backward(in, lookup(g.parameters, l.name + ".weight"), dy);
          add_param(l.name + ".weight", fg.weight.values());
          add_param(l.name + ".bias", fg.bias.values());
          accumulate(l.inputs[0], std::move(fg.input));
          break;
        }
      }
    } catch (const ContractViolation& e) {
      throw ContractViolation("layer '" + l.name + "': " + e.what());
    }
  }
  if (result.input.empty()) result.input = GradTensor<Scalar>(cache.input.shape());
  return result;
}

template <typename Scalar>
void copy_shared_tensors(const ModelGraph<Scalar>& from, ModelGraph<Scalar>& to) {
  for (auto& [name, t] : to.parameters)
    if (auto it = from.parameters.find(name); it != from.parameters.end() && it->second.shape() == t.shape()) t = it->second;
  for (auto& [name, t] : to.buffers)
    if (auto it = from.buffers.find(name); it != from.buffers.end() && it->second.shape() == t.shape()) t = it->second;
}

#define MELIUS_INSTANTIATE_GRAPH(S)                                                                        \
  template ModelGraph<S> instantiate<S>(LayerGraph, std::uint64_t);                                       \
  template ModelGraph<S> build_model<S>(const ArchConfig&, std::uint64_t);                                \
  template void validate<S>(const ModelGraph<S>&);                                                        \
  template Tensor<S> forward<S>(const ModelGraph<S>&, const Tensor<S>&);                                  \
  template Tensor<S> forward<S>(ModelGraph<S>&, const Tensor<S>&, const ForwardOptions&, ForwardCache<S>*); \
  template Gradients<S> backward<S>(const ModelGraph<S>&, const ForwardCache<S>&, const GradTensor<S>&);  \
  template void copy_shared_tensors<S>(const ModelGraph<S>&, ModelGraph<S>&);

MELIUS_INSTANTIATE_GRAPH(float)
MELIUS_INSTANTIATE_GRAPH(double)

}  // namespace melius

#include "clbd/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "clbd/rng.hpp"

namespace clbd {
namespace {

const DenseLayer& head_at(const MlpModel& model, std::size_t task_id) {
  if (task_id >= model.heads.size()) {
    throw DimensionError("unknown task head " + std::to_string(task_id) + " (model has " +
                         std::to_string(model.heads.size()) + ")");
  }
  return model.heads[task_id];
}

Tensor2 affine(const Tensor2& x, const DenseLayer& layer) {
  Tensor2 z = matmul_nt(x, layer.weights);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.bias[c];
  }
  return z;
}

void check_cache(const MlpModel& model, const ForwardCache& cache) {
  if (cache.inputs.size() != model.trunk.size() + 1 || cache.pre.size() != model.trunk.size()) {
    throw DimensionError("stale forward cache: layer count mismatch");
  }
  for (std::size_t l = 0; l < model.trunk.size(); ++l) {
    if (cache.inputs[l].cols() != model.trunk[l].in_dim() || cache.pre[l].cols() != model.trunk[l].out_dim()) {
      throw DimensionError("stale forward cache: shape mismatch at layer " + std::to_string(l));
    }
  }
}

// Multiplies an upstream gradient by the activation derivative and gate of layer l.
void apply_activation_grad(const MlpModel& model, const ForwardCache& cache, std::size_t l, Tensor2& dz) {
  const auto& pre = cache.pre[l];
  const TaskGate* gate = model.gate_for(cache.task_id);
  const UnitMask* mask = gate ? &gate->layers[l] : nullptr;
  const bool relu = model.trunk[l].activation == Activation::relu;
  for (std::size_t r = 0; r < dz.rows(); ++r) {
    auto d = dz.row(r);
    auto z = pre.row(r);
    for (std::size_t c = 0; c < d.size(); ++c) {
      if ((relu && z[c] <= 0.0) || (mask && !(*mask)[c])) d[c] = 0.0;
    }
  }
}

LayerGrad zero_grad(const DenseLayer& layer) {
  return {Tensor2(layer.out_dim(), layer.in_dim()), std::vector<double>(layer.out_dim(), 0.0)};
}

Tensor2 squared(const Tensor2& t) {
  Tensor2 out = t;
  for (double& v : out.values()) v *= v;
  return out;
}

// Shared reverse pass. `dfeatures` is the gradient at the head input.
// mode 0: ordinary gradients, 1: per-row squared gradients, 2: input gradient only.
Tensor2 trunk_backward(const MlpModel& model, const ForwardCache& cache, Tensor2 dh, Gradients* grads, int mode) {
  for (std::size_t li = model.trunk.size(); li-- > 0;) {
    apply_activation_grad(model, cache, li, dh);
    if (mode == 0) {
      grads->trunk[li].weights = matmul_tn(dh, cache.inputs[li]);
      grads->trunk[li].bias = column_sums(dh);
    } else if (mode == 1) {
      grads->trunk[li].weights = matmul_tn(squared(dh), squared(cache.inputs[li]));
      grads->trunk[li].bias = column_sums(squared(dh));
    }
    if (li > 0 || mode == 2) dh = matmul(dh, model.trunk[li].weights);
  }
  return dh;
}

}  // namespace

const TaskGate* MlpModel::gate_for(std::size_t task_id) const {
  if (task_id >= gates.size() || gates[task_id].layers.empty()) return nullptr;
  return &gates[task_id];
}

DenseLayer make_dense(std::size_t in, std::size_t out, Activation act, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  DenseLayer layer{Tensor2(out, in), std::vector<double>(out), act};
  for (double& w : layer.weights.values()) w = dist(rng);
  for (double& b : layer.bias) b = dist(rng);
  return layer;
}

MlpModel make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden, std::uint64_t seed) {
  MlpModel model;
  model.input_dim = input_dim;
  std::size_t in = input_dim;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    model.trunk.push_back(make_dense(in, hidden[l], Activation::relu, derive_seed(seed, {1, l})));
    in = hidden[l];
  }
  return model;
}

std::size_t add_head(MlpModel& model, std::size_t classes, std::uint64_t seed) {
  const std::size_t id = model.heads.size();
  model.heads.push_back(make_dense(model.feature_dim(), classes, Activation::identity, derive_seed(seed, {2, id})));
  return id;
}

ForwardResult forward(const MlpModel& model, const Tensor2& x, std::size_t task_id) {
  if (x.cols() != model.input_dim) {
    throw DimensionError("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                         std::to_string(model.input_dim));
  }
  const DenseLayer& head = head_at(model, task_id);
  const TaskGate* gate = model.gate_for(task_id);
  ForwardResult out;
  out.cache.task_id = task_id;
  out.cache.inputs.reserve(model.trunk.size() + 1);
  out.cache.inputs.push_back(x);
  for (std::size_t l = 0; l < model.trunk.size(); ++l) {
    const auto& layer = model.trunk[l];
    Tensor2 z = affine(out.cache.inputs.back(), layer);
    Tensor2 a = z;
    const UnitMask* mask = gate ? &gate->layers[l] : nullptr;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      auto row = a.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (layer.activation == Activation::relu && row[c] < 0.0) row[c] = 0.0;
        if (mask && !(*mask)[c]) row[c] = 0.0;
      }
    }
    out.cache.pre.push_back(std::move(z));
    out.cache.inputs.push_back(std::move(a));
  }
  out.logits = affine(out.cache.inputs.back(), head);
  return out;
}

Tensor2 head_logits(const MlpModel& model, const ForwardCache& cache, std::size_t task_id) {
  check_cache(model, cache);
  return affine(cache.inputs.back(), head_at(model, task_id));
}

Gradients backward(const MlpModel& model, const ForwardCache& cache, const Tensor2& dlogits, std::size_t task_id) {
  const HeadGrad hg{task_id, &dlogits};
  return backward(model, cache, std::span<const HeadGrad>(&hg, 1));
}

Gradients backward(const MlpModel& model, const ForwardCache& cache, std::span<const HeadGrad> head_grads) {
  check_cache(model, cache);
  Gradients grads = zeros_like(model);
  const Tensor2& features = cache.inputs.back();
  Tensor2 dh(features.rows(), features.cols());
  for (const auto& hg : head_grads) {
    const DenseLayer& head = head_at(model, hg.task_id);
    const Tensor2& g = *hg.dlogits;
    if (g.rows() != features.rows() || g.cols() != head.out_dim()) {
      throw DimensionError("backward: dlogits shape does not match head " + std::to_string(hg.task_id));
    }
    auto& hgrad = grads.heads[hg.task_id];
    Tensor2 dw = matmul_tn(g, features);
    auto sums = column_sums(g);
    for (std::size_t i = 0; i < dw.size(); ++i) hgrad.weights.values()[i] += dw.values()[i];
    for (std::size_t i = 0; i < sums.size(); ++i) hgrad.bias[i] += sums[i];
    Tensor2 contrib = matmul(g, head.weights);
    for (std::size_t i = 0; i < dh.size(); ++i) dh.values()[i] += contrib.values()[i];
  }
  if (!model.trunk.empty()) trunk_backward(model, cache, std::move(dh), &grads, 0);
  return grads;
}

Gradients backward_squared(const MlpModel& model, const ForwardCache& cache, const Tensor2& dlogits,
                           std::size_t task_id) {
  check_cache(model, cache);
  const DenseLayer& head = head_at(model, task_id);
  if (dlogits.rows() != cache.inputs.back().rows() || dlogits.cols() != head.out_dim()) {
    throw DimensionError("backward_squared: dlogits shape mismatch");
  }
  Gradients grads = zeros_like(model);
  grads.heads[task_id].weights = matmul_tn(squared(dlogits), squared(cache.inputs.back()));
  grads.heads[task_id].bias = column_sums(squared(dlogits));
  if (!model.trunk.empty()) trunk_backward(model, cache, matmul(dlogits, head.weights), &grads, 1);
  return grads;
}

Tensor2 input_gradient(const MlpModel& model, const ForwardCache& cache, const Tensor2& dlogits,
                       std::size_t task_id) {
  check_cache(model, cache);
  const DenseLayer& head = head_at(model, task_id);
  Tensor2 dh = matmul(dlogits, head.weights);
  if (model.trunk.empty()) return dh;
  return trunk_backward(model, cache, std::move(dh), nullptr, 2);
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

std::vector<std::size_t> predict(const MlpModel& model, const Tensor2& x, std::size_t task_id) {
  const auto logits = forward(model, x, task_id).logits;
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = argmax(logits.row(r));
  return out;
}

Gradients zeros_like(const MlpModel& model) {
  Gradients g;
  for (const auto& l : model.trunk) g.trunk.push_back(zero_grad(l));
  for (const auto& h : model.heads) g.heads.push_back(zero_grad(h));
  return g;
}

void add_scaled(Gradients& into, const Gradients& other, double factor) {
  auto dst = gradient_blocks(into);
  auto src = gradient_blocks(other);
  if (dst.size() != src.size()) throw DimensionError("add_scaled: block count mismatch");
  for (std::size_t b = 0; b < dst.size(); ++b) {
    if (dst[b].size() != src[b].size()) throw DimensionError("add_scaled: block shape mismatch");
    for (std::size_t i = 0; i < dst[b].size(); ++i) dst[b][i] += factor * src[b][i];
  }
}

void scale(Gradients& g, double factor) {
  for (auto block : gradient_blocks(g)) {
    for (double& v : block) v *= factor;
  }
}

std::size_t parameter_count(const MlpModel& model) {
  std::size_t n = 0;
  for (const auto& l : model.trunk) n += l.weights.size() + l.bias.size();
  for (const auto& h : model.heads) n += h.weights.size() + h.bias.size();
  return n;
}

std::vector<std::span<double>> parameter_blocks(MlpModel& model) {
  std::vector<std::span<double>> out;
  for (auto* group : {&model.trunk, &model.heads}) {
    for (auto& l : *group) {
      out.emplace_back(l.weights.values());
      out.emplace_back(l.bias);
    }
  }
  return out;
}

std::vector<std::span<const double>> parameter_blocks(const MlpModel& model) {
  std::vector<std::span<const double>> out;
  for (const auto* group : {&model.trunk, &model.heads}) {
    for (const auto& l : *group) {
      out.emplace_back(l.weights.values());
      out.emplace_back(l.bias);
    }
  }
  return out;
}

std::vector<std::span<double>> gradient_blocks(Gradients& grads) {
  std::vector<std::span<double>> out;
  for (auto* group : {&grads.trunk, &grads.heads}) {
    for (auto& l : *group) {
      out.emplace_back(l.weights.values());
      out.emplace_back(l.bias);
    }
  }
  return out;
}

std::vector<std::span<const double>> gradient_blocks(const Gradients& grads) {
  std::vector<std::span<const double>> out;
  for (const auto* group : {&grads.trunk, &grads.heads}) {
    for (const auto& l : *group) {
      out.emplace_back(l.weights.values());
      out.emplace_back(l.bias);
    }
  }
  return out;
}

namespace {

template <typename Blocks>
std::vector<double> concat(const Blocks& blocks) {
  std::vector<double> out;
  for (const auto& b : blocks) out.insert(out.end(), b.begin(), b.end());
  return out;
}

template <typename Blocks>
void scatter(Blocks blocks, std::span<const double> flat) {
  std::size_t total = 0;
  for (const auto& b : blocks) total += b.size();
  if (total != flat.size()) {
    throw DimensionError("flat vector has " + std::to_string(flat.size()) + " entries, expected " +
                         std::to_string(total));
  }
  std::size_t off = 0;
  for (auto& b : blocks) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), b.size(), b.begin());
    off += b.size();
  }
}

}  // namespace

std::vector<double> flatten(const MlpModel& model) { return concat(parameter_blocks(model)); }
std::vector<double> flatten(const Gradients& grads) { return concat(gradient_blocks(grads)); }
void assign_flat(MlpModel& model, std::span<const double> flat) { scatter(parameter_blocks(model), flat); }
void assign_flat(Gradients& grads, std::span<const double> flat) { scatter(gradient_blocks(grads), flat); }

bool all_finite(const MlpModel& model) {
  for (const auto& block : parameter_blocks(model)) {
    for (double v : block) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

std::vector<double> neuron_parameters(const MlpModel& model, NeuronId id) {
  if (id.layer >= model.trunk.size() || id.unit >= model.trunk[id.layer].out_dim()) {
    throw DimensionError("unknown neuron (" + std::to_string(id.layer) + ", " + std::to_string(id.unit) + ")");
  }
  const auto& layer = model.trunk[id.layer];
  auto row = layer.weights.row(id.unit);
  std::vector<double> out(row.begin(), row.end());
  out.push_back(layer.bias[id.unit]);
  return out;
}

std::size_t hidden_unit_count(const MlpModel& model) {
  std::size_t n = 0;
  for (const auto& l : model.trunk) n += l.out_dim();
  return n;
}

}  // namespace clbd

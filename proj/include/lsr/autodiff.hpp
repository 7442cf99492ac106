#pragma once

// Minimal tape-based reverse-mode differentiation over NHWC tensors.
//
// A Graph records nodes in creation order, so reverse iteration is a valid
// topological order for backward. Parameters live outside the graph; a
// parameter node copies the current value in and, on backward, accumulates
// its gradient into Parameter::grad.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lsr/rng.hpp"
#include "lsr/tensor.hpp"

namespace lsr::ad {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Named, insertion-ordered parameter collection with stable addresses.
template <class T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init);
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<Parameter<T>>& items() { return params_; }
  const std::deque<Parameter<T>>& items() const { return params_; }

  void zero_grad();
  std::size_t scalar_count() const;

  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
class Graph;

template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void()> backward;
  };

  /// `training` enables dropout; `rng` supplies dropout masks and may be null
  /// when training is false. With `record` false no backward state is kept.
  explicit Graph(bool training = false, Rng* rng = nullptr, bool record = true)
      : training_(training), record_(record), rng_(rng) {}

  static Graph inference() { return Graph(false, nullptr, false); }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> param(Parameter<T>& p);

  /// Append a node. `backward` is invoked once during backward() with this
  /// node's gradient already populated; it must only accumulate into inputs.
  Var<T> push(Tensor<T> value, bool requires_grad, std::function<void()> backward = {});

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  bool requires_grad(Var<T> v) const { return node(v.id).requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first use.
  Tensor<T>& grad(int id);

  /// Seed d(loss)/d(loss) = 1 and run backward; loss must be a scalar.
  void backward(Var<T> loss);

  bool training() const { return training_; }
  Rng* rng() const { return rng_; }
  std::size_t size() const { return nodes_.size(); }

  /// When set, piecewise-linear ops (relu, l1_mean) append one byte per
  /// element telling which side of their kink the input lies on. Gradient
  /// checks use it to tell whether a perturbation crossed a kink.
  void trace_kinks(std::vector<std::uint8_t>* out) { kinks_ = out; }
  std::vector<std::uint8_t>* kink_trace() const { return kinks_; }

 private:
  std::vector<std::uint8_t>* kinks_ = nullptr;
  std::deque<Node> nodes_;
  bool training_;
  bool record_;
  Rng* rng_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return graph->node(id).value;
}

struct ConvSpec {
  int stride = 1;
  int pad = 0;
};

// --- Elementwise / structural -------------------------------------------
template <class T> Var<T> add(Var<T> a, Var<T> b);
template <class T> Var<T> scale(Var<T> x, T s);
template <class T> Var<T> relu(Var<T> x);
template <class T> Var<T> dropout(Var<T> x, double p);
template <class T> Var<T> reshape(Var<T> x, Shape shape);

// --- Dense / convolution (NHWC) -----------------------------------------
/// y[..., o] = sum_i x[..., i] w[o, i] + b[o]. Doubles as a 1x1 convolution.
template <class T> Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b);
/// x [N,H,W,Ci], w [Co,kh,kw,Ci], b [Co]. `mask` (same shape as w) zeros
/// selected taps in both the forward pass and the weight gradient.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, ConvSpec spec, const Tensor<T>* mask = nullptr);
/// x [N,H,W,Ci], w [Ci,kh,kw,Co], b [Co]; output side (H-1)*stride - 2*pad + k.
template <class T> Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> b, ConvSpec spec);

// --- Sequence / autoregressive helpers ------------------------------------
/// Gather rows of `table` [K,C] for each index; output shape `out_shape` + [C].
template <class T> Var<T> embedding(Var<T> table, const std::vector<int>& indices, Shape out_shape);
/// Shift [N,H,W,C] by one step in raster order; position 0 becomes zero.
template <class T> Var<T> shift_raster(Var<T> x);
/// x[n,...,c] + ctx[n] * a[c] + b[c].
template <class T> Var<T> add_conditioning(Var<T> x, const std::vector<T>& ctx, Var<T> a, Var<T> b);
/// Single-head attention over the sequence axis of [N,L,d] inputs; query i
/// attends only to keys j < i (row 0 attends to nothing and outputs zero).
/// When `weights_out` is given it receives the [N,L,L] attention weights.
template <class T>
Var<T> strict_causal_attention(Var<T> q, Var<T> k, Var<T> v, Tensor<T>* weights_out = nullptr);

// --- Losses ----------------------------------------------------------------
inline constexpr double kProbabilityFloor = 1e-12;
/// Per-position -log softmax(logits)[target], probabilities floored at
/// kProbabilityFloor. logits [..., K] -> [...].
template <class T> Var<T> categorical_nll(Var<T> logits, const std::vector<int>& targets);
template <class T> Var<T> mean(Var<T> x);
template <class T> Var<T> sum(Var<T> x);
/// mean |x - target| with a constant target.
template <class T> Var<T> l1_mean(Var<T> x, const Tensor<T>& target);
/// KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis, averaged
/// over the leading (batch) axis.
template <class T> Var<T> gaussian_kl(Var<T> mu, Var<T> logvar);
/// mu + exp(logvar / 2) * eps with constant noise eps.
template <class T> Var<T> reparameterize(Var<T> mu, Var<T> logvar, const Tensor<T>& eps);

// --- Initialization --------------------------------------------------------
/// Uniform(-bound, bound) with bound = gain * sqrt(3 / fan_in).
template <class T> Tensor<T> init_uniform(Shape shape, int fan_in, Rng& rng, double gain = 1.0);

}  // namespace lsr::ad

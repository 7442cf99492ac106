#pragma once

// Layer-construction helpers shared by the codec, the VAE baseline and the
// prior. Parameters are registered under dotted names ("<layer>.w",
// "<layer>.b") so checkpoints are self-describing.

#include <map>
#include <string>

#include "lsr/autodiff.hpp"

namespace lsr::detail {

/// Binds parameters of a set into one graph, one node per parameter.
template <class T>
class Binder {
 public:
  Binder(ad::Graph<T>& g, ad::ParameterSet<T>& params) : g_(g), params_(params) {}

  ad::Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    ad::Var<T> v = g_.param(params_.get(name));
    bound_.emplace(name, v);
    return v;
  }

  ad::Graph<T>& graph() { return g_; }

 private:
  ad::Graph<T>& g_;
  ad::ParameterSet<T>& params_;
  std::map<std::string, ad::Var<T>> bound_;
};

template <class T>
void add_conv(ad::ParameterSet<T>& ps, const std::string& name, int co, int k, int ci, Rng& rng,
              double gain = 1.4142135623730951) {
  ps.add(name + ".w", ad::init_uniform<T>(Shape{co, k, k, ci}, k * k * ci, rng, gain));
  ps.add(name + ".b", Tensor<T>(Shape{co}));
}

template <class T>
void add_conv_transpose(ad::ParameterSet<T>& ps, const std::string& name, int co, int k, int ci, Rng& rng) {
  // Each output pixel of a stride-2, k=4 transposed conv receives 2x2 taps.
  ps.add(name + ".w", ad::init_uniform<T>(Shape{ci, k, k, co}, ci * (k / 2) * (k / 2), rng, 1.4142135623730951));
  ps.add(name + ".b", Tensor<T>(Shape{co}));
}

template <class T>
void add_dense(ad::ParameterSet<T>& ps, const std::string& name, int fo, int fi, Rng& rng, double gain = 1.0) {
  ps.add(name + ".w", ad::init_uniform<T>(Shape{fo, fi}, fi, rng, gain));
  ps.add(name + ".b", Tensor<T>(Shape{fo}));
}

template <class T>
ad::Var<T> conv(Binder<T>& p, const std::string& name, ad::Var<T> x, ad::ConvSpec spec,
                const Tensor<T>* mask = nullptr) {
  return ad::conv2d(x, p(name + ".w"), p(name + ".b"), spec, mask);
}

template <class T>
ad::Var<T> dense(Binder<T>& p, const std::string& name, ad::Var<T> x) {
  return ad::linear(x, p(name + ".w"), std::optional<ad::Var<T>>(p(name + ".b")));
}

/// Residual sub-block parameters: 3x3 conv then 1x1 projection.
template <class T>
void add_residual(ad::ParameterSet<T>& ps, const std::string& name, int c, Rng& rng) {
  add_conv(ps, name + ".conv3", c, 3, c, rng);
  // Small output gain keeps a deep residual stack near identity at init.
  add_dense(ps, name + ".conv1", c, c, rng, 0.3);
}

/// x + conv1x1(dropout(relu(conv3x3(relu(x))))). `mask` applies to the 3x3.
template <class T>
ad::Var<T> residual(Binder<T>& p, const std::string& name, ad::Var<T> x, double drop,
                    const Tensor<T>* mask = nullptr) {
  ad::Var<T> h = conv(p, name + ".conv3", ad::relu(x), ad::ConvSpec{1, 1}, mask);
  h = ad::dropout(ad::relu(h), drop);
  h = dense(p, name + ".conv1", h);
  return ad::add(x, h);
}

}  // namespace lsr::detail

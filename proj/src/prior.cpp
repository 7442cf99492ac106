#include "lsr/prior.hpp"

#include <algorithm>
#include <cmath>

#include "layers.hpp"

namespace lsr {

using detail::Binder;

void PriorConfig::validate() const {
  if (num_codes < 2) throw ValueError("prior.num_codes must be >= 2");
  if (channels < 1 || blocks < 1 || residual_blocks < 0) throw ValueError("invalid prior architecture");
  if (dropout < 0.0 || dropout >= 1.0) throw ValueError("prior.dropout must be in [0, 1)");
}

void ConditioningContext::validate() const {
  if (!(slice_position >= -0.5 && slice_position <= 0.5)) {
    throw ValueError("slice_position " + std::to_string(slice_position) + " outside [-0.5, 0.5]");
  }
}

namespace {

std::string blk(int b, const std::string& rest) { return "block" + std::to_string(b) + "." + rest; }

template <class T>
Tensor<T> make_conv_mask(int c) {
  Tensor<T> m(Shape{c, 3, 3, c});
  for (int o = 0; o < c; ++o) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        // The input is already shifted by one scan step, so the centre tap
        // carries the previous token and is allowed.
        const bool allowed = ky < 1 || (ky == 1 && kx <= 1);
        for (int i = 0; i < c; ++i) m[((static_cast<std::size_t>(o) * 3 + ky) * 3 + kx) * c + i] = allowed ? T(1) : T(0);
      }
    }
  }
  return m;
}

template <class T>
void add_parameters(ad::ParameterSet<T>& ps, const PriorConfig& cfg, Rng& rng) {
  const int c = cfg.channels;
  ps.add("embed", ad::init_uniform<T>(Shape{cfg.num_codes, c}, 1, rng, 1.0));
  for (int b = 0; b < cfg.blocks; ++b) {
    ps.add(blk(b, "cond.scale"), ad::init_uniform<T>(Shape{c}, 1, rng, 1.0));
    ps.add(blk(b, "cond.shift"), Tensor<T>(Shape{c}));
    for (int r = 0; r < cfg.residual_blocks; ++r) detail::add_residual(ps, blk(b, "res" + std::to_string(r)), c, rng);
    detail::add_dense(ps, blk(b, "attn.q"), c, c, rng);
    detail::add_dense(ps, blk(b, "attn.k"), c, c, rng);
    detail::add_dense(ps, blk(b, "attn.v"), c, c, rng);
    detail::add_dense(ps, blk(b, "attn.out"), c, c, rng, 0.3);
  }
  detail::add_dense(ps, "head", cfg.num_codes, c, rng);
}

void softmax_row(const double* z, int k, double temperature, std::vector<double>& p) {
  p.resize(static_cast<std::size_t>(k));
  double mx = z[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, z[j]);
  double total = 0.0;
  for (int j = 0; j < k; ++j) {
    p[j] = std::exp((z[j] - mx) / temperature);
    total += p[j];
  }
  for (int j = 0; j < k; ++j) p[j] /= total;
}

}  // namespace

template <class T>
int sample_token(const T* logits, int k, double temperature, Rng& rng) {
  if (temperature < 0.0 || !std::isfinite(temperature)) throw ValueError("temperature must be > 0 (0 = greedy)");
  if (temperature == 0.0) {
    int best = 0;
    for (int j = 1; j < k; ++j) {
      if (logits[j] > logits[best]) best = j;
    }
    return best;
  }
  std::vector<double> z(logits, logits + k);
  std::vector<double> p;
  softmax_row(z.data(), k, temperature, p);
  return rng.categorical(std::span<const double>(p));
}

template <class T>
ArPrior<T>::ArPrior(const PriorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed, "prior.init");
  add_parameters(params_, cfg_, rng);
  conv_mask_ = make_conv_mask<T>(cfg_.channels);
}

template <class T>
ArPrior<T>::ArPrior(const PriorConfig& cfg, ad::ParameterSet<T> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  ArPrior<T> reference(cfg_, 0);
  for (const auto& p : reference.params().items()) {
    if (!params_.contains(p.name)) throw FormatError("missing prior parameter '" + p.name + "'");
    if (params_.get(p.name).value.shape() != p.value.shape()) throw FormatError("prior parameter '" + p.name + "' has wrong shape");
  }
  if (params_.items().size() != reference.params().items().size()) throw FormatError("unexpected extra prior parameters");
  conv_mask_ = make_conv_mask<T>(cfg_.channels);
}

template <class T>
void ArPrior<T>::check_grid(const LatentGrid& grids) const {
  for (std::int32_t v : grids.values()) {
    if (v < 0 || v >= cfg_.num_codes) {
      throw IndexError("latent index " + std::to_string(v) + " outside [0, " + std::to_string(cfg_.num_codes) + ")");
    }
  }
}

template <class T>
typename ArPrior<T>::Forward ArPrior<T>::forward(ad::Graph<T>& g, const LatentGrid& grids,
                                                 const std::vector<double>& ctx,
                                                 std::vector<Tensor<T>>* attention_out) {
  if (grids.rank() != 3) throw ShapeError("prior expects grids [N,H,W], got " + shape_str(grids.shape()));
  const int n = grids.dim(0);
  const int h = grids.dim(1);
  const int w = grids.dim(2);
  const int c = cfg_.channels;
  if (ctx.size() != static_cast<std::size_t>(n)) throw ShapeError("prior: one conditioning value per grid");
  for (double v : ctx) ConditioningContext{v}.validate();
  check_grid(grids);

  Binder<T> p(g, params_);
  std::vector<int> tokens(grids.values().begin(), grids.values().end());
  std::vector<T> cond(ctx.begin(), ctx.end());
  ad::Var<T> x = ad::shift_raster(ad::embedding(p("embed"), tokens, Shape{n, h, w}));
  for (int b = 0; b < cfg_.blocks; ++b) {
    x = ad::add_conditioning(x, cond, p(blk(b, "cond.scale")), p(blk(b, "cond.shift")));
    for (int r = 0; r < cfg_.residual_blocks; ++r) {
      x = detail::residual(p, blk(b, "res" + std::to_string(r)), x, cfg_.dropout, &conv_mask_);
    }
    ad::Var<T> a = ad::reshape(ad::relu(x), Shape{n, h * w, c});
    Tensor<T> weights;
    ad::Var<T> att = ad::strict_causal_attention(detail::dense(p, blk(b, "attn.q"), a),
                                                 detail::dense(p, blk(b, "attn.k"), a),
                                                 detail::dense(p, blk(b, "attn.v"), a),
                                                 attention_out ? &weights : nullptr);
    if (attention_out) attention_out->push_back(std::move(weights));
    att = ad::dropout(att, cfg_.dropout);
    x = ad::add(x, ad::reshape(detail::dense(p, blk(b, "attn.out"), att), Shape{n, h, w, c}));
  }
  Forward f;
  f.logits = detail::dense(p, "head", ad::relu(x));
  f.nll = ad::categorical_nll(f.logits, tokens);
  f.loss = ad::mean(f.nll);
  return f;
}

template <class T>
Tensor<T> ArPrior<T>::logits(const LatentGrid& grids, const std::vector<double>& ctx) const {
  auto g = ad::Graph<T>::inference();
  return const_cast<ArPrior<T>*>(this)->forward(g, grids, ctx).logits.value();
}

template <class T>
Tensor<T> ArPrior<T>::logits(const LatentGrid& grid, ConditioningContext ctx) const {
  if (grid.rank() != 2) throw ShapeError("expected a single grid [H,W]");
  Tensor<T> out = logits(grid.reshaped(Shape{1, grid.dim(0), grid.dim(1)}), std::vector<double>{ctx.slice_position});
  return out.reshaped(Shape{grid.dim(0), grid.dim(1), cfg_.num_codes});
}

template <class T>
Tensor<T> ArPrior<T>::nll_map(const LatentGrid& grids, const std::vector<double>& ctx) const {
  auto g = ad::Graph<T>::inference();
  return const_cast<ArPrior<T>*>(this)->forward(g, grids, ctx).nll.value();
}

template <class T>
Tensor<T> ArPrior<T>::nll_map(const LatentGrid& grid, ConditioningContext ctx) const {
  if (grid.rank() != 2) throw ShapeError("expected a single grid [H,W]");
  Tensor<T> out = nll_map(grid.reshaped(Shape{1, grid.dim(0), grid.dim(1)}), std::vector<double>{ctx.slice_position});
  return out.reshaped(grid.shape());
}

template <class T>
T ArPrior<T>::loss(const LatentGrid& grid, ConditioningContext ctx) const {
  Tensor<T> nll = nll_map(grid, ctx);
  T total = T(0);
  for (T v : nll.values()) total += v;
  const T out = total / static_cast<T>(nll.size());
  if (!std::isfinite(static_cast<double>(out))) throw NonFiniteError("prior loss is not finite");
  return out;
}

template <class T>
LatentGrid ArPrior<T>::sample(int height, int width, ConditioningContext ctx, Rng& rng, double temperature) const {
  if (height <= 0 || width <= 0) throw ShapeError("sample: grid dims must be positive");
  BoolGrid all(static_cast<std::size_t>(height) * width, true);
  return restore(LatentGrid(Shape{height, width}, std::int32_t{0}), all, ctx, rng, temperature);
}

template <class T>
LatentGrid ArPrior<T>::restore(const LatentGrid& grid, const BoolGrid& mask, ConditioningContext ctx, Rng& rng,
                               double temperature) const {
  if (grid.rank() != 2) throw ShapeError("restore expects a single grid [H,W]");
  std::vector<Rng> one{rng};
  auto out = restore_many(grid, mask, ctx, one, temperature);
  rng = one.front();
  return out.front();
}

template <class T>
std::vector<LatentGrid> ArPrior<T>::restore_many(const LatentGrid& grid, const BoolGrid& mask,
                                                 ConditioningContext ctx, std::vector<Rng>& rngs,
                                                 double temperature) const {
  if (grid.rank() != 2) throw ShapeError("restore expects a single grid [H,W]");
  if (mask.size() != grid.size()) throw ShapeError("restoration mask shape does not match the grid");
  ctx.validate();
  check_grid(grid);
  if (temperature < 0.0) throw ValueError("temperature must be > 0 (0 = greedy)");
  const int h = grid.dim(0);
  const int w = grid.dim(1);
  const int n = static_cast<int>(rngs.size());
  const int k = cfg_.num_codes;
  const std::size_t len = grid.size();
  LatentGrid batch(Shape{n, h, w});
  for (int s = 0; s < n; ++s) std::copy(grid.values().begin(), grid.values().end(), batch.data() + s * len);
  const std::vector<double> cond(static_cast<std::size_t>(n), ctx.slice_position);
  for (std::size_t i = 0; i < len; ++i) {
    if (!mask[i]) continue;
    // Logits at i depend only on tokens before i, so one evaluation of the
    // current batch gives the conditional for every draw.
    Tensor<T> z = logits(batch, cond);
    for (int s = 0; s < n; ++s) {
      batch[s * len + i] = sample_token(z.data() + (s * len + i) * k, k, temperature, rngs[s]);
    }
  }
  std::vector<LatentGrid> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    std::vector<std::int32_t> v(batch.data() + s * len, batch.data() + (s + 1) * len);
    out.emplace_back(grid.shape(), std::move(v));
  }
  return out;
}

template class ArPrior<float>;
template class ArPrior<double>;
template int sample_token(const float*, int, double, Rng&);
template int sample_token(const double*, int, double, Rng&);

}  // namespace lsr

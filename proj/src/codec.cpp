#include "lsr/codec.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include "layers.hpp"

namespace lsr {

using detail::Binder;

void CodecConfig::validate() const {
  if (blocks < 1) throw ValueError("codec.blocks must be >= 1");
  if (residual_blocks < 0) throw ValueError("codec.residual_blocks must be >= 0");
  if (channels < 1 || embedding_dim < 1) throw ValueError("codec channel counts must be >= 1");
  if (num_codes < 2) throw ValueError("codec.num_codes must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) throw ValueError("codec.dropout must be in [0, 1)");
  if (beta < 0.0) throw ValueError("codec.beta must be >= 0");
  if (image_side <= 0 || image_side % downsample_factor() != 0) {
    throw DimensionError("image side " + std::to_string(image_side) + " is not divisible by 2^blocks = " +
                         std::to_string(downsample_factor()));
  }
}

void VaeConfig::validate() const {
  backbone.validate();
  if (latent_dim < 1) throw ValueError("vae latent_dim must be >= 1");
}

namespace detail {

template <class T>
Tensor<T> as_image_batch(const Tensor<T>& images, const CodecConfig& cfg) {
  Shape s = images.shape();
  if (s.size() == 2) s.insert(s.begin(), 1);
  if (s.size() != 3) throw ShapeError("expected an image [S,S] or batch [N,S,S], got " + shape_str(images.shape()));
  const int f = cfg.downsample_factor();
  if (s[1] % f != 0 || s[2] % f != 0 || s[1] == 0 || s[2] == 0) {
    throw DimensionError("image " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                         " is not divisible by the downsampling factor " + std::to_string(f));
  }
  if (!all_finite(images)) throw NonFiniteError("image contains non-finite values");
  s.push_back(1);
  return images.reshaped(s);
}

template Tensor<float> as_image_batch(const Tensor<float>&, const CodecConfig&);
template Tensor<double> as_image_batch(const Tensor<double>&, const CodecConfig&);

}  // namespace detail

namespace {

std::string idx(const std::string& base, int b) { return base + std::to_string(b); }
std::string idx(const std::string& base, int b, int r) {
  return base + std::to_string(b) + "." + std::to_string(r);
}

template <class T>
void add_backbone(ad::ParameterSet<T>& ps, const CodecConfig& cfg, Rng& rng) {
  const int c = cfg.channels;
  const int d = cfg.embedding_dim;
  detail::add_conv(ps, "enc.stem", c, 3, 1, rng);
  for (int b = 0; b < cfg.blocks; ++b) {
    detail::add_conv(ps, idx("enc.down", b), c, 4, c, rng);
    for (int r = 0; r < cfg.residual_blocks; ++r) detail::add_residual(ps, idx("enc.res", b, r), c, rng);
  }
  // Low gain so initial encoder outputs sit on the scale of the codebook.
  detail::add_dense(ps, "enc.out", d, c, rng, 0.1);
  detail::add_conv(ps, "dec.in", c, 3, d, rng);
  for (int b = 0; b < cfg.blocks; ++b) {
    for (int r = 0; r < cfg.residual_blocks; ++r) detail::add_residual(ps, idx("dec.res", b, r), c, rng);
    detail::add_conv_transpose(ps, idx("dec.up", b), c, 4, c, rng);
  }
  detail::add_conv(ps, "dec.out", 1, 3, c, rng, 1.0);
}

template <class T>
ad::Var<T> encoder(Binder<T>& p, const CodecConfig& cfg, ad::Var<T> x) {
  ad::Var<T> h = detail::conv(p, "enc.stem", x, ad::ConvSpec{1, 1});
  for (int b = 0; b < cfg.blocks; ++b) {
    h = detail::conv(p, idx("enc.down", b), ad::relu(h), ad::ConvSpec{2, 1});
    for (int r = 0; r < cfg.residual_blocks; ++r) h = detail::residual(p, idx("enc.res", b, r), h, cfg.dropout);
  }
  return detail::dense(p, "enc.out", ad::relu(h));
}

template <class T>
ad::Var<T> decoder(Binder<T>& p, const CodecConfig& cfg, ad::Var<T> z) {
  ad::Var<T> h = detail::conv(p, "dec.in", z, ad::ConvSpec{1, 1});
  for (int b = 0; b < cfg.blocks; ++b) {
    for (int r = 0; r < cfg.residual_blocks; ++r) h = detail::residual(p, idx("dec.res", b, r), h, cfg.dropout);
    const std::string up = idx("dec.up", b);
    h = ad::conv_transpose2d(ad::relu(h), p(up + ".w"), p(up + ".b"), ad::ConvSpec{2, 1});
  }
  return detail::conv(p, "dec.out", ad::relu(h), ad::ConvSpec{1, 1});
}

// Drops the batch axis again when the caller passed a single item.
template <class T>
Tensor<T> unbatch_if(const Tensor<T>& t, bool single) {
  if (!single) return t;
  Shape s(t.shape().begin() + 1, t.shape().end());
  return t.reshaped(s);
}

template <class T>
void check_param_shapes(const ad::ParameterSet<T>& reference, const ad::ParameterSet<T>& given) {
  for (const auto& p : reference.items()) {
    if (!given.contains(p.name)) throw FormatError("missing parameter '" + p.name + "'");
    if (given.get(p.name).value.shape() != p.value.shape()) {
      throw FormatError("parameter '" + p.name + "' has shape " + shape_str(given.get(p.name).value.shape()) +
                        ", expected " + shape_str(p.value.shape()));
    }
  }
  if (given.items().size() != reference.items().size()) throw FormatError("unexpected extra parameters");
}

}  // namespace

// ---------------------------------------------------------------------------
// Quantization

template <class T>
QuantizationResult<T> quantize(const Tensor<T>& features, const Tensor<T>& codebook) {
  if (codebook.rank() != 2) throw ShapeError("codebook must be [K, D]");
  const int k = codebook.dim(0);
  const int d = codebook.dim(1);
  if (features.rank() < 1 || features.dim(-1) != d) {
    throw DimensionError("feature depth " + std::to_string(features.rank() ? features.dim(-1) : 0) +
                         " does not match codebook dimension " + std::to_string(d));
  }
  Shape lead(features.shape().begin(), features.shape().end() - 1);
  const std::size_t positions = shape_size(lead);
  QuantizationResult<T> out{Tensor<std::int32_t>(lead), Tensor<T>(features.shape()), Tensor<T>(lead)};
  for (std::size_t p = 0; p < positions; ++p) {
    const T* f = features.data() + p * d;
    int best = 0;
    T best_dist = T(0);
    for (int j = 0; j < k; ++j) {
      const T* e = codebook.data() + static_cast<std::size_t>(j) * d;
      T dist = T(0);
      for (int i = 0; i < d; ++i) {
        const T diff = f[i] - e[i];
        dist += diff * diff;
      }
      if (j == 0 || dist < best_dist) {
        best = j;
        best_dist = dist;
      }
    }
    out.indices[p] = best;
    out.distances[p] = best_dist;
    std::memcpy(out.quantized.data() + p * d, codebook.data() + static_cast<std::size_t>(best) * d, sizeof(T) * d);
  }
  return out;
}

template <class T>
Tensor<T> init_codebook(int num_codes, int dim, Rng& rng) {
  Tensor<T> cb(Shape{num_codes, dim});
  const double bound = 1.0 / num_codes;
  for (auto& v : cb.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return cb;
}

// ---------------------------------------------------------------------------
// VqCodec

template <class T>
VqCodec<T>::VqCodec(const CodecConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed, "codec.init");
  add_backbone(params_, cfg_, rng);
  params_.add("codebook", init_codebook<T>(cfg_.num_codes, cfg_.embedding_dim, rng));
}

template <class T>
VqCodec<T>::VqCodec(const CodecConfig& cfg, ad::ParameterSet<T> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  VqCodec<T> reference(cfg_, 0);
  check_param_shapes(reference.params(), params_);
  for (const auto& p : params_.items()) {
    if (!all_finite(p.value)) throw NonFiniteError("parameter '" + p.name + "' is not finite");
  }
}

template <class T>
Tensor<T> VqCodec<T>::encode(const Tensor<T>& images) const {
  const bool single = images.rank() == 2;
  auto g = ad::Graph<T>::inference();
  Binder<T> p(g, const_cast<ad::ParameterSet<T>&>(params_));  // read-only in inference graphs
  ad::Var<T> x = g.constant(detail::as_image_batch(images, cfg_));
  return unbatch_if(encoder(p, cfg_, x).value(), single);
}

template <class T>
Tensor<T> VqCodec<T>::decode(const Tensor<T>& quantized) const {
  const bool single = quantized.rank() == 3;
  if (quantized.rank() != 3 && quantized.rank() != 4) {
    throw ShapeError("decode expects [h,w,D] or [N,h,w,D], got " + shape_str(quantized.shape()));
  }
  if (quantized.dim(-1) != cfg_.embedding_dim) {
    throw ShapeError("decode input depth " + std::to_string(quantized.dim(-1)) + " != embedding dim " +
                     std::to_string(cfg_.embedding_dim));
  }
  Tensor<T> z = quantized;
  if (single) {
    Shape s = z.shape();
    s.insert(s.begin(), 1);
    z = z.reshaped(s);
  }
  auto g = ad::Graph<T>::inference();
  Binder<T> p(g, const_cast<ad::ParameterSet<T>&>(params_));
  const Tensor<T>& out = decoder(p, cfg_, g.constant(std::move(z))).value();
  Shape s(out.shape().begin(), out.shape().end() - 1);  // drop channel axis
  return unbatch_if(out.reshaped(s), single);
}

template <class T>
QuantizationResult<T> VqCodec<T>::quantize(const Tensor<T>& features) const {
  return lsr::quantize(features, codebook());
}

template <class T>
Tensor<T> VqCodec<T>::lookup(const Tensor<std::int32_t>& indices) const {
  const Tensor<T>& cb = codebook();
  const int d = cfg_.embedding_dim;
  Shape s = indices.shape();
  s.push_back(d);
  Tensor<T> out(s);
  for (std::size_t p = 0; p < indices.size(); ++p) {
    const int k = indices[p];
    if (k < 0 || k >= cfg_.num_codes) throw IndexError("code index " + std::to_string(k) + " out of range");
    std::memcpy(out.data() + p * d, cb.data() + static_cast<std::size_t>(k) * d, sizeof(T) * d);
  }
  return out;
}

template <class T>
Tensor<T> VqCodec<T>::reconstruct(const Tensor<T>& images) const {
  return decode(quantize(encode(images)).quantized);
}

template <class T>
StopGradientPoint<T> VqCodec<T>::stop_gradient_point(const Tensor<T>& images) const {
  StopGradientPoint<T> sg;
  // Batched layout, matching the features of forward().
  sg.features = encode(images.rank() == 2 ? images.reshaped(Shape{1, images.dim(0), images.dim(1)}) : images);
  auto q = quantize(sg.features);
  sg.indices = std::move(q.indices);
  sg.codes = std::move(q.quantized);
  return sg;
}

template <class T>
typename VqCodec<T>::Forward VqCodec<T>::forward(ad::Graph<T>& g, const Tensor<T>& images,
                                                 const Tensor<std::int32_t>* frozen_indices,
                                                 const StopGradientPoint<T>* frozen_point) {
  Binder<T> p(g, params_);
  ad::Var<T> x = g.constant(detail::as_image_batch(images, cfg_));
  ad::Var<T> ze = encoder(p, cfg_, x);
  ad::Var<T> cb = p("codebook");

  Forward f;
  f.features = ze;
  const int d = cfg_.embedding_dim;
  const Shape lead(ze.shape().begin(), ze.shape().end() - 1);
  Tensor<T> quantized;
  if (frozen_point) {
    if (frozen_point->indices.shape() != lead || frozen_point->features.shape() != ze.shape() ||
        frozen_point->codes.shape() != ze.shape()) {
      throw ShapeError("frozen stop-gradient point shape mismatch");
    }
    f.indices = frozen_point->indices;
    quantized = lookup(f.indices);
  } else if (frozen_indices) {
    if (frozen_indices->shape() != lead) throw ShapeError("frozen indices shape mismatch");
    f.indices = *frozen_indices;
    quantized = lookup(f.indices);
  } else {
    auto q = lsr::quantize(ze.value(), cb.value());
    f.indices = std::move(q.indices);
    quantized = std::move(q.quantized);
  }
  // Operands under sg[.]: the current values, or the frozen ones.
  auto sg_features = std::make_shared<Tensor<T>>(frozen_point ? frozen_point->features : ze.value());
  auto sg_codes = std::make_shared<Tensor<T>>(frozen_point ? frozen_point->codes : quantized);
  if (frozen_point) {
    // z_e + sg[e - z_e]: equal to e at the frozen point, identity gradient to z_e.
    for (std::size_t i = 0; i < quantized.size(); ++i) {
      quantized[i] = ze.value()[i] + ((*sg_codes)[i] - (*sg_features)[i]);
    }
  }
  const std::size_t positions = f.indices.size();
  T codebook_sq = T(0);
  T commitment_sq = T(0);
  for (std::size_t pos = 0; pos < positions; ++pos) {
    const std::size_t row = static_cast<std::size_t>(f.indices[pos]) * d;
    for (int i = 0; i < d; ++i) {
      const T a = (*sg_features)[pos * d + i] - cb.value()[row + i];
      const T b = ze.value()[pos * d + i] - (*sg_codes)[pos * d + i];
      codebook_sq += a * a;
      commitment_sq += b * b;
    }
  }
  auto code_of = std::make_shared<Tensor<std::int32_t>>(f.indices);
  ad::Graph<T>* gp = &g;

  // Straight-through: forward value z_q, gradient copied to z_e unchanged.
  int id = static_cast<int>(g.size());
  f.quantized = g.push(quantized, g.requires_grad(ze), [gp, ze, id]() {
    const Tensor<T>& dy = gp->node(id).grad;
    Tensor<T>& dx = gp->grad(ze.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });

  id = static_cast<int>(g.size());
  f.codebook_term = g.push(Tensor<T>(Shape{}, std::vector<T>{codebook_sq / static_cast<T>(positions)}),
                           g.requires_grad(cb), [gp, cb, sg_features, code_of, positions, d, id]() {
                             const T s = gp->node(id).grad[0] * T(2) / static_cast<T>(positions);
                             Tensor<T>& dcb = gp->grad(cb.id);
                             for (std::size_t pos = 0; pos < positions; ++pos) {
                               const std::size_t row = static_cast<std::size_t>((*code_of)[pos]) * d;
                               for (int i = 0; i < d; ++i) {
                                 dcb[row + i] += s * (cb.value()[row + i] - (*sg_features)[pos * d + i]);
                               }
                             }
                           });

  id = static_cast<int>(g.size());
  f.commitment_term = g.push(Tensor<T>(Shape{}, std::vector<T>{commitment_sq / static_cast<T>(positions)}),
                             g.requires_grad(ze), [gp, ze, sg_codes, positions, id]() {
                               const T s = gp->node(id).grad[0] * T(2) / static_cast<T>(positions);
                               Tensor<T>& dze = gp->grad(ze.id);
                               for (std::size_t i = 0; i < dze.size(); ++i) {
                                 dze[i] += s * (ze.value()[i] - (*sg_codes)[i]);
                               }
                             });
  f.output = decoder(p, cfg_, f.quantized);
  f.reconstruction = ad::l1_mean(f.output, x.value());
  f.total = ad::add(ad::add(f.reconstruction, f.codebook_term), ad::scale(f.commitment_term, T(cfg_.beta)));
  return f;
}

template <class T>
int VqCodec<T>::unused_codes(const Tensor<std::int32_t>& indices) const {
  std::set<std::int32_t> used(indices.values().begin(), indices.values().end());
  return cfg_.num_codes - static_cast<int>(used.size());
}

template <class T>
LossBreakdown<T> vqvae_loss(const Tensor<T>& images, const VqCodec<T>& codec,
                            const Tensor<std::int32_t>* frozen_indices) {
  ad::Graph<T> g(false, nullptr, false);
  auto f = const_cast<VqCodec<T>&>(codec).forward(g, images, frozen_indices);
  LossBreakdown<T> out;
  out.reconstruction = f.reconstruction.value()[0];
  out.codebook_term = f.codebook_term.value()[0];
  out.commitment_term = f.commitment_term.value()[0];
  out.total = f.total.value()[0];
  if (!std::isfinite(static_cast<double>(out.total))) throw NonFiniteError("VQ-VAE loss is not finite");
  return out;
}

// ---------------------------------------------------------------------------
// VAE baseline

template <class T>
Vae<T>::Vae(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed, "vae.init");
  add_backbone(params_, cfg_.backbone, rng);
  const int ls = cfg_.backbone.latent_side();
  const int flat = ls * ls * cfg_.backbone.embedding_dim;
  detail::add_dense(params_, "vae.mu", cfg_.latent_dim, flat, rng, 0.5);
  detail::add_dense(params_, "vae.logvar", cfg_.latent_dim, flat, rng, 0.1);
  detail::add_dense(params_, "vae.expand", flat, cfg_.latent_dim, rng, 1.0);
}

template <class T>
Vae<T>::Vae(const VaeConfig& cfg, ad::ParameterSet<T> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  Vae<T> reference(cfg_, 0);
  check_param_shapes(reference.params(), params_);
}

template <class T>
typename Vae<T>::Forward Vae<T>::forward(ad::Graph<T>& g, const Tensor<T>& images, const Tensor<T>* eps) {
  const CodecConfig& bc = cfg_.backbone;
  Tensor<T> batch = detail::as_image_batch(images, bc);
  if (batch.dim(1) != bc.image_side || batch.dim(2) != bc.image_side) {
    throw DimensionError("VAE expects " + std::to_string(bc.image_side) + "x" + std::to_string(bc.image_side) +
                         " images");
  }
  const int n = batch.dim(0);
  const int ls = bc.latent_side();
  const int flat = ls * ls * bc.embedding_dim;
  Binder<T> p(g, params_);
  ad::Var<T> x = g.constant(std::move(batch));
  ad::Var<T> h = ad::reshape(encoder(p, bc, x), Shape{n, flat});
  Forward f;
  f.mu = detail::dense(p, "vae.mu", h);
  f.logvar = detail::dense(p, "vae.logvar", h);
  ad::Var<T> z = f.mu;
  if (eps) {
    if (eps->shape() != f.mu.shape()) throw ShapeError("VAE noise must be [N, latent_dim]");
    z = ad::reparameterize(f.mu, f.logvar, *eps);
  }
  ad::Var<T> e = ad::reshape(detail::dense(p, "vae.expand", z), Shape{n, ls, ls, bc.embedding_dim});
  f.output = decoder(p, bc, e);
  f.reconstruction = ad::l1_mean(f.output, x.value());
  f.kl = ad::gaussian_kl(f.mu, f.logvar);
  f.total = ad::add(f.reconstruction, f.kl);
  return f;
}

template <class T>
Tensor<T> Vae<T>::reconstruct_mean(const Tensor<T>& images) const {
  const bool single = images.rank() == 2;
  ad::Graph<T> g(false, nullptr, false);
  auto f = const_cast<Vae<T>*>(this)->forward(g, images, nullptr);
  const Tensor<T>& out = f.output.value();
  Shape s(out.shape().begin(), out.shape().end() - 1);
  return unbatch_if(out.reshaped(s), single);
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> Vae<T>::encode(const Tensor<T>& images) const {
  ad::Graph<T> g(false, nullptr, false);
  auto f = const_cast<Vae<T>*>(this)->forward(g, images, nullptr);
  return {f.mu.value(), f.logvar.value()};
}

namespace {
template <class T>
LossBreakdown<T> vae_breakdown(const typename Vae<T>::Forward& f) {
  LossBreakdown<T> out;
  out.reconstruction = f.reconstruction.value()[0];
  out.kl_term = f.kl.value()[0];
  out.total = f.total.value()[0];
  if (!std::isfinite(static_cast<double>(out.total))) throw NonFiniteError("VAE loss is not finite");
  return out;
}
}  // namespace

template <class T>
LossBreakdown<T> vae_loss(const Tensor<T>& images, const Vae<T>& vae, Rng& rng) {
  const int n = images.rank() == 2 ? 1 : images.dim(0);
  Tensor<T> eps(Shape{n, vae.config().latent_dim});
  for (auto& v : eps.values()) v = static_cast<T>(rng.normal());
  ad::Graph<T> g(false, nullptr, false);
  auto f = const_cast<Vae<T>&>(vae).forward(g, images, &eps);
  return vae_breakdown<T>(f);
}

template <class T>
LossBreakdown<T> vae_loss_mean(const Tensor<T>& images, const Vae<T>& vae) {
  ad::Graph<T> g(false, nullptr, false);
  auto f = const_cast<Vae<T>&>(vae).forward(g, images, nullptr);
  return vae_breakdown<T>(f);
}

#define LSR_INSTANTIATE(T)                                                                            \
  template QuantizationResult<T> quantize(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> init_codebook(int, int, Rng&);                                                   \
  template class VqCodec<T>;                                                                          \
  template LossBreakdown<T> vqvae_loss(const Tensor<T>&, const VqCodec<T>&, const Tensor<std::int32_t>*); \
  template class Vae<T>;                                                                              \
  template LossBreakdown<T> vae_loss(const Tensor<T>&, const Vae<T>&, Rng&);                          \
  template LossBreakdown<T> vae_loss_mean(const Tensor<T>&, const Vae<T>&);

LSR_INSTANTIATE(float)
LSR_INSTANTIATE(double)

#undef LSR_INSTANTIATE

}  // namespace lsr

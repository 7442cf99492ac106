#include "lsr/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace lsr::ad {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
MapMat<T> as_mat(Tensor<T>& t, Eigen::Index rows, Eigen::Index cols) {
  return MapMat<T>(t.data(), rows, cols);
}
template <class T>
CMapMat<T> as_mat(const Tensor<T>& t, Eigen::Index rows, Eigen::Index cols) {
  return CMapMat<T>(t.data(), rows, cols);
}

struct Geometry {
  int n, h, w, c;      // image dims
  int kh, kw, stride, pad;
  int gh, gw;          // patch grid dims
  std::size_t row_len() const { return static_cast<std::size_t>(kh) * kw * c; }
  std::size_t rows() const { return static_cast<std::size_t>(n) * gh * gw; }
};

// cols[(n, gy, gx), (ky, kx, c)] = img[n, gy*s - p + ky, gx*s - p + kx, c] (zero outside).
template <class T>
void im2col(const T* img, const Geometry& g, T* cols) {
  const std::size_t row_len = g.row_len();
  for (int n = 0; n < g.n; ++n) {
    for (int gy = 0; gy < g.gh; ++gy) {
      for (int gx = 0; gx < g.gw; ++gx) {
        T* row = cols + ((static_cast<std::size_t>(n) * g.gh + gy) * g.gw + gx) * row_len;
        for (int ky = 0; ky < g.kh; ++ky) {
          const int iy = gy * g.stride - g.pad + ky;
          for (int kx = 0; kx < g.kw; ++kx) {
            const int ix = gx * g.stride - g.pad + kx;
            T* dst = row + (static_cast<std::size_t>(ky) * g.kw + kx) * g.c;
            if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
              std::fill(dst, dst + g.c, T(0));
            } else {
              const T* src = img + ((static_cast<std::size_t>(n) * g.h + iy) * g.w + ix) * g.c;
              std::memcpy(dst, src, sizeof(T) * g.c);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: img += scatter(cols).
template <class T>
void col2im_add(const T* cols, const Geometry& g, T* img) {
  const std::size_t row_len = g.row_len();
  for (int n = 0; n < g.n; ++n) {
    for (int gy = 0; gy < g.gh; ++gy) {
      for (int gx = 0; gx < g.gw; ++gx) {
        const T* row = cols + ((static_cast<std::size_t>(n) * g.gh + gy) * g.gw + gx) * row_len;
        for (int ky = 0; ky < g.kh; ++ky) {
          const int iy = gy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.kw; ++kx) {
            const int ix = gx * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            const T* src = row + (static_cast<std::size_t>(ky) * g.kw + kx) * g.c;
            T* dst = img + ((static_cast<std::size_t>(n) * g.h + iy) * g.w + ix) * g.c;
            for (int c = 0; c < g.c; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

void require_rank(const Shape& s, int rank, const char* what) {
  if (static_cast<int>(s.size()) != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterSet / Graph

template <class T>
Parameter<T>& ParameterSet<T>::add(const std::string& name, Tensor<T> init) {
  if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
  index_[name] = params_.size();
  Tensor<T> grad(init.shape());
  params_.push_back(Parameter<T>{name, std::move(init), std::move(grad)});
  return params_.back();
}

template <class T>
Parameter<T>& ParameterSet<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter: " + name);
  return params_[it->second];
}

template <class T>
const Parameter<T>& ParameterSet<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter: " + name);
  return params_[it->second];
}

template <class T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) {
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
    p.grad.fill(T(0));
  }
}

template <class T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <class T>
Var<T> Graph<T>::push(Tensor<T> value, bool requires_grad, std::function<void()> backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  return push(std::move(value), false);
}

template <class T>
Var<T> Graph<T>::param(Parameter<T>& p) {
  Var<T> v = push(p.value, record_);
  nodes_.back().param = &p;
  return v;
}

template <class T>
Tensor<T>& Graph<T>::grad(int id) {
  Node& n = node(id);
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = Tensor<T>(n.value.shape());
  }
  return n.grad;
}

template <class T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.value().size() != 1) throw ShapeError("backward requires a scalar loss");
  grad(loss.id)[0] = T(1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward();
    if (n.param) {
      if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor<T>(n.param->value.shape());
      add_into(n.param->grad, n.grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise / structural

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Graph<T>* g = a.graph;
  Tensor<T> out = a.value();
  add_into(out, b.value());
  const bool rg = g->requires_grad(a) || g->requires_grad(b);
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), rg, [g, a, b, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    if (g->requires_grad(a)) add_into(g->grad(a.id), dy);
    if (g->requires_grad(b)) add_into(g->grad(b.id), dy);
  });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  Graph<T>* g = x.graph;
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= s;
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), g->requires_grad(x), [g, x, s, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    Tensor<T>& dx = g->grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += s * dy[i];
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  Graph<T>* g = x.graph;
  Tensor<T> out = x.value();
  if (auto* trace = g->kink_trace()) {
    for (T v : out.values()) trace->push_back(v > T(0) ? 2 : v < T(0) ? 0 : 1);
  }
  for (auto& v : out.values()) v = std::max(v, T(0));
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), g->requires_grad(x), [g, x, id]() {
    const Tensor<T>& y = g->node(id).value;
    const Tensor<T>& dy = g->node(id).grad;
    Tensor<T>& dx = g->grad(x.id);
    const T* yp = y.data();
    const T* dyp = dy.data();
    T* dxp = dx.data();
    for (std::size_t i = 0; i < dy.size(); ++i) dxp[i] += yp[i] > T(0) ? dyp[i] : T(0);
  });
}

template <class T>
Var<T> dropout(Var<T> x, double p) {
  Graph<T>* g = x.graph;
  if (!g->training() || p <= 0.0) return x;
  if (p >= 1.0) throw ValueError("dropout rate must be < 1");
  if (!g->rng()) throw ValueError("dropout in training mode requires an rng");
  auto mask = std::make_shared<std::vector<T>>(x.value().size());
  const T keep_scale = T(1.0 / (1.0 - p));
  Rng& rng = *g->rng();
  for (auto& m : *mask) m = rng.uniform() < p ? T(0) : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), g->requires_grad(x), [g, x, mask, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    Tensor<T>& dx = g->grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Graph<T>* g = x.graph;
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), g->requires_grad(x), [g, x, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    Tensor<T>& dx = g->grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

// ---------------------------------------------------------------------------
// Dense / convolution

template <class T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b) {
  Graph<T>* g = x.graph;
  require_rank(w.shape(), 2, "linear weight");
  const int fo = w.shape()[0];
  const int fi = w.shape()[1];
  if (x.value().rank() < 1 || x.shape().back() != fi) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  if (b && (b->value().size() != static_cast<std::size_t>(fo))) {
    throw ShapeError("linear: bias size mismatch");
  }
  const Eigen::Index rows = static_cast<Eigen::Index>(x.value().size() / fi);
  Shape out_shape = x.shape();
  out_shape.back() = fo;
  Tensor<T> out(out_shape, uninitialized);
  auto Y = as_mat(out, rows, fo);
  Y.noalias() = as_mat(x.value(), rows, fi) * as_mat(w.value(), fo, fi).transpose();
  if (b) Y.rowwise() += as_mat(b->value(), 1, fo).row(0);
  const bool rg = g->requires_grad(x) || g->requires_grad(w) || (b && g->requires_grad(*b));
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), rg, [g, x, w, b, rows, fi, fo, id]() {
    const Tensor<T>& dyt = g->node(id).grad;
    auto dY = as_mat(dyt, rows, fo);
    if (g->requires_grad(w)) {
      as_mat(g->grad(w.id), fo, fi).noalias() += dY.transpose() * as_mat(x.value(), rows, fi);
    }
    if (b && g->requires_grad(*b)) {
      as_mat(g->grad(b->id), 1, fo) += dY.colwise().sum();
    }
    if (g->requires_grad(x)) {
      as_mat(g->grad(x.id), rows, fi).noalias() += dY * as_mat(w.value(), fo, fi);
    }
  });
}

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, ConvSpec spec, const Tensor<T>* mask) {
  Graph<T>* g = x.graph;
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws[3] != xs[3]) {
    throw ShapeError("conv2d: input channels " + std::to_string(xs[3]) + " vs weight " + shape_str(ws));
  }
  if (mask && mask->shape() != ws) throw ShapeError("conv2d: mask shape mismatch");
  const int co = ws[0];
  if (b.value().size() != static_cast<std::size_t>(co)) throw ShapeError("conv2d: bias size mismatch");
  Geometry geo{xs[0], xs[1], xs[2], xs[3], ws[1], ws[2], spec.stride, spec.pad, 0, 0};
  geo.gh = (geo.h + 2 * spec.pad - geo.kh) / spec.stride + 1;
  geo.gw = (geo.w + 2 * spec.pad - geo.kw) / spec.stride + 1;
  if (geo.gh <= 0 || geo.gw <= 0) throw ShapeError("conv2d: kernel larger than padded input");

  const auto rows = static_cast<Eigen::Index>(geo.rows());
  const auto klen = static_cast<Eigen::Index>(geo.row_len());
  auto cols = std::make_shared<Tensor<T>>(Shape{static_cast<int>(rows), static_cast<int>(klen)}, uninitialized);
  im2col(x.value().data(), geo, cols->data());

  std::shared_ptr<Tensor<T>> masked;
  if (mask) {
    masked = std::make_shared<Tensor<T>>(w.value());
    for (std::size_t i = 0; i < masked->size(); ++i) (*masked)[i] *= (*mask)[i];
  }
  const Tensor<T>& weff = masked ? *masked : w.value();

  Tensor<T> out(Shape{geo.n, geo.gh, geo.gw, co}, uninitialized);
  auto Y = as_mat(out, rows, co);
  Y.noalias() = as_mat(*cols, rows, klen) * as_mat(weff, co, klen).transpose();
  Y.rowwise() += as_mat(b.value(), 1, co).row(0);

  const bool rg = g->requires_grad(x) || g->requires_grad(w) || g->requires_grad(b);
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), rg, [g, x, w, b, geo, cols, masked, mask, rows, klen, co, id]() {
    const Tensor<T>& dyt = g->node(id).grad;
    auto dY = as_mat(dyt, rows, co);
    if (g->requires_grad(w)) {
      Tensor<T>& dwt = g->grad(w.id);
      if (mask) {
        Tensor<T> tmp(dwt.shape(), uninitialized);
        as_mat(tmp, co, klen).noalias() = dY.transpose() * as_mat(*cols, rows, klen);
        for (std::size_t i = 0; i < tmp.size(); ++i) dwt[i] += tmp[i] * (*mask)[i];
      } else {
        as_mat(dwt, co, klen).noalias() += dY.transpose() * as_mat(*cols, rows, klen);
      }
    }
    if (g->requires_grad(b)) as_mat(g->grad(b.id), 1, co) += dY.colwise().sum();
    if (g->requires_grad(x)) {
      const Tensor<T>& weff = masked ? *masked : w.value();
      Tensor<T> dcols(cols->shape(), uninitialized);
      as_mat(dcols, rows, klen).noalias() = dY * as_mat(weff, co, klen);
      col2im_add(dcols.data(), geo, g->grad(x.id).data());
    }
  });
}

template <class T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> b, ConvSpec spec) {
  Graph<T>* g = x.graph;
  require_rank(x.shape(), 4, "conv_transpose2d input");
  require_rank(w.shape(), 4, "conv_transpose2d weight");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws[0] != xs[3]) throw ShapeError("conv_transpose2d: channel mismatch");
  const int co = ws[3];
  if (b.value().size() != static_cast<std::size_t>(co)) throw ShapeError("conv_transpose2d: bias size mismatch");
  const int ho = (xs[1] - 1) * spec.stride - 2 * spec.pad + ws[1];
  const int wo = (xs[2] - 1) * spec.stride - 2 * spec.pad + ws[2];
  // The output image plays the role of the convolution input; the input grid
  // is the patch grid.
  Geometry geo{xs[0], ho, wo, co, ws[1], ws[2], spec.stride, spec.pad, xs[1], xs[2]};
  if ((ho + 2 * spec.pad - geo.kh) / spec.stride + 1 != xs[1]) {
    throw ShapeError("conv_transpose2d: inconsistent geometry");
  }
  const auto rows = static_cast<Eigen::Index>(geo.rows());
  const auto klen = static_cast<Eigen::Index>(geo.row_len());
  const int ci = xs[3];

  Tensor<T> cols(Shape{static_cast<int>(rows), static_cast<int>(klen)}, uninitialized);
  as_mat(cols, rows, klen).noalias() = as_mat(x.value(), rows, ci) * as_mat(w.value(), ci, klen);
  Tensor<T> out(Shape{xs[0], ho, wo, co});
  col2im_add(cols.data(), geo, out.data());
  {
    auto Y = as_mat(out, static_cast<Eigen::Index>(out.size() / co), co);
    Y.rowwise() += as_mat(b.value(), 1, co).row(0);
  }
  const bool rg = g->requires_grad(x) || g->requires_grad(w) || g->requires_grad(b);
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), rg, [g, x, w, b, geo, rows, klen, ci, co, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    if (g->requires_grad(b)) {
      as_mat(g->grad(b.id), 1, co) += as_mat(dy, static_cast<Eigen::Index>(dy.size() / co), co).colwise().sum();
    }
    if (!g->requires_grad(x) && !g->requires_grad(w)) return;
    Tensor<T> dcols(Shape{static_cast<int>(rows), static_cast<int>(klen)}, uninitialized);
    im2col(dy.data(), geo, dcols.data());
    if (g->requires_grad(w)) {
      as_mat(g->grad(w.id), ci, klen).noalias() += as_mat(x.value(), rows, ci).transpose() * as_mat(dcols, rows, klen);
    }
    if (g->requires_grad(x)) {
      as_mat(g->grad(x.id), rows, ci).noalias() += as_mat(dcols, rows, klen) * as_mat(w.value(), ci, klen).transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Sequence helpers

template <class T>
Var<T> embedding(Var<T> table, const std::vector<int>& indices, Shape out_shape) {
  Graph<T>* g = table.graph;
  require_rank(table.shape(), 2, "embedding table");
  const int k = table.shape()[0];
  const int c = table.shape()[1];
  if (shape_size(out_shape) != indices.size()) throw ShapeError("embedding: index count vs shape");
  for (int idx : indices) {
    if (idx < 0 || idx >= k) {
      throw IndexError("token index " + std::to_string(idx) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  out_shape.push_back(c);
  Tensor<T> out(out_shape);
  for (std::size_t p = 0; p < indices.size(); ++p) {
    std::memcpy(out.data() + p * c, table.value().data() + static_cast<std::size_t>(indices[p]) * c, sizeof(T) * c);
  }
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), g->requires_grad(table), [g, table, indices, c, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    Tensor<T>& dt = g->grad(table.id);
    for (std::size_t p = 0; p < indices.size(); ++p) {
      T* dst = dt.data() + static_cast<std::size_t>(indices[p]) * c;
      const T* src = dy.data() + p * c;
      for (int j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Var<T> shift_raster(Var<T> x) {
  Graph<T>* g = x.graph;
  require_rank(x.shape(), 4, "shift_raster input");
  const int n = x.shape()[0];
  const std::size_t len = static_cast<std::size_t>(x.shape()[1]) * x.shape()[2];
  const std::size_t c = static_cast<std::size_t>(x.shape()[3]);
  Tensor<T> out(x.shape());
  for (int s = 0; s < n; ++s) {
    const T* src = x.value().data() + s * len * c;
    T* dst = out.data() + s * len * c;
    std::memcpy(dst + c, src, sizeof(T) * (len - 1) * c);
  }
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), g->requires_grad(x), [g, x, n, len, c, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    Tensor<T>& dx = g->grad(x.id);
    for (int s = 0; s < n; ++s) {
      const T* src = dy.data() + s * len * c + c;
      T* dst = dx.data() + s * len * c;
      for (std::size_t i = 0; i < (len - 1) * c; ++i) dst[i] += src[i];
    }
  });
}

template <class T>
Var<T> add_conditioning(Var<T> x, const std::vector<T>& ctx, Var<T> a, Var<T> b) {
  Graph<T>* g = x.graph;
  const int n = x.shape()[0];
  const int c = x.shape().back();
  if (ctx.size() != static_cast<std::size_t>(n)) throw ShapeError("add_conditioning: one context per sample");
  if (a.value().size() != static_cast<std::size_t>(c) || b.value().size() != static_cast<std::size_t>(c)) {
    throw ShapeError("add_conditioning: projection size mismatch");
  }
  const std::size_t per = x.value().size() / n;
  Tensor<T> out = x.value();
  for (int s = 0; s < n; ++s) {
    T* row = out.data() + s * per;
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t ch = i % c;
      row[i] += ctx[s] * a.value()[ch] + b.value()[ch];
    }
  }
  const bool rg = g->requires_grad(x) || g->requires_grad(a) || g->requires_grad(b);
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), rg, [g, x, ctx, a, b, n, c, per, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    if (g->requires_grad(x)) add_into(g->grad(x.id), dy);
    const bool ga = g->requires_grad(a);
    const bool gb = g->requires_grad(b);
    if (!ga && !gb) return;
    std::vector<T> da(c, T(0)), db(c, T(0));
    for (int s = 0; s < n; ++s) {
      const T* row = dy.data() + s * per;
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t ch = i % c;
        da[ch] += ctx[s] * row[i];
        db[ch] += row[i];
      }
    }
    if (ga) {
      Tensor<T>& t = g->grad(a.id);
      for (int ch = 0; ch < c; ++ch) t[ch] += da[ch];
    }
    if (gb) {
      Tensor<T>& t = g->grad(b.id);
      for (int ch = 0; ch < c; ++ch) t[ch] += db[ch];
    }
  });
}

template <class T>
Var<T> strict_causal_attention(Var<T> q, Var<T> k, Var<T> v, Tensor<T>* weights_out) {
  Graph<T>* g = q.graph;
  require_rank(q.shape(), 3, "attention query");
  if (k.shape() != q.shape()) throw ShapeError("attention: key shape must match query");
  require_rank(v.shape(), 3, "attention value");
  const int n = q.shape()[0];
  const int len = q.shape()[1];
  const int dk = q.shape()[2];
  const int dv = v.shape()[2];
  if (v.shape()[0] != n || v.shape()[1] != len) throw ShapeError("attention: value shape mismatch");
  const T sc = T(1.0 / std::sqrt(static_cast<double>(dk)));

  auto weights = std::make_shared<Tensor<T>>(Shape{n, len, len});
  Tensor<T> out(Shape{n, len, dv});
  for (int s = 0; s < n; ++s) {
    auto Q = CMapMat<T>(q.value().data() + static_cast<std::size_t>(s) * len * dk, len, dk);
    auto K = CMapMat<T>(k.value().data() + static_cast<std::size_t>(s) * len * dk, len, dk);
    auto V = CMapMat<T>(v.value().data() + static_cast<std::size_t>(s) * len * dv, len, dv);
    auto A = MapMat<T>(weights->data() + static_cast<std::size_t>(s) * len * len, len, len);
    A.noalias() = (Q * K.transpose()) * sc;
    for (int i = 0; i < len; ++i) {
      if (i == 0) {
        A.row(0).setZero();
        continue;
      }
      T mx = A(i, 0);
      for (int j = 1; j < i; ++j) mx = std::max(mx, A(i, j));
      T total = T(0);
      for (int j = 0; j < i; ++j) {
        A(i, j) = std::exp(A(i, j) - mx);
        total += A(i, j);
      }
      for (int j = 0; j < i; ++j) A(i, j) /= total;
      for (int j = i; j < len; ++j) A(i, j) = T(0);
    }
    MapMat<T>(out.data() + static_cast<std::size_t>(s) * len * dv, len, dv).noalias() = A * V;
  }
  if (weights_out) *weights_out = *weights;
  const bool rg = g->requires_grad(q) || g->requires_grad(k) || g->requires_grad(v);
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), rg, [g, q, k, v, weights, n, len, dk, dv, sc, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    RowMat<T> dA(len, len);
    RowMat<T> dS(len, len);
    for (int s = 0; s < n; ++s) {
      auto Q = CMapMat<T>(q.value().data() + static_cast<std::size_t>(s) * len * dk, len, dk);
      auto K = CMapMat<T>(k.value().data() + static_cast<std::size_t>(s) * len * dk, len, dk);
      auto V = CMapMat<T>(v.value().data() + static_cast<std::size_t>(s) * len * dv, len, dv);
      auto A = CMapMat<T>(weights->data() + static_cast<std::size_t>(s) * len * len, len, len);
      auto dY = CMapMat<T>(dy.data() + static_cast<std::size_t>(s) * len * dv, len, dv);
      if (g->requires_grad(v)) {
        MapMat<T>(g->grad(v.id).data() + static_cast<std::size_t>(s) * len * dv, len, dv).noalias() +=
            A.transpose() * dY;
      }
      if (!g->requires_grad(q) && !g->requires_grad(k)) continue;
      dA.noalias() = dY * V.transpose();
      for (int i = 0; i < len; ++i) {
        T dot = T(0);
        for (int j = 0; j < i; ++j) dot += dA(i, j) * A(i, j);
        for (int j = 0; j < len; ++j) dS(i, j) = j < i ? A(i, j) * (dA(i, j) - dot) * sc : T(0);
      }
      if (g->requires_grad(q)) {
        MapMat<T>(g->grad(q.id).data() + static_cast<std::size_t>(s) * len * dk, len, dk).noalias() += dS * K;
      }
      if (g->requires_grad(k)) {
        MapMat<T>(g->grad(k.id).data() + static_cast<std::size_t>(s) * len * dk, len, dk).noalias() +=
            dS.transpose() * Q;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Var<T> categorical_nll(Var<T> logits, const std::vector<int>& targets) {
  Graph<T>* g = logits.graph;
  const int k = logits.shape().back();
  const std::size_t positions = logits.value().size() / k;
  if (targets.size() != positions) throw ShapeError("categorical_nll: target count mismatch");
  Shape out_shape(logits.shape().begin(), logits.shape().end() - 1);
  Tensor<T> out(out_shape);
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  const T floor = T(kProbabilityFloor);
  for (std::size_t p = 0; p < positions; ++p) {
    const int t = targets[p];
    if (t < 0 || t >= k) throw IndexError("target " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
    const T* z = logits.value().data() + p * k;
    T* pr = probs->data() + p * k;
    T mx = z[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    T total = T(0);
    for (int j = 0; j < k; ++j) {
      pr[j] = std::exp(z[j] - mx);
      total += pr[j];
    }
    for (int j = 0; j < k; ++j) pr[j] /= total;
    // Log-domain evaluation is exact where the floor does not bind.
    const T logp = z[t] - mx - std::log(total);
    out[p] = logp > std::log(floor) ? -logp : -std::log(floor);
  }
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), g->requires_grad(logits), [g, logits, targets, probs, k, positions, floor, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    Tensor<T>& dz = g->grad(logits.id);
    for (std::size_t p = 0; p < positions; ++p) {
      const T* pr = probs->data() + p * k;
      const int t = targets[p];
      if (pr[t] <= floor) continue;
      T* d = dz.data() + p * k;
      for (int j = 0; j < k; ++j) d[j] += dy[p] * (pr[j] - (j == t ? T(1) : T(0)));
    }
  });
}

template <class T>
Var<T> sum(Var<T> x) {
  Graph<T>* g = x.graph;
  T total = T(0);
  for (T v : x.value().values()) total += v;
  const int id = static_cast<int>(g->size());
  return g->push(Tensor<T>(Shape{}, std::vector<T>{total}), g->requires_grad(x), [g, x, id]() {
    const T d = g->node(id).grad[0];
    for (auto& v : g->grad(x.id).values()) v += d;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

template <class T>
Var<T> l1_mean(Var<T> x, const Tensor<T>& target) {
  Graph<T>* g = x.graph;
  if (x.shape() != target.shape()) {
    throw ShapeError("l1_mean: " + shape_str(x.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t n = target.size();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) total += std::abs(x.value()[i] - target[i]);
  if (auto* trace = g->kink_trace()) {
    for (std::size_t i = 0; i < n; ++i) {
      const T diff = x.value()[i] - target[i];
      trace->push_back(diff > T(0) ? 2 : diff < T(0) ? 0 : 1);
    }
  }
  auto tgt = std::make_shared<Tensor<T>>(target);
  const int id = static_cast<int>(g->size());
  return g->push(Tensor<T>(Shape{}, std::vector<T>{total / static_cast<T>(n)}), g->requires_grad(x),
                 [g, x, tgt, n, id]() {
                   const T d = g->node(id).grad[0] / static_cast<T>(n);
                   Tensor<T>& dx = g->grad(x.id);
                   for (std::size_t i = 0; i < n; ++i) {
                     const T diff = x.value()[i] - (*tgt)[i];
                     if (diff > T(0)) dx[i] += d;
                     else if (diff < T(0)) dx[i] -= d;
                   }
                 });
}

template <class T>
Var<T> gaussian_kl(Var<T> mu, Var<T> logvar) {
  Graph<T>* g = mu.graph;
  if (mu.shape() != logvar.shape()) throw ShapeError("gaussian_kl: mu/logvar shape mismatch");
  const int batch = mu.shape().empty() ? 1 : mu.shape()[0];
  const std::size_t n = mu.value().size();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T m = mu.value()[i];
    const T lv = logvar.value()[i];
    total += T(0.5) * (m * m + std::exp(lv) - lv - T(1));
  }
  const bool rg = g->requires_grad(mu) || g->requires_grad(logvar);
  const int id = static_cast<int>(g->size());
  return g->push(Tensor<T>(Shape{}, std::vector<T>{total / static_cast<T>(batch)}), rg,
                 [g, mu, logvar, batch, n, id]() {
                   const T d = g->node(id).grad[0] / static_cast<T>(batch);
                   if (g->requires_grad(mu)) {
                     Tensor<T>& dm = g->grad(mu.id);
                     for (std::size_t i = 0; i < n; ++i) dm[i] += d * mu.value()[i];
                   }
                   if (g->requires_grad(logvar)) {
                     Tensor<T>& dl = g->grad(logvar.id);
                     for (std::size_t i = 0; i < n; ++i) dl[i] += d * T(0.5) * (std::exp(logvar.value()[i]) - T(1));
                   }
                 });
}

template <class T>
Var<T> reparameterize(Var<T> mu, Var<T> logvar, const Tensor<T>& eps) {
  Graph<T>* g = mu.graph;
  if (mu.shape() != logvar.shape() || mu.shape() != eps.shape()) {
    throw ShapeError("reparameterize: shape mismatch");
  }
  const std::size_t n = mu.value().size();
  Tensor<T> out(mu.shape());
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = mu.value()[i] + std::exp(T(0.5) * logvar.value()[i]) * eps[i];
  }
  auto noise = std::make_shared<Tensor<T>>(eps);
  const bool rg = g->requires_grad(mu) || g->requires_grad(logvar);
  const int id = static_cast<int>(g->size());
  return g->push(std::move(out), rg, [g, mu, logvar, noise, n, id]() {
    const Tensor<T>& dy = g->node(id).grad;
    if (g->requires_grad(mu)) add_into(g->grad(mu.id), dy);
    if (g->requires_grad(logvar)) {
      Tensor<T>& dl = g->grad(logvar.id);
      for (std::size_t i = 0; i < n; ++i) {
        dl[i] += dy[i] * (*noise)[i] * T(0.5) * std::exp(T(0.5) * logvar.value()[i]);
      }
    }
  });
}

template <class T>
Tensor<T> init_uniform(Shape shape, int fan_in, Rng& rng, double gain) {
  Tensor<T> t(std::move(shape));
  const double bound = gain * std::sqrt(3.0 / std::max(1, fan_in));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

// ---------------------------------------------------------------------------

#define LSR_INSTANTIATE(T)                                                                      \
  template class ParameterSet<T>;                                                               \
  template class Graph<T>;                                                                      \
  template Var<T> add(Var<T>, Var<T>);                                                          \
  template Var<T> scale(Var<T>, T);                                                             \
  template Var<T> relu(Var<T>);                                                                 \
  template Var<T> dropout(Var<T>, double);                                                      \
  template Var<T> reshape(Var<T>, Shape);                                                       \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                                \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, ConvSpec, const Tensor<T>*);                   \
  template Var<T> conv_transpose2d(Var<T>, Var<T>, Var<T>, ConvSpec);                           \
  template Var<T> embedding(Var<T>, const std::vector<int>&, Shape);                            \
  template Var<T> shift_raster(Var<T>);                                                         \
  template Var<T> add_conditioning(Var<T>, const std::vector<T>&, Var<T>, Var<T>);              \
  template Var<T> strict_causal_attention(Var<T>, Var<T>, Var<T>, Tensor<T>*);                  \
  template Var<T> categorical_nll(Var<T>, const std::vector<int>&);                             \
  template Var<T> mean(Var<T>);                                                                 \
  template Var<T> sum(Var<T>);                                                                  \
  template Var<T> l1_mean(Var<T>, const Tensor<T>&);                                            \
  template Var<T> gaussian_kl(Var<T>, Var<T>);                                                  \
  template Var<T> reparameterize(Var<T>, Var<T>, const Tensor<T>&);                             \
  template Tensor<T> init_uniform(Shape, int, Rng&, double);

LSR_INSTANTIATE(float)
LSR_INSTANTIATE(double)

#undef LSR_INSTANTIATE

}  // namespace lsr::ad

#include "groundseg/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <memory>
#include <cmath>

namespace groundseg::ag {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapM<T> as_mat(const Tensor<T>& t, int rows, int cols) {
  return CMapM<T>(t.data.data(), rows, cols);
}
template <typename T>
MapM<T> as_mat(Tensor<T>& t, int rows, int cols) {
  return MapM<T>(t.data.data(), rows, cols);
}

void require(bool ok, const char* what) {
  if (!ok) throw InvalidInput(what);
}

// [C,H,W] -> [C*k*k, Ho*Wo]
template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, int ho, int wo, std::vector<T>& cols) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  cols.assign(static_cast<std::size_t>(c) * k * k * hw, T(0));
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = cols.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = x.data.data() + (static_cast<std::size_t>(ci) * h + iy) * w;
          T* drow = dst + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) drow[ox] = src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const std::vector<T>& cols, int k, int stride, int pad, int ho, int wo, Tensor<T>& dx) {
  const int c = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = cols.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* drow = dx.data.data() + (static_cast<std::size_t>(ci) * h + iy) * w;
          const T* srow = src + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::param(Parameter<T>& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
  Node n;
  n.value = p.value;
  n.needs_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_ids_[&p] = id;
  return {this, id};
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
  return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& v : inputs) {
    if (v.graph != this) throw InvalidInput("autograd: input belongs to a different graph");
    n.needs_grad = n.needs_grad || needs_grad(v.id);
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Graph<T>::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape);
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> root) {
  if (root.graph != this) throw InvalidInput("autograd: root belongs to a different graph");
  if (value(root.id).size() != 1) throw InvalidInput("autograd: backward needs a scalar root");
  grad(root.id)[0] = T(1);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) add_into(n.param->grad, n.grad);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor<T> out = a.value();
  add_into(out, b.value());
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    if (g.needs_grad(a.id)) add_into(g.grad(a.id), go);
    if (g.needs_grad(b.id)) add_into(g.grad(b.id), g.grad(self));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return a.graph->record(std::move(out), {a}, [a, s](Graph<T>& g, int self) {
    const Tensor<T> go = g.grad(self);
    Tensor<T>& ga = g.grad(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * go[i];
  });
}

template <typename T>
Var<T> reshape(Var<T> a, std::vector<int> shape) {
  require(Tensor<T>::numel_of(shape) == a.value().size(), "reshape: element count mismatch");
  Tensor<T> out(std::move(shape), a.value().data);
  return a.graph->record(std::move(out), {a}, [a](Graph<T>& g, int self) {
    add_into(g.grad(a.id), g.grad(self));
  });
}

namespace {
template <typename T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
}

template <typename T>
Var<T> gelu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kGeluC<T> * (v + T(0.044715) * v * v * v)));
  }
  return x.graph->record(std::move(out), {x}, [x](Graph<T>& g, int self) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      const T th = std::tanh(kGeluC<T> * (v + T(0.044715) * v * v * v));
      const T d = T(0.5) * (T(1) + th) +
                  T(0.5) * v * (T(1) - th * th) * kGeluC<T> * (T(1) + T(3 * 0.044715) * v * v);
      gx[i] += go[i] * d;
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    out[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return x.graph->record(std::move(out), {x}, [x](Graph<T>& g, int self) {
    const Tensor<T>& y = g.value(self);
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += go[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& w) {
  require(!xs.empty() && xs.size() == w.size(), "weighted_sum: size mismatch");
  T total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    require(xs[i].value().size() == 1, "weighted_sum: inputs must be scalars");
    total += w[i] * xs[i].value()[0];
  }
  return xs[0].graph->record(Tensor<T>({1}, total), xs, [xs, w](Graph<T>& g, int self) {
    const T go = g.grad(self)[0];
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (g.needs_grad(xs[i].id)) g.grad(xs[i].id)[0] += w[i] * go;
  });
}

// ---------------------------------------------------------------------------
// Convolutional

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(xv.rank() == 3 && wv.rank() == 4, "conv2d: expects x[C,H,W] and w[O,C,k,k]");
  require(wv.dim(1) == xv.dim(0), "conv2d: channel mismatch");
  require(b.value().size() == static_cast<std::size_t>(wv.dim(0)), "conv2d: bias size mismatch");
  const int o = wv.dim(0), k = wv.dim(2);
  const int ho = (xv.dim(1) + 2 * pad - k) / stride + 1;
  const int wo = (xv.dim(2) + 2 * pad - k) / stride + 1;
  const int ck = xv.dim(0) * k * k;
  const int hw = ho * wo;
  auto cols = std::make_shared<std::vector<T>>();
  im2col(xv, k, stride, pad, ho, wo, *cols);
  Tensor<T> out({o, ho, wo});
  CMapM<T> cm(cols->data(), ck, hw);
  as_mat(out, o, hw).noalias() = as_mat(wv, o, ck) * cm;
  const Tensor<T>& bv = b.value();
  for (int oc = 0; oc < o; ++oc) {
    T* r = out.data.data() + static_cast<std::size_t>(oc) * hw;
    for (int i = 0; i < hw; ++i) r[i] += bv[static_cast<std::size_t>(oc)];
  }
  return x.graph->record(
      std::move(out), {x, w, b}, [x, w, b, cols, stride, pad, o, k, ho, wo, ck, hw](Graph<T>& g, int self) {
        const Tensor<T>& go = g.grad(self);
        CMapM<T> gom(go.data.data(), o, hw);
        CMapM<T> cm(cols->data(), ck, hw);
        if (g.needs_grad(w.id)) as_mat(g.grad(w.id), o, ck).noalias() += gom * cm.transpose();
        if (g.needs_grad(b.id)) {
          Tensor<T>& gb = g.grad(b.id);
          for (int oc = 0; oc < o; ++oc) gb[static_cast<std::size_t>(oc)] += gom.row(oc).sum();
        }
        if (g.needs_grad(x.id)) {
          std::vector<T> dcols(static_cast<std::size_t>(ck) * hw);
          MapM<T>(dcols.data(), ck, hw).noalias() = as_mat(w.value(), o, ck).transpose() * gom;
          col2im_add(dcols, k, stride, pad, ho, wo, g.grad(x.id));
        }
      });
}

template <typename T>
Var<T> avg_pool2(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3 && xv.dim(1) % 2 == 0 && xv.dim(2) % 2 == 0, "avg_pool2: needs even [C,H,W]");
  const int c = xv.dim(0), h = xv.dim(1) / 2, w = xv.dim(2) / 2;
  Tensor<T> out({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out.at(ci, i, j) = T(0.25) * (xv.at(ci, 2 * i, 2 * j) + xv.at(ci, 2 * i, 2 * j + 1) +
                                      xv.at(ci, 2 * i + 1, 2 * j) + xv.at(ci, 2 * i + 1, 2 * j + 1));
  return x.graph->record(std::move(out), {x}, [x, c, h, w](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const T v = T(0.25) * go.at(ci, i, j);
          gx.at(ci, 2 * i, 2 * j) += v;
          gx.at(ci, 2 * i, 2 * j + 1) += v;
          gx.at(ci, 2 * i + 1, 2 * j) += v;
          gx.at(ci, 2 * i + 1, 2 * j + 1) += v;
        }
  });
}

template <typename T>
Var<T> upsample2(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "upsample2: needs [C,H,W]");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) out.at(ci, i, j) = xv.at(ci, i / 2, j / 2);
  return x.graph->record(std::move(out), {x}, [x, c, h, w](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) gx.at(ci, i / 2, j / 2) += go.at(ci, i, j);
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.rank() == 3 && bv.rank() == 3 && av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2),
          "concat_channels: spatial mismatch");
  Tensor<T> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t na = av.size();
  return a.graph->record(std::move(out), {a, b}, [a, b, na](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    if (g.needs_grad(a.id)) {
      Tensor<T>& ga = g.grad(a.id);
      for (std::size_t i = 0; i < na; ++i) ga[i] += go[i];
    }
    if (g.needs_grad(b.id)) {
      Tensor<T>& gb = g.grad(b.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[na + i];
    }
  });
}

template <typename T>
Var<T> broadcast_grid(Var<T> v, int h, int w) {
  const Tensor<T>& vv = v.value();
  const int d = static_cast<int>(vv.size());
  Tensor<T> out({d, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < d; ++i)
    std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(i * hw), hw, vv[static_cast<std::size_t>(i)]);
  return v.graph->record(std::move(out), {v}, [v, d, hw](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gv = g.grad(v.id);
    for (int i = 0; i < d; ++i) {
      T s = 0;
      const T* p = go.data.data() + i * hw;
      for (std::size_t j = 0; j < hw; ++j) s += p[j];
      gv[static_cast<std::size_t>(i)] += s;
    }
  });
}

template <typename T>
Var<T> grid_to_rows(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "grid_to_rows: needs [C,H,W]");
  const int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  Tensor<T> out({hw, c});
  as_mat(out, hw, c) = as_mat(xv, c, hw).transpose();
  return x.graph->record(std::move(out), {x}, [x, c, hw](Graph<T>& g, int self) {
    as_mat(g.grad(x.id), c, hw) += as_mat(g.grad(self), hw, c).transpose();
  });
}

// ---------------------------------------------------------------------------
// Sequence ops

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(0), "linear: shape mismatch");
  require(b.value().size() == static_cast<std::size_t>(wv.dim(1)), "linear: bias size mismatch");
  const int n = xv.dim(0), in = wv.dim(0), outd = wv.dim(1);
  Tensor<T> out({n, outd});
  auto om = as_mat(out, n, outd);
  om.noalias() = as_mat(xv, n, in) * as_mat(wv, in, outd);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data.data(), outd);
  return x.graph->record(std::move(out), {x, w, b}, [x, w, b, n, in, outd](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    auto gom = as_mat(go, n, outd);
    if (g.needs_grad(x.id)) as_mat(g.grad(x.id), n, in).noalias() += gom * as_mat(w.value(), in, outd).transpose();
    if (g.needs_grad(w.id)) as_mat(g.grad(w.id), in, outd).noalias() += as_mat(x.value(), n, in).transpose() * gom;
    if (g.needs_grad(b.id)) as_mat(g.grad(b.id), 1, outd) += gom.colwise().sum();
  });
}

template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids) {
  const Tensor<T>& tv = table.value();
  require(tv.rank() == 2, "embedding: table must be [V,D]");
  const int v = tv.dim(0), d = tv.dim(1), n = static_cast<int>(ids.size());
  Tensor<T> out({n, d});
  for (int i = 0; i < n; ++i) {
    require(ids[static_cast<std::size_t>(i)] >= 0 && ids[static_cast<std::size_t>(i)] < v, "embedding: id out of range");
    std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(ids[static_cast<std::size_t>(i)]) * d, d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  return table.graph->record(std::move(out), {table}, [table, ids, d](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gt = g.grad(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < d; ++j) gt.at(ids[i], j) += go.at(static_cast<int>(i), j);
  });
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1), "concat_rows: width mismatch");
  Tensor<T> out({av.dim(0) + bv.dim(0), av.dim(1)});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t na = av.size();
  return a.graph->record(std::move(out), {a, b}, [a, b, na](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    if (g.needs_grad(a.id)) {
      Tensor<T>& ga = g.grad(a.id);
      for (std::size_t i = 0; i < na; ++i) ga[i] += go[i];
    }
    if (g.needs_grad(b.id)) {
      Tensor<T>& gb = g.grad(b.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[na + i];
    }
  });
}

template <typename T>
Var<T> add_leading_rows(Var<T> x, Var<T> table) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& tv = table.value();
  require(xv.rank() == 2 && tv.rank() == 2 && xv.dim(1) == tv.dim(1) && xv.dim(0) <= tv.dim(0),
          "add_leading_rows: shape mismatch");
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tv[i];
  return x.graph->record(std::move(out), {x, table}, [x, table](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    if (g.needs_grad(x.id)) add_into(g.grad(x.id), go);
    if (g.needs_grad(table.id)) {
      Tensor<T>& gt = g.grad(table.id);
      for (std::size_t i = 0; i < go.size(); ++i) gt[i] += go[i];
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 2, "layer_norm: needs [N,D]");
  const int n = xv.dim(0), d = xv.dim(1);
  require(gamma.value().size() == static_cast<std::size_t>(d) && beta.value().size() == static_cast<std::size_t>(d),
          "layer_norm: affine size mismatch");
  Tensor<T> out({n, d});
  auto xhat = std::make_shared<Tensor<T>>(std::vector<int>{n, d});
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (int i = 0; i < n; ++i) {
    T mean = 0;
    for (int j = 0; j < d; ++j) mean += xv.at(i, j);
    mean /= d;
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xv.at(i, j) - mean) * (xv.at(i, j) - mean);
    var /= d;
    const T r = T(1) / std::sqrt(var + T(1e-5));
    (*rstd)[static_cast<std::size_t>(i)] = r;
    for (int j = 0; j < d; ++j) {
      const T xh = (xv.at(i, j) - mean) * r;
      xhat->at(i, j) = xh;
      out.at(i, j) = xh * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  }
  return x.graph->record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, n, d](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    const Tensor<T>& gv = gamma.value();
    if (g.needs_grad(gamma.id) || g.needs_grad(beta.id)) {
      Tensor<T>& gg = g.grad(gamma.id);
      Tensor<T>& gb = g.grad(beta.id);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
          gg[static_cast<std::size_t>(j)] += go.at(i, j) * xhat->at(i, j);
          gb[static_cast<std::size_t>(j)] += go.at(i, j);
        }
    }
    if (g.needs_grad(x.id)) {
      Tensor<T>& gx = g.grad(x.id);
      std::vector<T> dxh(static_cast<std::size_t>(d));
      for (int i = 0; i < n; ++i) {
        T m1 = 0, m2 = 0;
        for (int j = 0; j < d; ++j) {
          dxh[static_cast<std::size_t>(j)] = go.at(i, j) * gv[static_cast<std::size_t>(j)];
          m1 += dxh[static_cast<std::size_t>(j)];
          m2 += dxh[static_cast<std::size_t>(j)] * xhat->at(i, j);
        }
        m1 /= d;
        m2 /= d;
        const T r = (*rstd)[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j)
          gx.at(i, j) += r * (dxh[static_cast<std::size_t>(j)] - m1 - xhat->at(i, j) * m2);
      }
    }
  });
}

template <typename T>
Var<T> causal_attention(Var<T> qkv, int heads) {
  const Tensor<T>& xv = qkv.value();
  require(xv.rank() == 2 && xv.dim(1) % 3 == 0, "causal_attention: needs qkv[N,3D]");
  const int n = xv.dim(0), d = xv.dim(1) / 3;
  require(heads > 0 && d % heads == 0, "causal_attention: D not divisible by heads");
  const int dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  auto xm = as_mat(xv, n, 3 * d);
  // Per-head softmax weights, kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMat<T>>>(static_cast<std::size_t>(heads));
  Tensor<T> out({n, d});
  auto om = as_mat(out, n, d);
  for (int h = 0; h < heads; ++h) {
    const RowMat<T> q = xm.middleCols(h * dh, dh);
    const RowMat<T> k = xm.middleCols(d + h * dh, dh);
    const RowMat<T> v = xm.middleCols(2 * d + h * dh, dh);
    RowMat<T> s = (q * k.transpose()) * sc;
    for (int i = 0; i < n; ++i) {
      T mx = s(i, 0);
      for (int j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
      T z = 0;
      for (int j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        z += s(i, j);
      }
      for (int j = 0; j <= i; ++j) s(i, j) /= z;
      for (int j = i + 1; j < n; ++j) s(i, j) = 0;
    }
    om.middleCols(h * dh, dh).noalias() = s * v;
    (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  return qkv.graph->record(std::move(out), {qkv}, [qkv, probs, heads, n, d, dh, sc](Graph<T>& g, int self) {
    auto gom = as_mat(g.grad(self), n, d);
    auto xm = as_mat(qkv.value(), n, 3 * d);
    auto gx = as_mat(g.grad(qkv.id), n, 3 * d);
    for (int h = 0; h < heads; ++h) {
      const RowMat<T>& p = (*probs)[static_cast<std::size_t>(h)];
      const RowMat<T> q = xm.middleCols(h * dh, dh);
      const RowMat<T> k = xm.middleCols(d + h * dh, dh);
      const RowMat<T> v = xm.middleCols(2 * d + h * dh, dh);
      const RowMat<T> go = gom.middleCols(h * dh, dh);
      gx.middleCols(2 * d + h * dh, dh).noalias() += p.transpose() * go;
      RowMat<T> dp = go * v.transpose();
      for (int i = 0; i < n; ++i) {
        T dot = 0;
        for (int j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
        for (int j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * sc;
        for (int j = i + 1; j < n; ++j) dp(i, j) = 0;
      }
      gx.middleCols(h * dh, dh).noalias() += dp * k;
      gx.middleCols(d + h * dh, dh).noalias() += dp.transpose() * q;
    }
  });
}

template <typename T>
Var<T> take_rows(Var<T> x, const std::vector<int>& rows) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 2, "take_rows: needs [N,D]");
  const int d = xv.dim(1);
  Tensor<T> out({static_cast<int>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < xv.dim(0), "take_rows: row out of range");
    std::copy_n(xv.data.begin() + static_cast<std::ptrdiff_t>(rows[i]) * d, d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  return x.graph->record(std::move(out), {x}, [x, rows, d](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int j = 0; j < d; ++j) gx.at(rows[i], j) += go.at(static_cast<int>(i), j);
  });
}

template <typename T>
Var<T> row(Var<T> x, int i) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 2 && i >= 0 && i < xv.dim(0), "row: index out of range");
  const int d = xv.dim(1);
  Tensor<T> out({d});
  std::copy_n(xv.data.begin() + static_cast<std::ptrdiff_t>(i) * d, d, out.data.begin());
  return x.graph->record(std::move(out), {x}, [x, i, d](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int j = 0; j < d; ++j) gx.at(i, j) += go[static_cast<std::size_t>(j)];
  });
}

#define GROUNDSEG_INSTANTIATE(T)                                                   \
  template class Graph<T>;                                                         \
  template Var<T> add(Var<T>, Var<T>);                                             \
  template Var<T> scale(Var<T>, T);                                                \
  template Var<T> reshape(Var<T>, std::vector<int>);                               \
  template Var<T> gelu(Var<T>);                                                    \
  template Var<T> sigmoid(Var<T>);                                                 \
  template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&); \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                        \
  template Var<T> avg_pool2(Var<T>);                                               \
  template Var<T> upsample2(Var<T>);                                               \
  template Var<T> concat_channels(Var<T>, Var<T>);                                 \
  template Var<T> broadcast_grid(Var<T>, int, int);                                \
  template Var<T> grid_to_rows(Var<T>);                                            \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                  \
  template Var<T> embedding(Var<T>, const std::vector<int>&);                      \
  template Var<T> concat_rows(Var<T>, Var<T>);                                     \
  template Var<T> add_leading_rows(Var<T>, Var<T>);                                \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>);                              \
  template Var<T> causal_attention(Var<T>, int);                                   \
  template Var<T> take_rows(Var<T>, const std::vector<int>&);                      \
  template Var<T> row(Var<T>, int);

GROUNDSEG_INSTANTIATE(float)
GROUNDSEG_INSTANTIATE(double)

#undef GROUNDSEG_INSTANTIATE

}  // namespace groundseg::ag

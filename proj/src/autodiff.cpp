#include "ctnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ctnet/error.hpp"

// Every op follows the same pattern: validate shapes, compute the forward
// value into a fresh Tensor, then register a closure that scatters the
// node's grad into its parents. Closures capture parent ids (and sizes),
// never Tensor copies; saved values are read back from the tape.

namespace ctnet {

namespace {

#if !defined(NDEBUG) || defined(CTNET_CHECK_FINITE)
constexpr bool kFiniteChecks = true;
#else
constexpr bool kFiniteChecks = false;
#endif

[[noreturn]] void shape_fail(const std::string& what) { throw ShapeError(what); }

void require(bool ok, const char* what) {
  if (!ok) shape_fail(what);
}

std::int64_t rows_before_last(const Tensor& t) {
  return t.size() / t.dim(t.rank() - 1);
}

// --- shared convolution cores (stride 1) -----------------------------------

void conv_forward(const Tensor& x, const Tensor& w, const double* bias, int pad,
                  Tensor& y) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const double* xp = x.data();
  const double* wp = w.data();
  double* yp = y.data();
  for (int in = 0; in < n; ++in)
    for (int co = 0; co < cout; ++co) {
      const double b = bias ? bias[co] : 0.0;
      for (int oh = 0; oh < h; ++oh)
        for (int ow = 0; ow < wd; ++ow) {
          double acc = b;
          for (int ci = 0; ci < cin; ++ci) {
            const double* xc = xp + ((static_cast<std::int64_t>(in) * cin + ci) * h) * wd;
            const double* wc = wp + ((static_cast<std::int64_t>(co) * cin + ci) * kh) * kw;
            for (int i = 0; i < kh; ++i) {
              const int ih = oh + i - pad;
              if (ih < 0 || ih >= h) continue;
              for (int j = 0; j < kw; ++j) {
                const int iw = ow + j - pad;
                if (iw < 0 || iw >= wd) continue;
                acc += xc[static_cast<std::int64_t>(ih) * wd + iw] * wc[i * kw + j];
              }
            }
          }
          yp[((static_cast<std::int64_t>(in) * cout + co) * h + oh) * wd + ow] = acc;
        }
    }
}

void conv_backward(const Tensor& dy, const Tensor& x, const Tensor& w, int pad,
                   Tensor* dx, Tensor* dw, Tensor* db) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const double* gp = dy.data();
  const double* xp = x.data();
  const double* wp = w.data();
  for (int in = 0; in < n; ++in)
    for (int co = 0; co < cout; ++co)
      for (int oh = 0; oh < h; ++oh)
        for (int ow = 0; ow < wd; ++ow) {
          const double g =
              gp[((static_cast<std::int64_t>(in) * cout + co) * h + oh) * wd + ow];
          if (db) db->data()[co] += g;
          for (int ci = 0; ci < cin; ++ci) {
            const std::int64_t xoff = ((static_cast<std::int64_t>(in) * cin + ci) * h) * wd;
            const std::int64_t woff = ((static_cast<std::int64_t>(co) * cin + ci) * kh) * kw;
            for (int i = 0; i < kh; ++i) {
              const int ih = oh + i - pad;
              if (ih < 0 || ih >= h) continue;
              for (int j = 0; j < kw; ++j) {
                const int iw = ow + j - pad;
                if (iw < 0 || iw >= wd) continue;
                if (dw)
                  dw->data()[woff + i * kw + j] +=
                      g * xp[xoff + static_cast<std::int64_t>(ih) * wd + iw];
                if (dx)
                  dx->data()[xoff + static_cast<std::int64_t>(ih) * wd + iw] +=
                      g * wp[woff + i * kw + j];
              }
            }
          }
        }
}

void depthwise_forward(const Tensor& x, const Tensor& w, const double* bias,
                       Tensor& y) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const double* xp = x.data();
  const double* wp = w.data();
  double* yp = y.data();
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch) {
      const double* xc = xp + ((static_cast<std::int64_t>(in) * c + ch) * h) * wd;
      const double* wc = wp + static_cast<std::int64_t>(ch) * 9;
      double* yc = yp + ((static_cast<std::int64_t>(in) * c + ch) * h) * wd;
      const double b = bias ? bias[ch] : 0.0;
      for (int oh = 0; oh < h; ++oh)
        for (int ow = 0; ow < wd; ++ow) {
          double acc = b;
          for (int i = 0; i < 3; ++i) {
            const int ih = oh + i - 1;
            if (ih < 0 || ih >= h) continue;
            for (int j = 0; j < 3; ++j) {
              const int iw = ow + j - 1;
              if (iw < 0 || iw >= wd) continue;
              acc += xc[static_cast<std::int64_t>(ih) * wd + iw] * wc[i * 3 + j];
            }
          }
          yc[static_cast<std::int64_t>(oh) * wd + ow] = acc;
        }
    }
}

void depthwise_backward(const Tensor& dy, const Tensor& x, const Tensor& w,
                        Tensor* dx, Tensor* dw, Tensor* db) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const double* gp = dy.data();
  const double* xp = x.data();
  const double* wp = w.data();
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch) {
      const std::int64_t off = ((static_cast<std::int64_t>(in) * c + ch) * h) * wd;
      const std::int64_t woff = static_cast<std::int64_t>(ch) * 9;
      for (int oh = 0; oh < h; ++oh)
        for (int ow = 0; ow < wd; ++ow) {
          const double g = gp[off + static_cast<std::int64_t>(oh) * wd + ow];
          if (db) db->data()[ch] += g;
          for (int i = 0; i < 3; ++i) {
            const int ih = oh + i - 1;
            if (ih < 0 || ih >= h) continue;
            for (int j = 0; j < 3; ++j) {
              const int iw = ow + j - 1;
              if (iw < 0 || iw >= wd) continue;
              if (dw)
                dw->data()[woff + i * 3 + j] +=
                    g * xp[off + static_cast<std::int64_t>(ih) * wd + iw];
              if (dx)
                dx->data()[off + static_cast<std::int64_t>(ih) * wd + iw] +=
                    g * wp[woff + i * 3 + j];
            }
          }
        }
    }
}

Tensor permute_copy(const Tensor& in, const std::vector<int>& perm) {
  const int r = in.rank();
  std::vector<int> out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = in.dim(perm[static_cast<std::size_t>(i)]);
  Tensor out(out_shape);

  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * in.dim(i + 1);

  // stride of each output axis expressed in input-flat units
  std::vector<std::int64_t> step(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) step[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

  std::vector<int> idx(static_cast<std::size_t>(r), 0);
  const double* src = in.data();
  double* dst = out.data();
  const std::int64_t total = in.size();
  std::int64_t src_off = 0;
  for (std::int64_t flat = 0; flat < total; ++flat) {
    dst[flat] = src[src_off];
    for (int ax = r - 1; ax >= 0; --ax) {
      idx[static_cast<std::size_t>(ax)]++;
      src_off += step[static_cast<std::size_t>(ax)];
      if (idx[static_cast<std::size_t>(ax)] < out_shape[static_cast<std::size_t>(ax)]) break;
      src_off -= step[static_cast<std::size_t>(ax)] * out_shape[static_cast<std::size_t>(ax)];
      idx[static_cast<std::size_t>(ax)] = 0;
    }
  }
  return out;
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return inv;
}

int reflect_index(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

}  // namespace

// --- tape machinery ---------------------------------------------------------

void Graph::check(Var v) const {
  if (!v.defined() || v.g_ != this)
    throw ShapeError("Var does not belong to this graph");
}

Var Graph::make(const char* op, Tensor value, std::vector<int> parents,
                std::function<void(Graph&, int)> bw) {
  if (kFiniteChecks && !value.all_finite())
    throw NumericError(std::string("non-finite values produced by op '") + op + "'");
  Node n;
  n.value = std::move(value);
  n.op = op;
  bool needs = false;
  if (grad_enabled_) {
    for (int p : parents) needs = needs || node(p).requires_grad;
  }
  n.requires_grad = needs;
  if (needs) {
    n.parents = std::move(parents);
    n.backward = std::move(bw);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.is_leaf = true;
  n.requires_grad = grad_enabled_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Graph::grad_buffer(int id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

const Tensor& Graph::grad_of(int id) const {
  const Node& n = node(id);
  if (n.grad.empty()) throw ShapeError("gradient not computed for this node");
  return n.grad;
}

void Graph::backward(Var loss) {
  check(loss);
  if (node(loss.id_).value.size() != 1)
    throw ShapeError("backward: loss must be a scalar");
  if (!node(loss.id_).requires_grad)
    throw ShapeError("backward: loss does not depend on any tracked leaf");
  // interior grads are per-pass scratch; leaf grads accumulate
  for (Node& n : nodes_)
    if (!n.is_leaf) n.grad = Tensor();
  grad_buffer(loss.id_).fill(1.0);
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = node(id);
    if (n.is_leaf || !n.requires_grad || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

void Graph::zero_grad() {
  for (Node& n : nodes_) n.grad = Tensor();
}

// --- convolutions -----------------------------------------------------------

Var Graph::conv2d(Var x, Var w, Var b) {
  check(x), check(w), check(b);
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  const Tensor& bv = b.val();
  require(xv.rank() == 4, "conv2d: input must be [N,Cin,H,W]");
  require(wv.rank() == 4, "conv2d: weight must be [Cout,Cin,3,3]");
  if (wv.dim(2) != 3 || wv.dim(3) != 3)
    shape_fail("conv2d: unsupported kernel geometry " + Tensor::shape_string(wv.shape()) +
               " (only 3x3, padding 1, stride 1)");
  if (wv.dim(1) != xv.dim(1))
    shape_fail("conv2d: channel mismatch, input has " + std::to_string(xv.dim(1)) +
               " channels but weight expects " + std::to_string(wv.dim(1)));
  require(bv.rank() == 1 && bv.dim(0) == wv.dim(0), "conv2d: bias must be [Cout]");

  Tensor y({xv.dim(0), wv.dim(0), xv.dim(2), xv.dim(3)});
  conv_forward(xv, wv, bv.data(), 1, y);
  const int xi = x.id_, wi = w.id_, bi = b.id_;
  return make("conv2d", std::move(y), {xi, wi, bi}, [xi, wi, bi](Graph& g, int self) {
    const Tensor& dy = g.node(self).grad;
    Tensor* dx = g.node(xi).requires_grad ? &g.grad_buffer(xi) : nullptr;
    Tensor* dw = g.node(wi).requires_grad ? &g.grad_buffer(wi) : nullptr;
    Tensor* db = g.node(bi).requires_grad ? &g.grad_buffer(bi) : nullptr;
    conv_backward(dy, g.value_of(xi), g.value_of(wi), 1, dx, dw, db);
  });
}

Var Graph::depthwise_conv2d(Var x, Var w) { return depthwise_conv2d(x, w, Var()); }

Var Graph::depthwise_conv2d(Var x, Var w, Var b) {
  check(x), check(w);
  const bool has_bias = b.defined();
  if (has_bias) check(b);
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  require(xv.rank() == 4, "depthwise_conv2d: input must be [N,C,H,W]");
  require(wv.rank() == 4 && wv.dim(1) == 1 && wv.dim(2) == 3 && wv.dim(3) == 3,
          "depthwise_conv2d: weight must be [C,1,3,3]");
  if (wv.dim(0) != xv.dim(1))
    shape_fail("depthwise_conv2d: channel mismatch, input has " +
               std::to_string(xv.dim(1)) + " channels but weight has " +
               std::to_string(wv.dim(0)));
  if (has_bias)
    require(b.val().rank() == 1 && b.val().dim(0) == xv.dim(1),
            "depthwise_conv2d: bias must be [C]");

  Tensor y(xv.shape());
  depthwise_forward(xv, wv, has_bias ? b.val().data() : nullptr, y);
  const int xi = x.id_, wi = w.id_, bi = has_bias ? b.id_ : -1;
  std::vector<int> parents = {xi, wi};
  if (has_bias) parents.push_back(bi);
  return make("depthwise_conv2d", std::move(y), std::move(parents),
              [xi, wi, bi](Graph& g, int self) {
                const Tensor& dy = g.node(self).grad;
                Tensor* dx = g.node(xi).requires_grad ? &g.grad_buffer(xi) : nullptr;
                Tensor* dw = g.node(wi).requires_grad ? &g.grad_buffer(wi) : nullptr;
                Tensor* db = (bi >= 0 && g.node(bi).requires_grad)
                                 ? &g.grad_buffer(bi)
                                 : nullptr;
                depthwise_backward(dy, g.value_of(xi), g.value_of(wi), dx, dw, db);
              });
}

Var Graph::pointwise_conv2d(Var x, Var w, Var b) {
  check(x), check(w), check(b);
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  require(xv.rank() == 4, "pointwise_conv2d: input must be [N,Cin,H,W]");
  require(wv.rank() == 4 && wv.dim(2) == 1 && wv.dim(3) == 1,
          "pointwise_conv2d: weight must be [Cout,Cin,1,1]");
  if (wv.dim(1) != xv.dim(1))
    shape_fail("pointwise_conv2d: channel mismatch, input has " +
               std::to_string(xv.dim(1)) + " channels but weight expects " +
               std::to_string(wv.dim(1)));
  require(b.val().rank() == 1 && b.val().dim(0) == wv.dim(0),
          "pointwise_conv2d: bias must be [Cout]");

  Tensor y({xv.dim(0), wv.dim(0), xv.dim(2), xv.dim(3)});
  conv_forward(xv, wv, b.val().data(), 0, y);
  const int xi = x.id_, wi = w.id_, bi = b.id_;
  return make("pointwise_conv2d", std::move(y), {xi, wi, bi},
              [xi, wi, bi](Graph& g, int self) {
                const Tensor& dy = g.node(self).grad;
                Tensor* dx = g.node(xi).requires_grad ? &g.grad_buffer(xi) : nullptr;
                Tensor* dw = g.node(wi).requires_grad ? &g.grad_buffer(wi) : nullptr;
                Tensor* db = g.node(bi).requires_grad ? &g.grad_buffer(bi) : nullptr;
                conv_backward(dy, g.value_of(xi), g.value_of(wi), 0, dx, dw, db);
              });
}

// --- pointwise / normalization ----------------------------------------------

Var Graph::relu(Var x) {
  check(x);
  const Tensor& xv = x.val();
  Tensor y(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const int xi = x.id_;
  return make("relu", std::move(y), {xi}, [xi](Graph& g, int self) {
    if (!g.node(xi).requires_grad) return;
    const Tensor& dy = g.node(self).grad;
    const Tensor& xv = g.value_of(xi);
    Tensor& dx = g.grad_buffer(xi);
    for (std::int64_t i = 0; i < xv.size(); ++i)
      if (xv[i] > 0.0) dx[i] += dy[i];
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  check(x), check(gamma), check(beta);
  const Tensor& xv = x.val();
  const int d = xv.dim(xv.rank() - 1);
  require(gamma.val().rank() == 1 && gamma.val().dim(0) == d &&
              beta.val().rank() == 1 && beta.val().dim(0) == d,
          "layer_norm: gamma/beta must match the last axis");
  const std::int64_t rows = rows_before_last(xv);

  Tensor y(xv.shape());
  Tensor mean({static_cast<int>(rows)});
  Tensor inv_std({static_cast<int>(rows)});
  const double* gp = gamma.val().data();
  const double* bp = beta.val().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double* yr = y.data() + r * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = inv;
    for (int i = 0; i < d; ++i) yr[i] = gp[i] * ((xr[i] - mu) * inv) + bp[i];
  }

  const int xi = x.id_, gi = gamma.id_, bi = beta.id_;
  return make(
      "layer_norm", std::move(y), {xi, gi, bi},
      [xi, gi, bi, d, rows, mean = std::move(mean),
       inv_std = std::move(inv_std)](Graph& g, int self) {
        const Tensor& dy = g.node(self).grad;
        const Tensor& xv = g.value_of(xi);
        const double* gp = g.value_of(gi).data();
        Tensor* dx = g.node(xi).requires_grad ? &g.grad_buffer(xi) : nullptr;
        Tensor* dg = g.node(gi).requires_grad ? &g.grad_buffer(gi) : nullptr;
        Tensor* db = g.node(bi).requires_grad ? &g.grad_buffer(bi) : nullptr;
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* xr = xv.data() + r * d;
          const double* dyr = dy.data() + r * d;
          const double mu = mean[r];
          const double inv = inv_std[r];
          double s1 = 0.0, s2 = 0.0;
          for (int i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mu) * inv;
            const double dxhat = dyr[i] * gp[i];
            s1 += dxhat;
            s2 += dxhat * xhat;
            if (dg) dg->data()[i] += dyr[i] * xhat;
            if (db) db->data()[i] += dyr[i];
          }
          if (dx) {
            double* dxr = dx->data() + r * d;
            for (int i = 0; i < d; ++i) {
              const double xhat = (xr[i] - mu) * inv;
              const double dxhat = dyr[i] * gp[i];
              dxr[i] += inv * (dxhat - s1 / d - xhat * s2 / d);
            }
          }
        }
      });
}

Var Graph::softmax(Var x) {
  check(x);
  const Tensor& xv = x.val();
  const int d = xv.dim(xv.rank() - 1);
  const std::int64_t rows = rows_before_last(xv);
  Tensor y(xv.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double* yr = y.data() + r * d;
    double m = xr[0];
    for (int i = 1; i < d; ++i) m = std::max(m, xr[i]);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) {
      yr[i] = std::exp(xr[i] - m);
      sum += yr[i];
    }
    for (int i = 0; i < d; ++i) yr[i] /= sum;
  }
  const int xi = x.id_;
  return make("softmax", std::move(y), {xi}, [xi, d, rows](Graph& g, int self) {
    if (!g.node(xi).requires_grad) return;
    const Tensor& dy = g.node(self).grad;
    const Tensor& yv = g.value_of(self);
    Tensor& dx = g.grad_buffer(xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* yr = yv.data() + r * d;
      const double* dyr = dy.data() + r * d;
      double* dxr = dx.data() + r * d;
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += dyr[i] * yr[i];
      for (int i = 0; i < d; ++i) dxr[i] += yr[i] * (dyr[i] - dot);
    }
  });
}

// --- linear algebra ----------------------------------------------------------

Var Graph::linear(Var x, Var w, Var b) {
  check(x), check(w), check(b);
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  require(wv.rank() == 2, "linear: weight must be [Dout,Din]");
  const int din = wv.dim(1), dout = wv.dim(0);
  if (xv.dim(xv.rank() - 1) != din)
    shape_fail("linear: input last axis " + std::to_string(xv.dim(xv.rank() - 1)) +
               " does not match weight Din " + std::to_string(din));
  require(b.val().rank() == 1 && b.val().dim(0) == dout, "linear: bias must be [Dout]");
  const std::int64_t rows = rows_before_last(xv);

  std::vector<int> out_shape = xv.shape();
  out_shape.back() = dout;
  Tensor y(out_shape);
  const double* xp = xv.data();
  const double* wp = wv.data();
  const double* bp = b.val().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xp + r * din;
    double* yr = y.data() + r * dout;
    for (int o = 0; o < dout; ++o) {
      const double* wr = wp + static_cast<std::int64_t>(o) * din;
      double acc = bp[o];
      for (int i = 0; i < din; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  const int xi = x.id_, wi = w.id_, bi = b.id_;
  return make("linear", std::move(y), {xi, wi, bi},
              [xi, wi, bi, rows, din, dout](Graph& g, int self) {
                const Tensor& dy = g.node(self).grad;
                const Tensor& xv = g.value_of(xi);
                const Tensor& wv = g.value_of(wi);
                Tensor* dx = g.node(xi).requires_grad ? &g.grad_buffer(xi) : nullptr;
                Tensor* dw = g.node(wi).requires_grad ? &g.grad_buffer(wi) : nullptr;
                Tensor* db = g.node(bi).requires_grad ? &g.grad_buffer(bi) : nullptr;
                for (std::int64_t r = 0; r < rows; ++r) {
                  const double* dyr = dy.data() + r * dout;
                  const double* xr = xv.data() + r * din;
                  for (int o = 0; o < dout; ++o) {
                    const double gy = dyr[o];
                    if (gy == 0.0) continue;
                    if (db) db->data()[o] += gy;
                    const double* wr = wv.data() + static_cast<std::int64_t>(o) * din;
                    if (dx) {
                      double* dxr = dx->data() + r * din;
                      for (int i = 0; i < din; ++i) dxr[i] += gy * wr[i];
                    }
                    if (dw) {
                      double* dwr = dw->data() + static_cast<std::int64_t>(o) * din;
                      for (int i = 0; i < din; ++i) dwr[i] += gy * xr[i];
                    }
                  }
                }
              });
}

Var Graph::matmul(Var a, Var b) {
  check(a), check(b);
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  require((av.rank() == 2 && bv.rank() == 2) || (av.rank() == 3 && bv.rank() == 3),
          "matmul: expects [M,K]x[K,N] or [B,M,K]x[B,K,N]");
  const bool batched = av.rank() == 3;
  const int batch = batched ? av.dim(0) : 1;
  if (batched && bv.dim(0) != batch) shape_fail("matmul: batch dims differ");
  const int m = av.dim(batched ? 1 : 0);
  const int k = av.dim(batched ? 2 : 1);
  const int k2 = bv.dim(batched ? 1 : 0);
  const int n = bv.dim(batched ? 2 : 1);
  if (k != k2)
    shape_fail("matmul: inner dims differ (" + std::to_string(k) + " vs " +
               std::to_string(k2) + ")");

  Tensor y(batched ? std::vector<int>{batch, m, n} : std::vector<int>{m, n});
  for (int bb = 0; bb < batch; ++bb) {
    const double* ap = av.data() + static_cast<std::int64_t>(bb) * m * k;
    const double* bp = bv.data() + static_cast<std::int64_t>(bb) * k * n;
    double* yp = y.data() + static_cast<std::int64_t>(bb) * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int t = 0; t < k; ++t) acc += ap[i * k + t] * bp[t * n + j];
        yp[i * n + j] = acc;
      }
  }
  const int ai = a.id_, bi = b.id_;
  return make("matmul", std::move(y), {ai, bi},
              [ai, bi, batch, m, k, n](Graph& g, int self) {
                const Tensor& dy = g.node(self).grad;
                const Tensor& av = g.value_of(ai);
                const Tensor& bv = g.value_of(bi);
                Tensor* da = g.node(ai).requires_grad ? &g.grad_buffer(ai) : nullptr;
                Tensor* db = g.node(bi).requires_grad ? &g.grad_buffer(bi) : nullptr;
                for (int bb = 0; bb < batch; ++bb) {
                  const double* ap = av.data() + static_cast<std::int64_t>(bb) * m * k;
                  const double* bp = bv.data() + static_cast<std::int64_t>(bb) * k * n;
                  const double* gp = dy.data() + static_cast<std::int64_t>(bb) * m * n;
                  double* dap = da ? da->data() + static_cast<std::int64_t>(bb) * m * k : nullptr;
                  double* dbp = db ? db->data() + static_cast<std::int64_t>(bb) * k * n : nullptr;
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                      const double gy = gp[i * n + j];
                      if (gy == 0.0) continue;
                      for (int t = 0; t < k; ++t) {
                        if (dap) dap[i * k + t] += gy * bp[t * n + j];
                        if (dbp) dbp[t * n + j] += gy * ap[i * k + t];
                      }
                    }
                }
              });
}

// --- elementwise / structural --------------------------------------------------

Var Graph::add(Var a, Var b) {
  check(a), check(b);
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (!av.same_shape(bv))
    shape_fail("add: shape mismatch " + Tensor::shape_string(av.shape()) + " vs " +
               Tensor::shape_string(bv.shape()));
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
  const int ai = a.id_, bi = b.id_;
  return make("add", std::move(y), {ai, bi}, [ai, bi](Graph& g, int self) {
    const Tensor& dy = g.node(self).grad;
    if (g.node(ai).requires_grad) {
      Tensor& da = g.grad_buffer(ai);
      for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (g.node(bi).requires_grad) {
      Tensor& db = g.grad_buffer(bi);
      for (std::int64_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
    }
  });
}

Var Graph::add_broadcast(Var a, Var b) {
  check(a), check(b);
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  const int ra = av.rank(), rb = bv.rank();
  bool suffix = rb <= ra;
  for (int i = 0; suffix && i < rb; ++i)
    suffix = av.dim(ra - rb + i) == bv.dim(i);
  if (!suffix)
    shape_fail("add_broadcast: " + Tensor::shape_string(bv.shape()) +
               " is not a trailing suffix of " + Tensor::shape_string(av.shape()));
  const std::int64_t inner = bv.size();
  const std::int64_t outer = av.size() / inner;
  Tensor y(av.shape());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i)
      y[o * inner + i] = av[o * inner + i] + bv[i];
  const int ai = a.id_, bi = b.id_;
  return make("add_broadcast", std::move(y), {ai, bi},
              [ai, bi, outer, inner](Graph& g, int self) {
                const Tensor& dy = g.node(self).grad;
                if (g.node(ai).requires_grad) {
                  Tensor& da = g.grad_buffer(ai);
                  for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                }
                if (g.node(bi).requires_grad) {
                  Tensor& db = g.grad_buffer(bi);
                  for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < inner; ++i)
                      db[i] += dy[o * inner + i];
                }
              });
}

Var Graph::sub(Var a, Var b) {
  check(a), check(b);
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (!av.same_shape(bv))
    shape_fail("sub: shape mismatch " + Tensor::shape_string(av.shape()) + " vs " +
               Tensor::shape_string(bv.shape()));
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) y[i] = av[i] - bv[i];
  const int ai = a.id_, bi = b.id_;
  return make("sub", std::move(y), {ai, bi}, [ai, bi](Graph& g, int self) {
    const Tensor& dy = g.node(self).grad;
    if (g.node(ai).requires_grad) {
      Tensor& da = g.grad_buffer(ai);
      for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (g.node(bi).requires_grad) {
      Tensor& db = g.grad_buffer(bi);
      for (std::int64_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    }
  });
}

Var Graph::scale(Var a, double s) {
  check(a);
  const Tensor& av = a.val();
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) y[i] = av[i] * s;
  const int ai = a.id_;
  return make("scale", std::move(y), {ai}, [ai, s](Graph& g, int self) {
    if (!g.node(ai).requires_grad) return;
    const Tensor& dy = g.node(self).grad;
    Tensor& da = g.grad_buffer(ai);
    for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += s * dy[i];
  });
}

Var Graph::square(Var a) {
  check(a);
  const Tensor& av = a.val();
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) y[i] = av[i] * av[i];
  const int ai = a.id_;
  return make("square", std::move(y), {ai}, [ai](Graph& g, int self) {
    if (!g.node(ai).requires_grad) return;
    const Tensor& dy = g.node(self).grad;
    const Tensor& av = g.value_of(ai);
    Tensor& da = g.grad_buffer(ai);
    for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += 2.0 * av[i] * dy[i];
  });
}

Var Graph::reduce_sum(Var a) {
  check(a);
  const Tensor& av = a.val();
  double acc = 0.0;
  for (std::int64_t i = 0; i < av.size(); ++i) acc += av[i];
  const int ai = a.id_;
  return make("reduce_sum", Tensor::scalar(acc), {ai}, [ai](Graph& g, int self) {
    if (!g.node(ai).requires_grad) return;
    const double gy = g.node(self).grad[0];
    Tensor& da = g.grad_buffer(ai);
    for (std::int64_t i = 0; i < da.size(); ++i) da[i] += gy;
  });
}

Var Graph::concat_channels(const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_channels: needs at least one input");
  for (Var v : xs) check(v);
  const Tensor& first = xs[0].val();
  require(first.rank() == 4, "concat_channels: inputs must be [N,C,H,W]");
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int ctotal = 0;
  for (Var v : xs) {
    const Tensor& t = v.val();
    if (t.rank() != 4 || t.dim(0) != n || t.dim(2) != h || t.dim(3) != w)
      shape_fail("concat_channels: inputs must share N,H,W");
    ctotal += t.dim(1);
  }
  Tensor y({n, ctotal, h, w});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<int> ids;
  std::vector<int> chans;
  int coff = 0;
  for (Var v : xs) {
    const Tensor& t = v.val();
    const int c = t.dim(1);
    for (int in = 0; in < n; ++in)
      std::memcpy(y.data() + (static_cast<std::int64_t>(in) * ctotal + coff) * plane,
                  t.data() + static_cast<std::int64_t>(in) * c * plane,
                  static_cast<std::size_t>(c * plane) * sizeof(double));
    ids.push_back(v.id_);
    chans.push_back(c);
    coff += c;
  }
  return make("concat_channels", std::move(y), std::vector<int>(ids),
              [ids, chans, n, plane, ctotal](Graph& g, int self) {
                const Tensor& dy = g.node(self).grad;
                int coff = 0;
                for (std::size_t k = 0; k < ids.size(); ++k) {
                  const int c = chans[k];
                  if (g.node(ids[k]).requires_grad) {
                    Tensor& dx = g.grad_buffer(ids[k]);
                    for (int in = 0; in < n; ++in) {
                      const double* src =
                          dy.data() + (static_cast<std::int64_t>(in) * ctotal + coff) * plane;
                      double* dst = dx.data() + static_cast<std::int64_t>(in) * c * plane;
                      for (std::int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                    }
                  }
                  coff += c;
                }
              });
}

Var Graph::reshape(Var a, std::vector<int> shape) {
  check(a);
  const Tensor& av = a.val();
  if (Tensor::count(shape) != av.size())
    shape_fail("reshape: " + Tensor::shape_string(av.shape()) + " -> " +
               Tensor::shape_string(shape) + " changes element count");
  Tensor y = Tensor::from_data(shape, av.vec());
  const int ai = a.id_;
  return make("reshape", std::move(y), {ai}, [ai](Graph& g, int self) {
    if (!g.node(ai).requires_grad) return;
    const Tensor& dy = g.node(self).grad;
    Tensor& da = g.grad_buffer(ai);
    for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
  });
}

Var Graph::permute(Var a, std::vector<int> perm) {
  check(a);
  const Tensor& av = a.val();
  const int r = av.rank();
  require(static_cast<int>(perm.size()) == r, "permute: perm length must match rank");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int p : perm) {
    require(p >= 0 && p < r, "permute: axis out of range");
    require(!seen[static_cast<std::size_t>(p)], "permute: repeated axis");
    seen[static_cast<std::size_t>(p)] = true;
  }
  Tensor y = permute_copy(av, perm);
  const int ai = a.id_;
  return make("permute", std::move(y), {ai},
              [ai, inv = inverse_perm(perm)](Graph& g, int self) {
                if (!g.node(ai).requires_grad) return;
                Tensor back = permute_copy(g.node(self).grad, inv);
                Tensor& da = g.grad_buffer(ai);
                for (std::int64_t i = 0; i < back.size(); ++i) da[i] += back[i];
              });
}

// --- window tokenization ------------------------------------------------------

namespace {

// tokens[g,t,c] <-> pixels[n,c,wh*win+th, ww*win+tw]; a pure bijection, so
// gather assigns and scatter accumulates.
void gather_windows(int win, int n, int c, int h, int w, const double* pixels,
                    double* tokens) {
  const int nwh = h / win, nww = w / win;
  const int t = win * win;
  std::int64_t g = 0;
  for (int in = 0; in < n; ++in)
    for (int wh = 0; wh < nwh; ++wh)
      for (int ww = 0; ww < nww; ++ww, ++g)
        for (int th = 0; th < win; ++th)
          for (int tw = 0; tw < win; ++tw) {
            const std::int64_t tok = (g * t + th * win + tw) * c;
            for (int ch = 0; ch < c; ++ch)
              tokens[tok + ch] =
                  pixels[((static_cast<std::int64_t>(in) * c + ch) * h + wh * win + th) * w +
                         ww * win + tw];
          }
}

void scatter_windows(int win, int n, int c, int h, int w, const double* tokens,
                     double* pixels_accum) {
  const int nwh = h / win, nww = w / win;
  const int t = win * win;
  std::int64_t g = 0;
  for (int in = 0; in < n; ++in)
    for (int wh = 0; wh < nwh; ++wh)
      for (int ww = 0; ww < nww; ++ww, ++g)
        for (int th = 0; th < win; ++th)
          for (int tw = 0; tw < win; ++tw) {
            const std::int64_t tok = (g * t + th * win + tw) * c;
            for (int ch = 0; ch < c; ++ch)
              pixels_accum[((static_cast<std::int64_t>(in) * c + ch) * h + wh * win + th) * w +
                           ww * win + tw] += tokens[tok + ch];
          }
}

}  // namespace

Var Graph::window_partition(Var x, int window) {
  check(x);
  const Tensor& xv = x.val();
  require(xv.rank() == 4, "window_partition: input must be [N,C,H,W]");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (window < 2 || h % window != 0 || w % window != 0)
    shape_fail("window_partition: H,W (" + std::to_string(h) + "," + std::to_string(w) +
               ") must be multiples of window " + std::to_string(window));
  Tensor y({n * (h / window) * (w / window), window * window, c});
  gather_windows(window, n, c, h, w, xv.data(), y.data());
  const int xi = x.id_;
  return make("window_partition", std::move(y), {xi},
              [xi, window, n, c, h, w](Graph& g, int self) {
                if (!g.node(xi).requires_grad) return;
                Tensor& dx = g.grad_buffer(xi);
                scatter_windows(window, n, c, h, w, g.node(self).grad.data(), dx.data());
              });
}

Var Graph::window_merge(Var t, int window, int n, int h, int w) {
  check(t);
  const Tensor& tv = t.val();
  require(tv.rank() == 3, "window_merge: input must be [G,T,C]");
  const int c = tv.dim(2);
  if (window < 2 || h % window != 0 || w % window != 0 ||
      tv.dim(0) != n * (h / window) * (w / window) || tv.dim(1) != window * window)
    shape_fail("window_merge: token layout does not match geometry");
  Tensor y({n, c, h, w});
  scatter_windows(window, n, c, h, w, tv.data(), y.data());  // zero-init, so this assigns
  const int ti = t.id_;
  return make("window_merge", std::move(y), {ti},
              [ti, window, n, c, h, w](Graph& g, int self) {
                if (!g.node(ti).requires_grad) return;
                const Tensor& dy = g.node(self).grad;
                Tensor& dt = g.grad_buffer(ti);
                Tensor gathered(dt.shape());
                gather_windows(window, n, c, h, w, dy.data(), gathered.data());
                for (std::int64_t i = 0; i < dt.size(); ++i) dt[i] += gathered[i];
              });
}

// --- padding -------------------------------------------------------------------

Var Graph::pad_reflect(Var x, int top, int bottom, int left, int right) {
  check(x);
  const Tensor& xv = x.val();
  require(xv.rank() == 4, "pad_reflect: input must be [N,C,H,W]");
  require(top >= 0 && bottom >= 0 && left >= 0 && right >= 0, "pad_reflect: negative pad");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (top >= h || bottom >= h || left >= w || right >= w)
    shape_fail("pad_reflect: pad extent must be smaller than the input dimension");
  const int oh = h + top + bottom, ow = w + left + right;
  Tensor y({n, c, oh, ow});
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = xv.data() + ((static_cast<std::int64_t>(in) * c + ch) * h) * w;
      double* dst = y.data() + ((static_cast<std::int64_t>(in) * c + ch) * oh) * ow;
      for (int r = 0; r < oh; ++r) {
        const int sr = reflect_index(r - top, h);
        for (int col = 0; col < ow; ++col)
          dst[static_cast<std::int64_t>(r) * ow + col] =
              src[static_cast<std::int64_t>(sr) * w + reflect_index(col - left, w)];
      }
    }
  const int xi = x.id_;
  return make("pad_reflect", std::move(y), {xi},
              [xi, top, left, n, c, h, w, oh, ow](Graph& g, int self) {
                if (!g.node(xi).requires_grad) return;
                const Tensor& dy = g.node(self).grad;
                Tensor& dx = g.grad_buffer(xi);
                for (int in = 0; in < n; ++in)
                  for (int ch = 0; ch < c; ++ch) {
                    const double* src =
                        dy.data() + ((static_cast<std::int64_t>(in) * c + ch) * oh) * ow;
                    double* dst =
                        dx.data() + ((static_cast<std::int64_t>(in) * c + ch) * h) * w;
                    for (int r = 0; r < oh; ++r) {
                      const int sr = reflect_index(r - top, h);
                      for (int col = 0; col < ow; ++col)
                        dst[static_cast<std::int64_t>(sr) * w +
                            reflect_index(col - left, w)] +=
                            src[static_cast<std::int64_t>(r) * ow + col];
                    }
                  }
              });
}

Var Graph::crop(Var x, int top, int left, int h, int w) {
  check(x);
  const Tensor& xv = x.val();
  require(xv.rank() == 4, "crop: input must be [N,C,H,W]");
  const int n = xv.dim(0), c = xv.dim(1), ih = xv.dim(2), iw = xv.dim(3);
  if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > ih || left + w > iw)
    shape_fail("crop: region outside the input");
  Tensor y({n, c, h, w});
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < h; ++r)
        std::memcpy(
            y.data() + (((static_cast<std::int64_t>(in) * c + ch) * h + r) * w),
            xv.data() + (((static_cast<std::int64_t>(in) * c + ch) * ih + top + r) * iw + left),
            static_cast<std::size_t>(w) * sizeof(double));
  const int xi = x.id_;
  return make("crop", std::move(y), {xi},
              [xi, top, left, n, c, h, w, ih, iw](Graph& g, int self) {
                if (!g.node(xi).requires_grad) return;
                const Tensor& dy = g.node(self).grad;
                Tensor& dx = g.grad_buffer(xi);
                for (int in = 0; in < n; ++in)
                  for (int ch = 0; ch < c; ++ch)
                    for (int r = 0; r < h; ++r) {
                      const double* src =
                          dy.data() + ((static_cast<std::int64_t>(in) * c + ch) * h + r) * w;
                      double* dst = dx.data() +
                                    ((static_cast<std::int64_t>(in) * c + ch) * ih + top + r) *
                                        iw +
                                    left;
                      for (int col = 0; col < w; ++col) dst[col] += src[col];
                    }
              });
}

VarMap bind_params(Graph& g, const ParamMap& params, bool requires_grad) {
  VarMap out;
  for (const auto& [name, t] : params) out.emplace(name, g.leaf(t, requires_grad));
  return out;
}

}  // namespace ctnet

#include "exvt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace exvt {

namespace {

template <class T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

template <class T>
Tape<T>* recorder(std::initializer_list<const TensorStorage<T>*> inputs) {
  Tape<T>* tape = Tape<T>::current();
  return (tape != nullptr && tape->wants(inputs)) ? tape : nullptr;
}

template <class T>
void check_finite(const TensorT<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in ") + op + " output");
    }
  }
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

// Output positions o in [lo, hi) whose input index o*stride - pad + k lies in
// [0, extent).
struct Span1d {
  std::size_t lo, hi;
};

Span1d valid_outputs(std::size_t k, std::size_t pad, std::size_t stride,
                     std::size_t extent, std::size_t out_extent) {
  const long long kk = static_cast<long long>(k);
  const long long p = static_cast<long long>(pad);
  const long long s = static_cast<long long>(stride);
  long long lo = 0;
  if (p > kk) lo = (p - kk + s - 1) / s;
  long long hi_incl = (static_cast<long long>(extent) - 1 + p - kk);
  long long hi = hi_incl < 0 ? 0 : hi_incl / s + 1;
  hi = std::min<long long>(hi, static_cast<long long>(out_extent));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const std::optional<TensorT<T>>& bias, ConvGeometry geo) {
  require(input.rank() == 4, "conv2d: input must be [B,C,H,W], got " +
                                 to_string(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be [Cout,Cin/g,kh,kw], got " +
                                  to_string(weight.shape()));
  require(geo.groups >= 1 && geo.stride >= 1, "conv2d: stride and groups must be >= 1");
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t g = geo.groups, s = geo.stride, p = geo.padding;
  require(cin % g == 0 && cout % g == 0,
          "conv2d: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
              " not divisible by groups " + std::to_string(g));
  const std::size_t cin_g = cin / g, cout_g = cout / g;
  require(weight.dim(1) == cin_g, "conv2d: weight " + to_string(weight.shape()) +
                                      " expects " + std::to_string(weight.dim(1) * g) +
                                      " input channels, input has " + std::to_string(cin));
  require(kh <= h + 2 * p && kw <= w + 2 * p,
          "conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
              " exceeds padded input " + std::to_string(h + 2 * p) + "x" +
              std::to_string(w + 2 * p));
  if (bias) {
    require(bias->rank() == 1 && bias->dim(0) == cout,
            "conv2d: bias must be [" + std::to_string(cout) + "], got " +
                to_string(bias->shape()));
  }
  const std::size_t ho = (h + 2 * p - kh) / s + 1;
  const std::size_t wo = (w + 2 * p - kw) / s + 1;

  TensorT<T> out(Shape{batch, cout, ho, wo});
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  T* y = out.data().data();

  std::vector<Span1d> rows(kh), cols(kw);
  for (std::size_t ky = 0; ky < kh; ++ky) rows[ky] = valid_outputs(ky, p, s, h, ho);
  for (std::size_t kx = 0; kx < kw; ++kx) cols[kx] = valid_outputs(kx, p, s, w, wo);

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oc = 0; oc < cout; ++oc) {
      const std::size_t grp = oc / cout_g;
      T* yo = y + (b * cout + oc) * ho * wo;
      if (bias) std::fill(yo, yo + ho * wo, bias->data()[oc]);
      for (std::size_t icl = 0; icl < cin_g; ++icl) {
        const std::size_t ic = grp * cin_g + icl;
        const T* xi = x + (b * cin + ic) * h * w;
        const T* wk = wt + (oc * cin_g + icl) * kh * kw;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T wv = wk[ky * kw + kx];
            for (std::size_t oy = rows[ky].lo; oy < rows[ky].hi; ++oy) {
              const T* xrow = xi + (oy * s + ky - p) * w;
              T* yrow = yo + oy * wo;
              for (std::size_t ox = cols[kx].lo; ox < cols[kx].hi; ++ox) {
                yrow[ox] += wv * xrow[ox * s + kx - p];
              }
            }
          }
        }
      }
    }
  }
  check_finite(out, "conv2d");

  auto* bias_storage = bias ? bias->storage().get() : nullptr;
  if (Tape<T>* tape = recorder<T>({input.storage().get(), weight.storage().get(), bias_storage})) {
    StoragePtr<T> xs = input.storage(), ws = weight.storage(), ys = out.storage();
    StoragePtr<T> bs = bias ? bias->storage() : nullptr;
    std::vector<StoragePtr<T>> ins{xs, ws};
    if (bs) ins.push_back(bs);
    tape->record(OpKind::conv2d, std::move(ins), ys, [=]() {
      const T* gy = ys->grad.data();
      std::span<T> gx = grad_slot(xs);
      std::span<T> gw = grad_slot(ws);
      const T* xv = xs->data.data();
      const T* wv_all = ws->data.data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t oc = 0; oc < cout; ++oc) {
          const std::size_t grp = oc / cout_g;
          const T* go = gy + (b * cout + oc) * ho * wo;
          for (std::size_t icl = 0; icl < cin_g; ++icl) {
            const std::size_t ic = grp * cin_g + icl;
            const std::size_t in_off = (b * cin + ic) * h * w;
            const std::size_t w_off = (oc * cin_g + icl) * kh * kw;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const T wv = wv_all[w_off + ky * kw + kx];
                T acc = 0;
                for (std::size_t oy = rows[ky].lo; oy < rows[ky].hi; ++oy) {
                  const std::size_t row = in_off + (oy * s + ky - p) * w;
                  const T* grow = go + oy * wo;
                  for (std::size_t ox = cols[kx].lo; ox < cols[kx].hi; ++ox) {
                    const std::size_t idx = row + ox * s + kx - p;
                    acc += grow[ox] * xv[idx];
                    if (!gx.empty()) gx[idx] += wv * grow[ox];
                  }
                }
                if (!gw.empty()) gw[w_off + ky * kw + kx] += acc;
              }
            }
          }
        }
      }
      if (bs) {
        std::span<T> gb = grad_slot(bs);
        if (!gb.empty()) {
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t oc = 0; oc < cout; ++oc) {
              const T* go = gy + (b * cout + oc) * ho * wo;
              T acc = 0;
              for (std::size_t i = 0; i < ho * wo; ++i) acc += go[i];
              gb[oc] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear

template <class T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight,
                  const std::optional<TensorT<T>>& bias) {
  require(input.rank() >= 1, "linear: input must have rank >= 1");
  require(weight.rank() == 2, "linear: weight must be [Dout,Din], got " +
                                  to_string(weight.shape()));
  const std::size_t din = input.shape().back();
  const std::size_t dout = weight.dim(0);
  require(weight.dim(1) == din, "linear: input width " + std::to_string(din) +
                                    " does not match weight " + to_string(weight.shape()));
  if (bias) {
    require(bias->rank() == 1 && bias->dim(0) == dout,
            "linear: bias must be [" + std::to_string(dout) + "], got " +
                to_string(bias->shape()));
  }
  const std::size_t rows = din == 0 ? 0 : input.numel() / din;
  Shape out_shape = input.shape();
  out_shape.back() = dout;
  TensorT<T> out(out_shape);
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  T* y = out.data().data();
  for (std::size_t n = 0; n < rows; ++n) {
    const T* xr = x + n * din;
    for (std::size_t o = 0; o < dout; ++o) {
      const T* wr = wt + o * din;
      T acc = 0;
      for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
      y[n * dout + o] = acc + (bias ? bias->data()[o] : T{0});
    }
  }
  check_finite(out, "linear");

  auto* bias_storage = bias ? bias->storage().get() : nullptr;
  if (Tape<T>* tape = recorder<T>({input.storage().get(), weight.storage().get(), bias_storage})) {
    StoragePtr<T> xs = input.storage(), ws = weight.storage(), ys = out.storage();
    StoragePtr<T> bs = bias ? bias->storage() : nullptr;
    std::vector<StoragePtr<T>> ins{xs, ws};
    if (bs) ins.push_back(bs);
    tape->record(OpKind::linear, std::move(ins), ys, [=]() {
      const T* gy = ys->grad.data();
      std::span<T> gx = grad_slot(xs);
      std::span<T> gw = grad_slot(ws);
      std::span<T> gb = bs ? grad_slot(bs) : std::span<T>{};
      const T* xv = xs->data.data();
      const T* wv = ws->data.data();
      for (std::size_t n = 0; n < rows; ++n) {
        for (std::size_t o = 0; o < dout; ++o) {
          const T g = gy[n * dout + o];
          if (!gx.empty()) {
            T* gxr = gx.data() + n * din;
            const T* wr = wv + o * din;
            for (std::size_t i = 0; i < din; ++i) gxr[i] += g * wr[i];
          }
          if (!gw.empty()) {
            T* gwr = gw.data() + o * din;
            const T* xr = xv + n * din;
            for (std::size_t i = 0; i < din; ++i) gwr[i] += g * xr[i];
          }
          if (!gb.empty()) gb[o] += g;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch_norm

template <class T>
TensorT<T> batch_norm(const TensorT<T>& input, const TensorT<T>& gamma,
                      const TensorT<T>& beta, TensorT<T>& running_mean,
                      TensorT<T>& running_var, bool training, T momentum, T eps) {
  if (!(eps > 0)) throw std::invalid_argument("batch_norm: eps must be > 0");
  require(input.rank() == 4, "batch_norm: input must be [B,C,H,W], got " +
                                 to_string(input.shape()));
  const std::size_t batch = input.dim(0), ch = input.dim(1),
                    plane = input.dim(2) * input.dim(3);
  for (const TensorT<T>* t : std::initializer_list<const TensorT<T>*>{
           &gamma, &beta, &running_mean, &running_var}) {
    require(t->numel() == ch, "batch_norm: per-channel tensor " + to_string(t->shape()) +
                                  " does not match " + std::to_string(ch) + " channels");
  }
  const std::size_t count = batch * plane;
  require(!training || count > 0, "batch_norm: empty batch");

  TensorT<T> out(input.shape());
  std::vector<T> xhat(input.numel());
  std::vector<T> inv_std(ch);
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t c = 0; c < ch; ++c) {
    T mean, var;
    if (training) {
      double acc = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* xp = x + (b * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += xp[i];
      }
      const double m = acc / static_cast<double>(count);
      double sq = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* xp = x + (b * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = xp[i] - m;
          sq += d * d;
        }
      }
      mean = static_cast<T>(m);
      var = static_cast<T>(sq / static_cast<double>(count));
      const double unbiased =
          count > 1 ? sq / static_cast<double>(count - 1) : static_cast<double>(var);
      running_mean[c] = (1 - momentum) * running_mean[c] + momentum * mean;
      running_var[c] = (1 - momentum) * running_var[c] + momentum * static_cast<T>(unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[c] = istd;
    const T gm = gamma[c], bt = beta[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (x[off + i] - mean) * istd;
        xhat[off + i] = xh;
        y[off + i] = gm * xh + bt;
      }
    }
  }
  check_finite(out, "batch_norm");

  if (Tape<T>* tape = recorder<T>({input.storage().get(), gamma.storage().get(), beta.storage().get()})) {
    StoragePtr<T> xs = input.storage(), gs = gamma.storage(), bs = beta.storage(),
                  ys = out.storage();
    tape->record(OpKind::batch_norm, {xs, gs, bs}, ys,
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      const T* gy = ys->grad.data();
      std::span<T> gx = grad_slot(xs);
      std::span<T> gg = grad_slot(gs);
      std::span<T> gb = grad_slot(bs);
      const T n = static_cast<T>(count);
      for (std::size_t c = 0; c < ch; ++c) {
        T sum_g = 0, sum_gx = 0;
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t off = (b * ch + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += gy[off + i];
            sum_gx += gy[off + i] * xhat[off + i];
          }
        }
        if (!gg.empty()) gg[c] += sum_gx;
        if (!gb.empty()) gb[c] += sum_g;
        if (gx.empty()) continue;
        const T k = gs->data[c] * inv_std[c];
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t off = (b * ch + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (training) {
              gx[off + i] += k / n * (n * gy[off + i] - sum_g - xhat[off + i] * sum_gx);
            } else {
              gx[off + i] += k * gy[off + i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer_norm

template <class T>
TensorT<T> layer_norm(const TensorT<T>& input, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps) {
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be > 0");
  require(input.rank() >= 1, "layer_norm: input must have rank >= 1");
  const std::size_t d = input.shape().back();
  require(gamma.numel() == d && beta.numel() == d,
          "layer_norm: gamma/beta must have " + std::to_string(d) + " elements");
  const std::size_t rows = d == 0 ? 0 : input.numel() / d;
  TensorT<T> out(input.shape());
  std::vector<T> xhat(input.numel());
  std::vector<T> inv_std(rows);
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    double acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += xr[i];
    const double m = acc / static_cast<double>(d);
    double sq = 0;
    for (std::size_t i = 0; i < d; ++i) sq += (xr[i] - m) * (xr[i] - m);
    const T mean = static_cast<T>(m);
    const T istd = T(1) / std::sqrt(static_cast<T>(sq / static_cast<double>(d)) + eps);
    inv_std[r] = istd;
    for (std::size_t i = 0; i < d; ++i) {
      const T xh = (xr[i] - mean) * istd;
      xhat[r * d + i] = xh;
      y[r * d + i] = gamma[i] * xh + beta[i];
    }
  }
  check_finite(out, "layer_norm");

  if (Tape<T>* tape = recorder<T>({input.storage().get(), gamma.storage().get(), beta.storage().get()})) {
    StoragePtr<T> xs = input.storage(), gs = gamma.storage(), bs = beta.storage(),
                  ys = out.storage();
    tape->record(OpKind::layer_norm, {xs, gs, bs}, ys,
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      const T* gy = ys->grad.data();
      std::span<T> gx = grad_slot(xs);
      std::span<T> gg = grad_slot(gs);
      std::span<T> gb = grad_slot(bs);
      const T* gm = gs->data.data();
      const T n = static_cast<T>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = gy + r * d;
        const T* xh = xhat.data() + r * d;
        T sum_g = 0, sum_gx = 0;
        for (std::size_t i = 0; i < d; ++i) {
          const T gh = g[i] * gm[i];
          sum_g += gh;
          sum_gx += gh * xh[i];
          if (!gg.empty()) gg[i] += g[i] * xh[i];
          if (!gb.empty()) gb[i] += g[i];
        }
        if (gx.empty()) continue;
        for (std::size_t i = 0; i < d; ++i) {
          gx[r * d + i] += inv_std[r] / n * (n * g[i] * gm[i] - sum_g - xh[i] * sum_gx);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations and softmax

template <class T>
TensorT<T> activation(const TensorT<T>& input, Activation kind) {
  if (kind == Activation::identity) return input;
  TensorT<T> out(input.shape());
  const T* x = input.data().data();
  T* y = out.data().data();
  const std::size_t n = input.numel();
  for (std::size_t i = 0; i < n; ++i) {
    if (kind == Activation::relu) {
      y[i] = x[i] > 0 ? x[i] : T{0};
    } else {
      y[i] = x[i] / (T(1) + std::exp(-x[i]));
    }
  }
  check_finite(out, kind == Activation::relu ? "relu" : "silu");

  if (Tape<T>* tape = recorder<T>({input.storage().get()})) {
    StoragePtr<T> xs = input.storage(), ys = out.storage();
    const OpKind op = kind == Activation::relu ? OpKind::relu : OpKind::silu;
    tape->record(op, {xs}, ys, [=]() {
      std::span<T> gx = grad_slot(xs);
      if (gx.empty()) return;
      const T* gy = ys->grad.data();
      const T* xv = xs->data.data();
      for (std::size_t i = 0; i < n; ++i) {
        if (kind == Activation::relu) {
          if (xv[i] > 0) gx[i] += gy[i];
        } else {
          const T sg = T(1) / (T(1) + std::exp(-xv[i]));
          gx[i] += gy[i] * sg * (T(1) + xv[i] * (T(1) - sg));
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> softmax(const TensorT<T>& input) {
  require(input.rank() >= 1, "softmax: input must have rank >= 1");
  const std::size_t d = input.shape().back();
  const std::size_t rows = d == 0 ? 0 : input.numel() / d;
  TensorT<T> out(input.shape());
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    T* yr = y + r * d;
    const T mx = *std::max_element(xr, xr + d);
    double total = 0;
    for (std::size_t i = 0; i < d; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      total += yr[i];
    }
    for (std::size_t i = 0; i < d; ++i) yr[i] = static_cast<T>(yr[i] / total);
  }
  check_finite(out, "softmax");

  if (Tape<T>* tape = recorder<T>({input.storage().get()})) {
    StoragePtr<T> xs = input.storage(), ys = out.storage();
    tape->record(OpKind::softmax, {xs}, ys, [=]() {
      std::span<T> gx = grad_slot(xs);
      if (gx.empty()) return;
      const T* gy = ys->grad.data();
      const T* yv = ys->data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t i = 0; i < d; ++i) dot += gy[r * d + i] * yv[r * d + i];
        for (std::size_t i = 0; i < d; ++i) {
          gx[r * d + i] += yv[r * d + i] * (gy[r * d + i] - dot);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention

template <class T>
TensorT<T> scaled_dot_product_attention(const TensorT<T>& q, const TensorT<T>& k,
                                        const TensorT<T>& v, std::size_t heads) {
  require(q.rank() == 3, "attention: query must be [B,T,D], got " + to_string(q.shape()));
  require(k.shape() == q.shape() && v.shape() == q.shape(),
          "attention: query/key/value shapes differ");
  const std::size_t batch = q.dim(0), tokens = q.dim(1), dim = q.dim(2);
  require(heads >= 1 && dim % heads == 0,
          "attention: dim " + std::to_string(dim) + " not divisible by " +
              std::to_string(heads) + " heads");
  const std::size_t hd = dim / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));

  TensorT<T> out(q.shape());
  std::vector<T> probs(batch * heads * tokens * tokens);
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();
  T* y = out.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hh = 0; hh < heads; ++hh) {
      const std::size_t off = hh * hd;
      for (std::size_t i = 0; i < tokens; ++i) {
        T* pr = probs.data() + ((b * heads + hh) * tokens + i) * tokens;
        const T* qi = qv + (b * tokens + i) * dim + off;
        for (std::size_t j = 0; j < tokens; ++j) {
          const T* kj = kv + (b * tokens + j) * dim + off;
          T acc = 0;
          for (std::size_t c = 0; c < hd; ++c) acc += qi[c] * kj[c];
          pr[j] = acc * scale_factor;
        }
        const T mx = *std::max_element(pr, pr + tokens);
        double total = 0;
        for (std::size_t j = 0; j < tokens; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          total += pr[j];
        }
        for (std::size_t j = 0; j < tokens; ++j) pr[j] = static_cast<T>(pr[j] / total);
        T* yi = y + (b * tokens + i) * dim + off;
        for (std::size_t j = 0; j < tokens; ++j) {
          const T* vj = vv + (b * tokens + j) * dim + off;
          for (std::size_t c = 0; c < hd; ++c) yi[c] += pr[j] * vj[c];
        }
      }
    }
  }
  check_finite(out, "attention");

  if (Tape<T>* tape = recorder<T>({q.storage().get(), k.storage().get(), v.storage().get()})) {
    StoragePtr<T> qs = q.storage(), ks = k.storage(), vs = v.storage(), ys = out.storage();
    tape->record(OpKind::attention, {qs, ks, vs}, ys, [=, probs = std::move(probs)]() {
      std::span<T> gq = grad_slot(qs);
      std::span<T> gk = grad_slot(ks);
      std::span<T> gv = grad_slot(vs);
      const T* gy = ys->grad.data();
      const T* qd = qs->data.data();
      const T* kd = ks->data.data();
      const T* vd = vs->data.data();
      std::vector<T> dp(tokens);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t hh = 0; hh < heads; ++hh) {
          const std::size_t off = hh * hd;
          for (std::size_t i = 0; i < tokens; ++i) {
            const T* pr = probs.data() + ((b * heads + hh) * tokens + i) * tokens;
            const T* gi = gy + (b * tokens + i) * dim + off;
            T dot = 0;
            for (std::size_t j = 0; j < tokens; ++j) {
              const std::size_t jo = (b * tokens + j) * dim + off;
              T acc = 0;
              for (std::size_t c = 0; c < hd; ++c) acc += gi[c] * vd[jo + c];
              dp[j] = acc;
              dot += pr[j] * acc;
              if (!gv.empty()) {
                for (std::size_t c = 0; c < hd; ++c) gv[jo + c] += pr[j] * gi[c];
              }
            }
            const std::size_t io = (b * tokens + i) * dim + off;
            for (std::size_t j = 0; j < tokens; ++j) {
              const T ds = pr[j] * (dp[j] - dot) * scale_factor;
              const std::size_t jo = (b * tokens + j) * dim + off;
              if (!gq.empty()) {
                for (std::size_t c = 0; c < hd; ++c) gq[io + c] += ds * kd[jo + c];
              }
              if (!gk.empty()) {
                for (std::size_t c = 0; c < hd; ++c) gk[jo + c] += ds * qd[io + c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& input, const AttentionWeights<T>& wts,
                                std::size_t heads) {
  require(input.rank() == 3, "multi_head_attention: input must be [B,T,D], got " +
                                 to_string(input.shape()));
  const std::size_t dim = input.dim(2);
  require(heads >= 1 && dim % heads == 0,
          "multi_head_attention: dim " + std::to_string(dim) + " not divisible by " +
              std::to_string(heads) + " heads");
  auto q = linear(input, wts.wq, std::optional<TensorT<T>>(wts.bq));
  auto k = linear(input, wts.wk, std::optional<TensorT<T>>(wts.bk));
  auto v = linear(input, wts.wv, std::optional<TensorT<T>>(wts.bv));
  auto ctx = scaled_dot_product_attention(q, k, v, heads);
  return linear(ctx, wts.wo, std::optional<TensorT<T>>(wts.bo));
}

// ---------------------------------------------------------------------------
// patches

template <class T>
TensorT<T> unfold_patches(const TensorT<T>& input, std::size_t ph, std::size_t pw) {
  require(input.rank() == 4, "unfold_patches: input must be [B,C,H,W], got " +
                                 to_string(input.shape()));
  const std::size_t batch = input.dim(0), ch = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  require(ph >= 1 && pw >= 1 && h % ph == 0 && w % pw == 0,
          "unfold_patches: spatial " + std::to_string(h) + "x" + std::to_string(w) +
              " not divisible by patch " + std::to_string(ph) + "x" + std::to_string(pw));
  const std::size_t nh = h / ph, nw = w / pw, np = ph * pw, n = nh * nw;
  TensorT<T> out(Shape{batch * np, n, ch});
  // index map out[i] = in[src[i]] shared by forward and backward
  std::vector<std::size_t> src(out.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j)
        for (std::size_t hp = 0; hp < nh; ++hp)
          for (std::size_t wp = 0; wp < nw; ++wp)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t o =
                  ((b * np + i * pw + j) * n + hp * nw + wp) * ch + c;
              src[o] = ((b * ch + c) * h + hp * ph + i) * w + wp * pw + j;
            }
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t o = 0; o < src.size(); ++o) y[o] = x[src[o]];

  if (Tape<T>* tape = recorder<T>({input.storage().get()})) {
    StoragePtr<T> xs = input.storage(), ys = out.storage();
    tape->record(OpKind::unfold, {xs}, ys, [=, src = std::move(src)]() {
      std::span<T> gx = grad_slot(xs);
      if (gx.empty()) return;
      for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += ys->grad[o];
    });
  }
  return out;
}

template <class T>
TensorT<T> fold_patches(const TensorT<T>& input, std::size_t h, std::size_t w,
                        std::size_t ph, std::size_t pw) {
  require(input.rank() == 3, "fold_patches: input must be [B*P,N,C], got " +
                                 to_string(input.shape()));
  require(ph >= 1 && pw >= 1 && h % ph == 0 && w % pw == 0,
          "fold_patches: spatial " + std::to_string(h) + "x" + std::to_string(w) +
              " not divisible by patch " + std::to_string(ph) + "x" + std::to_string(pw));
  const std::size_t nh = h / ph, nw = w / pw, np = ph * pw, n = nh * nw;
  require(input.dim(0) % np == 0 && input.dim(1) == n,
          "fold_patches: shape " + to_string(input.shape()) + " does not tile " +
              std::to_string(h) + "x" + std::to_string(w));
  const std::size_t batch = input.dim(0) / np, ch = input.dim(2);
  TensorT<T> out(Shape{batch, ch, h, w});
  std::vector<std::size_t> dst(input.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j)
        for (std::size_t hp = 0; hp < nh; ++hp)
          for (std::size_t wp = 0; wp < nw; ++wp)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t o =
                  ((b * np + i * pw + j) * n + hp * nw + wp) * ch + c;
              dst[o] = ((b * ch + c) * h + hp * ph + i) * w + wp * pw + j;
            }
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t o = 0; o < dst.size(); ++o) y[dst[o]] = x[o];

  if (Tape<T>* tape = recorder<T>({input.storage().get()})) {
    StoragePtr<T> xs = input.storage(), ys = out.storage();
    tape->record(OpKind::fold, {xs}, ys, [=, dst = std::move(dst)]() {
      std::span<T> gx = grad_slot(xs);
      if (gx.empty()) return;
      for (std::size_t o = 0; o < dst.size(); ++o) gx[o] += ys->grad[dst[o]];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling, concat, elementwise

template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
  require(input.rank() == 4, "global_avg_pool: input must be [B,C,H,W], got " +
                                 to_string(input.shape()));
  const std::size_t batch = input.dim(0), ch = input.dim(1),
                    plane = input.dim(2) * input.dim(3);
  require(plane >= 1, "global_avg_pool: empty spatial extent");
  TensorT<T> out(Shape{batch, ch});
  const T* x = input.data().data();
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    double acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += x[bc * plane + i];
    out[bc] = static_cast<T>(acc / static_cast<double>(plane));
  }
  check_finite(out, "global_avg_pool");

  if (Tape<T>* tape = recorder<T>({input.storage().get()})) {
    StoragePtr<T> xs = input.storage(), ys = out.storage();
    tape->record(OpKind::global_avg_pool, {xs}, ys, [=]() {
      std::span<T> gx = grad_slot(xs);
      if (gx.empty()) return;
      const T inv = T(1) / static_cast<T>(plane);
      for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const T g = ys->grad[bc] * inv;
        for (std::size_t i = 0; i < plane; ++i) gx[bc * plane + i] += g;
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> concat_channels(std::span<const TensorT<T>> parts) {
  require(!parts.empty(), "concat_channels: empty part list");
  const Shape& first = parts[0].shape();
  require(first.size() >= 2, "concat_channels: parts must have rank >= 2");
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size() && p.dim(0) == first[0],
            "concat_channels: part " + to_string(p.shape()) + " does not match batch of " +
                to_string(first));
    for (std::size_t a = 2; a < first.size(); ++a) {
      require(p.dim(a) == first[a], "concat_channels: part " + to_string(p.shape()) +
                                        " differs from " + to_string(first) +
                                        " outside axis 1");
    }
    total += p.dim(1);
  }
  std::size_t inner = 1;
  for (std::size_t a = 2; a < first.size(); ++a) inner *= first[a];
  const std::size_t batch = first[0];
  Shape out_shape = first;
  out_shape[1] = total;
  TensorT<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t col = 0;
  for (const auto& p : parts) {
    offsets.push_back(col);
    const std::size_t width = p.dim(1) * inner;
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(p.data().data() + b * width, width,
                  out.data().data() + b * total * inner + col * inner);
    }
    col += p.dim(1);
  }

  Tape<T>* tape = Tape<T>::current();
  bool wanted = false;
  for (const auto& p : parts) wanted = wanted || (tape && tape->wants({p.storage().get()}));
  if (wanted) {
    std::vector<StoragePtr<T>> ins;
    for (const auto& p : parts) ins.push_back(p.storage());
    StoragePtr<T> ys = out.storage();
    tape->record(OpKind::concat, ins, ys, [=]() {
      for (std::size_t k = 0; k < ins.size(); ++k) {
        std::span<T> gp = grad_slot(ins[k]);
        if (gp.empty()) continue;
        const std::size_t width = ins[k]->shape[1] * inner;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* src = ys->grad.data() + b * total * inner + offsets[k] * inner;
          for (std::size_t i = 0; i < width; ++i) gp[b * width + i] += src[i];
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "add: shapes " + to_string(a.shape()) + " and " +
                                      to_string(b.shape()) + " differ");
  TensorT<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  check_finite(out, "add");
  if (Tape<T>* tape = recorder<T>({a.storage().get(), b.storage().get()})) {
    StoragePtr<T> as = a.storage(), bs = b.storage(), ys = out.storage();
    tape->record(OpKind::add, {as, bs}, ys, [=]() {
      for (const auto& s : {as, bs}) {
        std::span<T> g = grad_slot(s);
        if (g.empty()) continue;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += ys->grad[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "mul: shapes " + to_string(a.shape()) + " and " +
                                      to_string(b.shape()) + " differ");
  TensorT<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  check_finite(out, "mul");
  if (Tape<T>* tape = recorder<T>({a.storage().get(), b.storage().get()})) {
    StoragePtr<T> as = a.storage(), bs = b.storage(), ys = out.storage();
    tape->record(OpKind::mul, {as, bs}, ys, [=]() {
      std::span<T> ga = grad_slot(as);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ys->grad[i] * bs->data[i];
      std::span<T> gb = grad_slot(bs);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += ys->grad[i] * as->data[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& input, T factor) {
  TensorT<T> out(input.shape());
  for (std::size_t i = 0; i < input.numel(); ++i) out[i] = input[i] * factor;
  check_finite(out, "scale");
  if (Tape<T>* tape = recorder<T>({input.storage().get()})) {
    StoragePtr<T> xs = input.storage(), ys = out.storage();
    tape->record(OpKind::scale, {xs}, ys, [=]() {
      std::span<T> g = grad_slot(xs);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += ys->grad[i] * factor;
    });
  }
  return out;
}

template <class T>
TensorT<T> sum(const TensorT<T>& input) {
  double acc = 0;
  for (T v : input.data()) acc += v;
  auto out = TensorT<T>::scalar(static_cast<T>(acc));
  check_finite(out, "sum");
  if (Tape<T>* tape = recorder<T>({input.storage().get()})) {
    StoragePtr<T> xs = input.storage(), ys = out.storage();
    tape->record(OpKind::sum, {xs}, ys, [=]() {
      std::span<T> g = grad_slot(xs);
      for (auto& v : g) v += ys->grad[0];
    });
  }
  return out;
}

template <class T>
TensorT<T> label_smoothing_ce(const TensorT<T>& logits, std::span<const int> labels,
                              T smoothing) {
  require(logits.rank() == 2, "label_smoothing_ce: logits must be [B,K], got " +
                                  to_string(logits.shape()));
  if (!(smoothing >= 0 && smoothing < 1)) {
    throw std::invalid_argument("label_smoothing_ce: smoothing must be in [0, 1)");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  require(labels.size() == batch, "label_smoothing_ce: " + std::to_string(labels.size()) +
                                      " labels for batch of " + std::to_string(batch));
  require(batch > 0 && classes > 0, "label_smoothing_ce: empty logits");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("label_smoothing_ce: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
  }
  const T off = smoothing / static_cast<T>(classes);
  const T on = T(1) - smoothing + off;
  std::vector<T> probs(logits.numel());
  double total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* z = logits.data().data() + b * classes;
    const T mx = *std::max_element(z, z + classes);
    double denom = 0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(static_cast<double>(z[k] - mx));
    const double log_denom = std::log(denom);
    double row = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double logp = static_cast<double>(z[k] - mx) - log_denom;
      probs[b * classes + k] = static_cast<T>(std::exp(logp));
      const T q = static_cast<std::size_t>(labels[b]) == k ? on : off;
      row -= q * logp;
    }
    total += row;
  }
  auto out = TensorT<T>::scalar(static_cast<T>(total / static_cast<double>(batch)));
  check_finite(out, "label_smoothing_ce");

  if (Tape<T>* tape = recorder<T>({logits.storage().get()})) {
    StoragePtr<T> zs = logits.storage(), ys = out.storage();
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record(OpKind::cross_entropy, {zs}, ys,
                 [=, probs = std::move(probs), lab = std::move(lab)]() {
      std::span<T> gz = grad_slot(zs);
      if (gz.empty()) return;
      const T g = ys->grad[0] / static_cast<T>(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < classes; ++k) {
          const T q = static_cast<std::size_t>(lab[b]) == k ? on : off;
          gz[b * classes + k] += g * (probs[b * classes + k] - q);
        }
      }
    });
  }
  return out;
}

#define EXVT_INSTANTIATE_OPS(T)                                                          \
  template TensorT<T> conv2d(const TensorT<T>&, const TensorT<T>&,                      \
                             const std::optional<TensorT<T>>&, ConvGeometry);           \
  template TensorT<T> linear(const TensorT<T>&, const TensorT<T>&,                      \
                             const std::optional<TensorT<T>>&);                         \
  template TensorT<T> batch_norm(const TensorT<T>&, const TensorT<T>&,                  \
                                 const TensorT<T>&, TensorT<T>&, TensorT<T>&, bool, T,  \
                                 T);                                                    \
  template TensorT<T> layer_norm(const TensorT<T>&, const TensorT<T>&,                  \
                                 const TensorT<T>&, T);                                 \
  template TensorT<T> activation(const TensorT<T>&, Activation);                        \
  template TensorT<T> softmax(const TensorT<T>&);                                       \
  template TensorT<T> scaled_dot_product_attention(const TensorT<T>&, const TensorT<T>&, \
                                                   const TensorT<T>&, std::size_t);     \
  template TensorT<T> multi_head_attention(const TensorT<T>&,                           \
                                           const AttentionWeights<T>&, std::size_t);    \
  template TensorT<T> unfold_patches(const TensorT<T>&, std::size_t, std::size_t);      \
  template TensorT<T> fold_patches(const TensorT<T>&, std::size_t, std::size_t,         \
                                   std::size_t, std::size_t);                           \
  template TensorT<T> global_avg_pool(const TensorT<T>&);                               \
  template TensorT<T> concat_channels(std::span<const TensorT<T>>);                     \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                        \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                        \
  template TensorT<T> scale(const TensorT<T>&, T);                                      \
  template TensorT<T> sum(const TensorT<T>&);                                           \
  template TensorT<T> label_smoothing_ce(const TensorT<T>&, std::span<const int>, T);

EXVT_INSTANTIATE_OPS(float)
EXVT_INSTANTIATE_OPS(double)

#undef EXVT_INSTANTIATE_OPS

}  // namespace exvt

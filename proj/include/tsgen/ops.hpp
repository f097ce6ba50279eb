#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "tsgen/kernels.hpp"
#include "tsgen/tape.hpp"

// Differentiable operations. Forward pass computes into a fresh tensor;
// the emitted closure adds this node's gradient into each input's sink.
// Parallel loops run over independent output elements only, so results are
// identical for any thread count.

namespace tsgen::ops {

// below ~4096 elements, threading is pure overhead
#define TSGEN_PRAGMA(x) _Pragma(#x)
#define TSGEN_PFOR(n) TSGEN_PRAGMA(omp parallel for schedule(static) if (n > 4096))

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (!same_shape(av, bv)) throw ShapeError("add: shape mismatch");
  Tensor<T> out(av.shape);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.numel());
  TSGEN_PFOR(n)
  for (std::ptrdiff_t i = 0; i < n; ++i) out.data[i] = av.data[i] + bv.data[i];
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), ng, [a, b](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(g.numel());
    for (Var in : {a, b}) {
      if (!t.needs_grad(in)) continue;
      auto& sink = t.grad_sink(in);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g.data[i];
    }
  });
}

template <typename T>
Var sub(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (!same_shape(av, bv)) throw ShapeError("sub: shape mismatch");
  Tensor<T> out(av.shape);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.numel());
  TSGEN_PFOR(n)
  for (std::ptrdiff_t i = 0; i < n; ++i) out.data[i] = av.data[i] - bv.data[i];
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), ng, [a, b](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(g.numel());
    if (t.needs_grad(a)) {
      auto& sink = t.grad_sink(a);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g.data[i];
    }
    if (t.needs_grad(b)) {
      auto& sink = t.grad_sink(b);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] -= g.data[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (!same_shape(av, bv)) throw ShapeError("mul: shape mismatch");
  Tensor<T> out(av.shape);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.numel());
  TSGEN_PFOR(n)
  for (std::ptrdiff_t i = 0; i < n; ++i) out.data[i] = av.data[i] * bv.data[i];
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), ng, [a, b](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    const auto& av2 = t.val(a);
    const auto& bv2 = t.val(b);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(g.numel());
    if (t.needs_grad(a)) {
      auto& sink = t.grad_sink(a);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g.data[i] * bv2.data[i];
    }
    if (t.needs_grad(b)) {
      auto& sink = t.grad_sink(b);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g.data[i] * av2.data[i];
    }
  });
}

// y = mul_c * x + add_c
template <typename T>
Var affine(Tape<T>& tp, Var a, T mul_c, T add_c) {
  const auto& av = tp.val(a);
  Tensor<T> out(av.shape);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.numel());
  TSGEN_PFOR(n)
  for (std::ptrdiff_t i = 0; i < n; ++i) out.data[i] = mul_c * av.data[i] + add_c;
  return tp.emit(std::move(out), tp.needs_grad(a), [a, mul_c](Tape<T>& t, int self) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(Var{self});
    auto& sink = t.grad_sink(a);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(g.numel());
    TSGEN_PFOR(m)
    for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += mul_c * g.data[i];
  });
}

template <typename T>
Var scale(Tape<T>& tp, Var a, T c) {
  return affine(tp, a, c, T(0));
}

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
Var unary(Tape<T>& tp, Var a, FwdFn fwd, BwdFn dfdx_from_x) {
  const auto& av = tp.val(a);
  Tensor<T> out(av.shape);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.numel());
  TSGEN_PFOR(n)
  for (std::ptrdiff_t i = 0; i < n; ++i) out.data[i] = fwd(av.data[i]);
  return tp.emit(std::move(out), tp.needs_grad(a), [a, dfdx_from_x](Tape<T>& t, int self) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(Var{self});
    const auto& x = t.val(a);
    auto& sink = t.grad_sink(a);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(g.numel());
    TSGEN_PFOR(m)
    for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g.data[i] * dfdx_from_x(x.data[i]);
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

template <typename T>
Var sigmoid(Tape<T>& tp, Var a) {
  return detail::unary(
      tp, a, [](T x) { return detail::sigmoid_scalar(x); },
      [](T x) {
        const T s = detail::sigmoid_scalar(x);
        return s * (T(1) - s);
      });
}

template <typename T>
Var tanh_op(Tape<T>& tp, Var a) {
  return detail::unary(
      tp, a, [](T x) { return std::tanh(x); },
      [](T x) {
        const T th = std::tanh(x);
        return T(1) - th * th;
      });
}

template <typename T>
Var silu(Tape<T>& tp, Var a) {
  return detail::unary(
      tp, a, [](T x) { return x * detail::sigmoid_scalar(x); },
      [](T x) {
        const T s = detail::sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var gelu(Tape<T>& tp, Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary(
      tp, a,
      [=](T x) {
        return static_cast<T>(0.5 * x * (1.0 + std::erf(static_cast<double>(x) * kInvSqrt2)));
      },
      [=](T x) {
        const double xd = static_cast<double>(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
        return static_cast<T>(cdf + xd * pdf);
      });
}

template <typename T>
Var square(Tape<T>& tp, Var a) {
  return detail::unary(
      tp, a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

// |x|; subgradient 0 at x = 0
template <typename T>
Var abs_op(Tape<T>& tp, Var a) {
  return detail::unary(
      tp, a, [](T x) { return std::abs(x); },
      [](T x) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

// ---------------------------------------------------------------------------
// broadcast add: p (shape = trailing dims of x) is repeated over leading dims
// ---------------------------------------------------------------------------

template <typename T>
Var add_bcast(Tape<T>& tp, Var x, Var p) {
  const auto& xv = tp.val(x);
  const auto& pv = tp.val(p);
  const std::size_t pn = pv.numel();
  if (pn == 0 || xv.numel() % pn != 0)
    throw ShapeError("add_bcast: broadcast size " + std::to_string(pn) +
                     " does not divide operand size " + std::to_string(xv.numel()));
  Tensor<T> out(xv.shape);
  const std::ptrdiff_t reps = static_cast<std::ptrdiff_t>(xv.numel() / pn);
  TSGEN_PFOR(reps)
  for (std::ptrdiff_t r = 0; r < reps; ++r) {
    const T* xr = xv.ptr() + r * pn;
    T* or_ = out.ptr() + r * pn;
    for (std::size_t i = 0; i < pn; ++i) or_[i] = xr[i] + pv.data[i];
  }
  bool ng = tp.needs_grad(x) || tp.needs_grad(p);
  return tp.emit(std::move(out), ng, [x, p, pn](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(g.numel());
    if (t.needs_grad(x)) {
      auto& sink = t.grad_sink(x);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g.data[i];
    }
    if (t.needs_grad(p)) {
      auto& sink = t.grad_sink(p);
      const std::size_t reps2 = g.numel() / pn;
      const std::ptrdiff_t pnn = static_cast<std::ptrdiff_t>(pn);
      TSGEN_PFOR(pnn)
      for (std::ptrdiff_t i = 0; i < pnn; ++i) {
        T acc = 0;
        for (std::size_t r = 0; r < reps2; ++r) acc += g.data[r * pn + i];
        sink.data[i] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// linear: y = x W^T (+ b), x [..., in], W [out, in], b [out]
// ---------------------------------------------------------------------------

template <typename T>
Var linear(Tape<T>& tp, Var x, Var w, Var b = Var{}) {
  const auto& xv = tp.val(x);
  const auto& wv = tp.val(w);
  if (wv.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const std::size_t in = wv.dim(1), out_dim = wv.dim(0);
  if (xv.last_dim() != in)
    throw ShapeError("linear: input width " + std::to_string(xv.last_dim()) +
                     " != weight fan-in " + std::to_string(in));
  const std::size_t rows = xv.rows();
  Shape oshape = xv.shape;
  oshape.back() = out_dim;
  Tensor<T> out(oshape);
  kernels::par::gemm_nt(rows, out_dim, in, xv.ptr(), wv.ptr(), out.ptr());
  if (b.valid()) {
    const auto& bv = tp.val(b);
    if (bv.numel() != out_dim) throw ShapeError("linear: bias size mismatch");
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(rows);
    TSGEN_PFOR(r)
    for (std::ptrdiff_t i = 0; i < r; ++i) {
      T* orow = out.ptr() + i * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) orow[j] += bv.data[j];
    }
  }
  bool ng = tp.needs_grad(x) || tp.needs_grad(w) || (b.valid() && tp.needs_grad(b));
  return tp.emit(std::move(out), ng, [x, w, b, rows, in, out_dim](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    if (t.needs_grad(x))
      kernels::par::gemm_nn(rows, in, out_dim, g.ptr(), t.val(w).ptr(), t.grad_sink(x).ptr(),
                            /*accumulate=*/true);
    if (t.needs_grad(w))
      kernels::par::gemm_tn(out_dim, in, rows, g.ptr(), t.val(x).ptr(), t.grad_sink(w).ptr(),
                            /*accumulate=*/true);
    if (b.valid() && t.needs_grad(b))
      kernels::par::colsum(rows, out_dim, g.ptr(), t.grad_sink(b).ptr(), /*accumulate=*/true);
  });
}

// y = a b^T for two row-major matrices [M,K],[N,K]; gradients to both sides
template <typename T>
Var matmul_nt(Tape<T>& tp, Var a, Var b) {
  return linear(tp, a, b);
}

// ---------------------------------------------------------------------------
// conv1d along the time axis: x [B, tau, d_in], kernel [d_out, d_in, k]
// same padding by default; causal pads left only (for dilated encoders)
// ---------------------------------------------------------------------------

template <typename T>
Var conv1d(Tape<T>& tp, Var x, Var ker, Var b = Var{}, int dilation = 1, bool causal = false) {
  const auto& xv = tp.val(x);
  const auto& kv = tp.val(ker);
  if (xv.rank() != 3) throw ShapeError("conv1d: input must be [B, tau, d_in]");
  if (kv.rank() != 3) throw ShapeError("conv1d: kernel must be [d_out, d_in, k]");
  const std::size_t B = xv.dim(0), tau = xv.dim(1), din = xv.dim(2);
  const std::size_t dout = kv.dim(0), k = kv.dim(2);
  if (kv.dim(1) != din) throw ShapeError("conv1d: kernel fan-in mismatch");
  if (!causal && k % 2 == 0) throw ConfigError("conv1d: same padding requires odd kernel width");
  if (dilation < 1) throw ConfigError("conv1d: dilation must be >= 1");
  // center tap index: same padding centers the kernel, causal anchors it at the end
  const std::ptrdiff_t center = causal ? static_cast<std::ptrdiff_t>(k - 1)
                                       : static_cast<std::ptrdiff_t>((k - 1) / 2);
  if (b.valid() && tp.val(b).numel() != dout) throw ShapeError("conv1d: bias size mismatch");

  Tensor<T> out({B, tau, dout});
  const T* bias = b.valid() ? tp.val(b).ptr() : nullptr;
  const std::ptrdiff_t BT = static_cast<std::ptrdiff_t>(B * tau);
  TSGEN_PFOR(BT)
  for (std::ptrdiff_t bt = 0; bt < BT; ++bt) {
    const std::size_t bb = static_cast<std::size_t>(bt) / tau;
    const std::ptrdiff_t t0 = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(bt) % tau);
    T* orow = out.ptr() + static_cast<std::size_t>(bt) * dout;
    for (std::size_t o = 0; o < dout; ++o) {
      T acc = bias ? bias[o] : T(0);
      const T* kslice = kv.ptr() + o * din * k;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t ts = t0 + (static_cast<std::ptrdiff_t>(j) - center) * dilation;
        if (ts < 0 || ts >= static_cast<std::ptrdiff_t>(tau)) continue;
        const T* xrow = xv.ptr() + (bb * tau + static_cast<std::size_t>(ts)) * din;
        for (std::size_t ci = 0; ci < din; ++ci) acc += xrow[ci] * kslice[ci * k + j];
      }
      orow[o] = acc;
    }
  }

  bool ng = tp.needs_grad(x) || tp.needs_grad(ker) || (b.valid() && tp.needs_grad(b));
  return tp.emit(std::move(out), ng,
                 [x, ker, b, B, tau, din, dout, k, center, dilation](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    if (t.needs_grad(x)) {
      auto& dx = t.grad_sink(x);
      const auto& kv2 = t.val(ker);
      const std::ptrdiff_t BT = static_cast<std::ptrdiff_t>(B * tau);
      TSGEN_PFOR(BT)
      for (std::ptrdiff_t bt = 0; bt < BT; ++bt) {
        const std::size_t bb = static_cast<std::size_t>(bt) / tau;
        const std::ptrdiff_t ts = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(bt) % tau);
        T* dxrow = dx.ptr() + static_cast<std::size_t>(bt) * din;
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t t0 = ts - (static_cast<std::ptrdiff_t>(j) - center) * dilation;
          if (t0 < 0 || t0 >= static_cast<std::ptrdiff_t>(tau)) continue;
          const T* grow = g.ptr() + (bb * tau + static_cast<std::size_t>(t0)) * dout;
          for (std::size_t o = 0; o < dout; ++o) {
            const T* kslice = kv2.ptr() + o * din * k;
            const T gv = grow[o];
            for (std::size_t ci = 0; ci < din; ++ci) dxrow[ci] += gv * kslice[ci * k + j];
          }
        }
      }
    }
    if (t.needs_grad(ker)) {
      auto& dk = t.grad_sink(ker);
      const auto& xv2 = t.val(x);
      const std::ptrdiff_t douts = static_cast<std::ptrdiff_t>(dout);
#pragma omp parallel for schedule(static) if (douts > 1)
      for (std::ptrdiff_t o = 0; o < douts; ++o) {
        T* kslice = dk.ptr() + static_cast<std::size_t>(o) * din * k;
        for (std::size_t bb = 0; bb < B; ++bb)
          for (std::size_t tt = 0; tt < tau; ++tt) {
            const T gv = g.data[(bb * tau + tt) * dout + static_cast<std::size_t>(o)];
            for (std::size_t j = 0; j < k; ++j) {
              const std::ptrdiff_t ts = static_cast<std::ptrdiff_t>(tt) +
                                        (static_cast<std::ptrdiff_t>(j) - center) * dilation;
              if (ts < 0 || ts >= static_cast<std::ptrdiff_t>(tau)) continue;
              const T* xrow = xv2.ptr() + (bb * tau + static_cast<std::size_t>(ts)) * din;
              for (std::size_t ci = 0; ci < din; ++ci) kslice[ci * k + j] += gv * xrow[ci];
            }
          }
      }
    }
    if (b.valid() && t.needs_grad(b))
      kernels::par::colsum(B * tau, dout, g.ptr(), t.grad_sink(b).ptr(), /*accumulate=*/true);
  });
}

// ---------------------------------------------------------------------------
// layer norm over the last axis
// ---------------------------------------------------------------------------

template <typename T>
Var layer_norm(Tape<T>& tp, Var x, Var gain, Var offset, T eps) {
  const auto& xv = tp.val(x);
  const std::size_t d = xv.last_dim();
  const std::size_t rows = xv.rows();
  if (tp.val(gain).numel() != d || tp.val(offset).numel() != d)
    throw ShapeError("layer_norm: gain/offset must match last axis");
  auto mean = std::make_shared<Tensor<T>>(Shape{rows});
  auto rstd = std::make_shared<Tensor<T>>(Shape{rows});
  Tensor<T> out(xv.shape);
  const auto& gv = tp.val(gain);
  const auto& ov = tp.val(offset);
  const std::ptrdiff_t R = static_cast<std::ptrdiff_t>(rows);
  TSGEN_PFOR(R)
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    const T* xr = xv.ptr() + r * d;
    T m = 0;
    for (std::size_t j = 0; j < d; ++j) m += xr[j];
    m /= static_cast<T>(d);
    T v = 0;
    for (std::size_t j = 0; j < d; ++j) v += (xr[j] - m) * (xr[j] - m);
    v /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(v + eps);
    mean->data[r] = m;
    rstd->data[r] = rs;
    T* orow = out.ptr() + r * d;
    for (std::size_t j = 0; j < d; ++j) orow[j] = (xr[j] - m) * rs * gv.data[j] + ov.data[j];
  }
  bool ng = tp.needs_grad(x) || tp.needs_grad(gain) || tp.needs_grad(offset);
  return tp.emit(std::move(out), ng, [x, gain, offset, mean, rstd, rows, d](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    const auto& xv2 = t.val(x);
    const auto& gv2 = t.val(gain);
    if (t.needs_grad(x)) {
      auto& dx = t.grad_sink(x);
      const std::ptrdiff_t R = static_cast<std::ptrdiff_t>(rows);
      TSGEN_PFOR(R)
      for (std::ptrdiff_t r = 0; r < R; ++r) {
        const T* xr = xv2.ptr() + r * d;
        const T* gr = g.ptr() + r * d;
        T* dxr = dx.ptr() + r * d;
        const T m = mean->data[r], rs = rstd->data[r];
        T s1 = 0, s2 = 0;  // mean(dxhat), mean(dxhat * xhat)
        for (std::size_t j = 0; j < d; ++j) {
          const T xhat = (xr[j] - m) * rs;
          const T dxhat = gr[j] * gv2.data[j];
          s1 += dxhat;
          s2 += dxhat * xhat;
        }
        s1 /= static_cast<T>(d);
        s2 /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const T xhat = (xr[j] - m) * rs;
          const T dxhat = gr[j] * gv2.data[j];
          dxr[j] += rs * (dxhat - s1 - xhat * s2);
        }
      }
    }
    if (t.needs_grad(gain) || t.needs_grad(offset)) {
      Tensor<T>* dg = t.needs_grad(gain) ? &t.grad_sink(gain) : nullptr;
      Tensor<T>* doff = t.needs_grad(offset) ? &t.grad_sink(offset) : nullptr;
      const std::ptrdiff_t D = static_cast<std::ptrdiff_t>(d);
#pragma omp parallel for schedule(static) if (D > 16)
      for (std::ptrdiff_t j = 0; j < D; ++j) {
        T accg = 0, acco = 0;
        for (std::size_t r = 0; r < rows; ++r) {
          const T gr = g.data[r * d + static_cast<std::size_t>(j)];
          const T xhat =
              (xv2.data[r * d + static_cast<std::size_t>(j)] - mean->data[r]) * rstd->data[r];
          accg += gr * xhat;
          acco += gr;
        }
        if (dg) dg->data[static_cast<std::size_t>(j)] += accg;
        if (doff) doff->data[static_cast<std::size_t>(j)] += acco;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// softmax over the last axis
// ---------------------------------------------------------------------------

template <typename T>
Var softmax_last(Tape<T>& tp, Var x) {
  const auto& xv = tp.val(x);
  const std::size_t d = xv.last_dim();
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape);
  const std::ptrdiff_t R = static_cast<std::ptrdiff_t>(rows);
  TSGEN_PFOR(R)
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    const T* xr = xv.ptr() + r * d;
    T* orow = out.ptr() + r * d;
    T mx = xr[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (std::size_t j = 0; j < d; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      sum += orow[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  return tp.emit(std::move(out), tp.needs_grad(x), [x, rows, d](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(Var{self});
    const auto& y = t.val(Var{self});
    auto& dx = t.grad_sink(x);
    const std::ptrdiff_t R = static_cast<std::ptrdiff_t>(rows);
    TSGEN_PFOR(R)
    for (std::ptrdiff_t r = 0; r < R; ++r) {
      const T* yr = y.ptr() + r * d;
      const T* gr = g.ptr() + r * d;
      T* dxr = dx.ptr() + r * d;
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < d; ++j) dxr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// head split/merge and batched matmuls for attention
// ---------------------------------------------------------------------------

// [B, tau, h*dh] -> [B*h, tau, dh]
template <typename T>
Var split_heads(Tape<T>& tp, Var x, std::size_t heads) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 3) throw ShapeError("split_heads: expects [B, tau, width]");
  const std::size_t B = xv.dim(0), tau = xv.dim(1), width = xv.dim(2);
  if (width % heads != 0) throw ConfigError("split_heads: width not divisible by head count");
  const std::size_t dh = width / heads;
  Tensor<T> out({B * heads, tau, dh});
  const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(B * heads * tau);
  TSGEN_PFOR(total)
  for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
    const std::size_t tpos = static_cast<std::size_t>(idx) % tau;
    const std::size_t bh = static_cast<std::size_t>(idx) / tau;
    const std::size_t b = bh / heads, h = bh % heads;
    const T* src = xv.ptr() + (b * tau + tpos) * width + h * dh;
    T* dst = out.ptr() + static_cast<std::size_t>(idx) * dh;
    for (std::size_t j = 0; j < dh; ++j) dst[j] = src[j];
  }
  return tp.emit(std::move(out), tp.needs_grad(x), [x, B, tau, heads, dh, width](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(Var{self});
    auto& dx = t.grad_sink(x);
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(B * tau);
    TSGEN_PFOR(total)
    for (std::ptrdiff_t bt = 0; bt < total; ++bt) {
      const std::size_t b = static_cast<std::size_t>(bt) / tau;
      const std::size_t tpos = static_cast<std::size_t>(bt) % tau;
      T* dst = dx.ptr() + static_cast<std::size_t>(bt) * width;
      for (std::size_t h = 0; h < heads; ++h) {
        const T* src = g.ptr() + ((b * heads + h) * tau + tpos) * dh;
        for (std::size_t j = 0; j < dh; ++j) dst[h * dh + j] += src[j];
      }
    }
  });
}

// [B*h, tau, dh] -> [B, tau, h*dh]
template <typename T>
Var merge_heads(Tape<T>& tp, Var x, std::size_t heads) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 3 || xv.dim(0) % heads != 0)
    throw ShapeError("merge_heads: expects [B*h, tau, dh]");
  const std::size_t B = xv.dim(0) / heads, tau = xv.dim(1), dh = xv.dim(2);
  const std::size_t width = heads * dh;
  Tensor<T> out({B, tau, width});
  const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(B * tau);
  TSGEN_PFOR(total)
  for (std::ptrdiff_t bt = 0; bt < total; ++bt) {
    const std::size_t b = static_cast<std::size_t>(bt) / tau;
    const std::size_t tpos = static_cast<std::size_t>(bt) % tau;
    T* dst = out.ptr() + static_cast<std::size_t>(bt) * width;
    for (std::size_t h = 0; h < heads; ++h) {
      const T* src = xv.ptr() + ((b * heads + h) * tau + tpos) * dh;
      for (std::size_t j = 0; j < dh; ++j) dst[h * dh + j] = src[j];
    }
  }
  return tp.emit(std::move(out), tp.needs_grad(x), [x, B, tau, heads, dh, width](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(Var{self});
    auto& dx = t.grad_sink(x);
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(B * heads * tau);
    TSGEN_PFOR(total)
    for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
      const std::size_t tpos = static_cast<std::size_t>(idx) % tau;
      const std::size_t bh = static_cast<std::size_t>(idx) / tau;
      const std::size_t b = bh / heads, h = bh % heads;
      const T* src = g.ptr() + (b * tau + tpos) * width + h * dh;
      T* dst = dx.ptr() + static_cast<std::size_t>(idx) * dh;
      for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
    }
  });
}

namespace detail {

// grouped gemms used by bmm backward paths; parallel over groups
template <typename T>
void group_gemm_nt(std::size_t G, std::size_t M, std::size_t N, std::size_t K, const T* A,
                   const T* B, T* C, bool acc) {
  const std::ptrdiff_t Gs = static_cast<std::ptrdiff_t>(G);
#pragma omp parallel for schedule(static) if (Gs > 1)
  for (std::ptrdiff_t g = 0; g < Gs; ++g)
    kernels::serial::gemm_nt(M, N, K, A + g * M * K, B + g * N * K, C + g * M * N, acc);
}

template <typename T>
void group_gemm_nn(std::size_t G, std::size_t M, std::size_t N, std::size_t K, const T* A,
                   const T* B, T* C, bool acc) {
  const std::ptrdiff_t Gs = static_cast<std::ptrdiff_t>(G);
#pragma omp parallel for schedule(static) if (Gs > 1)
  for (std::ptrdiff_t g = 0; g < Gs; ++g)
    kernels::serial::gemm_nn(M, N, K, A + g * M * K, B + g * K * N, C + g * M * N, acc);
}

template <typename T>
void group_gemm_tn(std::size_t G, std::size_t M, std::size_t N, std::size_t K, const T* A,
                   const T* B, T* C, bool acc) {
  const std::ptrdiff_t Gs = static_cast<std::ptrdiff_t>(G);
#pragma omp parallel for schedule(static) if (Gs > 1)
  for (std::ptrdiff_t g = 0; g < Gs; ++g)
    kernels::serial::gemm_tn(M, N, K, A + g * K * M, B + g * K * N, C + g * M * N, acc);
}

}  // namespace detail

// [G, M, K] x [G, N, K] -> [G, M, N]
template <typename T>
Var bmm_nt(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2))
    throw ShapeError("bmm_nt: shapes incompatible");
  const std::size_t G = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(1);
  Tensor<T> out({G, M, N});
  detail::group_gemm_nt(G, M, N, K, av.ptr(), bv.ptr(), out.ptr(), false);
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), ng, [a, b, G, M, N, K](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    if (t.needs_grad(a))  // dA[g] = dY[g] B[g]
      detail::group_gemm_nn(G, M, K, N, g.ptr(), t.val(b).ptr(), t.grad_sink(a).ptr(), true);
    if (t.needs_grad(b))  // dB[g] = dY[g]^T A[g]
      detail::group_gemm_tn(G, N, K, M, g.ptr(), t.val(a).ptr(), t.grad_sink(b).ptr(), true);
  });
}

// [G, M, K] x [G, K, N] -> [G, M, N]
template <typename T>
Var bmm_nn(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
    throw ShapeError("bmm_nn: shapes incompatible");
  const std::size_t G = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(2);
  Tensor<T> out({G, M, N});
  detail::group_gemm_nn(G, M, N, K, av.ptr(), bv.ptr(), out.ptr(), false);
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), ng, [a, b, G, M, N, K](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    if (t.needs_grad(a))  // dA[g] = dY[g] B[g]^T
      detail::group_gemm_nt(G, M, K, N, g.ptr(), t.val(b).ptr(), t.grad_sink(a).ptr(), true);
    if (t.needs_grad(b))  // dB[g] = A[g]^T dY[g]
      detail::group_gemm_tn(G, K, N, M, t.val(a).ptr(), g.ptr(), t.grad_sink(b).ptr(), true);
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var reshape(Tape<T>& tp, Var x, Shape s) {
  const auto& xv = tp.val(x);
  if (shape_numel(s) != xv.numel()) throw ShapeError("reshape: element count mismatch");
  Tensor<T> out(std::move(s), xv.data);
  return tp.emit(std::move(out), tp.needs_grad(x), [x](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(Var{self});
    auto& sink = t.grad_sink(x);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(g.numel());
    TSGEN_PFOR(m)
    for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g.data[i];
  });
}

template <typename T>
Var concat0(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (av.rank() != bv.rank() || av.rank() < 1) throw ShapeError("concat0: rank mismatch");
  for (std::size_t i = 1; i < av.rank(); ++i)
    if (av.dim(i) != bv.dim(i)) throw ShapeError("concat0: trailing dims differ");
  Shape s = av.shape;
  s[0] += bv.dim(0);
  Tensor<T> out(s);
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.numel());
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  const std::size_t na = av.numel();
  return tp.emit(std::move(out), ng, [a, b, na](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    if (t.needs_grad(a)) {
      auto& sink = t.grad_sink(a);
      for (std::size_t i = 0; i < na; ++i) sink.data[i] += g.data[i];
    }
    if (t.needs_grad(b)) {
      auto& sink = t.grad_sink(b);
      const std::size_t nb = g.numel() - na;
      for (std::size_t i = 0; i < nb; ++i) sink.data[i] += g.data[na + i];
    }
  });
}

// x [B, tau, d] -> [B, d] at time index t
template <typename T>
Var slice_time(Tape<T>& tp, Var x, std::size_t t_idx) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 3 || t_idx >= xv.dim(1)) throw ShapeError("slice_time: bad index");
  const std::size_t B = xv.dim(0), tau = xv.dim(1), d = xv.dim(2);
  Tensor<T> out({B, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < d; ++j) out.data[b * d + j] = xv.data[(b * tau + t_idx) * d + j];
  return tp.emit(std::move(out), tp.needs_grad(x), [x, t_idx, B, tau, d](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(Var{self});
    auto& sink = t.grad_sink(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < d; ++j)
        sink.data[(b * tau + t_idx) * d + j] += g.data[b * d + j];
  });
}

// x [B, tau, d] -> [B, t1-t0, d]
template <typename T>
Var slice_time_range(Tape<T>& tp, Var x, std::size_t t0, std::size_t t1) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 3 || t0 >= t1 || t1 > xv.dim(1)) throw ShapeError("slice_time_range: bad range");
  const std::size_t B = xv.dim(0), tau = xv.dim(1), d = xv.dim(2), L = t1 - t0;
  Tensor<T> out({B, L, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t tt = 0; tt < L; ++tt)
      for (std::size_t j = 0; j < d; ++j)
        out.data[(b * L + tt) * d + j] = xv.data[(b * tau + t0 + tt) * d + j];
  return tp.emit(std::move(out), tp.needs_grad(x), [x, t0, B, tau, d, L](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(Var{self});
    auto& sink = t.grad_sink(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t tt = 0; tt < L; ++tt)
        for (std::size_t j = 0; j < d; ++j)
          sink.data[(b * tau + t0 + tt) * d + j] += g.data[(b * L + tt) * d + j];
  });
}

// mean over the time axis: [B, tau, d] -> [B, d]
template <typename T>
Var mean_time(Tape<T>& tp, Var x) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 3) throw ShapeError("mean_time: expects [B, tau, d]");
  const std::size_t B = xv.dim(0), tau = xv.dim(1), d = xv.dim(2);
  Tensor<T> out({B, d});
  const T inv = T(1) / static_cast<T>(tau);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t tt = 0; tt < tau; ++tt)
      for (std::size_t j = 0; j < d; ++j) out.data[b * d + j] += xv.data[(b * tau + tt) * d + j];
  for (auto& v : out.data) v *= inv;
  return tp.emit(std::move(out), tp.needs_grad(x), [x, B, tau, d, inv](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(Var{self});
    auto& sink = t.grad_sink(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t tt = 0; tt < tau; ++tt)
        for (std::size_t j = 0; j < d; ++j)
          sink.data[(b * tau + tt) * d + j] += g.data[b * d + j] * inv;
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Var sum_all(Tape<T>& tp, Var x) {
  const auto& xv = tp.val(x);
  T acc = 0;
  for (T v : xv.data) acc += v;
  Tensor<T> out({1});
  out.data[0] = acc;
  return tp.emit(std::move(out), tp.needs_grad(x), [x](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const T g = t.grad(Var{self}).data[0];
    auto& sink = t.grad_sink(x);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sink.numel());
    TSGEN_PFOR(m)
    for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g;
  });
}

template <typename T>
Var mean_all(Tape<T>& tp, Var x) {
  const std::size_t n = tp.val(x).numel();
  return scale(tp, sum_all(tp, x), T(1) / static_cast<T>(n));
}

template <typename T>
Var mse_loss(Tape<T>& tp, Var a, Var b) {
  return mean_all(tp, square(tp, sub(tp, a, b)));
}

template <typename T>
Var mae_loss(Tape<T>& tp, Var a, Var b) {
  return mean_all(tp, abs_op(tp, sub(tp, a, b)));
}

// ---------------------------------------------------------------------------
// model-specific fused ops
// ---------------------------------------------------------------------------

// z = mu + exp(0.5 * logvar) * eps, eps held constant
template <typename T>
Var reparameterize(Tape<T>& tp, Var mu, Var logvar, std::shared_ptr<const Tensor<T>> eps) {
  const auto& mv = tp.val(mu);
  const auto& lv = tp.val(logvar);
  if (!same_shape(mv, lv) || !(mv.shape == eps->shape))
    throw ShapeError("reparameterize: shape mismatch");
  Tensor<T> out(mv.shape);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.numel());
  TSGEN_PFOR(n)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    out.data[i] = mv.data[i] + std::exp(T(0.5) * lv.data[i]) * eps->data[i];
  bool ng = tp.needs_grad(mu) || tp.needs_grad(logvar);
  return tp.emit(std::move(out), ng, [mu, logvar, eps](Tape<T>& t, int self) {
    const auto& g = t.grad(Var{self});
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(g.numel());
    if (t.needs_grad(mu)) {
      auto& sink = t.grad_sink(mu);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g.data[i];
    }
    if (t.needs_grad(logvar)) {
      const auto& lv2 = t.val(logvar);
      auto& sink = t.grad_sink(logvar);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i)
        sink.data[i] += g.data[i] * eps->data[i] * T(0.5) * std::exp(T(0.5) * lv2.data[i]);
    }
  });
}

// KL(N(mu, exp(logvar)) || N(0, I)) summed over non-batch axes, mean over
// axis 0: 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar) / B
template <typename T>
Var gaussian_kl(Tape<T>& tp, Var mu, Var logvar) {
  const auto& mv = tp.val(mu);
  const auto& lv = tp.val(logvar);
  if (!same_shape(mv, lv)) throw ShapeError("gaussian_kl: shape mismatch");
  const T invB = T(1) / static_cast<T>(mv.shape.empty() ? 1 : mv.dim(0));
  T acc = 0;
  for (std::size_t i = 0; i < mv.numel(); ++i)
    acc += T(0.5) * (mv.data[i] * mv.data[i] + std::exp(lv.data[i]) - T(1) - lv.data[i]);
  Tensor<T> out({1});
  out.data[0] = acc * invB;
  bool ng = tp.needs_grad(mu) || tp.needs_grad(logvar);
  return tp.emit(std::move(out), ng, [mu, logvar, invB](Tape<T>& t, int self) {
    const T g = t.grad(Var{self}).data[0] * invB;
    const auto& mv2 = t.val(mu);
    const auto& lv2 = t.val(logvar);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(mv2.numel());
    if (t.needs_grad(mu)) {
      auto& sink = t.grad_sink(mu);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i) sink.data[i] += g * mv2.data[i];
    }
    if (t.needs_grad(logvar)) {
      auto& sink = t.grad_sink(logvar);
      TSGEN_PFOR(m)
      for (std::ptrdiff_t i = 0; i < m; ++i)
        sink.data[i] += g * T(0.5) * (std::exp(lv2.data[i]) - T(1));
    }
  });
}

// L1 distance between one-sided DFTs along the time axis, real and imaginary
// parts taken separately; mean over (batch, bins, features, 2 parts).
// a, b: [B, tau, d]
template <typename T>
Var spectral_l1(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  if (!same_shape(av, bv) || av.rank() != 3) throw ShapeError("spectral_l1: expects equal [B,tau,d]");
  const std::size_t B = av.dim(0), tau = av.dim(1), d = av.dim(2);
  const std::size_t K = tau / 2 + 1;
  auto basis_cos = std::make_shared<Tensor<T>>(Shape{K, tau});
  auto basis_sin = std::make_shared<Tensor<T>>(Shape{K, tau});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < tau; ++t) {
      const double ang = 2.0 * 3.14159265358979323846 * static_cast<double>(k * t) /
                         static_cast<double>(tau);
      basis_cos->data[k * tau + t] = static_cast<T>(std::cos(ang));
      basis_sin->data[k * tau + t] = static_cast<T>(std::sin(ang));
    }
  // diff spectra, kept for the backward pass
  auto dre = std::make_shared<Tensor<T>>(Shape{B, K, d});
  auto dim = std::make_shared<Tensor<T>>(Shape{B, K, d});
  const std::ptrdiff_t Bs = static_cast<std::ptrdiff_t>(B);
#pragma omp parallel for schedule(static) if (Bs > 1)
  for (std::ptrdiff_t bb = 0; bb < Bs; ++bb) {
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < d; ++j) {
        T re = 0, im = 0;
        for (std::size_t t = 0; t < tau; ++t) {
          const T diff = av.data[(static_cast<std::size_t>(bb) * tau + t) * d + j] -
                         bv.data[(static_cast<std::size_t>(bb) * tau + t) * d + j];
          re += diff * basis_cos->data[k * tau + t];
          im -= diff * basis_sin->data[k * tau + t];
        }
        dre->data[(static_cast<std::size_t>(bb) * K + k) * d + j] = re;
        dim->data[(static_cast<std::size_t>(bb) * K + k) * d + j] = im;
      }
  }
  const std::size_t count = B * K * d * 2;
  T acc = 0;
  for (std::size_t i = 0; i < dre->numel(); ++i) acc += std::abs(dre->data[i]) + std::abs(dim->data[i]);
  Tensor<T> out({1});
  out.data[0] = acc / static_cast<T>(count);
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  return tp.emit(std::move(out), ng,
                 [a, b, B, tau, d, K, count, basis_cos, basis_sin, dre, dim](Tape<T>& t, int self) {
    const T g = t.grad(Var{self}).data[0] / static_cast<T>(count);
    auto sgn = [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); };
    Tensor<T>* da = t.needs_grad(a) ? &t.grad_sink(a) : nullptr;
    Tensor<T>* db = t.needs_grad(b) ? &t.grad_sink(b) : nullptr;
    if (!da && !db) return;
    const std::ptrdiff_t BT = static_cast<std::ptrdiff_t>(B * tau);
    TSGEN_PFOR(BT)
    for (std::ptrdiff_t bt = 0; bt < BT; ++bt) {
      const std::size_t bb = static_cast<std::size_t>(bt) / tau;
      const std::size_t tt = static_cast<std::size_t>(bt) % tau;
      for (std::size_t j = 0; j < d; ++j) {
        T grad = 0;
        for (std::size_t k = 0; k < K; ++k) {
          grad += sgn(dre->data[(bb * K + k) * d + j]) * basis_cos->data[k * tau + tt];
          grad -= sgn(dim->data[(bb * K + k) * d + j]) * basis_sin->data[k * tau + tt];
        }
        grad *= g;
        const std::size_t idx = (bb * tau + tt) * d + j;
        if (da) da->data[idx] += grad;
        if (db) db->data[idx] -= grad;
      }
    }
  });
}

// mean binary cross-entropy on logits; targets in {0,1}, held constant
template <typename T>
Var bce_logits(Tape<T>& tp, Var logits, std::shared_ptr<const Tensor<T>> targets) {
  const auto& lv = tp.val(logits);
  if (lv.numel() != targets->numel()) throw ShapeError("bce_logits: target size mismatch");
  const std::size_t n = lv.numel();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T l = lv.data[i], y = targets->data[i];
    acc += std::max(l, T(0)) - l * y + std::log1p(std::exp(-std::abs(l)));
  }
  Tensor<T> out({1});
  out.data[0] = acc / static_cast<T>(n);
  return tp.emit(std::move(out), tp.needs_grad(logits), [logits, targets, n](Tape<T>& t, int self) {
    if (!t.needs_grad(logits)) return;
    const T g = t.grad(Var{self}).data[0] / static_cast<T>(n);
    const auto& lv2 = t.val(logits);
    auto& sink = t.grad_sink(logits);
    for (std::size_t i = 0; i < n; ++i)
      sink.data[i] += g * (detail::sigmoid_scalar(lv2.data[i]) - targets->data[i]);
  });
}

// normalized-temperature cross-entropy on a [2B, 2B] similarity matrix
// (already divided by temperature); positives pair row i with row (i+B) mod 2B,
// the diagonal is excluded from the denominator
template <typename T>
Var ntxent(Tape<T>& tp, Var sims) {
  const auto& sv = tp.val(sims);
  if (sv.rank() != 2 || sv.dim(0) != sv.dim(1) || sv.dim(0) % 2 != 0)
    throw ShapeError("ntxent: expects square [2B, 2B] similarities");
  const std::size_t n = sv.dim(0), half = n / 2;
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = sv.ptr() + i * n;
    const std::size_t pos = (i + half) % n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, row[k]);
    T denom = 0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(row[k] - mx);
    acc += -row[pos] + mx + std::log(denom);
  }
  Tensor<T> out({1});
  out.data[0] = acc / static_cast<T>(n);
  return tp.emit(std::move(out), tp.needs_grad(sims), [sims, n, half](Tape<T>& t, int self) {
    if (!t.needs_grad(sims)) return;
    const T g = t.grad(Var{self}).data[0] / static_cast<T>(n);
    const auto& sv2 = t.val(sims);
    auto& sink = t.grad_sink(sims);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = sv2.ptr() + i * n;
      T* drow = sink.ptr() + i * n;
      const std::size_t pos = (i + half) % n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < n; ++k)
        if (k != i) mx = std::max(mx, row[k]);
      T denom = 0;
      for (std::size_t k = 0; k < n; ++k)
        if (k != i) denom += std::exp(row[k] - mx);
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i) continue;
        const T q = std::exp(row[k] - mx) / denom;
        drow[k] += g * (q - (k == pos ? T(1) : T(0)));
      }
    }
  });
}

// row-wise L2 normalization (unit embeddings for cosine similarity)
template <typename T>
Var l2_normalize_rows(Tape<T>& tp, Var x, T eps) {
  const auto& xv = tp.val(x);
  const std::size_t d = xv.last_dim(), rows = xv.rows();
  auto norms = std::make_shared<Tensor<T>>(Shape{rows});
  Tensor<T> out(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.ptr() + r * d;
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xr[j] * xr[j];
    const T nrm = std::sqrt(s) + eps;
    norms->data[r] = nrm;
    T* orow = out.ptr() + r * d;
    for (std::size_t j = 0; j < d; ++j) orow[j] = xr[j] / nrm;
  }
  return tp.emit(std::move(out), tp.needs_grad(x), [x, norms, rows, d](Tape<T>& t, int self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(Var{self});
    const auto& y = t.val(Var{self});
    auto& sink = t.grad_sink(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y.ptr() + r * d;
      const T* gr = g.ptr() + r * d;
      T* dr = sink.ptr() + r * d;
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
      const T inv = T(1) / norms->data[r];
      for (std::size_t j = 0; j < d; ++j) dr[j] += (gr[j] - yr[j] * dot) * inv;
    }
  });
}

#undef TSGEN_PFOR
#undef TSGEN_PRAGMA

}  // namespace tsgen::ops

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dwstrack/common.hpp"
#include "dwstrack/tensor.hpp"

namespace dwstrack {

enum class Mode { kTrain, kEval };

namespace detail {

// Broadcasting is restricted to singleton axes at equal rank; implicit rank
// promotion is rejected so shape mistakes surface at the call site.
struct BroadcastPlan {
  Shape out;
  std::vector<int64_t> stride_a;
  std::vector<int64_t> stride_b;
  int64_t n = 1;
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size())
    throw DimensionError(std::string(op) + ": operands must have equal rank (no implicit rank promotion), got " +
                         shape_to_string(a) + " and " + shape_to_string(b));
  BroadcastPlan p;
  size_t r = a.size();
  p.out.resize(r);
  for (size_t i = 0; i < r; ++i) {
    if (a[i] == b[i] || a[i] == 1 || b[i] == 1) {
      p.out[i] = std::max(a[i], b[i]);
    } else {
      throw DimensionError(std::string(op) + ": shapes not broadcastable: " + shape_to_string(a) +
                           " vs " + shape_to_string(b));
    }
    p.n *= p.out[i];
  }
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  int64_t sa = 1, sb = 1;
  for (size_t i = r; i-- > 0;) {
    p.stride_a[i] = (a[i] == 1 && p.out[i] != 1) ? 0 : sa;
    p.stride_b[i] = (b[i] == 1 && p.out[i] != 1) ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  return p;
}

// Visits every output index in row-major order together with the mapped
// operand indices. Odometer-style, no divisions.
template <typename F>
void broadcast_for_each(const BroadcastPlan& p, F&& f) {
  size_t r = p.out.size();
  std::vector<int64_t> coord(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t flat = 0; flat < p.n; ++flat) {
    f(flat, ia, ib);
    for (size_t ax = r; ax-- > 0;) {
      ++coord[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (coord[ax] < p.out[ax]) break;
      coord[ax] = 0;
      ia -= p.stride_a[ax] * p.out[ax];
      ib -= p.stride_b[ax] * p.out[ax];
    }
  }
}

template <typename T, typename FwdSame, typename Fwd>
TensorT<T> binary_op(const char* name, const TensorT<T>& a, const TensorT<T>& b, FwdSame&& same,
                     Fwd&& general,
                     std::function<void(const BroadcastPlan*, TensorT<T>, TensorT<T>, TensorT<T>)> backprop) {
  if (a.shape() == b.shape()) {
    auto y = TensorT<T>::zeros(a.shape());
    same(a.values(), b.values(), y.mutable_values());
    if (wants_grad(a) || wants_grad(b)) {
      record_op(y, [backprop, a, b, y]() { backprop(nullptr, a, b, y); });
    }
    return y;
  }
  BroadcastPlan p = broadcast_plan(a.shape(), b.shape(), name);
  auto y = TensorT<T>::zeros(p.out);
  general(p, a.values(), b.values(), y.mutable_values());
  if (wants_grad(a) || wants_grad(b)) {
    auto plan = std::make_shared<BroadcastPlan>(std::move(p));
    record_op(y, [backprop, plan, a, b, y]() { backprop(plan.get(), a, b, y); });
  }
  return y;
}

}  // namespace detail

/// y = a + b with singleton-axis broadcasting.
template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op<T>(
      "add", a, b,
      [](const std::vector<T>& av, const std::vector<T>& bv, std::vector<T>& yv) {
        for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
      },
      [](const detail::BroadcastPlan& p, const std::vector<T>& av, const std::vector<T>& bv,
         std::vector<T>& yv) {
        detail::broadcast_for_each(p, [&](int64_t o, int64_t ia, int64_t ib) { yv[o] = av[ia] + bv[ib]; });
      },
      [](const detail::BroadcastPlan* p, TensorT<T> a, TensorT<T> b, TensorT<T> y) {
        const auto& gy = y.storage()->grad;
        if (!p) {
          if (a.storage()->requires_grad || a.storage()->tracked) {
            auto& ga = detail::grad_acc(a.storage());
            for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
          }
          if (b.storage()->requires_grad || b.storage()->tracked) {
            auto& gb = detail::grad_acc(b.storage());
            for (size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
          }
          return;
        }
        auto& ga = detail::grad_acc(a.storage());
        auto& gb = detail::grad_acc(b.storage());
        detail::broadcast_for_each(*p, [&](int64_t o, int64_t ia, int64_t ib) {
          ga[ia] += gy[o];
          gb[ib] += gy[o];
        });
      });
}

/// y = a - b with singleton-axis broadcasting.
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b,
      [](const std::vector<T>& av, const std::vector<T>& bv, std::vector<T>& yv) {
        for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] - bv[i];
      },
      [](const detail::BroadcastPlan& p, const std::vector<T>& av, const std::vector<T>& bv,
         std::vector<T>& yv) {
        detail::broadcast_for_each(p, [&](int64_t o, int64_t ia, int64_t ib) { yv[o] = av[ia] - bv[ib]; });
      },
      [](const detail::BroadcastPlan* p, TensorT<T> a, TensorT<T> b, TensorT<T> y) {
        const auto& gy = y.storage()->grad;
        auto& ga = detail::grad_acc(a.storage());
        auto& gb = detail::grad_acc(b.storage());
        if (!p) {
          for (size_t i = 0; i < gy.size(); ++i) {
            ga[i] += gy[i];
            gb[i] -= gy[i];
          }
          return;
        }
        detail::broadcast_for_each(*p, [&](int64_t o, int64_t ia, int64_t ib) {
          ga[ia] += gy[o];
          gb[ib] -= gy[o];
        });
      });
}

/// Hadamard product, the star-product primitive. Singleton-axis broadcasting.
template <typename T>
TensorT<T> elementwise_mul(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op<T>(
      "elementwise_mul", a, b,
      [](const std::vector<T>& av, const std::vector<T>& bv, std::vector<T>& yv) {
        for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
      },
      [](const detail::BroadcastPlan& p, const std::vector<T>& av, const std::vector<T>& bv,
         std::vector<T>& yv) {
        detail::broadcast_for_each(p, [&](int64_t o, int64_t ia, int64_t ib) { yv[o] = av[ia] * bv[ib]; });
      },
      [](const detail::BroadcastPlan* p, TensorT<T> a, TensorT<T> b, TensorT<T> y) {
        const auto& gy = y.storage()->grad;
        const auto& av = a.values();
        const auto& bv = b.values();
        auto& ga = detail::grad_acc(a.storage());
        auto& gb = detail::grad_acc(b.storage());
        if (!p) {
          for (size_t i = 0; i < gy.size(); ++i) {
            ga[i] += gy[i] * bv[i];
            gb[i] += gy[i] * av[i];
          }
          return;
        }
        detail::broadcast_for_each(*p, [&](int64_t o, int64_t ia, int64_t ib) {
          ga[ia] += gy[o] * bv[ib];
          gb[ib] += gy[o] * av[ia];
        });
      });
}

/// y = c * x for a plain constant c.
template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  auto y = TensorT<T>::zeros(x.shape());
  const auto& xv = x.values();
  auto& yv = y.mutable_values();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = c * xv[i];
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y, c]() {
      const auto& gy = y.storage()->grad;
      auto& gx = detail::grad_acc(x.storage());
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += c * gy[i];
    });
  }
  return y;
}

/// y = W x + b applied per row; x is [..., Cin], W is [Cout, Cin], b is [Cout].
template <typename T>
TensorT<T> affine(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  if (w.rank() != 2)
    throw DimensionError("affine: weight must be rank 2 [Cout,Cin], got " + shape_to_string(w.shape()));
  int64_t cout = w.dim(0), cin = w.dim(1);
  if (x.rank() < 1 || x.shape().back() != cin)
    throw DimensionError("affine: input inner dim must match weight, input " + shape_to_string(x.shape()) +
                         " vs weight " + shape_to_string(w.shape()));
  if (!b.defined() || b.rank() != 1 || b.dim(0) != cout)
    throw DimensionError("affine: bias must be [Cout]=" + std::to_string(cout) + ", got " +
                         (b.defined() ? shape_to_string(b.shape()) : std::string("<undefined>")));
  Shape yshape = x.shape();
  yshape.back() = cout;
  auto y = TensorT<T>::zeros(yshape);
  int64_t rows = x.numel() / cin;
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  auto& yv = y.mutable_values();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * cin;
    T* yr = yv.data() + r * cout;
    for (int64_t o = 0; o < cout; ++o) {
      T acc = bv[o];
      const T* wr = wv.data() + o * cin;
      for (int64_t i = 0; i < cin; ++i) acc += wr[i] * xr[i];
      yr[o] = acc;
    }
  }
  if (detail::wants_grad(x) || detail::wants_grad(w) || detail::wants_grad(b)) {
    detail::record_op(y, [x, w, b, y, rows, cin, cout]() {
      const auto& gy = y.storage()->grad;
      const auto& xv = x.values();
      const auto& wv = w.values();
      auto& gx = detail::grad_acc(x.storage());
      auto& gw = detail::grad_acc(w.storage());
      auto& gb = detail::grad_acc(b.storage());
      for (int64_t r = 0; r < rows; ++r) {
        const T* gyr = gy.data() + r * cout;
        const T* xr = xv.data() + r * cin;
        T* gxr = gx.data() + r * cin;
        for (int64_t o = 0; o < cout; ++o) {
          T g = gyr[o];
          const T* wr = wv.data() + o * cin;
          T* gwr = gw.data() + o * cin;
          for (int64_t i = 0; i < cin; ++i) {
            gxr[i] += g * wr[i];
            gwr[i] += g * xr[i];
          }
          gb[o] += g;
        }
      }
    });
  }
  return y;
}

inline int64_t conv1d_out_len(int64_t len, int64_t kernel, int64_t stride, int64_t padding) {
  return (len + 2 * padding - kernel) / stride + 1;
}

/// 1D convolution over the last axis. x is [Cin,L] or [B,Cin,L]; weight is
/// [Cout, Cin/groups, k]. groups=Cin with Cout=Cin gives a depthwise conv,
/// k=1 with groups=1 a pointwise conv. Bias may be undefined.
template <typename T>
TensorT<T> conv1d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int64_t stride = 1,
                  int64_t padding = 0, int64_t groups = 1) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("conv1d: input must be [Cin,L] or [B,Cin,L], got " + shape_to_string(x.shape()));
  if (w.rank() != 3)
    throw DimensionError("conv1d: weight must be [Cout,Cin/groups,k], got " + shape_to_string(w.shape()));
  bool batched = x.rank() == 3;
  int64_t batch = batched ? x.dim(0) : 1;
  int64_t cin = batched ? x.dim(1) : x.dim(0);
  int64_t len = batched ? x.dim(2) : x.dim(1);
  int64_t cout = w.dim(0), cin_g = w.dim(1), k = w.dim(2);
  if (stride < 1 || padding < 0 || groups < 1)
    throw ConfigError("conv1d: invalid stride/padding/groups (" + std::to_string(stride) + "," +
                      std::to_string(padding) + "," + std::to_string(groups) + ")");
  if (cin % groups != 0 || cout % groups != 0)
    throw ConfigError("conv1d: channel counts not divisible by groups=" + std::to_string(groups) +
                      " (Cin=" + std::to_string(cin) + ", Cout=" + std::to_string(cout) + ")");
  if (cin_g != cin / groups)
    throw DimensionError("conv1d: weight " + shape_to_string(w.shape()) + " inconsistent with Cin=" +
                         std::to_string(cin) + ", groups=" + std::to_string(groups));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout))
    throw DimensionError("conv1d: bias must be [Cout]=" + std::to_string(cout) + ", got " +
                         shape_to_string(b.shape()));
  int64_t lout = conv1d_out_len(len, k, stride, padding);
  if (lout < 1)
    throw DimensionError("conv1d: input too short, L=" + std::to_string(len) + " with k=" +
                         std::to_string(k) + ", stride=" + std::to_string(stride) + ", padding=" +
                         std::to_string(padding) + " gives empty output");

  Shape yshape = batched ? Shape{batch, cout, lout} : Shape{cout, lout};
  auto y = TensorT<T>::zeros(yshape);
  int64_t cout_g = cout / groups;
  const auto& xv = x.values();
  const auto& wv = w.values();
  auto& yv = y.mutable_values();
  for (int64_t n = 0; n < batch; ++n) {
    const T* xb = xv.data() + n * cin * len;
    T* yb = yv.data() + n * cout * lout;
    for (int64_t g = 0; g < groups; ++g) {
      for (int64_t oc = 0; oc < cout_g; ++oc) {
        int64_t co = g * cout_g + oc;
        T* yr = yb + co * lout;
        if (b.defined()) {
          T bias = b.values()[co];
          for (int64_t lo = 0; lo < lout; ++lo) yr[lo] = bias;
        }
        for (int64_t ic = 0; ic < cin_g; ++ic) {
          const T* xr = xb + (g * cin_g + ic) * len;
          const T* wr = wv.data() + (co * cin_g + ic) * k;
          for (int64_t kk = 0; kk < k; ++kk) {
            T wgt = wr[kk];
            int64_t base = kk - padding;
            // valid lo range: 0 <= lo*stride + base < len
            int64_t lo0 = base < 0 ? (-base + stride - 1) / stride : 0;
            int64_t lo1 = std::min(lout, base < len ? (len - 1 - base) / stride + 1 : int64_t(0));
            for (int64_t lo = lo0; lo < lo1; ++lo) yr[lo] += wgt * xr[lo * stride + base];
          }
        }
      }
    }
  }
  if (detail::wants_grad(x) || detail::wants_grad(w) || (b.defined() && detail::wants_grad(b))) {
    detail::record_op(y, [x, w, b, y, batch, cin, len, cout, cin_g, cout_g, k, groups, stride, padding,
                          lout]() {
      const auto& gy = y.storage()->grad;
      const auto& xv = x.values();
      const auto& wv = w.values();
      auto& gx = detail::grad_acc(x.storage());
      auto& gw = detail::grad_acc(w.storage());
      std::vector<T>* gb = b.defined() ? &detail::grad_acc(b.storage()) : nullptr;
      for (int64_t n = 0; n < batch; ++n) {
        const T* xb = xv.data() + n * cin * len;
        const T* gyb = gy.data() + n * cout * lout;
        T* gxb = gx.data() + n * cin * len;
        for (int64_t g = 0; g < groups; ++g) {
          for (int64_t oc = 0; oc < cout_g; ++oc) {
            int64_t co = g * cout_g + oc;
            const T* gyr = gyb + co * lout;
            if (gb) {
              T acc = T(0);
              for (int64_t lo = 0; lo < lout; ++lo) acc += gyr[lo];
              (*gb)[co] += acc;
            }
            for (int64_t ic = 0; ic < cin_g; ++ic) {
              const T* xr = xb + (g * cin_g + ic) * len;
              T* gxr = gxb + (g * cin_g + ic) * len;
              const T* wr = wv.data() + (co * cin_g + ic) * k;
              T* gwr = gw.data() + (co * cin_g + ic) * k;
              for (int64_t kk = 0; kk < k; ++kk) {
                int64_t base = kk - padding;
                int64_t lo0 = base < 0 ? (-base + stride - 1) / stride : 0;
                int64_t lo1 = std::min(lout, base < len ? (len - 1 - base) / stride + 1 : int64_t(0));
                T wgt = wr[kk];
                T wacc = T(0);
                for (int64_t lo = lo0; lo < lo1; ++lo) {
                  T g_out = gyr[lo];
                  wacc += g_out * xr[lo * stride + base];
                  gxr[lo * stride + base] += wgt * g_out;
                }
                gwr[kk] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
struct BnStatsT {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;

  explicit BnStatsT(int64_t channels = 0)
      : running_mean(static_cast<size_t>(channels), T(0)),
        running_var(static_cast<size_t>(channels), T(1)) {}
};

/// Per-channel batch normalization over batch and time. Train mode normalizes
/// with batch moments (biased variance) and folds them into the running stats
/// with the given momentum (unbiased variance, matching the usual convention);
/// eval mode uses the running stats and requires at least one prior train step.
template <typename T>
TensorT<T> batch_norm1d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                        BnStatsT<T>& stats, Mode mode, T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("batch_norm1d: input must be [C,L] or [B,C,L], got " + shape_to_string(x.shape()));
  bool batched = x.rank() == 3;
  int64_t batch = batched ? x.dim(0) : 1;
  int64_t c = batched ? x.dim(1) : x.dim(0);
  int64_t len = batched ? x.dim(2) : x.dim(1);
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("batch_norm1d: gamma/beta must have C=" + std::to_string(c) + " elements, got " +
                         shape_to_string(gamma.shape()) + " / " + shape_to_string(beta.shape()));
  if (static_cast<int64_t>(stats.running_mean.size()) != c)
    throw DimensionError("batch_norm1d: running stats sized for " +
                         std::to_string(stats.running_mean.size()) + " channels, input has " +
                         std::to_string(c));
  int64_t n = batch * len;
  std::vector<T> mean(c), inv(c);
  if (mode == Mode::kTrain) {
    if (n < 2)
      throw DimensionError("batch_norm1d: train mode needs batch*time >= 2 samples per channel, got " +
                           std::to_string(n));
    for (int64_t ch = 0; ch < c; ++ch) {
      T m = T(0);
      for (int64_t b0 = 0; b0 < batch; ++b0) {
        const T* xr = x.values().data() + (b0 * c + ch) * len;
        for (int64_t l = 0; l < len; ++l) m += xr[l];
      }
      m /= static_cast<T>(n);
      T v = T(0);
      for (int64_t b0 = 0; b0 < batch; ++b0) {
        const T* xr = x.values().data() + (b0 * c + ch) * len;
        for (int64_t l = 0; l < len; ++l) {
          T d = xr[l] - m;
          v += d * d;
        }
      }
      v /= static_cast<T>(n);
      mean[ch] = m;
      inv[ch] = T(1) / std::sqrt(v + eps);
      stats.running_mean[ch] = (T(1) - momentum) * stats.running_mean[ch] + momentum * m;
      stats.running_var[ch] = (T(1) - momentum) * stats.running_var[ch] +
                              momentum * v * static_cast<T>(n) / static_cast<T>(n - 1);
    }
    stats.initialized = true;
  } else {
    if (!stats.initialized)
      throw StateError("batch_norm1d: eval mode before any train-mode step; running stats uninitialized");
    for (int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      inv[ch] = T(1) / std::sqrt(stats.running_var[ch] + eps);
    }
  }
  auto y = TensorT<T>::zeros(x.shape());
  {
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    auto& yv = y.mutable_values();
    for (int64_t b0 = 0; b0 < batch; ++b0) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* xr = xv.data() + (b0 * c + ch) * len;
        T* yr = yv.data() + (b0 * c + ch) * len;
        T m = mean[ch], iv = inv[ch], ga = gv[ch], be = bv[ch];
        for (int64_t l = 0; l < len; ++l) yr[l] = ga * (xr[l] - m) * iv + be;
      }
    }
  }
  if (detail::wants_grad(x) || detail::wants_grad(gamma) || detail::wants_grad(beta)) {
    bool train = mode == Mode::kTrain;
    detail::record_op(y, [x, gamma, beta, y, mean, inv, batch, c, len, n, train]() {
      const auto& gy = y.storage()->grad;
      const auto& xv = x.values();
      const auto& gv = gamma.values();
      auto& gx = detail::grad_acc(x.storage());
      auto& ggamma = detail::grad_acc(gamma.storage());
      auto& gbeta = detail::grad_acc(beta.storage());
      for (int64_t ch = 0; ch < c; ++ch) {
        T m = mean[ch], iv = inv[ch], ga = gv[ch];
        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (int64_t b0 = 0; b0 < batch; ++b0) {
          const T* xr = xv.data() + (b0 * c + ch) * len;
          const T* gyr = gy.data() + (b0 * c + ch) * len;
          for (int64_t l = 0; l < len; ++l) {
            sum_gy += gyr[l];
            sum_gy_xhat += gyr[l] * (xr[l] - m) * iv;
          }
        }
        ggamma[ch] += sum_gy_xhat;
        gbeta[ch] += sum_gy;
        if (train) {
          T mg = sum_gy / static_cast<T>(n);
          T mgx = sum_gy_xhat / static_cast<T>(n);
          for (int64_t b0 = 0; b0 < batch; ++b0) {
            const T* xr = xv.data() + (b0 * c + ch) * len;
            const T* gyr = gy.data() + (b0 * c + ch) * len;
            T* gxr = gx.data() + (b0 * c + ch) * len;
            for (int64_t l = 0; l < len; ++l) {
              T xhat = (xr[l] - m) * iv;
              gxr[l] += ga * iv * (gyr[l] - mg - xhat * mgx);
            }
          }
        } else {
          for (int64_t b0 = 0; b0 < batch; ++b0) {
            const T* gyr = gy.data() + (b0 * c + ch) * len;
            T* gxr = gx.data() + (b0 * c + ch) * len;
            for (int64_t l = 0; l < len; ++l) gxr[l] += ga * iv * gyr[l];
          }
        }
      }
    });
  }
  return y;
}

/// Per-row mean over the last axis, kept as a singleton axis:
/// [M,L] -> [M,1], [B,M,L] -> [B,M,1].
template <typename T>
TensorT<T> adaptive_avg_pool(const TensorT<T>& x) {
  if (x.rank() < 2)
    throw DimensionError("adaptive_avg_pool: input must have rank >= 2, got " + shape_to_string(x.shape()));
  int64_t len = x.shape().back();
  int64_t rows = x.numel() / len;
  Shape yshape = x.shape();
  yshape.back() = 1;
  auto y = TensorT<T>::zeros(yshape);
  const auto& xv = x.values();
  auto& yv = y.mutable_values();
  for (int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* xr = xv.data() + r * len;
    for (int64_t l = 0; l < len; ++l) acc += xr[l];
    yv[r] = acc / static_cast<T>(len);
  }
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y, rows, len]() {
      const auto& gy = y.storage()->grad;
      auto& gx = detail::grad_acc(x.storage());
      for (int64_t r = 0; r < rows; ++r) {
        T g = gy[r] / static_cast<T>(len);
        T* gxr = gx.data() + r * len;
        for (int64_t l = 0; l < len; ++l) gxr[l] += g;
      }
    });
  }
  return y;
}

inline constexpr double kStdPoolEps = 1e-5;

/// Per-row standard deviation over the last axis (population form), with the
/// variance epsilon-regularized as sqrt(var + 1e-5) so the gradient stays
/// finite at zero variance. [M,L] -> [M,1].
template <typename T>
TensorT<T> adaptive_std_pool(const TensorT<T>& x) {
  if (x.rank() < 2)
    throw DimensionError("adaptive_std_pool: input must have rank >= 2, got " + shape_to_string(x.shape()));
  int64_t len = x.shape().back();
  int64_t rows = x.numel() / len;
  Shape yshape = x.shape();
  yshape.back() = 1;
  auto y = TensorT<T>::zeros(yshape);
  std::vector<T> means(static_cast<size_t>(rows));
  const auto& xv = x.values();
  auto& yv = y.mutable_values();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * len;
    T m = T(0);
    for (int64_t l = 0; l < len; ++l) m += xr[l];
    m /= static_cast<T>(len);
    T v = T(0);
    for (int64_t l = 0; l < len; ++l) {
      T d = xr[l] - m;
      v += d * d;
    }
    v /= static_cast<T>(len);
    means[r] = m;
    yv[r] = std::sqrt(v + static_cast<T>(kStdPoolEps));
  }
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y, means, rows, len]() {
      const auto& gy = y.storage()->grad;
      const auto& xv = x.values();
      const auto& yv = y.values();
      auto& gx = detail::grad_acc(x.storage());
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * len;
        T* gxr = gx.data() + r * len;
        T coef = gy[r] / (static_cast<T>(len) * yv[r]);
        for (int64_t l = 0; l < len; ++l) gxr[l] += coef * (xr[l] - means[r]);
      }
    });
  }
  return y;
}

/// softmax scaled by a constant: y = s * exp(x - max) / sum(exp(x - max))
/// along `axis`. With equal logits the output is exactly s/n per entry.
template <typename T>
TensorT<T> scaled_softmax(const TensorT<T>& x, int axis, T s) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(x.shape()));
  int64_t n = x.dim(axis);
  int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  int64_t outer = x.numel() / (n * inner);
  auto y = TensorT<T>::zeros(x.shape());
  const auto& xv = x.values();
  auto& yv = y.mutable_values();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const T* xs = xv.data() + o * n * inner + in;
      T* ys = yv.data() + o * n * inner + in;
      T mx = xs[0];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
      T denom = T(0);
      for (int64_t i = 0; i < n; ++i) {
        T e = std::exp(xs[i * inner] - mx);
        ys[i * inner] = e;
        denom += e;
      }
      T factor = s / denom;
      for (int64_t i = 0; i < n; ++i) ys[i * inner] *= factor;
    }
  }
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y, outer, n, inner, s]() {
      const auto& gy = y.storage()->grad;
      const auto& yv = y.values();
      auto& gx = detail::grad_acc(x.storage());
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const T* ys = yv.data() + o * n * inner + in;
          const T* gs = gy.data() + o * n * inner + in;
          T* gxs = gx.data() + o * n * inner + in;
          T dot = T(0);
          for (int64_t i = 0; i < n; ++i) dot += gs[i * inner] * ys[i * inner];
          dot /= s;
          for (int64_t i = 0; i < n; ++i) gxs[i * inner] += ys[i * inner] * (gs[i * inner] - dot);
        }
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  return scaled_softmax(x, axis, T(1));
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  auto y = TensorT<T>::zeros(x.shape());
  const auto& xv = x.values();
  auto& yv = y.mutable_values();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = T(1) / (T(1) + std::exp(-xv[i]));
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y]() {
      const auto& gy = y.storage()->grad;
      const auto& yv = y.values();
      auto& gx = detail::grad_acc(x.storage());
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
    });
  }
  return y;
}

/// Swaps the last two axes: [M,L] -> [L,M], [B,M,L] -> [B,L,M].
template <typename T>
TensorT<T> transpose(const TensorT<T>& x) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("transpose: input must be rank 2 or 3, got " + shape_to_string(x.shape()));
  bool batched = x.rank() == 3;
  int64_t batch = batched ? x.dim(0) : 1;
  int64_t m = batched ? x.dim(1) : x.dim(0);
  int64_t l = batched ? x.dim(2) : x.dim(1);
  Shape yshape = batched ? Shape{batch, l, m} : Shape{l, m};
  auto y = TensorT<T>::zeros(yshape);
  const auto& xv = x.values();
  auto& yv = y.mutable_values();
  for (int64_t n = 0; n < batch; ++n) {
    const T* xb = xv.data() + n * m * l;
    T* yb = yv.data() + n * m * l;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < l; ++j) yb[j * m + i] = xb[i * l + j];
  }
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y, batch, m, l]() {
      const auto& gy = y.storage()->grad;
      auto& gx = detail::grad_acc(x.storage());
      for (int64_t n = 0; n < batch; ++n) {
        const T* gyb = gy.data() + n * m * l;
        T* gxb = gx.data() + n * m * l;
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < l; ++j) gxb[i * l + j] += gyb[j * m + i];
      }
    });
  }
  return y;
}

/// Mean over the time axis, dropping it: [C,L] -> [C], [B,C,L] -> [B,C].
template <typename T>
TensorT<T> global_avg_pool_time(const TensorT<T>& x) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("global_avg_pool_time: input must be rank 2 or 3, got " +
                         shape_to_string(x.shape()));
  int64_t len = x.shape().back();
  int64_t rows = x.numel() / len;
  Shape yshape(x.shape().begin(), x.shape().end() - 1);
  auto y = TensorT<T>::zeros(yshape);
  const auto& xv = x.values();
  auto& yv = y.mutable_values();
  for (int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* xr = xv.data() + r * len;
    for (int64_t l = 0; l < len; ++l) acc += xr[l];
    yv[r] = acc / static_cast<T>(len);
  }
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y, rows, len]() {
      const auto& gy = y.storage()->grad;
      auto& gx = detail::grad_acc(x.storage());
      for (int64_t r = 0; r < rows; ++r) {
        T g = gy[r] / static_cast<T>(len);
        T* gxr = gx.data() + r * len;
        for (int64_t l = 0; l < len; ++l) gxr[l] += g;
      }
    });
  }
  return y;
}

/// Copying reshape; element order is preserved.
template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(shape));
  auto y = TensorT<T>::from_values(std::move(shape), x.values());
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y]() {
      const auto& gy = y.storage()->grad;
      auto& gx = detail::grad_acc(x.storage());
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

/// Sum of all elements, as a scalar tensor. Reduction order is sequential
/// over the flat buffer to keep results deterministic.
template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  auto y = TensorT<T>::scalar(acc);
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y]() {
      T g = y.storage()->grad[0];
      auto& gx = detail::grad_acc(x.storage());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  int64_t n = x.numel();
  auto y = TensorT<T>::scalar(acc / static_cast<T>(n));
  if (detail::wants_grad(x)) {
    detail::record_op(y, [x, y, n]() {
      T g = y.storage()->grad[0] / static_cast<T>(n);
      auto& gx = detail::grad_acc(x.storage());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

}  // namespace dwstrack

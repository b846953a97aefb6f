#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "pcg/tensor.hpp"

namespace pcg::ad {

enum class ConvMode { causal, same };

namespace detail {

template <class T>
void require_same_shape(const TensorPtr<T>& a, const TensorPtr<T>& b, const char* op) {
  if (a->shape != b->shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                                " vs " + shape_str(b->shape));
}

template <class T>
void require_rank3(const TensorPtr<T>& x, const char* op) {
  if (x->shape.size() != 3)
    throw std::invalid_argument(std::string(op) + ": expected [batch, ch, time], got " +
                                shape_str(x->shape));
}

template <class T>
bool any_requires_grad(std::initializer_list<TensorPtr<T>> ins) {
  for (const auto& t : ins)
    if (t->requires_grad) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> add(TapeT<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_same_shape(a, b, "add");
  auto out = make_tensor<T>(a->shape);
  const std::size_t n = a->size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] + b->value[i];
  if (tape.grad_enabled() && detail::any_requires_grad<T>({a, b})) {
    out->requires_grad = true;
    tape.record({a, b, out}, [a, b, out, n] {
      const T* g = out->grad_data();
      if (a->requires_grad) {
        T* ga = a->grad_data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b->requires_grad) {
        T* gb = b->grad_data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
TensorPtr<T> mul(TapeT<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_same_shape(a, b, "mul");
  auto out = make_tensor<T>(a->shape);
  const std::size_t n = a->size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] * b->value[i];
  if (tape.grad_enabled() && detail::any_requires_grad<T>({a, b})) {
    out->requires_grad = true;
    tape.record({a, b, out}, [a, b, out, n] {
      const T* g = out->grad_data();
      if (a->requires_grad) {
        T* ga = a->grad_data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b->value[i];
      }
      if (b->requires_grad) {
        T* gb = b->grad_data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a->value[i];
      }
    });
  }
  return out;
}

template <class T>
TensorPtr<T> scale(TapeT<T>& tape, const TensorPtr<T>& a, double c) {
  auto out = make_tensor<T>(a->shape);
  const std::size_t n = a->size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = static_cast<T>(c) * a->value[i];
  if (tape.grad_enabled() && a->requires_grad) {
    out->requires_grad = true;
    tape.record({a, out}, [a, out, c, n] {
      const T* g = out->grad_data();
      T* ga = a->grad_data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += static_cast<T>(c) * g[i];
    });
  }
  return out;
}

// x: [batch, ch, time], bias: [ch]; the only broadcast in the core.
template <class T>
TensorPtr<T> add_channel_bias(TapeT<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& bias) {
  detail::require_rank3(x, "add_channel_bias");
  if (bias->shape != Shape{x->dim(1)})
    throw std::invalid_argument("add_channel_bias: bias shape " + shape_str(bias->shape) +
                                " does not match channels " + std::to_string(x->dim(1)));
  auto out = make_tensor<T>(x->shape);
  const int B = x->dim(0), C = x->dim(1), Tm = x->dim(2);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T bv = bias->value[static_cast<std::size_t>(c)];
      const std::size_t base = (static_cast<std::size_t>(b) * C + c) * Tm;
      for (int t = 0; t < Tm; ++t) out->value[base + t] = x->value[base + t] + bv;
    }
  if (tape.grad_enabled() && detail::any_requires_grad<T>({x, bias})) {
    out->requires_grad = true;
    tape.record({x, bias, out}, [x, bias, out, B, C, Tm] {
      const T* g = out->grad_data();
      if (x->requires_grad) {
        T* gx = x->grad_data();
        const std::size_t n = out->size();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
      }
      if (bias->requires_grad) {
        T* gb = bias->grad_data();
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int b = 0; b < B; ++b) {
            const std::size_t base = (static_cast<std::size_t>(b) * C + c) * Tm;
            for (int t = 0; t < Tm; ++t) acc += g[base + t];
          }
          gb[c] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Unary activations
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class Fwd, class Bwd>
TensorPtr<T> unary_op(TapeT<T>& tape, const TensorPtr<T>& a, Fwd fwd, Bwd dval, const char*) {
  auto out = make_tensor<T>(a->shape);
  const std::size_t n = a->size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = fwd(a->value[i]);
  if (tape.grad_enabled() && a->requires_grad) {
    out->requires_grad = true;
    tape.record({a, out}, [a, out, dval, n] {
      const T* g = out->grad_data();
      T* ga = a->grad_data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * dval(a->value[i], out->value[i]);
    });
  }
  return out;
}

template <class T>
T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
T softplus_scalar(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

template <class T>
TensorPtr<T> tanh_op(TapeT<T>& tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <class T>
TensorPtr<T> sigmoid_op(TapeT<T>& tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return detail::sigmoid_scalar(x); },
      [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <class T>
TensorPtr<T> relu_op(TapeT<T>& tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); }, "relu");
}

template <class T>
TensorPtr<T> softplus_op(TapeT<T>& tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return detail::softplus_scalar(x); },
      [](T x, T) { return detail::sigmoid_scalar(x); }, "softplus");
}

template <class T>
TensorPtr<T> exp_op(TapeT<T>& tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

// tanh(a) * sigmoid(b), the WaveNet gate, fused into one node.
template <class T>
TensorPtr<T> gated_unit(TapeT<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_same_shape(a, b, "gated_unit");
  auto out = make_tensor<T>(a->shape);
  const std::size_t n = a->size();
  auto saved = std::make_shared<std::vector<T>>(2 * n);  // [tanh(a) ; sigmoid(b)]
  T* ta = saved->data();
  T* sb = saved->data() + n;
  for (std::size_t i = 0; i < n; ++i) {
    ta[i] = std::tanh(a->value[i]);
    sb[i] = detail::sigmoid_scalar(b->value[i]);
    out->value[i] = ta[i] * sb[i];
  }
  if (tape.grad_enabled() && detail::any_requires_grad<T>({a, b})) {
    out->requires_grad = true;
    tape.record({a, b, out}, [a, b, out, saved, n] {
      const T* g = out->grad_data();
      const T* ta = saved->data();
      const T* sb = saved->data() + n;
      if (a->requires_grad) {
        T* ga = a->grad_data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (T(1) - ta[i] * ta[i]) * sb[i];
      }
      if (b->requires_grad) {
        T* gb = b->grad_data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ta[i] * sb[i] * (T(1) - sb[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// x: [batch, ch_in, time], w: [ch_out, ch_in, k] -> [batch, ch_out, time].
// causal: left pad by dilation*(k-1), so out[t] sees x[<= t].
// same:   symmetric pad by dilation*(k-1)/2 (k odd), centered window.
template <class T>
TensorPtr<T> conv1d(TapeT<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& w, int dilation,
                    ConvMode mode) {
  detail::require_rank3(x, "conv1d");
  if (w->shape.size() != 3)
    throw std::invalid_argument("conv1d: kernel must be [ch_out, ch_in, k], got " +
                                shape_str(w->shape));
  if (dilation < 1) throw std::invalid_argument("conv1d: dilation must be >= 1");
  const int B = x->dim(0), Ci = x->dim(1), Tm = x->dim(2);
  const int Co = w->dim(0), K = w->dim(2);
  if (w->dim(1) != Ci)
    throw std::invalid_argument("conv1d: kernel ch_in " + std::to_string(w->dim(1)) +
                                " does not match input channels " + std::to_string(Ci));
  if (K < 1 || Tm < 1) throw std::invalid_argument("conv1d: k and time must be >= 1");
  if (mode == ConvMode::same && K % 2 == 0)
    throw std::invalid_argument("conv1d: same mode requires odd kernel width");

  const int pad = mode == ConvMode::causal ? dilation * (K - 1) : dilation * (K - 1) / 2;
  auto out = make_tensor<T>({B, Co, Tm});

  const T* xv = x->value.data();
  const T* wv = w->value.data();
  T* ov = out->value.data();
  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < Co; ++o) {
      T* orow = ov + (static_cast<std::size_t>(b) * Co + o) * Tm;
      for (int i = 0; i < Ci; ++i) {
        const T* xrow = xv + (static_cast<std::size_t>(b) * Ci + i) * Tm;
        const T* wrow = wv + (static_cast<std::size_t>(o) * Ci + i) * K;
        for (int j = 0; j < K; ++j) {
          const T wj = wrow[j];
          if (wj == T(0)) continue;
          const int off = dilation * j - pad;
          const int t0 = std::max(0, -off);
          const int t1 = std::min(Tm, Tm - off);
          for (int t = t0; t < t1; ++t) orow[t] += wj * xrow[t + off];
        }
      }
    }
  }

  if (tape.grad_enabled() && detail::any_requires_grad<T>({x, w})) {
    out->requires_grad = true;
    tape.record({x, w, out}, [x, w, out, B, Ci, Co, Tm, K, dilation, pad] {
      const T* g = out->grad_data();
      const T* xv = x->value.data();
      const T* wv = w->value.data();
      T* gx = x->requires_grad ? x->grad_data() : nullptr;
      T* gw = w->requires_grad ? w->grad_data() : nullptr;
      for (int b = 0; b < B; ++b) {
        for (int o = 0; o < Co; ++o) {
          const T* grow = g + (static_cast<std::size_t>(b) * Co + o) * Tm;
          for (int i = 0; i < Ci; ++i) {
            const std::size_t xbase = (static_cast<std::size_t>(b) * Ci + i) * Tm;
            const T* xrow = xv + xbase;
            const T* wrow = wv + (static_cast<std::size_t>(o) * Ci + i) * K;
            for (int j = 0; j < K; ++j) {
              const int off = dilation * j - pad;
              const int t0 = std::max(0, -off);
              const int t1 = std::min(Tm, Tm - off);
              if (gx) {
                T* gxrow = gx + xbase;
                const T wj = wrow[j];
                for (int t = t0; t < t1; ++t) gxrow[t + off] += wj * grow[t];
              }
              if (gw) {
                double acc = 0.0;
                for (int t = t0; t < t1; ++t) acc += static_cast<double>(xrow[t + off]) * grow[t];
                gw[(static_cast<std::size_t>(o) * Ci + i) * K + j] += static_cast<T>(acc);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// 1x1 convolution plus channel bias; the dense channel-mixing layer.
template <class T>
TensorPtr<T> conv1x1(TapeT<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& w,
                     const TensorPtr<T>& bias) {
  auto y = conv1d(tape, x, w, 1, ConvMode::causal);
  return add_channel_bias(tape, y, bias);
}

// ---------------------------------------------------------------------------
// Pooling / resampling / reshaping
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> avg_pool1d(TapeT<T>& tape, const TensorPtr<T>& x, int window, int stride) {
  detail::require_rank3(x, "avg_pool1d");
  if (window != stride)
    throw std::invalid_argument("avg_pool1d: only non-overlapping pooling (window == stride)");
  const int B = x->dim(0), C = x->dim(1), Tm = x->dim(2);
  if (stride < 1 || Tm % stride != 0)
    throw std::invalid_argument("avg_pool1d: time " + std::to_string(Tm) +
                                " not divisible by stride " + std::to_string(stride));
  const int To = Tm / stride;
  auto out = make_tensor<T>({B, C, To});
  const double inv = 1.0 / window;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* xrow = x->value.data() + (static_cast<std::size_t>(b) * C + c) * Tm;
      T* orow = out->value.data() + (static_cast<std::size_t>(b) * C + c) * To;
      for (int u = 0; u < To; ++u) {
        double acc = 0.0;
        for (int j = 0; j < window; ++j) acc += xrow[u * stride + j];
        orow[u] = static_cast<T>(acc * inv);
      }
    }
  if (tape.grad_enabled() && x->requires_grad) {
    out->requires_grad = true;
    tape.record({x, out}, [x, out, B, C, Tm, To, stride, inv] {
      const T* g = out->grad_data();
      T* gx = x->grad_data();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T* grow = g + (static_cast<std::size_t>(b) * C + c) * To;
          T* gxrow = gx + (static_cast<std::size_t>(b) * C + c) * Tm;
          for (int u = 0; u < To; ++u) {
            const T share = static_cast<T>(grow[u] * inv);
            for (int j = 0; j < stride; ++j) gxrow[u * stride + j] += share;
          }
        }
    });
  }
  return out;
}

// Nearest-neighbor temporal upsample by an integer factor.
template <class T>
TensorPtr<T> upsample_nn(TapeT<T>& tape, const TensorPtr<T>& x, int factor) {
  detail::require_rank3(x, "upsample_nn");
  if (factor < 1) throw std::invalid_argument("upsample_nn: factor must be >= 1");
  const int B = x->dim(0), C = x->dim(1), Tm = x->dim(2);
  const int To = Tm * factor;
  auto out = make_tensor<T>({B, C, To});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* xrow = x->value.data() + (static_cast<std::size_t>(b) * C + c) * Tm;
      T* orow = out->value.data() + (static_cast<std::size_t>(b) * C + c) * To;
      for (int u = 0; u < Tm; ++u)
        for (int j = 0; j < factor; ++j) orow[u * factor + j] = xrow[u];
    }
  if (tape.grad_enabled() && x->requires_grad) {
    out->requires_grad = true;
    tape.record({x, out}, [x, out, B, C, Tm, To, factor] {
      const T* g = out->grad_data();
      T* gx = x->grad_data();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T* grow = g + (static_cast<std::size_t>(b) * C + c) * To;
          T* gxrow = gx + (static_cast<std::size_t>(b) * C + c) * Tm;
          for (int u = 0; u < Tm; ++u) {
            double acc = 0.0;
            for (int j = 0; j < factor; ++j) acc += grow[u * factor + j];
            gxrow[u] += static_cast<T>(acc);
          }
        }
    });
  }
  return out;
}

template <class T>
TensorPtr<T> concat_channels(TapeT<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_rank3(a, "concat_channels");
  detail::require_rank3(b, "concat_channels");
  if (a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2))
    throw std::invalid_argument("concat_channels: batch/time mismatch " + shape_str(a->shape) +
                                " vs " + shape_str(b->shape));
  const int B = a->dim(0), Ca = a->dim(1), Cb = b->dim(1), Tm = a->dim(2);
  auto out = make_tensor<T>({B, Ca + Cb, Tm});
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(a->value.data() + static_cast<std::size_t>(bi) * Ca * Tm,
                static_cast<std::size_t>(Ca) * Tm,
                out->value.data() + static_cast<std::size_t>(bi) * (Ca + Cb) * Tm);
    std::copy_n(b->value.data() + static_cast<std::size_t>(bi) * Cb * Tm,
                static_cast<std::size_t>(Cb) * Tm,
                out->value.data() + (static_cast<std::size_t>(bi) * (Ca + Cb) + Ca) * Tm);
  }
  if (tape.grad_enabled() && detail::any_requires_grad<T>({a, b})) {
    out->requires_grad = true;
    tape.record({a, b, out}, [a, b, out, B, Ca, Cb, Tm] {
      const T* g = out->grad_data();
      for (int bi = 0; bi < B; ++bi) {
        if (a->requires_grad) {
          T* ga = a->grad_data() + static_cast<std::size_t>(bi) * Ca * Tm;
          const T* gs = g + static_cast<std::size_t>(bi) * (Ca + Cb) * Tm;
          for (std::size_t i = 0; i < static_cast<std::size_t>(Ca) * Tm; ++i) ga[i] += gs[i];
        }
        if (b->requires_grad) {
          T* gb = b->grad_data() + static_cast<std::size_t>(bi) * Cb * Tm;
          const T* gs = g + (static_cast<std::size_t>(bi) * (Ca + Cb) + Ca) * Tm;
          for (std::size_t i = 0; i < static_cast<std::size_t>(Cb) * Tm; ++i) gb[i] += gs[i];
        }
      }
    });
  }
  return out;
}

// Keep time steps [t0, t1).
template <class T>
TensorPtr<T> slice_time(TapeT<T>& tape, const TensorPtr<T>& x, int t0, int t1) {
  detail::require_rank3(x, "slice_time");
  const int B = x->dim(0), C = x->dim(1), Tm = x->dim(2);
  if (t0 < 0 || t1 > Tm || t0 >= t1)
    throw std::invalid_argument("slice_time: bad range [" + std::to_string(t0) + "," +
                                std::to_string(t1) + ") for time " + std::to_string(Tm));
  const int To = t1 - t0;
  auto out = make_tensor<T>({B, C, To});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      std::copy_n(x->value.data() + (static_cast<std::size_t>(b) * C + c) * Tm + t0, To,
                  out->value.data() + (static_cast<std::size_t>(b) * C + c) * To);
  if (tape.grad_enabled() && x->requires_grad) {
    out->requires_grad = true;
    tape.record({x, out}, [x, out, B, C, Tm, To, t0] {
      const T* g = out->grad_data();
      T* gx = x->grad_data();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T* grow = g + (static_cast<std::size_t>(b) * C + c) * To;
          T* gxrow = gx + (static_cast<std::size_t>(b) * C + c) * Tm + t0;
          for (int t = 0; t < To; ++t) gxrow[t] += grow[t];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  std::int64_t batches_seen = 0;
  bool used_uninitialized = false;  // eval was called before any train step

  explicit BatchNormState(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}
};

// Per-channel normalization over (batch, time). Train mode uses batch
// statistics (biased variance) and updates running stats with momentum 0.9;
// eval mode uses the running stats. epsilon 1e-5.
template <class T>
TensorPtr<T> batch_norm1d(TapeT<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                          const TensorPtr<T>& beta, BatchNormState<T>& state, bool train,
                          double momentum = 0.9, double eps = 1e-5) {
  detail::require_rank3(x, "batch_norm1d");
  const int B = x->dim(0), C = x->dim(1), Tm = x->dim(2);
  if (gamma->shape != Shape{C} || beta->shape != Shape{C})
    throw std::invalid_argument("batch_norm1d: gamma/beta must have shape [channels]");
  if (static_cast<int>(state.running_mean.size()) != C)
    throw std::invalid_argument("batch_norm1d: state channel mismatch");

  auto out = make_tensor<T>(x->shape);
  auto mean = std::make_shared<std::vector<double>>(C);
  auto var = std::make_shared<std::vector<double>>(C);
  const double m = static_cast<double>(B) * Tm;

  if (train) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0, s2 = 0.0;
      for (int b = 0; b < B; ++b) {
        const T* xrow = x->value.data() + (static_cast<std::size_t>(b) * C + c) * Tm;
        for (int t = 0; t < Tm; ++t) {
          s += xrow[t];
          s2 += static_cast<double>(xrow[t]) * xrow[t];
        }
      }
      (*mean)[c] = s / m;
      (*var)[c] = std::max(0.0, s2 / m - (*mean)[c] * (*mean)[c]);
      state.running_mean[c] =
          static_cast<T>(momentum * state.running_mean[c] + (1.0 - momentum) * (*mean)[c]);
      state.running_var[c] =
          static_cast<T>(momentum * state.running_var[c] + (1.0 - momentum) * (*var)[c]);
    }
    ++state.batches_seen;
  } else {
    if (state.batches_seen == 0) state.used_uninitialized = true;
    for (int c = 0; c < C; ++c) {
      (*mean)[c] = state.running_mean[c];
      (*var)[c] = state.running_var[c];
    }
  }

  for (int c = 0; c < C; ++c) {
    const T inv_std = static_cast<T>(1.0 / std::sqrt((*var)[c] + eps));
    const T mu = static_cast<T>((*mean)[c]);
    const T ga = gamma->value[static_cast<std::size_t>(c)];
    const T be = beta->value[static_cast<std::size_t>(c)];
    for (int b = 0; b < B; ++b) {
      const T* xrow = x->value.data() + (static_cast<std::size_t>(b) * C + c) * Tm;
      T* orow = out->value.data() + (static_cast<std::size_t>(b) * C + c) * Tm;
      for (int t = 0; t < Tm; ++t) orow[t] = ga * (xrow[t] - mu) * inv_std + be;
    }
  }

  if (tape.grad_enabled() && detail::any_requires_grad<T>({x, gamma, beta})) {
    out->requires_grad = true;
    tape.record({x, gamma, beta, out}, [x, gamma, beta, out, mean, var, B, C, Tm, m, eps, train] {
      const T* g = out->grad_data();
      for (int c = 0; c < C; ++c) {
        const double inv_std = 1.0 / std::sqrt((*var)[c] + eps);
        const double mu = (*mean)[c];
        double sum_g = 0.0, sum_gxh = 0.0;
        for (int b = 0; b < B; ++b) {
          const std::size_t base = (static_cast<std::size_t>(b) * C + c) * Tm;
          for (int t = 0; t < Tm; ++t) {
            const double xh = (x->value[base + t] - mu) * inv_std;
            sum_g += g[base + t];
            sum_gxh += g[base + t] * xh;
          }
        }
        if (beta->requires_grad) beta->grad_data()[c] += static_cast<T>(sum_g);
        if (gamma->requires_grad) gamma->grad_data()[c] += static_cast<T>(sum_gxh);
        if (x->requires_grad) {
          T* gx = x->grad_data();
          const double ga = gamma->value[static_cast<std::size_t>(c)];
          for (int b = 0; b < B; ++b) {
            const std::size_t base = (static_cast<std::size_t>(b) * C + c) * Tm;
            for (int t = 0; t < Tm; ++t) {
              const double xh = (x->value[base + t] - mu) * inv_std;
              double d;
              if (train) {
                d = ga * inv_std * (g[base + t] - sum_g / m - xh * sum_gxh / m);
              } else {
                d = ga * inv_std * g[base + t];
              }
              gx[base + t] += static_cast<T>(d);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

// logits: [batch, classes, time], targets: row-major [batch][time] class ids.
// Returns the mean over (batch, time) of -log softmax(logits)[target].
template <class T>
TensorPtr<T> softmax_cross_entropy(TapeT<T>& tape, const TensorPtr<T>& logits,
                                   const std::vector<int>& targets) {
  detail::require_rank3(logits, "softmax_cross_entropy");
  const int B = logits->dim(0), C = logits->dim(1), Tm = logits->dim(2);
  if (targets.size() != static_cast<std::size_t>(B) * Tm)
    throw std::invalid_argument("softmax_cross_entropy: targets size " +
                                std::to_string(targets.size()) + " != batch*time");
  for (int v : targets)
    if (v < 0 || v >= C)
      throw std::out_of_range("softmax_cross_entropy: target class " + std::to_string(v) +
                              " outside [0," + std::to_string(C) + ")");

  auto out = make_tensor<T>(Shape{1});
  auto probs = std::make_shared<std::vector<T>>(logits->size());
  const double denom = static_cast<double>(B) * Tm;
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < Tm; ++t) {
      double mx = -1e300;
      for (int c = 0; c < C; ++c)
        mx = std::max(mx, static_cast<double>(
                              logits->value[(static_cast<std::size_t>(b) * C + c) * Tm + t]));
      double sumexp = 0.0;
      for (int c = 0; c < C; ++c)
        sumexp += std::exp(logits->value[(static_cast<std::size_t>(b) * C + c) * Tm + t] - mx);
      const double log_z = std::log(sumexp) + mx;
      const int tgt = targets[static_cast<std::size_t>(b) * Tm + t];
      total +=
          log_z - logits->value[(static_cast<std::size_t>(b) * C + tgt) * Tm + t];
      for (int c = 0; c < C; ++c) {
        const std::size_t idx = (static_cast<std::size_t>(b) * C + c) * Tm + t;
        (*probs)[idx] = static_cast<T>(std::exp(logits->value[idx] - log_z));
      }
    }
  }
  out->value[0] = static_cast<T>(total / denom);

  if (tape.grad_enabled() && logits->requires_grad) {
    out->requires_grad = true;
    tape.record({logits, out}, [logits, out, probs, targets, B, C, Tm, denom] {
      const T g = out->grad_data()[0];
      T* gl = logits->grad_data();
      const T scale = static_cast<T>(g / denom);
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < Tm; ++t) {
          const int tgt = targets[static_cast<std::size_t>(b) * Tm + t];
          for (int c = 0; c < C; ++c) {
            const std::size_t idx = (static_cast<std::size_t>(b) * C + c) * Tm + t;
            T p = (*probs)[idx];
            if (c == tgt) p -= T(1);
            gl[idx] += scale * p;
          }
        }
    });
  }
  return out;
}

}  // namespace pcg::ad

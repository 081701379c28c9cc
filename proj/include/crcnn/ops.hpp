#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crcnn/tensor.hpp"
#include "crcnn/threading.hpp"

namespace crcnn {

enum class Mode { train, infer };

// ---------------------------------------------------------------------------
// Convolution: 3x3 kernels only, stride 1, zero padding of 1 so spatial size
// is preserved (required for the pixelwise residual subtraction and per-pixel
// mask output).
// ---------------------------------------------------------------------------

inline constexpr int kKernelSize = 3;

template <class T>
struct ConvParamsT {
  TensorT<T> kernel;    // (out_ch, in_ch, 3, 3)
  std::vector<T> bias;  // out_ch

  ConvParamsT() = default;
  ConvParamsT(int out_ch, int in_ch)
      : kernel(out_ch, in_ch, kKernelSize, kKernelSize), bias(out_ch, T(0)) {}

  int out_ch() const { return kernel.n(); }
  int in_ch() const { return kernel.c(); }
  std::size_t trainable_count() const { return kernel.size() + bias.size(); }
};

using ConvParams = ConvParamsT<float>;

namespace detail {

/// Copies one sample's planes into zero-bordered (h+2, w+2) buffers.
template <class T>
void pad_sample(const TensorT<T>& in, int n, std::vector<T>& buf) {
  const int h = in.h(), w = in.w(), pw = w + 2;
  buf.assign(static_cast<std::size_t>(in.c()) * (h + 2) * pw, T(0));
  for (int c = 0; c < in.c(); ++c) {
    const T* src = in.plane(n, c);
    T* dst = buf.data() + static_cast<std::size_t>(c) * (h + 2) * pw;
    for (int y = 0; y < h; ++y)
      std::copy(src + static_cast<std::size_t>(y) * w,
                src + static_cast<std::size_t>(y + 1) * w,
                dst + static_cast<std::size_t>(y + 1) * pw + 1);
  }
}

/// out += 3x3 kernel applied to one padded plane; all nine taps in a single
/// pass so the inner loop has no loop-carried dependency and vectorizes.
template <class T>
void conv_plane_9tap(const T* xp, int pw, const T* k, T* out, int h, int w) {
  for (int y = 0; y < h; ++y) {
    const T* r0 = xp + static_cast<std::size_t>(y) * pw;
    const T* r1 = r0 + pw;
    const T* r2 = r1 + pw;
    T* dst = out + static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x)
      dst[x] += k[0] * r0[x] + k[1] * r0[x + 1] + k[2] * r0[x + 2] +
                k[3] * r1[x] + k[4] * r1[x + 1] + k[5] * r1[x + 2] +
                k[6] * r2[x] + k[7] * r2[x + 1] + k[8] * r2[x + 2];
  }
}

/// dk[0..8] += the nine shifted dot products of a grad row against the three
/// padded input rows it touches. Fixed-lane partial sums keep the reduction
/// vectorizable and the summation order independent of the thread count.
template <class T>
void dot9_rows(const T* g, const T* x0, const T* x1, const T* x2, int w, T* dk) {
  T lanes[9][8] = {};
  int x = 0;
  for (; x + 8 <= w; x += 8)
    for (int j = 0; j < 8; ++j) {
      const T gv = g[x + j];
      lanes[0][j] += gv * x0[x + j];
      lanes[1][j] += gv * x0[x + j + 1];
      lanes[2][j] += gv * x0[x + j + 2];
      lanes[3][j] += gv * x1[x + j];
      lanes[4][j] += gv * x1[x + j + 1];
      lanes[5][j] += gv * x1[x + j + 2];
      lanes[6][j] += gv * x2[x + j];
      lanes[7][j] += gv * x2[x + j + 1];
      lanes[8][j] += gv * x2[x + j + 2];
    }
  for (; x < w; ++x) {
    const T gv = g[x];
    lanes[0][0] += gv * x0[x];
    lanes[1][0] += gv * x0[x + 1];
    lanes[2][0] += gv * x0[x + 2];
    lanes[3][0] += gv * x1[x];
    lanes[4][0] += gv * x1[x + 1];
    lanes[5][0] += gv * x1[x + 2];
    lanes[6][0] += gv * x2[x];
    lanes[7][0] += gv * x2[x + 1];
    lanes[8][0] += gv * x2[x + 2];
  }
  for (int t = 0; t < 9; ++t) {
    T s = 0;
    for (int j = 0; j < 8; ++j) s += lanes[t][j];
    dk[t] += s;
  }
}

template <class T>
T lane_sum(const T* v, std::size_t count) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= count; i += 8)
    for (int j = 0; j < 8; ++j) lanes[j] += v[i + j];
  for (; i < count; ++i) lanes[0] += v[i];
  T s = 0;
  for (int j = 0; j < 8; ++j) s += lanes[j];
  return s;
}

}  // namespace detail

template <class T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const ConvParamsT<T>& params,
                          int threads = 1) {
  if (input.c() != params.in_ch())
    throw ShapeError("conv2d: input channels " + input.dims.str() + " vs kernel " +
                     params.kernel.dims.str());
  const int h = input.h(), w = input.w(), pw = w + 2;
  TensorT<T> out(input.n(), params.out_ch(), h, w);

  parallel_chunks(input.n(), threads, [&](int, int n0, int n1) {
    std::vector<T> padded;
    for (int n = n0; n < n1; ++n) {
      detail::pad_sample(input, n, padded);
      for (int oc = 0; oc < params.out_ch(); ++oc) {
        T* o = out.plane(n, oc);
        std::fill(o, o + static_cast<std::size_t>(h) * w, params.bias[oc]);
        for (int ic = 0; ic < params.in_ch(); ++ic)
          detail::conv_plane_9tap(
              padded.data() + static_cast<std::size_t>(ic) * (h + 2) * pw, pw,
              &params.kernel.at(oc, ic, 0, 0), o, h, w);
      }
    }
  });
  return out;
}

template <class T>
struct ConvGradsT {
  TensorT<T> input;
  TensorT<T> kernel;
  std::vector<T> bias;
};

template <class T>
ConvGradsT<T> conv2d_backward(const TensorT<T>& input, const ConvParamsT<T>& params,
                              const TensorT<T>& grad_out, int threads = 1) {
  if (input.c() != params.in_ch())
    throw ShapeError("conv2d backward: input channels " + input.dims.str() +
                     " vs kernel " + params.kernel.dims.str());
  const Dims4 want{input.n(), params.out_ch(), input.h(), input.w()};
  if (grad_out.dims != want)
    throw ShapeError("conv2d backward: grad_out dims " + grad_out.dims.str() +
                     " vs expected " + want.str());

  const int h = input.h(), w = input.w(), pw = w + 2;

  ConvGradsT<T> g;
  g.input = TensorT<T>(input.dims);
  g.kernel = TensorT<T>(params.kernel.dims);
  g.bias.assign(params.bias.size(), T(0));

  // Per-chunk weight/bias partials, reduced in chunk order afterwards so a
  // fixed thread count always yields the same float sums.
  const int chunks = chunk_count(input.n(), threads);
  std::vector<TensorT<T>> kernel_partial(chunks, TensorT<T>(params.kernel.dims));
  std::vector<std::vector<T>> bias_partial(chunks, std::vector<T>(params.bias.size(), T(0)));

  parallel_chunks(input.n(), threads, [&](int chunk, int n0, int n1) {
    TensorT<T>& kpart = kernel_partial[chunk];
    std::vector<T>& bpart = bias_partial[chunk];
    std::vector<T> padded, gpadded;
    for (int n = n0; n < n1; ++n) {
      detail::pad_sample(input, n, padded);
      detail::pad_sample(grad_out, n, gpadded);

      // input gradient: full correlation = the same 9-tap kernel over the
      // padded grad_out with the taps flipped and channel roles swapped
      for (int ic = 0; ic < params.in_ch(); ++ic) {
        T* di = g.input.plane(n, ic);
        for (int oc = 0; oc < params.out_ch(); ++oc) {
          const T* k = &params.kernel.at(oc, ic, 0, 0);
          T kf[9];
          for (int j = 0; j < 9; ++j) kf[j] = k[8 - j];
          detail::conv_plane_9tap(
              gpadded.data() + static_cast<std::size_t>(oc) * (h + 2) * pw, pw, kf, di, h,
              w);
        }
      }

      for (int oc = 0; oc < params.out_ch(); ++oc) {
        const T* go = grad_out.plane(n, oc);
        bpart[oc] += detail::lane_sum(go, static_cast<std::size_t>(h) * w);
        for (int ic = 0; ic < params.in_ch(); ++ic) {
          const T* xp = padded.data() + static_cast<std::size_t>(ic) * (h + 2) * pw;
          T* dk = &kpart.at(oc, ic, 0, 0);
          for (int y = 0; y < h; ++y)
            detail::dot9_rows(go + static_cast<std::size_t>(y) * w,
                              xp + static_cast<std::size_t>(y) * pw,
                              xp + static_cast<std::size_t>(y + 1) * pw,
                              xp + static_cast<std::size_t>(y + 2) * pw, w, dk);
        }
      }
    }
  });

  for (int chunk = 0; chunk < chunks; ++chunk) {
    for (std::size_t i = 0; i < g.kernel.size(); ++i)
      g.kernel.data[i] += kernel_partial[chunk].data[i];
    for (std::size_t i = 0; i < g.bias.size(); ++i) g.bias[i] += bias_partial[chunk][i];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over (n, h, w) per channel.
// ---------------------------------------------------------------------------

template <class T>
struct BatchNormParamsT {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);

  BatchNormParamsT() = default;
  explicit BatchNormParamsT(int channels)
      : gamma(channels, T(1)),
        beta(channels, T(0)),
        running_mean(channels, T(0)),
        running_var(channels, T(1)) {}

  int channels() const { return static_cast<int>(gamma.size()); }
  std::size_t trainable_count() const { return gamma.size() + beta.size(); }
};

using BatchNormParams = BatchNormParamsT<float>;

template <class T>
struct BatchNormCacheT {
  Mode mode = Mode::train;
  TensorT<T> xhat;
  std::vector<T> inv_std;  // per channel
};

/// Train mode normalizes by batch statistics and (optionally) folds them into
/// the running averages; infer mode uses the running statistics only.
template <class T>
TensorT<T> batchnorm_forward(const TensorT<T>& input, BatchNormParamsT<T>& params,
                             Mode mode, BatchNormCacheT<T>* cache = nullptr,
                             bool update_running = true) {
  if (input.c() != params.channels())
    throw ShapeError("batchnorm: input " + input.dims.str() + " vs " +
                     std::to_string(params.channels()) + " channels");
  const int C = input.c();
  const std::size_t N = static_cast<std::size_t>(input.n()) * input.h() * input.w();
  if (mode == Mode::train && N < 2)
    throw DataError("batchnorm: degenerate batch, need n*h*w >= 2, got " +
                    input.dims.str());

  TensorT<T> out(input.dims);
  std::vector<T> mean(C), inv_std(C);

  if (mode == Mode::train) {
    for (int c = 0; c < C; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < input.n(); ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < static_cast<std::size_t>(input.h()) * input.w(); ++i) {
          sum += p[i];
          sq += static_cast<double>(p[i]) * p[i];
        }
      }
      const double mu = sum / static_cast<double>(N);
      const double var = std::max(0.0, sq / static_cast<double>(N) - mu * mu);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(params.epsilon)));
      if (update_running) {
        const double unbiased = var * static_cast<double>(N) / static_cast<double>(N - 1);
        params.running_mean[c] = static_cast<T>(
            (1 - params.momentum) * params.running_mean[c] + params.momentum * mu);
        params.running_var[c] = static_cast<T>(
            (1 - params.momentum) * params.running_var[c] + params.momentum * unbiased);
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = params.running_mean[c];
      inv_std[c] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(params.running_var[c]) +
                          static_cast<double>(params.epsilon)));
    }
  }

  if (cache) {
    cache->mode = mode;
    cache->xhat = TensorT<T>(input.dims);
    cache->inv_std = inv_std;
  }
  for (int n = 0; n < input.n(); ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = input.plane(n, c);
      T* dst = out.plane(n, c);
      T* xh = cache ? cache->xhat.plane(n, c) : nullptr;
      const T mu = mean[c], is = inv_std[c], g = params.gamma[c], b = params.beta[c];
      for (std::size_t i = 0; i < static_cast<std::size_t>(input.h()) * input.w(); ++i) {
        const T xhat = (src[i] - mu) * is;
        if (xh) xh[i] = xhat;
        dst[i] = g * xhat + b;
      }
    }
  return out;
}

template <class T>
struct BatchNormGradsT {
  TensorT<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <class T>
BatchNormGradsT<T> batchnorm_backward(const BatchNormParamsT<T>& params,
                                      const BatchNormCacheT<T>& cache,
                                      const TensorT<T>& grad_out) {
  require_same_dims(cache.xhat, grad_out, "batchnorm backward");
  const int C = grad_out.c();
  const std::size_t N = static_cast<std::size_t>(grad_out.n()) * grad_out.h() * grad_out.w();

  BatchNormGradsT<T> g;
  g.input = TensorT<T>(grad_out.dims);
  g.gamma.assign(C, T(0));
  g.beta.assign(C, T(0));

  for (int c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < grad_out.n(); ++n) {
      const T* dy = grad_out.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      for (std::size_t i = 0; i < static_cast<std::size_t>(grad_out.h()) * grad_out.w(); ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
      }
    }
    g.beta[c] = static_cast<T>(sum_dy);
    g.gamma[c] = static_cast<T>(sum_dy_xhat);

    const T scale = params.gamma[c] * cache.inv_std[c];
    if (cache.mode == Mode::infer) {
      // Running statistics are constants, so only the affine scale remains.
      for (int n = 0; n < grad_out.n(); ++n) {
        const T* dy = grad_out.plane(n, c);
        T* dx = g.input.plane(n, c);
        for (std::size_t i = 0; i < static_cast<std::size_t>(grad_out.h()) * grad_out.w(); ++i)
          dx[i] = scale * dy[i];
      }
    } else {
      const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(N));
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(N));
      for (int n = 0; n < grad_out.n(); ++n) {
        const T* dy = grad_out.plane(n, c);
        const T* xh = cache.xhat.plane(n, c);
        T* dx = g.input.plane(n, c);
        for (std::size_t i = 0; i < static_cast<std::size_t>(grad_out.h()) * grad_out.w(); ++i)
          dx[i] = scale * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations. Backward rules take the forward *output*, which is enough for
// all three (sigmoid uses y*(1-y), relu the sign of y).
// ---------------------------------------------------------------------------

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
TensorT<T> relu(const TensorT<T>& in) {
  TensorT<T> out(in.dims);
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in.data[i] > T(0) ? in.data[i] : T(0);
  return out;
}

template <class T>
TensorT<T> relu_backward(const TensorT<T>& out, const TensorT<T>& grad_out) {
  require_same_dims(out, grad_out, "relu backward");
  TensorT<T> g(out.dims);
  for (std::size_t i = 0; i < out.size(); ++i)
    g.data[i] = out.data[i] > T(0) ? grad_out.data[i] : T(0);
  return g;
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& in) {
  TensorT<T> out(in.dims);
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = sigmoid_scalar(in.data[i]);
  return out;
}

template <class T>
TensorT<T> sigmoid_backward(const TensorT<T>& out, const TensorT<T>& grad_out) {
  require_same_dims(out, grad_out, "sigmoid backward");
  TensorT<T> g(out.dims);
  for (std::size_t i = 0; i < out.size(); ++i)
    g.data[i] = grad_out.data[i] * out.data[i] * (T(1) - out.data[i]);
  return g;
}

template <class T>
TensorT<T> identity(const TensorT<T>& in) {
  return in;
}

template <class T>
TensorT<T> identity_backward(const TensorT<T>&, const TensorT<T>& grad_out) {
  return grad_out;
}

// ---------------------------------------------------------------------------
// Losses. Both return (scalar, gradient w.r.t. pred).
// ---------------------------------------------------------------------------

/// Mean squared Frobenius distance over a batch of m patches, halved:
/// (1/2m) * sum((target - pred)^2) summed over every entry.
template <class T>
std::pair<double, TensorT<T>> frobenius_loss(const TensorT<T>& target,
                                             const TensorT<T>& pred) {
  require_same_dims(target, pred, "frobenius_loss");
  const double m = static_cast<double>(pred.n());
  TensorT<T> grad(pred.dims);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred.data[i]) - target.data[i];
    acc += d * d;
    grad.data[i] = static_cast<T>(d / m);
  }
  return {acc / (2.0 * m), std::move(grad)};
}

inline constexpr double kBceClamp = 1e-7;

/// Average binary cross-entropy over all pixels of all patches. Predictions
/// are clamped to [1e-7, 1-1e-7] before the logs.
template <class T>
std::pair<double, TensorT<T>> bce_loss(const TensorT<T>& target, const TensorT<T>& pred) {
  require_same_dims(target, pred, "bce_loss");
  const double total = static_cast<double>(pred.size());
  TensorT<T> grad(pred.dims);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double g = static_cast<double>(target.data[i]);
    if (g != 0.0 && g != 1.0)
      throw DataError("bce_loss: mask value " + std::to_string(g) + " not in {0,1}");
    const double p = std::clamp(static_cast<double>(pred.data[i]), kBceClamp, 1.0 - kBceClamp);
    acc -= g * std::log(p) + (1.0 - g) * std::log1p(-p);
    grad.data[i] = static_cast<T>((p - g) / (p * (1.0 - p)) / total);
  }
  return {acc / total, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Adam with bias correction. One state covers an ordered list of parameter
// tensors; moment shapes mirror the parameters exactly.
// ---------------------------------------------------------------------------

template <class T>
struct AdamStateT {
  std::int64_t step = 0;
  T learning_rate = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamStateT for_sizes(const std::vector<std::size_t>& sizes, T lr) {
    AdamStateT s;
    s.learning_rate = lr;
    s.m.reserve(sizes.size());
    s.v.reserve(sizes.size());
    for (std::size_t n : sizes) {
      s.m.emplace_back(n, T(0));
      s.v.emplace_back(n, T(0));
    }
    return s;
  }
};

using AdamState = AdamStateT<float>;

template <class T>
void adam_step(const std::vector<std::span<T>>& params,
               const std::vector<std::span<const T>>& grads, AdamStateT<T>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: parameter/gradient/state list sizes disagree");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto g = grads[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (p.size() != g.size() || p.size() != m.size())
      throw ShapeError("adam_step: parameter " + std::to_string(k) + " size " +
                       std::to_string(p.size()) + " vs gradient " + std::to_string(g.size()));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      p[i] -= static_cast<T>(static_cast<double>(state.learning_rate) * mhat /
                             (std::sqrt(vhat) + static_cast<double>(state.epsilon)));
    }
  }
}

}  // namespace crcnn

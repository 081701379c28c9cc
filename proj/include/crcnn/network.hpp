#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crcnn/ops.hpp"
#include "crcnn/rng.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

enum class Activation { relu, linear, sigmoid };

// Layer classes of the architecture table: orange = conv+ReLU, blue =
// conv+batchnorm+ReLU, green = conv(->1)+linear, yellow = conv(->1)+sigmoid.
enum class ColorTag { orange, blue, green, yellow };

const char* to_string(Activation a);
const char* to_string(ColorTag c);
Activation activation_from_string(const std::string& s);
ColorTag color_from_string(const std::string& s);

template <class T>
struct ConvBlockT {
  ConvParamsT<T> conv;
  std::optional<BatchNormParamsT<T>> bn;
  Activation act = Activation::relu;
  ColorTag color = ColorTag::orange;

  std::size_t trainable_count() const {
    return conv.trainable_count() + (bn ? bn->trainable_count() : 0);
  }
};

template <class T>
struct NetworkSpecT {
  std::string name;  // "bcnn" or "scnn"
  int input_channels = 1;
  std::vector<ConvBlockT<T>> blocks;
};

using ConvBlock = ConvBlockT<float>;
using NetworkSpec = NetworkSpecT<float>;

/// Canonical shape knobs. width/middle_layers overrides exist for desk-scale
/// experiments only and are non-canonical: the reference parameter count holds
/// for the defaults.
struct NetShape {
  int width = 64;
  int middle_layers = 15;
};

namespace detail {

template <class T>
ConvParamsT<T> he_init_conv(int out_ch, int in_ch, Rng& rng) {
  ConvParamsT<T> p(out_ch, in_ch);
  const double stddev = std::sqrt(2.0 / (in_ch * kKernelSize * kKernelSize));
  for (auto& v : p.kernel.data) v = static_cast<T>(rng.normal() * stddev);
  return p;  // biases stay zero
}

}  // namespace detail

/// Background network: 1 input channel; middle blocks carry the batch norms.
template <class T = float>
NetworkSpecT<T> build_bcnn(std::uint64_t seed, NetShape shape = {}) {
  Rng rng(derive_seed(seed, "bcnn.init"));
  NetworkSpecT<T> net;
  net.name = "bcnn";
  net.input_channels = 1;
  net.blocks.push_back({detail::he_init_conv<T>(shape.width, 1, rng), std::nullopt,
                        Activation::relu, ColorTag::orange});
  for (int i = 0; i < shape.middle_layers; ++i)
    net.blocks.push_back({detail::he_init_conv<T>(shape.width, shape.width, rng),
                          BatchNormParamsT<T>(shape.width), Activation::relu,
                          ColorTag::blue});
  net.blocks.push_back({detail::he_init_conv<T>(1, shape.width, rng), std::nullopt,
                        Activation::linear, ColorTag::green});
  return net;
}

/// Segmentation network: 2 input channels (frame + residual map); middle
/// blocks have no batch norm. middle_batchnorm=true is the off-architecture
/// symmetric variant and breaks the reference parameter count.
template <class T = float>
NetworkSpecT<T> build_scnn(std::uint64_t seed, NetShape shape = {},
                           bool middle_batchnorm = false) {
  Rng rng(derive_seed(seed, "scnn.init"));
  NetworkSpecT<T> net;
  net.name = "scnn";
  net.input_channels = 2;
  net.blocks.push_back({detail::he_init_conv<T>(shape.width, 2, rng), std::nullopt,
                        Activation::relu, ColorTag::orange});
  for (int i = 0; i < shape.middle_layers; ++i) {
    std::optional<BatchNormParamsT<T>> bn;
    if (middle_batchnorm) bn = BatchNormParamsT<T>(shape.width);
    net.blocks.push_back({detail::he_init_conv<T>(shape.width, shape.width, rng),
                          std::move(bn), Activation::relu,
                          middle_batchnorm ? ColorTag::blue : ColorTag::orange});
  }
  net.blocks.push_back({detail::he_init_conv<T>(1, shape.width, rng), std::nullopt,
                        Activation::sigmoid, ColorTag::yellow});
  return net;
}

template <class T>
std::size_t count_parameters(const NetworkSpecT<T>& net) {
  std::size_t total = 0;
  for (const auto& b : net.blocks) total += b.trainable_count();
  return total;
}

// Ordered view over every trainable array (kernel, bias, [gamma, beta] per
// block). The order is the contract for Adam state and checkpoint blobs.
template <class T>
struct ParamRefT {
  std::string name;
  std::span<T> values;
};

template <class T>
std::vector<ParamRefT<T>> trainable_params(NetworkSpecT<T>& net) {
  std::vector<ParamRefT<T>> refs;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    auto& b = net.blocks[i];
    const std::string prefix = "block" + std::to_string(i) + ".";
    refs.push_back({prefix + "kernel", std::span<T>(b.conv.kernel.data)});
    refs.push_back({prefix + "bias", std::span<T>(b.conv.bias)});
    if (b.bn) {
      refs.push_back({prefix + "gamma", std::span<T>(b.bn->gamma)});
      refs.push_back({prefix + "beta", std::span<T>(b.bn->beta)});
    }
  }
  return refs;
}

// ---------------------------------------------------------------------------
// Forward / backward over a whole block stack.
// ---------------------------------------------------------------------------

template <class T>
struct ForwardCacheT {
  // boundary[i] = input of block i; boundary.back() = network output.
  std::vector<TensorT<T>> boundary;
  std::vector<BatchNormCacheT<T>> bn;  // indexed per block, unused slots empty
};

template <class T>
TensorT<T> forward(NetworkSpecT<T>& net, const TensorT<T>& input, Mode mode,
                   ForwardCacheT<T>* cache = nullptr, int threads = 1,
                   bool update_running = true) {
  if (input.c() != net.input_channels)
    throw ShapeError(net.name + ": expected " + std::to_string(net.input_channels) +
                     " input channels, got " + input.dims.str());
  if (cache) {
    cache->boundary.clear();
    cache->bn.assign(net.blocks.size(), {});
  }
  TensorT<T> x = input;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    auto& b = net.blocks[i];
    if (cache) cache->boundary.push_back(x);
    TensorT<T> y = conv2d_forward(x, b.conv, threads);
    if (b.bn)
      y = batchnorm_forward(y, *b.bn, mode, cache ? &cache->bn[i] : nullptr,
                            mode == Mode::train && update_running);
    switch (b.act) {
      case Activation::relu: y = relu(y); break;
      case Activation::sigmoid: y = sigmoid(y); break;
      case Activation::linear: break;
    }
    x = std::move(y);
  }
  if (cache) cache->boundary.push_back(x);
  return x;
}

/// Inference-only forward that leaves parameters (including batch-norm running
/// statistics) untouched.
template <class T>
TensorT<T> forward_infer(const NetworkSpecT<T>& net, const TensorT<T>& input,
                         int threads = 1) {
  if (input.c() != net.input_channels)
    throw ShapeError(net.name + ": expected " + std::to_string(net.input_channels) +
                     " input channels, got " + input.dims.str());
  TensorT<T> x = input;
  for (const auto& b : net.blocks) {
    TensorT<T> y = conv2d_forward(x, b.conv, threads);
    if (b.bn) {
      auto bn = *b.bn;  // copy; infer mode never updates running stats anyway
      y = batchnorm_forward(y, bn, Mode::infer, static_cast<BatchNormCacheT<T>*>(nullptr), false);
    }
    switch (b.act) {
      case Activation::relu: y = relu(y); break;
      case Activation::sigmoid: y = sigmoid(y); break;
      case Activation::linear: break;
    }
    x = std::move(y);
  }
  return x;
}

template <class T>
struct BackwardResultT {
  // Gradients aligned with trainable_params() order.
  std::vector<std::vector<T>> param_grads;
  TensorT<T> input_grad;
};

/// grad_is_preactivation: grad_out is already d(loss)/d(last pre-activation),
/// so the final activation's backward step is skipped. This is how the
/// trainer feeds the fused cross-entropy-through-sigmoid gradient (pred -
/// target), whose two factors would underflow to zero if multiplied
/// separately once the output saturates.
template <class T>
BackwardResultT<T> backward(const NetworkSpecT<T>& net, ForwardCacheT<T>& cache,
                            const TensorT<T>& grad_out, int threads = 1,
                            bool grad_is_preactivation = false) {
  BackwardResultT<T> result;
  TensorT<T> g = grad_out;
  std::vector<std::vector<std::vector<T>>> per_block(net.blocks.size());
  for (std::size_t ri = net.blocks.size(); ri-- > 0;) {
    const auto& b = net.blocks[ri];
    const TensorT<T>& block_out = cache.boundary[ri + 1];
    if (grad_is_preactivation && ri + 1 == net.blocks.size()) {
      // caller already differentiated through the final activation
    } else {
      switch (b.act) {
        case Activation::relu: g = relu_backward(block_out, g); break;
        case Activation::sigmoid: g = sigmoid_backward(block_out, g); break;
        case Activation::linear: break;
      }
    }
    std::vector<std::vector<T>>& grads = per_block[ri];
    if (b.bn) {
      auto bg = batchnorm_backward(*b.bn, cache.bn[ri], g);
      g = std::move(bg.input);
      grads.resize(4);
      grads[2] = std::move(bg.gamma);
      grads[3] = std::move(bg.beta);
      cache.bn[ri] = {};  // release xhat as we go
    } else {
      grads.resize(2);
    }
    auto cg = conv2d_backward(cache.boundary[ri], b.conv, g, threads);
    g = std::move(cg.input);
    grads[0] = std::move(cg.kernel.data);
    grads[1] = std::move(cg.bias);
    cache.boundary[ri + 1] = TensorT<T>();
  }
  for (auto& grads : per_block)
    for (auto& v : grads) result.param_grads.push_back(std::move(v));
  result.input_grad = std::move(g);
  return result;
}

// ---------------------------------------------------------------------------
// Cascade composition.
// ---------------------------------------------------------------------------

/// Residual map BCNN(f): raw network output, unbounded, same spatial dims.
template <class T>
TensorT<T> bcnn_forward(const TensorT<T>& f, const NetworkSpecT<T>& bcnn,
                        int threads = 1) {
  if (f.c() != 1)
    throw ShapeError("bcnn_forward: expected single-channel input, got " + f.dims.str());
  return forward_infer(bcnn, f, threads);
}

/// a = sigmoid(f - BCNN(f)): the network's reconstruction of the background.
template <class T>
TensorT<T> approximated_background(const TensorT<T>& f, const NetworkSpecT<T>& bcnn,
                                   int threads = 1) {
  TensorT<T> r = bcnn_forward(f, bcnn, threads);
  TensorT<T> pre(f.dims);
  for (std::size_t i = 0; i < f.size(); ++i) pre.data[i] = f.data[i] - r.data[i];
  return sigmoid(pre);
}

/// Depth concatenation: channel 0 = frame, channel 1 = residual map.
template <class T>
TensorT<T> cascade_input(const TensorT<T>& f, const TensorT<T>& r) {
  if (f.c() != 1 || r.c() != 1 || f.n() != r.n() || f.h() != r.h() || f.w() != r.w())
    throw ShapeError("cascade_input: incompatible dims " + f.dims.str() + " vs " +
                     r.dims.str());
  TensorT<T> c(f.n(), 2, f.h(), f.w());
  const std::size_t plane = static_cast<std::size_t>(f.h()) * f.w();
  for (int n = 0; n < f.n(); ++n) {
    std::copy(f.plane(n, 0), f.plane(n, 0) + plane, c.plane(n, 0));
    std::copy(r.plane(n, 0), r.plane(n, 0) + plane, c.plane(n, 1));
  }
  return c;
}

/// Full cascade: probabilities in (0,1), one channel, input spatial dims.
template <class T>
TensorT<T> segment_probabilities(const TensorT<T>& f, const NetworkSpecT<T>& bcnn,
                                 const NetworkSpecT<T>& scnn, int threads = 1) {
  TensorT<T> r = bcnn_forward(f, bcnn, threads);
  return forward_infer(scnn, cascade_input(f, r), threads);
}

}  // namespace crcnn

#pragma once

#include <vector>

#include "smagnet/tensor.hpp"

// Differentiable operators over [B,C,H,W] activations. Every op records a
// backward rule when any input requires gradients.
namespace smagnet::ops {

enum class PoolKind { max, avg };
enum class Pointwise { relu, sigmoid };
enum class Binary { add, mul };
enum class NormMode { batch_stats, running_stats };

// x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] or undefined.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                      int stride = 1, int pad = 0);

// x [B,Cin,H,W], w [Cin,Cout,kh,kw] (the conv2d weight of the adjoint map), b [Cout].
// Output extents are (H-1)*stride + kh, (W-1)*stride + kw.
template <class T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const BasicTensor<T>& b, int stride = 2);

// Unpadded pooling. Max routes the gradient to the first maximum in scan order.
template <class T>
BasicTensor<T> pool2d(PoolKind kind, const BasicTensor<T>& x, int k, int stride);

template <class T>
BasicTensor<T> pointwise(Pointwise kind, const BasicTensor<T>& x);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return pointwise(Pointwise::relu, x);
}
template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return pointwise(Pointwise::sigmoid, x);
}

// scale * x + shift, elementwise.
template <class T>
BasicTensor<T> affine(const BasicTensor<T>& x, T scale, T shift);

// Equal shapes, or one 4-D operand with channel extent 1 broadcast across the
// other's channels.
template <class T>
BasicTensor<T> binary(Binary kind, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(Binary::add, a, b);
}
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(Binary::mul, a, b);
}

template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Channels [begin, end) of x.
template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t end);

// Running statistics of a normalization layer; updated in batch_stats mode
// while gradients are enabled.
template <class T>
struct NormStatsBuffer {
  std::vector<T> mean;
  std::vector<T> var;
};

inline constexpr double kNormEps = 1e-5;
inline constexpr double kNormMomentum = 0.1;

template <class T>
BasicTensor<T> norm_layer(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, NormStatsBuffer<T>* running, NormMode mode,
                          bool update_running = true);

// Mean negative log-likelihood of sigmoid(logits) against targets in [0,1].
template <class T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& target);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x);

}  // namespace smagnet::ops

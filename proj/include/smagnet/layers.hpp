#pragma once

#include <string>
#include <utility>
#include <vector>

#include "smagnet/ops.hpp"
#include "smagnet/rng.hpp"
#include "smagnet/tensor.hpp"

namespace smagnet::nn {

template <class T>
using ParamList = std::vector<std::pair<std::string, BasicTensor<T>>>;

// Non-trainable state (running statistics) exposed for checkpointing.
template <class T>
using BufferList = std::vector<std::pair<std::string, std::vector<T>*>>;

enum class Init {
  he,      // U(-sqrt(6/fan_in), sqrt(6/fan_in)), for layers feeding a ReLU
  fan_in,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
};

enum class NormKind { batch, none };

template <class T>
BasicTensor<T> uniform_init(Rng& rng, Shape shape, std::size_t fan_in, Init init);

// Fresh leaf with the same values; used to clone parameter sets.
template <class T>
BasicTensor<T> clone_param(const BasicTensor<T>& p);

template <class T>
struct Conv2d {
  BasicTensor<T> weight;  // [Cout, Cin, k, k]
  BasicTensor<T> bias;    // [Cout] or undefined
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t k, int stride, int pad, bool with_bias, Rng& rng,
         Init init = Init::he);

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
  Conv2d clone() const;
};

template <class T>
struct ConvTranspose2d {
  BasicTensor<T> weight;  // [Cin, Cout, k, k]
  BasicTensor<T> bias;
  int stride = 2;

  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t cin, std::size_t cout, std::size_t k, int stride, Rng& rng);

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return ops::conv_transpose2d(x, weight, bias, stride);
  }
  void collect(ParamList<T>& out, const std::string& prefix) const;
  ConvTranspose2d clone() const;
};

template <class T>
struct Norm2d {
  NormKind kind = NormKind::batch;
  BasicTensor<T> gamma, beta;
  ops::NormStatsBuffer<T> running;

  Norm2d() = default;
  Norm2d(std::size_t channels, NormKind kind);

  // Batch statistics while training, running statistics otherwise.
  BasicTensor<T> operator()(const BasicTensor<T>& x, bool training);
  void collect(ParamList<T>& out, const std::string& prefix) const;
  void collect_buffers(BufferList<T>& out, const std::string& prefix);
};

}  // namespace smagnet::nn

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "smagnet/rng.hpp"
#include "smagnet/tensor.hpp"

namespace testutil {

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - double(b[i])));
  return a.size() == b.size() ? m : INFINITY;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

template <class T>
smagnet::BasicTensor<T> rand_tensor(smagnet::Rng& rng, smagnet::Shape shape, double lo = -1, double hi = 1,
                                    bool grad = false) {
  std::vector<T> v(smagnet::numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return smagnet::BasicTensor<T>::from(std::move(shape), std::move(v), grad);
}

}  // namespace testutil

namespace testutil {

// Direct sliding-window convolution accumulated in double.
template <class T>
std::vector<double> conv_ref(const smagnet::BasicTensor<T>& x, const smagnet::BasicTensor<T>& w,
                             const smagnet::BasicTensor<T>& b, int stride, int pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(B * O * Ho * Wo);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = b.defined() ? double(b.data()[o]) : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = long(i * stride + u) - pad, q = long(j * stride + v) - pad;
                if (r < 0 || q < 0 || r >= long(H) || q >= long(W)) continue;
                s += double(x.at(n, c, r, q)) * double(w.at(o, c, u, v));
              }
          out[((n * O + o) * Ho + i) * Wo + j] = s;
        }
  return out;
}

}  // namespace testutil

#include "smagnet/layers.hpp"

#include <cmath>

namespace smagnet::nn {

template <class T>
BasicTensor<T> uniform_init(Rng& rng, Shape shape, std::size_t fan_in, Init init) {
  const double f = static_cast<double>(fan_in);
  const double bound = init == Init::he ? std::sqrt(6.0 / f) : 1.0 / std::sqrt(f);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>::from(std::move(shape), std::move(v), true);
}

template <class T>
BasicTensor<T> clone_param(const BasicTensor<T>& p) {
  if (!p.defined()) return p;
  auto c = p.detach();
  c.set_requires_grad(true);
  return c;
}

template <class T>
Conv2d<T>::Conv2d(std::size_t cin, std::size_t cout, std::size_t k, int stride_, int pad_, bool with_bias,
                  Rng& rng, Init init)
    : stride(stride_), pad(pad_) {
  weight = uniform_init<T>(rng, {cout, cin, k, k}, cin * k * k, init);
  if (with_bias) bias = BasicTensor<T>::zeros({cout}, true);
}

template <class T>
void Conv2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

template <class T>
Conv2d<T> Conv2d<T>::clone() const {
  Conv2d c = *this;
  c.weight = clone_param(weight);
  c.bias = clone_param(bias);
  return c;
}

template <class T>
ConvTranspose2d<T>::ConvTranspose2d(std::size_t cin, std::size_t cout, std::size_t k, int stride_, Rng& rng)
    : stride(stride_) {
  // Each output pixel of a stride-k, k x k up-conv receives exactly cin taps.
  weight = uniform_init<T>(rng, {cin, cout, k, k}, cin, Init::he);
  bias = BasicTensor<T>::zeros({cout}, true);
}

template <class T>
void ConvTranspose2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

template <class T>
ConvTranspose2d<T> ConvTranspose2d<T>::clone() const {
  ConvTranspose2d c = *this;
  c.weight = clone_param(weight);
  c.bias = clone_param(bias);
  return c;
}

template <class T>
Norm2d<T>::Norm2d(std::size_t channels, NormKind kind_) : kind(kind_) {
  if (kind == NormKind::none) return;
  gamma = BasicTensor<T>::full({channels}, T(1), true);
  beta = BasicTensor<T>::zeros({channels}, true);
  running.mean.assign(channels, T(0));
  running.var.assign(channels, T(1));
}

template <class T>
BasicTensor<T> Norm2d<T>::operator()(const BasicTensor<T>& x, bool training) {
  if (kind == NormKind::none) return x;
  return ops::norm_layer(x, gamma, beta, &running,
                         training ? ops::NormMode::batch_stats : ops::NormMode::running_stats);
}

template <class T>
void Norm2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  if (kind == NormKind::none) return;
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

template <class T>
void Norm2d<T>::collect_buffers(BufferList<T>& out, const std::string& prefix) {
  if (kind == NormKind::none) return;
  out.emplace_back(prefix + ".running_mean", &running.mean);
  out.emplace_back(prefix + ".running_var", &running.var);
}

template BasicTensor<float> uniform_init(Rng&, Shape, std::size_t, Init);
template BasicTensor<double> uniform_init(Rng&, Shape, std::size_t, Init);
template BasicTensor<float> clone_param(const BasicTensor<float>&);
template BasicTensor<double> clone_param(const BasicTensor<double>&);
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct ConvTranspose2d<float>;
template struct ConvTranspose2d<double>;
template struct Norm2d<float>;
template struct Norm2d<double>;

}  // namespace smagnet::nn

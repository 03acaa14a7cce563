#include "smagnet/decoder.hpp"

#include <stdexcept>

namespace smagnet::nn {

DecoderConfig DecoderConfig::make(Preset preset) {
  DecoderConfig c;
  if (preset == Preset::tiny) {
    c.widths = {64, 32, 16, 16, 8};
  } else {
    c.widths = {256, 128, 64, 32, 16};
  }
  c.skip_channels = EncoderConfig::make(preset, 1).channels;
  return c;
}

template <class T>
DecoderBlock<T>::DecoderBlock(std::size_t cin, std::size_t skip, std::size_t cout, Rng& rng)
    : up(cin, cout, 2, 2, rng),
      conv1(cout + skip, cout, 3, 1, 1, true, rng),
      conv2(cout, cout, 3, 1, 1, true, rng) {}

template <class T>
BasicTensor<T> DecoderBlock<T>::operator()(const BasicTensor<T>& prev, const BasicTensor<T>& skip) const {
  auto y = up(prev);
  if (skip.defined()) {
    if (skip.rank() != 4 || skip.dim(0) != y.dim(0) || skip.dim(2) != y.dim(2) || skip.dim(3) != y.dim(3))
      throw std::invalid_argument("decoder skip " + shape_str(skip.shape()) + " does not match up-conv output " +
                                  shape_str(y.shape()));
    y = ops::concat_channels(y, skip);
  }
  if (y.dim(1) != conv1.weight.dim(1))
    throw std::invalid_argument("decoder block expects " + std::to_string(conv1.weight.dim(1)) +
                                " channels after concat, got " + shape_str(y.shape()));
  y = ops::relu(conv1(y));
  return ops::relu(conv2(y));
}

template <class T>
void DecoderBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  conv1.collect(out, prefix + ".conv1");
  conv2.collect(out, prefix + ".conv2");
}

template <class T>
DecoderBlock<T> DecoderBlock<T>::clone() const {
  DecoderBlock c;
  c.up = up.clone();
  c.conv1 = conv1.clone();
  c.conv2 = conv2.clone();
  return c;
}

template <class T>
Decoder<T>::Decoder(const DecoderConfig& config, Rng& rng) : config_(config) {
  std::size_t cin = config.skip_channels[kLevels - 1];
  for (std::size_t k = 0; k < kLevels; ++k) {
    // Stage k+1 (1-based) reads pyramid level 5-(k+1); the last has no skip.
    const std::size_t skip = k + 1 < kLevels ? config.skip_channels[kLevels - 2 - k] : 0;
    stages_[k] = DecoderBlock<T>(cin, skip, config.widths[k], rng);
    cin = config.widths[k];
  }
  head_ = Conv2d<T>(cin, 1, 1, 1, 0, true, rng, Init::fan_in);
}

template <class T>
DecodeOutput<T> Decoder<T>::decode(const FeaturePyramid<T>& pyramid) const {
  for (std::size_t level = 0; level < kLevels; ++level)
    if (!pyramid[level].defined() || pyramid[level].rank() != 4 ||
        pyramid[level].dim(1) != config_.skip_channels[level])
      throw std::invalid_argument("pyramid level " + std::to_string(level + 1) + " does not match decoder config (" +
                                  std::to_string(config_.skip_channels[level]) + " channels expected)");
  auto y = pyramid[kLevels - 1];
  for (std::size_t k = 0; k < kLevels; ++k) {
    const BasicTensor<T> skip = k + 1 < kLevels ? pyramid[kLevels - 2 - k] : BasicTensor<T>{};
    y = stages_[k](y, skip);
  }
  return {y, head_(y)};
}

template <class T>
void Decoder<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < kLevels; ++k) stages_[k].collect(out, prefix + ".stage" + std::to_string(k + 1));
  head_.collect(out, prefix + ".head");
}

template <class T>
Decoder<T> Decoder<T>::clone() const {
  Decoder c;
  c.config_ = config_;
  for (std::size_t k = 0; k < kLevels; ++k) c.stages_[k] = stages_[k].clone();
  c.head_ = head_.clone();
  return c;
}

template <class T>
DualPrediction<T> decode_dual(const FeaturePyramid<T>& fused, const FeaturePyramid<T>& sar, const Decoder<T>& decoder,
                              const Decoder<T>* sar_decoder) {
  DualPrediction<T> out;
  out.fused = decoder.decode(fused);
  out.sar = (sar_decoder ? *sar_decoder : decoder).decode(sar);
  return out;
}

template struct DecoderBlock<float>;
template struct DecoderBlock<double>;
template class Decoder<float>;
template class Decoder<double>;
template DualPrediction<float> decode_dual(const FeaturePyramid<float>&, const FeaturePyramid<float>&,
                                           const Decoder<float>&, const Decoder<float>*);
template DualPrediction<double> decode_dual(const FeaturePyramid<double>&, const FeaturePyramid<double>&,
                                            const Decoder<double>&, const Decoder<double>*);

}  // namespace smagnet::nn

#pragma once

#include <array>
#include <optional>
#include <string>

#include "smagnet/encoder.hpp"
#include "smagnet/layers.hpp"

namespace smagnet::nn {

struct DecoderConfig {
  std::array<std::size_t, kLevels> widths{};
  // Encoder widths per pyramid level; stage k reads level 5-k as its skip.
  std::array<std::size_t, kLevels> skip_channels{};

  static DecoderConfig make(Preset preset);
};

// up-conv (2x2, stride 2) -> concat skip -> conv3x3+relu -> conv3x3+relu.
template <class T>
struct DecoderBlock {
  ConvTranspose2d<T> up;
  Conv2d<T> conv1, conv2;

  DecoderBlock() = default;
  DecoderBlock(std::size_t cin, std::size_t skip, std::size_t cout, Rng& rng);

  // `skip` may be undefined (final stage).
  BasicTensor<T> operator()(const BasicTensor<T>& prev, const BasicTensor<T>& skip) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  DecoderBlock clone() const;
};

template <class T>
struct DecodeOutput {
  BasicTensor<T> features;  // last stage output, before the head
  BasicTensor<T> logits;    // [B,1,H,W]
};

template <class T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& config, Rng& rng);

  // Level 5 is the input, levels 4..1 are skips; output at twice level-1 scale.
  DecodeOutput<T> decode(const FeaturePyramid<T>& pyramid) const;

  const DecoderConfig& config() const { return config_; }
  void collect(ParamList<T>& out, const std::string& prefix) const;
  // Same initial values in fresh, disjoint parameters.
  Decoder clone() const;

 private:
  DecoderConfig config_;
  std::array<DecoderBlock<T>, kLevels> stages_;
  Conv2d<T> head_;
};

template <class T>
struct DualPrediction {
  DecodeOutput<T> fused;
  DecodeOutput<T> sar;
};

// Both paths through the same decoder (weight shared), or through
// `sar_decoder` when given (independent-decoder ablation).
template <class T>
DualPrediction<T> decode_dual(const FeaturePyramid<T>& fused, const FeaturePyramid<T>& sar, const Decoder<T>& decoder,
                              const Decoder<T>* sar_decoder = nullptr);

}  // namespace smagnet::nn

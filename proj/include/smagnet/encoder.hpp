#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "smagnet/layers.hpp"

namespace smagnet::nn {

inline constexpr std::size_t kLevels = 5;

enum class Preset { tiny, paper };

Preset parse_preset(const std::string& name);
std::string preset_name(Preset p);

template <class T>
using FeaturePyramid = std::array<BasicTensor<T>, kLevels>;

struct EncoderConfig {
  std::size_t in_channels = 2;
  std::array<std::size_t, kLevels> channels{};
  std::array<std::size_t, kLevels> blocks{};
  std::size_t stem_kernel = 3;
  std::size_t stem_channels = 16;
  bool bottleneck = false;
  NormKind norm = NormKind::batch;

  static EncoderConfig make(Preset preset, std::size_t in_channels);
};

// Residual unit. Basic: two 3x3 convs. Bottleneck: 1x1 -> 3x3 -> 1x1 at a
// quarter of the output width. A 1x1 projection matches the shortcut when
// the stride or width changes.
template <class T>
struct ResidualBlock {
  bool bottleneck = false;
  int stride = 1;
  Conv2d<T> conv1, conv2, conv3;
  Norm2d<T> norm1, norm2, norm3;
  bool has_proj = false;
  Conv2d<T> proj;
  Norm2d<T> proj_norm;

  ResidualBlock() = default;
  ResidualBlock(std::size_t cin, std::size_t cout, int stride, bool bottleneck, NormKind norm, Rng& rng);

  BasicTensor<T> operator()(const BasicTensor<T>& x, bool training);
  void collect(ParamList<T>& out, const std::string& prefix) const;
  void collect_buffers(BufferList<T>& out, const std::string& prefix);
};

// Five-level residual encoder. Level k has stride 2^k relative to the input.
template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng);

  // x [B,Cin,H,W] with H and W divisible by 32.
  FeaturePyramid<T> encode(const BasicTensor<T>& x, bool training);

  const EncoderConfig& config() const { return config_; }
  void collect(ParamList<T>& out, const std::string& prefix) const;
  void collect_buffers(BufferList<T>& out, const std::string& prefix);

 private:
  EncoderConfig config_;
  Conv2d<T> stem_;
  Norm2d<T> stem_norm_;
  std::array<std::vector<ResidualBlock<T>>, kLevels> stages_;
};

}  // namespace smagnet::nn

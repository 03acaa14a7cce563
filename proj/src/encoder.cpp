#include "smagnet/encoder.hpp"

#include <stdexcept>

namespace smagnet::nn {

Preset parse_preset(const std::string& name) {
  if (name == "tiny") return Preset::tiny;
  if (name == "paper") return Preset::paper;
  throw std::invalid_argument("unknown preset '" + name + "'");
}

std::string preset_name(Preset p) { return p == Preset::tiny ? "tiny" : "paper"; }

EncoderConfig EncoderConfig::make(Preset preset, std::size_t in_channels) {
  EncoderConfig c;
  c.in_channels = in_channels;
  if (preset == Preset::tiny) {
    c.channels = {16, 32, 64, 128, 256};
    c.blocks = {1, 1, 1, 1, 1};
    c.stem_kernel = 3;
    c.stem_channels = 16;
    c.bottleneck = false;
  } else {
    // ResNet-50 layout: the stem alone forms level 1.
    c.channels = {64, 256, 512, 1024, 2048};
    c.blocks = {0, 3, 4, 6, 3};
    c.stem_kernel = 7;
    c.stem_channels = 64;
    c.bottleneck = true;
  }
  return c;
}

template <class T>
ResidualBlock<T>::ResidualBlock(std::size_t cin, std::size_t cout, int stride_, bool bottleneck_, NormKind norm,
                                Rng& rng)
    : bottleneck(bottleneck_), stride(stride_) {
  const bool bias = norm == NormKind::none;
  if (bottleneck) {
    const std::size_t mid = cout / 4;
    conv1 = Conv2d<T>(cin, mid, 1, 1, 0, bias, rng);
    conv2 = Conv2d<T>(mid, mid, 3, stride, 1, bias, rng);
    conv3 = Conv2d<T>(mid, cout, 1, 1, 0, bias, rng);
    norm1 = Norm2d<T>(mid, norm);
    norm2 = Norm2d<T>(mid, norm);
    norm3 = Norm2d<T>(cout, norm);
  } else {
    conv1 = Conv2d<T>(cin, cout, 3, stride, 1, bias, rng);
    conv2 = Conv2d<T>(cout, cout, 3, 1, 1, bias, rng);
    norm1 = Norm2d<T>(cout, norm);
    norm2 = Norm2d<T>(cout, norm);
  }
  has_proj = stride != 1 || cin != cout;
  if (has_proj) {
    proj = Conv2d<T>(cin, cout, 1, stride, 0, bias, rng);
    proj_norm = Norm2d<T>(cout, norm);
  }
}

template <class T>
BasicTensor<T> ResidualBlock<T>::operator()(const BasicTensor<T>& x, bool training) {
  auto y = ops::relu(norm1(conv1(x), training));
  if (bottleneck) {
    y = ops::relu(norm2(conv2(y), training));
    y = norm3(conv3(y), training);
  } else {
    y = norm2(conv2(y), training);
  }
  const auto shortcut = has_proj ? proj_norm(proj(x), training) : x;
  return ops::relu(ops::add(y, shortcut));
}

template <class T>
void ResidualBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".conv1");
  norm1.collect(out, prefix + ".bn1");
  conv2.collect(out, prefix + ".conv2");
  norm2.collect(out, prefix + ".bn2");
  if (bottleneck) {
    conv3.collect(out, prefix + ".conv3");
    norm3.collect(out, prefix + ".bn3");
  }
  if (has_proj) {
    proj.collect(out, prefix + ".proj");
    proj_norm.collect(out, prefix + ".proj_bn");
  }
}

template <class T>
void ResidualBlock<T>::collect_buffers(BufferList<T>& out, const std::string& prefix) {
  norm1.collect_buffers(out, prefix + ".bn1");
  norm2.collect_buffers(out, prefix + ".bn2");
  if (bottleneck) norm3.collect_buffers(out, prefix + ".bn3");
  if (has_proj) proj_norm.collect_buffers(out, prefix + ".proj_bn");
}

template <class T>
Encoder<T>::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
  const bool bias = config.norm == NormKind::none;
  const int k = static_cast<int>(config.stem_kernel);
  stem_ = Conv2d<T>(config.in_channels, config.stem_channels, config.stem_kernel, 2, k / 2, bias, rng);
  stem_norm_ = Norm2d<T>(config.stem_channels, config.norm);
  std::size_t width = config.stem_channels;
  for (std::size_t level = 0; level < kLevels; ++level) {
    for (std::size_t j = 0; j < config.blocks[level]; ++j) {
      // Levels 1 and 2 keep the resolution inside the blocks (the stem and
      // the max-pool downsample); deeper levels downsample in their first block.
      const int stride = (j == 0 && level >= 2) ? 2 : 1;
      stages_[level].emplace_back(width, config.channels[level], stride, config.bottleneck, config.norm, rng);
      width = config.channels[level];
    }
    if (width != config.channels[level])
      throw std::invalid_argument("encoder level " + std::to_string(level + 1) + " has no blocks to reach width " +
                                  std::to_string(config.channels[level]));
  }
}

template <class T>
FeaturePyramid<T> Encoder<T>::encode(const BasicTensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != config_.in_channels)
    throw std::invalid_argument("encoder expects [B," + std::to_string(config_.in_channels) + ",H,W], got " +
                                shape_str(x.shape()));
  if (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0)
    throw std::invalid_argument("encoder input extents must be divisible by 32, got " + shape_str(x.shape()));
  FeaturePyramid<T> out;
  auto y = ops::relu(stem_norm_(stem_(x), training));
  for (std::size_t level = 0; level < kLevels; ++level) {
    if (level == 1) y = ops::pool2d(ops::PoolKind::max, y, 2, 2);
    for (auto& block : stages_[level]) y = block(y, training);
    out[level] = y;
  }
  return out;
}

template <class T>
void Encoder<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  stem_.collect(out, prefix + ".stem.conv");
  stem_norm_.collect(out, prefix + ".stem.bn");
  for (std::size_t level = 0; level < kLevels; ++level)
    for (std::size_t j = 0; j < stages_[level].size(); ++j)
      stages_[level][j].collect(out, prefix + ".stage" + std::to_string(level + 1) + ".block" + std::to_string(j + 1));
}

template <class T>
void Encoder<T>::collect_buffers(BufferList<T>& out, const std::string& prefix) {
  stem_norm_.collect_buffers(out, prefix + ".stem.bn");
  for (std::size_t level = 0; level < kLevels; ++level)
    for (std::size_t j = 0; j < stages_[level].size(); ++j)
      stages_[level][j].collect_buffers(out,
                                        prefix + ".stage" + std::to_string(level + 1) + ".block" + std::to_string(j + 1));
}

template struct ResidualBlock<float>;
template struct ResidualBlock<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace smagnet::nn

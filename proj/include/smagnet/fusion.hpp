#pragma once

#include <string>
#include <utility>
#include <vector>

#include "smagnet/encoder.hpp"
#include "smagnet/layers.hpp"

namespace smagnet::nn {

enum class FusionMode { complementary, independent, cross };
enum class MaskDownsample { average, nearest };

FusionMode parse_fusion_mode(const std::string& name);
std::string fusion_mode_name(FusionMode m);
MaskDownsample parse_mask_downsample(const std::string& name);
std::string mask_downsample_name(MaskDownsample m);

// validity [B,1,H,W] in {0,1}; one [B,1,h,w] map per requested (h, w). Each
// level shape must divide the input shape evenly. Average mode yields the
// valid fraction of each input block; nearest samples the block's top-left pixel.
template <class T>
std::vector<BasicTensor<T>> build_mask_pyramid(const BasicTensor<T>& validity,
                                               const std::vector<std::pair<std::size_t, std::size_t>>& level_shapes,
                                               MaskDownsample mode = MaskDownsample::average);

// Per-level gate state; values are [B,1,h,w]. In independent and cross modes
// `gate` is the MSI-side gate and `sar_gate` the SAR-side one.
template <class T>
struct SmgLevel {
  BasicTensor<T> gate, mask, smg, sar_gate;
};

// sigmoid(conv1x1(concat(a, b))) -> [B,1,h,w]. `b` may be undefined for the
// single-input gates of cross mode.
template <class T>
BasicTensor<T> gate_map(const BasicTensor<T>& a, const BasicTensor<T>& b, const Conv2d<T>& gate_conv);

template <class T>
struct FuseResult {
  BasicTensor<T> fused;
  SmgLevel<T> state;
};

// complementary: fused = fs*(1 - SM*G) + fm*(SM*G)
// independent / cross: fused = fs*G1 + fm*(SM*G2); `gate` is G2, `sar_gate` G1.
template <class T>
FuseResult<T> smag_fuse(const BasicTensor<T>& f_sar, const BasicTensor<T>& f_msi, const BasicTensor<T>& gate,
                        const BasicTensor<T>& mask, FusionMode mode, const BasicTensor<T>& sar_gate = {});

// Gate parameters for one pyramid level.
template <class T>
struct GateParams {
  Conv2d<T> msi_gate;  // G (complementary) or G2
  Conv2d<T> sar_gate;  // G1; unused in complementary mode
};

template <class T>
class FusionModule {
 public:
  FusionModule() = default;
  FusionModule(FusionMode mode, const std::array<std::size_t, kLevels>& channels, Rng& rng);

  // Fuses one level (0-based index).
  FuseResult<T> fuse(std::size_t level, const BasicTensor<T>& f_sar, const BasicTensor<T>& f_msi,
                     const BasicTensor<T>& mask) const;

  FusionMode mode() const { return mode_; }
  const GateParams<T>& gate(std::size_t level) const { return gates_.at(level); }
  GateParams<T>& gate(std::size_t level) { return gates_.at(level); }
  void collect(ParamList<T>& out, const std::string& prefix) const;

 private:
  FusionMode mode_ = FusionMode::complementary;
  std::array<GateParams<T>, kLevels> gates_;
};

}  // namespace smagnet::nn

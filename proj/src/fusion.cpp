#include "smagnet/fusion.hpp"

#include <stdexcept>

namespace smagnet::nn {

FusionMode parse_fusion_mode(const std::string& name) {
  if (name == "complementary") return FusionMode::complementary;
  if (name == "independent") return FusionMode::independent;
  if (name == "cross") return FusionMode::cross;
  throw std::invalid_argument("unknown fusion mode '" + name + "'");
}

std::string fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::complementary: return "complementary";
    case FusionMode::independent: return "independent";
    case FusionMode::cross: return "cross";
  }
  return "?";
}

MaskDownsample parse_mask_downsample(const std::string& name) {
  if (name == "average") return MaskDownsample::average;
  if (name == "nearest") return MaskDownsample::nearest;
  throw std::invalid_argument("unknown mask downsampling '" + name + "'");
}

std::string mask_downsample_name(MaskDownsample m) { return m == MaskDownsample::average ? "average" : "nearest"; }

template <class T>
std::vector<BasicTensor<T>> build_mask_pyramid(const BasicTensor<T>& validity,
                                               const std::vector<std::pair<std::size_t, std::size_t>>& level_shapes,
                                               MaskDownsample mode) {
  if (validity.rank() != 4 || validity.dim(1) != 1)
    throw std::invalid_argument("validity must be [B,1,H,W], got " + shape_str(validity.shape()));
  const std::size_t B = validity.dim(0), H = validity.dim(2), W = validity.dim(3);
  const auto v = validity.data();
  std::vector<BasicTensor<T>> out;
  out.reserve(level_shapes.size());
  for (const auto& [h, w] : level_shapes) {
    if (h == 0 || w == 0 || H % h != 0 || W % w != 0 || H / h != W / w)
      throw std::invalid_argument("mask level " + std::to_string(h) + "x" + std::to_string(w) +
                                  " does not evenly divide validity " + std::to_string(H) + "x" + std::to_string(W));
    const std::size_t f = H / h;
    std::vector<T> m(B * h * w);
    for (std::size_t b = 0; b < B; ++b) {
      const T* src = v.data() + b * H * W;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          T value;
          if (mode == MaskDownsample::nearest) {
            value = src[(i * f) * W + j * f];
          } else {
            // Integer count keeps the block mean exact for 0/1 masks.
            double acc = 0;
            for (std::size_t di = 0; di < f; ++di)
              for (std::size_t dj = 0; dj < f; ++dj) acc += src[(i * f + di) * W + j * f + dj];
            value = static_cast<T>(acc / static_cast<double>(f * f));
          }
          m[(b * h + i) * w + j] = value;
        }
    }
    out.push_back(BasicTensor<T>::from({B, 1, h, w}, std::move(m)));
  }
  return out;
}

template <class T>
BasicTensor<T> gate_map(const BasicTensor<T>& a, const BasicTensor<T>& b, const Conv2d<T>& gate_conv) {
  if (b.defined() && a.shape() != b.shape())
    throw std::invalid_argument("gate inputs differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto x = b.defined() ? ops::concat_channels(a, b) : a;
  if (gate_conv.weight.dim(1) != x.dim(1) || gate_conv.weight.dim(0) != 1)
    throw std::invalid_argument("gate conv " + shape_str(gate_conv.weight.shape()) + " does not match input " +
                                shape_str(x.shape()));
  return ops::sigmoid(gate_conv(x));
}

template <class T>
FuseResult<T> smag_fuse(const BasicTensor<T>& f_sar, const BasicTensor<T>& f_msi, const BasicTensor<T>& gate,
                        const BasicTensor<T>& mask, FusionMode mode, const BasicTensor<T>& sar_gate) {
  if (f_sar.shape() != f_msi.shape())
    throw std::invalid_argument("fusion features differ: " + shape_str(f_sar.shape()) + " vs " +
                                shape_str(f_msi.shape()));
  const Shape map{f_sar.dim(0), 1, f_sar.dim(2), f_sar.dim(3)};
  if (gate.shape() != map || mask.shape() != map)
    throw std::invalid_argument("gate " + shape_str(gate.shape()) + " / mask " + shape_str(mask.shape()) +
                                " do not match " + shape_str(map));
  const bool two_gates = mode != FusionMode::complementary;
  if (two_gates != sar_gate.defined())
    throw std::invalid_argument("fusion mode '" + fusion_mode_name(mode) + "' expects " +
                                (two_gates ? "two gates" : "one gate"));
  if (two_gates && sar_gate.shape() != map)
    throw std::invalid_argument("sar gate " + shape_str(sar_gate.shape()) + " does not match " + shape_str(map));

  FuseResult<T> r;
  r.state.gate = gate;
  r.state.mask = mask;
  r.state.smg = ops::mul(mask, gate);
  r.state.sar_gate = sar_gate;
  const auto msi_term = ops::mul(f_msi, r.state.smg);
  if (mode == FusionMode::complementary) {
    r.fused = ops::add(ops::mul(f_sar, ops::affine(r.state.smg, T(-1), T(1))), msi_term);
  } else {
    r.fused = ops::add(ops::mul(f_sar, sar_gate), msi_term);
  }
  return r;
}

template <class T>
FusionModule<T>::FusionModule(FusionMode mode, const std::array<std::size_t, kLevels>& channels, Rng& rng)
    : mode_(mode) {
  for (std::size_t k = 0; k < kLevels; ++k) {
    const std::size_t c = channels[k];
    // Cross-mode gates each read a single stream.
    const std::size_t in = mode == FusionMode::cross ? c : 2 * c;
    gates_[k].msi_gate = Conv2d<T>(in, 1, 1, 1, 0, true, rng, Init::fan_in);
    if (mode != FusionMode::complementary) gates_[k].sar_gate = Conv2d<T>(in, 1, 1, 1, 0, true, rng, Init::fan_in);
  }
}

template <class T>
FuseResult<T> FusionModule<T>::fuse(std::size_t level, const BasicTensor<T>& f_sar, const BasicTensor<T>& f_msi,
                                    const BasicTensor<T>& mask) const {
  const auto& g = gates_.at(level);
  switch (mode_) {
    case FusionMode::complementary:
      return smag_fuse(f_sar, f_msi, gate_map(f_sar, f_msi, g.msi_gate), mask, mode_);
    case FusionMode::independent:
      return smag_fuse(f_sar, f_msi, gate_map(f_sar, f_msi, g.msi_gate), mask, mode_,
                       gate_map(f_sar, f_msi, g.sar_gate));
    case FusionMode::cross:
      return smag_fuse(f_sar, f_msi, gate_map(f_sar, BasicTensor<T>{}, g.msi_gate), mask, mode_,
                       gate_map(f_msi, BasicTensor<T>{}, g.sar_gate));
  }
  throw std::logic_error("unreachable fusion mode");
}

template <class T>
void FusionModule<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < kLevels; ++k) {
    const std::string p = prefix + ".level" + std::to_string(k + 1);
    gates_[k].msi_gate.collect(out, p + ".gate");
    if (mode_ != FusionMode::complementary) gates_[k].sar_gate.collect(out, p + ".sar_gate");
  }
}

#define SMAGNET_INSTANTIATE(T)                                                                                  \
  template std::vector<BasicTensor<T>> build_mask_pyramid(                                                     \
      const BasicTensor<T>&, const std::vector<std::pair<std::size_t, std::size_t>>&, MaskDownsample);         \
  template BasicTensor<T> gate_map(const BasicTensor<T>&, const BasicTensor<T>&, const Conv2d<T>&);            \
  template FuseResult<T> smag_fuse(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,        \
                                   const BasicTensor<T>&, FusionMode, const BasicTensor<T>&);                  \
  template class FusionModule<T>;

SMAGNET_INSTANTIATE(float)
SMAGNET_INSTANTIATE(double)
#undef SMAGNET_INSTANTIATE

}  // namespace smagnet::nn

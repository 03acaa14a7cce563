#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smagnet/decoder.hpp"
#include "smagnet/encoder.hpp"
#include "smagnet/fusion.hpp"

namespace smagnet::nn {

enum class ModelKind {
  smagnet,      // dual encoder, gated fusion, two heads
  unet_sar,     // SAR-only encoder-decoder
  unet_concat,  // SAR and MSI stacked as one 6-channel input
};

ModelKind parse_model_kind(const std::string& name);
std::string model_kind_name(ModelKind k);

struct ModelConfig {
  ModelKind kind = ModelKind::smagnet;
  Preset preset = Preset::tiny;
  FusionMode fusion = FusionMode::complementary;
  bool spatial_mask = true;     // false: SM = 1 everywhere
  bool shared_decoder = true;   // false: independent-decoder ablation
  MaskDownsample mask_downsample = MaskDownsample::average;
  NormKind norm = NormKind::batch;
  std::uint64_t seed = 1;

  bool dual() const { return kind == ModelKind::smagnet; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Normalized network inputs, all [B,C,H,W].
template <class T>
struct Batch {
  BasicTensor<T> sar;       // C = 2
  BasicTensor<T> msi;       // C = 4, fill at invalid pixels
  BasicTensor<T> validity;  // C = 1, {0,1}
  BasicTensor<T> label;     // C = 1, {0,1}; may be undefined at inference
};

template <class T>
struct ModelOutput {
  BasicTensor<T> logits_fused;    // primary prediction; the only one for baselines
  BasicTensor<T> logits_sar;      // undefined for baselines
  BasicTensor<T> features_fused;  // decoder output before the head
  BasicTensor<T> features_sar;
  std::vector<SmgLevel<T>> smg;   // one per level (SMAGNet only)
};

template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& config);
  // Copies would alias parameter storage.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  ModelOutput<T> forward(const Batch<T>& batch, bool training);

  const ModelConfig& config() const { return config_; }
  // Trainable tensors in a fixed order with checkpoint keys.
  ParamList<T> parameters() const;
  // Normalization running statistics with checkpoint keys.
  BufferList<T> buffers();
  std::size_t parameter_count() const;

  Encoder<T>& sar_encoder() { return enc_sar_; }
  Encoder<T>& msi_encoder() { return enc_msi_; }
  FusionModule<T>& fusion() { return fusion_; }
  Decoder<T>& decoder() { return dec_; }
  const Decoder<T>* sar_decoder() const { return dec_sar_ ? &*dec_sar_ : nullptr; }

 private:
  ModelConfig config_;
  Encoder<T> enc_sar_;  // the only encoder for baselines
  Encoder<T> enc_msi_;
  FusionModule<T> fusion_;
  Decoder<T> dec_;
  std::optional<Decoder<T>> dec_sar_;
};

}  // namespace smagnet::nn

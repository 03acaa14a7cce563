#include "smagnet/model.hpp"

#include <stdexcept>

#include "smagnet/dataset.hpp"
#include "smagnet/rng.hpp"

namespace smagnet::nn {

ModelKind parse_model_kind(const std::string& name) {
  if (name == "smagnet") return ModelKind::smagnet;
  if (name == "unet-sar") return ModelKind::unet_sar;
  if (name == "unet-concat") return ModelKind::unet_concat;
  throw std::invalid_argument("unknown model '" + name + "'");
}

std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::smagnet: return "smagnet";
    case ModelKind::unet_sar: return "unet-sar";
    case ModelKind::unet_concat: return "unet-concat";
  }
  return "?";
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"kind", model_kind_name(c.kind)},
                     {"preset", preset_name(c.preset)},
                     {"fusion_mode", fusion_mode_name(c.fusion)},
                     {"spatial_mask", c.spatial_mask},
                     {"shared_decoder", c.shared_decoder},
                     {"mask_downsample", mask_downsample_name(c.mask_downsample)},
                     {"norm", c.norm == NormKind::batch ? "batch" : "none"},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.kind = parse_model_kind(j.at("kind").get<std::string>());
  c.preset = parse_preset(j.at("preset").get<std::string>());
  c.fusion = parse_fusion_mode(j.at("fusion_mode").get<std::string>());
  c.spatial_mask = j.at("spatial_mask").get<bool>();
  c.shared_decoder = j.at("shared_decoder").get<bool>();
  c.mask_downsample = parse_mask_downsample(j.at("mask_downsample").get<std::string>());
  const auto norm = j.at("norm").get<std::string>();
  if (norm != "batch" && norm != "none") throw std::invalid_argument("unknown norm '" + norm + "'");
  c.norm = norm == "batch" ? NormKind::batch : NormKind::none;
  c.seed = j.at("seed").get<std::uint64_t>();
}

namespace {

EncoderConfig encoder_config(const ModelConfig& c, std::size_t in_channels) {
  auto e = EncoderConfig::make(c.preset, in_channels);
  e.norm = c.norm;
  return e;
}

}  // namespace

template <class T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  // Each component draws from its own stream so that adding one does not
  // perturb the initialization of the others.
  const std::size_t first_in = config.kind == ModelKind::unet_concat ? data::kSarBands + data::kMsiBands
                                                                     : data::kSarBands;
  Rng r_sar(derive_seed(config.seed, "init.enc_sar"));
  enc_sar_ = Encoder<T>(encoder_config(config, first_in), r_sar);
  if (config.dual()) {
    Rng r_msi(derive_seed(config.seed, "init.enc_msi"));
    enc_msi_ = Encoder<T>(encoder_config(config, data::kMsiBands), r_msi);
    Rng r_ffm(derive_seed(config.seed, "init.ffm"));
    fusion_ = FusionModule<T>(config.fusion, enc_sar_.config().channels, r_ffm);
  }
  Rng r_dec(derive_seed(config.seed, "init.dec"));
  dec_ = Decoder<T>(DecoderConfig::make(config.preset), r_dec);
  if (config.dual() && !config.shared_decoder) dec_sar_ = dec_.clone();
}

template <class T>
ModelOutput<T> Model<T>::forward(const Batch<T>& batch, bool training) {
  ModelOutput<T> out;
  if (!config_.dual()) {
    const auto x = config_.kind == ModelKind::unet_concat ? ops::concat_channels(batch.sar, batch.msi) : batch.sar;
    auto pred = dec_.decode(enc_sar_.encode(x, training));
    out.logits_fused = pred.logits;
    out.features_fused = pred.features;
    return out;
  }
  if (batch.sar.dim(2) != batch.msi.dim(2) || batch.sar.dim(3) != batch.msi.dim(3) || batch.sar.dim(0) != batch.msi.dim(0))
    throw std::invalid_argument("SAR " + shape_str(batch.sar.shape()) + " and MSI " + shape_str(batch.msi.shape()) +
                                " are not co-registered");
  const auto ps = enc_sar_.encode(batch.sar, training);
  const auto pm = enc_msi_.encode(batch.msi, training);
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  for (const auto& f : ps) shapes.emplace_back(f.dim(2), f.dim(3));
  std::vector<BasicTensor<T>> masks;
  if (config_.spatial_mask) {
    masks = build_mask_pyramid(batch.validity, shapes, config_.mask_downsample);
  } else {
    for (const auto& [h, w] : shapes) masks.push_back(BasicTensor<T>::full({ps[0].dim(0), 1, h, w}, T(1)));
  }
  FeaturePyramid<T> fused;
  for (std::size_t k = 0; k < kLevels; ++k) {
    auto r = fusion_.fuse(k, ps[k], pm[k], masks[k]);
    fused[k] = r.fused;
    out.smg.push_back(std::move(r.state));
  }
  auto pred = decode_dual(fused, ps, dec_, sar_decoder());
  out.logits_fused = pred.fused.logits;
  out.features_fused = pred.fused.features;
  out.logits_sar = pred.sar.logits;
  out.features_sar = pred.sar.features;
  return out;
}

template <class T>
ParamList<T> Model<T>::parameters() const {
  ParamList<T> out;
  if (!config_.dual()) {
    enc_sar_.collect(out, "enc");
    dec_.collect(out, "dec");
    return out;
  }
  enc_sar_.collect(out, "enc_sar");
  enc_msi_.collect(out, "enc_msi");
  fusion_.collect(out, "ffm");
  if (dec_sar_) {
    dec_.collect(out, "dec_fused");
    dec_sar_->collect(out, "dec_sar");
  } else {
    dec_.collect(out, "dec");
  }
  return out;
}

template <class T>
BufferList<T> Model<T>::buffers() {
  BufferList<T> out;
  if (!config_.dual()) {
    enc_sar_.collect_buffers(out, "enc");
    return out;
  }
  enc_sar_.collect_buffers(out, "enc_sar");
  enc_msi_.collect_buffers(out, "enc_msi");
  return out;
}

template <class T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : parameters()) n += p.numel();
  return n;
}

template class Model<float>;
template class Model<double>;

}  // namespace smagnet::nn

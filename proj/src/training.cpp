#include "smagnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "smagnet/errors.hpp"

namespace smagnet::train {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be finite and >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
  if (!(loss_weight >= 0.0 && loss_weight <= 1.0)) throw ConfigError("train.loss_weight must lie in [0,1]");
  if (crop_size % 32 != 0) throw ConfigError("train.crop_size must be a multiple of 32 (0 = full scene)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"loss_weight", c.loss_weight},
                     {"crop_size", c.crop_size},
                     {"hflip", c.hflip},
                     {"vflip", c.vflip},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.loss_weight = j.at("loss_weight").get<double>();
  c.crop_size = j.at("crop_size").get<std::size_t>();
  c.hflip = j.at("hflip").get<bool>();
  c.vflip = j.at("vflip").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

template <class T>
BasicTensor<T> total_loss(const nn::ModelOutput<T>& out, const BasicTensor<T>& label, double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("loss weight must lie in [0,1], got " + std::to_string(w));
  const auto fused = ops::bce_with_logits(out.logits_fused, label);
  if (!out.logits_sar.defined()) return fused;
  const auto sar = ops::bce_with_logits(out.logits_sar, label);
  return ops::add(ops::affine(sar, static_cast<T>(w), T(0)), ops::affine(fused, static_cast<T>(1.0 - w), T(0)));
}

template <class T>
void adam_step(const nn::ParamList<T>& params, AdamState<T>& state, double lr, double weight_decay) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.numel()) throw std::invalid_argument("optimizer moment shape mismatch for " + params[i].first);
    auto values = p.mutable_data();
    const bool has = p.has_grad();
    const auto g = p.grad();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double gk = (has ? static_cast<double>(g[k]) : 0.0) + weight_decay * static_cast<double>(values[k]);
      const double mk = state.beta1 * static_cast<double>(m[k]) + (1.0 - state.beta1) * gk;
      const double vk = state.beta2 * static_cast<double>(v[k]) + (1.0 - state.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double step = lr * (mk / c1) / (std::sqrt(vk / c2) + state.eps);
      values[k] = static_cast<T>(static_cast<double>(values[k]) - step);
    }
  }
}

AugmentDecision draw_augment(std::size_t height, std::size_t width, Rng& rng, const AugmentConfig& config) {
  AugmentDecision d;
  const std::size_t side = std::min(height, width);
  d.size = config.crop_size == 0 ? side : config.crop_size;
  if (config.crop_size % 32 != 0 || d.size > side)
    throw std::invalid_argument("crop size " + std::to_string(config.crop_size) +
                                " must be a multiple of 32 no larger than the scene");
  if (height > d.size) d.top = rng.index(height - d.size + 1);
  if (width > d.size) d.left = rng.index(width - d.size + 1);
  if (config.hflip) d.hflip = rng.coin();
  if (config.vflip) d.vflip = rng.coin();
  return d;
}

namespace {

template <class V>
V transform_raster(const V& src, std::size_t bands, std::size_t H, std::size_t W, const AugmentDecision& d) {
  const std::size_t S = d.size;
  V out(bands * S * S);
  for (std::size_t b = 0; b < bands; ++b)
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < S; ++j) {
        const std::size_t si = d.top + (d.vflip ? S - 1 - i : i);
        const std::size_t sj = d.left + (d.hflip ? S - 1 - j : j);
        out[(b * S + i) * S + j] = src[(b * H + si) * W + sj];
      }
  return out;
}

}  // namespace

data::Scene apply_augment(const data::Scene& scene, const AugmentDecision& d) {
  const std::size_t H = scene.height, W = scene.width;
  if (d.size == 0 || d.top + d.size > H || d.left + d.size > W)
    throw std::invalid_argument("crop window exceeds scene " + scene.id);
  data::Scene out;
  out.id = scene.id;
  out.height = out.width = d.size;
  out.sar = transform_raster(scene.sar, data::kSarBands, H, W, d);
  out.msi = transform_raster(scene.msi, data::kMsiBands, H, W, d);
  out.validity = transform_raster(scene.validity, 1, H, W, d);
  out.label = transform_raster(scene.label, 1, H, W, d);
  return out;
}

data::Scene augment(const data::Scene& scene, Rng& rng, const AugmentConfig& config) {
  return apply_augment(scene, draw_augment(scene.height, scene.width, rng, config));
}

template <class T>
nn::Batch<T> make_batch(std::span<const data::Scene* const> scenes) {
  if (scenes.empty()) throw std::invalid_argument("empty batch");
  const std::size_t B = scenes.size(), H = scenes[0]->height, W = scenes[0]->width, P = H * W;
  std::vector<T> sar(B * data::kSarBands * P), msi(B * data::kMsiBands * P), val(B * P), lab(B * P);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = *scenes[b];
    if (s.height != H || s.width != W) throw std::invalid_argument("batch scenes differ in size: " + s.id);
    std::copy(s.sar.begin(), s.sar.end(), sar.begin() + static_cast<std::ptrdiff_t>(b * data::kSarBands * P));
    std::copy(s.msi.begin(), s.msi.end(), msi.begin() + static_cast<std::ptrdiff_t>(b * data::kMsiBands * P));
    std::copy(s.validity.begin(), s.validity.end(), val.begin() + static_cast<std::ptrdiff_t>(b * P));
    std::copy(s.label.begin(), s.label.end(), lab.begin() + static_cast<std::ptrdiff_t>(b * P));
  }
  nn::Batch<T> batch;
  batch.sar = BasicTensor<T>::from({B, data::kSarBands, H, W}, std::move(sar));
  batch.msi = BasicTensor<T>::from({B, data::kMsiBands, H, W}, std::move(msi));
  batch.validity = BasicTensor<T>::from({B, 1, H, W}, std::move(val));
  batch.label = BasicTensor<T>::from({B, 1, H, W}, std::move(lab));
  return batch;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss_total,val_loss_sar,val_loss_fused\n";
  os << std::setprecision(9);
  for (const auto& r : history)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_loss_total << ',' << r.val_loss_sar << ','
       << r.val_loss_fused << '\n';
  return os.str();
}

namespace {

std::vector<const data::Scene*> pointers(std::span<const data::Scene> scenes, std::size_t begin, std::size_t end) {
  std::vector<const data::Scene*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&scenes[i]);
  return out;
}

}  // namespace

SplitLosses evaluate_losses(nn::Model<float>& model, std::span<const data::Scene> scenes, std::size_t batch_size,
                            double w) {
  NoGradGuard guard;
  SplitLosses out;
  double n = 0;
  for (std::size_t i = 0; i < scenes.size(); i += batch_size) {
    const auto ptrs = pointers(scenes, i, std::min(scenes.size(), i + batch_size));
    const auto batch = make_batch<float>(ptrs);
    const auto pred = model.forward(batch, false);
    const double k = static_cast<double>(ptrs.size());
    const double fused = ops::bce_with_logits(pred.logits_fused, batch.label).item();
    const double sar = pred.logits_sar.defined() ? ops::bce_with_logits(pred.logits_sar, batch.label).item() : fused;
    out.fused += k * fused;
    out.sar += k * sar;
    n += k;
  }
  if (n > 0) {
    out.fused /= n;
    out.sar /= n;
  }
  out.total = model.config().dual() ? w * out.sar + (1.0 - w) * out.fused : out.fused;
  return out;
}

namespace {

std::vector<float> to_prob(std::span<const float> logits) {
  std::vector<float> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(logits[i]))));
  return p;
}

}  // namespace

std::vector<ScenePrediction> predict(nn::Model<float>& model, std::span<const data::Scene> scenes,
                                     std::size_t batch_size, bool keep_features) {
  NoGradGuard guard;
  std::vector<ScenePrediction> out;
  for (std::size_t i = 0; i < scenes.size(); i += batch_size) {
    const auto ptrs = pointers(scenes, i, std::min(scenes.size(), i + batch_size));
    const auto pred = model.forward(make_batch<float>(ptrs), false);
    const std::size_t P = ptrs[0]->pixels();
    for (std::size_t b = 0; b < ptrs.size(); ++b) {
      ScenePrediction sp;
      sp.prob_fused = to_prob(pred.logits_fused.data().subspan(b * P, P));
      if (pred.logits_sar.defined()) sp.prob_sar = to_prob(pred.logits_sar.data().subspan(b * P, P));
      if (keep_features) {
        const std::size_t C = pred.features_fused.dim(1);
        sp.feature_channels = C;
        const auto ff = pred.features_fused.data().subspan(b * C * P, C * P);
        sp.features_fused.assign(ff.begin(), ff.end());
        if (pred.features_sar.defined()) {
          const auto fs = pred.features_sar.data().subspan(b * C * P, C * P);
          sp.features_sar.assign(fs.begin(), fs.end());
        }
      }
      out.push_back(std::move(sp));
    }
  }
  return out;
}

ThresholdResult select_threshold(std::span<const float> probs, std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size()) throw std::invalid_argument("select_threshold: size mismatch");
  ThresholdResult r;
  std::uint64_t pos = 0;
  for (auto l : labels) {
    if (l > 1) throw std::invalid_argument("select_threshold: labels must be 0/1");
    pos += l;
  }
  if (pos == 0 || pos == labels.size()) {
    r.threshold = 0.5;
    r.degenerate = true;
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const bool p = probs[i] >= 0.5f;
      tp += p && labels[i];
      fp += p && !labels[i];
      fn += !p && labels[i];
    }
    r.iou = tp + fp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    return r;
  }
  // Ascending by probability; a threshold at a unique value u predicts every
  // pixel with p >= u as water.
  std::vector<std::size_t> order(probs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
  std::uint64_t below_pos = 0, below_neg = 0;  // counts with p < current candidate
  std::uint64_t best_num = 0, best_den = 1;
  bool have = false;
  for (std::size_t i = 0; i < order.size();) {
    const float u = probs[order[i]];
    const std::uint64_t tp = pos - below_pos;
    const std::uint64_t fp = (labels.size() - pos) - below_neg;
    const std::uint64_t fn = below_pos;
    const std::uint64_t den = tp + fp + fn;
    // tp/den > best_num/best_den, compared exactly.
    if (!have || static_cast<unsigned __int128>(tp) * best_den > static_cast<unsigned __int128>(best_num) * den) {
      best_num = tp;
      best_den = den;
      r.threshold = u;
      have = true;
    }
    while (i < order.size() && probs[order[i]] == u) {
      if (labels[order[i]]) {
        ++below_pos;
      } else {
        ++below_neg;
      }
      ++i;
    }
  }
  r.iou = static_cast<double>(best_num) / static_cast<double>(best_den);
  return r;
}

namespace {

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> buffers;
  AdamState<float> optimizer;
};

Snapshot take_snapshot(nn::Model<float>& model, const AdamState<float>& opt) {
  Snapshot s;
  for (const auto& [name, p] : model.parameters()) s.params.emplace_back(p.data().begin(), p.data().end());
  for (const auto& [name, b] : model.buffers()) s.buffers.push_back(*b);
  s.optimizer = opt;
  return s;
}

void restore_snapshot(nn::Model<float>& model, const Snapshot& s) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].second.mutable_data();
    std::copy(s.params[i].begin(), s.params[i].end(), dst.begin());
  }
  auto buffers = model.buffers();
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].second = s.buffers[i];
}

std::vector<data::Scene> normalized_split(const data::Dataset& d, const std::string& name) {
  auto scenes = d.split(name);
  for (auto& s : scenes) s = data::normalize(s, d.stats, d.params.fill_value);
  return scenes;
}

}  // namespace

TrainResult fit(nn::Model<float>& model, const TrainConfig& config, const data::Dataset& dataset,
                const EpochCallback& on_epoch) {
  config.validate();
  const auto train_set = normalized_split(dataset, "train");
  const auto val_set = normalized_split(dataset, "val");
  if (train_set.empty() || val_set.empty()) throw DataError("training needs non-empty train and val splits");

  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng augment_rng(derive_seed(config.seed, "augment"));
  const AugmentConfig aug{config.crop_size, config.hflip, config.vflip};
  const auto params = model.parameters();

  TrainResult result;
  AdamState<float> opt;
  Snapshot best;
  bool have_best = false;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    // Fisher-Yates with our own index draws keeps the order portable.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.index(i)]);
    double loss_sum = 0;
    std::size_t seen = 0, batch_index = 0;
    for (std::size_t i = 0; i < order.size(); i += config.batch_size, ++batch_index) {
      std::vector<data::Scene> augmented;
      const std::size_t end = std::min(order.size(), i + config.batch_size);
      for (std::size_t k = i; k < end; ++k) augmented.push_back(augment(train_set[order[k]], augment_rng, aug));
      std::vector<const data::Scene*> ptrs;
      for (const auto& s : augmented) ptrs.push_back(&s);
      const auto batch = make_batch<float>(ptrs);
      for (auto [name, p] : params) p.zero_grad();
      const auto out = model.forward(batch, true);
      const auto loss = total_loss(out, batch.label, config.loss_weight);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batch_index + 1));
      backward(loss);
      adam_step(params, opt, config.lr, config.weight_decay);
      loss_sum += value * static_cast<double>(ptrs.size());
      seen += ptrs.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    const auto val = evaluate_losses(model, val_set, config.batch_size, config.loss_weight);
    if (!std::isfinite(val.total))
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    rec.val_loss_total = val.total;
    rec.val_loss_sar = val.sar;
    rec.val_loss_fused = val.fused;
    result.history.push_back(rec);
    if (!have_best || val.total < result.best_val_loss) {
      have_best = true;
      result.best_epoch = epoch;
      result.best_val_loss = val.total;
      best = take_snapshot(model, opt);
    }
    if (on_epoch) on_epoch(rec);
  }
  restore_snapshot(model, best);
  result.optimizer = best.optimizer;

  const auto val_pred = predict(model, val_set, config.batch_size);
  std::vector<float> probs;
  std::vector<std::uint8_t> labels;
  for (std::size_t i = 0; i < val_set.size(); ++i) {
    probs.insert(probs.end(), val_pred[i].prob_fused.begin(), val_pred[i].prob_fused.end());
    labels.insert(labels.end(), val_set[i].label.begin(), val_set[i].label.end());
  }
  result.threshold = select_threshold(probs, labels);
  return result;
}

io::Container make_checkpoint(nn::Model<float>& model, const TrainConfig& config, const TrainResult& result) {
  io::Container c;
  c.meta["format"] = "smagnet-checkpoint";
  c.meta["version"] = 1;
  c.meta["model"] = model.config();
  c.meta["train"] = config;
  c.meta["epoch"] = result.best_epoch;
  c.meta["best_val_loss"] = result.best_val_loss;
  c.meta["threshold"] = result.threshold.threshold;
  c.meta["threshold_degenerate"] = result.threshold.degenerate;
  c.meta["val_iou_at_threshold"] = result.threshold.iou;
  c.meta["adam_step"] = result.optimizer.step;
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    c.put(name, p);
    if (i < result.optimizer.m.size()) {
      c.put("adam.m." + name, p.shape(), result.optimizer.m[i]);
      c.put("adam.v." + name, p.shape(), result.optimizer.v[i]);
    }
  }
  for (const auto& [name, b] : model.buffers()) c.put(name, {b->size()}, *b);
  return c;
}

void restore_parameters(nn::Model<float>& model, const io::Container& checkpoint) {
  std::size_t expected = 0;
  for (auto [name, p] : model.parameters()) {
    const auto& raw = checkpoint.get(name);
    if (raw.dtype != io::DType::f32 || raw.shape != p.shape())
      throw DataError("checkpoint entry '" + name + "' has shape " + shape_str(raw.shape) + ", model expects " +
                      shape_str(p.shape()));
    auto dst = p.mutable_data();
    std::copy(raw.f32.begin(), raw.f32.end(), dst.begin());
    ++expected;
  }
  for (const auto& [name, b] : model.buffers()) {
    const auto& raw = checkpoint.get(name);
    if (raw.dtype != io::DType::f32 || raw.f32.size() != b->size())
      throw DataError("checkpoint buffer '" + name + "' has the wrong size");
    *b = raw.f32;
    ++expected;
  }
  std::size_t present = 0;
  for (const auto& [key, t] : checkpoint.tensors)
    if (key.rfind("adam.", 0) != 0) ++present;
  if (present != expected)
    throw DataError("checkpoint has " + std::to_string(present) + " model entries, model expects " +
                    std::to_string(expected));
}

nn::Model<float> load_model(const io::Container& checkpoint) {
  nn::ModelConfig config;
  try {
    if (checkpoint.meta.at("format").get<std::string>() != "smagnet-checkpoint")
      throw DataError("not a model checkpoint");
    config = checkpoint.meta.at("model").get<nn::ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint metadata: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  nn::Model<float> model(config);
  restore_parameters(model, checkpoint);
  return model;
}

template BasicTensor<float> total_loss(const nn::ModelOutput<float>&, const BasicTensor<float>&, double);
template BasicTensor<double> total_loss(const nn::ModelOutput<double>&, const BasicTensor<double>&, double);
template void adam_step(const nn::ParamList<float>&, AdamState<float>&, double, double);
template void adam_step(const nn::ParamList<double>&, AdamState<double>&, double, double);
template nn::Batch<float> make_batch(std::span<const data::Scene* const>);
template nn::Batch<double> make_batch(std::span<const data::Scene* const>);

}  // namespace smagnet::train

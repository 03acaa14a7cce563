#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smagnet/dataset.hpp"
#include "smagnet/model.hpp"
#include "smagnet/rng.hpp"
#include "smagnet/serialize.hpp"

namespace smagnet::train {

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 0.0;
  std::size_t batch_size = 8;
  std::size_t epochs = 60;
  double loss_weight = 0.5;  // weight of the SAR-head term
  std::size_t crop_size = 0;  // 0 = full scene
  bool hflip = true;
  bool vflip = true;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// w*BCE(sar) + (1-w)*BCE(fused); single-head models use BCE(fused) alone.
template <class T>
BasicTensor<T> total_loss(const nn::ModelOutput<T>& out, const BasicTensor<T>& label, double w);

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;  // parallel to the parameter list
};

// Bias-corrected Adam on every parameter's accumulated gradient. Weight decay
// is added to the gradient (L2). Parameters without a gradient count as zero.
template <class T>
void adam_step(const nn::ParamList<T>& params, AdamState<T>& state, double lr, double weight_decay = 0.0);

struct AugmentConfig {
  std::size_t crop_size = 0;
  bool hflip = true;
  bool vflip = true;
};

struct AugmentDecision {
  std::size_t top = 0, left = 0, size = 0;
  bool hflip = false, vflip = false;
};

AugmentDecision draw_augment(std::size_t height, std::size_t width, Rng& rng, const AugmentConfig& config);
data::Scene apply_augment(const data::Scene& scene, const AugmentDecision& d);
// The same crop window and flips applied to every raster of the scene.
data::Scene augment(const data::Scene& scene, Rng& rng, const AugmentConfig& config);

// Stacks equally sized (normalized) scenes into network inputs.
template <class T>
nn::Batch<T> make_batch(std::span<const data::Scene* const> scenes);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss_total = 0;
  double val_loss_sar = 0;
  double val_loss_fused = 0;
};

std::string history_csv(const std::vector<EpochRecord>& history);

struct SplitLosses {
  double total = 0, sar = 0, fused = 0;
};

// Mean per-pixel losses over a split in inference mode.
SplitLosses evaluate_losses(nn::Model<float>& model, std::span<const data::Scene> scenes, std::size_t batch_size,
                            double w);

// Fused-head (primary) and SAR-head probabilities per scene, inference mode.
struct ScenePrediction {
  std::vector<float> prob_fused;
  std::vector<float> prob_sar;  // empty for single-head models
  std::vector<float> features_fused, features_sar;  // only when requested
  std::size_t feature_channels = 0;
};

std::vector<ScenePrediction> predict(nn::Model<float>& model, std::span<const data::Scene> scenes,
                                     std::size_t batch_size, bool keep_features = false);

struct ThresholdResult {
  double threshold = 0.5;
  double iou = 0;
  bool degenerate = false;  // labels were all one class
};

// Maximizes IoU of (prob >= t) over the unique probabilities; ties go to the
// smallest threshold.
ThresholdResult select_threshold(std::span<const float> probs, std::span<const std::uint8_t> labels);

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  AdamState<float> optimizer;  // state at the best epoch
  ThresholdResult threshold;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place; on return the model holds the parameters of the epoch with
// the lowest total validation loss and the threshold is selected on val.
// `dataset` is raw; normalization uses its stored statistics.
TrainResult fit(nn::Model<float>& model, const TrainConfig& config, const data::Dataset& dataset,
                const EpochCallback& on_epoch = {});

// Checkpoint container: parameters and buffers under their model keys, Adam
// moments under adam.m.<key> / adam.v.<key>, everything else in metadata.
io::Container make_checkpoint(nn::Model<float>& model, const TrainConfig& config, const TrainResult& result);
nn::Model<float> load_model(const io::Container& checkpoint);
void restore_parameters(nn::Model<float>& model, const io::Container& checkpoint);

}  // namespace smagnet::train

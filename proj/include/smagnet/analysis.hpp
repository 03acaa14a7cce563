#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smagnet/dataset.hpp"
#include "smagnet/metrics.hpp"
#include "smagnet/model.hpp"
#include "smagnet/rng.hpp"
#include "smagnet/serialize.hpp"

namespace smagnet::eval {

enum class MissingPattern { band, blobs };

MissingPattern parse_pattern(const std::string& name);
std::string pattern_name(MissingPattern p);

// Removes MSI observations: `band` blanks a left-anchored region of
// floor(ratio*H*W) pixels in column-major order; `blobs` blanks random discs
// until that many pixels are covered. Pixels already invalid stay invalid.
// Blanked MSI values become `fill`; SAR and label are untouched.
data::Scene inject_missing(const data::Scene& scene, double ratio, MissingPattern pattern, Rng& rng,
                           float fill = 0.0f);

// (nir - red) / (nir + red), 0 where nir + red <= eps.
std::vector<float> ndvi(std::span<const float> red, std::span<const float> nir, double eps = 1e-6);

// Bin edges lo, lo+width, ..., hi.
std::vector<double> uniform_edges(double lo, double hi, double width);

struct Histogram {
  std::vector<double> edges;
  std::vector<std::uint64_t> fn, fp;

  std::string csv() const;
  Histogram& operator+=(const Histogram& o);
};

// FN/FP counts per bin of `index` over pixels with valid != 0. Values outside
// the edges land in the first or last bin; the last bin is closed.
Histogram misclass_histogram(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                             std::span<const float> index, std::span<const std::uint8_t> valid,
                             std::span<const double> edges);

std::vector<std::uint8_t> binarize(std::span<const float> prob, double threshold);

struct SceneEval {
  std::string id;
  ConfusionCounts fused, sar;  // sar is zero for single-head models
  MetricReport metrics() const { return eval::metrics(fused); }
};

struct EvalResult {
  double threshold = 0.5;
  std::vector<SceneEval> scenes;
  ConfusionCounts fused, sar;
  Histogram hist_ndvi, hist_nir;
  std::string per_scene_csv() const;
  nlohmann::json summary(bool dual) const;
};

// Evaluates raw scenes (normalized here with `stats`).
EvalResult evaluate(nn::Model<float>& model, std::span<const data::Scene> raw_scenes, const data::NormStats& stats,
                    float fill, double threshold, std::size_t batch_size = 8);

struct SweepPoint {
  double ratio = 0;
  double mean_iou = 0, std_iou = 0;
  std::vector<double> seed_iou;                     // pooled IoU per injection seed
  std::vector<std::vector<ConfusionCounts>> counts;  // [seed][scene]
};

struct SweepResult {
  MissingPattern pattern = MissingPattern::band;
  std::vector<std::string> scene_ids;
  std::vector<SweepPoint> points;  // ascending ratio
  double delta() const;            // IoU(first) - IoU(last)
  std::string csv() const;
  std::string per_scene_csv() const;
};

// Same model and threshold at every ratio. Band injection is deterministic,
// so it runs a single seed.
SweepResult robustness_sweep(nn::Model<float>& model, std::span<const data::Scene> raw_scenes,
                             const data::NormStats& stats, float fill, double threshold, std::vector<double> ratios,
                             MissingPattern pattern, std::uint64_t seed, std::size_t seeds = 3);

struct Diagnostics {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<nn::SmgLevel<float>> smg;
  std::vector<float> features_fused, features_sar;  // [C,H,W] pre-head decoder outputs
  std::vector<float> mse;                           // [H,W], mean over channels
  std::vector<float> prob_fused, prob_sar;

  io::Container to_container() const;
};

// Per-pixel mean over channels of (a - b)^2 for [C,H,W] maps.
std::vector<float> mse_map(std::span<const float> a, std::span<const float> b, std::size_t channels);

// `scene` is raw; dual-head models only.
Diagnostics diagnose(nn::Model<float>& model, const data::Scene& scene, const data::NormStats& stats, float fill);

}  // namespace smagnet::eval

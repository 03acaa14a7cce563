#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace smagnet::data {

inline constexpr std::size_t kSarBands = 2;  // VV, VH
inline constexpr std::size_t kMsiBands = 4;  // Red, Green, Blue, NIR
inline constexpr std::size_t kRed = 0;
inline constexpr std::size_t kNir = 3;
inline constexpr int kFormatVersion = 1;

// One co-registered sample. Rasters are band-major [bands, H, W].
struct Scene {
  std::string id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> sar;                // backscatter in dB-like units
  std::vector<float> msi;                // reflectance in [0,1], fill where invalid
  std::vector<std::uint8_t> validity;    // 1 = MSI observed
  std::vector<std::uint8_t> label;       // 1 = water

  std::size_t pixels() const { return height * width; }
  double water_fraction() const;
  double valid_fraction() const;
  bool operator==(const Scene&) const = default;
};

struct GenParams {
  std::size_t size = 64;
  double water_min = 0.05;
  double water_max = 0.45;
  double speckle_shape = 4.0;
  double water_offset_db = -8.0;
  double nir_absorption = 0.35;
  double cloud_min = 0.0;
  double cloud_max = 0.4;
  // MSI value stored at pixels with validity 0 (raw and normalized space).
  float fill_value = 0.0f;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const GenParams& p);
void from_json(const nlohmann::json& j, GenParams& p);

// Deterministic in (seed, params). Throws DataError naming the seed when the
// label threshold search cannot reach the sampled water fraction.
Scene generate_scene(std::uint64_t seed, const GenParams& params, std::string id = {});

// `count` scenes with ids s0000.. and child seeds derived from params.seed.
std::vector<Scene> generate_corpus(const GenParams& params, std::size_t count);

struct NormStats {
  std::array<double, kSarBands + kMsiBands> mean{};
  std::array<double, kSarBands + kMsiBands> std{};
};

inline constexpr double kStdFloor = 1e-6;

// SAR bands over all pixels, MSI bands over valid pixels only.
NormStats compute_norm_stats(std::span<const Scene> scenes);

// Band-wise standardization; invalid MSI pixels are set to `fill`.
Scene normalize(const Scene& scene, const NormStats& stats, float fill = 0.0f);

struct SplitManifest {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
  bool stratified = true;
  std::string warning;
  std::size_t total() const { return train.size() + val.size() + test.size(); }
};

// 6:2:2 split (floor for val/test, remainder to train), stratified on
// water-fraction quintile.
SplitManifest stratified_split(std::span<const Scene> scenes, std::uint64_t seed);

struct Dataset {
  GenParams params;
  std::vector<Scene> scenes;
  SplitManifest manifest;
  NormStats stats;

  const Scene& find(const std::string& id) const;
  std::vector<Scene> split(const std::string& name) const;
};

// generate -> split -> stats; a pure function of params and count.
Dataset build_dataset(const GenParams& params, std::size_t count);

void write_dataset(const Dataset& dataset, const std::string& dir);
Dataset read_dataset(const std::string& dir);

}  // namespace smagnet::data

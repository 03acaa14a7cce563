#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smagnet/dataset.hpp"
#include "smagnet/model.hpp"
#include "smagnet/training.hpp"

namespace smagnet {

struct DataSection {
  std::string dir;  // empty: generate in memory from the parameters below
  std::size_t scenes = 384;
  data::GenParams params = [] {
    data::GenParams p;
    p.seed = 7;
    return p;
  }();
};

struct EvalSection {
  std::size_t batch_size = 8;
  std::vector<double> ratios{0, 25, 50, 75, 100};  // percent
  std::string pattern = "band";
  std::size_t sweep_seeds = 3;  // blobs pattern only
  std::uint64_t seed = 0;       // injection stream
};

// Experiment description with sections data / model / train / eval. Every key
// has a default; unknown keys and mistyped values raise ConfigError.
struct RunConfig {
  DataSection data;
  nn::ModelConfig model;
  train::TrainConfig train;
  EvalSection eval;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  void validate() const;
};

}  // namespace smagnet

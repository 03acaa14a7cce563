#pragma once

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smagnet/analysis.hpp"
#include "smagnet/config.hpp"
#include "smagnet/stats.hpp"

// Run-directory workflows. Each writes its artifacts atomically into the run
// directory and records their checksums in run.json.
namespace smagnet::experiment {

using Log = std::function<void(const std::string&)>;

data::Dataset gen_data(const std::string& out_dir, std::size_t scenes, std::size_t size, std::uint64_t seed);

// data.dir when set, otherwise generated in memory from the data section.
data::Dataset load_data(const RunConfig& config);

// config.json, history.csv, checkpoint.bin, run.json.
train::TrainResult train_run(const RunConfig& config, const std::string& out_dir, const Log& log = {});

struct LoadedRun {
  RunConfig config;
  io::Container checkpoint;
  nn::Model<float> model;
  data::NormStats stats;
  double threshold = 0.5;
};

LoadedRun load_run(const std::string& run_dir);

// eval.json, per_scene.csv, hist_ndvi.csv, hist_nir.csv (test split).
eval::EvalResult eval_run(const std::string& run_dir, const std::string& data_dir);

// sweep.csv, sweep_per_scene.csv. Ratios in percent.
eval::SweepResult sweep_run(const std::string& run_dir, const std::string& data_dir, const std::vector<double>& ratios,
                            eval::MissingPattern pattern);

// diagnostics_<scene>.bin with smg.levelK.{gate,mask,smg}, mse, features.*.
eval::Diagnostics diagnose_run(const std::string& run_dir, const std::string& scene_id,
                               const std::string& data_dir = {});

// Mann-Whitney U on one column of two per-scene CSV files.
eval::MannWhitneyResult compare_columns(const std::string& csv_a, const std::string& csv_b, const std::string& column);
std::vector<double> read_csv_column(const std::string& path, const std::string& column);

// One row per run directory (metrics, sweep endpoints, ablation switches).
std::string report(const std::vector<std::string>& run_dirs);

}  // namespace smagnet::experiment
